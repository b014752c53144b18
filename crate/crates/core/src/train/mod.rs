//! Optimization, early stopping, patient-level cross-validation and the
//! five compared variants.

pub mod adam;
pub mod metrics;
pub mod split;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::config_hash;
use crate::model::{
    loss, loss_and_gradients, loss_grad_logit, predict_inputs, sigmoid, Fusion, ModelInput, ModelParams,
};
use crate::quality::{QualityConfig, QualityMeasurement};
use crate::rng::{derive_seed, keyed_rng};
use crate::volume::CasePair;

pub use adam::{adam_step, AdamState};
pub use metrics::{auroc, brier, population_sd, reliability_bins, spearman, ReliabilityBin};
pub use split::kfold_split;

pub const RELIABILITY_BINS: usize = 10;
pub const TOPO_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AppOnly,
    DeltaOnly,
    TopoOnly,
    Topogate,
    GateAllFeatures,
}

impl Variant {
    /// Report row order.
    pub const ALL: [Variant; 5] = [
        Variant::AppOnly,
        Variant::DeltaOnly,
        Variant::TopoOnly,
        Variant::Topogate,
        Variant::GateAllFeatures,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AppOnly => "app_only",
            Variant::DeltaOnly => "delta_only",
            Variant::TopoOnly => "topo_only",
            Variant::Topogate => "topogate",
            Variant::GateAllFeatures => "gate_all_features",
        }
    }

    /// Network fusion mode, or `None` for the topology-feature logistic model.
    pub fn fusion(self) -> Option<Fusion> {
        match self {
            Variant::AppOnly => Some(Fusion::AppOnly),
            Variant::DeltaOnly => Some(Fusion::DeltaOnly),
            Variant::TopoOnly => None,
            Variant::Topogate => Some(Fusion::Gated),
            Variant::GateAllFeatures => Some(Fusion::Concat),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub k_folds: usize,
    pub seed: u64,
    pub lambda_brier: f64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            max_epochs: 200,
            patience: 10,
            k_folds: 5,
            seed: 42,
            lambda_brier: crate::model::DEFAULT_LAMBDA_BRIER,
            variant: Variant::Topogate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (!(self.learning_rate > 0.0 && self.learning_rate.is_finite()), "learning_rate must be > 0"),
            (self.batch_size < 1, "batch_size must be >= 1"),
            (self.max_epochs < 1, "max_epochs must be >= 1"),
            (self.patience < 1, "patience must be >= 1"),
            (self.k_folds < 2, "k_folds must be >= 2"),
            (!(self.lambda_brier >= 0.0 && self.lambda_brier.is_finite()), "lambda_brier must be >= 0"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

/// A case ready for training: network inputs, frozen quality and the
/// topological summary features.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub input: ModelInput,
    pub patient_id: String,
    pub measurement: QualityMeasurement,
}

impl PreparedCase {
    pub fn new(pair: &CasePair, measurement: QualityMeasurement, cfg: &QualityConfig) -> Self {
        Self {
            input: ModelInput::from_pair(pair, measurement.vector(cfg)),
            patient_id: pair.patient_id.clone(),
            measurement,
        }
    }

    pub fn label(&self) -> u8 {
        self.input.label
    }

    pub fn case_id(&self) -> &str {
        &self.input.case_id
    }

    /// `[q_topo, W_inf, diagram points, total persistence, max persistence]`.
    pub fn topo_features(&self) -> [f64; TOPO_FEATURES] {
        let t = &self.measurement.topo;
        [
            self.input.quality.q_topo,
            t.bottleneck,
            t.fu_points as f64,
            t.fu_total_persistence,
            t.fu_max_persistence,
        ]
    }
}

/// Measure every pair and build training cases. With `calibrate`, the
/// label-free scales of `cfg` are first fitted to this set of measurements.
pub fn prepare_cases(pairs: &[CasePair], cfg: &QualityConfig, calibrate: bool) -> Result<(Vec<PreparedCase>, QualityConfig)> {
    cfg.validate()?;
    let measurements = pairs
        .iter()
        .map(|p| QualityMeasurement::measure(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let cfg = if calibrate { cfg.calibrated(&measurements) } else { *cfg };
    let cases = pairs
        .iter()
        .zip(measurements)
        .map(|(p, m)| PreparedCase::new(p, m, &cfg))
        .collect();
    Ok((cases, cfg))
}

/// Logistic regression on z-scored topological features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoLogistic {
    pub mean: [f64; TOPO_FEATURES],
    pub scale: [f64; TOPO_FEATURES],
    pub weight: [f64; TOPO_FEATURES],
    pub bias: f64,
}

impl TopoLogistic {
    /// Standardization fitted on `train`; zero weights.
    pub fn fit_scaling(train: &[&PreparedCase]) -> Self {
        let n = train.len() as f64;
        let mut mean = [0.0; TOPO_FEATURES];
        let mut scale = [1.0; TOPO_FEATURES];
        for c in train {
            for (m, f) in mean.iter_mut().zip(c.topo_features()) {
                *m += f / n;
            }
        }
        for (j, s) in scale.iter_mut().enumerate() {
            let var = train.iter().map(|c| (c.topo_features()[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                *s = var.sqrt();
            }
        }
        Self {
            mean,
            scale,
            weight: [0.0; TOPO_FEATURES],
            bias: 0.0,
        }
    }

    fn standardized(&self, c: &PreparedCase) -> [f64; TOPO_FEATURES] {
        let f = c.topo_features();
        std::array::from_fn(|j| (f[j] - self.mean[j]) / self.scale[j])
    }

    pub fn prob(&self, c: &PreparedCase) -> f64 {
        let z = self.standardized(c);
        sigmoid(self.bias + self.weight.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedModel {
    Network(ModelParams),
    Topo(TopoLogistic),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub prob: f64,
    /// Gate weight on the appearance branch; `None` without a gate.
    pub alpha: Option<f64>,
}

impl TrainedModel {
    pub fn predict(&self, cases: &[&PreparedCase]) -> Result<Vec<CasePrediction>> {
        match self {
            TrainedModel::Network(m) => {
                let inputs: Vec<&ModelInput> = cases.iter().map(|c| &c.input).collect();
                let preds = predict_inputs(m, &inputs)?;
                let gated = m.fusion != Fusion::Concat;
                Ok(preds
                    .into_iter()
                    .map(|p| CasePrediction {
                        prob: p.prob,
                        alpha: gated.then_some(p.alpha),
                    })
                    .collect())
            }
            TrainedModel::Topo(t) => Ok(cases
                .iter()
                .map(|c| CasePrediction {
                    prob: t.prob(c),
                    alpha: None,
                })
                .collect()),
        }
    }
}

trait Learner: Clone {
    fn adam_state(&self) -> AdamState;
    /// One optimizer step on `batch`; returns the batch loss before the step.
    fn step(&mut self, batch: &[&PreparedCase], state: &mut AdamState, cfg: &TrainConfig) -> Result<f64>;
    fn probs(&self, cases: &[&PreparedCase]) -> Result<Vec<f64>>;
}

impl Learner for ModelParams {
    fn adam_state(&self) -> AdamState {
        AdamState::for_tensors(&self.tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>())
    }

    fn step(&mut self, batch: &[&PreparedCase], state: &mut AdamState, cfg: &TrainConfig) -> Result<f64> {
        let inputs: Vec<&ModelInput> = batch.iter().map(|c| &c.input).collect();
        let out = loss_and_gradients(self, &inputs, cfg.lambda_brier)?;
        out.stats.apply(self);
        let grads: Vec<&[f64]> = out.grads.tensors().into_iter().map(|(_, t)| t).collect();
        let mut params: Vec<&mut [f64]> = self.tensors_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut params, &grads, state, cfg.learning_rate)?;
        Ok(out.loss)
    }

    fn probs(&self, cases: &[&PreparedCase]) -> Result<Vec<f64>> {
        let inputs: Vec<&ModelInput> = cases.iter().map(|c| &c.input).collect();
        Ok(predict_inputs(self, &inputs)?.into_iter().map(|p| p.prob).collect())
    }
}

impl Learner for TopoLogistic {
    fn adam_state(&self) -> AdamState {
        AdamState::new(&[TOPO_FEATURES, 1])
    }

    fn step(&mut self, batch: &[&PreparedCase], state: &mut AdamState, cfg: &TrainConfig) -> Result<f64> {
        let n = batch.len() as f64;
        let mut gw = [0.0; TOPO_FEATURES];
        let mut gb = 0.0;
        let mut total = 0.0;
        for c in batch {
            let z = self.standardized(c);
            let p = self.prob(c);
            total += loss(p, c.label(), cfg.lambda_brier);
            let ds = loss_grad_logit(p, c.label(), cfg.lambda_brier) / n;
            gb += ds;
            for (g, v) in gw.iter_mut().zip(z) {
                *g += ds * v;
            }
        }
        let gb = [gb];
        let mut params: Vec<&mut [f64]> = vec![&mut self.weight, std::slice::from_mut(&mut self.bias)];
        adam_step(&mut params, &[&gw, &gb], state, cfg.learning_rate)?;
        Ok(total / n)
    }

    fn probs(&self, cases: &[&PreparedCase]) -> Result<Vec<f64>> {
        Ok(cases.iter().map(|c| self.prob(c)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
}

/// Validation AUROC, or minus the validation loss when the validation set
/// holds a single class.
fn selection_score(log: &EpochLog) -> f64 {
    log.val_auroc.unwrap_or(-log.val_loss)
}

fn fit<L: Learner>(mut model: L, train: &[&PreparedCase], val: &[&PreparedCase], cfg: &TrainConfig) -> Result<(L, History)> {
    let mut state = model.adam_state();
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let val_labels: Vec<u8> = val.iter().map(|c| c.label()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut keyed_rng(cfg.seed, epoch as u64, "epoch-shuffle"));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedCase> = chunk.iter().map(|&i| train[i]).collect();
            loss_sum += model.step(&batch, &mut state, cfg)? * batch.len() as f64;
        }
        let probs = model.probs(val)?;
        let val_loss = probs
            .iter()
            .zip(&val_labels)
            .map(|(&p, &y)| loss(p, y, cfg.lambda_brier))
            .sum::<f64>()
            / val.len() as f64;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auroc: auroc(&probs, &val_labels).ok(),
            val_loss,
        };
        let score = selection_score(&log);
        epochs.push(log);
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((best, History { epochs, best_epoch }))
}

fn check_disjoint(train: &[&PreparedCase], val: &[&PreparedCase]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptySplit("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation set".into()));
    }
    let train_patients: BTreeSet<&str> = train.iter().map(|c| c.patient_id.as_str()).collect();
    if let Some(c) = val.iter().find(|c| train_patients.contains(c.patient_id.as_str())) {
        return Err(Error::Config(format!(
            "patient {} appears in both training and validation sets",
            c.patient_id
        )));
    }
    Ok(())
}

/// Train the configured variant with early stopping on validation AUROC and
/// restore the best epoch's parameters.
pub fn train_variant(train: &[&PreparedCase], val: &[&PreparedCase], cfg: &TrainConfig) -> Result<(TrainedModel, History)> {
    cfg.validate()?;
    check_disjoint(train, val)?;
    match cfg.variant.fusion() {
        Some(fusion) => {
            let edge = train[0].input.dims[0];
            let init = ModelParams::init(fusion, edge, derive_seed(cfg.seed, 0, "init"));
            let (m, h) = fit(init, train, val, cfg)?;
            Ok((TrainedModel::Network(m), h))
        }
        None => {
            let (m, h) = fit(TopoLogistic::fit_scaling(train), train, val, cfg)?;
            Ok((TrainedModel::Topo(m), h))
        }
    }
}

/// Hold out one patient-level fold of `pool` for early stopping; returns (train, val).
pub fn inner_split<'a>(pool: &[&'a PreparedCase], k: usize, seed: u64) -> Result<(Vec<&'a PreparedCase>, Vec<&'a PreparedCase>)> {
    let patients: Vec<String> = pool.iter().map(|c| c.patient_id.clone()).collect();
    let labels: Vec<u8> = pool.iter().map(|c| c.label()).collect();
    let folds = kfold_split(&patients, &labels, k, seed)?;
    let val_set: BTreeSet<usize> = folds[0].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, c) in pool.iter().enumerate() {
        if val_set.contains(&i) {
            val.push(*c);
        } else {
            train.push(*c);
        }
    }
    Ok((train, val))
}

/// Train on all of `cases` (with an inner early-stopping split).
pub fn fit_full(cases: &[PreparedCase], cfg: &TrainConfig) -> Result<(TrainedModel, History)> {
    let pool: Vec<&PreparedCase> = cases.iter().collect();
    let (train, val) = inner_split(&pool, cfg.k_folds, derive_seed(cfg.seed, 0, "inner-full"))?;
    train_variant(&train, &val, cfg)
}

/// Out-of-fold prediction for one case; the row format of the predictions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OofPrediction {
    pub variant: Variant,
    pub case_id: String,
    pub fold: usize,
    pub y_hat: f64,
    pub alpha: Option<f64>,
    pub q_ct: f64,
    pub q_reg: f64,
    pub q_topo: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub n_cases: usize,
    pub per_fold_auroc: Vec<f64>,
    pub auroc_mean: f64,
    /// Population SD across folds.
    pub auroc_sd: f64,
    /// Pooled over all out-of-fold predictions.
    pub brier: f64,
    pub reliability: Vec<ReliabilityBin>,
    pub best_epochs: Vec<usize>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub report: EvalReport,
    /// In cohort order, one per case.
    pub predictions: Vec<OofPrediction>,
    pub histories: Vec<History>,
}

/// Patient-level K-fold cross-validation of `cfg.variant`.
pub fn evaluate_cv(cases: &[PreparedCase], cfg: &TrainConfig) -> Result<CvResult> {
    cfg.validate()?;
    let patients: Vec<String> = cases.iter().map(|c| c.patient_id.clone()).collect();
    let labels: Vec<u8> = cases.iter().map(|c| c.label()).collect();
    let folds = kfold_split(&patients, &labels, cfg.k_folds, cfg.seed)?;
    let mut slots: Vec<Option<OofPrediction>> = vec![None; cases.len()];
    let mut per_fold_auroc = Vec::with_capacity(folds.len());
    let mut histories = Vec::with_capacity(folds.len());
    for (f, test_idx) in folds.iter().enumerate() {
        let test: Vec<&PreparedCase> = test_idx.iter().map(|&i| &cases[i]).collect();
        let test_set: BTreeSet<usize> = test_idx.iter().copied().collect();
        let pool: Vec<&PreparedCase> = (0..cases.len()).filter(|i| !test_set.contains(i)).map(|i| &cases[i]).collect();
        let (train, val) = inner_split(&pool, cfg.k_folds, derive_seed(cfg.seed, f as u64, "inner"))?;
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, f as u64, "fold"),
            ..cfg.clone()
        };
        let (model, history) = train_variant(&train, &val, &fold_cfg)?;
        let preds = model.predict(&test)?;
        let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
        let fold_labels: Vec<u8> = test.iter().map(|c| c.label()).collect();
        per_fold_auroc.push(auroc(&probs, &fold_labels)?);
        for (&i, p) in test_idx.iter().zip(preds) {
            let c = &cases[i];
            let q = c.input.quality;
            slots[i] = Some(OofPrediction {
                variant: cfg.variant,
                case_id: c.case_id().to_string(),
                fold: f,
                y_hat: p.prob,
                alpha: p.alpha,
                q_ct: q.q_ct,
                q_reg: q.q_reg,
                q_topo: q.q_topo,
                label: c.label(),
            });
        }
        histories.push(history);
    }
    let predictions: Vec<OofPrediction> = slots.into_iter().map(|s| s.expect("every case is in one fold")).collect();
    let probs: Vec<f64> = predictions.iter().map(|p| p.y_hat).collect();
    let report = EvalReport {
        variant: cfg.variant,
        n_cases: cases.len(),
        auroc_mean: metrics::mean(&per_fold_auroc),
        auroc_sd: population_sd(&per_fold_auroc),
        per_fold_auroc,
        brier: brier(&probs, &labels)?,
        reliability: reliability_bins(&probs, &labels, RELIABILITY_BINS)?,
        best_epochs: histories.iter().map(|h| h.best_epoch).collect(),
        config_hash: config_hash(cfg),
    };
    Ok(CvResult {
        report,
        predictions,
        histories,
    })
}

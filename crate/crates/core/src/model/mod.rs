//! Dual-view encoders, linear heads, quality gate, composite loss and exact
//! reverse-mode gradients.

pub mod encoder;
pub mod gate;
pub mod gradcheck;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::QualityVector;
use crate::rng::keyed_rng;
use crate::volume::{CasePair, HU_MAX, HU_MIN};

pub use encoder::{
    encoder_backward, encoder_forward, encoder_forward_batch, update_running_stats, BatchStats, ConvBlock,
    EncoderCache, EncoderParams, Mode, FEATURES,
};
pub use gate::{gate_alpha, sigmoid, softplus, softplus_inverse, GateParams};

/// Probability clamp applied before the log in the cross-entropy term.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LAMBDA_BRIER: f64 = 0.5;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Width of the concatenated `[f_app, f_delta, q]` input.
pub const CONCAT_WIDTH: usize = 2 * FEATURES + 3;

/// How the two views are combined into the fused logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `s = alpha g_app + (1 - alpha) g_delta` with the quality gate.
    Gated,
    /// `alpha = 1`: appearance branch only.
    AppOnly,
    /// `alpha = 0`: difference branch only.
    DeltaOnly,
    /// One linear head over `[f_app, f_delta, q]`.
    Concat,
}

impl Fusion {
    fn uses_app(self) -> bool {
        !matches!(self, Fusion::DeltaOnly)
    }

    fn uses_delta(self) -> bool {
        !matches!(self, Fusion::AppOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl Linear {
    pub fn init(width: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            weight: (0..width).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: rng.random_range(-bound..bound),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            weight: vec![0.0; width],
            bias: 0.0,
        }
    }

    pub fn apply(&self, x: &[f64]) -> f64 {
        self.bias + self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn accumulate_grad(&self, x: &[f64], d_out: f64, grads: &mut Linear, d_input: Option<&mut [f64]>) {
        grads.bias += d_out;
        for (g, v) in grads.weight.iter_mut().zip(x) {
            *g += d_out * v;
        }
        if let Some(dx) = d_input {
            for (d, w) in dx.iter_mut().zip(&self.weight) {
                *d += d_out * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub fusion: Fusion,
    /// ROI edge the model was built for.
    pub roi_edge: usize,
    pub app_encoder: EncoderParams,
    pub delta_encoder: EncoderParams,
    pub head_app: Linear,
    pub head_delta: Linear,
    pub head_concat: Linear,
    pub gate: GateParams,
}

impl ModelParams {
    /// Seeded initialization: uniform(+-1/sqrt(fan_in)) weights, unit BN
    /// scale, zero BN shift, zero gate parameters.
    pub fn init(fusion: Fusion, roi_edge: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, 0, "model-init");
        Self {
            fusion,
            roi_edge,
            app_encoder: EncoderParams::init(&mut rng),
            delta_encoder: EncoderParams::init(&mut rng),
            head_app: Linear::init(FEATURES, &mut rng),
            head_delta: Linear::init(FEATURES, &mut rng),
            head_concat: Linear::init(CONCAT_WIDTH, &mut rng),
            gate: GateParams::default(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion,
            roi_edge: self.roi_edge,
            app_encoder: self.app_encoder.zeros_like(),
            delta_encoder: self.delta_encoder.zeros_like(),
            head_app: Linear::zeros(FEATURES),
            head_delta: Linear::zeros(FEATURES),
            head_concat: Linear::zeros(CONCAT_WIDTH),
            gate: GateParams::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.app_encoder.validate()?;
        self.delta_encoder.validate()?;
        if self.head_app.weight.len() != FEATURES
            || self.head_delta.weight.len() != FEATURES
            || self.head_concat.weight.len() != CONCAT_WIDTH
        {
            return Err(Error::ShapeMismatch("head width does not match encoder features".into()));
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order (running statistics excluded).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (prefix, enc) in [("app", &self.app_encoder), ("delta", &self.delta_encoder)] {
            for (bname, b) in [("block1", &enc.block1), ("block2", &enc.block2)] {
                out.push((format!("{prefix}.{bname}.weight"), &b.weight));
                out.push((format!("{prefix}.{bname}.bias"), &b.bias));
                out.push((format!("{prefix}.{bname}.bn_scale"), &b.bn_scale));
                out.push((format!("{prefix}.{bname}.bn_shift"), &b.bn_shift));
            }
        }
        for (name, h) in [
            ("head_app", &self.head_app),
            ("head_delta", &self.head_delta),
            ("head_concat", &self.head_concat),
        ] {
            out.push((format!("{name}.weight"), &h.weight));
            out.push((format!("{name}.bias"), std::slice::from_ref(&h.bias)));
        }
        out.push(("gate.theta".into(), &self.gate.theta));
        out.push(("gate.bias".into(), std::slice::from_ref(&self.gate.bias)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let ModelParams {
            app_encoder,
            delta_encoder,
            head_app,
            head_delta,
            head_concat,
            gate,
            ..
        } = self;
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (prefix, enc) in [("app", app_encoder), ("delta", delta_encoder)] {
            let EncoderParams { block1, block2 } = enc;
            for (bname, b) in [("block1", block1), ("block2", block2)] {
                let ConvBlock {
                    weight,
                    bias,
                    bn_scale,
                    bn_shift,
                    ..
                } = b;
                out.push((format!("{prefix}.{bname}.weight"), weight));
                out.push((format!("{prefix}.{bname}.bias"), bias));
                out.push((format!("{prefix}.{bname}.bn_scale"), bn_scale));
                out.push((format!("{prefix}.{bname}.bn_shift"), bn_shift));
            }
        }
        for (name, h) in [("head_app", head_app), ("head_delta", head_delta), ("head_concat", head_concat)] {
            let Linear { weight, bias } = h;
            out.push((format!("{name}.weight"), weight));
            out.push((format!("{name}.bias"), std::slice::from_mut(bias)));
        }
        let GateParams { theta, bias } = gate;
        out.push(("gate.theta".into(), theta));
        out.push(("gate.bias".into(), std::slice::from_mut(bias)));
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Network-ready view of one case: normalized inputs plus the frozen quality vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub case_id: String,
    pub dims: [usize; 3],
    pub app: Vec<f64>,
    pub delta: Vec<f64>,
    pub quality: QualityVector,
    pub label: u8,
}

const HU_RANGE: f64 = HU_MAX - HU_MIN;

impl ModelInput {
    /// Follow-up intensities map to [0, 1] over the HU clip range; the
    /// difference volume is scaled by the same range.
    pub fn from_pair(pair: &CasePair, quality: QualityVector) -> Self {
        Self {
            case_id: pair.case_id.clone(),
            dims: pair.fu_roi.dims(),
            app: pair.fu_roi.data().iter().map(|&x| (x - HU_MIN) / HU_RANGE).collect(),
            delta: pair.delta.data().iter().map(|&x| x / HU_RANGE).collect(),
            quality,
            label: pair.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob: f64,
    pub alpha: f64,
    pub logit_app: f64,
    pub logit_delta: f64,
    pub fused_logit: f64,
    pub quality: QualityVector,
}

/// `BCE(prob, label) + lambda (prob - label)^2` with the probability clamped for the log.
pub fn loss(prob: f64, label: u8, lambda_brier: f64) -> f64 {
    let y = label as f64;
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) + lambda_brier * (prob - y).powi(2)
}

/// `d loss / d fused_logit` for one case.
pub fn loss_grad_logit(prob: f64, label: u8, lambda_brier: f64) -> f64 {
    let y = label as f64;
    let bce = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&prob) { prob - y } else { 0.0 };
    bce + 2.0 * lambda_brier * (prob - y) * prob * (1.0 - prob)
}

struct BranchPass {
    features: Vec<f64>,
    cache: Option<EncoderCache>,
    stats: Option<BatchStats>,
}

struct BatchPass {
    predictions: Vec<Prediction>,
    app: Option<BranchPass>,
    delta: Option<BranchPass>,
}

fn check_inputs(params: &ModelParams, inputs: &[&ModelInput]) -> Result<[usize; 3]> {
    let first = inputs.first().ok_or(Error::EmptyInput)?;
    let dims = first.dims;
    let edge = params.roi_edge;
    for inp in inputs {
        if inp.dims != [edge; 3] {
            return Err(Error::ShapeMismatch(format!(
                "case {} has ROI {:?}, model expects {edge}^3",
                inp.case_id, inp.dims
            )));
        }
    }
    Ok(dims)
}

fn run_branch(
    enc: &EncoderParams,
    inputs: &[&ModelInput],
    dims: [usize; 3],
    mode: Mode,
    keep: bool,
    pick: impl Fn(&ModelInput) -> &[f64],
) -> Result<BranchPass> {
    let mut flat = Vec::with_capacity(inputs.len() * dims.iter().product::<usize>());
    for inp in inputs {
        flat.extend_from_slice(pick(inp));
    }
    let (features, cache, stats) = encoder_forward_batch(enc, &flat, inputs.len(), dims, mode, keep)?;
    Ok(BranchPass { features, cache, stats })
}

fn forward_pass(params: &ModelParams, inputs: &[&ModelInput], mode: Mode, keep: bool) -> Result<BatchPass> {
    let dims = check_inputs(params, inputs)?;
    let fusion = params.fusion;
    let app = if fusion.uses_app() {
        Some(run_branch(&params.app_encoder, inputs, dims, mode, keep, |i| &i.app)?)
    } else {
        None
    };
    let delta = if fusion.uses_delta() {
        Some(run_branch(&params.delta_encoder, inputs, dims, mode, keep, |i| &i.delta)?)
    } else {
        None
    };
    let mut predictions = Vec::with_capacity(inputs.len());
    for (b, inp) in inputs.iter().enumerate() {
        let fa = app.as_ref().map(|p| &p.features[b * FEATURES..(b + 1) * FEATURES]);
        let fd = delta.as_ref().map(|p| &p.features[b * FEATURES..(b + 1) * FEATURES]);
        let q = inp.quality;
        let (alpha, la, ld, s) = match fusion {
            Fusion::Gated => {
                let la = params.head_app.apply(fa.expect("app features"));
                let ld = params.head_delta.apply(fd.expect("delta features"));
                let a = params.gate.alpha(&q);
                (a, la, ld, a * la + (1.0 - a) * ld)
            }
            Fusion::AppOnly => {
                let la = params.head_app.apply(fa.expect("app features"));
                (1.0, la, 0.0, la)
            }
            Fusion::DeltaOnly => {
                let ld = params.head_delta.apply(fd.expect("delta features"));
                (0.0, 0.0, ld, ld)
            }
            Fusion::Concat => {
                let x = concat_features(fa.expect("app features"), fd.expect("delta features"), &q);
                let s = params.head_concat.apply(&x);
                // No gate: reported as an even split of identical logits.
                (0.5, s, s, s)
            }
        };
        predictions.push(Prediction {
            prob: sigmoid(s),
            alpha,
            logit_app: la,
            logit_delta: ld,
            fused_logit: s,
            quality: q,
        });
    }
    Ok(BatchPass { predictions, app, delta })
}

fn concat_features(fa: &[f64], fd: &[f64], q: &QualityVector) -> Vec<f64> {
    let mut x = Vec::with_capacity(CONCAT_WIDTH);
    x.extend_from_slice(fa);
    x.extend_from_slice(fd);
    x.extend_from_slice(&q.as_array());
    x
}

/// Eval-mode predictions (running batch-norm statistics).
pub fn predict_inputs(params: &ModelParams, inputs: &[&ModelInput]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(inputs.len());
    // Eval mode is per-case independent; chunking only bounds memory.
    for chunk in inputs.chunks(16) {
        out.extend(forward_pass(params, chunk, Mode::Eval, false)?.predictions);
    }
    Ok(out)
}

pub fn predict(params: &ModelParams, pair: &CasePair, q: QualityVector) -> Result<Prediction> {
    let input = ModelInput::from_pair(pair, q);
    Ok(forward_pass(params, &[&input], Mode::Eval, false)?.predictions[0])
}

/// Mean train-mode loss over the batch (batch-norm uses batch statistics; no state is updated).
pub fn batch_loss(params: &ModelParams, inputs: &[&ModelInput], lambda_brier: f64) -> Result<f64> {
    let pass = forward_pass(params, inputs, Mode::Train, false)?;
    Ok(mean_loss(&pass.predictions, inputs, lambda_brier))
}

/// Train-mode loss together with the encoder caches, for kink detection.
pub(crate) fn batch_loss_with_caches(
    params: &ModelParams,
    inputs: &[&ModelInput],
    lambda_brier: f64,
) -> Result<(f64, Vec<EncoderCache>)> {
    let pass = forward_pass(params, inputs, Mode::Train, true)?;
    let loss = mean_loss(&pass.predictions, inputs, lambda_brier);
    let caches = [pass.app, pass.delta].into_iter().flatten().filter_map(|b| b.cache).collect();
    Ok((loss, caches))
}

fn mean_loss(preds: &[Prediction], inputs: &[&ModelInput], lambda_brier: f64) -> f64 {
    preds
        .iter()
        .zip(inputs)
        .map(|(p, i)| loss(p.prob, i.label, lambda_brier))
        .sum::<f64>()
        / preds.len() as f64
}

/// Batch-norm statistics observed during a training step, per used encoder.
#[derive(Debug, Clone)]
pub struct StepStats {
    app: Option<BatchStats>,
    delta: Option<BatchStats>,
}

impl StepStats {
    pub fn apply(&self, params: &mut ModelParams) {
        if let Some(s) = &self.app {
            update_running_stats(&mut params.app_encoder, s);
        }
        if let Some(s) = &self.delta {
            update_running_stats(&mut params.delta_encoder, s);
        }
    }
}

pub struct LossAndGrad {
    pub loss: f64,
    pub grads: ModelParams,
    pub stats: StepStats,
    pub predictions: Vec<Prediction>,
}

/// Mean loss and its exact gradient with respect to every trainable tensor.
/// Quality vectors are constants. Tensors unused by the fusion mode get zero gradient.
pub fn loss_and_gradients(params: &ModelParams, inputs: &[&ModelInput], lambda_brier: f64) -> Result<LossAndGrad> {
    let pass = forward_pass(params, inputs, Mode::Train, true)?;
    let n = inputs.len();
    let loss_value = mean_loss(&pass.predictions, inputs, lambda_brier);
    let mut grads = params.zeros_like();
    let mut d_fa = vec![0.0; n * FEATURES];
    let mut d_fd = vec![0.0; n * FEATURES];

    for (b, (pred, inp)) in pass.predictions.iter().zip(inputs).enumerate() {
        let ds = loss_grad_logit(pred.prob, inp.label, lambda_brier) / n as f64;
        let fa = pass.app.as_ref().map(|p| &p.features[b * FEATURES..(b + 1) * FEATURES]);
        let fd = pass.delta.as_ref().map(|p| &p.features[b * FEATURES..(b + 1) * FEATURES]);
        let dfa = &mut d_fa[b * FEATURES..(b + 1) * FEATURES];
        let dfd = &mut d_fd[b * FEATURES..(b + 1) * FEATURES];
        match params.fusion {
            Fusion::Gated => {
                let a = pred.alpha;
                params.head_app.accumulate_grad(fa.unwrap(), a * ds, &mut grads.head_app, Some(dfa));
                params
                    .head_delta
                    .accumulate_grad(fd.unwrap(), (1.0 - a) * ds, &mut grads.head_delta, Some(dfd));
                let d_alpha = (pred.logit_app - pred.logit_delta) * ds;
                params
                    .gate
                    .accumulate_grad(&pred.quality, d_alpha * a * (1.0 - a), &mut grads.gate);
            }
            Fusion::AppOnly => {
                params.head_app.accumulate_grad(fa.unwrap(), ds, &mut grads.head_app, Some(dfa));
            }
            Fusion::DeltaOnly => {
                params.head_delta.accumulate_grad(fd.unwrap(), ds, &mut grads.head_delta, Some(dfd));
            }
            Fusion::Concat => {
                let x = concat_features(fa.unwrap(), fd.unwrap(), &pred.quality);
                let mut dx = vec![0.0; CONCAT_WIDTH];
                params.head_concat.accumulate_grad(&x, ds, &mut grads.head_concat, Some(&mut dx));
                dfa.copy_from_slice(&dx[..FEATURES]);
                dfd.copy_from_slice(&dx[FEATURES..2 * FEATURES]);
            }
        }
    }
    if let Some(p) = &pass.app {
        encoder_backward(&params.app_encoder, p.cache.as_ref().unwrap(), &d_fa, &mut grads.app_encoder);
    }
    if let Some(p) = &pass.delta {
        encoder_backward(&params.delta_encoder, p.cache.as_ref().unwrap(), &d_fd, &mut grads.delta_encoder);
    }
    let stats = StepStats {
        app: pass.app.and_then(|p| p.stats),
        delta: pass.delta.and_then(|p| p.stats),
    };
    Ok(LossAndGrad {
        loss: loss_value,
        grads,
        stats,
        predictions: pass.predictions,
    })
}

/// Gradient of the mean batch loss, congruent to `params`.
pub fn gradients(params: &ModelParams, batch: &[(&CasePair, QualityVector, u8)], lambda_brier: f64) -> Result<ModelParams> {
    let inputs: Vec<ModelInput> = batch
        .iter()
        .map(|(pair, q, label)| {
            let mut i = ModelInput::from_pair(pair, *q);
            i.label = *label;
            i
        })
        .collect();
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    Ok(loss_and_gradients(params, &refs, lambda_brier)?.grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub roi_edge: usize,
    pub features: usize,
    pub config_hash: String,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            roi_edge: params.roi_edge,
            features: FEATURES,
            config_hash: config_hash.into(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json_atomic(path, self)
    }

    /// Load and check the checkpoint against the expected ROI edge.
    pub fn load(path: &Path, expected_edge: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", ck.format_version)));
        }
        if ck.features != FEATURES {
            return Err(Error::Checkpoint(format!("feature width {} != {FEATURES}", ck.features)));
        }
        if ck.roi_edge != expected_edge || ck.params.roi_edge != expected_edge {
            return Err(Error::Checkpoint(format!(
                "checkpoint ROI edge {} does not match configured {expected_edge}",
                ck.roi_edge
            )));
        }
        ck.params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{add_gaussian_noise, Volume};

    fn random_pair(edge: usize, seed: u64, label: u8) -> CasePair {
        let bl = add_gaussian_noise(&Volume::filled([edge; 3], 1.0, -500.0), 150.0, seed);
        let fu = add_gaussian_noise(&bl, 60.0, seed + 1000);
        CasePair::new(format!("c{seed}"), "p", fu, bl, [0.0; 3], label).unwrap()
    }

    #[test]
    fn loss_values() {
        assert!((loss(0.5, 1, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss(0.5, 1, 1.0) - (std::f64::consts::LN_2 + 0.25)).abs() < 1e-12);
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let best = grid
            .iter()
            .map(|&p| (p, loss(p, 1, 0.5)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(best.0, 1.0);
        assert!(best.1 < 1e-6);
    }

    #[test]
    fn endpoint_fusion_ignores_unused_branch() {
        let mut m = ModelParams::init(Fusion::Gated, 8, 3);
        let pair = random_pair(8, 1, 1);
        let q = QualityVector::new(0.4, 0.6, 0.5);
        let other_delta = pair.fu_roi.map(|x| x + 0.0);
        let bl2 = add_gaussian_noise(&pair.bl_roi, 300.0, 99);
        let pair_b = CasePair::new("c", "p", other_delta, bl2, [0.0; 3], 1).unwrap();

        m.gate.bias = 40.0;
        let a = predict(&m, &pair, q).unwrap();
        let b = predict(&m, &pair_b, q).unwrap();
        assert!((a.prob - b.prob).abs() < 1e-12);
        assert!(a.alpha > 1.0 - 1e-12);

        m.gate.bias = -40.0;
        let fu2 = add_gaussian_noise(&pair.fu_roi, 200.0, 5);
        let bl3 = pair.bl_roi.with_data(
            fu2.data().iter().zip(pair.delta.data()).map(|(f, d)| f - d).collect(),
        )
        .unwrap();
        let pair_c = CasePair::new("c", "p", fu2, bl3, [0.0; 3], 1).unwrap();
        for (d1, d2) in pair.delta.data().iter().zip(pair_c.delta.data()) {
            assert!((d1 - d2).abs() < 1e-9);
        }
        let a = predict(&m, &pair, q).unwrap();
        let c = predict(&m, &pair_c, q).unwrap();
        assert!((a.prob - c.prob).abs() < 1e-9);
    }

    #[test]
    fn recomposition_of_diagnostics() {
        for seed in 0..4 {
            let mut m = ModelParams::init(Fusion::Gated, 8, seed);
            m.gate.theta = [0.3, -0.5, 1.1];
            m.gate.bias = 0.2;
            let pair = random_pair(8, seed + 10, 0);
            let p = predict(&m, &pair, QualityVector::new(0.2, 0.7, 0.9)).unwrap();
            let s = p.alpha * p.logit_app + (1.0 - p.alpha) * p.logit_delta;
            assert!((p.fused_logit - s).abs() < 1e-9);
            assert!((p.prob - sigmoid(s)).abs() < 1e-9);
            assert!(p.alpha > 0.0 && p.alpha < 1.0);
        }
    }

    #[test]
    fn zero_heads_give_zero_gate_bias_gradient() {
        let mut m = ModelParams::init(Fusion::Gated, 8, 7);
        m.head_app = Linear::zeros(FEATURES);
        m.head_delta = Linear::zeros(FEATURES);
        let pairs = [random_pair(8, 1, 0), random_pair(8, 2, 1)];
        let batch: Vec<_> = pairs
            .iter()
            .map(|p| (p, QualityVector::new(0.3, 0.5, 0.7), p.label))
            .collect();
        let g = gradients(&m, &batch, 0.5).unwrap();
        assert_eq!(g.gate.bias, 0.0);
        assert_eq!(g.gate.theta, [0.0; 3]);
    }

    #[test]
    fn eval_predictions_are_deterministic() {
        let m = ModelParams::init(Fusion::Concat, 8, 9);
        let pair = random_pair(8, 3, 1);
        let q = QualityVector::new(0.1, 0.2, 0.3);
        assert_eq!(predict(&m, &pair, q).unwrap(), predict(&m, &pair, q).unwrap());
    }

    #[test]
    fn rejects_wrong_roi_edge() {
        let m = ModelParams::init(Fusion::Gated, 12, 1);
        let pair = random_pair(8, 1, 1);
        assert!(matches!(
            predict(&m, &pair, QualityVector::new(0.1, 0.2, 0.3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tensor_views_agree() {
        let mut m = ModelParams::init(Fusion::Gated, 8, 1);
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = m.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 24);
        assert_eq!(m.num_trainable(), 2 * (224 + 16 + 3472 + 32) + 2 * 17 + 36 + 4);
    }

    #[test]
    fn checkpoint_roundtrip_and_edge_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = ModelParams::init(Fusion::Gated, 8, 4);
        Checkpoint::new(m.clone(), "abc").save(&path).unwrap();
        let ck = Checkpoint::load(&path, 8).unwrap();
        assert_eq!(ck.params, m);
        assert!(matches!(Checkpoint::load(&path, 16), Err(Error::Checkpoint(_))));
    }
}

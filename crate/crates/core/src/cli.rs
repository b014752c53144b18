//! Run configuration and the command implementations behind the binary.
//!
//! Commands return their results as values as well as writing files, so they
//! can be driven in-process.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{config_hash, write_csv_atomic, write_json_atomic};
use crate::model::{Checkpoint, Fusion};
use crate::quality::{QualityConfig, QualityMeasurement, QualityRow};
use crate::rng::derive_seed;
use crate::synth::{generate_cohort, load_cohort, save_cohort, CohortSpec, SynthCase};
use crate::train::{
    evaluate_cv, fit_full, metrics, prepare_cases, spearman, EvalReport, OofPrediction, PreparedCase, TrainConfig,
    TrainedModel, Variant,
};
use crate::volume::{add_gaussian_noise, clip_hu, HU_MAX, HU_MIN};

pub const DEFAULT_Q_REG_THRESHOLD: f64 = 0.2;
pub const DEFAULT_NOISE_LEVELS: [f64; 5] = [0.0, 10.0, 20.0, 40.0, 80.0];
/// Optimiser preset for runs; the bare [`TrainConfig`] default is slower and
/// stops well short of convergence within 200 epochs on the synthetic cohorts.
pub const RUN_LEARNING_RATE: f64 = 3e-3;
pub const RUN_PATIENCE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub q_reg_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            q_reg_threshold: DEFAULT_Q_REG_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub noise_levels: Vec<f64>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            noise_levels: DEFAULT_NOISE_LEVELS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Existing cohort directory to load instead of generating from `cohort`.
    pub cohort_dir: Option<PathBuf>,
    pub cohort: CohortSpec,
    pub quality: QualityConfig,
    /// Fit the quality scales to the run's own cohort (label-free).
    pub calibrate_quality: bool,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub filter: FilterConfig,
    pub robustness: RobustnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            cohort_dir: None,
            cohort: CohortSpec::default(),
            quality: QualityConfig::default(),
            calibrate_quality: true,
            train: TrainConfig {
                learning_rate: RUN_LEARNING_RATE,
                patience: RUN_PATIENCE,
                ..TrainConfig::default()
            },
            variants: Variant::ALL.to_vec(),
            filter: FilterConfig::default(),
            robustness: RobustnessConfig::default(),
        }
    }
}

impl RunConfig {
    /// Keys missing from `text`, including inside a partial table, take the
    /// values of [`RunConfig::default`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let config_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| config_err(&e))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| config_err(&e))?;
        merge_tables(&mut base, user);
        let cfg: RunConfig = base.try_into().map_err(|e| config_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.quality.validate()?;
        self.train.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        let t = self.filter.q_reg_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("q_reg_threshold {t} outside [0, 1]")));
        }
        let levels = &self.robustness.noise_levels;
        if levels.is_empty() || levels.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("noise_levels must be non-empty and >= 0".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output location is excluded.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.output_dir = PathBuf::new();
        config_hash(&keyed)
    }
}

fn merge_tables(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge_tables(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Cohort from `cohort_dir` when it holds a manifest, otherwise generated.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Vec<SynthCase>> {
    match &cfg.cohort_dir {
        Some(dir) if dir.join("manifest.csv").exists() => load_cohort(dir),
        _ => generate_cohort(&cfg.cohort),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.cohort_dir.clone().unwrap_or_else(|| cfg.output_dir.join("cohort"));
    let cases = generate_cohort(&cfg.cohort)?;
    save_cohort(&dir, &cases)?;
    Ok(dir)
}

/// Measured cases plus the quality scales actually used.
pub fn prepare(cfg: &RunConfig, cohort: &[SynthCase]) -> Result<(Vec<PreparedCase>, QualityConfig)> {
    let pairs: Vec<_> = cohort.iter().map(|c| c.pair.clone()).collect();
    prepare_cases(&pairs, &cfg.quality, cfg.calibrate_quality)
}

#[derive(Debug, Clone, Serialize)]
struct ReportRow<'a> {
    variant: Variant,
    auroc_mean: f64,
    auroc_sd: f64,
    brier: f64,
    config_hash: &'a str,
}

// The csv crate cannot serialize flattened structs, so rows spell out their columns.
#[derive(Debug, Clone, Serialize)]
struct PredictionRow<'a> {
    variant: Variant,
    case_id: &'a str,
    fold: usize,
    y_hat: f64,
    alpha: Option<f64>,
    q_ct: f64,
    q_reg: f64,
    q_topo: f64,
    label: u8,
    config_hash: &'a str,
}

impl<'a> PredictionRow<'a> {
    fn new(p: &'a OofPrediction, config_hash: &'a str) -> Self {
        Self {
            variant: p.variant,
            case_id: &p.case_id,
            fold: p.fold,
            y_hat: p.y_hat,
            alpha: p.alpha,
            q_ct: p.q_ct,
            q_reg: p.q_reg,
            q_topo: p.q_topo,
            label: p.label,
            config_hash,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct QualityCsvRow<'a> {
    case_id: &'a str,
    q_ct: f64,
    q_reg: f64,
    q_topo: f64,
    constant_slices: bool,
    no_valid_slices: bool,
    config_hash: &'a str,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub quality: QualityConfig,
    pub reports: Vec<EvalReport>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub predictions: Vec<OofPrediction>,
}

fn quality_rows(cases: &[PreparedCase], qcfg: &QualityConfig) -> Vec<QualityRow> {
    cases
        .iter()
        .map(|c| QualityRow::new(c.case_id(), &c.measurement, qcfg))
        .collect()
}

fn write_quality_csv(path: &Path, rows: &[QualityRow], hash: &str) -> Result<()> {
    let out: Vec<QualityCsvRow> = rows
        .iter()
        .map(|r| QualityCsvRow {
            case_id: &r.case_id,
            q_ct: r.q_ct,
            q_reg: r.q_reg,
            q_topo: r.q_topo,
            constant_slices: r.constant_slices,
            no_valid_slices: r.no_valid_slices,
            config_hash: hash,
        })
        .collect();
    write_csv_atomic(path, &out)
}

fn write_report(dir: &Path, reports: &[EvalReport], hash: &str, stem: &str) -> Result<()> {
    let rows: Vec<ReportRow> = reports
        .iter()
        .map(|r| ReportRow {
            variant: r.variant,
            auroc_mean: r.auroc_mean,
            auroc_sd: r.auroc_sd,
            brier: r.brier,
            config_hash: hash,
        })
        .collect();
    write_csv_atomic(&dir.join(format!("{stem}.csv")), &rows)
}

/// Cross-validate every configured variant on the same cases.
pub fn run_variants(cfg: &RunConfig, cases: &[PreparedCase], qcfg: QualityConfig) -> Result<RunOutput> {
    let hash = cfg.hash();
    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    for &variant in &cfg.variants {
        let mut result = evaluate_cv(cases, &cfg.train.with_variant(variant))?;
        result.report.config_hash = hash.clone();
        eprintln!(
            "{variant}: AUROC {:.3} +/- {:.3}, Brier {:.4}",
            result.report.auroc_mean, result.report.auroc_sd, result.report.brier
        );
        reports.push(result.report);
        predictions.extend(result.predictions);
    }
    Ok(RunOutput {
        report: RunReport {
            config_hash: hash,
            quality: qcfg,
            reports,
        },
        predictions,
    })
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput> {
    let cohort = load_or_generate(cfg)?;
    let (cases, qcfg) = prepare(cfg, &cohort)?;
    let out = run_variants(cfg, &cases, qcfg)?;
    let hash = &out.report.config_hash;
    let dir = &cfg.output_dir;
    write_report(dir, &out.report.reports, hash, "report")?;
    write_json_atomic(&dir.join("report.json"), &out.report)?;
    let rows: Vec<PredictionRow> = out
        .predictions
        .iter()
        .map(|p| PredictionRow::new(p, hash))
        .collect();
    write_csv_atomic(&dir.join("predictions.csv"), &rows)?;
    write_quality_csv(&dir.join("quality.csv"), &quality_rows(&cases, &qcfg), hash)?;
    Ok(out)
}

/// Measured-quality filter: `q_reg >= threshold` and no constant slice.
pub fn passes_filter(m: &QualityMeasurement, threshold: f64) -> bool {
    m.registration.q_reg >= threshold && !m.constant_slice_flag()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterStudy {
    pub config_hash: String,
    pub q_reg_threshold: f64,
    pub full: EvalReport,
    pub clean: EvalReport,
    pub retained: Vec<String>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct FilterCaseRow<'a> {
    case_id: &'a str,
    q_reg: f64,
    constant_slices: bool,
    retained: bool,
    config_hash: &'a str,
}

#[derive(Debug, Clone, Serialize)]
struct FilterSummaryRow<'a> {
    subset: &'a str,
    n_cases: usize,
    auroc_mean: f64,
    auroc_sd: f64,
    brier: f64,
    config_hash: &'a str,
}

/// Full-cohort versus quality-filtered evaluation of the gated model, given prepared cases.
pub fn filter_study(cfg: &RunConfig, cases: &[PreparedCase]) -> Result<FilterStudy> {
    let hash = cfg.hash();
    let threshold = cfg.filter.q_reg_threshold;
    let train_cfg = cfg.train.with_variant(Variant::Topogate);
    let keep: Vec<bool> = cases.iter().map(|c| passes_filter(&c.measurement, threshold)).collect();
    let clean: Vec<PreparedCase> = cases
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(c, _)| c.clone())
        .collect();
    if clean.is_empty() {
        return Err(Error::EmptyCleanSubset);
    }
    let mut full = evaluate_cv(cases, &train_cfg)?.report;
    let mut clean_report = if clean.len() == cases.len() {
        full.clone()
    } else {
        evaluate_cv(&clean, &train_cfg)?.report
    };
    full.config_hash = hash.clone();
    clean_report.config_hash = hash.clone();
    let (mut retained, mut removed) = (Vec::new(), Vec::new());
    for (c, &k) in cases.iter().zip(&keep) {
        if k {
            retained.push(c.case_id().to_string());
        } else {
            removed.push(c.case_id().to_string());
        }
    }
    Ok(FilterStudy {
        config_hash: hash,
        q_reg_threshold: threshold,
        full,
        clean: clean_report,
        retained,
        removed,
    })
}

pub fn cmd_filter_study(cfg: &RunConfig) -> Result<FilterStudy> {
    let cohort = load_or_generate(cfg)?;
    let (cases, _) = prepare(cfg, &cohort)?;
    let study = filter_study(cfg, &cases)?;
    let hash = &study.config_hash;
    let dir = &cfg.output_dir;
    let summary: Vec<FilterSummaryRow> = [("full", &study.full), ("clean", &study.clean)]
        .into_iter()
        .map(|(subset, r)| FilterSummaryRow {
            subset,
            n_cases: r.n_cases,
            auroc_mean: r.auroc_mean,
            auroc_sd: r.auroc_sd,
            brier: r.brier,
            config_hash: hash,
        })
        .collect();
    write_csv_atomic(&dir.join("filter_study.csv"), &summary)?;
    write_json_atomic(&dir.join("filter_study.json"), &study)?;
    let case_rows: Vec<FilterCaseRow> = cases
        .iter()
        .map(|c| FilterCaseRow {
            case_id: c.case_id(),
            q_reg: c.measurement.registration.q_reg,
            constant_slices: c.measurement.constant_slice_flag(),
            retained: passes_filter(&c.measurement, study.q_reg_threshold),
            config_hash: hash,
        })
        .collect();
    write_csv_atomic(&dir.join("filter_cases.csv"), &case_rows)?;
    eprintln!(
        "full: AUROC {:.3}, Brier {:.4}; clean ({} of {}): AUROC {:.3}, Brier {:.4}",
        study.full.auroc_mean,
        study.full.brier,
        study.retained.len(),
        cases.len(),
        study.clean.auroc_mean,
        study.clean.brier
    );
    Ok(study)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub noise_level: f64,
    pub mean_alpha: f64,
    pub mean_q_ct: f64,
    pub mean_q_reg: f64,
    pub mean_q_topo: f64,
    pub mean_prob: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config_hash: String,
    pub rows: Vec<RobustnessRow>,
    pub spearman_alpha: f64,
    pub spearman_q_reg: f64,
}

/// Re-noise every follow-up ROI at each level and re-score quality and gate
/// with the frozen model and frozen quality scales. The per-case noise field
/// is the same at every level, only its amplitude changes.
pub fn noise_sweep(
    cfg: &RunConfig,
    cohort: &[SynthCase],
    qcfg: &QualityConfig,
    model: &crate::model::ModelParams,
) -> Result<RobustnessReport> {
    if model.fusion != Fusion::Gated {
        return Err(Error::Config("robustness needs a gated model".into()));
    }
    let hash = cfg.hash();
    let trained = TrainedModel::Network(model.clone());
    let mut rows = Vec::new();
    for &level in &cfg.robustness.noise_levels {
        let mut cases = Vec::with_capacity(cohort.len());
        for (i, c) in cohort.iter().enumerate() {
            let pair = if level > 0.0 {
                let seed = derive_seed(cfg.cohort.seed, i as u64, "sweep-noise");
                let noisy = clip_hu(&add_gaussian_noise(&c.pair.fu_roi, level, seed), HU_MIN, HU_MAX);
                c.pair.with_fu(noisy)?
            } else {
                c.pair.clone()
            };
            let m = QualityMeasurement::measure(&pair, qcfg)?;
            cases.push(PreparedCase::new(&pair, m, qcfg));
        }
        let refs: Vec<&PreparedCase> = cases.iter().collect();
        let preds = trained.predict(&refs)?;
        let q: Vec<_> = cases.iter().map(|c| c.input.quality).collect();
        let alphas: Vec<f64> = preds.iter().map(|p| p.alpha.expect("gated model")).collect();
        let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
        rows.push(RobustnessRow {
            noise_level: level,
            mean_alpha: metrics::mean(&alphas),
            mean_q_ct: metrics::mean(&q.iter().map(|q| q.q_ct).collect::<Vec<_>>()),
            mean_q_reg: metrics::mean(&q.iter().map(|q| q.q_reg).collect::<Vec<_>>()),
            mean_q_topo: metrics::mean(&q.iter().map(|q| q.q_topo).collect::<Vec<_>>()),
            mean_prob: metrics::mean(&probs),
            config_hash: hash.clone(),
        });
    }
    let levels: Vec<f64> = rows.iter().map(|r| r.noise_level).collect();
    let (spearman_alpha, spearman_q_reg) = if rows.len() >= 2 {
        (
            spearman(&levels, &rows.iter().map(|r| r.mean_alpha).collect::<Vec<_>>())?,
            spearman(&levels, &rows.iter().map(|r| r.mean_q_reg).collect::<Vec<_>>())?,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(RobustnessReport {
        config_hash: hash,
        rows,
        spearman_alpha,
        spearman_q_reg,
    })
}

/// Train the gated model on the unperturbed cohort (or load it) and run the sweep.
pub fn cmd_robustness(cfg: &RunConfig, model_path: Option<&Path>) -> Result<RobustnessReport> {
    let cohort = load_or_generate(cfg)?;
    let (cases, qcfg) = prepare(cfg, &cohort)?;
    let dir = &cfg.output_dir;
    let model = match model_path {
        Some(p) if p.exists() => Checkpoint::load(p, cfg.cohort.roi_edge)?.params,
        _ => {
            let (trained, _) = fit_full(&cases, &cfg.train.with_variant(Variant::Topogate))?;
            let TrainedModel::Network(params) = trained else {
                unreachable!("topogate is a network variant")
            };
            let path = model_path.map(Path::to_path_buf).unwrap_or_else(|| dir.join("model.json"));
            Checkpoint::new(params.clone(), cfg.hash()).save(&path)?;
            params
        }
    };
    let report = noise_sweep(cfg, &cohort, &qcfg, &model)?;
    write_csv_atomic(&dir.join("robustness.csv"), &report.rows)?;
    write_json_atomic(&dir.join("robustness.json"), &report)?;
    for r in &report.rows {
        eprintln!(
            "noise {:>5.1}: alpha {:.4} q_ct {:.4} q_reg {:.4} q_topo {:.4}",
            r.noise_level, r.mean_alpha, r.mean_q_ct, r.mean_q_reg, r.mean_q_topo
        );
    }
    Ok(report)
}

/// Measure quality for a persisted cohort directory and write the per-case CSV.
pub fn cmd_quality(input: &Path, output: &Path, qcfg: &QualityConfig, calibrate: bool) -> Result<Vec<QualityRow>> {
    let cohort = load_cohort(input)?;
    let pairs: Vec<_> = cohort.into_iter().map(|c| c.pair).collect();
    let (cases, used) = prepare_cases(&pairs, qcfg, calibrate)?;
    let rows = quality_rows(&cases, &used);
    write_quality_csv(output, &rows, &config_hash(&used))?;
    Ok(rows)
}

/// Process exit code for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) | Err(Error::BadSpec(_)) => 2,
        Err(_) => 1,
    }
}

//! Per-case quality channels: appearance sharpness, registration
//! consistency and topological stability.
//!
//! Raw measurements (variance of Laplacian, slice SSIM, bottleneck distance)
//! are computed once per case; the cohort-relative scales `kappa_ct` and
//! `tau` are applied afterwards, so a [`QualityMeasurement`] can be mapped
//! under any [`QualityConfig`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{q_topo_from_distance, topo_summary, TopoSummary};
use crate::volume::{laplacian, CasePair, Volume, HU_MAX, HU_MIN};

/// Largest f64 strictly below one; q_ct is capped here so tanh saturation keeps it in [0, 1).
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    pub kappa_ct: f64,
    pub tau: f64,
    pub ssim_eps: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            kappa_ct: 1.0,
            tau: 1.0,
            ssim_eps: 1e-6,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.kappa_ct > 0.0 && self.tau > 0.0 && self.ssim_eps > 0.0 && self.c1 > 0.0 && self.c2 > 0.0;
        if ok && [self.kappa_ct, self.tau, self.ssim_eps, self.c1, self.c2].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid quality config {self:?}")))
        }
    }

    /// Sets `kappa_ct` to the median variance-of-Laplacian and `tau` so the
    /// median bottleneck distance maps to 0.5.
    pub fn calibrated(mut self, measurements: &[QualityMeasurement]) -> Self {
        let vols: Vec<f64> = measurements.iter().map(|m| m.vol_fu).collect();
        let dists: Vec<f64> = measurements.iter().map(|m| m.topo.bottleneck).collect();
        if let Some(k) = positive_median(&vols) {
            self.kappa_ct = k;
        }
        if let Some(w) = positive_median(&dists) {
            self.tau = std::f64::consts::LN_2 / w;
        }
        self
    }
}

fn positive_median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    if med > 0.0 {
        Some(med)
    } else {
        v.into_iter().find(|&x| x > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVector {
    pub q_ct: f64,
    pub q_reg: f64,
    pub q_topo: f64,
}

impl QualityVector {
    pub fn new(q_ct: f64, q_reg: f64, q_topo: f64) -> Self {
        Self { q_ct, q_reg, q_topo }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.q_ct, self.q_reg, self.q_topo]
    }

    pub fn in_range(&self) -> bool {
        (0.0..1.0).contains(&self.q_ct)
            && (0.0..=1.0).contains(&self.q_reg)
            && self.q_topo > 0.0
            && self.q_topo <= 1.0
    }
}

/// Population variance of the 6-neighbor Laplacian.
pub fn variance_of_laplacian(v: &Volume) -> Result<f64> {
    let lap = laplacian(v)?;
    let d = lap.data();
    let n = d.len() as f64;
    // Welford keeps the large-offset case stable.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in d.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((m2 / n).max(0.0))
}

pub fn q_ct_from_vol(vol: f64, kappa_ct: f64) -> f64 {
    (vol / kappa_ct).tanh().clamp(0.0, BELOW_ONE)
}

pub fn q_ct(v: &Volume, cfg: &QualityConfig) -> Result<f64> {
    Ok(q_ct_from_vol(variance_of_laplacian(v)?, cfg.kappa_ct))
}

/// Maps the HU clip range onto [0, 1].
#[inline]
pub fn normalize_hu(x: f64) -> f64 {
    (x - HU_MIN) / (HU_MAX - HU_MIN)
}

fn slice_stats(a: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Global-statistics SSIM of two normalized slices, clamped to [0, 1].
pub fn ssim_slice(a: &[f64], b: &[f64], cfg: &QualityConfig) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "slice lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, va) = slice_stats(a);
    let (mb, vb) = slice_stats(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let num = (2.0 * ma * mb + cfg.c1) * (2.0 * cov + cfg.c2);
    let den = (ma * ma + mb * mb + cfg.c1) * (va + vb + cfg.c2);
    Ok((num / den).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationScore {
    pub q_reg: f64,
    pub used_slices: usize,
    /// Slices skipped because either side is constant.
    pub constant_slices: usize,
    /// Slices constant in the follow-up but not in the baseline.
    pub lost_fu_slices: usize,
}

impl RegistrationScore {
    /// No slice pair qualified for SSIM.
    pub fn degenerate(&self) -> bool {
        self.used_slices == 0
    }
}

/// Mean slice SSIM over axial slices where both slices are non-constant.
pub fn q_reg(fu: &Volume, bl: &Volume, cfg: &QualityConfig) -> Result<RegistrationScore> {
    if fu.dims() != bl.dims() {
        return Err(Error::ShapeMismatch(format!(
            "follow-up {:?} vs baseline {:?}",
            fu.dims(),
            bl.dims()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut constant = 0usize;
    let mut lost = 0usize;
    for z in 0..fu.dims()[2] {
        let a: Vec<f64> = fu.axial_slice(z).iter().map(|&x| normalize_hu(x)).collect();
        let b: Vec<f64> = bl.axial_slice(z).iter().map(|&x| normalize_hu(x)).collect();
        let (flat_a, flat_b) = (slice_stats(&a).1 <= cfg.ssim_eps, slice_stats(&b).1 <= cfg.ssim_eps);
        if flat_a || flat_b {
            constant += 1;
            lost += usize::from(flat_a && !flat_b);
            continue;
        }
        total += ssim_slice(&a, &b, cfg)?;
        used += 1;
    }
    let q = if used == 0 { 0.0 } else { total / used as f64 };
    Ok(RegistrationScore {
        q_reg: q,
        used_slices: used,
        constant_slices: constant,
        lost_fu_slices: lost,
    })
}

/// Scale-free raw measurements for one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMeasurement {
    pub vol_fu: f64,
    pub registration: RegistrationScore,
    pub topo: TopoSummary,
}

impl QualityMeasurement {
    pub fn measure(pair: &CasePair, cfg: &QualityConfig) -> Result<Self> {
        Ok(Self {
            vol_fu: variance_of_laplacian(&pair.fu_roi)?,
            registration: q_reg(&pair.fu_roi, &pair.bl_roi, cfg)?,
            topo: topo_summary(&pair.fu_roi, &pair.bl_roi),
        })
    }

    pub fn vector(&self, cfg: &QualityConfig) -> QualityVector {
        QualityVector {
            q_ct: q_ct_from_vol(self.vol_fu, cfg.kappa_ct),
            q_reg: self.registration.q_reg,
            q_topo: q_topo_from_distance(self.topo.bottleneck, cfg.tau).max(f64::MIN_POSITIVE),
        }
    }

    /// A follow-up slice is constant where the baseline slice is not, or no
    /// slice pair was usable at all. Air-only slabs that are flat in the
    /// noiseless baseline do not raise it.
    pub fn constant_slice_flag(&self) -> bool {
        self.registration.lost_fu_slices > 0 || self.registration.degenerate()
    }
}

pub fn quality_vector(pair: &CasePair, cfg: &QualityConfig) -> Result<QualityVector> {
    Ok(QualityMeasurement::measure(pair, cfg)?.vector(cfg))
}

/// One row of the per-case quality CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub case_id: String,
    pub q_ct: f64,
    pub q_reg: f64,
    pub q_topo: f64,
    pub constant_slices: bool,
    pub no_valid_slices: bool,
}

impl QualityRow {
    pub fn new(case_id: &str, m: &QualityMeasurement, cfg: &QualityConfig) -> Self {
        let q = m.vector(cfg);
        Self {
            case_id: case_id.to_string(),
            q_ct: q.q_ct,
            q_reg: q.q_reg,
            q_topo: q.q_topo,
            constant_slices: m.constant_slice_flag(),
            no_valid_slices: m.registration.degenerate(),
        }
    }
}

//! Deterministic synthetic longitudinal ROI pairs.
//!
//! Each case is rendered analytically in the follow-up ROI frame: a smooth
//! background of Gaussian blobs over air, optionally a persisting nodule at
//! the ROI center, and for label 1 a new spherical lesion in the follow-up
//! only. The registered baseline is the same scene displaced by the residual
//! registration error, so misregistration is exact rather than interpolated.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_csv_atomic;
use crate::nifti::{read_nifti, write_nifti};
use crate::rng::{derive_seed, keyed_rng};
use crate::volume::{add_gaussian_noise, gaussian_blur, CasePair, Volume, HU_MAX, HU_MIN, PAD_HU};

/// Fraction of the applied translation left over after registration.
pub const RESIDUAL_FRACTION: f64 = 0.25;
/// Fraction of axial slices blanked in slice-corrupted pairs.
pub const CORRUPT_SLICE_FRACTION: f64 = 0.3;
/// Misregistration multiplier for registration-corrupted pairs.
pub const CORRUPT_MISREG_FACTOR: f64 = 4.0;
pub const LESION_CONTRAST_HU: (f64, f64) = (150.0, 300.0);
pub const LESION_RADIUS_VOX: (f64, f64) = (2.0, 5.0);
pub const BLOB_COUNT: (usize, usize) = (3, 6);
pub const BLOB_LEVEL_HU: (f64, f64) = (-800.0, 100.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_pairs: usize,
    pub n_patients: usize,
    pub roi_edge: usize,
    /// Upper bound of the per-case follow-up noise SD.
    pub noise_sigma_hu: f64,
    /// Upper bound of the per-case translation magnitude.
    pub misreg_mm: f64,
    /// Upper bound of the per-case follow-up blur.
    pub blur_sigma_vox: f64,
    /// Fraction of label-0 (pseudo-new) cases.
    pub pseudo_fraction: f64,
    pub corrupt_fraction: f64,
    /// Fraction of label-0 cases whose ROI holds a nodule present in both scans.
    pub lookalike_fraction: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_pairs: 152,
            n_patients: 122,
            roi_edge: 16,
            noise_sigma_hu: 40.0,
            misreg_mm: 12.0,
            blur_sigma_vox: 1.0,
            pseudo_fraction: 0.5,
            corrupt_fraction: 0.0,
            lookalike_fraction: 0.1,
            seed: 42,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let fraction = |v: f64| (0.0..=1.0).contains(&v);
        let checks = [
            (self.n_patients >= 1, "n_patients must be >= 1"),
            (self.n_pairs >= self.n_patients, "n_pairs must be >= n_patients"),
            (self.roi_edge >= 8, "roi_edge must be >= 8"),
            (self.noise_sigma_hu >= 0.0 && self.noise_sigma_hu.is_finite(), "noise_sigma_hu must be >= 0"),
            (self.misreg_mm >= 0.0 && self.misreg_mm.is_finite(), "misreg_mm must be >= 0"),
            (self.blur_sigma_vox >= 0.0 && self.blur_sigma_vox.is_finite(), "blur_sigma_vox must be >= 0"),
            (fraction(self.pseudo_fraction), "pseudo_fraction must be in [0, 1]"),
            (fraction(self.corrupt_fraction), "corrupt_fraction must be in [0, 1]"),
            (fraction(self.lookalike_fraction), "lookalike_fraction must be in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::BadSpec(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn n_negative(&self) -> usize {
        (self.pseudo_fraction * self.n_pairs as f64).round() as usize
    }

    pub fn n_corrupt(&self) -> usize {
        (self.corrupt_fraction * self.n_pairs as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoChange {
    None,
    Misregistration,
    Blur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    Slices,
    Misregistration,
}

/// Ground truth for one generated case; one row of `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub patient_id: String,
    pub label: u8,
    pub corrupt: bool,
    pub corruption: Corruption,
    pub pseudo_change: PseudoChange,
    pub lookalike: bool,
    pub n_blobs: usize,
    pub translation_mm: f64,
    pub residual_mm: f64,
    pub blur_sigma_vox: f64,
    pub noise_sigma_hu: f64,
    pub lesion_radius_vox: f64,
    pub lesion_contrast_hu: f64,
    /// Lesion (or candidate) center in world millimetres.
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub centroid_z: f64,
    pub blanked_slices: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub pair: CasePair,
    pub meta: ManifestRow,
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

struct Sphere {
    center: [f64; 3],
    radius: f64,
    contrast: f64,
}

impl Sphere {
    /// Partial-volume weight so edges are antialiased at voxel scale.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let d = dist(p, self.center);
        (self.radius + 0.5 - d).clamp(0.0, 1.0)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn render(edge: usize, offset: [f64; 3], blobs: &[Blob], spheres: &[&Sphere]) -> Volume {
    Volume::from_fn([edge; 3], 1.0, |x, y, z| {
        let p = [x as f64 - offset[0], y as f64 - offset[1], z as f64 - offset[2]];
        let mut v = PAD_HU;
        for b in blobs {
            let d2 = (p[0] - b.center[0]).powi(2) + (p[1] - b.center[1]).powi(2) + (p[2] - b.center[2]).powi(2);
            v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        for s in spheres {
            v += s.contrast * s.weight(p);
        }
        v
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

/// Indices in `0..n` selected by a seeded permutation; the first `count` are chosen.
fn chosen(n: usize, count: usize, seed: u64, tag: &str) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, 0, tag));
    let mut out = vec![false; n];
    for &i in &order[..count.min(n)] {
        out[i] = true;
    }
    out
}

fn quantize(v: &Volume) -> Volume {
    // Stored values are exactly representable as float32, so a NIfTI round trip is lossless.
    v.map(|x| x.clamp(HU_MIN, HU_MAX) as f32 as f64)
}

pub fn patient_id(spec: &CohortSpec, index: usize) -> String {
    format!("P{:04}", index % spec.n_patients)
}

pub fn case_id(index: usize) -> String {
    format!("C{index:04}")
}

/// Generate case `index`; depends only on `(spec, index)`.
pub fn generate_pair(spec: &CohortSpec, index: usize) -> Result<SynthCase> {
    spec.validate()?;
    if index >= spec.n_pairs {
        return Err(Error::BadSpec(format!("index {index} outside 0..{}", spec.n_pairs)));
    }
    let negative = chosen(spec.n_pairs, spec.n_negative(), spec.seed, "labels")[index];
    let corrupt = chosen(spec.n_pairs, spec.n_corrupt(), spec.seed, "corrupt")[index];
    let label = u8::from(!negative);
    let edge = spec.roi_edge;
    let l = edge as f64;
    let scale = l / 16.0;
    let center = [(l - 1.0) / 2.0; 3];
    let mut rng = keyed_rng(spec.seed, index as u64, "case");

    let n_blobs = rng.random_range(BLOB_COUNT.0..=BLOB_COUNT.1);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: std::array::from_fn(|_| rng.random_range(-0.1 * l..1.1 * l)),
            sigma: rng.random_range(1.5..4.0) * scale,
            amplitude: rng.random_range(BLOB_LEVEL_HU.0..BLOB_LEVEL_HU.1) - PAD_HU,
        })
        .collect();

    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let lesion_center = [center[0] + jitter[0], center[1] + jitter[1], center[2] + jitter[2]];
    let radius = rng.random_range(LESION_RADIUS_VOX.0..LESION_RADIUS_VOX.1).min(l / 3.0);
    let contrast = rng.random_range(LESION_CONTRAST_HU.0..LESION_CONTRAST_HU.1);
    let sphere = Sphere {
        center: lesion_center,
        radius,
        contrast,
    };
    let lookalike_draw = rng.random::<f64>();
    let pseudo_draw = rng.random::<f64>();
    let corruption_draw = rng.random::<f64>();

    let translation = rng.random_range(0.0..=1.0) * spec.misreg_mm;
    let direction = random_unit(&mut rng);
    let blur = rng.random_range(0.0..=1.0) * spec.blur_sigma_vox;
    let noise = rng.random_range(0.25..=1.0) * spec.noise_sigma_hu;

    let lookalike = negative && lookalike_draw < spec.lookalike_fraction;
    let pseudo_change = match (negative, pseudo_draw < 0.5) {
        (false, _) => PseudoChange::None,
        (true, true) => PseudoChange::Misregistration,
        (true, false) => PseudoChange::Blur,
    };
    let corruption = match (corrupt, corruption_draw < 0.5) {
        (false, _) => Corruption::None,
        (true, true) => Corruption::Slices,
        (true, false) => Corruption::Misregistration,
    };

    let mut residual = RESIDUAL_FRACTION * translation;
    if pseudo_change == PseudoChange::Misregistration {
        residual *= 2.0;
    }
    if corruption == Corruption::Misregistration {
        residual = CORRUPT_MISREG_FACTOR * RESIDUAL_FRACTION * spec.misreg_mm.max(translation);
    }
    let fu_blur = if pseudo_change == PseudoChange::Blur { 2.0 * blur } else { blur };

    let mut fu_objects: Vec<&Sphere> = Vec::new();
    let mut bl_objects: Vec<&Sphere> = Vec::new();
    if label == 1 || lookalike {
        fu_objects.push(&sphere);
    }
    if lookalike {
        bl_objects.push(&sphere);
    }
    let offset = direction.map(|d| d * residual);
    let bl = render(edge, offset, &blobs, &bl_objects);
    let mut fu = render(edge, [0.0; 3], &blobs, &fu_objects);
    if fu_blur > 0.0 {
        fu = gaussian_blur(&fu, fu_blur);
    }
    if noise > 0.0 {
        fu = add_gaussian_noise(&fu, noise, derive_seed(spec.seed, index as u64, "fu-noise"));
    }
    let mut blanked = 0;
    if corruption == Corruption::Slices {
        blanked = ((CORRUPT_SLICE_FRACTION * l).round() as usize).max(1);
        let mut zs: Vec<usize> = (0..edge).collect();
        zs.shuffle(&mut rng);
        let mut data = fu.into_data();
        for &z in &zs[..blanked] {
            data[z * edge * edge..(z + 1) * edge * edge].fill(PAD_HU);
        }
        fu = Volume::new([edge; 3], [1.0; 3], [0.0; 3], data)?;
    }

    // World placement: ROI centered on the candidate at a per-case position.
    let mut wrng = keyed_rng(spec.seed, index as u64, "placement");
    let centroid: [f64; 3] = std::array::from_fn(|_| wrng.random_range(-120.0..120.0));
    let origin: [f64; 3] = std::array::from_fn(|a| (centroid[a] - lesion_center[a]) as f32 as f64);
    let fu = quantize(&fu).with_origin(origin);
    let bl = quantize(&bl).with_origin(origin);
    let id = case_id(index);
    let pid = patient_id(spec, index);
    let pair = CasePair::new(id.clone(), pid.clone(), fu, bl, centroid, label)?;
    let has_lesion = label == 1;
    Ok(SynthCase {
        pair,
        meta: ManifestRow {
            case_id: id,
            patient_id: pid,
            label,
            corrupt,
            corruption,
            pseudo_change,
            lookalike,
            n_blobs,
            translation_mm: translation,
            residual_mm: residual,
            blur_sigma_vox: fu_blur,
            noise_sigma_hu: noise,
            lesion_radius_vox: if has_lesion || lookalike { radius } else { 0.0 },
            lesion_contrast_hu: if has_lesion || lookalike { contrast } else { 0.0 },
            centroid_x: centroid[0],
            centroid_y: centroid[1],
            centroid_z: centroid[2],
            blanked_slices: blanked,
        },
    })
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    (0..spec.n_pairs).map(|i| generate_pair(spec, i)).collect()
}

fn volume_path(dir: &Path, case_id: &str, kind: &str) -> std::path::PathBuf {
    dir.join("cases").join(format!("{case_id}_{kind}.nii"))
}

/// Persist as `manifest.csv` plus `cases/<id>_{fu,bl,delta}.nii`.
pub fn save_cohort(dir: &Path, cases: &[SynthCase]) -> Result<()> {
    for c in cases {
        let id = &c.pair.case_id;
        write_nifti(&c.pair.fu_roi, volume_path(dir, id, "fu"))?;
        write_nifti(&c.pair.bl_roi, volume_path(dir, id, "bl"))?;
        write_nifti(&c.pair.delta, volume_path(dir, id, "delta"))?;
    }
    let rows: Vec<&ManifestRow> = cases.iter().map(|c| &c.meta).collect();
    write_csv_atomic(&dir.join("manifest.csv"), &rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(Error::from)
}

/// Load a persisted cohort. The difference volume is recomputed from the
/// follow-up and baseline files, which reproduces the generated pair exactly.
pub fn load_cohort(dir: &Path) -> Result<Vec<SynthCase>> {
    read_manifest(dir)?
        .into_iter()
        .map(|meta| {
            let fu = read_nifti(volume_path(dir, &meta.case_id, "fu"))?;
            let bl = read_nifti(volume_path(dir, &meta.case_id, "bl"))?;
            let centroid = [meta.centroid_x, meta.centroid_y, meta.centroid_z];
            let pair = CasePair::new(meta.case_id.clone(), meta.patient_id.clone(), fu, bl, centroid, meta.label)?;
            Ok(SynthCase { pair, meta })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_spec() -> CohortSpec {
        CohortSpec {
            n_pairs: 20,
            n_patients: 20,
            noise_sigma_hu: 0.0,
            misreg_mm: 0.0,
            blur_sigma_vox: 0.0,
            lookalike_fraction: 0.0,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn clean_negative_has_zero_difference() {
        let spec = clean_spec();
        let case = (0..spec.n_pairs)
            .map(|i| generate_pair(&spec, i).unwrap())
            .find(|c| c.pair.label == 0)
            .unwrap();
        assert!(case.pair.delta.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn positive_lesion_reads_back() {
        let spec = clean_spec();
        for i in 0..spec.n_pairs {
            let c = generate_pair(&spec, i).unwrap();
            if c.pair.label == 0 {
                continue;
            }
            let m = &c.meta;
            let fu = &c.pair.fu_roi;
            let o = fu.origin();
            let local = [m.centroid_x - o[0], m.centroid_y - o[1], m.centroid_z - o[2]];
            let c0 = (spec.roi_edge as f64 - 1.0) / 2.0;
            assert!(local.iter().all(|v| (v - c0).abs() <= 0.5 + 1e-9));
            let mut max_inside: f64 = 0.0;
            let mut unclipped = false;
            for z in 0..fu.dims()[2] {
                for y in 0..fu.dims()[1] {
                    for x in 0..fu.dims()[0] {
                        if dist([x as f64, y as f64, z as f64], local) <= m.lesion_radius_vox - 0.5 {
                            max_inside = max_inside.max(c.pair.delta.get(x, y, z).abs());
                            unclipped |= c.pair.bl_roi.get(x, y, z) <= HU_MAX - m.lesion_contrast_hu;
                        }
                    }
                }
            }
            if unclipped {
                assert!(max_inside >= m.lesion_contrast_hu - 0.01, "{max_inside} vs {}", m.lesion_contrast_hu);
            }
            assert!(max_inside > 0.0);
        }
    }

    #[test]
    fn deterministic_per_index() {
        let spec = CohortSpec::default();
        let a = generate_pair(&spec, 7).unwrap();
        let b = generate_pair(&spec, 7).unwrap();
        assert_eq!(a.pair, b.pair);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn allocation_counts() {
        let spec = CohortSpec {
            n_pairs: 100,
            n_patients: 80,
            ..CohortSpec::default()
        };
        let labels: Vec<u8> = (0..100).map(|i| generate_pair(&spec, i).unwrap().pair.label).collect();
        assert_eq!(labels.iter().filter(|&&y| y == 0).count(), 50);
        let spec = CohortSpec {
            n_pairs: 200,
            n_patients: 200,
            corrupt_fraction: 0.15,
            ..CohortSpec::default()
        };
        assert_eq!(chosen(200, spec.n_corrupt(), spec.seed, "corrupt").iter().filter(|&&c| c).count(), 30);
    }

    #[test]
    fn round_robin_patients() {
        let spec = CohortSpec::default();
        let mut counts = std::collections::BTreeMap::new();
        for i in 0..spec.n_pairs {
            *counts.entry(patient_id(&spec, i)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 122);
        assert_eq!(counts.values().filter(|&&c| c == 2).count(), 30);
        assert_eq!(counts.values().filter(|&&c| c == 1).count(), 92);
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = CohortSpec {
            n_pairs: 3,
            n_patients: 5,
            ..CohortSpec::default()
        };
        assert!(matches!(generate_pair(&spec, 0), Err(Error::BadSpec(_))));
        assert!(matches!(generate_pair(&CohortSpec::default(), 152), Err(Error::BadSpec(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CohortSpec {
            n_pairs: 4,
            n_patients: 3,
            corrupt_fraction: 0.5,
            ..CohortSpec::default()
        };
        let cases = generate_cohort(&spec).unwrap();
        save_cohort(dir.path(), &cases).unwrap();
        let loaded = load_cohort(dir.path()).unwrap();
        for (a, b) in cases.iter().zip(&loaded) {
            assert_eq!(a.pair, b.pair);
            assert_eq!(a.meta, b.meta);
        }
    }
}

//! Dense 3D scalar grids and the preprocessing operators applied to them.
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`. The third
//! axis is the axial (slice) axis throughout the crate.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// HU clip range applied in preprocessing.
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 400.0;
/// Fill value for crop regions outside the source grid (air).
pub const PAD_HU: f64 = HU_MIN;
/// Default ROI edge in voxels.
pub const DEFAULT_ROI_EDGE: usize = 32;
/// Default isotropic spacing in mm.
pub const DEFAULT_SPACING_MM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel value".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Isotropic volume at the origin filled with `value`.
    pub fn filled(dims: [usize; 3], spacing_mm: f64, value: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, [spacing_mm; 3], [0.0; 3], vec![value; n]).expect("valid filled volume")
    }

    /// Build an isotropic volume by evaluating `f(x, y, z)` on voxel indices.
    pub fn from_fn(dims: [usize; 3], spacing_mm: f64, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [spacing_mm; 3], [0.0; 3], data).expect("finite generated volume")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    /// Same geometry, new voxel values. Values must be finite.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        self.with_data(data).expect("map must produce finite values")
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_isotropic(&self) -> bool {
        let s = self.spacing;
        (s[0] - s[1]).abs() <= 1e-9 * s[0] && (s[0] - s[2]).abs() <= 1e-9 * s[0]
    }

    /// Axial slice `z` as an x-fastest `nx * ny` buffer.
    pub fn axial_slice(&self, z: usize) -> &[f64] {
        let plane = self.dims[0] * self.dims[1];
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Physical coordinate (mm) of voxel center `(x, y, z)`.
    pub fn voxel_to_mm(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + idx[a] as f64 * self.spacing[a])
    }

    /// Trilinear sample at a continuous voxel coordinate with nearest-edge extension.
    pub fn sample_trilinear(&self, pos: [f64; 3]) -> f64 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let p = pos[a].clamp(0.0, hi);
            let f = p.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
            frac[a] = p - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx[a] = i1[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx[a] = i0[a];
                }
            }
            if w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }
}

pub fn clip_hu(v: &Volume, lo: f64, hi: f64) -> Volume {
    assert!(lo < hi, "clip range must satisfy lo < hi");
    v.map(|x| x.clamp(lo, hi))
}

/// Trilinear resampling onto a `target_mm` isotropic grid sharing the input origin.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0) {
        return Err(Error::InvalidVolume(format!("target spacing {target_mm} must be positive")));
    }
    let spacing = v.spacing();
    let dims_in = v.dims();
    let dims = [0, 1, 2].map(|a| {
        let extent = dims_in[a] as f64 * spacing[a];
        ((extent / target_mm).round() as usize).max(1)
    });
    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [x, y, z]
                    .iter()
                    .zip(spacing.iter())
                    .map(|(&i, &s)| i as f64 * target_mm / s)
                    .collect::<Vec<_>>();
                data.push(v.sample_trilinear([pos[0], pos[1], pos[2]]));
            }
        }
    }
    Volume::new(dims, [target_mm; 3], v.origin(), data)
}

/// Cubic crop of edge `edge` centered at the voxel nearest `center_mm`.
pub fn crop_roi(v: &Volume, center_mm: [f64; 3], edge: usize) -> Result<Volume> {
    if edge == 0 {
        return Err(Error::InvalidVolume("ROI edge must be at least 1".into()));
    }
    if !v.is_isotropic() {
        return Err(Error::InvalidVolume("crop_roi requires an isotropic volume".into()));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let origin = v.origin();
    let mut center = [0i64; 3];
    for a in 0..3 {
        let idx = ((center_mm[a] - origin[a]) / spacing[a]).round();
        if idx < 0.0 || idx >= dims[a] as f64 {
            return Err(Error::CenterOutsideVolume);
        }
        center[a] = idx as i64;
    }
    let half = (edge / 2) as i64;
    let start = center.map(|c| c - half);
    let mut data = Vec::with_capacity(edge * edge * edge);
    for z in 0..edge as i64 {
        for y in 0..edge as i64 {
            for x in 0..edge as i64 {
                let src = [start[0] + x, start[1] + y, start[2] + z];
                let inside = (0..3).all(|a| src[a] >= 0 && src[a] < dims[a] as i64);
                data.push(if inside {
                    v.get(src[0] as usize, src[1] as usize, src[2] as usize)
                } else {
                    PAD_HU
                });
            }
        }
    }
    let new_origin = [0, 1, 2].map(|a| origin[a] + start[a] as f64 * spacing[a]);
    Volume::new([edge; 3], spacing, new_origin, data)
}

pub fn temporal_difference(fu: &Volume, bl: &Volume) -> Result<Volume> {
    if !fu.same_grid(bl) {
        return Err(Error::ShapeMismatch(format!(
            "follow-up {:?} vs baseline {:?}",
            fu.dims(),
            bl.dims()
        )));
    }
    let data = fu.data().iter().zip(bl.data()).map(|(a, b)| a - b).collect();
    fu.with_data(data)
}

/// 6-neighbor Laplacian; out-of-grid neighbors replicate the nearest edge voxel.
pub fn laplacian(v: &Volume) -> Result<Volume> {
    let [nx, ny, nz] = v.dims();
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::VolumeTooSmall(format!(
            "laplacian needs at least 3 voxels per axis, got {:?}",
            v.dims()
        )));
    }
    let d = v.data();
    let mut out = vec![0.0; d.len()];
    let sx = 1;
    let sy = nx;
    let sz = nx * ny;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = v.index(x, y, z);
                let c = d[i];
                let xm = if x > 0 { d[i - sx] } else { c };
                let xp = if x + 1 < nx { d[i + sx] } else { c };
                let ym = if y > 0 { d[i - sy] } else { c };
                let yp = if y + 1 < ny { d[i + sy] } else { c };
                let zm = if z > 0 { d[i - sz] } else { c };
                let zp = if z + 1 < nz { d[i + sz] } else { c };
                out[i] = xm + xp + ym + yp + zm + zp - 6.0 * c;
            }
        }
    }
    v.with_data(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise drawn from a stream keyed by `seed`.
pub fn add_gaussian_noise(v: &Volume, sigma: f64, seed: u64) -> Volume {
    assert!(sigma >= 0.0, "noise sigma must be non-negative");
    if sigma == 0.0 {
        return v.clone();
    }
    let mut rng = keyed_rng(seed, 0, "gaussian-noise");
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    let data = v.data().iter().map(|&x| x + normal.sample(&mut rng)).collect();
    v.with_data(data).expect("finite noise")
}

/// Separable Gaussian blur with `sigma` in voxels and edge replication.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    if !(sigma > 0.0) {
        return v.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let dims = v.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = v.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let stride = strides[axis];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let coord = [x, y, z][axis] as i64;
                    let i = v.index(x, y, z);
                    let base = i - coord as usize * stride;
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let c = (coord + k as i64 - radius).clamp(0, n - 1) as usize;
                        acc += w * cur[base + c * stride];
                    }
                    next[i] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    v.with_data(cur).expect("finite blur")
}

/// Factor-2 average pooling per axis (axes of length 1 are kept).
pub fn downsample2(v: &Volume) -> Volume {
    let dims = v.dims();
    let out_dims = dims.map(|d| (d / 2).max(1));
    let factor = dims.map(|d| if d >= 2 { 2 } else { 1 });
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut acc = 0.0;
                let mut count = 0usize;
                for dz in 0..factor[2] {
                    for dy in 0..factor[1] {
                        for dx in 0..factor[0] {
                            acc += v.get(x * factor[0] + dx, y * factor[1] + dy, z * factor[2] + dz);
                            count += 1;
                        }
                    }
                }
                data.push(acc / count as f64);
            }
        }
    }
    let spacing = [0, 1, 2].map(|a| v.spacing()[a] * factor[a] as f64);
    Volume::new(out_dims, spacing, v.origin(), data).expect("valid pooled volume")
}

/// One longitudinal case: follow-up ROI, registered-baseline ROI and their difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePair {
    pub case_id: String,
    pub patient_id: String,
    pub fu_roi: Volume,
    pub bl_roi: Volume,
    pub delta: Volume,
    /// Lesion centroid in follow-up physical space (mm).
    pub centroid_mm: [f64; 3],
    /// 1 = real new lesion, 0 = pseudo-new.
    pub label: u8,
}

impl CasePair {
    pub fn new(
        case_id: impl Into<String>,
        patient_id: impl Into<String>,
        fu_roi: Volume,
        bl_roi: Volume,
        centroid_mm: [f64; 3],
        label: u8,
    ) -> Result<Self> {
        if label > 1 {
            return Err(Error::InvalidVolume(format!("label must be 0 or 1, got {label}")));
        }
        let delta = temporal_difference(&fu_roi, &bl_roi)?;
        Ok(Self {
            case_id: case_id.into(),
            patient_id: patient_id.into(),
            fu_roi,
            bl_roi,
            delta,
            centroid_mm,
            label,
        })
    }

    /// Same case with a replaced follow-up ROI; the difference is recomputed.
    pub fn with_fu(&self, fu_roi: Volume) -> Result<Self> {
        Self::new(
            self.case_id.clone(),
            self.patient_id.clone(),
            fu_roi,
            self.bl_roi.clone(),
            self.centroid_mm,
            self.label,
        )
    }

    pub fn roi_edge(&self) -> usize {
        self.fu_roi.dims()[0]
    }
}

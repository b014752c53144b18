//! Shallow 3D CNN encoder: two conv(3x3x3) -> batch-norm -> ReLU -> max-pool
//! blocks followed by global average pooling.
//!
//! Activations are batched as `[batch][channel][voxel]` with x-fastest voxels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KERNEL_VOLUME: usize = 27;
/// Encoder output width.
pub const FEATURES: usize = 16;
pub const BLOCK1_CHANNELS: usize = 8;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ConvBlock {
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_channels * KERNEL_VOLUME) as f64).sqrt();
        let weight = (0..out_channels * in_channels * KERNEL_VOLUME)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_channels).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
            bn_scale: vec![1.0; out_channels],
            bn_shift: vec![0.0; out_channels],
            running_mean: vec![0.0; out_channels],
            running_var: vec![1.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.out_channels],
            bn_scale: vec![0.0; self.out_channels],
            bn_shift: vec![0.0; self.out_channels],
            running_mean: vec![0.0; self.out_channels],
            running_var: vec![0.0; self.out_channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
}

impl EncoderParams {
    pub fn init(rng: &mut impl Rng) -> Self {
        Self {
            block1: ConvBlock::init(1, BLOCK1_CHANNELS, rng),
            block2: ConvBlock::init(BLOCK1_CHANNELS, FEATURES, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            block1: self.block1.zeros_like(),
            block2: self.block2.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b, cin, cout) in [
            ("block1", &self.block1, 1, BLOCK1_CHANNELS),
            ("block2", &self.block2, BLOCK1_CHANNELS, FEATURES),
        ] {
            let ok = b.in_channels == cin
                && b.out_channels == cout
                && b.weight.len() == cin * cout * KERNEL_VOLUME
                && [&b.bias, &b.bn_scale, &b.bn_shift, &b.running_mean, &b.running_var]
                    .iter()
                    .all(|v| v.len() == cout)
                && b.running_var.iter().all(|&v| v >= 0.0);
            if !ok {
                return Err(Error::ShapeMismatch(format!("encoder {name} has inconsistent tensor sizes")));
            }
        }
        Ok(())
    }
}

/// Batch statistics observed by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: [Vec<f64>; 2],
    /// Unbiased variance, as folded into the running estimate.
    pub var_unbiased: [Vec<f64>; 2],
}

/// Fold batch statistics into the running estimates.
pub fn update_running_stats(p: &mut EncoderParams, stats: &BatchStats) {
    for (block, k) in [(&mut p.block1, 0), (&mut p.block2, 1)] {
        for c in 0..block.out_channels {
            block.running_mean[c] = (1.0 - BN_MOMENTUM) * block.running_mean[c] + BN_MOMENTUM * stats.mean[k][c];
            block.running_var[c] = (1.0 - BN_MOMENTUM) * block.running_var[c] + BN_MOMENTUM * stats.var_unbiased[k][c];
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    dims: [usize; 3],
    pooled_dims: [usize; 3],
    input: Vec<f64>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    activated_mask: Vec<bool>,
    argmax: Vec<u32>,
}

/// Everything a backward pass needs from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    batch: usize,
    blocks: [BlockCache; 2],
    final_voxels: usize,
}

impl EncoderCache {
    /// True when both passes took the same ReLU and max-pool branches, i.e.
    /// the network was piecewise-linear-consistent between them.
    pub fn same_pattern(&self, other: &EncoderCache) -> bool {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .all(|(a, b)| a.activated_mask == b.activated_mask && a.argmax == b.argmax)
    }
}

/// Kernel taps as (dx, dy, dz) in `[kz][ky][kx]` order.
fn kernel_offsets() -> [(i64, i64, i64); KERNEL_VOLUME] {
    let mut out = [(0, 0, 0); KERNEL_VOLUME];
    let mut k = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                out[k] = (dx, dy, dz);
                k += 1;
            }
        }
    }
    out
}

/// Zero-padded grid (one voxel per side) in which every kernel tap is a
/// constant flat offset.
struct Padded {
    dims: [usize; 3],
    len: usize,
    offsets: [isize; KERNEL_VOLUME],
    /// Flat range covering every interior voxel; taps from it stay in bounds.
    span: (usize, usize),
}

impl Padded {
    fn new(dims: [usize; 3]) -> Self {
        let p = dims.map(|d| d + 2);
        let len = p.iter().product();
        let mut offsets = [0isize; KERNEL_VOLUME];
        for (k, (dx, dy, dz)) in kernel_offsets().into_iter().enumerate() {
            offsets[k] = dx as isize + p[0] as isize * (dy as isize + p[1] as isize * dz as isize);
        }
        let reach = 1 + p[0] + p[0] * p[1];
        Self {
            dims,
            len,
            offsets,
            span: (reach, len - reach),
        }
    }

    fn interior(&self, x: usize, y: usize, z: usize) -> usize {
        let p = self.dims.map(|d| d + 2);
        (x + 1) + p[0] * ((y + 1) + p[1] * (z + 1))
    }

    fn pad(&self, src: &[f64], dst: &mut Vec<f64>) {
        dst.clear();
        dst.resize(self.len, 0.0);
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                let s = nx * (y + ny * z);
                let d = self.interior(0, y, z);
                dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
            }
        }
    }

    /// `dst[interior] += src_padded[interior]`.
    fn unpad_add(&self, src: &[f64], dst: &mut [f64]) {
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                let s = self.interior(0, y, z);
                let d = nx * (y + ny * z);
                for (o, v) in dst[d..d + nx].iter_mut().zip(&src[s..s + nx]) {
                    *o += v;
                }
            }
        }
    }

    fn shifted(&self, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (lo, hi) = self.span;
        let off = self.offsets[k];
        (lo..hi, (lo as isize + off) as usize..(hi as isize + off) as usize)
    }
}

/// Runs `body` compiled with AVX2 when the CPU has it. Only the vector width
/// changes (no FMA), so results are bitwise the same on either path.
macro_rules! with_avx2 {
    ($name:ident($($arg:ident: $ty:ty),*) -> $ret:ty, $body:ident) => {
        fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

with_avx2!(dot(a: &[f64], b: &[f64]) -> f64, dot_body);
with_avx2!(
    correlate_add(dst: &mut [f64], srcs: &[&[f64]], w: &[f64], offsets: &[isize; KERNEL_VOLUME], range: (usize, usize)) -> (),
    correlate_add_body
);

/// Dot product with independent partial sums, so the reduction vectorizes.
#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `dst[j] += sum_c sum_k w[c][k] * srcs[c][j + offsets[k]]` for `j` in `range`,
/// eight outputs at a time held in registers.
#[inline(always)]
fn correlate_add_body(dst: &mut [f64], srcs: &[&[f64]], w: &[f64], offsets: &[isize; KERNEL_VOLUME], range: (usize, usize)) {
    const TILE: usize = 8;
    let (lo, hi) = range;
    let at = |j: usize, k: usize| (j as isize + offsets[k]) as usize;
    let mut j = lo;
    while j + TILE <= hi {
        let mut acc = [0.0; TILE];
        for (c, src) in srcs.iter().enumerate() {
            for k in 0..KERNEL_VOLUME {
                let wk = w[c * KERNEL_VOLUME + k];
                let s = &src[at(j, k)..at(j, k) + TILE];
                for l in 0..TILE {
                    acc[l] += wk * s[l];
                }
            }
        }
        for (d, a) in dst[j..j + TILE].iter_mut().zip(acc) {
            *d += a;
        }
        j += TILE;
    }
    for j in j..hi {
        let mut acc = 0.0;
        for (c, src) in srcs.iter().enumerate() {
            for k in 0..KERNEL_VOLUME {
                acc += w[c * KERNEL_VOLUME + k] * src[at(j, k)];
            }
        }
        dst[j] += acc;
    }
}

fn conv_forward(input: &[f64], batch: usize, dims: [usize; 3], block: &ConvBlock) -> Vec<f64> {
    let vox = dims.iter().product::<usize>();
    let (cin, cout) = (block.in_channels, block.out_channels);
    let grid = Padded::new(dims);
    let mut padded_in: Vec<Vec<f64>> = vec![Vec::new(); cin];
    let mut acc = vec![0.0; grid.len];
    let mut out = vec![0.0; batch * cout * vox];
    for b in 0..batch {
        for (ci, p) in padded_in.iter_mut().enumerate() {
            grid.pad(&input[(b * cin + ci) * vox..(b * cin + ci + 1) * vox], p);
        }
        let srcs: Vec<&[f64]> = padded_in.iter().map(|p| p.as_slice()).collect();
        for co in 0..cout {
            acc.fill(0.0);
            let w = &block.weight[co * cin * KERNEL_VOLUME..(co + 1) * cin * KERNEL_VOLUME];
            correlate_add(&mut acc, &srcs, w, &grid.offsets, grid.span);
            let out_ch = &mut out[(b * cout + co) * vox..(b * cout + co + 1) * vox];
            out_ch.fill(block.bias[co]);
            grid.unpad_add(&acc, out_ch);
        }
    }
    out
}

/// Accumulate weight/bias gradients and, if requested, the input gradient.
fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    batch: usize,
    dims: [usize; 3],
    block: &ConvBlock,
    grads: &mut ConvBlock,
    grad_input: Option<&mut Vec<f64>>,
) {
    let vox = dims.iter().product::<usize>();
    let (cin, cout) = (block.in_channels, block.out_channels);
    let grid = Padded::new(dims);
    let mut padded_in: Vec<Vec<f64>> = vec![Vec::new(); cin];
    let mut padded_g: Vec<Vec<f64>> = vec![Vec::new(); cout];
    let mut gin_acc = vec![0.0; grid.len];
    // The input gradient correlates the output gradient with negated tap
    // offsets; weights regrouped per input channel as `[ci][co][k]`.
    let back_offsets = grid.offsets.map(|o| -o);
    let flipped: Vec<Vec<f64>> = (0..cin)
        .map(|ci| {
            (0..cout)
                .flat_map(|co| &block.weight[(co * cin + ci) * KERNEL_VOLUME..(co * cin + ci + 1) * KERNEL_VOLUME])
                .copied()
                .collect()
        })
        .collect();
    let mut gin = grad_input;
    if let Some(g) = gin.as_deref_mut() {
        g.clear();
        g.resize(batch * cin * vox, 0.0);
    }
    for b in 0..batch {
        for (ci, p) in padded_in.iter_mut().enumerate() {
            grid.pad(&input[(b * cin + ci) * vox..(b * cin + ci + 1) * vox], p);
        }
        for (co, p) in padded_g.iter_mut().enumerate() {
            let g_ch = &grad_out[(b * cout + co) * vox..(b * cout + co + 1) * vox];
            grads.bias[co] += g_ch.iter().sum::<f64>();
            grid.pad(g_ch, p);
        }
        // Pads of the gradient are zero, so only interior outputs contribute.
        for (co, g) in padded_g.iter().enumerate() {
            for (ci, src) in padded_in.iter().enumerate() {
                let wbase = (co * cin + ci) * KERNEL_VOLUME;
                for k in 0..KERNEL_VOLUME {
                    let (o, i) = grid.shifted(k);
                    grads.weight[wbase + k] += dot(&g[o], &src[i]);
                }
            }
        }
        if let Some(gin) = gin.as_deref_mut() {
            let srcs: Vec<&[f64]> = padded_g.iter().map(|p| p.as_slice()).collect();
            for (ci, w) in flipped.iter().enumerate() {
                gin_acc.fill(0.0);
                correlate_add(&mut gin_acc, &srcs, w, &back_offsets, grid.span);
                grid.unpad_add(&gin_acc, &mut gin[(b * cin + ci) * vox..(b * cin + ci + 1) * vox]);
            }
        }
    }
}

fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d / 2)
}

/// 2x2x2 stride-2 max-pool (trailing odd planes dropped).
fn max_pool(input: &[f64], channels: usize, dims: [usize; 3]) -> (Vec<f64>, Vec<u32>) {
    let [nx, ny, _] = dims;
    let pd = pooled_dims(dims);
    let vin = dims.iter().product::<usize>();
    let vout = pd.iter().product::<usize>();
    let mut out = vec![0.0; channels * vout];
    let mut arg = vec![0u32; channels * vout];
    for c in 0..channels {
        let src = &input[c * vin..(c + 1) * vin];
        for z in 0..pd[2] {
            for y in 0..pd[1] {
                for x in 0..pd[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * x + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = c * vout + x + pd[0] * (y + pd[1] * z);
                    out[o] = best;
                    arg[o] = (c * vin + best_i) as u32;
                }
            }
        }
    }
    (out, arg)
}

struct BlockOutput {
    pooled: Vec<f64>,
    cache: Option<BlockCache>,
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

fn block_forward(input: Vec<f64>, batch: usize, dims: [usize; 3], block: &ConvBlock, mode: Mode, keep: bool) -> BlockOutput {
    let vox = dims.iter().product::<usize>();
    let cout = block.out_channels;
    let mut act = conv_forward(&input, batch, dims, block);
    let m = (batch * vox) as f64;

    let mut mean = vec![0.0; cout];
    let mut var = vec![0.0; cout];
    match mode {
        Mode::Train => {
            for c in 0..cout {
                let mut s = 0.0;
                for b in 0..batch {
                    s += act[(b * cout + c) * vox..(b * cout + c + 1) * vox].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut v = 0.0;
                for b in 0..batch {
                    v += act[(b * cout + c) * vox..(b * cout + c + 1) * vox]
                        .iter()
                        .map(|x| (x - mu).powi(2))
                        .sum::<f64>();
                }
                mean[c] = mu;
                var[c] = v / m;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(&block.running_mean);
            var.copy_from_slice(&block.running_var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut normalized = if keep { vec![0.0; act.len()] } else { Vec::new() };
    for b in 0..batch {
        for c in 0..cout {
            let range = (b * cout + c) * vox..(b * cout + c + 1) * vox;
            let (g, sh, mu, is) = (block.bn_scale[c], block.bn_shift[c], mean[c], inv_std[c]);
            for (j, a) in act[range.clone()].iter_mut().enumerate() {
                let xh = (*a - mu) * is;
                if keep {
                    normalized[range.start + j] = xh;
                }
                *a = g * xh + sh;
            }
        }
    }
    let activated_mask: Vec<bool> = if keep { act.iter().map(|&v| v > 0.0).collect() } else { Vec::new() };
    act.iter_mut().for_each(|v| *v = v.max(0.0));

    let (pooled, argmax) = max_pool(&act, batch * cout, dims);
    let var_unbiased = if m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var.clone() };
    BlockOutput {
        pooled,
        cache: keep.then(|| BlockCache {
            dims,
            pooled_dims: pooled_dims(dims),
            input,
            normalized,
            inv_std,
            activated_mask,
            argmax,
        }),
        mean,
        var_unbiased,
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::ShapeMismatch(format!(
            "encoder input needs at least 4 voxels per axis, got {dims:?}"
        )));
    }
    Ok(())
}

/// Forward a batch of single-channel volumes (each `dims` voxels, concatenated).
///
/// Returns `[batch][FEATURES]` features, the backward cache (train mode) and
/// the observed batch statistics (train mode).
pub fn encoder_forward_batch(
    p: &EncoderParams,
    input: &[f64],
    batch: usize,
    dims: [usize; 3],
    mode: Mode,
    keep_cache: bool,
) -> Result<(Vec<f64>, Option<EncoderCache>, Option<BatchStats>)> {
    check_dims(dims)?;
    let vox = dims.iter().product::<usize>();
    if input.len() != batch * vox || batch == 0 {
        return Err(Error::ShapeMismatch(format!(
            "encoder input has {} values, expected {} x {vox}",
            input.len(),
            batch
        )));
    }
    let keep = keep_cache && mode == Mode::Train;
    let o1 = block_forward(input.to_vec(), batch, dims, &p.block1, mode, keep);
    let d2 = pooled_dims(dims);
    let o2 = block_forward(o1.pooled, batch, d2, &p.block2, mode, keep);
    let d3 = pooled_dims(d2);
    let v3 = d3.iter().product::<usize>();
    let mut features = vec![0.0; batch * FEATURES];
    for b in 0..batch {
        for c in 0..FEATURES {
            let s = &o2.pooled[(b * FEATURES + c) * v3..(b * FEATURES + c + 1) * v3];
            features[b * FEATURES + c] = s.iter().sum::<f64>() / v3 as f64;
        }
    }
    let stats = (mode == Mode::Train).then_some(BatchStats {
        mean: [o1.mean, o2.mean],
        var_unbiased: [o1.var_unbiased, o2.var_unbiased],
    });
    let cache = match (o1.cache, o2.cache) {
        (Some(c1), Some(c2)) => Some(EncoderCache {
            batch,
            blocks: [c1, c2],
            final_voxels: v3,
        }),
        _ => None,
    };
    Ok((features, cache, stats))
}

/// Single-volume forward pass; train mode uses the volume's own statistics.
pub fn encoder_forward(p: &EncoderParams, input: &[f64], dims: [usize; 3], mode: Mode) -> Result<Vec<f64>> {
    Ok(encoder_forward_batch(p, input, 1, dims, mode, false)?.0)
}

fn block_backward(
    cache: &BlockCache,
    grad_pooled: &[f64],
    batch: usize,
    block: &ConvBlock,
    grads: &mut ConvBlock,
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let vox = cache.dims.iter().product::<usize>();
    let cout = block.out_channels;
    let mut g = vec![0.0; batch * cout * vox];
    for (gp, &a) in grad_pooled.iter().zip(&cache.argmax) {
        g[a as usize] += gp;
    }
    for (gv, &on) in g.iter_mut().zip(&cache.activated_mask) {
        if !on {
            *gv = 0.0;
        }
    }
    let m = (batch * vox) as f64;
    for c in 0..cout {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..batch {
            let r = (b * cout + c) * vox..(b * cout + c + 1) * vox;
            for (gv, xh) in g[r.clone()].iter().zip(&cache.normalized[r]) {
                sum_g += gv;
                sum_gx += gv * xh;
            }
        }
        grads.bn_shift[c] += sum_g;
        grads.bn_scale[c] += sum_gx;
        let k = block.bn_scale[c] * cache.inv_std[c] / m;
        for b in 0..batch {
            let r = (b * cout + c) * vox..(b * cout + c + 1) * vox;
            for (gv, xh) in g[r.clone()].iter_mut().zip(&cache.normalized[r]) {
                *gv = k * (m * *gv - sum_g - xh * sum_gx);
            }
        }
    }
    let mut gin = Vec::new();
    conv_backward(
        &cache.input,
        &g,
        batch,
        cache.dims,
        block,
        grads,
        need_input_grad.then_some(&mut gin),
    );
    need_input_grad.then_some(gin)
}

/// Accumulate parameter gradients given `grad_features` (`[batch][FEATURES]`).
pub fn encoder_backward(p: &EncoderParams, cache: &EncoderCache, grad_features: &[f64], grads: &mut EncoderParams) {
    let batch = cache.batch;
    let v3 = cache.final_voxels;
    let mut gp2 = vec![0.0; batch * FEATURES * v3];
    for b in 0..batch {
        for c in 0..FEATURES {
            let g = grad_features[b * FEATURES + c] / v3 as f64;
            gp2[(b * FEATURES + c) * v3..(b * FEATURES + c + 1) * v3]
                .iter_mut()
                .for_each(|v| *v = g);
        }
    }
    debug_assert_eq!(cache.blocks[1].pooled_dims.iter().product::<usize>(), v3);
    let gp1 = block_backward(&cache.blocks[1], &gp2, batch, &p.block2, &mut grads.block2, true)
        .expect("input gradient requested");
    block_backward(&cache.blocks[0], &gp1, batch, &p.block1, &mut grads.block1, false);
}

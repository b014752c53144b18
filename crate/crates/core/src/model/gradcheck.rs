//! Central finite-difference check of the analytic gradients.
//!
//! ReLU and max-pool are only piecewise smooth. A probe whose `+h` or `-h`
//! evaluation switches any activation branch relative to the unperturbed pass
//! straddles a kink, where a central difference does not estimate the
//! derivative; such probes are counted separately instead of scored.

use rand::seq::index::sample;

use super::{batch_loss_with_caches, loss_and_gradients, EncoderCache, ModelInput, ModelParams};
use crate::error::Result;
use crate::rng::keyed_rng;

/// Gradients smaller than this in both estimates are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// Probes scored (no kink crossed).
    pub checked: usize,
    /// Probes that crossed a ReLU or max-pool switch.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn same_patterns(a: &[EncoderCache], b: &[EncoderCache]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_pattern(y))
}

/// Compare analytic and central-difference gradients for every trainable
/// tensor. `max_per_tensor` caps how many elements are probed per tensor
/// (chosen by `seed`); `None` probes all of them.
pub fn check_gradients(
    params: &ModelParams,
    inputs: &[&ModelInput],
    lambda_brier: f64,
    h: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
) -> Result<Vec<TensorCheck>> {
    let analytic = loss_and_gradients(params, inputs, lambda_brier)?.grads;
    let (_, base_pattern) = batch_loss_with_caches(params, inputs, lambda_brier)?;
    let grads = analytic.tensors();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (t, (name, g)) in grads.iter().enumerate() {
        let indices: Vec<usize> = match max_per_tensor {
            Some(m) if m < g.len() => {
                let mut rng = keyed_rng(seed, t as u64, "gradcheck");
                let mut v = sample(&mut rng, g.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..g.len()).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let (mut checked, mut kinks) = (0, 0);
        for &i in &indices {
            let original = probe.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = original + h;
            let (up, up_pattern) = batch_loss_with_caches(&probe, inputs, lambda_brier)?;
            probe.tensors_mut()[t].1[i] = original - h;
            let (down, down_pattern) = batch_loss_with_caches(&probe, inputs, lambda_brier)?;
            probe.tensors_mut()[t].1[i] = original;
            if !same_patterns(&base_pattern, &up_pattern) || !same_patterns(&base_pattern, &down_pattern) {
                kinks += 1;
                continue;
            }
            checked += 1;
            let numeric = (up - down) / (2.0 * h);
            max_rel = max_rel.max(relative_error(g[i], numeric));
        }
        out.push(TensorCheck {
            name: name.clone(),
            checked,
            kinks,
            max_rel_error: max_rel,
            max_abs_grad: g.iter().fold(0.0, |m, v| m.max(v.abs())),
        });
    }
    Ok(out)
}

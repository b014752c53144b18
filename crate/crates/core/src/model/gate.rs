//! Sign-constrained quality gate.
//!
//! `alpha = sigmoid(w1 q_ct + w2 q_topo - w3 q_reg + b)` with
//! `w_i = softplus(theta_i) >= 0`, so alpha is non-decreasing in q_ct and
//! q_topo and non-increasing in q_reg for every parameter value.

use serde::{Deserialize, Serialize};

use crate::quality::QualityVector;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `w > 0`.
pub fn softplus_inverse(w: f64) -> f64 {
    assert!(w > 0.0, "softplus is strictly positive");
    if w > 30.0 {
        w
    } else {
        w.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// Raw parameters for (q_ct, q_topo, q_reg) weights.
    pub theta: [f64; 3],
    pub bias: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            theta: [0.0; 3],
            bias: 0.0,
        }
    }
}

impl GateParams {
    pub fn zeros() -> Self {
        Self::default()
    }

    /// Effective non-negative weights `(w1, w2, w3)`.
    pub fn weights(&self) -> [f64; 3] {
        self.theta.map(softplus)
    }

    pub fn logit(&self, q: &QualityVector) -> f64 {
        let [w1, w2, w3] = self.weights();
        w1 * q.q_ct + w2 * q.q_topo - w3 * q.q_reg + self.bias
    }

    pub fn alpha(&self, q: &QualityVector) -> f64 {
        sigmoid(self.logit(q))
    }

    /// Gradient of the gate parameters given `d loss / d gate-logit`.
    pub fn accumulate_grad(&self, q: &QualityVector, d_logit: f64, grads: &mut GateParams) {
        let s = self.theta.map(sigmoid);
        grads.theta[0] += d_logit * s[0] * q.q_ct;
        grads.theta[1] += d_logit * s[1] * q.q_topo;
        grads.theta[2] -= d_logit * s[2] * q.q_reg;
        grads.bias += d_logit;
    }
}

pub fn gate_alpha(g: &GateParams, q: &QualityVector) -> f64 {
    g.alpha(q)
}

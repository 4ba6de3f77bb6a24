//! Differential-privacy mechanism: isotropic noise whose norm is
//! exponentially distributed, gradient clipping, global-sensitivity
//! calculators, and a linear-composition budget ledger.
//!
//! The noise vector is built as `r * u` where `r ~ Exp(scale = sens/eps)` and
//! `u` is uniform on the unit sphere. This gives `E[eta] = 0` and
//! `E[|eta|^2] = 2 (sens/eps)^2`.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AfdpError, Result};
use crate::vecmath;

/// Per-release privacy parameters: budget `epsilon`, failure probability
/// `delta`, and the current global sensitivity of the released gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, sensitivity: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(AfdpError::InvalidParameter(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
            return Err(AfdpError::InvalidParameter(format!(
                "delta must lie in (0,1), got {delta}"
            )));
        }
        if !sensitivity.is_finite() || sensitivity <= 0.0 {
            return Err(AfdpError::InvalidParameter(format!(
                "sensitivity must be positive and finite, got {sensitivity}"
            )));
        }
        Ok(Self { epsilon, delta, sensitivity })
    }

    /// Noise scale `lambda = sensitivity / epsilon`.
    pub fn scale(&self) -> f64 {
        self.sensitivity / self.epsilon
    }
}

/// A drawn noise vector with its cached Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub vector: Vec<f64>,
    pub norm: f64,
}

/// Draw an isotropic noise vector whose norm follows the exponential
/// distribution with scale `spec.scale()`.
pub fn sample_noise<R: Rng + ?Sized>(
    spec: &PrivacySpec,
    dim: usize,
    rng: &mut R,
) -> Result<NoiseSample> {
    if dim == 0 {
        return Err(AfdpError::InvalidParameter("noise dimension must be >= 1".into()));
    }
    let r = Exp::new(1.0 / spec.scale())
        .map_err(|e| AfdpError::InvalidParameter(format!("bad noise scale: {e}")))?
        .sample(rng);
    let mut u = unit_sphere(dim, rng);
    vecmath::scale(&mut u, r);
    Ok(NoiseSample { vector: u, norm: r })
}

/// Uniform direction on the unit sphere, by normalizing iid standard normals.
/// The measure-zero all-zero draw is resampled.
fn unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = vecmath::norm(&v);
        if n > 0.0 && n.is_finite() {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Rescale `g` so its norm is at most `clip_bound`, preserving direction.
pub fn clip_gradient(g: &[f64], clip_bound: f64) -> Result<Vec<f64>> {
    if !clip_bound.is_finite() || clip_bound <= 0.0 {
        return Err(AfdpError::InvalidParameter(format!(
            "clip bound must be positive and finite, got {clip_bound}"
        )));
    }
    if !vecmath::all_finite(g) {
        return Err(AfdpError::NonFinite("gradient"));
    }
    let n = vecmath::norm(g);
    let denom = (n / clip_bound).max(1.0);
    Ok(g.iter().map(|x| x / denom).collect())
}

/// Global sensitivity of a size-`b` mini-batch average gradient when every
/// per-sample gradient has norm at most `grad_bound`: `2 * grad_bound / b`.
pub fn sensitivity_from_bound(grad_bound: f64, batch: usize) -> Result<f64> {
    if !grad_bound.is_finite() || grad_bound <= 0.0 {
        return Err(AfdpError::InvalidParameter(format!(
            "gradient bound must be positive, got {grad_bound}"
        )));
    }
    if batch == 0 {
        return Err(AfdpError::InvalidParameter("batch size must be >= 1".into()));
    }
    Ok(2.0 * grad_bound / batch as f64)
}

/// Smallest sensitivity for which a sample-variance argument keeps the
/// release within budget except with probability `delta`:
/// `2*sigma / (b * sqrt(1 - sqrt(1 - delta)))`.
pub fn initial_sensitivity(sigma: f64, batch: usize, delta: f64) -> Result<f64> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(AfdpError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if batch == 0 {
        return Err(AfdpError::InvalidParameter("batch size must be >= 1".into()));
    }
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
        return Err(AfdpError::InvalidParameter(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok(2.0 * sigma / (batch as f64 * (1.0 - (1.0 - delta).sqrt()).sqrt()))
}

/// Ratio of the noise densities centered at `g1` and `g2` evaluated at `nu`:
/// `exp(eps * (|nu - g2| - |nu - g1|) / sens)`. Used as the analytic oracle
/// for the per-release privacy guarantee.
pub fn density_ratio_bound(g1: &[f64], g2: &[f64], nu: &[f64], spec: &PrivacySpec) -> Result<f64> {
    if g1.len() != g2.len() || g1.len() != nu.len() {
        return Err(AfdpError::DimensionMismatch { expected: g1.len(), got: g2.len().max(nu.len()) });
    }
    let d1 = vecmath::norm(&vecmath::sub(nu, g1));
    let d2 = vecmath::norm(&vecmath::sub(nu, g2));
    Ok((spec.epsilon * (d2 - d1) / spec.sensitivity).exp())
}

/// Linear-composition privacy accountant. The running total uses compensated
/// summation so that T equal additions sum exactly.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub per_iteration: Vec<(u64, f64)>,
    total: f64,
    compensation: f64,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Record `epsilon` spent at iteration `t`. Iteration indices must be
    /// strictly increasing.
    pub fn compose(&mut self, epsilon: f64, t: u64) -> Result<()> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(AfdpError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if let Some(&(last, _)) = self.per_iteration.last() {
            if t <= last {
                return Err(AfdpError::DuplicateIteration(t));
            }
        }
        // Kahan step.
        let y = epsilon - self.compensation;
        let sum = self.total + y;
        self.compensation = (sum - self.total) - y;
        self.total = sum;
        self.per_iteration.push((t, epsilon));
        Ok(())
    }
}

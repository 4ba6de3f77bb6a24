//! Learning-rate policies for the four algorithms and the multi-stage
//! controller that shrinks the global sensitivity by a factor `theta` once
//! per stage while keeping the constant stage rate `1/(2 P L (tau_max+1))`.

use serde::{Deserialize, Serialize};

use crate::error::{AfdpError, Result};

/// Learning-rate policy, one per algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatePolicy {
    /// gamma_t^-1 = L + sqrt(t+1) * sigma / (R sqrt(b))
    Csgd { l: f64, sigma: f64, radius: f64, batch: usize },
    /// gamma_t^-1 = L (tau_max+1)^2 + sqrt(t+1) * sigma / (R sqrt(b))
    Asgd { l: f64, tau_max: u64, sigma: f64, radius: f64, batch: usize },
    /// gamma_t^-1 = L (tau_max+1) + sqrt(delta_b+1) sqrt(t)
    Audp { l: f64, tau_max: u64, delta_b: f64 },
    /// gamma_t^-1 = L ((tau_max+1)^2 + 1) + sqrt(delta_b+1) sqrt(t); trades a
    /// heavier constant for dropping the log factor in the error bound.
    AudpV2 { l: f64, tau_max: u64, delta_b: f64 },
    /// Constant stage rate gamma = 1/(2 P L (tau_max+1)).
    MapaStage { l: f64, tau_max: u64, p: f64 },
}

/// Learning rate at iteration `t` (1-based).
pub fn rate_at(policy: &RatePolicy, t: u64) -> Result<f64> {
    if t == 0 {
        return Err(AfdpError::InvalidParameter("iteration index starts at 1".into()));
    }
    let t_f = t as f64;
    let inv = match *policy {
        RatePolicy::Csgd { l, sigma, radius, batch } => {
            l + (t_f + 1.0).sqrt() * sigma / (radius * (batch as f64).sqrt())
        }
        RatePolicy::Asgd { l, tau_max, sigma, radius, batch } => {
            let tau1 = (tau_max + 1) as f64;
            l * tau1 * tau1 + (t_f + 1.0).sqrt() * sigma / (radius * (batch as f64).sqrt())
        }
        RatePolicy::Audp { l, tau_max, delta_b } => {
            l * (tau_max + 1) as f64 + (delta_b + 1.0).sqrt() * t_f.sqrt()
        }
        RatePolicy::AudpV2 { l, tau_max, delta_b } => {
            let tau1 = (tau_max + 1) as f64;
            l * (tau1 * tau1 + 1.0) + (delta_b + 1.0).sqrt() * t_f.sqrt()
        }
        RatePolicy::MapaStage { l, tau_max, p } => 2.0 * p * l * (tau_max + 1) as f64,
    };
    if !(inv > 0.0) || !inv.is_finite() {
        return Err(AfdpError::InvalidParameter(format!("degenerate rate 1/{inv}")));
    }
    Ok(1.0 / inv)
}

/// Stage coefficient `P = max(8 delta_b / ((tau_max+1) b^2 sens^2 theta^2), 1)`.
pub fn stage_p(delta_b: f64, tau_max: u64, batch: usize, sensitivity: f64, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(AfdpError::InvalidParameter(format!("theta must lie in (0,1), got {theta}")));
    }
    if !(delta_b > 0.0) || !(sensitivity > 0.0) || batch == 0 {
        return Err(AfdpError::InvalidParameter("stage_p inputs must be positive".into()));
    }
    let b = batch as f64;
    let p = 8.0 * delta_b
        / ((tau_max + 1) as f64 * b * b * sensitivity * sensitivity * theta * theta);
    Ok(p.max(1.0))
}

/// Stage length `ceil(4 P^2 L (tau_max+1)^2 f_gap / delta_b)`, at least 1.
pub fn stage_iterations(p: f64, l: f64, tau_max: u64, f_gap: f64, delta_b: f64) -> Result<u64> {
    if !(p >= 1.0) || !(l > 0.0) || !(f_gap > 0.0) || !(delta_b > 0.0) {
        return Err(AfdpError::InvalidParameter("stage_iterations inputs out of range".into()));
    }
    let tau1 = (tau_max + 1) as f64;
    let t0 = 4.0 * p * p * l * tau1 * tau1 * f_gap / delta_b;
    Ok((t0.ceil() as u64).max(1))
}

/// Diagnostic estimate of the post-stage sensitivity,
/// `2 sqrt(2 delta_b / (P (tau_max+1))) / b`. When `P` sits exactly at its
/// unclamped value this equals `theta * sens`; the operative stage rule is
/// the exact `theta` reduction in [`advance_stage`].
pub fn next_sensitivity(delta_b: f64, p: f64, tau_max: u64, batch: usize) -> Result<f64> {
    if !(delta_b > 0.0) || !(p >= 1.0) || batch == 0 {
        return Err(AfdpError::InvalidParameter("next_sensitivity inputs must be positive".into()));
    }
    Ok(2.0 * (2.0 * delta_b / (p * (tau_max + 1) as f64)).sqrt() / batch as f64)
}

/// Combined sampling-plus-noise variance `sigma^2/b + 2 sens^2 / eps0^2`.
pub fn update_delta_b(sigma: f64, batch: usize, sensitivity: f64, epsilon0: f64) -> Result<f64> {
    if epsilon0 <= 0.0 || !epsilon0.is_finite() {
        return Err(AfdpError::InvalidParameter(format!(
            "epsilon0 must be positive, got {epsilon0}"
        )));
    }
    if sigma < 0.0 || batch == 0 || sensitivity < 0.0 {
        return Err(AfdpError::InvalidParameter("update_delta_b inputs out of range".into()));
    }
    Ok(sigma * sigma / batch as f64 + 2.0 * sensitivity * sensitivity / (epsilon0 * epsilon0))
}

/// Constants the stage controller needs; fixed for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub sigma: f64,
    pub batch: usize,
    pub epsilon0: f64,
    pub theta: f64,
    pub l: f64,
    pub tau_max: u64,
    pub f_gap: f64,
}

/// Per-stage state of the multi-stage controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage_index: u64,
    pub p: f64,
    pub gamma: f64,
    pub iterations: u64,
    pub sensitivity: f64,
    pub delta_b: f64,
    pub iterations_done_in_stage: u64,
}

impl StageState {
    /// First stage, from an initial sensitivity.
    pub fn initial(cfg: &StageConfig, sensitivity: f64) -> Result<Self> {
        Self::build(cfg, 0, sensitivity)
    }

    fn build(cfg: &StageConfig, index: u64, sensitivity: f64) -> Result<Self> {
        let delta_b = update_delta_b(cfg.sigma, cfg.batch, sensitivity, cfg.epsilon0)?;
        let p = stage_p(delta_b, cfg.tau_max, cfg.batch, sensitivity, cfg.theta)?;
        let gamma = 1.0 / (2.0 * p * cfg.l * (cfg.tau_max + 1) as f64);
        let iterations = stage_iterations(p, cfg.l, cfg.tau_max, cfg.f_gap, delta_b)?;
        // Stage rate always satisfies the constant-rate hypothesis
        // gamma^-1 >= 2 L (tau_max+1), since P >= 1.
        debug_assert!(1.0 / gamma >= 2.0 * cfg.l * (cfg.tau_max + 1) as f64 * (1.0 - 1e-12));
        Ok(StageState {
            stage_index: index,
            p,
            gamma,
            iterations,
            sensitivity,
            delta_b,
            iterations_done_in_stage: 0,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.iterations_done_in_stage >= self.iterations
    }

    pub fn record_update(&mut self) {
        debug_assert!(self.iterations_done_in_stage < self.iterations);
        self.iterations_done_in_stage += 1;
    }
}

/// Close out a finished stage: shrink the sensitivity by `theta` exactly and
/// recompute (delta_b, P, gamma, T_s) for the next stage.
pub fn advance_stage(state: &StageState, cfg: &StageConfig) -> Result<StageState> {
    if !state.is_complete() {
        return Err(AfdpError::InvalidConfig(format!(
            "stage {} advanced after {}/{} iterations",
            state.stage_index, state.iterations_done_in_stage, state.iterations
        )));
    }
    StageState::build(cfg, state.stage_index + 1, cfg.theta * state.sensitivity)
}

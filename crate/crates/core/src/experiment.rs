//! Sweep harness: run grids of (algorithm, sweep value, seed) cells in
//! parallel, detect convergence, aggregate medians, and emit CSV/JSON.
//! Also hosts the gradient-inversion probe used to illustrate what an
//! unprotected gradient leaks.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, Algorithm, RunConfig, RunRecord};
use crate::error::{AfdpError, Result};
use crate::models::{Dataset, ModelSpec, Sample};
use crate::vecmath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Epsilon,
    Edges,
    Batch,
    Sigma,
    Smoothness,
    Delta,
    Theta,
}

impl std::str::FromStr for SweepVariable {
    type Err = AfdpError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "epsilon" => SweepVariable::Epsilon,
            "edges" => SweepVariable::Edges,
            "batch" => SweepVariable::Batch,
            "sigma" => SweepVariable::Sigma,
            "smoothness" | "lipschitz" => SweepVariable::Smoothness,
            "delta" => SweepVariable::Delta,
            "theta" => SweepVariable::Theta,
            other => {
                return Err(AfdpError::InvalidConfig(format!("unknown sweep variable '{other}'")))
            }
        })
    }
}

/// Convergence is declared when the mean loss over `window` successive
/// recorded values drops below `threshold`. With no explicit threshold the
/// harness runs a non-private sequential reference and uses 1.05x its final
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRule {
    pub window: usize,
    pub threshold: Option<f64>,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        ConvergenceRule { window: 5, threshold: None }
    }
}

impl ConvergenceRule {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(AfdpError::InvalidConfig("convergence window must be >= 2".into()));
        }
        Ok(())
    }
}

/// First iteration at which the trailing-window mean of recorded losses
/// falls below the threshold; `None` if it never does. Operates on whatever
/// losses the run recorded, so with an evaluation stride > 1 the window
/// spans `window` recorded points, and the returned `t` is the iteration of
/// the window's last point.
pub fn iterations_to_converge(record: &RunRecord, rule: &ConvergenceRule, threshold: f64) -> Option<u64> {
    rule.validate().ok()?;
    let pts: Vec<(u64, f64)> =
        record.rows.iter().filter_map(|r| r.loss.map(|l| (r.t, l))).collect();
    if pts.len() < rule.window {
        return None;
    }
    for end in rule.window..=pts.len() {
        let w = &pts[end - rule.window..end];
        let mean = w.iter().map(|&(_, l)| l).sum::<f64>() / rule.window as f64;
        if mean < threshold {
            return Some(w[rule.window - 1].0);
        }
    }
    None
}

/// A full sweep: the cross product of algorithms, sweep values, and seeds
/// over one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub algorithms: Vec<Algorithm>,
    pub sweep: SweepVariable,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
    #[serde(default)]
    pub convergence: ConvergenceRule,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(AfdpError::InvalidConfig("plan needs at least one algorithm".into()));
        }
        if self.values.is_empty() {
            return Err(AfdpError::InvalidConfig("plan needs at least one sweep value".into()));
        }
        if self.seeds.is_empty() {
            return Err(AfdpError::InvalidConfig("plan needs at least one seed".into()));
        }
        self.convergence.validate()
    }
}

/// Specialize the base config/model/dataset for one sweep value.
fn apply_sweep(
    var: SweepVariable,
    value: f64,
    config: &mut RunConfig,
    spec: &mut ModelSpec,
    dataset: &mut Dataset,
) -> Result<()> {
    match var {
        SweepVariable::Epsilon => {
            if !(value > 0.0) {
                return Err(AfdpError::InvalidConfig(format!("epsilon sweep value {value}")));
            }
            config.epsilons = vec![value];
        }
        SweepVariable::Edges => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(AfdpError::InvalidConfig(format!("edge sweep value {value}")));
            }
            config.edges = value as usize;
            // More edges means a deeper pipeline; the staleness bound grows
            // with it.
            config.tau_max = config.tau_max.max(config.edges as u64);
        }
        SweepVariable::Batch => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(AfdpError::InvalidConfig(format!("batch sweep value {value}")));
            }
            config.batch = value as usize;
        }
        SweepVariable::Sigma => {
            if !(value >= 0.0) {
                return Err(AfdpError::InvalidConfig(format!("sigma sweep value {value}")));
            }
            spec.sample_variance_sigma2 = value * value;
            if let Dataset::QuadraticNoise { sigma, .. } = dataset {
                *sigma = value;
            }
        }
        SweepVariable::Smoothness => {
            if !(value > 0.0) {
                return Err(AfdpError::InvalidConfig(format!("smoothness sweep value {value}")));
            }
            spec.smoothness_l = value;
        }
        SweepVariable::Delta => {
            if !(value > 0.0 && value < 1.0) {
                return Err(AfdpError::InvalidConfig(format!("delta sweep value {value}")));
            }
            config.delta = value;
        }
        SweepVariable::Theta => {
            if !(value > 0.0 && value < 1.0) {
                return Err(AfdpError::InvalidConfig(format!("theta sweep value {value}")));
            }
            config.theta = value;
        }
    }
    Ok(())
}

/// One (algorithm, sweep value, seed) result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub algorithm: Algorithm,
    pub sweep_value: f64,
    pub seed: u64,
    pub status: String,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub iterations_to_converge: Option<u64>,
    pub epsilon_spent: Option<f64>,
    pub config_hash: String,
}

/// Per-cell medians over seeds (successful rows only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCell {
    pub algorithm: Algorithm,
    pub sweep_value: f64,
    pub rows_ok: usize,
    pub rows_failed: usize,
    pub median_loss: Option<f64>,
    pub median_accuracy: Option<f64>,
    pub median_iterations_to_converge: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResults {
    pub plan: ExperimentPlan,
    pub sweep_variable: SweepVariable,
    pub threshold_used: f64,
    pub rows: Vec<PlanRow>,
    pub cells: Vec<PlanCell>,
}

/// Median of an unsorted slice; `None` when empty. Even lengths average the
/// two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Execute the whole grid. Each cell is an independent deterministic
/// simulation, run on the rayon pool; a failed cell becomes a failed row
/// and the plan continues.
pub fn run_plan(
    plan: &ExperimentPlan,
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
) -> Result<PlanResults> {
    plan.validate()?;

    // Resolve the convergence threshold once, against a sequential
    // non-private reference if the plan leaves it open.
    let threshold = match plan.convergence.threshold {
        Some(t) => t,
        None => {
            let mut ref_cfg = plan.base.clone();
            ref_cfg.algorithm = Algorithm::Csgd;
            ref_cfg.edges = 1;
            ref_cfg.tau_max = 0;
            ref_cfg.delay = engine::DelayModel::UniformRandom;
            ref_cfg.seed = plan.seeds[0];
            let reference = engine::run(&ref_cfg, spec, dataset, test)?;
            let final_loss = reference
                .rows
                .iter()
                .rev()
                .find_map(|r| r.loss)
                .ok_or_else(|| AfdpError::InvalidConfig("reference run recorded no loss".into()))?;
            1.05 * final_loss
        }
    };

    let grid: Vec<(Algorithm, f64, u64)> = plan
        .algorithms
        .iter()
        .flat_map(|&a| {
            plan.values
                .iter()
                .flat_map(move |&v| plan.seeds.iter().map(move |&s| (a, v, s)))
        })
        .collect();

    let rows: Vec<PlanRow> = grid
        .par_iter()
        .map(|&(algorithm, value, seed)| {
            let mut config = plan.base.clone();
            let mut cell_spec = spec.clone();
            let mut cell_dataset = dataset.clone();
            config.algorithm = algorithm;
            config.seed = seed;
            let prepared =
                apply_sweep(plan.sweep, value, &mut config, &mut cell_spec, &mut cell_dataset)
                    .and_then(|()| engine::run(&config, &cell_spec, &cell_dataset, test));
            match prepared {
                Ok(record) => {
                    let last_eval = record.rows.iter().rev().find(|r| r.loss.is_some());
                    PlanRow {
                        algorithm,
                        sweep_value: value,
                        seed,
                        status: "ok".into(),
                        final_loss: last_eval.and_then(|r| r.loss),
                        final_accuracy: last_eval.and_then(|r| r.accuracy),
                        iterations_to_converge: iterations_to_converge(
                            &record,
                            &plan.convergence,
                            threshold,
                        ),
                        epsilon_spent: Some(record.ledger_total),
                        config_hash: record.meta.config_hash.clone(),
                    }
                }
                Err(e) => PlanRow {
                    algorithm,
                    sweep_value: value,
                    seed,
                    status: format!("failed: {e}"),
                    final_loss: None,
                    final_accuracy: None,
                    iterations_to_converge: None,
                    epsilon_spent: None,
                    config_hash: engine::config_hash(&config, &cell_spec),
                },
            }
        })
        .collect();

    // Aggregate per (algorithm, value), preserving plan order.
    let mut cells = Vec::new();
    for &a in &plan.algorithms {
        for &v in &plan.values {
            let cell_rows: Vec<&PlanRow> = rows
                .iter()
                .filter(|r| r.algorithm == a && r.sweep_value == v)
                .collect();
            let ok: Vec<&&PlanRow> = cell_rows.iter().filter(|r| r.status == "ok").collect();
            let losses: Vec<f64> = ok.iter().filter_map(|r| r.final_loss).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|r| r.final_accuracy).collect();
            let iters: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.iterations_to_converge.map(|t| t as f64))
                .collect();
            cells.push(PlanCell {
                algorithm: a,
                sweep_value: v,
                rows_ok: ok.len(),
                rows_failed: cell_rows.len() - ok.len(),
                median_loss: median(&losses),
                median_accuracy: median(&accs),
                median_iterations_to_converge: median(&iters).map(|m| m.round() as u64),
            });
        }
    }

    Ok(PlanResults {
        plan: plan.clone(),
        sweep_variable: plan.sweep,
        threshold_used: threshold,
        rows,
        cells,
    })
}

/// Row-level CSV with a fixed header; cells go to a second section prefixed
/// with `#` JSON, keeping one file loadable by any CSV reader.
pub fn write_plan_csv<W: Write>(results: &PlanResults, mut w: W) -> Result<()> {
    writeln!(
        w,
        "# {}",
        serde_json::to_string(&serde_json::json!({
            "sweep_variable": results.sweep_variable,
            "threshold_used": results.threshold_used,
            "cells": results.cells,
        }))?
    )?;
    writeln!(
        w,
        "algorithm,sweep_value,seed,status,final_loss,final_accuracy,iterations_to_converge,epsilon_spent,config_hash"
    )?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in &results.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            serde_json::to_value(r.algorithm)?.as_str().unwrap_or("?"),
            r.sweep_value,
            r.seed,
            r.status.replace(',', ";"),
            fmt(r.final_loss),
            fmt(r.final_accuracy),
            r.iterations_to_converge.map(|t| t.to_string()).unwrap_or_default(),
            fmt(r.epsilon_spent),
            r.config_hash,
        )?;
    }
    Ok(())
}

/// Recover the direction of a single training example from a batch-size-1
/// logistic gradient: the gradient is `c * v + lambda * w` for a scalar `c`,
/// so `g - lambda * w` is parallel to the example `v`. The sign of `c` is
/// unobservable, so the result is normalized with a nonnegative component
/// sum (the natural orientation for nonnegative feature vectors like
/// pixels).
pub fn invert_gradient(w: &[f64], g: &[f64], reg_lambda: f64) -> Result<Vec<f64>> {
    if w.len() != g.len() {
        return Err(AfdpError::DimensionMismatch { expected: w.len(), got: g.len() });
    }
    let mut v: Vec<f64> = g.iter().zip(w).map(|(&gi, &wi)| gi - reg_lambda * wi).collect();
    let n = vecmath::norm(&v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(AfdpError::InvalidParameter(
            "residual gradient is zero or non-finite; nothing to invert".into(),
        ));
    }
    let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    for x in v.iter_mut() {
        *x *= sign / n;
    }
    Ok(v)
}

/// Cosine similarity, the recovery metric for the inversion probe.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (vecmath::norm(a), vecmath::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(AfdpError::InvalidParameter("cosine of a zero vector".into()));
    }
    if a.len() != b.len() {
        return Err(AfdpError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(vecmath::dot(a, b) / (na * nb))
}

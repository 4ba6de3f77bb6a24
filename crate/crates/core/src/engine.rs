//! Asynchronous edge-cloud training engine: cloud update loop, per-edge
//! compute-clip-noise step, pluggable delay models, and full orchestration
//! of the four algorithms with deterministic replay.
//!
//! The simulation clock is logical: one tick per applied gradient. Staleness
//! is realized by letting the delay model pick, for every update `t`, which
//! edge's gradient is applied and which past model it was computed against.
//! A short ring of model snapshots (depth `tau_max + 1`) stands in for the
//! models still held by edges.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{self, BudgetLedger, PrivacySpec};
use crate::error::{AfdpError, Result};
use crate::models::{self, Dataset, ModelKind, ModelSpec, Sample};
use crate::schedules::{self, RatePolicy, StageConfig, StageState};
use crate::vecmath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Csgd,
    Asgd,
    Audp,
    Mapa,
}

impl Algorithm {
    pub fn is_private(self) -> bool {
        matches!(self, Algorithm::Audp | Algorithm::Mapa)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = AfdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csgd" => Ok(Algorithm::Csgd),
            "asgd" => Ok(Algorithm::Asgd),
            "audp" => Ok(Algorithm::Audp),
            "mapa" => Ok(Algorithm::Mapa),
            other => Err(AfdpError::InvalidConfig(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// One applied-gradient assignment: which edge, and which model iteration
/// the gradient was computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub edge_id: usize,
    pub origin: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "entries", rename_all = "snake_case")]
pub enum DelayModel {
    /// Length-K pipeline: the gradient applied at update `t` was computed
    /// against the model of iteration `t - K` (staleness exactly K once the
    /// pipeline fills), edges served round-robin.
    Cyclic,
    /// Staleness uniform on `{0..tau_max}`, random edge, per-edge FIFO.
    UniformRandom,
    /// Replay of a recorded arrival order.
    Trace(Vec<TraceEntry>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySchedule {
    pub model: DelayModel,
    pub edges: usize,
    pub tau_max: u64,
}

impl DelaySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.edges == 0 {
            return Err(AfdpError::InvalidConfig("edge count must be >= 1".into()));
        }
        if matches!(self.model, DelayModel::Cyclic) && self.tau_max < self.edges as u64 {
            return Err(AfdpError::InvalidConfig(
                "cyclic delay needs tau_max >= number of edges".into(),
            ));
        }
        Ok(())
    }
}

/// Stateful assignment source over a delay schedule. Deterministic given the
/// seed; enforces the staleness bound and per-edge FIFO ordering.
pub struct DelaySampler {
    schedule: DelaySchedule,
    rng: ChaCha12Rng,
    /// Last origin handed to each edge, for per-edge FIFO.
    last_origin: Vec<u64>,
    pos: usize,
}

impl DelaySampler {
    pub fn new(schedule: DelaySchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let edges = schedule.edges;
        Ok(Self { schedule, rng, last_origin: vec![0; edges], pos: 0 })
    }

    /// Assignment for update `t` (1-based).
    pub fn next(&mut self, t: u64) -> Result<TraceEntry> {
        let k = self.schedule.edges as u64;
        let entry = match &self.schedule.model {
            DelayModel::Cyclic => TraceEntry {
                edge_id: ((t - 1) % k) as usize,
                origin: t.saturating_sub(k).max(1),
            },
            DelayModel::UniformRandom => {
                let edge_id = self.rng.random_range(0..self.schedule.edges);
                let tau = self.rng.random_range(0..=self.schedule.tau_max);
                let origin = t.saturating_sub(tau).max(1).max(self.last_origin[edge_id]);
                TraceEntry { edge_id, origin }
            }
            DelayModel::Trace(entries) => {
                let e = *entries.get(self.pos).ok_or(AfdpError::TraceExhausted(t))?;
                self.pos += 1;
                e
            }
        };
        if entry.edge_id >= self.schedule.edges {
            return Err(AfdpError::InvalidConfig(format!(
                "trace names edge {} but only {} exist",
                entry.edge_id, self.schedule.edges
            )));
        }
        if entry.origin < self.last_origin[entry.edge_id] {
            return Err(AfdpError::InvalidConfig(format!(
                "per-edge FIFO violated for edge {} at update {t}",
                entry.edge_id
            )));
        }
        self.last_origin[entry.edge_id] = entry.origin;
        Ok(entry)
    }

    /// Staleness the assignment for update `t` will carry.
    pub fn staleness_of(entry: &TraceEntry, t: u64) -> u64 {
        t - entry.origin
    }
}

/// A (possibly noisy, possibly stale) gradient in flight to the cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMessage {
    pub origin_iteration: u64,
    pub edge_id: usize,
    pub payload: Vec<f64>,
    /// Clip bound in force when the gradient was produced; infinite for the
    /// non-private algorithms.
    pub clip_bound_used: f64,
}

/// Per-edge state: identity, budget, and a private random stream.
pub struct EdgeState {
    pub edge_id: usize,
    pub epsilon: f64,
    pub rng: ChaCha12Rng,
}

impl EdgeState {
    /// The edge stream is derived from the run seed and the edge id, so the
    /// simulator and a networked edge process draw identical randomness.
    pub fn new(seed: u64, edge_id: usize, epsilon: f64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(edge_id as u64 + 1);
        Self { edge_id, epsilon, rng }
    }
}

/// One edge iteration: sample a batch, compute the mini-batch gradient
/// against `model`, clip to `b * sensitivity / 2`, add noise, and wrap the
/// result with its provenance. Non-private algorithms skip clip and noise.
#[allow(clippy::too_many_arguments)]
pub fn edge_step(
    edge: &mut EdgeState,
    model: &[f64],
    origin_iteration: u64,
    sensitivity: f64,
    spec: &ModelSpec,
    dataset: &Dataset,
    batch_size: usize,
    private: bool,
) -> Result<GradientMessage> {
    if private && !(sensitivity > 0.0) {
        return Err(AfdpError::InvalidParameter(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    let batch = models::sample_batch(dataset, batch_size, &mut edge.rng)?;
    let g = models::gradient(spec, model, &batch)?;
    if !private {
        return Ok(GradientMessage {
            origin_iteration,
            edge_id: edge.edge_id,
            payload: g,
            clip_bound_used: f64::INFINITY,
        });
    }
    let clip_bound = batch_size as f64 * sensitivity / 2.0;
    let mut payload = dp::clip_gradient(&g, clip_bound)?;
    let noise_spec = PrivacySpec::new(edge.epsilon, 0.5, sensitivity)?;
    let eta = dp::sample_noise(&noise_spec, payload.len(), &mut edge.rng)?;
    vecmath::axpy(1.0, &eta.vector, &mut payload);
    Ok(GradientMessage { origin_iteration, edge_id: edge.edge_id, payload, clip_bound_used: clip_bound })
}

/// Cloud-side model and accounting state, shared by the simulator and the
/// networked server (one writer, many gradient producers).
pub struct CloudCore {
    pub model: Vec<f64>,
    /// Updates applied so far; the held model is `x_{t+1}` after `t` applies.
    pub applied: u64,
    pub ledger: BudgetLedger,
    pub stage: Option<StageState>,
    pub stage_cfg: Option<StageConfig>,
    pub policy: Option<RatePolicy>,
    /// Current global sensitivity (fixed for AUDP, staged for MAPA, unused
    /// for the non-private algorithms).
    pub sensitivity: f64,
    pub epsilons: Vec<f64>,
    pub private: bool,
    last_origin_applied: u64,
}

impl CloudCore {
    /// Cloud state with a fixed rate policy (no stage controller), for
    /// callers assembling custom loops out of the engine's pieces.
    pub fn new(
        model: Vec<f64>,
        policy: RatePolicy,
        sensitivity: f64,
        epsilons: Vec<f64>,
        private: bool,
    ) -> Self {
        CloudCore {
            model,
            applied: 0,
            ledger: BudgetLedger::new(),
            stage: None,
            stage_cfg: None,
            policy: Some(policy),
            sensitivity,
            epsilons,
            private,
            last_origin_applied: 0,
        }
    }

    /// Learning rate for the next update.
    pub fn gamma(&self) -> Result<f64> {
        match (&self.stage, &self.policy) {
            (Some(stage), _) => Ok(stage.gamma),
            (None, Some(policy)) => schedules::rate_at(policy, self.applied + 1),
            _ => Err(AfdpError::InvalidConfig("no rate policy configured".into())),
        }
    }

    /// Apply one gradient message: `x <- x - gamma * payload`, advance the
    /// iteration counter, compose the budget, and roll the stage if this
    /// update completed it.
    pub fn apply(&mut self, msg: &GradientMessage, gamma: f64) -> Result<()> {
        let t = self.applied + 1;
        if !vecmath::all_finite(&msg.payload) {
            return Err(AfdpError::NonFinitePayload(t));
        }
        if msg.payload.len() != self.model.len() {
            return Err(AfdpError::DimensionMismatch {
                expected: self.model.len(),
                got: msg.payload.len(),
            });
        }
        if msg.origin_iteration > t {
            return Err(AfdpError::InvalidConfig(format!(
                "gradient from the future: origin {} at update {t}",
                msg.origin_iteration
            )));
        }
        vecmath::axpy(-gamma, &msg.payload, &mut self.model);
        self.applied = t;
        self.last_origin_applied = self.last_origin_applied.max(msg.origin_iteration);
        if self.private {
            self.ledger.compose(self.epsilons[msg.edge_id], t)?;
        }
        if let (Some(stage), Some(cfg)) = (self.stage.as_mut(), self.stage_cfg.as_ref()) {
            stage.record_update();
            if stage.is_complete() {
                let next = schedules::advance_stage(stage, cfg)?;
                self.sensitivity = next.sensitivity;
                self.stage = Some(next);
            }
        }
        Ok(())
    }
}

/// Full configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub edges: usize,
    pub tau_max: u64,
    pub delay: DelayModel,
    pub batch: usize,
    /// Per-edge budgets; a single value is replicated across edges.
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub theta: f64,
    pub iters: u64,
    pub seed: u64,
    /// Evaluate loss/gradient/accuracy every this many iterations (0: only
    /// at the first and last iteration).
    pub eval_stride: u64,
    /// Estimate of `f(x_1) - f(x*)`; defaults to the initial training loss.
    pub f_gap: Option<f64>,
    /// Override of the starting sensitivity (AUDP default: `2G/b`; MAPA
    /// default: the variance-based initial estimate).
    pub sensitivity: Option<f64>,
    pub initial_model: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn epsilon_vec(&self) -> Result<Vec<f64>> {
        if self.epsilons.is_empty() {
            return Err(AfdpError::InvalidConfig("at least one epsilon required".into()));
        }
        if self.epsilons.len() == 1 {
            Ok(vec![self.epsilons[0]; self.edges])
        } else if self.epsilons.len() == self.edges {
            Ok(self.epsilons.clone())
        } else {
            Err(AfdpError::InvalidConfig(format!(
                "{} epsilons for {} edges",
                self.epsilons.len(),
                self.edges
            )))
        }
    }

    pub fn epsilon0(&self) -> Result<f64> {
        Ok(self.epsilon_vec()?.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        if self.iters == 0 {
            return Err(AfdpError::InvalidConfig("iteration count must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(AfdpError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.edges == 0 {
            return Err(AfdpError::InvalidConfig("edge count must be >= 1".into()));
        }
        if self.algorithm == Algorithm::Csgd && (self.edges != 1 || self.tau_max != 0) {
            return Err(AfdpError::InvalidConfig(
                "csgd is centralized: requires edges=1 and tau_max=0".into(),
            ));
        }
        if self.algorithm == Algorithm::Mapa && !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(AfdpError::InvalidConfig("mapa requires theta in (0,1)".into()));
        }
        if self.algorithm.is_private() {
            for &e in &self.epsilons {
                if !(e > 0.0) || !e.is_finite() {
                    return Err(AfdpError::InvalidConfig(format!("bad epsilon {e}")));
                }
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(AfdpError::InvalidConfig("delta must lie in (0,1)".into()));
            }
        }
        if let Some(x) = &self.initial_model {
            if x.len() != spec.weight_dim() {
                return Err(AfdpError::DimensionMismatch {
                    expected: spec.weight_dim(),
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    fn default_initial_model(&self, spec: &ModelSpec) -> Vec<f64> {
        match spec.kind {
            // The quadratic's minimum sits at the origin; start away from it.
            ModelKind::Quadratic => {
                vec![1.0 / (spec.dim as f64).sqrt(); spec.weight_dim()]
            }
            _ => vec![0.0; spec.weight_dim()],
        }
    }
}

/// One recorded iteration. Metrics are evaluated on the pre-update model
/// `x_t`, so rows `1..=T` cover exactly the iterate sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub t: u64,
    pub stage: Option<u64>,
    pub gamma: f64,
    pub sensitivity: Option<f64>,
    pub grad_norm: Option<f64>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: RunConfig,
    pub model_spec: ModelSpec,
    pub epsilon0: Option<f64>,
    pub initial_sensitivity: Option<f64>,
    pub f_gap_used: Option<f64>,
    pub tau_max_observed: u64,
    /// Set when observed staleness exceeded the configured bound (networked
    /// runs record, rather than cap, their staleness).
    pub assumption_violated: bool,
    pub config_hash: String,
    pub mode: String,
}

/// Everything a run produces: metadata, the per-iteration trajectory, the
/// applied-gradient trace (for replay), and the final/averaged models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub rows: Vec<IterRow>,
    pub trace: Vec<TraceEntry>,
    pub final_model: Vec<f64>,
    /// Running average `(1/T) sum x_t`.
    pub model_average: Vec<f64>,
    pub ledger_total: f64,
}

/// SHA-256 of the canonical JSON config, for replayable result rows.
pub fn config_hash(config: &RunConfig, spec: &ModelSpec) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

struct Snapshot {
    iteration: u64,
    model: Vec<f64>,
    sensitivity: f64,
}

fn should_eval(t: u64, iters: u64, stride: u64) -> bool {
    t == 1 || t == iters || (stride > 0 && t % stride == 0)
}

/// Evaluate (gradient norm, loss, accuracy) of a model, using closed forms
/// for the synthetic quadratic and full-dataset passes otherwise.
pub fn eval_metrics(
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
    x: &[f64],
) -> (Option<f64>, Option<f64>, Option<f64>) {
    match spec.kind {
        ModelKind::Quadratic => {
            let g = models::quadratic_expected_gradient(spec, x).ok();
            let loss = models::quadratic_expected_loss(spec, x).ok();
            (g.map(|g| vecmath::norm(&g)), loss, None)
        }
        _ => {
            let samples = dataset.samples().unwrap_or(&[]);
            let loss = models::loss(spec, x, samples).ok();
            let grad = models::gradient(spec, x, samples).ok().map(|g| vecmath::norm(&g));
            let acc = test.and_then(|t| models::predict_accuracy(spec, x, t).ok());
            (grad, loss, acc)
        }
    }
}

/// Build the starting cloud state for a run: initial model, sensitivity,
/// rate policy or stage controller, and an empty budget ledger. Shared by
/// the simulator and the networked server so both start identically.
/// Returns the cloud and the `f_gap` actually used (multi-stage runs only).
pub fn init_cloud(
    config: &RunConfig,
    spec: &ModelSpec,
    dataset: &Dataset,
) -> Result<(CloudCore, Option<f64>)> {
    config.validate(spec)?;
    let epsilons = config.epsilon_vec()?;
    let epsilon0 = config.epsilon0()?;
    let x1 = config
        .initial_model
        .clone()
        .unwrap_or_else(|| config.default_initial_model(spec));

    // Starting sensitivity and rate policy per algorithm.
    let sigma = spec.sample_variance_sigma2.sqrt();
    let (sensitivity, stage, stage_cfg, policy, f_gap_used) = match config.algorithm {
        Algorithm::Csgd => (
            0.0,
            None,
            None,
            Some(RatePolicy::Csgd {
                l: spec.smoothness_l,
                sigma,
                radius: spec.radius_r,
                batch: config.batch,
            }),
            None,
        ),
        Algorithm::Asgd => (
            0.0,
            None,
            None,
            Some(RatePolicy::Asgd {
                l: spec.smoothness_l,
                tau_max: config.tau_max,
                sigma,
                radius: spec.radius_r,
                batch: config.batch,
            }),
            None,
        ),
        Algorithm::Audp => {
            let sens = match config.sensitivity {
                Some(s) => s,
                None => dp::sensitivity_from_bound(spec.grad_bound_g, config.batch)?,
            };
            let delta_b = schedules::update_delta_b(sigma, config.batch, sens, epsilon0)?;
            (
                sens,
                None,
                None,
                Some(RatePolicy::Audp {
                    l: spec.smoothness_l,
                    tau_max: config.tau_max,
                    delta_b,
                }),
                None,
            )
        }
        Algorithm::Mapa => {
            let sens = match config.sensitivity {
                Some(s) => s,
                None => dp::initial_sensitivity(sigma, config.batch, config.delta)?,
            };
            let f_gap = match config.f_gap {
                Some(f) => f,
                None => match spec.kind {
                    ModelKind::Quadratic => models::quadratic_expected_loss(spec, &x1)?,
                    _ => models::loss(spec, &x1, dataset.samples().unwrap_or(&[]))?,
                },
            };
            if !(f_gap > 0.0) {
                return Err(AfdpError::InvalidConfig(format!(
                    "f_gap must be positive, got {f_gap}"
                )));
            }
            let cfg = StageConfig {
                sigma,
                batch: config.batch,
                epsilon0,
                theta: config.theta,
                l: spec.smoothness_l,
                tau_max: config.tau_max,
                f_gap,
            };
            let stage = StageState::initial(&cfg, sens)?;
            (sens, Some(stage), Some(cfg), None, Some(f_gap))
        }
    };

    let cloud = CloudCore {
        model: x1,
        applied: 0,
        ledger: BudgetLedger::new(),
        stage,
        stage_cfg,
        policy,
        sensitivity,
        epsilons,
        private: config.algorithm.is_private(),
        last_origin_applied: 0,
    };
    Ok((cloud, f_gap_used))
}

/// Run one complete training simulation. Deterministic given the config.
pub fn run(
    config: &RunConfig,
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
) -> Result<RunRecord> {
    let (mut cloud, f_gap_used) = init_cloud(config, spec, dataset)?;
    let epsilons = cloud.epsilons.clone();
    let epsilon0 = config.epsilon0()?;
    let initial_sensitivity = cloud.sensitivity;

    let schedule = DelaySchedule {
        model: config.delay.clone(),
        edges: config.edges,
        tau_max: match config.delay {
            DelayModel::Cyclic => config.tau_max.max(config.edges as u64),
            _ => config.tau_max,
        },
    };
    // A trace is a record of arrivals that already happened (possibly on a
    // real network, where the bound is observed rather than enforced), so
    // replay accommodates its actual staleness instead of rejecting it. The
    // rate schedules still use the configured bound.
    let trace_bound = match &config.delay {
        DelayModel::Trace(entries) => entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i as u64 + 1).saturating_sub(e.origin))
            .max()
            .unwrap_or(0),
        _ => 0,
    };
    let configured_bound = schedule.tau_max;
    let tau_bound = configured_bound.max(trace_bound);
    let mut sampler = DelaySampler::new(schedule, config.seed)?;
    let mut edges: Vec<EdgeState> = (0..config.edges)
        .map(|k| EdgeState::new(config.seed, k, epsilons[k]))
        .collect();

    let mut snapshots: VecDeque<Snapshot> = VecDeque::new();
    snapshots.push_back(Snapshot {
        iteration: 1,
        model: cloud.model.clone(),
        sensitivity: cloud.sensitivity,
    });

    let dim = cloud.model.len();
    let mut model_sum = vec![0.0; dim];
    let mut rows = Vec::with_capacity(config.iters as usize);
    let mut trace = Vec::with_capacity(config.iters as usize);
    let mut tau_max_observed = 0u64;

    for t in 1..=config.iters {
        // Metrics of the pre-update iterate x_t.
        let (grad_norm, loss, accuracy) = if should_eval(t, config.iters, config.eval_stride) {
            eval_metrics(spec, dataset, test, &cloud.model)
        } else {
            (None, None, None)
        };
        vecmath::axpy(1.0, &cloud.model, &mut model_sum);

        let entry = sampler.next(t)?;
        let tau = DelaySampler::staleness_of(&entry, t);
        tau_max_observed = tau_max_observed.max(tau);
        // Bounded delay is a hard invariant in simulation mode.
        if tau > tau_bound {
            return Err(AfdpError::InvalidConfig(format!(
                "staleness {tau} exceeds bound {tau_bound} at update {t}"
            )));
        }
        let snap = snapshots
            .iter()
            .find(|s| s.iteration == entry.origin)
            .ok_or_else(|| {
                AfdpError::InvalidConfig(format!(
                    "no snapshot for origin {} at update {t}",
                    entry.origin
                ))
            })?;

        let msg = edge_step(
            &mut edges[entry.edge_id],
            &snap.model,
            entry.origin,
            snap.sensitivity,
            spec,
            dataset,
            config.batch,
            config.algorithm.is_private(),
        )?;

        let gamma = cloud.gamma()?;
        let stage_idx = cloud.stage.as_ref().map(|s| s.stage_index);
        let sens_now = if config.algorithm.is_private() { Some(cloud.sensitivity) } else { None };
        cloud.apply(&msg, gamma)?;
        trace.push(entry);
        rows.push(IterRow {
            t,
            stage: stage_idx,
            gamma,
            sensitivity: sens_now,
            grad_norm,
            loss,
            accuracy,
        });

        snapshots.push_back(Snapshot {
            iteration: t + 1,
            model: cloud.model.clone(),
            sensitivity: cloud.sensitivity,
        });
        while snapshots.len() as u64 > tau_bound + 2 {
            snapshots.pop_front();
        }
    }

    let t_f = config.iters as f64;
    let model_average = model_sum.iter().map(|s| s / t_f).collect();
    let meta = RunMeta {
        config: config.clone(),
        model_spec: spec.clone(),
        epsilon0: config.algorithm.is_private().then_some(epsilon0),
        initial_sensitivity: config.algorithm.is_private().then_some(initial_sensitivity),
        f_gap_used,
        tau_max_observed,
        assumption_violated: tau_max_observed > configured_bound,
        config_hash: config_hash(config, spec),
        mode: "simulation".into(),
    };
    Ok(RunRecord {
        meta,
        rows,
        trace,
        final_model: cloud.model,
        model_average,
        ledger_total: cloud.ledger.total(),
    })
}

/// CSV emission: a JSON metadata comment line, a fixed header, one row per
/// iteration. Unevaluated metrics are left empty.
pub fn write_csv<W: std::io::Write>(record: &RunRecord, mut w: W) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(&record.meta)?)?;
    writeln!(w, "t,stage,gamma,sensitivity,grad_norm,loss,accuracy")?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in &record.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.t,
            r.stage.map(|s| s.to_string()).unwrap_or_default(),
            r.gamma,
            fmt(r.sensitivity),
            fmt(r.grad_norm),
            fmt(r.loss),
            fmt(r.accuracy),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quad_config(algorithm: Algorithm, edges: usize, tau_max: u64, iters: u64) -> RunConfig {
        RunConfig {
            algorithm,
            edges,
            tau_max,
            delay: DelayModel::Cyclic,
            batch: 4,
            epsilons: vec![0.5],
            delta: 1e-3,
            theta: 0.5,
            iters,
            seed: 42,
            eval_stride: 1,
            f_gap: None,
            sensitivity: None,
            initial_model: None,
        }
    }

    #[test]
    fn cyclic_staleness_is_edge_count_after_warmup() {
        let sched = DelaySchedule { model: DelayModel::Cyclic, edges: 5, tau_max: 5 };
        let mut s = DelaySampler::new(sched, 1).unwrap();
        for t in 1..=100u64 {
            let e = s.next(t).unwrap();
            let tau = DelaySampler::staleness_of(&e, t);
            if t <= 5 {
                assert_eq!(tau, t - 1);
            } else {
                assert_eq!(tau, 5);
            }
            assert_eq!(e.edge_id, ((t - 1) % 5) as usize);
        }
    }

    #[test]
    fn degenerate_delay_models() {
        let mut s =
            DelaySampler::new(DelaySchedule { model: DelayModel::Cyclic, edges: 1, tau_max: 1 }, 1)
                .unwrap();
        for t in 1..=20u64 {
            let e = s.next(t).unwrap();
            assert!(DelaySampler::staleness_of(&e, t) <= 1);
        }
        let mut s = DelaySampler::new(
            DelaySchedule { model: DelayModel::UniformRandom, edges: 3, tau_max: 0 },
            1,
        )
        .unwrap();
        for t in 1..=50u64 {
            assert_eq!(DelaySampler::staleness_of(&s.next(t).unwrap(), t), 0);
        }
    }

    #[test]
    fn trace_replay_and_exhaustion() {
        let entries = vec![
            TraceEntry { edge_id: 0, origin: 1 },
            TraceEntry { edge_id: 0, origin: 2 },
        ];
        let mut s = DelaySampler::new(
            DelaySchedule { model: DelayModel::Trace(entries), edges: 1, tau_max: 4 },
            1,
        )
        .unwrap();
        assert_eq!(s.next(1).unwrap(), TraceEntry { edge_id: 0, origin: 1 });
        assert_eq!(s.next(2).unwrap(), TraceEntry { edge_id: 0, origin: 2 });
        assert!(matches!(s.next(3), Err(AfdpError::TraceExhausted(3))));
    }

    #[test]
    fn cloud_apply_zero_and_unit_payloads() {
        let mut cloud = CloudCore {
            model: vec![0.0, 0.0],
            applied: 0,
            ledger: BudgetLedger::new(),
            stage: None,
            stage_cfg: None,
            policy: Some(RatePolicy::Csgd { l: 1.0, sigma: 0.0, radius: 1.0, batch: 1 }),
            sensitivity: 1.0,
            epsilons: vec![0.01],
            private: true,
            last_origin_applied: 0,
        };
        let zero = GradientMessage {
            origin_iteration: 1,
            edge_id: 0,
            payload: vec![0.0, 0.0],
            clip_bound_used: 1.0,
        };
        cloud.apply(&zero, 1.0).unwrap();
        assert_eq!(cloud.model, vec![0.0, 0.0]);
        assert_eq!(cloud.applied, 1);

        let v = GradientMessage {
            origin_iteration: 2,
            edge_id: 0,
            payload: vec![1.0, -2.0],
            clip_bound_used: 10.0,
        };
        cloud.apply(&v, 1.0).unwrap();
        assert_eq!(cloud.model, vec![-1.0, 2.0]);
        assert_relative_eq!(cloud.ledger.total(), 0.02, max_relative = 1e-12);

        let bad = GradientMessage {
            origin_iteration: 3,
            edge_id: 0,
            payload: vec![f64::NAN, 0.0],
            clip_bound_used: 1.0,
        };
        assert!(matches!(cloud.apply(&bad, 1.0), Err(AfdpError::NonFinitePayload(3))));
    }

    #[test]
    fn edge_step_with_negligible_noise_equals_raw_gradient() {
        let (spec, ds) = models::make_quadratic(6, 2.0, 0.0).unwrap();
        let mut edge = EdgeState::new(7, 0, 1e12);
        let model = vec![0.2; 6];
        let msg = edge_step(&mut edge, &model, 1, 100.0, &spec, &ds, 4, true).unwrap();
        let raw = models::quadratic_expected_gradient(&spec, &model).unwrap();
        for (a, b) in msg.payload.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(msg.clip_bound_used, 4.0 * 100.0 / 2.0);
    }

    #[test]
    fn edge_step_payload_minus_noise_respects_clip_bound() {
        let (spec, ds) = models::make_quadratic(6, 2.0, 1.0).unwrap();
        // Recover the drawn noise by replaying the edge's rng.
        let mut edge = EdgeState::new(9, 0, 0.5);
        let sens = 0.1;
        let msg = edge_step(&mut edge, &vec![3.0; 6], 1, sens, &spec, &ds, 2, true).unwrap();

        let mut replay = EdgeState::new(9, 0, 0.5);
        let batch = models::sample_batch(&ds, 2, &mut replay.rng).unwrap();
        let g = models::gradient(&spec, &vec![3.0; 6], &batch).unwrap();
        let clipped = dp::clip_gradient(&g, msg.clip_bound_used).unwrap();
        let noise_spec = PrivacySpec::new(0.5, 0.5, sens).unwrap();
        let eta = dp::sample_noise(&noise_spec, 6, &mut replay.rng).unwrap();

        let diff = vecmath::sub(&msg.payload, &eta.vector);
        assert!(vecmath::norm(&diff) <= msg.clip_bound_used * (1.0 + 1e-12));
        for (a, b) in diff.iter().zip(&clipped) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_edges_produce_identical_messages() {
        let (spec, ds) = models::make_quadratic(4, 1.0, 1.0).unwrap();
        let mut a = EdgeState::new(11, 2, 0.5);
        let mut b = EdgeState::new(11, 2, 0.5);
        let m1 = edge_step(&mut a, &vec![1.0; 4], 3, 1.0, &spec, &ds, 3, true).unwrap();
        let m2 = edge_step(&mut b, &vec![1.0; 4], 3, 1.0, &spec, &ds, 3, true).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn mapa_noise_free_contracts_on_quadratic() {
        let (spec, ds) = models::make_quadratic(8, 2.0, 0.0).unwrap();
        let mut cfg = quad_config(Algorithm::Mapa, 1, 0, 60);
        cfg.epsilons = vec![1e12]; // noise scale ~1e-12: effectively exact
        cfg.sensitivity = Some(1.0);
        cfg.delay = DelayModel::UniformRandom; // tau_max 0: sequential
        let record = run(&cfg, &spec, &ds, None).unwrap();
        // Strictly decreasing loss trace under near-noise-free contraction.
        let losses: Vec<f64> = record.rows.iter().filter_map(|r| r.loss).collect();
        assert_eq!(losses.len(), 60);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{} -> {}", w[0], w[1]);
        }
        let final_norm = vecmath::norm(&record.final_model);
        assert!(final_norm < 1e-3, "no contraction: {final_norm}");
    }

    #[test]
    fn csgd_equals_degenerate_async_run() {
        let (spec, ds) = models::make_quadratic(5, 2.0, 1.0).unwrap();
        let mut a = quad_config(Algorithm::Csgd, 1, 0, 200);
        a.delay = DelayModel::UniformRandom; // tau_max 0: sequential
        let ra = run(&a, &spec, &ds, None).unwrap();

        // Same rate formula via asgd with tau_max = 0 collapses to csgd.
        let mut b = quad_config(Algorithm::Asgd, 1, 0, 200);
        b.delay = DelayModel::UniformRandom;
        let rb = run(&b, &spec, &ds, None).unwrap();
        assert_eq!(ra.final_model, rb.final_model);
        assert_eq!(ra.rows.len(), rb.rows.len());
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert_eq!(x.gamma, y.gamma);
        }
    }

    #[test]
    fn run_is_deterministic_and_accounts_budget() {
        let (spec, ds) = models::make_quadratic(4, 2.0, 1.0).unwrap();
        let mut cfg = quad_config(Algorithm::Audp, 3, 3, 150);
        cfg.epsilons = vec![0.01];
        cfg.sensitivity = Some(1.0);
        let r1 = run(&cfg, &spec, &ds, None).unwrap();
        let r2 = run(&cfg, &spec, &ds, None).unwrap();
        assert_eq!(r1, r2);
        assert_relative_eq!(r1.ledger_total, 1.5, max_relative = 1e-12);
        assert_eq!(r1.rows.len(), 150);
        assert_eq!(r1.trace.len(), 150);
    }

    #[test]
    fn mapa_stage_boundaries_land_on_cumulative_stage_lengths() {
        let (spec, ds) = models::make_quadratic(4, 2.0, 1.0).unwrap();
        let mut cfg = quad_config(Algorithm::Mapa, 2, 2, 500);
        cfg.epsilons = vec![0.5];
        cfg.sensitivity = Some(2.0);
        cfg.f_gap = Some(1.0);
        let record = run(&cfg, &spec, &ds, None).unwrap();
        // Stage index is non-decreasing and every stage block is contiguous.
        let mut prev = 0u64;
        for r in &record.rows {
            let s = r.stage.unwrap();
            assert!(s >= prev && s - prev <= 1, "stage jumped {prev} -> {s}");
            prev = s;
        }
        assert!(prev >= 1, "expected at least one stage transition");
        // Sensitivity shrinks by exactly theta at each stage boundary.
        for w in record.rows.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if b.stage.unwrap() == a.stage.unwrap() + 1 {
                assert_relative_eq!(
                    b.sensitivity.unwrap(),
                    cfg.theta * a.sensitivity.unwrap(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn csv_output_has_stable_schema() {
        let (spec, ds) = models::make_quadratic(3, 1.0, 0.0).unwrap();
        let cfg = quad_config(Algorithm::Csgd, 1, 0, 5);
        let record = run(&cfg, &spec, &ds, None).unwrap();
        let mut buf = Vec::new();
        write_csv(&record, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# {"));
        assert_eq!(lines.next().unwrap(), "t,stage,gamma,sensitivity,grad_norm,loss,accuracy");
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn invalid_configs_are_rejected_before_compute() {
        let (spec, ds) = models::make_quadratic(3, 1.0, 0.0).unwrap();
        let mut cfg = quad_config(Algorithm::Csgd, 2, 0, 5);
        assert!(run(&cfg, &spec, &ds, None).is_err()); // csgd with 2 edges
        cfg = quad_config(Algorithm::Mapa, 1, 1, 5);
        cfg.theta = 1.5;
        assert!(run(&cfg, &spec, &ds, None).is_err());
        cfg = quad_config(Algorithm::Audp, 1, 1, 5);
        cfg.epsilons = vec![-1.0];
        assert!(run(&cfg, &spec, &ds, None).is_err());
    }
}

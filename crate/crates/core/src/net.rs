//! TCP transport for real edge-cloud runs.
//!
//! Framing: a 4-byte little-endian length, a 1-byte message kind, then the
//! payload. The length counts the kind byte plus the payload, so the halt
//! frame is exactly the five bytes `01 00 00 00 04`. All integers and floats
//! inside payloads are little-endian.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::engine::{
    self, config_hash, CloudCore, EdgeState, GradientMessage, IterRow, RunConfig, RunMeta,
    RunRecord, TraceEntry,
};
use crate::error::{AfdpError, Result};
use crate::models::{Dataset, ModelSpec, Sample};
use crate::vecmath;

pub const KIND_REGISTER: u8 = 1;
pub const KIND_MODEL: u8 = 2;
pub const KIND_GRADIENT: u8 = 3;
pub const KIND_HALT: u8 = 4;

/// Largest accepted frame body; anything bigger is treated as a corrupt
/// length prefix rather than an allocation request.
const MAX_FRAME: u32 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Register { edge_id: u32 },
    Model { iteration: u64, sensitivity: f64, weights: Vec<f64> },
    Gradient { origin_iteration: u64, edge_id: u32, clip_bound: f64, payload: Vec<f64> },
    Halt,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Frame::Register { edge_id } => {
                body.push(KIND_REGISTER);
                body.write_u32::<LittleEndian>(*edge_id).unwrap();
            }
            Frame::Model { iteration, sensitivity, weights } => {
                body.push(KIND_MODEL);
                body.write_u64::<LittleEndian>(*iteration).unwrap();
                body.write_f64::<LittleEndian>(*sensitivity).unwrap();
                for &w in weights {
                    body.write_f64::<LittleEndian>(w).unwrap();
                }
            }
            Frame::Gradient { origin_iteration, edge_id, clip_bound, payload } => {
                body.push(KIND_GRADIENT);
                body.write_u64::<LittleEndian>(*origin_iteration).unwrap();
                body.write_u32::<LittleEndian>(*edge_id).unwrap();
                body.write_f64::<LittleEndian>(*clip_bound).unwrap();
                for &w in payload {
                    body.write_f64::<LittleEndian>(w).unwrap();
                }
            }
            Frame::Halt => body.push(KIND_HALT),
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.write_u32::<LittleEndian>(body.len() as u32).unwrap();
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut cur = bytes;
        let frame = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(AfdpError::Protocol(format!("{} trailing bytes", cur.len())));
        }
        Ok(frame)
    }

    /// Read one length-prefixed frame from a stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame> {
        let len = r.read_u32::<LittleEndian>()?;
        if len == 0 {
            return Err(AfdpError::Protocol("zero-length frame".into()));
        }
        if len > MAX_FRAME {
            return Err(AfdpError::Protocol(format!("frame length {len} exceeds limit")));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        let kind = body[0];
        let mut p = &body[1..];
        let f64s = |p: &mut &[u8]| -> Result<Vec<f64>> {
            if p.len() % 8 != 0 {
                return Err(AfdpError::Protocol(format!(
                    "vector body of {} bytes is not a multiple of 8",
                    p.len()
                )));
            }
            let mut v = Vec::with_capacity(p.len() / 8);
            while !p.is_empty() {
                v.push(p.read_f64::<LittleEndian>()?);
            }
            Ok(v)
        };
        match kind {
            KIND_REGISTER => {
                if p.len() != 4 {
                    return Err(AfdpError::Protocol(format!(
                        "register payload must be 4 bytes, got {}",
                        p.len()
                    )));
                }
                Ok(Frame::Register { edge_id: p.read_u32::<LittleEndian>()? })
            }
            KIND_MODEL => {
                if p.len() < 16 {
                    return Err(AfdpError::Protocol("truncated model frame".into()));
                }
                let iteration = p.read_u64::<LittleEndian>()?;
                let sensitivity = p.read_f64::<LittleEndian>()?;
                Ok(Frame::Model { iteration, sensitivity, weights: f64s(&mut p)? })
            }
            KIND_GRADIENT => {
                if p.len() < 20 {
                    return Err(AfdpError::Protocol("truncated gradient frame".into()));
                }
                let origin_iteration = p.read_u64::<LittleEndian>()?;
                let edge_id = p.read_u32::<LittleEndian>()?;
                let clip_bound = p.read_f64::<LittleEndian>()?;
                Ok(Frame::Gradient { origin_iteration, edge_id, clip_bound, payload: f64s(&mut p)? })
            }
            KIND_HALT => {
                if !p.is_empty() {
                    return Err(AfdpError::Protocol("halt frame carries a payload".into()));
                }
                Ok(Frame::Halt)
            }
            other => Err(AfdpError::Protocol(format!("unknown frame kind {other}"))),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }
}

/// Cloud-server side of a networked run. Accepts `config.edges`
/// registrations, then applies gradients strictly in arrival order until
/// `config.iters` updates have been taken, sending each producer the fresh
/// model after its gradient lands. Ends with a halt broadcast.
pub fn serve_cloud<A: ToSocketAddrs>(
    addr: A,
    config: &RunConfig,
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
) -> Result<RunRecord> {
    config.validate(spec)?;
    let listener = TcpListener::bind(addr)?;
    serve_cloud_on(listener, config, spec, dataset, test)
}

/// Like [`serve_cloud`] but on an already-bound listener, so callers can
/// learn the ephemeral port before edges connect.
pub fn serve_cloud_on(
    listener: TcpListener,
    config: &RunConfig,
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
) -> Result<RunRecord> {
    config.validate(spec)?;
    let epsilons = config.epsilon_vec()?;
    let sim_like = simulation_init(config, spec, dataset)?;
    let mut cloud = sim_like.cloud;

    // Registration phase: every edge introduces itself before training.
    let mut streams: Vec<Option<TcpStream>> = (0..config.edges).map(|_| None).collect();
    for _ in 0..config.edges {
        let (mut s, _) = listener.accept()?;
        s.set_nodelay(true).ok();
        match Frame::read_from(&mut s)? {
            Frame::Register { edge_id } => {
                let id = edge_id as usize;
                if id >= config.edges {
                    return Err(AfdpError::Protocol(format!(
                        "edge id {id} out of range (expected < {})",
                        config.edges
                    )));
                }
                if streams[id].is_some() {
                    return Err(AfdpError::Protocol(format!("duplicate registration for edge {id}")));
                }
                streams[id] = Some(s);
            }
            other => {
                return Err(AfdpError::Protocol(format!(
                    "expected register, got {:?}",
                    frame_kind_name(&other)
                )))
            }
        }
    }

    // Fan the initial model out, then spawn one reader per edge.
    for (id, slot) in streams.iter_mut().enumerate() {
        let s = slot.as_mut().expect("registered above");
        Frame::Model {
            iteration: 1,
            sensitivity: cloud.sensitivity,
            weights: cloud.model.clone(),
        }
        .write_to(s)
        .map_err(|e| AfdpError::Protocol(format!("initial model to edge {id}: {e}")))?;
    }

    let (tx, rx) = mpsc::channel::<(usize, Result<Frame>)>();
    let mut readers = Vec::new();
    for (id, slot) in streams.iter().enumerate() {
        let mut rs = slot.as_ref().unwrap().try_clone()?;
        let tx = tx.clone();
        readers.push(std::thread::spawn(move || loop {
            match Frame::read_from(&mut rs) {
                Ok(f) => {
                    if tx.send((id, Ok(f))).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = tx.send((id, Err(e)));
                    return;
                }
            }
        }));
    }
    drop(tx);

    let mut rows: Vec<IterRow> = Vec::with_capacity(config.iters as usize);
    let mut trace: Vec<TraceEntry> = Vec::with_capacity(config.iters as usize);
    let mut model_sum = vec![0.0; cloud.model.len()];
    let mut tau_max_observed = 0u64;
    let mut alive = config.edges;
    let mut t: u64 = 0;

    while t < config.iters {
        let (edge_id, frame) = match rx.recv_timeout(Duration::from_secs(120)) {
            Ok(x) => x,
            Err(_) => {
                return Err(AfdpError::Protocol(format!(
                    "no gradient arrived within 120s after {t} updates"
                )))
            }
        };
        let frame = match frame {
            Ok(f) => f,
            Err(_) => {
                // A disconnected edge stops contributing; the run continues
                // on the survivors.
                alive -= 1;
                if alive == 0 {
                    return Err(AfdpError::Protocol(format!(
                        "all edges disconnected after {t} updates"
                    )));
                }
                streams[edge_id] = None;
                continue;
            }
        };
        let (origin_iteration, edge_from_frame, clip_bound, payload) = match frame {
            Frame::Gradient { origin_iteration, edge_id, clip_bound, payload } => {
                (origin_iteration, edge_id as usize, clip_bound, payload)
            }
            other => {
                return Err(AfdpError::Protocol(format!(
                    "expected gradient, got {:?}",
                    frame_kind_name(&other)
                )))
            }
        };
        if edge_from_frame != edge_id {
            return Err(AfdpError::Protocol(format!(
                "edge {edge_id} sent a gradient claiming edge {edge_from_frame}"
            )));
        }

        t += 1;
        // Metrics of the pre-update iterate x_t, like the simulator.
        let (grad_norm, loss, accuracy) = if should_eval(t, config) {
            engine_eval(spec, dataset, test, &cloud.model)
        } else {
            (None, None, None)
        };
        vecmath::axpy(1.0, &cloud.model, &mut model_sum);

        let tau = t - origin_iteration.min(t);
        tau_max_observed = tau_max_observed.max(tau);
        let msg = GradientMessage {
            origin_iteration,
            edge_id,
            payload,
            clip_bound_used: clip_bound,
        };
        let gamma = cloud.gamma()?;
        let stage_idx = cloud.stage.as_ref().map(|s| s.stage_index);
        let sens_now = config.algorithm.is_private().then_some(cloud.sensitivity);
        cloud.apply(&msg, gamma)?;
        trace.push(TraceEntry { edge_id, origin: origin_iteration });
        rows.push(IterRow {
            t,
            stage: stage_idx,
            gamma,
            sensitivity: sens_now,
            grad_norm,
            loss,
            accuracy,
        });

        // Hand the producer the fresh model so it can keep iterating.
        if t < config.iters {
            if let Some(s) = streams[edge_id].as_mut() {
                let sent = Frame::Model {
                    iteration: t + 1,
                    sensitivity: cloud.sensitivity,
                    weights: cloud.model.clone(),
                }
                .write_to(s);
                if sent.is_err() {
                    streams[edge_id] = None;
                }
            }
        }
    }

    for s in streams.iter_mut().flatten() {
        let _ = Frame::Halt.write_to(s);
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    drop(rx);
    for r in readers {
        let _ = r.join();
    }

    let t_f = config.iters as f64;
    let assumption_violated = tau_max_observed > config.tau_max.max(config.edges as u64);
    let meta = RunMeta {
        config: config.clone(),
        model_spec: spec.clone(),
        epsilon0: config.algorithm.is_private().then(|| {
            epsilons.iter().cloned().fold(f64::INFINITY, f64::min)
        }),
        initial_sensitivity: config.algorithm.is_private().then_some(sim_like.initial_sensitivity),
        f_gap_used: sim_like.f_gap_used,
        tau_max_observed,
        assumption_violated,
        config_hash: config_hash(config, spec),
        mode: "network".into(),
    };
    Ok(RunRecord {
        meta,
        rows,
        trace,
        final_model: cloud.model,
        model_average: model_sum.iter().map(|s| s / t_f).collect(),
        ledger_total: cloud.ledger.total(),
    })
}

/// Edge-worker side: register, then answer every model frame with one
/// gradient until the halt arrives. `inject_delay` adds think time before
/// each reply, which in multi-edge runs manifests as staleness at the cloud.
pub fn run_edge<A: ToSocketAddrs + Clone>(
    addr: A,
    edge_id: usize,
    config: &RunConfig,
    spec: &ModelSpec,
    dataset: &Dataset,
    inject_delay: Option<Duration>,
) -> Result<u64> {
    let epsilons = config.epsilon_vec()?;
    if edge_id >= epsilons.len() {
        return Err(AfdpError::InvalidConfig(format!("edge id {edge_id} out of range")));
    }
    let mut stream = connect_with_retries(addr, 40, Duration::from_millis(250))?;
    stream.set_nodelay(true).ok();
    Frame::Register { edge_id: edge_id as u32 }.write_to(&mut stream)?;

    let mut edge = EdgeState::new(config.seed, edge_id, epsilons[edge_id]);
    let private = config.algorithm.is_private();
    let mut produced = 0u64;
    loop {
        match Frame::read_from(&mut stream) {
            Ok(Frame::Model { iteration, sensitivity, weights }) => {
                if let Some(d) = inject_delay {
                    std::thread::sleep(d);
                }
                let msg = engine::edge_step(
                    &mut edge,
                    &weights,
                    iteration,
                    sensitivity,
                    spec,
                    dataset,
                    config.batch,
                    private,
                )?;
                Frame::Gradient {
                    origin_iteration: msg.origin_iteration,
                    edge_id: edge_id as u32,
                    clip_bound: msg.clip_bound_used,
                    payload: msg.payload,
                }
                .write_to(&mut stream)?;
                produced += 1;
            }
            Ok(Frame::Halt) => return Ok(produced),
            Ok(other) => {
                return Err(AfdpError::Protocol(format!(
                    "edge expected model or halt, got {:?}",
                    frame_kind_name(&other)
                )))
            }
            // Server closing the socket after halt is also a clean end.
            Err(AfdpError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Ok(produced)
            }
            Err(e) => return Err(e),
        }
    }
}

fn connect_with_retries<A: ToSocketAddrs + Clone>(
    addr: A,
    attempts: u32,
    backoff: Duration,
) -> Result<TcpStream> {
    let mut last = None;
    for _ in 0..attempts {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => return Ok(s),
            Err(e) => {
                last = Some(e);
                std::thread::sleep(backoff);
            }
        }
    }
    Err(AfdpError::Io(last.expect("at least one attempt")))
}

fn frame_kind_name(f: &Frame) -> &'static str {
    match f {
        Frame::Register { .. } => "register",
        Frame::Model { .. } => "model",
        Frame::Gradient { .. } => "gradient",
        Frame::Halt => "halt",
    }
}

fn should_eval(t: u64, config: &RunConfig) -> bool {
    t == 1 || t == config.iters || (config.eval_stride > 0 && t % config.eval_stride == 0)
}

fn engine_eval(
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
    x: &[f64],
) -> (Option<f64>, Option<f64>, Option<f64>) {
    engine::eval_metrics(spec, dataset, test, x)
}

struct SimInit {
    cloud: CloudCore,
    initial_sensitivity: f64,
    f_gap_used: Option<f64>,
}

/// Reuse the simulator's algorithm setup (sensitivity, rate policy, stage
/// state, initial model) so a networked run starts from the identical state.
fn simulation_init(config: &RunConfig, spec: &ModelSpec, dataset: &Dataset) -> Result<SimInit> {
    let (cloud, f_gap_used) = engine::init_cloud(config, spec, dataset)?;
    let initial_sensitivity = cloud.sensitivity;
    Ok(SimInit { cloud, initial_sensitivity, f_gap_used })
}

/// Replay a networked run inside the simulator: same config, same seed, the
/// recorded applied-gradient trace as the delay model. Bit-identical edge
/// randomness makes the reconstruction exact.
pub fn replay_as_simulation(
    record: &RunRecord,
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&[Sample]>,
) -> Result<RunRecord> {
    let mut config = record.meta.config.clone();
    // Keep tau_max as configured: the rate schedules must match the
    // original run, and trace replay tolerates the recorded staleness.
    config.delay = crate::engine::DelayModel::Trace(record.trace.clone());
    engine::run(&config, spec, dataset, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn halt_frame_is_exactly_five_bytes() {
        assert_eq!(Frame::Halt.encode(), vec![0x01, 0x00, 0x00, 0x00, 0x04]);
    }

    #[test]
    fn model_frame_layout_is_fixed() {
        let f = Frame::Model { iteration: 3, sensitivity: 1.5, weights: vec![1.0, -2.0] };
        let bytes = f.encode();
        assert_eq!(bytes.len(), 37);
        assert_eq!(&bytes[0..4], &[33, 0, 0, 0]);
        assert_eq!(bytes[4], KIND_MODEL);
        assert_eq!(&bytes[5..13], &3u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[29..37], &(-2.0f64).to_le_bytes());
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn register_and_gradient_round_trip() {
        let r = Frame::Register { edge_id: 7 };
        assert_eq!(Frame::decode(&r.encode()).unwrap(), r);
        let g = Frame::Gradient {
            origin_iteration: 42,
            edge_id: 3,
            clip_bound: f64::INFINITY,
            payload: vec![0.0, f64::MIN_POSITIVE, -1e300],
        };
        assert_eq!(Frame::decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn malformed_frames_are_rejected_with_context() {
        // Unknown kind.
        assert!(matches!(
            Frame::decode(&[1, 0, 0, 0, 9]),
            Err(AfdpError::Protocol(_))
        ));
        // Zero length.
        assert!(Frame::decode(&[0, 0, 0, 0]).is_err());
        // Truncated model body.
        assert!(Frame::decode(&[5, 0, 0, 0, KIND_MODEL, 1, 2, 3, 4]).is_err());
        // Halt with payload.
        assert!(Frame::decode(&[2, 0, 0, 0, KIND_HALT, 0]).is_err());
        // Gradient with a non-multiple-of-8 vector body.
        let mut g = Frame::Gradient {
            origin_iteration: 1,
            edge_id: 0,
            clip_bound: 1.0,
            payload: vec![1.0],
        }
        .encode();
        g.truncate(g.len() - 1);
        let n = (g.len() - 4) as u32;
        g[0..4].copy_from_slice(&n.to_le_bytes());
        assert!(Frame::decode(&g).is_err());
        // Absurd length prefix is refused before allocation.
        let huge = [0xff, 0xff, 0xff, 0x7f, KIND_HALT];
        assert!(matches!(
            Frame::read_from(&mut &huge[..]),
            Err(AfdpError::Protocol(_))
        ));
    }

    #[test]
    fn streamed_frames_decode_in_sequence() {
        let frames = vec![
            Frame::Register { edge_id: 0 },
            Frame::Model { iteration: 1, sensitivity: 2.0, weights: vec![0.5; 4] },
            Frame::Gradient { origin_iteration: 1, edge_id: 0, clip_bound: 4.0, payload: vec![1.0; 4] },
            Frame::Halt,
        ];
        let mut buf = Vec::new();
        for f in &frames {
            buf.extend_from_slice(&f.encode());
        }
        let mut cur = &buf[..];
        for f in &frames {
            assert_eq!(&Frame::read_from(&mut cur).unwrap(), f);
        }
        assert!(cur.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn frame_round_trip_is_identity(
            kind in 0u8..4,
            a in any::<u64>(),
            b in any::<u32>(),
            c in any::<f64>().prop_filter("NaN breaks PartialEq", |x| !x.is_nan()),
            v in proptest::collection::vec(
                any::<f64>().prop_filter("NaN breaks PartialEq", |x| !x.is_nan()),
                0..16,
            ),
        ) {
            let frame = match kind {
                0 => Frame::Register { edge_id: b },
                1 => Frame::Model { iteration: a, sensitivity: c, weights: v },
                2 => Frame::Gradient { origin_iteration: a, edge_id: b, clip_bound: c, payload: v },
                _ => Frame::Halt,
            };
            prop_assert_eq!(Frame::decode(&frame.encode()).unwrap(), frame);
        }
    }
}

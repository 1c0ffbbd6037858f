//! Message flow of a session: framing, transports, and the provider and
//! collector drivers.

mod frame;
mod transport;

use std::collections::BTreeMap;
use std::thread;
use std::time::{Duration, Instant};

use rand::{CryptoRng, RngCore};

pub use frame::{EdgeBytes, Frame, FrameRecord, MsgType, TrafficMeter, FRAME_HEADER_LEN, MAX_BODY_LEN};
pub use transport::{channel_network, ChannelTransport, TcpPlan, TcpTransport, Transport};

use crate::error::{Error, Result};
use crate::okvs::OkvsTable;
use crate::outputs::{collector_join, encrypt_payload, JoinedOutput, Mode, PayloadMessage, Record};
use crate::primitives::{os_seeded_rng, seeded_rng, SessionRng};
use crate::protocol::{
    provider_init, Absorb, BMessage, CollectorState, IntersectionResult, PartyId, ProviderOutput, SessionConfig,
};
use crate::shamir::ThresholdPolicy;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

/// Wall-clock time per named phase, in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timings(pub Vec<(&'static str, Duration)>);

impl Timings {
    fn time<T>(&mut self, phase: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((phase, start.elapsed()));
        out
    }

    pub fn get(&self, phase: &str) -> Option<Duration> {
        self.0.iter().find(|(p, _)| *p == phase).map(|(_, d)| *d)
    }
}

#[derive(Clone, Debug)]
pub struct ProviderJob<'a> {
    pub cfg: SessionConfig,
    pub me: PartyId,
    pub mode: Mode,
    pub records: &'a [Record],
    /// Reconstruction threshold, threshold mode only.
    pub threshold: Option<u32>,
    pub pad_bucket: usize,
    pub timeout: Duration,
}

#[derive(Clone, Debug)]
pub struct ProviderRun {
    pub output: ProviderOutput,
    pub timings: Timings,
}

#[derive(Clone, Debug)]
pub struct CollectorJob {
    pub cfg: SessionConfig,
    pub mode: Mode,
    pub timeout: Duration,
}

#[derive(Clone, Debug)]
pub struct CollectorRun {
    pub result: IntersectionResult,
    pub joined: Option<JoinedOutput>,
    pub timings: Timings,
}

struct Link<'a> {
    t: &'a dyn Transport,
    cfg: SessionConfig,
    deadline: Instant,
    timeout: Duration,
}

impl Link<'_> {
    fn send(&self, msg_type: MsgType, to: PartyId, body: Vec<u8>) -> Result<()> {
        self.t
            .send(Frame::new(msg_type, self.cfg.session_id, self.t.me(), to, body))
    }

    fn recv(&self) -> Result<Frame> {
        let left = self.deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(Error::SessionTimeout(self.timeout));
        }
        let frame = self.t.recv(left).map_err(|e| match e {
            Error::SessionTimeout(_) => Error::SessionTimeout(self.timeout),
            other => other,
        })?;
        if frame.msg_type == MsgType::Abort {
            return Err(Error::Aborted {
                from: frame.sender.raw(),
                reason: String::from_utf8_lossy(&frame.body).into_owned(),
            });
        }
        Ok(frame)
    }

    /// Tells every other party that the session is over, except the one
    /// that aborted first.
    fn broadcast_abort(&self, err: &Error) {
        let origin = match err {
            Error::Aborted { from, .. } => Some(PartyId::from_wire(*from)),
            _ => None,
        };
        let reason = match err {
            Error::Aborted { from, reason } => format!("{} (relayed from {})", reason, PartyId::from_wire(*from)),
            other => other.to_string(),
        };
        let me = self.t.me();
        for to in std::iter::once(PartyId::COLLECTOR).chain(self.cfg.providers()) {
            if to != me && Some(to) != origin {
                if let Err(e) = self.send(MsgType::Abort, to, reason.clone().into_bytes()) {
                    log::debug!("could not deliver abort to {to}: {e}");
                }
            }
        }
    }
}

fn unexpected(frame: &Frame) -> Error {
    Error::protocol(format!("unexpected {} frame from {}", frame.msg_type, frame.sender))
}

/// Runs one provider to completion. On failure every other party is sent
/// an ABORT before the error is returned.
pub fn run_provider<R: RngCore + CryptoRng>(
    t: &dyn Transport,
    job: &ProviderJob<'_>,
    rng: &mut R,
) -> Result<ProviderRun> {
    let link = Link {
        t,
        cfg: job.cfg,
        deadline: Instant::now() + job.timeout,
        timeout: job.timeout,
    };
    provider_flow(&link, job, rng).inspect_err(|e| {
        log::error!("{} failed: {e}", job.me);
        link.broadcast_abort(e);
    })
}

fn provider_flow<R: RngCore + CryptoRng>(link: &Link<'_>, job: &ProviderJob<'_>, rng: &mut R) -> Result<ProviderRun> {
    if link.t.me() != job.me {
        return Err(Error::usage("transport endpoint does not belong to this provider"));
    }
    let cfg = &job.cfg;
    let mut timings = Timings::default();

    let ids: Vec<&[u8]> = job.records.iter().map(|r| r.raw_id.as_slice()).collect();
    let mut state = timings.time("provider_init", || provider_init(&ids, cfg, job.me, rng))?;

    let tables = timings.time("okvs_encode", || state.build_all_okvs(rng))?;
    for (to, table) in tables {
        link.send(MsgType::Okvs, to, table.to_bytes())?;
    }

    let peers = cfg.n as usize - 1;
    let mut inbox: BTreeMap<PartyId, OkvsTable> = BTreeMap::new();
    while inbox.len() < peers {
        let frame = link.recv()?;
        match frame.msg_type {
            MsgType::Okvs if !frame.sender.is_collector() && frame.sender != job.me => {
                cfg.check_provider(frame.sender).map_err(|_| unexpected(&frame))?;
                if inbox.contains_key(&frame.sender) {
                    log::info!("ignoring repeated OKVS from {}", frame.sender);
                    continue;
                }
                let table = OkvsTable::from_bytes(&frame.body)
                    .map_err(|e| Error::protocol(format!("OKVS from {}: {e}", frame.sender)))?;
                inbox.insert(frame.sender, table);
            }
            _ => return Err(unexpected(&frame)),
        }
    }

    let (output, bmsg) = timings.time("decode_finalize", || state.finalize(&inbox, rng))?;
    link.send(MsgType::Bmsg, PartyId::COLLECTOR, bmsg.to_bytes())?;

    if let Some(mode) = job.mode.payload_mode() {
        let policy = match job.mode {
            Mode::ThresholdPayload => {
                let t = job
                    .threshold
                    .ok_or_else(|| Error::usage(format!("no threshold configured for {}", job.me)))?;
                Some(ThresholdPolicy::new(t, cfg.m as u32)?)
            }
            _ => None,
        };
        let msg = timings.time("payload_encrypt", || {
            encrypt_payload(&output, job.records, mode, policy, job.pad_bucket, rng)
        })?;
        link.send(MsgType::Payload, PartyId::COLLECTOR, msg.to_bytes())?;
    }

    loop {
        let frame = link.recv()?;
        match frame.msg_type {
            MsgType::Done if frame.sender.is_collector() => break,
            MsgType::Okvs if inbox.contains_key(&frame.sender) => {
                log::info!("ignoring repeated OKVS from {}", frame.sender);
            }
            _ => return Err(unexpected(&frame)),
        }
    }
    Ok(ProviderRun { output, timings })
}

/// Runs the collector to completion and releases the providers with DONE.
pub fn run_collector(t: &dyn Transport, job: &CollectorJob) -> Result<CollectorRun> {
    let link = Link {
        t,
        cfg: job.cfg,
        deadline: Instant::now() + job.timeout,
        timeout: job.timeout,
    };
    collector_flow(&link, job).inspect_err(|e| {
        log::error!("collector failed: {e}");
        link.broadcast_abort(e);
    })
}

fn collector_flow(link: &Link<'_>, job: &CollectorJob) -> Result<CollectorRun> {
    if !link.t.me().is_collector() {
        return Err(Error::usage("transport endpoint does not belong to the collector"));
    }
    let cfg = &job.cfg;
    let payload_mode = job.mode.payload_mode();
    let mut state = CollectorState::new(*cfg);
    let mut payloads: BTreeMap<PartyId, PayloadMessage> = BTreeMap::new();
    let need_payloads = if payload_mode.is_some() { cfg.n as usize } else { 0 };

    while !state.is_ready() || payloads.len() < need_payloads {
        let frame = link.recv()?;
        let from = frame.sender;
        if cfg.check_provider(from).is_err() {
            return Err(unexpected(&frame));
        }
        match frame.msg_type {
            MsgType::Bmsg => {
                let msg = BMessage::from_bytes(&frame.body)
                    .map_err(|e| Error::protocol(format!("blinded message from {from}: {e}")))?;
                if state.absorb(from, msg)? == Absorb::Duplicate {
                    log::info!("ignored repeated BMSG from {from}");
                }
            }
            MsgType::Payload if payload_mode.is_some() => {
                if payloads.contains_key(&from) {
                    log::info!("ignored repeated PAYLOAD from {from}");
                    continue;
                }
                let msg = PayloadMessage::from_bytes(&frame.body, cfg.kappa())?;
                if Some(msg.mode) != payload_mode {
                    return Err(Error::protocol(format!("{from} sent a payload for another mode")));
                }
                payloads.insert(from, msg);
            }
            _ => return Err(unexpected(&frame)),
        }
    }

    let mut timings = Timings::default();
    let nyms = timings.time("unblind", || state.unblind())?;
    let result = timings.time("intersect", || state.intersect(&nyms))?;
    let joined = match payload_mode {
        Some(_) => Some(timings.time("join", || collector_join(&result, &payloads))?),
        None => None,
    };

    for to in cfg.providers() {
        link.send(MsgType::Done, to, Vec::new())?;
    }
    Ok(CollectorRun {
        result,
        joined,
        timings,
    })
}

/// Inputs of a whole session run inside one process.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub cfg: SessionConfig,
    pub mode: Mode,
    /// One record list per provider, in index order.
    pub inputs: Vec<Vec<Record>>,
    /// Per provider, threshold mode only.
    pub thresholds: Vec<u32>,
    pub pad_bucket: usize,
    pub timeout: Duration,
    /// Makes the run reproducible.
    pub seed: Option<Vec<u8>>,
}

#[derive(Debug)]
pub struct SimulationRun {
    pub providers: Vec<ProviderRun>,
    pub collector: CollectorRun,
    pub meter: TrafficMeter,
}

impl std::fmt::Debug for TrafficMeter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.edges()).finish()
    }
}

pub fn party_rng(seed: Option<&[u8]>, party: PartyId) -> Result<SessionRng> {
    match seed {
        Some(seed) => Ok(seeded_rng(seed, &party.to_string())),
        None => os_seeded_rng(),
    }
}

/// Runs every role on its own thread over the in-process transport.
pub fn run_in_process(sim: &Simulation) -> Result<SimulationRun> {
    let n = sim.cfg.n as usize;
    if sim.inputs.len() != n {
        return Err(Error::usage(format!("{} inputs given for {n} providers", sim.inputs.len())));
    }
    if sim.mode == Mode::ThresholdPayload && sim.thresholds.len() != n {
        return Err(Error::usage("threshold mode needs one threshold per provider"));
    }
    let meter = TrafficMeter::new();
    let mut net = channel_network(sim.cfg.session_id, sim.cfg.n, &meter);
    let collector_t = net.remove(0);
    let mut rngs = (1..=sim.cfg.n)
        .map(|i| party_rng(sim.seed.as_deref(), PartyId::provider(i)?))
        .collect::<Result<Vec<_>>>()?;

    let (providers, collector) = thread::scope(|s| {
        let handles: Vec<_> = net
            .iter()
            .zip(rngs.iter_mut())
            .enumerate()
            .map(|(slot, (t, rng))| {
                let job = ProviderJob {
                    cfg: sim.cfg,
                    me: t.me(),
                    mode: sim.mode,
                    records: &sim.inputs[slot],
                    threshold: sim.thresholds.get(slot).copied(),
                    pad_bucket: sim.pad_bucket,
                    timeout: sim.timeout,
                };
                s.spawn(move || run_provider(t, &job, rng))
            })
            .collect();
        let collector = run_collector(
            &collector_t,
            &CollectorJob {
                cfg: sim.cfg,
                mode: sim.mode,
                timeout: sim.timeout,
            },
        );
        let providers: Vec<Result<ProviderRun>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::protocol("provider thread panicked"))))
            .collect();
        (providers, collector)
    });

    // Report the root cause rather than the aborts it triggered.
    let mut errors: Vec<Error> = providers.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    if let Err(e) = &collector {
        errors.push(e.clone());
    }
    if let Some(first) = errors
        .iter()
        .find(|e| !matches!(e, Error::Aborted { .. }))
        .or(errors.first())
    {
        return Err(first.clone());
    }
    Ok(SimulationRun {
        providers: providers.into_iter().map(|r| r.expect("checked")).collect(),
        collector: collector.expect("checked"),
        meter,
    })
}

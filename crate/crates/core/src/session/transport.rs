//! Transports: an in-process channel mesh for simulation and tests, and TCP
//! for deployment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::frame::{Frame, TrafficMeter};
use crate::error::{Error, Result};
use crate::protocol::{PartyId, SessionId};

/// Ordered, reliable delivery of frames between named parties.
pub trait Transport: Send + Sync {
    fn me(&self) -> PartyId;

    /// Delivers `frame` to `frame.receiver`.
    fn send(&self, frame: Frame) -> Result<()>;

    /// Next frame addressed to this party, from any sender.
    fn recv(&self, timeout: Duration) -> Result<Frame>;
}

fn recv_error(err: RecvTimeoutError, timeout: Duration) -> Error {
    match err {
        RecvTimeoutError::Timeout => Error::SessionTimeout(timeout),
        RecvTimeoutError::Disconnected => Error::Connection("all peers disconnected".into()),
    }
}

/// One endpoint of an in-process mesh. Frames travel serialized so the
/// receive path runs the same validation as over a socket.
pub struct ChannelTransport {
    me: PartyId,
    session: SessionId,
    peers: BTreeMap<PartyId, Sender<Vec<u8>>>,
    inbox: Receiver<Vec<u8>>,
    meter: TrafficMeter,
}

/// Endpoints for the collector (index 0) and providers 1..=n, all sharing
/// `meter`.
pub fn channel_network(session: SessionId, n: u16, meter: &TrafficMeter) -> Vec<ChannelTransport> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..=n).map(|_| unbounded()).unzip();
    receivers
        .into_iter()
        .enumerate()
        .map(|(i, inbox)| ChannelTransport {
            me: PartyId::from_wire(i as u16),
            session,
            peers: senders
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, tx)| (PartyId::from_wire(j as u16), tx.clone()))
                .collect(),
            inbox,
            meter: meter.clone(),
        })
        .collect()
}

impl Transport for ChannelTransport {
    fn me(&self) -> PartyId {
        self.me
    }

    fn send(&self, frame: Frame) -> Result<()> {
        let tx = self
            .peers
            .get(&frame.receiver)
            .ok_or_else(|| Error::usage(format!("no channel to {}", frame.receiver)))?;
        let bytes = frame.to_bytes()?;
        tx.send(bytes)
            .map_err(|_| Error::Connection(format!("{} has left the session", frame.receiver)))?;
        self.meter.record(&frame);
        Ok(())
    }

    fn recv(&self, timeout: Duration) -> Result<Frame> {
        let bytes = self.inbox.recv_timeout(timeout).map_err(|e| recv_error(e, timeout))?;
        let frame = Frame::from_bytes(&bytes, &self.session)?;
        if frame.receiver != self.me {
            return Err(Error::protocol(format!("frame for {} delivered to {}", frame.receiver, self.me)));
        }
        Ok(frame)
    }
}

/// Where a party listens and whom it dials.
#[derive(Clone, Debug)]
pub struct TcpPlan {
    pub me: PartyId,
    pub session: SessionId,
    pub listen: Option<String>,
    pub dial: Vec<(PartyId, String)>,
    /// Parties expected to dial in.
    pub accept_from: Vec<PartyId>,
    pub connect_timeout: Duration,
}

const HELLO_LEN: usize = 2 + 16;

enum Incoming {
    Frame(Frame),
    /// Clean end of stream from a peer.
    Closed(PartyId),
    Failed(PartyId, Error),
}

/// Mesh of TCP connections, one per peer, each read by its own thread.
pub struct TcpTransport {
    me: PartyId,
    session: SessionId,
    writers: BTreeMap<PartyId, Mutex<TcpStream>>,
    inbox: Receiver<Incoming>,
    closed: Mutex<BTreeSet<PartyId>>,
    meter: TrafficMeter,
}

fn hello(me: PartyId, session: &SessionId) -> [u8; HELLO_LEN] {
    let mut h = [0u8; HELLO_LEN];
    h[..2].copy_from_slice(&me.raw().to_le_bytes());
    h[2..].copy_from_slice(&session.0);
    h
}

fn dial(addr: &str, deadline: Instant) -> Result<TcpStream> {
    loop {
        let last = match addr.to_socket_addrs() {
            Ok(addrs) => {
                let mut last = None;
                for a in addrs {
                    match TcpStream::connect_timeout(&a, Duration::from_secs(2)) {
                        Ok(s) => return Ok(s),
                        Err(e) => last = Some(e.to_string()),
                    }
                }
                last.unwrap_or_else(|| "no addresses".into())
            }
            Err(e) => return Err(Error::usage(format!("cannot resolve {addr}: {e}"))),
        };
        if Instant::now() >= deadline {
            return Err(Error::Connection(format!("cannot reach {addr}: {last}")));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

impl TcpTransport {
    /// Binds, dials every target (retrying until the timeout) and accepts
    /// the expected inbound peers.
    pub fn establish(plan: &TcpPlan, meter: &TrafficMeter) -> Result<Self> {
        let deadline = Instant::now() + plan.connect_timeout;
        let listener = match &plan.listen {
            Some(addr) => Some(
                TcpListener::bind(addr).map_err(|e| Error::Connection(format!("cannot listen on {addr}: {e}")))?,
            ),
            None if plan.accept_from.is_empty() => None,
            None => return Err(Error::usage(format!("{} must listen to accept peers", plan.me))),
        };

        let mut streams: BTreeMap<PartyId, TcpStream> = BTreeMap::new();
        for (peer, addr) in &plan.dial {
            let mut s = dial(addr, deadline)?;
            s.write_all(&hello(plan.me, &plan.session))?;
            log::debug!("{} dialed {peer} at {addr}", plan.me);
            streams.insert(*peer, s);
        }

        if let Some(listener) = listener {
            listener.set_nonblocking(true)?;
            let mut pending: BTreeSet<PartyId> = plan.accept_from.iter().copied().collect();
            while !pending.is_empty() {
                match listener.accept() {
                    Ok((mut s, addr)) => {
                        s.set_nonblocking(false)?;
                        s.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(10))))?;
                        let mut h = [0u8; HELLO_LEN];
                        s.read_exact(&mut h)
                            .map_err(|e| Error::Connection(format!("no hello from {addr}: {e}")))?;
                        s.set_read_timeout(None)?;
                        let peer = PartyId::from_wire(u16::from_le_bytes([h[0], h[1]]));
                        if h[2..] != plan.session.0 {
                            return Err(Error::protocol(format!("{addr} joined with another session id")));
                        }
                        if !pending.remove(&peer) {
                            return Err(Error::protocol(format!("unexpected connection from {peer} at {addr}")));
                        }
                        log::debug!("{} accepted {peer} from {addr}", plan.me);
                        streams.insert(peer, s);
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        if Instant::now() >= deadline {
                            let missing: Vec<String> = pending.iter().map(|p| p.to_string()).collect();
                            return Err(Error::Connection(format!("{} never connected", missing.join(", "))));
                        }
                        thread::sleep(Duration::from_millis(20));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }

        let (tx, inbox) = unbounded();
        let mut writers = BTreeMap::new();
        for (peer, stream) in streams {
            stream.set_nodelay(true)?;
            let mut reader = stream.try_clone()?;
            let tx = tx.clone();
            let session = plan.session;
            let meter = meter.clone();
            thread::spawn(move || loop {
                match Frame::read_from(&mut reader, &session) {
                    Ok(Some(frame)) => {
                        meter.record(&frame);
                        if tx.send(Incoming::Frame(frame)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(Incoming::Closed(peer));
                        return;
                    }
                    Err(e) => {
                        let _ = tx.send(Incoming::Failed(peer, e));
                        return;
                    }
                }
            });
            writers.insert(peer, Mutex::new(stream));
        }

        Ok(TcpTransport {
            me: plan.me,
            session: plan.session,
            writers,
            inbox,
            closed: Mutex::new(BTreeSet::new()),
            meter: meter.clone(),
        })
    }
}

impl Transport for TcpTransport {
    fn me(&self) -> PartyId {
        self.me
    }

    fn send(&self, frame: Frame) -> Result<()> {
        let w = self
            .writers
            .get(&frame.receiver)
            .ok_or_else(|| Error::usage(format!("no connection to {}", frame.receiver)))?;
        frame.write_to(&mut *w.lock().expect("writer lock"))?;
        self.meter.record(&frame);
        Ok(())
    }

    fn recv(&self, timeout: Duration) -> Result<Frame> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let item = self.inbox.recv_timeout(left).map_err(|e| recv_error(e, timeout))?;
            match item {
                Incoming::Frame(frame) => {
                    if frame.session != self.session || frame.receiver != self.me {
                        return Err(Error::protocol(format!("misrouted frame {frame:?}")));
                    }
                    return Ok(frame);
                }
                // Providers hang up on each other once their exchange is
                // over; only a vanished collector link is fatal.
                Incoming::Closed(peer) if !peer.is_collector() && !self.me.is_collector() => {
                    self.closed.lock().expect("closed lock").insert(peer);
                }
                Incoming::Closed(peer) => {
                    return Err(Error::Connection(format!("{peer} closed the connection")));
                }
                Incoming::Failed(peer, e) => {
                    return Err(match e {
                        Error::Connection(msg) => Error::Connection(format!("{peer}: {msg}")),
                        other => other,
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::frame::MsgType;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn sid() -> SessionId {
        SessionId([3; 16])
    }

    fn p(i: u16) -> PartyId {
        PartyId::from_wire(i)
    }

    #[test]
    fn channel_delivery_and_timeout() {
        let meter = TrafficMeter::new();
        let net = channel_network(sid(), 2, &meter);
        net[1].send(Frame::new(MsgType::Bmsg, sid(), p(1), p(0), vec![1, 2, 3])).unwrap();
        let f = net[0].recv(Duration::from_secs(1)).unwrap();
        assert_eq!(f.body, vec![1, 2, 3]);
        assert_eq!(meter.bytes(p(1), p(0)), 37);
        assert!(matches!(net[0].recv(Duration::from_millis(10)), Err(Error::SessionTimeout(_))));
        assert!(net[1].send(Frame::new(MsgType::Okvs, sid(), p(1), p(7), vec![])).is_err());
    }

    #[test]
    fn channel_rejects_foreign_session() {
        let meter = TrafficMeter::new();
        let net = channel_network(sid(), 2, &meter);
        net[1].send(Frame::new(MsgType::Okvs, SessionId([4; 16]), p(1), p(2), vec![])).unwrap();
        assert!(matches!(net[2].recv(Duration::from_secs(1)), Err(Error::Protocol(_))));
    }

    #[test]
    fn per_sender_order_survives_interleaving() {
        let meter = TrafficMeter::new();
        let mut net = channel_network(sid(), 3, &meter);
        let receiver = net.remove(0);
        thread::scope(|s| {
            for t in net.iter() {
                s.spawn(move || {
                    let mut rng = ChaCha20Rng::seed_from_u64(t.me().raw() as u64);
                    for seq in 0u32..200 {
                        if rng.gen_bool(0.3) {
                            thread::yield_now();
                        }
                        t.send(Frame::new(MsgType::Bmsg, sid(), t.me(), p(0), seq.to_le_bytes().to_vec()))
                            .unwrap();
                    }
                });
            }
        });
        let mut next = BTreeMap::new();
        for _ in 0..600 {
            let f = receiver.recv(Duration::from_secs(5)).unwrap();
            let seq = u32::from_le_bytes(f.body[..4].try_into().unwrap());
            let expected = next.entry(f.sender).or_insert(0u32);
            assert_eq!(seq, *expected);
            *expected += 1;
        }
    }

    #[test]
    fn tcp_mesh_exchanges_frames() {
        let ports: Vec<u16> = (0..3)
            .map(|_| TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port())
            .collect();
        let addr = |i: usize| format!("127.0.0.1:{}", ports[i]);
        // C listens; P1 listens for P2; P2 dials P1 and C; P1 dials C.
        let plans = vec![
            TcpPlan {
                me: p(0),
                session: sid(),
                listen: Some(addr(0)),
                dial: vec![],
                accept_from: vec![p(1), p(2)],
                connect_timeout: Duration::from_secs(10),
            },
            TcpPlan {
                me: p(1),
                session: sid(),
                listen: Some(addr(1)),
                dial: vec![(p(0), addr(0))],
                accept_from: vec![p(2)],
                connect_timeout: Duration::from_secs(10),
            },
            TcpPlan {
                me: p(2),
                session: sid(),
                listen: None,
                dial: vec![(p(1), addr(1)), (p(0), addr(0))],
                accept_from: vec![],
                connect_timeout: Duration::from_secs(10),
            },
        ];
        let meter = TrafficMeter::new();
        let transports: Vec<TcpTransport> = thread::scope(|s| {
            let handles: Vec<_> = plans
                .iter()
                .map(|plan| {
                    let meter = meter.clone();
                    s.spawn(move || TcpTransport::establish(plan, &meter).unwrap())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        transports[2]
            .send(Frame::new(MsgType::Okvs, sid(), p(2), p(1), vec![9; 5000]))
            .unwrap();
        transports[1].send(Frame::new(MsgType::Bmsg, sid(), p(1), p(0), vec![1])).unwrap();
        transports[0].send(Frame::new(MsgType::Done, sid(), p(0), p(2), vec![])).unwrap();
        assert_eq!(transports[1].recv(Duration::from_secs(5)).unwrap().body, vec![9; 5000]);
        assert_eq!(transports[0].recv(Duration::from_secs(5)).unwrap().msg_type, MsgType::Bmsg);
        assert_eq!(transports[2].recv(Duration::from_secs(5)).unwrap().msg_type, MsgType::Done);
    }
}

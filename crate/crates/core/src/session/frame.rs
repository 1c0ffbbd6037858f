//! Wire framing shared by every transport.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::protocol::{PartyId, SessionId};

pub const FRAME_MAGIC: &[u8; 4] = b"SIKA";
pub const FRAME_VERSION: u8 = 1;
/// magic 4 ‖ version 1 ‖ type 1 ‖ session 16 ‖ sender 2 ‖ receiver 2 ‖ body_len 8
pub const FRAME_HEADER_LEN: usize = 34;
pub const MAX_BODY_LEN: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    Okvs = 1,
    Bmsg = 2,
    Payload = 3,
    Abort = 4,
    Done = 5,
}

impl MsgType {
    fn from_wire(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MsgType::Okvs,
            2 => MsgType::Bmsg,
            3 => MsgType::Payload,
            4 => MsgType::Abort,
            5 => MsgType::Done,
            other => return Err(Error::protocol(format!("unknown frame type {other}"))),
        })
    }

    pub fn is_data(self) -> bool {
        matches!(self, MsgType::Okvs | MsgType::Bmsg | MsgType::Payload)
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MsgType::Okvs => "OKVS",
            MsgType::Bmsg => "BMSG",
            MsgType::Payload => "PAYLOAD",
            MsgType::Abort => "ABORT",
            MsgType::Done => "DONE",
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session: SessionId,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub body: Vec<u8>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Frame({} {}->{} {} bytes)",
            self.msg_type,
            self.sender,
            self.receiver,
            self.body.len()
        )
    }
}

struct Header {
    msg_type: MsgType,
    sender: PartyId,
    receiver: PartyId,
    body_len: u64,
}

fn parse_header(h: &[u8; FRAME_HEADER_LEN], session: &SessionId) -> Result<Header> {
    if &h[..4] != FRAME_MAGIC {
        return Err(Error::protocol("bad frame magic"));
    }
    if h[4] != FRAME_VERSION {
        return Err(Error::protocol(format!("unsupported frame version {}", h[4])));
    }
    let msg_type = MsgType::from_wire(h[5])?;
    if h[6..22] != session.0 {
        return Err(Error::protocol("frame belongs to a different session"));
    }
    let body_len = u64::from_le_bytes(h[26..34].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(Error::protocol(format!("frame body of {body_len} bytes is too large")));
    }
    Ok(Header {
        msg_type,
        sender: PartyId::from_wire(u16::from_le_bytes([h[22], h[23]])),
        receiver: PartyId::from_wire(u16::from_le_bytes([h[24], h[25]])),
        body_len,
    })
}

impl Frame {
    pub fn new(msg_type: MsgType, session: SessionId, sender: PartyId, receiver: PartyId, body: Vec<u8>) -> Self {
        Frame {
            msg_type,
            session,
            sender,
            receiver,
            body,
        }
    }

    pub fn wire_len(&self) -> u64 {
        (FRAME_HEADER_LEN + self.body.len()) as u64
    }

    fn header(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut h = [0u8; FRAME_HEADER_LEN];
        h[..4].copy_from_slice(FRAME_MAGIC);
        h[4] = FRAME_VERSION;
        h[5] = self.msg_type as u8;
        h[6..22].copy_from_slice(&self.session.0);
        h[22..24].copy_from_slice(&self.sender.raw().to_le_bytes());
        h[24..26].copy_from_slice(&self.receiver.raw().to_le_bytes());
        h[26..34].copy_from_slice(&(self.body.len() as u64).to_le_bytes());
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.body.len() as u64 > MAX_BODY_LEN {
            return Err(Error::protocol("frame body too large"));
        }
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.body.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], session: &SessionId) -> Result<Self> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(Error::protocol("truncated frame header"));
        }
        let h = parse_header(bytes[..FRAME_HEADER_LEN].try_into().unwrap(), session)?;
        let body = &bytes[FRAME_HEADER_LEN..];
        if body.len() as u64 != h.body_len {
            return Err(Error::protocol(format!(
                "frame declares {} body bytes, carries {}",
                h.body_len,
                body.len()
            )));
        }
        Ok(Frame::new(h.msg_type, *session, h.sender, h.receiver, body.to_vec()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.body.len() as u64 > MAX_BODY_LEN {
            return Err(Error::protocol("frame body too large"));
        }
        w.write_all(&self.header())?;
        w.write_all(&self.body)?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame. `Ok(None)` means the stream ended cleanly before a
    /// new frame started.
    pub fn read_from<R: Read>(r: &mut R, session: &SessionId) -> Result<Option<Self>> {
        let mut h = [0u8; FRAME_HEADER_LEN];
        let mut filled = 0;
        while filled < FRAME_HEADER_LEN {
            match r.read(&mut h[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::Connection("stream ended inside a frame header".into())),
                Ok(k) => filled += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let h2 = parse_header(&h, session)?;
        let mut body = vec![0u8; h2.body_len as usize];
        r.read_exact(&mut body)
            .map_err(|e| Error::Connection(format!("stream ended inside a frame body: {e}")))?;
        Ok(Some(Frame::new(h2.msg_type, *session, h2.sender, h2.receiver, body)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub msg_type: MsgType,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub bytes: u64,
}

#[derive(Default)]
struct MeterState {
    edges: BTreeMap<(PartyId, PartyId), u64>,
    log: Vec<FrameRecord>,
}

/// Per-edge byte counters and a log of every frame seen.
#[derive(Clone, Default)]
pub struct TrafficMeter(Arc<Mutex<MeterState>>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeBytes {
    pub sender: PartyId,
    pub receiver: PartyId,
    pub bytes: u64,
}

impl EdgeBytes {
    pub fn label(&self) -> String {
        format!("{}->{}", self.sender, self.receiver)
    }
}

impl TrafficMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, frame: &Frame) {
        let mut st = self.0.lock().expect("meter lock");
        *st.edges.entry((frame.sender, frame.receiver)).or_default() += frame.wire_len();
        st.log.push(FrameRecord {
            msg_type: frame.msg_type,
            sender: frame.sender,
            receiver: frame.receiver,
            bytes: frame.wire_len(),
        });
    }

    pub fn bytes(&self, sender: PartyId, receiver: PartyId) -> u64 {
        let st = self.0.lock().expect("meter lock");
        st.edges.get(&(sender, receiver)).copied().unwrap_or(0)
    }

    /// Edges ordered by sender, providers first, then by receiver.
    pub fn edges(&self) -> Vec<EdgeBytes> {
        let st = self.0.lock().expect("meter lock");
        let mut edges: Vec<EdgeBytes> = st
            .edges
            .iter()
            .map(|(&(sender, receiver), &bytes)| EdgeBytes {
                sender,
                receiver,
                bytes,
            })
            .collect();
        let key = |p: PartyId| if p.is_collector() { u32::MAX } else { p.raw() as u32 };
        edges.sort_by_key(|e| (key(e.sender), key(e.receiver)));
        edges
    }

    pub fn log(&self) -> Vec<FrameRecord> {
        self.0.lock().expect("meter lock").log.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn sid() -> SessionId {
        SessionId([7; 16])
    }

    fn p(i: u16) -> PartyId {
        PartyId::from_wire(i)
    }

    #[test]
    fn layout() {
        let f = Frame::new(MsgType::Bmsg, sid(), p(2), p(0), vec![0xaa, 0xbb]);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SIKA");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..22], &[7; 16]);
        assert_eq!(&bytes[22..26], &[2, 0, 0, 0]);
        assert_eq!(&bytes[26..34], &2u64.to_le_bytes());
        assert_eq!(&bytes[34..], &[0xaa, 0xbb]);
    }

    #[test]
    fn one_mebibyte_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut body = vec![0u8; 1 << 20];
        rng.fill_bytes(&mut body);
        let f = Frame::new(MsgType::Okvs, sid(), p(1), p(3), body);
        let mut wire = Vec::new();
        f.write_to(&mut wire).unwrap();
        assert_eq!(Frame::from_bytes(&wire, &sid()).unwrap(), f);
        let mut cursor = io::Cursor::new(wire);
        assert_eq!(Frame::read_from(&mut cursor, &sid()).unwrap(), Some(f));
        assert_eq!(Frame::read_from(&mut cursor, &sid()).unwrap(), None);
    }

    #[test]
    fn rejects_bad_headers() {
        let good = Frame::new(MsgType::Done, sid(), p(0), p(1), vec![]).to_bytes().unwrap();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(Frame::from_bytes(&magic, &sid()), Err(Error::Protocol(_))));
        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(Frame::from_bytes(&version, &sid()), Err(Error::Protocol(_))));
        assert!(matches!(
            Frame::from_bytes(&good, &SessionId([8; 16])),
            Err(Error::Protocol(_))
        ));
        let mut huge = good.clone();
        huge[26..34].copy_from_slice(&(MAX_BODY_LEN + 1).to_le_bytes());
        assert!(matches!(
            Frame::read_from(&mut io::Cursor::new(huge), &sid()),
            Err(Error::Protocol(_))
        ));
        let mut kind = good;
        kind[5] = 9;
        assert!(Frame::from_bytes(&kind, &sid()).is_err());
    }

    #[test]
    fn truncated_stream_is_a_connection_error() {
        let wire = Frame::new(MsgType::Okvs, sid(), p(1), p(2), vec![1; 100]).to_bytes().unwrap();
        let mut cut = io::Cursor::new(&wire[..50]);
        assert!(matches!(Frame::read_from(&mut cut, &sid()), Err(Error::Connection(_))));
        let mut cut = io::Cursor::new(&wire[..10]);
        assert!(matches!(Frame::read_from(&mut cut, &sid()), Err(Error::Connection(_))));
    }

    #[test]
    fn meter_counts_header_and_body() {
        let meter = TrafficMeter::new();
        meter.record(&Frame::new(MsgType::Okvs, sid(), p(1), p(2), vec![0; 10]));
        meter.record(&Frame::new(MsgType::Okvs, sid(), p(1), p(2), vec![0; 5]));
        meter.record(&Frame::new(MsgType::Bmsg, sid(), p(1), p(0), vec![0; 1]));
        assert_eq!(meter.bytes(p(1), p(2)), 2 * 34 + 15);
        let labels: Vec<String> = meter.edges().iter().map(EdgeBytes::label).collect();
        assert_eq!(labels, vec!["P1->P2", "P1->C"]);
        assert_eq!(meter.log().len(), 3);
    }
}

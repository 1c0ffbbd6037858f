//! Output protocols on top of the key agreement: cardinality, delegated PSI
//! revealing ids, payload transfer, and threshold-gated payload transfer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};

use crate::bits::{BitString, Kappa};
use crate::error::{Error, Result};
use crate::primitives::{derive_key, sym_decrypt, sym_encrypt, Ciphertext, KeyLabel, NONCE_LEN, TAG_LEN};
use crate::protocol::{IntersectionResult, PartyId, ProviderOutput};
use crate::shamir::{self, Share, ThresholdPolicy};

pub const DEFAULT_PAD_BUCKET: usize = 64;

const TAG_DUMMY: u8 = 0;
const TAG_REAL: u8 = 1;

/// One input row: an identifier and its attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub raw_id: Vec<u8>,
    pub atts: Vec<String>,
}

impl Record {
    pub fn new(raw_id: impl Into<Vec<u8>>, atts: Vec<String>) -> Result<Self> {
        let raw_id = raw_id.into();
        if raw_id.is_empty() {
            return Err(Error::Input("record has an empty identifier".into()));
        }
        Ok(Record { raw_id, atts })
    }
}

/// Session-level output selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sika,
    Cardinality,
    Psi,
    Payload,
    ThresholdPayload,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sika => "sika",
            Mode::Cardinality => "cardinality",
            Mode::Psi => "psi",
            Mode::Payload => "payload",
            Mode::ThresholdPayload => "threshold-payload",
        }
    }

    /// The payload flavour providers upload, if any.
    pub fn payload_mode(self) -> Option<PayloadMode> {
        match self {
            Mode::Sika | Mode::Cardinality => None,
            Mode::Psi => Some(PayloadMode::PsiId),
            Mode::Payload => Some(PayloadMode::Payload),
            Mode::ThresholdPayload => Some(PayloadMode::ThresholdPayload),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sika" => Mode::Sika,
            "cardinality" => Mode::Cardinality,
            "psi" => Mode::Psi,
            "payload" => Mode::Payload,
            "threshold-payload" => Mode::ThresholdPayload,
            other => return Err(Error::usage(format!("unknown mode {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadMode {
    PsiId = 1,
    Payload = 2,
    ThresholdPayload = 3,
}

impl PayloadMode {
    fn from_wire(b: u8) -> Result<Self> {
        match b {
            1 => Ok(PayloadMode::PsiId),
            2 => Ok(PayloadMode::Payload),
            3 => Ok(PayloadMode::ThresholdPayload),
            other => Err(Error::protocol(format!("unknown payload mode {other}"))),
        }
    }
}

pub fn cardinality(result: &IntersectionResult) -> usize {
    result.cardinality
}

fn encode_fields<S: AsRef<[u8]>>(fields: &[S], bucket: usize) -> Vec<u8> {
    let mut out = vec![TAG_REAL];
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for field in fields {
        let field = field.as_ref();
        out.extend_from_slice(&(field.len() as u32).to_le_bytes());
        out.extend_from_slice(field);
    }
    let padded = out.len().div_ceil(bucket) * bucket;
    out.resize(padded, 0);
    out
}

fn dummy_plaintext(len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len.max(1)];
    out[0] = TAG_DUMMY;
    out
}

/// Parses a real-record plaintext back into its fields.
fn decode_fields(pt: &[u8]) -> Result<Vec<Vec<u8>>> {
    let bad = || Error::protocol("malformed payload plaintext");
    match pt.first() {
        Some(&TAG_REAL) => {}
        Some(&TAG_DUMMY) => return Err(Error::protocol("matched entry decrypted to a dummy marker")),
        _ => return Err(bad()),
    }
    let mut rest = &pt[1..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad());
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut fields = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        fields.push(take(len)?.to_vec());
    }
    if rest.iter().any(|&b| b != 0) {
        return Err(bad());
    }
    Ok(fields)
}

fn decode_strings(pt: &[u8]) -> Result<Vec<String>> {
    decode_fields(pt)?
        .into_iter()
        .map(|f| String::from_utf8(f).map_err(|_| Error::protocol("payload field is not UTF-8")))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PayloadEntry {
    pub bnym: BitString,
    pub c: Ciphertext,
    pub c_share: Option<Ciphertext>,
}

/// A provider's encrypted payloads, in the same order as its blinded upload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PayloadMessage {
    pub mode: PayloadMode,
    /// Reconstruction threshold; 0 outside threshold mode.
    pub t: u32,
    pub entries: Vec<PayloadEntry>,
}

fn put_ct(out: &mut Vec<u8>, ct: &Ciphertext) {
    out.extend_from_slice(&(ct.encoded_len() as u32).to_le_bytes());
    ct.write_to(out);
}

impl PayloadMessage {
    /// `mode u8 ‖ t u32 ‖ m u64 ‖ entries`, each entry `bnym ‖ len u32 ‖ c`
    /// and in threshold mode `‖ len u32 ‖ c_share`; integers LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(self.mode as u8);
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(e.bnym.as_bytes());
            put_ct(&mut out, &e.c);
            if let Some(cs) = &e.c_share {
                put_ct(&mut out, cs);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], kappa: Kappa) -> Result<Self> {
        let bad = |what: &str| Error::protocol(format!("payload message: {what}"));
        if bytes.len() < 13 {
            return Err(bad("truncated header"));
        }
        let mode = PayloadMode::from_wire(bytes[0])?;
        let t = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let m = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let threshold = mode == PayloadMode::ThresholdPayload;
        if threshold != (t > 0) {
            return Err(bad("threshold does not match mode"));
        }
        let min_entry = kappa.bytes() + 4 + NONCE_LEN + TAG_LEN;
        if m > (bytes.len() / min_entry) as u64 {
            return Err(bad("entry count exceeds body"));
        }
        let mut rest = &bytes[13..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(bad("truncated entry"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let mut entries = Vec::with_capacity(m as usize);
        for _ in 0..m {
            let bnym = BitString::from_bytes(take(kappa.bytes())?)?;
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let c = Ciphertext::from_bytes(take(len)?)?;
            let c_share = if threshold {
                let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                Some(Ciphertext::from_bytes(take(len)?)?)
            } else {
                None
            };
            entries.push(PayloadEntry { bnym, c, c_share });
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(PayloadMessage { mode, t, entries })
    }
}

/// Encrypts every record of `out` (dummies included) for the collector.
///
/// `records` are the real inputs in input order; `policy` is required in
/// threshold mode and ignored otherwise.
pub fn encrypt_payload<R: RngCore + CryptoRng + ?Sized>(
    out: &ProviderOutput,
    records: &[Record],
    mode: PayloadMode,
    policy: Option<ThresholdPolicy>,
    pad_bucket: usize,
    rng: &mut R,
) -> Result<PayloadMessage> {
    if records.len() != out.real {
        return Err(Error::usage(format!(
            "{} records given for {} real outputs",
            records.len(),
            out.real
        )));
    }
    if pad_bucket == 0 {
        return Err(Error::usage("pad bucket must be positive"));
    }
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.atts.len() != first.atts.len()) {
            return Err(Error::Input("attribute count differs between records".into()));
        }
    }
    let kappa_bytes = out.records.first().map_or(16, |r| r.id.len_bytes());
    for (rec, o) in records.iter().zip(&out.records) {
        let kappa = Kappa::from_bits(o.id.len_bits() as u32)?;
        if crate::primitives::hash_id(&rec.raw_id, kappa)? != o.id {
            return Err(Error::usage("records are not aligned with the provider output"));
        }
    }

    let mut plaintexts: Vec<Vec<u8>> = records
        .iter()
        .map(|r| match mode {
            PayloadMode::PsiId => encode_fields(&[&r.raw_id], pad_bucket),
            _ => encode_fields(&r.atts, pad_bucket),
        })
        .collect();
    // dummies look like the longest real plaintext
    let dummy_len = plaintexts.iter().map(Vec::len).max().unwrap_or(pad_bucket);
    plaintexts.resize_with(out.records.len(), || dummy_plaintext(dummy_len));

    let (t, shares, secret) = if mode == PayloadMode::ThresholdPayload {
        let policy = policy.ok_or_else(|| Error::usage("threshold mode needs a threshold policy"))?;
        if policy.m() as usize != out.records.len() {
            return Err(Error::usage(format!(
                "threshold policy is for m={}, output has {} records",
                policy.m(),
                out.records.len()
            )));
        }
        let secret = BitString::random(rng, kappa_bytes)?;
        let shares = shamir::split(&secret, policy.t(), policy.m(), rng)?;
        (policy.t(), Some(shares), Some(secret))
    } else {
        (0, None, None)
    };

    let label = match mode {
        PayloadMode::PsiId => KeyLabel::PsiId,
        _ => KeyLabel::Payload,
    };
    let entries = out
        .send_order
        .iter()
        .map(|&k| {
            let rec = &out.records[k];
            let payload_key = match &secret {
                Some(r) => derive_key(&r.xor(&rec.sk)?, label),
                None => derive_key(&rec.sk, label),
            };
            let c = sym_encrypt(&payload_key, &plaintexts[k], rng)?;
            let c_share = match &shares {
                Some(shares) => Some(sym_encrypt(
                    &derive_key(&rec.sk, KeyLabel::Share),
                    &shares[k].to_bytes(),
                    rng,
                )?),
                None => None,
            };
            Ok(PayloadEntry {
                bnym: rec.bnym,
                c,
                c_share,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PayloadMessage { mode, t, entries })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinedRow {
    pub p: u32,
    /// Per provider, its decrypted fields, or `None` when its columns are
    /// locked.
    pub groups: Vec<Option<Vec<String>>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinedOutput {
    pub cardinality: usize,
    /// Ordered by `p`.
    pub rows: Vec<JoinedRow>,
    /// Per provider: threshold not reached.
    pub locked: Vec<bool>,
    /// Number of AEAD decryptions performed.
    pub decrypt_attempts: usize,
}

impl JoinedOutput {
    /// In id mode, the decrypted identifiers in `p` order.
    pub fn ids(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter_map(|r| r.groups.iter().flatten().next())
            .filter_map(|g| g.first().cloned())
            .collect()
    }
}

/// Decrypts the payloads of matched entries and joins them by `p`.
pub fn collector_join(
    result: &IntersectionResult,
    msgs: &BTreeMap<PartyId, PayloadMessage>,
) -> Result<JoinedOutput> {
    let n = result.per_provider.len();
    if msgs.len() != n {
        return Err(Error::protocol(format!("expected {n} payload messages, got {}", msgs.len())));
    }
    let mode = msgs.values().next().map(|m| m.mode);
    let mut rows: Vec<JoinedRow> = (1..=result.cardinality as u32)
        .map(|p| JoinedRow {
            p,
            groups: vec![None; n],
        })
        .collect();
    let mut locked = vec![false; n];
    let mut attempts = 0usize;

    for (slot, entries) in result.per_provider.iter().enumerate() {
        let from = PartyId::provider(slot as u16 + 1)?;
        let msg = msgs
            .get(&from)
            .ok_or_else(|| Error::protocol(format!("no payload message from {from}")))?;
        if Some(msg.mode) != mode {
            return Err(Error::protocol(format!("{from} used a different payload mode")));
        }
        if msg.entries.len() != entries.len() {
            return Err(Error::protocol(format!(
                "{from} sent {} payload entries for {} blinded nyms",
                msg.entries.len(),
                entries.len()
            )));
        }
        let by_bnym: HashMap<BitString, &crate::protocol::ResultEntry> =
            entries.iter().map(|e| (e.bnym, e)).collect();
        let mut matched = Vec::with_capacity(result.cardinality);
        for entry in &msg.entries {
            let r = by_bnym
                .get(&entry.bnym)
                .ok_or_else(|| Error::protocol(format!("{from} sent a payload for an unknown nym")))?;
            if let Some(m) = r.matched {
                matched.push((m, entry));
            }
        }
        let desync = |_| Error::protocol(format!("payload from {from} failed to authenticate"));

        let secret = if msg.mode == PayloadMode::ThresholdPayload {
            let mut shares = Vec::with_capacity(matched.len());
            for (m, entry) in &matched {
                let cs = entry
                    .c_share
                    .as_ref()
                    .ok_or_else(|| Error::protocol(format!("{from} omitted a share")))?;
                attempts += 1;
                let bytes = sym_decrypt(&derive_key(&m.sk, KeyLabel::Share), cs).map_err(desync)?;
                let kappa = Kappa::from_bits(m.sk.len_bits() as u32)?;
                shares.push(Share::from_bytes(&bytes, kappa)?);
            }
            if matched.len() < msg.t as usize {
                locked[slot] = true;
                continue;
            }
            Some(shamir::reconstruct(&shares, msg.t)?)
        } else {
            None
        };

        let label = match msg.mode {
            PayloadMode::PsiId => KeyLabel::PsiId,
            _ => KeyLabel::Payload,
        };
        for (m, entry) in matched {
            let key = match &secret {
                Some(r) => derive_key(&r.xor(&m.sk)?, label),
                None => derive_key(&m.sk, label),
            };
            attempts += 1;
            let pt = sym_decrypt(&key, &entry.c).map_err(desync)?;
            rows[m.p as usize - 1].groups[slot] = Some(decode_strings(&pt)?);
        }
    }

    Ok(JoinedOutput {
        cardinality: result.cardinality,
        rows,
        locked,
        decrypt_attempts: attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::SecurityParams;
    use crate::okvs::OkvsTable;
    use crate::primitives::SessionRng;
    use crate::protocol::{provider_init, CollectorState, SessionConfig, SessionId};
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    struct Setup {
        outputs: Vec<ProviderOutput>,
        result: IntersectionResult,
    }

    fn pid(i: usize) -> PartyId {
        PartyId::provider(i as u16).unwrap()
    }

    fn sika(inputs: &[Vec<Record>], m: usize, rng: &mut SessionRng) -> Setup {
        let n = inputs.len();
        let cfg = SessionConfig::new(SessionId([1; 16]), n as u16, m, SecurityParams::K128_L40).unwrap();
        let mut states: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, recs)| {
                let ids: Vec<&[u8]> = recs.iter().map(|r| r.raw_id.as_slice()).collect();
                provider_init(&ids, &cfg, pid(i + 1), rng).unwrap()
            })
            .collect();
        let mut inbox: Vec<BTreeMap<PartyId, OkvsTable>> = vec![BTreeMap::new(); n];
        for st in states.iter_mut() {
            let me = st.me();
            for (to, t) in st.build_all_okvs(rng).unwrap() {
                inbox[to.slot()].insert(me, t);
            }
        }
        let mut collector = CollectorState::new(cfg);
        let mut outputs = Vec::new();
        for (st, tables) in states.iter_mut().zip(&inbox) {
            let (out, msg) = st.finalize(tables, rng).unwrap();
            collector.absorb(st.me(), msg).unwrap();
            outputs.push(out);
        }
        Setup {
            outputs,
            result: collector.finish().unwrap(),
        }
    }

    fn records(ids: &[&str], cols: usize) -> Vec<Record> {
        ids.iter()
            .map(|id| Record::new(*id, (0..cols).map(|c| format!("{id}-c{c}")).collect()).unwrap())
            .collect()
    }

    fn encrypt_all(
        setup: &Setup,
        inputs: &[Vec<Record>],
        mode: PayloadMode,
        ts: &[u32],
        rng: &mut SessionRng,
    ) -> BTreeMap<PartyId, PayloadMessage> {
        setup
            .outputs
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (out, recs))| {
                let policy = (mode == PayloadMode::ThresholdPayload)
                    .then(|| ThresholdPolicy::new(ts[i], out.records.len() as u32).unwrap());
                let msg = encrypt_payload(out, recs, mode, policy, DEFAULT_PAD_BUCKET, rng).unwrap();
                (pid(i + 1), msg)
            })
            .collect()
    }

    #[test]
    fn framing_round_trip_and_padding() {
        let pt = encode_fields(&["a", "", "ünï"], 64);
        assert_eq!(pt.len(), 64);
        assert_eq!(decode_strings(&pt).unwrap(), vec!["a", "", "ünï"]);
        let long = "x".repeat(100);
        assert_eq!(encode_fields(&[long.as_str()], 64).len(), 128);
        assert!(decode_fields(&dummy_plaintext(64)).is_err());
        let mut tampered = pt.clone();
        tampered[63] = 1;
        assert!(decode_fields(&tampered).is_err());
    }

    #[test]
    fn payload_join_matches_plaintext_join() {
        let mut rng = SessionRng::seed_from_u64(1);
        let inputs = vec![
            records(&["a", "b", "c", "d"], 2),
            records(&["d", "c", "x"], 1),
            records(&["c", "y", "d"], 3),
        ];
        let setup = sika(&inputs, 8, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::Payload, &[], &mut rng);
        let joined = collector_join(&setup.result, &msgs).unwrap();
        assert_eq!(joined.cardinality, 2);
        assert_eq!(joined.decrypt_attempts, 2 * 3);
        let got: HashSet<Vec<Vec<String>>> = joined
            .rows
            .iter()
            .map(|r| r.groups.iter().map(|g| g.clone().unwrap()).collect())
            .collect();
        let expected: HashSet<Vec<Vec<String>>> = ["c", "d"]
            .iter()
            .map(|id| {
                inputs
                    .iter()
                    .map(|recs| recs.iter().find(|r| r.raw_id == id.as_bytes()).unwrap().atts.clone())
                    .collect()
            })
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn psi_id_mode_reveals_exactly_the_intersection() {
        let mut rng = SessionRng::seed_from_u64(2);
        let inputs = vec![records(&["a", "b", "c"], 0), records(&["b", "c", "z"], 0)];
        let setup = sika(&inputs, 4, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::PsiId, &[], &mut rng);
        let joined = collector_join(&setup.result, &msgs).unwrap();
        let ids: HashSet<String> = joined.ids().into_iter().collect();
        assert_eq!(ids, HashSet::from(["b".to_string(), "c".to_string()]));
    }

    #[test]
    fn unmatched_entries_are_never_decrypted() {
        let mut rng = SessionRng::seed_from_u64(3);
        let inputs = vec![records(&["a", "b"], 1), records(&["c", "d"], 1)];
        let setup = sika(&inputs, 16, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::Payload, &[], &mut rng);
        let joined = collector_join(&setup.result, &msgs).unwrap();
        assert_eq!(joined.decrypt_attempts, 0);
        assert!(joined.rows.is_empty());
    }

    #[test]
    fn constant_ciphertext_shape() {
        let mut rng = SessionRng::seed_from_u64(4);
        let inputs = vec![records(&["a", "b"], 2), records(&["a"], 2)];
        let setup = sika(&inputs, 8, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::Payload, &[], &mut rng);
        for msg in msgs.values() {
            let lens: HashSet<usize> = msg.entries.iter().map(|e| e.c.encoded_len()).collect();
            assert_eq!(lens.len(), 1, "{lens:?}");
        }
    }

    #[test]
    fn threshold_boundaries_are_per_provider() {
        let mut rng = SessionRng::seed_from_u64(5);
        let common: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let mk = |extra: &str| {
            let mut ids: Vec<&str> = common.iter().map(String::as_str).collect();
            ids.push(extra);
            records(&ids, 1)
        };
        let inputs = vec![mk("u1"), mk("u2"), mk("u3")];
        let setup = sika(&inputs, 8, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::ThresholdPayload, &[5, 4, 1], &mut rng);
        let joined = collector_join(&setup.result, &msgs).unwrap();
        assert_eq!(joined.cardinality, 4);
        assert_eq!(joined.locked, vec![true, false, false]);
        for row in &joined.rows {
            assert!(row.groups[0].is_none());
            assert!(row.groups[1].is_some() && row.groups[2].is_some());
        }
        // locked provider only had its shares decrypted
        assert_eq!(joined.decrypt_attempts, 4 + (4 + 4) + (4 + 4));
    }

    #[test]
    fn share_under_wrong_key_fails_auth() {
        let mut rng = SessionRng::seed_from_u64(6);
        let inputs = vec![records(&["a"], 1), records(&["a"], 1)];
        let setup = sika(&inputs, 2, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::ThresholdPayload, &[1, 1], &mut rng);
        let entry = &msgs[&pid(1)].entries[0];
        let wrong = BitString::random(&mut rng, 16).unwrap();
        assert!(matches!(
            sym_decrypt(&derive_key(&wrong, KeyLabel::Share), entry.c_share.as_ref().unwrap()),
            Err(Error::AuthFailure)
        ));
    }

    #[test]
    fn join_detects_desync() {
        let mut rng = SessionRng::seed_from_u64(7);
        let inputs = vec![records(&["a", "b"], 1), records(&["a", "b"], 1)];
        let setup = sika(&inputs, 2, &mut rng);
        let msgs = encrypt_all(&setup, &inputs, PayloadMode::Payload, &[], &mut rng);

        let mut unknown = msgs.clone();
        unknown.get_mut(&pid(1)).unwrap().entries[0].bnym = BitString::random(&mut rng, 16).unwrap();
        assert!(matches!(collector_join(&setup.result, &unknown), Err(Error::Protocol(_))));

        let mut flipped = msgs.clone();
        flipped.get_mut(&pid(2)).unwrap().entries[1].c.body[0] ^= 1;
        assert!(matches!(collector_join(&setup.result, &flipped), Err(Error::Protocol(_))));

        let mut missing = msgs;
        missing.remove(&pid(2));
        assert!(collector_join(&setup.result, &missing).is_err());
    }

    #[test]
    fn misaligned_records_rejected() {
        let mut rng = SessionRng::seed_from_u64(8);
        let inputs = vec![records(&["a", "b"], 1), records(&["a"], 1)];
        let setup = sika(&inputs, 2, &mut rng);
        let out = &setup.outputs[0];
        let short = &inputs[0][..1];
        assert!(encrypt_payload(out, short, PayloadMode::Payload, None, 64, &mut rng).unwrap_err().is_usage());
        let swapped = vec![inputs[0][1].clone(), inputs[0][0].clone()];
        assert!(encrypt_payload(out, &swapped, PayloadMode::Payload, None, 64, &mut rng).is_err());
        assert!(encrypt_payload(out, &inputs[0], PayloadMode::ThresholdPayload, None, 64, &mut rng).is_err());
    }

    #[test]
    fn wire_round_trip() {
        let mut rng = SessionRng::seed_from_u64(9);
        let inputs = vec![records(&["a", "b"], 2), records(&["b"], 2)];
        let setup = sika(&inputs, 4, &mut rng);
        for (mode, ts) in [(PayloadMode::Payload, vec![]), (PayloadMode::ThresholdPayload, vec![2, 1])] {
            let msgs = encrypt_all(&setup, &inputs, mode, &ts, &mut rng);
            for msg in msgs.values() {
                let bytes = msg.to_bytes();
                assert_eq!(bytes[0], mode as u8);
                assert_eq!(PayloadMessage::from_bytes(&bytes, Kappa::K128).unwrap(), *msg);
                assert!(PayloadMessage::from_bytes(&bytes[..bytes.len() - 1], Kappa::K128).is_err());
            }
        }
    }

    #[test]
    fn random_instances_join_correctly() {
        let mut rng = SessionRng::seed_from_u64(10);
        for _ in 0..10 {
            let universe: Vec<String> = (0..24).map(|i| format!("id{i}")).collect();
            let inputs: Vec<Vec<Record>> = (0..3)
                .map(|_| {
                    let ids: Vec<&str> = universe
                        .iter()
                        .filter(|_| rng.gen_bool(0.6))
                        .map(String::as_str)
                        .collect();
                    records(&ids, 2)
                })
                .collect();
            let setup = sika(&inputs, 32, &mut rng);
            let msgs = encrypt_all(&setup, &inputs, PayloadMode::Payload, &[], &mut rng);
            let joined = collector_join(&setup.result, &msgs).unwrap();
            let expected: HashSet<&Vec<u8>> = inputs[0]
                .iter()
                .map(|r| &r.raw_id)
                .filter(|id| inputs[1..].iter().all(|recs| recs.iter().any(|r| &&r.raw_id == id)))
                .collect();
            assert_eq!(cardinality(&setup.result), expected.len());
            for row in &joined.rows {
                let origins: HashSet<String> = row
                    .groups
                    .iter()
                    .map(|g| g.as_ref().unwrap()[0].split('-').next().unwrap().to_string())
                    .collect();
                assert_eq!(origins.len(), 1);
            }
        }
    }
}

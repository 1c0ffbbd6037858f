//! Provider and collector state machines of the set intersection key
//! agreement.
//!
//! Each provider `i` samples a PRP key, one nym share `s_k` per record and one
//! z-value `z_{k,j}` per record and destination `j` (including itself). To every
//! other provider it sends an OKVS mapping `id_k` to
//! `(s_k ⊕ PRP(key, z_{k,j})) ‖ z_{k,j}`. After decoding the tables it received
//! at its own ids, it uploads to the collector its blinded nyms together with
//! the decoded z-values and its PRP key. The collector strips the blinding,
//! which only yields the same global nym at every provider for ids held by all
//! of them, and recovers each matched record's key `sk = ⊕_j z_{k,j}`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore};
use rayon::prelude::*;

use crate::bits::{BitString, Kappa, SecurityParams};
use crate::error::{Error, Result};
use crate::okvs::{self, OkvsParams, OkvsTable};
use crate::primitives::{fork_rng, hash_id, Prp, PrpKey};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        SessionId(id)
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId(")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// A session participant: the collector is 0, providers are 1..=n.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartyId(u16);

impl PartyId {
    pub const COLLECTOR: PartyId = PartyId(0);

    pub fn provider(index: u16) -> Result<Self> {
        if index == 0 {
            return Err(Error::usage("provider indices start at 1"));
        }
        Ok(PartyId(index))
    }

    pub fn from_wire(raw: u16) -> Self {
        PartyId(raw)
    }

    pub fn raw(self) -> u16 {
        self.0
    }

    pub fn is_collector(self) -> bool {
        self.0 == 0
    }

    /// Zero-based position among the providers.
    pub fn slot(self) -> usize {
        debug_assert!(!self.is_collector());
        self.0 as usize - 1
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_collector() {
            f.write_str("C")
        } else {
            write!(f, "P{}", self.0)
        }
    }
}

/// Parameters every party must agree on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionConfig {
    pub session_id: SessionId,
    pub n: u16,
    /// Padded input size shared by all providers.
    pub m: usize,
    pub params: SecurityParams,
}

impl SessionConfig {
    pub fn new(session_id: SessionId, n: u16, m: usize, params: SecurityParams) -> Result<Self> {
        if n < 2 {
            return Err(Error::usage(format!("need at least 2 providers, got {n}")));
        }
        if m == 0 {
            return Err(Error::usage("padded input size m must be positive"));
        }
        if m > u32::MAX as usize {
            return Err(Error::usage("padded input size m must fit in 32 bits"));
        }
        OkvsParams::new(m, params)?;
        Ok(SessionConfig {
            session_id,
            n,
            m,
            params,
        })
    }

    pub fn kappa(&self) -> Kappa {
        self.params.kappa
    }

    pub fn okvs_params(&self) -> OkvsParams {
        OkvsParams::new(self.m, self.params).expect("validated in SessionConfig::new")
    }

    pub fn providers(&self) -> impl Iterator<Item = PartyId> {
        (1..=self.n).map(PartyId)
    }

    pub fn check_provider(&self, id: PartyId) -> Result<()> {
        if id.is_collector() || id.0 > self.n {
            return Err(Error::usage(format!("{id} is not a provider of this {}-party session", self.n)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderPhase {
    Init,
    OkvsSent,
    Finalized,
}

/// Provider-side protocol state.
#[derive(Clone)]
pub struct ProviderState {
    cfg: SessionConfig,
    me: PartyId,
    key: PrpKey,
    ids: Vec<BitString>,
    real: usize,
    nym_shares: Vec<BitString>,
    /// Row-major `m × n`: `z[k * n + slot(j)]` is the z-value of record `k`
    /// destined for provider `j`.
    z: Vec<BitString>,
    sent: BTreeSet<PartyId>,
    phase: ProviderPhase,
}

impl fmt::Debug for ProviderState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderState")
            .field("me", &self.me)
            .field("m", &self.cfg.m)
            .field("real", &self.real)
            .field("phase", &self.phase)
            .finish()
    }
}

/// One record of a provider's output `M^i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProviderRecord {
    pub id: BitString,
    pub bnym: BitString,
    pub sk: BitString,
}

/// The provider's output `M^i`, in input order, dummies last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProviderOutput {
    pub me: PartyId,
    pub records: Vec<ProviderRecord>,
    /// Number of leading records that are real inputs.
    pub real: usize,
    /// `send_order[pos]` is the record index sent at position `pos`.
    pub send_order: Vec<usize>,
}

impl ProviderOutput {
    pub fn real_records(&self) -> &[ProviderRecord] {
        &self.records[..self.real]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BEntry {
    pub bnym: BitString,
    /// `zvec[slot(j)]` is the z-value provider `j` associated with this id;
    /// the sender's own slot holds its own z-value.
    pub zvec: Vec<BitString>,
}

/// A provider's upload to the collector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BMessage {
    pub key: PrpKey,
    pub entries: Vec<BEntry>,
}

impl BMessage {
    pub fn encoded_len(kappa: Kappa, n: usize, m: usize) -> usize {
        12 + kappa.bytes() + m * (n + 1) * kappa.bytes()
    }

    /// `kappa u16 ‖ n u16 ‖ m u64 ‖ key ‖ m × (bnym ‖ n z-values)`, integers LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let kappa = self.key.kappa();
        let n = self.entries.first().map_or(0, |e| e.zvec.len());
        let mut out = Vec::with_capacity(Self::encoded_len(kappa, n, self.entries.len()));
        out.extend_from_slice(&(kappa.bits() as u16).to_le_bytes());
        out.extend_from_slice(&(n as u16).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(self.key.as_bitstring().as_bytes());
        for entry in &self.entries {
            out.extend_from_slice(entry.bnym.as_bytes());
            for z in &entry.zvec {
                out.extend_from_slice(z.as_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::protocol("blinded message truncated"));
        }
        let kappa = Kappa::from_bits(u16::from_le_bytes([bytes[0], bytes[1]]) as u32)
            .map_err(|_| Error::protocol("bad kappa in blinded message"))?;
        let n = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let m = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let kb = kappa.bytes();
        let expected = 12u128 + kb as u128 + m as u128 * (n as u128 + 1) * kb as u128;
        if bytes.len() as u128 != expected {
            return Err(Error::protocol(format!(
                "blinded message is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let key = PrpKey::from_bitstring(BitString::from_bytes(&bytes[12..12 + kb])?)?;
        let entries = bytes[12 + kb..]
            .chunks_exact((n + 1) * kb)
            .map(|chunk| {
                let mut parts = chunk.chunks_exact(kb).map(BitString::from_bytes);
                let bnym = parts.next().expect("n + 1 parts")?;
                let zvec = parts.collect::<Result<Vec<_>>>()?;
                Ok(BEntry { bnym, zvec })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BMessage { key, entries })
    }
}

/// Step 1: hash and pad the inputs, sample the key, nym shares and z-values.
///
/// `raw_ids` are expected to be normalized already.
pub fn provider_init<I, R>(raw_ids: &[I], cfg: &SessionConfig, me: PartyId, rng: &mut R) -> Result<ProviderState>
where
    I: AsRef<[u8]>,
    R: RngCore + CryptoRng + ?Sized,
{
    cfg.check_provider(me)?;
    let kappa = cfg.kappa();
    if raw_ids.len() > cfg.m {
        return Err(Error::Input(format!(
            "{} records exceed the padded input size m={}",
            raw_ids.len(),
            cfg.m
        )));
    }

    let mut ids = Vec::with_capacity(cfg.m);
    let mut first_seen: HashMap<BitString, usize> = HashMap::with_capacity(cfg.m);
    let mut duplicates = Vec::new();
    for (pos, raw) in raw_ids.iter().enumerate() {
        let id = hash_id(raw.as_ref(), kappa)
            .map_err(|_| Error::Input(format!("record {} has an empty identifier", pos + 1)))?;
        match first_seen.get(&id) {
            Some(&first) => duplicates.push(format!("{} (same as {})", pos + 1, first + 1)),
            None => {
                first_seen.insert(id, pos);
            }
        }
        ids.push(id);
    }
    if !duplicates.is_empty() {
        return Err(Error::Input(format!(
            "duplicate identifiers at records {}",
            duplicates.join(", ")
        )));
    }

    let real = ids.len();
    while ids.len() < cfg.m {
        let dummy = BitString::random_kappa(rng, kappa);
        if first_seen.insert(dummy, ids.len()).is_none() {
            ids.push(dummy);
        }
    }

    let key = PrpKey::random(rng, kappa);
    let nym_shares = (0..cfg.m).map(|_| BitString::random_kappa(rng, kappa)).collect();
    let z = (0..cfg.m * cfg.n as usize)
        .map(|_| BitString::random_kappa(rng, kappa))
        .collect();

    Ok(ProviderState {
        cfg: *cfg,
        me,
        key,
        ids,
        real,
        nym_shares,
        z,
        sent: BTreeSet::new(),
        phase: ProviderPhase::Init,
    })
}

impl ProviderState {
    pub fn me(&self) -> PartyId {
        self.me
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn phase(&self) -> ProviderPhase {
        self.phase
    }

    pub fn ids(&self) -> &[BitString] {
        &self.ids
    }

    pub fn real_count(&self) -> usize {
        self.real
    }

    pub fn key(&self) -> &PrpKey {
        &self.key
    }

    pub fn nym_share(&self, k: usize) -> &BitString {
        &self.nym_shares[k]
    }

    /// z-value of record `k` destined for provider `j`.
    pub fn z_value(&self, k: usize, j: PartyId) -> &BitString {
        &self.z[k * self.cfg.n as usize + j.slot()]
    }

    /// `sk_k = ⊕_j z_{k,j}`.
    pub fn secret_key(&self, k: usize) -> BitString {
        let n = self.cfg.n as usize;
        let mut sk = self.z[k * n];
        for z in &self.z[k * n + 1..(k + 1) * n] {
            sk.xor_in(z);
        }
        sk
    }

    fn check_peer(&self, j: PartyId) -> Result<()> {
        self.cfg.check_provider(j)?;
        if j == self.me {
            return Err(Error::usage(format!("{j} cannot send an OKVS to itself")));
        }
        Ok(())
    }

    fn encode_for<R: RngCore + CryptoRng + ?Sized>(&self, j: PartyId, rng: &mut R) -> Result<OkvsTable> {
        let prp = Prp::new(&self.key);
        let pairs = (0..self.cfg.m)
            .map(|k| {
                let z = self.z_value(k, j);
                let mut bs = prp.forward(z)?;
                bs.xor_in(&self.nym_shares[k]);
                Ok((self.ids[k], bs.concat(z)?))
            })
            .collect::<Result<Vec<_>>>()?;
        okvs::encode(&pairs, &self.cfg.okvs_params(), okvs::DEFAULT_MAX_RETRIES, rng)
    }

    /// Step 2 for a single destination.
    pub fn build_okvs_for<R: RngCore + CryptoRng + ?Sized>(&mut self, j: PartyId, rng: &mut R) -> Result<OkvsTable> {
        self.check_peer(j)?;
        if self.phase == ProviderPhase::Finalized {
            return Err(Error::protocol("provider already finalized"));
        }
        let table = self.encode_for(j, rng)?;
        self.sent.insert(j);
        self.phase = ProviderPhase::OkvsSent;
        Ok(table)
    }

    /// Step 2 for every other provider, encoding in parallel.
    pub fn build_all_okvs<R: RngCore + CryptoRng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<(PartyId, OkvsTable)>> {
        if self.phase == ProviderPhase::Finalized {
            return Err(Error::protocol("provider already finalized"));
        }
        let jobs: Vec<_> = self
            .cfg
            .providers()
            .filter(|&j| j != self.me)
            .map(|j| (j, fork_rng(rng)))
            .collect();
        let tables = jobs
            .into_par_iter()
            .map(|(j, mut child)| Ok((j, self.encode_for(j, &mut child)?)))
            .collect::<Result<Vec<_>>>()?;
        self.sent.extend(tables.iter().map(|(j, _)| *j));
        self.phase = ProviderPhase::OkvsSent;
        Ok(tables)
    }

    /// Step 3: decode the received tables at the own ids, derive `M^i` and
    /// the upload for the collector.
    pub fn finalize<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        okvs_in: &BTreeMap<PartyId, OkvsTable>,
        rng: &mut R,
    ) -> Result<(ProviderOutput, BMessage)> {
        match self.phase {
            ProviderPhase::Finalized => return Err(Error::protocol("provider already finalized")),
            ProviderPhase::Init => return Err(Error::protocol("OKVS tables must be sent before finalizing")),
            ProviderPhase::OkvsSent => {}
        }
        let peers: Vec<PartyId> = self.cfg.providers().filter(|&j| j != self.me).collect();
        if let Some(j) = peers.iter().find(|j| !self.sent.contains(j)) {
            return Err(Error::protocol(format!("no OKVS was sent to {j}")));
        }
        for j in okvs_in.keys() {
            if !peers.contains(j) {
                return Err(Error::protocol(format!("unexpected OKVS from {j}")));
            }
        }
        let expected = self.cfg.okvs_params();
        let mut tables = Vec::with_capacity(peers.len());
        for &j in &peers {
            let table = okvs_in
                .get(&j)
                .ok_or_else(|| Error::protocol(format!("missing OKVS from {j}")))?;
            if table.kappa() != expected.kappa
                || table.band_width() != expected.band_width
                || table.table_rows() != expected.table_rows
            {
                return Err(Error::protocol(format!(
                    "OKVS from {j} has the wrong size ({} rows, w={})",
                    table.table_rows(),
                    table.band_width()
                )));
            }
            tables.push((j, table));
        }

        let n = self.cfg.n as usize;
        let me = self.me;
        let rows: Vec<(ProviderRecord, BEntry)> = (0..self.cfg.m)
            .into_par_iter()
            .map(|k| {
                let id = self.ids[k];
                let mut bnym = self.nym_shares[k];
                let mut zvec = vec![*self.z_value(k, me); n];
                for (j, table) in &tables {
                    let (bs, z) = table.decode(&id)?.split_halves()?;
                    bnym.xor_in(&bs);
                    zvec[j.slot()] = z;
                }
                let record = ProviderRecord {
                    id,
                    bnym,
                    sk: self.secret_key(k),
                };
                Ok((record, BEntry { bnym, zvec }))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut send_order: Vec<usize> = (0..self.cfg.m).collect();
        send_order.shuffle(rng);
        let entries = send_order.iter().map(|&k| rows[k].1.clone()).collect();
        let records = rows.into_iter().map(|(r, _)| r).collect();

        self.phase = ProviderPhase::Finalized;
        Ok((
            ProviderOutput {
                me,
                records,
                real: self.real,
                send_order,
            },
            BMessage {
                key: self.key,
                entries,
            },
        ))
    }
}

/// Outcome of handing a blinded message to the collector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Absorb {
    Stored,
    /// The provider already delivered a message; this one was ignored.
    Duplicate,
}

/// The key recovered for a record present at every provider.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Match {
    /// 1-based rank of the global nym among all matched nyms.
    pub p: u32,
    pub sk: BitString,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResultEntry {
    pub bnym: BitString,
    pub matched: Option<Match>,
}

/// The collector's output `R`: per provider, one entry per uploaded record
/// in upload order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntersectionResult {
    pub per_provider: Vec<Vec<ResultEntry>>,
    pub cardinality: usize,
}

impl IntersectionResult {
    pub fn provider(&self, id: PartyId) -> &[ResultEntry] {
        &self.per_provider[id.slot()]
    }

    /// For each `p` (index `p − 1`), the matched entry position at every
    /// provider.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let n = self.per_provider.len();
        let mut groups = vec![vec![usize::MAX; n]; self.cardinality];
        for (slot, entries) in self.per_provider.iter().enumerate() {
            for (pos, entry) in entries.iter().enumerate() {
                if let Some(m) = entry.matched {
                    groups[m.p as usize - 1][slot] = pos;
                }
            }
        }
        groups
    }
}

/// Collector-side protocol state.
#[derive(Debug)]
pub struct CollectorState {
    cfg: SessionConfig,
    received: BTreeMap<PartyId, BMessage>,
}

impl CollectorState {
    pub fn new(cfg: SessionConfig) -> Self {
        CollectorState {
            cfg,
            received: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    /// Stores the first message of each provider and ignores repeats.
    pub fn absorb(&mut self, from: PartyId, msg: BMessage) -> Result<Absorb> {
        self.cfg.check_provider(from)?;
        if self.received.contains_key(&from) {
            log::info!("ignoring repeated blinded message from {from}");
            return Ok(Absorb::Duplicate);
        }
        let kappa = self.cfg.kappa();
        let n = self.cfg.n as usize;
        if msg.key.kappa() != kappa {
            return Err(Error::protocol(format!("{from} used a {}-bit key", msg.key.kappa())));
        }
        if msg.entries.len() != self.cfg.m {
            return Err(Error::protocol(format!(
                "{from} sent {} entries, expected {}",
                msg.entries.len(),
                self.cfg.m
            )));
        }
        for entry in &msg.entries {
            if entry.zvec.len() != n {
                return Err(Error::protocol(format!(
                    "{from} sent a z-vector of length {}, expected {n}",
                    entry.zvec.len()
                )));
            }
            if entry.bnym.len_bits() != kappa.bits()
                || entry.zvec.iter().any(|z| z.len_bits() != kappa.bits())
            {
                return Err(Error::protocol(format!("{from} sent values of the wrong length")));
            }
        }
        self.received.insert(from, msg);
        Ok(Absorb::Stored)
    }

    pub fn is_ready(&self) -> bool {
        self.received.len() == self.cfg.n as usize
    }

    pub fn message(&self, from: PartyId) -> Option<&BMessage> {
        self.received.get(&from)
    }

    fn messages(&self) -> Result<Vec<&BMessage>> {
        self.cfg
            .providers()
            .map(|i| {
                self.received
                    .get(&i)
                    .ok_or_else(|| Error::protocol(format!("no blinded message from {i}")))
            })
            .collect()
    }

    /// Global nyms of every uploaded entry: `nym = bnym ⊕ ⊕_{j≠i} PRP(key_j, zvec[j])`.
    pub fn unblind(&self) -> Result<Vec<Vec<BitString>>> {
        let msgs = self.messages()?;
        let prps: Vec<Prp> = msgs.iter().map(|m| Prp::new(&m.key)).collect();
        msgs.iter()
            .enumerate()
            .map(|(i, msg)| {
                msg.entries
                    .par_iter()
                    .map(|entry| {
                        let mut nym = entry.bnym;
                        for (j, prp) in prps.iter().enumerate() {
                            if j != i {
                                nym.xor_in(&prp.forward(&entry.zvec[j])?);
                            }
                        }
                        Ok(nym)
                    })
                    .collect()
            })
            .collect()
    }

    /// Links nyms present at every provider, ranks them in ascending order
    /// and recovers each matched record's key from the z-values of all
    /// providers.
    pub fn intersect(&self, nyms: &[Vec<BitString>]) -> Result<IntersectionResult> {
        let msgs = self.messages()?;
        let n = msgs.len();
        if nyms.len() != n || nyms.iter().zip(&msgs).any(|(v, m)| v.len() != m.entries.len()) {
            return Err(Error::usage("nym lists do not match the received messages"));
        }

        let mut index: Vec<HashMap<BitString, usize>> = Vec::with_capacity(n);
        for (slot, list) in nyms.iter().enumerate() {
            let mut map = HashMap::with_capacity(list.len());
            for (pos, nym) in list.iter().enumerate() {
                if map.insert(*nym, pos).is_some() {
                    return Err(Error::protocol(format!(
                        "nym collision within the upload of P{}",
                        slot + 1
                    )));
                }
            }
            index.push(map);
        }

        let mut common: Vec<BitString> = nyms[0]
            .iter()
            .filter(|nym| index[1..].iter().all(|map| map.contains_key(*nym)))
            .copied()
            .collect();
        common.sort_unstable();

        let mut per_provider: Vec<Vec<ResultEntry>> = msgs
            .iter()
            .map(|m| {
                m.entries
                    .iter()
                    .map(|e| ResultEntry {
                        bnym: e.bnym,
                        matched: None,
                    })
                    .collect()
            })
            .collect();

        for (rank, nym) in common.iter().enumerate() {
            let positions: Vec<usize> = index.iter().map(|map| map[nym]).collect();
            for i in 0..n {
                let mut sk = msgs[0].entries[positions[0]].zvec[i];
                for j in 1..n {
                    sk.xor_in(&msgs[j].entries[positions[j]].zvec[i]);
                }
                per_provider[i][positions[i]].matched = Some(Match {
                    p: rank as u32 + 1,
                    sk,
                });
            }
        }

        Ok(IntersectionResult {
            per_provider,
            cardinality: common.len(),
        })
    }

    /// Step 4 once every provider has delivered.
    pub fn finish(&self) -> Result<IntersectionResult> {
        let nyms = self.unblind()?;
        self.intersect(&nyms)
    }
}

/// Sanity check used by callers assembling raw inputs: positions (1-based) of
/// identifiers that repeat an earlier one.
pub fn duplicate_positions<I: AsRef<[u8]>>(raw_ids: &[I]) -> Vec<(usize, usize)> {
    let mut seen: HashMap<&[u8], usize> = HashMap::new();
    let mut dups = Vec::new();
    for (pos, raw) in raw_ids.iter().enumerate() {
        if let Some(&first) = seen.get(raw.as_ref()) {
            dups.push((first + 1, pos + 1));
        } else {
            seen.insert(raw.as_ref(), pos);
        }
    }
    dups
}

/// Set of hashed ids, for tests and diagnostics.
pub fn hashed_set<I: AsRef<[u8]>>(raw_ids: &[I], kappa: Kappa) -> Result<HashSet<BitString>> {
    raw_ids.iter().map(|r| hash_id(r.as_ref(), kappa)).collect()
}

//! Session configuration file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sika_core::outputs::{Mode, DEFAULT_PAD_BUCKET};
use sika_core::protocol::{PartyId, SessionConfig, SessionId};
use sika_core::session::TcpPlan;
use sika_core::SecurityParams;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Provider,
    Collector,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartyEntry {
    pub index: u16,
    pub role: Role,
    #[serde(default)]
    pub listen: Option<String>,
    /// Indices of the parties this one connects to.
    #[serde(default)]
    pub dial: Vec<u16>,
    /// Attribute column names, used for the joined output header.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
}

fn default_pad_bucket() -> usize {
    DEFAULT_PAD_BUCKET
}

fn default_timeout() -> u64 {
    600
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub session_id: String,
    pub kappa: u32,
    pub lambda: u32,
    pub n: u16,
    pub m: usize,
    pub parties: Vec<PartyEntry>,
    pub mode: String,
    #[serde(default)]
    pub thresholds: Option<BTreeMap<String, u32>>,
    #[serde(default = "default_pad_bucket")]
    pub pad_bucket: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    /// Free text for the humans reviewing the request.
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub checksum: Option<String>,
}

/// SHA-256 over the compact, key-sorted JSON with the checksum removed.
pub fn checksum_of(doc: &serde_json::Value) -> String {
    let mut doc = doc.clone();
    if let Some(obj) = doc.as_object_mut() {
        obj.remove("checksum");
    }
    let canonical = serde_json::to_string(&doc).expect("json values serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// A parsed file plus the raw document it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub file: ConfigFile,
    pub checksum: String,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Loaded, CliError> {
    let doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::usage(format!("config is not valid JSON: {e}")))?;
    let file: ConfigFile =
        serde_json::from_value(doc.clone()).map_err(|e| CliError::usage(format!("bad config: {e}")))?;
    Ok(Loaded {
        checksum: checksum_of(&doc),
        file,
    })
}

/// A configuration that passed every check.
#[derive(Clone, Debug)]
pub struct Config {
    pub session: SessionConfig,
    pub mode: Mode,
    pub parties: BTreeMap<PartyId, PartyEntry>,
    pub thresholds: BTreeMap<PartyId, u32>,
    pub pad_bucket: usize,
    pub timeout: Duration,
    pub description: Option<String>,
}

impl Loaded {
    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let f = &self.file;
        let mut v = Vec::new();

        match hex::decode(&f.session_id) {
            Ok(b) if b.len() == 16 => {}
            _ => v.push(format!("session_id must be 32 hex characters, got {:?}", f.session_id)),
        }
        if SecurityParams::new(f.kappa, f.lambda).is_err() {
            v.push(format!(
                "unsupported (kappa, lambda) = ({}, {}); use (128, 40) or (256, 80)",
                f.kappa, f.lambda
            ));
        }
        if f.n < 2 {
            v.push(format!("n must be at least 2, got {}", f.n));
        }
        if f.m == 0 {
            v.push("m must be positive".into());
        } else if f.m > u32::MAX as usize {
            v.push("m must fit in 32 bits".into());
        }
        let mode = f.mode.parse::<Mode>();
        if mode.is_err() {
            v.push(format!(
                "unknown mode {:?}; expected sika, cardinality, psi, payload or threshold-payload",
                f.mode
            ));
        }
        if f.pad_bucket == 0 {
            v.push("pad_bucket must be positive".into());
        }
        if f.timeout_s == 0 {
            v.push("timeout_s must be positive".into());
        }

        let collectors: Vec<&PartyEntry> = f.parties.iter().filter(|p| p.role == Role::Collector).collect();
        match collectors.len() {
            1 if collectors[0].index != 0 => v.push(format!(
                "the collector must have index 0, got {}",
                collectors[0].index
            )),
            1 => {}
            k => v.push(format!("exactly one collector is required, found {k}")),
        }
        let mut seen = BTreeSet::new();
        for p in f.parties.iter().filter(|p| p.role == Role::Provider) {
            if p.index == 0 || p.index > f.n {
                v.push(format!("provider index {} is outside 1..={}", p.index, f.n));
            }
            if !seen.insert(p.index) {
                v.push(format!("provider index {} is listed more than once", p.index));
            }
            if let Some(cols) = &p.columns {
                if cols.iter().any(|c| c.trim().is_empty()) {
                    v.push(format!("provider {} has an empty column name", p.index));
                }
            }
        }
        for i in 1..=f.n {
            if !seen.contains(&i) {
                v.push(format!("provider {i} is missing from parties"));
            }
        }

        // connectivity: every provider pair and every provider-collector
        // pair is joined by exactly one dial
        let by_index: BTreeMap<u16, &PartyEntry> = f.parties.iter().map(|p| (p.index, p)).collect();
        let mut links: BTreeMap<(u16, u16), u32> = BTreeMap::new();
        for p in &f.parties {
            for &target in &p.dial {
                match by_index.get(&target) {
                    None => v.push(format!("party {} dials unknown party {target}", p.index)),
                    Some(_) if target == p.index => v.push(format!("party {} dials itself", p.index)),
                    Some(t) if t.listen.is_none() => {
                        v.push(format!("party {} dials party {target}, which has no listen address", p.index))
                    }
                    Some(_) => *links.entry((p.index.min(target), p.index.max(target))).or_default() += 1,
                }
            }
        }
        if f.n >= 2 && collectors.len() == 1 {
            for a in 0..=f.n {
                for b in (a + 1).max(1)..=f.n {
                    match links.get(&(a, b)).copied().unwrap_or(0) {
                        1 => {}
                        0 => v.push(format!("no connection between party {a} and party {b}")),
                        _ => v.push(format!("party {a} and party {b} dial each other more than once")),
                    }
                }
            }
        }

        let threshold_mode = matches!(mode, Ok(Mode::ThresholdPayload));
        match (&f.thresholds, threshold_mode) {
            (Some(_), false) => v.push("thresholds are only allowed in threshold-payload mode".into()),
            (None, true) => v.push("threshold-payload mode needs thresholds".into()),
            (Some(ts), true) => {
                for i in 1..=f.n {
                    match ts.get(&i.to_string()) {
                        None => v.push(format!("no threshold for provider {i}")),
                        Some(&t) if t == 0 || t as usize > f.m => {
                            v.push(format!("threshold {t} of provider {i} is outside 1..=m"))
                        }
                        Some(_) => {}
                    }
                }
                for k in ts.keys() {
                    if k.parse::<u16>().map_or(true, |i| i == 0 || i > f.n) {
                        v.push(format!("threshold given for unknown provider {k:?}"));
                    }
                }
            }
            (None, false) => {}
        }

        if let Some(sum) = &f.checksum {
            if !sum.eq_ignore_ascii_case(&self.checksum) {
                v.push(format!("checksum mismatch: file says {sum}, content hashes to {}", self.checksum));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<Config, CliError> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(CliError::usage(format!("invalid config:\n  {}", v.join("\n  "))));
        }
        let f = &self.file;
        let sid: [u8; 16] = hex::decode(&f.session_id).expect("checked").try_into().expect("checked");
        let params = SecurityParams::new(f.kappa, f.lambda).expect("checked");
        let session = SessionConfig::new(SessionId(sid), f.n, f.m, params).map_err(CliError::from_core)?;
        let parties = f
            .parties
            .iter()
            .map(|p| (PartyId::from_wire(p.index), p.clone()))
            .collect();
        let thresholds = f
            .thresholds
            .iter()
            .flatten()
            .map(|(k, &t)| (PartyId::from_wire(k.parse().expect("checked")), t))
            .collect();
        Ok(Config {
            session,
            mode: f.mode.parse().expect("checked"),
            parties,
            thresholds,
            pad_bucket: f.pad_bucket,
            timeout: Duration::from_secs(f.timeout_s),
            description: f.description.clone(),
        })
    }
}

impl Config {
    pub fn columns(&self, provider: PartyId) -> Option<&[String]> {
        self.parties.get(&provider).and_then(|p| p.columns.as_deref())
    }

    pub fn tcp_plan(&self, me: PartyId) -> Result<TcpPlan, CliError> {
        let entry = self
            .parties
            .get(&me)
            .ok_or_else(|| CliError::usage(format!("{me} is not in the config")))?;
        let dial = entry
            .dial
            .iter()
            .map(|&j| {
                let target = PartyId::from_wire(j);
                let addr = self.parties[&target].listen.clone().expect("validated");
                (target, addr)
            })
            .collect();
        let accept_from = self
            .parties
            .iter()
            .filter(|(_, p)| p.dial.contains(&me.raw()))
            .map(|(&id, _)| id)
            .collect();
        Ok(TcpPlan {
            me,
            session: self.session.session_id,
            listen: entry.listen.clone(),
            dial,
            accept_from,
            connect_timeout: self.timeout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> serde_json::Value {
        serde_json::json!({
            "session_id": "000102030405060708090a0b0c0d0e0f",
            "kappa": 128,
            "lambda": 40,
            "n": 2,
            "m": 8,
            "parties": [
                {"index": 0, "role": "collector", "listen": "127.0.0.1:7000"},
                {"index": 1, "role": "provider", "listen": "127.0.0.1:7001", "dial": [0]},
                {"index": 2, "role": "provider", "dial": [0, 1]}
            ],
            "mode": "payload",
            "description": "age and postcode of patients"
        })
    }

    fn loaded(v: serde_json::Value) -> Loaded {
        parse(&v.to_string()).unwrap()
    }

    #[test]
    fn sample_is_valid() {
        let cfg = loaded(sample()).validate().unwrap();
        assert_eq!(cfg.session.n, 2);
        assert_eq!(cfg.pad_bucket, 64);
        assert_eq!(cfg.timeout, Duration::from_secs(600));
        let plan = cfg.tcp_plan(PartyId::from_wire(1)).unwrap();
        assert_eq!(plan.accept_from, vec![PartyId::from_wire(2)]);
        assert_eq!(plan.dial, vec![(PartyId::COLLECTOR, "127.0.0.1:7000".to_string())]);
    }

    #[test]
    fn two_collectors() {
        let mut v = sample();
        v["parties"][1]["role"] = "collector".into();
        let errs = loaded(v).violations();
        assert!(errs.iter().any(|e| e.contains("exactly one collector")), "{errs:?}");
    }

    #[test]
    fn thresholds_outside_threshold_mode() {
        let mut v = sample();
        v["thresholds"] = serde_json::json!({"1": 2, "2": 2});
        let errs = loaded(v.clone()).violations();
        assert!(errs.iter().any(|e| e.contains("only allowed")), "{errs:?}");
        v["mode"] = "threshold-payload".into();
        assert!(loaded(v.clone()).violations().is_empty());
        v["thresholds"] = serde_json::json!({"1": 9});
        let errs = loaded(v).violations();
        assert!(errs.iter().any(|e| e.contains("outside 1..=m")));
        assert!(errs.iter().any(|e| e.contains("no threshold for provider 2")));
    }

    #[test]
    fn connectivity_checked() {
        let mut v = sample();
        v["parties"][2]["dial"] = serde_json::json!([0]);
        let errs = loaded(v.clone()).violations();
        assert!(errs.iter().any(|e| e.contains("between party 1 and party 2")), "{errs:?}");
        v["parties"][2]["dial"] = serde_json::json!([0, 1, 5]);
        assert!(loaded(v).violations().iter().any(|e| e.contains("unknown party 5")));
    }

    #[test]
    fn checksum_round_trip() {
        let mut v = sample();
        let sum = checksum_of(&v);
        v["checksum"] = sum.clone().into();
        assert!(loaded(v.clone()).violations().is_empty());
        v["m"] = 16.into();
        assert!(loaded(v).violations().iter().any(|e| e.contains("checksum mismatch")));
    }

    #[test]
    fn collects_several_violations() {
        let mut v = sample();
        v["session_id"] = "abc".into();
        v["kappa"] = 192.into();
        v["mode"] = "magic".into();
        let errs = loaded(v).violations();
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = sample();
        v["colour"] = "blue".into();
        assert!(parse(&v.to_string()).is_err());
    }
}

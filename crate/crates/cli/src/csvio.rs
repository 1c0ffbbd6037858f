//! CSV inputs, output tables and the JSON byte report.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sika_core::outputs::{JoinedOutput, Record};
use sika_core::primitives::normalize_id;
use sika_core::protocol::{IntersectionResult, ProviderOutput};
use sika_core::session::EdgeBytes;

use crate::CliError;

pub const LOCKED: &str = "<locked>";

/// A provider's CSV: header names of the attribute columns and the rows.
#[derive(Clone, Debug)]
pub struct InputTable {
    pub columns: Vec<String>,
    pub records: Vec<Record>,
}

pub fn read_input(path: &Path) -> Result<InputTable, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        .clone();
    if header.is_empty() {
        return Err(CliError::usage(format!("{}: missing header row", path.display())));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();

    let mut records = Vec::new();
    let mut first_line: HashMap<String, u64> = HashMap::new();
    let mut dups = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let line = row.position().map_or(0, |p| p.line());
        let id = normalize_id(row.get(0).unwrap_or_default());
        if id.is_empty() {
            return Err(CliError::usage(format!("{}: line {line} has an empty identifier", path.display())));
        }
        if let Some(&first) = first_line.get(id) {
            dups.push(format!("line {line} repeats line {first}"));
        } else {
            first_line.insert(id.to_string(), line);
        }
        let atts: Vec<String> = row.iter().skip(1).map(str::to_string).collect();
        if atts.len() != columns.len() {
            return Err(CliError::usage(format!(
                "{}: line {line} has {} attributes, header has {}",
                path.display(),
                atts.len(),
                columns.len()
            )));
        }
        records.push(Record::new(id.as_bytes().to_vec(), atts).map_err(CliError::from_core)?);
    }
    if !dups.is_empty() {
        return Err(CliError::usage(format!(
            "{}: duplicate identifiers: {}",
            path.display(),
            dups.join(", ")
        )));
    }
    Ok(InputTable { columns, records })
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::failure(format!("cannot write {}: {e}", path.display()))
}

/// Column names for the joined output: declared names, or `1..k` when only
/// the count is known.
pub fn joined_header(columns: &[Vec<String>]) -> Vec<String> {
    let mut header = vec!["p".to_string()];
    for (slot, cols) in columns.iter().enumerate() {
        header.extend(cols.iter().map(|c| format!("P{}_{c}", slot + 1)));
    }
    header
}

/// Resolves each provider's column names from what is declared and what
/// was decrypted.
pub fn resolve_columns(declared: &[Option<Vec<String>>], joined: &JoinedOutput) -> Vec<Vec<String>> {
    declared
        .iter()
        .enumerate()
        .map(|(slot, decl)| {
            if let Some(cols) = decl {
                return cols.clone();
            }
            let width = joined
                .rows
                .iter()
                .find_map(|r| r.groups[slot].as_ref().map(Vec::len))
                .unwrap_or(if joined.locked[slot] && !joined.rows.is_empty() { 1 } else { 0 });
            (1..=width).map(|i| i.to_string()).collect()
        })
        .collect()
}

pub fn write_joined(path: &Path, joined: &JoinedOutput, columns: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(joined_header(columns)).map_err(csv_err(path))?;
    for row in &joined.rows {
        let mut out = vec![row.p.to_string()];
        for (slot, group) in row.groups.iter().enumerate() {
            match group {
                Some(atts) => {
                    if atts.len() != columns[slot].len() {
                        return Err(CliError::failure(format!(
                            "P{} delivered {} attributes, {} columns declared",
                            slot + 1,
                            atts.len(),
                            columns[slot].len()
                        )));
                    }
                    out.extend(atts.iter().cloned());
                }
                None => out.extend(std::iter::repeat(LOCKED.to_string()).take(columns[slot].len())),
            }
        }
        w.write_record(&out).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::failure(e.to_string()))
}

/// One row per uploaded entry: provider, blinded nym, and for linked
/// entries the index and key.
pub fn write_sika_table(path: &Path, result: &IntersectionResult) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["provider", "bnym_hex", "p", "sk_hex"]).map_err(csv_err(path))?;
    for (slot, entries) in result.per_provider.iter().enumerate() {
        for e in entries {
            let (p, sk) = match e.matched {
                Some(m) => (m.p.to_string(), m.sk.to_hex()),
                None => (String::new(), String::new()),
            };
            w.write_record([(slot + 1).to_string(), e.bnym.to_hex(), p, sk])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| CliError::failure(e.to_string()))
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["p", "id"]).map_err(csv_err(path))?;
    for (i, id) in ids.iter().enumerate() {
        w.write_record([(i + 1).to_string(), id.clone()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::failure(e.to_string()))
}

pub fn write_cardinality(path: &Path, count: usize) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["cardinality"]).map_err(csv_err(path))?;
    w.write_record([count.to_string()]).map_err(csv_err(path))?;
    w.flush().map_err(|e| CliError::failure(e.to_string()))
}

pub fn sidecar_path(input: &Path) -> PathBuf {
    let mut s = input.as_os_str().to_owned();
    s.push(".nyms.csv");
    PathBuf::from(s)
}

/// The provider's local record of its real rows: raw id, blinded nym, key.
pub fn write_sidecar(path: &Path, records: &[Record], out: &ProviderOutput) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["raw_id", "bnym_hex", "sk_hex"]).map_err(csv_err(path))?;
    for (rec, o) in records.iter().zip(out.real_records()) {
        w.write_record([
            String::from_utf8_lossy(&rec.raw_id).into_owned(),
            o.bnym.to_hex(),
            o.sk.to_hex(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::failure(e.to_string()))
}

pub fn bytes_report_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".bytes.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct EdgeJson {
    edge: String,
    bytes: u64,
}

pub fn bytes_report(edges: &[EdgeBytes]) -> String {
    let rows: Vec<EdgeJson> = edges
        .iter()
        .map(|e| EdgeJson {
            edge: e.label(),
            bytes: e.bytes,
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("serializable") + "\n"
}

pub fn write_bytes_report(path: &Path, edges: &[EdgeBytes]) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(bytes_report(edges).as_bytes())
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sika_core::outputs::JoinedRow;
    use std::fs;

    #[test]
    fn reads_quoted_crlf_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.csv");
        fs::write(&path, "id,name,note\r\n  a1 ,\"Smith, J\",\"say \"\"hi\"\"\"\r\nb2,x,y\r\n").unwrap();
        let t = read_input(&path).unwrap();
        assert_eq!(t.columns, vec!["name", "note"]);
        assert_eq!(t.records[0].raw_id, b"a1");
        assert_eq!(t.records[0].atts, vec!["Smith, J", "say \"hi\""]);
    }

    #[test]
    fn duplicate_rows_named_by_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.csv");
        fs::write(&path, "id,v\na,1\nb,2\n a,3\n").unwrap();
        let err = read_input(&path).unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("line 4 repeats line 2"), "{err}");
    }

    #[test]
    fn joined_output_with_locked_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let joined = JoinedOutput {
            cardinality: 1,
            rows: vec![JoinedRow {
                p: 1,
                groups: vec![Some(vec!["x,y".into()]), None],
            }],
            locked: vec![false, true],
            decrypt_attempts: 2,
        };
        let cols = resolve_columns(&[None, Some(vec!["a".into(), "b".into()])], &joined);
        write_joined(&path, &joined, &cols).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "p,P1_1,P2_a,P2_b\n1,\"x,y\",<locked>,<locked>\n"
        );
    }

    #[test]
    fn sidecar_next_to_input() {
        assert_eq!(sidecar_path(Path::new("/tmp/a.csv")), PathBuf::from("/tmp/a.csv.nyms.csv"));
        assert_eq!(bytes_report_path(Path::new("o.csv")), PathBuf::from("o.csv.bytes.json"));
    }
}

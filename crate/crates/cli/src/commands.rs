//! The subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use sika_core::outputs::{Mode, Record, DEFAULT_PAD_BUCKET};
use sika_core::primitives::os_seeded_rng;
use sika_core::protocol::{PartyId, SessionConfig, SessionId};
use sika_core::session::{
    run_collector, run_in_process, run_provider, CollectorJob, CollectorRun, ProviderJob, Simulation,
    SimulationRun, TcpTransport, Timings, TrafficMeter, DEFAULT_TIMEOUT,
};
use sika_core::SecurityParams;

use crate::config::{self, Config, Role};
use crate::csvio::{self, InputTable};
use crate::CliError;

/// Phases reported by `simulate`, in protocol order.
pub const PHASES: [&str; 6] = ["provider_init", "okvs_encode", "decode_finalize", "unblind", "intersect", "join"];

fn load_config(path: &Path) -> Result<Config, CliError> {
    config::load(path)?.validate()
}

pub fn validate(path: &Path) -> Result<(), CliError> {
    let loaded = config::load(path)?;
    let violations = loaded.violations();
    if violations.is_empty() {
        println!("OK");
        println!("checksum {}", loaded.checksum);
        Ok(())
    } else {
        for v in &violations {
            println!("violation: {v}");
        }
        Err(CliError::usage(format!("{} violation(s) in {}", violations.len(), path.display())))
    }
}

fn check_columns(cfg: &Config, me: PartyId, table: &InputTable, input: &Path) -> Result<(), CliError> {
    if let Some(cols) = cfg.columns(me) {
        if cols.len() != table.columns.len() {
            return Err(CliError::usage(format!(
                "{}: {} attribute columns, config declares {} for {me}",
                input.display(),
                table.columns.len(),
                cols.len()
            )));
        }
    }
    if table.records.len() > cfg.session.m {
        return Err(CliError::usage(format!(
            "{}: {} records exceed m={}",
            input.display(),
            table.records.len(),
            cfg.session.m
        )));
    }
    Ok(())
}

pub fn provider(config_path: &Path, input: &Path, index: u16) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let me = PartyId::provider(index).map_err(CliError::from_core)?;
    match cfg.parties.get(&me) {
        Some(p) if p.role == Role::Provider => {}
        _ => return Err(CliError::usage(format!("{me} is not a provider in the config"))),
    }
    let table = csvio::read_input(input)?;
    check_columns(&cfg, me, &table, input)?;

    let meter = TrafficMeter::new();
    let transport = TcpTransport::establish(&cfg.tcp_plan(me)?, &meter).map_err(CliError::from_core)?;
    let mut rng = os_seeded_rng().map_err(CliError::from_core)?;
    let job = ProviderJob {
        cfg: cfg.session,
        me,
        mode: cfg.mode,
        records: &table.records,
        threshold: cfg.thresholds.get(&me).copied(),
        pad_bucket: cfg.pad_bucket,
        timeout: cfg.timeout,
    };
    let run = run_provider(&transport, &job, &mut rng).map_err(CliError::from_core)?;

    let sidecar = csvio::sidecar_path(input);
    csvio::write_sidecar(&sidecar, &table.records, &run.output)?;
    println!("{me}: done, {} records linked locally in {}", run.output.real, sidecar.display());
    Ok(())
}

fn declared_columns(cfg: &Config, tables: Option<&[InputTable]>) -> Vec<Option<Vec<String>>> {
    cfg.session
        .providers()
        .map(|p| {
            cfg.columns(p)
                .map(<[String]>::to_vec)
                .or_else(|| tables.map(|t| t[p.slot()].columns.clone()))
        })
        .collect()
}

fn write_outputs(
    cfg: &Config,
    run: &CollectorRun,
    output: &Path,
    declared: &[Option<Vec<String>>],
) -> Result<(), CliError> {
    match cfg.mode {
        Mode::Sika => csvio::write_sika_table(output, &run.result)?,
        Mode::Cardinality => {
            println!("cardinality {}", run.result.cardinality);
            csvio::write_cardinality(output, run.result.cardinality)?;
        }
        Mode::Psi => csvio::write_ids(output, &run.joined.as_ref().expect("psi mode joins").ids())?,
        Mode::Payload | Mode::ThresholdPayload => {
            let joined = run.joined.as_ref().expect("payload mode joins");
            let columns = csvio::resolve_columns(declared, joined);
            csvio::write_joined(output, joined, &columns)?;
            for (slot, locked) in joined.locked.iter().enumerate() {
                if *locked {
                    println!("P{}: below threshold, columns locked", slot + 1);
                }
            }
        }
    }
    if cfg.mode != Mode::Cardinality {
        println!("linked {} records into {}", run.result.cardinality, output.display());
    }
    Ok(())
}

pub fn collector(config_path: &Path, output: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let meter = TrafficMeter::new();
    let transport =
        TcpTransport::establish(&cfg.tcp_plan(PartyId::COLLECTOR)?, &meter).map_err(CliError::from_core)?;
    let run = run_collector(
        &transport,
        &CollectorJob {
            cfg: cfg.session,
            mode: cfg.mode,
            timeout: cfg.timeout,
        },
    )
    .map_err(CliError::from_core)?;
    write_outputs(&cfg, &run, output, &declared_columns(&cfg, None))?;
    csvio::write_bytes_report(&csvio::bytes_report_path(output), &meter.edges())
}

/// Wall-clock per phase; provider phases take the slowest provider.
pub fn phase_report(run: &SimulationRun) -> Vec<(&'static str, Duration)> {
    let slowest = |phase: &str| {
        run.providers
            .iter()
            .filter_map(|p| p.timings.get(phase))
            .max()
            .unwrap_or_default()
    };
    let collector = |t: &Timings, phase: &str| t.get(phase).unwrap_or_default();
    let mut report: Vec<(&'static str, Duration)> = PHASES
        .iter()
        .map(|&phase| match phase {
            "unblind" | "intersect" | "join" => (phase, collector(&run.collector.timings, phase)),
            _ => (phase, slowest(phase)),
        })
        .collect();
    if run.providers.iter().any(|p| p.timings.get("payload_encrypt").is_some()) {
        report.insert(3, ("payload_encrypt", slowest("payload_encrypt")));
    }
    report
}

pub fn simulate(config_path: &Path, inputs: &[PathBuf], output: &Path, seed: Option<&str>) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let n = cfg.session.n as usize;
    if inputs.len() != n {
        return Err(CliError::usage(format!("{} inputs given, config has {n} providers", inputs.len())));
    }
    let seed = seed
        .map(|s| hex::decode(s).map_err(|e| CliError::usage(format!("seed must be hex: {e}"))))
        .transpose()?;
    let tables = inputs
        .iter()
        .map(|p| csvio::read_input(p))
        .collect::<Result<Vec<_>, _>>()?;
    for (me, (table, path)) in cfg.session.providers().zip(tables.iter().zip(inputs)) {
        check_columns(&cfg, me, table, path)?;
    }

    let sim = Simulation {
        cfg: cfg.session,
        mode: cfg.mode,
        inputs: tables.iter().map(|t| t.records.clone()).collect(),
        thresholds: cfg.session.providers().filter_map(|p| cfg.thresholds.get(&p).copied()).collect(),
        pad_bucket: cfg.pad_bucket,
        timeout: cfg.timeout,
        seed,
    };
    let start = Instant::now();
    let run = run_in_process(&sim).map_err(CliError::from_core)?;
    let total = start.elapsed();

    for (phase, d) in phase_report(&run) {
        println!("phase {phase:<16} {:>10.4} s", d.as_secs_f64());
    }
    println!("total {:>27.4} s", total.as_secs_f64());
    write_outputs(&cfg, &run.collector, output, &declared_columns(&cfg, Some(&tables)))?;
    csvio::write_bytes_report(&csvio::bytes_report_path(output), &run.meter.edges())
}

pub struct BenchArgs {
    pub m_exponents: Vec<u32>,
    pub n: Vec<u16>,
    pub kappa: u32,
    pub mode: String,
    pub repeats: u32,
    pub allow_large: bool,
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchCell {
    pub m: usize,
    pub n: u16,
    pub kappa: u32,
    pub runtime_s_mean: f64,
    pub runtime_s_rsd: f64,
    pub bytes: BTreeMap<String, u64>,
}

#[derive(Serialize)]
struct BenchReport<'a> {
    cells: &'a [BenchCell],
}

/// Synthetic full-size inputs sharing `m / 16` identifiers.
pub fn bench_inputs(n: u16, m: usize, payload_len: usize) -> Vec<Vec<Record>> {
    let common = m / 16;
    let filler = "x".repeat(payload_len);
    (1..=n)
        .map(|i| {
            (0..m)
                .map(|k| {
                    let id = if k < common { format!("c{k}") } else { format!("p{i}-{k}") };
                    Record::new(id, vec![filler.clone()]).expect("nonempty id")
                })
                .collect()
        })
        .collect()
}

/// Runs one grid cell `repeats` times over the in-process transport.
pub fn bench_cell(n: u16, m: usize, params: SecurityParams, mode: Mode, repeats: u32) -> Result<BenchCell, CliError> {
    let cfg = SessionConfig::new(SessionId([0x5b; 16]), n, m, params).map_err(CliError::from_core)?;
    let sim = Simulation {
        cfg,
        mode,
        inputs: bench_inputs(n, m, 64),
        thresholds: vec![1; n as usize],
        pad_bucket: DEFAULT_PAD_BUCKET,
        timeout: DEFAULT_TIMEOUT,
        seed: Some(format!("bench-{m}-{n}").into_bytes()),
    };
    let mut times = Vec::with_capacity(repeats as usize);
    let mut bytes = BTreeMap::new();
    for _ in 0..repeats {
        let start = Instant::now();
        let run = run_in_process(&sim).map_err(CliError::from_core)?;
        times.push(start.elapsed().as_secs_f64());
        bytes = run.meter.edges().into_iter().map(|e| (e.label(), e.bytes)).collect();
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let rsd = if times.len() > 1 && mean > 0.0 {
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
        var.sqrt() / mean
    } else {
        0.0
    };
    Ok(BenchCell {
        m,
        n,
        kappa: params.kappa.bits() as u32,
        runtime_s_mean: mean,
        runtime_s_rsd: rsd,
        bytes,
    })
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let params = match args.kappa {
        128 => SecurityParams::K128_L40,
        256 => SecurityParams::K256_L80,
        k => return Err(CliError::usage(format!("kappa must be 128 or 256, got {k}"))),
    };
    let mode: Mode = args.mode.parse().map_err(CliError::from_core)?;
    if args.repeats == 0 {
        return Err(CliError::usage("repeats must be at least 1"));
    }
    for &e in &args.m_exponents {
        if e < 4 || e > 30 || (e > 20 && !args.allow_large) {
            return Err(CliError::usage(format!(
                "m = 2^{e} is out of range (2^4..=2^20, or up to 2^30 with --unsafe)"
            )));
        }
    }
    if let Some(&n) = args.n.iter().find(|&&n| !(2..=64).contains(&n)) {
        return Err(CliError::usage(format!("n = {n} is out of range 2..=64")));
    }

    let mut cells = Vec::new();
    println!("{:>9} {:>3} {:>5} {:>12} {:>7} {:>14} {:>14}", "m", "n", "kappa", "mean_s", "rsd", "P1->P2", "P1->C");
    for &e in &args.m_exponents {
        for &n in &args.n {
            let cell = bench_cell(n, 1usize << e, params, mode, args.repeats)?;
            println!(
                "{:>9} {:>3} {:>5} {:>12.4} {:>7.3} {:>14} {:>14}",
                cell.m,
                cell.n,
                cell.kappa,
                cell.runtime_s_mean,
                cell.runtime_s_rsd,
                cell.bytes.get("P1->P2").copied().unwrap_or(0),
                cell.bytes.get("P1->C").copied().unwrap_or(0)
            );
            cells.push(cell);
        }
    }
    let json = serde_json::to_string_pretty(&BenchReport { cells: &cells }).expect("serializable");
    match &args.json {
        Some(path) => fs::write(path, json + "\n")
            .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    Ok(())
}

//! Command-line front end: single runs, the two jitter tables, and parameter sweeps.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{self, EngineError};
use crate::metrics::{MetricsReport, ThroughputWindow, CSV_COLUMNS};
use crate::model::ScenarioConfig;
use crate::scenario::{self, ScenarioError};
use crate::topology::{BufferMode, TopologyError};
use crate::traffic::{reading_levels, SourceSelection};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_CONNECTIVITY: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "wsn-dejitter", version, about = "Layered de-jitter buffering in multi-hop sensor networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write trace, metrics and topology into a directory.
    Run {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Gzip the event trace.
        #[arg(long)]
        trace_gz: bool,
        #[arg(long, value_enum, default_value_t = WindowArg::Total)]
        throughput_window: WindowArg,
        /// Also write the per-packet ledger and delay decomposition.
        #[arg(long)]
        ledger: bool,
    },
    /// Reproduce the jitter table without (2) or with (3) relay buffers.
    Table {
        #[arg(value_parser = clap::value_parser!(u8).range(2..=3))]
        which: u8,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sweep one scenario key over a list of values.
    Sweep {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    Total,
    LastDelivery,
}

impl From<WindowArg> for ThroughputWindow {
    fn from(w: WindowArg) -> Self {
        match w {
            WindowArg::Total => ThroughputWindow::Total,
            WindowArg::LastDelivery => ThroughputWindow::LastDelivery,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Spec(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Engine(EngineError::Topology(TopologyError::ConnectivityUnachievable { .. })) => {
                EXIT_CONNECTIVITY
            }
            _ => EXIT_INPUT,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn csv_err(context: &str, e: csv::Error) -> CliError {
    CliError::Io { context: context.into(), source: e.into() }
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run { scenario, out, trace_gz, throughput_window, ledger } => {
            cmd_run(&scenario, &out, &RunFlags { trace_gz, window: throughput_window.into(), ledger }).map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
        }
        Command::Table { which, out } => cmd_table(which, &out).map(|v| println!("{v}")),
        Command::Sweep { spec, out, jobs } => {
            cmd_sweep(&spec, &out, jobs).map(|n| println!("{n} sweep points written to {}", out.display()))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunFlags {
    pub trace_gz: bool,
    pub window: ThroughputWindow,
    pub ledger: bool,
}

/// Runs one scenario file; returns the paths written.
pub fn cmd_run(scenario_path: &Path, out_dir: &Path, flags: &RunFlags) -> Result<Vec<PathBuf>, CliError> {
    let cfg = scenario::load(scenario_path)?;
    let trace = engine::run(&cfg)?;
    let report = MetricsReport::from_trace(&trace, flags.window)?;

    fs::create_dir_all(out_dir).map_err(io_err(format!("cannot create {}", out_dir.display())))?;
    let trace_path = out_dir.join(if flags.trace_gz { "trace.txt.gz" } else { "trace.txt" });
    trace.save(&trace_path, flags.trace_gz).map_err(io_err(format!("cannot write {}", trace_path.display())))?;

    let metrics_path = out_dir.join("metrics.txt");
    fs::write(&metrics_path, report.to_kv()).map_err(io_err(format!("cannot write {}", metrics_path.display())))?;

    let topo_path = out_dir.join("topology.csv");
    let f = File::create(&topo_path).map_err(io_err(format!("cannot write {}", topo_path.display())))?;
    trace.topology.write_csv(BufWriter::new(f)).map_err(|e| csv_err("topology.csv", e))?;

    let mut written = vec![trace_path, metrics_path, topo_path];
    if flags.ledger {
        let ledger_path = out_dir.join("packets.csv");
        let f = File::create(&ledger_path).map_err(io_err(format!("cannot write {}", ledger_path.display())))?;
        crate::traffic::write_ledger(&trace.packets, BufWriter::new(f)).map_err(|e| csv_err("packets.csv", e))?;
        let delay_path = out_dir.join("delays.csv");
        let f = File::create(&delay_path).map_err(io_err(format!("cannot write {}", delay_path.display())))?;
        report.write_decomposition_csv(BufWriter::new(f)).map_err(|e| csv_err("delays.csv", e))?;
        written.push(ledger_path);
        written.push(delay_path);
    }
    Ok(written)
}

/// Reading period of the table scenario.
pub const TABLE_INTERVAL_US: u64 = 50_000;
/// Nominal packetization time of one reading.
pub const TABLE_BASE_TP_US: u64 = 30_000;
/// Per-reading decrease of the nominal packetization time.
pub const TABLE_TP_DRIFT_US: u64 = 400;
/// Extra packetization time of every fifth reading.
pub const TABLE_SPIKE_US: u64 = 15_625;
pub const TABLE_MAX_PACKETS: u64 = 60;

/// Packetization time of reading `k` in the table scenario.
pub fn table_tp_us(k: u64) -> u64 {
    if k % 5 == 4 {
        TABLE_BASE_TP_US + TABLE_SPIKE_US
    } else {
        TABLE_BASE_TP_US - TABLE_TP_DRIFT_US * k
    }
}

/// Multi-hop scenario behind both tables: default deployment, the deepest node
/// sends one reading per period whose packetization time drifts and spikes.
pub fn table_scenario(buffered: bool, packets: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    let size = cfg.packet_size_bytes;
    let bits = cfg.packet_bits();
    let t = &mut cfg.traffic;
    t.source_ids = SourceSelection::Deepest;
    t.cbr_out_interval_us = TABLE_INTERVAL_US;
    t.packets_per_source = packets;
    t.high_priority_fraction = 0.0;
    t.lifetime_budget_us = 10_000_000;
    t.shape_at_source = false;
    t.vbr_rate_levels = (0..TABLE_MAX_PACKETS.max(packets))
        .flat_map(|k| reading_levels(size, table_tp_us(k), TABLE_INTERVAL_US))
        .collect();
    t.mean_bit_rate_bps = bits * 1_000_000 / TABLE_INTERVAL_US;
    cfg.sink_playout_delay_us = 0;
    cfg.sim_duration_us = (packets + 20) * TABLE_INTERVAL_US;
    if !buffered {
        cfg.buffer_policy.mode = BufferMode::None;
    }
    cfg
}

pub fn table_packet_counts(which: u8) -> Vec<u64> {
    match which {
        2 => (1..=6).map(|i| i * 10).collect(),
        _ => (1..=5).map(|i| i * 10).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub packet_count: u64,
    pub mean_delay_ms: f64,
    pub jitter_ms: f64,
    pub report: MetricsReport,
}

pub fn table_rows(which: u8) -> Result<Vec<TableRow>, CliError> {
    table_packet_counts(which)
        .into_par_iter()
        .map(|n| {
            let trace = engine::run(&table_scenario(which == 3, n))?;
            let report = MetricsReport::from_trace(&trace, ThroughputWindow::Total)?;
            let mean = report.mean_end_to_end_delay_us.ok_or(crate::metrics::MetricsError::NoDeliveries)?;
            let jitter = report.jitter.ok_or(crate::metrics::MetricsError::NoDeliveries)?;
            Ok(TableRow { packet_count: n, mean_delay_ms: mean / 1000.0, jitter_ms: jitter.mad_us / 1000.0, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub which: u8,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "table {}: {} ({})", self.which, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// Table 3 requires a spread within 10% of the mean jitter; table 2 requires
/// strictly increasing jitter.
pub fn table_verdict(which: u8, rows: &[TableRow]) -> Verdict {
    let j: Vec<f64> = rows.iter().map(|r| r.jitter_ms).collect();
    if which == 3 {
        let max = j.iter().cloned().fold(f64::MIN, f64::max);
        let min = j.iter().cloned().fold(f64::MAX, f64::min);
        let mean = j.iter().sum::<f64>() / j.len().max(1) as f64;
        Verdict {
            which,
            pass: !j.is_empty() && max - min <= 0.1 * mean,
            detail: format!("jitter spread {:.3} ms, 10% of mean {:.3} ms", max - min, 0.1 * mean),
        }
    } else {
        let increasing = j.windows(2).all(|w| w[1] > w[0]);
        Verdict {
            which,
            pass: !j.is_empty() && increasing,
            detail: format!("jitter ms {}", j.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" < ")),
        }
    }
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["packet_count", "mean_delay_ms", "jitter_ms"])?;
    for r in rows {
        w.write_record([r.packet_count.to_string(), format!("{:.3}", r.mean_delay_ms), format!("{:.3}", r.jitter_ms)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_table(which: u8, out_csv: &Path) -> Result<Verdict, CliError> {
    if !(2..=3).contains(&which) {
        return Err(CliError::Spec(format!("no table {which}; expected 2 or 3")));
    }
    let rows = table_rows(which)?;
    let f = File::create(out_csv).map_err(io_err(format!("cannot write {}", out_csv.display())))?;
    write_table_csv(&rows, BufWriter::new(f)).map_err(|e| csv_err("table csv", e))?;
    Ok(table_verdict(which, &rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedPolicy {
    #[default]
    Fixed,
    /// Point `i` uses `rng_seed + i`.
    Incremented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    pub key: &'static str,
    pub values: Vec<String>,
    pub seed_policy: SeedPolicy,
}

/// Sweep files are `key = value` lines: `base` (scenario path, relative to the
/// sweep file), `key`, `values` (comma separated, or `;` separated when the
/// values themselves contain commas) and optional `seed_policy`.
pub fn parse_sweep(text: &str, dir: &Path) -> Result<SweepSpec, CliError> {
    let (mut base, mut key, mut values, mut seed_policy) = (None, None, None, SeedPolicy::Fixed);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Spec(format!("sweep line {}: expected `key = value`", i + 1)))?;
        let v = v.trim();
        match k.trim() {
            "base" => base = Some(v.to_string()),
            "key" => key = Some(v.to_string()),
            "values" => values = Some(v.to_string()),
            "seed_policy" => {
                seed_policy = match v {
                    "fixed" => SeedPolicy::Fixed,
                    "incremented" => SeedPolicy::Incremented,
                    _ => return Err(CliError::Spec(format!("seed_policy must be fixed or incremented, got `{v}`"))),
                }
            }
            other => return Err(CliError::Spec(format!("unknown sweep key `{other}`"))),
        }
    }
    let key = key.ok_or_else(|| CliError::Spec("sweep spec has no `key`".into()))?;
    let canon = scenario::canonical_key(&key).ok_or_else(|| CliError::Spec(format!("unknown scenario key `{key}`")))?;
    let base = match base {
        Some(p) => scenario::load(&dir.join(p))?,
        None => ScenarioConfig::default(),
    };
    let values = values.unwrap_or_default();
    let sep = if values.contains(';') { ';' } else { ',' };
    let values: Vec<String> = values.split(sep).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    Ok(SweepSpec { base, key: canon, values, seed_policy })
}

pub fn load_sweep(path: &Path) -> Result<SweepSpec, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(format!("cannot read {}", path.display())))?;
    parse_sweep(&text, path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub outcome: Result<MetricsReport, String>,
}

fn sweep_point(spec: &SweepSpec, i: usize, value: &str) -> SweepRow {
    let mut cfg = spec.base.clone();
    if spec.seed_policy == SeedPolicy::Incremented {
        cfg.rng_seed = cfg.rng_seed.wrapping_add(i as u64);
    }
    let seed = cfg.rng_seed;
    let outcome = scenario::set_key(&mut cfg, spec.key, value)
        .map_err(|e| e.to_string())
        .and_then(|_| engine::run(&cfg).map_err(|e| e.to_string()))
        .and_then(|t| MetricsReport::from_trace(&t, ThroughputWindow::Total).map_err(|e| e.to_string()));
    SweepRow { value: value.to_string(), seed, outcome }
}

/// Runs every point; rows come back in spec order.
pub fn run_sweep(spec: &SweepSpec, jobs: Option<usize>) -> Vec<SweepRow> {
    let work = || spec.values.par_iter().enumerate().map(|(i, v)| sweep_point(spec, i, v)).collect();
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        },
        None => work(),
    }
}

pub fn write_sweep_csv<W: Write>(key: &str, rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![key.to_string(), "rng_seed".into(), "status".into()];
    header.extend(CSV_COLUMNS.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.value.clone(), r.seed.to_string()];
        match &r.outcome {
            Ok(m) => {
                rec.push("ok".into());
                rec.extend(m.csv_values());
            }
            Err(e) => {
                rec.push(format!("error: {e}"));
                rec.extend(CSV_COLUMNS.iter().map(|_| String::new()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(spec_path: &Path, out_csv: &Path, jobs: Option<usize>) -> Result<usize, CliError> {
    let spec = load_sweep(spec_path)?;
    let rows = run_sweep(&spec, jobs);
    let f = File::create(out_csv).map_err(io_err(format!("cannot write {}", out_csv.display())))?;
    write_sweep_csv(spec.key, &rows, BufWriter::new(f)).map_err(|e| csv_err("sweep csv", e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_tp_schedule() {
        assert_eq!(table_tp_us(0), 30_000);
        assert_eq!(table_tp_us(3), 28_800);
        assert_eq!(table_tp_us(4), 45_625);
        assert_eq!(table_tp_us(59), 45_625);
        assert_eq!(table_tp_us(58), 30_000 - 400 * 58);
    }

    #[test]
    fn table_scenarios_validate() {
        for n in table_packet_counts(2) {
            assert!(crate::model::validate(&table_scenario(false, n)).is_empty());
            assert!(crate::model::validate(&table_scenario(true, n)).is_empty());
        }
    }

    #[test]
    fn sweep_spec_parsing() {
        let spec =
            parse_sweep("key = packets_per_source\nvalues = 10, 20\nseed_policy = incremented\n", Path::new("."))
                .unwrap();
        assert_eq!(spec.key, "traffic.packets_per_source");
        assert_eq!(spec.values, vec!["10", "20"]);
        assert_eq!(spec.seed_policy, SeedPolicy::Incremented);

        let spec = parse_sweep("key = traffic.source_ids\nvalues = 1,2; 3\n", Path::new(".")).unwrap();
        assert_eq!(spec.values, vec!["1,2", "3"]);

        let err = parse_sweep("key = packets_per_sauce\nvalues = 1\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("packets_per_sauce"));
        assert_eq!(err.exit_code(), EXIT_INPUT);
    }

    #[test]
    fn bad_sweep_value_is_recorded_not_fatal() {
        let spec = SweepSpec {
            base: ScenarioConfig { node_count: 10, area_m2: 10_000.0, sim_duration_us: 200_000, ..Default::default() },
            key: "traffic.packets_per_source",
            values: vec!["2".into(), "lots".into()],
            seed_policy: SeedPolicy::Fixed,
        };
        let rows = run_sweep(&spec, Some(2));
        assert!(rows[0].outcome.is_ok());
        assert!(rows[1].outcome.is_err());
        let mut buf = Vec::new();
        write_sweep_csv(spec.key, &rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().contains("error"));
        assert!(text.ends_with('\n'));
    }
}

//! Experiment driver: configuration, repeated PHOLD runs, metrics and CSV.
//!
//! The configuration file is flat `key = value` text with `#` comments.
//! Node placement for the TCP backend is given by lines of the form
//! `node <name> <host:port> <first>..<end>` and an optional
//! `controller <name>` (default: the first node).

use std::fmt::Write as _;
use std::io;
use std::net::TcpListener;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::info;
use thiserror::Error;

use crate::executor::{run_node, NodeOutcome, NodeSettings, RunError};
use crate::gvt::DEFAULT_GVT_PERIOD;
use crate::messages::{LpId, LpSummary, Timestamp};
use crate::oracle::{committed_trace, TraceEntry};
use crate::phold::{Phold, PholdConfig, PholdSummary, RngMode};
use crate::transport::{
    Endpoint, InProcessTransport, TcpOptions, TcpTransport, Topology, TransportError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: bad value for {key}: {value}")]
    Value {
        line: usize,
        key: String,
        value: String,
    },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    InProcess,
    Tcp,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(Backend::InProcess),
            "tcp" => Ok(Backend::Tcp),
            other => Err(format!("unknown backend {other} (expected inproc or tcp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub phold: PholdConfig,
    pub gvt_period: Duration,
    pub repetitions: u32,
    /// Node placement for TCP runs. One node per LP on loopback if absent.
    pub topology: Option<Topology>,
    pub tcp: TcpOptions,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phold: PholdConfig::default(),
            gvt_period: DEFAULT_GVT_PERIOD,
            repetitions: 1,
            topology: None,
            tcp: TcpOptions::default(),
            output: None,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_seconds(line: usize, key: &str, value: &str) -> Result<Duration, ConfigError> {
    let secs: f64 = parse_value(line, key, value)?;
    Duration::try_from_secs_f64(secs).map_err(|_| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut nodes = Vec::new();
        let mut controller = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some((key, value)) = content.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                let p = &mut cfg.phold;
                match key {
                    "seed" => p.base_seed = parse_value(line, key, value)?,
                    "lps" | "L" => p.lps = parse_value(line, key, value)?,
                    "entities" | "E" => p.entities = parse_value(line, key, value)?,
                    "rho" => p.rho = parse_value(line, key, value)?,
                    "workload" => p.workload = parse_value(line, key, value)?,
                    "mean_increment" => p.mean_increment = parse_value(line, key, value)?,
                    "end_time" => p.end_time = parse_value(line, key, value)?,
                    "rng_mode" => {
                        p.rng_mode = match value {
                            "entity" => RngMode::PerEntity,
                            "lp" => RngMode::PerLp,
                            _ => {
                                return Err(ConfigError::Value {
                                    line,
                                    key: key.into(),
                                    value: value.into(),
                                })
                            }
                        }
                    }
                    "gvt_period" => cfg.gvt_period = parse_seconds(line, key, value)?,
                    "repetitions" => cfg.repetitions = parse_value(line, key, value)?,
                    "connect_attempts" => cfg.tcp.connect_attempts = parse_value(line, key, value)?,
                    "connect_backoff" => cfg.tcp.backoff = parse_seconds(line, key, value)?,
                    "accept_timeout" => cfg.tcp.accept_timeout = parse_seconds(line, key, value)?,
                    "output" => cfg.output = Some(PathBuf::from(value)),
                    _ => {
                        return Err(ConfigError::UnknownKey {
                            line,
                            key: key.into(),
                        })
                    }
                }
                continue;
            }
            let words: Vec<_> = content.split_whitespace().collect();
            match words.as_slice() {
                ["node", name, addr, range] => {
                    let (a, b) = range.split_once("..").ok_or_else(|| ConfigError::Syntax {
                        line,
                        msg: format!("LP range {range} is not <first>..<end>"),
                    })?;
                    let first: u32 = parse_value(line, "node range", a)?;
                    let end: u32 = parse_value(line, "node range", b)?;
                    nodes.push(Endpoint {
                        name: name.to_string(),
                        addr: addr.to_string(),
                        lps: first..end,
                    });
                }
                ["controller", name] => controller = Some((line, name.to_string())),
                _ => {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!(
                            "expected `key = value`, `node ...` or `controller ...`: {content}"
                        ),
                    })
                }
            }
        }
        if !nodes.is_empty() {
            let controller = match controller {
                Some((line, name)) => {
                    nodes
                        .iter()
                        .position(|n| n.name == name)
                        .ok_or(ConfigError::Syntax {
                            line,
                            msg: format!("controller {name} is not a node"),
                        })?
                }
                None => 0,
            };
            cfg.topology = Some(Topology { nodes, controller });
        } else if let Some((line, _)) = controller {
            return Err(ConfigError::Syntax {
                line,
                msg: "controller given without nodes".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.phold
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid(
                "repetitions must be at least 1".into(),
            ));
        }
        if let Some(t) = &self.topology {
            t.validate(self.phold.lps)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    fn settings(&self, record_trace: bool) -> NodeSettings {
        let mut s = NodeSettings::new(self.phold.end_timestamp(), self.gvt_period);
        s.lp.record_trace = record_trace;
        s
    }
}

/// Measurements of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run: u32,
    pub lps: u32,
    pub entities: u32,
    pub wall_clock_seconds: f64,
    pub total_rollbacks: u64,
    pub per_lp_rollbacks: Vec<u64>,
    pub events_committed: u64,
    pub events_processed: u64,
    pub remote_sends: u64,
    /// Largest history length reached by any LP.
    pub peak_history: u64,
    pub gvt_trace: Vec<Timestamp>,
}

impl RunMetrics {
    fn from_summaries<'a>(
        run: u32,
        cfg: &PholdConfig,
        wall: Duration,
        summaries: impl IntoIterator<Item = &'a LpSummary>,
        gvt_trace: Vec<Timestamp>,
    ) -> Self {
        let summaries: Vec<_> = summaries.into_iter().collect();
        RunMetrics {
            run,
            lps: cfg.lps,
            entities: cfg.entities,
            wall_clock_seconds: wall.as_secs_f64(),
            total_rollbacks: summaries.iter().map(|s| s.rollbacks).sum(),
            per_lp_rollbacks: summaries.iter().map(|s| s.rollbacks).collect(),
            events_committed: summaries.iter().map(|s| s.events_committed).sum(),
            events_processed: summaries.iter().map(|s| s.events_processed).sum(),
            remote_sends: summaries.iter().map(|s| s.remote_sends).sum(),
            peak_history: summaries.iter().map(|s| s.peak_history).max().unwrap_or(0),
            gvt_trace,
        }
    }
}

/// One run with its committed trace (empty unless requested).
#[derive(Debug)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceEntry>,
    pub model: Vec<PholdSummary>,
}

fn report_from(
    run: u32,
    cfg: &RunConfig,
    wall: Duration,
    outcomes: Vec<NodeOutcome<PholdSummary>>,
) -> Result<RunReport, RunError> {
    let mut lps = Vec::new();
    let mut controller = None;
    for o in outcomes {
        lps.extend(o.lps);
        controller = controller.or(o.controller);
    }
    let controller =
        controller.ok_or_else(|| RunError::Config("no node hosted the controller".into()))?;
    lps.sort_by_key(|o| o.lp);
    let metrics = RunMetrics::from_summaries(
        run,
        &cfg.phold,
        wall,
        controller.summaries.values(),
        controller.gvt_trace,
    );
    let model = lps.iter().map(|o| o.model_summary).collect();
    let trace = committed_trace(lps.into_iter().map(|o| o.trace));
    Ok(RunReport {
        metrics,
        trace,
        model,
    })
}

/// One PHOLD run with every LP in this process.
pub fn run_once(
    cfg: &RunConfig,
    backend: Backend,
    run: u32,
    record_trace: bool,
) -> Result<RunReport, RunError> {
    cfg.validate()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let model =
        Arc::new(Phold::new(cfg.phold.clone()).map_err(|e| RunError::Config(e.to_string()))?);
    let map = cfg.phold.entity_map();
    let settings = cfg.settings(record_trace);
    let lps = cfg.phold.lps;
    match backend {
        Backend::InProcess => {
            let transport = InProcessTransport::new(lps);
            let start = Instant::now();
            let outcome = run_node(model, map, 0..lps, true, &transport, settings)?;
            report_from(run, cfg, start.elapsed(), vec![outcome])
        }
        Backend::Tcp => {
            let (topology, listeners) = bind_topology(cfg.topology.clone(), lps)?;
            let start = Instant::now();
            let outcomes = thread::scope(|scope| {
                let handles: Vec<_> = listeners
                    .into_iter()
                    .enumerate()
                    .map(|(i, listener)| {
                        let topology = topology.clone();
                        let model = Arc::clone(&model);
                        let tcp = cfg.tcp;
                        scope.spawn(move || -> Result<_, RunError> {
                            let node = topology.nodes[i].clone();
                            let host_controller = topology.controller == i;
                            let transport =
                                TcpTransport::with_listener(topology, &node.name, listener, tcp)?;
                            let result = run_node(
                                model,
                                map,
                                node.lps,
                                host_controller,
                                &transport,
                                settings,
                            );
                            transport.close();
                            result
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(RunError::Panicked("node".into())))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })?;
            report_from(run, cfg, start.elapsed(), outcomes)
        }
    }
}

/// Binds every node's listener up front so peers can dial immediately.
fn bind_topology(
    topology: Option<Topology>,
    lps: u32,
) -> Result<(Topology, Vec<TcpListener>), RunError> {
    let io_err = |source| {
        RunError::Transport(TransportError::Io {
            peer: "listener".into(),
            source,
        })
    };
    let mut topology = topology.unwrap_or_else(|| Topology {
        nodes: (0..lps)
            .map(|lp| Endpoint {
                name: format!("lp{lp}"),
                addr: "127.0.0.1:0".into(),
                lps: lp..lp + 1,
            })
            .collect(),
        controller: 0,
    });
    let mut listeners = Vec::new();
    for node in &mut topology.nodes {
        let listener = TcpListener::bind(&node.addr).map_err(io_err)?;
        node.addr = listener.local_addr().map_err(io_err)?.to_string();
        listeners.push(listener);
    }
    Ok((topology, listeners))
}

/// Runs only the named node of a TCP topology; the other nodes are separate
/// processes. Metrics are complete only on the controller's node.
pub fn run_tcp_node(cfg: &RunConfig, node: &str) -> Result<NodeRun, RunError> {
    cfg.validate()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let topology = cfg
        .topology
        .clone()
        .ok_or_else(|| RunError::Config("the TCP backend with --node needs node lines".into()))?;
    let index = topology
        .node_index(node)
        .ok_or_else(|| RunError::Config(format!("node {node} is not in the topology")))?;
    let model =
        Arc::new(Phold::new(cfg.phold.clone()).map_err(|e| RunError::Config(e.to_string()))?);
    let host_controller = topology.controller == index;
    let lps = topology.nodes[index].lps.clone();
    let transport = TcpTransport::connect(topology, node, cfg.tcp)?;
    info!("node {node} connected, running LPs {lps:?}");
    let start = Instant::now();
    let result = run_node(
        model,
        cfg.phold.entity_map(),
        lps,
        host_controller,
        &transport,
        cfg.settings(false),
    );
    let wall = start.elapsed();
    transport.close();
    let outcome = result?;
    let metrics = outcome.controller.map(|c| {
        RunMetrics::from_summaries(1, &cfg.phold, wall, c.summaries.values(), c.gvt_trace)
    });
    Ok(NodeRun {
        local: outcome.lps.iter().map(|o| (o.lp, o.summary)).collect(),
        metrics,
    })
}

#[derive(Debug)]
pub struct NodeRun {
    pub local: Vec<(LpId, LpSummary)>,
    pub metrics: Option<RunMetrics>,
}

/// All repetitions of one configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub runs: Vec<RunMetrics>,
}

impl Experiment {
    pub fn mean_wall_clock(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.wall_clock_seconds))
    }

    pub fn mean_rollbacks(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.total_rollbacks as f64))
    }

    /// Writes one row per run and a final `mean` row.
    pub fn write_csv(&self, out: impl io::Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "run",
            "lps",
            "entities",
            "rho",
            "workload",
            "gvt_period",
            "wall_clock_seconds",
            "total_rollbacks",
            "events_committed",
            "events_processed",
            "remote_sends",
            "peak_history",
            "gvt_rounds",
            "final_gvt",
            "per_lp_rollbacks",
        ])?;
        let p = &self.config.phold;
        let fixed = [
            p.lps.to_string(),
            p.entities.to_string(),
            p.rho.to_string(),
            p.workload.to_string(),
            self.config.gvt_period.as_secs_f64().to_string(),
        ];
        for r in &self.runs {
            let mut row = vec![r.run.to_string()];
            row.extend(fixed.iter().cloned());
            row.extend([
                format!("{:.6}", r.wall_clock_seconds),
                r.total_rollbacks.to_string(),
                r.events_committed.to_string(),
                r.events_processed.to_string(),
                r.remote_sends.to_string(),
                r.peak_history.to_string(),
                r.gvt_trace.len().to_string(),
                r.gvt_trace.last().map_or(0.0, |t| t.value()).to_string(),
                join(r.per_lp_rollbacks.iter()),
            ]);
            w.write_record(&row)?;
        }
        let m = |f: fn(&RunMetrics) -> f64| mean(self.runs.iter().map(f));
        let per_lp: Vec<f64> = (0..p.lps as usize)
            .map(|i| {
                mean(
                    self.runs
                        .iter()
                        .map(|r| r.per_lp_rollbacks.get(i).copied().unwrap_or(0) as f64),
                )
            })
            .collect();
        let mut row = vec!["mean".to_string()];
        row.extend(fixed.iter().cloned());
        row.extend([
            format!("{:.6}", self.mean_wall_clock()),
            m(|r| r.total_rollbacks as f64).to_string(),
            m(|r| r.events_committed as f64).to_string(),
            m(|r| r.events_processed as f64).to_string(),
            m(|r| r.remote_sends as f64).to_string(),
            m(|r| r.peak_history as f64).to_string(),
            m(|r| r.gvt_trace.len() as f64).to_string(),
            m(|r| r.gvt_trace.last().map_or(0.0, |t| t.value())).to_string(),
            join(per_lp.iter()),
        ]);
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn join<T: ToString>(values: impl Iterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, v) in values.enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}", v.to_string());
    }
    s
}

/// Runs `cfg.repetitions` runs with every LP in this process.
pub fn run_experiment(cfg: &RunConfig, backend: Backend) -> Result<Experiment, RunError> {
    let mut runs = Vec::with_capacity(cfg.repetitions as usize);
    for run in 1..=cfg.repetitions {
        let report = run_once(cfg, backend, run, false)?;
        info!(
            "run {run}/{}: L={} E={} {:.3}s, {} rollbacks",
            cfg.repetitions,
            cfg.phold.lps,
            cfg.phold.entities,
            report.metrics.wall_clock_seconds,
            report.metrics.total_rollbacks
        );
        runs.push(report.metrics);
    }
    Ok(Experiment {
        config: cfg.clone(),
        runs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupRow {
    pub lps: u32,
    pub entities: u32,
    pub mean_wall_clock: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpeedupError {
    #[error("baseline must be a single-LP experiment, got L={0}")]
    MissingBaseline(u32),
    #[error("baseline has no runs")]
    EmptyBaseline,
}

/// `S_L = T_1 / T_L` and `Eff_L = S_L / L` against a single-LP baseline.
/// The baseline itself is the first row.
pub fn speedup_table(
    baseline: &Experiment,
    others: &[Experiment],
) -> Result<Vec<SpeedupRow>, SpeedupError> {
    if baseline.config.phold.lps != 1 {
        return Err(SpeedupError::MissingBaseline(baseline.config.phold.lps));
    }
    if baseline.runs.is_empty() {
        return Err(SpeedupError::EmptyBaseline);
    }
    let t1 = baseline.mean_wall_clock();
    let row = |e: &Experiment| {
        let t = e.mean_wall_clock();
        let lps = e.config.phold.lps;
        let speedup = if e.config.phold.lps == 1 { 1.0 } else { t1 / t };
        SpeedupRow {
            lps,
            entities: e.config.phold.entities,
            mean_wall_clock: t,
            speedup,
            efficiency: speedup / lps as f64,
        }
    };
    Ok(std::iter::once(baseline).chain(others).map(row).collect())
}

pub fn write_speedup_csv(rows: &[SpeedupRow], out: impl io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "lps",
        "entities",
        "mean_wall_clock_seconds",
        "speedup",
        "efficiency",
    ])?;
    for r in rows {
        w.write_record([
            r.lps.to_string(),
            r.entities.to_string(),
            format!("{:.6}", r.mean_wall_clock),
            format!("{:.4}", r.speedup),
            format!("{:.4}", r.efficiency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experiment(lps: u32, walls: &[f64]) -> Experiment {
        let mut config = RunConfig::default();
        config.phold.lps = lps;
        Experiment {
            config,
            runs: walls
                .iter()
                .enumerate()
                .map(|(i, &w)| RunMetrics {
                    run: i as u32 + 1,
                    lps,
                    entities: 840,
                    wall_clock_seconds: w,
                    total_rollbacks: 10 * i as u64,
                    per_lp_rollbacks: vec![0; lps as usize],
                    events_committed: 100,
                    events_processed: 120,
                    remote_sends: 0,
                    peak_history: 7,
                    gvt_trace: vec![Timestamp::new(1000.0).unwrap()],
                })
                .collect(),
        }
    }

    #[test]
    fn parses_full_config() {
        let text = "\
# PHOLD, Table-style parameters
seed = 12345
lps = 4
entities = 840
rho = 0.5
workload = 1000      # FPops per event
mean_increment = 5.0
end_time = 1000
gvt_period = 0.25
repetitions = 30
rng_mode = lp
connect_backoff = 0.1

node a 127.0.0.1:7000 0..2
node b 127.0.0.1:7001 2..4
controller b
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.phold.base_seed, 12345);
        assert_eq!(cfg.phold.lps, 4);
        assert_eq!(cfg.phold.workload, 1000);
        assert_eq!(cfg.phold.rng_mode, RngMode::PerLp);
        assert_eq!(cfg.gvt_period, Duration::from_millis(250));
        assert_eq!(cfg.repetitions, 30);
        assert_eq!(cfg.tcp.backoff, Duration::from_millis(100));
        let topo = cfg.topology.unwrap();
        assert_eq!(topo.nodes.len(), 2);
        assert_eq!(topo.nodes[1].lps, 2..4);
        assert_eq!(topo.controller, 1);
    }

    #[test]
    fn rejects_bad_config() {
        for text in [
            "lps = four",
            "colour = red",
            "just words here",
            "lps = 4\nentities = 840\nnode a 127.0.0.1:1 0..3",
            "node a 127.0.0.1:1 0-1",
            "controller x",
            "repetitions = 0",
            "entities = 10\nlps = 4",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn speedup_arithmetic() {
        let rows = speedup_table(&experiment(1, &[100.0]), &[experiment(4, &[30.0])]).unwrap();
        assert_eq!((rows[0].speedup, rows[0].efficiency), (1.0, 1.0));
        assert!((rows[1].speedup - 3.333).abs() < 1e-3);
        assert!((rows[1].efficiency - 0.833).abs() < 1e-3);

        // superlinear is reported as is
        let rows = speedup_table(&experiment(1, &[100.0]), &[experiment(2, &[40.0])]).unwrap();
        assert_eq!(rows[1].speedup, 2.5);

        assert_eq!(
            speedup_table(&experiment(2, &[1.0]), &[]),
            Err(SpeedupError::MissingBaseline(2))
        );
    }

    #[test]
    fn csv_has_row_per_run_plus_mean() {
        let e = experiment(2, &[1.0, 3.0]);
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("run,lps,entities"));
        assert!(lines[3].starts_with("mean,2,840"));
        assert!(lines[3].contains(",2.000000,5,"));
    }
}

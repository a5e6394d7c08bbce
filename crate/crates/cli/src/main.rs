//! `timewarp` runs PHOLD experiments on the Time Warp engine.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use timewarp_core::oracle::{canonical, run_sequential, write_trace};
use timewarp_core::runner::{run_tcp_node, write_speedup_csv, Experiment};
use timewarp_core::{run_experiment, speedup_table, Backend, Phold, RunConfig};

#[derive(Parser)]
#[command(
    name = "timewarp",
    version,
    about = "Optimistic parallel PHOLD simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write one CSV row per repetition plus a mean row.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "inproc")]
        backend: Backend,
        /// Overrides the `output` key; stdout when neither is given.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this node of the topology; needs `--backend tcp`.
        #[arg(long)]
        node: Option<String>,
    },
    /// Run the sequential reference simulator and write its event trace.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configuration at L=1 and at each listed LP count, then
    /// write speedup and efficiency relative to L=1.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        lps: Vec<u32>,
        #[arg(long, default_value = "inproc")]
        backend: Backend,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(cfg)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(config: &Path, backend: Backend, out: Option<PathBuf>, node: Option<String>) -> Result<()> {
    let cfg = load(config)?;
    let out = out.or_else(|| cfg.output.clone());
    let experiment = match node {
        None => run_experiment(&cfg, backend)?,
        Some(node) => {
            if backend != Backend::Tcp {
                bail!("--node only applies to the tcp backend");
            }
            let mut runs = Vec::new();
            for rep in 1..=cfg.repetitions {
                let result =
                    run_tcp_node(&cfg, &node).with_context(|| format!("node {node}, run {rep}"))?;
                info!("node {node} finished run {rep} with LPs {:?}", result.local);
                if let Some(mut metrics) = result.metrics {
                    metrics.run = rep;
                    runs.push(metrics);
                }
            }
            if runs.is_empty() {
                // only the controller's node sees global metrics
                return Ok(());
            }
            Experiment { config: cfg, runs }
        }
    };
    experiment.write_csv(sink(out.as_deref())?)?;
    Ok(())
}

fn oracle(config: &Path, out: &Path) -> Result<()> {
    let cfg = load(config)?;
    let p = &cfg.phold;
    let model = Phold::new(p.clone())?;
    let trace = canonical(run_sequential(&model, p.entities, p.end_timestamp())?);
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_trace(&mut w, &trace)?;
    w.flush()?;
    info!("{} events written to {}", trace.len(), out.display());
    Ok(())
}

fn sweep(config: &Path, lps: &[u32], backend: Backend, out: Option<PathBuf>) -> Result<()> {
    let cfg = load(config)?;
    let at = |l: u32| -> Result<Experiment> {
        let mut c = cfg.clone();
        c.phold.lps = l;
        c.topology = None;
        c.validate().with_context(|| format!("L={l}"))?;
        Ok(run_experiment(&c, backend)?)
    };
    let baseline = at(1)?;
    let others = lps
        .iter()
        .filter(|&&l| l != 1)
        .map(|&l| at(l))
        .collect::<Result<Vec<_>>>()?;
    let rows = speedup_table(&baseline, &others)?;
    write_speedup_csv(&rows, sink(out.as_deref())?)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            backend,
            out,
            node,
        } => run(&config, backend, out, node),
        Command::Oracle { config, out } => oracle(&config, &out),
        Command::Sweep {
            config,
            lps,
            backend,
            out,
        } => sweep(&config, &lps, backend, out),
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cuedepth::harness::{
    cmd_ablate, cmd_eval, cmd_probe_memory, cmd_synth, cmd_train, gradient_suite, writes_non_increasing, AblationKind,
    AblationSpec, ProbeMode, RunConfig,
};
use cuedepth::train::EvalOptions;

#[derive(Parser)]
#[command(name = "cuedepth", version, about = "Cue-gated monocular depth: synthesis, training, evaluation and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the training and validation sets.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, short)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write its checkpoint and logs.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory written by `synth`.
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and dump metrics and depth images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        /// `train` or `val`.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, short)]
        out: PathBuf,
        /// Number of frames dumped as PNG.
        #[arg(long, default_value_t = 4)]
        pngs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare ablations against a baseline checkpoint.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// `kind` or `kind=value`; repeatable. All kinds when omitted.
        #[arg(long = "ablation", short = 'a')]
        ablations: Vec<String>,
    },
    /// Trace memory reads and writes over one sequence.
    ProbeMemory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Repeat the sequence's first frame this many times.
        #[arg(long, conflicts_with = "blank")]
        repeat: Option<usize>,
        /// Insert a blank frame at this position.
        #[arg(long)]
        blank: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn print_report(name: &str, r: &cuedepth::metrics::MetricReport) {
    println!(
        "{name}: abs_rel {:.4} rmse {:.4} log_rmse {:.4} silog {:.4} d1 {:.3} d2 {:.3} d3 {:.3} edge_f1 {:.3}",
        r.abs_rel, r.rmse, r.log_rmse, r.silog, r.delta1, r.delta2, r.delta3, r.edge_f1
    );
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, force } => {
            let cfg = config.load()?;
            let m = cmd_synth(&cfg, &out, force)?;
            println!(
                "wrote {} training and {} validation scenes to {} (dataset {})",
                cfg.dataset.scenes,
                cfg.validation.scenes,
                out.display(),
                m.dataset_hash.unwrap_or_default()
            );
        }
        Command::Train { config, data, out, resume } => {
            let cfg = config.load()?;
            require(&data, "dataset")?;
            let report = cmd_train(&cfg, &data, &out, resume.as_deref())?;
            if let Some(last) = report.validation.last() {
                print_report(&format!("epoch {}", last.epoch), &last.report);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { checkpoint, data, split, out, pngs, seed } => {
            require(&data, "dataset")?;
            let opts = EvalOptions { seed, ..EvalOptions::default() };
            let ev = cmd_eval(&checkpoint, &data, &split, &out, &opts, pngs)?;
            print_report(&split, &ev.aggregate);
        }
        Command::Ablate { config, baseline, data, out, ablations } => {
            let cfg = config.load()?;
            let specs: Vec<AblationSpec> = if ablations.is_empty() {
                AblationKind::ALL.into_iter().map(AblationSpec::new).collect()
            } else {
                ablations.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
            };
            let (base, rows) = cmd_ablate(&cfg, &data, &baseline, &specs, &out)?;
            print_report("baseline", &base);
            for r in &rows {
                print_report(&r.name, &r.report);
            }
        }
        Command::ProbeMemory { checkpoint, data, split, sequence, repeat, blank, out } => {
            let mode = match (repeat, blank) {
                (Some(n), _) => ProbeMode::Repeat(n),
                (None, Some(at)) => ProbeMode::Blank(at),
                (None, None) => ProbeMode::Plain,
            };
            let rows = cmd_probe_memory(&checkpoint, &data, &split, sequence, mode, &out)?;
            println!(
                "{} frames traced to {}; write magnitude non-increasing: {}",
                rows.len(),
                out.display(),
                writes_non_increasing(&rows, 0.0)
            );
        }
        Command::Gradcheck { seed, tolerance } => {
            let rows = gradient_suite(seed)?;
            let mut failed = 0;
            for r in &rows {
                let ok = r.max_relative_error < tolerance;
                failed += usize::from(!ok);
                println!(
                    "{} {:<40} {:.2e} ({} coords)",
                    if ok { "ok  " } else { "FAIL" },
                    r.name,
                    r.max_relative_error,
                    r.checked
                );
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks above {tolerance:e}", rows.len());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use ilm::harness::{
    aggregate, append_metrics, compare, eval_run, gen_data, heads_series, read_heads_csv, render_report, run_all,
    train_run, write_compare_outputs, write_heads_outputs, CompareReport, ExperimentConfig, HarnessError, RunPaths,
    RunStatus,
};
use ilm::model::read_checkpoint;

#[derive(Parser)]
#[command(name = "ilm", version, about = "Invariant masked language model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the vocabulary and environment files of an experiment.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one run of the manifest. Data must exist under <root>/data.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        grid_point: usize,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        restart: usize,
        /// Output root; defaults to the config's output_dir.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Generate data, train every run, evaluate and write the report.
    RunAll {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Evaluate one run and append its rows to a metrics CSV.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        grid_point: usize,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        restart: usize,
        /// Score this checkpoint instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <root>/metrics.csv.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Pair iLM and eLM rows and write report.json plus panel CSVs and SVGs.
    Compare {
        #[arg(short, long)]
        metrics: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Head distances over a checkpoint series plus MDS of the last one.
    Heads {
        /// Domain label per environment, comma separated, e.g. A,A,B,B.
        #[arg(short, long, value_delimiter = ',')]
        grouping: Vec<String>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Render report.json (and optional heads.csv files) as markdown.
    Report {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        heads: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load(config: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(config).map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = load(&config)?;
            let files = gen_data(&cfg, &out)?;
            info!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Train {
            config,
            grid_point,
            variant,
            restart,
            root,
        } => {
            let cfg = load(&config)?;
            let paths = RunPaths::for_config(&cfg, root.as_deref());
            let entry = train_run(&cfg, &paths, grid_point, &variant, restart)?;
            println!("{}", paths.run(&entry).display());
        }
        Command::RunAll { config, jobs, root } => {
            let cfg = load(&config)?;
            let paths = RunPaths::for_config(&cfg, root.as_deref());
            let outcome = run_all(&cfg, &paths, jobs)?;
            let total = outcome.manifest.entries.len();
            let failed = outcome
                .manifest
                .entries
                .iter()
                .filter(|e| matches!(e.status, RunStatus::Failed { .. }))
                .count();
            if outcome.records.is_empty() {
                return Err(Failure::Run(format!("all {total} runs failed")));
            }
            aggregate(&cfg, &paths)?;
            println!("{}", paths.report().display());
            if failed > 0 {
                return Err(HarnessError::RunsFailed { failed, total }.into());
            }
        }
        Command::Eval {
            config,
            grid_point,
            variant,
            restart,
            checkpoint,
            metrics,
            root,
        } => {
            let cfg = load(&config)?;
            let paths = RunPaths::for_config(&cfg, root.as_deref());
            let rows = eval_run(&cfg, &paths, grid_point, &variant, restart, checkpoint.as_deref())?;
            let target = metrics.unwrap_or_else(|| paths.metrics());
            append_metrics(&target, &rows)?;
            for r in &rows {
                println!("{} {} {} {}", r.experiment, r.variant, r.metric, r.value);
            }
        }
        Command::Compare {
            metrics,
            out,
            seed,
            resamples,
            level,
        } => {
            let report = compare(&metrics, seed, resamples, level)?;
            for u in &report.unmatched {
                warn!("unmatched: {u}");
            }
            write_compare_outputs(&out, &report)?;
            println!("{}", out.join("report.json").display());
        }
        Command::Heads {
            grouping,
            out,
            checkpoints,
        } => {
            let mut models = Vec::new();
            for path in &checkpoints {
                let (model, ckpt) = read_checkpoint(path).map_err(|e| Failure::Run(e.to_string()))?;
                models.push((ckpt.step, model));
            }
            let refs: Vec<_> = models.iter().map(|(s, m)| (*s, m)).collect();
            let series = heads_series(&refs, &grouping)?;
            write_heads_outputs(&out, &series)?;
            for p in &series.points {
                println!("{} {} {}", p.step, p.d_in, p.d_out);
            }
        }
        Command::Report { input, heads, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Failure::Run(format!("{}: {e}", input.display())))?;
            let report: CompareReport =
                serde_json::from_str(&text).map_err(|e| Failure::Run(format!("{}: {e}", input.display())))?;
            let series = heads
                .iter()
                .map(|p| Ok((p.display().to_string(), read_heads_csv(p)?)))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            std::fs::write(&out, render_report(&report, &series))
                .map_err(|e| Failure::Run(format!("{}: {e}", out.display())))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

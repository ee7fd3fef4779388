use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use shadowpipe_core::engine::{self, EngineError};
use shadowpipe_core::ingest::ImageRecord;
use shadowpipe_core::output::{evaluate, read_image_list, read_label_dir, ImageFilter};
use shadowpipe_core::{jsonl, output};
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "shadowpipe", version, about = "Resumable camera-trap labelling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run of the configured stages.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Stop after this stage key.
        #[arg(long)]
        until: Option<String>,
        /// Discard an existing run in the same run directory.
        #[arg(long)]
        force: bool,
    },
    /// Continue a run; without --from, at the first stage not completed.
    Resume {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        until: Option<String>,
    },
    /// Show the state of every stage of a run.
    Status { run_dir: PathBuf },
    /// Score a YOLO label directory against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// IoU thresholds, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        alpha: Vec<f64>,
        /// day, night or keyword=<k>; repeatable, all must match.
        #[arg(long)]
        filter: Vec<ImageFilter>,
        /// Image records (an analysis `records.jsonl`) for filters and
        /// per-condition breakdowns.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the vote API for a run directory.
    Serve {
        #[arg(long = "run")]
        run_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Base seed for per-voter task order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Built-in mock detector speaking the adapter protocol on stdin/stdout.
    MockDetector,
    /// Print the default configuration.
    DefaultConfig,
}

fn load(config: &Path) -> Result<engine::PipelineConfig, EngineError> {
    Ok(engine::load_config(config)?)
}

fn report_run(s: &engine::RunSummary) {
    for r in &s.executed {
        let counts: Vec<String> = r.record_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<16} completed  {}", r.stage_name, counts.join(" "));
    }
    println!("run {} in {}", s.run_id, s.run_dir.display());
}

fn cmd_evaluate(
    pred: &Path,
    truth: &Path,
    alphas: &[f64],
    filters: &[ImageFilter],
    records: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    for &a in alphas {
        if !(a > 0.0 && a <= 1.0) {
            bail!("alpha {a} outside (0, 1]");
        }
    }
    if !filters.is_empty() && records.is_none() {
        bail!("--filter needs --records");
    }
    let images = read_image_list(&pred.join(output::yolo::IMAGE_LIST))?;
    let preds = read_label_dir(pred, Some(&images))?;
    let truths = if truth.join(output::yolo::IMAGE_LIST).exists() {
        read_label_dir(truth, None)?
    } else {
        read_label_dir(truth, Some(&images))?
    };
    let records: Option<BTreeMap<String, ImageRecord>> = records
        .map(|p| -> anyhow::Result<_> {
            let recs: Vec<ImageRecord> = jsonl::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(recs.into_iter().map(|r| (r.image_id.clone(), r)).collect())
        })
        .transpose()?;
    let reports: Vec<_> = alphas.iter().map(|&a| evaluate(&preds, &truths, a, records.as_ref(), filters)).collect();
    for r in &reports {
        let m = &r.metrics;
        println!(
            "alpha {:<5} images {:<5} TP {:<5} FP {:<5} FN {:<5} precision {:.3} recall {:.3} F1 {:.3}",
            r.alpha, r.images, m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1
        );
    }
    if let Some(out) = out {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&reports)?
        };
        std::fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, until, force } => {
            let cfg = load(&config)?;
            report_run(&engine::run(&cfg, until.as_deref(), force)?);
        }
        Command::Resume { config, from, until } => {
            let cfg = load(&config)?;
            report_run(&engine::resume(&cfg, from.as_deref(), until.as_deref())?);
        }
        Command::Status { run_dir } => {
            for line in engine::describe_run(&run_dir)? {
                println!("{line}");
            }
        }
        Command::Evaluate {
            pred,
            truth,
            alpha,
            filter,
            records,
            out,
        } => cmd_evaluate(&pred, &truth, &alpha, &filter, records.as_deref(), out.as_deref())?,
        Command::Serve { run_dir, listen, seed } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(shadowpipe_server::serve(&run_dir, listen, seed))?;
        }
        Command::MockDetector => {
            let stdin = std::io::stdin();
            shadowpipe_core::detect::mock::serve_mock(stdin.lock(), std::io::stdout().lock())?;
        }
        Command::DefaultConfig => print!("{}", engine::DEFAULT_CONFIG),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<EngineError>().map_or(1, EngineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

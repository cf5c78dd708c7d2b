//! `univrse` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tokio::net::TcpListener;

use univrse::alfa::write_label_file;
use univrse::backends::mock::Script;
use univrse::backends::server::{serve, ServerOptions};
use univrse::backends::templates::TemplateRegistry;
use univrse::harness::fixture::{write_vqa_fixture, write_vrg_fixture};
use univrse::harness::run::dataset_name;
use univrse::harness::{calibrate, ingest_dataset, label_dataset, report, run, Backends, HarnessError, RunConfig, Task};

#[derive(Parser)]
#[command(name = "univrse", version, about = "Vision-conditioned hallucination detection for VLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset file and its images.
    IngestCheck {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Produce ALFA labels for every record of a dataset.
    Label {
        #[command(flatten)]
        inputs: Inputs,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the VQA records of a dataset, then write the report.
    RunVqa(RunArgs),
    /// Score the report-generation records of a dataset, then write the report.
    RunVrg(RunArgs),
    /// Choose the flagging threshold from a finished run.
    Calibrate(DirArgs),
    /// Rebuild report.csv and summary.txt from a run directory.
    Report(DirArgs),
    /// Serve a mock script over the chat-completions protocol.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 8089)]
        port: u16,
        /// Answer the first N chat requests with HTTP 503.
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
    },
    /// Write a self-contained scripted demo dataset.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FixtureKind::Vqa)]
        task: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Run directory; an existing one with the same config is resumed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DirArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Override the run's label binarization threshold.
    #[arg(long)]
    binarize_threshold: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Vqa,
    Vrg,
}

fn load(inputs: &Inputs) -> Result<(RunConfig, Backends, Vec<univrse::harness::DatasetRecord>), HarnessError> {
    let cfg = RunConfig::load(&inputs.config)?;
    let backends = Backends::from_config(&cfg)?;
    let data = ingest_dataset(&inputs.dataset)?;
    Ok((cfg, backends, data))
}

async fn run_task(args: &RunArgs, task: Task) -> Result<(), HarnessError> {
    let (cfg, backends, data) = load(&args.inputs)?;
    let name = dataset_name(&cfg, &args.inputs.dataset);
    let summary = run(&data, &cfg, &backends, &name, &args.out, Some(task)).await?;
    eprintln!(
        "processed {} records ({} failed), skipped {} already done",
        summary.processed, summary.failed, summary.skipped
    );
    let out = report(&args.out, None)?;
    print!("{}", out.summary);
    Ok(())
}

async fn label(inputs: &Inputs, out: &Path) -> Result<(), HarnessError> {
    let (cfg, backends, data) = load(inputs)?;
    backends.probe().await?;
    let labels = label_dataset(&data, cfg.workers, &backends).await;
    for (id, e) in &labels.failures {
        log::error!("record {id}: {e}");
    }
    if labels.entries.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    write_label_file(out, &labels.entries).map_err(|e| HarnessError::Io(e.to_string()))?;
    eprintln!("labeled {} records, {} failed", labels.entries.len(), labels.failures.len());
    Ok(())
}

async fn mock_serve(script: &Path, port: u16, fail_first: usize) -> Result<(), HarnessError> {
    let script = Script::from_file(script).map_err(|e| HarnessError::Config(e.to_string()))?;
    let listener = TcpListener::bind(("127.0.0.1", port))
        .await
        .map_err(|e| HarnessError::Bootstrap(format!("bind port {port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| HarnessError::Bootstrap(e.to_string()))?;
    println!("serving http://{addr}/v1");
    serve(listener, script, &TemplateRegistry::builtin(), &ServerOptions { fail_first })
        .await
        .map_err(|e| HarnessError::Bootstrap(e.to_string()))
}

async fn dispatch(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::IngestCheck { dataset } => {
            let data = ingest_dataset(&dataset)?;
            let vqa = data.iter().filter(|r| r.task == Task::Vqa).count();
            println!("{} records ({vqa} vqa, {} vrg)", data.len(), data.len() - vqa);
            Ok(())
        }
        Command::Label { inputs, out } => label(&inputs, &out).await,
        Command::RunVqa(args) => run_task(&args, Task::Vqa).await,
        Command::RunVrg(args) => run_task(&args, Task::Vrg).await,
        Command::Calibrate(args) => {
            let cal = calibrate(&args.run_dir, args.binarize_threshold)?;
            println!(
                "tau = {:.6} (Youden J {:.6}, n = {}){}",
                cal.calibration.tau,
                cal.calibration.youden_j,
                cal.n,
                if cal.calibration.degenerate { ", degenerate" } else { "" }
            );
            Ok(())
        }
        Command::Report(args) => {
            print!("{}", report(&args.run_dir, args.binarize_threshold)?.summary);
            Ok(())
        }
        Command::MockServe { script, port, fail_first } => mock_serve(&script, port, fail_first).await,
        Command::Fixture { out, task, seed } => {
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::Io(format!("{}: {e}", out.display())))?;
            let fx = match task {
                FixtureKind::Vqa => write_vqa_fixture(&out, seed)?,
                FixtureKind::Vrg => write_vrg_fixture(&out, seed)?,
            };
            println!("{}", fx.dataset.display());
            println!("{}", fx.config_path.display());
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

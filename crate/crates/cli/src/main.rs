use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use scenegate_core::metrics::StreamTag;
use scenegate_core::pipeline::{self, Layout, RunConfig, Stage, OUT_ENV};
use scenegate_core::scenegen::Manifest;
use scenegate_core::kinematics::bin_label;
use scenegate_core::{BinnedReport, Error};

#[derive(Parser)]
#[command(name = "scenegate", version, about = "Map-uncertainty trajectory prediction with a scenario gate")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Generate,
    /// Train one pipeline stage.
    Train {
        #[arg(long)]
        stage: Stage,
    },
    /// Evaluate streams on the test split.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "base,unc,gated")]
        streams: Vec<StreamTag>,
        /// Also write per-scene SVG renders.
        #[arg(long)]
        svg: bool,
    },
    /// Loss-distribution ablation over several seeds.
    Ablate,
    /// Rebuild the binned report from the per-scene log.
    Report,
    /// Generate (if needed), train every stage and evaluate.
    Run,
}

fn load_config(cli: &Cli) -> scenegate_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) if !path.exists() => return Err(Error::Config(format!("config file {} not found", path.display()))),
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_manifest(m: &Manifest) {
    println!("benchmark (master seed {}):", m.master_seed);
    print!("  {:<6}{:>7}", "split", "scenes");
    for b in 0..m.config.quotas.len() {
        print!("{:>10}", bin_label(b));
    }
    println!();
    for (split, s) in &m.splits {
        print!("  {:<6}{:>7}", format!("{split:?}").to_lowercase(), s.count);
        for n in s.bins {
            print!("{n:>10}");
        }
        println!();
    }
}

fn print_report(report: &BinnedReport) {
    println!("{:<7}{:>10}{:>6}{:>10}{:>10}{:>9}", "stream", "bin", "n", "minADE", "minFDE", "MR%");
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for r in &report.rows {
        println!(
            "{:<7}{:>10}{:>6}{:>10}{:>10}{:>9}",
            r.stream.to_string(),
            r.bin_label(),
            r.n,
            f(r.min_ade),
            f(r.min_fde),
            r.mr.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
        );
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cli.out, &cfg);
    let name = match &cli.command {
        Command::Generate => "generate",
        Command::Train { stage } => stage.name(),
        Command::Eval { .. } => "eval",
        Command::Ablate => "ablate",
        Command::Report => "report",
        Command::Run => "run",
    };
    pipeline::with_sidecar(&layout, name, || {
        match &cli.command {
            Command::Generate => {
                let m = pipeline::cmd_generate(&cfg, &layout)?;
                print_manifest(&m);
            }
            Command::Train { stage } => {
                let log = pipeline::cmd_train(&cfg, &layout, *stage)?;
                println!(
                    "{}: {} epochs, best epoch {} (val {:.6})",
                    stage.name(),
                    log.epochs.len(),
                    log.best_epoch,
                    log.best_val
                );
                println!("checkpoint {}", layout.checkpoint(*stage).display());
            }
            Command::Eval { streams, svg } => {
                let eval = pipeline::cmd_eval(&cfg, &layout, streams, *svg)?;
                print_report(&eval.report);
                println!("report {}", layout.report_csv().display());
            }
            Command::Ablate => {
                let table = pipeline::cmd_ablate(&cfg, &layout)?;
                print!("{}", table.to_markdown());
            }
            Command::Report => print_report(&pipeline::cmd_report(&layout)?),
            Command::Run => {
                let eval = pipeline::cmd_run_all(&cfg, &layout)?;
                print_report(&eval.report);
            }
        }
        Ok(())
    })
    .with_context(|| format!("{name} failed"))?;
    println!("effective config {}", display(&layout.effective_config()));
    Ok(())
}

fn display(p: &Path) -> String {
    if p.exists() {
        p.display().to_string()
    } else {
        "(not written)".into()
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidTemperature(_) | Error::InvalidSpec(_)) => 2,
        Some(Error::MissingUpstream(_) | Error::MissingCheckpoint(_)) => 3,
        Some(Error::NonFiniteLoss { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d2t::config::ExperimentConfig;
use d2t::pipeline::{self, StageReport, Variant};

#[derive(Parser)]
#[command(
    name = "d2t",
    version,
    about = "Diffusion-aided decision transformer for IRS phase control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert and few-shot trajectories.
    Collect(Common),
    /// Train the pilot-conditioned channel diffusion model.
    TrainDm(Common),
    /// Pre-train the decision transformer on the expert buffer.
    PretrainDt(Common),
    /// Fine-tune on the held-out environment and train the scratch baseline.
    Finetune(Common),
    /// Evaluate one variant, or all of them.
    Eval {
        #[command(flatten)]
        common: Common,
        /// d2t, dt-pc, scratch-dt, random or expert.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Every enabled stage in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (required when no config is given).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the config and print the stage plan without running.
    #[arg(long)]
    dry_run: bool,
    /// Print the fully resolved config.
    #[arg(long)]
    explain: bool,
}

impl Common {
    fn resolve(&self) -> d2t::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(s)) => ExperimentConfig::with_seed(s),
            (None, None) => {
                return Err(d2t::D2tError::Config(
                    "either --config or --seed is required".into(),
                ))
            }
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(r: &StageReport) {
    println!("{} -> {}", r.stage, r.dir.display());
    let mut seen: Vec<&str> = Vec::new();
    for rec in r.metrics.records().iter().rev() {
        if !seen.contains(&rec.metric.as_str()) {
            seen.push(&rec.metric);
        }
    }
    for m in seen.into_iter().rev() {
        if let Some(v) = r.metrics.last(m) {
            println!("  {m:<24} {v:.6}");
        }
    }
}

fn run(cli: Cli) -> d2t::Result<()> {
    let common = match &cli.command {
        Command::Collect(c)
        | Command::TrainDm(c)
        | Command::PretrainDt(c)
        | Command::Finetune(c)
        | Command::Run(c) => c,
        Command::Eval { common, .. } => common,
    };
    let cfg = common.resolve()?;
    if common.explain {
        print!("{}", cfg.explain()?);
    }
    if common.dry_run {
        print!("{}", pipeline::plan(&cfg)?);
        return Ok(());
    }
    let reports = match cli.command {
        Command::Collect(_) => vec![pipeline::cmd_collect(&cfg)?],
        Command::TrainDm(_) => vec![pipeline::cmd_train_dm(&cfg)?],
        Command::PretrainDt(_) => vec![pipeline::cmd_pretrain_dt(&cfg)?],
        Command::Finetune(_) => vec![pipeline::cmd_finetune(&cfg)?],
        Command::Eval {
            variant: Some(v), ..
        } => vec![pipeline::cmd_eval(&cfg, v)?],
        Command::Eval { variant: None, .. } => Variant::ALL
            .iter()
            .map(|&v| pipeline::cmd_eval(&cfg, v))
            .collect::<d2t::Result<_>>()?,
        Command::Run(_) => pipeline::run_all(&cfg)?,
    };
    reports.iter().for_each(report);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

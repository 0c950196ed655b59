//! `v2x-ids`: command-line front end for the detection pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use ids_core::config::PipelineConfig;
use ids_core::pipeline;
use ids_core::stage1::{DeployMode, Variant};
use ids_core::stage2::LossKind;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Ingest,
    Synth,
    TrainStage1,
    FitThresholds,
    TrainStage2,
    TrainUnseen,
    Prune,
    Finetune,
    Quantize,
    Evaluate,
    Detect,
    Bench,
    Profile,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    #[value(name = "band_llul")]
    BandLlUl,
    #[value(name = "band_q1q3")]
    BandQ1Q3,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Loss {
    Ce,
    Lsmooth,
    Focal,
}

#[derive(Debug, Parser)]
#[command(name = "v2x-ids", version, about = "Two-stage misbehavior detection for V2X message streams")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Stage-1 architecture, M1 through M7.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_enum)]
    loss: Option<Loss>,
    #[arg(long)]
    prune_ratio: Option<f64>,
    /// 2 to 8 for integer quantization, 32 to keep float weights.
    #[arg(long)]
    bits: Option<u8>,
    /// Output directory for artifacts and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn name(self) -> String {
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }
}

fn config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            Mode::BandLlUl => DeployMode::BandLlUl,
            Mode::BandQ1Q3 => DeployMode::BandQ1Q3,
        };
    }
    if let Some(v) = &cli.variant {
        cfg.stage1.variant = v.parse::<Variant>()?;
    }
    if let Some(l) = cli.loss {
        let flag = format!("{l:?}").to_lowercase();
        cfg.stage2.loss = LossKind::from_flag(&flag)?;
    }
    if let Some(r) = cli.prune_ratio {
        cfg.compress.prune.ratio = r;
    }
    if let Some(b) = cli.bits {
        cfg.compress.bits = b;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = config(cli)?;
    let name = cli.command.name();
    pipeline::run(&name, &cfg).with_context(|| format!("`{name}` failed"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

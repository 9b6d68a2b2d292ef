mod commands;
mod config;
mod failure;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Ctx, SampleSizeArgs};
use config::{RunConfig, Variant};
use failure::{config_error, Failure, EXIT_INTERNAL};

#[derive(Parser)]
#[command(name = "flipbench", version, about = "Bit-flip fault injection for U-Net segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the running command.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to available cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides io.output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fixed sample size per population unit.
    #[arg(long)]
    n_override: Option<u64>,
}

#[derive(Args, Clone)]
struct VariantArg {
    /// Model variant; defaults to campaign.variant.
    #[arg(long, value_enum)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Prints the statistical sample size for one population unit.
    SampleSize {
        #[arg(long, default_value_t = 0.025)]
        margin: f64,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        /// Finite population size; infinite when omitted.
        #[arg(long)]
        population: Option<u64>,
        #[arg(long)]
        n_override: Option<u64>,
    },
    /// Builds and initializes the fp32 model and the synthetic dataset.
    InitModel(#[command(flatten)] Common),
    /// Runs fault-free inference and records golden maps and quality metrics.
    Golden {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Folds batch norms and quantizes the fp32 model to int8.
    Quantize(#[command(flatten)] Common),
    /// Sensitivity sweeps and FLOP-targeted channel pruning.
    Prune(#[command(flatten)] Common),
    /// Generates a fault plan and runs the injection campaign.
    Campaign {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArg,
        /// Runs an existing plan instead of generating one.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Aggregates campaign records into per-group and per-set reports.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArg,
    },
}

/// Seed slot that `--seed` replaces: the model seed for `init-model`, the
/// campaign seed elsewhere.
enum SeedTarget {
    Model,
    Campaign,
}

fn context(common: &Common, seed_target: SeedTarget) -> Result<Ctx, Failure> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &common.output_dir {
        config.io.output_dir = dir.clone();
    }
    if let Some(n) = common.n_override {
        config.campaign.n_override = Some(n);
    }
    if let Some(seed) = common.seed {
        match seed_target {
            SeedTarget::Model => config.model.seed = seed,
            SeedTarget::Campaign => config.campaign.seed = seed,
        }
    }
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(config_error("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure {
                code: EXIT_INTERNAL,
                error: e.into(),
            })?;
    }
    Ctx::new(config)
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::SampleSize {
            margin,
            confidence,
            p,
            population,
            n_override,
        } => commands::sample_size(&SampleSizeArgs {
            margin,
            confidence,
            p,
            population,
            n_override,
        }),
        Command::InitModel(c) => commands::init_model(&context(&c, SeedTarget::Model)?),
        Command::Golden { common, variant } => {
            let ctx = context(&common, SeedTarget::Campaign)?;
            let variant = variant.variant.unwrap_or(ctx.config.campaign.variant);
            commands::golden(&ctx, variant)
        }
        Command::Quantize(c) => commands::quantize(&context(&c, SeedTarget::Campaign)?),
        Command::Prune(c) => commands::prune(&context(&c, SeedTarget::Campaign)?),
        Command::Campaign { common, variant, plan } => {
            let ctx = context(&common, SeedTarget::Campaign)?;
            let v = variant.variant.unwrap_or(ctx.config.campaign.variant);
            commands::campaign(&ctx, v, plan.as_deref())
        }
        Command::Report { common, variant } => {
            let ctx = context(&common, SeedTarget::Campaign)?;
            let variant = variant.variant.unwrap_or(ctx.config.campaign.variant);
            commands::report(&ctx, variant)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

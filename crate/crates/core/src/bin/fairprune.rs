use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairprune::harness::{
    run_ablation, run_matrix, run_subset_study, train_originals, ExperimentConfig, LossVariant, Method, RunOptions,
    RunSummary,
};
use fairprune::metrics::evaluate;
use fairprune::model::ModelState;

#[derive(Parser)]
#[command(name = "fairprune", version, about = "Fairness-aware structured filter pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides FAIRPRUNE_OUT and the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Base seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one model preset.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the unpruned model of every trial seed.
    Train(Common),
    /// Run one pruning pipeline (first trial only).
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        speedup: Option<f64>,
    },
    /// Evaluate a saved model JSON on the test split, or the originals.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model_file: Option<PathBuf>,
    },
    /// methods × variants × speedups × trials.
    Matrix(Common),
    /// The matrix on the three composition subsets.
    Subsets(Common),
    /// Component variants × application scopes.
    Ablation(Common),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Autobot,
    Taylor,
    Random,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Ce,
    Pw,
    PwWeightsOnly,
    PwSoftLabelsOnly,
}

fn load(c: &Common) -> fairprune::Result<(ExperimentConfig, RunOptions)> {
    let mut config = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(m) = &c.model {
        config.model = m.clone();
    }
    config.validate()?;
    let out_dir = c
        .out
        .clone()
        .or_else(|| std::env::var_os("FAIRPRUNE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| config.out_dir.clone());
    Ok((
        config,
        RunOptions {
            out_dir,
            jobs: c.jobs.max(1),
        },
    ))
}

fn report(s: &RunSummary, opts: &RunOptions) -> ExitCode {
    let failed = s.failed();
    println!(
        "{} trials ({} failed), results in {}",
        s.trials().count(),
        failed,
        opts.out_dir.join("results.csv").display()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> fairprune::Result<ExitCode> {
    match cli.command {
        Command::Train(c) => {
            let (config, opts) = load(&c)?;
            let rows = train_originals(&config, &opts)?;
            for r in &rows {
                println!("{}", serde_json::to_string(r)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Prune {
            common,
            method,
            variant,
            speedup,
        } => {
            let (mut config, opts) = load(&common)?;
            config.trials = 1;
            if let Some(m) = method {
                config.methods = vec![match m {
                    MethodArg::Autobot => Method::Autobot,
                    MethodArg::Taylor => Method::Taylor,
                    MethodArg::Random => Method::Random,
                }];
            } else {
                config.methods.truncate(1);
            }
            if let Some(v) = variant {
                config.variants = vec![match v {
                    VariantArg::Ce => LossVariant::Ce,
                    VariantArg::Pw => LossVariant::Pw,
                    VariantArg::PwWeightsOnly => LossVariant::PwWeightsOnly,
                    VariantArg::PwSoftLabelsOnly => LossVariant::PwSoftLabelsOnly,
                }];
            } else {
                config.variants.truncate(1);
            }
            match speedup {
                Some(s) => config.speedups = vec![s],
                None => config.speedups.truncate(1),
            }
            config.validate()?;
            let s = run_matrix(&config, &opts)?;
            Ok(report(&s, &opts))
        }
        Command::Eval { common, model_file } => {
            let (config, opts) = load(&common)?;
            match model_file {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    // model cache files wrap the state with training metadata
                    let v: serde_json::Value = serde_json::from_str(&text)?;
                    let state = match v.get("state") {
                        Some(s) => ModelState::from_json(&s.to_string())?,
                        None => ModelState::from_json(&text)?,
                    };
                    let data = fairprune::harness::prepare(&config.data)?;
                    let r = evaluate(&state, &data.dataset, data.test())?;
                    println!("{}", serde_json::to_string_pretty(&r)?);
                }
                None => {
                    for r in train_originals(&config, &opts)? {
                        println!("{}", serde_json::to_string(&r)?);
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Matrix(c) => {
            let (config, opts) = load(&c)?;
            Ok(report(&run_matrix(&config, &opts)?, &opts))
        }
        Command::Subsets(c) => {
            let (config, opts) = load(&c)?;
            Ok(report(&run_subset_study(&config, &opts)?, &opts))
        }
        Command::Ablation(c) => {
            let (config, opts) = load(&c)?;
            Ok(report(&run_ablation(&config, &opts)?, &opts))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

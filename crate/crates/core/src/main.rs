use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use metaepi::harness::{run_experiment_to, ExperimentConfig, ExperimentId};
use metaepi::metamodels::{load_model, save_model};
use metaepi::metatrain::{evaluate_meta_model, meta_train};
use metaepi::taskgen::{make_gaussian_pool, make_heterogeneous_pool, make_two_domain_pool, ClassPool, EpisodeSpec, RngStream};

#[derive(Parser)]
#[command(name = "metaepi", version, about = "Episodic meta-learning on synthetic task distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolKind {
    Gaussian,
    Heterogeneous,
    TwoDomain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a class pool from the config's pool section.
    GenPool {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "gaussian")]
        kind: PoolKind,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Meta-train a model on a pool file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch training curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Meta-test a checkpoint on a pool file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        ways: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 15)]
        queries: usize,
    },
    /// Run an experiment recipe and write its CSV.
    Experiment {
        id: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn load_pool(path: &PathBuf) -> Result<ClassPool> {
    ClassPool::load(path).with_context(|| format!("pool {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPool { config, out, kind, seed } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let rng = RngStream::new(seed).child("pool");
            let pool = match kind {
                PoolKind::Gaussian => make_gaussian_pool(&cfg.pool, &rng)?,
                PoolKind::Heterogeneous => make_heterogeneous_pool(&cfg.heterogeneous_params(), &rng)?,
                PoolKind::TwoDomain => {
                    let t = cfg.domainshift.transform(cfg.pool.dim, cfg.pool.dim - cfg.pool.nuisance_dims)?;
                    make_two_domain_pool(&cfg.pool, &t, &rng)?
                }
            };
            pool.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {}: {} classes, {} instances, dim {}",
                out.display(),
                pool.num_classes(),
                pool.num_instances(),
                pool.dim()
            );
        }
        Command::Train { config, pool, out, curve, seed } => {
            let cfg = load_config(&config)?;
            let pool = load_pool(&pool)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let model = cfg
                .model
                .build(pool.dim(), cfg.episode.ways, &RngStream::new(seed).child("init"))?;
            let tc = cfg.train.to_train_config(cfg.episode.train_spec(), seed);
            let (model, c) = meta_train(model, &pool, None, &tc)?;
            save_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = curve {
                std::fs::write(&path, c.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            match c.last() {
                Some(last) => println!(
                    "trained {} for {} epochs: meta_train_loss={} meta_train_acc={}",
                    model.variant(),
                    last.epoch,
                    last.meta_train_loss,
                    last.meta_train_acc
                ),
                None => println!("trained {} for 0 epochs", model.variant()),
            }
        }
        Command::Eval {
            model,
            pool,
            episodes,
            seed,
            ways,
            shots,
            queries,
        } => {
            let m = load_model(&model).with_context(|| format!("model {}", model.display()))?;
            let pool = load_pool(&pool)?;
            let r = evaluate_meta_model(&m, &pool, &EpisodeSpec::new(ways, shots, queries), episodes, seed)?;
            println!("meta_test_acc={} ci_halfwidth={} episodes={}", r.mean, r.ci_half_width, r.episodes);
        }
        Command::Experiment { id, config, out } => {
            let id: ExperimentId = id.parse()?;
            let mut cfg = load_config(&config)?;
            match cfg.experiment {
                Some(named) if named != id => bail!("config is for experiment `{named}`, not `{id}`"),
                _ => cfg.experiment = Some(id),
            }
            let records = run_experiment_to(&cfg, &out)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

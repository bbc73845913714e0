use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nfa_core::cli::{self, DiagnoseKind, EvalKind};
use nfa_core::config::RunConfig;
use nfa_core::sparse::CorpusFormat;
use nfa_core::synthetic::SyntheticConfig;
use nfa_core::train::{Features, Mode};

#[derive(Parser)]
#[command(name = "nfa", version, about = "Nonlinear factor analysis for sparse count data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the config file.
#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Falls back to `NFA_SEED`, then the config file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "vae|svi|hybrid")]
    mode: Option<Mode>,
    #[arg(long, global = true, value_name = "norm|tfidf")]
    features: Option<Features>,
    /// Inner refinement steps.
    #[arg(long = "M", global = true, value_name = "COUNT")]
    m: Option<usize>,
    #[arg(long, global = true, value_name = "COUNT")]
    anneal_updates: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "COUNT")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model.
    Train {
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        train_data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        valid_data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Perplexity bounds or ranking metrics for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out targets (ranking only).
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value = "perplexity", value_name = "perplexity|ranking")]
        metric: EvalKind,
    },
    /// Jacobian spectrum or KL-vs-rare-words report.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_name = "spectrum|kl_rare")]
        which: DiagnoseKind,
    },
    /// Top-N items for every user row of a feedback file.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long, short = 'n', default_value_t = 100)]
        n: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Data preparation.
    #[command(subcommand)]
    Prepare(Prepare),
}

#[derive(Subcommand)]
enum Prepare {
    /// Ratings (`user item rating` lines) to binary implicit feedback.
    Binarize {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, default_value_t = 3.5)]
        threshold: f64,
        #[arg(long, default_value_t = 5)]
        min_items: usize,
    },
    /// Strong-generalization user split.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0.8)]
        fold_frac: f64,
        #[arg(long, default_value = "triples")]
        format: CorpusFormat,
    },
    /// Keep the L most frequent features.
    TopL {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "triples")]
        format: CorpusFormat,
    },
    /// Corpus drawn from a random ground-truth model.
    Synthetic {
        #[arg(long, default_value_t = 2000)]
        train_docs: usize,
        #[arg(long, default_value_t = 500)]
        test_docs: usize,
        #[arg(long, default_value_t = 2000)]
        vocab: usize,
        #[arg(long, default_value_t = 10)]
        latent: usize,
        #[arg(long, default_value_t = 30.0)]
        mean_length: f64,
    },
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("NFA_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("NFA_SEED={s:?} is not a u64"))?)),
        Err(_) => Ok(None),
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg, seed_from_env()?);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig, env_seed: Option<u64>) {
        if let Some(s) = self.seed.or(env_seed) {
            cfg.train.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m;
        }
        if let Some(f) = self.features {
            cfg.train.features = f;
        }
        if let Some(m) = self.m {
            cfg.train.inner_steps = m;
            cfg.eval_inner_steps = m.max(cfg.eval_inner_steps);
        }
        if let Some(a) = self.anneal_updates {
            cfg.train.anneal_updates = a;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

fn init_threads(n: usize) {
    if n > 0 {
        // Already-initialized pools are fine: results do not depend on it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    let mut log = |s: &str| eprintln!("{s}");
    match cli.cmd {
        Cmd::Train {
            resume,
            train_data,
            valid_data,
            epochs,
        } => {
            let mut cfg = common.load()?;
            if let Some(p) = train_data {
                cfg.train_data = Some(p);
            }
            if let Some(p) = valid_data {
                cfg.valid_data = Some(p);
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            init_threads(cfg.threads);
            let out = cli::run_train(&cfg, resume.as_deref(), &mut log)?;
            println!("{}", out.final_checkpoint.display());
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            targets,
            metric,
        } => {
            let env_seed = seed_from_env()?;
            init_threads(common.threads.unwrap_or(0));
            let paths = cli::run_evaluate(
                &checkpoint,
                &data,
                targets.as_deref(),
                metric,
                &common.out_dir(),
                &|c| common.apply(c, env_seed),
            )?;
            print_paths(&paths);
        }
        Cmd::Diagnose { checkpoint, data, which } => {
            let env_seed = seed_from_env()?;
            init_threads(common.threads.unwrap_or(0));
            let p = cli::run_diagnose(&checkpoint, data.as_deref(), which, &common.out_dir(), &|c| {
                common.apply(c, env_seed)
            })?;
            print_paths(&[p]);
        }
        Cmd::Recommend {
            checkpoint,
            feedback,
            n,
            output,
        } => cli::run_recommend(&checkpoint, &feedback, n, output.as_deref())?,
        Cmd::Prepare(p) => {
            let out = common.out_dir();
            let seed = common.seed.or(seed_from_env()?).unwrap_or(0);
            match p {
                Prepare::Binarize {
                    ratings,
                    threshold,
                    min_items,
                } => print_paths(&cli::prepare_binarize(&ratings, threshold, min_items, &out)?),
                Prepare::Split {
                    data,
                    valid,
                    test,
                    fold_frac,
                    format,
                } => {
                    let (paths, excluded) = cli::prepare_split(&data, format, valid, test, fold_frac, seed, &out)?;
                    if excluded > 0 {
                        eprintln!("{excluded} held-out users dropped (too few items)");
                    }
                    print_paths(&paths);
                }
                Prepare::TopL { data, l, output, format } => {
                    print_paths(&cli::prepare_top_l(&data, format, l, &output)?)
                }
                Prepare::Synthetic {
                    train_docs,
                    test_docs,
                    vocab,
                    latent,
                    mean_length,
                } => {
                    let cfg = SyntheticConfig {
                        latent_dim: latent,
                        vocab,
                        mean_length,
                        seed,
                        ..SyntheticConfig::default()
                    };
                    print_paths(&cli::prepare_synthetic(&cfg, train_docs, test_docs, &out)?)
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<nfa_core::Error>()
                .map(cli::exit_code)
                .unwrap_or(1);
            ExitCode::from(code)
        }
    }
}

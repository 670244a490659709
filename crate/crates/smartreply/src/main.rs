use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use smartreply::bench::StdClock;
use smartreply::core::inference::Ranker;
use smartreply::io;
use smartreply::lifecycle::LifecycleConfig;
use smartreply::service::{self, AppState};
use smartreply::workdir::Workdir;

/// Retrieval smart-reply: train, build, evaluate, benchmark and serve.
#[derive(Parser, Debug)]
#[command(name = "smartreply", version)]
struct Cli {
    /// JSON lifecycle config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding the corpus, models and artifacts.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Out {
    /// Output path (defaults to the standard name inside the workdir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic labelled corpus as TSV.
    GenCorpus {
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Train the dual-encoder matching model.
    TrainMatching {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Train the n-gram reply language model.
    TrainLm {
        #[arg(long)]
        order: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Select, encode and cluster the fixed response set.
    BuildResponseSet {
        #[arg(long)]
        freq_top: Option<usize>,
        #[arg(long)]
        lm_top: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Train the CVAE on top of the frozen matching model.
    TrainCvae {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        kl_weight: Option<f64>,
        #[arg(long)]
        z_dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Duplicate/defect/coverage proxies on held-out messages.
    Eval {
        /// Comma-separated ranker names.
        #[arg(long, value_delimiter = ',')]
        rankers: Option<Vec<Ranker>>,
        #[arg(long)]
        messages: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Latency percentiles per ranker.
    Bench {
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Print suggestions for one message as JSON.
    Suggest {
        #[arg(long)]
        message: String,
        #[arg(long, default_value = "matching")]
        ranker: Ranker,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        beta: Option<f32>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        click_log: Option<PathBuf>,
    },
}

fn log(msg: String) {
    eprintln!("{msg}");
}

fn load_config(path: Option<&Path>) -> Result<LifecycleConfig> {
    match path {
        Some(p) => Ok(io::read_json(p)?),
        None => Ok(LifecycleConfig::default()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.workdir).with_context(|| format!("creating {}", cli.workdir.display()))?;
    let mut log = log;
    match cli.command {
        Command::GenCorpus { pairs, seed, out } => {
            cfg.corpus.n_pairs = pairs.unwrap_or(cfg.corpus.n_pairs);
            cfg.corpus.seed = seed.unwrap_or(cfg.corpus.seed);
            let (path, n) = Workdir::new(&cli.workdir, cfg).gen_corpus(out.out.as_deref())?;
            eprintln!("wrote {n} pairs to {}", path.display());
        }
        Command::TrainMatching { epochs, seed, out } => {
            cfg.matching.epochs = epochs.unwrap_or(cfg.matching.epochs);
            cfg.matching.seed = seed.unwrap_or(cfg.matching.seed);
            let path = Workdir::new(&cli.workdir, cfg).train_matching(out.out.as_deref(), &mut log)?;
            eprintln!("wrote {}", path.display());
        }
        Command::TrainLm { order, out } => {
            cfg.lm.order = order.unwrap_or(cfg.lm.order);
            let path = Workdir::new(&cli.workdir, cfg).train_lm(out.out.as_deref(), &mut log)?;
            eprintln!("wrote {}", path.display());
        }
        Command::BuildResponseSet { freq_top, lm_top, out } => {
            cfg.response_set.freq_top = freq_top.unwrap_or(cfg.response_set.freq_top);
            cfg.response_set.lm_top = lm_top.unwrap_or(cfg.response_set.lm_top);
            let (dir, a) = Workdir::new(&cli.workdir, cfg).build_response_set(out.out.as_deref(), &mut log)?;
            eprintln!(
                "wrote {} responses in {} lexical clusters to {}",
                a.len(),
                a.clusters.cluster_count(),
                dir.display()
            );
        }
        Command::TrainCvae { epochs, kl_weight, z_dim, seed, out } => {
            cfg.cvae.epochs = epochs.unwrap_or(cfg.cvae.epochs);
            cfg.cvae.kl_weight = kl_weight.unwrap_or(cfg.cvae.kl_weight);
            cfg.cvae.z_dim = z_dim.unwrap_or(cfg.cvae.z_dim);
            cfg.cvae.seed = seed.unwrap_or(cfg.cvae.seed);
            let (path, _) = Workdir::new(&cli.workdir, cfg).train_cvae(out.out.as_deref(), &mut log)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Eval { rankers, messages, out } => {
            if let Some(r) = rankers {
                cfg.eval.rankers = r;
            }
            cfg.eval.messages = messages.unwrap_or(cfg.eval.messages);
            let (path, report) = Workdir::new(&cli.workdir, cfg).eval(out.out.as_deref(), &mut log)?;
            print_json(&report);
            eprintln!("wrote {}", path.display());
        }
        Command::Bench { queries, warmup, out } => {
            cfg.bench.queries = queries.unwrap_or(cfg.bench.queries);
            cfg.bench.warmup = warmup.unwrap_or(cfg.bench.warmup);
            let (path, report) = Workdir::new(&cli.workdir, cfg).bench(out.out.as_deref(), &mut log)?;
            print_json(&report);
            eprintln!("wrote {}", path.display());
        }
        Command::Suggest { message, ranker, seed, alpha, beta, k, samples } => {
            let p = &mut cfg.pipeline;
            p.seed = seed.unwrap_or(p.seed);
            p.alpha = alpha.unwrap_or(p.alpha);
            p.beta = beta.unwrap_or(p.beta);
            p.k = k.unwrap_or(p.k);
            p.samples = samples.unwrap_or(p.samples);
            let pipeline = cfg.pipeline.clone();
            let (engine, _) = Workdir::new(&cli.workdir, cfg).engine(ranker.needs_cvae(), &mut log)?;
            print_json(&engine.suggest(&message, ranker, &pipeline, &StdClock::new())?);
        }
        Command::Serve { addr, click_log } => {
            let addr = addr.unwrap_or_else(|| cfg.service.addr.clone());
            let click_log = click_log.unwrap_or_else(|| cli.workdir.join(&cfg.service.click_log));
            let max_body = cfg.service.max_body_bytes;
            let defaults = cfg.pipeline.clone();
            let (engine, hash) = Workdir::new(&cli.workdir, cfg).engine(false, &mut log)?;
            let state = AppState::new(engine, defaults, hash, &click_log)
                .with_context(|| format!("opening click log {}", click_log.display()))?;
            let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            rt.block_on(service::serve(Arc::new(state), &addr, max_body))
                .with_context(|| format!("serving on {addr}"))?;
        }
    }
    Ok(())
}

/// 0 success, 1 usage or contract error, 2 I/O error.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<smartreply::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

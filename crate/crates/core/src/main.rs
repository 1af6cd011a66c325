// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kvdrift::experiments::{run_experiment, run_pair, run_report, CampaignConfig, DecodeSpec, EXPERIMENTS};
use kvdrift::harness::Strategy;
use kvdrift::precision::Precision;
use kvdrift::{Error, Result};

#[derive(Parser)]
#[command(name = "kvdrift", version, about = "Cache-ON vs cache-OFF divergence laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Campaign config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict to one precision.
    #[arg(long)]
    precision: Option<Precision>,
    /// Restrict to one decoding strategy (greedy, top_k, top_p).
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Restrict to one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; affects wall time only.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the model weights (manifest.json + weights.bin).
    GenModel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the prompt corpus as JSONL.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one prompt on both paths and print its report as JSON.
    DecodePair {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        prompt_id: usize,
    },
    /// Run one experiment into a campaign directory.
    Experiment {
        /// One of behavioral, layer-drift, falsify, boundary, patching.
        name: String,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an unfinished campaign or add to an existing one.
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate an existing campaign's runs.jsonl into summary tables.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<CampaignConfig> {
    let mut cfg = match &c.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(p) = c.precision {
        cfg.precisions = vec![p];
        cfg.falsify.rerun_precisions = vec![p];
    }
    if let Some(s) = c.strategy {
        let n = cfg.decode.first().map_or(64, |d| d.max_new_tokens);
        cfg.decode = vec![DecodeSpec { strategy: s, max_new_tokens: n }];
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn out_dir(cfg: &CampaignConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (pass --out or set output_dir)".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenModel { common, out } => {
            let cfg = load_config(&common)?;
            let m = cfg.model.build()?;
            m.weights().save(m.config(), &out)?;
            println!("wrote model to {}", out.display());
        }
        Cmd::GenCorpus { common, out } => {
            let cfg = load_config(&common)?;
            let corpus = cfg.corpus.build(cfg.model.config.vocab_size)?;
            corpus.save(&out)?;
            println!("wrote {} prompts to {}", corpus.len(), out.display());
        }
        Cmd::DecodePair { common, prompt_id } => {
            let cfg = load_config(&common)?;
            let m = cfg.model.build()?;
            let corpus = cfg.corpus.build(m.config().vocab_size)?;
            let prompt = corpus.prompts.get(prompt_id).ok_or_else(|| {
                Error::Config(format!("prompt id {prompt_id} out of range for {} prompts", corpus.len()))
            })?;
            let spec = cfg.decode.first().copied().ok_or_else(|| Error::Config("no decode strategy".into()))?;
            let r = with_pool(common.workers, || run_pair(&m, prompt_id, prompt, &spec, cfg.seeds[0], cfg.precisions[0]))?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::Experiment { name, common, out, resume } => {
            if !EXPERIMENTS.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown experiment `{name}` (expected one of {})", EXPERIMENTS.join(", "))));
            }
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg, out)?;
            let lines = with_pool(common.workers, || run_experiment(&name, &cfg, &dir, resume))?;
            for l in lines {
                println!("{l}");
            }
        }
        Cmd::Report { out } => {
            let r = run_report(Path::new(&out))?;
            for c in &r.conditions {
                println!(
                    "{} {}: flip rate {:?} over {} pairs, mean KL {:e} bits",
                    c.precision.name(),
                    c.strategy,
                    c.divergence_rate,
                    c.n_pairs,
                    c.mean_kl
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("kvdrift: {msg}");
            ExitCode::FAILURE
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven experiment entry points. Each writes `config.json` and its
//! tables into a campaign directory and returns one-line summaries.

use std::path::Path;

use super::behavioral::{aggregate, run_pairs, top_kl_prompts, write_behavioral, BehavioralReport, RunPairReport};
use super::boundary::{run_boundary_analysis, write_boundary};
use super::campaign::{load_runs, CampaignDir, RUNS_FILE};
use super::config::{CampaignConfig, DecodeSpec};
use super::drift::{gqa_ablation, run_layer_drift, write_layer_drift};
use super::falsify::{run_falsification, write_falsify};
use super::patching::{run_patching, write_patching, PatchMode};
use crate::error::{Error, Result};
use crate::harness::{Corpus, Strategy};
use crate::model::Model;
use crate::precision::Precision;

/// Experiment names accepted by [`run_experiment`].
pub const EXPERIMENTS: [&str; 5] = ["behavioral", "layer-drift", "falsify", "boundary", "patching"];

struct Ctx<'a> {
    cfg: &'a CampaignConfig,
    dir: CampaignDir,
    model: Model,
    corpus: Corpus,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a CampaignConfig, out: &Path, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let dir = CampaignDir::open(out, resume)?;
        dir.write_config(cfg)?;
        let model = cfg.model.build()?;
        let corpus = cfg.corpus.build(model.config().vocab_size)?;
        Ok(Ctx { cfg, dir, model, corpus })
    }

    /// Paired runs for `precisions`, reusing `runs.jsonl` or the partial
    /// file of an earlier invocation, and writing the behavioral tables.
    fn campaign(&self, specs: &[DecodeSpec], precisions: &[Precision]) -> Result<BehavioralReport> {
        let mut done = if self.dir.root().join(RUNS_FILE).exists() { load_runs(self.dir.root())? } else { Vec::new() };
        done.extend(self.dir.load_partial()?);
        let runs = run_pairs(&self.model, &self.corpus, specs, &self.cfg.seeds, precisions, done, &|r| self.dir.append_partial(r))?;
        let r = aggregate(runs, &self.cfg.stats)?;
        write_behavioral(&self.dir, &r)?;
        Ok(r)
    }

    fn greedy_spec(&self) -> DecodeSpec {
        let n = self.cfg.decode.iter().find(|d| d.strategy.is_greedy()).map_or(64, |d| d.max_new_tokens);
        DecodeSpec { strategy: Strategy::Greedy, max_new_tokens: n }
    }

    /// Distinct prompts ranked by mean KL of greedy pairs at `p`.
    fn top_examples(&self, p: Precision, n: usize) -> Result<Vec<(usize, Vec<u32>)>> {
        let r = self.campaign(&[self.greedy_spec()], &[p])?;
        Ok(top_kl_prompts(&r.runs, p, n).into_iter().map(|i| (i, self.corpus.prompts[i].clone())).collect())
    }
}

/// Runs the named experiment into `out`.
pub fn run_experiment(name: &str, cfg: &CampaignConfig, out: &Path, resume: bool) -> Result<Vec<String>> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::Config(format!("unknown experiment `{name}` (expected one of {})", EXPERIMENTS.join(", "))));
    }
    let ctx = Ctx::new(cfg, out, resume)?;
    let mut lines = Vec::new();
    match name {
        "behavioral" => {
            let r = ctx.campaign(&cfg.decode, &cfg.precisions)?;
            for c in &r.conditions {
                lines.push(format!(
                    "{} {}: flip rate {:?} over {} pairs, mean KL {:e} bits",
                    c.precision.name(),
                    c.strategy,
                    c.divergence_rate,
                    c.n_pairs,
                    c.mean_kl
                ));
            }
        }
        "layer-drift" => {
            let lp = &cfg.layer_drift;
            let examples: Vec<Vec<u32>> = ctx.top_examples(lp.precision, lp.top_n)?.into_iter().map(|(_, p)| p).collect();
            let mut reports = Vec::new();
            for &p in &cfg.precisions {
                let r = run_layer_drift(&ctx.model, &examples, p, cfg.stats.alpha)?;
                let worst = r.layers.iter().map(|l| l.mean_l2).fold(0.0, f64::max);
                lines.push(format!(
                    "{}: first-attention drift {:e}, largest layer drift {worst:e} over {} examples",
                    p.name(),
                    r.first_attention_mean_l2,
                    r.n_examples
                ));
                reports.push(r);
            }
            let gqa = if lp.weight_seeds > 0 && !lp.ratios.is_empty() {
                let g = gqa_ablation(&cfg.model.config, &lp.ratios, lp.weight_seeds, lp.prompts_per_seed, cfg.corpus.prompt_len, lp.precision)?;
                let p = g.test.as_ref().map_or("NA".to_string(), |t| t.p_value.to_string());
                lines.push(format!("gqa ablation: mean drift {:?} for ratios {:?}, p = {p}", g.mean_drift, g.ratios));
                Some(g)
            } else {
                None
            };
            write_layer_drift(&ctx.dir, &reports, gqa.as_ref())?;
        }
        "falsify" => {
            let greedy: Vec<DecodeSpec> = vec![ctx.greedy_spec()];
            let baseline = ctx.campaign(&greedy, &[Precision::Half16])?;
            let r = run_falsification(&ctx.model, &ctx.corpus, &cfg.seeds, &greedy, &cfg.falsify, &cfg.stats, Some(baseline))?;
            write_falsify(&ctx.dir, &r)?;
            lines.push(format!("accumulation profile flatness ratio {}", r.flatness_ratio));
            for f in &r.flip_rates {
                lines.push(format!(
                    "{}: flip rate {:?} over {} pairs, mean KL {:e} bits",
                    f.precision.name(),
                    f.flip_rate,
                    f.n_pairs,
                    f.mean_kl
                ));
            }
        }
        "boundary" => {
            let r = ctx.campaign(&cfg.decode, &cfg.precisions)?;
            let mut results = Vec::new();
            for c in &r.conditions {
                let runs: Vec<RunPairReport> = r
                    .runs
                    .iter()
                    .filter(|x| x.precision == c.precision && x.strategy.name() == c.strategy)
                    .cloned()
                    .collect();
                let res = run_boundary_analysis(&runs, &cfg.boundary);
                let label = format!("{}:{}", c.precision.name(), c.strategy);
                lines.push(match &res {
                    Ok(b) => format!(
                        "{label}: r = {}, rho = {}, early>late p = {}",
                        b.all.pearson_r, b.all.spearman_rho, b.welch.p_value
                    ),
                    Err(e) => format!("{label}: {e}"),
                });
                results.push((label, res));
            }
            write_boundary(&ctx.dir, &results)?;
        }
        "patching" => {
            let pp = &cfg.patching;
            let examples = ctx.top_examples(pp.precision, pp.top_n)?;
            let modes = PatchMode::all(ctx.model.config().n_layers);
            let r = run_patching(&ctx.model, &examples, &modes, pp.max_steps, pp.precision)?;
            write_patching(&ctx.dir, &r)?;
            for m in [PatchMode::Cumulative, PatchMode::KvCache] {
                if let Some(v) = r.mean_recovery(m) {
                    lines.push(format!("{m}: mean recovery {v}%"));
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(lines)
}

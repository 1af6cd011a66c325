// SPDX-License-Identifier: MIT OR Apache-2.0

//! Campaign configuration. A campaign is reproducible from this alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::harness::{Corpus, Strategy};
use crate::model::{Model, ModelConfig, Weights};
use crate::precision::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub weights_seed: u64,
    /// Load weights from a manifest instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { config: ModelConfig::default(), weights_seed: 0, manifest: None }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        match &self.manifest {
            Some(path) => {
                let (cfg, w) = Weights::load(path)?;
                Model::new(cfg, w)
            }
            None => Model::init(self.config.clone(), self.weights_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub seed: u64,
    /// Read prompts from a JSONL file instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { n_prompts: 200, prompt_len: Corpus::DEFAULT_PROMPT_LEN, seed: 0, path: None }
    }
}

impl CorpusSpec {
    pub fn build(&self, vocab_size: usize) -> Result<Corpus> {
        match &self.path {
            Some(p) => Corpus::load(p),
            None => Corpus::generate(self.n_prompts, self.prompt_len, vocab_size, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub behavioral: bool,
    pub layer_drift: bool,
    pub falsify: bool,
    pub boundary: bool,
    pub patching: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { behavioral: true, layer_drift: true, falsify: true, boundary: true, patching: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerDriftParams {
    /// Number of top-KL examples.
    pub top_n: usize,
    pub precision: Precision,
    /// GQA ratios of the same-weights ablation.
    pub ratios: Vec<usize>,
    pub weight_seeds: usize,
    pub prompts_per_seed: usize,
}

impl Default for LayerDriftParams {
    fn default() -> Self {
        LayerDriftParams { top_n: 50, precision: Precision::Half16, ratios: vec![1, 2, 4, 8], weight_seeds: 30, prompts_per_seed: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FalsifyParams {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub profile_seed: u64,
    pub sim_layers: usize,
    pub gains: Vec<f64>,
    pub injections: Vec<f64>,
    pub kv_gap_tokens: usize,
    /// Precisions of the rerun sub-experiment.
    pub rerun_precisions: Vec<Precision>,
}

impl Default for FalsifyParams {
    fn default() -> Self {
        FalsifyParams {
            lengths: (1..=8).map(|i| 16 * i).collect(),
            trials: 1000,
            profile_seed: 42,
            sim_layers: 32,
            gains: vec![0.5, 1.0, 1.5, 2.0],
            injections: vec![0.0, 3.6e-4, 1e-3],
            kv_gap_tokens: 32,
            rerun_precisions: vec![Precision::Single32, Precision::Double64Oracle],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryParams {
    /// Each entry `t` adds a correlation over pairs with flip index > `t`.
    pub exclude_flip_at_most: Vec<usize>,
    pub min_diverged: usize,
    pub early_quantile: f64,
    pub late_quantile: f64,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        BoundaryParams { exclude_flip_at_most: vec![0, 3], min_diverged: 30, early_quantile: 1.0 / 3.0, late_quantile: 2.0 / 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingParams {
    pub top_n: usize,
    pub max_steps: usize,
    pub precision: Precision,
}

impl Default for PatchingParams {
    fn default() -> Self {
        PatchingParams { top_n: 50, max_steps: 32, precision: Precision::Half16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsParams {
    pub alpha: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_level: f64,
    pub bootstrap_seed: u64,
}

impl Default for StatsParams {
    fn default() -> Self {
        StatsParams { alpha: 0.05, bootstrap_resamples: 2000, bootstrap_level: 0.95, bootstrap_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub model: ModelSpec,
    pub corpus: CorpusSpec,
    pub decode: Vec<DecodeSpec>,
    pub seeds: Vec<u64>,
    pub precisions: Vec<Precision>,
    pub experiments: Toggles,
    pub layer_drift: LayerDriftParams,
    pub falsify: FalsifyParams,
    pub boundary: BoundaryParams,
    pub patching: PatchingParams,
    pub stats: StatsParams,
    /// Write per-path traces and probability rows.
    pub save_traces: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for CampaignConfig {
    /// 200 prompts × 3 seeds, greedy, 64 new tokens, toy model with R = 2.
    fn default() -> Self {
        CampaignConfig {
            model: ModelSpec::default(),
            corpus: CorpusSpec::default(),
            decode: vec![DecodeSpec { strategy: Strategy::Greedy, max_new_tokens: 64 }],
            seeds: vec![0, 1, 2],
            precisions: vec![Precision::Half16, Precision::Single32, Precision::Double64Oracle],
            experiments: Toggles::default(),
            layer_drift: LayerDriftParams::default(),
            falsify: FalsifyParams::default(),
            boundary: BoundaryParams::default(),
            patching: PatchingParams::default(),
            stats: StatsParams::default(),
            save_traces: false,
            output_dir: None,
        }
    }
}

impl CampaignConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: CampaignConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.config.validate()?;
        for d in &self.decode {
            d.strategy.validate()?;
            if d.max_new_tokens == 0 {
                return Err(Error::Config("max_new_tokens must be positive".into()));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.precisions.is_empty() {
            return Err(Error::Config("no precisions".into()));
        }
        if self.corpus.path.is_none() && self.corpus.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        let b = &self.boundary;
        if !(0.0 < b.early_quantile && b.early_quantile <= b.late_quantile && b.late_quantile < 1.0) {
            return Err(Error::Config("boundary quantiles must satisfy 0 < early <= late < 1".into()));
        }
        Ok(())
    }

    /// Stable JSON (struct fields in declaration order).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy weights and their on-disk form.
//!
//! Matrices are row-major `[in, out]` binary32, so a row vector times the
//! matrix is the layer's forward map. On disk a model is a JSON manifest
//! (tensor names, shapes, byte offsets) next to one little-endian blob.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{contract, io_err, Error, Result};
use crate::rng::{stream, Domain};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_mlp_in: Vec<f32>,
    pub w_mlp_out: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembedding: Vec<f32>,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Tensor {
    Embedding = 1,
    Wq = 2,
    Wk = 3,
    Wv = 4,
    Wo = 5,
    MlpIn = 6,
    MlpOut = 7,
    Unembedding = 8,
}

fn draw(seed: u64, t: Tensor, layer: usize, block: usize, n: usize, std: f64) -> Vec<f32> {
    let mut rng = stream(seed, Domain::Weights, &[t as u64, layer as u64, block as u64]);
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| rng.sample(dist) as f32).collect()
}

/// Key/value projections are drawn one head-column block at a time, so two
/// configs that differ only in `n_kv_heads` share their leading KV heads.
fn draw_kv(seed: u64, t: Tensor, layer: usize, cfg: &ModelConfig) -> Vec<f32> {
    let (rows, d) = (cfg.d_model, cfg.head_dim);
    let cols = cfg.kv_dim();
    let mut m = vec![0.0f32; rows * cols];
    for g in 0..cfg.n_kv_heads {
        let block = draw(seed, t, layer, g, rows * d, INIT_STD);
        for r in 0..rows {
            m[r * cols + g * d..r * cols + (g + 1) * d].copy_from_slice(&block[r * d..(r + 1) * d]);
        }
    }
    m
}

/// Normal(0, 0.02) weights; output projections scaled by `1/sqrt(2 n_layers)`;
/// unit norm scales; untied embedding and unembedding.
///
/// Everything except the key/value projections is independent of
/// `n_kv_heads`, so models at different GQA ratios built from the same seed
/// are a matched ablation.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    cfg.validate()?;
    let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let (dm, qd, md) = (cfg.d_model, cfg.q_dim(), cfg.mlp_dim());
    let layers = (0..cfg.n_layers)
        .map(|l| LayerWeights {
            attn_norm: vec![1.0; dm],
            wq: draw(seed, Tensor::Wq, l, 0, dm * qd, INIT_STD),
            wk: draw_kv(seed, Tensor::Wk, l, cfg),
            wv: draw_kv(seed, Tensor::Wv, l, cfg),
            wo: draw(seed, Tensor::Wo, l, 0, qd * dm, out_std),
            mlp_norm: vec![1.0; dm],
            w_mlp_in: draw(seed, Tensor::MlpIn, l, 0, dm * md, INIT_STD),
            w_mlp_out: draw(seed, Tensor::MlpOut, l, 0, md * dm, out_std),
        })
        .collect();
    Ok(Weights {
        token_embedding: draw(seed, Tensor::Embedding, 0, 0, cfg.vocab_size * dm, INIT_STD),
        layers,
        final_norm: vec![1.0; dm],
        unembedding: draw(seed, Tensor::Unembedding, 0, 0, dm * cfg.vocab_size, INIT_STD),
    })
}

/// One tensor entry of a weight manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// JSON manifest describing a weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: ModelConfig,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

impl Weights {
    fn tensors<'a>(&'a self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, &'a [f32])> {
        let (dm, qd, kd, md, v) = (cfg.d_model, cfg.q_dim(), cfg.kv_dim(), cfg.mlp_dim(), cfg.vocab_size);
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![("token_embedding".into(), vec![v, dm], &self.token_embedding)];
        for (l, lw) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            out.push((n("attn_norm"), vec![dm], &lw.attn_norm));
            out.push((n("wq"), vec![dm, qd], &lw.wq));
            out.push((n("wk"), vec![dm, kd], &lw.wk));
            out.push((n("wv"), vec![dm, kd], &lw.wv));
            out.push((n("wo"), vec![qd, dm], &lw.wo));
            out.push((n("mlp_norm"), vec![dm], &lw.mlp_norm));
            out.push((n("w_mlp_in"), vec![dm, md], &lw.w_mlp_in));
            out.push((n("w_mlp_out"), vec![md, dm], &lw.w_mlp_out));
        }
        out.push(("final_norm".into(), vec![dm], &self.final_norm));
        out.push(("unembedding".into(), vec![dm, v], &self.unembedding));
        out
    }

    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn save(&self, cfg: &ModelConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in self.tensors(cfg) {
            entries.push(TensorEntry { name, shape, offset: blob.len() });
            for x in data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = WeightManifest {
            config: cfg.clone(),
            dtype: "f32_le".into(),
            blob: BLOB_FILE.into(),
            tensors: entries,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
        let man_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&man_path, json + "\n").map_err(io_err(&man_path))?;
        Ok(())
    }

    /// Loads a model saved by [`Weights::save`]; `path` is the manifest or
    /// its directory.
    pub fn load(path: &Path) -> Result<(ModelConfig, Weights)> {
        let man_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
        let manifest: WeightManifest = serde_json::from_str(&text)?;
        let cfg = manifest.config.clone();
        cfg.validate()?;
        if manifest.dtype != "f32_le" {
            return Err(Error::Config(format!("unsupported dtype {}", manifest.dtype)));
        }
        let blob_path = man_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        // Rebuild through a template so names and shapes are checked.
        let mut w = Weights::zeros(&cfg);
        let expected: Vec<(String, Vec<usize>)> = w.tensors(&cfg).into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != manifest.tensors.len() {
            return Err(contract("manifest tensor count does not match config"));
        }
        let mut slots = w.tensors_mut();
        for ((entry, (name, shape)), slot) in manifest.tensors.iter().zip(&expected).zip(slots.iter_mut()) {
            if &entry.name != name || &entry.shape != shape {
                return Err(contract(format!("manifest entry {} does not match expected {name}", entry.name)));
            }
            let bytes = blob
                .get(entry.offset..entry.offset + 4 * slot.len())
                .ok_or_else(|| contract(format!("blob too short for {name}")))?;
            for (dst, chunk) in slot.iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok((cfg, w))
    }

    fn zeros(cfg: &ModelConfig) -> Weights {
        let (dm, qd, kd, md, v) = (cfg.d_model, cfg.q_dim(), cfg.kv_dim(), cfg.mlp_dim(), cfg.vocab_size);
        Weights {
            token_embedding: vec![0.0; v * dm],
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: vec![0.0; dm],
                    wq: vec![0.0; dm * qd],
                    wk: vec![0.0; dm * kd],
                    wv: vec![0.0; dm * kd],
                    wo: vec![0.0; qd * dm],
                    mlp_norm: vec![0.0; dm],
                    w_mlp_in: vec![0.0; dm * md],
                    w_mlp_out: vec![0.0; md * dm],
                })
                .collect(),
            final_norm: vec![0.0; dm],
            unembedding: vec![0.0; dm * v],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.token_embedding];
        for lw in &mut self.layers {
            out.push(&mut lw.attn_norm);
            out.push(&mut lw.wq);
            out.push(&mut lw.wk);
            out.push(&mut lw.wv);
            out.push(&mut lw.wo);
            out.push(&mut lw.mlp_norm);
            out.push(&mut lw.w_mlp_in);
            out.push(&mut lw.w_mlp_out);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembedding);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_weights(&cfg, 0).unwrap(), init_weights(&cfg, 0).unwrap());
        assert_ne!(init_weights(&cfg, 0).unwrap(), init_weights(&cfg, 1).unwrap());
    }

    #[test]
    fn wq_std_close_to_init_std() {
        let w = init_weights(&ModelConfig::default(), 0).unwrap();
        let xs = &w.layers[0].wq;
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.02).abs() < 0.2 * 0.02, "std = {std}");
    }

    #[test]
    fn output_projections_are_scaled() {
        let w = init_weights(&ModelConfig::default(), 0).unwrap();
        let rms = |xs: &[f32]| (xs.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        let ratio = rms(&w.layers[0].wo) / rms(&w.layers[0].wq);
        assert!((ratio - 1.0 / 8f64.sqrt()).abs() < 0.02, "ratio = {ratio}");
    }

    #[test]
    fn ratios_share_everything_but_extra_kv_heads() {
        let mha = init_weights(&ModelConfig::toy(8), 3).unwrap();
        let mqa = init_weights(&ModelConfig::toy(1), 3).unwrap();
        assert_eq!(mha.token_embedding, mqa.token_embedding);
        assert_eq!(mha.layers[1].wq, mqa.layers[1].wq);
        assert_eq!(mha.layers[1].w_mlp_out, mqa.layers[1].w_mlp_out);
        // kv head 0 columns agree
        for r in 0..256 {
            assert_eq!(&mha.layers[2].wk[r * 256..r * 256 + 32], &mqa.layers[2].wk[r * 32..r * 32 + 32]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = ModelConfig { n_layers: 2, ..ModelConfig::default() };
        let w = init_weights(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(&cfg, dir.path()).unwrap();
        let (cfg2, w2) = Weights::load(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let man: WeightManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(man.tensors[1].name, "layers.0.attn_norm");
        assert_eq!(man.tensors[1].offset, 512 * 256 * 4);
    }
}

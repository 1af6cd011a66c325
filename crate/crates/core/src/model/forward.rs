// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward passes with explicit precision and reduction order.
//!
//! Two drivers share one set of kernels:
//!
//! * [`WorkingModel::step`] advances one position against a [`KvCache`]
//!   (position-major, per-token K/V projection);
//! * [`WorkingModel::forward_full`] evaluates a whole sequence layer by layer
//!   with joint projections and no persistent cache.
//!
//! Each position's result depends only on positions at or before it and on
//! the reduction order, so both drivers give bit-identical results for the
//! same order. The cache-ON and cache-OFF paths differ in order only.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ROPE_THETA};
use super::kv_cache::KvCache;
use super::weights::{init_weights, Weights};
use crate::error::{contract, Result};
use crate::precision::{dot_raw, sum_raw, weighted_rows_raw, PackedMatrix, Precision, ReductionOrder};

/// A model: config, binary32 weights, and lazily built per-precision copies.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
    working: [OnceLock<WorkingModel>; 3],
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: Weights) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg, weights, working: Default::default() })
    }

    /// `init_weights(cfg, seed)` wrapped in a model.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let w = init_weights(&cfg, seed)?;
        Model::new(cfg, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Weights rounded to `p`, built on first use.
    pub fn working(&self, p: Precision) -> &WorkingModel {
        let slot = match p {
            Precision::Half16 => &self.working[0],
            Precision::Single32 => &self.working[1],
            Precision::Double64Oracle => &self.working[2],
        };
        slot.get_or_init(|| WorkingModel::build(&self.cfg, &self.weights, p))
    }
}

#[derive(Debug)]
struct WorkingLayer {
    attn_norm: Vec<f64>,
    // all matrices output-major: row r holds the weights of output r
    wq: PackedMatrix,
    wk: PackedMatrix,
    wv: PackedMatrix,
    wo: PackedMatrix,
    mlp_norm: Vec<f64>,
    w_in: PackedMatrix,
    w_out: PackedMatrix,
}

/// Weights transposed to output-major rows and rounded to one precision.
#[derive(Debug)]
pub struct WorkingModel {
    cfg: ModelConfig,
    precision: Precision,
    emb: Vec<f64>,
    layers: Vec<WorkingLayer>,
    final_norm: Vec<f64>,
    unemb: PackedMatrix,
    rope_cos: Vec<f64>,
    rope_sin: Vec<f64>,
    score_scale: f64,
}

fn transpose_round(m: &[f32], rows: usize, cols: usize, p: Precision) -> PackedMatrix {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = p.round(m[r * cols + c] as f64);
        }
    }
    PackedMatrix::new(out, cols, rows, p)
}

fn round_all(v: &[f32], p: Precision) -> Vec<f64> {
    v.iter().map(|&x| p.round(x as f64)).collect()
}

/// A residual-stream snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub layer_index: usize,
    pub position: usize,
    pub values: Vec<f64>,
}

/// Everything one position produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionRecord {
    pub position: usize,
    /// Binary32 logits, when requested.
    pub logits: Option<Vec<f32>>,
    /// Residual stream after each layer's attention sublayer.
    pub resid_mid: Vec<Vec<f64>>,
    /// Residual stream after each layer.
    pub resid_out: Vec<Vec<f64>>,
    /// `[layer][head][key position]` attention weights; rows span
    /// `0..=position`, zero outside the window. Empty unless captured.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl PositionRecord {
    pub fn hiddens(&self) -> Vec<HiddenState> {
        self.resid_out
            .iter()
            .enumerate()
            .map(|(l, v)| HiddenState { layer_index: l, position: self.position, values: v.clone() })
            .collect()
    }
}

/// An intervention applied during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardPatch {
    /// Per layer, a replacement for the residual stream after that layer at
    /// the position being decoded.
    pub residual: Vec<Option<Vec<f64>>>,
    /// Donor cache whose entries replace every freshly computed key/value
    /// the donor has a position for.
    pub kv_donor: Option<KvCache>,
}

impl ForwardPatch {
    fn residual_at(&self, layer: usize) -> Option<&[f64]> {
        self.residual.get(layer).and_then(|r| r.as_deref())
    }

    fn donor_kv(&self, layer: usize, pos: usize) -> Option<(&[f64], &[f64])> {
        let d = self.kv_donor.as_ref()?;
        (d.layer_len(layer) > pos).then(|| (d.key(layer, pos), d.value(layer, pos)))
    }
}

/// What [`WorkingModel::step`] should compute and keep.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOptions<'a> {
    pub logits: bool,
    pub capture_attention: bool,
    pub patch: Option<&'a ForwardPatch>,
}

/// Output of [`WorkingModel::forward_full`].
#[derive(Debug, Clone, PartialEq)]
pub struct FullForward {
    /// Binary32 logits per position.
    pub logits: Vec<Vec<f32>>,
    /// `[layer][position]` residual after the attention sublayer.
    pub resid_mid: Vec<Vec<Vec<f64>>>,
    /// `[layer][position]` residual after the layer.
    pub resid_out: Vec<Vec<Vec<f64>>>,
    /// `[layer][position][head][key position]`.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer]` keys, flat `[position][kv_dim]`.
    pub keys: Vec<Vec<f64>>,
    /// `[layer]` values, flat `[position][kv_dim]`.
    pub values: Vec<Vec<f64>>,
}

impl FullForward {
    pub fn hiddens(&self) -> Vec<HiddenState> {
        let mut out = Vec::new();
        for (l, layer) in self.resid_out.iter().enumerate() {
            for (t, v) in layer.iter().enumerate() {
                out.push(HiddenState { layer_index: l, position: t, values: v.clone() });
            }
        }
        out
    }
}

/// Output of [`WorkingModel::attention_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Residual stream after the attention sublayer, per position.
    pub outputs: Vec<HiddenState>,
    /// `[position][head][key position]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl WorkingModel {
    fn build(cfg: &ModelConfig, w: &Weights, p: Precision) -> Self {
        let (dm, qd, kd, md, v) = (cfg.d_model, cfg.q_dim(), cfg.kv_dim(), cfg.mlp_dim(), cfg.vocab_size);
        let layers = w
            .layers
            .iter()
            .map(|lw| WorkingLayer {
                attn_norm: round_all(&lw.attn_norm, p),
                wq: transpose_round(&lw.wq, dm, qd, p),
                wk: transpose_round(&lw.wk, dm, kd, p),
                wv: transpose_round(&lw.wv, dm, kd, p),
                wo: transpose_round(&lw.wo, qd, dm, p),
                mlp_norm: round_all(&lw.mlp_norm, p),
                w_in: transpose_round(&lw.w_mlp_in, dm, md, p),
                w_out: transpose_round(&lw.w_mlp_out, md, dm, p),
            })
            .collect();
        let stats = p.statistics();
        let half_d = cfg.head_dim / 2;
        let mut rope_cos = Vec::with_capacity(cfg.max_positions * half_d);
        let mut rope_sin = Vec::with_capacity(cfg.max_positions * half_d);
        for pos in 0..cfg.max_positions {
            for i in 0..half_d {
                let theta = pos as f64 * ROPE_THETA.powf(-2.0 * i as f64 / cfg.head_dim as f64);
                rope_cos.push(stats.round(theta.cos()));
                rope_sin.push(stats.round(theta.sin()));
            }
        }
        WorkingModel {
            cfg: cfg.clone(),
            precision: p,
            emb: round_all(&w.token_embedding, p),
            layers,
            final_norm: round_all(&w.final_norm, p),
            unemb: transpose_round(&w.unembedding, dm, v, p),
            rope_cos,
            rope_sin,
            score_scale: p.round(1.0 / (cfg.head_dim as f64).sqrt()),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.cfg.vocab_size {
            return Err(contract(format!("token id {token} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn check_position(&self, pos: usize) -> Result<()> {
        if pos >= self.cfg.max_positions {
            return Err(contract(format!("position {pos} beyond max_positions {}", self.cfg.max_positions)));
        }
        Ok(())
    }

    /// Embedding row of `token` in this precision.
    pub fn embedding(&self, token: u32) -> Result<Vec<f64>> {
        self.check_token(token)?;
        Ok(self.embed(token))
    }

    fn embed(&self, token: u32) -> Vec<f64> {
        let dm = self.cfg.d_model;
        self.emb[token as usize * dm..(token as usize + 1) * dm].to_vec()
    }

    fn rmsnorm(&self, x: &[f64], gain: &[f64], ord: ReductionOrder) -> Vec<f64> {
        let p = self.precision;
        let st = p.statistics();
        let ss = dot_raw(x, x, st, ord);
        let ms = st.round(ss / x.len() as f64);
        let den = st.round(ms + st.round(self.cfg.norm_eps));
        let inv = st.round(1.0 / den.sqrt());
        x.iter().zip(gain).map(|(&xi, &g)| p.round(st.round(xi * inv) * g)).collect()
    }

    fn matvec(&self, m: &PackedMatrix, x: &[f64], ord: ReductionOrder) -> Vec<f64> {
        let mut out = vec![0.0; m.n_out()];
        m.matvec(x, &mut out, self.precision, ord);
        out
    }

    fn rope(&self, v: &mut [f64], pos: usize) {
        let p = self.precision;
        let st = p.statistics();
        let d = self.cfg.head_dim;
        let half_d = d / 2;
        let cos = &self.rope_cos[pos * half_d..(pos + 1) * half_d];
        let sin = &self.rope_sin[pos * half_d..(pos + 1) * half_d];
        for head in v.chunks_exact_mut(d) {
            for i in 0..half_d {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let ra = st.round(st.round(a * cos[i]) - st.round(b * sin[i]));
                let rb = st.round(st.round(a * sin[i]) + st.round(b * cos[i]));
                head[2 * i] = p.round(ra);
                head[2 * i + 1] = p.round(rb);
            }
        }
    }

    /// Attention of one query position `pos` against keys/values stored flat
    /// `[position][kv_dim]`. Returns the concatenated head outputs and,
    /// optionally, the per-head weight rows.
    fn attend(
        &self,
        q: &[f64],
        keys: &[f64],
        values: &[f64],
        pos: usize,
        ord: ReductionOrder,
        window: Option<usize>,
        capture: bool,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p = self.precision;
        let st = p.statistics();
        let cfg = &self.cfg;
        let (d, kd, r) = (cfg.head_dim, cfg.kv_dim(), cfg.gqa_ratio());
        let lo = window.map_or(0, |w| (pos + 1).saturating_sub(w));
        let n = pos + 1 - lo;
        let mut out = vec![0.0; cfg.q_dim()];
        let mut rows = Vec::new();
        let mut scores = vec![0.0; n];
        let mut exps = vec![0.0; n];
        let mut w = vec![0.0; n];
        for h in 0..cfg.n_heads {
            let g = h / r;
            let qh = &q[h * d..(h + 1) * d];
            for (j, s) in scores.iter_mut().enumerate() {
                let k = &keys[(lo + j) * kd + g * d..(lo + j) * kd + (g + 1) * d];
                *s = p.round(dot_raw(qh, k, p, ord) * self.score_scale);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (e, &s) in exps.iter_mut().zip(&scores) {
                *e = st.round((s - m).exp());
            }
            let z = sum_raw(&exps, st, ord);
            for (wj, &e) in w.iter_mut().zip(&exps) {
                *wj = p.round(st.round(e / z));
            }
            weighted_rows_raw(&w, values, lo, kd, g * d, &mut out[h * d..(h + 1) * d], p, ord);
            if capture {
                let mut row = vec![0.0; pos + 1];
                row[lo..].copy_from_slice(&w);
                rows.push(row);
            }
        }
        (out, rows)
    }

    fn add(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let p = self.precision;
        x.iter().zip(y).map(|(&a, &b)| p.round(a + b)).collect()
    }

    fn mlp_block(&self, layer: usize, x: &[f64], ord: ReductionOrder) -> Vec<f64> {
        let p = self.precision;
        let lw = &self.layers[layer];
        let h = self.rmsnorm(x, &lw.mlp_norm, ord);
        let mut u = self.matvec(&lw.w_in, &h, ord);
        for ui in &mut u {
            *ui = p.round(*ui / (1.0 + (-*ui).exp()));
        }
        let down = self.matvec(&lw.w_out, &u, ord);
        self.add(x, &down)
    }

    fn logits(&self, x: &[f64], ord: ReductionOrder) -> Vec<f32> {
        let h = self.rmsnorm(x, &self.final_norm, ord);
        self.matvec(&self.unemb, &h, ord).into_iter().map(|v| v as f32).collect()
    }

    fn qkv(&self, layer: usize, x: &[f64], pos: usize, ord: ReductionOrder) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let lw = &self.layers[layer];
        let h = self.rmsnorm(x, &lw.attn_norm, ord);
        let mut q = self.matvec(&lw.wq, &h, ord);
        let mut k = self.matvec(&lw.wk, &h, ord);
        let v = self.matvec(&lw.wv, &h, ord);
        self.rope(&mut q, pos);
        self.rope(&mut k, pos);
        (q, k, v)
    }

    /// Keys and values of one layer for residual inputs `x`, before any
    /// attention: norm, projection, rotary encoding on keys.
    pub fn project_kv(&self, layer: usize, x: &[f64], pos: usize, ord: ReductionOrder) -> (Vec<f64>, Vec<f64>) {
        let lw = &self.layers[layer];
        let h = self.rmsnorm(x, &lw.attn_norm, ord);
        let mut k = self.matvec(&lw.wk, &h, ord);
        let v = self.matvec(&lw.wv, &h, ord);
        self.rope(&mut k, pos);
        (k, v)
    }

    /// Advances one position: embeds `token` at `cache.len()`, appends its
    /// keys/values to `cache` layer by layer, and returns the position's
    /// states.
    pub fn step(&self, token: u32, cache: &mut KvCache, ord: ReductionOrder, opts: StepOptions<'_>) -> Result<PositionRecord> {
        self.check_token(token)?;
        let pos = cache.len();
        self.check_position(pos)?;
        let cfg = &self.cfg;
        let mut x = self.embed(token);
        let mut resid_mid = Vec::with_capacity(cfg.n_layers);
        let mut resid_out = Vec::with_capacity(cfg.n_layers);
        let mut attention = Vec::new();
        for l in 0..cfg.n_layers {
            let (q, mut k, mut v) = self.qkv(l, &x, pos, ord);
            if let Some((dk, dv)) = opts.patch.and_then(|pt| pt.donor_kv(l, pos)) {
                k.copy_from_slice(dk);
                v.copy_from_slice(dv);
            }
            cache.push(l, &k, &v);
            let (heads, rows) = self.attend(
                &q,
                cache.layer_keys(l),
                cache.layer_values(l),
                pos,
                ord,
                cfg.sliding_window,
                opts.capture_attention,
            );
            let o = self.matvec(&self.layers[l].wo, &heads, ord);
            x = self.add(&x, &o);
            resid_mid.push(x.clone());
            x = self.mlp_block(l, &x, ord);
            if let Some(r) = opts.patch.and_then(|pt| pt.residual_at(l)) {
                x.copy_from_slice(r);
            }
            resid_out.push(x.clone());
            if opts.capture_attention {
                attention.push(rows);
            }
        }
        let logits = opts.logits.then(|| self.logits(&x, ord));
        Ok(PositionRecord { position: pos, logits, resid_mid, resid_out, attention })
    }

    /// One attention sublayer over a whole sequence of residual inputs
    /// (positions `0..inputs.len()`), with joint projections.
    pub fn attention_layer(
        &self,
        inputs: &[HiddenState],
        layer: usize,
        ord: ReductionOrder,
        window: Option<usize>,
    ) -> Result<AttentionOutput> {
        if inputs.is_empty() {
            return Err(contract("attention_layer: empty input"));
        }
        if layer >= self.cfg.n_layers {
            return Err(contract(format!("layer {layer} out of range")));
        }
        self.check_position(inputs.len() - 1)?;
        let xs: Vec<Vec<f64>> = inputs.iter().map(|h| h.values.clone()).collect();
        let (mid, weights, keys, values) = self.attention_sublayer(layer, &xs, ord, window, true, None);
        Ok(AttentionOutput {
            outputs: mid
                .into_iter()
                .enumerate()
                .map(|(t, v)| HiddenState { layer_index: layer, position: t, values: v })
                .collect(),
            weights,
            keys,
            values,
        })
    }

    #[allow(clippy::type_complexity)]
    fn attention_sublayer(
        &self,
        layer: usize,
        xs: &[Vec<f64>],
        ord: ReductionOrder,
        window: Option<usize>,
        capture: bool,
        patch: Option<&ForwardPatch>,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let n = xs.len();
        let kd = cfg.kv_dim();
        let mut qs = Vec::with_capacity(n);
        let mut keys = Vec::with_capacity(n * kd);
        let mut values = Vec::with_capacity(n * kd);
        for (t, x) in xs.iter().enumerate() {
            let (q, k, v) = self.qkv(layer, x, t, ord);
            match patch.and_then(|pt| pt.donor_kv(layer, t)) {
                Some((dk, dv)) => {
                    keys.extend_from_slice(dk);
                    values.extend_from_slice(dv);
                }
                None => {
                    keys.extend_from_slice(&k);
                    values.extend_from_slice(&v);
                }
            }
            qs.push(q);
        }
        let mut mid = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(if capture { n } else { 0 });
        for (t, x) in xs.iter().enumerate() {
            let (heads, rows) = self.attend(&qs[t], &keys, &values, t, ord, window, capture);
            let o = self.matvec(&self.layers[layer].wo, &heads, ord);
            mid.push(self.add(x, &o));
            if capture {
                weights.push(rows);
            }
        }
        (mid, weights, keys, values)
    }

    /// Full-prefix evaluation of `tokens`, layer by layer.
    ///
    /// A residual patch applies to the last position; a KV donor replaces
    /// keys/values at every position it covers.
    pub fn forward_full(&self, tokens: &[u32], ord: ReductionOrder, capture_attention: bool, patch: Option<&ForwardPatch>) -> Result<FullForward> {
        if tokens.is_empty() {
            return Err(contract("forward_full: empty token sequence"));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        self.check_position(tokens.len() - 1)?;
        let cfg = &self.cfg;
        let n = tokens.len();
        let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed(t)).collect();
        let mut out = FullForward {
            logits: Vec::with_capacity(n),
            resid_mid: Vec::with_capacity(cfg.n_layers),
            resid_out: Vec::with_capacity(cfg.n_layers),
            attention: Vec::new(),
            keys: Vec::with_capacity(cfg.n_layers),
            values: Vec::with_capacity(cfg.n_layers),
        };
        for l in 0..cfg.n_layers {
            let (mid, weights, keys, values) =
                self.attention_sublayer(l, &xs, ord, cfg.sliding_window, capture_attention, patch);
            xs = mid.iter().map(|x| self.mlp_block(l, x, ord)).collect();
            if let Some(r) = patch.and_then(|pt| pt.residual_at(l)) {
                xs[n - 1].copy_from_slice(r);
            }
            out.resid_mid.push(mid);
            out.resid_out.push(xs.clone());
            if capture_attention {
                out.attention.push(weights);
            }
            out.keys.push(keys);
            out.values.push(values);
        }
        out.logits = xs.iter().map(|x| self.logits(x, ord)).collect();
        Ok(out)
    }
}

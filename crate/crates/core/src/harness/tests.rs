// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::metrics::{attention_kl, flip_index, kl_divergence};
use crate::model::{KvCache, Model, ModelConfig, StepOptions};
use crate::precision::Precision;

fn model() -> Model {
    Model::init(ModelConfig::default(), 0).unwrap()
}

fn corpus_prompt(i: usize, len: usize) -> Vec<u32> {
    Corpus::generate(i + 1, len, 512, 0).unwrap().prompts.pop().unwrap()
}

fn argmax(p: &[f32]) -> usize {
    let mut b = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[b] {
            b = i;
        }
    }
    b
}

// realized max per-head attention KL at decode step 1, half16, corpus prompt 0
const HALF16_ATTN_KL_STEP1: f64 = 1.0536356672338754e-6;

#[test]
fn greedy_decode_is_deterministic() {
    let m = model();
    let prompt = corpus_prompt(0, 16);
    for path in [CachePath::CacheOn, CachePath::CacheOff] {
        let a = decode(&m, &prompt, &DecodeConfig::greedy(12), path, Precision::Half16).unwrap();
        let b = decode(&m, &prompt, &DecodeConfig::greedy(12), path, Precision::Half16).unwrap();
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.per_step_probs, b.per_step_probs);
        assert_eq!(a.generated.len(), a.per_step_probs.len());
        for row in &a.per_step_probs {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

fn memo_vs_literal(opts: DecodeOptions, dcfg: DecodeConfig, p: Precision) {
    let m = model();
    let prompt = corpus_prompt(1, 10);
    let memo = decode_with(&m, &prompt, &dcfg, CachePath::CacheOff, p, &opts).unwrap();
    let lit = DecodeOptions { off_mode: OffMode::Recompute, ..opts };
    let full = decode_with(&m, &prompt, &dcfg, CachePath::CacheOff, p, &lit).unwrap();
    assert_eq!(memo.generated, full.generated);
    assert_eq!(memo.per_step_probs, full.per_step_probs);
    assert_eq!(memo.per_layer_hiddens, full.per_layer_hiddens);
}

#[test]
fn memoized_off_matches_recompute() {
    let snaps = DecodeOptions { snapshot_steps: vec![0, 1, 5], capture_attention: true, ..Default::default() };
    memo_vs_literal(snaps.clone(), DecodeConfig::greedy(8), Precision::Half16);
    let topp = DecodeConfig { strategy: Strategy::top_p(), max_new_tokens: 8, seed: 4 };
    memo_vs_literal(snaps, topp, Precision::Single32);
}

#[test]
fn memoized_off_matches_recompute_under_patches() {
    let m = model();
    let prompt = corpus_prompt(1, 10);
    let keep = DecodeOptions { snapshot_steps: vec![0], keep_cache: true, ..Default::default() };
    let on = decode_with(&m, &prompt, &DecodeConfig::greedy(8), CachePath::CacheOn, Precision::Half16, &keep).unwrap();
    let donor_states = on.snapshot(0).unwrap().record.resid_out.clone();
    let residual = PatchPlan { residual_step: 0, residual: donor_states.into_iter().map(Some).collect(), kv_donor: None };
    memo_vs_literal(
        DecodeOptions { patch: Some(residual), snapshot_steps: vec![0, 1], ..Default::default() },
        DecodeConfig::greedy(8),
        Precision::Half16,
    );
    let kv = PatchPlan { kv_donor: on.cache.clone(), ..Default::default() };
    memo_vs_literal(DecodeOptions { patch: Some(kv), ..Default::default() }, DecodeConfig::greedy(8), Precision::Half16);
}

#[test]
fn oracle_greedy_paths_agree() {
    let m = model();
    let prompt = corpus_prompt(0, 16);
    let (on, off) = paired_decode(&m, &prompt, &DecodeConfig::greedy(24), Precision::Double64Oracle).unwrap();
    assert_eq!(on.generated, off.generated);
}

#[test]
fn half_paths_differ_every_step() {
    let m = model();
    let prompt = corpus_prompt(0, 32);
    let (on, off) = paired_decode(&m, &prompt, &DecodeConfig::greedy(16), Precision::Half16).unwrap();
    for (p, q) in on.per_step_probs.iter().zip(&off.per_step_probs) {
        assert!(kl_divergence(p, q).unwrap() > 0.0);
    }
}

#[test]
fn paired_greedy_equals_independent() {
    let m = model();
    let prompt = corpus_prompt(2, 12);
    let d = DecodeConfig::greedy(6);
    let (on, off) = paired_decode(&m, &prompt, &d, Precision::Half16).unwrap();
    let on2 = decode(&m, &prompt, &d, CachePath::CacheOn, Precision::Half16).unwrap();
    let off2 = decode(&m, &prompt, &DecodeConfig { seed: 99, ..d }, CachePath::CacheOff, Precision::Half16).unwrap();
    assert_eq!(on.generated, on2.generated);
    assert_eq!(off.generated, off2.generated);
    assert_eq!(off.per_step_probs, off2.per_step_probs);
}

#[test]
fn oracle_top_k_paths_agree() {
    let m = model();
    for i in 0..3 {
        let prompt = corpus_prompt(i, 16);
        let d = DecodeConfig { strategy: Strategy::top_k(), max_new_tokens: 16, seed: i as u64 };
        let (on, off) = paired_decode(&m, &prompt, &d, Precision::Double64Oracle).unwrap();
        assert_eq!(on.generated, off.generated);
    }
}

#[test]
fn greedy_flip_is_an_argmax_flip() {
    let m = model();
    let mut seen = 0;
    for i in 0..6 {
        let prompt = corpus_prompt(i, 32);
        let (on, off) = paired_decode(&m, &prompt, &DecodeConfig::greedy(32), Precision::Half16).unwrap();
        if let Some(f) = flip_index(&on.generated, &off.generated) {
            seen += 1;
            assert_ne!(argmax(&on.per_step_probs[f]), argmax(&off.per_step_probs[f]));
            for s in 0..f {
                assert_eq!(argmax(&on.per_step_probs[s]), argmax(&off.per_step_probs[s]));
            }
        }
    }
    println!("{seen} of 6 prompts flipped");
}

#[test]
fn cache_hash_chain_extends() {
    let m = model();
    let wm = m.working(Precision::Half16);
    let mut cache = KvCache::new(4, 64);
    let mut prev = cache.hash_chain().to_vec();
    for t in corpus_prompt(0, 8) {
        wm.step(t, &mut cache, CachePath::CacheOn.order(), StepOptions::default()).unwrap();
        assert!(cache.hash_chain().starts_with(&prev));
        assert!(cache.hash_chain().len() > prev.len());
        prev = cache.hash_chain().to_vec();
    }
}

#[test]
fn prefill_states_and_gap() {
    let m = model();
    let prompt = corpus_prompt(3, 16);
    let on = path_states(&m, &prompt, CachePath::CacheOn, Precision::Half16, 0, false).unwrap();
    let wm = m.working(Precision::Half16);
    let full = wm.forward_full(&prompt, CachePath::CacheOn.order(), false, None).unwrap();
    for (t, rec) in on.iter().enumerate() {
        assert_eq!(rec.resid_out[3], full.resid_out[3][t]);
    }
    let off = path_states(&m, &prompt, CachePath::CacheOff, Precision::Half16, 0, false).unwrap();
    let last = prompt.len() - 1;
    let gap = on[last].resid_out[3].iter().zip(&off[last].resid_out[3]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("prefill gap at last layer {gap:e}");
    assert!(gap > 0.0);
}

#[test]
fn truncation_recorded() {
    let mut cfg = ModelConfig::default();
    cfg.max_positions = 20;
    let m = Model::init(cfg, 0).unwrap();
    let prompt = corpus_prompt(0, 16);
    let t = decode(&m, &prompt, &DecodeConfig::greedy(10), CachePath::CacheOn, Precision::Single32).unwrap();
    assert!(t.truncated);
    assert_eq!(t.generated.len(), 5);
    let t = decode(&m, &prompt, &DecodeConfig::greedy(5), CachePath::CacheOff, Precision::Single32).unwrap();
    assert!(!t.truncated);
    assert!(decode(&m, &[600], &DecodeConfig::greedy(2), CachePath::CacheOn, Precision::Single32).is_err());
    assert!(decode(&m, &[], &DecodeConfig::greedy(2), CachePath::CacheOn, Precision::Single32).is_err());
}

#[test]
fn attention_kl_at_step_one() {
    let m = model();
    let prompt = corpus_prompt(0, 32);
    let opts = DecodeOptions { snapshot_steps: vec![1], capture_attention: true, ..Default::default() };
    let d = DecodeConfig::greedy(2);
    let on = decode_with(&m, &prompt, &d, CachePath::CacheOn, Precision::Half16, &opts).unwrap();
    let forced = DecodeOptions { forced: Some(on.generated.clone()), ..opts };
    let off = decode_with(&m, &prompt, &d, CachePath::CacheOff, Precision::Half16, &forced).unwrap();
    let (a, b) = (&on.snapshot(1).unwrap().record.attention, &off.snapshot(1).unwrap().record.attention);
    let mut worst = 0.0f64;
    for l in 0..4 {
        let k = attention_kl(&[a[l].clone()], &[b[l].clone()]).unwrap();
        worst = k.into_iter().fold(worst, f64::max);
    }
    println!("max head attention kl {worst:e}");
    assert!(worst > 1e-6);
    assert_eq!(worst, HALF16_ATTN_KL_STEP1);
}

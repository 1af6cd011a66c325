// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kvdrift::experiments::{CampaignConfig, DecodeSpec};
use kvdrift::harness::Strategy;

/// A campaign small enough to run every experiment in a few seconds.
pub fn small_config() -> CampaignConfig {
    let mut c = CampaignConfig::default();
    c.corpus.n_prompts = 12;
    c.corpus.prompt_len = 16;
    c.decode = vec![
        DecodeSpec { strategy: Strategy::Greedy, max_new_tokens: 16 },
        DecodeSpec { strategy: Strategy::top_k(), max_new_tokens: 8 },
    ];
    c.seeds = vec![0, 1];
    c.layer_drift.top_n = 8;
    c.layer_drift.weight_seeds = 3;
    c.layer_drift.prompts_per_seed = 1;
    c.falsify.trials = 50;
    c.falsify.lengths = vec![16, 32];
    c.boundary.min_diverged = 3;
    c.patching.top_n = 3;
    c.patching.max_steps = 8;
    c
}

/// Relative path -> bytes for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, fs::read(&p).unwrap());
        }
    }
}

pub fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap().install(f)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

/// Per-layer keys and values for every processed position, in the working
/// precision.
///
/// Entries are appended once and never rewritten, except through
/// [`KvCache::patch`]. Every append extends a hash chain, so the chain
/// after step `t` is a prefix of the chain after step `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    kv_dim: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    chain: Vec<u64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(mut h: u64, xs: &[f64]) -> u64 {
    for x in xs {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

impl KvCache {
    pub fn new(n_layers: usize, kv_dim: usize) -> Self {
        KvCache { kv_dim, keys: vec![Vec::new(); n_layers], values: vec![Vec::new(); n_layers], chain: Vec::new() }
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    /// Positions fully written (every layer).
    pub fn len(&self) -> usize {
        self.keys.iter().map(|k| k.len() / self.kv_dim).min().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.kv_dim
    }

    pub(crate) fn push(&mut self, layer: usize, k: &[f64], v: &[f64]) {
        debug_assert_eq!(k.len(), self.kv_dim);
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
        let prev = self.chain.last().copied().unwrap_or(FNV_OFFSET);
        self.chain.push(fnv(fnv(prev ^ layer as u64, k), v));
    }

    pub fn key(&self, layer: usize, pos: usize) -> &[f64] {
        &self.keys[layer][pos * self.kv_dim..(pos + 1) * self.kv_dim]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[f64] {
        &self.values[layer][pos * self.kv_dim..(pos + 1) * self.kv_dim]
    }

    pub(crate) fn layer_keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub(crate) fn layer_values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    /// Explicitly overwrites one entry. The hash chain records the patch as
    /// a new link.
    pub fn patch(&mut self, layer: usize, pos: usize, k: &[f64], v: &[f64]) {
        let d = self.kv_dim;
        self.keys[layer][pos * d..(pos + 1) * d].copy_from_slice(k);
        self.values[layer][pos * d..(pos + 1) * d].copy_from_slice(v);
        let prev = self.chain.last().copied().unwrap_or(FNV_OFFSET);
        self.chain.push(fnv(fnv(!prev ^ pos as u64, k), v));
    }

    /// One hash per write, in write order.
    pub fn hash_chain(&self) -> &[u64] {
        &self.chain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_extends_as_prefix() {
        let mut c = KvCache::new(2, 3);
        c.push(0, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        c.push(1, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        assert_eq!(c.len(), 1);
        let before = c.hash_chain().to_vec();
        c.push(0, &[0.5; 3], &[0.25; 3]);
        assert_eq!(c.len(), 1);
        c.push(1, &[0.5; 3], &[0.25; 3]);
        assert_eq!(c.len(), 2);
        assert!(c.hash_chain().starts_with(&before));
        assert_eq!(c.key(1, 1), &[0.5; 3]);
        assert_eq!(c.value(0, 0), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn patch_rewrites_entry() {
        let mut c = KvCache::new(1, 2);
        c.push(0, &[1.0, 1.0], &[2.0, 2.0]);
        c.patch(0, 0, &[3.0, 3.0], &[4.0, 4.0]);
        assert_eq!(c.key(0, 0), &[3.0, 3.0]);
        assert_eq!(c.hash_chain().len(), 2);
    }
}

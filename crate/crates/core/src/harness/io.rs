// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace serialization and the synthetic prompt corpus.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::decode::{CachePath, DecodeTrace};
use super::sampling::Strategy;
use crate::error::{contract, io_err, Error, Result};
use crate::precision::Precision;
use crate::rng::{stream, Domain};

/// Reference to probability rows in a side file: `rows` rows of `vocab`
/// little-endian binary32 values starting at byte `offset`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbsRef {
    pub file: String,
    pub offset: u64,
    pub rows: usize,
    pub vocab: usize,
}

/// JSONL form of a [`DecodeTrace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub path: CachePath,
    pub precision: Precision,
    pub strategy: Strategy,
    pub seed: u64,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub truncated: bool,
    /// First step where this trace's tokens differ from its partner's.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flip_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probs: Option<ProbsRef>,
}

impl DecodeTrace {
    pub fn record(&self, flip_index: Option<usize>, probs: Option<ProbsRef>) -> TraceRecord {
        TraceRecord {
            path: self.path,
            precision: self.precision,
            strategy: self.strategy,
            seed: self.seed,
            prompt: self.prompt.clone(),
            tokens: self.generated.clone(),
            truncated: self.truncated,
            flip_index,
            probs,
        }
    }
}

/// Appends probability rows to `w`, returning the number of bytes written.
pub fn write_probs<W: Write>(w: &mut W, rows: &[Vec<f32>]) -> Result<u64> {
    let mut n = 0u64;
    for row in rows {
        for &x in row {
            w.write_all(&x.to_le_bytes()).map_err(io_err("<probs>"))?;
        }
        n += 4 * row.len() as u64;
    }
    Ok(n)
}

/// Reads the rows a [`ProbsRef`] points at, resolving its file against `dir`.
pub fn read_probs(dir: &Path, r: &ProbsRef) -> Result<Vec<Vec<f32>>> {
    let path = dir.join(&r.file);
    let mut f = File::open(&path).map_err(io_err(&path))?;
    f.seek(SeekFrom::Start(r.offset)).map_err(io_err(&path))?;
    let mut buf = vec![0u8; 4 * r.rows * r.vocab];
    f.read_exact(&mut buf).map_err(io_err(&path))?;
    Ok(buf
        .chunks_exact(4 * r.vocab)
        .map(|row| row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        .collect())
}

/// Seeded uniform token sequences standing in for a prompt set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub prompts: Vec<Vec<u32>>,
}

impl Corpus {
    pub const DEFAULT_PROMPT_LEN: usize = 32;

    /// `n_prompts` prompts of `prompt_len` tokens drawn uniformly from
    /// `0..vocab_size`; prompt `i` depends only on `(seed, i)`.
    pub fn generate(n_prompts: usize, prompt_len: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if prompt_len == 0 || vocab_size == 0 {
            return Err(contract("corpus needs positive prompt length and vocabulary"));
        }
        let prompts = (0..n_prompts)
            .map(|i| {
                let mut rng = stream(seed, Domain::Corpus, &[i as u64]);
                (0..prompt_len).map(|_| rng.random_range(0..vocab_size as u32)).collect()
            })
            .collect();
        Ok(Corpus { prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// One JSON array of token ids per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let f = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        for p in &self.prompts {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(io_err(path))?;
        let mut prompts = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Vec<u32> = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            if p.is_empty() {
                return Err(Error::Config(format!("{} line {}: empty prompt", path.display(), i + 1)));
            }
            prompts.push(p);
        }
        Ok(Corpus { prompts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let c = Corpus::generate(5, 12, 512, 0).unwrap();
        assert!(c.prompts.iter().flatten().all(|&t| t < 512));
        assert_eq!(Corpus::generate(5, 12, 512, 0).unwrap(), c);
        assert_ne!(Corpus::generate(5, 12, 512, 1).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        c.save(&path).unwrap();
        assert_eq!(Corpus::load(&path).unwrap(), c);
    }

    #[test]
    fn prompt_depends_on_index_only() {
        let a = Corpus::generate(3, 8, 512, 9).unwrap();
        let b = Corpus::generate(10, 8, 512, 9).unwrap();
        assert_eq!(a.prompts[..], b.prompts[..3]);
    }

    #[test]
    fn probs_side_file() {
        let rows = vec![vec![0.25f32, 0.75], vec![1.0, 0.0], vec![0.5, 0.5]];
        let dir = tempfile::tempdir().unwrap();
        let mut f = File::create(dir.path().join("p.bin")).unwrap();
        let first = write_probs(&mut f, &rows[..1]).unwrap();
        write_probs(&mut f, &rows[1..]).unwrap();
        drop(f);
        let r = ProbsRef { file: "p.bin".into(), offset: first, rows: 2, vocab: 2 };
        assert_eq!(read_probs(dir.path(), &r).unwrap(), rows[1..]);
    }
}

//! Synthetic parallel data and JSONL ingestion.
//!
//! Generation only touches integers: a SplitMix64 stream seeded from the task
//! spec drives a Fisher-Yates shuffle for the token bijection and then the
//! lengths and tokens of each pair, each draw reduced with `next_u64() % n`.
//! The same `(spec, n)` gives byte-identical corpora on every platform.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paradigm::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: TokenId = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    MappedTranslation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::contract(format!(
                "vocab_size must be at least 4, got {}",
                self.vocab_size
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::contract("vocab_size does not fit a token id"));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::contract(format!(
                "need 1 <= len_min <= len_max, got {}..={}",
                self.len_min, self.len_max
            )));
        }
        Ok(())
    }

    pub fn content_size(&self) -> usize {
        self.vocab_size - FIRST_CONTENT as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Vec<TokenId>,
    /// EOS-terminated.
    pub target: Vec<TokenId>,
}

impl ParallelPair {
    /// Target without its final EOS.
    pub fn reference(&self) -> &[TokenId] {
        match self.target.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.target,
        }
    }
}

fn uniform(rng: &mut SplitMix64, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn draw_bijection(rng: &mut SplitMix64, vocab_size: usize) -> Vec<TokenId> {
    let mut sigma: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    let content = &mut sigma[FIRST_CONTENT as usize..];
    for i in (1..content.len()).rev() {
        let j = uniform(rng, i + 1);
        content.swap(i, j);
    }
    sigma
}

/// The token bijection a `MappedTranslation` spec uses. Indexed by token id;
/// reserved ids map to themselves.
pub fn bijection(spec: &SyntheticTaskSpec) -> Result<Vec<TokenId>> {
    spec.validate()?;
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    Ok(draw_bijection(&mut rng, spec.vocab_size))
}

/// Maps every token through `sigma`, then swaps adjacent pairs starting at
/// even indices. A trailing odd token stays in place.
pub fn apply_mapping(sigma: &[TokenId], source: &[TokenId]) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = source.iter().map(|&t| sigma[t as usize]).collect();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

/// Undoes [`apply_mapping`] given the same bijection.
pub fn invert_mapping(sigma: &[TokenId], target: &[TokenId]) -> Vec<TokenId> {
    let mut inverse = vec![0; sigma.len()];
    for (from, &to) in sigma.iter().enumerate() {
        inverse[to as usize] = from as TokenId;
    }
    let mut out = target.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out.iter().map(|&t| inverse[t as usize]).collect()
}

pub fn generate(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<ParallelPair>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("generate needs n >= 1"));
    }
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let sigma = draw_bijection(&mut rng, spec.vocab_size);
    let span = spec.len_max - spec.len_min + 1;
    let content = spec.content_size();
    let pairs = (0..n)
        .map(|_| {
            let len = spec.len_min + uniform(&mut rng, span);
            let source: Vec<TokenId> = (0..len)
                .map(|_| FIRST_CONTENT + uniform(&mut rng, content) as TokenId)
                .collect();
            let mut target = match spec.kind {
                TaskKind::Copy => source.clone(),
                TaskKind::MappedTranslation => apply_mapping(&sigma, &source),
            };
            target.push(EOS);
            ParallelPair { source, target }
        })
        .collect();
    Ok(pairs)
}

/// One draw of `train + held_out` pairs split in order, so both halves share
/// the bijection.
pub fn generate_split(
    spec: &SyntheticTaskSpec,
    train: usize,
    held_out: usize,
) -> Result<(Vec<ParallelPair>, Vec<ParallelPair>)> {
    let mut all = generate(spec, train + held_out)?;
    let test = all.split_off(train);
    Ok((all, test))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    source: Vec<u64>,
    target: Vec<u64>,
}

fn checked_ids(ids: &[u64], vocab: usize, line: usize, field: &str) -> Result<Vec<TokenId>> {
    ids.iter()
        .map(|&id| {
            if id >= vocab as u64 {
                return Err(Error::OutOfVocab {
                    id: id.min(u32::MAX as u64) as u32,
                    vocab,
                });
            }
            let id = id as TokenId;
            if id == PAD || id == BOS {
                return Err(Error::Parse {
                    line,
                    message: format!("reserved id {id} inside \"{field}\""),
                });
            }
            Ok(id)
        })
        .collect()
}

fn parse_line(text: &str, line: usize, vocab: usize) -> Result<ParallelPair> {
    let raw: RawPair = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let source = checked_ids(&raw.source, vocab, line, "source")?;
    let mut target = checked_ids(&raw.target, vocab, line, "target")?;
    if source.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty source".into(),
        });
    }
    if source.contains(&EOS) {
        return Err(Error::Parse {
            line,
            message: "EOS inside source".into(),
        });
    }
    if target.last() != Some(&EOS) {
        target.push(EOS);
    }
    if target[..target.len() - 1].contains(&EOS) {
        return Err(Error::Parse {
            line,
            message: "EOS before the end of target".into(),
        });
    }
    Ok(ParallelPair { source, target })
}

/// Parses a JSONL corpus. Lines are 1-based in errors; blank lines are skipped.
pub fn load_jsonl(path: &Path, vocab_size: usize) -> Result<Vec<ParallelPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        pairs.push(parse_line(&text, line_no, vocab_size)?);
    }
    Ok(pairs)
}

pub fn write_jsonl(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

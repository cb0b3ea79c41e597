//! Quality and latency metrics over decode outputs.
//!
//! BLEU is corpus-level BLEU-4 with uniform weights. A zero clipped-match
//! count for n >= 2 is smoothed to `1 / (total + 1)`; an order with no
//! hypothesis n-grams at all contributes a factor of 1; zero unigram matches
//! give a score of 0.
//!
//! Average lagging uses `AL = 1/tau * sum_{j <= tau} (g(j) - (j - 1) / gamma)`
//! where `tau` is the first step that has read the whole source (or the
//! hypothesis length if none has). AL takes `gamma = |reference| / |source|`,
//! the length-adaptive variant LAAL `gamma = max(|reference|, |hypothesis|) / |source|`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paradigm::TokenId;

/// Exact-position matches over the longer length; two empty sequences score 1.
pub fn token_accuracy(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
    let len = hyp.len().max(reference.len());
    if len == 0 {
        return 1.0;
    }
    let hits = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / len as f64
}

/// Mean sentence-level [`token_accuracy`].
pub fn corpus_accuracy(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_sizes(hyps.len(), refs.len())?;
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| token_accuracy(h, r))
        .sum::<f64>()
        / hyps.len() as f64)
}

fn check_sizes(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::DimensionMismatch {
            expected: refs,
            got: hyps,
        });
    }
    if hyps == 0 {
        return Err(Error::contract("metrics need a non-empty corpus"));
    }
    Ok(())
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 in `[0, 100]`.
pub fn corpus_bleu(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_sizes(hyps.len(), refs.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = match (matches[n], totals[n]) {
            (_, 0) => 1.0,
            (0, t) => 1.0 / (t as f64 + 1.0),
            (m, t) => m as f64 / t as f64,
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_sum.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceLatency {
    pub al: f64,
    pub laal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Means over sentences.
    pub al: f64,
    pub laal: f64,
    pub sentences: Vec<SentenceLatency>,
}

fn average_lagging(g: &[usize], source_len: usize, gamma: f64) -> f64 {
    let tau = g
        .iter()
        .position(|&gj| gj >= source_len)
        .map_or(g.len(), |j| j + 1);
    let sum: f64 = g[..tau]
        .iter()
        .enumerate()
        .map(|(j, &gj)| gj as f64 - j as f64 / gamma)
        .sum();
    sum / tau as f64
}

/// AL and LAAL of one sentence from its read schedule `g` (one entry per
/// emitted token).
pub fn lagging(g: &[usize], source_len: usize, ref_len: usize) -> Result<SentenceLatency> {
    if source_len == 0 {
        return Err(Error::contract("lagging needs a non-empty source"));
    }
    if g.is_empty() {
        return Err(Error::contract("lagging needs a non-empty trace"));
    }
    if ref_len == 0 {
        return Err(Error::contract("lagging needs a non-empty reference"));
    }
    let x = source_len as f64;
    Ok(SentenceLatency {
        al: average_lagging(g, source_len, ref_len as f64 / x),
        laal: average_lagging(g, source_len, ref_len.max(g.len()) as f64 / x),
    })
}

/// One `(g, source_len, ref_len)` triple per sentence.
pub fn corpus_lagging(items: &[(&[usize], usize, usize)]) -> Result<LatencyReport> {
    if items.is_empty() {
        return Err(Error::contract("metrics need a non-empty corpus"));
    }
    let sentences = items
        .iter()
        .map(|&(g, x, r)| lagging(g, x, r))
        .collect::<Result<Vec<_>>>()?;
    let n = sentences.len() as f64;
    Ok(LatencyReport {
        al: sentences.iter().map(|s| s.al).sum::<f64>() / n,
        laal: sentences.iter().map(|s| s.laal).sum::<f64>() / n,
        sentences,
    })
}

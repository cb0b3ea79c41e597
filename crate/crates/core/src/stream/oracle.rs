//! Cache-free reference decoder.
//!
//! Every step rebuilds the whole prefix (sources read so far plus the target
//! inputs) as an arrangement and runs a full forward pass in which each
//! attention score is evaluated from a pairwise distance matrix. Nothing is
//! carried over between steps.

use ndarray::Array2;

use super::{pick, DecodeOptions, DecodeTrace, FinishReason};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::paradigm::{arrange, ArrangedSequence, ParadigmId, Role, TokenId, WaitkSchedule};
use crate::rope::distance_matrix;
use crate::scalar::Scalar;

/// Tokens, mask and pairwise distances of one prefix, plus the row whose
/// output predicts the next token.
struct Prefix {
    arr: ArrangedSequence,
    distances: Array2<f64>,
}

fn reads(opts: &DecodeOptions, source_len: usize, rows: usize) -> Vec<usize> {
    (0..rows)
        .map(|j| match opts.paradigm {
            ParadigmId::BatchOffline => source_len,
            _ => (opts.k + j).min(source_len),
        })
        .collect()
}

fn prefix(opts: &DecodeOptions, source: &[TokenId], target: &[TokenId]) -> Result<Prefix> {
    let rows = target.len();
    let g = reads(opts, source.len(), rows);
    let seen = g[rows - 1];
    let src = &source[..seen];
    let removal = opts.removal;
    match opts.paradigm {
        ParadigmId::BatchAllRe => {
            // Every target row has just been recomputed against all `seen`
            // sources at contiguous positions.
            let schedule = WaitkSchedule::offline(seen, rows);
            let mut arr = arrange(ParadigmId::BatchOffline, &schedule, opts.phi, src, target)?;
            arr.remove_positions(removal);
            let distances = distance_matrix(&arr.position_values());
            Ok(Prefix { arr, distances })
        }
        ParadigmId::BatchPosRe => {
            // Each target row keeps the hidden states it computed when it was
            // fed: row j saw sources at 0..g[j] and targets at g[j] + 0..=j.
            let schedule = WaitkSchedule::from_reads(opts.k, seen, g.clone())?;
            let mut arr = arrange(ParadigmId::BatchPosRe, &schedule, opts.phi, src, target)?;
            arr.remove_positions(removal);
            let src_pos = |i: usize| {
                if removal.removes(Role::Source) {
                    0.0
                } else {
                    i as f64
                }
            };
            let tgt_pos = |at: usize, j: usize| {
                if removal.removes(Role::Target) {
                    0.0
                } else {
                    (g[at] + j) as f64
                }
            };
            let n = arr.len();
            let mut distances = Array2::zeros((n, n));
            for i in 0..seen {
                for i2 in 0..seen {
                    distances[[arr.source_row(i), arr.source_row(i2)]] = src_pos(i) - src_pos(i2);
                }
            }
            for j in 0..rows {
                let r = arr.target_row(j);
                for i in 0..seen {
                    distances[[r, arr.source_row(i)]] = tgt_pos(j, j) - src_pos(i);
                }
                for j2 in 0..rows {
                    distances[[r, arr.target_row(j2)]] = tgt_pos(j, j) - tgt_pos(j, j2);
                }
            }
            Ok(Prefix { arr, distances })
        }
        paradigm => {
            let schedule = match paradigm {
                ParadigmId::BatchOffline => WaitkSchedule::offline(seen, rows),
                _ => WaitkSchedule::from_reads(opts.k, seen, g)?,
            };
            let mut arr = arrange(paradigm, &schedule, opts.phi, src, target)?;
            arr.remove_positions(removal);
            let distances = distance_matrix(&arr.position_values());
            Ok(Prefix { arr, distances })
        }
    }
}

/// Reference decoding with the same trace contract as [`super::decode`].
/// Recorded step timings are the cost of each full-prefix pass.
pub fn oracle_decode<T: Scalar>(
    model: &Model<T>,
    opts: &DecodeOptions,
    source: &[TokenId],
) -> Result<DecodeTrace> {
    if source.is_empty() {
        return Err(Error::contract("cannot decode an empty source"));
    }
    if opts.k == 0 && opts.paradigm != ParadigmId::BatchOffline {
        return Err(Error::contract("wait-k requires k >= 1"));
    }
    let cap = opts.cap(source.len());
    let mut target = vec![BOS];
    let mut trace = DecodeTrace {
        tokens: Vec::new(),
        g: Vec::new(),
        step_seconds: Vec::new(),
        finish: FinishReason::LengthCap,
        step_logits: opts.record_logits.then(Vec::new),
    };
    loop {
        let start = std::time::Instant::now();
        let p = prefix(opts, source, &target)?;
        let logits = model.forward_relative(&p.arr.tokens, &p.arr.attn_mask, &p.distances)?;
        let row: Vec<f64> = logits
            .row(p.arr.next_token_row())
            .iter()
            .map(|x| x.f64())
            .collect();
        let token = pick(&row, opts.forced_len.is_some());
        if let Some(all) = trace.step_logits.as_mut() {
            all.push(row);
        }
        if token == EOS {
            trace.finish = FinishReason::Eos;
            break;
        }
        trace.tokens.push(token);
        trace.g.push(p.arr.source_len());
        trace.step_seconds.push(start.elapsed().as_secs_f64());
        if trace.tokens.len() >= cap {
            trace.finish = FinishReason::LengthCap;
            break;
        }
        target.push(token);
    }
    Ok(trace)
}

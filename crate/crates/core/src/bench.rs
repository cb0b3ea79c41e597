//! Wall-clock and operation-count comparison of decoding modes.
//!
//! Every configuration decodes a fixed pseudo-random source with the target
//! length forced to the source length, so all paradigms do the same number of
//! writes. For each source length every `(paradigm, k)` pair takes a turn, one
//! sample each per repetition, after one discarded warmup run apiece. A sample
//! repeats a short decode until it spans at least 0.2 s and reports the mean;
//! timings are the medians of the samples. Operation counts come from the
//! session counters and are exact.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::corpus::FIRST_CONTENT;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::paradigm::{ParadigmId, TokenId};
use crate::scalar::{Precision, Scalar};
use crate::stream::{decode_counted, DecodeOptions, OpCounters};

pub const MIN_REPS: usize = 3;

pub const CSV_HEADER: &str =
    "paradigm,k,source_len,target_len,reps,total_seconds,tokens_per_second,\
attention_ops,rotation_ops,recompute_ops,total_ops,speedup_vs_all_re,op_speedup_vs_all_re,mismatch";

/// The small fp32 model used for timing.
pub fn tiny_bench_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        vocab_size: 64,
        max_positions: 4096,
        precision: Precision::Fp32,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub paradigms: Vec<ParadigmId>,
    pub k_list: Vec<usize>,
    pub source_lengths: Vec<usize>,
    pub repetitions: usize,
    /// Seed for the synthetic source sentences.
    pub seed: u64,
    /// Paradigm and k the model was trained for, if any; other
    /// configurations are flagged as mismatched.
    pub trained_for: Option<(ParadigmId, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub paradigm: ParadigmId,
    pub k: usize,
    pub source_len: usize,
    pub target_len: usize,
    pub reps: usize,
    /// Median seconds for one full decode.
    pub total_seconds: f64,
    pub tokens_per_second: f64,
    pub counters: OpCounters,
    /// Median-time ratio of the re-encoding baseline to this row.
    pub speedup_vs_all_re: f64,
    pub op_speedup_vs_all_re: f64,
    pub mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn find(&self, paradigm: ParadigmId, k: usize, source_len: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.paradigm == paradigm && r.k == k && r.source_len == source_len)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench_source(vocab: usize, len: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ len as u64);
    (0..len)
        .map(|_| rng.gen_range(FIRST_CONTENT..vocab as TokenId))
        .collect()
}

struct Measurement {
    seconds: f64,
    counters: OpCounters,
}

/// Short decodes are repeated within one timed sample until it lasts about
/// this long, so scheduler noise averages out.
const MIN_SAMPLE_SECONDS: f64 = 0.2;

/// Times every `(paradigm, k)` pair on the same source, one repetition of
/// each in turn, so a slow spell on the machine hits all of them rather than
/// one.
fn measure_together<T: Scalar>(
    model: &Model<T>,
    runs: &[(ParadigmId, usize)],
    source: &[TokenId],
    reps: usize,
) -> Result<Vec<Measurement>> {
    let opts: Vec<DecodeOptions> = runs
        .iter()
        .map(|&(p, k)| options(p, k, source.len()))
        .collect();
    let mut counters = Vec::with_capacity(opts.len());
    let mut iters = Vec::with_capacity(opts.len());
    for o in &opts {
        let start = Instant::now();
        let (_, c) = decode_counted(model, o, source)?;
        let warm = start.elapsed().as_secs_f64();
        counters.push(c);
        iters.push(((MIN_SAMPLE_SECONDS / warm.max(1e-9)).ceil() as usize).max(1));
    }
    let mut times = vec![Vec::with_capacity(reps); opts.len()];
    for _ in 0..reps {
        for ((o, ts), &it) in opts.iter().zip(&mut times).zip(&iters) {
            let start = Instant::now();
            for _ in 0..it {
                decode_counted(model, o, source)?;
            }
            ts.push(start.elapsed().as_secs_f64() / it as f64);
        }
    }
    Ok(times
        .into_iter()
        .zip(counters)
        .map(|(ts, counters)| Measurement {
            seconds: median(ts),
            counters,
        })
        .collect())
}

/// Measures every `(paradigm, k, source_len)` combination and reports them in
/// that nesting order. The re-encoding baseline is measured for each
/// `(k, source_len)` even when it is not among the requested paradigms.
pub fn run_bench<T: Scalar>(model: &Model<T>, spec: &BenchSpec) -> Result<BenchReport> {
    if spec.repetitions < MIN_REPS {
        return Err(Error::contract(format!(
            "benchmarks need at least {MIN_REPS} repetitions, got {}",
            spec.repetitions
        )));
    }
    if spec.k_list.contains(&0) || spec.source_lengths.contains(&0) {
        return Err(Error::contract("k and source lengths must be positive"));
    }
    let mut timed = vec![ParadigmId::BatchAllRe];
    timed.extend(
        spec.paradigms
            .iter()
            .filter(|&&p| p != ParadigmId::BatchAllRe),
    );
    let runs: Vec<(ParadigmId, usize)> = spec
        .k_list
        .iter()
        .flat_map(|&k| timed.iter().map(move |&p| (p, k)))
        .collect();
    let mut measured = Vec::new();
    for &n in &spec.source_lengths {
        let source = bench_source(model.config.vocab_size, n, spec.seed);
        log::info!("bench n={n}");
        let ms = measure_together(model, &runs, &source, spec.repetitions)?;
        measured.extend(runs.iter().zip(ms).map(|(&(p, k), m)| ((p, k, n), m)));
    }
    let get = |key| {
        &measured
            .iter()
            .find(|(kk, _)| *kk == key)
            .expect("measured")
            .1
    };
    let mut rows = Vec::new();
    for &paradigm in &spec.paradigms {
        for &k in &spec.k_list {
            for &n in &spec.source_lengths {
                let base = get((ParadigmId::BatchAllRe, k, n));
                let m = get((paradigm, k, n));
                let mismatch = spec.trained_for.is_some_and(|(p, tk)| {
                    p != paradigm || (paradigm != ParadigmId::BatchOffline && tk != k)
                });
                rows.push(BenchRow {
                    paradigm,
                    k,
                    source_len: n,
                    target_len: n,
                    reps: spec.repetitions,
                    total_seconds: m.seconds,
                    tokens_per_second: n as f64 / m.seconds,
                    counters: m.counters,
                    speedup_vs_all_re: if paradigm == ParadigmId::BatchAllRe {
                        1.0
                    } else {
                        base.seconds / m.seconds
                    },
                    op_speedup_vs_all_re: base.counters.total() as f64 / m.counters.total() as f64,
                    mismatch,
                });
            }
        }
    }
    Ok(BenchReport { rows })
}

fn options(paradigm: ParadigmId, k: usize, n: usize) -> DecodeOptions {
    let mut opts = DecodeOptions::new(paradigm, k);
    opts.forced_len = Some(n);
    opts
}

pub fn report_csv(report: &BenchReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let c = &r.counters;
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.3},{},{},{},{},{:.4},{:.4},{}\n",
            r.paradigm,
            r.k,
            r.source_len,
            r.target_len,
            r.reps,
            r.total_seconds,
            r.tokens_per_second,
            c.attention_ops,
            c.rotation_ops,
            c.recompute_ops,
            c.total(),
            r.speedup_vs_all_re,
            r.op_speedup_vs_all_re,
            r.mismatch
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, report: &BenchReport) -> Result<()> {
    fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

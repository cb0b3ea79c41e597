//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. Exits
//! non-zero when any criterion fails. Set `STREAMATTN_ACCEPT` to a
//! comma-separated list of criterion numbers to run a subset.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use streamattn::analysis::{gamma_transform, normalize_columns};
use streamattn::bench::{run_bench, tiny_bench_config, BenchSpec};
use streamattn::experiment::{run_experiment, ExperimentConfig, ExperimentResult};
use streamattn::metrics::lagging;
use streamattn::model::{Model, ModelConfig};
use streamattn::paradigm::{
    arrange, waitk_schedule, ArrangedSequence, ParadigmId, PositionRemoval, Role, TokenId,
    WaitkSchedule,
};
use streamattn::rope::{relative_score, rotation_apply, PositionId, RotaryParams};
use streamattn::stream::{decode, oracle_decode, DecodeOptions, DecodeTrace};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1. Rotated dot products equal the relative score; shifts and norms.
fn rotary_identity() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let (mut worst_rel, mut worst_shift, mut worst_norm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let dim = 2 * rng.gen_range(1..=32);
        let base = [10.0, 100.0, 10_000.0][rng.gen_range(0..3)];
        let params = RotaryParams::new(dim, base).unwrap();
        let (q, k) = (gaussian(&mut rng, dim), gaussian(&mut rng, dim));
        let n = PositionId::new(rng.gen_range(0.0..512.0)).unwrap();
        let m = PositionId::new(rng.gen_range(0.0..512.0)).unwrap();
        let qn = rotation_apply(&params, &q, n).unwrap();
        let km = rotation_apply(&params, &k, m).unwrap();
        let rotated = dot(&qn, &km);
        let rel = relative_score(&params, &q, &k, n, m).unwrap();
        worst_rel = worst_rel.max((rotated - rel).abs());
        let delta = rng.gen_range(0.0..256.0);
        let shifted = relative_score(
            &params,
            &q,
            &k,
            n.shifted(delta).unwrap(),
            m.shifted(delta).unwrap(),
        )
        .unwrap();
        worst_shift = worst_shift.max((shifted - rel).abs());
        worst_norm = worst_norm.max((dot(&qn, &qn).sqrt() - dot(&q, &q).sqrt()).abs());
    }
    let tol = 1e-9;
    outcome(
        worst_rel <= tol && worst_shift <= tol && worst_norm <= tol,
        format!("1000 cases: max |rotated - relative| {worst_rel:.1e}, shift {worst_shift:.1e}, norm {worst_norm:.1e} (tol 1e-9)"),
    )
}

/// Independent statement of which sources a target may see.
fn reads(k: usize, m: usize, j: usize) -> usize {
    (k + j).min(m)
}

fn visible(arr: &ArrangedSequence, row: usize, role: Role) -> Vec<usize> {
    let rows = match role {
        Role::Source => arr.source_rows(),
        Role::Target => arr.target_rows(),
    };
    rows.iter()
        .enumerate()
        .filter(|(_, &c)| arr.attn_mask.allowed(row, c))
        .map(|(i, _)| i)
        .collect()
}

fn layout_errors(p: ParadigmId, k: usize, m: usize, n: usize) -> Vec<String> {
    let mut errs = Vec::new();
    let src: Vec<TokenId> = (0..m as TokenId).map(|i| 3 + i).collect();
    let tgt: Vec<TokenId> = (0..n as TokenId).map(|i| 30 + i).collect();
    let schedule = match p {
        ParadigmId::BatchOffline => WaitkSchedule::offline(m, n),
        _ => waitk_schedule(k, m, n).unwrap(),
    };
    let arr = arrange(p, &schedule, PositionId::ZERO, &src, &tgt).unwrap();
    let tag = format!("{p} k={k} M={m} N={n}");
    for r in 0..arr.len() {
        if !arr.attn_mask.allowed(r, r) {
            errs.push(format!("{tag}: row {r} does not attend itself"));
        }
    }
    if p.isolates_source() {
        for i in 0..m {
            if !visible(&arr, arr.source_row(i), Role::Target).is_empty() {
                errs.push(format!("{tag}: source {i} sees a target"));
            }
            if visible(&arr, arr.source_row(i), Role::Source) != (0..=i).collect::<Vec<_>>() {
                errs.push(format!("{tag}: source {i} prefix"));
            }
        }
        for j in 0..n {
            let row = arr.target_row(j);
            if visible(&arr, row, Role::Source) != (0..reads(k, m, j)).collect::<Vec<_>>() {
                errs.push(format!("{tag}: target {j} sources"));
            }
            if visible(&arr, row, Role::Target) != (0..=j).collect::<Vec<_>>() {
                errs.push(format!("{tag}: target {j} targets"));
            }
        }
    }
    match p {
        ParadigmId::Interleaved => {
            for r in 0..arr.len() {
                for c in 0..arr.len() {
                    if arr.attn_mask.allowed(r, c) != (c <= r) {
                        errs.push(format!("{tag}: not lower-triangular at ({r},{c})"));
                    }
                }
                // The row emitting target t_m has read min(k + m - 1, M) sources.
                if let Some(label) = arr.labels[r] {
                    let mth = tgt.iter().position(|&t| t == label).unwrap();
                    let want = reads(k, m, mth - 1);
                    if visible(&arr, r, Role::Source) != (0..want).collect::<Vec<_>>() {
                        errs.push(format!(
                            "{tag}: predictor of target {mth} sees wrong sources"
                        ));
                    }
                }
            }
        }
        ParadigmId::BatchOffline => {
            let pos = arr.position_values();
            if pos != (0..m + n).map(|i| i as f64).collect::<Vec<_>>() {
                errs.push(format!("{tag}: offline positions"));
            }
            for j in 0..n {
                if visible(&arr, arr.target_row(j), Role::Source).len() != m {
                    errs.push(format!("{tag}: offline target {j} misses sources"));
                }
            }
            let group = arrange(
                ParadigmId::GroupStream,
                &waitk_schedule(k, m, n).unwrap(),
                PositionId::from_index(m),
                &src,
                &tgt,
            )
            .unwrap();
            if group.position_values() != pos {
                errs.push(format!(
                    "{tag}: group with phi = M differs from offline positions"
                ));
            }
        }
        ParadigmId::BatchPosRe => {
            let all = arrange(
                ParadigmId::BatchAllRe,
                &schedule,
                PositionId::ZERO,
                &src,
                &tgt,
            )
            .unwrap();
            if all.attn_mask != arr.attn_mask || all.positions != arr.positions {
                errs.push(format!("{tag}: pos-re and all-re layouts differ"));
            }
        }
        _ => {}
    }
    errs
}

/// 2. Exhaustive layout invariants.
fn layout_suite() -> Outcome {
    let mut errs = Vec::new();
    let mut count = 0;
    for p in ParadigmId::ALL {
        for k in [1, 3, 5, 7] {
            for m in 1..=16 {
                for n in 1..=16 {
                    errs.extend(layout_errors(p, k, m, n));
                    count += 1;
                }
            }
        }
    }
    outcome(
        errs.is_empty(),
        format!(
            "{count} layouts checked, {} violations{}",
            errs.len(),
            errs.first()
                .map(|e| format!(" (first: {e})"))
                .unwrap_or_default()
        ),
    )
}

/// 3. Central differences over every coordinate of every tensor.
fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        d_model: 8,
        vocab_size: 11,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::init(cfg, 7).unwrap();
    let s = waitk_schedule(2, 4, 4).unwrap();
    let arr = arrange(
        ParadigmId::GroupStream,
        &s,
        PositionId::ZERO,
        &[3, 4, 5, 6],
        &[1, 7, 8, 2],
    )
    .unwrap();
    let (_, grad) = model.backward(&arr).unwrap();
    let analytic: Vec<Vec<f64>> = grad
        .tensors()
        .into_iter()
        .map(|t| t.data.to_vec())
        .collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (ti, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params.tensors()[ti].data[i];
            probe.params.tensors_mut()[ti][i] = orig + H;
            let plus = probe.loss(&arr).unwrap();
            probe.params.tensors_mut()[ti][i] = orig - H;
            let minus = probe.loss(&arr).unwrap();
            probe.params.tensors_mut()[ti][i] = orig;
            let num = (plus - minus) / (2.0 * H);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            coords += 1;
        }
    }
    outcome(
        worst <= 1e-4,
        format!(
            "{coords} coordinates in {} tensors, max relative error {worst:.2e} (tol 1e-4)",
            analytic.len()
        ),
    )
}

fn logit_gap(a: &DecodeTrace, b: &DecodeTrace) -> f64 {
    let (la, lb) = (
        a.step_logits.as_ref().unwrap(),
        b.step_logits.as_ref().unwrap(),
    );
    if la.len() != lb.len() {
        return f64::INFINITY;
    }
    la.iter()
        .flatten()
        .zip(lb.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// 4. Incremental decoding against the full-prefix oracle.
fn oracle_equivalence() -> Outcome {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        vocab_size: 11,
        ..ModelConfig::default()
    };
    let mut mismatched = Vec::new();
    let mut worst = 0.0f64;
    for p in ParadigmId::ALL {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(40 + p as u64);
        for case in 0..100u64 {
            let model = Model::<f64>::init(cfg, 1000 * p as u64 + case).unwrap();
            let len = rng.gen_range(1..=12);
            let source: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..11)).collect();
            let mut opts = DecodeOptions::new(p, rng.gen_range(1..=6)).recording();
            if p == ParadigmId::GroupStream {
                opts.phi = PositionId::new(rng.gen_range(0.0..20.0)).unwrap();
            }
            if rng.gen_bool(0.5) {
                opts.forced_len = Some(rng.gen_range(1..=2 * len + 2));
            }
            let fast = decode(&model, &opts, &source).unwrap();
            let slow = oracle_decode(&model, &opts, &source).unwrap();
            let gap = logit_gap(&fast, &slow);
            worst = worst.max(gap);
            if fast.tokens != slow.tokens || fast.g != slow.g || gap > 1e-12 {
                mismatched.push(format!("{p}#{case}"));
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        format!(
            "600 instances (100 per paradigm), {} mismatches, max logit gap {worst:.1e} (tol 1e-12){}",
            mismatched.len(),
            mismatched.first().map(|m| format!(", first {m}")).unwrap_or_default()
        ),
    )
}

const SEEDS: [u64; 3] = [1, 2, 3];

/// Runs each desk-scale configuration once and remembers the result.
#[derive(Default)]
struct Runs {
    cache: HashMap<String, ExperimentResult>,
}

impl Runs {
    fn accuracy(&mut self, cfg: &ExperimentConfig) -> f64 {
        let key = serde_json::to_string(cfg).unwrap();
        if let Some(r) = self.cache.get(&key) {
            return r.accuracy;
        }
        let t = Instant::now();
        let r = run_experiment(cfg).unwrap();
        eprintln!(
            "    run {} k={} phi={} removal={:?} seed={}: accuracy {:.2}, bleu {:.2}, loss {:.4} ({:.0}s)",
            cfg.train.paradigm,
            cfg.train.k,
            cfg.train.phi.value(),
            cfg.train.removal,
            cfg.train.seed,
            r.accuracy,
            r.bleu,
            r.final_loss,
            t.elapsed().as_secs_f64()
        );
        let acc = r.accuracy;
        self.cache.insert(key, r);
        acc
    }

    fn mean(&mut self, base: &ExperimentConfig) -> f64 {
        SEEDS
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.train.seed = s;
                self.accuracy(&c)
            })
            .sum::<f64>()
            / SEEDS.len() as f64
    }
}

fn base(paradigm: ParadigmId, k: usize) -> ExperimentConfig {
    ExperimentConfig::default().with_run(paradigm, k, SEEDS[0])
}

/// 5. Removing input-attention mismatch helps; position re-encoding does not.
fn mismatch_ordering(runs: &mut Runs) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [1, 3] {
        let group = runs.mean(&base(ParadigmId::GroupStream, k));
        let inter = runs.mean(&base(ParadigmId::Interleaved, k));
        let pos = runs.mean(&base(ParadigmId::BatchPosRe, k));
        let nore = runs.mean(&base(ParadigmId::BatchNoRe, k));
        let gain = group - inter;
        let re_gap = (pos - nore).abs();
        pass &= gain >= 1.0 && re_gap <= 1.0;
        parts.push(format!(
            "k={k}: group {group:.2} - interleaved {inter:.2} = {gain:+.2} (need >= +1.0); |pos-re {pos:.2} - no-re {nore:.2}| = {re_gap:.2} (need <= 1.0)"
        ));
    }
    outcome(pass, parts.join("; "))
}

/// 6. Group start offset barely matters.
fn phi_robustness(runs: &mut Runs) -> Outcome {
    let k = 3;
    let accs: Vec<(f64, f64)> = [0.0, 0.5, 8.0, 32.0]
        .into_iter()
        .map(|phi| {
            let cfg = base(ParadigmId::GroupStream, k).with_phi(PositionId::new(phi).unwrap());
            (phi, runs.mean(&cfg))
        })
        .collect();
    let max = accs.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
    let min = accs.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
    let spread = max - min;
    let list: Vec<String> = accs
        .iter()
        .map(|(p, a)| format!("phi={p}: {a:.2}"))
        .collect();
    outcome(
        spread <= 2.0,
        format!(
            "k={k} {}; spread {spread:.2} (need <= 2.0)",
            list.join(", ")
        ),
    )
}

/// 7. Constant positions hurt, and removing everything hurts most.
fn position_removal(runs: &mut Runs) -> Outcome {
    let k = 3;
    let kept = runs.mean(&base(ParadigmId::GroupStream, k));
    let all = runs.mean(&base(ParadigmId::GroupStream, k).with_removal(PositionRemoval::All));
    let target = runs.mean(&base(ParadigmId::GroupStream, k).with_removal(PositionRemoval::Target));
    let loss_all = kept - all;
    let loss_target = kept - target;
    outcome(
        loss_all >= 3.0 && loss_target < loss_all,
        format!(
            "k={k} kept {kept:.2}, target removed {target:.2} (loss {loss_target:.2}), all removed {all:.2} (loss {loss_all:.2}); need all-loss >= 3.0 and target-loss < all-loss"
        ),
    )
}

/// 8. Wait-k traces lag by exactly k.
fn waitk_lagging() -> Outcome {
    let mut bad = Vec::new();
    for k in [1, 3, 5, 7] {
        for n in k..=k + 24 {
            let g: Vec<usize> = (1..=n).map(|j| (k + j - 1).min(n)).collect();
            let l = lagging(&g, n, n).unwrap();
            if l.al != k as f64 {
                bad.push(format!("k={k} n={n}: AL {}", l.al));
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "k in {{1,3,5,7}}, n in k..=k+24: {} inexact{}",
            bad.len(),
            bad.first()
                .map(|b| format!(" (first {b})"))
                .unwrap_or_default()
        ),
    )
}

/// 9. Cached group streaming outruns per-read re-encoding.
fn efficiency_shape() -> Outcome {
    let model = Model::<f32>::init(tiny_bench_config(), 0).unwrap();
    let spec = BenchSpec {
        paradigms: vec![
            ParadigmId::GroupStream,
            ParadigmId::BatchNoRe,
            ParadigmId::BatchPosRe,
            ParadigmId::BatchAllRe,
        ],
        k_list: vec![5, 9],
        source_lengths: vec![128],
        // The k=5 and k=9 speedups differ by under 10%; three medians can swap them.
        repetitions: 9,
        seed: 0,
        trained_for: None,
    };
    let report = run_bench(&model, &spec).unwrap();
    let row = |p, k| report.find(p, k, 128).unwrap();
    let s5 = row(ParadigmId::GroupStream, 5).speedup_vs_all_re;
    let s9 = row(ParadigmId::GroupStream, 9).speedup_vs_all_re;
    let mut ordered = true;
    for k in [5, 9] {
        let ops = |p| row(p, k).counters.total();
        ordered &= ops(ParadigmId::BatchAllRe) >= ops(ParadigmId::BatchPosRe)
            && ops(ParadigmId::BatchPosRe) >= ops(ParadigmId::GroupStream)
            && ops(ParadigmId::GroupStream) == ops(ParadigmId::BatchNoRe);
    }
    outcome(
        s5 >= 3.0 && s5 > s9 && ordered,
        format!(
            "n=128: group speedup vs all-re {s5:.2}x at k=5 (need >= 3), {s9:.2}x at k=9 (need < k=5); op totals ordered all-re >= pos-re >= group = no-re: {ordered}"
        ),
    )
}

/// 10. Column normalisation and the gamma transform.
fn normalization_contract() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
    let mut bad = 0;
    for case in 0..100 {
        let (r, c) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let mut a = Array2::from_shape_fn((r, c), |_| rng.gen_range(-3.0..3.0));
        if case % 10 == 0 {
            a.column_mut(0).fill(0.25);
        }
        let n = normalize_columns(&a);
        for (col, orig) in n.columns().into_iter().zip(a.columns()) {
            let constant = orig.iter().all(|&v| v == orig[0]);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if constant {
                bad += usize::from(col.iter().any(|&v| v != 0.0));
            } else {
                bad += usize::from(lo != 0.0 || hi != 1.0);
            }
        }
        let gamma = rng.gen_range(0.1..3.0);
        let g = gamma_transform(&n, gamma).unwrap();
        for (x, y) in n.columns().into_iter().zip(g.columns()) {
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x[i] < x[j] && y[i] > y[j] {
                        bad += 1;
                    }
                }
            }
        }
    }
    outcome(
        bad == 0,
        format!("100 random matrices: {bad} violations of min 0 / max 1 or order preservation"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("STREAMATTN_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut runs = Runs::default();
    let names = [
        "rotary identity",
        "layout invariants",
        "gradient check",
        "cache/oracle equivalence",
        "mismatch ordering",
        "phi robustness",
        "position removal",
        "wait-k average lagging",
        "efficiency shape",
        "normalization contract",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            println!("[SKIP] {n:>2} {name}");
            continue;
        }
        let start = Instant::now();
        let o = match n {
            1 => rotary_identity(),
            2 => layout_suite(),
            3 => gradient_check(),
            4 => oracle_equivalence(),
            5 => mismatch_ordering(&mut runs),
            6 => phi_robustness(&mut runs),
            7 => position_removal(&mut runs),
            8 => waitk_lagging(),
            9 => efficiency_shape(),
            _ => normalization_contract(),
        };
        let secs = start.elapsed().as_secs_f64();
        println!(
            "[{}] {n:>2} {name}: {} ({secs:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Analytic gradients against central finite differences.

use ndarray::Array2;
use streamattn::model::{Model, ModelConfig, Parameters};
use streamattn::paradigm::{arrange, waitk_schedule, ArrangedSequence, ParadigmId, WaitkSchedule};
use streamattn::rope::PositionId;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Denominator floor so coordinates with vanishing gradients are judged on
/// absolute error.
const FLOOR: f64 = 1e-6;

fn tiny(tied: bool) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 1,
        d_model: 8,
        vocab_size: 11,
        tied_head: tied,
        ..ModelConfig::default()
    }
}

fn layouts() -> Vec<ArrangedSequence> {
    let s = waitk_schedule(2, 4, 4).unwrap();
    let src = [3, 4, 5, 6];
    let tgt = [1, 7, 8, 2];
    vec![
        arrange(
            ParadigmId::GroupStream,
            &s,
            PositionId::new(0.5).unwrap(),
            &src,
            &tgt,
        )
        .unwrap(),
        arrange(ParadigmId::Interleaved, &s, PositionId::ZERO, &src, &tgt).unwrap(),
        arrange(ParadigmId::BatchNoRe, &s, PositionId::ZERO, &src, &tgt).unwrap(),
    ]
}

/// Checks every coordinate of every tensor; returns the worst relative error.
fn worst_error(model: &Model<f64>, arr: &ArrangedSequence) -> (f64, String) {
    let (_, grad) = model.backward(arr).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params.tensors()[ti].data[i];
            probe.params.tensors_mut()[ti][i] = orig + H;
            let plus = probe.loss(arr).unwrap();
            probe.params.tensors_mut()[ti][i] = orig - H;
            let minus = probe.loss(arr).unwrap();
            probe.params.tensors_mut()[ti][i] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(FLOOR);
            if err > worst.0 {
                worst = (
                    err,
                    format!("{name}[{i}]: analytic {} numeric {numeric}", g[i]),
                );
            }
        }
    }
    worst
}

#[test]
fn every_parameter_matches_central_differences() {
    for tied in [false, true] {
        let model = Model::<f64>::init(tiny(tied), 11).unwrap();
        for arr in layouts() {
            let (err, at) = worst_error(&model, &arr);
            assert!(
                err <= TOL,
                "tied={tied} {:?}: {err:e} at {at}",
                arr.paradigm
            );
        }
    }
}

#[test]
fn two_layer_multi_head_gradients_match() {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        ..tiny(false)
    };
    let model = Model::<f64>::init(cfg, 3).unwrap();
    let arr = &layouts()[0];
    let (err, at) = worst_error(&model, arr);
    assert!(err <= TOL, "{err:e} at {at}");
}

#[test]
fn duplicated_example_doubles_the_summed_gradient() {
    let model = Model::<f64>::init(tiny(false), 2).unwrap();
    let arr = &layouts()[1];
    let (_, single) = model.backward(arr).unwrap();
    let (losses, double) = model.batch_gradient(&[arr, arr]).unwrap();
    assert_eq!(losses[0], losses[1]);
    let mut twice = single.clone();
    twice.scale(2.0);
    for (a, b) in double.tensors().iter().zip(twice.tensors()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}", a.name);
        }
    }
}

#[test]
fn packed_batch_equals_sum_of_singles() {
    let model = Model::<f64>::init(tiny(false), 4).unwrap();
    let arrs = layouts();
    let refs: Vec<&ArrangedSequence> = arrs.iter().collect();
    let (_, packed) = model.batch_gradient(&refs).unwrap();
    let mut sum = Parameters::zeros(&model.config);
    for arr in &arrs {
        sum.add_scaled(&model.backward(arr).unwrap().1, 1.0);
    }
    for (a, b) in packed.tensors().iter().zip(sum.tensors()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}", a.name);
        }
    }
}

#[test]
fn saturated_prediction_has_vanishing_gradient() {
    let cfg = tiny(false);
    let mut model = Model::<f64>::init(cfg, 9).unwrap();
    // Source [3], target input [BOS, EOS]: exactly one labelled row.
    let s = WaitkSchedule::offline(1, 2);
    let arr = arrange(
        ParadigmId::BatchOffline,
        &s,
        PositionId::ZERO,
        &[3],
        &[1, 2],
    )
    .unwrap();
    let row = arr.labels.iter().position(Option::is_some).unwrap();
    // Read the final normalised hidden state through an identity head.
    let mut probe = Array2::zeros((8, 11));
    for i in 0..8 {
        probe[[i, i]] = 1.0;
    }
    model.params.head = Some(probe);
    let z: Vec<f64> = model
        .forward(&arr, false)
        .unwrap()
        .logits
        .row(row)
        .iter()
        .take(8)
        .copied()
        .collect();
    let mut head = Array2::zeros((8, 11));
    for i in 0..8 {
        head[[i, 2]] = 100.0 * z[i];
    }
    model.params.head = Some(head);
    let (loss, grad) = model.backward(&arr).unwrap();
    assert!(loss < 1e-12, "{loss}");
    assert!(grad.squared_norm().sqrt() < 1e-6);
}

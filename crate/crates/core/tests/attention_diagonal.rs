//! Group positions pull target-to-source attention toward the diagonal.
//!
//! Two models see the full source (batch processing) and differ only in
//! positions: contiguous, or grouped with the targets starting at 0. The
//! grouped model should put more column-normalised mass near `|j - i| <= k`.

use streamattn::analysis::{mean_band_mass, sink_strip};
use streamattn::corpus::{generate_split, SyntheticTaskSpec, TaskKind};
use streamattn::model::{example_arrangement, train, Model, ModelConfig, TrainConfig};
use streamattn::paradigm::{ArrangedSequence, ParadigmId, PositionRemoval};
use streamattn::rope::PositionId;
use streamattn::scalar::Precision;

const BAND: usize = 3;
/// Wide enough that every target sees the whole source.
const FULL_READ: usize = 64;

fn trained(paradigm: ParadigmId, pairs: &[streamattn::corpus::ParallelPair]) -> Model<f32> {
    let model = ModelConfig {
        layers: 2,
        heads: 4,
        d_model: 32,
        vocab_size: 32,
        precision: Precision::Fp32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        paradigm,
        k: FULL_READ,
        phi: PositionId::ZERO,
        steps: 600,
        batch: 16,
        seed: 5,
        warmup: 50,
        ..TrainConfig::default()
    };
    train::<f32>(model, &cfg, pairs).unwrap().model
}

#[test]
fn group_positions_concentrate_attention_near_the_diagonal() {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::MappedTranslation,
        vocab_size: 32,
        len_min: 8,
        len_max: 12,
        seed: 8,
    };
    let (train_set, eval_set) = generate_split(&spec, 2000, 40).unwrap();
    let arrangements = |p: ParadigmId| -> Vec<ArrangedSequence> {
        eval_set
            .iter()
            .map(|pair| {
                example_arrangement(pair, p, FULL_READ, PositionId::ZERO, PositionRemoval::None)
                    .unwrap()
            })
            .collect()
    };
    let group = trained(ParadigmId::GroupStream, &train_set);
    let offline = trained(ParadigmId::BatchOffline, &train_set);
    let g = mean_band_mass(&group, &arrangements(ParadigmId::GroupStream), BAND).unwrap();
    let o = mean_band_mass(&offline, &arrangements(ParadigmId::BatchOffline), BAND).unwrap();
    println!("band mass within {BAND}: group {g:.4}, offline {o:.4}");
    assert!(g > o, "group {g} vs offline {o}");
}

#[test]
fn first_key_column_is_the_sink_on_a_trained_model() {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 32,
        len_min: 6,
        len_max: 10,
        seed: 2,
    };
    let (train_set, eval_set) = generate_split(&spec, 1000, 10).unwrap();
    let model = trained(ParadigmId::BatchOffline, &train_set);
    let arr = example_arrangement(
        &eval_set[0],
        ParadigmId::BatchOffline,
        0,
        PositionId::ZERO,
        PositionRemoval::None,
    )
    .unwrap();
    let out = model.forward(&arr, true).unwrap();
    let mut sink_layers = 0;
    let layers = out.attention.unwrap();
    for layer in &layers {
        let mean = layer
            .heads
            .iter()
            .map(|h| h.mapv(f64::from))
            .fold(None::<ndarray::Array2<f64>>, |acc, h| {
                Some(acc.map_or(h.clone(), |a| a + h))
            })
            .unwrap();
        let col_means: Vec<f64> = mean
            .columns()
            .into_iter()
            .map(|c| c.sum() / c.len() as f64)
            .collect();
        let best = col_means
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > col_means[b] { i } else { b });
        sink_layers += usize::from(best == 0);
        assert_eq!(sink_strip(&mean).unwrap().ncols(), mean.ncols() - 1);
    }
    println!(
        "layers whose heaviest key column is column 0: {sink_layers}/{}",
        layers.len()
    );
    assert!(sink_layers >= 1);
}

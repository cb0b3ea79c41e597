//! Mini-batch Adam training on parallel pairs laid out for one paradigm.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Parameters};
use crate::corpus::{ParallelPair, BOS};
use crate::error::{Error, Result};
use crate::paradigm::{
    arrange, waitk_schedule, ArrangedSequence, ParadigmId, PositionRemoval, WaitkSchedule,
};
use crate::rope::PositionId;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then linear decay to zero at the last step.
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub paradigm: ParadigmId,
    pub k: usize,
    pub phi: PositionId,
    pub removal: PositionRemoval,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub warmup: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: ParadigmId::GroupStream,
            k: 3,
            phi: PositionId::ZERO,
            removal: PositionRemoval::None,
            lr: 3e-3,
            steps: 2000,
            batch: 16,
            seed: 0,
            warmup: 100,
            schedule: LrSchedule::Linear,
            clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup > 0 {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        } else {
            1.0
        };
        match self.schedule {
            LrSchedule::Constant => self.lr * warm,
            LrSchedule::Linear => {
                let decay = if step < self.warmup {
                    1.0
                } else {
                    let span = (self.steps - self.warmup).max(1) as f64;
                    ((self.steps - step) as f64 / span).clamp(0.0, 1.0)
                };
                self.lr * warm * decay
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub model: Model<T>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Lays out one pair for training: the target-side input is `BOS` followed by
/// the EOS-terminated target, so every target token, EOS included, is a label.
pub fn example_arrangement(
    pair: &ParallelPair,
    paradigm: ParadigmId,
    k: usize,
    phi: PositionId,
    removal: PositionRemoval,
) -> Result<ArrangedSequence> {
    let mut target = Vec::with_capacity(pair.target.len() + 1);
    target.push(BOS);
    target.extend_from_slice(&pair.target);
    let m = pair.source.len();
    let schedule = match paradigm {
        ParadigmId::BatchOffline => WaitkSchedule::offline(m, target.len()),
        _ => waitk_schedule(k, m, target.len())?,
    };
    let mut arr = arrange(paradigm, &schedule, phi, &pair.source, &target)?;
    arr.remove_positions(removal);
    Ok(arr)
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(params: &Parameters<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut Parameters<T>,
        grad: &Parameters<T>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powi(self.t));
        let c2 = T::of(1.0 - cfg.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(cfg.eps));
        let grads = grad.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Trains a fresh model initialised from `cfg.seed`. Deterministic given the
/// seed: batches come from per-epoch shuffles of the corpus.
pub fn train<T: Scalar>(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    corpus: &[ParallelPair],
) -> Result<TrainResult<T>> {
    if corpus.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    if cfg.k == 0 && cfg.paradigm != ParadigmId::BatchOffline {
        return Err(Error::contract("wait-k requires k >= 1"));
    }
    let arrangements = corpus
        .iter()
        .map(|p| example_arrangement(p, cfg.paradigm, cfg.k, cfg.phi, cfg.removal))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::<T>::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    rng.jump();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&arrangements[order[cursor]]);
            cursor += 1;
        }
        let (batch_losses, mut grad) = model.batch_gradient(&batch)?;
        let loss = batch_losses.iter().sum::<f64>() / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        grad.scale(T::of(1.0 / batch.len() as f64));
        if let Some(max_norm) = cfg.clip {
            let norm = grad.squared_norm().sqrt();
            if norm > max_norm {
                grad.scale(T::of(max_norm / norm));
            }
        }
        adam.step(&mut model.params, &grad, cfg.lr_at(step), cfg);
        losses.push(loss);
        if step % 250 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Divergence { step: cfg.steps });
    }
    Ok(TrainResult { model, losses })
}

/// Fraction of labelled rows whose greedy prediction (lowest id on ties)
/// equals the label.
pub fn teacher_forced_accuracy<T: Scalar>(
    model: &Model<T>,
    arrangements: &[ArrangedSequence],
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for arr in arrangements {
        let out = model.forward(arr, false)?;
        for (r, label) in arr.labels.iter().enumerate() {
            if let Some(label) = label {
                total += 1;
                if crate::stream::argmax(out.logits.row(r).iter().copied()) == *label {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::contract("no labelled rows"));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, SyntheticTaskSpec, TaskKind};

    fn setup() -> (ModelConfig, Vec<ParallelPair>) {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            vocab_size: 12,
            ..ModelConfig::default()
        };
        let spec = SyntheticTaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 12,
            len_min: 2,
            len_max: 4,
            seed: 1,
        };
        (cfg, generate(&spec, 16).unwrap())
    }

    #[test]
    fn lr_schedule_shapes() {
        let cfg = TrainConfig {
            lr: 1.0,
            steps: 10,
            warmup: 2,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(1), 1.0);
        assert_eq!(cfg.lr_at(6), 0.5);
        let constant = TrainConfig {
            schedule: LrSchedule::Constant,
            ..cfg
        };
        assert_eq!(constant.lr_at(9), 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mcfg, corpus) = setup();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            batch: 4,
            ..TrainConfig::default()
        };
        let out = train::<f64>(mcfg, &cfg, &corpus).unwrap();
        assert_eq!(out.model.params, Parameters::init(&mcfg, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (mcfg, corpus) = setup();
        let cfg = TrainConfig {
            steps: 60,
            batch: 4,
            lr: 1e-2,
            warmup: 5,
            ..TrainConfig::default()
        };
        let a = train::<f64>(mcfg, &cfg, &corpus).unwrap();
        let b = train::<f64>(mcfg, &cfg, &corpus).unwrap();
        assert_eq!(a.losses, b.losses);
        let head: f64 = a.losses[..5].iter().sum();
        let tail: f64 = a.losses[55..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn example_layout_puts_bos_first() {
        let pair = ParallelPair {
            source: vec![4, 5],
            target: vec![4, 5, 2],
        };
        let arr = example_arrangement(
            &pair,
            ParadigmId::GroupStream,
            1,
            PositionId::ZERO,
            PositionRemoval::None,
        )
        .unwrap();
        assert_eq!(arr.tokens, vec![4, 5, BOS, 4, 5, 2]);
        assert_eq!(
            arr.labels.iter().flatten().copied().collect::<Vec<_>>(),
            vec![4, 5, 2]
        );
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let (mcfg, _) = setup();
        assert!(train::<f64>(mcfg, &TrainConfig::default(), &[]).is_err());
    }
}

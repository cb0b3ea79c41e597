//! Desk-scale training runs that compare decoding paradigms on the synthetic
//! translation task: train one model per configuration, decode the held-out
//! split with the matching streaming decoder, score it.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_split, SyntheticTaskSpec, TaskKind};
use crate::error::Result;
use crate::metrics::{corpus_accuracy, corpus_bleu, corpus_lagging};
use crate::model::{train, ModelConfig, TrainConfig};
use crate::paradigm::{ParadigmId, PositionRemoval, TokenId};
use crate::rope::PositionId;
use crate::scalar::Precision;
use crate::stream::{decode, DecodeOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec {
                kind: TaskKind::MappedTranslation,
                vocab_size: 64,
                len_min: 8,
                len_max: 16,
                seed: 17,
            },
            train_pairs: 8000,
            eval_pairs: 200,
            model: ModelConfig {
                layers: 2,
                heads: 4,
                d_model: 64,
                vocab_size: 64,
                precision: Precision::Fp32,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 2000,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn with_run(mut self, paradigm: ParadigmId, k: usize, seed: u64) -> Self {
        self.train.paradigm = paradigm;
        self.train.k = k;
        self.train.seed = seed;
        self
    }

    pub fn with_phi(mut self, phi: PositionId) -> Self {
        self.train.phi = phi;
        self
    }

    pub fn with_removal(mut self, removal: PositionRemoval) -> Self {
        self.train.removal = removal;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Token accuracy of the streamed outputs, in points.
    pub accuracy: f64,
    pub bleu: f64,
    /// `None` when every sentence ended before emitting a token.
    pub al: Option<f64>,
    pub laal: Option<f64>,
    pub final_loss: f64,
}

/// Mean of the last 50 training losses.
fn tail_loss(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(50)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (train_set, eval_set) = generate_split(&cfg.task, cfg.train_pairs, cfg.eval_pairs)?;
    let t = &cfg.train;
    log::info!(
        "training {} k={} phi={} removal={:?} seed={}",
        t.paradigm,
        t.k,
        t.phi.value(),
        t.removal,
        t.seed
    );
    let result = train::<f32>(cfg.model, t, &train_set)?;
    let opts = DecodeOptions::new(t.paradigm, t.k)
        .with_phi(t.phi)
        .with_removal(t.removal);
    let mut hyps: Vec<Vec<TokenId>> = Vec::with_capacity(eval_set.len());
    let mut refs: Vec<Vec<TokenId>> = Vec::with_capacity(eval_set.len());
    let mut traces = Vec::with_capacity(eval_set.len());
    for pair in &eval_set {
        let trace = decode(&result.model, &opts, &pair.source)?;
        hyps.push(trace.tokens.clone());
        refs.push(pair.reference().to_vec());
        traces.push((trace.g, pair.source.len(), pair.reference().len()));
    }
    // Sentences finished with an immediate EOS have no schedule to lag.
    let lag_items: Vec<(&[usize], usize, usize)> = traces
        .iter()
        .filter(|(g, _, _)| !g.is_empty())
        .map(|(g, x, r)| (g.as_slice(), *x, *r))
        .collect();
    let (al, laal) = match corpus_lagging(&lag_items) {
        Ok(report) => (Some(report.al), Some(report.laal)),
        Err(_) => (None, None),
    };
    let out = ExperimentResult {
        accuracy: 100.0 * corpus_accuracy(&hyps, &refs)?,
        bleu: corpus_bleu(&hyps, &refs)?,
        al,
        laal,
        final_loss: tail_loss(&result.losses),
    };
    log::info!("result {out:?}");
    Ok(out)
}

/// Mean accuracy of `cfg` over `seeds`.
pub fn mean_accuracy(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<f64> {
    let mut sum = 0.0;
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        sum += run_experiment(&c)?.accuracy;
    }
    Ok(sum / seeds.len() as f64)
}

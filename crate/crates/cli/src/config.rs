//! JSON run configuration. Every field has a default, so `{}` is a valid
//! file; unknown keys are rejected with the offending name.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use streamattn::corpus::{SyntheticTaskSpec, TaskKind};
use streamattn::model::{LrSchedule, ModelConfig, TrainConfig};
use streamattn::paradigm::{ParadigmId, PositionRemoval};
use streamattn::rope::PositionId;
use streamattn::stream::ReencodeTrigger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Seed of the synthetic generator, independent of the training seed.
    pub seed: u64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    /// Train from this JSONL file instead of generating pairs.
    pub train_path: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::MappedTranslation,
            vocab_size: 64,
            len_min: 8,
            len_max: 16,
            seed: 17,
            train_pairs: 8000,
            eval_pairs: 200,
            train_path: None,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind: self.task,
            vocab_size: self.vocab_size,
            len_min: self.len_min,
            len_max: self.len_max,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub warmup: usize,
    pub schedule: LrSchedule,
    pub clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            steps: t.steps,
            batch: t.batch,
            warmup: t.warmup,
            schedule: t.schedule,
            clip: t.clip,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub paradigm: ParadigmId,
    pub k: usize,
    pub phi: f64,
    pub removal: PositionRemoval,
    pub reencode: ReencodeTrigger,
    pub corpus: CorpusConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            paradigm: ParadigmId::GroupStream,
            k: 3,
            phi: 0.0,
            removal: PositionRemoval::None,
            reencode: ReencodeTrigger::OnRead,
            corpus: CorpusConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn phi(&self) -> anyhow::Result<PositionId> {
        PositionId::new(self.phi).with_context(|| format!("invalid phi {}", self.phi))
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let o = &self.optim;
        Ok(TrainConfig {
            paradigm: self.paradigm,
            k: self.k,
            phi: self.phi()?,
            removal: self.removal,
            lr: o.lr,
            steps: o.steps,
            batch: o.batch,
            seed: self.seed,
            warmup: o.warmup,
            schedule: o.schedule,
            clip: o.clip,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        })
    }
}

pub fn parse_config(text: &str) -> anyhow::Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("invalid run configuration at `{path}`: {}", e.into_inner())
    })?;
    cfg.model
        .validate()
        .context("invalid model configuration")?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn phi_parses_as_real() {
        let cfg = parse_config(r#"{"phi": 0.5}"#).unwrap();
        assert_eq!(cfg.phi, 0.5);
        assert_eq!(cfg.phi().unwrap().value(), 0.5);
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = format!(
            "{:#}",
            parse_config(r#"{"paradigm": "bogus"}"#).unwrap_err()
        );
        assert!(err.contains("bogus") && err.contains("`paradigm`"), "{err}");
        let err = format!("{:#}", parse_config(r#"{"paradgm": "group"}"#).unwrap_err());
        assert!(err.contains("paradgm"), "{err}");
        let err = format!(
            "{:#}",
            parse_config(r#"{"optim": {"lr": 1, "stepz": 3}}"#).unwrap_err()
        );
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn nested_sections_merge_with_defaults() {
        let cfg =
            parse_config(r#"{"model": {"d_model": 32}, "corpus": {"task": "copy"}}"#).unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.layers, ModelConfig::default().layers);
        assert_eq!(cfg.corpus.task, TaskKind::Copy);
        assert_eq!(cfg.corpus.len_max, 16);
    }
}

//! A small pre-norm decoder-only transformer with rotary attention.
//!
//! Blocks are `x + Attn(RMSNorm(x))` followed by `x + FFN(RMSNorm(x))` with a
//! SiLU feed-forward layer. Projections carry no biases. Activations are row
//! vectors, so every weight is stored `(fan_in, fan_out)`.

mod checkpoint;
mod forward;
mod train;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{RotaryParams, DEFAULT_BASE};
use crate::scalar::{Precision, Scalar};

pub use checkpoint::{
    checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint, TrainMeta,
};
pub(crate) use forward::masked_softmax_row;
pub use forward::{loss, ForwardOutput, LayerAttention};
pub use train::{
    example_arrangement, teacher_forced_accuracy, train, LrSchedule, TrainConfig, TrainResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Largest relative distance between an attending pair the model accepts.
    pub max_positions: usize,
    pub rope_base: f64,
    pub tied_head: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            ffn_mult: 4,
            vocab_size: 64,
            max_positions: 128,
            rope_base: DEFAULT_BASE,
            tied_head: false,
            precision: Precision::Fp64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.ffn_mult == 0 {
            return Err(Error::contract(
                "layers, heads, d_model and ffn_mult must be positive",
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "head dimension {} must be even",
                self.d_head()
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::contract("vocab_size must be at least 4"));
        }
        RotaryParams::new(self.d_head(), self.rope_base)?;
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn rotary(&self) -> RotaryParams {
        RotaryParams::new(self.d_head(), self.rope_base).expect("validated config")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ffn_norm: Array1<T>,
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    /// `(vocab, d_model)`.
    pub embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Array1<T>,
    /// `(d_model, vocab)`; `None` when the head is tied to `embed`.
    pub head: Option<Array2<T>>,
}

/// Shape and flat storage of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ffn(), cfg.vocab_size);
        let layer = LayerParams {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ffn_norm: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            w2: Array2::zeros((f, d)),
        };
        Self {
            embed: Array2::zeros((v, d)),
            layers: vec![layer; cfg.layers],
            final_norm: Array1::zeros(d),
            head: (!cfg.tied_head).then(|| Array2::zeros((d, v))),
        }
    }

    /// Gaussian init: embeddings N(0, 1), projections N(0, 1/fan_in), with
    /// residual output projections further scaled by `1/sqrt(2L)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let residual = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let mut fill = |a: &mut [T], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in a {
                *x = T::of(normal.sample(&mut rng));
            }
        };
        let (d, f) = (cfg.d_model as f64, cfg.d_ffn() as f64);
        fill(slice_mut(&mut p.embed), 1.0);
        for layer in &mut p.layers {
            layer.attn_norm.fill(T::one());
            layer.ffn_norm.fill(T::one());
            fill(slice_mut(&mut layer.wq), d.powf(-0.5));
            fill(slice_mut(&mut layer.wk), d.powf(-0.5));
            fill(slice_mut(&mut layer.wv), d.powf(-0.5));
            fill(slice_mut(&mut layer.wo), d.powf(-0.5) * residual);
            fill(slice_mut(&mut layer.w1), d.powf(-0.5));
            fill(slice_mut(&mut layer.w2), f.powf(-0.5) * residual);
        }
        p.final_norm.fill(T::one());
        if let Some(head) = &mut p.head {
            fill(slice_mut(head), d.powf(-0.5));
        }
        Ok(p)
    }

    /// Every tensor in checkpoint order.
    pub fn tensors<'a>(&'a self) -> Vec<TensorRef<'a, T>> {
        let mut out = Vec::new();
        fn entry<'a, T>(name: String, shape: &[usize], data: &'a [T]) -> TensorRef<'a, T> {
            TensorRef {
                name,
                shape: shape.to_vec(),
                data,
            }
        }
        let mut push =
            |name: String, shape: &[usize], data: &'a [T]| out.push(entry(name, shape, data));
        push("embed".into(), self.embed.shape(), slice(&self.embed));
        for (l, layer) in self.layers.iter().enumerate() {
            push(
                format!("layers.{l}.attn_norm"),
                layer.attn_norm.shape(),
                slice1(&layer.attn_norm),
            );
            push(format!("layers.{l}.wq"), layer.wq.shape(), slice(&layer.wq));
            push(format!("layers.{l}.wk"), layer.wk.shape(), slice(&layer.wk));
            push(format!("layers.{l}.wv"), layer.wv.shape(), slice(&layer.wv));
            push(format!("layers.{l}.wo"), layer.wo.shape(), slice(&layer.wo));
            push(
                format!("layers.{l}.ffn_norm"),
                layer.ffn_norm.shape(),
                slice1(&layer.ffn_norm),
            );
            push(format!("layers.{l}.w1"), layer.w1.shape(), slice(&layer.w1));
            push(format!("layers.{l}.w2"), layer.w2.shape(), slice(&layer.w2));
        }
        push(
            "final_norm".into(),
            self.final_norm.shape(),
            slice1(&self.final_norm),
        );
        if let Some(head) = &self.head {
            push("head".into(), head.shape(), slice(head));
        }
        out
    }

    /// Mutable flat views in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![slice_mut(&mut self.embed)];
        for layer in &mut self.layers {
            out.push(slice1_mut(&mut layer.attn_norm));
            out.push(slice_mut(&mut layer.wq));
            out.push(slice_mut(&mut layer.wk));
            out.push(slice_mut(&mut layer.wv));
            out.push(slice_mut(&mut layer.wo));
            out.push(slice1_mut(&mut layer.ffn_norm));
            out.push(slice_mut(&mut layer.w1));
            out.push(slice_mut(&mut layer.w2));
        }
        out.push(slice1_mut(&mut self.final_norm));
        if let Some(head) = &mut self.head {
            out.push(slice_mut(head));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x.f64() * x.f64())
            .sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        let theirs: Vec<Vec<T>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    rotary: RotaryParams,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        let expected = Parameters::<T>::zeros(&config);
        let ok = params.layers.len() == config.layers
            && params
                .tensors()
                .iter()
                .zip(expected.tensors())
                .all(|(a, b)| a.shape == b.shape && a.name == b.name)
            && params.tensors().len() == expected.tensors().len();
        if !ok {
            return Err(Error::contract(
                "parameter shapes do not match the model config",
            ));
        }
        let rotary = config.rotary();
        Ok(Self {
            config,
            params,
            rotary,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn rotary(&self) -> &RotaryParams {
        &self.rotary
    }
}

//! Per-layer source and target key/value storage.

use ndarray::Array1;

use crate::rope::{rotate_heads, RotaryParams};
use crate::scalar::Scalar;

/// One cached row: the unrotated key, the value, the position the row
/// currently takes, and a memo of the key rotated to that position.
#[derive(Debug, Clone)]
pub struct CacheEntry<T> {
    pub key: Array1<T>,
    pub value: Array1<T>,
    pub position: f64,
    rotated: Array1<T>,
    rotated_at: Option<f64>,
}

impl<T: Scalar> CacheEntry<T> {
    pub fn new(key: Array1<T>, value: Array1<T>, position: f64) -> Self {
        Self {
            rotated: key.clone(),
            key,
            value,
            position,
            rotated_at: None,
        }
    }

    /// Re-rotates the key if the position moved since the last rotation.
    /// Returns whether a rotation was performed.
    pub(crate) fn refresh_rotation(&mut self, rotary: &RotaryParams) -> bool {
        if self.rotated_at == Some(self.position) {
            return false;
        }
        self.rotated.assign(&self.key);
        rotate_heads(
            rotary,
            self.rotated.as_slice_mut().expect("contiguous"),
            self.position,
        );
        self.rotated_at = Some(self.position);
        true
    }

    pub(crate) fn rotated_key(&self) -> &[T] {
        debug_assert_eq!(self.rotated_at, Some(self.position));
        self.rotated.as_slice().expect("contiguous")
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayerCache<T> {
    pub source: Vec<CacheEntry<T>>,
    pub target: Vec<CacheEntry<T>>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn source_positions(&self) -> Vec<f64> {
        self.source.iter().map(|e| e.position).collect()
    }

    pub fn target_positions(&self) -> Vec<f64> {
        self.target.iter().map(|e| e.position).collect()
    }
}

/// Source and target caches, kept separate for the whole session.
#[derive(Debug, Clone)]
pub struct SplitKvCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> SplitKvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerCache {
                    source: Vec::new(),
                    target: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l]
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut LayerCache<T> {
        &mut self.layers[l]
    }

    pub fn source_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.source.len())
    }

    pub fn target_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.target.len())
    }
}

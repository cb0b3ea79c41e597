//! Rotary position mathematics over real-valued position ids.
//!
//! `R(m)` is block diagonal with 2x2 rotations by `m * theta_i`. Lanes are
//! paired as adjacent `(2i, 2i + 1)` within a head, which is also the layout
//! the stream caches use for stored keys. Angles and their sines/cosines are
//! always evaluated in `f64`, whatever the activation precision.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Rotation-angle table for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryParams {
    head_dim: usize,
    base: f64,
    thetas: Vec<f64>,
}

impl RotaryParams {
    /// `thetas[i] = base^(-2i / head_dim)` for `i < head_dim / 2`.
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "rotary head_dim must be even and >= 2, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::contract(format!(
                "rotary base must be finite and > 1, got {base}"
            )));
        }
        let thetas = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            thetas,
        })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.head_dim {
            return Err(Error::DimensionMismatch {
                expected: self.head_dim,
                got: len,
            });
        }
        Ok(())
    }
}

/// A token position. Fractional values are legal (e.g. a group offset of 0.5).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(try_from = "f64", into = "f64")]
pub struct PositionId(f64);

impl PositionId {
    pub const ZERO: PositionId = PositionId(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(PositionId(value))
        } else {
            Err(Error::InvalidPosition(value))
        }
    }

    pub fn from_index(index: usize) -> Self {
        PositionId(index as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `self + delta`, for offsets that are known to stay non-negative.
    pub fn shifted(self, delta: f64) -> Result<Self> {
        Self::new(self.0 + delta)
    }
}

impl TryFrom<f64> for PositionId {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        PositionId::new(value)
    }
}

impl From<PositionId> for f64 {
    fn from(p: PositionId) -> f64 {
        p.0
    }
}

impl std::fmt::Display for PositionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rotates `lanes` in place by `R(pos)`; `pos` may be negative (inverse rotation).
#[inline]
pub(crate) fn rotate_slice<T: Scalar>(thetas: &[f64], lanes: &mut [T], pos: f64) {
    for (i, pair) in lanes.chunks_exact_mut(2).enumerate() {
        let (s, c) = (pos * thetas[i]).sin_cos();
        rotate_pair(pair, T::of(c), T::of(s));
    }
}

#[inline]
pub(crate) fn rotate_pair<T: Scalar>(pair: &mut [T], c: T, s: T) {
    let (x0, x1) = (pair[0], pair[1]);
    pair[0] = c * x0 - s * x1;
    pair[1] = s * x0 + c * x1;
}

/// Rotates every head of a multi-head row (`heads * head_dim` lanes) by `R(pos)`.
pub(crate) fn rotate_heads<T: Scalar>(params: &RotaryParams, row: &mut [T], pos: f64) {
    for head in row.chunks_exact_mut(params.head_dim) {
        rotate_slice(&params.thetas, head, pos);
    }
}

/// Returns `R(m) * vec`, evaluated blockwise.
pub fn rotation_apply<T: Scalar>(
    params: &RotaryParams,
    vec: &[T],
    m: PositionId,
) -> Result<Vec<T>> {
    params.check_len(vec.len())?;
    let mut out = vec.to_vec();
    rotate_slice(&params.thetas, &mut out, m.value());
    Ok(out)
}

/// `q^T R(offset) k` for an arbitrary real offset, without rotating `q`.
pub fn score_at_offset<T: Scalar>(params: &RotaryParams, q: &[T], k: &[T], offset: f64) -> T {
    debug_assert_eq!(q.len(), k.len());
    let mut acc = T::zero();
    for (i, (qp, kp)) in q.chunks_exact(2).zip(k.chunks_exact(2)).enumerate() {
        let (s, c) = (offset * params.thetas[i % params.thetas.len()]).sin_cos();
        let (c, s) = (T::of(c), T::of(s));
        let r0 = c * kp[0] - s * kp[1];
        let r1 = s * kp[0] + c * kp[1];
        acc += qp[0] * r0 + qp[1] * r1;
    }
    acc
}

/// Attention logit between a query at position `n` and a key at position `m`:
/// `q^T R(m - n) k`. Depends on the positions only through `m - n`.
pub fn relative_score<T: Scalar>(
    params: &RotaryParams,
    q: &[T],
    k: &[T],
    n: PositionId,
    m: PositionId,
) -> Result<T> {
    params.check_len(q.len())?;
    params.check_len(k.len())?;
    Ok(score_at_offset(params, q, k, m.value() - n.value()))
}

/// `p(query) - p(key)` for every token pair under the group layout: source
/// positions `0..M`, target positions `phi..phi + N`. Rows and columns list the
/// source tokens first, then the target tokens. Entries that a causal or
/// streaming mask would hide are still filled in.
pub fn relative_distance_matrix(
    source_len: usize,
    target_len: usize,
    phi: PositionId,
) -> Array2<f64> {
    let positions: Vec<f64> = (0..source_len)
        .map(|i| i as f64)
        .chain((0..target_len).map(|j| phi.value() + j as f64))
        .collect();
    distance_matrix(&positions)
}

/// Pairwise `p[row] - p[col]`.
pub fn distance_matrix(positions: &[f64]) -> Array2<f64> {
    let n = positions.len();
    Array2::from_shape_fn((n, n), |(r, c)| positions[r] - positions[c])
}

/// Precomputed `(cos, sin)` for a list of positions, shared by all heads and layers.
#[derive(Debug, Clone)]
pub(crate) struct RotaryTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub(crate) fn new(params: &RotaryParams, positions: &[f64]) -> Self {
        let half = params.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for &theta in &params.thetas {
                let (s, c) = (p * theta).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every head of `row` by the position at `index`; `inverse` undoes it.
    #[inline]
    pub(crate) fn rotate_row<T: Scalar>(&self, index: usize, row: &mut [T], inverse: bool) {
        let cos = &self.cos[index * self.half..(index + 1) * self.half];
        let sin = &self.sin[index * self.half..(index + 1) * self.half];
        for head in row.chunks_exact_mut(self.half * 2) {
            for (i, pair) in head.chunks_exact_mut(2).enumerate() {
                let s = if inverse { -sin[i] } else { sin[i] };
                rotate_pair(pair, T::of(cos[i]), T::of(s));
            }
        }
    }
}

//! Forward and reverse-mode passes.
//!
//! Several arrangements can be packed into one call: their rows are stacked for
//! the dense projections while attention runs per arrangement ("segment").

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{LayerParams, Model, Parameters};
use crate::error::{Error, Result};
use crate::paradigm::{ArrangedSequence, AttnMask, TokenId};
use crate::rope::{score_at_offset, RotaryTable};
use crate::scalar::Scalar;

const RMS_EPS: f64 = 1e-5;

/// Post-softmax attention of one layer, one `(query, key)` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention<T> {
    pub heads: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `(rows, vocab)`.
    pub logits: Array2<T>,
    /// Per layer, populated on request.
    pub attention: Option<Vec<LayerAttention<T>>>,
}

enum Keys<'a> {
    /// Rotate queries and keys by absolute positions, then dot.
    Rotary(RotaryTable),
    /// Score each pair at offset `-distances[r, c]` without rotating rows.
    Relative(&'a Array2<f64>),
}

struct Segment<'a> {
    start: usize,
    len: usize,
    mask: &'a AttnMask,
    keys: Keys<'a>,
}

struct LayerCache<T> {
    x: Array2<T>,
    inv1: Vec<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Segment-major, head-minor.
    probs: Vec<Array2<T>>,
    o: Array2<T>,
    x1: Array2<T>,
    inv2: Vec<T>,
    b: Array2<T>,
    u: Array2<T>,
    h: Array2<T>,
}

struct Trace<T> {
    layers: Vec<LayerCache<T>>,
    xl: Array2<T>,
    inv_f: Vec<T>,
    z: Array2<T>,
}

struct Pass<T> {
    logits: Array2<T>,
    trace: Option<Trace<T>>,
    attention: Option<Vec<Vec<Array2<T>>>>,
}

pub(crate) fn rms_norm<T: Scalar>(x: &Array2<T>, g: &Array1<T>) -> (Array2<T>, Vec<T>) {
    let d = T::of(x.ncols() as f64);
    let mut y = x.clone();
    let mut invs = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (ms + T::of(RMS_EPS)).sqrt();
        row.iter_mut()
            .zip(g.iter())
            .for_each(|(v, &gi)| *v = *v * inv * gi);
        invs.push(inv);
    }
    (y, invs)
}

fn rms_backward<T: Scalar>(
    x: &Array2<T>,
    inv: &[T],
    g: &Array1<T>,
    gy: &Array2<T>,
    dg: &mut Array1<T>,
) -> Array2<T> {
    let d = T::of(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for (r, &inv_r) in inv.iter().enumerate() {
        let (xr, gyr) = (x.row(r), gy.row(r));
        let mut dot = T::zero();
        for c in 0..x.ncols() {
            let gx = gyr[c] * g[c];
            dg[c] += gyr[c] * xr[c] * inv_r;
            dot += gx * xr[c];
        }
        let coef = inv_r * inv_r * inv_r * dot / d;
        for c in 0..x.ncols() {
            dx[[r, c]] = inv_r * gyr[c] * g[c] - xr[c] * coef;
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Scalar>(u: T) -> T {
    T::one() / (T::one() + (-u).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(u: T) -> T {
    u * sigmoid(u)
}

#[inline]
fn silu_grad<T: Scalar>(u: T) -> T {
    let s = sigmoid(u);
    s * (T::one() + u * (T::one() - s))
}

/// Softmax over allowed entries of each row; disallowed entries become exactly 0.
pub(crate) fn masked_softmax_row<T: Scalar>(
    scores: &mut [T],
    allowed: impl Fn(usize) -> bool,
) -> Result<()> {
    let mut max = T::neg_infinity();
    for (c, &s) in scores.iter().enumerate() {
        if allowed(c) && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::contract("attention row has no allowed keys"));
    }
    let mut sum = T::zero();
    for (c, s) in scores.iter_mut().enumerate() {
        if allowed(c) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = T::zero();
        }
    }
    scores.iter_mut().for_each(|s| *s /= sum);
    Ok(())
}

/// Mean next-token NLL over the labelled rows of one arrangement, and its
/// gradient with respect to the logits (zero on unlabelled rows).
fn nll<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[Option<TokenId>],
) -> Result<(f64, Array2<T>)> {
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Err(Error::contract("loss mask selects no rows"));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    let scale = T::one() / T::of(count as f64);
    for (r, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += (lse - row[label as usize]).f64();
        for (c, &v) in row.iter().enumerate() {
            grad[[r, c]] = (v - lse).exp() * scale;
        }
        grad[[r, label as usize]] -= scale;
    }
    Ok((total / count as f64, grad))
}

/// Mean next-token cross-entropy of `out` under `arr`'s loss mask.
pub fn loss<T: Scalar>(out: &ForwardOutput<T>, arr: &ArrangedSequence) -> Result<f64> {
    if out.logits.nrows() != arr.len() {
        return Err(Error::DimensionMismatch {
            expected: arr.len(),
            got: out.logits.nrows(),
        });
    }
    Ok(nll(out.logits.view(), &arr.labels)?.0)
}

impl<T: Scalar> Model<T> {
    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::OutOfVocab { id, vocab }),
            None => Ok(()),
        }
    }

    fn check_span(&self, mask: &AttnMask, distance: impl Fn(usize, usize) -> f64) -> Result<()> {
        let max = self.config.max_positions;
        for r in 0..mask.len() {
            for c in 0..mask.len() {
                if mask.allowed(r, c) {
                    let d = distance(r, c).abs();
                    if d > max as f64 {
                        return Err(Error::PositionOverflow { distance: d, max });
                    }
                }
            }
        }
        Ok(())
    }

    fn segment<'a>(&self, arr: &'a ArrangedSequence, start: usize) -> Result<Segment<'a>> {
        self.check_tokens(&arr.tokens)?;
        let pos = arr.position_values();
        self.check_span(&arr.attn_mask, |r, c| pos[r] - pos[c])?;
        Ok(Segment {
            start,
            len: arr.len(),
            mask: &arr.attn_mask,
            keys: Keys::Rotary(RotaryTable::new(self.rotary(), &pos)),
        })
    }

    fn head_scale(&self) -> T {
        T::of((self.config.d_head() as f64).powf(-0.5))
    }

    fn tied_scale(&self) -> T {
        T::of((self.config.d_model as f64).powf(-0.5))
    }

    fn embed_rows(&self, tokens: &[TokenId]) -> Array2<T> {
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).assign(&self.params.embed.row(t as usize));
        }
        x
    }

    fn output_logits(&self, z: &Array2<T>) -> Array2<T> {
        match &self.params.head {
            Some(head) => z.dot(head),
            None => z.dot(&self.params.embed.t()) * self.tied_scale(),
        }
    }

    fn run(
        &self,
        tokens: &[TokenId],
        segs: &[Segment<'_>],
        keep: bool,
        capture: bool,
    ) -> Result<Pass<T>> {
        let cfg = &self.config;
        let (heads, dh) = (cfg.heads, cfg.d_head());
        let scale = self.head_scale();
        let mut x = self.embed_rows(tokens);
        let mut caches = Vec::new();
        let mut attention = capture.then(Vec::new);

        for p in &self.params.layers {
            let (a, inv1) = rms_norm(&x, &p.attn_norm);
            let mut q = a.dot(&p.wq);
            let mut k = a.dot(&p.wk);
            let v = a.dot(&p.wv);
            for seg in segs {
                if let Keys::Rotary(table) = &seg.keys {
                    for r in 0..seg.len {
                        let row = seg.start + r;
                        table.rotate_row(r, q.row_mut(row).as_slice_mut().expect("row"), false);
                        table.rotate_row(r, k.row_mut(row).as_slice_mut().expect("row"), false);
                    }
                }
            }
            let mut o = Array2::zeros(x.raw_dim());
            let mut probs = Vec::with_capacity(segs.len() * heads);
            for seg in segs {
                let rows = seg.start..seg.start + seg.len;
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = k.slice(s![rows.clone(), cols.clone()]);
                    let mut scores = match &seg.keys {
                        Keys::Rotary(_) => qh.dot(&kh.t()),
                        Keys::Relative(dist) => {
                            Array2::from_shape_fn((seg.len, seg.len), |(r, c)| {
                                if seg.mask.allowed(r, c) {
                                    let qr = qh.row(r);
                                    let kc = kh.row(c);
                                    score_at_offset(
                                        self.rotary(),
                                        qr.as_slice().expect("row"),
                                        kc.as_slice().expect("row"),
                                        -dist[[r, c]],
                                    )
                                } else {
                                    T::zero()
                                }
                            })
                        }
                    };
                    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
                        row.iter_mut().for_each(|v| *v *= scale);
                        let allowed = seg.mask.row(r);
                        masked_softmax_row(row.as_slice_mut().expect("row"), |c| allowed[c])?;
                    }
                    let vh = v.slice(s![rows.clone(), cols.clone()]);
                    o.slice_mut(s![rows.clone(), cols]).assign(&scores.dot(&vh));
                    probs.push(scores);
                }
            }
            let x1 = &x + &o.dot(&p.wo);
            let (b, inv2) = rms_norm(&x1, &p.ffn_norm);
            let u = b.dot(&p.w1);
            let hact = u.mapv(silu);
            let x2 = &x1 + &hact.dot(&p.w2);
            if let Some(att) = attention.as_mut() {
                att.push(probs.clone());
            }
            if keep {
                caches.push(LayerCache {
                    x,
                    inv1,
                    a,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    x1,
                    inv2,
                    b,
                    u,
                    h: hact,
                });
            }
            x = x2;
        }
        let (z, inv_f) = rms_norm(&x, &self.params.final_norm);
        let logits = self.output_logits(&z);
        let trace = keep.then(|| Trace {
            layers: caches,
            xl: x,
            inv_f,
            z,
        });
        Ok(Pass {
            logits,
            trace,
            attention,
        })
    }

    /// Logits for every row of `arr`, with rotary positions taken from the
    /// arrangement and attention restricted to its mask.
    pub fn forward(
        &self,
        arr: &ArrangedSequence,
        capture_attention: bool,
    ) -> Result<ForwardOutput<T>> {
        let seg = self.segment(arr, 0)?;
        let pass = self.run(&arr.tokens, &[seg], false, capture_attention)?;
        Ok(ForwardOutput {
            logits: pass.logits,
            attention: pass.attention.map(|layers| {
                layers
                    .into_iter()
                    .map(|heads| LayerAttention { heads })
                    .collect()
            }),
        })
    }

    /// Logits when the score between query row `r` and key row `c` is
    /// `q_r^T R(-distances[r, c]) k_c`. Every pair gets its own rotation, so
    /// arbitrary per-pair relative distances can be expressed.
    pub fn forward_relative(
        &self,
        tokens: &[TokenId],
        mask: &AttnMask,
        distances: &Array2<f64>,
    ) -> Result<Array2<T>> {
        let n = tokens.len();
        if mask.len() != n || distances.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: mask.len(),
            });
        }
        self.check_tokens(tokens)?;
        self.check_span(mask, |r, c| distances[[r, c]])?;
        let seg = Segment {
            start: 0,
            len: n,
            mask,
            keys: Keys::Relative(distances),
        };
        Ok(self.run(tokens, &[seg], false, false)?.logits)
    }

    pub fn loss(&self, arr: &ArrangedSequence) -> Result<f64> {
        loss(&self.forward(arr, false)?, arr)
    }

    /// Loss and exact gradient for a single arrangement.
    pub fn backward(&self, arr: &ArrangedSequence) -> Result<(f64, Parameters<T>)> {
        let (losses, grad) = self.batch_gradient(&[arr])?;
        Ok((losses[0], grad))
    }

    /// Per-example losses and the *sum* of the per-example gradients.
    pub fn batch_gradient(&self, batch: &[&ArrangedSequence]) -> Result<(Vec<f64>, Parameters<T>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut tokens = Vec::new();
        let mut segs = Vec::with_capacity(batch.len());
        for arr in batch {
            segs.push(self.segment(arr, tokens.len())?);
            tokens.extend_from_slice(&arr.tokens);
        }
        let pass = self.run(&tokens, &segs, true, false)?;
        let trace = pass.trace.expect("trace kept");

        let mut dlogits = Array2::zeros(pass.logits.raw_dim());
        let mut losses = Vec::with_capacity(batch.len());
        for (arr, seg) in batch.iter().zip(&segs) {
            let rows = seg.start..seg.start + seg.len;
            let (l, g) = nll(pass.logits.slice(s![rows.clone(), ..]), &arr.labels)?;
            dlogits.slice_mut(s![rows, ..]).assign(&g);
            losses.push(l);
        }

        let mut grad = Parameters::zeros(&self.config);
        let dz = match &self.params.head {
            Some(head) => {
                let gh = grad.head.as_mut().expect("untied");
                *gh += &trace.z.t().dot(&dlogits);
                dlogits.dot(&head.t())
            }
            None => {
                let s = self.tied_scale();
                grad.embed += &(dlogits.t().dot(&trace.z) * s);
                dlogits.dot(&self.params.embed) * s
            }
        };
        let mut dx = rms_backward(
            &trace.xl,
            &trace.inv_f,
            &self.params.final_norm,
            &dz,
            &mut grad.final_norm,
        );

        for (l, cache) in trace.layers.iter().enumerate().rev() {
            dx = self.layer_backward(
                &self.params.layers[l],
                cache,
                &segs,
                dx,
                &mut grad.layers[l],
            );
        }
        for (r, &t) in tokens.iter().enumerate() {
            let mut row = grad.embed.row_mut(t as usize);
            row += &dx.row(r);
        }
        Ok((losses, grad))
    }

    fn layer_backward(
        &self,
        p: &LayerParams<T>,
        c: &LayerCache<T>,
        segs: &[Segment<'_>],
        dx2: Array2<T>,
        g: &mut LayerParams<T>,
    ) -> Array2<T> {
        let (heads, dh) = (self.config.heads, self.config.d_head());
        let scale = self.head_scale();

        g.w2 += &c.h.t().dot(&dx2);
        let dh_act = dx2.dot(&p.w2.t());
        let mut du = dh_act;
        du.zip_mut_with(&c.u, |d, &u| *d *= silu_grad(u));
        g.w1 += &c.b.t().dot(&du);
        let db = du.dot(&p.w1.t());
        let dx1 = dx2 + rms_backward(&c.x1, &c.inv2, &p.ffn_norm, &db, &mut g.ffn_norm);

        g.wo += &c.o.t().dot(&dx1);
        let d_o = dx1.dot(&p.wo.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        let mut idx = 0;
        for seg in segs {
            let rows = seg.start..seg.start + seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let probs = &c.probs[idx];
                idx += 1;
                let doh = d_o.slice(s![rows.clone(), cols.clone()]);
                let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                let dp = doh.dot(&vh.t());
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&probs.t().dot(&doh));
                let mut ds = dp;
                for r in 0..seg.len {
                    let pr = probs.row(r);
                    let mut dsr = ds.row_mut(r);
                    let inner: T = pr.iter().zip(dsr.iter()).map(|(&a, &b)| a * b).sum();
                    dsr.iter_mut()
                        .zip(pr.iter())
                        .for_each(|(d, &pv)| *d = pv * (*d - inner) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols])
                    .assign(&ds.t().dot(&qh));
            }
            if let Keys::Rotary(table) = &seg.keys {
                for r in 0..seg.len {
                    let row = seg.start + r;
                    table.rotate_row(r, dq.row_mut(row).as_slice_mut().expect("row"), true);
                    table.rotate_row(r, dk.row_mut(row).as_slice_mut().expect("row"), true);
                }
            }
        }
        g.wq += &c.a.t().dot(&dq);
        g.wk += &c.a.t().dot(&dk);
        g.wv += &c.a.t().dot(&dv);
        let da = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
        dx1 + rms_backward(&c.x, &c.inv1, &p.attn_norm, &da, &mut g.attn_norm)
    }

    // Single-row building blocks for incremental decoding.

    pub(crate) fn embed_token(&self, token: TokenId) -> Result<Array1<T>> {
        self.check_tokens(&[token])?;
        Ok(self.params.embed.row(token as usize).to_owned())
    }

    /// Unrotated query, key and value of one row entering layer `l`.
    pub(crate) fn qkv(&self, l: usize, x: &Array1<T>) -> (Array1<T>, Array1<T>, Array1<T>) {
        let p = &self.params.layers[l];
        let a = rms_norm_row(x.view(), &p.attn_norm);
        (a.dot(&p.wq), a.dot(&p.wk), a.dot(&p.wv))
    }

    /// Residual attention output followed by the feed-forward sub-block.
    pub(crate) fn finish_block(&self, l: usize, x: &Array1<T>, o: &Array1<T>) -> Array1<T> {
        let p = &self.params.layers[l];
        let x1 = x + &o.dot(&p.wo);
        let b = rms_norm_row(x1.view(), &p.ffn_norm);
        let h = b.dot(&p.w1).mapv(silu);
        &x1 + &h.dot(&p.w2)
    }

    pub(crate) fn logits_row(&self, x: &Array1<T>) -> Array1<T> {
        let z = rms_norm_row(x.view(), &self.params.final_norm);
        match &self.params.head {
            Some(head) => z.dot(head),
            None => self.params.embed.dot(&z) * self.tied_scale(),
        }
    }

    pub(crate) fn attention_scale(&self) -> T {
        self.head_scale()
    }
}

fn rms_norm_row<T: Scalar>(x: ArrayView1<'_, T>, g: &Array1<T>) -> Array1<T> {
    let x2 = x.insert_axis(Axis(0)).to_owned();
    rms_norm(&x2, g).0.index_axis_move(Axis(0), 0)
}

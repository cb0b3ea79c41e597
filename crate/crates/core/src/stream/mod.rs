//! Wait-k streaming decoding over split source/target key-value caches.
//!
//! Keys are cached unrotated next to the position they currently take, and a
//! per-entry memo holds the rotated copy. Rotation is redone only when an
//! entry's position has changed, which is what makes position re-encoding
//! cheap while full re-encoding still pays for recomputing target rows.

mod cache;
mod oracle;

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::paradigm::{ParadigmId, PositionRemoval, TokenId};
use crate::rope::PositionId;
use crate::scalar::Scalar;

pub use cache::{CacheEntry, LayerCache, SplitKvCache};
pub use oracle::oracle_decode;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> TokenId {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i as TokenId)
}

/// Greedy choice for one step. PAD and BOS are never labels and never
/// chosen; with `skip_eos` neither is the end symbol.
pub(crate) fn pick(logits: &[f64], skip_eos: bool) -> TokenId {
    argmax(logits.iter().enumerate().map(|(i, &v)| {
        let t = i as TokenId;
        if t == PAD || t == BOS || (skip_eos && t == EOS) {
            f64::NEG_INFINITY
        } else {
            v
        }
    }))
}

/// Decides when a written token closes a word and the policy may read again.
pub trait WordBoundary {
    fn is_boundary(&self, token: TokenId) -> bool;
}

/// One token is one word.
#[derive(Debug, Clone, Copy, Default)]
pub struct EveryToken;

impl WordBoundary for EveryToken {
    fn is_boundary(&self, _token: TokenId) -> bool {
        true
    }
}

/// When full re-encoding refreshes the target cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReencodeTrigger {
    /// After every read that adds source tokens.
    #[default]
    OnRead,
    /// Before every write.
    OnWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinishReason {
    Eos,
    LengthCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub paradigm: ParadigmId,
    pub k: usize,
    pub phi: PositionId,
    pub removal: PositionRemoval,
    pub reencode: ReencodeTrigger,
    /// Keep the logits of every write step in the trace.
    pub record_logits: bool,
    /// Never pick EOS and stop after exactly this many tokens.
    pub forced_len: Option<usize>,
    /// Content-token cap; `decode` defaults it to `2 * |source| + 8`.
    pub max_tokens: Option<usize>,
}

impl DecodeOptions {
    pub fn new(paradigm: ParadigmId, k: usize) -> Self {
        Self {
            paradigm,
            k,
            phi: PositionId::ZERO,
            removal: PositionRemoval::None,
            reencode: ReencodeTrigger::OnRead,
            record_logits: false,
            forced_len: None,
            max_tokens: None,
        }
    }

    pub fn with_phi(mut self, phi: PositionId) -> Self {
        self.phi = phi;
        self
    }

    pub fn with_removal(mut self, removal: PositionRemoval) -> Self {
        self.removal = removal;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_logits = true;
        self
    }

    fn cap(&self, source_len: usize) -> usize {
        self.forced_len
            .or(self.max_tokens)
            .unwrap_or(2 * source_len + 8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Emitted content tokens; a final EOS is not included.
    pub tokens: Vec<TokenId>,
    /// Source tokens read before each content token was emitted.
    pub g: Vec<usize>,
    /// Wall time spent on each write, including the read before it.
    pub step_seconds: Vec<f64>,
    pub finish: FinishReason,
    /// Logits of every write step, EOS step included, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step_logits: Option<Vec<Vec<f64>>>,
}

/// Exact operation counts accumulated over a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounters {
    /// Query-key scores, summed over layers.
    pub attention_ops: u64,
    /// Query and key rotations, summed over layers.
    pub rotation_ops: u64,
    /// Target rows recomputed by re-encoding, summed over layers.
    pub recompute_ops: u64,
}

impl OpCounters {
    pub fn total(&self) -> u64 {
        self.attention_ops + self.rotation_ops + self.recompute_ops
    }
}

/// Which cached entries a query attends.
#[derive(Debug, Clone, Copy)]
struct Span {
    sources: usize,
    targets: usize,
}

/// State of one streaming run.
pub struct DecodeSession<'m, T> {
    model: &'m Model<T>,
    opts: DecodeOptions,
    boundary: Box<dyn WordBoundary + 'm>,
    cache: SplitKvCache<T>,
    /// Target-side inputs fed so far, starting with BOS.
    fed: Vec<TokenId>,
    /// Batch-style storage feeds the last emitted token lazily at the next write.
    pending: Option<TokenId>,
    /// Arrival-position counter and the positions reserved for targets.
    next_arrival: usize,
    target_arrival: Vec<f64>,
    /// Output of the last row fed, used by interleaved storage.
    last_hidden: Option<Array1<T>>,
    /// Source count the target cache was last fully encoded against.
    encoded_against: usize,
    last_reencoded: usize,
    action: Action,
    finished: Option<FinishReason>,
    trace: DecodeTrace,
    counters: OpCounters,
    step_start: Option<Instant>,
}

impl<'m, T: Scalar> DecodeSession<'m, T> {
    pub fn new(model: &'m Model<T>, opts: DecodeOptions) -> Result<Self> {
        if opts.k == 0 && opts.paradigm != ParadigmId::BatchOffline {
            return Err(Error::contract("wait-k requires k >= 1"));
        }
        let trace = DecodeTrace {
            tokens: Vec::new(),
            g: Vec::new(),
            step_seconds: Vec::new(),
            finish: FinishReason::LengthCap,
            step_logits: opts.record_logits.then(Vec::new),
        };
        Ok(Self {
            model,
            opts,
            boundary: Box::new(EveryToken),
            cache: SplitKvCache::new(model.config.layers),
            fed: Vec::new(),
            pending: None,
            next_arrival: 0,
            target_arrival: Vec::new(),
            last_hidden: None,
            encoded_against: 0,
            last_reencoded: 0,
            action: Action::Read,
            finished: None,
            trace,
            counters: OpCounters::default(),
            step_start: None,
        })
    }

    pub fn with_boundary(mut self, boundary: impl WordBoundary + 'm) -> Self {
        self.boundary = Box::new(boundary);
        self
    }

    pub fn action(&self) -> Action {
        self.action
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    pub fn cache(&self) -> &SplitKvCache<T> {
        &self.cache
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn trace(&self) -> &DecodeTrace {
        &self.trace
    }

    /// Source tokens read so far.
    pub fn source_len(&self) -> usize {
        self.cache.source_len()
    }

    /// Target rows recomputed (per layer) by the most recent re-encoding.
    pub fn last_reencoded_rows(&self) -> usize {
        self.last_reencoded
    }

    fn interleaved(&self) -> bool {
        self.opts.paradigm == ParadigmId::Interleaved
    }

    fn arrival_positions(&self) -> bool {
        matches!(
            self.opts.paradigm,
            ParadigmId::Interleaved | ParadigmId::BatchNoRe
        )
    }

    /// Target positions follow the current source length.
    fn dynamic_targets(&self) -> bool {
        matches!(
            self.opts.paradigm,
            ParadigmId::BatchPosRe | ParadigmId::BatchAllRe | ParadigmId::BatchOffline
        )
    }

    fn source_position(&mut self, index: usize) -> f64 {
        let raw = if self.arrival_positions() {
            let p = self.next_arrival;
            self.next_arrival += 1;
            p as f64
        } else {
            index as f64
        };
        if self.opts.removal.removes(crate::paradigm::Role::Source) {
            0.0
        } else {
            raw
        }
    }

    fn target_position(&self, j: usize) -> f64 {
        if self.opts.removal.removes(crate::paradigm::Role::Target) {
            return 0.0;
        }
        match self.opts.paradigm {
            ParadigmId::GroupStream => self.opts.phi.value() + j as f64,
            ParadigmId::Interleaved | ParadigmId::BatchNoRe => self.target_arrival[j],
            _ => (self.cache.source_len() + j) as f64,
        }
    }

    fn reserve_target_arrival(&mut self) {
        if self.arrival_positions() {
            self.target_arrival.push(self.next_arrival as f64);
            self.next_arrival += 1;
        }
    }

    fn mark_step(&mut self) {
        if self.step_start.is_none() {
            self.step_start = Some(Instant::now());
        }
    }

    /// Reads `tokens` (possibly none) into the source cache and hands control
    /// to the writer.
    pub fn read_step(&mut self, tokens: &[TokenId]) -> Result<()> {
        if self.finished.is_some() {
            return Err(Error::contract("read after the session finished"));
        }
        if self.action != Action::Read {
            return Err(Error::contract(
                "read_step called while the session expects a write",
            ));
        }
        self.mark_step();
        for &t in tokens {
            if t == EOS || t == BOS {
                return Err(Error::contract("reserved token in the source stream"));
            }
            let index = self.cache.source_len();
            let pos = self.source_position(index);
            let span = if self.interleaved() {
                Span {
                    sources: index,
                    targets: self.cache.target_len(),
                }
            } else {
                Span {
                    sources: index,
                    targets: 0,
                }
            };
            let hidden = self.feed(t, pos, true, span)?;
            self.last_hidden = Some(hidden);
        }
        if !tokens.is_empty() && self.dynamic_targets() {
            self.refresh_target_positions();
        }
        if self.opts.paradigm == ParadigmId::BatchAllRe
            && self.opts.reencode == ReencodeTrigger::OnRead
            && self.cache.source_len() > self.encoded_against
        {
            self.reencode_targets()?;
        }
        self.action = Action::Write;
        Ok(())
    }

    /// Emits one token greedily. Returns the token, which may be EOS.
    pub fn write_step(&mut self) -> Result<TokenId> {
        if self.finished.is_some() {
            return Err(Error::contract("write after the session finished"));
        }
        if self.action != Action::Write {
            return Err(Error::contract(
                "write_step called while the session expects a read",
            ));
        }
        self.mark_step();
        let logits = if self.interleaved() {
            if self.fed.is_empty() {
                self.reserve_target_arrival();
                self.feed_target(BOS)?;
            }
            let hidden = self.last_hidden.as_ref().expect("a row was fed");
            self.model.logits_row(hidden)
        } else {
            if self.opts.paradigm == ParadigmId::BatchAllRe
                && self.opts.reencode == ReencodeTrigger::OnWrite
                && self.cache.target_len() > 0
            {
                self.reencode_targets()?;
            }
            let token = match self.pending.take() {
                Some(t) => t,
                None => {
                    self.reserve_target_arrival();
                    BOS
                }
            };
            let hidden = self.feed_target(token)?;
            self.model.logits_row(&hidden)
        };
        let logits: Vec<f64> = logits.iter().map(|x| x.f64()).collect();
        let token = pick(&logits, self.opts.forced_len.is_some());
        if let Some(all) = self.trace.step_logits.as_mut() {
            all.push(logits);
        }
        let elapsed = self
            .step_start
            .take()
            .map_or(0.0, |t| t.elapsed().as_secs_f64());

        if token == EOS {
            self.finish(FinishReason::Eos);
            return Ok(token);
        }
        self.trace.tokens.push(token);
        self.trace.g.push(self.cache.source_len());
        self.trace.step_seconds.push(elapsed);
        if self.trace.tokens.len() >= self.cap_hint() {
            self.finish(FinishReason::LengthCap);
            return Ok(token);
        }
        self.reserve_target_arrival();
        if self.interleaved() {
            self.feed_target(token)?;
        } else {
            self.pending = Some(token);
        }
        if self.boundary.is_boundary(token) {
            self.action = Action::Read;
        }
        Ok(token)
    }

    fn cap_hint(&self) -> usize {
        self.opts
            .forced_len
            .or(self.opts.max_tokens)
            .unwrap_or(usize::MAX)
    }

    fn finish(&mut self, reason: FinishReason) {
        self.finished = Some(reason);
        self.trace.finish = reason;
    }

    pub fn into_trace(self) -> (DecodeTrace, OpCounters) {
        (self.trace, self.counters)
    }

    fn feed_target(&mut self, token: TokenId) -> Result<Array1<T>> {
        let j = self.fed.len();
        self.fed.push(token);
        let pos = self.target_position(j);
        let span = Span {
            sources: self.cache.source_len(),
            targets: j,
        };
        let hidden = self.feed(token, pos, false, span)?;
        self.last_hidden = Some(hidden.clone());
        Ok(hidden)
    }

    /// Runs one new row through every layer, attending `span` plus itself,
    /// and appends its keys and values to the source or target cache.
    fn feed(&mut self, token: TokenId, pos: f64, is_source: bool, span: Span) -> Result<Array1<T>> {
        let mut x = self.model.embed_token(token)?;
        for l in 0..self.model.config.layers {
            let (q, k, v) = self.model.qkv(l, &x);
            let entry = CacheEntry::new(k, v, pos);
            let layer = self.cache.layer_mut(l);
            if is_source {
                layer.source.push(entry);
            } else {
                layer.target.push(entry);
            }
            let own = if is_source {
                Span {
                    sources: span.sources + 1,
                    targets: span.targets,
                }
            } else {
                Span {
                    sources: span.sources,
                    targets: span.targets + 1,
                }
            };
            let o = self.attend(l, q, pos, own)?;
            x = self.model.finish_block(l, &x, &o);
        }
        Ok(x)
    }

    fn attend(&mut self, l: usize, mut q: Array1<T>, qpos: f64, span: Span) -> Result<Array1<T>> {
        let model = self.model;
        let rotary = model.rotary();
        let max = model.config.max_positions as f64;
        crate::rope::rotate_heads(rotary, q.as_slice_mut().expect("row"), qpos);
        self.counters.rotation_ops += 1;
        let layer = self.cache.layer_mut(l);
        for e in layer.source[..span.sources]
            .iter_mut()
            .chain(layer.target[..span.targets].iter_mut())
        {
            let distance = (qpos - e.position).abs();
            if distance > max {
                return Err(Error::PositionOverflow {
                    distance,
                    max: model.config.max_positions,
                });
            }
            if e.refresh_rotation(rotary) {
                self.counters.rotation_ops += 1;
            }
        }
        let layer = self.cache.layer(l);
        let keys: Vec<&CacheEntry<T>> = layer.source[..span.sources]
            .iter()
            .chain(&layer.target[..span.targets])
            .collect();
        self.counters.attention_ops += keys.len() as u64;
        let (heads, dh) = (model.config.heads, model.config.d_head());
        let scale = model.attention_scale();
        let mut out = Array1::zeros(model.config.d_model);
        let mut scores = vec![T::zero(); keys.len()];
        for h in 0..heads {
            let lanes = h * dh..(h + 1) * dh;
            let qh = &q.as_slice().expect("row")[lanes.clone()];
            for (s, e) in scores.iter_mut().zip(&keys) {
                let kh = &e.rotated_key()[lanes.clone()];
                *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            crate::model::masked_softmax_row(&mut scores, |_| true)?;
            let oh = &mut out.as_slice_mut().expect("row")[lanes.clone()];
            for (&p, e) in scores.iter().zip(&keys) {
                let vh = &e.value.as_slice().expect("row")[lanes.clone()];
                oh.iter_mut().zip(vh).for_each(|(o, &v)| *o += p * v);
            }
        }
        Ok(out)
    }

    fn refresh_target_positions(&mut self) {
        let positions: Vec<f64> = (0..self.cache.target_len())
            .map(|j| self.target_position(j))
            .collect();
        for l in 0..self.model.config.layers {
            for (e, &p) in self.cache.layer_mut(l).target.iter_mut().zip(&positions) {
                e.position = p;
            }
        }
    }

    /// Recomputes every cached target row from its token against the current
    /// source cache, layer by layer.
    fn reencode_targets(&mut self) -> Result<()> {
        let rows = self.cache.target_len();
        self.encoded_against = self.cache.source_len();
        self.last_reencoded = rows;
        if rows == 0 {
            return Ok(());
        }
        let positions: Vec<f64> = (0..rows).map(|j| self.target_position(j)).collect();
        let mut xs = self
            .fed
            .iter()
            .map(|&t| self.model.embed_token(t))
            .collect::<Result<Vec<_>>>()?;
        let sources = self.cache.source_len();
        for l in 0..self.model.config.layers {
            let mut queries = Vec::with_capacity(rows);
            for (j, x) in xs.iter().enumerate() {
                let (q, k, v) = self.model.qkv(l, x);
                self.cache.layer_mut(l).target[j] = CacheEntry::new(k, v, positions[j]);
                queries.push(q);
            }
            self.counters.recompute_ops += rows as u64;
            for (j, q) in queries.into_iter().enumerate() {
                let span = Span {
                    sources,
                    targets: j + 1,
                };
                let o = self.attend(l, q, positions[j], span)?;
                xs[j] = self.model.finish_block(l, &xs[j], &o);
            }
        }
        Ok(())
    }
}

/// Runs the wait-k policy over `source` until EOS or the length cap.
pub fn decode<T: Scalar>(
    model: &Model<T>,
    opts: &DecodeOptions,
    source: &[TokenId],
) -> Result<DecodeTrace> {
    Ok(decode_counted(model, opts, source)?.0)
}

/// [`decode`] that also returns the session's operation counts.
pub fn decode_counted<T: Scalar>(
    model: &Model<T>,
    opts: &DecodeOptions,
    source: &[TokenId],
) -> Result<(DecodeTrace, OpCounters)> {
    if source.is_empty() {
        return Err(Error::contract("cannot decode an empty source"));
    }
    let mut opts = opts.clone();
    opts.max_tokens = Some(opts.cap(source.len()));
    let first = match opts.paradigm {
        ParadigmId::BatchOffline => source.len(),
        _ => opts.k.min(source.len()),
    };
    let mut session = DecodeSession::new(model, opts)?;
    let mut read = 0;
    let mut chunk = first;
    while !session.is_finished() {
        if session.action() == Action::Read {
            let end = (read + chunk).min(source.len());
            session.read_step(&source[read..end])?;
            read = end;
            chunk = 1;
        }
        session.write_step()?;
    }
    Ok(session.into_trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            vocab_size: 11,
            ..ModelConfig::default()
        };
        Model::init(cfg, 21).unwrap()
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax([0.5f32]), 0);
        assert_eq!(pick(&[0.0, 0.0, 5.0, 1.0], true), 3);
        assert_eq!(pick(&[9.0, 9.0, 5.0, 1.0], false), 2);
    }

    #[test]
    fn first_read_consumes_k_tokens() {
        let m = model();
        let mut s = DecodeSession::new(&m, DecodeOptions::new(ParadigmId::GroupStream, 3)).unwrap();
        s.read_step(&[3, 4, 5]).unwrap();
        assert_eq!(s.source_len(), 3);
        assert_eq!(s.action(), Action::Write);
        assert!(matches!(s.read_step(&[6]), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_read_still_flips_to_write() {
        let m = model();
        let mut s = DecodeSession::new(&m, DecodeOptions::new(ParadigmId::GroupStream, 1)).unwrap();
        s.read_step(&[3]).unwrap();
        s.write_step().unwrap();
        if !s.is_finished() {
            s.read_step(&[]).unwrap();
            assert_eq!(s.action(), Action::Write);
            assert_eq!(s.source_len(), 1);
        }
    }

    #[test]
    fn write_requires_write_action() {
        let m = model();
        let mut s = DecodeSession::new(&m, DecodeOptions::new(ParadigmId::BatchNoRe, 1)).unwrap();
        assert!(matches!(s.write_step(), Err(Error::Contract(_))));
    }

    #[test]
    fn all_re_read_recomputes_every_cached_target_row() {
        let m = model();
        let mut opts = DecodeOptions::new(ParadigmId::BatchAllRe, 1);
        opts.forced_len = Some(10);
        let mut s = DecodeSession::new(&m, opts).unwrap();
        s.read_step(&[3]).unwrap();
        s.write_step().unwrap();
        s.read_step(&[4]).unwrap();
        s.write_step().unwrap();
        // BOS and the first emitted token are cached.
        s.read_step(&[5]).unwrap();
        assert_eq!(s.cache().target_len(), 2);
        assert_eq!(s.last_reencoded_rows(), 2);
        let before = s.counters().recompute_ops;
        s.write_step().unwrap();
        s.read_step(&[]).unwrap();
        assert_eq!(s.counters().recompute_ops, before);
    }

    #[test]
    fn forced_length_ignores_eos() {
        let m = model();
        let mut opts = DecodeOptions::new(ParadigmId::GroupStream, 2);
        opts.forced_len = Some(7);
        let trace = decode(&m, &opts, &[3, 4, 5]).unwrap();
        assert_eq!(trace.tokens.len(), 7);
        assert_eq!(trace.finish, FinishReason::LengthCap);
        assert!(!trace.tokens.contains(&EOS));
    }

    #[test]
    fn schedule_is_recorded() {
        let m = model();
        let mut opts = DecodeOptions::new(ParadigmId::BatchNoRe, 2);
        opts.forced_len = Some(6);
        let trace = decode(&m, &opts, &[3, 4, 5, 6]).unwrap();
        assert_eq!(trace.g, vec![2, 3, 4, 4, 4, 4]);
    }

    #[test]
    fn cache_source_positions_count_from_zero() {
        let m = model();
        for p in [
            ParadigmId::GroupStream,
            ParadigmId::BatchPosRe,
            ParadigmId::BatchAllRe,
        ] {
            let mut s = DecodeSession::new(&m, DecodeOptions::new(p, 3)).unwrap();
            s.read_step(&[3, 4, 5]).unwrap();
            for l in 0..2 {
                assert_eq!(s.cache().layer(l).source_positions(), vec![0.0, 1.0, 2.0]);
            }
        }
    }
}

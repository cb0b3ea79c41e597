//! Training-time sequence layouts for the six processing paradigms.
//!
//! An arrangement takes a source sequence and a target-side *input* sequence
//! (`target[0]` is the target prompt, usually BOS) and fixes, for one paradigm:
//! the storage order of tokens, when each token arrives in a streaming run,
//! its rotary position, the attention mask and which rows carry a loss.
//!
//! Arrival order under wait-k with per-row read counts `G` (`G[j]` sources are
//! visible when the token after `target[j]` is predicted) is
//!
//! ```text
//! x[0..G0] t0 t1 x[G0..G1] t2 x[G1..G2] t3 ... t(N-1) x[G(N-2)..M]
//! ```
//!
//! so the token emitted after `t_j` is always predicted from a row that has
//! seen exactly `G[j]` sources, whether that row is `t_j` itself (batch-style
//! storage) or the last source read before it (interleaved storage).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::PositionId;

pub type TokenId = u32;

/// Which processing mode governs masks, positions and re-encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParadigmId {
    /// Full source available up front; plain causal LM layout.
    #[serde(rename = "batch-offline")]
    BatchOffline,
    /// Tokens encoded in arrival order under a plain causal mask.
    #[serde(rename = "interleaved")]
    Interleaved,
    /// Batch layout, interleaved position ids, no re-encoding.
    #[serde(rename = "batch-no-re")]
    BatchNoRe,
    /// Batch layout with target positions refreshed after every read.
    #[serde(rename = "batch-pos-re")]
    BatchPosRe,
    /// Batch layout with target keys/values recomputed after every read.
    #[serde(rename = "batch-all-re")]
    BatchAllRe,
    /// Batch layout with independent source/target position groups.
    #[serde(rename = "group", alias = "group-stream")]
    GroupStream,
}

impl ParadigmId {
    pub const ALL: [ParadigmId; 6] = [
        ParadigmId::BatchOffline,
        ParadigmId::Interleaved,
        ParadigmId::BatchNoRe,
        ParadigmId::BatchPosRe,
        ParadigmId::BatchAllRe,
        ParadigmId::GroupStream,
    ];

    /// The five paradigms that read the source incrementally.
    pub const STREAMING: [ParadigmId; 5] = [
        ParadigmId::Interleaved,
        ParadigmId::BatchNoRe,
        ParadigmId::BatchPosRe,
        ParadigmId::BatchAllRe,
        ParadigmId::GroupStream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParadigmId::BatchOffline => "batch-offline",
            ParadigmId::Interleaved => "interleaved",
            ParadigmId::BatchNoRe => "batch-no-re",
            ParadigmId::BatchPosRe => "batch-pos-re",
            ParadigmId::BatchAllRe => "batch-all-re",
            ParadigmId::GroupStream => "group",
        }
    }

    pub fn is_streaming(self) -> bool {
        self != ParadigmId::BatchOffline
    }

    /// Source rows can never see target columns.
    pub fn isolates_source(self) -> bool {
        !matches!(self, ParadigmId::Interleaved | ParadigmId::BatchOffline)
    }
}

impl fmt::Display for ParadigmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParadigmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "batch-offline" | "offline" => ParadigmId::BatchOffline,
            "interleaved" => ParadigmId::Interleaved,
            "batch-no-re" => ParadigmId::BatchNoRe,
            "batch-pos-re" => ParadigmId::BatchPosRe,
            "batch-all-re" => ParadigmId::BatchAllRe,
            "group" | "group-stream" => ParadigmId::GroupStream,
            other => {
                return Err(Error::contract(format!(
                    "unknown paradigm '{other}' (expected one of batch-offline, interleaved, \
                     batch-no-re, batch-pos-re, batch-all-re, group)"
                )))
            }
        };
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// Which roles get their positions replaced by a constant 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionRemoval {
    #[default]
    None,
    Source,
    Target,
    All,
}

impl PositionRemoval {
    pub fn removes(self, role: Role) -> bool {
        matches!(
            (self, role),
            (PositionRemoval::All, _)
                | (PositionRemoval::Source, Role::Source)
                | (PositionRemoval::Target, Role::Target)
        )
    }
}

impl FromStr for PositionRemoval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PositionRemoval::None),
            "source" => Ok(PositionRemoval::Source),
            "target" => Ok(PositionRemoval::Target),
            "all" => Ok(PositionRemoval::All),
            other => Err(Error::contract(format!(
                "unknown position removal '{other}'"
            ))),
        }
    }
}

/// Wait-k read/write schedule. `g[j - 1]` is the number of source tokens
/// readable before target token `j` (1-based) is emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitkSchedule {
    k: usize,
    source_len: usize,
    g: Vec<usize>,
}

/// `g(j) = min(k + j - 1, source_len)` for `j = 1..=target_len`.
pub fn waitk_schedule(k: usize, source_len: usize, target_len: usize) -> Result<WaitkSchedule> {
    if k == 0 {
        return Err(Error::contract("wait-k requires k >= 1"));
    }
    if source_len == 0 {
        return Err(Error::contract("wait-k requires a non-empty source"));
    }
    let g = (1..=target_len)
        .map(|j| (k + j - 1).min(source_len))
        .collect();
    Ok(WaitkSchedule { k, source_len, g })
}

impl WaitkSchedule {
    /// A schedule from observed read counts, e.g. a decode prefix.
    pub fn from_reads(k: usize, source_len: usize, g: Vec<usize>) -> Result<Self> {
        if g.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("read counts must be non-decreasing"));
        }
        if g.iter().any(|&n| n > source_len) {
            return Err(Error::contract("read count exceeds the source length"));
        }
        Ok(Self { k, source_len, g })
    }

    /// Every target sees the whole source.
    pub fn offline(source_len: usize, target_len: usize) -> Self {
        Self {
            k: source_len.max(1),
            source_len,
            g: vec![source_len; target_len],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn target_len(&self) -> usize {
        self.g.len()
    }

    /// `g(j)`, 1-based.
    pub fn reads_before(&self, j: usize) -> usize {
        self.g[j - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.g
    }
}

/// Dense boolean attention mask, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::empty(n);
        for r in 0..n {
            for c in 0..=r {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.n + col] = value;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.n..(row + 1) * self.n]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One training example laid out for a paradigm. All per-token vectors are
/// indexed by storage row.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrangedSequence {
    pub paradigm: ParadigmId,
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
    /// Order in which the token reaches the model in a streaming run.
    pub arrival_index: Vec<usize>,
    pub positions: Vec<PositionId>,
    pub attn_mask: AttnMask,
    pub loss_mask: Vec<bool>,
    /// Next-token label for rows with `loss_mask` set.
    pub labels: Vec<Option<TokenId>>,
    source_rows: Vec<usize>,
    target_rows: Vec<usize>,
}

impl ArrangedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_rows.len()
    }

    pub fn target_len(&self) -> usize {
        self.target_rows.len()
    }

    /// Storage row of source token `i`.
    pub fn source_row(&self, i: usize) -> usize {
        self.source_rows[i]
    }

    /// Storage row of target token `j`.
    pub fn target_row(&self, j: usize) -> usize {
        self.target_rows[j]
    }

    pub fn source_rows(&self) -> &[usize] {
        &self.source_rows
    }

    pub fn target_rows(&self) -> &[usize] {
        &self.target_rows
    }

    pub fn position_values(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p.value()).collect()
    }

    /// The row whose output predicts the token that would follow the last
    /// target: the last target row for batch storage, the last arrival for
    /// interleaved storage.
    pub fn next_token_row(&self) -> usize {
        match self.paradigm {
            ParadigmId::Interleaved => self.len() - 1,
            _ => *self.target_rows.last().expect("arrangement has a target"),
        }
    }

    /// Number of source columns row `row` may attend.
    pub fn visible_sources(&self, row: usize) -> usize {
        self.source_rows
            .iter()
            .filter(|&&c| self.attn_mask.allowed(row, c))
            .count()
    }

    /// Assigns the constant position 0 to every token of the removed roles.
    pub fn remove_positions(&mut self, removal: PositionRemoval) {
        for (p, &role) in self.positions.iter_mut().zip(&self.roles) {
            if removal.removes(role) {
                *p = PositionId::ZERO;
            }
        }
    }
}

/// Role and in-role index of every token, in wait-k arrival order.
fn interleaved_order(source_len: usize, target_len: usize, g: &[usize]) -> Vec<(Role, usize)> {
    let mut order = Vec::with_capacity(source_len + target_len);
    let mut read = 0;
    let mut read_to = |upto: usize, order: &mut Vec<(Role, usize)>| {
        while read < upto {
            order.push((Role::Source, read));
            read += 1;
        }
    };
    for j in 0..target_len {
        let before = if j == 0 { g[0] } else { g[j - 1] };
        read_to(before, &mut order);
        order.push((Role::Target, j));
    }
    read_to(source_len, &mut order);
    order
}

/// Lays out `source` and the target-side input `target` for `paradigm`.
///
/// `target[0]` acts as the target prompt and is never itself a loss label.
/// `schedule` must cover `target.len()` rows; it is ignored by
/// [`ParadigmId::BatchOffline`], and `phi` is only used by
/// [`ParadigmId::GroupStream`].
pub fn arrange(
    paradigm: ParadigmId,
    schedule: &WaitkSchedule,
    phi: PositionId,
    source: &[TokenId],
    target: &[TokenId],
) -> Result<ArrangedSequence> {
    let (m, n) = (source.len(), target.len());
    if n == 0 {
        return Err(Error::contract(
            "arrangement needs at least one target token",
        ));
    }
    if paradigm != ParadigmId::BatchOffline {
        if schedule.source_len() != m {
            return Err(Error::contract(format!(
                "schedule built for {} source tokens, got {m}",
                schedule.source_len()
            )));
        }
        if schedule.target_len() < n {
            return Err(Error::contract(format!(
                "schedule covers {} target tokens, got {n}",
                schedule.target_len()
            )));
        }
    }
    if paradigm != ParadigmId::GroupStream && phi.value() != 0.0 {
        log::warn!("phi = {phi} ignored for paradigm {paradigm}");
    }

    let g: Vec<usize> = match paradigm {
        ParadigmId::BatchOffline => vec![m; n],
        _ => schedule.as_slice()[..n].to_vec(),
    };

    let arrival: Vec<(Role, usize)> = match paradigm {
        ParadigmId::BatchOffline => (0..m)
            .map(|i| (Role::Source, i))
            .chain((0..n).map(|j| (Role::Target, j)))
            .collect(),
        _ => interleaved_order(m, n, &g),
    };
    let mut src_arrival = vec![0; m];
    let mut tgt_arrival = vec![0; n];
    for (a, &(role, idx)) in arrival.iter().enumerate() {
        match role {
            Role::Source => src_arrival[idx] = a,
            Role::Target => tgt_arrival[idx] = a,
        }
    }

    let storage: Vec<(Role, usize)> = match paradigm {
        ParadigmId::Interleaved => arrival.clone(),
        _ => (0..m)
            .map(|i| (Role::Source, i))
            .chain((0..n).map(|j| (Role::Target, j)))
            .collect(),
    };

    let len = m + n;
    let mut source_rows = vec![0; m];
    let mut target_rows = vec![0; n];
    for (row, &(role, idx)) in storage.iter().enumerate() {
        match role {
            Role::Source => source_rows[idx] = row,
            Role::Target => target_rows[idx] = row,
        }
    }

    let position = |role: Role, idx: usize| -> Result<PositionId> {
        let arrival_pos = |a: usize| PositionId::from_index(a);
        Ok(match (paradigm, role) {
            (ParadigmId::Interleaved | ParadigmId::BatchNoRe, Role::Source) => {
                arrival_pos(src_arrival[idx])
            }
            (ParadigmId::Interleaved | ParadigmId::BatchNoRe, Role::Target) => {
                arrival_pos(tgt_arrival[idx])
            }
            (_, Role::Source) => PositionId::from_index(idx),
            (ParadigmId::GroupStream, Role::Target) => phi.shifted(idx as f64)?,
            (_, Role::Target) => PositionId::from_index(m + idx),
        })
    };

    let mut tokens = Vec::with_capacity(len);
    let mut roles = Vec::with_capacity(len);
    let mut arrival_index = Vec::with_capacity(len);
    let mut positions = Vec::with_capacity(len);
    for &(role, idx) in &storage {
        tokens.push(match role {
            Role::Source => source[idx],
            Role::Target => target[idx],
        });
        roles.push(role);
        arrival_index.push(match role {
            Role::Source => src_arrival[idx],
            Role::Target => tgt_arrival[idx],
        });
        positions.push(position(role, idx)?);
    }

    let attn_mask = match paradigm {
        ParadigmId::BatchOffline | ParadigmId::Interleaved => AttnMask::causal(len),
        _ => {
            let mut mask = AttnMask::empty(len);
            for (i, &r) in source_rows.iter().enumerate() {
                for &c in &source_rows[..=i] {
                    mask.set(r, c, true);
                }
            }
            for (j, &r) in target_rows.iter().enumerate() {
                for &c in &source_rows[..g[j]] {
                    mask.set(r, c, true);
                }
                for &c in &target_rows[..=j] {
                    mask.set(r, c, true);
                }
            }
            mask
        }
    };

    let mut labels = vec![None; len];
    match paradigm {
        ParadigmId::Interleaved => {
            for j in 1..n {
                let row = target_rows[j];
                labels[row - 1] = Some(target[j]);
            }
        }
        _ => {
            for j in 0..n.saturating_sub(1) {
                labels[target_rows[j]] = Some(target[j + 1]);
            }
        }
    }
    let loss_mask = labels.iter().map(Option::is_some).collect();

    Ok(ArrangedSequence {
        paradigm,
        tokens,
        roles,
        arrival_index,
        positions,
        attn_mask,
        loss_mask,
        labels,
        source_rows,
        target_rows,
    })
}

/// Counts of the edge classes that distinguish the paradigms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskReport {
    /// Source query rows allowed to see a target key.
    pub source_to_target_edges: usize,
    /// Target query rows allowed to see a source that arrives after them.
    pub target_future_source_edges: usize,
    /// Allowed entries over all entries.
    pub density: f64,
}

pub fn mask_report(arr: &ArrangedSequence) -> MaskReport {
    let mut s2t = 0;
    let mut future = 0;
    for r in 0..arr.len() {
        for c in 0..arr.len() {
            if !arr.attn_mask.allowed(r, c) {
                continue;
            }
            match (arr.roles[r], arr.roles[c]) {
                (Role::Source, Role::Target) => s2t += 1,
                (Role::Target, Role::Source) if arr.arrival_index[c] > arr.arrival_index[r] => {
                    future += 1
                }
                _ => {}
            }
        }
    }
    let n = arr.len();
    MaskReport {
        source_to_target_edges: s2t,
        target_future_source_edges: future,
        density: if n == 0 {
            0.0
        } else {
            arr.attn_mask.count() as f64 / (n * n) as f64
        },
    }
}

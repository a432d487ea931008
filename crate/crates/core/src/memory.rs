//! Short-term FIFO memory, similarity-consolidated long-term memory, and their
//! fusion into the decoder input.
//!
//! Every slot remembers which raw frames it was built from (`sources`, a
//! weighted list of frame indices). The models use this to rebuild memory
//! slots as linear combinations of encoder rows on the tape, so memory
//! contents stay differentiable while the selection logic (FIFO order,
//! similarity argmax) is treated as fixed, like a max-pool index.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub vec: Vec<f64>,
    /// Raw frames absorbed by this slot.
    pub count: u64,
    /// `(frame index, weight)` pairs, sorted by index, weights summing to 1.
    pub sources: Vec<(usize, f64)>,
}

impl Slot {
    pub fn raw(vec: Vec<f64>, frame: usize) -> Self {
        Self {
            vec,
            count: 1,
            sources: vec![(frame, 1.0)],
        }
    }
}

fn merge_sources(a: &[(usize, f64)], wa: f64, b: &[(usize, f64)], wb: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(&(fa, xa)), Some(&(fb, xb))) if fa == fb => {
                out.push((fa, wa * xa + wb * xb));
                i += 1;
                j += 1;
            }
            (Some(&(fa, xa)), Some(&(fb, _))) if fa < fb => {
                out.push((fa, wa * xa));
                i += 1;
            }
            (Some(&(fa, xa)), None) => {
                out.push((fa, wa * xa));
                i += 1;
            }
            (_, Some(&(fb, xb))) => {
                out.push((fb, wb * xb));
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    out
}

/// How adjacent long-term slots are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// `(a + b) / 2`.
    #[default]
    Mean,
    /// Mean weighted by how many raw frames each slot holds.
    CountWeighted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }
}

/// Fixed-capacity sliding window over the most recent frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortTermMemory {
    capacity: usize,
    buffer: VecDeque<Slot>,
    /// Leading entries that are initialisation copies, not distinct frames.
    padding: usize,
}

impl ShortTermMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("short-term capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            padding: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Oldest first.
    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.buffer.iter()
    }

    pub fn frames(&self) -> Vec<Vec<f64>> {
        self.buffer.iter().map(|s| s.vec.clone()).collect()
    }

    /// Pushes a frame. The first push fills the whole buffer with copies of
    /// it; later pushes evict the oldest entry. Returns the evicted frame
    /// when it was a real frame rather than an initialisation copy.
    pub fn push(&mut self, slot: Slot) -> Result<Option<Slot>> {
        if let Some(first) = self.buffer.front() {
            if first.vec.len() != slot.vec.len() {
                return Err(Error::Shape(format!(
                    "frame dimension {} vs memory dimension {}",
                    slot.vec.len(),
                    first.vec.len()
                )));
            }
        } else {
            for _ in 1..self.capacity {
                self.buffer.push_back(slot.clone());
            }
            self.padding = self.capacity - 1;
            self.buffer.push_back(slot);
            return Ok(None);
        }
        let evicted = self.buffer.pop_front().expect("non-empty buffer");
        self.buffer.push_back(slot);
        if self.padding > 0 {
            self.padding -= 1;
            Ok(None)
        } else {
            Ok(Some(evicted))
        }
    }
}

/// Long-term memory consolidated by merging the most similar adjacent slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTermMemory {
    capacity: usize,
    buffer: Vec<Slot>,
    pub merge: MergeRule,
    pub similarity: Similarity,
}

impl LongTermMemory {
    pub fn new(capacity: usize, merge: MergeRule, similarity: Similarity) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("long-term capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            buffer: Vec::with_capacity(capacity + 1),
            merge,
            similarity,
        })
    }

    /// Wraps an existing buffer without consolidating it.
    pub fn from_slots(capacity: usize, slots: Vec<Slot>, merge: MergeRule, similarity: Similarity) -> Result<Self> {
        let mut m = Self::new(capacity, merge, similarity)?;
        m.buffer = slots;
        Ok(m)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.buffer
    }

    pub fn frames(&self) -> Vec<Vec<f64>> {
        self.buffer.iter().map(|s| s.vec.clone()).collect()
    }

    pub fn merge_counts(&self) -> Vec<u64> {
        self.buffer.iter().map(|s| s.count).collect()
    }

    /// Adjacent-pair similarities of the current buffer.
    pub fn similarities(&self) -> Vec<f64> {
        self.buffer
            .windows(2)
            .map(|w| self.similarity.eval(&w[0].vec, &w[1].vec))
            .collect()
    }

    /// Merges the most similar adjacent pair (smallest index on ties) until
    /// the buffer fits the capacity.
    pub fn consolidate(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Err(Error::InvalidState("cannot consolidate an empty long-term memory".into()));
        }
        while self.buffer.len() > self.capacity {
            let sims = self.similarities();
            let i = argmax(&sims);
            let right = self.buffer.remove(i + 1);
            let left = &mut self.buffer[i];
            let (wl, wr) = match self.merge {
                MergeRule::Mean => (0.5, 0.5),
                MergeRule::CountWeighted => {
                    let tot = (left.count + right.count) as f64;
                    (left.count as f64 / tot, right.count as f64 / tot)
                }
            };
            for (l, r) in left.vec.iter_mut().zip(&right.vec) {
                *l = match self.merge {
                    MergeRule::Mean => (*l + r) / 2.0,
                    MergeRule::CountWeighted => wl * *l + wr * r,
                };
            }
            left.sources = merge_sources(&left.sources, wl, &right.sources, wr);
            left.count += right.count;
        }
        Ok(())
    }

    /// Appends a frame and consolidates.
    pub fn admit(&mut self, slot: Slot) -> Result<()> {
        if !slot.vec.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite frame admitted to long-term memory".into()));
        }
        if let Some(first) = self.buffer.first() {
            if first.vec.len() != slot.vec.len() {
                return Err(Error::Shape(format!(
                    "frame dimension {} vs memory dimension {}",
                    slot.vec.len(),
                    first.vec.len()
                )));
            }
        }
        self.buffer.push(slot);
        self.consolidate()
    }
}

/// Where the long-term memory gets its frames from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    /// Every step, consolidate a copy of the current short-term window.
    Literal,
    /// Frames evicted from the short-term window are admitted for good.
    #[default]
    Accumulate,
}

/// Which memories feed the fused vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryVariant {
    Off,
    MsOnly,
    MlOnly,
    #[default]
    Me,
}

/// How the pooled memory vector is combined with the hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `[hidden | pooled]` along features.
    #[default]
    ConcatMaxpool,
    Add,
    Max,
}

impl Fusion {
    /// Decoder input width for a hidden width `d`.
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            Fusion::ConcatMaxpool => 2 * d,
            Fusion::Add | Fusion::Max => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub short_capacity: usize,
    pub long_capacity: usize,
    #[serde(default)]
    pub population: Population,
    #[serde(default)]
    pub merge: MergeRule,
    #[serde(default)]
    pub similarity: Similarity,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            short_capacity: 8,
            long_capacity: 8,
            population: Population::Accumulate,
            merge: MergeRule::Mean,
            similarity: Similarity::Dot,
        }
    }
}

/// The pair of memories owned by one sequence evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub short: ShortTermMemory,
    pub long: LongTermMemory,
    population: Population,
    frames_seen: usize,
}

/// Memory contents visible at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub short: Vec<Slot>,
    pub long: Vec<Slot>,
}

impl MemoryState {
    pub fn new(cfg: &MemoryConfig) -> Result<Self> {
        Ok(Self {
            short: ShortTermMemory::new(cfg.short_capacity)?,
            long: LongTermMemory::new(cfg.long_capacity, cfg.merge, cfg.similarity)?,
            population: cfg.population,
            frames_seen: 0,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Feeds the current frame and returns what memory holds at this step.
    pub fn step(&mut self, frame: &[f64]) -> Result<Snapshot> {
        let slot = Slot::raw(frame.to_vec(), self.frames_seen);
        let evicted = self.short.push(slot)?;
        self.frames_seen += 1;
        match self.population {
            Population::Accumulate => {
                if let Some(e) = evicted {
                    self.long.admit(e)?;
                }
            }
            Population::Literal => {
                let copy: Vec<Slot> = self.short.slots().cloned().collect();
                self.long = LongTermMemory::from_slots(self.long.capacity, copy, self.long.merge, self.long.similarity)?;
                self.long.consolidate()?;
            }
        }
        Ok(Snapshot {
            short: self.short.slots().cloned().collect(),
            long: self.long.slots().to_vec(),
        })
    }
}

/// Per-step memory snapshots for a `T x D` sequence of encoder features;
/// snapshot `t` depends on rows `0..=t` only.
pub fn memory_stream(features: &Mat, cfg: &MemoryConfig) -> Result<Vec<Snapshot>> {
    let mut state = MemoryState::new(cfg)?;
    (0..features.rows()).map(|t| state.step(features.row(t))).collect()
}

fn selected(snap: &Snapshot, variant: MemoryVariant) -> Vec<&Slot> {
    match variant {
        MemoryVariant::Off => Vec::new(),
        MemoryVariant::MsOnly => snap.short.iter().collect(),
        MemoryVariant::MlOnly => snap.long.iter().collect(),
        MemoryVariant::Me => snap.short.iter().chain(&snap.long).collect(),
    }
}

/// Column-wise max over the enhanced memory `[M_S | M_L]`; zeros when empty.
pub fn pool_memory(snap: &Snapshot, variant: MemoryVariant, dim: usize) -> Vec<f64> {
    let slots = selected(snap, variant);
    if slots.is_empty() {
        return vec![0.0; dim];
    }
    let mut out = vec![f64::NEG_INFINITY; dim];
    for s in slots {
        for (o, v) in out.iter_mut().zip(&s.vec) {
            *o = o.max(*v);
        }
    }
    out
}

/// Combines one hidden row with one pooled memory vector.
pub fn fuse_row(hidden: &[f64], pooled: &[f64], fusion: Fusion, variant: MemoryVariant) -> Vec<f64> {
    match (fusion, variant) {
        (Fusion::ConcatMaxpool, _) => hidden.iter().chain(pooled).copied().collect(),
        (_, MemoryVariant::Off) => hidden.to_vec(),
        (Fusion::Add, _) => hidden.iter().zip(pooled).map(|(h, m)| h + m).collect(),
        (Fusion::Max, _) => hidden.iter().zip(pooled).map(|(h, m)| h.max(*m)).collect(),
    }
}

/// Builds the decoder input from per-step snapshots and the hidden sequence.
pub fn me_fuse(snaps: &[Snapshot], hidden: &Mat, fusion: Fusion, variant: MemoryVariant) -> Result<Mat> {
    if snaps.len() != hidden.rows() {
        return Err(Error::Shape(format!(
            "{} memory snapshots for {} hidden rows",
            snaps.len(),
            hidden.rows()
        )));
    }
    let d = hidden.cols();
    let rows: Result<Vec<Vec<f64>>> = snaps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            if let Some(bad) = selected(s, variant).iter().find(|sl| sl.vec.len() != d) {
                return Err(Error::Shape(format!(
                    "memory width {} vs hidden width {d}",
                    bad.vec.len()
                )));
            }
            let pooled = pool_memory(s, variant, d);
            Ok(fuse_row(hidden.row(t), &pooled, fusion, variant))
        })
        .collect();
    Ok(Mat::from_rows(&rows?))
}

/// Differentiable version of [`me_fuse`]: memory slots are rebuilt on the
/// tape from the rows of `hidden` they were made of.
pub fn fuse_on_tape(
    tape: &mut Tape,
    hidden: Var,
    cfg: &MemoryConfig,
    fusion: Fusion,
    variant: MemoryVariant,
) -> Result<Var> {
    let hv = tape.value(hidden).clone();
    let (t_len, d) = hv.shape();
    let pooled = if variant == MemoryVariant::Off {
        tape.leaf(Mat::zeros(t_len, d))
    } else {
        // Memory is built from the finite prefix; every step from the first
        // non-finite row on pools that row instead, so the contamination
        // shows up downstream but never reaches earlier steps.
        let clean = (0..t_len).find(|&t| !hv.row_is_finite(t)).unwrap_or(t_len);
        let snaps = memory_stream(&hv.slice_rows(0, clean), cfg)?;
        let mut rows = Vec::new();
        let mut groups = Vec::with_capacity(t_len);
        for snap in &snaps {
            let start = rows.len();
            for s in selected(snap, variant) {
                rows.push(s.sources.clone());
            }
            groups.push((start..rows.len()).collect::<Vec<_>>());
        }
        for _ in clean..t_len {
            groups.push(vec![rows.len()]);
            rows.push(vec![(clean, 1.0)]);
        }
        let slots = tape.sparse_mix(hidden, Arc::new(rows));
        tape.group_max(slots, &groups)
    };
    Ok(match (fusion, variant) {
        (Fusion::ConcatMaxpool, _) => tape.concat_cols(&[hidden, pooled]),
        (_, MemoryVariant::Off) => hidden,
        (Fusion::Add, _) => tape.add(hidden, pooled),
        (Fusion::Max, _) => tape.maximum(hidden, pooled),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(v: &[f64], i: usize) -> Slot {
        Slot::raw(v.to_vec(), i)
    }

    #[test]
    fn first_push_fills_by_copying() {
        let mut ms = ShortTermMemory::new(3).unwrap();
        assert_eq!(ms.push(raw(&[1.0, 2.0], 0)).unwrap(), None);
        assert_eq!(ms.frames(), vec![vec![1.0, 2.0]; 3]);
    }

    #[test]
    fn fifo_eviction() {
        let mut ms = ShortTermMemory::new(3).unwrap();
        for (i, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            ms.push(raw(&[*v], i)).unwrap();
        }
        // buffer is now [a, b, c]
        assert_eq!(ms.frames(), vec![vec![1.0], vec![2.0], vec![3.0]]);
        let ev = ms.push(raw(&[4.0], 3)).unwrap().unwrap();
        assert_eq!(ev.vec, vec![1.0]);
        assert_eq!(ms.frames(), vec![vec![2.0], vec![3.0], vec![4.0]]);
    }

    #[test]
    fn unit_capacity() {
        let mut ms = ShortTermMemory::new(1).unwrap();
        ms.push(raw(&[1.0], 0)).unwrap();
        let ev = ms.push(raw(&[2.0], 1)).unwrap();
        assert_eq!(ev.unwrap().vec, vec![1.0]);
        assert_eq!(ms.frames(), vec![vec![2.0]]);
    }

    #[test]
    fn capacity_and_shape_errors() {
        assert!(matches!(ShortTermMemory::new(0), Err(Error::Config(_))));
        assert!(matches!(
            LongTermMemory::new(0, MergeRule::Mean, Similarity::Dot),
            Err(Error::Config(_))
        ));
        let mut ms = ShortTermMemory::new(2).unwrap();
        ms.push(raw(&[1.0, 2.0], 0)).unwrap();
        assert!(matches!(ms.push(raw(&[1.0], 1)), Err(Error::Shape(_))));
        let mut ml = LongTermMemory::new(2, MergeRule::Mean, Similarity::Dot).unwrap();
        assert!(matches!(ml.consolidate(), Err(Error::InvalidState(_))));
    }

    #[test]
    fn consolidation_tie_breaks_to_first_pair() {
        let slots = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
            .iter()
            .enumerate()
            .map(|(i, v)| raw(v, i))
            .collect();
        let mut ml = LongTermMemory::from_slots(3, slots, MergeRule::Mean, Similarity::Dot).unwrap();
        assert_eq!(ml.similarities(), vec![1.0, 0.0, 1.0]);
        ml.consolidate().unwrap();
        assert_eq!(ml.frames(), vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(ml.merge_counts(), vec![2, 1, 1]);
        assert_eq!(ml.slots()[0].sources, vec![(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn within_capacity_is_untouched() {
        let slots: Vec<Slot> = (0..3).map(|i| raw(&[i as f64], i)).collect();
        let mut ml = LongTermMemory::from_slots(3, slots.clone(), MergeRule::Mean, Similarity::Dot).unwrap();
        ml.consolidate().unwrap();
        assert_eq!(ml.slots(), &slots[..]);
    }

    #[test]
    fn identical_frames_collapse() {
        let f = [0.3, -1.2];
        let slots = (0..5).map(|i| raw(&f, i)).collect();
        let mut ml = LongTermMemory::from_slots(1, slots, MergeRule::Mean, Similarity::Dot).unwrap();
        ml.consolidate().unwrap();
        assert_eq!(ml.frames(), vec![f.to_vec()]);
        assert_eq!(ml.merge_counts(), vec![5]);
    }

    #[test]
    fn admit_merges_similar_neighbours() {
        let mut ml = LongTermMemory::new(2, MergeRule::Mean, Similarity::Dot).unwrap();
        ml.admit(raw(&[1.0, 0.0], 0)).unwrap();
        assert_eq!(ml.frames(), vec![vec![1.0, 0.0]]);
        ml.admit(raw(&[1.0, 0.1], 1)).unwrap();
        ml.admit(raw(&[-1.0, 0.0], 2)).unwrap();
        assert_eq!(ml.frames(), vec![vec![1.0, 0.05], vec![-1.0, 0.0]]);
        assert!(ml.admit(raw(&[f64::NAN, 0.0], 3)).is_err());
    }

    #[test]
    fn zero_memory_concat_and_add() {
        let snap = Snapshot {
            short: vec![raw(&[0.0, 0.0], 0)],
            long: vec![raw(&[0.0, 0.0], 0)],
        };
        let hidden = Mat::from_vec(1, 2, vec![0.5, -2.0]);
        let cat = me_fuse(std::slice::from_ref(&snap), &hidden, Fusion::ConcatMaxpool, MemoryVariant::Me).unwrap();
        assert_eq!(cat.row(0), &[0.5, -2.0, 0.0, 0.0]);
        let add = me_fuse(&[snap], &hidden, Fusion::Add, MemoryVariant::Me).unwrap();
        assert_eq!(add.row(0), hidden.row(0));
    }

    #[test]
    fn dominant_entry_wins_pool() {
        let snap = Snapshot {
            short: vec![raw(&[0.0, 1.0, -1.0], 0), raw(&[5.0, 6.0, 7.0], 1)],
            long: vec![raw(&[1.0, 2.0, 3.0], 0)],
        };
        assert_eq!(pool_memory(&snap, MemoryVariant::Me, 3), vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn fuse_width_mismatch_is_shape_error() {
        let snap = Snapshot {
            short: vec![raw(&[0.0, 1.0, -1.0], 0)],
            long: vec![],
        };
        let hidden = Mat::zeros(1, 2);
        assert!(matches!(
            me_fuse(&[snap], &hidden, Fusion::Add, MemoryVariant::Me),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn literal_population_mirrors_window() {
        let cfg = MemoryConfig {
            short_capacity: 4,
            long_capacity: 2,
            population: Population::Literal,
            ..MemoryConfig::default()
        };
        let feats = Mat::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9], [1.0, 1.0]]);
        let snaps = memory_stream(&feats, &cfg).unwrap();
        for s in &snaps {
            assert!(s.long.len() <= 2);
            let counts: u64 = s.long.iter().map(|x| x.count).sum();
            assert_eq!(counts, 4);
        }
    }

    #[test]
    fn tape_fusion_matches_direct_fusion() {
        let cfg = MemoryConfig {
            short_capacity: 3,
            long_capacity: 2,
            ..MemoryConfig::default()
        };
        let feats = Mat::from_rows(&[
            [1.0, 0.0, 0.5],
            [0.2, 0.1, -0.5],
            [0.0, 1.0, 0.3],
            [0.4, 0.9, 0.2],
            [1.0, -1.0, 0.0],
            [0.3, 0.3, 0.3],
            [-0.2, 0.8, 1.1],
        ]);
        let snaps = memory_stream(&feats, &cfg).unwrap();
        for fusion in [Fusion::ConcatMaxpool, Fusion::Add, Fusion::Max] {
            for variant in [MemoryVariant::Off, MemoryVariant::MsOnly, MemoryVariant::MlOnly, MemoryVariant::Me] {
                let direct = me_fuse(&snaps, &feats, fusion, variant).unwrap();
                let mut tape = Tape::new();
                let h = tape.leaf(feats.clone());
                let y = fuse_on_tape(&mut tape, h, &cfg, fusion, variant).unwrap();
                let got = tape.value(y);
                for (a, b) in got.data().iter().zip(direct.data()) {
                    assert!((a - b).abs() < 1e-12, "{fusion:?} {variant:?}");
                }
            }
        }
    }
}

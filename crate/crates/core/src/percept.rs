//! Online 4D perception: point 4D convolutions over point-cloud sequences, a
//! four-level U-Net backbone, temporal enhancement with memory, and a
//! per-frame action classifier.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Hood, MixRows, OffsetGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::memory::{fuse_on_tape, Fusion, MemoryConfig, MemoryVariant};
use crate::nn::{derive_rng, init_uniform, Adam, AdamConfig, GradBuffer, Linear, ParamId, ParamStore};
use crate::seq::{Mode, SeqBlock, StackConfig};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointFrame {
    /// `n x 3` coordinates.
    pub points: Mat,
    /// `n x 3` unit normals.
    pub normals: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudSequence {
    pub frames: Vec<PointFrame>,
    /// One action class per frame.
    pub labels: Option<Vec<usize>>,
}

impl PointCloudSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("point-cloud sequence has no frames".into()));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.points.rows() == 0 {
                return Err(Error::InvalidInput(format!("frame {t} is empty")));
            }
            if f.points.cols() != 3 || f.normals.shape() != f.points.shape() {
                return Err(Error::Shape(format!(
                    "frame {t}: points {:?}, normals {:?}",
                    f.points.shape(),
                    f.normals.shape()
                )));
            }
            if !f.points.is_finite() {
                return Err(Error::InvalidInput(format!("frame {t} has non-finite coordinates")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.frames.len() {
                return Err(Error::Shape(format!("{} labels for {} frames", l.len(), self.frames.len())));
            }
        }
        Ok(())
    }

    /// Input features per point, `[normal | 1]`, stacked frame by frame.
    pub fn input_features(&self) -> Mat {
        let rows: Vec<Vec<f64>> = self
            .frames
            .iter()
            .flat_map(|f| (0..f.normals.rows()).map(move |i| {
                let n = f.normals.row(i);
                vec![n[0], n[1], n[2], 1.0]
            }))
            .collect();
        Mat::from_rows(&rows)
    }
}

/// Point coordinates of one resolution level, frame by frame. Feature rows
/// for the level are stacked in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGeom {
    pub frames: Vec<Mat>,
    offsets: Vec<usize>,
}

impl LevelGeom {
    pub fn new(frames: Vec<Mat>) -> Self {
        let mut offsets = Vec::with_capacity(frames.len() + 1);
        let mut acc = 0;
        for f in &frames {
            offsets.push(acc);
            acc += f.rows();
        }
        offsets.push(acc);
        Self { frames, offsets }
    }

    pub fn from_sequence(seq: &PointCloudSequence) -> Self {
        Self::new(seq.frames.iter().map(|f| f.points.clone()).collect())
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn frame_rows(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-point subsampling of `m` points. Starts from the
/// lexicographically smallest point and breaks distance ties by coordinates,
/// so the chosen set does not depend on point order.
pub fn farthest_point_sample(points: &Mat, m: usize) -> Vec<usize> {
    let n = points.rows();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let start = (0..n)
        .min_by(|&i, &j| lex_cmp(points.row(i), points.row(j)))
        .expect("non-empty");
    let mut chosen = vec![start];
    let mut mind: Vec<f64> = (0..n).map(|i| dist2(points.row(i), points.row(start))).collect();
    while chosen.len() < m {
        let next = (0..n)
            .max_by(|&i, &j| {
                mind[i]
                    .total_cmp(&mind[j])
                    .then_with(|| lex_cmp(points.row(j), points.row(i)))
            })
            .expect("non-empty");
        chosen.push(next);
        for (i, m) in mind.iter_mut().enumerate() {
            *m = m.min(dist2(points.row(i), points.row(next)));
        }
    }
    chosen
}

/// Temporal offsets visited by a window of radius `r_t`.
pub fn temporal_offsets(r_t: usize, window: Mode) -> Vec<isize> {
    let r = r_t as isize;
    match window {
        Mode::Online => (-r..=0).collect(),
        Mode::Offline => (-r..=r).collect(),
    }
}

/// Spatio-temporal neighbourhoods of every anchor among `src` points.
pub fn build_hoods(src: &LevelGeom, anchors: &LevelGeom, r_s: f64, r_t: usize, window: Mode) -> Vec<Hood> {
    let t_len = src.frames.len();
    let offs = temporal_offsets(r_t, window);
    let r2 = r_s * r_s;
    let mut hoods = Vec::with_capacity(anchors.total());
    for (t, af) in anchors.frames.iter().enumerate() {
        for a in 0..af.rows() {
            let p = af.row(a);
            let mut hood: Hood = Vec::with_capacity(offs.len());
            for &dt in &offs {
                let tt = t as isize + dt;
                let mut group = OffsetGroup::default();
                if tt >= 0 && (tt as usize) < t_len {
                    let tt = tt as usize;
                    let sf = &src.frames[tt];
                    let base = src.frame_rows(tt).start;
                    for j in 0..sf.rows() {
                        let q = sf.row(j);
                        if dist2(p, q) <= r2 {
                            group.members.push((base + j, [q[0] - p[0], q[1] - p[1], q[2] - p[2], dt as f64]));
                        }
                    }
                }
                hood.push(group);
            }
            hoods.push(hood);
        }
    }
    hoods
}

/// Inverse-distance weights from each `dst` point to its `k` nearest `src`
/// points of the same frame.
pub fn interpolation_rows(src: &LevelGeom, dst: &LevelGeom, k: usize) -> MixRows {
    let mut rows = Vec::with_capacity(dst.total());
    for (t, df) in dst.frames.iter().enumerate() {
        let sf = &src.frames[t];
        let base = src.frame_rows(t).start;
        for i in 0..df.rows() {
            let p = df.row(i);
            let mut cand: Vec<(f64, usize)> = (0..sf.rows()).map(|j| (dist2(p, sf.row(j)), j)).collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lex_cmp(sf.row(a.1), sf.row(b.1))));
            cand.truncate(k.max(1));
            let ws: Vec<f64> = cand.iter().map(|(d2, _)| 1.0 / (d2.sqrt() + 1e-8)).collect();
            let z: f64 = ws.iter().sum();
            rows.push(cand.iter().zip(&ws).map(|((_, j), w)| (base + j, w / z)).collect());
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv4dConfig {
    pub out_channels: usize,
    /// Spatial radius in coordinate units.
    pub r_s: f64,
    /// Temporal radius in frames.
    pub r_t: usize,
    /// Anchors kept per frame are `ceil(n / subsample)`.
    pub subsample: usize,
}

impl Conv4dConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_s > 0.0 && self.r_s.is_finite()) {
            return Err(Error::Config(format!("spatial radius must be > 0, got {}", self.r_s)));
        }
        if self.subsample == 0 || self.out_channels == 0 {
            return Err(Error::Config("subsample and out_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// One point 4D convolution:
/// `f'(p, t) = sum_dt max_{|d| <= r_s} (W_d (d, dt) + W_f f(p + d, t + dt))`.
#[derive(Clone, Debug)]
pub struct Conv4d {
    pub cfg: Conv4dConfig,
    pub wd: ParamId,
    pub wf: ParamId,
}

impl Conv4d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, cfg: Conv4dConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.out_channels;
        let wd = store.add(format!("{name}.w_d"), init_uniform(rng, c, 4, 4, 1.0));
        let wf = store.add(format!("{name}.w_f"), init_uniform(rng, c_in, c, c_in, 1.0));
        Ok(Self { cfg, wd, wf })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feats: Var, hoods: Arc<Vec<Hood>>) -> Var {
        let wf = tape.param(store, self.wf);
        let g = tape.matmul(feats, wf);
        let wd = tape.param(store, self.wd);
        tape.p4d_aggregate(g, wd, hoods)
    }
}

/// Evaluates one point 4D convolution on plain matrices.
pub fn point4d_conv(
    conv: &Conv4d,
    store: &ParamStore,
    feats: &Mat,
    src: &LevelGeom,
    anchors: &LevelGeom,
    window: Mode,
) -> Result<Mat> {
    if feats.rows() != src.total() {
        return Err(Error::Shape(format!("{} feature rows for {} points", feats.rows(), src.total())));
    }
    if src.frames.iter().any(|f| f.rows() == 0) {
        return Err(Error::InvalidInput("empty frame in point-cloud level".into()));
    }
    let hoods = Arc::new(build_hoods(src, anchors, conv.cfg.r_s, conv.cfg.r_t, window));
    let mut tape = Tape::new();
    let f = tape.leaf(feats.clone());
    let y = conv.forward(&mut tape, store, f, hoods);
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Encoder levels, coarsest last.
    pub levels: Vec<Conv4dConfig>,
    /// Width of the per-point output features.
    pub out_channels: usize,
    /// Neighbours used by the interpolating decoder.
    pub interp_k: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        let lvl = |c, r_s, r_t| Conv4dConfig {
            out_channels: c,
            r_s,
            r_t,
            subsample: 2,
        };
        Self {
            levels: vec![lvl(16, 0.5, 1), lvl(32, 0.8, 1), lvl(32, 1.2, 1), lvl(48, 2.0, 1)],
            out_channels: 32,
            interp_k: 3,
        }
    }
}

/// Geometry-derived structures of one clip, reused across training epochs.
#[derive(Clone, Debug)]
pub struct ClipPlan {
    pub geoms: Vec<LevelGeom>,
    pub hoods: Vec<Arc<Vec<Hood>>>,
    /// `interp[l]` maps level `l + 1` features onto level `l` points.
    pub interp: Vec<Arc<MixRows>>,
    pub frame_groups: Vec<Vec<usize>>,
    pub input: Mat,
    pub points_per_frame: Option<usize>,
}

impl ClipPlan {
    pub fn new(seq: &PointCloudSequence, cfg: &BackboneConfig, window: Mode) -> Result<Self> {
        seq.validate()?;
        let mut geoms = vec![LevelGeom::from_sequence(seq)];
        let mut hoods = Vec::with_capacity(cfg.levels.len());
        for lvl in &cfg.levels {
            lvl.validate()?;
            let prev = geoms.last().expect("level 0");
            let anchors = LevelGeom::new(
                prev.frames
                    .iter()
                    .map(|f| f.select_rows(&farthest_point_sample(f, f.rows().div_ceil(lvl.subsample))))
                    .collect(),
            );
            hoods.push(Arc::new(build_hoods(prev, &anchors, lvl.r_s, lvl.r_t, window)));
            geoms.push(anchors);
        }
        let interp = (0..cfg.levels.len())
            .map(|l| Arc::new(interpolation_rows(&geoms[l + 1], &geoms[l], cfg.interp_k)))
            .collect();
        let frame_groups = (0..seq.len()).map(|t| geoms[0].frame_rows(t).collect()).collect();
        let n0 = seq.frames[0].points.rows();
        let uniform = seq.frames.iter().all(|f| f.points.rows() == n0);
        Ok(Self {
            geoms,
            hoods,
            interp,
            frame_groups,
            input: seq.input_features(),
            points_per_frame: uniform.then_some(n0),
        })
    }

    pub fn frames(&self) -> usize {
        self.frame_groups.len()
    }
}

/// Four-level point 4D U-Net.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    convs: Vec<Conv4d>,
    biases: Vec<ParamId>,
    ups: Vec<Linear>,
}

impl Backbone {
    pub const IN_CHANNELS: usize = 4;

    pub fn new(store: &mut ParamStore, name: &str, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.levels.is_empty() {
            return Err(Error::Config("backbone needs at least one level".into()));
        }
        let mut convs = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = Self::IN_CHANNELS;
        let mut widths = vec![c_in];
        for (l, lvl) in cfg.levels.iter().enumerate() {
            convs.push(Conv4d::new(store, &format!("{name}.enc.{l}"), c_in, lvl.clone(), rng)?);
            biases.push(store.add(format!("{name}.enc.{l}.b"), Mat::zeros(1, lvl.out_channels)));
            c_in = lvl.out_channels;
            widths.push(c_in);
        }
        // decoder: level l+1 -> l, output width widths[l] except the last
        let mut ups = Vec::new();
        let mut cur = c_in;
        for l in (0..cfg.levels.len()).rev() {
            let out = if l == 0 { cfg.out_channels } else { widths[l] };
            ups.push(Linear::new(store, &format!("{name}.dec.{l}"), cur + widths[l], out, true, rng));
            cur = out;
        }
        Ok(Self { cfg, convs, biases, ups })
    }

    /// Per-point output features, stacked frame by frame like the input.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, plan: &ClipPlan) -> Var {
        let x0 = tape.leaf(plan.input.clone());
        let mut enc = vec![x0];
        for (l, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(tape, store, *enc.last().expect("input"), plan.hoods[l].clone());
            let b = tape.param(store, self.biases[l]);
            let y = tape.add(y, b);
            enc.push(tape.relu(y));
        }
        let mut cur = *enc.last().expect("encoder output");
        for (i, l) in (0..self.convs.len()).rev().enumerate() {
            let up = tape.sparse_mix(cur, plan.interp[l].clone());
            let cat = tape.concat_cols(&[up, enc[l]]);
            let y = self.ups[i].forward(tape, store, cat);
            cur = tape.relu(y);
        }
        cur
    }
}

/// Runs the backbone on one clip.
pub fn backbone_forward(backbone: &Backbone, store: &ParamStore, seq: &PointCloudSequence, window: Mode) -> Result<Mat> {
    let plan = ClipPlan::new(seq, &backbone.cfg, window)?;
    let mut tape = Tape::new();
    let y = backbone.forward(&mut tape, store, &plan);
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptConfig {
    pub backbone: BackboneConfig,
    pub stack: StackConfig,
    pub num_classes: usize,
    /// Temporal window of the 4D convolutions.
    pub conv_window: Mode,
    /// Masking of the temporal layer (only the attention baseline can look ahead).
    pub temporal_mode: Mode,
    pub memory: MemoryConfig,
    pub memory_variant: MemoryVariant,
    pub fusion: Fusion,
    /// Run the temporal encoder along per-point tracks instead of on
    /// per-frame pooled features (needs a fixed point count per frame).
    #[serde(default)]
    pub per_point: bool,
}

impl PerceptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two action classes".into()));
        }
        if self.stack.heads == 0 || !self.stack.model_dim.is_multiple_of(self.stack.heads) {
            return Err(Error::Config("heads must divide model_dim".into()));
        }
        self.stack.mamba_cfg().validate()
    }
}

/// Per-frame class scores and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPrediction {
    /// `T x K`.
    pub logits: Mat,
    pub labels: Vec<usize>,
}

/// Temporal enhancement stage: projection, encoder block, memory fusion and
/// decoder block over the time axis.
#[derive(Clone, Debug)]
pub struct TemporalEnhancer {
    pub in_proj: Linear,
    pub encoder: SeqBlock,
    pub mem_proj: Option<Linear>,
    pub decoder: SeqBlock,
}

impl TemporalEnhancer {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, stack: &StackConfig, fusion: Fusion, rng: &mut impl Rng) -> Result<Self> {
        let d = stack.model_dim;
        Ok(Self {
            in_proj: Linear::new(store, &format!("{name}.in"), c_in, d, true, rng),
            encoder: stack.build(store, &format!("{name}.enc"), rng)?,
            mem_proj: (fusion == Fusion::ConcatMaxpool)
                .then(|| Linear::passthrough(store, &format!("{name}.mem"), 2 * d, d, rng)),
            decoder: stack.build(store, &format!("{name}.dec"), rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PerceptModel {
    pub cfg: PerceptConfig,
    pub backbone: Backbone,
    pub temporal: TemporalEnhancer,
    pub head: Linear,
}

impl PerceptModel {
    pub fn new(store: &mut ParamStore, cfg: PerceptConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, "bb", cfg.backbone.clone(), rng)?;
        let temporal = TemporalEnhancer::new(store, "tmp", cfg.backbone.out_channels, &cfg.stack, cfg.fusion, rng)?;
        let head = Linear::new(store, "head", cfg.stack.model_dim, cfg.num_classes, true, rng);
        Ok(Self {
            cfg,
            backbone,
            temporal,
            head,
        })
    }

    pub fn plan(&self, seq: &PointCloudSequence) -> Result<ClipPlan> {
        ClipPlan::new(seq, &self.cfg.backbone, self.cfg.conv_window)
    }

    /// `T x C` frame features: max over each frame's points.
    pub fn frame_features(&self, tape: &mut Tape, store: &ParamStore, plan: &ClipPlan) -> Var {
        let pts = self.backbone.forward(tape, store, plan);
        tape.group_max(pts, &plan.frame_groups)
    }

    /// Temporal enhancement of pooled frame features.
    pub fn temporal_enhance(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let h = self.temporal.in_proj.forward(tape, store, frames);
        let h = self.cfg.stack.add_positions(tape, h);
        let h = self.temporal.encoder.forward(tape, store, h, self.cfg.temporal_mode);
        self.finish_temporal(tape, store, h)
    }

    fn finish_temporal(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let fused = fuse_on_tape(tape, h, &self.cfg.memory, self.cfg.fusion, self.cfg.memory_variant)?;
        let h = match &self.temporal.mem_proj {
            Some(p) => p.forward(tape, store, fused),
            None => fused,
        };
        Ok(self.temporal.decoder.forward(tape, store, h, self.cfg.temporal_mode))
    }

    /// Per-point variant: the temporal encoder runs along every point track
    /// before frames are pooled.
    fn temporal_per_point(&self, tape: &mut Tape, store: &ParamStore, plan: &ClipPlan) -> Result<Var> {
        let n = plan
            .points_per_frame
            .ok_or_else(|| Error::Config("per-point temporal mode needs a fixed point count".into()))?;
        let t_len = plan.frames();
        let pts = self.backbone.forward(tape, store, plan);
        let mut outs = Vec::with_capacity(n);
        for j in 0..n {
            let rows = Arc::new((0..t_len).map(|t| vec![(t * n + j, 1.0)]).collect::<Vec<_>>());
            let track = tape.sparse_mix(pts, rows);
            let h = self.temporal.in_proj.forward(tape, store, track);
            let h = self.cfg.stack.add_positions(tape, h);
            outs.push(self.temporal.encoder.forward(tape, store, h, self.cfg.temporal_mode));
        }
        let all = tape.concat_rows(&outs);
        let groups: Vec<Vec<usize>> = (0..t_len).map(|t| (0..n).map(|j| j * t_len + t).collect()).collect();
        let pooled = tape.group_max(all, &groups);
        self.finish_temporal(tape, store, pooled)
    }

    /// `T x K` logits.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, plan: &ClipPlan) -> Result<Var> {
        let h = if self.cfg.per_point {
            self.temporal_per_point(tape, store, plan)?
        } else {
            let f = self.frame_features(tape, store, plan);
            self.temporal_enhance(tape, store, f)?
        };
        Ok(self.head.forward(tape, store, h))
    }

    pub fn predict_plan(&self, store: &ParamStore, plan: &ClipPlan) -> Result<SegmentPrediction> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, store, plan)?;
        Ok(segment_predict(tape.value(l)))
    }

    pub fn predict(&self, store: &ParamStore, seq: &PointCloudSequence) -> Result<SegmentPrediction> {
        self.predict_plan(store, &self.plan(seq)?)
    }
}

/// Argmax labels of per-frame logits (ties resolve to the lower class id).
pub fn segment_predict(logits: &Mat) -> SegmentPrediction {
    SegmentPrediction {
        labels: (0..logits.rows()).map(|t| logits.argmax_row(t)).collect(),
        logits: logits.clone(),
    }
}

/// Runs the temporal stage on plain `T x C` frame features.
pub fn temporal_enhance(model: &PerceptModel, store: &ParamStore, features: &Mat) -> Result<Mat> {
    if features.cols() != model.cfg.backbone.out_channels {
        return Err(Error::Shape(format!(
            "feature width {} vs {}",
            features.cols(),
            model.cfg.backbone.out_channels
        )));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let y = model.temporal_enhance(&mut tape, store, f)?;
    Ok(tape.value(y).clone())
}

const STREAM_INIT: u64 = 1;

/// A clip prepared for training.
#[derive(Clone, Debug)]
pub struct PlannedClip {
    pub plan: ClipPlan,
    pub labels: Arc<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PerceptTrainer {
    pub model: PerceptModel,
    pub store: ParamStore,
    pub opt: Adam,
    pub history: Vec<f64>,
}

impl PerceptTrainer {
    pub fn new(cfg: PerceptConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = PerceptModel::new(&mut store, cfg, &mut derive_rng(seed, &[STREAM_INIT]))?;
        let opt = Adam::new(adam, &store);
        Ok(Self {
            model,
            store,
            opt,
            history: Vec::new(),
        })
    }

    pub fn prepare(&self, seq: &PointCloudSequence) -> Result<PlannedClip> {
        let labels = seq
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidInput("training clip has no labels".into()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.model.cfg.num_classes) {
            return Err(Error::Config(format!(
                "label {bad} outside {} classes",
                self.model.cfg.num_classes
            )));
        }
        Ok(PlannedClip {
            plan: self.model.plan(seq)?,
            labels: Arc::new(labels),
        })
    }

    /// One optimiser step on the mean per-frame cross-entropy of `batch`.
    pub fn train_step(&mut self, batch: &[&PlannedClip]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let mut grads = GradBuffer::new(&self.store);
        let w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for clip in batch {
            let mut tape = Tape::new();
            let logits = self.model.logits(&mut tape, &self.store, &clip.plan)?;
            let loss = tape.cross_entropy(logits, clip.labels.clone());
            let lv = tape.value(loss).get(0, 0);
            total += w * lv;
            if lv.is_finite() {
                let g = tape.backward(loss);
                grads.accumulate(&tape, &g, w);
            }
        }
        if !total.is_finite() || !grads.all_finite() {
            let tail: Vec<f64> = self.history.iter().rev().take(5).rev().copied().collect();
            return Err(Error::Numerical(format!(
                "non-finite loss at step {} (loss {total}); recent losses {tail:?}",
                self.opt.step
            )));
        }
        self.opt.update(&mut self.store, &grads);
        self.history.push(total);
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;

    fn frame(points: &[[f64; 3]]) -> PointFrame {
        let p = Mat::from_rows(points);
        let n = Mat::from_rows(&vec![[0.0, 0.0, 1.0]; points.len()]);
        PointFrame { points: p, normals: n }
    }

    #[test]
    fn single_point_self_neighbour() {
        let mut store = ParamStore::new();
        let conv = Conv4d::new(
            &mut store,
            "c",
            2,
            Conv4dConfig {
                out_channels: 3,
                r_s: 0.5,
                r_t: 0,
                subsample: 1,
            },
            &mut rng_for(0, 0),
        )
        .unwrap();
        let g = LevelGeom::new(vec![Mat::from_rows(&[[0.1, 0.2, 0.3]])]);
        let f = Mat::from_rows(&[[0.7, -1.1]]);
        let y = point4d_conv(&conv, &store, &f, &g, &g, Mode::Online).unwrap();
        let want = f.matmul(store.value(conv.wf));
        assert_eq!(y, want);
    }

    #[test]
    fn empty_offsets_contribute_zero() {
        let src = LevelGeom::new(vec![Mat::from_rows(&[[0.0, 0.0, 0.0]])]);
        let far = LevelGeom::new(vec![Mat::from_rows(&[[5.0, 0.0, 0.0]])]);
        let hoods = build_hoods(&src, &far, 1.0, 2, Mode::Offline);
        assert_eq!(hoods[0].len(), 5);
        assert!(hoods[0].iter().all(|g| g.members.is_empty()));
        let mut tape = Tape::new();
        let g = tape.leaf(Mat::from_rows(&[[1.0, 2.0]]));
        let wd = tape.leaf(Mat::filled(2, 4, 1.0));
        let y = tape.p4d_aggregate(g, wd, Arc::new(hoods));
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);
    }

    #[test]
    fn fps_is_order_free() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.5], [1.0, 1.0, 1.0]];
        let a = Mat::from_rows(&pts);
        let perm = [3, 0, 4, 2, 1];
        let b = Mat::from_rows(&perm.iter().map(|&i| pts[i]).collect::<Vec<_>>());
        let sa: Vec<Vec<f64>> = farthest_point_sample(&a, 3).iter().map(|&i| a.row(i).to_vec()).collect();
        let sb: Vec<Vec<f64>> = farthest_point_sample(&b, 3).iter().map(|&i| b.row(i).to_vec()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn online_window_is_past_only() {
        assert_eq!(temporal_offsets(2, Mode::Online), vec![-2, -1, 0]);
        assert_eq!(temporal_offsets(1, Mode::Offline), vec![-1, 0, 1]);
        assert_eq!(temporal_offsets(0, Mode::Online), vec![0]);
    }

    #[test]
    fn validation_errors() {
        let bad = PointCloudSequence {
            frames: vec![PointFrame {
                points: Mat::zeros(0, 3),
                normals: Mat::zeros(0, 3),
            }],
            labels: None,
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidInput(_))));
        let mismatch = PointCloudSequence {
            frames: vec![PointFrame {
                points: Mat::zeros(2, 3),
                normals: Mat::zeros(3, 3),
            }],
            labels: None,
        };
        assert!(matches!(mismatch.validate(), Err(Error::Shape(_))));
        let ok = PointCloudSequence {
            frames: vec![frame(&[[0.0, 0.0, 0.0]])],
            labels: Some(vec![0, 1]),
        };
        assert!(matches!(ok.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_labels() {
        let l = Mat::from_rows(&[[0.1, 0.9, 0.0], [2.0, -1.0, 1.0]]);
        assert_eq!(segment_predict(&l).labels, vec![1, 0]);
    }
}

//! Deterministic synthetic datasets.
//!
//! Two generators stand in for real captures:
//!
//! * two-agent motion: an actor follows a class-specific family of
//!   sinusoids and a reactor responds to the actor's past, the object pose,
//!   and (optionally) a cue far in the past;
//! * labelled point-cloud clips: a rigid cube or sphere moved by a sequence
//!   of class-specific motion patterns.
//!
//! Every example is drawn from an RNG keyed by `(seed, dataset, split,
//! index)`, so splits are disjoint by construction and any example can be
//! regenerated on its own.
//!
//! # File layouts
//!
//! Motion files are plain text, one frame per line:
//! `frame_index v_0 v_1 ... v_{D-1}`. Lines starting with `#` are comments.
//!
//! Clip files are plain text. Each frame starts with a header line
//! `frame <t> <n_pts> <label>` followed by `n_pts` lines of
//! `x y z nx ny nz`. A label of `-` means unlabelled.
//!
//! Converting a real capture means mapping its fields onto these: for
//! two-person motion, one agent's joint positions flattened per frame become
//! the actor file and the other's the reactor file, and the object's
//! translation plus axis-angle rotation becomes a 6-column pose file; for
//! hand-object point-cloud video, depth points with estimated normals and
//! the per-frame action id become one clip file.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{GenCondition, GenExample};
use crate::error::{Error, Result};
use crate::nn::derive_rng;
use crate::percept::{PointCloudSequence, PointFrame};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    #[default]
    Cube,
    Sphere,
}

const DATA_MOTION: u64 = 0x4D4F;
const DATA_PCD: u64 = 0x5043;
const DATA_COUPLING: u64 = 0xC0;
pub const OBJECT_POSE_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGenSpec {
    pub seed: u64,
    pub t_seq: usize,
    /// Reactor pose width; the actor has one extra cue channel.
    pub pose_dim: usize,
    pub n_classes: usize,
    /// Reactor frame `t` responds to actor frame `t - lag`.
    pub lag: usize,
    pub noise: f64,
    pub shape: Shape,
    pub geometry_points: usize,
    /// Fraction of sequences carrying an early cue that shifts the reactor
    /// for the rest of the sequence.
    pub long_range_rate: f64,
    /// Cues appear within the first `cue_window` frames.
    pub cue_window: usize,
    pub cue_strength: f64,
}

impl Default for SynthGenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            t_seq: 48,
            pose_dim: 6,
            n_classes: 4,
            lag: 2,
            noise: 0.02,
            shape: Shape::Cube,
            geometry_points: 16,
            long_range_rate: 0.0,
            cue_window: 4,
            cue_strength: 0.8,
        }
    }
}

impl SynthGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lag < 1 {
            return Err(Error::Config("lag must be >= 1 so the reactor depends on the past".into()));
        }
        if self.t_seq == 0 || self.pose_dim == 0 || self.n_classes == 0 || self.geometry_points == 0 {
            return Err(Error::Config("t_seq, pose_dim, n_classes and geometry_points must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.long_range_rate) || self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config("long_range_rate must be in [0, 1] and noise >= 0".into()));
        }
        if self.cue_window == 0 || self.cue_window > self.t_seq {
            return Err(Error::Config("cue_window must be in 1..=t_seq".into()));
        }
        Ok(())
    }

    pub fn actor_dim(&self) -> usize {
        self.pose_dim + 1
    }
}

/// Fixed coupling weights shared by every sequence of a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    /// `pose_dim x pose_dim`, applied to `tanh(actor)`.
    pub w: Mat,
    /// `OBJECT_POSE_DIM x pose_dim`.
    pub u: Mat,
    /// Shift added while the cue latch is set.
    pub v: Vec<f64>,
}

impl Coupling {
    pub fn for_spec(spec: &SynthGenSpec) -> Self {
        let d = spec.pose_dim;
        let mut rng = derive_rng(spec.seed, &[DATA_MOTION, DATA_COUPLING]);
        let s = 1.2 / (d as f64).sqrt();
        let w = Mat::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-s..=s)).collect());
        let u = Mat::from_vec(
            OBJECT_POSE_DIM,
            d,
            (0..OBJECT_POSE_DIM * d).map(|_| rng.random_range(-0.3..=0.3)).collect(),
        );
        let v = (0..d)
            .map(|j| spec.cue_strength * if j % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Self { w, u, v }
    }
}

/// One generated interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPair {
    /// `T x (pose_dim + 1)`; the last channel carries the cue.
    pub actor: Mat,
    /// `T x pose_dim`.
    pub reactor: Mat,
    /// `T x 6`: translation and axis-angle rotation.
    pub object_pose: Mat,
    /// Object surface samples, `n x 3`.
    pub object_geometry: Mat,
    pub label: usize,
    /// Frame and sign of the long-range cue, if any.
    pub cue: Option<(usize, f64)>,
}

impl MotionPair {
    pub fn condition(&self) -> GenCondition {
        GenCondition {
            actor: self.actor.clone(),
            object_pose: self.object_pose.clone(),
            object_geometry: self.object_geometry.clone(),
        }
    }

    pub fn example(&self) -> GenExample {
        GenExample {
            x0: self.reactor.clone(),
            cond: self.condition(),
        }
    }
}

/// Class-specific frequency and phase of actor channel `j`.
fn actor_family(class: usize, j: usize, n_classes: usize, d: usize) -> (f64, f64) {
    let omega = 0.18 + 0.11 * class as f64 + 0.04 * j as f64 / d as f64;
    let phase = std::f64::consts::TAU * ((class * (j + 1)) as f64 / (n_classes as f64 + 1.0));
    (omega, phase)
}

/// The noise-free reactor implied by an actor track and object pose.
pub fn reactor_oracle(spec: &SynthGenSpec, coupling: &Coupling, actor: &Mat, object_pose: &Mat) -> Mat {
    let (t_len, d) = (actor.rows(), spec.pose_dim);
    let mut out = Mat::zeros(t_len, d);
    let mut latch = 0.0;
    for t in 0..t_len {
        if t > 0 {
            let c = actor.get(t - 1, d);
            if c != 0.0 {
                latch = c.signum();
            }
        }
        let row = out.row_mut(t);
        if t >= spec.lag {
            let src: Vec<f64> = actor.row(t - spec.lag)[..d].iter().map(|v| v.tanh()).collect();
            for (k, r) in row.iter_mut().enumerate() {
                *r = (0..d).map(|i| src[i] * coupling.w.get(i, k)).sum();
            }
        }
        for (k, r) in row.iter_mut().enumerate() {
            *r += (0..OBJECT_POSE_DIM).map(|i| object_pose.get(t, i) * coupling.u.get(i, k)).sum::<f64>();
            *r += latch * coupling.v[k];
        }
    }
    out
}

pub fn surface_samples(shape: Shape, n: usize) -> (Mat, Mat) {
    let mut pts = Vec::with_capacity(n);
    let mut nrm = Vec::with_capacity(n);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        // Fibonacci sphere directions, projected onto the cube when needed.
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        let dir = [r * th.cos(), y, r * th.sin()];
        match shape {
            Shape::Sphere => {
                pts.push(dir.map(|v| 0.5 * v));
                nrm.push(dir);
            }
            Shape::Cube => {
                let axis = (0..3)
                    .max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs()))
                    .expect("three axes");
                let s = 0.5 / dir[axis].abs();
                pts.push(dir.map(|v| v * s));
                let mut n3 = [0.0; 3];
                n3[axis] = dir[axis].signum();
                nrm.push(n3);
            }
        }
    }
    (Mat::from_rows(&pts), Mat::from_rows(&nrm))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn motion_pair(spec: &SynthGenSpec, coupling: &Coupling, rng: &mut ChaCha8Rng) -> MotionPair {
    let (t_len, d) = (spec.t_seq, spec.pose_dim);
    let label = rng.random_range(0..spec.n_classes);
    let amp: Vec<f64> = (0..d).map(|_| rng.random_range(0.8..1.2)).collect();
    let jitter: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
    let mut actor = Mat::zeros(t_len, d + 1);
    for t in 0..t_len {
        for j in 0..d {
            let (w, p) = actor_family(label, j, spec.n_classes, d);
            actor.set(t, j, amp[j] * (w * t as f64 + p + jitter[j]).sin());
        }
    }
    let cue = (rng.random::<f64>() < spec.long_range_rate).then(|| {
        let at = rng.random_range(0..spec.cue_window);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        (at, sign)
    });
    if let Some((at, sign)) = cue {
        actor.set(at, d, sign);
    }
    let mut object_pose = Mat::zeros(t_len, OBJECT_POSE_DIM);
    let base: Vec<f64> = (0..OBJECT_POSE_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
    let drift: Vec<f64> = (0..OBJECT_POSE_DIM).map(|_| rng.random_range(-0.4..0.4)).collect();
    for t in 0..t_len {
        let s = t as f64 / t_len as f64;
        for i in 0..OBJECT_POSE_DIM {
            object_pose.set(t, i, base[i] + drift[i] * s);
        }
    }
    let mut reactor = reactor_oracle(spec, coupling, &actor, &object_pose);
    if spec.noise > 0.0 {
        for v in reactor.data_mut() {
            *v += spec.noise * normal(rng);
        }
    }
    MotionPair {
        actor,
        reactor,
        object_pose,
        object_geometry: surface_samples(spec.shape, spec.geometry_points).0,
        label,
        cue,
    }
}

/// `count` interactions of one split.
pub fn gen_motion_pairs(spec: &SynthGenSpec, split: Split, count: usize) -> Result<Vec<MotionPair>> {
    spec.validate()?;
    let coupling = Coupling::for_spec(spec);
    Ok((0..count)
        .map(|i| motion_pair(spec, &coupling, &mut derive_rng(spec.seed, &[DATA_MOTION, split.key(), i as u64])))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextCue {
    /// Frames at the start of the clip during which the cue is visible.
    pub frames: usize,
    /// Scale of the object while the cue is shown.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPcdSpec {
    pub seed: u64,
    pub t_seq: usize,
    pub n_pts: usize,
    /// Motion patterns used, at most [`PATTERN_COUNT`].
    pub n_classes: usize,
    pub seg_min: usize,
    pub seg_max: usize,
    pub shape: Shape,
    pub point_noise: f64,
    /// When set, half the clips start with a visible cue and every label in
    /// such a clip is shifted by `n_classes`.
    pub context: Option<ContextCue>,
}

impl Default for SynthPcdSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            t_seq: 150,
            n_pts: 32,
            n_classes: 19,
            seg_min: 8,
            seg_max: 30,
            shape: Shape::Cube,
            point_noise: 0.0,
            context: None,
        }
    }
}

/// Translations along 6 directions at 2 speeds, rotations about 3 axes in
/// 2 directions, and holding still.
pub const PATTERN_COUNT: usize = 19;

impl SynthPcdSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > PATTERN_COUNT {
            return Err(Error::Config(format!("n_classes must be in 1..={PATTERN_COUNT}")));
        }
        if self.seg_min < 2 || self.seg_max < self.seg_min {
            return Err(Error::Config("segment lengths need 2 <= seg_min <= seg_max".into()));
        }
        if self.n_classes < 2 && self.t_seq > self.seg_max {
            return Err(Error::Config("one class cannot fill a clip longer than seg_max".into()));
        }
        if self.t_seq < 2 || self.n_pts == 0 || self.point_noise < 0.0 {
            return Err(Error::Config("t_seq >= 2, n_pts >= 1 and point_noise >= 0 required".into()));
        }
        if let Some(c) = &self.context {
            if c.frames == 0 || c.frames >= self.t_seq || !c.scale.is_finite() || c.scale <= 0.0 {
                return Err(Error::Config("context cue needs 1 <= frames < t_seq and scale > 0".into()));
            }
        }
        Ok(())
    }

    /// Size of the label set.
    pub fn label_count(&self) -> usize {
        self.n_classes * if self.context.is_some() { 2 } else { 1 }
    }
}

/// Per-frame translation and rotation of a motion pattern.
pub fn pattern_velocity(class: usize) -> ([f64; 3], [f64; 3]) {
    match class {
        0..=11 => {
            let speed = if class < 6 { 0.06 } else { 0.14 };
            let mut v = [0.0; 3];
            v[(class % 6) / 2] = if class.is_multiple_of(2) { speed } else { -speed };
            (v, [0.0; 3])
        }
        12..=17 => {
            let k = class - 12;
            let mut w = [0.0; 3];
            w[k / 2] = if k.is_multiple_of(2) { 0.15 } else { -0.15 };
            ([0.0; 3], w)
        }
        _ => ([0.0; 3], [0.0; 3]),
    }
}

type Rot = [[f64; 3]; 3];

fn rot_mul(a: &Rot, b: &Rot) -> Rot {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn axis_angle(w: [f64; 3]) -> Rot {
    let th = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if th == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = w.map(|v| v / th);
    let (s, c) = th.sin_cos();
    let t = 1.0 - c;
    [
        [c + k[0] * k[0] * t, k[0] * k[1] * t - k[2] * s, k[0] * k[2] * t + k[1] * s],
        [k[1] * k[0] * t + k[2] * s, c + k[1] * k[1] * t, k[1] * k[2] * t - k[0] * s],
        [k[2] * k[0] * t - k[1] * s, k[2] * k[1] * t + k[0] * s, c + k[2] * k[2] * t],
    ]
}

fn apply(r: &Rot, v: &[f64]) -> [f64; 3] {
    [0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * v[k]).sum())
}

fn segment_plan(spec: &SynthPcdSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = Vec::with_capacity(spec.t_seq);
    let mut prev = None;
    while labels.len() < spec.t_seq {
        let left = spec.t_seq - labels.len();
        let mut len = rng.random_range(spec.seg_min..=spec.seg_max).min(left);
        if left - len < 2 {
            len = left;
        }
        let class = loop {
            let c = rng.random_range(0..spec.n_classes);
            if Some(c) != prev || spec.n_classes == 1 {
                break c;
            }
        };
        labels.extend(std::iter::repeat_n(class, len));
        prev = Some(class);
    }
    labels
}

fn pcd_clip(spec: &SynthPcdSpec, rng: &mut ChaCha8Rng) -> PointCloudSequence {
    let (body, body_n) = surface_samples(spec.shape, spec.n_pts);
    let patterns = segment_plan(spec, rng);
    let context = spec.context.as_ref().map(|c| (c, rng.random::<bool>()));
    let mut pos = [0.0; 3];
    let mut rot = axis_angle([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    let mut frames = Vec::with_capacity(spec.t_seq);
    for (t, &class) in patterns.iter().enumerate() {
        if t > 0 {
            let (v, w) = pattern_velocity(class);
            for i in 0..3 {
                pos[i] += v[i];
            }
            rot = rot_mul(&axis_angle(w), &rot);
        }
        let scale = match context {
            Some((c, true)) if t < c.frames && t % 2 == 0 => c.scale,
            _ => 1.0,
        };
        let mut pts = Mat::zeros(spec.n_pts, 3);
        let mut nrm = Mat::zeros(spec.n_pts, 3);
        for i in 0..spec.n_pts {
            let p = apply(&rot, body.row(i));
            let n = apply(&rot, body_n.row(i));
            for k in 0..3 {
                let jit = if spec.point_noise > 0.0 {
                    spec.point_noise * normal(rng)
                } else {
                    0.0
                };
                pts.set(i, k, scale * p[k] + pos[k] + jit);
                nrm.set(i, k, n[k]);
            }
        }
        frames.push(PointFrame { points: pts, normals: nrm });
    }
    let shift = match context {
        Some((_, true)) => spec.n_classes,
        _ => 0,
    };
    PointCloudSequence {
        frames,
        labels: Some(patterns.iter().map(|c| c + shift).collect()),
    }
}

/// `count` labelled clips of one split.
pub fn gen_pcd_actions(spec: &SynthPcdSpec, split: Split, count: usize) -> Result<Vec<PointCloudSequence>> {
    spec.validate()?;
    Ok((0..count)
        .map(|i| pcd_clip(spec, &mut derive_rng(spec.seed, &[DATA_PCD, split.key(), i as u64])))
        .collect())
}

/// Writes a motion in the text layout described in the module docs.
pub fn write_motion(m: &Mat) -> String {
    let mut s = String::new();
    for t in 0..m.rows() {
        let _ = write!(s, "{t}");
        for v in m.row(t) {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::InvalidInput(format!("line {line}: bad number {tok:?}")))
}

pub fn read_motion(text: &str) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let idx: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("line {ln}: missing frame index")))?;
        if idx != rows.len() {
            return Err(Error::InvalidInput(format!("line {ln}: frame {idx} out of order")));
        }
        let row = toks.map(|t| parse_f64(t, ln)).collect::<Result<Vec<_>>>()?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Shape(format!("line {ln}: {} values, expected {}", row.len(), rows[0].len())));
        }
        rows.push(row);
    }
    Ok(Mat::from_rows(&rows))
}

/// Writes a clip in the text layout described in the module docs.
pub fn write_clip(seq: &PointCloudSequence) -> String {
    let mut s = String::new();
    for (t, f) in seq.frames.iter().enumerate() {
        let label = seq
            .labels
            .as_ref()
            .map_or_else(|| "-".to_string(), |l| l[t].to_string());
        let _ = writeln!(s, "frame {t} {} {label}", f.points.rows());
        for i in 0..f.points.rows() {
            let p = f.points.row(i);
            let n = f.normals.row(i);
            let _ = writeln!(s, "{:?} {:?} {:?} {:?} {:?} {:?}", p[0], p[1], p[2], n[0], n[1], n[2]);
        }
    }
    s
}

pub fn read_clip(text: &str) -> Result<PointCloudSequence> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut frames = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    while let Some((ln, head)) = lines.next() {
        let h: Vec<&str> = head.split_whitespace().collect();
        if h.len() != 4 || h[0] != "frame" {
            return Err(Error::InvalidInput(format!("line {ln}: expected `frame <t> <n_pts> <label>`")));
        }
        let t: usize = h[1].parse().map_err(|_| Error::InvalidInput(format!("line {ln}: bad frame index")))?;
        if t != frames.len() {
            return Err(Error::InvalidInput(format!("line {ln}: frame {t} out of order")));
        }
        let n: usize = h[2].parse().map_err(|_| Error::InvalidInput(format!("line {ln}: bad point count")))?;
        labels.push(match h[3] {
            "-" => None,
            l => Some(l.parse().map_err(|_| Error::InvalidInput(format!("line {ln}: bad label")))?),
        });
        let mut pts = Mat::zeros(n, 3);
        let mut nrm = Mat::zeros(n, 3);
        for i in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::InvalidInput(format!("frame {t}: expected {n} points")))?;
            let v = line.split_whitespace().map(|x| parse_f64(x, ln)).collect::<Result<Vec<_>>>()?;
            if v.len() != 6 {
                return Err(Error::InvalidInput(format!("line {ln}: expected 6 values")));
            }
            pts.row_mut(i).copy_from_slice(&v[..3]);
            nrm.row_mut(i).copy_from_slice(&v[3..]);
        }
        frames.push(PointFrame { points: pts, normals: nrm });
    }
    let labels = if labels.iter().all(Option::is_some) && !labels.is_empty() {
        Some(labels.into_iter().flatten().collect())
    } else if labels.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::InvalidInput("clip mixes labelled and unlabelled frames".into()));
    };
    let seq = PointCloudSequence { frames, labels };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Segmentation;

    #[test]
    fn zero_noise_reactor_is_the_oracle() {
        let spec = SynthGenSpec {
            noise: 0.0,
            long_range_rate: 0.5,
            ..SynthGenSpec::default()
        };
        let c = Coupling::for_spec(&spec);
        for p in gen_motion_pairs(&spec, Split::Train, 8).unwrap() {
            assert_eq!(p.reactor, reactor_oracle(&spec, &c, &p.actor, &p.object_pose));
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let spec = SynthGenSpec::default();
        let a = gen_motion_pairs(&spec, Split::Train, 3).unwrap();
        let b = gen_motion_pairs(&spec, Split::Train, 3).unwrap();
        let v = gen_motion_pairs(&spec, Split::Val, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].reactor, v[0].reactor);
    }

    #[test]
    fn rejects_zero_lag() {
        let spec = SynthGenSpec {
            lag: 0,
            ..SynthGenSpec::default()
        };
        assert!(matches!(gen_motion_pairs(&spec, Split::Train, 1), Err(Error::Config(_))));
    }

    #[test]
    fn clip_labels_and_normals() {
        for shape in [Shape::Cube, Shape::Sphere] {
            let spec = SynthPcdSpec {
                shape,
                t_seq: 60,
                n_pts: 24,
                ..SynthPcdSpec::default()
            };
            for clip in gen_pcd_actions(&spec, Split::Train, 4).unwrap() {
                let labels = clip.labels.clone().unwrap();
                assert_eq!(labels.len(), 60);
                let segs = Segmentation::new(labels).segments();
                assert_eq!(segs[0].start, 0);
                assert_eq!(segs.last().unwrap().end, 60);
                assert!(segs.iter().all(|s| s.end - s.start >= 2));
                for f in &clip.frames {
                    for i in 0..f.normals.rows() {
                        let n: f64 = f.normals.row(i).iter().map(|v| v * v).sum();
                        assert!((n.sqrt() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn context_cue_shifts_labels() {
        let spec = SynthPcdSpec {
            n_classes: 5,
            t_seq: 40,
            context: Some(ContextCue { frames: 4, scale: 1.4 }),
            ..SynthPcdSpec::default()
        };
        let clips = gen_pcd_actions(&spec, Split::Train, 16).unwrap();
        let shifted = clips
            .iter()
            .filter(|c| c.labels.as_ref().unwrap()[0] >= 5)
            .count();
        assert!(shifted > 0 && shifted < 16);
        assert_eq!(spec.label_count(), 10);
    }

    #[test]
    fn file_layouts_round_trip() {
        let spec = SynthPcdSpec {
            t_seq: 6,
            n_pts: 5,
            ..SynthPcdSpec::default()
        };
        let clip = gen_pcd_actions(&spec, Split::Test, 1).unwrap().remove(0);
        assert_eq!(read_clip(&write_clip(&clip)).unwrap(), clip);
        let pairs = gen_motion_pairs(&SynthGenSpec::default(), Split::Test, 1).unwrap();
        assert_eq!(read_motion(&write_motion(&pairs[0].reactor)).unwrap(), pairs[0].reactor);
        assert!(read_motion("1 0.5\n").is_err());
    }
}

//! Conditional motion diffusion with a Mamba U-Net denoiser.
//!
//! The forward process noises a motion `x0` through `q(x_t | x_{t-1}) =
//! N(sqrt(alpha_t) x_{t-1}, (1 - alpha_t) I)`. The denoiser predicts the
//! clean motion directly; sampling walks the reverse chain with the
//! x0-parameterised posterior. Every layer is frame-causal in online mode, so
//! the generated frame `t` depends on condition frames `0..=t` only.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::memory::{fuse_on_tape, Fusion, MemoryConfig, MemoryVariant};
use crate::nn::{derive_rng, sinusoidal, Adam, AdamConfig, GradBuffer, LayerNorm, Linear, ParamStore, RmsNorm};
use crate::seq::{Mode, SeqBlock, StackConfig};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

impl ScheduleKind {
    /// Linear betas rescaled from the usual 1000-step range to `steps`.
    pub fn linear_for(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        ScheduleKind::Linear {
            beta_start: (1e-4 * scale).min(0.5),
            beta_end: (0.02 * scale).min(0.999),
        }
    }
}

/// `alpha_t` for `t = 1..=T` and their running products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion steps must be >= 1".into()));
    }
    let betas: Vec<f64> = match &kind {
        ScheduleKind::Linear { beta_start, beta_end } => {
            if !(0.0 < *beta_start && *beta_start <= *beta_end && *beta_end < 1.0) {
                return Err(Error::Config(format!(
                    "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
                )));
            }
            (0..steps)
                .map(|i| {
                    if steps == 1 {
                        *beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect()
        }
        ScheduleKind::Cosine { offset } => {
            let f = |t: f64| (((t / steps as f64 + offset) / (1.0 + offset)) * PI / 2.0).cos().powi(2);
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    DiffusionSchedule::from_alphas(kind, betas.iter().map(|b| 1.0 - b).collect())
}

impl DiffusionSchedule {
    pub fn from_alphas(kind: ScheduleKind, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha {a} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self {
            kind,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients `(c0, ct, var)` of the posterior
    /// `q(x_{t-1} | x_t, x0) = N(c0 x0 + ct x_t, var I)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, a) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.alpha(t));
        let beta = 1.0 - a;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        (c0, ct, var)
    }
}

/// Closed-form marginal `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn q_sample(x0: &Mat, t: usize, noise: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    sched.check(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::Shape("noise shape differs from x0".into()));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| s * x + n * e))
}

/// One step of the noising chain, `x_t` from `x_{t-1}`.
pub fn q_step(x_prev: &Mat, t: usize, noise: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    sched.check(t)?;
    let a = sched.alpha(t);
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_prev.zip_map(noise, |x, e| s * x + n * e))
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    /// `T x D_pose`.
    pub frames: Mat,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Mat, fps: f64) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::InvalidInput("motion needs at least one frame".into()));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidInput("motion contains non-finite values".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// What the reactor motion is generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenCondition {
    /// Actor motion, `T x D_actor`.
    pub actor: Mat,
    /// Object pose track, `T x D_obj`.
    pub object_pose: Mat,
    /// Object surface samples in the object frame, `n x 3`.
    pub object_geometry: Mat,
}

impl GenCondition {
    pub fn len(&self) -> usize {
        self.actor.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.actor.rows() == 0
    }

    /// The condition restricted to its first `k` frames.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            actor: self.actor.slice_rows(0, k),
            object_pose: self.object_pose.slice_rows(0, k),
            object_geometry: self.object_geometry.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub pose_dim: usize,
    pub actor_dim: usize,
    pub object_pose_dim: usize,
    /// Encoder and decoder block count (the U-Net is mirrored).
    pub depth: usize,
    pub cond_heads: usize,
    pub stack: StackConfig,
    pub mode: Mode,
    pub memory: MemoryConfig,
    pub memory_variant: MemoryVariant,
    pub fusion: Fusion,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("denoiser depth must be >= 1".into()));
        }
        if self.cond_heads == 0 || !self.stack.model_dim.is_multiple_of(self.cond_heads) {
            return Err(Error::Config("cond_heads must divide model_dim".into()));
        }
        if self.stack.heads == 0 || !self.stack.model_dim.is_multiple_of(self.stack.heads) {
            return Err(Error::Config("heads must divide model_dim".into()));
        }
        self.stack.mamba_cfg().validate()
    }
}

/// Output of one denoiser pass.
pub struct DenoiserPass {
    pub x0: Var,
    /// `(encoder output shape, decoder input shape)` for each long skip.
    pub skip_shapes: Vec<((usize, usize), (usize, usize))>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    in_x: Linear,
    in_actor: Linear,
    in_obj: Linear,
    time_mlp: Linear,
    encoder: Vec<SeqBlock>,
    tok_actor: Linear,
    tok_obj: Linear,
    geo1: Linear,
    geo2: Linear,
    cond_norm: LayerNorm,
    cond_q: Linear,
    cond_k: Linear,
    cond_v: Linear,
    cond_out: Linear,
    mem_proj: Option<Linear>,
    skip_proj: Vec<Linear>,
    decoder: Vec<SeqBlock>,
    out_norm: RmsNorm,
    head: Linear,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.stack.model_dim;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut skip_proj = Vec::new();
        for i in 0..cfg.depth {
            encoder.push(cfg.stack.build(store, &format!("enc.{i}"), rng)?);
        }
        for i in 0..cfg.depth {
            skip_proj.push(Linear::new(store, &format!("dec.{i}.skip"), 2 * d, d, true, rng));
            decoder.push(cfg.stack.build(store, &format!("dec.{i}"), rng)?);
        }
        Ok(Self {
            in_x: Linear::new(store, "in.x", cfg.pose_dim, d, true, rng),
            in_actor: Linear::new(store, "in.actor", cfg.actor_dim, d, false, rng),
            in_obj: Linear::new(store, "in.obj", cfg.object_pose_dim, d, false, rng),
            time_mlp: Linear::new(store, "in.time", d, d, true, rng),
            encoder,
            tok_actor: Linear::new(store, "cond.tok_actor", cfg.actor_dim, d, true, rng),
            tok_obj: Linear::new(store, "cond.tok_obj", cfg.object_pose_dim, d, true, rng),
            geo1: Linear::new(store, "cond.geo1", 3, d, true, rng),
            geo2: Linear::new(store, "cond.geo2", d, d, true, rng),
            cond_norm: LayerNorm::new(store, "cond.norm", d),
            cond_q: Linear::new(store, "cond.q", d, d, false, rng),
            cond_k: Linear::new(store, "cond.k", d, d, false, rng),
            cond_v: Linear::new(store, "cond.v", d, d, false, rng),
            cond_out: Linear::new(store, "cond.out", d, d, true, rng),
            mem_proj: (cfg.fusion == Fusion::ConcatMaxpool)
                .then(|| Linear::passthrough(store, "mem.proj", 2 * d, d, rng)),
            skip_proj,
            decoder,
            out_norm: RmsNorm::new(store, "out.norm", d),
            head: Linear::new(store, "out.head", d, cfg.pose_dim, true, rng),
            cfg,
        })
    }

    fn check_shapes(&self, x_t: &Mat, cond: &GenCondition) -> Result<()> {
        let t_len = x_t.rows();
        if x_t.cols() != self.cfg.pose_dim {
            return Err(Error::Shape(format!("pose width {} vs {}", x_t.cols(), self.cfg.pose_dim)));
        }
        if cond.actor.shape() != (t_len, self.cfg.actor_dim) {
            return Err(Error::Shape(format!(
                "actor condition {:?} vs ({t_len}, {})",
                cond.actor.shape(),
                self.cfg.actor_dim
            )));
        }
        if cond.object_pose.shape() != (t_len, self.cfg.object_pose_dim) {
            return Err(Error::Shape(format!(
                "object pose {:?} vs ({t_len}, {})",
                cond.object_pose.shape(),
                self.cfg.object_pose_dim
            )));
        }
        if cond.object_geometry.cols() != 3 || cond.object_geometry.rows() == 0 {
            return Err(Error::Shape("object geometry must be a non-empty n x 3 set".into()));
        }
        Ok(())
    }

    /// Key rows visible to each query: hidden, actor and object tokens of
    /// frames `<= t` (all frames offline), plus the geometry token.
    fn cond_mask(&self, t_len: usize) -> Arc<Vec<Vec<usize>>> {
        Arc::new(
            (0..t_len)
                .map(|i| {
                    let upto = match self.cfg.mode {
                        Mode::Online => i + 1,
                        Mode::Offline => t_len,
                    };
                    let mut keys = Vec::with_capacity(3 * upto + 1);
                    for block in 0..3 {
                        keys.extend((0..upto).map(|j| block * t_len + j));
                    }
                    keys.push(3 * t_len);
                    keys
                })
                .collect(),
        )
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_t: &Mat, step: usize, cond: &GenCondition) -> Result<DenoiserPass> {
        self.check_shapes(x_t, cond)?;
        let t_len = x_t.rows();
        let d = self.cfg.stack.model_dim;
        let xv = tape.leaf(x_t.clone());
        let av = tape.leaf(cond.actor.clone());
        let ov = tape.leaf(cond.object_pose.clone());
        let gv = tape.leaf(cond.object_geometry.clone());

        let hx = self.in_x.forward(tape, store, xv);
        let ha = self.in_actor.forward(tape, store, av);
        let ho = self.in_obj.forward(tape, store, ov);
        let temb = tape.leaf(sinusoidal(&[step as f64], d));
        let temb = self.time_mlp.forward(tape, store, temb);
        let temb = tape.silu(temb);
        let h = tape.add(hx, ha);
        let h = tape.add(h, ho);
        let h = tape.add(h, temb);
        let mut h = self.cfg.stack.add_positions(tape, h);

        let mut skips = Vec::with_capacity(self.cfg.depth);
        for blk in &self.encoder {
            h = blk.forward(tape, store, h, self.cfg.mode);
            skips.push(h);
        }

        // conditioning attention at the end of the encoder
        let ta = self.tok_actor.forward(tape, store, av);
        let to = self.tok_obj.forward(tape, store, ov);
        let g1 = self.geo1.forward(tape, store, gv);
        let g1 = tape.relu(g1);
        let g2 = self.geo2.forward(tape, store, g1);
        let n_pts = cond.object_geometry.rows();
        let geo = tape.group_max(g2, &[(0..n_pts).collect()]);
        let tokens = tape.concat_rows(&[h, ta, to, geo]);
        let tokens = self.cond_norm.forward(tape, store, tokens);
        let hn = self.cond_norm.forward(tape, store, h);
        let q = self.cond_q.forward(tape, store, hn);
        let k = self.cond_k.forward(tape, store, tokens);
        let v = self.cond_v.forward(tape, store, tokens);
        let mask = self.cond_mask(t_len);
        let dh = d / self.cfg.cond_heads;
        let mut heads = Vec::with_capacity(self.cfg.cond_heads);
        for i in 0..self.cfg.cond_heads {
            let qi = tape.slice_cols(q, i * dh, dh);
            let ki = tape.slice_cols(k, i * dh, dh);
            let vi = tape.slice_cols(v, i * dh, dh);
            heads.push(tape.attention(qi, ki, vi, mask.clone()));
        }
        let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let att = self.cond_out.forward(tape, store, att);
        h = tape.add(h, att);

        // memory injection
        let fused = fuse_on_tape(tape, h, &self.cfg.memory, self.cfg.fusion, self.cfg.memory_variant)?;
        h = match &self.mem_proj {
            Some(p) => p.forward(tape, store, fused),
            None => fused,
        };

        let mut skip_shapes = Vec::with_capacity(self.cfg.depth);
        for (i, blk) in self.decoder.iter().enumerate() {
            let skip = skips[self.cfg.depth - 1 - i];
            skip_shapes.push((tape.shape(skip), tape.shape(h)));
            let cat = tape.concat_cols(&[h, skip]);
            h = self.skip_proj[i].forward(tape, store, cat);
            h = blk.forward(tape, store, h, self.cfg.mode);
        }
        let h = self.out_norm.forward(tape, store, h);
        let x0 = self.head.forward(tape, store, h);
        Ok(DenoiserPass { x0, skip_shapes })
    }

    /// Prediction of the clean motion without recording gradients for later use.
    pub fn predict(&self, store: &ParamStore, x_t: &Mat, step: usize, cond: &GenCondition) -> Result<Mat> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, store, x_t, step, cond)?;
        Ok(tape.value(pass.x0).clone())
    }
}

/// Predicts `x0` from a noised `x_t`.
pub fn denoiser_forward(
    denoiser: &Denoiser,
    store: &ParamStore,
    x_t: &Mat,
    step: usize,
    cond: &GenCondition,
) -> Result<Mat> {
    denoiser.predict(store, x_t, step, cond)
}

#[allow(clippy::too_many_arguments)]
/// Diffusion loss of one example at a given step and noise draw.
pub fn example_loss(
    tape: &mut Tape,
    denoiser: &Denoiser,
    store: &ParamStore,
    sched: &DiffusionSchedule,
    x0: &Mat,
    cond: &GenCondition,
    step: usize,
    noise: &Mat,
) -> Result<Var> {
    let x_t = q_sample(x0, step, noise, sched)?;
    let pass = denoiser.forward(tape, store, &x_t, step, cond)?;
    Ok(tape.mse(pass.x0, Arc::new(x0.clone())))
}

/// Weights, schedule and bookkeeping of one generation model.
#[derive(Clone, Debug)]
pub struct GenModel {
    pub denoiser: Denoiser,
    pub store: ParamStore,
    pub schedule: DiffusionSchedule,
    pub trained_steps: u64,
}

impl GenModel {
    pub fn new(cfg: DenoiserConfig, schedule: DiffusionSchedule, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, &[STREAM_INIT]);
        let denoiser = Denoiser::new(&mut store, cfg, &mut rng)?;
        Ok(Self {
            denoiser,
            store,
            schedule,
            trained_steps: 0,
        })
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// One training example: clean reactor motion and its condition.
#[derive(Clone, Debug)]
pub struct GenExample {
    pub x0: Mat,
    pub cond: GenCondition,
}

/// Adam training loop state. Each step draws its diffusion steps and noise
/// from an RNG keyed by `(seed, step, example)`, so resuming from a saved
/// step reproduces the original trajectory.
#[derive(Clone, Debug)]
pub struct GenTrainer {
    pub model: GenModel,
    pub opt: Adam,
    pub seed: u64,
    pub history: Vec<f64>,
}

impl GenTrainer {
    pub fn new(model: GenModel, adam: AdamConfig, seed: u64) -> Self {
        let opt = Adam::new(adam, &model.store);
        Self {
            model,
            opt,
            seed,
            history: Vec::new(),
        }
    }

    /// One optimiser step over `batch`; returns the mean loss.
    pub fn train_step(&mut self, batch: &[GenExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let step_idx = self.opt.step;
        let model = &self.model;
        let mut grads = GradBuffer::new(&model.store);
        let mut total = 0.0;
        let w = 1.0 / batch.len() as f64;
        for (i, ex) in batch.iter().enumerate() {
            let mut rng = derive_rng(self.seed, &[STREAM_TRAIN, step_idx, i as u64]);
            let t = rng.random_range(1..=model.schedule.steps());
            let noise = gaussian(&mut rng, ex.x0.rows(), ex.x0.cols());
            let mut tape = Tape::new();
            let loss = example_loss(&mut tape, &model.denoiser, &model.store, &model.schedule, &ex.x0, &ex.cond, t, &noise)?;
            let lv = tape.value(loss).get(0, 0);
            total += lv * w;
            if lv.is_finite() {
                let g = tape.backward(loss);
                grads.accumulate(&tape, &g, w);
            }
        }
        if !total.is_finite() || !grads.all_finite() {
            let tail: Vec<f64> = self.history.iter().rev().take(5).rev().copied().collect();
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step_idx} (loss {total}); recent losses {tail:?}"
            )));
        }
        self.opt.update(&mut self.model.store, &grads);
        self.model.trained_steps += 1;
        self.history.push(total);
        Ok(total)
    }
}

/// Reverse-diffusion sampling from Gaussian noise.
///
/// Noise is drawn per frame from an RNG keyed by `(seed, frame)`, so a
/// frame's noise does not depend on how long the sequence is; together with
/// the causal denoiser this makes frame `t` of the output a function of
/// condition frames `0..=t` only.
pub fn sample_online(model: &GenModel, cond: &GenCondition, seed: u64) -> Result<MotionSequence> {
    if model.trained_steps == 0 {
        return Err(Error::InvalidState("model has not been trained".into()));
    }
    if !model.store.all_finite() {
        return Err(Error::InvalidState("model weights contain non-finite values".into()));
    }
    let frames = sample_with(&model.denoiser, &model.store, &model.schedule, cond, seed)?;
    MotionSequence::new(frames, 30.0).map_err(|e| Error::Numerical(format!("sampling diverged: {e}")))
}

/// Sampling loop without the trained-model guard.
pub fn sample_with(
    denoiser: &Denoiser,
    store: &ParamStore,
    sched: &DiffusionSchedule,
    cond: &GenCondition,
    seed: u64,
) -> Result<Mat> {
    let t_len = cond.len();
    let dp = denoiser.cfg.pose_dim;
    let steps = sched.steps();
    // noise[f] holds frame f's initial draw followed by one draw per step
    let noise: Vec<Mat> = (0..t_len)
        .map(|f| gaussian(&mut derive_rng(seed, &[STREAM_SAMPLE, f as u64]), steps + 1, dp))
        .collect();
    let mut x = Mat::zeros(t_len, dp);
    for (f, nz) in noise.iter().enumerate() {
        x.row_mut(f).copy_from_slice(nz.row(0));
    }
    for t in (1..=steps).rev() {
        let x0 = denoiser.predict(store, &x, t, cond)?;
        if t == 1 {
            x = x0;
            break;
        }
        let (c0, ct, var) = sched.posterior(t);
        let sd = var.sqrt();
        let zrow = steps + 1 - t;
        for (f, nz) in noise.iter().enumerate() {
            let z = nz.row(zrow);
            let (xr, pr) = (x.row(f).to_vec(), x0.row(f));
            for (j, o) in x.row_mut(f).iter_mut().enumerate() {
                *o = c0 * pr[j] + ct * xr[j] + sd * z[j];
            }
        }
    }
    Ok(x)
}

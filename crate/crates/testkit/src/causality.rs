//! Perturbation and NaN-poison probes for online components.
//!
//! For every frame `k`, the input is changed at frame `k` (perturbation) or
//! at every frame `>= k` (NaN poison), and the output rows that belong to
//! frames `< k` must be bitwise equal to the unmodified run and finite.

use hoi_core::autograd::Tape;
use hoi_core::diffusion::{
    gaussian, make_schedule, sample_online, sample_with, Denoiser, GenExample, GenModel, GenTrainer, ScheduleKind,
};
use hoi_core::memory::memory_stream;
use hoi_core::nn::{derive_rng, AdamConfig, ParamStore};
use hoi_core::percept::{
    backbone_forward, build_hoods, point4d_conv, temporal_enhance, Backbone, Conv4d, Conv4dConfig, LevelGeom,
    PerceptModel, PointCloudSequence,
};
use hoi_core::seq::{Mode, ModelKind};
use hoi_core::ssm::{mamba_block_forward, MambaBlock, MambaBlockConfig};
use hoi_core::{Mat, Result};

use crate::fixtures::{random_clip, random_condition, tiny_backbone, tiny_denoiser, tiny_percept};

#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub component: String,
    pub checks: usize,
    pub violations: Vec<String>,
}

impl Probe {
    fn new(component: &str) -> Self {
        Self {
            component: component.to_string(),
            ..Self::default()
        }
    }

    /// Rows `0..rows` of `got` must equal `base` bitwise and be finite.
    fn prefix(&mut self, what: &str, base: &Mat, got: &Result<Mat>, rows: usize) {
        self.checks += 1;
        match got {
            Err(e) => self.violations.push(format!("{what}: error {e}")),
            Ok(got) => {
                for r in 0..rows {
                    if got.row(r) != base.row(r) || !got.row_is_finite(r) {
                        self.violations.push(format!("{what}: row {r} changed"));
                        return;
                    }
                }
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty() && self.checks > 0
    }

    pub fn summary(&self) -> String {
        match self.violations.first() {
            None => format!("{}: {} checks", self.component, self.checks),
            Some(v) => format!("{}: {} violations, first {v}", self.component, self.violations.len()),
        }
    }
}

fn perturb_row(m: &Mat, k: usize, seed: u64) -> Mat {
    let mut out = m.clone();
    let noise = gaussian(&mut derive_rng(seed, &[k as u64, 7]), 1, m.cols());
    for (v, n) in out.row_mut(k).iter_mut().zip(noise.data()) {
        *v += 0.5 + n;
    }
    out
}

fn poison_from(m: &Mat, k: usize) -> Mat {
    let mut out = m.clone();
    for r in k..m.rows() {
        out.row_mut(r).iter_mut().for_each(|v| *v = f64::NAN);
    }
    out
}

/// Frame-aligned probe for a function of one `T x D` matrix.
fn probe_matrix(name: &str, x: &Mat, run: impl Fn(&Mat) -> Result<Mat>) -> Probe {
    let mut p = Probe::new(name);
    let base = run(x).expect("base run");
    for k in 0..x.rows() {
        p.prefix(&format!("perturb frame {k}"), &base, &run(&perturb_row(x, k, 1)), k);
        p.prefix(&format!("poison from frame {k}"), &base, &run(&poison_from(x, k)), k);
    }
    p
}

pub fn mamba_block() -> Probe {
    let mut store = ParamStore::new();
    let blk = MambaBlock::new(&mut store, "m", MambaBlockConfig::new(8, 4), &mut derive_rng(1, &[0])).expect("block");
    let x = gaussian(&mut derive_rng(2, &[0]), 12, 8);
    let mut p = probe_matrix("mamba_block", &x, |x| {
        // the public entry rejects non-finite input, so poisoned runs go
        // through the tape directly
        if x.is_finite() {
            return mamba_block_forward(x, &blk, &store);
        }
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = blk.forward(&mut tape, &store, v);
        Ok(tape.value(y).clone())
    });
    p.checks += 1;
    if !matches!(mamba_block_forward(&poison_from(&x, 5), &blk, &store), Err(hoi_core::Error::InvalidInput(_))) {
        p.violations.push("non-finite input was accepted at entry".into());
    }
    p
}

pub fn memory_snapshots() -> Probe {
    let cfg = crate::fixtures::tiny_memory();
    let x = gaussian(&mut derive_rng(3, &[0]), 10, 3);
    let base = memory_stream(&x, &cfg).expect("stream");
    let mut p = Probe::new("memory snapshots");
    for k in 0..x.rows() {
        let other = memory_stream(&perturb_row(&x, k, 2), &cfg).expect("stream");
        p.checks += 1;
        if base[..k] != other[..k] {
            p.violations.push(format!("perturb frame {k}: earlier snapshot changed"));
        }
    }
    p
}

fn denoiser_probe(kind: ModelKind) -> Probe {
    let cfg = tiny_denoiser(Mode::Online, kind);
    let mut store = ParamStore::new();
    let den = Denoiser::new(&mut store, cfg.clone(), &mut derive_rng(4, &[0])).expect("denoiser");
    let t_len = 8;
    let cond = random_condition(&cfg, t_len, 5);
    let x_t = gaussian(&mut derive_rng(6, &[0]), t_len, cfg.pose_dim);
    let name = match kind {
        ModelKind::Mamba => "denoiser",
        ModelKind::CausalTransformer => "denoiser (causal transformer)",
    };
    let mut p = Probe::new(name);
    let base = den.predict(&store, &x_t, 3, &cond).expect("base");
    for k in 0..t_len {
        p.prefix(&format!("perturb x_t frame {k}"), &base, &den.predict(&store, &perturb_row(&x_t, k, 3), 3, &cond), k);
        let mut c = cond.clone();
        c.actor = perturb_row(&c.actor, k, 4);
        p.prefix(&format!("perturb actor frame {k}"), &base, &den.predict(&store, &x_t, 3, &c), k);
        let mut c = cond.clone();
        c.object_pose = perturb_row(&c.object_pose, k, 5);
        p.prefix(&format!("perturb object frame {k}"), &base, &den.predict(&store, &x_t, 3, &c), k);
        let mut c = cond.clone();
        c.actor = poison_from(&c.actor, k);
        c.object_pose = poison_from(&c.object_pose, k);
        p.prefix(&format!("poison from frame {k}"), &base, &den.predict(&store, &poison_from(&x_t, k), 3, &c), k);
    }
    p
}

pub fn denoiser() -> Vec<Probe> {
    vec![denoiser_probe(ModelKind::Mamba), denoiser_probe(ModelKind::CausalTransformer)]
}

fn perturb_frame(seq: &PointCloudSequence, k: usize) -> PointCloudSequence {
    let mut s = seq.clone();
    let f = &mut s.frames[k];
    f.points = f.points.map(|v| v * 0.7 + 0.05);
    f.normals = f.normals.map(|v| -v);
    s
}

fn poison_frames(seq: &PointCloudSequence, k: usize) -> PointCloudSequence {
    let mut s = seq.clone();
    for f in &mut s.frames[k..] {
        f.normals = f.normals.map(|_| f64::NAN);
        f.points = f.points.map(|v| v * 3.0 - 1.0);
    }
    s
}

/// Frame-aligned probe for a function of a point-cloud clip; `rows_per_frame`
/// output rows belong to each frame.
fn probe_clip(name: &str, seq: &PointCloudSequence, rows_per_frame: usize, run: impl Fn(&PointCloudSequence) -> Result<Mat>) -> Probe {
    let mut p = Probe::new(name);
    let base = run(seq).expect("base run");
    for k in 0..seq.len() {
        p.prefix(&format!("perturb frame {k}"), &base, &run(&perturb_frame(seq, k)), k * rows_per_frame);
        p.prefix(&format!("poison from frame {k}"), &base, &run(&poison_frames(seq, k)), k * rows_per_frame);
    }
    p
}

pub fn backbone_online() -> Probe {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "bb", tiny_backbone(), &mut derive_rng(7, &[0])).expect("backbone");
    let n = 10;
    let seq = random_clip(6, n, 8);
    probe_clip("4D backbone (online windows)", &seq, n, |s| backbone_forward(&bb, &store, s, Mode::Online))
}

fn percept_model(kind: ModelKind, per_point: bool) -> (PerceptModel, ParamStore) {
    let mut cfg = tiny_percept(Mode::Online, kind);
    cfg.per_point = per_point;
    let mut store = ParamStore::new();
    let m = PerceptModel::new(&mut store, cfg, &mut derive_rng(9, &[0])).expect("model");
    (m, store)
}

pub fn temporal() -> Vec<Probe> {
    let x = gaussian(&mut derive_rng(10, &[0]), 10, 8);
    [ModelKind::Mamba, ModelKind::CausalTransformer]
        .into_iter()
        .map(|kind| {
            let (m, store) = percept_model(kind, false);
            let name = match kind {
                ModelKind::Mamba => "temporal_enhance",
                ModelKind::CausalTransformer => "temporal_enhance (causal transformer)",
            };
            probe_matrix(name, &x, |x| temporal_enhance(&m, &store, x))
        })
        .collect()
}

pub fn segment_predict() -> Vec<Probe> {
    let seq = random_clip(6, 8, 11);
    let mut out = Vec::new();
    for (name, per_point) in [("segment_predict", false), ("segment_predict (per-point)", true)] {
        let (m, store) = percept_model(ModelKind::Mamba, per_point);
        let mut p = probe_clip(name, &seq, 1, |s| m.predict(&store, s).map(|p| p.logits));
        let base = m.predict(&store, &seq).expect("base").labels;
        for k in 0..seq.len() {
            p.checks += 1;
            let got = m.predict(&store, &perturb_frame(&seq, k)).expect("run").labels;
            if got[..k] != base[..k] {
                p.violations.push(format!("labels before frame {k} changed"));
            }
        }
        out.push(p);
    }
    out
}

/// A generation model trained for a couple of steps on random data.
pub fn smoke_gen_model() -> GenModel {
    let cfg = tiny_denoiser(Mode::Online, ModelKind::Mamba);
    let sched = make_schedule(5, ScheduleKind::linear_for(5)).expect("schedule");
    let model = GenModel::new(cfg.clone(), sched, 12).expect("model");
    let mut tr = GenTrainer::new(model, AdamConfig::default(), 13);
    let ex = GenExample {
        x0: gaussian(&mut derive_rng(14, &[0]), 6, cfg.pose_dim),
        cond: random_condition(&cfg, 6, 15),
    };
    for _ in 0..2 {
        tr.train_step(std::slice::from_ref(&ex)).expect("train step");
    }
    tr.model
}

pub fn sampler() -> Probe {
    let model = smoke_gen_model();
    let t_len = 8;
    let cond = random_condition(&model.denoiser.cfg, t_len, 16);
    let seed = 17;
    let base = sample_online(&model, &cond, seed).expect("sample").frames;
    let mut p = Probe::new("sample_online");
    for k in 0..t_len {
        if k > 0 {
            let got = sample_online(&model, &cond.truncated(k), seed).map(|m| m.frames);
            p.prefix(&format!("truncate to {k} frames"), &base, &got, k);
        }
        let mut c = cond.clone();
        c.actor = perturb_row(&c.actor, k, 6);
        p.prefix(&format!("perturb actor frame {k}"), &base, &sample_online(&model, &c, seed).map(|m| m.frames), k);
        let mut c = cond.clone();
        c.actor = poison_from(&c.actor, k);
        c.object_pose = poison_from(&c.object_pose, k);
        let got = sample_with(&model.denoiser, &model.store, &model.schedule, &c, seed);
        p.prefix(&format!("poison from frame {k}"), &base, &got, k);
    }
    p
}

/// Every online probe.
pub fn suite() -> Vec<Probe> {
    let mut all = vec![mamba_block(), memory_snapshots()];
    all.extend(denoiser());
    all.push(backbone_online());
    all.extend(temporal());
    all.extend(segment_predict());
    all.push(sampler());
    all
}

/// Offline contracts: a symmetric window reaches exactly `[k - r_t, k + r_t]`,
/// and offline models do let later frames change earlier outputs.
pub fn offline_semantics() -> Probe {
    let mut p = Probe::new("offline windows");
    let n = 6;
    let seq = random_clip(7, n, 18);
    let r_t = 1;
    let mut store = ParamStore::new();
    let cfg = Conv4dConfig {
        out_channels: 5,
        r_s: 1.0,
        r_t,
        subsample: 1,
    };
    let conv = Conv4d::new(&mut store, "c", 4, cfg, &mut derive_rng(19, &[0])).expect("conv");
    let run = |s: &PointCloudSequence| {
        let g = LevelGeom::from_sequence(s);
        point4d_conv(&conv, &store, &s.input_features(), &g, &g, Mode::Offline).expect("conv")
    };
    let base = run(&seq);
    let mut reached_past = false;
    for k in 0..seq.len() {
        let got = run(&perturb_frame(&seq, k));
        for t in 0..seq.len() {
            let same = (t * n..(t + 1) * n).all(|r| got.row(r) == base.row(r));
            let within = t + r_t >= k && t <= k + r_t;
            p.checks += 1;
            if !same && !within {
                p.violations.push(format!("perturb frame {k} reached frame {t}"));
            }
            if !same && t + 1 == k {
                reached_past = true;
            }
        }
    }
    p.checks += 1;
    if !reached_past {
        p.violations.push("offline window never reached the previous frame".into());
    }
    // hoods of an offline window cover both sides
    let g = LevelGeom::from_sequence(&seq);
    let hoods = build_hoods(&g, &g, 1.0, r_t, Mode::Offline);
    p.checks += 1;
    if hoods[0].len() != 2 * r_t + 1 {
        p.violations.push("offline window has the wrong number of offsets".into());
    }
    // the offline denoiser and temporal stage are not prefix-stable
    let cfg = tiny_denoiser(Mode::Offline, ModelKind::Mamba);
    let mut st = ParamStore::new();
    let den = Denoiser::new(&mut st, cfg.clone(), &mut derive_rng(20, &[0])).expect("denoiser");
    let cond = random_condition(&cfg, 6, 21);
    let x_t = gaussian(&mut derive_rng(22, &[0]), 6, cfg.pose_dim);
    let a = den.predict(&st, &x_t, 2, &cond).expect("run");
    let mut c = cond.clone();
    c.actor = perturb_row(&c.actor, 5, 8);
    let b = den.predict(&st, &x_t, 2, &c).expect("run");
    p.checks += 1;
    if (0..5).all(|r| a.row(r) == b.row(r)) {
        p.violations.push("offline denoiser ignored a later frame".into());
    }
    let (mut m, store) = percept_model(ModelKind::CausalTransformer, false);
    let x = gaussian(&mut derive_rng(23, &[0]), 6, 8);
    let on = temporal_enhance(&m, &store, &x).expect("run");
    m.cfg.temporal_mode = Mode::Offline;
    let off = temporal_enhance(&m, &store, &x).expect("run");
    p.checks += 1;
    if on == off {
        p.violations.push("temporal mode flag has no effect".into());
    }
    p
}

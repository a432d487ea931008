//! Training and evaluation of one `(config, seed)` run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hoi_core::archive::Archive;
use hoi_core::diffusion::{make_schedule, sample_online, sample_with, GenCondition, GenExample, GenModel, GenTrainer};
use hoi_core::metrics::{
    div, edit_score, f1_at_k, fid, framewise_acc, recognition_accuracy, FeatureExtractor, Segmentation,
    F1_THRESHOLDS,
};
use hoi_core::nn::{derive_rng, Adam, AdamConfig, ParamStore};
use hoi_core::percept::{PerceptTrainer, PlannedClip, PointCloudSequence};
use hoi_core::seq::Mode;
use hoi_core::synth::MotionPair;
use hoi_core::Mat;

use crate::config::{hex, RunConfig, Task};
use crate::data;
use crate::error::{CliError, CliResult};
use crate::report::{out_root, write_csv, write_jsonl, VERSION};

pub const CHECKPOINT: &str = "checkpoint.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn run_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    out_root().join(&cfg.name).join(format!("seed-{seed}"))
}

pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Generation => &["recon_mse", "fid", "ra", "div", "div_gt", "div_gap"],
        Task::Perception => &["acc", "edit", "f1@10", "f1@25", "f1@50"],
    }
}

enum Learner {
    Gen { tr: Box<GenTrainer>, data: Vec<GenExample> },
    Percept { tr: Box<PerceptTrainer>, data: Vec<PlannedClip> },
}

impl Learner {
    fn new(cfg: &RunConfig, seed: u64) -> CliResult<Self> {
        let adam = AdamConfig {
            lr: cfg.train.lr,
            decay_steps: cfg.train.decay.then_some(cfg.train.steps as u64),
            ..AdamConfig::default()
        };
        Ok(match cfg.task {
            Task::Generation => {
                let g = cfg.gen()?;
                let model = GenModel::new(cfg.denoiser_config()?, make_schedule(g.diffusion_steps, g.schedule.clone())?, seed)?;
                let data = data::motion_pairs(cfg)?.train.iter().map(MotionPair::example).collect();
                Learner::Gen {
                    tr: Box::new(GenTrainer::new(model, adam, seed)),
                    data,
                }
            }
            Task::Perception => {
                let tr = PerceptTrainer::new(cfg.percept_config()?, adam, seed)?;
                let data = data::clips(cfg)?
                    .train
                    .iter()
                    .map(|c| tr.prepare(c))
                    .collect::<hoi_core::Result<_>>()?;
                Learner::Percept { tr: Box::new(tr), data }
            }
        })
    }

    fn parts(&self) -> (&ParamStore, &Adam, &[f64]) {
        match self {
            Learner::Gen { tr, .. } => (&tr.model.store, &tr.opt, &tr.history),
            Learner::Percept { tr, .. } => (&tr.store, &tr.opt, &tr.history),
        }
    }

    fn step(&mut self, batch: usize) -> CliResult<f64> {
        let pick = |step: u64, n: usize| (0..batch).map(move |i| (step as usize * batch + i) % n);
        Ok(match self {
            Learner::Gen { tr, data } => {
                let b: Vec<GenExample> = pick(tr.opt.step, data.len()).map(|i| data[i].clone()).collect();
                tr.train_step(&b)?
            }
            Learner::Percept { tr, data } => {
                let b: Vec<&PlannedClip> = pick(tr.opt.step, data.len()).map(|i| &data[i]).collect();
                tr.train_step(&b)?
            }
        })
    }

    fn restore(&mut self, a: &Archive) -> CliResult<()> {
        let history = a.tensors.get("history").map(|m| m.data().to_vec()).unwrap_or_default();
        match self {
            Learner::Gen { tr, .. } => {
                load_weights(a, &mut tr.model.store)?;
                a.load_adam(&tr.model.store, &mut tr.opt)?;
                tr.model.trained_steps = tr.opt.step;
                tr.history = history;
            }
            Learner::Percept { tr, .. } => {
                load_weights(a, &mut tr.store)?;
                a.load_adam(&tr.store, &mut tr.opt)?;
                tr.history = history;
            }
        }
        Ok(())
    }
}

fn load_weights(a: &Archive, store: &mut ParamStore) -> CliResult<()> {
    a.load_store("model", store)
        .map_err(|e| CliError::Config(format!("checkpoint does not fit the configured model: {e}")))
}

/// SHA-256 over tensor names and bytes, in name order.
pub fn content_version(a: &Archive) -> String {
    let mut h = Sha256::new();
    for (name, m) in &a.tensors {
        h.update(name.as_bytes());
        h.update([0]);
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn checkpoint(cfg: &RunConfig, seed: u64, learner: &Learner) -> Archive {
    let (store, adam, history) = learner.parts();
    let mut a = Archive::new();
    a.put_store("model", store);
    a.put_adam(store, adam);
    if !history.is_empty() {
        a.put("history", Mat::row_vector(history));
    }
    let content = content_version(&a);
    a.meta("config", cfg.canonical_json());
    a.meta("config_hash", cfg.hash());
    a.meta("seed", seed.to_string());
    a.meta("task", cfg.task.as_str());
    a.meta("step", adam.step.to_string());
    a.meta("version", VERSION);
    a.meta("content_version", content);
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

fn write_log(cfg: &RunConfig, seed: u64, dir: &Path, learner: &Learner) -> CliResult<()> {
    let (_, adam, history) = learner.parts();
    let hash = cfg.hash();
    let rows: Vec<LogRow> = history
        .iter()
        .enumerate()
        .map(|(i, &loss)| LogRow {
            kind: "train_log".into(),
            config_hash: hash.clone(),
            seed,
            version: VERSION.into(),
            step: i as u64 + 1,
            loss,
            lr: adam.lr_at(i as u64),
        })
        .collect();
    write_jsonl(&dir.join(TRAIN_LOG), &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub step: u64,
    pub resumed_from: Option<u64>,
    pub final_loss: f64,
    pub params: usize,
    pub checkpoint: PathBuf,
}

pub fn load_checkpoint(cfg: &RunConfig, seed: u64) -> CliResult<Archive> {
    let path = run_dir(cfg, seed).join(CHECKPOINT);
    if !path.exists() {
        return Err(CliError::Config(format!("no checkpoint at {}; run `train` first", path.display())));
    }
    let a = Archive::load(&path)?;
    let task = a.get_meta("task")?;
    if task != cfg.task.as_str() {
        return Err(CliError::Config(format!(
            "checkpoint {} holds a {task} model but the config asks for {}",
            path.display(),
            cfg.task.as_str()
        )));
    }
    Ok(a)
}

/// Trains one seed to `until` (default: the full budget), checkpointing
/// every `checkpoint_every` steps. With `resume`, continues from an
/// existing checkpoint written under the same config.
pub fn train_seed(cfg: &RunConfig, seed: u64, resume: bool, until: Option<usize>) -> CliResult<TrainSummary> {
    let dir = run_dir(cfg, seed);
    let ckpt = dir.join(CHECKPOINT);
    let mut learner = Learner::new(cfg, seed)?;
    let mut resumed_from = None;
    if resume && ckpt.exists() {
        let a = Archive::load(&ckpt)?;
        if a.get_meta("config_hash")? != cfg.hash() {
            return Err(CliError::Config(format!("{} was written under a different config", ckpt.display())));
        }
        learner.restore(&a)?;
        resumed_from = Some(learner.parts().1.step);
    }
    let target = until.unwrap_or(cfg.train.steps).min(cfg.train.steps) as u64;
    let mut last = learner.parts().2.last().copied().unwrap_or(f64::NAN);
    while learner.parts().1.step < target {
        last = learner.step(cfg.train.batch)?;
        let step = learner.parts().1.step;
        if step % cfg.train.checkpoint_every as u64 == 0 || step == target {
            checkpoint(cfg, seed, &learner).save(&ckpt)?;
            write_log(cfg, seed, &dir, &learner)?;
        }
    }
    let (store, adam, _) = learner.parts();
    Ok(TrainSummary {
        seed,
        step: adam.step,
        resumed_from,
        final_loss: last,
        params: store.num_scalars(),
        checkpoint: ckpt,
    })
}

/// Parameter count of the configured model.
pub fn param_count(cfg: &RunConfig) -> CliResult<usize> {
    Ok(match cfg.task {
        Task::Generation => {
            let g = cfg.gen()?;
            GenModel::new(cfg.denoiser_config()?, make_schedule(g.diffusion_steps, g.schedule.clone())?, 0)?
                .store
                .num_scalars()
        }
        Task::Perception => PerceptTrainer::new(cfg.percept_config()?, AdamConfig::default(), 0)?
            .store
            .num_scalars(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub kind: String,
    pub name: String,
    pub task: Task,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub ground_truth: bool,
    pub checkpoint_content: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub causality_guard: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub truth: Vec<Vec<f64>>,
    pub generated: Vec<Vec<f64>>,
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    derive_rng(seed, &[0x5A, i as u64]).random()
}

fn poisoned_condition(c: &GenCondition, k: usize) -> GenCondition {
    let mut p = c.clone();
    for m in [&mut p.actor, &mut p.object_pose] {
        for r in k..m.rows() {
            m.row_mut(r).fill(f64::NAN);
        }
    }
    p
}

fn poisoned_clip(c: &PointCloudSequence, k: usize) -> PointCloudSequence {
    let mut p = c.clone();
    for f in &mut p.frames[k..] {
        f.points = f.points.map(|v| v * 1.7 + 0.3);
        f.normals = f.normals.map(|_| f64::NAN);
    }
    p
}

/// Bitwise equality and finiteness of the first `k` rows.
fn prefix_clean(a: &Mat, b: &Mat, k: usize) -> bool {
    (0..k).all(|r| {
        a.row_is_finite(r) && a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn guard_failure(what: &str, k: usize) -> CliError {
    CliError::Numerical(format!(
        "causality guard: {what} frames before {k} changed when later inputs were replaced by NaN"
    ))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn eval_generation(cfg: &RunConfig, seed: u64, ckpt: Option<&Archive>) -> CliResult<(BTreeMap<String, f64>, String, Option<Trajectory>)> {
    let g = cfg.gen()?;
    let d = data::motion_pairs(cfg)?;
    let truth: Vec<Mat> = d.val.iter().map(|p| p.reactor.clone()).collect();
    let labels: Vec<usize> = d.val.iter().map(|p| p.label).collect();
    let mut guard = "not applicable".to_string();
    let mut traj = None;
    let generated = match ckpt {
        None => truth.clone(),
        Some(a) => {
            let mut model = GenModel::new(cfg.denoiser_config()?, make_schedule(g.diffusion_steps, g.schedule.clone())?, seed)?;
            load_weights(a, &mut model.store)?;
            model.trained_steps = a.get_meta("step")?.parse().unwrap_or(0);
            let out = d
                .val
                .iter()
                .enumerate()
                .map(|(i, p)| Ok(sample_online(&model, &p.condition(), sample_seed(seed, i))?.frames))
                .collect::<CliResult<Vec<Mat>>>()?;
            if cfg.mode == Mode::Online {
                let cond = d.val[0].condition();
                let k = (cond.len() / 2).max(1);
                let s = sample_seed(seed, 0);
                let clean = sample_with(&model.denoiser, &model.store, &model.schedule, &cond, s)?;
                let dirty = sample_with(&model.denoiser, &model.store, &model.schedule, &poisoned_condition(&cond, k), s)?;
                if !prefix_clean(&clean, &dirty, k) {
                    return Err(guard_failure("generated", k));
                }
                guard = "pass".into();
            }
            traj = Some(Trajectory {
                kind: "trajectory".into(),
                config_hash: cfg.hash(),
                seed,
                version: VERSION.into(),
                truth: truth[0].to_rows(),
                generated: out[0].to_rows(),
            });
            out
        }
    };
    let train_reactors: Vec<Mat> = d.train.iter().map(|p| p.reactor.clone()).collect();
    let train_labels: Vec<usize> = d.train.iter().map(|p| p.label).collect();
    let (fx, rep) = FeatureExtractor::train(g.data.pose_dim, g.data.n_classes, &train_reactors, &train_labels, g.extractor.clone())?;
    if let Some(w) = rep.warning {
        eprintln!("warning: {w}");
    }
    let fg = fx.features(&generated)?;
    let ft = fx.features(&truth)?;
    let recon = mean(generated.iter().zip(&truth).map(|(a, b)| a.zip_map(b, |x, y| (x - y) * (x - y)).mean()));
    let mut m = BTreeMap::new();
    m.insert("recon_mse".into(), recon);
    m.insert("fid".into(), fid(&fg, &ft)?);
    m.insert("ra".into(), recognition_accuracy(&fx, &generated, &labels)?);
    // diversity is judged by its distance to the ground-truth diversity
    let dg = div(&fg, g.div_pairs, seed, g.div_mode)?;
    let dt = div(&ft, g.div_pairs, seed, g.div_mode)?;
    m.insert("div".into(), dg);
    m.insert("div_gt".into(), dt);
    m.insert("div_gap".into(), (dg - dt).abs());
    Ok((m, guard, traj))
}

fn eval_perception(cfg: &RunConfig, seed: u64, ckpt: Option<&Archive>) -> CliResult<(BTreeMap<String, f64>, String)> {
    let d = data::clips(cfg)?;
    let gts: Vec<Vec<usize>> = d
        .val
        .iter()
        .map(|c| c.labels.clone().ok_or_else(|| CliError::Config("validation clip without labels".into())))
        .collect::<CliResult<_>>()?;
    let mut guard = "not applicable".to_string();
    let preds: Vec<Vec<usize>> = match ckpt {
        None => gts.clone(),
        Some(a) => {
            let mut tr = PerceptTrainer::new(cfg.percept_config()?, AdamConfig::default(), seed)?;
            load_weights(a, &mut tr.store)?;
            let preds = d
                .val
                .iter()
                .map(|c| Ok(tr.model.predict(&tr.store, c)?.labels))
                .collect::<CliResult<Vec<_>>>()?;
            if cfg.mode == Mode::Online {
                let clip = &d.val[0];
                let k = (clip.len() / 2).max(1);
                let clean = tr.model.predict(&tr.store, clip)?.logits;
                let dirty = tr.model.predict(&tr.store, &poisoned_clip(clip, k))?.logits;
                if !prefix_clean(&clean, &dirty, k) {
                    return Err(guard_failure("segmentation logits of", k));
                }
                guard = "pass".into();
            }
            preds
        }
    };
    let pairs: Vec<(Segmentation, Segmentation)> = preds
        .into_iter()
        .zip(gts)
        .map(|(p, g)| (Segmentation::new(p), Segmentation::new(g)))
        .collect();
    let frames: usize = pairs.iter().map(|(_, g)| g.len()).sum();
    let hits: f64 = pairs
        .iter()
        .map(|(p, g)| framewise_acc(p, g).map(|a| a * g.len() as f64 / 100.0))
        .sum::<hoi_core::Result<f64>>()?;
    let mut m = BTreeMap::new();
    m.insert("acc".into(), 100.0 * hits / frames as f64);
    m.insert("edit".into(), mean(pairs.iter().map(|(p, g)| edit_score(p, g)).collect::<hoi_core::Result<Vec<_>>>()?));
    for tau in F1_THRESHOLDS {
        let v = mean(pairs.iter().map(|(p, g)| f1_at_k(p, g, tau)).collect::<hoi_core::Result<Vec<_>>>()?);
        m.insert(format!("f1@{}", (tau * 100.0).round()), v);
    }
    Ok((m, guard))
}

/// Evaluates one seed. With `ground_truth`, scores the validation targets
/// against themselves and needs no checkpoint.
pub fn eval_seed(cfg: &RunConfig, seed: u64, ground_truth: bool) -> CliResult<EvalRow> {
    let ckpt = if ground_truth { None } else { Some(load_checkpoint(cfg, seed)?) };
    let (metrics, guard) = match cfg.task {
        Task::Generation => {
            let (m, g, traj) = eval_generation(cfg, seed, ckpt.as_ref())?;
            if let Some(t) = traj {
                write_jsonl(&run_dir(cfg, seed).join("trajectory.jsonl"), &[t])?;
            }
            (m, g)
        }
        Task::Perception => eval_perception(cfg, seed, ckpt.as_ref())?,
    };
    for (k, v) in &metrics {
        if !v.is_finite() {
            return Err(CliError::Numerical(format!("metric {k} is {v}")));
        }
    }
    Ok(EvalRow {
        kind: "eval".into(),
        name: cfg.name.clone(),
        task: cfg.task,
        seed,
        config_hash: cfg.hash(),
        version: VERSION.into(),
        ground_truth,
        checkpoint_content: ckpt.as_ref().and_then(|a| a.get_meta("content_version").ok().map(String::from)),
        metrics,
        causality_guard: guard,
        config: cfg.clone(),
    })
}

/// Writes `eval.jsonl` and `eval.csv` (or `eval_gt.*`) for `rows`.
pub fn write_eval_reports(cfg: &RunConfig, rows: &[EvalRow], ground_truth: bool) -> CliResult<PathBuf> {
    let dir = out_root().join(&cfg.name);
    let stem = if ground_truth { "eval_gt" } else { "eval" };
    write_jsonl(&dir.join(format!("{stem}.jsonl")), rows)?;
    let names = metric_names(cfg.task);
    let mut header: Vec<String> = vec!["seed".into(), "config_hash".into(), "causality_guard".into()];
    header.extend(names.iter().map(|s| s.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.seed.to_string(), r.config_hash.clone(), r.causality_guard.clone()];
            v.extend(names.iter().map(|n| r.metrics.get(*n).map_or_else(String::new, |x| format!("{x:.6}"))));
            v
        })
        .collect();
    let csv = dir.join(format!("{stem}.csv"));
    write_csv(&csv, &header, &body)?;
    Ok(csv)
}

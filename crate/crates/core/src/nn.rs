//! Parameters, small layers and the Adam optimiser.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter matrices. Names are flat dotted keys such as
/// `enc.0.in_proj.w`; registration order is stable and defines iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names: two layers sharing a prefix is a
    /// construction bug, not a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Replaces values by name. Every stored name must be present in
    /// `values` with a matching shape.
    pub fn load_from(&mut self, values: &HashMap<String, Mat>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Archive(format!("missing parameter {name}")))?;
            if v.shape() != self.values[i].shape() {
                return Err(Error::Archive(format!(
                    "parameter {name}: shape {:?} in archive, {:?} expected",
                    v.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = v.clone();
        }
        Ok(())
    }
}

/// Deterministic RNG for a named purpose under a run seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG keyed by a run seed and a path of integers (purpose, step, item...).
/// Equal keys give equal streams regardless of what else was drawn before.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let key = path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Uniform `[-bound, bound]` initialisation with `bound = scale / sqrt(fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, scale: f64) -> Mat {
    let bound = scale / (fan_in.max(1) as f64).sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, d_in, d_out, d_in, 1.0));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, d_out)));
        Self { w, b }
    }

    /// Projection of `[x | extra]` whose first `d_out` inputs start as the
    /// identity, so `x` passes through unchanged at initialisation.
    pub fn passthrough(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let mut w = init_uniform(rng, d_in, d_out, d_in, 1.0);
        for i in 0..d_out.min(d_in) {
            w.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            w.set(i, i, 1.0);
        }
        let w = store.add(format!("{name}.w"), w);
        let b = Some(store.add(format!("{name}.b"), Mat::zeros(1, d_out)));
        Self { w, b }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Mat::zeros(d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, d_out)));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => y,
        }
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }
}

/// RMS normalisation with a learned per-channel gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.rms_norm(x, 1e-5);
        let g = tape.param(store, self.gain);
        tape.mul(n, g)
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x, 1e-5);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(n, g);
        tape.add(y, b)
    }
}

/// Sinusoidal embedding of integer positions, one row per position.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Mat {
    let mut out = Mat::zeros(positions.len(), dim);
    let half = dim / 2;
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out.set(r, 2 * i, (p * freq).sin());
            out.set(r, 2 * i + 1, (p * freq).cos());
        }
    }
    out
}

/// Per-parameter gradient accumulator.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Mat>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    /// Adds the parameter gradients of one tape, scaled by `weight`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients, weight: f64) {
        for (pid, var) in tape.param_vars() {
            if let Some(g) = grads.get(var) {
                let g = g.scale(weight);
                match &mut self.grads[pid.0] {
                    Some(e) => e.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Mat::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::is_finite)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    /// Cosine decay of the learning rate to a tenth over this many steps.
    #[serde(default)]
    pub decay_steps: Option<u64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
            decay_steps: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Mat::zeros(r, c)
            })
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate used for update number `step` (zero-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.cfg.decay_steps {
            Some(n) if n > 0 => {
                let f = (step as f64 / n as f64).min(1.0);
                self.cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * f).cos()))
            }
            _ => self.cfg.lr,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let clip = match self.cfg.clip {
            Some(c) => {
                let n = grads.global_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr_at(self.step - 1);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k] * clip;
                let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
                let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= lr * (mk / bc1) / ((vk / bc2).sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = rng_for(0, 0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 2, 1, true, &mut rng);
        let x = Mat::from_vec(4, 2, vec![0., 0., 1., 0., 0., 1., 1., 1.]);
        let y = Arc::new(Mat::from_vec(4, 1, vec![0.5, 2.5, -0.5, 1.5]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut last = f64::INFINITY;
        for _ in 0..600 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = lin.forward(&mut tape, &store, xv);
            let loss = tape.mse(out, y.clone());
            last = tape.value(loss).get(0, 0);
            let g = tape.backward(loss);
            let mut buf = GradBuffer::new(&store);
            buf.accumulate(&tape, &g, 1.0);
            opt.update(&mut store, &buf);
        }
        assert!(last < 1e-6, "loss {last}");
    }

    #[test]
    fn rng_streams_are_independent_and_stable() {
        let a: u64 = rng_for(7, 1).random();
        let b: u64 = rng_for(7, 1).random();
        let c: u64 = rng_for(7, 2).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

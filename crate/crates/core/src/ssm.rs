//! State-space recurrences and the unidirectional Mamba block.
//!
//! The reference path here (`discretize`, `ssm_scan`, `KernelForm`) is a
//! single-input single-output system with a dense `N x N` transition, used as
//! the ground truth for the diagonal selective scan that runs inside
//! [`MambaBlock`].

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Linear, ParamId, ParamStore, RmsNorm};
use crate::tensor::Mat;

/// Continuous-time SISO system `(A, B, C)` with timescale `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `N x N` transition.
    pub a: Mat,
    /// Input projection, length `N`.
    pub b: Vec<f64>,
    /// Output projection, length `N`.
    pub c: Vec<f64>,
    pub delta: f64,
}

impl SsmParams {
    pub fn state_dim(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.b.len();
        if n == 0 {
            return Err(Error::InvalidParameter("state dimension must be >= 1".into()));
        }
        if self.a.shape() != (n, n) || self.c.len() != n {
            return Err(Error::InvalidParameter(format!(
                "inconsistent state dimension: A {:?}, B {}, C {}",
                self.a.shape(),
                n,
                self.c.len()
            )));
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::InvalidParameter(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Zero-order-hold discretisation `(A_bar, B_bar)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub a_bar: Mat,
    pub b_bar: Vec<f64>,
}

/// `A_bar = exp(delta A)`, `B_bar = (delta A)^-1 (exp(delta A) - I) delta B`.
///
/// Both come out of one exponential of the augmented block matrix
/// `[[delta A, delta B], [0, 0]]`, which stays well defined for singular `A`
/// (the top-right block is `phi_1(delta A) delta B`, equal to `delta B` when
/// `A = 0`).
pub fn discretize(params: &SsmParams) -> Result<Discretized> {
    params.validate()?;
    let n = params.state_dim();
    let d = params.delta;
    let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            aug[(i, j)] = d * params.a.get(i, j);
        }
        aug[(i, n)] = d * params.b[i];
    }
    let e = aug.exp();
    let mut a_bar = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a_bar.set(i, j, e[(i, j)]);
        }
    }
    let b_bar = (0..n).map(|i| e[(i, n)]).collect();
    Ok(Discretized { a_bar, b_bar })
}

/// Output/state alignment of the recurrence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indexing {
    /// `h_t = A_bar h_{t-1} + B_bar x_t`, `y_t = C h_t`.
    #[default]
    Current,
    /// `h_{t+1} = A_bar h_t + B_bar x_t`, `y_t = C h_t`: the output lags the
    /// input by one step.
    Delayed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    /// Number of inputs consumed so far.
    pub t: usize,
}

impl HiddenState {
    pub fn zeros(n: usize) -> Self {
        Self { h: vec![0.0; n], t: 0 }
    }
}

/// Sequential recurrence over `xs` starting from `state`.
///
/// Returns the outputs and the final state; scanning `xs[..k]` and then
/// `xs[k..]` with the carried state reproduces the whole-sequence outputs.
pub fn ssm_scan_discrete(
    xs: &[f64],
    disc: &Discretized,
    c: &[f64],
    mut state: HiddenState,
    indexing: Indexing,
) -> Result<(Vec<f64>, HiddenState)> {
    let n = disc.b_bar.len();
    if state.h.len() != n || c.len() != n {
        return Err(Error::Shape(format!(
            "state length {} / C length {} vs N = {n}",
            state.h.len(),
            c.len()
        )));
    }
    if !state.h.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("initial state is not finite".into()));
    }
    let mut ys = Vec::with_capacity(xs.len());
    let mut next = vec![0.0; n];
    for &x in xs {
        if indexing == Indexing::Delayed {
            ys.push(crate::tensor::dot(c, &state.h));
        }
        for (i, nx) in next.iter_mut().enumerate() {
            *nx = crate::tensor::dot(disc.a_bar.row(i), &state.h) + disc.b_bar[i] * x;
        }
        std::mem::swap(&mut state.h, &mut next);
        if indexing == Indexing::Current {
            ys.push(crate::tensor::dot(c, &state.h));
        }
        state.t += 1;
    }
    Ok((ys, state))
}

/// Discretises `params` and scans `xs`.
pub fn ssm_scan(xs: &[f64], params: &SsmParams, state: HiddenState, indexing: Indexing) -> Result<(Vec<f64>, HiddenState)> {
    if !xs.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("input sequence is not finite".into()));
    }
    let disc = discretize(params)?;
    ssm_scan_discrete(xs, &disc, &params.c, state, indexing)
}

/// Convolution kernel `K[i] = C A_bar^i B_bar` of a time-invariant system.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelForm {
    pub kbar: Vec<f64>,
}

impl KernelForm {
    pub fn from_discrete(disc: &Discretized, c: &[f64], len: usize) -> Self {
        let n = disc.b_bar.len();
        let mut v = disc.b_bar.clone();
        let mut kbar = Vec::with_capacity(len);
        let mut next = vec![0.0; n];
        for _ in 0..len {
            kbar.push(crate::tensor::dot(c, &v));
            for (i, nx) in next.iter_mut().enumerate() {
                *nx = crate::tensor::dot(disc.a_bar.row(i), &v);
            }
            std::mem::swap(&mut v, &mut next);
        }
        Self { kbar }
    }

    pub fn from_params(params: &SsmParams, len: usize) -> Result<Self> {
        let disc = discretize(params)?;
        Ok(Self::from_discrete(&disc, &params.c, len))
    }
}

/// Causal convolution `y_t = sum_{i <= t} K[i] x_{t-i}`.
pub fn ssm_kernel_apply(xs: &[f64], kernel: &KernelForm) -> Result<Vec<f64>> {
    if kernel.kbar.len() != xs.len() {
        return Err(Error::Shape(format!(
            "kernel length {} vs sequence length {}",
            kernel.kbar.len(),
            xs.len()
        )));
    }
    Ok((0..xs.len())
        .map(|t| (0..=t).map(|i| kernel.kbar[i] * xs[t - i]).sum())
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MambaBlockConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub expansion: usize,
    /// Use the delayed-output recurrence instead of the current-input one.
    #[serde(default)]
    pub eq1_literal: bool,
}

impl MambaBlockConfig {
    pub fn new(model_dim: usize, state_dim: usize) -> Self {
        Self {
            model_dim,
            state_dim,
            conv_width: 4,
            expansion: 2,
            eq1_literal: false,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.model_dim * self.expansion
    }

    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.state_dim == 0 || self.expansion == 0 {
            return Err(Error::Config("mamba dims must be >= 1".into()));
        }
        if self.conv_width == 0 {
            return Err(Error::Config("conv_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Residual selective-SSM block:
/// `x + out_proj(scan(silu(conv(in_x))) * silu(z))` on an RMS-normalised input.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    norm: RmsNorm,
    in_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: ParamId,
    d_skip: ParamId,
    pub out_proj: Linear,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MambaBlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, di, n, r) = (cfg.model_dim, cfg.inner_dim(), cfg.state_dim, cfg.dt_rank());
        let norm = RmsNorm::new(store, &format!("{name}.norm"), d);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, 2 * di, false, rng);
        let conv_w = store.add(
            format!("{name}.conv.w"),
            init_uniform(rng, cfg.conv_width, di, cfg.conv_width, 1.0),
        );
        let conv_b = store.add(format!("{name}.conv.b"), Mat::zeros(1, di));
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), di, r + 2 * n, false, rng);
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), r, di, true, rng);
        // dt initialised log-uniform in [1e-3, 1e-1] through inverse softplus
        let bias = store.value_mut(dt_proj.b.expect("dt_proj has bias"));
        for v in bias.data_mut() {
            let u: f64 = rng.random();
            let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
            *v = dt + (-(-dt).exp_m1()).ln();
        }
        let mut a_log = Mat::zeros(di, n);
        for row in 0..di {
            for j in 0..n {
                a_log.set(row, j, ((j + 1) as f64).ln());
            }
        }
        let a_log = store.add(format!("{name}.a_log"), a_log);
        let d_skip = store.add(format!("{name}.d_skip"), Mat::filled(1, di, 1.0));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, d, false, rng);
        Ok(Self {
            cfg,
            norm,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            out_proj,
        })
    }

    /// Continuous poles `A = -exp(a_log)`, `inner_dim x state_dim`.
    pub fn poles(&self, store: &ParamStore) -> Mat {
        store.value(self.a_log).map(|v| -v.exp())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let (di, n, r) = (self.cfg.inner_dim(), self.cfg.state_dim, self.cfg.dt_rank());
        let h = self.norm.forward(tape, store, x);
        let xz = self.in_proj.forward(tape, store, h);
        let xi = tape.slice_cols(xz, 0, di);
        let z = tape.slice_cols(xz, di, di);
        let cw = tape.param(store, self.conv_w);
        let cb = tape.param(store, self.conv_b);
        let conv = tape.causal_conv(xi, cw);
        let conv = tape.add(conv, cb);
        let u = tape.silu(conv);
        let proj = self.x_proj.forward(tape, store, u);
        let dt_low = tape.slice_cols(proj, 0, r);
        let bm = tape.slice_cols(proj, r, n);
        let cm = tape.slice_cols(proj, r + n, n);
        let dt = self.dt_proj.forward(tape, store, dt_low);
        let delta = tape.softplus(dt);
        let a_log = tape.param(store, self.a_log);
        let a_exp = tape.exp(a_log);
        let a = tape.scale(a_exp, -1.0);
        let y = tape.selective_scan(u, delta, a, bm, cm, self.cfg.eq1_literal);
        let dsk = tape.param(store, self.d_skip);
        let skip = tape.mul(u, dsk);
        let y = tape.add(y, skip);
        let gate = tape.silu(z);
        let y = tape.mul(y, gate);
        let out = self.out_proj.forward(tape, store, y);
        tape.add(x, out)
    }
}

/// Runs one block over a `T x D` feature sequence.
pub fn mamba_block_forward(xs: &Mat, block: &MambaBlock, store: &ParamStore) -> Result<Mat> {
    if xs.cols() != block.cfg.model_dim {
        return Err(Error::Shape(format!(
            "input width {} vs model_dim {}",
            xs.cols(),
            block.cfg.model_dim
        )));
    }
    if !xs.is_finite() {
        return Err(Error::InvalidInput("non-finite input features".into()));
    }
    if !store.all_finite() {
        return Err(Error::InvalidInput("non-finite weights".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(xs.clone());
    let y = block.forward(&mut tape, store, x);
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;

    fn scalar(a: f64, b: f64, c: f64, delta: f64) -> SsmParams {
        SsmParams {
            a: Mat::scalar(a),
            b: vec![b],
            c: vec![c],
            delta,
        }
    }

    #[test]
    fn zero_timescale_limit() {
        let p = SsmParams {
            a: Mat::from_vec(2, 2, vec![-1.0, 0.3, 0.0, -2.0]),
            b: vec![1.0, 2.0],
            c: vec![1.0, 1.0],
            delta: 0.0,
        };
        let d = discretize(&p).unwrap();
        assert_eq!(d.a_bar, Mat::identity(2));
        assert_eq!(d.b_bar, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_transition_limit() {
        let p = SsmParams {
            a: Mat::zeros(2, 2),
            b: vec![0.5, -1.5],
            c: vec![1.0, 1.0],
            delta: 0.3,
        };
        let d = discretize(&p).unwrap();
        assert_eq!(d.a_bar, Mat::identity(2));
        for (got, want) in d.b_bar.iter().zip([0.15, -0.45]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_half_decay() {
        let d = discretize(&scalar(-1.0, 1.0, 1.0, std::f64::consts::LN_2)).unwrap();
        assert!((d.a_bar.get(0, 0) - 0.5).abs() < 1e-14);
        // (exp(-ln2) - 1) / -1 = 0.5
        assert!((d.b_bar[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_delta() {
        for bad in [-0.1, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                discretize(&scalar(-1.0, 1.0, 1.0, bad)),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn impulse_response_hand_unrolled() {
        let (a, b, c) = (0.7, 1.3, -0.4);
        let disc = Discretized {
            a_bar: Mat::scalar(a),
            b_bar: vec![b],
        };
        let (ys, st) = ssm_scan_discrete(&[1.0, 0.0, 0.0], &disc, &[c], HiddenState::zeros(1), Indexing::Current).unwrap();
        let want = [c * b, c * a * b, c * a * a * b];
        for (y, w) in ys.iter().zip(want) {
            assert!((y - w).abs() < 1e-15);
        }
        assert_eq!(st.t, 3);
        // delayed indexing shifts the response by one frame
        let (ys, _) = ssm_scan_discrete(&[1.0, 0.0, 0.0], &disc, &[c], HiddenState::zeros(1), Indexing::Delayed).unwrap();
        assert_eq!(ys[0], 0.0);
        assert!((ys[1] - c * b).abs() < 1e-15);
    }

    #[test]
    fn empty_input_keeps_state() {
        let st = HiddenState { h: vec![0.25], t: 4 };
        let (ys, out) = ssm_scan(&[], &scalar(-1.0, 1.0, 1.0, 0.1), st.clone(), Indexing::Current).unwrap();
        assert!(ys.is_empty());
        assert_eq!(out, st);
    }

    #[test]
    fn kernel_identity_and_impulse() {
        let xs = [0.3, -1.0, 2.0, 0.5];
        let id = KernelForm {
            kbar: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(ssm_kernel_apply(&xs, &id).unwrap(), xs.to_vec());
        let k = KernelForm {
            kbar: vec![0.5, 0.25, -1.0, 2.0],
        };
        assert_eq!(ssm_kernel_apply(&[1.0, 0.0, 0.0, 0.0], &k).unwrap(), k.kbar);
        assert!(matches!(ssm_kernel_apply(&xs[..3], &k), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_entries_match_definition() {
        let p = scalar(-0.5, 2.0, 3.0, 0.2);
        let d = discretize(&p).unwrap();
        let k = KernelForm::from_params(&p, 4).unwrap();
        for (i, v) in k.kbar.iter().enumerate() {
            let want = 3.0 * d.a_bar.get(0, 0).powi(i as i32) * d.b_bar[0];
            assert!((v - want).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_stability() {
        let n = 5;
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            a.set(i, i, -((i + 1) as f64));
        }
        let d = discretize(&SsmParams {
            a,
            b: vec![1.0; n],
            c: vec![1.0; n],
            delta: 0.37,
        })
        .unwrap();
        for i in 0..n {
            assert!(d.a_bar.get(i, i).abs() < 1.0);
        }
    }

    #[test]
    fn zeroed_output_projection_is_identity() {
        let mut rng = rng_for(3, 0);
        let mut store = ParamStore::new();
        let block = MambaBlock::new(&mut store, "blk", MambaBlockConfig::new(6, 4), &mut rng).unwrap();
        let w = block.out_proj.w;
        store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let xs = crate::nn::init_uniform(&mut rng, 9, 6, 1, 1.0);
        assert_eq!(mamba_block_forward(&xs, &block, &store).unwrap(), xs);
    }

    #[test]
    fn mamba_rejects_nan() {
        let mut rng = rng_for(3, 0);
        let mut store = ParamStore::new();
        let block = MambaBlock::new(&mut store, "blk", MambaBlockConfig::new(4, 2), &mut rng).unwrap();
        let mut xs = Mat::zeros(3, 4);
        xs.set(1, 2, f64::NAN);
        assert!(matches!(mamba_block_forward(&xs, &block, &store), Err(Error::InvalidInput(_))));
    }
}

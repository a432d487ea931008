//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Sequence-shaped
//! kernels that would be slow or memory hungry as chains of primitive nodes
//! (the selective scan, the causal depthwise convolution, masked attention,
//! point 4D aggregation) are single fused nodes with hand-written adjoints.
//!
//! All kernels are row-local or explicitly causal: a NaN in row `t` of an
//! input can only reach rows that are allowed to depend on it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{dot, Mat};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Members of one temporal offset of a point-4D neighbourhood: source row and
/// the displacement `(dx, dy, dz, dt)` from the anchor.
#[derive(Clone, Debug, Default)]
pub struct OffsetGroup {
    pub members: Vec<(usize, [f64; 4])>,
}

/// One anchor's neighbourhood, grouped by temporal offset.
pub type Hood = Vec<OffsetGroup>;

/// Per output row, `(source row, weight)` pairs.
pub type MixRows = Vec<Vec<(usize, f64)>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SumAll(Var),
    Mse(Var, Arc<Mat>),
    CrossEntropy(Var, Arc<Vec<usize>>, Mat),
    RmsNorm(Var, Vec<f64>),
    LayerNorm(Var, Vec<f64>),
    CausalConv(Var, Var),
    Scan(Box<ScanSaved>),
    Attention(Box<AttnSaved>),
    SparseMix(Var, Arc<MixRows>),
    GroupMax(Var, Vec<Vec<Option<usize>>>),
    P4d(Var, Var, Arc<Vec<Hood>>, Vec<Vec<Vec<usize>>>),
}

#[derive(Clone, Debug)]
struct ScanSaved {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    literal: bool,
    /// Hidden states after each step, `T` blocks of `Di x N`.
    hs: Vec<f64>,
}

#[derive(Clone, Debug)]
struct AttnSaved {
    q: Var,
    k: Var,
    v: Var,
    allowed: Arc<Vec<Vec<usize>>>,
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `expm1(dt * a) / a`, the zero-order-hold input gain for a scalar pole `a`,
/// with its partial derivatives in `dt` and `a`.
#[inline]
pub(crate) fn zoh_gain(dt: f64, a: f64) -> (f64, f64, f64) {
    let z = dt * a;
    if z.abs() < 1e-5 {
        // series in z: dt * (1 + z/2 + z^2/6)
        let g = dt * (1.0 + z / 2.0 + z * z / 6.0);
        let d_dt = 1.0 + z + z * z / 2.0;
        let d_a = dt * dt * (0.5 + z / 3.0);
        (g, d_dt, d_a)
    } else {
        let e = z.exp();
        let g = (e - 1.0) / a;
        let d_dt = e;
        let d_a = (z * e - (e - 1.0)) / (a * a);
        (g, d_dt, d_a)
    }
}

fn broadcast_ok(a: &Mat, b: &Mat) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols())
}

/// Elementwise binary op with `b` either same-shaped or a `1 x cols` row.
fn broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert!(
        broadcast_ok(a, b),
        "broadcast shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Mat::zeros(a.rows(), a.cols());
    let row_b = b.rows() == 1 && a.rows() != 1;
    for r in 0..a.rows() {
        let br = if row_b { b.row(0) } else { b.row(r) };
        for ((o, &x), &y) in out.row_mut(r).iter_mut().zip(a.row(r)).zip(br) {
            *o = f(x, y);
        }
    }
    out
}

/// Reduces a gradient to the shape of a broadcast operand.
fn unbroadcast(g: Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g;
    }
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant or input.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Records a parameter once per tape; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// Parameters that were recorded on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise maximum of two same-shaped values.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "maximum shape mismatch");
        let v = self.value(a).zip_map(self.value(b), f64::max);
        self.push(v, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, n: usize) -> Var {
        let av = self.value(a);
        assert!(start + n <= av.cols());
        let mut out = Mat::zeros(av.rows(), n);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + n]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let v = self.value(a).slice_rows(start, n);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Mean squared error against a constant target, as a `1 x 1` value.
    pub fn mse(&mut self, a: Var, target: Arc<Mat>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse shape mismatch");
        let n = av.len().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Mat::scalar(s / n), Op::Mse(a, target))
    }

    /// Mean over rows of softmax cross-entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "cross_entropy label count mismatch");
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - m).exp() / z;
            }
            loss -= row[labels[r]] - m - z.ln();
        }
        loss /= lv.rows().max(1) as f64;
        self.push(Mat::scalar(loss), Op::CrossEntropy(logits, labels, probs))
    }

    /// Row-wise RMS normalisation without gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let c = av.cols() as f64;
        let mut out = av.clone();
        let mut inv = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let ms = av.row(r).iter().map(|x| x * x).sum::<f64>() / c;
            let s = 1.0 / (ms + eps).sqrt();
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
            inv.push(s);
        }
        self.push(out, Op::RmsNorm(a, inv))
    }

    /// Row-wise layer normalisation without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let c = av.cols() as f64;
        let mut out = av.clone();
        let mut inv = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = av.row(r);
            let mu = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c;
            let s = 1.0 / (var + eps).sqrt();
            out.row_mut(r).iter_mut().for_each(|x| *x = (*x - mu) * s);
            inv.push(s);
        }
        self.push(out, Op::LayerNorm(a, inv))
    }

    /// Depthwise causal convolution over rows: `x` is `T x C`, `w` is `K x C`,
    /// and `y[t] = sum_k w[k] * x[t - (K - 1) + k]` with zero padding before
    /// the first row.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.cols(), "causal_conv channel mismatch");
        let (t_len, ch) = xv.shape();
        let k = wv.rows();
        let mut out = Mat::zeros(t_len, ch);
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(j);
                for ((o, &xi), &wi) in out.row_mut(t).iter_mut().zip(xr).zip(wr) {
                    *o += wi * xi;
                }
            }
        }
        self.push(out, Op::CausalConv(x, w))
    }

    /// Diagonal selective scan with zero-order-hold discretisation.
    ///
    /// `u`, `delta`: `T x Di`; `a`: `Di x N` (continuous poles); `b`, `c`:
    /// `T x N`. With `h_{-1} = 0` the recurrence is
    /// `h_t = exp(delta_t a) h_{t-1} + zoh(delta_t, a) b_t u_t` and the output
    /// is `y_t = c_t . h_t`, or `y_t = c_t . h_{t-1}` when `literal` is set.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, literal: bool) -> Var {
        let (uv, dv, av, bv, cv) = (
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let (t_len, di) = uv.shape();
        let n = av.cols();
        assert_eq!(dv.shape(), (t_len, di), "scan delta shape");
        assert_eq!(av.rows(), di, "scan A rows");
        assert_eq!(bv.shape(), (t_len, n), "scan B shape");
        assert_eq!(cv.shape(), (t_len, n), "scan C shape");
        let mut h = vec![0.0; di * n];
        let mut hs = Vec::with_capacity(t_len * di * n);
        let mut out = Mat::zeros(t_len, di);
        for t in 0..t_len {
            let (ur, dr, br, cr) = (uv.row(t), dv.row(t), bv.row(t), cv.row(t));
            for d in 0..di {
                let hd = &mut h[d * n..(d + 1) * n];
                let ar = av.row(d);
                let mut y = 0.0;
                for j in 0..n {
                    if literal {
                        y += cr[j] * hd[j];
                    }
                    let decay = (dr[d] * ar[j]).exp();
                    let (g, _, _) = zoh_gain(dr[d], ar[j]);
                    hd[j] = decay * hd[j] + g * br[j] * ur[d];
                    if !literal {
                        y += cr[j] * hd[j];
                    }
                }
                out.set(t, d, y);
            }
            hs.extend_from_slice(&h);
        }
        self.push(
            out,
            Op::Scan(Box::new(ScanSaved {
                u,
                delta,
                a,
                b,
                c,
                literal,
                hs,
            })),
        )
    }

    /// Scaled dot-product attention where query `i` attends only to the key
    /// rows listed in `allowed[i]`. Keys outside the list are never read.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, allowed: Arc<Vec<Vec<usize>>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols(), kv.cols(), "attention q/k width");
        assert_eq!(kv.rows(), vv.rows(), "attention k/v rows");
        assert_eq!(allowed.len(), qv.rows(), "attention mask rows");
        let scale = 1.0 / (qv.cols() as f64).sqrt();
        let mut out = Mat::zeros(qv.rows(), vv.cols());
        let mut probs = Vec::with_capacity(qv.rows());
        for (i, keys) in allowed.iter().enumerate() {
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| dot(qv.row(i), kv.row(j)) * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / z).collect();
            let orow = out.row_mut(i);
            for (&j, &pj) in keys.iter().zip(&p) {
                for (o, x) in orow.iter_mut().zip(vv.row(j)) {
                    *o += pj * x;
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention(Box::new(AttnSaved {
                q,
                k,
                v,
                allowed,
                probs,
            })),
        )
    }

    /// `out[i] = sum_j w_ij x[j]` over the listed `(j, w_ij)` pairs.
    pub fn sparse_mix(&mut self, x: Var, rows: Arc<MixRows>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols());
        for (i, srcs) in rows.iter().enumerate() {
            for &(j, w) in srcs {
                for (o, v) in out.row_mut(i).iter_mut().zip(xv.row(j)) {
                    *o += w * v;
                }
            }
        }
        self.push(out, Op::SparseMix(x, rows))
    }

    /// Column-wise max over each group of rows. Empty groups give zeros.
    pub fn group_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Mat::zeros(groups.len(), c);
        let mut arg = Vec::with_capacity(groups.len());
        for (g, rows) in groups.iter().enumerate() {
            let mut best: Vec<Option<usize>> = vec![None; c];
            for &r in rows {
                for (col, b) in best.iter_mut().enumerate() {
                    let v = xv.get(r, col);
                    match b {
                        Some(br) if xv.get(*br, col) >= v => {}
                        _ => *b = Some(r),
                    }
                }
            }
            for (col, b) in best.iter().enumerate() {
                if let Some(r) = b {
                    out.set(g, col, xv.get(*r, col));
                }
            }
            arg.push(best);
        }
        self.push(out, Op::GroupMax(x, arg))
    }

    /// Point 4D aggregation: for anchor `a`,
    /// `out[a] = sum_groups max_{j in group} (W_d * delta_j + g_j)` with the
    /// max taken per channel. `g` is `n x C'` (already projected features),
    /// `wd` is `C' x 4`. Empty groups contribute zero.
    pub fn p4d_aggregate(&mut self, g: Var, wd: Var, hoods: Arc<Vec<Hood>>) -> Var {
        let (gv, wv) = (self.value(g), self.value(wd));
        let c = gv.cols();
        assert_eq!(wv.shape(), (c, 4), "p4d W_d shape");
        let mut out = Mat::zeros(hoods.len(), c);
        let mut arg = Vec::with_capacity(hoods.len());
        let mut cand = vec![0.0; c];
        for (a, hood) in hoods.iter().enumerate() {
            let mut per_group = Vec::with_capacity(hood.len());
            for group in hood {
                if group.members.is_empty() {
                    per_group.push(Vec::new());
                    continue;
                }
                let mut best_v = vec![f64::NEG_INFINITY; c];
                let mut best_i = vec![0usize; c];
                for (m, (j, d)) in group.members.iter().enumerate() {
                    for (ch, cv) in cand.iter_mut().enumerate() {
                        let w = wv.row(ch);
                        *cv = w[0] * d[0] + w[1] * d[1] + w[2] * d[2] + w[3] * d[3] + gv.get(*j, ch);
                    }
                    for ch in 0..c {
                        if m == 0 || cand[ch] > best_v[ch] {
                            best_v[ch] = cand[ch];
                            best_i[ch] = m;
                        }
                    }
                }
                for (o, v) in out.row_mut(a).iter_mut().zip(&best_v) {
                    *o += v;
                }
                per_group.push(best_i);
            }
            arg.push(per_group);
        }
        self.push(out, Op::P4d(g, wd, hoods, arg))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        self.backward_with(out, Mat::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary adjoint for `out`.
    pub fn backward_with(&self, out: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Mat>], v: Var, d: Mat| match &mut grads[v.0] {
            Some(e) => e.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_t(val(*b)));
                acc(grads, *b, val(*a).t_matmul(g));
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, unbroadcast(g.clone(), val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, unbroadcast(g.scale(-1.0), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, broadcast(g, bv, |x, y| x * y));
                let gb = g.zip_map(av, |x, y| x * y);
                acc(grads, *b, unbroadcast(gb, bv.shape()));
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for k in 0..g.len() {
                    if av.data()[k] >= bv.data()[k] {
                        gb.data_mut()[k] = 0.0;
                    } else {
                        ga.data_mut()[k] = 0.0;
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y));
                acc(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * (s + x * s * (1.0 - s))
                });
                acc(grads, *a, d);
            }
            Op::Softplus(a) => acc(grads, *a, g.zip_map(val(*a), |gy, x| gy * sigmoid(x))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |gy, y| gy * y)),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |gy, x| if x > 0.0 { gy } else { 0.0 }),
            ),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y))),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Mat::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(grads, p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    acc(grads, p, g.slice_rows(off, h));
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Mat::filled(r, c, g.get(0, 0)));
            }
            Op::Mse(a, target) => {
                let av = val(*a);
                let k = 2.0 * g.get(0, 0) / av.len().max(1) as f64;
                acc(grads, *a, av.zip_map(target, |x, y| k * (x - y)));
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let k = g.get(0, 0) / probs.rows().max(1) as f64;
                let mut d = probs.scale(k);
                for (r, &l) in labels.iter().enumerate() {
                    let v = d.get(r, l);
                    d.set(r, l, v - k);
                }
                acc(grads, *logits, d);
            }
            Op::RmsNorm(a, inv) => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for (r, &ir) in inv.iter().enumerate() {
                    let proj = dot(g.row(r), y.row(r)) / c;
                    for ((o, gy), yy) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = ir * (gy - yy * proj);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for (r, &ir) in inv.iter().enumerate() {
                    let mg = g.row(r).iter().sum::<f64>() / c;
                    let mgy = dot(g.row(r), y.row(r)) / c;
                    for ((o, gy), yy) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = ir * (gy - mg - yy * mgy);
                    }
                }
                acc(grads, *a, d);
            }
            Op::CausalConv(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (t_len, ch) = xv.shape();
                let k = wv.rows();
                let mut dx = Mat::zeros(t_len, ch);
                let mut dw = Mat::zeros(k, ch);
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src < 0 {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..ch {
                            let gy = g.get(t, c);
                            dx.data_mut()[src * ch + c] += gy * wv.get(j, c);
                            dw.data_mut()[j * ch + c] += gy * xv.get(src, c);
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Op::Scan(s) => self.scan_backward(s, g, grads),
            Op::Attention(s) => {
                let (qv, kv, vv) = (val(s.q), val(s.k), val(s.v));
                let scale = 1.0 / (qv.cols() as f64).sqrt();
                let mut dq = Mat::zeros(qv.rows(), qv.cols());
                let mut dk = Mat::zeros(kv.rows(), kv.cols());
                let mut dv = Mat::zeros(vv.rows(), vv.cols());
                for (i, keys) in s.allowed.iter().enumerate() {
                    let p = &s.probs[i];
                    let go = g.row(i);
                    let dp: Vec<f64> = keys.iter().map(|&j| dot(go, vv.row(j))).collect();
                    let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (n, &j) in keys.iter().enumerate() {
                        for (o, x) in dv.row_mut(j).iter_mut().zip(go) {
                            *o += p[n] * x;
                        }
                        let ds = p[n] * (dp[n] - mean) * scale;
                        for (o, x) in dq.row_mut(i).iter_mut().zip(kv.row(j)) {
                            *o += ds * x;
                        }
                        for (o, x) in dk.row_mut(j).iter_mut().zip(qv.row(i)) {
                            *o += ds * x;
                        }
                    }
                }
                acc(grads, s.q, dq);
                acc(grads, s.k, dk);
                acc(grads, s.v, dv);
            }
            Op::SparseMix(x, rows) => {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                for (i, srcs) in rows.iter().enumerate() {
                    for &(j, w) in srcs {
                        for (o, gy) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += w * gy;
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::GroupMax(x, arg) => {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                for (gi, best) in arg.iter().enumerate() {
                    for (col, b) in best.iter().enumerate() {
                        if let Some(r) = b {
                            d.data_mut()[r * xv.cols() + col] += g.get(gi, col);
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::P4d(gvar, wd, hoods, arg) => {
                let gv = val(*gvar);
                let c = gv.cols();
                let mut dg = Mat::zeros(gv.rows(), c);
                let mut dw = Mat::zeros(c, 4);
                for (a, hood) in hoods.iter().enumerate() {
                    for (group, best) in hood.iter().zip(&arg[a]) {
                        for (ch, &m) in best.iter().enumerate() {
                            let gy = g.get(a, ch);
                            let (j, d) = &group.members[m];
                            dg.data_mut()[j * c + ch] += gy;
                            for (k, dk) in d.iter().enumerate() {
                                dw.data_mut()[ch * 4 + k] += gy * dk;
                            }
                        }
                    }
                }
                acc(grads, *gvar, dg);
                acc(grads, *wd, dw);
            }
        }
    }

    fn scan_backward(&self, s: &ScanSaved, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (uv, dv, av, bv, cv) = (val(s.u), val(s.delta), val(s.a), val(s.b), val(s.c));
        let (t_len, di) = uv.shape();
        let n = av.cols();
        let blk = di * n;
        let mut du = Mat::zeros(t_len, di);
        let mut dd = Mat::zeros(t_len, di);
        let mut da = Mat::zeros(di, n);
        let mut db = Mat::zeros(t_len, n);
        let mut dc = Mat::zeros(t_len, n);
        // adjoint of the hidden state, carried backwards in time
        let mut gh = vec![0.0; blk];
        let zero = vec![0.0; blk];
        for t in (0..t_len).rev() {
            let h_t = &s.hs[t * blk..(t + 1) * blk];
            let h_prev: &[f64] = if t == 0 {
                &zero
            } else {
                &s.hs[(t - 1) * blk..t * blk]
            };
            let gy = g.row(t);
            if !s.literal {
                for d in 0..di {
                    for j in 0..n {
                        gh[d * n + j] += gy[d] * cv.get(t, j);
                        dc.data_mut()[t * n + j] += gy[d] * h_t[d * n + j];
                    }
                }
            }
            let (ur, dr, br) = (uv.row(t), dv.row(t), bv.row(t));
            for d in 0..di {
                let ar = av.row(d);
                let mut d_delta = 0.0;
                let mut d_u = 0.0;
                for j in 0..n {
                    let idx = d * n + j;
                    let gj = gh[idx];
                    let decay = (dr[d] * ar[j]).exp();
                    let (gain, gain_dt, gain_da) = zoh_gain(dr[d], ar[j]);
                    let hp = h_prev[idx];
                    d_delta += gj * (ar[j] * decay * hp + gain_dt * br[j] * ur[d]);
                    da.data_mut()[idx] += gj * (dr[d] * decay * hp + gain_da * br[j] * ur[d]);
                    db.data_mut()[t * n + j] += gj * gain * ur[d];
                    d_u += gj * gain * br[j];
                    gh[idx] = gj * decay;
                }
                dd.data_mut()[t * di + d] += d_delta;
                du.data_mut()[t * di + d] += d_u;
            }
            if s.literal {
                for d in 0..di {
                    for j in 0..n {
                        gh[d * n + j] += gy[d] * cv.get(t, j);
                        dc.data_mut()[t * n + j] += gy[d] * h_prev[d * n + j];
                    }
                }
            }
        }
        let acc = |grads: &mut [Option<Mat>], v: Var, d: Mat| match &mut grads[v.0] {
            Some(e) => e.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        acc(grads, s.u, du);
        acc(grads, s.delta, dd);
        acc(grads, s.a, da);
        acc(grads, s.b, db);
        acc(grads, s.c, dc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d sum(w . f(x)) / dx` for one input.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let (r, c) = tape.shape(y);
        let w = Mat::from_vec(r, c, (0..r * c).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect());
        let grads = tape.backward_with(y, w.clone());
        let analytic = grads.get(x).cloned().unwrap_or(Mat::zeros(x0.rows(), x0.cols()));
        let eps = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[k] += delta;
                let mut t = Tape::new();
                let xv = t.leaf(xp);
                let yv = build(&mut t, xv);
                crate::tensor::dot(t.value(yv).data(), w.data())
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = analytic.data()[k];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry {k}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn seq(r: usize, c: usize, seed: u64) -> Mat {
        let mut s = seed;
        Mat::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect(),
        )
    }

    #[test]
    fn elementwise_adjoints() {
        check(|t, x| t.silu(x), seq(3, 4, 1));
        check(|t, x| t.softplus(x), seq(3, 4, 2));
        check(|t, x| t.tanh(x), seq(3, 4, 3));
        check(|t, x| t.sigmoid(x), seq(3, 4, 4));
        check(|t, x| t.rms_norm(x, 1e-5), seq(3, 4, 5));
        check(|t, x| t.layer_norm(x, 1e-5), seq(3, 4, 6));
    }

    #[test]
    fn broadcast_and_matmul_adjoints() {
        let w = seq(4, 2, 9);
        check(
            move |t, x| {
                let wv = t.leaf(w.clone());
                t.matmul(x, wv)
            },
            seq(3, 4, 7),
        );
        let bias = seq(1, 4, 10);
        check(
            move |t, x| {
                let b = t.leaf(bias.clone());
                let m = t.mul(x, b);
                t.add(m, b)
            },
            seq(3, 4, 8),
        );
        // row-broadcast operand as the differentiated input
        let base = seq(5, 4, 11);
        check(
            move |t, b| {
                let x = t.leaf(base.clone());
                let m = t.mul(x, b);
                t.sub(m, b)
            },
            seq(1, 4, 12),
        );
    }

    #[test]
    fn causal_conv_adjoint_and_causality() {
        let w = seq(3, 4, 13);
        check(
            move |t, x| {
                let wv = t.leaf(w.clone());
                t.causal_conv(x, wv)
            },
            seq(6, 4, 14),
        );
        let mut tape = Tape::new();
        let mut x = seq(6, 2, 15);
        x.set(4, 1, f64::NAN);
        let xv = tape.leaf(x);
        let wv = tape.leaf(seq(3, 2, 16));
        let y = tape.causal_conv(xv, wv);
        for t in 0..4 {
            assert!(tape.value(y).row_is_finite(t));
        }
    }

    #[test]
    fn scan_adjoints() {
        for literal in [false, true] {
            let (t_len, di, n) = (5, 3, 2);
            let delta = seq(t_len, di, 20).map(|v| 0.2 + 0.5 * v.abs());
            let a = seq(di, n, 21).map(|v| -0.5 - v.abs());
            let b = seq(t_len, n, 22);
            let c = seq(t_len, n, 23);
            let u = seq(t_len, di, 24);
            let (d2, a2, b2, c2) = (delta.clone(), a.clone(), b.clone(), c.clone());
            check(
                move |t, x| {
                    let (dv, av, bv, cv) = (
                        t.leaf(d2.clone()),
                        t.leaf(a2.clone()),
                        t.leaf(b2.clone()),
                        t.leaf(c2.clone()),
                    );
                    t.selective_scan(x, dv, av, bv, cv, literal)
                },
                u.clone(),
            );
            let (u2, a2, b2, c2) = (u.clone(), a.clone(), b.clone(), c.clone());
            check(
                move |t, x| {
                    let (uv, av, bv, cv) = (
                        t.leaf(u2.clone()),
                        t.leaf(a2.clone()),
                        t.leaf(b2.clone()),
                        t.leaf(c2.clone()),
                    );
                    t.selective_scan(uv, x, av, bv, cv, literal)
                },
                delta.clone(),
            );
            let (u2, d2, b2, c2) = (u.clone(), delta.clone(), b.clone(), c.clone());
            check(
                move |t, x| {
                    let (uv, dv, bv, cv) = (
                        t.leaf(u2.clone()),
                        t.leaf(d2.clone()),
                        t.leaf(b2.clone()),
                        t.leaf(c2.clone()),
                    );
                    t.selective_scan(uv, dv, x, bv, cv, literal)
                },
                a.clone(),
            );
            let (u2, d2, a2, c2) = (u.clone(), delta.clone(), a.clone(), c.clone());
            check(
                move |t, x| {
                    let (uv, dv, av, cv) = (
                        t.leaf(u2.clone()),
                        t.leaf(d2.clone()),
                        t.leaf(a2.clone()),
                        t.leaf(c2.clone()),
                    );
                    t.selective_scan(uv, dv, av, x, cv, literal)
                },
                b.clone(),
            );
            let (u2, d2, a2, b2) = (u.clone(), delta.clone(), a.clone(), b.clone());
            check(
                move |t, x| {
                    let (uv, dv, av, bv) = (
                        t.leaf(u2.clone()),
                        t.leaf(d2.clone()),
                        t.leaf(a2.clone()),
                        t.leaf(b2.clone()),
                    );
                    t.selective_scan(uv, dv, av, bv, x, literal)
                },
                c.clone(),
            );
        }
    }

    #[test]
    fn attention_adjoint_respects_mask() {
        let allowed = Arc::new(vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![1, 3]]);
        let k = seq(4, 3, 30);
        let v = seq(4, 2, 31);
        let (a2, k2, v2) = (allowed.clone(), k.clone(), v.clone());
        check(
            move |t, q| {
                let (kv, vv) = (t.leaf(k2.clone()), t.leaf(v2.clone()));
                t.attention(q, kv, vv, a2.clone())
            },
            seq(4, 3, 32),
        );
        let q = seq(4, 3, 33);
        let (a2, q2, v2) = (allowed.clone(), q.clone(), v.clone());
        check(
            move |t, kk| {
                let (qv, vv) = (t.leaf(q2.clone()), t.leaf(v2.clone()));
                t.attention(qv, kk, vv, a2.clone())
            },
            k.clone(),
        );
        let (a2, q2, k2) = (allowed.clone(), q.clone(), k.clone());
        check(
            move |t, vv| {
                let (qv, kv) = (t.leaf(q2.clone()), t.leaf(k2.clone()));
                t.attention(qv, kv, vv, a2.clone())
            },
            v,
        );
    }

    #[test]
    fn group_max_and_sparse_mix_adjoints() {
        let groups = vec![vec![0, 2], vec![1], vec![], vec![0, 1, 3]];
        check(move |t, x| t.group_max(x, &groups), seq(4, 3, 40));
        let rows = Arc::new(vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![]]);
        check(move |t, x| t.sparse_mix(x, rows.clone()), seq(3, 2, 41));
    }

    #[test]
    fn losses_are_consistent() {
        let target = Arc::new(seq(3, 2, 50));
        check(move |t, x| t.mse(x, target.clone()), seq(3, 2, 51));
        let labels = Arc::new(vec![0, 2, 1]);
        check(move |t, x| t.cross_entropy(x, labels.clone()), seq(3, 3, 52));
    }
}

//! Central finite-difference gradient oracle.

use hoi_core::autograd::{Tape, Var};
use hoi_core::nn::{GradBuffer, ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale: a
/// central difference with step `1e-5` cannot resolve much less than `1e-10`
/// in double precision, so relative errors of smaller entries are noise.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, a: f64, n: f64) {
        let e = rel_err(a, n);
        self.checked += 1;
        if e > self.max_rel || !e.is_finite() {
            self.max_rel = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = format!("{} analytic {a:.9e} numeric {n:.9e}", what());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// Compares tape gradients of the scalar `loss` with central differences
/// for every entry of the parameters in `ids`.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], loss: F) -> GradReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    check_params_with(store, ids, FD_STEP, loss)
}

pub fn check_params_with<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, loss: F) -> GradReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store);
    let grads = tape.backward(out);
    let mut buf = GradBuffer::new(store);
    buf.accumulate(&tape, &grads, 1.0);
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, store);
        t.value(v).get(0, 0)
    };
    let mut report = GradReport::default();
    for &id in ids {
        let n = store.value(id).len();
        let analytic = buf.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let fp = eval(store);
            store.value_mut(id).data_mut()[k] = orig - step;
            let fm = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let num = (fp - fm) / (2.0 * step);
            report.record(|| format!("{}[{k}]", store.name(id)), a, num);
        }
    }
    report
}

/// Every parameter of `store`.
pub fn all_params(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

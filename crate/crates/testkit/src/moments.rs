//! Monte-Carlo check of the forward noising process.

use hoi_core::diffusion::{gaussian, make_schedule, q_sample, q_step, DiffusionSchedule, ScheduleKind};
use hoi_core::nn::derive_rng;
use hoi_core::Mat;

#[derive(Clone, Debug)]
pub struct MomentReport {
    pub t: usize,
    /// Worst `|mean - sqrt(abar) x0| / sqrt(abar x0^2 + 1 - abar)` over dimensions.
    pub mean_err: f64,
    /// Relative error of the variance pooled over dimensions (every
    /// dimension shares the marginal variance `1 - abar`).
    pub var_err: f64,
}

/// Empirical per-dimension mean and variance of `draws` samples of the
/// stepwise chain run `t` times from `x0` (one row).
pub fn chain_moments(sched: &DiffusionSchedule, x0: &[f64], t: usize, draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let d = x0.len();
    let mut x = Mat::from_vec(draws, d, x0.iter().cycle().take(draws * d).copied().collect());
    let mut rng = derive_rng(seed, &[t as u64]);
    for s in 1..=t {
        let noise = gaussian(&mut rng, draws, d);
        x = q_step(&x, s, &noise, sched).expect("valid step");
    }
    column_moments(&x)
}

/// Same statistics for direct draws from the closed-form marginal.
pub fn marginal_moments(sched: &DiffusionSchedule, x0: &[f64], t: usize, draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let d = x0.len();
    let x = Mat::from_vec(draws, d, x0.iter().cycle().take(draws * d).copied().collect());
    let noise = gaussian(&mut derive_rng(seed, &[t as u64, 1]), draws, d);
    column_moments(&q_sample(&x, t, &noise, sched).expect("valid step"))
}

fn column_moments(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    (mean, var)
}

/// Errors of empirical moments against `(sqrt(abar) x0, 1 - abar)`.
pub fn moment_errors(sched: &DiffusionSchedule, x0: &[f64], t: usize, mean: &[f64], var: &[f64]) -> MomentReport {
    let ab = sched.alpha_bar(t);
    let s2 = 1.0 - ab;
    let mut mean_err: f64 = 0.0;
    for (x, m) in x0.iter().zip(mean) {
        let mu = ab.sqrt() * x;
        mean_err = mean_err.max((m - mu).abs() / (mu * mu + s2).sqrt());
    }
    let pooled = var.iter().sum::<f64>() / var.len() as f64;
    MomentReport {
        t,
        mean_err,
        var_err: (pooled - s2).abs() / s2,
    }
}

/// Chain and marginal moments at `t in {1, T/2, T}` for `T = steps`.
pub fn forward_process_check(steps: usize, draws: usize, seed: u64) -> Vec<(MomentReport, MomentReport)> {
    let sched = make_schedule(steps, ScheduleKind::linear_for(steps)).expect("valid schedule");
    let x0 = [1.5, -0.5, 0.8];
    [1, steps / 2, steps]
        .into_iter()
        .map(|t| {
            let (m, v) = chain_moments(&sched, &x0, t, draws, seed);
            let chain = moment_errors(&sched, &x0, t, &m, &v);
            let (m, v) = marginal_moments(&sched, &x0, t, draws, seed);
            (chain, moment_errors(&sched, &x0, t, &m, &v))
        })
        .collect()
}

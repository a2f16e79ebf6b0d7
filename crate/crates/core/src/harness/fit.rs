//! Fidelity-decay and power-law fits.
//!
//! Times in a [`FidelitySeries`] are in cycles; fitted rates are per step,
//! with [`STEPS_PER_CYCLE`] steps to a cycle recorded in every result.

use crate::error::{Error, Result};
use crate::sim::sample_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::circuit::STEPS_PER_CYCLE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    /// Cycles.
    pub t: f64,
    pub fidelity: f64,
    pub n_samples: usize,
    /// Bootstrap standard error of `fidelity`.
    pub err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelitySeries {
    pub points: Vec<FidelityPoint>,
}

impl FidelitySeries {
    /// Exact decay `½ + ½(1 − 2ε)^((t − t0)/t_step)` sampled at `cycles`.
    pub fn model(epsilon_step: f64, t0_steps: f64, cycles: &[f64], n_samples: usize) -> Self {
        let points = cycles
            .iter()
            .map(|&t| FidelityPoint { t, fidelity: decay(epsilon_step, t0_steps, t), n_samples, err: 0.0 })
            .collect();
        Self { points }
    }
}

/// Logical fidelity after `t_cycles` cycles.
pub fn decay(epsilon_step: f64, t0_steps: f64, t_cycles: f64) -> f64 {
    let steps = t_cycles * STEPS_PER_CYCLE as f64 - t0_steps;
    0.5 + 0.5 * (1.0 - 2.0 * epsilon_step).powf(steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Logical error rate per step.
    pub epsilon_l: f64,
    /// Offset in steps.
    pub t0: f64,
    pub fixed_t0: bool,
    pub steps_per_cycle: usize,
    /// Logical error rate per cycle, `1 − (1 − 2ε)^N0` over 2.
    pub epsilon_cycle: f64,
    /// 95% bootstrap interval on `epsilon_l`, when requested.
    pub ci: Option<(f64, f64)>,
    pub rss: f64,
    pub n_points: usize,
}

/// Minimizes `f` from `x0` with initial simplex offsets `step`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        let fx = f(&x);
        simplex.push((x, fx));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let size = simplex[1..].iter().map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        if (worst - best).abs() <= tol * (best.abs() + tol) && size <= tol.sqrt() {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let along = |coef: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + coef * (simplex[n].0[j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < worst.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for j in 0..n {
                        x[j] = x0[j] + 0.5 * (x[j] - x0[j]);
                    }
                    *fx = f(x);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Rate per step from the first and last points above ½, used as the
/// starting guess.
fn two_point_estimate(points: &[FidelityPoint]) -> Option<f64> {
    let usable: Vec<_> = points.iter().filter(|p| p.fidelity > 0.5 && p.fidelity < 1.0).collect();
    let (a, b) = (usable.first()?, usable.last()?);
    let dt = (b.t - a.t) * STEPS_PER_CYCLE as f64;
    if dt <= 0.0 {
        let steps = a.t * STEPS_PER_CYCLE as f64;
        return Some((1.0 - (2.0 * a.fidelity - 1.0).powf(1.0 / steps)) / 2.0);
    }
    let r = ((2.0 * b.fidelity - 1.0) / (2.0 * a.fidelity - 1.0)).ln() / dt;
    (r < 0.0).then(|| (1.0 - r.exp()) / 2.0)
}

/// Least-squares fit of the fidelity decay over `(ε_L, t0)`, or `ε_L`
/// alone with `t0 = 0` when `fix_t0`.
pub fn fit_fidelity(series: &FidelitySeries, fix_t0: bool) -> Result<FitResult> {
    let pts = &series.points;
    if pts.len() < 3 {
        return Err(Error::FitFailed(format!("need at least 3 points, got {}", pts.len())));
    }
    if pts.iter().all(|p| (p.fidelity - 0.5).abs() < 1e-3) {
        return Err(Error::FitFailed("all fidelities are 1/2; the data cannot be decoded".into()));
    }
    if pts.iter().any(|p| !p.t.is_finite() || !p.fidelity.is_finite()) {
        return Err(Error::NonFinite("fidelity series".into()));
    }
    let t_max = pts.iter().map(|p| p.t).fold(0.0, f64::max) * STEPS_PER_CYCLE as f64;
    let eps0 = two_point_estimate(pts).filter(|e| *e > 0.0 && *e < 0.5).unwrap_or(0.5 / t_max.max(1.0));
    let t_scale = t_max.max(1.0) / 10.0;
    let rss = |eps: f64, t0: f64| -> f64 {
        let e = eps.clamp(0.0, 0.5);
        let penalty = (eps - e).powi(2) / (eps0 * eps0);
        pts.iter().map(|p| (decay(e, t0, p.t) - p.fidelity).powi(2)).sum::<f64>() + penalty
    };
    let (x, _) = if fix_t0 {
        nelder_mead(|x| rss(x[0] * eps0, 0.0), &[1.0], &[0.1], 1e-15, 20_000)
    } else {
        nelder_mead(|x| rss(x[0] * eps0, x[1] * t_scale), &[1.0, 0.0], &[0.1, 0.1], 1e-15, 20_000)
    };
    let epsilon_l = (x[0] * eps0).clamp(0.0, 0.5);
    let t0 = if fix_t0 { 0.0 } else { x[1] * t_scale };
    Ok(FitResult {
        epsilon_l,
        t0,
        fixed_t0: fix_t0,
        steps_per_cycle: STEPS_PER_CYCLE,
        epsilon_cycle: per_cycle(epsilon_l),
        ci: None,
        rss: rss(epsilon_l, t0),
        n_points: pts.len(),
    })
}

/// Per-cycle rate equivalent to a per-step rate.
pub fn per_cycle(epsilon_step: f64) -> f64 {
    (1.0 - (1.0 - 2.0 * epsilon_step).powi(STEPS_PER_CYCLE as i32)) / 2.0
}

/// Per-step rate equivalent to a per-cycle rate.
pub fn per_step(epsilon_cycle: f64) -> f64 {
    (1.0 - (1.0 - 2.0 * epsilon_cycle).powf(1.0 / STEPS_PER_CYCLE as f64)) / 2.0
}

/// [`fit_fidelity`] plus a 95% interval from refitting `n_boot` resampled
/// series, each point redrawn from its own samples.
pub fn fit_fidelity_with_ci(series: &FidelitySeries, fix_t0: bool, n_boot: usize, seed: u64) -> Result<FitResult> {
    let mut fit = fit_fidelity(series, fix_t0)?;
    let mut eps: Vec<f64> = Vec::with_capacity(n_boot);
    for b in 0..n_boot {
        let mut rng = sample_rng(seed, b as u64);
        let mut resampled = series.clone();
        for p in &mut resampled.points {
            let hits = (0..p.n_samples).filter(|_| rng.random::<f64>() < p.fidelity).count();
            p.fidelity = hits as f64 / p.n_samples.max(1) as f64;
        }
        if let Ok(f) = fit_fidelity(&resampled, fix_t0) {
            eps.push(f.epsilon_l);
        }
    }
    if eps.len() >= 2 {
        eps.sort_by(f64::total_cmp);
        let q = |f: f64| eps[((eps.len() - 1) as f64 * f).round() as usize];
        fit.ci = Some((q(0.025), q(0.975)));
    }
    Ok(fit)
}

/// Bootstrap standard error of the mean of `outcomes`.
pub fn bootstrap_error(outcomes: &[bool], n_boot: usize, seed: u64) -> f64 {
    let n = outcomes.len();
    if n < 2 || n_boot < 2 {
        return 0.0;
    }
    let mut rng = sample_rng(seed, 0);
    let means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).filter(|_| outcomes[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / n_boot as f64;
    (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n_boot - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub distance: usize,
    pub exponent: f64,
    pub c_d: f64,
    pub epsilon_pseudo: f64,
}

fn check_rates(points: &[(f64, f64)], min: usize) -> Result<()> {
    if points.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} points, got {}", points.len())));
    }
    if points.iter().any(|&(p, e)| !(p > 0.0 && e > 0.0) || !p.is_finite() || !e.is_finite()) {
        return Err(Error::InvalidArgument("rates must be positive and finite".into()));
    }
    Ok(())
}

/// `C_d` from `log ε_L = log C_d + ((d+1)/2)·log ε_phys` with the exponent fixed.
pub fn fit_powerlaw(points: &[(f64, f64)], distance: usize) -> Result<PowerLawFit> {
    if distance < 3 || distance % 2 == 0 {
        return Err(Error::InvalidDistance(distance as i64));
    }
    check_rates(points, 2)?;
    let k = (distance + 1) as f64 / 2.0;
    let log_c = points.iter().map(|&(p, e)| e.ln() - k * p.ln()).sum::<f64>() / points.len() as f64;
    let c_d = log_c.exp();
    Ok(PowerLawFit { distance, exponent: k, c_d, epsilon_pseudo: pseudothreshold(c_d, distance)? })
}

/// Ordinary least squares of `log ε_L` on `log ε_phys`; returns `(slope, prefactor)`.
pub fn fit_powerlaw_free(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    check_rates(points, 2)?;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all physical rates are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, (my - slope * mx).exp()))
}

/// `ε_pseudo = C_d^(−2/(d−1))`, where the encoded and bare error rates cross.
pub fn pseudothreshold(c_d: f64, distance: usize) -> Result<f64> {
    if distance < 3 || distance % 2 == 0 {
        return Err(Error::InvalidDistance(distance as i64));
    }
    if !(c_d > 0.0) || !c_d.is_finite() {
        return Err(Error::InvalidArgument(format!("prefactor must be positive, got {c_d}")));
    }
    Ok(c_d.powf(-2.0 / (distance as f64 - 1.0)))
}

/// `ε_optimal / ε_L`.
pub fn decoder_efficiency(epsilon_optimal: f64, epsilon_l: f64) -> Result<f64> {
    if !(epsilon_optimal > 0.0 && epsilon_l > 0.0) {
        return Err(Error::InvalidArgument("rates must be positive".into()));
    }
    Ok(epsilon_optimal / epsilon_l)
}

/// Evenly spaced evaluation cycles `nΔT < t_max`, `ΔT` the smallest
/// integer giving fewer than `max_points` points.
pub fn thinned_cycles(t_max: usize, max_points: usize) -> Vec<usize> {
    let count = |dt: usize| (t_max.saturating_sub(1)) / dt;
    let dt = (1..=t_max.max(1)).find(|&dt| count(dt) < max_points).unwrap_or(t_max.max(1));
    (1..).map(|n| n * dt).take_while(|&t| t < t_max).collect()
}

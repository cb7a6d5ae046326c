//! Independent verification oracles.

use nalgebra::DVector;

use crate::composition::{stochastic_eta_with_value, FiniteTwoLevel};
use crate::error::{Error, Result};
use crate::manifold::{exp_map, tangent_basis, Point, Tangent};
use crate::solver::IterationRecord;

/// Default finite-difference step.
pub const FD_DEFAULT_STEP: f64 = 1e-5;
/// Largest joint outcome count accepted by [`enumerate_expectation`].
pub const MAX_JOINT_OUTCOMES: usize = 10_000;

/// Riemannian gradient of `f` at `x` by central differences along
/// `Exp_x(±h b_i)` over an orthonormal tangent basis `{b_i}`.
pub fn fd_rgrad(f: impl Fn(&Point) -> f64, x: &Point, h: f64) -> Result<Tangent> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut coords = DVector::zeros(x.coords().len());
    for b in tangent_basis(x) {
        let fp = f(&exp_map(x, &b.scale(h))?);
        let fm = f(&exp_map(x, &b.scale(-h))?);
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite("function value in finite-difference gradient".into()));
        }
        coords += b.coords() * ((fp - fm) / (2.0 * h));
    }
    Tangent::new(x.clone(), coords)
}

/// Exact expectations over a finite two-level problem.
#[derive(Debug, Clone)]
pub struct Enumerated {
    /// `E_φ[g_φ(x)]`.
    pub mean_inner: DVector<f64>,
    /// `E_{φ,ξ}[(Dg_φ(x))^* Proj_{g_φ(x)} ∇f_ξ(E g(x))]`.
    pub mean_gradient: Tangent,
}

/// Enumerates every `(φ, ξ)` outcome pair with its probability weight.
pub fn enumerate_expectation<P: FiniteTwoLevel + ?Sized>(problem: &P, x: &Point) -> Result<Enumerated> {
    let inner = problem.inner_outcomes();
    let outer = problem.outer_outcomes();
    if inner.is_empty() || outer.is_empty() {
        return Err(Error::Contract("sample spaces must be nonempty".into()));
    }
    if inner.len() * outer.len() > MAX_JOINT_OUTCOMES {
        return Err(Error::Contract(format!(
            "{} joint outcomes exceed the enumeration limit {MAX_JOINT_OUTCOMES}",
            inner.len() * outer.len()
        )));
    }
    let values = inner.iter().map(|(_, phi)| problem.inner_value(x, phi)).collect::<Result<Vec<_>>>()?;
    let mut mean_inner = DVector::zeros(values[0].len());
    for ((w, _), v) in inner.iter().zip(&values) {
        mean_inner += v * *w;
    }
    let mut mean_gradient = DVector::zeros(x.coords().len());
    for ((wp, phi), v) in inner.iter().zip(&values) {
        for (wx, xi) in &outer {
            let eta = stochastic_eta_with_value(problem, x, v, &mean_inner, phi, xi)?;
            mean_gradient += eta.coords() * (*wp * *wx);
        }
    }
    if mean_inner.iter().chain(mean_gradient.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("enumerated expectation".into()));
    }
    Ok(Enumerated { mean_inner, mean_gradient: Tangent::new(x.clone(), mean_gradient)? })
}

/// Stationary tracking error of `y ← (1-β) y + β g_φ(x)` at a fixed `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingMse {
    /// `β / (2 - β) · V_g²`.
    pub exact: f64,
    /// `2 β V_g²`.
    pub bound: f64,
}

pub fn stationary_tracking_mse(beta: f64, v_g_sq: f64) -> Result<TrackingMse> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Contract(format!("beta = {beta} must lie in (0, 1]")));
    }
    Ok(TrackingMse { exact: beta / (2.0 - beta) * v_g_sq, bound: 2.0 * beta * v_g_sq })
}

/// `V^k = F(x^k) - F_star + tracking_k` for each record.
pub fn lyapunov_trace(records: &[IterationRecord], f_star: f64) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            if r.objective.is_nan() || r.tracking_err_sq.is_nan() {
                Err(Error::Unsupported(format!("record {} lacks objective or tracking metrics", r.k)))
            } else {
                Ok(r.objective - f_star + r.tracking_err_sq)
            }
        })
        .collect()
}

/// Least-squares fit of `log(metric) = intercept + slope · log(K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub k_values: Vec<usize>,
    pub metric_values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Minimum replications per horizon accepted by [`fit_rate`].
pub const MIN_RATE_SEEDS: usize = 5;

/// Fits the seed-averaged metric against the horizon. `runs[i]` is
/// `(K_i, per-seed values)`; horizons must be strictly increasing.
pub fn fit_rate(runs: &[(usize, Vec<f64>)]) -> Result<RateFit> {
    if runs.len() < 3 {
        return Err(Error::Contract(format!("rate fit needs at least 3 horizons, got {}", runs.len())));
    }
    for w in runs.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Contract("horizons must be strictly increasing".into()));
        }
    }
    let mut k_values = Vec::with_capacity(runs.len());
    let mut metric_values = Vec::with_capacity(runs.len());
    for (k, seeds) in runs {
        if seeds.len() < MIN_RATE_SEEDS {
            return Err(Error::Contract(format!(
                "horizon {k} has {} seeds, at least {MIN_RATE_SEEDS} required",
                seeds.len()
            )));
        }
        let mean = seeds.iter().sum::<f64>() / seeds.len() as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::NumericalDomain(format!("mean metric {mean} at horizon {k} is not positive")));
        }
        k_values.push(*k);
        metric_values.push(mean);
    }
    let xs: Vec<f64> = k_values.iter().map(|k| (*k as f64).ln()).collect();
    let ys: Vec<f64> = metric_values.iter().map(|m| m.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit { k_values, metric_values, slope, intercept, r_squared })
}

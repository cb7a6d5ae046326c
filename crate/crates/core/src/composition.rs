//! Problem abstractions for nested stochastic compositions.
//!
//! A two-level problem minimizes `F(x) = E_ξ[f_ξ(E_φ[g_φ(x)])]` where
//! `g_φ : M -> N ⊆ E` and `f_ξ : E -> R`. A multi-level problem minimizes
//! `F(x) = f_N(... f_2(f_1(x)))` with each `f_n = E_θn[f_n(.; θn)]`.
//!
//! Samples are drawn by the solver from seeded streams and handed to the
//! oracles, so every oracle must be a pure function of `(point, sample)`.
//!
//! Adjoints are supplied indirectly: a problem returns the Euclidean gradient
//! of `x -> <g_φ(x), u>` and the framework converts it with
//! [`egrad_to_rgrad`], which yields `(Dg_φ(x))^* u` for the domain metric.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifold::{self, egrad_to_rgrad, exp_map, Manifold, Point, Tangent};
use crate::rng::SampleRng;

/// Finite-difference step used by the pairing and Jacobian estimators.
pub const FD_STEP: f64 = 1e-5;

/// Constants of the two-level smoothness, variance and boundedness
/// assumptions. Used to build step-size schedules and bound checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    /// Geodesic smoothness of `F`.
    pub l_obj: f64,
    /// Lipschitz constant of `∇f_ξ`.
    pub l_f: f64,
    /// Standard-deviation bound of the inner value oracle.
    pub v_g: f64,
    /// Bound on the operator norm of `Dg_φ`.
    pub c_g: f64,
    /// Bound on `|∇f_ξ|`.
    pub c_f: f64,
    /// `sup |t_k|` for the coupling `γ_k = 1 - t_k β_k`.
    pub t: f64,
}

impl Default for ProblemConstants {
    fn default() -> Self {
        Self { l_obj: 0.0, l_f: 0.0, v_g: 0.0, c_g: 0.0, c_f: 0.0, t: 1.0 }
    }
}

/// Per-level constants of a multi-level problem.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LevelConstants {
    pub l: f64,
    pub v: f64,
    pub c: f64,
}

pub trait TwoLevelProblem: Send + Sync {
    type InnerSample: Clone + Send + Sync;
    type OuterSample: Clone + Send + Sync;

    fn domain(&self) -> &Manifold;

    /// The manifold `N` holding inner values; its ambient space is `E`.
    fn inner_codomain(&self) -> &Manifold;

    fn draw_inner(&self, rng: &mut SampleRng) -> Self::InnerSample;

    fn draw_outer(&self, rng: &mut SampleRng) -> Self::OuterSample;

    /// `g_φ(x)` in ambient coordinates of `E`.
    fn inner_value(&self, x: &Point, phi: &Self::InnerSample) -> Result<DVector<f64>>;

    /// Euclidean gradient at `x` of `x -> <g_φ(x), u>_E`.
    fn inner_pullback_egrad(&self, x: &Point, phi: &Self::InnerSample, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∇f_ξ(y)`.
    fn outer_grad(&self, y: &DVector<f64>, xi: &Self::OuterSample) -> Result<DVector<f64>>;

    fn outer_value(&self, y: &DVector<f64>, xi: &Self::OuterSample) -> Result<f64>;

    /// Sample token whose oracles return the exact `g`, `Dg`.
    fn exact_inner_sample(&self) -> Option<Self::InnerSample> {
        None
    }

    /// Sample token whose oracles return the exact `f`, `∇f`.
    fn exact_outer_sample(&self) -> Option<Self::OuterSample> {
        None
    }

    fn constants(&self) -> ProblemConstants;

    fn initial_point(&self) -> Point;

    /// Points at which constants are estimated.
    fn probe_points(&self, rng: &mut SampleRng) -> Vec<Point> {
        default_probes(&self.initial_point(), rng)
    }
}

/// A two-level problem whose sample spaces are finite and enumerable.
pub trait FiniteTwoLevel: TwoLevelProblem {
    /// `(probability, sample)` pairs covering the whole inner sample space.
    fn inner_outcomes(&self) -> Vec<(f64, Self::InnerSample)>;
    fn outer_outcomes(&self) -> Vec<(f64, Self::OuterSample)>;
}

fn default_probes(x0: &Point, rng: &mut SampleRng) -> Vec<Point> {
    let mut out = vec![x0.clone()];
    for _ in 0..4 {
        let v = manifold::random_tangent(x0, rng);
        let n = v.norm();
        if n > 0.0 {
            if let Ok(p) = exp_map(x0, &v.scale(0.5 / n)) {
                out.push(p);
            }
        }
    }
    out
}

/// `(Dg_φ(x))^* u`.
pub fn inner_adjoint<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    phi: &P::InnerSample,
    u: &DVector<f64>,
) -> Result<Tangent> {
    let eg = problem.inner_pullback_egrad(x, phi, u)?;
    egrad_to_rgrad(x, &eg)
}

/// `Proj_y u` onto the tangent space of the inner codomain at `y`.
pub fn project_codomain(codomain: &Manifold, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != codomain.ambient_dim() || u.len() != codomain.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: codomain.ambient_dim(),
            got: if y.len() != codomain.ambient_dim() { y.len() } else { u.len() },
        });
    }
    Ok(codomain.project_raw(y.as_slice(), u.as_slice()))
}

fn exact_samples<P: TwoLevelProblem + ?Sized>(problem: &P) -> Result<(P::InnerSample, P::OuterSample)> {
    match (problem.exact_inner_sample(), problem.exact_outer_sample()) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Unsupported("problem does not provide exact oracles".into())),
    }
}

pub fn has_exact_oracles<P: TwoLevelProblem + ?Sized>(problem: &P) -> bool {
    problem.exact_inner_sample().is_some() && problem.exact_outer_sample().is_some()
}

/// `g(x)` from the exact oracle.
pub fn exact_inner_value<P: TwoLevelProblem + ?Sized>(problem: &P, x: &Point) -> Result<DVector<f64>> {
    let phi = problem
        .exact_inner_sample()
        .ok_or_else(|| Error::Unsupported("problem does not provide an exact inner oracle".into()))?;
    problem.inner_value(x, &phi)
}

/// `F(x) = f(g(x))` from the exact oracles.
pub fn exact_objective<P: TwoLevelProblem + ?Sized>(problem: &P, x: &Point) -> Result<f64> {
    let (phi, xi) = exact_samples(problem)?;
    let g = problem.inner_value(x, &phi)?;
    problem.outer_value(&g, &xi)
}

/// `grad F(x) = (Dg(x))^* Proj_{g(x)} ∇f(g(x))`.
pub fn composite_rgrad_exact<P: TwoLevelProblem + ?Sized>(problem: &P, x: &Point) -> Result<Tangent> {
    let (phi, xi) = exact_samples(problem)?;
    let g = problem.inner_value(x, &phi)?;
    let df = problem.outer_grad(&g, &xi)?;
    let u = project_codomain(problem.inner_codomain(), &g, &df)?;
    inner_adjoint(problem, x, &phi, &u)
}

/// `η = (Dg_φ(x))^* Proj_{g_φ(x)} ∇f_ξ(y)`.
pub fn stochastic_eta<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    y_tracked: &DVector<f64>,
    phi: &P::InnerSample,
    xi: &P::OuterSample,
) -> Result<Tangent> {
    let g_phi = problem.inner_value(x, phi)?;
    stochastic_eta_with_value(problem, x, &g_phi, y_tracked, phi, xi)
}

/// [`stochastic_eta`] with `g_φ(x)` already evaluated.
pub fn stochastic_eta_with_value<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    g_phi: &DVector<f64>,
    y_tracked: &DVector<f64>,
    phi: &P::InnerSample,
    xi: &P::OuterSample,
) -> Result<Tangent> {
    if y_tracked.len() != problem.inner_codomain().ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.inner_codomain().ambient_dim(),
            got: y_tracked.len(),
        });
    }
    let df = problem.outer_grad(y_tracked, xi)?;
    let u = project_codomain(problem.inner_codomain(), g_phi, &df)?;
    inner_adjoint(problem, x, phi, &u)
}

/// Central difference of `g_φ` along `t -> Exp_x(t v)` at `t = 0`.
pub fn fd_inner_differential<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    phi: &P::InnerSample,
    v: &Tangent,
    h: f64,
) -> Result<DVector<f64>> {
    let plus = exp_map(x, &v.scale(h))?;
    let minus = exp_map(x, &v.scale(-h))?;
    let gp = problem.inner_value(&plus, phi)?;
    let gm = problem.inner_value(&minus, phi)?;
    Ok((gp - gm) / (2.0 * h))
}

/// `|<D̂g_φ(x)[v], Proj u> - <v, (Dg_φ(x))^* Proj u>_x|` with `D̂` a central
/// finite difference along the exponential map (step [`FD_STEP`]).
pub fn adjoint_pairing_residual<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    phi: &P::InnerSample,
    v: &Tangent,
    u: &DVector<f64>,
) -> Result<f64> {
    let g = problem.inner_value(x, phi)?;
    let pu = project_codomain(problem.inner_codomain(), &g, u)?;
    let dg = fd_inner_differential(problem, x, phi, v, FD_STEP)?;
    let lhs = dg.dot(&pu);
    let adj = inner_adjoint(problem, x, phi, &pu)?;
    let rhs = manifold::inner(x, v, &adj)?;
    Ok((lhs - rhs).abs())
}

/// Monte-Carlo estimates of [`ProblemConstants`] with the sample counts used.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEstimate {
    pub constants: ProblemConstants,
    pub n_samples: usize,
    pub n_probes: usize,
    /// `l_obj` is only estimated when exact oracles exist; otherwise it is 0.
    pub l_obj_estimated: bool,
}

/// Estimates the assumption constants at the problem's probe points.
///
/// * `v_g²`: max over probes of the sample variance `E|g_φ(x) - ḡ(x)|²`.
/// * `c_g²`: max over probes of the sample mean of `|Dg_φ(x)|²_op`, with the
///   Jacobian in an orthonormal tangent basis built by finite differences.
/// * `c_f²`: max over probe values `y = g_φ(x)` of the sample mean of `|∇f_ξ(y)|²`.
/// * `l_f`: max over probe-value pairs and outer samples of the gradient
///   difference quotient.
/// * `l_obj`: max over probes and basis directions of
///   `|grad F(Exp_x(s)) - P_s grad F(x)| / |s|` (exact oracles only).
///
/// The smoothness constant of `f_ξ` is estimated per sample, which bounds the
/// in-expectation constant from above. `t` is left at 1.
pub fn estimate_constants<P: TwoLevelProblem + ?Sized>(
    problem: &P,
    n_samples: usize,
    rng: &mut SampleRng,
) -> Result<ConstantEstimate> {
    if n_samples < 100 {
        return Err(Error::Contract(format!("estimate_constants needs n_samples >= 100, got {n_samples}")));
    }
    let probes = problem.probe_points(rng);
    let mut v_g_sq: f64 = 0.0;
    let mut c_g_sq: f64 = 0.0;
    let mut probe_values: Vec<DVector<f64>> = Vec::new();

    for x in &probes {
        let basis = manifold::tangent_basis(x);
        let mut values = Vec::with_capacity(n_samples);
        let mut op_sq_sum = 0.0;
        for _ in 0..n_samples {
            let phi = problem.draw_inner(rng);
            values.push(problem.inner_value(x, &phi)?);
            let m = problem.inner_codomain().ambient_dim();
            let mut jac = DMatrix::zeros(m, basis.len());
            for (j, b) in basis.iter().enumerate() {
                let col = fd_inner_differential(problem, x, &phi, b, FD_STEP)?;
                jac.set_column(j, &col);
            }
            let gram = jac.transpose() * &jac;
            let top = SymmetricEigen::new(gram).eigenvalues.iter().copied().fold(0.0_f64, f64::max);
            op_sq_sum += top;
        }
        c_g_sq = c_g_sq.max(op_sq_sum / n_samples as f64);

        let n = values.len() as f64;
        let shifted: Vec<DVector<f64>> = values.iter().map(|v| v - &values[0]).collect();
        let mean = shifted.iter().fold(DVector::zeros(values[0].len()), |acc, v| acc + v) / n;
        let var = shifted.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / (n - 1.0);
        v_g_sq = v_g_sq.max(var);
        probe_values.extend(values.into_iter().take(8));
    }

    let mut c_f_sq: f64 = 0.0;
    for y in &probe_values {
        let mut s = 0.0;
        for _ in 0..n_samples {
            let xi = problem.draw_outer(rng);
            s += problem.outer_grad(y, &xi)?.norm_squared();
        }
        c_f_sq = c_f_sq.max(s / n_samples as f64);
    }

    let mut l_f: f64 = 0.0;
    for pair in probe_values.windows(2) {
        let dy = (&pair[1] - &pair[0]).norm();
        if dy < 1e-12 {
            continue;
        }
        for _ in 0..8 {
            let xi = problem.draw_outer(rng);
            let dg = (problem.outer_grad(&pair[1], &xi)? - problem.outer_grad(&pair[0], &xi)?).norm();
            l_f = l_f.max(dg / dy);
        }
    }

    let exact = has_exact_oracles(problem);
    let mut l_obj: f64 = 0.0;
    if exact {
        for x in &probes {
            let gx = composite_rgrad_exact(problem, x)?;
            for b in manifold::tangent_basis(x) {
                let s = b.scale(0.1);
                let y = exp_map(x, &s)?;
                let gy = composite_rgrad_exact(problem, &y)?;
                let moved = manifold::parallel_transport(x, &s, &gx)?;
                let d = gy.coords() - moved.coords();
                let dn = y.manifold().inner_raw(y.coords().as_slice(), d.as_slice(), d.as_slice());
                l_obj = l_obj.max(dn.max(0.0).sqrt() / s.norm());
            }
        }
    }

    Ok(ConstantEstimate {
        constants: ProblemConstants { l_obj, l_f, v_g: v_g_sq.sqrt(), c_g: c_g_sq.sqrt(), c_f: c_f_sq.sqrt(), t: 1.0 },
        n_samples,
        n_probes: probes.len(),
        l_obj_estimated: exact,
    })
}

/// Multi-level problem `F(x) = f_N(... f_2(f_1(x)))`.
///
/// Levels are numbered `1..=N`. Level 1 maps the domain into `R^{d_2}`;
/// level `n >= 2` maps `R^{d_n}` into `R^{d_{n+1}}` with `d_{N+1} = 1`.
pub trait MultiLevelProblem: Send + Sync {
    type Sample: Clone + Send + Sync;

    fn domain(&self) -> &Manifold;

    /// Manifold holding level-1 values; ambient dimension `d_2`.
    fn first_codomain(&self) -> &Manifold;

    /// `[d_2, ..., d_{N+1}]`, so `N = level_dims().len()`.
    fn level_dims(&self) -> Vec<usize>;

    fn draw(&self, level: usize, rng: &mut SampleRng) -> Self::Sample;

    /// `f_1(x; θ_1)`.
    fn first_value(&self, x: &Point, theta: &Self::Sample) -> Result<DVector<f64>>;

    /// Euclidean gradient at `x` of `x -> <f_1(x; θ_1), u>`.
    fn first_pullback_egrad(&self, x: &Point, theta: &Self::Sample, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `f_n(y; θ_n)` for `2 <= n <= N`.
    fn level_value(&self, level: usize, y: &DVector<f64>, theta: &Self::Sample) -> Result<DVector<f64>>;

    /// `∇f_n(y; θ_n) u`, the transposed Jacobian applied to a covector of
    /// length `d_{n+1}`, for `2 <= n <= N`.
    fn level_vjp(&self, level: usize, y: &DVector<f64>, theta: &Self::Sample, u: &DVector<f64>)
        -> Result<DVector<f64>>;

    /// Sample token giving the exact level-`n` oracle.
    fn exact_sample(&self, _level: usize) -> Option<Self::Sample> {
        None
    }

    /// Constants for levels `1..=N` (index 0 is level 1).
    fn level_constants(&self) -> Vec<LevelConstants>;

    fn initial_point(&self) -> Point;
}

pub fn num_levels<P: MultiLevelProblem + ?Sized>(problem: &P) -> usize {
    problem.level_dims().len()
}

/// Checks `N >= 2`, `d_{N+1} = 1` and that `d_2` matches the first codomain.
pub fn validate_multi<P: MultiLevelProblem + ?Sized>(problem: &P) -> Result<()> {
    let dims = problem.level_dims();
    if dims.len() < 2 {
        return Err(Error::Contract(format!("multi-level problem needs N >= 2 levels, got {}", dims.len())));
    }
    if *dims.last().unwrap() != 1 {
        return Err(Error::Contract("final level must be scalar".into()));
    }
    if dims[0] != problem.first_codomain().ambient_dim() {
        return Err(Error::DimensionMismatch { expected: problem.first_codomain().ambient_dim(), got: dims[0] });
    }
    if problem.level_constants().len() != dims.len() {
        return Err(Error::Contract("level_constants must list one entry per level".into()));
    }
    Ok(())
}

fn exact_level_samples<P: MultiLevelProblem + ?Sized>(problem: &P) -> Result<Vec<P::Sample>> {
    (1..=num_levels(problem))
        .map(|n| problem.exact_sample(n).ok_or_else(|| Error::Unsupported(format!("no exact oracle for level {n}"))))
        .collect()
}

pub fn multi_has_exact_oracles<P: MultiLevelProblem + ?Sized>(problem: &P) -> bool {
    (1..=num_levels(problem)).all(|n| problem.exact_sample(n).is_some())
}

/// Exact nested values `[f^(1)(x), ..., f^(N)(x)]`.
pub fn multi_exact_values<P: MultiLevelProblem + ?Sized>(problem: &P, x: &Point) -> Result<Vec<DVector<f64>>> {
    let samples = exact_level_samples(problem)?;
    let mut out = Vec::with_capacity(samples.len());
    out.push(problem.first_value(x, &samples[0])?);
    for (i, theta) in samples.iter().enumerate().skip(1) {
        let next = problem.level_value(i + 1, &out[i - 1], theta)?;
        out.push(next);
    }
    Ok(out)
}

pub fn multi_exact_objective<P: MultiLevelProblem + ?Sized>(problem: &P, x: &Point) -> Result<f64> {
    Ok(multi_exact_values(problem, x)?.last().expect("N >= 2")[0])
}

/// Applies `(Df_1(x;θ_1))^* Proj_{f_1} ∇f_2(y_1;θ_2) ... ∇f_N(y_{N-1};θ_N)`
/// right to left. `inputs[i]` is the argument of level `i + 2`.
pub fn multi_chain_eta<P: MultiLevelProblem + ?Sized>(
    problem: &P,
    x: &Point,
    first_value: &DVector<f64>,
    inputs: &[DVector<f64>],
    samples: &[P::Sample],
) -> Result<Tangent> {
    let n_levels = samples.len();
    let mut cov = DVector::from_element(1, 1.0);
    for level in (2..=n_levels).rev() {
        cov = problem.level_vjp(level, &inputs[level - 2], &samples[level - 1], &cov)?;
    }
    let u = project_codomain(problem.first_codomain(), first_value, &cov)?;
    let eg = problem.first_pullback_egrad(x, &samples[0], &u)?;
    egrad_to_rgrad(x, &eg)
}

/// Exact Riemannian gradient of a multi-level objective.
pub fn multi_composite_rgrad_exact<P: MultiLevelProblem + ?Sized>(problem: &P, x: &Point) -> Result<Tangent> {
    let samples = exact_level_samples(problem)?;
    let values = multi_exact_values(problem, x)?;
    multi_chain_eta(problem, x, &values[0], &values[..values.len() - 1], &samples)
}

/// Sample of a two-level problem viewed as a two-level chain.
#[derive(Debug, Clone)]
pub enum ChainSample<A, B> {
    Inner(A),
    Outer(B),
}

/// Views a two-level problem as a multi-level problem with `N = 2`.
pub struct AsMultiLevel<P>(pub P);

impl<P: TwoLevelProblem> MultiLevelProblem for AsMultiLevel<P> {
    type Sample = ChainSample<P::InnerSample, P::OuterSample>;

    fn domain(&self) -> &Manifold {
        self.0.domain()
    }

    fn first_codomain(&self) -> &Manifold {
        self.0.inner_codomain()
    }

    fn level_dims(&self) -> Vec<usize> {
        vec![self.0.inner_codomain().ambient_dim(), 1]
    }

    fn draw(&self, level: usize, rng: &mut SampleRng) -> Self::Sample {
        if level == 1 {
            ChainSample::Inner(self.0.draw_inner(rng))
        } else {
            ChainSample::Outer(self.0.draw_outer(rng))
        }
    }

    fn first_value(&self, x: &Point, theta: &Self::Sample) -> Result<DVector<f64>> {
        match theta {
            ChainSample::Inner(phi) => self.0.inner_value(x, phi),
            ChainSample::Outer(_) => Err(Error::Contract("level 1 needs an inner sample".into())),
        }
    }

    fn first_pullback_egrad(&self, x: &Point, theta: &Self::Sample, u: &DVector<f64>) -> Result<DVector<f64>> {
        match theta {
            ChainSample::Inner(phi) => self.0.inner_pullback_egrad(x, phi, u),
            ChainSample::Outer(_) => Err(Error::Contract("level 1 needs an inner sample".into())),
        }
    }

    fn level_value(&self, _level: usize, y: &DVector<f64>, theta: &Self::Sample) -> Result<DVector<f64>> {
        match theta {
            ChainSample::Outer(xi) => Ok(DVector::from_element(1, self.0.outer_value(y, xi)?)),
            ChainSample::Inner(_) => Err(Error::Contract("level 2 needs an outer sample".into())),
        }
    }

    fn level_vjp(
        &self,
        _level: usize,
        y: &DVector<f64>,
        theta: &Self::Sample,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match theta {
            ChainSample::Outer(xi) => {
                let g = self.0.outer_grad(y, xi)?;
                Ok(g * u[0])
            }
            ChainSample::Inner(_) => Err(Error::Contract("level 2 needs an outer sample".into())),
        }
    }

    fn exact_sample(&self, level: usize) -> Option<Self::Sample> {
        if level == 1 {
            self.0.exact_inner_sample().map(ChainSample::Inner)
        } else {
            self.0.exact_outer_sample().map(ChainSample::Outer)
        }
    }

    fn level_constants(&self) -> Vec<LevelConstants> {
        let c = self.0.constants();
        vec![LevelConstants { l: 0.0, v: c.v_g, c: c.c_g }, LevelConstants { l: c.l_f, v: 0.0, c: c.c_f }]
    }

    fn initial_point(&self) -> Point {
        self.0.initial_point()
    }
}

/// Draws a standard normal vector of length `n`.
pub fn gaussian_vector(rng: &mut SampleRng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{FiniteFixture, LinearQuadratic, SpdTarget};
    use crate::manifold::random_tangent;
    use rand::SeedableRng;

    /// `g(X) = vec(X)` on `SPD(d)` with `f(y) = ½|y|²`.
    struct VecSpd {
        domain: Manifold,
        codomain: Manifold,
    }

    impl TwoLevelProblem for VecSpd {
        type InnerSample = ();
        type OuterSample = ();
        fn domain(&self) -> &Manifold {
            &self.domain
        }
        fn inner_codomain(&self) -> &Manifold {
            &self.codomain
        }
        fn draw_inner(&self, _rng: &mut SampleRng) {}
        fn draw_outer(&self, _rng: &mut SampleRng) {}
        fn inner_value(&self, x: &Point, _phi: &()) -> Result<DVector<f64>> {
            Ok(x.coords().clone())
        }
        fn inner_pullback_egrad(&self, _x: &Point, _phi: &(), u: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(u.clone())
        }
        fn outer_grad(&self, y: &DVector<f64>, _xi: &()) -> Result<DVector<f64>> {
            Ok(y.clone())
        }
        fn outer_value(&self, y: &DVector<f64>, _xi: &()) -> Result<f64> {
            Ok(0.5 * y.norm_squared())
        }
        fn exact_inner_sample(&self) -> Option<()> {
            Some(())
        }
        fn exact_outer_sample(&self) -> Option<()> {
            Some(())
        }
        fn constants(&self) -> ProblemConstants {
            ProblemConstants::default()
        }
        fn initial_point(&self) -> Point {
            Point::from_matrix(&DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0])).unwrap()
        }
    }

    fn rng(seed: u64) -> SampleRng {
        SampleRng::seed_from_u64(seed)
    }

    fn fd_directional<P: TwoLevelProblem>(p: &P, x: &Point, v: &Tangent) -> f64 {
        let h = 1e-6;
        let fp = exact_objective(p, &exp_map(x, &v.scale(h)).unwrap()).unwrap();
        let fm = exact_objective(p, &exp_map(x, &v.scale(-h)).unwrap()).unwrap();
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn linear_quadratic_gradient_is_ata_x() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.0]);
        let p = LinearQuadratic::new(a.clone(), DVector::zeros(3), 0.0, 0.0);
        let x = Point::from_slice(Manifold::euclidean(2), &[0.7, -1.2]).unwrap();
        let g = composite_rgrad_exact(&p, &x).unwrap();
        let expected = a.transpose() * &a * x.coords();
        assert!((g.coords() - expected).norm() < 1e-12);
    }

    #[test]
    fn constant_outer_gives_zero_gradient() {
        let a = DMatrix::zeros(2, 2);
        let mut p = LinearQuadratic::new(a, DVector::zeros(2), 0.0, 0.0);
        p.target = DVector::zeros(2);
        let x = Point::from_slice(Manifold::euclidean(2), &[1.0, 2.0]).unwrap();
        let g = composite_rgrad_exact(&p, &x).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn spd_vec_gradient_is_x_cubed_and_matches_fd() {
        let p = VecSpd { domain: Manifold::spd(2), codomain: Manifold::euclidean(4) };
        let x = p.initial_point();
        let g = composite_rgrad_exact(&p, &x).unwrap();
        let xm = x.as_matrix().unwrap();
        let cube = &xm * &xm * &xm;
        assert!((g.coords() - DVector::from_column_slice(cube.as_slice())).norm() < 1e-10);
        let mut r = rng(3);
        for _ in 0..5 {
            let v = random_tangent(&x, &mut r);
            let lhs = manifold::inner(&x, &v, &g).unwrap();
            assert!((lhs - fd_directional(&p, &x, &v)).abs() < 1e-6 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn missing_exact_oracle_is_unsupported() {
        struct NoExact(VecSpd);
        impl TwoLevelProblem for NoExact {
            type InnerSample = ();
            type OuterSample = ();
            fn domain(&self) -> &Manifold {
                self.0.domain()
            }
            fn inner_codomain(&self) -> &Manifold {
                self.0.inner_codomain()
            }
            fn draw_inner(&self, _rng: &mut SampleRng) {}
            fn draw_outer(&self, _rng: &mut SampleRng) {}
            fn inner_value(&self, x: &Point, phi: &()) -> Result<DVector<f64>> {
                self.0.inner_value(x, phi)
            }
            fn inner_pullback_egrad(&self, x: &Point, phi: &(), u: &DVector<f64>) -> Result<DVector<f64>> {
                self.0.inner_pullback_egrad(x, phi, u)
            }
            fn outer_grad(&self, y: &DVector<f64>, xi: &()) -> Result<DVector<f64>> {
                self.0.outer_grad(y, xi)
            }
            fn outer_value(&self, y: &DVector<f64>, xi: &()) -> Result<f64> {
                self.0.outer_value(y, xi)
            }
            fn constants(&self) -> ProblemConstants {
                ProblemConstants::default()
            }
            fn initial_point(&self) -> Point {
                self.0.initial_point()
            }
        }
        let p = NoExact(VecSpd { domain: Manifold::spd(2), codomain: Manifold::euclidean(4) });
        let x = p.initial_point();
        assert!(matches!(composite_rgrad_exact(&p, &x), Err(Error::Unsupported(_))));
        assert!(!has_exact_oracles(&p));
    }

    #[test]
    fn eta_identity_map_returns_tracked_value() {
        let p = LinearQuadratic::new(DMatrix::identity(3, 3), DVector::zeros(3), 0.0, 0.0);
        let x = Point::from_slice(Manifold::euclidean(3), &[0.1, 0.2, 0.3]).unwrap();
        let y = DVector::from_vec(vec![4.0, -1.0, 2.5]);
        let z = DVector::zeros(3);
        let eta = stochastic_eta(&p, &x, &y, &z, &z).unwrap();
        assert!((eta.coords() - &y).norm() < 1e-15);
        let eta0 = stochastic_eta(&p, &x, &DVector::zeros(3), &z, &z).unwrap();
        assert_eq!(eta0.norm(), 0.0);
    }

    #[test]
    fn eta_rejects_wrong_tracked_dimension() {
        let p = LinearQuadratic::new(DMatrix::identity(3, 3), DVector::zeros(3), 0.0, 0.0);
        let x = p.initial_point();
        let z = DVector::zeros(3);
        let err = stochastic_eta(&p, &x, &DVector::zeros(2), &z, &z);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pairing_residuals() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, -1.0, 3.0, 0.5]);
        let p = LinearQuadratic::new(a, DVector::zeros(2), 0.1, 0.0);
        let x = Point::from_slice(Manifold::euclidean(3), &[1.0, -2.0, 0.5]).unwrap();
        let mut r = rng(9);
        let phi = p.draw_inner(&mut r);
        let u = DVector::from_vec(vec![0.3, -0.7]);
        let zero = Tangent::zero(&x);
        assert_eq!(adjoint_pairing_residual(&p, &x, &phi, &zero, &u).unwrap(), 0.0);
        for _ in 0..5 {
            let v = random_tangent(&x, &mut r);
            assert!(adjoint_pairing_residual(&p, &x, &phi, &v, &u).unwrap() <= 1e-10);
        }

        for domain in [Manifold::spd(2), Manifold::sphere(3)] {
            let f = FiniteFixture::new(domain, 3, 4, 4, 21);
            let x = f.initial_point();
            for i in 0..4 {
                let phi = crate::fixtures::FiniteSample::Outcome(i);
                let v = random_tangent(&x, &mut r);
                let u = gaussian_vector(&mut r, 3);
                let res = adjoint_pairing_residual(&f, &x, &phi, &v, &u).unwrap();
                assert!(res <= 1e-6 * (1.0 + u.norm() * v.norm()), "residual {res}");
            }
        }

        let spd = SpdTarget::standard(0.1, 0.1);
        let x = spd.initial_point();
        let phi = spd.draw_inner(&mut r);
        let v = random_tangent(&x, &mut r);
        let u = gaussian_vector(&mut r, 4);
        assert!(adjoint_pairing_residual(&spd, &x, &phi, &v, &u).unwrap() <= 1e-6 * (1.0 + u.norm() * v.norm()));
    }

    #[test]
    fn estimate_constants_deterministic_inner_has_zero_variance() {
        let p = LinearQuadratic::new(DMatrix::identity(3, 3), DVector::zeros(3), 0.0, 0.0);
        let est = estimate_constants(&p, 100, &mut rng(1)).unwrap();
        assert_eq!(est.constants.v_g, 0.0);
        assert!((est.constants.c_g - 1.0).abs() < 1e-8);
        assert!((est.constants.l_f - 1.0).abs() < 1e-8);
        assert!(est.l_obj_estimated);
        assert!((est.constants.l_obj - 1.0).abs() < 1e-6);
    }

    #[test]
    fn estimate_constants_gaussian_inner_variance() {
        let sigma = 0.3;
        let m = 4;
        let p = LinearQuadratic::new(DMatrix::identity(m, m), DVector::zeros(m), sigma, 0.0);
        let est = estimate_constants(&p, 10_000, &mut rng(2)).unwrap();
        let expected = sigma * sigma * m as f64;
        let got = est.constants.v_g.powi(2);
        assert!((got - expected).abs() <= 0.2 * expected, "V_g² = {got}, expected {expected}");
        assert_eq!(est.n_samples, 10_000);
    }

    #[test]
    fn estimate_constants_outer_bound_tracks_probe_radius() {
        let radius = 10.0;
        let p = LinearQuadratic::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.0, 0.0)
            .with_initial(DVector::from_vec(vec![radius, 0.0]));
        let est = estimate_constants(&p, 100, &mut rng(4)).unwrap();
        assert!((est.constants.c_f - radius).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn estimate_constants_rejects_small_sample() {
        let p = LinearQuadratic::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.0, 0.0);
        assert!(matches!(estimate_constants(&p, 99, &mut rng(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn as_multi_level_matches_two_level_gradient() {
        let f = FiniteFixture::new(Manifold::spd(2), 3, 5, 5, 8);
        let x = f.initial_point();
        let two = composite_rgrad_exact(&f, &x).unwrap();
        let chained = AsMultiLevel(f.clone());
        validate_multi(&chained).unwrap();
        let multi = multi_composite_rgrad_exact(&chained, &x).unwrap();
        assert!((two.coords() - multi.coords()).norm() < 1e-14);
        assert!((exact_objective(&f, &x).unwrap() - multi_exact_objective(&chained, &x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn multi_level_gradient_matches_finite_differences() {
        let chain = crate::fixtures::SpdChain::standard(4, 0.0);
        validate_multi(&chain).unwrap();
        let x = Point::from_matrix(&DMatrix::from_row_slice(2, 2, &[1.2, 0.1, 0.1, 0.9])).unwrap();
        let g = multi_composite_rgrad_exact(&chain, &x).unwrap();
        let mut r = rng(5);
        for _ in 0..5 {
            let v = random_tangent(&x, &mut r);
            let h = 1e-6;
            let fp = multi_exact_objective(&chain, &exp_map(&x, &v.scale(h)).unwrap()).unwrap();
            let fm = multi_exact_objective(&chain, &exp_map(&x, &v.scale(-h)).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = manifold::inner(&x, &v, &g).unwrap();
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()));
        }
    }
}

//! Policy evaluation on a synthetic grid MDP with a Gaussian RBF value model.
//!
//! The value function is approximated by `φ(s; Λ) = Σ_i w_i N(s; μ_i, Σ)` with
//! one covariance `Σ ∈ SPD(2)` shared by all bases. The Bellman residual
//!
//! ```text
//! g_s(Σ) = φ(s) - Σ_{s'} P̂(s,s') (r̂(s,s') + ρ φ(s'))
//! ```
//!
//! is observed through noisy transition and reward samples
//! `P̂ = P + dP`, `r̂ = r + dr`, and the objective is `F(Σ) = |E g(Σ)|²`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::composition::{ProblemConstants, TwoLevelProblem};
use crate::error::{Error, Result};
use crate::manifold::{egrad_to_rgrad, tangent_basis, Manifold, Point, Tangent};
use crate::matfun::min_eigenvalue;
use crate::rng::SampleRng;

/// Densities below this value are flushed to zero.
pub const DENSITY_FLOOR: f64 = 1e-300;
/// Smallest eigenvalue of `Σ` accepted by the adjoint.
pub const MIN_SIGMA_EIG: f64 = 1e-10;

pub const DEFAULT_GRID_SIDE: usize = 7;
pub const DEFAULT_BASES: usize = 5;
pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_SIGMA_P: f64 = 0.01;
pub const DEFAULT_SIGMA_R: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMdp {
    pub grid_side: usize,
    /// State coordinates, row-major over the grid.
    pub coords: Vec<[f64; 2]>,
    pub p_true: DMatrix<f64>,
    pub r_true: DMatrix<f64>,
    pub rho: f64,
    pub sigma_p: f64,
    pub sigma_r: f64,
    pub v_true: DVector<f64>,
}

impl GridMdp {
    pub fn num_states(&self) -> usize {
        self.coords.len()
    }

    /// `max_s |V(s) - Σ_{s'} P(s,s') (r(s,s') + ρ V(s'))|`.
    pub fn bellman_residual(&self) -> f64 {
        let h = self.p_true.component_mul(&self.r_true).column_sum() + &self.p_true * &self.v_true * self.rho;
        (&self.v_true - h).amax()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfValueModel {
    pub weights: Vec<f64>,
    pub centers: Vec<[f64; 2]>,
    /// Shared covariance, row-major.
    pub sigma: [[f64; 2]; 2],
}

impl RbfValueModel {
    pub fn num_bases(&self) -> usize {
        self.weights.len()
    }

    pub fn sigma_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma[0][0], self.sigma[0][1], self.sigma[1][0], self.sigma[1][1])
    }

    pub fn sigma_point(&self) -> Point {
        let m = self.sigma_matrix();
        Point::from_matrix(&DMatrix::from_column_slice(2, 2, m.as_slice())).expect("model covariance is SPD")
    }

    /// Values `φ(s; Λ)` at every state.
    pub fn values(&self, coords: &[[f64; 2]]) -> Result<DVector<f64>> {
        let params = RbfParams::from_model(self)?;
        Ok(params.values(coords))
    }
}

/// `(w, μ, Σ)` with `Σ⁻¹` and `det Σ` cached.
#[derive(Debug, Clone)]
struct RbfParams {
    weights: Vec<f64>,
    centers: Vec<Vector2<f64>>,
    sigma_inv: Matrix2<f64>,
    norm: f64,
}

impl RbfParams {
    fn new(weights: Vec<f64>, centers: Vec<Vector2<f64>>, sigma: Matrix2<f64>) -> Result<Self> {
        let sym = (sigma + sigma.transpose()) * 0.5;
        let det = sym.determinant();
        if !(det > 0.0 && sym[(0, 0)] > 0.0) {
            return Err(Error::NumericalDomain("RBF covariance is not positive definite".into()));
        }
        let sigma_inv = sym.try_inverse().ok_or_else(|| Error::NumericalDomain("singular RBF covariance".into()))?;
        Ok(Self { weights, centers, sigma_inv, norm: 1.0 / (2.0 * PI * det.sqrt()) })
    }

    fn from_model(model: &RbfValueModel) -> Result<Self> {
        Self::new(
            model.weights.clone(),
            model.centers.iter().map(|c| Vector2::new(c[0], c[1])).collect(),
            model.sigma_matrix(),
        )
    }

    fn density(&self, s: &[f64; 2], i: usize) -> f64 {
        let d = Vector2::new(s[0], s[1]) - self.centers[i];
        let q = d.dot(&(self.sigma_inv * d));
        let v = self.norm * (-0.5 * q).exp();
        if v < DENSITY_FLOOR {
            0.0
        } else {
            v
        }
    }

    fn values(&self, coords: &[[f64; 2]]) -> DVector<f64> {
        DVector::from_iterator(
            coords.len(),
            coords.iter().map(|s| (0..self.weights.len()).map(|i| self.weights[i] * self.density(s, i)).sum::<f64>()),
        )
    }
}

fn check_instance_args(grid_side: usize, bases: usize, rho: f64, sigma_p: f64, sigma_r: f64) -> Result<()> {
    if grid_side < 2 {
        return Err(Error::Contract(format!("grid_side must be at least 2, got {grid_side}")));
    }
    if bases < 1 {
        return Err(Error::Contract("need at least one basis function".into()));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Contract(format!("discount rho = {rho} must lie in (0, 1)")));
    }
    if !(sigma_p >= 0.0 && sigma_r >= 0.0 && sigma_p.is_finite() && sigma_r.is_finite()) {
        return Err(Error::Contract("noise levels must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Random grid MDP and its true RBF value model.
///
/// Weights are uniform on `[0.5, 1.5]`, centers uniform on the grid box,
/// `Σ_true = A Aᵀ + ½ I` with Gaussian `A`, transition rows are positive and
/// normalized, and `r(s,s') = V(s) - ρ V(s')` so the Bellman equation holds.
pub fn generate_instance(
    grid_side: usize,
    bases: usize,
    rho: f64,
    sigma_p: f64,
    sigma_r: f64,
    seed: u64,
) -> Result<(GridMdp, RbfValueModel)> {
    check_instance_args(grid_side, bases, rho, sigma_p, sigma_r)?;
    let mut rng = SampleRng::seed_from_u64(seed);
    let side = (grid_side - 1) as f64;
    let coords: Vec<[f64; 2]> =
        (0..grid_side).flat_map(|i| (0..grid_side).map(move |j| [i as f64, j as f64])).collect();
    let weights: Vec<f64> = (0..bases).map(|_| rng.random_range(0.5..1.5)).collect();
    let centers: Vec<[f64; 2]> =
        (0..bases).map(|_| [rng.random_range(0.0..=side), rng.random_range(0.0..=side)]).collect();
    let a = Matrix2::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = a * a.transpose() + Matrix2::identity() * 0.5;
    let model =
        RbfValueModel { weights, centers, sigma: [[sigma[(0, 0)], sigma[(0, 1)]], [sigma[(1, 0)], sigma[(1, 1)]]] };
    let v_true = model.values(&coords)?;
    let n = coords.len();
    let mut p_true = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.01..1.0));
    for mut row in p_true.row_iter_mut() {
        let total: f64 = row.sum();
        row /= total;
    }
    let r_true = DMatrix::from_fn(n, n, |s, t| v_true[s] - rho * v_true[t]);
    let mdp = GridMdp { grid_side, coords, p_true, r_true, rho, sigma_p, sigma_r, v_true };
    Ok((mdp, model))
}

fn sigma_from_point(sigma: &Point) -> Result<Matrix2<f64>> {
    let m = sigma
        .as_matrix()
        .filter(|m| m.shape() == (2, 2))
        .ok_or_else(|| Error::Contract(format!("expected a point on SPD(2), got {}", sigma.manifold())))?;
    Ok(Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]))
}

fn residual(mdp: &GridMdp, phi: &DVector<f64>, p_hat: &DMatrix<f64>, r_hat: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = mdp.num_states();
    if p_hat.shape() != (n, n) || r_hat.shape() != (n, n) {
        return Err(Error::DimensionMismatch { expected: n * n, got: p_hat.len().min(r_hat.len()) });
    }
    let h = p_hat.component_mul(r_hat).column_sum() + p_hat * phi * mdp.rho;
    Ok(phi - h)
}

/// `g(Σ)` for sampled `P̂`, `r̂` with the model's weights and centers.
pub fn g_value(
    mdp: &GridMdp,
    model: &RbfValueModel,
    sigma: &Point,
    p_hat: &DMatrix<f64>,
    r_hat: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let params = RbfParams::new(
        model.weights.clone(),
        model.centers.iter().map(|c| Vector2::new(c[0], c[1])).collect(),
        sigma_from_point(sigma)?,
    )?;
    residual(mdp, &params.values(&mdp.coords), p_hat, r_hat)
}

/// Euclidean gradients of `<g, u>` with respect to `(w, μ, Σ)`.
struct ParamGrads {
    weights: DVector<f64>,
    centers: DVector<f64>,
    sigma: Matrix2<f64>,
}

fn param_grads(mdp: &GridMdp, params: &RbfParams, p_hat: &DMatrix<f64>, u: &DVector<f64>) -> Result<ParamGrads> {
    let n = mdp.num_states();
    if u.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: u.len() });
    }
    let coef = u - p_hat.tr_mul(u) * mdp.rho;
    let d = params.weights.len();
    let mut weights = DVector::zeros(d);
    let mut centers = DVector::zeros(2 * d);
    let mut sigma = Matrix2::zeros();
    let inv = params.sigma_inv;
    for (s, pos) in mdp.coords.iter().enumerate() {
        let c = coef[s];
        if c == 0.0 {
            continue;
        }
        for i in 0..d {
            let dens = params.density(pos, i);
            if dens == 0.0 {
                continue;
            }
            let diff = Vector2::new(pos[0], pos[1]) - params.centers[i];
            let z = inv * diff;
            weights[i] += c * dens;
            let wd = c * params.weights[i] * dens;
            centers[2 * i] += wd * z[0];
            centers[2 * i + 1] += wd * z[1];
            sigma += (z * z.transpose() - inv) * (0.5 * wd);
        }
    }
    Ok(ParamGrads { weights, centers, sigma })
}

fn check_sigma_conditioning(sigma: &Matrix2<f64>) -> Result<()> {
    let m = DMatrix::from_column_slice(2, 2, sigma.as_slice());
    let lo = min_eigenvalue(&m);
    if lo < MIN_SIGMA_EIG {
        return Err(Error::NumericalDomain(format!("covariance min eigenvalue {lo:e} below {MIN_SIGMA_EIG:e}")));
    }
    Ok(())
}

/// `(Dg(Σ))^* u` on `SPD(2)`.
pub fn g_adjoint(
    mdp: &GridMdp,
    model: &RbfValueModel,
    sigma: &Point,
    p_hat: &DMatrix<f64>,
    u: &DVector<f64>,
) -> Result<Tangent> {
    let s = sigma_from_point(sigma)?;
    check_sigma_conditioning(&s)?;
    let params =
        RbfParams::new(model.weights.clone(), model.centers.iter().map(|c| Vector2::new(c[0], c[1])).collect(), s)?;
    let grads = param_grads(mdp, &params, p_hat, u)?;
    egrad_to_rgrad(sigma, &DVector::from_column_slice(grads.sigma.as_slice()))
}

/// `f(y) = |y|²`.
pub fn outer_sq_norm(y: &DVector<f64>) -> f64 {
    y.norm_squared()
}

/// `∇f(y) = 2 y`.
pub fn outer_sq_norm_grad(y: &DVector<f64>) -> DVector<f64> {
    y * 2.0
}

/// How `P̂` and `r̂` are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// i.i.d. `N(0, σ²)` on every entry.
    Gaussian,
    /// i.i.d. `±σ` with equal probability on every entry.
    TwoPoint,
}

/// Which parameters are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamMode {
    /// `Σ ∈ SPD(2)` with weights and centers fixed at their true values.
    SharedSigma,
    /// `(w, μ, Σ)` on `Euclidean(D) × Euclidean(2D) × SPD(2)`.
    Full,
}

/// Sampled perturbations of the transition and reward matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySample {
    /// No perturbation; the exact oracle.
    Exact,
    Noisy {
        dp: DMatrix<f64>,
        dr: DMatrix<f64>,
    },
}

/// The policy-evaluation objective as a two-level problem.
#[derive(Debug, Clone)]
pub struct PolicyEvalProblem {
    pub mdp: GridMdp,
    pub truth: RbfValueModel,
    pub mode: ParamMode,
    pub noise: NoiseModel,
    domain: Manifold,
    codomain: Manifold,
    x0: Point,
    constants: ProblemConstants,
}

impl PolicyEvalProblem {
    /// Shared-`Σ` problem starting from `Σ = I`.
    pub fn new(mdp: GridMdp, truth: RbfValueModel) -> Self {
        let x0 = Point::from_matrix(&DMatrix::identity(2, 2)).expect("identity is SPD");
        Self::with_options(mdp, truth, ParamMode::SharedSigma, NoiseModel::Gaussian, x0).expect("valid defaults")
    }

    pub fn with_options(
        mdp: GridMdp,
        truth: RbfValueModel,
        mode: ParamMode,
        noise: NoiseModel,
        x0: Point,
    ) -> Result<Self> {
        let d = truth.num_bases();
        let domain = match mode {
            ParamMode::SharedSigma => Manifold::spd(2),
            ParamMode::Full => {
                Manifold::product(vec![Manifold::euclidean(d), Manifold::euclidean(2 * d), Manifold::spd(2)])
            }
        };
        if x0.manifold() != &domain {
            return Err(Error::Contract(format!(
                "initial point lives on {} but the domain is {domain}",
                x0.manifold()
            )));
        }
        let codomain = Manifold::euclidean(mdp.num_states());
        let mut p = Self { mdp, truth, mode, noise, domain, codomain, x0, constants: ProblemConstants::default() };
        p.constants = p.initial_constants()?;
        Ok(p)
    }

    /// Starts the full-parameter mode from the true weights and centers and
    /// the given covariance.
    pub fn full_start(truth: &RbfValueModel, sigma: &Point) -> Result<Point> {
        let mut coords: Vec<f64> = truth.weights.clone();
        for c in &truth.centers {
            coords.extend_from_slice(c);
        }
        coords.extend(sigma.coords().iter());
        let d = truth.num_bases();
        Point::from_slice(
            Manifold::product(vec![Manifold::euclidean(d), Manifold::euclidean(2 * d), Manifold::spd(2)]),
            &coords,
        )
    }

    /// The point holding the true parameters in this problem's domain.
    pub fn true_point(&self) -> Point {
        match self.mode {
            ParamMode::SharedSigma => self.truth.sigma_point(),
            ParamMode::Full => {
                Self::full_start(&self.truth, &self.truth.sigma_point()).expect("true parameters are valid")
            }
        }
    }

    fn params_at(&self, x: &Point) -> Result<RbfParams> {
        let d = self.truth.num_bases();
        match self.mode {
            ParamMode::SharedSigma => RbfParams::new(
                self.truth.weights.clone(),
                self.truth.centers.iter().map(|c| Vector2::new(c[0], c[1])).collect(),
                sigma_from_point(x)?,
            ),
            ParamMode::Full => {
                let c = x.coords();
                if c.len() != 3 * d + 4 {
                    return Err(Error::DimensionMismatch { expected: 3 * d + 4, got: c.len() });
                }
                let weights = c.rows(0, d).iter().copied().collect();
                let centers = (0..d).map(|i| Vector2::new(c[d + 2 * i], c[d + 2 * i + 1])).collect();
                let s = Matrix2::new(c[3 * d], c[3 * d + 2], c[3 * d + 1], c[3 * d + 3]);
                RbfParams::new(weights, centers, s)
            }
        }
    }

    fn perturbed(&self, phi: &PolicySample) -> (DMatrix<f64>, DMatrix<f64>) {
        match phi {
            PolicySample::Exact => (self.mdp.p_true.clone(), self.mdp.r_true.clone()),
            PolicySample::Noisy { dp, dr } => (&self.mdp.p_true + dp, &self.mdp.r_true + dr),
        }
    }

    /// `E[g(x)]` under [`NoiseModel::TwoPoint`], enumerated exactly.
    ///
    /// Entry `(s, s')` of the perturbation enters only the summand
    /// `P̂(s,s') (r̂(s,s') + ρ φ(s'))` of `g_s`, so the expectation factorizes
    /// into four equally likely sign pairs per entry.
    pub fn two_point_expectation(&self, x: &Point) -> Result<DVector<f64>> {
        let phi = self.params_at(x)?.values(&self.mdp.coords);
        let n = self.mdp.num_states();
        let (sp, sr) = (self.mdp.sigma_p, self.mdp.sigma_r);
        let mut out = phi.clone();
        for s in 0..n {
            let mut acc = 0.0;
            for t in 0..n {
                let (p, r) = (self.mdp.p_true[(s, t)], self.mdp.r_true[(s, t)]);
                for (a, b) in [(sp, sr), (sp, -sr), (-sp, sr), (-sp, -sr)] {
                    acc += 0.25 * (p + a) * (r + b + self.mdp.rho * phi[t]);
                }
            }
            out[s] -= acc;
        }
        Ok(out)
    }

    /// Exact variance `E|g_φ(x) - g(x)|²` of the inner oracle at `x`.
    pub fn inner_variance(&self, x: &Point) -> Result<f64> {
        let phi = self.params_at(x)?.values(&self.mdp.coords);
        let (sp2, sr2) = (self.mdp.sigma_p.powi(2), self.mdp.sigma_r.powi(2));
        let n = self.mdp.num_states();
        let mut total = 0.0;
        for s in 0..n {
            for t in 0..n {
                let q = self.mdp.r_true[(s, t)] + self.mdp.rho * phi[t];
                total += sp2 * q * q + self.mdp.p_true[(s, t)].powi(2) * sr2 + sp2 * sr2;
            }
        }
        Ok(total)
    }

    /// Constants evaluated at the initial point: exact `V_g`, `C_g` from the
    /// exact Jacobian in an orthonormal tangent basis, and `C_f = 2|g(x0)|`.
    fn initial_constants(&self) -> Result<ProblemConstants> {
        let x = &self.x0;
        let g0 = self.inner_value(x, &PolicySample::Exact)?;
        let basis = tangent_basis(x);
        let m = self.codomain.ambient_dim();
        let mut jac = DMatrix::zeros(m, basis.len());
        for (j, b) in basis.iter().enumerate() {
            let col = crate::composition::fd_inner_differential(
                self,
                x,
                &PolicySample::Exact,
                b,
                crate::composition::FD_STEP,
            )?;
            jac.set_column(j, &col);
        }
        let c_g = jac.singular_values().max();
        Ok(ProblemConstants {
            l_obj: 0.0,
            l_f: 2.0,
            v_g: self.inner_variance(x)?.sqrt(),
            c_g,
            c_f: 2.0 * g0.norm(),
            t: 1.0,
        })
    }
}

impl TwoLevelProblem for PolicyEvalProblem {
    type InnerSample = PolicySample;
    type OuterSample = ();

    fn domain(&self) -> &Manifold {
        &self.domain
    }

    fn inner_codomain(&self) -> &Manifold {
        &self.codomain
    }

    fn draw_inner(&self, rng: &mut SampleRng) -> PolicySample {
        let n = self.mdp.num_states();
        let (sp, sr) = (self.mdp.sigma_p, self.mdp.sigma_r);
        match self.noise {
            NoiseModel::Gaussian => PolicySample::Noisy {
                dp: DMatrix::from_fn(n, n, |_, _| sp * rng.sample::<f64, _>(StandardNormal)),
                dr: DMatrix::from_fn(n, n, |_, _| sr * rng.sample::<f64, _>(StandardNormal)),
            },
            NoiseModel::TwoPoint => PolicySample::Noisy {
                dp: DMatrix::from_fn(n, n, |_, _| if rng.random::<bool>() { sp } else { -sp }),
                dr: DMatrix::from_fn(n, n, |_, _| if rng.random::<bool>() { sr } else { -sr }),
            },
        }
    }

    fn draw_outer(&self, _rng: &mut SampleRng) {}

    fn inner_value(&self, x: &Point, phi: &PolicySample) -> Result<DVector<f64>> {
        let values = self.params_at(x)?.values(&self.mdp.coords);
        match phi {
            PolicySample::Exact => residual(&self.mdp, &values, &self.mdp.p_true, &self.mdp.r_true),
            PolicySample::Noisy { .. } => {
                let (p, r) = self.perturbed(phi);
                residual(&self.mdp, &values, &p, &r)
            }
        }
    }

    fn inner_pullback_egrad(&self, x: &Point, phi: &PolicySample, u: &DVector<f64>) -> Result<DVector<f64>> {
        let params = self.params_at(x)?;
        let p_hat = match phi {
            PolicySample::Exact => self.mdp.p_true.clone(),
            PolicySample::Noisy { dp, .. } => &self.mdp.p_true + dp,
        };
        let grads = param_grads(&self.mdp, &params, &p_hat, u)?;
        let d = self.truth.num_bases();
        match self.mode {
            ParamMode::SharedSigma => {
                check_sigma_conditioning(&sigma_from_point(x)?)?;
                Ok(DVector::from_column_slice(grads.sigma.as_slice()))
            }
            ParamMode::Full => {
                let c = x.coords();
                let s = Matrix2::new(c[3 * d], c[3 * d + 2], c[3 * d + 1], c[3 * d + 3]);
                check_sigma_conditioning(&s)?;
                let mut out = DVector::zeros(3 * d + 4);
                out.rows_mut(0, d).copy_from(&grads.weights);
                out.rows_mut(d, 2 * d).copy_from(&grads.centers);
                out.rows_mut(3 * d, 4).copy_from_slice(grads.sigma.as_slice());
                Ok(out)
            }
        }
    }

    fn outer_grad(&self, y: &DVector<f64>, _xi: &()) -> Result<DVector<f64>> {
        Ok(outer_sq_norm_grad(y))
    }

    fn outer_value(&self, y: &DVector<f64>, _xi: &()) -> Result<f64> {
        Ok(outer_sq_norm(y))
    }

    fn exact_inner_sample(&self) -> Option<PolicySample> {
        Some(PolicySample::Exact)
    }

    fn exact_outer_sample(&self) -> Option<()> {
        Some(())
    }

    fn constants(&self) -> ProblemConstants {
        self.constants
    }

    fn initial_point(&self) -> Point {
        self.x0.clone()
    }
}

/// Self-describing JSON form of a generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub format: String,
    pub seed: u64,
    pub grid_side: usize,
    pub num_states: usize,
    pub rho: f64,
    pub sigma_p: f64,
    pub sigma_r: f64,
    pub coords: Vec<[f64; 2]>,
    /// Row-major transition matrix.
    pub p_true: Vec<Vec<f64>>,
    pub r_true: Vec<Vec<f64>>,
    pub v_true: Vec<f64>,
    pub model: RbfValueModel,
}

pub const INSTANCE_FORMAT: &str = "riescomp.policy_eval.v1";

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Contract(format!("expected a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl InstanceFile {
    pub fn new(mdp: &GridMdp, model: &RbfValueModel, seed: u64) -> Self {
        Self {
            format: INSTANCE_FORMAT.into(),
            seed,
            grid_side: mdp.grid_side,
            num_states: mdp.num_states(),
            rho: mdp.rho,
            sigma_p: mdp.sigma_p,
            sigma_r: mdp.sigma_r,
            coords: mdp.coords.clone(),
            p_true: rows(&mdp.p_true),
            r_true: rows(&mdp.r_true),
            v_true: mdp.v_true.iter().copied().collect(),
            model: model.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(GridMdp, RbfValueModel)> {
        if self.format != INSTANCE_FORMAT {
            return Err(Error::Contract(format!("unknown instance format {:?}", self.format)));
        }
        let n = self.num_states;
        if self.coords.len() != n || self.v_true.len() != n {
            return Err(Error::Contract("instance state count is inconsistent".into()));
        }
        let mdp = GridMdp {
            grid_side: self.grid_side,
            coords: self.coords,
            p_true: from_rows(&self.p_true, n)?,
            r_true: from_rows(&self.r_true, n)?,
            rho: self.rho,
            sigma_p: self.sigma_p,
            sigma_r: self.sigma_r,
            v_true: DVector::from_vec(self.v_true),
        };
        Ok((mdp, self.model))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Contract(format!("malformed instance file: {e}")))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = self.to_json().map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

//! Shipped problem instances used by tests, the acceptance suite and the CLI.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

use crate::composition::{
    gaussian_vector, FiniteTwoLevel, LevelConstants, MultiLevelProblem, ProblemConstants, TwoLevelProblem,
};
use crate::error::{Error, Result};
use crate::manifold::{Manifold, Point};
use crate::rng::SampleRng;

fn check_dim(v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    Ok(())
}

/// `g_φ(x) = A x + σ_g z`, `f_ξ(y) = ½|y - b|² + σ_f <ζ, y>` on `R^n`.
#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    domain: Manifold,
    codomain: Manifold,
    pub a: DMatrix<f64>,
    pub target: DVector<f64>,
    pub inner_noise: f64,
    pub outer_noise: f64,
    pub x0: DVector<f64>,
    pub constants: ProblemConstants,
}

impl LinearQuadratic {
    pub fn new(a: DMatrix<f64>, target: DVector<f64>, inner_noise: f64, outer_noise: f64) -> Self {
        let (m, n) = a.shape();
        assert_eq!(target.len(), m, "target length must match rows of A");
        let op = a.clone().svd(false, false).singular_values.max();
        let x0 = DVector::zeros(n);
        let c_f = (&a * &x0 - &target).norm() * 2.0 + outer_noise * (m as f64).sqrt();
        let constants =
            ProblemConstants { l_obj: op * op, l_f: 1.0, v_g: inner_noise * (m as f64).sqrt(), c_g: op, c_f, t: 1.0 };
        Self {
            domain: Manifold::euclidean(n),
            codomain: Manifold::euclidean(m),
            a,
            target,
            inner_noise,
            outer_noise,
            x0,
            constants,
        }
    }

    pub fn with_initial(mut self, x0: DVector<f64>) -> Self {
        assert_eq!(x0.len(), self.a.ncols());
        self.x0 = x0;
        self
    }
}

impl TwoLevelProblem for LinearQuadratic {
    type InnerSample = DVector<f64>;
    type OuterSample = DVector<f64>;

    fn domain(&self) -> &Manifold {
        &self.domain
    }

    fn inner_codomain(&self) -> &Manifold {
        &self.codomain
    }

    fn draw_inner(&self, rng: &mut SampleRng) -> DVector<f64> {
        gaussian_vector(rng, self.a.nrows()) * self.inner_noise
    }

    fn draw_outer(&self, rng: &mut SampleRng) -> DVector<f64> {
        gaussian_vector(rng, self.a.nrows()) * self.outer_noise
    }

    fn inner_value(&self, x: &Point, phi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x.coords(), self.a.ncols())?;
        Ok(&self.a * x.coords() + phi)
    }

    fn inner_pullback_egrad(&self, _x: &Point, _phi: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(u, self.a.nrows())?;
        Ok(self.a.tr_mul(u))
    }

    fn outer_grad(&self, y: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(y, self.a.nrows())?;
        Ok(y - &self.target + xi)
    }

    fn outer_value(&self, y: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        check_dim(y, self.a.nrows())?;
        Ok(0.5 * (y - &self.target).norm_squared() + xi.dot(y))
    }

    fn exact_inner_sample(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.a.nrows()))
    }

    fn exact_outer_sample(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.a.nrows()))
    }

    fn constants(&self) -> ProblemConstants {
        self.constants
    }

    fn initial_point(&self) -> Point {
        Point::new(self.domain.clone(), self.x0.clone()).expect("Euclidean point")
    }
}

/// Sample token of [`FiniteFixture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiniteSample {
    Outcome(usize),
    /// The parameter-averaged (exact) oracle.
    Mean,
}

/// Two-level problem with finite, uniformly weighted sample spaces.
///
/// `g_φ(x) = A_φ x + b_φ` on the ambient coordinates of the domain and
/// `f_ξ(y) = Σ log cosh(y_i) + <a_ξ, y> + ½ c_ξ |y|²`. The exact oracle uses
/// the averaged parameters `(Ā, b̄, ā, c̄)`.
#[derive(Debug, Clone)]
pub struct FiniteFixture {
    domain: Manifold,
    codomain: Manifold,
    inner_a: Vec<DMatrix<f64>>,
    inner_b: Vec<DVector<f64>>,
    outer_a: Vec<DVector<f64>>,
    outer_c: Vec<f64>,
    mean_a: DMatrix<f64>,
    mean_b: DVector<f64>,
    mean_outer_a: DVector<f64>,
    mean_c: f64,
    x0: Point,
}

impl FiniteFixture {
    /// Random fixture with `n_phi` inner and `n_xi` outer outcomes (each at
    /// most 32) mapping `domain` into `R^m`.
    pub fn new(domain: Manifold, m: usize, n_phi: usize, n_xi: usize, seed: u64) -> Self {
        assert!((1..=32).contains(&n_phi) && (1..=32).contains(&n_xi), "at most 32 outcomes per space");
        let mut rng = SampleRng::seed_from_u64(seed);
        let n = domain.ambient_dim();
        let scale = 0.5 / (n as f64).sqrt();
        let inner_a: Vec<_> = (0..n_phi)
            .map(|_| DMatrix::from_iterator(m, n, gaussian_vector(&mut rng, m * n).iter().map(|v| v * scale)))
            .collect();
        let inner_b: Vec<_> = (0..n_phi).map(|_| gaussian_vector(&mut rng, m) * 0.3).collect();
        let outer_a: Vec<_> = (0..n_xi).map(|_| gaussian_vector(&mut rng, m) * 0.3).collect();
        let outer_c: Vec<f64> = (0..n_xi).map(|_| rng.random_range(0.1..1.0)).collect();
        let mean_a = inner_a.iter().fold(DMatrix::zeros(m, n), |acc, a| acc + a) / n_phi as f64;
        let mean_b = inner_b.iter().fold(DVector::zeros(m), |acc, b| acc + b) / n_phi as f64;
        let mean_outer_a = outer_a.iter().fold(DVector::zeros(m), |acc, a| acc + a) / n_xi as f64;
        let mean_c = outer_c.iter().sum::<f64>() / n_xi as f64;
        let x0 = domain.random_point(&mut rng);
        Self {
            domain,
            codomain: Manifold::euclidean(m),
            inner_a,
            inner_b,
            outer_a,
            outer_c,
            mean_a,
            mean_b,
            mean_outer_a,
            mean_c,
            x0,
        }
    }

    fn inner_params(&self, phi: &FiniteSample) -> (&DMatrix<f64>, &DVector<f64>) {
        match phi {
            FiniteSample::Outcome(i) => (&self.inner_a[*i], &self.inner_b[*i]),
            FiniteSample::Mean => (&self.mean_a, &self.mean_b),
        }
    }

    fn outer_params(&self, xi: &FiniteSample) -> (&DVector<f64>, f64) {
        match xi {
            FiniteSample::Outcome(i) => (&self.outer_a[*i], self.outer_c[*i]),
            FiniteSample::Mean => (&self.mean_outer_a, self.mean_c),
        }
    }
}

impl TwoLevelProblem for FiniteFixture {
    type InnerSample = FiniteSample;
    type OuterSample = FiniteSample;

    fn domain(&self) -> &Manifold {
        &self.domain
    }

    fn inner_codomain(&self) -> &Manifold {
        &self.codomain
    }

    fn draw_inner(&self, rng: &mut SampleRng) -> FiniteSample {
        FiniteSample::Outcome(rng.random_range(0..self.inner_a.len()))
    }

    fn draw_outer(&self, rng: &mut SampleRng) -> FiniteSample {
        FiniteSample::Outcome(rng.random_range(0..self.outer_a.len()))
    }

    fn inner_value(&self, x: &Point, phi: &FiniteSample) -> Result<DVector<f64>> {
        let (a, b) = self.inner_params(phi);
        check_dim(x.coords(), a.ncols())?;
        Ok(a * x.coords() + b)
    }

    fn inner_pullback_egrad(&self, _x: &Point, phi: &FiniteSample, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, _) = self.inner_params(phi);
        check_dim(u, a.nrows())?;
        Ok(a.tr_mul(u))
    }

    fn outer_grad(&self, y: &DVector<f64>, xi: &FiniteSample) -> Result<DVector<f64>> {
        let (a, c) = self.outer_params(xi);
        check_dim(y, a.len())?;
        Ok(y.map(f64::tanh) + a + y * c)
    }

    fn outer_value(&self, y: &DVector<f64>, xi: &FiniteSample) -> Result<f64> {
        let (a, c) = self.outer_params(xi);
        check_dim(y, a.len())?;
        let lc: f64 = y.iter().map(|v| v.cosh().ln()).sum();
        Ok(lc + a.dot(y) + 0.5 * c * y.norm_squared())
    }

    fn exact_inner_sample(&self) -> Option<FiniteSample> {
        Some(FiniteSample::Mean)
    }

    fn exact_outer_sample(&self) -> Option<FiniteSample> {
        Some(FiniteSample::Mean)
    }

    fn constants(&self) -> ProblemConstants {
        let c_max = self.outer_c.iter().copied().fold(0.0, f64::max);
        let c_g = self.inner_a.iter().map(|a| a.clone().svd(false, false).singular_values.max()).fold(0.0, f64::max);
        ProblemConstants { l_obj: 0.0, l_f: 1.0 + c_max, v_g: 0.0, c_g, c_f: 0.0, t: 1.0 }
    }

    fn initial_point(&self) -> Point {
        self.x0.clone()
    }
}

impl FiniteTwoLevel for FiniteFixture {
    fn inner_outcomes(&self) -> Vec<(f64, FiniteSample)> {
        let n = self.inner_a.len();
        (0..n).map(|i| (1.0 / n as f64, FiniteSample::Outcome(i))).collect()
    }

    fn outer_outcomes(&self) -> Vec<(f64, FiniteSample)> {
        let n = self.outer_a.len();
        (0..n).map(|i| (1.0 / n as f64, FiniteSample::Outcome(i))).collect()
    }
}

/// Pseudo-Huber outer function `Σ sqrt(1 + (y_i - t_i)²)`.
fn pseudo_huber(y: &DVector<f64>, t: &DVector<f64>) -> f64 {
    y.iter().zip(t.iter()).map(|(a, b)| (1.0 + (a - b).powi(2)).sqrt()).sum()
}

fn pseudo_huber_grad(y: &DVector<f64>, t: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        y.len(),
        y.iter().zip(t.iter()).map(|(a, b)| {
            let r = a - b;
            r / (1.0 + r * r).sqrt()
        }),
    )
}

/// Synthetic two-level problem on `SPD(d)`.
///
/// `g_φ(X) = vec(X) + σ_g z` with `z ~ N(0, I)` in `R^{d²}` and
/// `f_ξ(y) = Σ sqrt(1 + (y_i - t_i)²) + σ_f <ζ, y>`, so `F(X)` is a
/// pseudo-Huber distance from `X` to the target `T`, minimized at `X = T`.
#[derive(Debug, Clone)]
pub struct SpdTarget {
    domain: Manifold,
    codomain: Manifold,
    pub target: DMatrix<f64>,
    pub inner_noise: f64,
    pub outer_noise: f64,
    pub x0: Point,
}

impl SpdTarget {
    pub fn new(target: DMatrix<f64>, x0: Point, inner_noise: f64, outer_noise: f64) -> Self {
        let d = target.nrows();
        Self { domain: Manifold::spd(d), codomain: Manifold::euclidean(d * d), target, inner_noise, outer_noise, x0 }
    }

    /// The default `SPD(2)` instance: target `[[1.5, 0.3], [0.3, 0.8]]`,
    /// start at the identity.
    pub fn standard(inner_noise: f64, outer_noise: f64) -> Self {
        let target = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
        let x0 = Point::from_matrix(&DMatrix::identity(2, 2)).expect("identity is SPD");
        Self::new(target, x0, inner_noise, outer_noise)
    }

    fn target_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(self.target.as_slice())
    }
}

impl TwoLevelProblem for SpdTarget {
    type InnerSample = DVector<f64>;
    type OuterSample = DVector<f64>;

    fn domain(&self) -> &Manifold {
        &self.domain
    }

    fn inner_codomain(&self) -> &Manifold {
        &self.codomain
    }

    fn draw_inner(&self, rng: &mut SampleRng) -> DVector<f64> {
        gaussian_vector(rng, self.codomain.ambient_dim()) * self.inner_noise
    }

    fn draw_outer(&self, rng: &mut SampleRng) -> DVector<f64> {
        gaussian_vector(rng, self.codomain.ambient_dim()) * self.outer_noise
    }

    fn inner_value(&self, x: &Point, phi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x.coords(), self.codomain.ambient_dim())?;
        Ok(x.coords() + phi)
    }

    fn inner_pullback_egrad(&self, _x: &Point, _phi: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(u, self.codomain.ambient_dim())?;
        Ok(u.clone())
    }

    fn outer_grad(&self, y: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(y, self.codomain.ambient_dim())?;
        Ok(pseudo_huber_grad(y, &self.target_vec()) + xi)
    }

    fn outer_value(&self, y: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        check_dim(y, self.codomain.ambient_dim())?;
        Ok(pseudo_huber(y, &self.target_vec()) + xi.dot(y))
    }

    fn exact_inner_sample(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.codomain.ambient_dim()))
    }

    fn exact_outer_sample(&self) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.codomain.ambient_dim()))
    }

    /// Declared for the region `λ_max(X) <= 2`, where
    /// `|V|_F <= λ_max(X) |V|_X` bounds the differential of `vec`.
    fn constants(&self) -> ProblemConstants {
        let m = self.codomain.ambient_dim() as f64;
        ProblemConstants {
            l_obj: 4.0,
            l_f: 1.0,
            v_g: self.inner_noise * m.sqrt(),
            c_g: 2.0,
            c_f: (m * (1.0 + self.outer_noise * self.outer_noise)).sqrt(),
            t: 1.0,
        }
    }

    fn initial_point(&self) -> Point {
        self.x0.clone()
    }
}

/// Synthetic `N`-level chain on `SPD(d)`.
///
/// * level 1: `f_1(X) = vec(X) - vec(T) + σ z`
/// * levels `2..N-1`: `f_n(y) = y + ½ tanh(y) + σ z`
/// * level `N`: `f_N(z) = Σ sqrt(1 + z_i²) + σ <ζ, z>`
///
/// Every level vanishes at zero input, so `F` is minimized at `X = T`.
#[derive(Debug, Clone)]
pub struct SpdChain {
    domain: Manifold,
    codomain: Manifold,
    pub levels: usize,
    pub target: DMatrix<f64>,
    pub noise: f64,
    pub x0: Point,
}

/// `max |d²/dy² tanh(y)| = 4 / (3 sqrt 3)`.
const TANH_CURVATURE: f64 = 0.769_800_358_919_501;

impl SpdChain {
    pub fn new(levels: usize, target: DMatrix<f64>, x0: Point, noise: f64) -> Self {
        assert!(levels >= 2, "chain needs at least two levels");
        let d = target.nrows();
        Self { domain: Manifold::spd(d), codomain: Manifold::euclidean(d * d), levels, target, noise, x0 }
    }

    /// `SPD(2)` chain with the same target and start as [`SpdTarget::standard`].
    pub fn standard(levels: usize, noise: f64) -> Self {
        let target = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
        let x0 = Point::from_matrix(&DMatrix::identity(2, 2)).expect("identity is SPD");
        Self::new(levels, target, x0, noise)
    }

    fn width(&self) -> usize {
        self.codomain.ambient_dim()
    }
}

impl MultiLevelProblem for SpdChain {
    type Sample = DVector<f64>;

    fn domain(&self) -> &Manifold {
        &self.domain
    }

    fn first_codomain(&self) -> &Manifold {
        &self.codomain
    }

    fn level_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.width(); self.levels - 1];
        dims.push(1);
        dims
    }

    fn draw(&self, _level: usize, rng: &mut SampleRng) -> DVector<f64> {
        gaussian_vector(rng, self.width()) * self.noise
    }

    fn first_value(&self, x: &Point, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x.coords(), self.width())?;
        Ok(x.coords() - DVector::from_column_slice(self.target.as_slice()) + theta)
    }

    fn first_pullback_egrad(&self, _x: &Point, _theta: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(u, self.width())?;
        Ok(u.clone())
    }

    fn level_value(&self, level: usize, y: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(y, self.width())?;
        if level == self.levels {
            let zero = DVector::zeros(self.width());
            Ok(DVector::from_element(1, pseudo_huber(y, &zero) + theta.dot(y)))
        } else if (2..self.levels).contains(&level) {
            Ok(y + y.map(|v| 0.5 * v.tanh()) + theta)
        } else {
            Err(Error::Contract(format!("level {level} out of range 2..={}", self.levels)))
        }
    }

    fn level_vjp(
        &self,
        level: usize,
        y: &DVector<f64>,
        theta: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim(y, self.width())?;
        if level == self.levels {
            check_dim(u, 1)?;
            let zero = DVector::zeros(self.width());
            Ok((pseudo_huber_grad(y, &zero) + theta) * u[0])
        } else if (2..self.levels).contains(&level) {
            check_dim(u, self.width())?;
            Ok(y.zip_map(u, |v, w| (1.0 + 0.5 / v.cosh().powi(2)) * w))
        } else {
            Err(Error::Contract(format!("level {level} out of range 2..={}", self.levels)))
        }
    }

    fn exact_sample(&self, _level: usize) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.width()))
    }

    /// Declared for the region `λ_max(X) <= 2`.
    fn level_constants(&self) -> Vec<LevelConstants> {
        let m = self.width() as f64;
        let v = self.noise * m.sqrt();
        let mut out = vec![LevelConstants { l: 0.0, v, c: 2.0 }];
        for _ in 2..self.levels {
            out.push(LevelConstants { l: 0.5 * TANH_CURVATURE, v, c: 1.5 });
        }
        out.push(LevelConstants { l: 1.0, v, c: (m * (1.0 + self.noise * self.noise)).sqrt() });
        out
    }

    fn initial_point(&self) -> Point {
        self.x0.clone()
    }
}

/// Linear chain on `R^n`: `f_1(x) = A_1 x + σ z`, `f_n(y) = A_n y + σ z`
/// for `2 <= n < N`, and `f_N(z) = ½|z|² + σ <ζ, z>`.
#[derive(Debug, Clone)]
pub struct LinearChain {
    domain: Manifold,
    codomain: Manifold,
    pub maps: Vec<DMatrix<f64>>,
    pub noise: f64,
    pub x0: DVector<f64>,
}

impl LinearChain {
    /// `maps[0]` is `A_1`; the chain has `maps.len() + 1` levels.
    pub fn new(maps: Vec<DMatrix<f64>>, noise: f64, x0: DVector<f64>) -> Self {
        assert!(!maps.is_empty());
        for w in maps.windows(2) {
            assert_eq!(w[1].ncols(), w[0].nrows(), "chain dimensions must be compatible");
        }
        assert_eq!(x0.len(), maps[0].ncols());
        Self {
            domain: Manifold::euclidean(maps[0].ncols()),
            codomain: Manifold::euclidean(maps[0].nrows()),
            maps,
            noise,
            x0,
        }
    }

    fn levels(&self) -> usize {
        self.maps.len() + 1
    }

    /// Output width of level `n`.
    fn out_dim(&self, level: usize) -> usize {
        if level == self.levels() {
            1
        } else {
            self.maps[level - 1].nrows()
        }
    }
}

impl MultiLevelProblem for LinearChain {
    type Sample = DVector<f64>;

    fn domain(&self) -> &Manifold {
        &self.domain
    }

    fn first_codomain(&self) -> &Manifold {
        &self.codomain
    }

    fn level_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.maps.iter().map(|m| m.nrows()).collect();
        dims.push(1);
        dims
    }

    /// Level `n < N` draws a value perturbation of width `d_{n+1}`; level `N`
    /// draws a gradient perturbation of width `d_N`.
    fn draw(&self, level: usize, rng: &mut SampleRng) -> DVector<f64> {
        let width = if level == self.levels() { self.maps.last().unwrap().nrows() } else { self.out_dim(level) };
        gaussian_vector(rng, width) * self.noise
    }

    fn first_value(&self, x: &Point, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(x.coords(), self.maps[0].ncols())?;
        Ok(&self.maps[0] * x.coords() + theta)
    }

    fn first_pullback_egrad(&self, _x: &Point, _theta: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(u, self.maps[0].nrows())?;
        Ok(self.maps[0].tr_mul(u))
    }

    fn level_value(&self, level: usize, y: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if level == self.levels() {
            Ok(DVector::from_element(1, 0.5 * y.norm_squared() + theta.dot(y)))
        } else {
            let a = &self.maps[level - 1];
            check_dim(y, a.ncols())?;
            Ok(a * y + theta)
        }
    }

    fn level_vjp(
        &self,
        level: usize,
        y: &DVector<f64>,
        theta: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if level == self.levels() {
            Ok((y + theta) * u[0])
        } else {
            let a = &self.maps[level - 1];
            check_dim(u, a.nrows())?;
            Ok(a.tr_mul(u))
        }
    }

    fn exact_sample(&self, level: usize) -> Option<DVector<f64>> {
        let width = if level == self.levels() { self.maps.last().unwrap().nrows() } else { self.out_dim(level) };
        Some(DVector::zeros(width))
    }

    fn level_constants(&self) -> Vec<LevelConstants> {
        let mut out: Vec<LevelConstants> = self
            .maps
            .iter()
            .map(|a| LevelConstants {
                l: 0.0,
                v: self.noise * (a.nrows() as f64).sqrt(),
                c: a.clone().svd(false, false).singular_values.max(),
            })
            .collect();
        out.push(LevelConstants { l: 1.0, v: 0.0, c: 1.0 });
        out
    }

    fn initial_point(&self) -> Point {
        Point::new(self.domain.clone(), self.x0.clone()).expect("Euclidean point")
    }
}

/// Wraps a problem and perturbs its adjoint; a negative control for the
/// pairing and gradient checks.
#[derive(Debug, Clone)]
pub struct CorruptedAdjoint<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: TwoLevelProblem> TwoLevelProblem for CorruptedAdjoint<P> {
    type InnerSample = P::InnerSample;
    type OuterSample = P::OuterSample;

    fn domain(&self) -> &Manifold {
        self.inner.domain()
    }

    fn inner_codomain(&self) -> &Manifold {
        self.inner.inner_codomain()
    }

    fn draw_inner(&self, rng: &mut SampleRng) -> P::InnerSample {
        self.inner.draw_inner(rng)
    }

    fn draw_outer(&self, rng: &mut SampleRng) -> P::OuterSample {
        self.inner.draw_outer(rng)
    }

    fn inner_value(&self, x: &Point, phi: &P::InnerSample) -> Result<DVector<f64>> {
        self.inner.inner_value(x, phi)
    }

    fn inner_pullback_egrad(&self, x: &Point, phi: &P::InnerSample, u: &DVector<f64>) -> Result<DVector<f64>> {
        let eg = self.inner.inner_pullback_egrad(x, phi, u)?;
        // Scale and rotate the coordinates so the error is not a pure rescaling.
        let mut out = eg.clone() * self.factor;
        let n = out.len();
        if n > 1 {
            for i in 0..n {
                out[i] += 0.25 * eg[(i + 1) % n];
            }
        }
        Ok(out)
    }

    fn outer_grad(&self, y: &DVector<f64>, xi: &P::OuterSample) -> Result<DVector<f64>> {
        self.inner.outer_grad(y, xi)
    }

    fn outer_value(&self, y: &DVector<f64>, xi: &P::OuterSample) -> Result<f64> {
        self.inner.outer_value(y, xi)
    }

    fn exact_inner_sample(&self) -> Option<P::InnerSample> {
        self.inner.exact_inner_sample()
    }

    fn exact_outer_sample(&self) -> Option<P::OuterSample> {
        self.inner.exact_outer_sample()
    }

    fn constants(&self) -> ProblemConstants {
        self.inner.constants()
    }

    fn initial_point(&self) -> Point {
        self.inner.initial_point()
    }
}

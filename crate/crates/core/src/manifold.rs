//! Riemannian geometry kernels.
//!
//! Points and tangent vectors are stored in their ambient representation as
//! flat `DVector<f64>` coordinates. SPD matrices are flattened column-major,
//! and product manifolds concatenate the ambient coordinates of their factors.
//!
//! Supported manifolds:
//!
//! * `Euclidean(n)`: flat `R^n`.
//! * `Sphere(n)`: unit sphere in `R^n` (intrinsic dimension `n - 1`), with the
//!   round metric inherited from the embedding.
//! * `Spd(d)`: `d x d` symmetric positive-definite matrices with the
//!   affine-invariant metric `<U, V>_X = tr(X⁻¹ U X⁻¹ V)`.
//! * `Product(..)`: componentwise metric, exponential map and transport.
//!
//! All manifolds here are complete, so the exponential map is defined on the
//! whole tangent bundle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matfun;

/// Relative asymmetry above which an SPD candidate is rejected.
pub const SPD_SYMMETRY_TOL: f64 = 1e-8;
/// Allowed deviation of a sphere point from unit norm.
pub const SPHERE_NORM_TOL: f64 = 1e-12;
/// Allowed radial component of a sphere tangent (scaled by `max(1, |v|)`).
pub const SPHERE_TANGENT_TOL: f64 = 1e-10;
/// Allowed asymmetry of an SPD tangent (scaled by `max(1, |V|)`).
pub const SPD_TANGENT_TOL: f64 = 1e-12;
/// Diagonal floor added to random SPD points.
pub const RANDOM_SPD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    Euclidean(usize),
    Sphere(usize),
    Spd(usize),
    Product(Vec<Manifold>),
}

/// Descriptor of a manifold: its kind plus intrinsic and ambient dimensions.
#[derive(Debug, Clone)]
pub struct Manifold {
    kind: Arc<ManifoldKind>,
    intrinsic_dim: usize,
    ambient_dim: usize,
}

impl PartialEq for Manifold {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.kind, &other.kind) || self.kind == other.kind
    }
}

impl std::fmt::Display for Manifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind() {
            ManifoldKind::Euclidean(n) => write!(f, "Euclidean({n})"),
            ManifoldKind::Sphere(n) => write!(f, "Sphere({n})"),
            ManifoldKind::Spd(d) => write!(f, "SPD({d})"),
            ManifoldKind::Product(parts) => {
                write!(f, "Product(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl Manifold {
    pub fn new(kind: ManifoldKind) -> Result<Self> {
        let (intrinsic_dim, ambient_dim) = match &kind {
            ManifoldKind::Euclidean(n) => (*n, *n),
            ManifoldKind::Sphere(n) => (n.saturating_sub(1), *n),
            ManifoldKind::Spd(d) => (d * (d + 1) / 2, d * d),
            ManifoldKind::Product(parts) => {
                if parts.is_empty() {
                    return Err(Error::Contract("product manifold needs at least one factor".into()));
                }
                parts.iter().fold((0, 0), |(i, a), p| (i + p.intrinsic_dim, a + p.ambient_dim))
            }
        };
        if intrinsic_dim == 0 {
            return Err(Error::Contract(format!("manifold {kind:?} has intrinsic dimension 0")));
        }
        Ok(Self { kind: Arc::new(kind), intrinsic_dim, ambient_dim })
    }

    /// `R^n`. Panics if `n == 0`.
    pub fn euclidean(n: usize) -> Self {
        Self::new(ManifoldKind::Euclidean(n)).expect("Euclidean dimension must be positive")
    }

    /// Unit sphere in `R^n`. Panics if `n < 2`.
    pub fn sphere(n: usize) -> Self {
        Self::new(ManifoldKind::Sphere(n)).expect("sphere needs ambient dimension >= 2")
    }

    /// SPD matrices of size `d x d`. Panics if `d == 0`.
    pub fn spd(d: usize) -> Self {
        Self::new(ManifoldKind::Spd(d)).expect("SPD size must be positive")
    }

    /// Panics if `parts` is empty.
    pub fn product(parts: Vec<Manifold>) -> Self {
        Self::new(ManifoldKind::Product(parts)).expect("product needs at least one factor")
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Ambient index ranges of the product factors.
    fn component_ranges(parts: &[Manifold]) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        parts
            .iter()
            .map(|p| {
                let r = start..start + p.ambient_dim;
                start = r.end;
                r
            })
            .collect()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim, got: v.len() });
        }
        Ok(())
    }

    /// Validates ambient coordinates of a point, returning the canonical
    /// (symmetrized, for SPD) coordinates.
    pub fn validate_point(&self, coords: &[f64]) -> Result<DVector<f64>> {
        self.check_len(coords)?;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        match self.kind() {
            ManifoldKind::Euclidean(_) => Ok(DVector::from_column_slice(coords)),
            ManifoldKind::Sphere(_) => {
                let v = DVector::from_column_slice(coords);
                let dev = (v.norm() - 1.0).abs();
                if dev > SPHERE_NORM_TOL {
                    return Err(Error::NotOnManifold(format!("sphere point has |x| - 1 = {dev:e}")));
                }
                Ok(v)
            }
            ManifoldKind::Spd(d) => {
                let a = DMatrix::from_column_slice(*d, *d, coords);
                let asym = (&a - a.transpose()).norm();
                let scale = a.norm();
                if scale == 0.0 || asym / scale > SPD_SYMMETRY_TOL {
                    return Err(Error::NotOnManifold(format!(
                        "SPD candidate asymmetry {:e} exceeds tolerance",
                        if scale == 0.0 { f64::INFINITY } else { asym / scale }
                    )));
                }
                let s = matfun::symmetrize(&a);
                let min_eig = matfun::min_eigenvalue(&s);
                if min_eig.is_nan() || min_eig <= 0.0 {
                    return Err(Error::NotOnManifold(format!("SPD candidate has min eigenvalue {min_eig:e}")));
                }
                Ok(DVector::from_column_slice(s.as_slice()))
            }
            ManifoldKind::Product(parts) => {
                let mut out = DVector::zeros(self.ambient_dim);
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    let c = p.validate_point(&coords[r.clone()])?;
                    out.rows_mut(r.start, r.len()).copy_from(&c);
                }
                Ok(out)
            }
        }
    }

    fn validate_tangent(&self, x: &[f64], v: &[f64]) -> Result<()> {
        self.check_len(v)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("tangent coordinates".into()));
        }
        match self.kind() {
            ManifoldKind::Euclidean(_) => Ok(()),
            ManifoldKind::Sphere(_) => {
                let radial: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if radial.abs() > SPHERE_TANGENT_TOL * norm.max(1.0) {
                    return Err(Error::NotTangent(format!("sphere tangent has <v, x> = {radial:e}")));
                }
                Ok(())
            }
            ManifoldKind::Spd(d) => {
                let a = DMatrix::from_column_slice(*d, *d, v);
                let asym = (&a - a.transpose()).norm();
                if asym > SPD_TANGENT_TOL * a.norm().max(1.0) {
                    return Err(Error::NotTangent(format!("SPD tangent asymmetry {asym:e}")));
                }
                Ok(())
            }
            ManifoldKind::Product(parts) => {
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    p.validate_tangent(&x[r.clone()], &v[r])?;
                }
                Ok(())
            }
        }
    }

    /// Riemannian inner product on raw coordinates (no validation).
    pub fn inner_raw(&self, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        match self.kind() {
            ManifoldKind::Euclidean(_) | ManifoldKind::Sphere(_) => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            ManifoldKind::Spd(d) => {
                let xm = DMatrix::from_column_slice(*d, *d, x);
                let um = DMatrix::from_column_slice(*d, *d, u);
                let vm = DMatrix::from_column_slice(*d, *d, v);
                let chol = match xm.clone().cholesky() {
                    Some(c) => c,
                    None => return f64::NAN,
                };
                let a = chol.solve(&um);
                let b = chol.solve(&vm);
                (a * b).trace()
            }
            ManifoldKind::Product(parts) => parts
                .iter()
                .zip(Self::component_ranges(parts))
                .map(|(p, r)| p.inner_raw(&x[r.clone()], &u[r.clone()], &v[r]))
                .sum(),
        }
    }

    /// Orthogonal projection of an ambient vector onto `T_x`, with respect to
    /// the ambient Euclidean inner product.
    pub fn project_raw(&self, x: &[f64], a: &[f64]) -> DVector<f64> {
        match self.kind() {
            ManifoldKind::Euclidean(_) => DVector::from_column_slice(a),
            ManifoldKind::Sphere(_) => {
                let xv = DVector::from_column_slice(x);
                let av = DVector::from_column_slice(a);
                let radial = xv.dot(&av);
                av - xv * radial
            }
            ManifoldKind::Spd(d) => {
                let am = DMatrix::from_column_slice(*d, *d, a);
                let s = matfun::symmetrize(&am);
                DVector::from_column_slice(s.as_slice())
            }
            ManifoldKind::Product(parts) => {
                let mut out = DVector::zeros(self.ambient_dim);
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    let c = p.project_raw(&x[r.clone()], &a[r.clone()]);
                    out.rows_mut(r.start, r.len()).copy_from(&c);
                }
                out
            }
        }
    }

    /// Riemannian gradient from the Euclidean gradient of a smooth extension.
    pub fn egrad_to_rgrad_raw(&self, x: &[f64], g: &[f64]) -> DVector<f64> {
        match self.kind() {
            ManifoldKind::Euclidean(_) | ManifoldKind::Sphere(_) => self.project_raw(x, g),
            ManifoldKind::Spd(d) => {
                let xm = DMatrix::from_column_slice(*d, *d, x);
                let gm = matfun::symmetrize(&DMatrix::from_column_slice(*d, *d, g));
                let r = matfun::symmetrize(&(&xm * gm * &xm));
                DVector::from_column_slice(r.as_slice())
            }
            ManifoldKind::Product(parts) => {
                let mut out = DVector::zeros(self.ambient_dim);
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    let c = p.egrad_to_rgrad_raw(&x[r.clone()], &g[r.clone()]);
                    out.rows_mut(r.start, r.len()).copy_from(&c);
                }
                out
            }
        }
    }

    /// Exponential map on raw coordinates. The result is validated.
    pub fn exp_raw(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        if v.iter().all(|c| *c == 0.0) {
            return Ok(DVector::from_column_slice(x));
        }
        let out = match self.kind() {
            ManifoldKind::Euclidean(_) => DVector::from_iterator(x.len(), x.iter().zip(v).map(|(a, b)| a + b)),
            ManifoldKind::Sphere(_) => {
                let xv = DVector::from_column_slice(x);
                let vv = DVector::from_column_slice(v);
                let theta = vv.norm();
                let y = xv * theta.cos() + vv * (theta.sin() / theta);
                // Renormalize against accumulated round-off along long runs.
                let n = y.norm();
                y / n
            }
            ManifoldKind::Spd(d) => {
                let xm = DMatrix::from_column_slice(*d, *d, x);
                let vm = matfun::symmetrize(&DMatrix::from_column_slice(*d, *d, v));
                let (s, is) = matfun::sqrt_and_inv_sqrt(&xm);
                let inner = matfun::symmetrize(&(&is * vm * &is));
                let y = matfun::symmetrize(&(&s * matfun::expm_sym(&inner) * &s));
                DVector::from_column_slice(y.as_slice())
            }
            ManifoldKind::Product(parts) => {
                let mut out = DVector::zeros(self.ambient_dim);
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    let c = p.exp_raw(&x[r.clone()], &v[r.clone()])?;
                    out.rows_mut(r.start, r.len()).copy_from(&c);
                }
                return Ok(out);
            }
        };
        self.validate_point(out.as_slice())
    }

    /// Parallel transport of `u` along `t -> Exp_x(t v)`, `t` in `[0, 1]`.
    pub fn transport_raw(&self, x: &[f64], v: &[f64], u: &[f64]) -> DVector<f64> {
        if v.iter().all(|c| *c == 0.0) {
            return DVector::from_column_slice(u);
        }
        match self.kind() {
            ManifoldKind::Euclidean(_) => DVector::from_column_slice(u),
            ManifoldKind::Sphere(_) => {
                let xv = DVector::from_column_slice(x);
                let vv = DVector::from_column_slice(v);
                let uv = DVector::from_column_slice(u);
                let theta = vv.norm();
                let dir = &vv / theta;
                let along = dir.dot(&uv);
                uv - (xv * theta.sin() + &dir * (1.0 - theta.cos())) * along
            }
            ManifoldKind::Spd(d) => {
                let xm = DMatrix::from_column_slice(*d, *d, x);
                let vm = matfun::symmetrize(&DMatrix::from_column_slice(*d, *d, v));
                let um = DMatrix::from_column_slice(*d, *d, u);
                let (s, is) = matfun::sqrt_and_inv_sqrt(&xm);
                let half = matfun::symmetrize(&(&is * vm * &is)) * 0.5;
                let e = &s * matfun::expm_sym(&half) * &is;
                let pu = matfun::symmetrize(&(&e * um * e.transpose()));
                DVector::from_column_slice(pu.as_slice())
            }
            ManifoldKind::Product(parts) => {
                let mut out = DVector::zeros(self.ambient_dim);
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    let c = p.transport_raw(&x[r.clone()], &v[r.clone()], &u[r.clone()]);
                    out.rows_mut(r.start, r.len()).copy_from(&c);
                }
                out
            }
        }
    }

    pub fn distance_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind() {
            ManifoldKind::Euclidean(_) => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            ManifoldKind::Sphere(_) => {
                // Equivalent to arccos(<x, y>) clamped, but accurate for nearby points.
                let c: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let s = x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| {
                        let r = b - c * a;
                        r * r
                    })
                    .sum::<f64>()
                    .sqrt();
                s.atan2(c.clamp(-1.0, 1.0))
            }
            ManifoldKind::Spd(d) => {
                let xm = DMatrix::from_column_slice(*d, *d, x);
                let ym = DMatrix::from_column_slice(*d, *d, y);
                let (_, is) = matfun::sqrt_and_inv_sqrt(&xm);
                let m = matfun::symmetrize(&(&is * ym * &is));
                matfun::logm_spd(&m).norm()
            }
            ManifoldKind::Product(parts) => parts
                .iter()
                .zip(Self::component_ranges(parts))
                .map(|(p, r)| p.distance_raw(&x[r.clone()], &y[r]).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn random_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let gauss = |rng: &mut R, n: usize| -> DVector<f64> {
            DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
        };
        match self.kind() {
            ManifoldKind::Euclidean(n) => gauss(rng, *n),
            ManifoldKind::Sphere(n) => loop {
                let v = gauss(rng, *n);
                let norm = v.norm();
                if norm > 1e-8 {
                    break v / norm;
                }
            },
            ManifoldKind::Spd(d) => {
                let a = DMatrix::from_column_slice(*d, *d, gauss(rng, d * d).as_slice());
                let m = &a * a.transpose() + DMatrix::identity(*d, *d) * RANDOM_SPD_FLOOR;
                DVector::from_column_slice(matfun::symmetrize(&m).as_slice())
            }
            ManifoldKind::Product(parts) => {
                let mut out = DVector::zeros(self.ambient_dim);
                for (p, r) in parts.iter().zip(Self::component_ranges(parts)) {
                    let c = p.random_raw(rng);
                    out.rows_mut(r.start, r.len()).copy_from(&c);
                }
                out
            }
        }
    }

    /// Random point: Gaussian (Euclidean), normalized Gaussian (sphere),
    /// `A Aᵀ + 1e-3 I` with Gaussian `A` (SPD).
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let coords = self.random_raw(rng);
        Point::new(self.clone(), coords).expect("random point generator produced an invalid point")
    }

    /// Splits product coordinates into per-factor slices.
    pub fn split<'a>(&self, coords: &'a [f64]) -> Vec<&'a [f64]> {
        match self.kind() {
            ManifoldKind::Product(parts) => Self::component_ranges(parts).into_iter().map(|r| &coords[r]).collect(),
            _ => vec![coords],
        }
    }
}

/// A point on a manifold in ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    manifold: Manifold,
    coords: DVector<f64>,
}

impl Point {
    /// Validates and wraps ambient coordinates. SPD input is symmetrized.
    pub fn new(manifold: Manifold, coords: DVector<f64>) -> Result<Self> {
        let coords = manifold.validate_point(coords.as_slice())?;
        Ok(Self { manifold, coords })
    }

    pub fn from_slice(manifold: Manifold, coords: &[f64]) -> Result<Self> {
        Self::new(manifold, DVector::from_column_slice(coords))
    }

    /// SPD point from a square matrix.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Contract("SPD point needs a square matrix".into()));
        }
        Self::new(Manifold::spd(m.nrows()), DVector::from_column_slice(m.as_slice()))
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    /// Column-major reshape of SPD coordinates.
    pub fn as_matrix(&self) -> Option<DMatrix<f64>> {
        match self.manifold.kind() {
            ManifoldKind::Spd(d) => Some(DMatrix::from_column_slice(*d, *d, self.coords.as_slice())),
            _ => None,
        }
    }

    pub fn same_base(&self, other: &Point) -> bool {
        self.manifold == other.manifold && self.coords == other.coords
    }
}

/// A tangent vector at a base point, in ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    base: Point,
    coords: DVector<f64>,
}

impl Tangent {
    pub fn new(base: Point, coords: DVector<f64>) -> Result<Self> {
        base.manifold.validate_tangent(base.coords.as_slice(), coords.as_slice())?;
        Ok(Self { base, coords })
    }

    /// Wraps coordinates known to be tangent (e.g. produced by a projection).
    pub(crate) fn new_unchecked(base: Point, coords: DVector<f64>) -> Self {
        Self { base, coords }
    }

    pub fn zero(base: &Point) -> Self {
        let n = base.manifold.ambient_dim();
        Self { base: base.clone(), coords: DVector::zeros(n) }
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }

    pub fn scale(&self, s: f64) -> Tangent {
        Self { base: self.base.clone(), coords: &self.coords * s }
    }

    pub fn add(&self, other: &Tangent) -> Result<Tangent> {
        same_base(&self.base, &other.base)?;
        Ok(Self { base: self.base.clone(), coords: &self.coords + &other.coords })
    }

    pub fn sub(&self, other: &Tangent) -> Result<Tangent> {
        same_base(&self.base, &other.base)?;
        Ok(Self { base: self.base.clone(), coords: &self.coords - &other.coords })
    }

    pub fn norm_sq(&self) -> f64 {
        self.base.manifold.inner_raw(self.base.coords.as_slice(), self.coords.as_slice(), self.coords.as_slice())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().max(0.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

fn same_base(a: &Point, b: &Point) -> Result<()> {
    if a.manifold != b.manifold {
        return Err(Error::Contract(format!(
            "tangent vectors live on different manifolds ({} vs {})",
            a.manifold, b.manifold
        )));
    }
    if a.coords != b.coords {
        return Err(Error::Contract("tangent vectors have different base points".into()));
    }
    Ok(())
}

fn check_base(x: &Point, v: &Tangent) -> Result<()> {
    same_base(x, &v.base)
}

/// `<u, v>_x`.
pub fn inner(x: &Point, u: &Tangent, v: &Tangent) -> Result<f64> {
    check_base(x, u)?;
    check_base(x, v)?;
    Ok(x.manifold.inner_raw(x.coords.as_slice(), u.coords.as_slice(), v.coords.as_slice()))
}

/// `Exp_x(v)`.
pub fn exp_map(x: &Point, v: &Tangent) -> Result<Point> {
    check_base(x, v)?;
    let coords = x.manifold.exp_raw(x.coords.as_slice(), v.coords.as_slice())?;
    Ok(Point { manifold: x.manifold.clone(), coords })
}

pub fn project_tangent(x: &Point, a: &DVector<f64>) -> Result<Tangent> {
    x.manifold.check_len(a.as_slice())?;
    let coords = x.manifold.project_raw(x.coords.as_slice(), a.as_slice());
    Ok(Tangent::new_unchecked(x.clone(), coords))
}

pub fn egrad_to_rgrad(x: &Point, egrad: &DVector<f64>) -> Result<Tangent> {
    x.manifold.check_len(egrad.as_slice())?;
    let coords = x.manifold.egrad_to_rgrad_raw(x.coords.as_slice(), egrad.as_slice());
    Ok(Tangent::new_unchecked(x.clone(), coords))
}

/// Transports `u` along the geodesic `t -> Exp_x(t v)` to `Exp_x(v)`.
pub fn parallel_transport(x: &Point, v: &Tangent, u: &Tangent) -> Result<Tangent> {
    check_base(x, v)?;
    check_base(x, u)?;
    let y = exp_map(x, v)?;
    let coords = x.manifold.transport_raw(x.coords.as_slice(), v.coords.as_slice(), u.coords.as_slice());
    let coords = y.manifold.project_raw(y.coords.as_slice(), coords.as_slice());
    Ok(Tangent::new_unchecked(y, coords))
}

pub fn geodesic_distance(x: &Point, y: &Point) -> Result<f64> {
    if x.manifold != y.manifold {
        return Err(Error::DimensionMismatch { expected: x.manifold.ambient_dim(), got: y.manifold.ambient_dim() });
    }
    Ok(x.manifold.distance_raw(x.coords.as_slice(), y.coords.as_slice()))
}

pub fn random_point<R: Rng + ?Sized>(manifold: &Manifold, rng: &mut R) -> Point {
    manifold.random_point(rng)
}

/// Ambient Gaussian projected onto `T_x`.
pub fn random_tangent<R: Rng + ?Sized>(x: &Point, rng: &mut R) -> Tangent {
    let n = x.manifold.ambient_dim();
    let a = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    project_tangent(x, &a).expect("ambient dimension matches by construction")
}

/// Orthonormal basis of `T_x` under `<., .>_x`.
///
/// Projected ambient unit vectors are orthogonalized by modified Gram-Schmidt
/// with one re-orthogonalization pass; vectors that collapse are skipped.
pub fn tangent_basis(x: &Point) -> Vec<Tangent> {
    let m = &x.manifold;
    let xs = x.coords.as_slice();
    let n = m.ambient_dim();
    let target = m.intrinsic_dim();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(target);
    for j in 0..n {
        if basis.len() == target {
            break;
        }
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let mut v = m.project_raw(xs, e.as_slice());
        let start = m.inner_raw(xs, v.as_slice(), v.as_slice()).max(0.0).sqrt();
        if start < 1e-12 {
            continue;
        }
        for _pass in 0..2 {
            for b in &basis {
                let c = m.inner_raw(xs, b.as_slice(), v.as_slice());
                v -= b * c;
            }
        }
        let norm = m.inner_raw(xs, v.as_slice(), v.as_slice()).max(0.0).sqrt();
        if norm < 1e-8 * start {
            continue;
        }
        basis.push(v / norm);
    }
    let mut worst: f64 = 0.0;
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            let g = m.inner_raw(xs, a.as_slice(), b.as_slice());
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - want).abs());
        }
    }
    if worst > 1e-8 || basis.len() != target {
        log::warn!(
            "tangent basis on {m} is ill-conditioned: {} of {target} vectors, Gram deviation {worst:e}",
            basis.len()
        );
    }
    basis.into_iter().map(|b| Tangent::new_unchecked(x.clone(), b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamTag};
    use std::f64::consts::{E, FRAC_PI_2};

    fn pt(m: Manifold, c: &[f64]) -> Point {
        Point::from_slice(m, c).unwrap()
    }

    fn tan(x: &Point, c: &[f64]) -> Tangent {
        Tangent::new(x.clone(), DVector::from_column_slice(c)).unwrap()
    }

    #[test]
    fn dimensions() {
        assert_eq!(Manifold::spd(3).intrinsic_dim(), 6);
        assert_eq!(Manifold::spd(3).ambient_dim(), 9);
        assert_eq!(Manifold::sphere(4).intrinsic_dim(), 3);
        let p = Manifold::product(vec![Manifold::euclidean(2), Manifold::spd(2)]);
        assert_eq!((p.intrinsic_dim(), p.ambient_dim()), (5, 6));
        assert!(Manifold::new(ManifoldKind::Sphere(1)).is_err());
        assert!(Manifold::new(ManifoldKind::Euclidean(0)).is_err());
        assert!(Manifold::new(ManifoldKind::Product(vec![])).is_err());
    }

    #[test]
    fn inner_examples() {
        let x = pt(Manifold::euclidean(2), &[0.0, 0.0]);
        assert_eq!(inner(&x, &tan(&x, &[1.0, 2.0]), &tan(&x, &[3.0, 4.0])).unwrap(), 11.0);

        let id = pt(Manifold::spd(2), &[1.0, 0.0, 0.0, 1.0]);
        let u = tan(&id, &[1.0, 0.0, 0.0, 1.0]);
        assert!((inner(&id, &u, &u).unwrap() - 2.0).abs() < 1e-15);

        let x = pt(Manifold::spd(2), &[2.0, 0.0, 0.0, 1.0]);
        let u = tan(&x, &[2.0, 0.0, 0.0, 0.0]);
        assert!((inner(&x, &u, &u).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inner_rejects_mismatched_base() {
        let m = Manifold::euclidean(2);
        let x = pt(m.clone(), &[0.0, 0.0]);
        let y = pt(m, &[1.0, 0.0]);
        let u = tan(&y, &[1.0, 0.0]);
        assert!(matches!(inner(&x, &u, &u), Err(Error::Contract(_))));
    }

    #[test]
    fn exp_examples() {
        let x = pt(Manifold::sphere(3), &[1.0, 0.0, 0.0]);
        let y = exp_map(&x, &tan(&x, &[0.0, FRAC_PI_2, 0.0])).unwrap();
        assert!((y.coords() - DVector::from_vec(vec![0.0, 1.0, 0.0])).norm() < 1e-15);

        let x = pt(Manifold::spd(1), &[1.0]);
        let y = exp_map(&x, &tan(&x, &[1.0])).unwrap();
        assert!((y.coords()[0] - E).abs() < 1e-14);

        let x = pt(Manifold::spd(2), &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(exp_map(&x, &Tangent::zero(&x)).unwrap(), x);
    }

    #[test]
    fn projection_examples() {
        let x = pt(Manifold::sphere(2), &[1.0, 0.0]);
        let p = project_tangent(&x, &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(p.coords().as_slice(), &[0.0, 4.0]);

        let x = pt(Manifold::spd(2), &[1.0, 0.0, 0.0, 1.0]);
        // [[1,2],[0,1]] column-major.
        let p = project_tangent(&x, &DVector::from_vec(vec![1.0, 0.0, 2.0, 1.0])).unwrap();
        assert_eq!(p.coords().as_slice(), &[1.0, 1.0, 1.0, 1.0]);

        let x = pt(Manifold::euclidean(3), &[0.0, 1.0, 2.0]);
        let a = DVector::from_vec(vec![5.0, -1.0, 0.5]);
        assert_eq!(project_tangent(&x, &a).unwrap().coords(), &a);
        assert!(project_tangent(&x, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn egrad_examples() {
        let x = pt(Manifold::spd(1), &[2.0]);
        let r = egrad_to_rgrad(&x, &DVector::from_vec(vec![3.0])).unwrap();
        assert_eq!(r.coords()[0], 12.0);
        let id = pt(Manifold::spd(2), &[1.0, 0.0, 0.0, 1.0]);
        let g = DVector::from_vec(vec![1.0, 0.5, 0.5, -2.0]);
        assert_eq!(egrad_to_rgrad(&id, &g).unwrap().coords(), &g);
    }

    #[test]
    fn distance_examples() {
        let x = pt(Manifold::spd(1), &[1.0]);
        let y = pt(Manifold::spd(1), &[E * E]);
        assert!((geodesic_distance(&x, &y).unwrap() - 2.0).abs() < 1e-14);
        let a = pt(Manifold::sphere(2), &[1.0, 0.0]);
        let b = pt(Manifold::sphere(2), &[0.0, 1.0]);
        assert!((geodesic_distance(&a, &b).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(geodesic_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn transport_trivial_cases() {
        let x = pt(Manifold::euclidean(2), &[1.0, 1.0]);
        let u = tan(&x, &[0.5, -0.5]);
        let v = tan(&x, &[3.0, 1.0]);
        assert_eq!(parallel_transport(&x, &v, &u).unwrap().coords(), u.coords());
        let x = pt(Manifold::spd(2), &[2.0, 0.3, 0.3, 1.0]);
        let u = tan(&x, &[0.1, 0.2, 0.2, 0.3]);
        let p = parallel_transport(&x, &Tangent::zero(&x), &u).unwrap();
        assert_eq!(p.coords(), u.coords());
    }

    #[test]
    fn spd_transport_is_isometric() {
        let mut rng = stream_rng(1, 0, StreamTag::Init);
        let m = Manifold::spd(2);
        for _ in 0..20 {
            let x = m.random_point(&mut rng);
            let u = random_tangent(&x, &mut rng);
            let v = random_tangent(&x, &mut rng);
            let v = v.scale(0.5 / v.norm());
            let p = parallel_transport(&x, &v, &u).unwrap();
            let rel = (p.norm() - u.norm()).abs() / u.norm();
            assert!(rel < 1e-10, "rel {rel:e}");
        }
    }

    #[test]
    fn validation() {
        assert!(Point::from_slice(Manifold::sphere(2), &[1.0, 1e-5]).is_err());
        assert!(Point::from_slice(Manifold::spd(2), &[1.0, 0.0, 0.0, -1.0]).is_err());
        assert!(Point::from_slice(Manifold::spd(2), &[1.0, 0.5, 0.0, 1.0]).is_err());
        assert!(Point::from_slice(Manifold::euclidean(2), &[f64::NAN, 0.0]).is_err());
        let x = pt(Manifold::sphere(2), &[1.0, 0.0]);
        assert!(Tangent::new(x.clone(), DVector::from_vec(vec![1e-3, 1.0])).is_err());
        let s = pt(Manifold::spd(2), &[1.0, 0.0, 0.0, 1.0]);
        assert!(Tangent::new(s, DVector::from_vec(vec![1.0, 0.1, 0.0, 1.0])).is_err());
    }

    #[test]
    fn random_points_are_valid() {
        let mut rng = stream_rng(2, 0, StreamTag::Init);
        for _ in 0..50 {
            let s = Manifold::sphere(5).random_point(&mut rng);
            assert!((s.coords().norm() - 1.0).abs() < 1e-12);
            let p = Manifold::spd(3).random_point(&mut rng);
            assert!(matfun::min_eigenvalue(&p.as_matrix().unwrap()) > 0.0);
            let t = random_tangent(&s, &mut rng);
            assert!(Tangent::new(s.clone(), t.coords().clone()).is_ok());
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = stream_rng(3, 0, StreamTag::Init);
        let m = Manifold::product(vec![Manifold::sphere(3), Manifold::spd(3), Manifold::euclidean(2)]);
        let x = m.random_point(&mut rng);
        let b = tangent_basis(&x);
        assert_eq!(b.len(), m.intrinsic_dim());
        for (i, u) in b.iter().enumerate() {
            for (j, v) in b.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((inner(&x, u, v).unwrap() - want).abs() < 1e-10);
            }
        }
    }
}

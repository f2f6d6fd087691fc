//! Embedded Riemannian manifolds with retractions, retraction differentials
//! and their adjoints.
//!
//! Points and tangent vectors are stored in ambient coordinates. Two
//! instances are provided: Euclidean space with `R_x(v) = x + v`, and the unit
//! sphere with the projective retraction `R_x(v) = (x + v) / |x + v|`. Both
//! carry the metric induced by the ambient dot product.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, norm_sq};

/// Below this norm of `x + v` the sphere retraction is considered degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

const SPHERE_POINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Euclidean,
    Sphere,
}

/// A point of a manifold in ambient coordinates. Cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: Arc<[f64]>,
}

impl Point {
    /// Wraps raw coordinates without validation; use [`Manifold::point`] to
    /// check membership.
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords: coords.into() }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    fn same_as(&self, other: &Point) -> bool {
        Arc::ptr_eq(&self.coords, &other.coords) || self.coords == other.coords
    }
}

/// A tangent vector in ambient coordinates together with its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: Point,
    vec: Vec<f64>,
}

impl TangentVector {
    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }

    pub fn is_zero(&self) -> bool {
        self.vec.iter().all(|&v| v == 0.0)
    }

    pub fn is_based_at(&self, x: &Point) -> bool {
        self.base.same_as(x)
    }
}

/// Euclidean space or the unit sphere embedded in `R^ambient_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifold {
    kind: ManifoldKind,
    ambient_dim: usize,
}

impl Manifold {
    pub fn euclidean(dim: usize) -> Self {
        assert!(dim >= 1, "Euclidean space needs dimension >= 1");
        Self { kind: ManifoldKind::Euclidean, ambient_dim: dim }
    }

    /// The unit sphere in `R^ambient_dim`.
    pub fn sphere(ambient_dim: usize) -> Self {
        assert!(ambient_dim >= 2, "sphere needs ambient dimension >= 2");
        Self { kind: ManifoldKind::Sphere, ambient_dim }
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self.kind {
            ManifoldKind::Euclidean => self.ambient_dim,
            ManifoldKind::Sphere => self.ambient_dim - 1,
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.ambient_dim {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim, actual: len });
        }
        Ok(())
    }

    fn check_base(&self, v: &TangentVector, x: &Point) -> Result<()> {
        if !v.is_based_at(x) {
            return Err(Error::BaseMismatch);
        }
        Ok(())
    }

    /// Validates coordinates as a point of this manifold.
    pub fn point(&self, coords: Vec<f64>) -> Result<Point> {
        self.check_dim(coords.len())?;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NotOnManifold("non-finite coordinate".into()));
        }
        if self.kind == ManifoldKind::Sphere {
            let n = norm(&coords);
            if (n - 1.0).abs() > SPHERE_POINT_TOL {
                return Err(Error::NotOnManifold(format!("sphere point has norm {n}")));
            }
        }
        Ok(Point::new(coords))
    }

    /// Maps arbitrary ambient coordinates onto the manifold (normalizes on
    /// the sphere).
    pub fn point_from_ambient(&self, mut coords: Vec<f64>) -> Result<Point> {
        self.check_dim(coords.len())?;
        if self.kind == ManifoldKind::Sphere {
            let n = norm(&coords);
            if n <= DEGENERACY_THRESHOLD {
                return Err(Error::DegenerateRetraction { norm: n });
            }
            coords.iter_mut().for_each(|c| *c /= n);
        }
        Ok(Point::new(coords))
    }

    pub fn contains(&self, x: &Point) -> bool {
        x.dim() == self.ambient_dim
            && match self.kind {
                ManifoldKind::Euclidean => true,
                ManifoldKind::Sphere => (norm(x.coords()) - 1.0).abs() <= SPHERE_POINT_TOL,
            }
    }

    pub fn zero(&self, x: &Point) -> TangentVector {
        TangentVector { base: x.clone(), vec: vec![0.0; self.ambient_dim] }
    }

    /// Orthogonal projection of an ambient vector onto `T_x M`.
    pub fn project_tangent(&self, x: &Point, a: &[f64]) -> TangentVector {
        assert_eq!(a.len(), self.ambient_dim, "ambient vector has wrong dimension");
        let mut vec = a.to_vec();
        if self.kind == ManifoldKind::Sphere {
            let radial = dot(x.coords(), a);
            axpy(-radial, x.coords(), &mut vec);
        }
        TangentVector { base: x.clone(), vec }
    }

    /// Builds a tangent vector from ambient coordinates assumed tangent.
    /// On the sphere the vector is projected anyway.
    pub fn tangent(&self, x: &Point, vec: Vec<f64>) -> Result<TangentVector> {
        self.check_dim(vec.len())?;
        Ok(match self.kind {
            ManifoldKind::Euclidean => TangentVector { base: x.clone(), vec },
            ManifoldKind::Sphere => self.project_tangent(x, &vec),
        })
    }

    pub fn inner(&self, u: &TangentVector, v: &TangentVector) -> f64 {
        debug_assert!(u.is_based_at(&v.base), "inner product of vectors at different points");
        dot(&u.vec, &v.vec)
    }

    pub fn norm(&self, u: &TangentVector) -> f64 {
        norm(&u.vec)
    }

    pub fn norm_sq(&self, u: &TangentVector) -> f64 {
        norm_sq(&u.vec)
    }

    pub fn scale(&self, alpha: f64, u: &TangentVector) -> TangentVector {
        TangentVector { base: u.base.clone(), vec: u.vec.iter().map(|c| alpha * c).collect() }
    }

    /// `u + v`, re-projected on the sphere.
    pub fn add(&self, u: &TangentVector, v: &TangentVector) -> Result<TangentVector> {
        self.check_base(v, &u.base)?;
        let sum: Vec<f64> = u.vec.iter().zip(&v.vec).map(|(a, b)| a + b).collect();
        self.tangent(&u.base, sum)
    }

    /// Accumulates `weight * v` into `acc` (both at the same base).
    pub fn accumulate(&self, acc: &mut TangentVector, weight: f64, v: &TangentVector) {
        debug_assert!(acc.is_based_at(&v.base));
        axpy(weight, &v.vec, &mut acc.vec);
    }

    /// Removes any normal component picked up by repeated arithmetic.
    pub fn reproject(&self, u: TangentVector) -> TangentVector {
        match self.kind {
            ManifoldKind::Euclidean => u,
            ManifoldKind::Sphere => self.project_tangent(&u.base, &u.vec),
        }
    }

    /// `R_x(v)`.
    pub fn retract(&self, x: &Point, v: &TangentVector) -> Result<Point> {
        self.check_base(v, x)?;
        if v.is_zero() {
            return Ok(x.clone());
        }
        let mut y: Vec<f64> = x.coords().iter().zip(&v.vec).map(|(a, b)| a + b).collect();
        if self.kind == ManifoldKind::Sphere {
            let n = norm(&y);
            if n <= DEGENERACY_THRESHOLD {
                return Err(Error::DegenerateRetraction { norm: n });
            }
            y.iter_mut().for_each(|c| *c /= n);
        }
        Ok(Point::new(y))
    }

    /// The point `R_x(u)` together with `|x + u|` (sphere only).
    fn sphere_image(&self, x: &Point, u: &TangentVector) -> Result<(Point, f64)> {
        let s: Vec<f64> = x.coords().iter().zip(&u.vec).map(|(a, b)| a + b).collect();
        let n = norm(&s);
        if n <= DEGENERACY_THRESHOLD {
            return Err(Error::DegenerateRetraction { norm: n });
        }
        let y = if u.is_zero() { x.clone() } else { Point::new(s.iter().map(|c| c / n).collect()) };
        Ok((y, n))
    }

    /// `dR_x|_u (w)`, a tangent vector at `R_x(u)`.
    pub fn retract_differential(&self, x: &Point, u: &TangentVector, w: &TangentVector) -> Result<TangentVector> {
        self.check_base(u, x)?;
        self.check_base(w, x)?;
        match self.kind {
            ManifoldKind::Euclidean => {
                let y = self.retract(x, u)?;
                Ok(TangentVector { base: y, vec: w.vec.clone() })
            }
            ManifoldKind::Sphere => {
                let (y, n) = self.sphere_image(x, u)?;
                if u.is_zero() {
                    return Ok(TangentVector { base: y, vec: w.vec.clone() });
                }
                // J = (I - y y^T) / |x + u|
                let yw = dot(y.coords(), &w.vec);
                let vec = w.vec.iter().zip(y.coords()).map(|(wi, yi)| (wi - yw * yi) / n).collect();
                Ok(TangentVector { base: y, vec })
            }
        }
    }

    /// `adj(dR_x|_u)(z)` for `z` tangent at `R_x(u)`; the result is tangent at `x`.
    pub fn retract_adjoint(&self, x: &Point, u: &TangentVector, z: &TangentVector) -> Result<TangentVector> {
        self.check_base(u, x)?;
        self.check_dim(z.vec.len())?;
        match self.kind {
            ManifoldKind::Euclidean => Ok(TangentVector { base: x.clone(), vec: z.vec.clone() }),
            ManifoldKind::Sphere => {
                let (y, n) = self.sphere_image(x, u)?;
                if u.is_zero() {
                    return Ok(self.project_tangent(x, &z.vec));
                }
                // J is symmetric; transpose then project onto T_x M.
                let yz = dot(y.coords(), &z.vec);
                let jt: Vec<f64> = z.vec.iter().zip(y.coords()).map(|(zi, yi)| (zi - yz * yi) / n).collect();
                Ok(self.project_tangent(x, &jt))
            }
        }
    }

    /// A random point: uniform on the sphere, standard normal in Euclidean space.
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let g = gaussian_vec(rng, self.ambient_dim);
        match self.kind {
            ManifoldKind::Euclidean => Point::new(g),
            ManifoldKind::Sphere => {
                let n = norm(&g);
                Point::new(g.iter().map(|c| c / n).collect())
            }
        }
    }

    /// A random tangent vector at `x` with standard normal ambient coordinates
    /// projected onto `T_x M`.
    pub fn random_tangent<R: Rng + ?Sized>(&self, x: &Point, rng: &mut R) -> TangentVector {
        let g = gaussian_vec(rng, self.ambient_dim);
        self.project_tangent(x, &g)
    }

    /// A uniformly random unit tangent vector at `x`.
    pub fn random_unit_tangent<R: Rng + ?Sized>(&self, x: &Point, rng: &mut R) -> TangentVector {
        loop {
            let t = self.random_tangent(x, rng);
            let n = self.norm(&t);
            if n > 1e-8 {
                return self.scale(1.0 / n, &t);
            }
        }
    }
}

pub(crate) fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

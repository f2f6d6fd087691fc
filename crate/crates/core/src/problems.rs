//! Cost functions with finite-sample stochastic gradient oracles.
//!
//! Every oracle exposes the full cost `F`, its exact Riemannian gradient and
//! the per-outcome fields `H(x, l)` whose weighted mean over the sample space
//! equals the gradient. Outcome indices are zero-based.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, norm_sq};
use crate::manifold::{gaussian_vec, Manifold, Point, TangentVector};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A finite outcome set `{0, .., N-1}` with strictly positive probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSampleSpace {
    weights: Vec<f64>,
}

impl FiniteSampleSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSampleSpace("sample space must be non-empty".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidSampleSpace("weights must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidSampleSpace(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidSampleSpace("sample space must be non-empty".into()));
        }
        Ok(Self { weights: vec![1.0 / size as f64; size] })
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, l: usize) -> f64 {
        self.weights[l]
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.size() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= WEIGHT_SUM_TOL)
    }

    /// `mu(U)` for a set of outcome indices.
    pub fn measure(&self, outcomes: &[usize]) -> f64 {
        outcomes.iter().map(|&l| self.weights[l]).sum()
    }

    pub fn check_index(&self, l: usize) -> Result<()> {
        if l >= self.size() {
            return Err(Error::IndexOutOfRange { index: l, size: self.size() });
        }
        Ok(())
    }
}

/// Description of the compact region `K` on which the gradient bound holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// The whole manifold (compact for the sphere, unbounded for Euclidean space).
    WholeManifold,
    /// The ball `{ |x|^2 <= rho1 }`.
    Ball { rho1: f64 },
}

impl Region {
    pub fn contains(&self, x: &Point) -> bool {
        match *self {
            Region::WholeManifold => true,
            Region::Ball { rho1 } => norm_sq(x.coords()) <= rho1,
        }
    }
}

/// The stochastic gradient map `H(x, l)` together with `F` and `grad F`.
pub trait GradientOracle: Send + Sync {
    fn manifold(&self) -> Manifold;

    fn space(&self) -> &FiniteSampleSpace;

    fn cost(&self, x: &Point) -> f64;

    fn full_gradient(&self, x: &Point) -> TangentVector;

    fn sample_gradient(&self, x: &Point, l: usize) -> Result<TangentVector>;

    /// A valid bound `A` on `|H(x, l)|` over `region`.
    fn bound_on_region(&self, region: &Region) -> Result<f64>;

    /// The compact region the oracle's convergence hypotheses refer to, if
    /// one is intrinsic to the problem.
    fn natural_region(&self) -> Option<Region> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ProblemData {
    SphereMean { targets: Vec<Vec<f64>>, mean: Vec<f64> },
    LeastSquares { features: Vec<Vec<f64>>, responses: Vec<f64>, tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    SphereMean,
    LeastSquares,
}

/// One of the two shipped problems.
///
/// * `SphereMean`: `F(x) = sum_l mu_l |x - a_l|^2 / 2` on the unit sphere,
///   `H(x, l) = P_x(x - a_l)`.
/// * `LeastSquares`: `F(x) = sum_l mu_l (<a_l, x> - y_l)^2 / 2 + tau |x|^2 / 2`
///   on Euclidean space, `H(x, l) = (<a_l, x> - y_l) a_l + tau x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    manifold: Manifold,
    space: FiniteSampleSpace,
    data: ProblemData,
}

impl ProblemInstance {
    pub fn sphere_mean(targets: Vec<Vec<f64>>, space: FiniteSampleSpace) -> Result<Self> {
        let dim = check_rows(&targets, space.size())?;
        if dim < 2 {
            return Err(Error::InvalidData("sphere targets need dimension >= 2".into()));
        }
        let mut mean = vec![0.0; dim];
        for (a, w) in targets.iter().zip(space.weights()) {
            crate::linalg::axpy(*w, a, &mut mean);
        }
        Ok(Self { manifold: Manifold::sphere(dim), space, data: ProblemData::SphereMean { targets, mean } })
    }

    pub fn least_squares(
        features: Vec<Vec<f64>>,
        responses: Vec<f64>,
        tau: f64,
        space: FiniteSampleSpace,
    ) -> Result<Self> {
        let dim = check_rows(&features, space.size())?;
        if responses.len() != features.len() {
            return Err(Error::InvalidData(format!(
                "{} feature rows but {} responses",
                features.len(),
                responses.len()
            )));
        }
        if !(tau.is_finite() && tau >= 0.0) || responses.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidData("tau must be >= 0 and responses finite".into()));
        }
        Ok(Self {
            manifold: Manifold::euclidean(dim),
            space,
            data: ProblemData::LeastSquares { features, responses, tau },
        })
    }

    /// `n` targets drawn uniformly on the unit sphere in `R^dim`, uniform weights.
    pub fn random_sphere_mean(dim: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Manifold::sphere(dim);
        let targets = (0..n).map(|_| m.random_point(&mut rng).coords().to_vec()).collect();
        Self::sphere_mean(targets, FiniteSampleSpace::uniform(n)?)
    }

    /// Standard normal features, responses `y = <a, w> + 0.5 e` for a random
    /// planted `w` and standard normal noise `e`, uniform weights.
    pub fn random_least_squares(dim: usize, n: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted = gaussian_vec(&mut rng, dim);
        let mut features = Vec::with_capacity(n);
        let mut responses = Vec::with_capacity(n);
        for _ in 0..n {
            let a = gaussian_vec(&mut rng, dim);
            let noise = gaussian_vec(&mut rng, 1)[0];
            responses.push(dot(&a, &planted) + 0.5 * noise);
            features.push(a);
        }
        Self::least_squares(features, responses, tau, FiniteSampleSpace::uniform(n)?)
    }

    /// Loads data from CSV with a header row: one row per outcome, the
    /// feature (or target) columns first and, for least squares, the
    /// response as the last column. Weights are uniform.
    pub fn from_csv_reader<R: Read>(reader: R, kind: ProblemKind, tau: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header_len = rdr.headers().map_err(|e| Error::InvalidData(format!("missing header row: {e}")))?.len();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidData(format!("row {}: {e}", i + 1)))?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidData(format!("row {}: {e}", i + 1)))?;
            if row.len() != header_len {
                return Err(Error::InvalidData(format!("row {} has {} columns", i + 1, row.len())));
            }
            rows.push(row);
        }
        let space = FiniteSampleSpace::uniform(rows.len())?;
        match kind {
            ProblemKind::SphereMean => Self::sphere_mean(rows, space),
            ProblemKind::LeastSquares => {
                if header_len < 2 {
                    return Err(Error::InvalidData("need feature columns and a response".into()));
                }
                let mut features = Vec::with_capacity(rows.len());
                let mut responses = Vec::with_capacity(rows.len());
                for mut row in rows {
                    responses.push(row.pop().expect("row has at least two columns"));
                    features.push(row);
                }
                Self::least_squares(features, responses, tau, space)
            }
        }
    }

    pub fn from_csv_path(path: &Path, kind: ProblemKind, tau: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file, kind, tau)
    }

    /// The same data under a different probability measure on the outcomes.
    pub fn with_space(self, space: FiniteSampleSpace) -> Result<Self> {
        match self.data {
            ProblemData::SphereMean { targets, .. } => Self::sphere_mean(targets, space),
            ProblemData::LeastSquares { features, responses, tau } => {
                Self::least_squares(features, responses, tau, space)
            }
        }
    }

    pub fn kind(&self) -> ProblemKind {
        match self.data {
            ProblemData::SphereMean { .. } => ProblemKind::SphereMean,
            ProblemData::LeastSquares { .. } => ProblemKind::LeastSquares,
        }
    }

    /// Weighted mean of the sphere targets (`None` for least squares).
    pub fn target_mean(&self) -> Option<&[f64]> {
        match &self.data {
            ProblemData::SphereMean { mean, .. } => Some(mean),
            ProblemData::LeastSquares { .. } => None,
        }
    }

    /// `(features, responses, tau)` for least squares.
    #[allow(clippy::type_complexity)]
    pub fn least_squares_data(&self) -> Option<(&[Vec<f64>], &[f64], f64)> {
        match &self.data {
            ProblemData::LeastSquares { features, responses, tau } => Some((features, responses, *tau)),
            ProblemData::SphereMean { .. } => None,
        }
    }

    /// The stationary point `a_bar / |a_bar|` of the sphere mean problem.
    pub fn sphere_minimizer(&self) -> Option<Point> {
        let mean = self.target_mean()?;
        self.manifold.point_from_ambient(mean.to_vec()).ok()
    }
}

fn check_rows(rows: &[Vec<f64>], n: usize) -> Result<usize> {
    if rows.len() != n {
        return Err(Error::InvalidData(format!("{} data rows for {} outcomes", rows.len(), n)));
    }
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidData("data rows must share a positive dimension".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite data value".into()));
    }
    Ok(dim)
}

impl GradientOracle for ProblemInstance {
    fn manifold(&self) -> Manifold {
        self.manifold
    }

    fn space(&self) -> &FiniteSampleSpace {
        &self.space
    }

    fn cost(&self, x: &Point) -> f64 {
        let xs = x.coords();
        match &self.data {
            ProblemData::SphereMean { targets, .. } => {
                let s: f64 = targets
                    .iter()
                    .zip(self.space.weights())
                    .map(|(a, w)| w * xs.iter().zip(a).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
                    .sum();
                0.5 * s
            }
            ProblemData::LeastSquares { features, responses, tau } => {
                let s: f64 = features
                    .iter()
                    .zip(responses)
                    .zip(self.space.weights())
                    .map(|((a, y), w)| {
                        let r = dot(a, xs) - y;
                        w * r * r
                    })
                    .sum();
                0.5 * s + 0.5 * tau * norm_sq(xs)
            }
        }
    }

    fn full_gradient(&self, x: &Point) -> TangentVector {
        let xs = x.coords();
        match &self.data {
            ProblemData::SphereMean { mean, .. } => {
                let diff: Vec<f64> = xs.iter().zip(mean).map(|(p, q)| p - q).collect();
                self.manifold.project_tangent(x, &diff)
            }
            ProblemData::LeastSquares { features, responses, tau } => {
                let mut g: Vec<f64> = xs.iter().map(|v| tau * v).collect();
                for ((a, y), w) in features.iter().zip(responses).zip(self.space.weights()) {
                    let r = dot(a, xs) - y;
                    crate::linalg::axpy(w * r, a, &mut g);
                }
                self.manifold.project_tangent(x, &g)
            }
        }
    }

    fn sample_gradient(&self, x: &Point, l: usize) -> Result<TangentVector> {
        self.space.check_index(l)?;
        let xs = x.coords();
        Ok(match &self.data {
            ProblemData::SphereMean { targets, .. } => {
                let diff: Vec<f64> = xs.iter().zip(&targets[l]).map(|(p, q)| p - q).collect();
                self.manifold.project_tangent(x, &diff)
            }
            ProblemData::LeastSquares { features, responses, tau } => {
                let a = &features[l];
                let r = dot(a, xs) - responses[l];
                let g: Vec<f64> = xs.iter().zip(a).map(|(xi, ai)| r * ai + tau * xi).collect();
                self.manifold.project_tangent(x, &g)
            }
        })
    }

    fn bound_on_region(&self, region: &Region) -> Result<f64> {
        match &self.data {
            ProblemData::SphereMean { targets, .. } => {
                let max_norm = targets.iter().map(|a| norm(a)).fold(0.0, f64::max);
                Ok(2.0 + max_norm)
            }
            ProblemData::LeastSquares { features, responses, tau } => match *region {
                Region::WholeManifold => Err(Error::UnboundedRegion),
                Region::Ball { rho1 } => {
                    if !(rho1.is_finite() && rho1 >= 0.0) {
                        return Err(Error::UnboundedRegion);
                    }
                    let r = rho1.sqrt();
                    let worst = features
                        .iter()
                        .zip(responses)
                        .map(|(a, y)| norm_sq(a) * r + y.abs() * norm(a))
                        .fold(0.0, f64::max);
                    Ok(worst + tau * r)
                }
            },
        }
    }

    fn natural_region(&self) -> Option<Region> {
        match self.data {
            ProblemData::SphereMean { .. } => Some(Region::WholeManifold),
            ProblemData::LeastSquares { .. } => None,
        }
    }
}

/// Constant stochastic fields `H(x, l) = c_l` on Euclidean space; the cost is
/// the linear function `F(x) = <c_bar, x>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantFields {
    manifold: Manifold,
    space: FiniteSampleSpace,
    fields: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl ConstantFields {
    pub fn new(fields: Vec<Vec<f64>>, space: FiniteSampleSpace) -> Result<Self> {
        let dim = check_rows(&fields, space.size())?;
        let mut mean = vec![0.0; dim];
        for (c, w) in fields.iter().zip(space.weights()) {
            crate::linalg::axpy(*w, c, &mut mean);
        }
        Ok(Self { manifold: Manifold::euclidean(dim), space, fields, mean })
    }
}

impl GradientOracle for ConstantFields {
    fn manifold(&self) -> Manifold {
        self.manifold
    }

    fn space(&self) -> &FiniteSampleSpace {
        &self.space
    }

    fn cost(&self, x: &Point) -> f64 {
        dot(&self.mean, x.coords())
    }

    fn full_gradient(&self, x: &Point) -> TangentVector {
        self.manifold.project_tangent(x, &self.mean)
    }

    fn sample_gradient(&self, x: &Point, l: usize) -> Result<TangentVector> {
        self.space.check_index(l)?;
        Ok(self.manifold.project_tangent(x, &self.fields[l]))
    }

    fn bound_on_region(&self, _region: &Region) -> Result<f64> {
        Ok(self.fields.iter().map(|c| norm(c)).fold(0.0, f64::max))
    }
}

//! Mass-metric geometry of planar N-body configurations.
//!
//! A configuration is a point in (R^2)^N together with a list of positive
//! masses. The inner product used throughout is the mass scalar product
//! <a, b> = sum_j m_j (a_j . b_j), and the force function is
//! U = sum_{k<j} m_k m_j / |r_k - r_j|. Gradients are reported in the mass
//! metric, so the central configuration equation reads grad U = -lambda r.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tol;

/// Errors from configuration construction and potential evaluation.
#[derive(Debug, Error)]
pub enum NBodyError {
    #[error("bodies {i} and {j} nearly collide: separation {separation:.3e} below threshold {threshold:.3e}")]
    Collision {
        i: usize,
        j: usize,
        separation: f64,
        threshold: f64,
    },
    #[error("dimension mismatch: {left} vs {right} bodies")]
    DimensionMismatch { left: usize, right: usize },
    #[error("configurations carry different masses")]
    MassMismatch,
    #[error("masses must be positive and finite, got m[{index}] = {value}")]
    InvalidMass { index: usize, value: f64 },
    #[error("at least two bodies are required, got {0}")]
    TooFewBodies(usize),
    #[error("coordinate vector has length {got}, expected {expected}")]
    BadCoordinateLength { got: usize, expected: usize },
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("position entries must be finite")]
    NonFinite,
}

/// Positive masses of the N bodies.
#[derive(Debug, Clone, PartialEq)]
pub struct MassVector {
    m: Vec<f64>,
}

impl MassVector {
    pub fn new(m: Vec<f64>) -> Result<Self, NBodyError> {
        if m.len() < 2 {
            return Err(NBodyError::TooFewBodies(m.len()));
        }
        for (index, &value) in m.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(NBodyError::InvalidMass { index, value });
            }
        }
        Ok(Self { m })
    }

    /// Number of bodies.
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.m
    }

    pub fn get(&self, k: usize) -> f64 {
        self.m[k]
    }

    pub fn total(&self) -> f64 {
        self.m.iter().sum()
    }

    /// Diagonal of the 2N x 2N mass metric (each mass repeated twice).
    pub fn metric_diag(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.m.len(), self.m.iter().flat_map(|&m| [m, m]))
    }

    /// The 2N x 2N mass metric as a dense matrix.
    pub fn metric(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.metric_diag())
    }
}

impl std::ops::Index<usize> for MassVector {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.m[k]
    }
}

/// A planar configuration with its masses. Coordinates are stored flat as
/// (x_1, y_1, ..., x_N, y_N).
#[derive(Debug, Clone, PartialEq)]
pub struct MassedConfiguration {
    masses: MassVector,
    x: DVector<f64>,
    centered: bool,
}

impl MassedConfiguration {
    pub fn new(masses: MassVector, x: DVector<f64>) -> Result<Self, NBodyError> {
        if x.len() != 2 * masses.len() {
            return Err(NBodyError::BadCoordinateLength {
                got: x.len(),
                expected: 2 * masses.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NBodyError::NonFinite);
        }
        let mut c = Self {
            masses,
            x,
            centered: false,
        };
        c.centered = c.center_of_mass().norm() <= tol::EXACT_F64 * c.scale();
        Ok(c)
    }

    pub fn from_points(masses: MassVector, points: &[[f64; 2]]) -> Result<Self, NBodyError> {
        let x = DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p[0], p[1]]));
        Self::new(masses, x)
    }

    /// Number of bodies.
    pub fn n(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &MassVector {
        &self.masses
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.x
    }

    /// Position of body k.
    pub fn point(&self, k: usize) -> Vector2<f64> {
        Vector2::new(self.x[2 * k], self.x[2 * k + 1])
    }

    /// Whether the center of mass was at the origin when constructed.
    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// A same-mass configuration with different coordinates.
    pub fn with_coords(&self, x: DVector<f64>) -> Result<Self, NBodyError> {
        Self::new(self.masses.clone(), x)
    }

    fn scale(&self) -> f64 {
        let s = self.x.amax();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn center_of_mass(&self) -> Vector2<f64> {
        let mut c = Vector2::zeros();
        for k in 0..self.n() {
            c += self.masses[k] * self.point(k);
        }
        c / self.masses.total()
    }

    /// Mass scalar product with another configuration over the same masses.
    pub fn mass_inner(&self, other: &Self) -> Result<f64, NBodyError> {
        if self.n() != other.n() {
            return Err(NBodyError::DimensionMismatch {
                left: self.n(),
                right: other.n(),
            });
        }
        if self.masses != other.masses {
            return Err(NBodyError::MassMismatch);
        }
        let mut acc = 0.0;
        for k in 0..self.n() {
            acc += self.masses[k] * self.point(k).dot(&other.point(k));
        }
        Ok(acc)
    }

    /// Multiplication by i: every point (x, y) maps to (-y, x).
    pub fn rotate90(&self) -> Self {
        let mut x = DVector::zeros(self.x.len());
        for k in 0..self.n() {
            x[2 * k] = -self.x[2 * k + 1];
            x[2 * k + 1] = self.x[2 * k];
        }
        Self {
            masses: self.masses.clone(),
            x,
            centered: self.centered,
        }
    }

    /// Moment of inertia about the center of mass.
    pub fn moment_of_inertia(&self) -> f64 {
        let rc = self.center_of_mass();
        (0..self.n())
            .map(|k| self.masses[k] * (self.point(k) - rc).norm_squared())
            .sum()
    }

    pub fn pair_table(&self) -> Result<PairTable, NBodyError> {
        PairTable::new(self)
    }

    /// Force function U = sum over pairs of m_k m_j / r_jk.
    pub fn potential(&self) -> Result<f64, NBodyError> {
        let pairs = self.pair_table()?;
        let mut u = 0.0;
        for k in 0..self.n() {
            for j in (k + 1)..self.n() {
                u += self.masses[k] * self.masses[j] / pairs.separation(k, j);
            }
        }
        Ok(u)
    }

    /// Cartesian partial derivatives dU/dx as a flat 2N vector.
    pub fn cartesian_gradient(&self) -> Result<DVector<f64>, NBodyError> {
        let pairs = self.pair_table()?;
        let mut g = DVector::zeros(2 * self.n());
        for k in 0..self.n() {
            let mut acc = Vector2::zeros();
            for j in 0..self.n() {
                if j == k {
                    continue;
                }
                let d = self.point(j) - self.point(k);
                let r = pairs.separation(k, j);
                acc += self.masses[k] * self.masses[j] * d / (r * r * r);
            }
            g[2 * k] = acc.x;
            g[2 * k + 1] = acc.y;
        }
        Ok(g)
    }

    /// Mass-metric gradient of U, so that grad U = -lambda r at a central
    /// configuration. Component k is the Cartesian partial divided by m_k.
    pub fn potential_gradient(&self) -> Result<Self, NBodyError> {
        let g = self.cartesian_gradient()?;
        let mut x = DVector::zeros(2 * self.n());
        for k in 0..self.n() {
            x[2 * k] = g[2 * k] / self.masses[k];
            x[2 * k + 1] = g[2 * k + 1] / self.masses[k];
        }
        self.with_coords(x)
    }

    /// Cartesian Hessian of U assembled from 2 x 2 pair blocks.
    ///
    /// The off-diagonal block for the pair (j, k) is
    /// (m_j m_k / r^3)(I - 3 dd^T / r^2) with d = r_j - r_k, and each
    /// diagonal block is minus the sum of the off-diagonal blocks in its row.
    pub fn hessian_blocks(&self) -> Result<DMatrix<f64>, NBodyError> {
        let pairs = self.pair_table()?;
        let n = self.n();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..n {
            let mut diag = Matrix2::zeros();
            for j in 0..n {
                if j == k {
                    continue;
                }
                let d = self.point(j) - self.point(k);
                let r = pairs.separation(k, j);
                let b = (self.masses[j] * self.masses[k] / (r * r * r))
                    * (Matrix2::identity() - 3.0 / (r * r) * d * d.transpose());
                h.view_mut((2 * k, 2 * j), (2, 2)).copy_from(&b);
                diag -= b;
            }
            h.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&diag);
        }
        Ok(h)
    }

    /// Exact third directional derivative of U along three displacement
    /// fields, via the closed-form third derivative tensor of 1/|d|.
    pub fn third_directional(&self, u: &Self, v: &Self, w: &Self) -> Result<f64, NBodyError> {
        for dir in [u, v, w] {
            if dir.n() != self.n() {
                return Err(NBodyError::DimensionMismatch {
                    left: self.n(),
                    right: dir.n(),
                });
            }
            if dir.masses != self.masses {
                return Err(NBodyError::MassMismatch);
            }
        }
        let pairs = self.pair_table()?;
        let mut acc = 0.0;
        for k in 0..self.n() {
            for j in (k + 1)..self.n() {
                let x = self.point(j) - self.point(k);
                let a = u.point(j) - u.point(k);
                let b = v.point(j) - v.point(k);
                let c = w.point(j) - w.point(k);
                let r = pairs.separation(k, j);
                let r5 = r.powi(5);
                let r7 = r5 * r * r;
                let sym = a.dot(&b) * x.dot(&c) + a.dot(&c) * x.dot(&b) + b.dot(&c) * x.dot(&a);
                let kernel = 3.0 * sym / r5 - 15.0 * x.dot(&a) * x.dot(&b) * x.dot(&c) / r7;
                acc += self.masses[k] * self.masses[j] * kernel;
            }
        }
        Ok(acc)
    }

    /// Subtract the center of mass. The result is centered exactly up to
    /// rounding.
    pub fn center_and_project(&self) -> Self {
        let rc = self.center_of_mass();
        let mut x = self.x.clone();
        for k in 0..self.n() {
            x[2 * k] -= rc.x;
            x[2 * k + 1] -= rc.y;
        }
        Self {
            masses: self.masses.clone(),
            x,
            centered: true,
        }
    }

    /// Map every point to rho e^{i alpha} r_k.
    pub fn rotate_scale(&self, rho: f64, alpha: f64) -> Result<Self, NBodyError> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(NBodyError::InvalidScale(rho));
        }
        let (s, c) = alpha.sin_cos();
        let mut x = DVector::zeros(self.x.len());
        for k in 0..self.n() {
            let p = self.point(k);
            x[2 * k] = rho * (c * p.x - s * p.y);
            x[2 * k + 1] = rho * (s * p.x + c * p.y);
        }
        Ok(Self {
            masses: self.masses.clone(),
            x,
            centered: self.centered,
        })
    }

    /// Center, then scale so the moment of inertia is one.
    pub fn normalized(&self) -> Result<Self, NBodyError> {
        let centered = self.center_and_project();
        let i = centered.moment_of_inertia();
        if !(i.is_finite() && i > 0.0) {
            return Err(NBodyError::InvalidScale(i));
        }
        let mut out = centered.rotate_scale(1.0 / i.sqrt(), 0.0)?;
        out.centered = true;
        Ok(out)
    }

    /// The two translation directions: all x entries one, respectively all
    /// y entries one.
    pub fn translations(masses: &MassVector) -> (Self, Self) {
        let n = masses.len();
        let mut ex = DVector::zeros(2 * n);
        let mut ey = DVector::zeros(2 * n);
        for k in 0..n {
            ex[2 * k] = 1.0;
            ey[2 * k + 1] = 1.0;
        }
        (
            Self {
                masses: masses.clone(),
                x: ex,
                centered: false,
            },
            Self {
                masses: masses.clone(),
                x: ey,
                centered: false,
            },
        )
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigRepr {
    masses: Vec<f64>,
    points: Vec<[f64; 2]>,
}

impl Serialize for MassedConfiguration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let repr = ConfigRepr {
            masses: self.masses.as_slice().to_vec(),
            points: (0..self.n()).map(|k| [self.x[2 * k], self.x[2 * k + 1]]).collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MassedConfiguration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ConfigRepr::deserialize(deserializer)?;
        let masses = MassVector::new(repr.masses).map_err(D::Error::custom)?;
        if repr.points.len() != masses.len() {
            return Err(D::Error::custom("points and masses disagree in length"));
        }
        MassedConfiguration::from_points(masses, &repr.points).map_err(D::Error::custom)
    }
}

/// Pairwise separations of a configuration, validated against the collision
/// threshold at construction.
#[derive(Debug, Clone)]
pub struct PairTable {
    r: DMatrix<f64>,
    diameter: f64,
}

impl PairTable {
    pub fn new(c: &MassedConfiguration) -> Result<Self, NBodyError> {
        let n = c.n();
        let mut r = DMatrix::zeros(n, n);
        let mut diameter: f64 = 0.0;
        for k in 0..n {
            for j in (k + 1)..n {
                let d = (c.point(j) - c.point(k)).norm();
                r[(k, j)] = d;
                r[(j, k)] = d;
                diameter = diameter.max(d);
            }
        }
        let threshold = (tol::COLLISION_REL * diameter).max(f64::MIN_POSITIVE);
        for k in 0..n {
            for j in (k + 1)..n {
                if r[(k, j)] < threshold {
                    return Err(NBodyError::Collision {
                        i: k,
                        j,
                        separation: r[(k, j)],
                        threshold,
                    });
                }
            }
        }
        Ok(Self { r, diameter })
    }

    pub fn separation(&self, j: usize, k: usize) -> f64 {
        self.r[(j, k)]
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn min_separation(&self) -> f64 {
        let n = self.r.nrows();
        let mut min = f64::INFINITY;
        for k in 0..n {
            for j in (k + 1)..n {
                min = min.min(self.r[(k, j)]);
            }
        }
        min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    pub(crate) fn two_body() -> MassedConfiguration {
        let masses = MassVector::new(vec![1.0, 1.0]).unwrap();
        MassedConfiguration::from_points(masses, &[[-1.0, 0.0], [1.0, 0.0]]).unwrap()
    }

    pub(crate) fn lagrange() -> MassedConfiguration {
        let masses = MassVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        let r = 1.0 / 3.0_f64.sqrt();
        let pts: Vec<[f64; 2]> = (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        MassedConfiguration::from_points(masses, &pts).unwrap()
    }

    fn shifted(c: &MassedConfiguration, dir: &MassedConfiguration, s: f64) -> MassedConfiguration {
        c.with_coords(c.coords() + s * dir.coords()).unwrap()
    }

    #[test]
    fn mass_inner_two_body() {
        let c = two_body();
        assert_abs_diff_eq!(c.mass_inner(&c).unwrap(), 2.0);
        assert_abs_diff_eq!(c.mass_inner(&c.rotate90()).unwrap(), 0.0);
    }

    #[test]
    fn lagrange_normalization() {
        let c = lagrange();
        assert_relative_eq!(c.moment_of_inertia(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(c.mass_inner(&c).unwrap(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(c.potential().unwrap(), 3.0, max_relative = 1e-14);
    }

    #[test]
    fn two_body_values() {
        let c = two_body();
        assert_abs_diff_eq!(c.moment_of_inertia(), 2.0);
        assert_abs_diff_eq!(c.potential().unwrap(), 0.5);
        let g = c.potential_gradient().unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(g.coords()[i], -0.25 * c.coords()[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn lagrange_gradient_is_minus_three_r() {
        let c = lagrange();
        let g = c.potential_gradient().unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(g.coords()[i], -3.0 * c.coords()[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn euler_identity() {
        let c = lagrange();
        let g = c.potential_gradient().unwrap();
        let u = c.potential().unwrap();
        assert_relative_eq!(g.mass_inner(&c).unwrap(), -u, max_relative = 1e-13);
    }

    #[test]
    fn homogeneity() {
        let c = lagrange();
        let scaled = c.rotate_scale(2.0, 0.7).unwrap();
        assert_relative_eq!(scaled.potential().unwrap(), 1.5, max_relative = 1e-13);
        assert_relative_eq!(scaled.moment_of_inertia(), 4.0, max_relative = 1e-13);
    }

    #[test]
    fn hessian_annihilates_translations() {
        let c = lagrange();
        let h = c.hessian_blocks().unwrap();
        assert_relative_eq!((&h - h.transpose()).norm(), 0.0, epsilon = 1e-14 * h.norm());
        let (ex, ey) = MassedConfiguration::translations(c.masses());
        assert_abs_diff_eq!((&h * ex.coords()).norm(), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!((&h * ey.coords()).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let masses = MassVector::new(vec![1.0, 2.0, 0.5, 1.5]).unwrap();
        let c = MassedConfiguration::from_points(
            masses,
            &[[0.4, -0.3], [1.1, 0.8], [-0.9, 0.2], [-0.1, -1.2]],
        )
        .unwrap();
        let h = c.hessian_blocks().unwrap();
        let step = 1e-5;
        let dim = 2 * c.n();
        let grad_at = |x: &DVector<f64>| {
            c.with_coords(x.clone()).unwrap().cartesian_gradient().unwrap()
        };
        for a in 0..dim {
            let mut xp = c.coords().clone();
            let mut xm = c.coords().clone();
            xp[a] += step;
            xm[a] -= step;
            let fd_col = (grad_at(&xp) - grad_at(&xm)) / (2.0 * step);
            for b in 0..dim {
                assert_relative_eq!(h[(b, a)], fd_col[b], max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn hessian_eigenrelations_at_cc() {
        let c = lagrange();
        let h = c.hessian_blocks().unwrap();
        let m = c.masses().metric();
        let lambda = 3.0;
        let r0 = c.coords();
        let ir0 = c.rotate90();
        assert_abs_diff_eq!((&h * r0 - 2.0 * lambda * &m * r0).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            (&h * ir0.coords() + lambda * &m * ir0.coords()).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    fn fd_third_equal(c: &MassedConfiguration, u: &MassedConfiguration, h: f64) -> f64 {
        let f = |s: f64| shifted(c, u, s).potential().unwrap();
        let stencil = |h: f64| (-f(-2.0 * h) + 2.0 * f(-h) - 2.0 * f(h) + f(2.0 * h)) / (2.0 * h * h * h);
        (4.0 * stencil(h / 2.0) - stencil(h)) / 3.0
    }

    fn fd_third_mixed(
        c: &MassedConfiguration,
        u: &MassedConfiguration,
        v: &MassedConfiguration,
        w: &MassedConfiguration,
        h: f64,
    ) -> f64 {
        let f = |a: f64, b: f64, g: f64| {
            let x = c.coords() + a * u.coords() + b * v.coords() + g * w.coords();
            c.with_coords(x).unwrap().potential().unwrap()
        };
        let stencil = |h: f64| {
            (f(h, h, h) - f(h, h, -h) - f(h, -h, h) - f(-h, h, h) + f(h, -h, -h) + f(-h, h, -h)
                + f(-h, -h, h)
                - f(-h, -h, -h))
                / (8.0 * h * h * h)
        };
        (4.0 * stencil(h / 2.0) - stencil(h)) / 3.0
    }

    #[test]
    fn third_directional_matches_radial_oracle() {
        let c = lagrange();
        let d3 = c.third_directional(&c, &c, &c).unwrap();
        let oracle = fd_third_equal(&c, &c, 1e-2);
        assert_relative_eq!(d3, oracle, max_relative = 1e-6);
        // U(sc + s c) along the ray: U((1+s)c) = U/(1+s), third derivative -6 U.
        assert_relative_eq!(d3, -6.0 * c.potential().unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn third_directional_matches_mixed_oracle() {
        let masses = MassVector::new(vec![1.0, 2.0, 0.5]).unwrap();
        let c = MassedConfiguration::from_points(masses.clone(), &[[0.4, -0.3], [1.1, 0.8], [-0.9, 0.2]])
            .unwrap();
        let u = MassedConfiguration::from_points(masses.clone(), &[[0.3, 0.1], [-0.2, 0.5], [0.7, -0.4]])
            .unwrap();
        let v = MassedConfiguration::from_points(masses.clone(), &[[-0.6, 0.2], [0.1, 0.9], [0.3, 0.3]])
            .unwrap();
        let w = MassedConfiguration::from_points(masses, &[[0.2, -0.7], [0.4, 0.0], [-0.5, 0.6]])
            .unwrap();
        let d3 = c.third_directional(&u, &v, &w).unwrap();
        let oracle = fd_third_mixed(&c, &u, &v, &w, 1e-2);
        assert_relative_eq!(d3, oracle, max_relative = 1e-6);
        // Full permutation symmetry.
        for (a, b, g) in [(&v, &u, &w), (&w, &v, &u), (&u, &w, &v), (&v, &w, &u), (&w, &u, &v)] {
            assert_relative_eq!(c.third_directional(a, b, g).unwrap(), d3, max_relative = 1e-14);
        }
    }

    #[test]
    fn centering_and_serialization() {
        let masses = MassVector::new(vec![2.0, 1.0]).unwrap();
        let c = MassedConfiguration::from_points(masses, &[[1.0, 1.0], [4.0, 1.0]]).unwrap();
        let centered = c.center_and_project();
        assert!(centered.is_centered());
        assert_abs_diff_eq!(centered.center_of_mass().norm(), 0.0, epsilon = 1e-14);

        let json = serde_json::to_string(&centered).unwrap();
        let back: MassedConfiguration = serde_json::from_str(&json).unwrap();
        assert_eq!(back, centered);
    }

    #[test]
    fn collision_detected() {
        let masses = MassVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        let c = MassedConfiguration::from_points(
            masses,
            &[[0.0, 0.0], [1e-14, 0.0], [1.0, 0.0]],
        )
        .unwrap();
        assert!(matches!(c.potential(), Err(NBodyError::Collision { .. })));
    }
}

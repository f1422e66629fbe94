//! Rotating chart about a central configuration.
//!
//! A centered configuration c with nonzero projection onto the plane
//! spanned by E3 = r0/|r0| and E4 = i E3 is written as
//!
//! ```text
//! c = r e^{i theta} (z3 E3 + sum_k z_k E_k),    z3 = sqrt(1 - sum z_k^2),
//! ```
//!
//! where the E_k are the mass-orthonormal eigenvectors of the restricted
//! Hessian. The angle is fixed by <c, i e^{i theta} E3> = 0 together with
//! <c, e^{i theta} E3> > 0, which makes z3 positive and kills the fourth
//! coordinate identically. The chart also carries the coupling matrix
//! q_jk = <E_j, i E_k> and the cubic Taylor data of the potential.

use nalgebra::{DMatrix, DVector};
use serde_json::json;
use thiserror::Error;

use crate::ccfind::{mass_inner_raw, mass_norm, CentralConfiguration, Partition, SpectralReport};
use crate::nbody::{MassedConfiguration, NBodyError};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("configuration projects onto the chart plane with relative norm {norm_ratio:.3e}")]
    DegenerateProjection { norm_ratio: f64 },
    #[error("chart coordinates leave the domain: |z|^2 = {z_norm_sq:.6} >= 1")]
    OutsideChart { z_norm_sq: f64 },
    #[error(transparent)]
    Geometry(#[from] NBodyError),
    #[error(transparent)]
    Central(#[from] crate::ccfind::CcError),
}

/// Point in chart coordinates: scale, accumulated angle, and the 2N-4
/// shape coordinates aligned with the chart's mode basis.
#[derive(Debug, Clone)]
pub struct ChartPoint {
    pub r: f64,
    /// Radians; unwrapped when a continuation hint is supplied.
    pub theta: f64,
    pub z: DVector<f64>,
}

impl ChartPoint {
    pub fn z3(&self) -> f64 {
        (1.0 - self.z.norm_squared()).sqrt()
    }
}

/// Moving-frame chart data at a central configuration, always built at unit
/// moment of inertia.
#[derive(Debug, Clone)]
pub struct FrameChart {
    pub base: CentralConfiguration,
    /// E3 = r0 (unit mass norm).
    pub e3: DVector<f64>,
    /// E4 = i E3.
    pub e4: DVector<f64>,
    /// Mass-orthonormal eigenvectors spanning the shape directions.
    pub modes: Vec<DVector<f64>>,
    /// q_jk = <E_j, i E_k> over the shape directions; antisymmetric and
    /// orthogonal because multiplication by i preserves their span.
    pub q: DMatrix<f64>,
    pub lambda: f64,
    pub kappa: f64,
    /// Restricted eigenvalues at unit inertia, aligned with `modes`.
    pub mu: Vec<f64>,
    pub partition: Partition,
    /// Flattened symmetric cubic table for small N; larger charts compute
    /// entries on demand.
    cubic: Option<Vec<f64>>,
}

fn as_direction(base: &MassedConfiguration, v: &DVector<f64>) -> MassedConfiguration {
    base.with_coords(v.clone())
        .expect("directions share the base dimensions")
}

fn rot90(v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for k in 0..v.len() / 2 {
        out[2 * k] = -v[2 * k + 1];
        out[2 * k + 1] = v[2 * k];
    }
    out
}

/// Index into the flattened symmetric table for i <= j <= k < n.
fn sym_index(n: usize, mut i: usize, mut j: usize, mut k: usize) -> usize {
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    if j > k {
        std::mem::swap(&mut j, &mut k);
    }
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    // Lexicographic offset: full blocks for first indices below i, then
    // rows i..j inside the block, then the tail position.
    let mut offset = 0;
    for a in 0..i {
        let s = n - a;
        offset += s * (s + 1) / 2;
    }
    for b in i..j {
        offset += n - b;
    }
    offset + (k - j)
}

/// Build the chart from a spectral report, renormalizing the base point to
/// unit inertia while keeping the eigenvector directions exactly as given.
pub fn build_chart(report: &SpectralReport) -> Result<FrameChart, FrameError> {
    let base = CentralConfiguration::from_config(&report.config.normalized()?)?;
    let c = &base.config;
    let md = c.masses().metric_diag();
    let n_modes = report.modes.len();

    let e3 = c.coords().clone_owned();
    let e4 = rot90(&e3);
    let modes = report.modes.clone();

    let mut q = DMatrix::zeros(n_modes, n_modes);
    for j in 0..n_modes {
        let imk: Vec<DVector<f64>> = modes.iter().map(rot90).collect();
        for k in 0..n_modes {
            q[(j, k)] = mass_inner_raw(&md, &modes[j], &imk[k]);
        }
    }

    // Rayleigh quotients at unit inertia; exact because the modes are
    // eigenvectors and scale changes only stretch the spectrum.
    let b = c.hessian_blocks()?;
    let lambda = base.lambda;
    let mu: Vec<f64> = modes
        .iter()
        .map(|v| {
            let bv = &b * v;
            lambda + v.dot(&bv)
        })
        .collect();

    let cubic = if c.n() <= 5 {
        let dirs: Vec<MassedConfiguration> = modes.iter().map(|v| as_direction(c, v)).collect();
        let mut table = Vec::new();
        for i in 0..n_modes {
            for j in i..n_modes {
                for k in j..n_modes {
                    table.push(c.third_directional(&dirs[i], &dirs[j], &dirs[k])?);
                }
            }
        }
        Some(table)
    } else {
        None
    };

    Ok(FrameChart {
        base,
        e3,
        e4,
        modes,
        q,
        lambda,
        kappa: 2.0 * lambda,
        mu,
        partition: report.partition,
        cubic,
    })
}

impl FrameChart {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Cubic coefficient a_ijk (0-based mode indices, any order).
    pub fn a(&self, i: usize, j: usize, k: usize) -> f64 {
        match &self.cubic {
            Some(table) => table[sym_index(self.n_modes(), i, j, k)],
            None => {
                let c = &self.base.config;
                c.third_directional(
                    &as_direction(c, &self.modes[i]),
                    &as_direction(c, &self.modes[j]),
                    &as_direction(c, &self.modes[k]),
                )
                .expect("base configuration is collision-free")
            }
        }
    }

    /// Chart coordinates of a centered configuration. `hint` selects the
    /// angle branch nearest a previous value; without it theta lands in
    /// (-pi, pi].
    pub fn to_chart(
        &self,
        c: &MassedConfiguration,
        hint: Option<f64>,
    ) -> Result<ChartPoint, FrameError> {
        let c = c.center_and_project();
        let md = c.masses().metric_diag();
        let r = mass_norm(&md, c.coords());
        let p3 = mass_inner_raw(&md, c.coords(), &self.e3);
        let p4 = mass_inner_raw(&md, c.coords(), &self.e4);
        let plane = (p3 * p3 + p4 * p4).sqrt();
        if plane <= 1e-12 * r {
            return Err(FrameError::DegenerateProjection {
                norm_ratio: plane / r,
            });
        }
        let mut theta = p4.atan2(p3);
        if let Some(h) = hint {
            theta += std::f64::consts::TAU * ((h - theta) / std::f64::consts::TAU).round();
        }
        let (s, co) = theta.sin_cos();
        let mut z = DVector::zeros(self.n_modes());
        for (k, e) in self.modes.iter().enumerate() {
            let pk = mass_inner_raw(&md, c.coords(), e);
            let pik = mass_inner_raw(&md, c.coords(), &rot90(e));
            z[k] = (co * pk + s * pik) / r;
        }
        Ok(ChartPoint { r, theta, z })
    }

    /// Configuration with chart coordinates p.
    pub fn from_chart(&self, p: &ChartPoint) -> Result<MassedConfiguration, FrameError> {
        let zsq = p.z.norm_squared();
        if zsq >= 1.0 {
            return Err(FrameError::OutsideChart { z_norm_sq: zsq });
        }
        let z3 = (1.0 - zsq).sqrt();
        let mut v = z3 * &self.e3;
        for (k, e) in self.modes.iter().enumerate() {
            v.axpy(p.z[k], e, 1.0);
        }
        let (s, co) = p.theta.sin_cos();
        let rotated = co * &v + s * rot90(&v);
        Ok(self.base.config.with_coords(p.r * rotated)?)
    }

    /// Potential U(z) on the unit shape sphere and its z-gradient by the
    /// chain rule through z3.
    pub fn potential_in_chart(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>), FrameError> {
        let zsq = z.norm_squared();
        if zsq >= 1.0 {
            return Err(FrameError::OutsideChart { z_norm_sq: zsq });
        }
        // The origin is a critical point with value lambda; returning the
        // exact zeros keeps the homothetic subspace invariant to the last
        // bit under integration, which rounding noise in the generic path
        // would destroy (the transverse directions are unstable).
        if zsq == 0.0 {
            return Ok((self.lambda, DVector::zeros(self.n_modes())));
        }
        let z3 = (1.0 - zsq).sqrt();
        let point = ChartPoint {
            r: 1.0,
            theta: 0.0,
            z: z.clone(),
        };
        let config = self.from_chart(&point)?;
        let u = config.potential()?;
        let grad = config.potential_gradient()?;
        let md = config.masses().metric_diag();
        let g3 = mass_inner_raw(&md, grad.coords(), &self.e3);
        let mut gz = DVector::zeros(self.n_modes());
        for (k, e) in self.modes.iter().enumerate() {
            let gk = mass_inner_raw(&md, grad.coords(), e);
            gz[k] = gk - z[k] / z3 * g3;
        }
        Ok((u, gz))
    }

    /// Reproducibility record: basis, coupling matrix, spectrum, and the
    /// cubic table with index-sorted entries.
    pub fn export_json(&self) -> serde_json::Value {
        let n = self.n_modes();
        let basis: Vec<Vec<f64>> = std::iter::once(&self.e3)
            .chain(std::iter::once(&self.e4))
            .chain(self.modes.iter())
            .map(|v| v.iter().copied().collect())
            .collect();
        let q: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|k| self.q[(j, k)]).collect())
            .collect();
        let mut a_entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    a_entries.push(json!({
                        "i": i,
                        "j": j,
                        "k": k,
                        "value": self.a(i, j, k),
                    }));
                }
            }
        }
        json!({
            "lambda": self.lambda,
            "kappa": self.kappa,
            "basis": basis,
            "Q": q,
            "mu": self.mu,
            "a": a_entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccfind::{classify, solve_cc};
    use crate::nbody::MassVector;
    use crate::tol;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn lagrange_chart() -> FrameChart {
        let masses = MassVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        let r = 1.0 / 3.0_f64.sqrt();
        let pts: Vec<[f64; 2]> = (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let seed = MassedConfiguration::from_points(masses, &pts).unwrap();
        let cc = solve_cc(&seed, 1e-13, 50).unwrap();
        let report = classify(&cc, tol::DEGENERACY_REL).unwrap();
        build_chart(&report).unwrap()
    }

    #[test]
    fn q_is_antisymmetric_and_orthogonal() {
        let chart = lagrange_chart();
        let q = &chart.q;
        let anti = (q + q.transpose()).norm();
        let orth = (q.transpose() * q - DMatrix::identity(2, 2)).norm();
        assert!(anti <= 1e-12, "antisymmetry residual {anti:.2e}");
        assert!(orth <= 1e-12, "orthogonality residual {orth:.2e}");
    }

    #[test]
    fn potential_at_origin_is_lambda_with_flat_gradient() {
        let chart = lagrange_chart();
        let z = DVector::zeros(2);
        let (u, gz) = chart.potential_in_chart(&z).unwrap();
        assert_relative_eq!(u, chart.lambda, epsilon = 1e-12);
        assert!(gz.amax() <= 1e-10, "gradient at origin {:.2e}", gz.amax());
    }

    #[test]
    fn second_derivatives_match_mu() {
        let chart = lagrange_chart();
        let h = 1e-4;
        for k in 0..chart.n_modes() {
            let eval = |t: f64| {
                let mut z = DVector::zeros(chart.n_modes());
                z[k] = t;
                chart.potential_in_chart(&z).unwrap().0
            };
            let second =
                (-eval(2.0 * h) + 16.0 * eval(h) - 30.0 * eval(0.0) + 16.0 * eval(-h)
                    - eval(-2.0 * h))
                    / (12.0 * h * h);
            assert_relative_eq!(second, chart.mu[k], max_relative = 1e-6);
        }
    }

    #[test]
    fn base_point_maps_to_origin() {
        let chart = lagrange_chart();
        let p = chart.to_chart(&chart.base.config, None).unwrap();
        assert_relative_eq!(p.r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, 0.0, epsilon = 1e-12);
        assert!(p.z.amax() <= 1e-12);
    }

    #[test]
    fn equivariance_under_rotation_and_scaling() {
        let chart = lagrange_chart();
        let mut z = DVector::zeros(2);
        z[0] = 0.08;
        z[1] = -0.05;
        let c = chart
            .from_chart(&ChartPoint {
                r: 1.0,
                theta: 0.2,
                z: z.clone(),
            })
            .unwrap();
        for rho in [0.5, 1.0, 2.0] {
            for alpha in [0.3, std::f64::consts::FRAC_PI_2, 2.0] {
                let moved = c.rotate_scale(rho, alpha).unwrap();
                let p = chart.to_chart(&moved, Some(0.2 + alpha)).unwrap();
                assert_relative_eq!(p.r, rho, epsilon = 1e-12);
                assert_relative_eq!(p.theta, 0.2 + alpha, epsilon = 1e-12);
                for k in 0..2 {
                    assert_abs_diff_eq!(p.z[k], z[k], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let chart = lagrange_chart();
        let mut z = DVector::zeros(2);
        z[0] = -0.11;
        z[1] = 0.07;
        let p0 = ChartPoint {
            r: 1.37,
            theta: 2.9,
            z,
        };
        let c = chart.from_chart(&p0).unwrap();
        assert_relative_eq!(
            mass_norm(&c.masses().metric_diag(), c.coords()),
            p0.r,
            epsilon = 1e-13
        );
        let p1 = chart.to_chart(&c, Some(p0.theta)).unwrap();
        assert_relative_eq!(p1.r, p0.r, epsilon = 1e-12);
        assert_relative_eq!(p1.theta, p0.theta, epsilon = 1e-12);
        for k in 0..2 {
            assert_abs_diff_eq!(p1.z[k], p0.z[k], epsilon = 1e-12);
        }
        // A full turn of theta is invisible in configuration space.
        let turned = chart
            .from_chart(&ChartPoint {
                r: p0.r,
                theta: p0.theta + std::f64::consts::TAU,
                z: p1.z.clone(),
            })
            .unwrap();
        assert!((turned.coords() - c.coords()).amax() <= 1e-12);
    }

    #[test]
    fn degenerate_projection_is_reported() {
        let chart = lagrange_chart();
        // A pure mode displacement has no component in the chart plane.
        let c = chart
            .base
            .config
            .with_coords(chart.modes[0].clone())
            .unwrap();
        match chart.to_chart(&c, None) {
            Err(FrameError::DegenerateProjection { .. }) => {}
            other => panic!("expected degenerate projection, got {other:?}"),
        }
    }

    #[test]
    fn cubic_table_matches_polarized_differencing() {
        let chart = lagrange_chart();
        let d3 = |dir: &DVector<f64>| {
            let eval = |t: f64| {
                let z = dir * t;
                chart.potential_in_chart(&z).unwrap().0
            };
            let stencil = |h: f64| {
                (-eval(-2.0 * h) + 2.0 * eval(-h) - 2.0 * eval(h) + eval(2.0 * h))
                    / (2.0 * h * h * h)
            };
            let h = 2e-3 / dir.norm().max(1e-9);
            (4.0 * stencil(h / 2.0) - stencil(h)) / 3.0
        };
        let n = chart.n_modes();
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let e = |idx: usize| {
                        let mut v = DVector::zeros(n);
                        v[idx] = 1.0;
                        v
                    };
                    let (u, v, w) = (e(i), e(j), e(k));
                    let poly = (d3(&(&u + &v + &w)) - d3(&(&u + &v)) - d3(&(&u + &w))
                        - d3(&(&v + &w))
                        + d3(&u)
                        + d3(&v)
                        + d3(&w))
                        / 6.0;
                    let a = chart.a(i, j, k);
                    if a.abs() > 1e-6 {
                        assert_relative_eq!(poly, a, max_relative = 1e-5);
                    } else {
                        assert_abs_diff_eq!(poly, a, epsilon = 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_indexing_agrees_with_lazy_evaluation() {
        let chart = lagrange_chart();
        let n = chart.n_modes();
        let c = &chart.base.config;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let direct = c
                        .third_directional(
                            &as_direction(c, &chart.modes[i]),
                            &as_direction(c, &chart.modes[j]),
                            &as_direction(c, &chart.modes[k]),
                        )
                        .unwrap();
                    if direct.abs() > 1e-9 {
                        assert_relative_eq!(chart.a(i, j, k), direct, max_relative = 1e-12);
                    } else {
                        assert_abs_diff_eq!(chart.a(i, j, k), direct, epsilon = 1e-12);
                    }
                }
            }
        }
    }
}

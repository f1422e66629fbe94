//! Structure of the collision flow near its equilibrium: block
//! diagonalization of the linear part, quadratic center-manifold data and
//! the reduced system on the degenerate directions, the spin verdict, and
//! the planar polar model with its characteristic directions and decay
//! rates.
//!
//! The shifted state is (z, Z, gamma) with gamma = Upsilon - kappa^(1/2),
//! so the equilibrium sits at the origin and the linear part decouples into
//! per-mode 2x2 blocks plus the scalar gamma direction.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::ccfind::SpectralReport;
use crate::fit::{self, FitError};
use crate::frame::{FrameChart, FrameError};
use crate::ode::{Integrator, OdeError, OdeSystem, RhsError, Solution};
use crate::tol;

#[derive(Debug, Error)]
pub enum NormalError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("epsilon for the resonant block must be positive, got {0:.3e}")]
    BadEpsilon(f64),
    #[error("conjugation residual {residual:.3e} exceeds {bound:.3e}")]
    ConjugationFailure { residual: f64, bound: f64 },
    #[error("report and chart disagree on the degeneracy degree ({report} vs {chart})")]
    PartitionMismatch { report: usize, chart: usize },
    #[error("shape mass matrix is singular at |z|^2 = {0:.6}")]
    SingularShape(f64),
    #[error("no degenerate directions: the center subspace is empty")]
    EmptyCenter,
    #[error("angular form vanishes identically (coefficient scale {0:.3e})")]
    IdenticallyZero(f64),
    #[error("leading homogeneous part is zero in both components")]
    ZeroLeadingPart,
    #[error("planar model degree must be at least 2, got {0}")]
    BadDegree(usize),
    #[error("leading form needs {expected} coefficients, got {got}")]
    BadForm { expected: usize, got: usize },
}

/// Upper root of t^2 + (kappa^(1/2)/2) t - mu = 0; complex below the
/// spiral threshold mu = -kappa/16.
fn tilde_root(mu: f64, kappa: f64) -> Complex64 {
    let s = Complex64::new(mu + kappa / 16.0, 0.0).sqrt();
    Complex64::new(-kappa.sqrt() / 4.0, 0.0) + s
}

fn system_matrix(mu: &[f64], kappa: f64) -> DMatrix<f64> {
    let n = mu.len();
    let dim = 2 * n + 1;
    let rk = kappa.sqrt();
    let mut a = DMatrix::zeros(dim, dim);
    for (j, &m) in mu.iter().enumerate() {
        a[(j, n + j)] = 1.0;
        a[(n + j, j)] = m;
        a[(n + j, n + j)] = -rk / 2.0;
    }
    a[(2 * n, 2 * n)] = rk;
    a
}

/// Linearization at the equilibrium together with the transformation that
/// brings it to block-diagonal form.
#[derive(Debug, Clone)]
pub struct LinearData {
    /// Real system matrix on (z, Z, gamma).
    pub a: DMatrix<f64>,
    /// Column transformation; complex because spiral blocks pair into
    /// conjugate eigenvectors.
    pub p: DMatrix<Complex64>,
    pub p_inv: DMatrix<Complex64>,
    /// P^-1 A P: diagonal except for the epsilon-coupled resonant blocks.
    pub c: DMatrix<Complex64>,
    /// Upper characteristic root per mode; the partner root is
    /// -kappa^(1/2)/2 minus it.
    pub tilde_mu: Vec<Complex64>,
    pub kappa: f64,
    /// Coupling scale used in the defective blocks.
    pub epsilon: f64,
    /// Modes whose block hit the double root exactly.
    pub resonant_modes: Vec<usize>,
    /// Measured Frobenius defect of the conjugation identity.
    pub conjugation_residual: f64,
}

impl LinearData {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Expected spectrum as a multiset: kappa^(1/2) plus both roots of
    /// every mode block.
    pub fn spectrum(&self) -> Vec<Complex64> {
        let rk = self.kappa.sqrt();
        let mut out = vec![Complex64::new(rk, 0.0)];
        for t in &self.tilde_mu {
            out.push(*t);
            out.push(Complex64::new(-rk / 2.0, 0.0) - t);
        }
        out
    }
}

/// Assemble and verify the linearization for a chart; `epsilon` defaults to
/// kappa^(1/2)/8.
pub fn build_linearization(
    chart: &FrameChart,
    epsilon: Option<f64>,
) -> Result<LinearData, NormalError> {
    assemble_linearization(&chart.mu, chart.kappa, epsilon)
}

/// Same assembly from a raw restricted spectrum, for synthetic block
/// layouts that no central configuration realizes.
pub fn assemble_linearization(
    mu: &[f64],
    kappa: f64,
    epsilon: Option<f64>,
) -> Result<LinearData, NormalError> {
    let eps = epsilon.unwrap_or(kappa.sqrt() / 8.0);
    if !(eps > 0.0) {
        return Err(NormalError::BadEpsilon(eps));
    }
    let n = mu.len();
    let dim = 2 * n + 1;
    let rk = kappa.sqrt();
    let a = system_matrix(mu, kappa);

    let mut p = DMatrix::<Complex64>::zeros(dim, dim);
    let mut c = DMatrix::<Complex64>::zeros(dim, dim);
    let mut tilde = Vec::with_capacity(n);
    let mut resonant = Vec::new();
    for (j, &m) in mu.iter().enumerate() {
        let (c0, c1) = (2 * j, 2 * j + 1);
        let t = tilde_root(m, kappa);
        if (m + kappa / 16.0).abs() <= 1e-9 * kappa {
            // Double root: eigenvector plus an epsilon-scaled generalized
            // vector, leaving epsilon on the superdiagonal of the block.
            resonant.push(j);
            let td = Complex64::new(-rk / 4.0, 0.0);
            p[(j, c0)] = Complex64::new(1.0, 0.0);
            p[(n + j, c0)] = td;
            p[(n + j, c1)] = Complex64::new(eps, 0.0);
            c[(c0, c0)] = td;
            c[(c0, c1)] = Complex64::new(eps, 0.0);
            c[(c1, c1)] = td;
            tilde.push(td);
        } else {
            let tm = Complex64::new(-rk / 2.0, 0.0) - t;
            p[(j, c0)] = Complex64::new(-1.0, 0.0);
            p[(n + j, c0)] = -t;
            p[(j, c1)] = Complex64::new(-1.0, 0.0);
            p[(n + j, c1)] = -tm;
            c[(c0, c0)] = t;
            c[(c1, c1)] = tm;
            tilde.push(t);
        }
    }
    p[(2 * n, dim - 1)] = Complex64::new(1.0, 0.0);
    c[(dim - 1, dim - 1)] = Complex64::new(rk, 0.0);

    let p_inv = p
        .clone()
        .lu()
        .try_inverse()
        .expect("transformation is invertible for positive epsilon");
    let ac = a.map(|v| Complex64::new(v, 0.0));
    let residual = (&p_inv * &ac * &p - &c).norm();
    let bound = tol::CONJUGACY_REL * ac.norm();
    if residual > bound {
        return Err(NormalError::ConjugationFailure { residual, bound });
    }
    Ok(LinearData {
        a,
        p,
        p_inv,
        c,
        tilde_mu: tilde,
        kappa,
        epsilon: eps,
        resonant_modes: resonant,
        conjugation_residual: residual,
    })
}

/// Coefficient view of the quadratic remainder terms of the shifted system.
#[derive(Debug, Clone)]
pub struct ShiftedQuadratics {
    /// Symmetric matrices Q_k = a_(..k)/2, so that
    /// chi_k = z^T Q_k z - gamma Z_k / 2 + O(cubic).
    pub chi_z: Vec<DMatrix<f64>>,
    /// Restricted eigenvalues entering
    /// chi_0 = gamma^2/2 + |Z|^2 - sum mu_j z_j^2 / 2 + O(cubic).
    pub mu: Vec<f64>,
}

pub fn shifted_quadratics(chart: &FrameChart) -> ShiftedQuadratics {
    let n = chart.n_modes();
    let chi_z = (0..n)
        .map(|k| DMatrix::from_fn(n, n, |i, j| 0.5 * chart.a(i, j, k)))
        .collect();
    ShiftedQuadratics {
        chi_z,
        mu: chart.mu.clone(),
    }
}

impl ShiftedQuadratics {
    pub fn chi_k(&self, k: usize, z: &DVector<f64>, zv: &DVector<f64>, gamma: f64) -> f64 {
        (z.transpose() * &self.chi_z[k] * z)[(0, 0)] - 0.5 * gamma * zv[k]
    }

    pub fn chi0(&self, z: &DVector<f64>, zv: &DVector<f64>, gamma: f64) -> f64 {
        let shape: f64 = z.iter().zip(&self.mu).map(|(zi, m)| m * zi * zi).sum();
        0.5 * gamma * gamma + zv.norm_squared() - 0.5 * shape
    }
}

/// The collision flow written about its equilibrium.
#[derive(Clone, Copy)]
pub struct ShiftedSystem<'c> {
    pub chart: &'c FrameChart,
}

impl<'c> ShiftedSystem<'c> {
    pub fn new(chart: &'c FrameChart) -> Self {
        Self { chart }
    }

    pub fn dim(&self) -> usize {
        2 * self.chart.n_modes() + 1
    }

    pub fn linear_matrix(&self) -> DMatrix<f64> {
        system_matrix(&self.chart.mu, self.chart.kappa)
    }

    /// Exact field (z', Z', gamma'); a transcription independent of the
    /// unshifted integrator path, which the tests compare it against.
    pub fn full_rhs(
        &self,
        z: &DVector<f64>,
        zv: &DVector<f64>,
        gamma: f64,
    ) -> Result<(DVector<f64>, DVector<f64>, f64), NormalError> {
        let ch = self.chart;
        let n = ch.n_modes();
        let zsq = z.norm_squared();
        if zsq >= 1.0 {
            return Err(FrameError::OutsideChart { z_norm_sq: zsq }.into());
        }
        let z3sq = 1.0 - zsq;
        let upsilon = ch.kappa.sqrt() + gamma;
        let (u, du) = ch.potential_in_chart(z)?;

        let b = &ch.q * z;
        let qzv = &ch.q * zv;
        let beta = z.dot(&qzv);
        let p = z.dot(zv);
        let s2 = zv.norm_squared();

        let mut lhs = DMatrix::identity(n, n);
        lhs += (z * z.transpose()) / z3sq;
        lhs -= &b * b.transpose();
        let mut f = du;
        let drag = 0.5 * upsilon;
        for i in 0..n {
            f[i] -= z[i] * s2 / z3sq
                + z[i] * p * p / (z3sq * z3sq)
                + 2.0 * beta * qzv[i]
                + drag * (zv[i] + z[i] * p / z3sq + beta * b[i]);
        }
        let zv_prime = lhs
            .lu()
            .solve(&f)
            .ok_or(NormalError::SingularShape(zsq))?;
        let gamma_prime = 0.5 * upsilon * upsilon + p * p / z3sq + s2 - beta * beta - u;
        Ok((zv.clone(), zv_prime, gamma_prime))
    }

    /// Exact angular speed theta' = sum q_kj z_k Z_j.
    pub fn theta_rate(&self, z: &DVector<f64>, zv: &DVector<f64>) -> f64 {
        z.dot(&(&self.chart.q * zv))
    }
}

impl fmt::Debug for ShiftedSystem<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShiftedSystem")
            .field("modes", &self.chart.n_modes())
            .finish()
    }
}

/// Quadratic center-manifold data over the degenerate directions.
///
/// The center coordinates u are taken along the negated eigenvector
/// convention of the transformation columns, so the reduced field carries
/// the minus sign.
#[derive(Debug, Clone)]
pub struct CenterData {
    pub n0: usize,
    pub kappa: f64,
    /// Graph coefficients in the eigen-coordinate of each hyperbolic mode k
    /// with eigenvalue tilde_mu_k: entries
    /// a_ijk / (4 tilde_mu_k sqrt(mu_k + kappa/16)) over center pairs.
    /// Resonant (double-root) modes are skipped.
    pub fc2: Vec<(usize, DMatrix<Complex64>)>,
    /// The same graph in state coordinates: z_k(u) = u^T G_k u with
    /// G_k = -a_(..k) / (2 mu_k); real and defined for every hyperbolic
    /// mode, which is what the invariance check uses.
    pub graph_z: Vec<(usize, DMatrix<f64>)>,
    /// Reduced center field u'_k = u^T C_k u with C_k = -a_(..k)/kappa^(1/2).
    pub c_reduced: Vec<DMatrix<f64>>,
}

impl CenterData {
    /// (c1, c2, c3, c4) of the planar reduced system when the center is a
    /// plane.
    pub fn planar_coefficients(&self) -> Option<[f64; 4]> {
        if self.n0 != 2 {
            return None;
        }
        let c0 = &self.c_reduced[0];
        let c1 = &self.c_reduced[1];
        Some([c0[(0, 0)], c0[(0, 1)], c0[(1, 1)], c1[(1, 1)]])
    }

    /// Reduced field at u (quadratic truncation).
    pub fn reduced_rhs(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n0, |k, _| {
            (u.transpose() * &self.c_reduced[k] * u)[(0, 0)]
        })
    }
}

pub fn center_manifold_quadratic(chart: &FrameChart) -> Result<CenterData, NormalError> {
    let n0 = chart.partition.n0;
    if n0 == 0 {
        return Err(NormalError::EmptyCenter);
    }
    let n = chart.n_modes();
    let rk = chart.kappa.sqrt();
    let a_slice =
        |k: usize| DMatrix::from_fn(n0, n0, |i, j| chart.a(i, j, k));
    let mut fc2 = Vec::new();
    let mut graph_z = Vec::new();
    for k in n0..n {
        let ak = a_slice(k);
        let m = chart.mu[k];
        graph_z.push((k, &ak * (-0.5 / m)));
        let rad = m + chart.kappa / 16.0;
        if rad.abs() > 1e-9 * chart.kappa {
            let s = Complex64::new(rad, 0.0).sqrt();
            let denom = 4.0 * tilde_root(m, chart.kappa) * s;
            fc2.push((k, ak.map(|v| Complex64::new(v, 0.0) / denom)));
        }
    }
    let c_reduced = (0..n0).map(|k| a_slice(k) * (-1.0 / rk)).collect();
    Ok(CenterData {
        n0,
        kappa: chart.kappa,
        fc2,
        graph_z,
        c_reduced,
    })
}

/// Embed center coordinates into the shifted state along the quadratic
/// manifold and measure how far the exact field is from the tangent push of
/// the reduced field. The leftover is cubic in |u| when the quadratic data
/// is right.
pub fn invariance_residual(
    chart: &FrameChart,
    data: &CenterData,
    u: &DVector<f64>,
) -> Result<f64, NormalError> {
    let n = chart.n_modes();
    let n0 = data.n0;
    let rk = chart.kappa.sqrt();
    let sys = ShiftedSystem::new(chart);

    // q_k(u) = (1/2) sum a_ijk u_i u_j over center pairs, for every mode.
    let q_of = |k: usize, v: &DVector<f64>, w: &DVector<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n0 {
            for j in 0..n0 {
                s += chart.a(i, j, k) * v[i] * w[j];
            }
        }
        s
    };
    let qs: Vec<f64> = (0..n).map(|k| 0.5 * q_of(k, u, u)).collect();

    let mut z = DVector::zeros(n);
    let mut zv = DVector::zeros(n);
    for k in 0..n0 {
        z[k] = -u[k] - 4.0 * qs[k] / chart.kappa;
        zv[k] = 2.0 * qs[k] / rk;
    }
    for (k, g) in &data.graph_z {
        z[*k] = (u.transpose() * g * u)[(0, 0)];
    }
    let (dz, dzv, dgamma) = sys.full_rhs(&z, &zv, 0.0)?;

    let udot = data.reduced_rhs(u);
    let mut rz = dz;
    let mut rzv = dzv;
    for k in 0..n0 {
        let qdot = q_of(k, u, &udot);
        rz[k] -= -udot[k] - 4.0 * qdot / chart.kappa;
        rzv[k] -= 2.0 * qdot / rk;
    }
    for (k, g) in &data.graph_z {
        rz[*k] -= 2.0 * (u.transpose() * g * &udot)[(0, 0)];
    }
    Ok((rz.norm_squared() + rzv.norm_squared() + dgamma * dgamma).sqrt())
}

/// Degree-two degeneracy discriminant of the cubic a-tensor slice.
pub fn discriminant(a555: f64, a556: f64, a566: f64, a666: f64) -> f64 {
    a555 * a555 * a666 * a666 - 6.0 * a555 * a556 * a566 * a666
        + 4.0 * a555 * a566.powi(3)
        + 4.0 * a556.powi(3) * a666
        - 3.0 * a556 * a556 * a566 * a566
}

/// Resultant of the two reduced quadratic forms, as the 4x4 determinant.
pub fn pair_resultant(c: [f64; 4]) -> f64 {
    let [c1, c2, c3, c4] = c;
    DMatrix::from_row_slice(
        4,
        4,
        &[
            c1,
            2.0 * c2,
            c3,
            0.0,
            0.0,
            c1,
            2.0 * c2,
            c3,
            c2,
            2.0 * c3,
            c4,
            0.0,
            0.0,
            c2,
            2.0 * c3,
            c4,
        ],
    )
    .determinant()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpinCase {
    Nondegenerate,
    DegOne,
    DegTwo { discriminant: f64, pass: bool },
    Undecided { reason: String },
}

/// Outcome of the infinite-spin test for one central configuration.
#[derive(Debug, Clone)]
pub struct SpinVerdict {
    pub case: SpinCase,
    pub n0: usize,
    /// Cubic slice over the center directions, keyed by mode labels
    /// counting from 5.
    pub a_slice: BTreeMap<String, f64>,
    /// Reduced planar coefficients when the center is two-dimensional.
    pub c: Option<[f64; 4]>,
    /// Characteristic directions of the reduced system and the radial form
    /// evaluated there.
    pub theta0: Vec<f64>,
    pub phi_theta0: Vec<f64>,
}

impl Serialize for SpinVerdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(None)?;
        let label = match &self.case {
            SpinCase::Nondegenerate => "Nondegenerate",
            SpinCase::DegOne => "DegOne",
            SpinCase::DegTwo { .. } => "DegTwo",
            SpinCase::Undecided { .. } => "Undecided",
        };
        m.serialize_entry("case", label)?;
        m.serialize_entry("n0", &self.n0)?;
        match &self.case {
            SpinCase::DegTwo { discriminant, pass } => {
                m.serialize_entry("discriminant", discriminant)?;
                m.serialize_entry("pass", pass)?;
            }
            SpinCase::Undecided { reason } => {
                m.serialize_entry("reason", reason)?;
            }
            _ => {}
        }
        if !self.a_slice.is_empty() {
            m.serialize_entry("a", &self.a_slice)?;
        }
        if let Some(c) = &self.c {
            let named: BTreeMap<&str, f64> =
                [("c1", c[0]), ("c2", c[1]), ("c3", c[2]), ("c4", c[3])]
                    .into_iter()
                    .collect();
            m.serialize_entry("c", &named)?;
        }
        if !self.theta0.is_empty() {
            m.serialize_entry("theta0", &self.theta0)?;
            m.serialize_entry("phi_theta0", &self.phi_theta0)?;
        }
        m.end()
    }
}

fn bare_verdict(case: SpinCase, n0: usize) -> SpinVerdict {
    SpinVerdict {
        case,
        n0,
        a_slice: BTreeMap::new(),
        c: None,
        theta0: Vec::new(),
        phi_theta0: Vec::new(),
    }
}

fn deg_two_verdict(kappa: f64, a: [f64; 4]) -> Result<SpinVerdict, NormalError> {
    let [a555, a556, a566, a666] = a;
    let disc = discriminant(a555, a556, a566, a666);
    let scale = a555.abs().max(a556.abs()).max(a566.abs()).max(a666.abs());
    let mut a_slice = BTreeMap::new();
    a_slice.insert("555".to_string(), a555);
    a_slice.insert("556".to_string(), a556);
    a_slice.insert("566".to_string(), a566);
    a_slice.insert("666".to_string(), a666);
    let rk = kappa.sqrt();
    let c = [-a555 / rk, -a556 / rk, -a566 / rk, -a666 / rk];
    if !(disc.abs() > tol::EXACT_F64 * scale.powi(4)) {
        let mut v = bare_verdict(
            SpinCase::Undecided {
                reason: "zero_discriminant".to_string(),
            },
            2,
        );
        v.a_slice = a_slice;
        v.c = Some(c);
        return Ok(v);
    }
    let sys = PlanarSystem::from_center(c);
    let (phi, psi) = polar_forms(&sys)?;
    let theta0 = characteristic_directions(&psi)?;
    let phi_theta0 = theta0.iter().map(|t| phi.eval(*t)).collect();
    Ok(SpinVerdict {
        case: SpinCase::DegTwo {
            discriminant: disc,
            pass: true,
        },
        n0: 2,
        a_slice,
        c: Some(c),
        theta0,
        phi_theta0,
    })
}

fn verdict_for(n0: usize, chart: &FrameChart) -> Result<SpinVerdict, NormalError> {
    match n0 {
        0 => Ok(bare_verdict(SpinCase::Nondegenerate, 0)),
        1 => {
            let mut v = bare_verdict(SpinCase::DegOne, 1);
            v.a_slice.insert("555".to_string(), chart.a(0, 0, 0));
            Ok(v)
        }
        2 => deg_two_verdict(
            chart.kappa,
            [
                chart.a(0, 0, 0),
                chart.a(0, 0, 1),
                chart.a(0, 1, 1),
                chart.a(1, 1, 1),
            ],
        ),
        _ => Ok(bare_verdict(
            SpinCase::Undecided {
                reason: "n0_ge_3".to_string(),
            },
            n0,
        )),
    }
}

/// Decide the infinite-spin question for a classified central
/// configuration.
pub fn spin_verdict(
    report: &SpectralReport,
    chart: &FrameChart,
) -> Result<SpinVerdict, NormalError> {
    if report.partition.n0 != chart.partition.n0 {
        return Err(NormalError::PartitionMismatch {
            report: report.partition.n0,
            chart: chart.partition.n0,
        });
    }
    verdict_for(chart.partition.n0, chart)
}

type PlanarField = dyn Fn(f64, f64) -> (f64, f64) + Send + Sync;

/// Planar model u' = P_m(u, v) + ..., v' = Q_m(u, v) + ...: the leading
/// homogeneous forms and optionally the exact field.
#[derive(Clone)]
pub struct PlanarSystem {
    pub m: usize,
    /// Coefficient of x^(m-i) y^i in the first component, length m + 1.
    pub pm: Vec<f64>,
    pub qm: Vec<f64>,
    full_rhs: Option<Arc<PlanarField>>,
}

impl fmt::Debug for PlanarSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlanarSystem")
            .field("m", &self.m)
            .field("pm", &self.pm)
            .field("qm", &self.qm)
            .field("exact", &self.full_rhs.is_some())
            .finish()
    }
}

fn eval_form(c: &[f64], x: f64, y: f64) -> f64 {
    let d = c.len() - 1;
    c.iter()
        .enumerate()
        .map(|(i, ci)| ci * x.powi((d - i) as i32) * y.powi(i as i32))
        .sum()
}

impl PlanarSystem {
    pub fn homogeneous(m: usize, pm: Vec<f64>, qm: Vec<f64>) -> Result<Self, NormalError> {
        if m < 2 {
            return Err(NormalError::BadDegree(m));
        }
        for c in [&pm, &qm] {
            if c.len() != m + 1 {
                return Err(NormalError::BadForm {
                    expected: m + 1,
                    got: c.len(),
                });
            }
        }
        Ok(Self {
            m,
            pm,
            qm,
            full_rhs: None,
        })
    }

    /// Quadratic system of a two-dimensional center reduction.
    pub fn from_center(c: [f64; 4]) -> Self {
        Self {
            m: 2,
            pm: vec![c[0], 2.0 * c[1], c[2]],
            qm: vec![c[1], 2.0 * c[2], c[3]],
            full_rhs: None,
        }
    }

    /// Attach the exact field; the leading forms stay as analysis data.
    pub fn with_full_rhs(
        mut self,
        f: impl Fn(f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Self {
        self.full_rhs = Some(Arc::new(f));
        self
    }

    pub fn leading(&self, x: f64, y: f64) -> (f64, f64) {
        (eval_form(&self.pm, x, y), eval_form(&self.qm, x, y))
    }

    pub fn rhs(&self, x: f64, y: f64) -> (f64, f64) {
        match &self.full_rhs {
            Some(f) => f(x, y),
            None => self.leading(x, y),
        }
    }
}

/// Homogeneous trigonometric polynomial
/// sum_i coeffs\[i\] cos^(d-i)(theta) sin^i(theta).
#[derive(Debug, Clone)]
pub struct TrigPoly {
    pub coeffs: Vec<f64>,
}

impl TrigPoly {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        eval_form(&self.coeffs, c, s)
    }

    pub fn derivative(&self) -> TrigPoly {
        let d = self.degree();
        let mut out = vec![0.0; d + 1];
        for (j, slot) in out.iter_mut().enumerate() {
            if j >= 1 {
                *slot -= (d - (j - 1)) as f64 * self.coeffs[j - 1];
            }
            if j + 1 <= d {
                *slot += (j + 1) as f64 * self.coeffs[j + 1];
            }
        }
        TrigPoly { coeffs: out }
    }

    pub fn coeff_scale(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc.max(c.abs()))
    }
}

/// Radial and angular forms of the leading part on the unit circle:
/// rho' = rho^m Phi(theta) + ..., rho theta' = rho^m Psi(theta) + ....
pub fn polar_forms(sys: &PlanarSystem) -> Result<(TrigPoly, TrigPoly), NormalError> {
    if sys.pm.iter().chain(&sys.qm).all(|v| *v == 0.0) {
        return Err(NormalError::ZeroLeadingPart);
    }
    let m = sys.m;
    let d = m + 1;
    let mut phi = vec![0.0; d + 1];
    let mut psi = vec![0.0; d + 1];
    for i in 0..=d {
        let pmi = if i <= m { sys.pm[i] } else { 0.0 };
        let qmi = if i <= m { sys.qm[i] } else { 0.0 };
        let pm_prev = if i >= 1 { sys.pm[i - 1] } else { 0.0 };
        let qm_prev = if i >= 1 { sys.qm[i - 1] } else { 0.0 };
        phi[i] = pmi + qm_prev;
        psi[i] = qmi - pm_prev;
    }
    Ok((TrigPoly { coeffs: phi }, TrigPoly { coeffs: psi }))
}

fn binom(n: usize, k: usize) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

/// Coefficients of the half-angle polynomial p(t) with
/// Psi(theta) = (1 + t^2)^(-d) p(t), t = tan(theta/2).
fn half_angle_poly(coeffs: &[f64]) -> Vec<f64> {
    let d = coeffs.len() - 1;
    let mut out = vec![0.0; 2 * d + 1];
    for (i, &ci) in coeffs.iter().enumerate() {
        if ci == 0.0 {
            continue;
        }
        let scale = ci * 2f64.powi(i as i32);
        for k in 0..=(d - i) {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            out[2 * k + i] += scale * sign * binom(d - i, k);
        }
    }
    out
}

fn polish_direction(psi: &TrigPoly, dpsi: &TrigPoly, mut theta: f64, scale: f64) -> f64 {
    for _ in 0..40 {
        let f = psi.eval(theta);
        if f.abs() <= 1e-15 * scale {
            break;
        }
        let d = dpsi.eval(theta);
        if d.abs() <= 1e-12 * scale {
            break;
        }
        let step = (f / d).clamp(-0.1, 0.1);
        theta -= step;
        if step.abs() <= 1e-16 {
            break;
        }
    }
    theta
}

/// All characteristic directions theta in [0, 2 pi) with Psi(theta) = 0,
/// found on the half-angle polynomial and polished on Psi itself.
pub fn characteristic_directions(psi: &TrigPoly) -> Result<Vec<f64>, NormalError> {
    let scale = psi.coeff_scale();
    if scale == 0.0 {
        return Err(NormalError::IdenticallyZero(scale));
    }
    let dpsi = psi.derivative();
    let tau = std::f64::consts::TAU;
    let mut candidates = Vec::new();
    for root in fit::poly_roots(&half_angle_poly(&psi.coeffs))? {
        if root.im.abs() <= 1e-7 * (1.0 + root.re.abs()) {
            candidates.push(2.0 * root.re.atan());
        }
    }
    // tan(theta/2) cannot reach the angle opposite the branch point, so
    // check it separately.
    if psi.eval(std::f64::consts::PI).abs() <= 1e-10 * scale {
        candidates.push(std::f64::consts::PI);
    }
    let mut out: Vec<f64> = candidates
        .into_iter()
        .map(|t| polish_direction(psi, &dpsi, t, scale).rem_euclid(tau))
        .filter(|t| psi.eval(*t).abs() <= 1e-10 * scale)
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-8);
    if out.len() > 1 {
        let (first, last) = (out[0], *out.last().unwrap());
        if first + tau - last <= 1e-8 {
            out.pop();
        }
    }
    Ok(out)
}

/// Analytic decay description along one characteristic direction.
#[derive(Debug, Clone, Serialize)]
pub struct RateEstimate {
    pub theta0: f64,
    pub phi_value: f64,
    /// Power of (-tau) in the decay law.
    pub exponent: f64,
    /// ((m - 1) Phi(theta0))^(-1/(m-1)); NaN when only the bound survives.
    pub prefactor: f64,
    /// Set when the radial form does not support the sharp asymptote.
    pub bound_only: bool,
}

pub fn rate_estimate(phi: &TrigPoly, theta0: f64, m: usize) -> RateEstimate {
    let pv = phi.eval(theta0);
    let em = 1.0 / (m as f64 - 1.0);
    let base = (m as f64 - 1.0) * pv;
    let bound_only = !(base > tol::EXACT_F64 * phi.coeff_scale());
    RateEstimate {
        theta0,
        phi_value: pv,
        exponent: em,
        prefactor: if bound_only { f64::NAN } else { base.powf(-em) },
        bound_only,
    }
}

struct PlanarOde<'s>(&'s PlanarSystem);

impl OdeSystem for PlanarOde<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, y: &DVector<f64>, dydt: &mut DVector<f64>) -> Result<(), RhsError> {
        let (du, dv) = self.0.rhs(y[0], y[1]);
        dydt[0] = du;
        dydt[1] = dv;
        Ok(())
    }
}

/// Integrate the planar model over [span.0, span.1], exact field when
/// attached.
pub fn simulate_planar(
    sys: &PlanarSystem,
    seed: [f64; 2],
    span: [f64; 2],
    rtol: f64,
) -> Result<Solution, NormalError> {
    let y0 = DVector::from_column_slice(&seed);
    Integrator::new(rtol, tol::ODE_ATOL)
        .integrate(&PlanarOde(sys), span[0], y0, span[1])
        .map_err(Into::into)
}

/// Numeric tail data of one backward run.
#[derive(Debug, Clone, Serialize)]
pub struct PlanarFit {
    /// Extrapolated angle limit in [0, 2 pi).
    pub theta0: f64,
    /// Median of rho (-tau)^(1/(m-1)) over the tail.
    pub prefactor: f64,
    /// Fitted decay power of rho against -tau.
    pub exponent: f64,
    pub samples: usize,
    pub rho_end: f64,
}

/// Integrate backward from tau = 0 to tau = -span and fit the decay law on
/// the trailing part of the run: the decay power from a log-log line, the
/// prefactor as a tail median, and the angle limit by difference
/// extrapolation over dyadic times.
pub fn simulate_and_fit(
    sys: &PlanarSystem,
    seed: [f64; 2],
    span: f64,
    rtol: f64,
) -> Result<PlanarFit, NormalError> {
    let rho0 = seed[0].hypot(seed[1]);
    let integ = Integrator::new(rtol, 1e-4 * rtol * rho0.max(f64::MIN_POSITIVE));
    let y0 = DVector::from_column_slice(&seed);
    let guard_hi = 1e3 * rho0;
    let guard_lo = 1e-12 * rho0;
    let sol = integ.integrate_observed(&PlanarOde(sys), 0.0, y0, -span, |st| {
        let r = st.y[0].hypot(st.y[1]);
        r.is_finite() && r < guard_hi && r > guard_lo
    })?;
    if sol.steps.len() < 8 {
        return Err(FitError::TooFewSamples {
            need: 8,
            got: sol.steps.len(),
        }
        .into());
    }

    // Accepted steps stretch geometrically on a decaying run, so build the
    // fit on dense interpolated samples rather than on the raw mesh.
    let em = 1.0 / (sys.m as f64 - 1.0);
    let t_end = sol.last().t;
    let cut = t_end * (1.0 - tol::TAIL_FRACTION);
    let count = 96;
    let mut xs = Vec::with_capacity(count);
    let mut ys = Vec::with_capacity(count);
    let mut ws = Vec::with_capacity(count);
    let ratio = t_end / cut;
    for i in 0..count {
        let t = cut * ratio.powf(i as f64 / (count - 1) as f64);
        let y = sol.sample(t);
        let rho = y[0].hypot(y[1]);
        xs.push((-t).ln());
        ys.push(rho.ln());
        ws.push(rho * (-t).powf(em));
    }
    let line = fit::linear_fit(&xs, &ys)?;
    ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let prefactor = ws[ws.len() / 2];

    let tau = std::f64::consts::TAU;
    let wrap = |d: f64| d - tau * (d / tau).round();
    let angle = |t: f64| {
        let y = sol.sample(t);
        y[1].atan2(y[0])
    };
    let s3 = angle(t_end / 4.0);
    let s2 = s3 + wrap(angle(t_end / 2.0) - s3);
    let s1 = s2 + wrap(angle(t_end) - s2);
    let (d1, d2) = (s1 - s2, s2 - s3);
    let mut theta_limit = s1;
    if d2.abs() > 1e-14 && d1.abs() < d2.abs() {
        let r = d1 / d2;
        theta_limit = s1 + d1 * r / (1.0 - r);
    }
    let last = sol.last();
    Ok(PlanarFit {
        theta0: theta_limit.rem_euclid(tau),
        prefactor,
        exponent: -line.slope,
        samples: count,
        rho_end: last.y[0].hypot(last.y[1]),
    })
}

/// One detected eigenvalue relation mu_target = sum alpha_j mu_j.
#[derive(Debug, Clone, Serialize)]
pub struct Resonance {
    pub target: usize,
    pub alpha: Vec<usize>,
    pub order: usize,
    pub residual: f64,
    /// Holds only at the looser near-tolerance, not the exact one.
    pub near: bool,
}

fn compositions(n: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(slot: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slot + 1 == cur.len() {
            cur[slot] = left;
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[slot] = v;
            rec(slot + 1, left - v, cur, out);
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut cur = vec![0usize; n];
    rec(0, total, &mut cur, &mut out);
    out
}

/// Exhaustive search for integer relations among eigenvalues with orders
/// from 2 up to `max_order` (capped at 12), one shell per order in
/// parallel. Relations inside the exact tolerance come first in each
/// shell; near-relations are flagged.
pub fn resonance_scan(eigs: &[Complex64], max_order: usize) -> Vec<Resonance> {
    let max_order = max_order.min(12);
    if eigs.is_empty() || max_order < 2 {
        return Vec::new();
    }
    let shells: Vec<Vec<Resonance>> = (2..=max_order)
        .into_par_iter()
        .map(|order| {
            let mut found = Vec::new();
            for alpha in compositions(eigs.len(), order) {
                let mut rhs = Complex64::new(0.0, 0.0);
                let mut rhs_scale = 0.0;
                for (&a, e) in alpha.iter().zip(eigs) {
                    rhs += a as f64 * e;
                    rhs_scale += a as f64 * e.norm();
                }
                for (k, ek) in eigs.iter().enumerate() {
                    let residual = (ek - rhs).norm();
                    let scale = ek.norm() + rhs_scale;
                    if residual <= tol::RESONANCE_NEAR_REL * scale {
                        found.push(Resonance {
                            target: k,
                            alpha: alpha.clone(),
                            order,
                            residual,
                            near: residual > tol::RESONANCE_SCAN_REL * scale,
                        });
                    }
                }
            }
            found
        })
        .collect();
    shells.into_iter().flatten().collect()
}

//! Newton solver for central configurations and spectral classification of
//! the restricted Hessian.
//!
//! A central configuration satisfies grad U = -lambda r in the mass metric
//! with lambda = U/I. The normalized potential I^(1/2) U has r as a critical
//! point, and its Hessian restricted to the mass-orthogonal complement of
//! the translations, r itself, and i r carries the 2N-4 eigenvalues mu_j
//! that control the collision-manifold dynamics. The sign partition of the
//! mu_j against the thresholds 0 and -kappa/16 is what downstream modules
//! consume, so it is computed scale-invariantly here.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::nbody::{MassedConfiguration, NBodyError};
use crate::tol;

#[derive(Debug, Error)]
pub enum CcError {
    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Geometry(#[from] NBodyError),
    #[error("least-squares step failed: {0}")]
    LinearSolve(String),
    #[error("supplied basis is not mass-orthonormal against the frame (residual {0:.3e})")]
    BadBasis(f64),
    #[error("supplied basis does not diagonalize the restricted operator (residual {0:.3e})")]
    NotEigenbasis(f64),
    #[error("supplied basis has {got} vectors, expected {expected}")]
    BadBasisCount { got: usize, expected: usize },
}

/// A solved central configuration.
#[derive(Debug, Clone)]
pub struct CentralConfiguration {
    /// Centered configuration, unit moment of inertia unless stated.
    pub config: MassedConfiguration,
    /// Multiplier lambda = U/I at the stored scale.
    pub lambda: f64,
    /// Mass-metric norm of grad U + lambda r.
    pub residual: f64,
    /// Newton steps that were taken to produce it (zero for exact input).
    pub iterations: usize,
}

impl CentralConfiguration {
    /// Wrap a configuration that is already (near-)central, computing
    /// lambda = U/I and the defect residual.
    pub fn from_config(config: &MassedConfiguration) -> Result<Self, CcError> {
        let c = config.center_and_project();
        let u = c.potential()?;
        let i = c.moment_of_inertia();
        let lambda = u / i;
        let grad = c.potential_gradient()?;
        let defect = grad.coords() + lambda * c.coords();
        let residual = mass_norm(&c.masses().metric_diag(), &defect);
        Ok(Self {
            config: c,
            lambda,
            residual,
            iterations: 0,
        })
    }

    /// Rescale to unit moment of inertia.
    pub fn normalized(&self) -> Result<Self, CcError> {
        let config = self.config.normalized()?;
        let mut out = Self::from_config(&config)?;
        out.iterations = self.iterations;
        Ok(out)
    }

    pub fn kappa(&self) -> f64 {
        2.0 * self.lambda
    }
}

/// Which scale a spectral report is computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Rescale to I = 1 first (the default; this is the scale the blown-up
    /// dynamics lives at).
    UnitInertia,
    /// Keep the configuration exactly as stored, for value-level comparison
    /// with tabulated eigenvalues in other coordinates.
    AsStated,
}

/// Counts of restricted eigenvalues per class: zero, positive, in
/// (-kappa/16, 0), below -kappa/16, and resonant at -kappa/16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub n0: usize,
    pub np: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.n0 + self.np + self.n1 + self.n2 + self.n3
    }
}

/// Records the configuration norm the report's eigenvalues refer to.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleNote {
    /// Mass-metric norm of the base configuration, sqrt(I).
    pub norm_r0: f64,
    pub note: String,
}

/// Restricted-Hessian spectrum of a central configuration, with the
/// adapted basis and the eigenvalue partition.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    /// Base configuration at the scale the report refers to.
    pub config: MassedConfiguration,
    pub lambda: f64,
    pub kappa: f64,
    /// Eigenvalues mu_5..mu_2N in partition order (zero block first, then
    /// positive, then the two negative classes, then resonant; ascending
    /// within each block).
    pub mu: Vec<f64>,
    /// tilde mu_j = -kappa^(1/2)/4 + sqrt(mu_j + kappa/16), complex when the
    /// radicand is negative.
    pub tilde_mu: Vec<Complex64>,
    /// Unit tangent e3 = r0/|r0| in the mass metric.
    pub e3: DVector<f64>,
    /// e4 = i e3.
    pub e4: DVector<f64>,
    /// Mass-orthonormal eigenvectors E5..E2N aligned with `mu`.
    pub modes: Vec<DVector<f64>>,
    pub partition: Partition,
    pub scale_note: ScaleNote,
}

impl Serialize for SpectralReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("SpectralReport", 5)?;
        s.serialize_field("lambda", &self.lambda)?;
        s.serialize_field("kappa", &self.kappa)?;
        s.serialize_field("mu", &self.mu)?;
        let tm: Vec<[f64; 2]> = self.tilde_mu.iter().map(|z| [z.re, z.im]).collect();
        s.serialize_field("tilde_mu", &tm)?;
        s.serialize_field("partition", &self.partition)?;
        s.end()
    }
}

/// Dimension of the variety of collision orbits through the configuration's
/// similarity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldDimension {
    Exact(usize),
    /// Degenerate case: only an upper bound is available.
    UpperBound(usize),
}

impl ManifoldDimension {
    pub fn value(&self) -> usize {
        match *self {
            ManifoldDimension::Exact(d) | ManifoldDimension::UpperBound(d) => d,
        }
    }
}

pub(crate) fn mass_norm(md: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += md[i] * v[i] * v[i];
    }
    acc.sqrt()
}

pub(crate) fn mass_inner_raw(md: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += md[i] * a[i] * b[i];
    }
    acc
}

/// Extend `fixed` (assumed mass-orthonormal) to a full mass-orthonormal
/// basis; returns only the new vectors, chosen from pivoted standard basis
/// candidates with two projection passes each.
pub(crate) fn mass_complement(md: &DVector<f64>, fixed: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let dim = md.len();
    let mut ortho: Vec<DVector<f64>> = fixed.to_vec();
    let mut added = Vec::new();
    while ortho.len() < dim {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for i in 0..dim {
            let mut cand = DVector::zeros(dim);
            cand[i] = 1.0;
            for pass in 0..2 {
                let _ = pass;
                for q in &ortho {
                    let c = mass_inner_raw(md, &cand, q);
                    cand.axpy(-c, q, 1.0);
                }
            }
            let norm = mass_norm(md, &cand);
            if best.as_ref().map_or(true, |(bn, _)| norm > *bn) {
                best = Some((norm, cand));
            }
        }
        let (norm, v) = best.expect("dimension is positive");
        let v = v / norm;
        ortho.push(v.clone());
        added.push(v);
    }
    added
}

fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    for i in 0..v.len() {
        if v[i].abs() > 1e-9 * scale {
            if v[i] < 0.0 {
                *v = -v.clone();
            }
            return;
        }
    }
}

fn tilde_of(mu: f64, kappa: f64) -> Complex64 {
    Complex64::from(mu + kappa / 16.0).sqrt() - Complex64::from(kappa.sqrt() / 4.0)
}

/// Newton iteration for a central configuration near `seed`.
///
/// The augmented system fixes the scale by I = 1, the rotational phase by
/// orthogonality to i seed (ties broken toward positive inner product with
/// the seed), and the translations by the center-of-mass rows. Steps are
/// least-squares solutions of the stacked linearization.
pub fn solve_cc(
    seed: &MassedConfiguration,
    tol: f64,
    max_iter: usize,
) -> Result<CentralConfiguration, CcError> {
    let seed_c = seed.center_and_project();
    let n = seed_c.n();
    let dim = 2 * n;
    let md = seed_c.masses().metric_diag();
    let iseed = seed_c.rotate90();

    let mut x = seed_c.coords().clone();
    let mut lambda = {
        let u = seed_c.potential()?;
        u / seed_c.moment_of_inertia()
    };

    let eval = |x: &DVector<f64>, lambda: f64| -> Result<(DVector<f64>, f64), CcError> {
        let c = seed_c.with_coords(x.clone())?;
        let grad = c.potential_gradient()?;
        let mut f = DVector::zeros(dim + 4);
        for i in 0..dim {
            f[i] = grad.coords()[i] + lambda * x[i];
        }
        let mut inertia = 0.0;
        let mut phase = 0.0;
        let mut comx = 0.0;
        let mut comy = 0.0;
        for i in 0..dim {
            inertia += md[i] * x[i] * x[i];
            phase += md[i] * x[i] * iseed.coords()[i];
        }
        for k in 0..n {
            comx += seed_c.masses()[k] * x[2 * k];
            comy += seed_c.masses()[k] * x[2 * k + 1];
        }
        f[dim] = inertia - 1.0;
        f[dim + 1] = phase;
        f[dim + 2] = comx;
        f[dim + 3] = comy;
        let res = mass_norm(&md, &f.rows(0, dim).into_owned());
        Ok((f, res))
    };

    let (mut f, mut grad_res) = eval(&x, lambda)?;
    let mut iterations = 0;

    while iterations < max_iter {
        if grad_res <= tol && f.norm() <= tol.max(1e-12) {
            break;
        }
        let c = seed_c.with_coords(x.clone())?;
        let b = c.hessian_blocks()?;
        let mut jac = DMatrix::zeros(dim + 4, dim + 1);
        for row in 0..dim {
            let m = md[row];
            for col in 0..dim {
                jac[(row, col)] = b[(row, col)] / m;
            }
            jac[(row, row)] += lambda;
            jac[(row, dim)] = x[row];
        }
        for col in 0..dim {
            jac[(dim, col)] = 2.0 * md[col] * x[col];
            jac[(dim + 1, col)] = md[col] * iseed.coords()[col];
        }
        for k in 0..n {
            jac[(dim + 2, 2 * k)] = seed_c.masses()[k];
            jac[(dim + 3, 2 * k + 1)] = seed_c.masses()[k];
        }

        let svd = jac.svd(true, true);
        let delta = svd
            .solve(&f, 1e-13)
            .map_err(|e| CcError::LinearSolve(e.to_string()))?;

        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let x_try = &x - damping * delta.rows(0, dim);
            let lambda_try = lambda - damping * delta[dim];
            match eval(&x_try.clone_owned(), lambda_try) {
                Ok((f_try, res_try)) => {
                    if f_try.norm() < f.norm() || res_try <= tol {
                        x = x_try.clone_owned();
                        lambda = lambda_try;
                        f = f_try;
                        grad_res = res_try;
                        accepted = true;
                        break;
                    }
                }
                Err(CcError::Geometry(NBodyError::Collision { .. })) => {}
                Err(e) => return Err(e),
            }
            damping *= 0.5;
        }
        iterations += 1;
        if !accepted {
            return Err(CcError::NoConvergence {
                iterations,
                residual: grad_res,
            });
        }
    }

    if grad_res > tol {
        return Err(CcError::NoConvergence {
            iterations,
            residual: grad_res,
        });
    }

    // Polish: exact unit inertia, gauge sign, recomputed multiplier.
    let mut c = seed_c.with_coords(x)?.normalized()?;
    let sign = {
        let mut acc = 0.0;
        for i in 0..dim {
            acc += md[i] * c.coords()[i] * seed_c.coords()[i];
        }
        acc
    };
    if sign < 0.0 {
        c = c.rotate_scale(1.0, std::f64::consts::PI)?;
    }
    let mut out = CentralConfiguration::from_config(&c)?;
    out.iterations = iterations;
    if out.residual > tol {
        return Err(CcError::NoConvergence {
            iterations,
            residual: out.residual,
        });
    }
    Ok(out)
}

/// Spectral classification at unit moment of inertia.
pub fn classify(cc: &CentralConfiguration, zero_tol: f64) -> Result<SpectralReport, CcError> {
    classify_with(cc, zero_tol, Normalization::UnitInertia)
}

/// Spectral classification with explicit scale handling.
///
/// The eigenvalue partition is always decided from the unit-inertia values,
/// so it does not depend on the reporting scale.
pub fn classify_with(
    cc: &CentralConfiguration,
    zero_tol: f64,
    normalization: Normalization,
) -> Result<SpectralReport, CcError> {
    let base = match normalization {
        Normalization::UnitInertia => cc.normalized()?,
        Normalization::AsStated => cc.clone(),
    };
    let c = base.config.center_and_project();
    let md = c.masses().metric_diag();
    let dim = 2 * c.n();
    let inertia = c.moment_of_inertia();
    let sqrt_i = inertia.sqrt();
    let lambda = base.lambda;
    let kappa = 2.0 * lambda;

    let (e1, e2) = MassedConfiguration::translations(c.masses());
    let total_mass = c.masses().total();
    let e1n = e1.coords() / total_mass.sqrt();
    let e2n = e2.coords() / total_mass.sqrt();
    let e3 = c.coords() / sqrt_i;
    let e4 = c.rotate90().coords() / sqrt_i;
    let fixed = [e1n, e2n, e3.clone(), e4.clone()];
    let w = mass_complement(&md, &fixed);

    let b = c.hessian_blocks()?;
    let k = dim - 4;
    let mut s = DMatrix::zeros(k, k);
    for i in 0..k {
        let bw = &b * &w[i];
        for j in i..k {
            let v = w[j].dot(&bw);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    for i in 0..k {
        s[(i, i)] += lambda;
    }

    let eig = s.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &bi| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[bi]));

    // Scale-invariant partition: classify at unit inertia regardless of the
    // reporting scale (mu_unit = I^{3/2} * eig(S), kappa_unit = I^{3/2} kappa).
    let unit_factor = inertia.powf(1.5);
    let lambda_unit = unit_factor * lambda;
    let kappa_unit = 2.0 * lambda_unit;

    #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    enum Class {
        Zero,
        Positive,
        Shallow,
        Deep,
        Resonant,
    }
    let classify_one = |mu_unit: f64| -> Class {
        if mu_unit.abs() <= zero_tol * lambda_unit {
            Class::Zero
        } else if (mu_unit + kappa_unit / 16.0).abs() <= tol::RESONANCE_REL * kappa_unit {
            Class::Resonant
        } else if mu_unit > 0.0 {
            Class::Positive
        } else if mu_unit > -kappa_unit / 16.0 {
            Class::Shallow
        } else {
            Class::Deep
        }
    };

    let mut buckets: [Vec<usize>; 5] = Default::default();
    for &idx in &order {
        let mu_unit = unit_factor * eig.eigenvalues[idx];
        let class = classify_one(mu_unit);
        buckets[class as usize].push(idx);
    }
    let partition = Partition {
        n0: buckets[0].len(),
        np: buckets[1].len(),
        n1: buckets[2].len(),
        n2: buckets[3].len(),
        n3: buckets[4].len(),
    };

    let mut mu = Vec::with_capacity(k);
    let mut modes = Vec::with_capacity(k);
    for bucket in &buckets {
        for &idx in bucket {
            mu.push(sqrt_i * eig.eigenvalues[idx]);
            let mut v = DVector::zeros(dim);
            for (col, wv) in w.iter().enumerate() {
                v.axpy(eig.eigenvectors[(col, idx)], wv, 1.0);
            }
            fix_sign(&mut v);
            modes.push(v);
        }
    }
    let tilde_mu = mu.iter().map(|&m| tilde_of(m, kappa)).collect();

    let scale_note = ScaleNote {
        norm_r0: sqrt_i,
        note: match normalization {
            Normalization::UnitInertia => {
                "unit moment of inertia; |r0| = 1, tabulated values mu/sqrt(I) coincide with mu".to_string()
            }
            Normalization::AsStated => format!(
                "as stated: |r0| = sqrt(I) = {sqrt_i:.12}; tabulated values correspond to mu/|r0|"
            ),
        },
    };

    Ok(SpectralReport {
        config: c,
        lambda,
        kappa,
        mu,
        tilde_mu,
        e3,
        e4,
        modes,
        partition,
        scale_note,
    })
}

impl SpectralReport {
    /// Replace the eigenvectors by user-supplied ones (needed when signs or
    /// in-eigenspace rotations must match an external convention). The new
    /// vectors must be mass-orthonormal, orthogonal to the frame span, and
    /// diagonalize the restricted operator with the stored eigenvalues.
    pub fn with_modes(&self, supplied: Vec<DVector<f64>>) -> Result<Self, CcError> {
        let k = self.mu.len();
        if supplied.len() != k {
            return Err(CcError::BadBasisCount {
                got: supplied.len(),
                expected: k,
            });
        }
        let md = self.config.masses().metric_diag();
        let total_mass = self.config.masses().total();
        let (e1, e2) = MassedConfiguration::translations(self.config.masses());
        let frame = [
            e1.coords() / total_mass.sqrt(),
            e2.coords() / total_mass.sqrt(),
            self.e3.clone(),
            self.e4.clone(),
        ];
        let mut worst = 0.0_f64;
        for (i, v) in supplied.iter().enumerate() {
            for f in &frame {
                worst = worst.max(mass_inner_raw(&md, v, f).abs());
            }
            for (j, u) in supplied.iter().enumerate() {
                let g = mass_inner_raw(&md, v, u);
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        if worst > 1e-10 {
            return Err(CcError::BadBasis(worst));
        }

        let b = self.config.hessian_blocks()?;
        let sqrt_i = self.scale_note.norm_r0;
        let mut eig_res = 0.0_f64;
        for (v, &mu) in supplied.iter().zip(&self.mu) {
            // Restricted operator action sqrt(I) (lambda v + M^-1 B v),
            // compared in the mass norm against mu v.
            let mut av = &b * v;
            for i in 0..av.len() {
                av[i] = sqrt_i * (self.lambda * v[i] + av[i] / md[i]);
            }
            let defect = &av - mu * v;
            eig_res = eig_res.max(mass_norm(&md, &defect));
        }
        if eig_res > 1e-8 * self.lambda.abs().max(1.0) * sqrt_i {
            return Err(CcError::NotEigenbasis(eig_res));
        }

        let mut out = self.clone();
        out.modes = supplied;
        Ok(out)
    }
}

/// Degeneracy degree read off the bordered Hessian lambda M + B + M E4 E4^T M,
/// whose kernel, after the rotational direction is penalized away, has
/// exactly the dimension n0.
pub fn bordered_nullity(cc: &CentralConfiguration) -> Result<usize, CcError> {
    let c = cc.config.center_and_project();
    let md = c.masses().metric_diag();
    let dim = 2 * c.n();
    let b = c.hessian_blocks()?;
    let e4 = c.rotate90().coords().clone_owned();
    let mut g = b;
    for i in 0..dim {
        g[(i, i)] += cc.lambda * md[i];
    }
    let me4 = DVector::from_fn(dim, |i, _| md[i] * e4[i]);
    g += &me4 * me4.transpose();
    let eig = g.symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    let nullity = eig
        .eigenvalues
        .iter()
        .filter(|v| v.abs() <= tol::DEGENERACY_REL * scale)
        .count();
    Ok(nullity)
}

/// Dimension of the manifold of collision orbits associated with the
/// classified configuration: n_p + 8 in the nondegenerate case, and only the
/// upper bound n0 + n_p + 8 when degeneracies are present.
pub fn collision_manifold_dimension(report: &SpectralReport) -> ManifoldDimension {
    let p = report.partition;
    if p.n0 == 0 {
        ManifoldDimension::Exact(p.np + 8)
    } else {
        ManifoldDimension::UpperBound(p.n0 + p.np + 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbody::MassVector;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn lagrange() -> MassedConfiguration {
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

    fn perturbed_lagrange(eps: f64) -> MassedConfiguration {
        let c = lagrange();
        let bumps = [0.013, -0.008, 0.004, 0.011, -0.006, 0.009];
        let x = DVector::from_fn(6, |i, _| c.coords()[i] + eps * bumps[i] / 0.013);
        c.with_coords(x).unwrap()
    }

    #[test]
    fn newton_finds_lagrange() {
        let cc = solve_cc(&perturbed_lagrange(1e-2), 1e-12, 50).unwrap();
        assert!(cc.iterations <= 20, "took {} iterations", cc.iterations);
        assert!(cc.residual <= 1e-12);
        assert_relative_eq!(cc.lambda, 3.0, epsilon = 1e-11);
        assert_relative_eq!(cc.config.moment_of_inertia(), 1.0, epsilon = 1e-13);
    }

    #[test]
    fn exact_seed_takes_no_steps() {
        let cc = solve_cc(&lagrange(), 1e-10, 50).unwrap();
        assert_eq!(cc.iterations, 0);
    }

    #[test]
    fn two_body_multiplier() {
        let masses = MassVector::new(vec![1.0, 1.0]).unwrap();
        let seed = MassedConfiguration::from_points(masses, &[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        let cc = solve_cc(&seed, 1e-12, 50).unwrap();
        // At I = 1 the pair sits at (+-1/sqrt(2), 0), so U = 1/sqrt(2).
        assert_relative_eq!(cc.lambda, 1.0 / 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn lagrange_spectrum_and_partition() {
        let cc = solve_cc(&lagrange(), 1e-12, 50).unwrap();
        let report = classify(&cc, tol::DEGENERACY_REL).unwrap();
        assert_eq!(report.mu.len(), 2);
        assert_eq!(report.partition.total(), 2);
        assert_eq!(report.partition.n0, 0);
        assert_eq!(report.partition.np, 2);
        assert!(report.partition.np >= cc.config.n() - 2);
        assert_relative_eq!(report.kappa, 6.0, epsilon = 1e-10);
        for (mu, tm) in report.mu.iter().zip(&report.tilde_mu) {
            let expect = Complex64::from(mu + report.kappa / 16.0).sqrt()
                - Complex64::from(report.kappa.sqrt() / 4.0);
            assert_abs_diff_eq!(tm.re, expect.re, epsilon = 1e-13);
            assert_abs_diff_eq!(tm.im, expect.im, epsilon = 1e-13);
            assert!(tm.re > 0.0);
        }
    }

    #[test]
    fn restricted_operator_matches_normalized_potential_hessian() {
        // Oracle: difference the analytic Cartesian gradient of
        // I^(1/2) U and compare the full-space operator with the closed
        // formula restricted to the complement.
        let cc = solve_cc(&lagrange(), 1e-13, 50).unwrap();
        let c = &cc.config;
        let md = c.masses().metric_diag();
        let dim = 6;
        let tilde_grad = |x: &DVector<f64>| -> DVector<f64> {
            let cfg = c.with_coords(x.clone()).unwrap();
            let u = cfg.potential().unwrap();
            let i: f64 = (0..dim).map(|j| md[j] * x[j] * x[j]).sum();
            let gc = cfg.cartesian_gradient().unwrap();
            DVector::from_fn(dim, |j, _| i.sqrt() * gc[j] + u / i.sqrt() * md[j] * x[j])
        };
        let step = 1e-6;
        let mut fd = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            let mut xp = c.coords().clone();
            let mut xm = c.coords().clone();
            xp[a] += step;
            xm[a] -= step;
            let col = (tilde_grad(&xp) - tilde_grad(&xm)) / (2.0 * step);
            fd.set_column(a, &col);
        }
        // Formula: I^(1/2)(lambda I + M^-1 B) - 3 I^(-1/2) lambda r r^T M,
        // as a mass-metric operator; the finite difference gives M times it.
        let b = c.hessian_blocks().unwrap();
        let inertia = c.moment_of_inertia();
        let r = c.coords();
        let mut formula = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let mut v = inertia.sqrt() * (b[(i, j)] / md[i]);
                if i == j {
                    v += inertia.sqrt() * cc.lambda;
                }
                v -= 3.0 / inertia.sqrt() * cc.lambda * r[i] * r[j] * md[j];
                formula[(i, j)] = v;
            }
        }
        let operator_fd = DMatrix::from_fn(dim, dim, |i, j| fd[(i, j)] / md[i]);
        assert_relative_eq!((operator_fd - formula).norm(), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn eigenbasis_is_mass_orthonormal_and_diagonalizing() {
        let cc = solve_cc(&lagrange(), 1e-12, 50).unwrap();
        let report = classify(&cc, tol::DEGENERACY_REL).unwrap();
        let md = cc.config.masses().metric_diag();
        for (i, v) in report.modes.iter().enumerate() {
            for (j, u) in report.modes.iter().enumerate() {
                let g = mass_inner_raw(&md, v, u);
                let target = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g, target, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(mass_inner_raw(&md, v, &report.e3), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(mass_inner_raw(&md, v, &report.e4), 0.0, epsilon = 1e-12);
        }
        // Diagonalization residual.
        let b = report.config.hessian_blocks().unwrap();
        for (v, &mu) in report.modes.iter().zip(&report.mu) {
            let mut av = &b * v;
            for i in 0..av.len() {
                av[i] = report.lambda * v[i] + av[i] / md[i];
            }
            let defect = &av - mu * v;
            assert!(mass_norm(&md, &defect) <= 1e-10);
        }
    }

    #[test]
    fn nullity_and_dimension_agree_for_lagrange() {
        let cc = solve_cc(&lagrange(), 1e-12, 50).unwrap();
        let report = classify(&cc, tol::DEGENERACY_REL).unwrap();
        assert_eq!(bordered_nullity(&cc).unwrap(), report.partition.n0);
        assert_eq!(bordered_nullity(&cc).unwrap(), 0);
        assert_eq!(
            collision_manifold_dimension(&report),
            ManifoldDimension::Exact(report.partition.np + 8)
        );
    }

    #[test]
    fn partition_is_scale_invariant_and_mu_scales() {
        let cc = solve_cc(&lagrange(), 1e-12, 50).unwrap();
        let rho = 1.7;
        let scaled = CentralConfiguration::from_config(
            &cc.config.rotate_scale(rho, 0.4).unwrap(),
        )
        .unwrap();
        let base = classify_with(&cc, tol::DEGENERACY_REL, Normalization::AsStated).unwrap();
        let moved = classify_with(&scaled, tol::DEGENERACY_REL, Normalization::AsStated).unwrap();
        assert_eq!(base.partition, moved.partition);
        for (a, b) in base.mu.iter().zip(&moved.mu) {
            assert_relative_eq!(b, &(a / (rho * rho)), max_relative = 1e-10);
        }
    }

    #[test]
    fn report_json_schema() {
        let cc = solve_cc(&lagrange(), 1e-12, 50).unwrap();
        let report = classify(&cc, tol::DEGENERACY_REL).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        let obj = json.as_object().unwrap();
        for key in ["lambda", "kappa", "mu", "tilde_mu", "partition"] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert_eq!(json["partition"]["n0"], 0);
        assert_eq!(json["tilde_mu"].as_array().unwrap().len(), 2);
        assert_eq!(json["tilde_mu"][0].as_array().unwrap().len(), 2);
    }
}

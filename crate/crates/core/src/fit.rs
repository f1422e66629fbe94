//! Small regression and root-finding helpers used by the asymptotic
//! diagnostics: ordinary and least-absolute-deviation line fits, a golden
//! section minimizer, and a companion-matrix polynomial root finder.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum FitError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("abscissae are degenerate (zero variance)")]
    DegenerateAbscissae,
    #[error("polynomial has no nonzero coefficients")]
    ZeroPolynomial,
}

/// Result of a straight-line fit y = intercept + slope * x.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub r2: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64), FitError> {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(x, w)| w * x).sum();
    let sy: f64 = y.iter().zip(w).map(|(y, w)| w * y).sum();
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    if det.abs() <= f64::EPSILON * sw * sxx.max(1.0) {
        return Err(FitError::DegenerateAbscissae);
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    Ok((intercept, slope))
}

fn finish(x: &[f64], y: &[f64], intercept: f64, slope: f64) -> LinearFit {
    let n = x.len() as f64;
    let mean_y = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|y| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let dof = (x.len().saturating_sub(2)).max(1) as f64;
    let sigma2 = ss_res / dof;
    let mean_x = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|x| (x - mean_x).powi(2)).sum();
    let se_slope = (sigma2 / sxx).sqrt();
    let se_intercept = (sigma2 * (1.0 / n + mean_x * mean_x / sxx)).sqrt();
    LinearFit {
        intercept,
        slope,
        se_intercept,
        se_slope,
        r2,
    }
}

/// Ordinary least squares line fit with standard errors and R^2.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit, FitError> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(FitError::TooFewSamples { need: 2, got: x.len().min(y.len()) });
    }
    let w = vec![1.0; x.len()];
    let (intercept, slope) = weighted_line(x, y, &w)?;
    Ok(finish(x, y, intercept, slope))
}

/// Least-absolute-deviation line fit via iteratively reweighted least
/// squares. Standard errors and R^2 are reported for the returned line in
/// the ordinary sense.
pub fn lad_linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit, FitError> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(FitError::TooFewSamples { need: 2, got: x.len().min(y.len()) });
    }
    let mut w = vec![1.0; x.len()];
    let (mut intercept, mut slope) = weighted_line(x, y, &w)?;
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    for _ in 0..60 {
        for i in 0..x.len() {
            let res = (y[i] - intercept - slope * x[i]).abs();
            w[i] = 1.0 / res.max(1e-12 * scale);
        }
        let (bi, bs) = weighted_line(x, y, &w)?;
        let moved = (bi - intercept).abs() + (bs - slope).abs();
        intercept = bi;
        slope = bs;
        if moved <= 1e-13 * (intercept.abs() + slope.abs() + 1.0) {
            break;
        }
    }
    Ok(finish(x, y, intercept, slope))
}

/// Sum of absolute residuals of the best LAD line, used as a profile
/// objective when an extra nonlinear parameter is being scanned.
pub fn lad_objective(x: &[f64], y: &[f64]) -> f64 {
    match lad_linear_fit(x, y) {
        Ok(fit) => x
            .iter()
            .zip(y)
            .map(|(x, y)| (y - fit.predict(*x)).abs())
            .sum(),
        Err(_) => f64::INFINITY,
    }
}

/// Golden-section minimization of a unimodal scalar function on [a, b].
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let xm = 0.5 * (a + b);
    let fm = f(xm);
    if fc < fd && fc < fm {
        (c, fc)
    } else if fd < fm {
        (d, fd)
    } else {
        (xm, fm)
    }
}

/// Roots of a real polynomial c[0] + c[1] x + ... + c[n] x^n as eigenvalues
/// of the companion matrix. Leading zero coefficients are trimmed.
pub fn poly_roots(coeffs: &[f64]) -> Result<Vec<Complex64>, FitError> {
    let mut c: Vec<f64> = coeffs.to_vec();
    while let Some(&last) = c.last() {
        if last == 0.0 && c.len() > 1 {
            c.pop();
        } else {
            break;
        }
    }
    if c.iter().all(|&v| v == 0.0) {
        return Err(FitError::ZeroPolynomial);
    }
    let n = c.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    let lead = c[n];
    let mut companion = DMatrix::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        companion[(i, n - 1)] = -c[i] / lead;
    }
    let eigs = companion.complex_eigenvalues();
    Ok(eigs.iter().copied().collect())
}

/// Simpson quadrature of samples f at nodes t (cumulative), with a
/// user-supplied midpoint evaluator for each interval.
pub fn cumulative_simpson<F: FnMut(usize) -> f64>(
    t: &[f64],
    f: &[f64],
    mut midpoint: F,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..t.len() {
        let h = t[i] - t[i - 1];
        let fm = midpoint(i - 1);
        acc += h / 6.0 * (f[i - 1] + 4.0 * fm + f[i]);
        out.push(acc);
    }
    out
}

/// Weighted root-mean-square of a vector against per-component scales.
pub fn wrms(v: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        let e = v[i] / scale[i];
        acc += e * e;
    }
    (acc / v.len() as f64).sqrt()
}

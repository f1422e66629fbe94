//! Collision-orbit dynamics in physical and blown-up coordinates.
//!
//! In the chart variables the equations of motion acquire a removable
//! singularity at total collision once time is rescaled by dt = r^(3/2) dtau
//! and the radial velocity is replaced by Upsilon = r'/r. The rescaled
//! system is regular at r = 0 and has {r = 0} as an invariant manifold
//! carrying an equilibrium circle z = Z = 0, Upsilon = +-kappa^(1/2). This
//! module evaluates that vector field (resolving the implicit Z' coupling),
//! integrates it, generates collision orbits from the unstable directions,
//! and measures the asymptotics the chart is built to expose.

use nalgebra::{Cholesky, DVector};
use thiserror::Error;

use crate::ccfind::{mass_inner_raw, mass_norm};
use crate::fit::{self, FitError};
use crate::frame::{ChartPoint, FrameChart, FrameError};
use crate::nbody::{MassVector, MassedConfiguration, NBodyError};
use crate::ode::{Integrator, OdeError, OdeSystem, RhsError, Solution};
use crate::tol;

#[derive(Debug, Error)]
pub enum BlowupError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Geometry(#[from] NBodyError),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("shape velocity system is singular at |z|^2 = {z_norm_sq:.6}")]
    SingularShapeSystem { z_norm_sq: f64 },
    #[error("chart has no unstable modes to seed a collision orbit")]
    NoUnstableMode,
    #[error("mode mix has {got} coefficients, chart has {expected} unstable modes")]
    BadModeMix { got: usize, expected: usize },
    #[error("seed does not approach the equilibrium backward: norm went {norm_start:.3e} -> {norm_end:.3e}")]
    SeedEscapes { norm_start: f64, norm_end: f64 },
    #[error("trajectory covers only {decades:.2} decades before collision, need {needed:.1}")]
    InsufficientRange { decades: f64, needed: f64 },
    #[error("trajectory does not end near collision, nothing to fit")]
    NoCollisionDetected,
}

/// State of the blown-up system. `zv` holds the tau-derivatives z'.
#[derive(Debug, Clone)]
pub struct BlowupState {
    pub z: DVector<f64>,
    pub zv: DVector<f64>,
    pub r: f64,
    pub upsilon: f64,
    pub theta: f64,
}

impl BlowupState {
    pub fn equilibrium(chart: &FrameChart, sign: f64) -> Self {
        let n = chart.n_modes();
        Self {
            z: DVector::zeros(n),
            zv: DVector::zeros(n),
            r: 0.0,
            upsilon: sign.signum() * chart.kappa.sqrt(),
            theta: 0.0,
        }
    }

    fn pack(&self) -> DVector<f64> {
        let n = self.z.len();
        let mut y = DVector::zeros(2 * n + 3);
        y.rows_mut(0, n).copy_from(&self.z);
        y.rows_mut(n, n).copy_from(&self.zv);
        y[2 * n] = self.r;
        y[2 * n + 1] = self.upsilon;
        y[2 * n + 2] = self.theta;
        y
    }

    fn unpack(n: usize, y: &DVector<f64>) -> Self {
        Self {
            z: y.rows(0, n).into_owned(),
            zv: y.rows(n, n).into_owned(),
            r: y[2 * n],
            upsilon: y[2 * n + 1],
            theta: y[2 * n + 2],
        }
    }

    /// Distance to the equilibrium circle at Upsilon = +sqrt(kappa).
    pub fn equilibrium_distance(&self, chart: &FrameChart) -> f64 {
        (self.z.norm_squared()
            + self.zv.norm_squared()
            + (self.upsilon - chart.kappa.sqrt()).powi(2))
        .sqrt()
    }
}

/// Kinetic form K(z, z') = (1/2)[(z.z')^2/z3^2 + |z'|^2 - (z^T Q z')^2].
pub fn kinetic_form(chart: &FrameChart, z: &DVector<f64>, zv: &DVector<f64>) -> f64 {
    let z3sq = 1.0 - z.norm_squared();
    let p = z.dot(zv);
    let beta = z.dot(&(&chart.q * zv));
    0.5 * (p * p / z3sq + zv.norm_squared() - beta * beta)
}

/// Left side minus right side of the rescaled energy relation:
/// E(s) = Upsilon^2 + 2 K(z, Z) - 2 U(z), which equals 2 r H on an orbit of
/// energy H.
pub fn energy_form(chart: &FrameChart, s: &BlowupState) -> Result<f64, BlowupError> {
    let (u, _) = chart.potential_in_chart(&s.z)?;
    Ok(s.upsilon * s.upsilon + 2.0 * kinetic_form(chart, &s.z, &s.zv) - 2.0 * u)
}

/// Full right-hand side of the blown-up system, with the implicit Z'
/// contributions moved to the left and the resulting symmetric positive
/// definite (2N-4) system solved directly.
pub fn blowup_rhs(chart: &FrameChart, s: &BlowupState) -> Result<BlowupState, BlowupError> {
    let zsq = s.z.norm_squared();
    if zsq >= 1.0 {
        return Err(BlowupError::Frame(FrameError::OutsideChart {
            z_norm_sq: zsq,
        }));
    }
    let n = chart.n_modes();
    let z3sq = 1.0 - zsq;
    let (u, du) = chart.potential_in_chart(&s.z)?;

    let b = &chart.q * &s.z;
    let qzv = &chart.q * &s.zv;
    let beta = s.z.dot(&qzv);
    let p = s.z.dot(&s.zv);
    let s2 = s.zv.norm_squared();

    // (I + z z^T / z3^2 - b b^T) Z' = F
    let mut lhs = nalgebra::DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            lhs[(i, j)] += s.z[i] * s.z[j] / z3sq - b[i] * b[j];
        }
    }
    let mut f = DVector::zeros(n);
    for i in 0..n {
        f[i] = du[i]
            - s.z[i] * s2 / z3sq
            - s.z[i] * p * p / (z3sq * z3sq)
            - 2.0 * beta * qzv[i]
            - 0.5 * s.upsilon * (s.zv[i] + s.z[i] * p / z3sq + beta * b[i]);
    }
    let zv_prime = Cholesky::new(lhs)
        .ok_or(BlowupError::SingularShapeSystem { z_norm_sq: zsq })?
        .solve(&f);

    let upsilon_prime =
        0.5 * s.upsilon * s.upsilon + p * p / z3sq + s2 - beta * beta - u;

    Ok(BlowupState {
        z: s.zv.clone(),
        zv: zv_prime,
        r: s.r * s.upsilon,
        upsilon: upsilon_prime,
        theta: beta,
    })
}

struct BlowupSystem<'a> {
    chart: &'a FrameChart,
}

impl OdeSystem for BlowupSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.chart.n_modes() + 3
    }

    fn rhs(&self, _t: f64, y: &DVector<f64>, dydt: &mut DVector<f64>) -> Result<(), RhsError> {
        let n = self.chart.n_modes();
        let s = BlowupState::unpack(n, y);
        if s.z.norm_squared() >= 1.0 {
            return Err(RhsError::OutOfDomain(format!(
                "|z|^2 = {:.6} >= 1",
                s.z.norm_squared()
            )));
        }
        let d = blowup_rhs(self.chart, &s).map_err(|e| RhsError::Eval(e.to_string()))?;
        dydt.copy_from(&d.pack());
        Ok(())
    }
}

/// Trajectory of the blown-up system with per-sample diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, BlowupState)>,
    /// Physical time via dt = r^(3/2) dtau, zero at the first sample.
    pub physical_time: Vec<f64>,
    /// |E(s) - 2 r H| per sample.
    pub energy_residual: Vec<f64>,
    /// Angular momentum of the Cartesian lift per sample (zero at r = 0).
    pub j_residual: Vec<f64>,
    /// Orbit energy inferred from the initial sample (zero for r = 0 starts).
    pub h: f64,
}

impl Trajectory {
    pub fn max_energy_residual(&self) -> f64 {
        self.energy_residual.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_j_residual(&self) -> f64 {
        self.j_residual.iter().cloned().fold(0.0, f64::max)
    }

    pub fn last(&self) -> &BlowupState {
        &self.samples.last().expect("trajectory is nonempty").1
    }
}

/// Angular momentum of the Cartesian lift of a blown-up state.
fn lifted_angular_momentum(chart: &FrameChart, s: &BlowupState) -> Result<f64, BlowupError> {
    if s.r <= 0.0 {
        return Ok(0.0);
    }
    let point = ChartPoint {
        r: s.r,
        theta: s.theta,
        z: s.z.clone(),
    };
    let x = chart.from_chart(&point)?;
    let md = x.masses().metric_diag();

    // x' = r' w_rot + r theta' i w_rot + r e^{i theta}(z3' E3 + sum Z_k E_k),
    // and xdot = r^(-3/2) x'.
    let z3 = point.z3();
    let p = s.z.dot(&s.zv);
    let mut w_prime = (-p / z3) * &chart.e3;
    for (k, e) in chart.modes.iter().enumerate() {
        w_prime.axpy(s.zv[k], e, 1.0);
    }
    let (sin_t, cos_t) = s.theta.sin_cos();
    let rot = |v: &DVector<f64>| -> DVector<f64> {
        let mut iv = DVector::zeros(v.len());
        for k in 0..v.len() / 2 {
            iv[2 * k] = -v[2 * k + 1];
            iv[2 * k + 1] = v[2 * k];
        }
        cos_t * v + sin_t * iv
    };
    let theta_prime = s.z.dot(&(&chart.q * &s.zv));
    let w = x.coords() / s.r;
    let iw = {
        let mut iv = DVector::zeros(w.len());
        for k in 0..w.len() / 2 {
            iv[2 * k] = -w[2 * k + 1];
            iv[2 * k + 1] = w[2 * k];
        }
        iv
    };
    let x_prime = (s.r * s.upsilon) * &w + (s.r * theta_prime) * &iw + s.r * rot(&w_prime);
    let xdot = s.r.powf(-1.5) * x_prime;
    Ok(mass_inner_raw(&md, &iw, &xdot) * s.r)
}

fn build_trajectory(chart: &FrameChart, solution: &Solution) -> Result<Trajectory, BlowupError> {
    let n = chart.n_modes();
    let samples: Vec<(f64, BlowupState)> = solution
        .steps
        .iter()
        .map(|st| (st.t, BlowupState::unpack(n, &st.y)))
        .collect();

    let first = &samples[0].1;
    let e0 = energy_form(chart, first)?;
    let h = if first.r > 0.0 { e0 / (2.0 * first.r) } else { 0.0 };

    let mut energy_residual = Vec::with_capacity(samples.len());
    let mut j_residual = Vec::with_capacity(samples.len());
    for (_, s) in &samples {
        let e = energy_form(chart, s)?;
        energy_residual.push((e - 2.0 * s.r * h).abs());
        j_residual.push(lifted_angular_momentum(chart, s)?.abs());
    }

    let taus: Vec<f64> = samples.iter().map(|(t, _)| *t).collect();
    let rates: Vec<f64> = samples.iter().map(|(_, s)| s.r.powf(1.5)).collect();
    let physical_time = fit::cumulative_simpson(&taus, &rates, |i| {
        let tm = 0.5 * (taus[i] + taus[i + 1]);
        let y = solution.sample(tm);
        y[2 * n].max(0.0).powf(1.5)
    });

    Ok(Trajectory {
        samples,
        physical_time,
        energy_residual,
        j_residual,
        h,
    })
}

/// Integrate the blown-up system over a tau span (either direction).
pub fn integrate_blowup(
    chart: &FrameChart,
    s0: &BlowupState,
    tau_span: (f64, f64),
    rtol: f64,
    atol: f64,
) -> Result<Trajectory, BlowupError> {
    let sys = BlowupSystem { chart };
    let solution = Integrator::new(rtol, atol).integrate(&sys, tau_span.0, s0.pack(), tau_span.1)?;
    build_trajectory(chart, &solution)
}

/// Same, but stop early once the shape leaves a ball |z| <= z_stop. Orbits
/// leaving the equilibrium head for the chart boundary (a binary collision)
/// in finite tau, where unguarded integration grinds to nothing.
fn integrate_blowup_bounded(
    chart: &FrameChart,
    s0: &BlowupState,
    tau_span: (f64, f64),
    rtol: f64,
    atol: f64,
    z_stop: f64,
) -> Result<Trajectory, BlowupError> {
    let sys = BlowupSystem { chart };
    let n = chart.n_modes();
    let solution = Integrator::new(rtol, atol).integrate_observed(
        &sys,
        tau_span.0,
        s0.pack(),
        tau_span.1,
        |step| step.y.rows(0, n).norm() <= z_stop,
    )?;
    build_trajectory(chart, &solution)
}

/// CSV export: tau, t, r, Upsilon, theta, z..., Z..., energy and J columns,
/// 17 significant digits.
pub fn write_trajectory_csv<W: std::io::Write>(
    traj: &Trajectory,
    mut out: W,
) -> std::io::Result<()> {
    let n = traj.samples[0].1.z.len();
    let mut header = String::from("tau,t,r,Upsilon,theta");
    for k in 0..n {
        header.push_str(&format!(",z{k}"));
    }
    for k in 0..n {
        header.push_str(&format!(",Z{k}"));
    }
    header.push_str(",energy_residual,J_residual");
    writeln!(out, "{header}")?;
    for (i, (tau, s)) in traj.samples.iter().enumerate() {
        let mut row = format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            tau, traj.physical_time[i], s.r, s.upsilon, s.theta
        );
        for k in 0..n {
            row.push_str(&format!(",{:.16e}", s.z[k]));
        }
        for k in 0..n {
            row.push_str(&format!(",{:.16e}", s.zv[k]));
        }
        row.push_str(&format!(
            ",{:.16e},{:.16e}",
            traj.energy_residual[i], traj.j_residual[i]
        ));
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Why a physical-time integration stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum CartesianEnd {
    SpanCompleted,
    /// Bodies got close enough that the blown-up chart should take over.
    NearCollision { t: f64, min_separation: f64 },
}

/// Direct Newtonian trajectory in inertial coordinates.
#[derive(Debug, Clone)]
pub struct CartesianTrajectory {
    pub masses: MassVector,
    pub times: Vec<f64>,
    pub positions: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub end: CartesianEnd,
}

impl CartesianTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn configuration(&self, i: usize) -> Result<MassedConfiguration, NBodyError> {
        MassedConfiguration::new(self.masses.clone(), self.positions[i].clone())
    }

    /// Total energy K - U at sample i.
    pub fn energy(&self, i: usize) -> Result<f64, NBodyError> {
        let md = self.masses.metric_diag();
        let mut kinetic = 0.0;
        for j in 0..self.velocities[i].len() {
            kinetic += 0.5 * md[j] * self.velocities[i][j] * self.velocities[i][j];
        }
        let c = self.configuration(i)?;
        Ok(kinetic - c.potential()?)
    }

    /// Angular momentum <i x, v> at sample i.
    pub fn angular_momentum(&self, i: usize) -> f64 {
        let md = self.masses.metric_diag();
        let x = &self.positions[i];
        let mut ix = DVector::zeros(x.len());
        for k in 0..x.len() / 2 {
            ix[2 * k] = -x[2 * k + 1];
            ix[2 * k + 1] = x[2 * k];
        }
        mass_inner_raw(&md, &ix, &self.velocities[i])
    }

    pub fn energy_drift(&self) -> Result<f64, NBodyError> {
        let e0 = self.energy(0)?;
        let mut worst = 0.0_f64;
        for i in 0..self.len() {
            worst = worst.max((self.energy(i)? - e0).abs());
        }
        Ok(worst)
    }

    pub fn j_drift(&self) -> f64 {
        let j0 = self.angular_momentum(0);
        (0..self.len())
            .map(|i| (self.angular_momentum(i) - j0).abs())
            .fold(0.0, f64::max)
    }
}

struct NewtonSystem {
    masses: MassVector,
}

impl OdeSystem for NewtonSystem {
    fn dim(&self) -> usize {
        4 * self.masses.len()
    }

    fn rhs(&self, _t: f64, y: &DVector<f64>, dydt: &mut DVector<f64>) -> Result<(), RhsError> {
        let dim = 2 * self.masses.len();
        let x = y.rows(0, dim).into_owned();
        let c = MassedConfiguration::new(self.masses.clone(), x)
            .map_err(|e| RhsError::Eval(e.to_string()))?;
        let accel = c
            .potential_gradient()
            .map_err(|e| RhsError::OutOfDomain(e.to_string()))?;
        dydt.rows_mut(0, dim).copy_from(&y.rows(dim, dim));
        dydt.rows_mut(dim, dim).copy_from(accel.coords());
        Ok(())
    }
}

fn min_separation(masses: &MassVector, x: &DVector<f64>) -> f64 {
    let n = masses.len();
    let mut best = f64::INFINITY;
    for k in 0..n {
        for j in (k + 1)..n {
            let dx = x[2 * j] - x[2 * k];
            let dy = x[2 * j + 1] - x[2 * k + 1];
            best = best.min(dx.hypot(dy));
        }
    }
    best
}

/// Integrate the Newton equations directly; stops gracefully when bodies
/// approach collision (the chart-side integrator takes over from there).
pub fn integrate_cartesian(
    masses: &MassVector,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    t_span: (f64, f64),
    rtol: f64,
) -> Result<CartesianTrajectory, BlowupError> {
    let dim = x0.len();
    let mut y0 = DVector::zeros(2 * dim);
    y0.rows_mut(0, dim).copy_from(x0);
    y0.rows_mut(dim, dim).copy_from(v0);

    let sep0 = min_separation(masses, x0);
    let floor = 1e-7 * sep0;
    let sys = NewtonSystem {
        masses: masses.clone(),
    };
    let span_scale = t_span.0.abs().max(t_span.1.abs()).max(1.0);
    let integrator = Integrator::new(rtol, rtol * 1e-2).with_min_step(1e-13 * span_scale);
    let mut hit: Option<(f64, f64)> = None;
    let solution = integrator.integrate_observed(&sys, t_span.0, y0, t_span.1, |step| {
        let sep = min_separation(masses, &step.y.rows(0, dim).into_owned());
        if sep <= floor {
            hit = Some((step.t, sep));
            false
        } else {
            true
        }
    })?;

    let times: Vec<f64> = solution.steps.iter().map(|s| s.t).collect();
    let positions: Vec<DVector<f64>> = solution
        .steps
        .iter()
        .map(|s| s.y.rows(0, dim).into_owned())
        .collect();
    let velocities: Vec<DVector<f64>> = solution
        .steps
        .iter()
        .map(|s| s.y.rows(dim, dim).into_owned())
        .collect();
    let end = match hit {
        Some((t, min_separation)) => CartesianEnd::NearCollision { t, min_separation },
        None => CartesianEnd::SpanCompleted,
    };
    Ok(CartesianTrajectory {
        masses: masses.clone(),
        times,
        positions,
        velocities,
        end,
    })
}

/// Closed-form chart kinematics of one Cartesian sample: values, first and
/// second time derivatives of (r, theta, z), computed from (x, v) and the
/// analytic acceleration without any finite differencing.
struct ChartKinematics {
    r: f64,
    rdot: f64,
    rddot: f64,
    thetadot: f64,
    thetaddot: f64,
    theta: f64,
    z: DVector<f64>,
    zdot: DVector<f64>,
    zddot: DVector<f64>,
}

fn chart_kinematics(
    chart: &FrameChart,
    x: &DVector<f64>,
    v: &DVector<f64>,
    g: &DVector<f64>,
    theta_hint: Option<f64>,
) -> ChartKinematics {
    let md = chart.base.config.masses().metric_diag();
    let inner = |a: &DVector<f64>, b: &DVector<f64>| mass_inner_raw(&md, a, b);
    let rotv = |a: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(a.len());
        for k in 0..a.len() / 2 {
            out[2 * k] = -a[2 * k + 1];
            out[2 * k + 1] = a[2 * k];
        }
        out
    };

    let r = mass_norm(&md, x);
    let rdot = inner(x, v) / r;
    let rddot = (inner(v, v) + inner(x, g) - rdot * rdot) / r;

    // Plane components against E3 and i E3.
    let e3 = &chart.e3;
    let ie3 = rotv(e3);
    let (c3, s3) = (inner(x, e3), inner(x, &ie3));
    let (c3d, s3d) = (inner(v, e3), inner(v, &ie3));
    let (c3dd, s3dd) = (inner(g, e3), inner(g, &ie3));
    let den = c3 * c3 + s3 * s3;
    let mut theta = s3.atan2(c3);
    if let Some(hint) = theta_hint {
        theta += std::f64::consts::TAU * ((hint - theta) / std::f64::consts::TAU).round();
    }
    let thetadot = (s3d * c3 - c3d * s3) / den;
    let thetaddot = ((s3dd * c3 - c3dd * s3) * den
        - (s3d * c3 - c3d * s3) * 2.0 * (c3 * c3d + s3 * s3d))
        / (den * den);

    let n = chart.n_modes();
    let mut z = DVector::zeros(n);
    let mut zdot = DVector::zeros(n);
    let mut zddot = DVector::zeros(n);
    let (sin_t, cos_t) = theta.sin_cos();
    for (k, e) in chart.modes.iter().enumerate() {
        let ie = rotv(e);
        let (pk, qk) = (inner(x, e), inner(x, &ie));
        let (pkd, qkd) = (inner(v, e), inner(v, &ie));
        let (pkdd, qkdd) = (inner(g, e), inner(g, &ie));
        // Components against the rotated frame vector w = e^{i theta} E_k
        // and its quarter turn i w.
        let xw = cos_t * pk + sin_t * qk;
        let xiw = -sin_t * pk + cos_t * qk;
        let vw = cos_t * pkd + sin_t * qkd;
        let viw = -sin_t * pkd + cos_t * qkd;
        let gw = cos_t * pkdd + sin_t * qkdd;

        let gk = xw;
        let gkd = vw + thetadot * xiw;
        let gkdd = gw + 2.0 * thetadot * viw + thetaddot * xiw - thetadot * thetadot * xw;

        z[k] = gk / r;
        zdot[k] = gkd / r - gk * rdot / (r * r);
        zddot[k] = gkdd / r - 2.0 * gkd * rdot / (r * r) - gk * rddot / (r * r)
            + 2.0 * gk * rdot * rdot / (r * r * r);
    }

    ChartKinematics {
        r,
        rdot,
        rddot,
        thetadot,
        thetaddot,
        theta,
        z,
        zdot,
        zddot,
    }
}

/// Residuals of one Cartesian sample against the moving-frame equations.
#[derive(Debug, Clone, Default)]
pub struct CrosscheckReport {
    /// Max residual of the full second-order system (arbitrary J).
    pub full: f64,
    /// Max residual of the reduced J = 0 system, when J vanishes.
    pub reduced: Option<f64>,
    /// Max deviation of theta-dot from the coupling form, when J vanishes.
    pub theta_rate: Option<f64>,
    pub j: f64,
}

impl CrosscheckReport {
    pub fn max(&self) -> f64 {
        self.full
            .max(self.reduced.unwrap_or(0.0))
            .max(self.theta_rate.unwrap_or(0.0))
    }
}

/// Map a Cartesian trajectory through the chart and evaluate the
/// moving-frame equations of motion on every sample.
pub fn crosscheck_frames(
    chart: &FrameChart,
    traj: &CartesianTrajectory,
) -> Result<CrosscheckReport, BlowupError> {
    let mut report = CrosscheckReport::default();
    let j0 = traj.angular_momentum(0);
    report.j = j0.abs();
    let j_is_zero = j0.abs() <= 1e-8;
    if j_is_zero {
        report.reduced = Some(0.0);
        report.theta_rate = Some(0.0);
    }

    let mut hint: Option<f64> = None;
    for i in 0..traj.len() {
        let x = &traj.positions[i];
        let v = &traj.velocities[i];
        let c = traj.configuration(i)?;
        let g = c.potential_gradient()?.coords().clone_owned();
        let k = chart_kinematics(chart, x, v, &g, hint);
        hint = Some(k.theta);

        let (u, du) = chart.potential_in_chart(&k.z)?;
        let z3sq = 1.0 - k.z.norm_squared();
        let b = &chart.q * &k.z;
        let qzd = &chart.q * &k.zdot;
        let p = k.z.dot(&k.zdot);
        let betadot = k.z.dot(&qzd);
        let betaddot = k.z.dot(&(&chart.q * &k.zddot));
        let zdd_z = k.z.dot(&k.zddot);
        let zd2 = k.zdot.norm_squared();
        let r = k.r;
        let r2 = r * r;

        // Full system, shape rows.
        for idx in 0..chart.n_modes() {
            let row = r2
                * (k.zddot[idx] + k.thetaddot * b[idx] + 2.0 * k.thetadot * qzd[idx])
                + r2 * (k.z[idx] * (zdd_z + zd2) / z3sq
                    + k.z[idx] * p * p / (z3sq * z3sq))
                + 2.0 * r * k.rdot
                    * (k.z[idx] * p / z3sq + k.zdot[idx] + k.thetadot * b[idx])
                - du[idx] / r;
            report.full = report.full.max(row.abs());
        }
        // Full system, radial row.
        let row_r = k.rddot
            - r * (p * p / z3sq + zd2 - 2.0 * k.thetadot * betadot + k.thetadot * k.thetadot)
            + u / r2;
        report.full = report.full.max(row_r.abs());
        // Full system, angular row (conservation of J).
        let row_theta =
            2.0 * r * k.rdot * (k.thetadot - betadot) + r2 * (k.thetaddot - betaddot);
        report.full = report.full.max(row_theta.abs());

        if j_is_zero {
            let mut reduced = report.reduced.unwrap();
            for idx in 0..chart.n_modes() {
                let dk = k.zddot[idx]
                    + betaddot * b[idx]
                    + 2.0 * betadot * qzd[idx]
                    + k.z[idx] * (zdd_z + zd2) / z3sq
                    + k.z[idx] * p * p / (z3sq * z3sq);
                let dkv = k.z[idx] * p / z3sq + k.zdot[idx] + betadot * b[idx];
                let row = dk + 2.0 * k.rdot / r * dkv - du[idx] / (r * r2);
                reduced = reduced.max(row.abs());
            }
            let kin = 0.5 * (p * p / z3sq + zd2 - betadot * betadot);
            let row_r_red = k.rddot - 2.0 * r * kin + u / r2;
            reduced = reduced.max(row_r_red.abs());
            report.reduced = Some(reduced);

            let tr = report.theta_rate.unwrap().max((k.thetadot - betadot).abs());
            report.theta_rate = Some(tr);
        }
    }
    Ok(report)
}

/// The exact zero-energy homothetic solution through the chart's base
/// configuration, collapsing at t = 0 and expanding for t > 0.
#[derive(Debug, Clone)]
pub struct HomotheticState {
    pub t: f64,
    pub r: f64,
    pub r_dot: f64,
    /// Positions r * E3.
    pub config: MassedConfiguration,
    /// Velocities r_dot * E3.
    pub velocity: DVector<f64>,
}

pub fn homothetic_orbit(chart: &FrameChart, t: f64) -> Result<HomotheticState, BlowupError> {
    let kappa = chart.kappa;
    let a = (1.5_f64).powf(2.0 / 3.0) * kappa.powf(1.0 / 3.0);
    let r = a * t.powf(2.0 / 3.0);
    let r_dot = (2.0 / 3.0) * a * t.powf(-1.0 / 3.0);
    let config = chart.base.config.with_coords(r * &chart.e3)?;
    let velocity = r_dot * &chart.e3;
    Ok(HomotheticState {
        t,
        r,
        r_dot,
        config,
        velocity,
    })
}

/// A collision orbit seeded from the unstable directions of the equilibrium
/// circle, with the backward relaxation kept for rate diagnostics.
#[derive(Debug, Clone)]
pub struct CollisionOrbit {
    pub backward: Trajectory,
    pub forward: Trajectory,
    /// Smallest unstable exponent present in the seed.
    pub seeded_rate: f64,
    /// Backward decay rate from a least-absolute-deviation tail fit.
    pub fitted_rate: f64,
    pub seed: BlowupState,
}

/// Unstable mode indices (within the chart's partition order) and their
/// exponents tilde mu = -kappa^(1/2)/4 + sqrt(mu + kappa/16) > 0.
pub fn unstable_modes(chart: &FrameChart) -> Vec<(usize, f64)> {
    let kappa = chart.kappa;
    let start = chart.partition.n0;
    (start..start + chart.partition.np)
        .map(|k| {
            let rate = -kappa.sqrt() / 4.0 + (chart.mu[k] + kappa / 16.0).sqrt();
            (k, rate)
        })
        .collect()
}

/// Project Upsilon onto the zero-energy relation by a one-dimensional
/// Newton iteration started at +sqrt(kappa).
pub fn project_to_energy_manifold(
    chart: &FrameChart,
    state: &mut BlowupState,
) -> Result<(), BlowupError> {
    for _ in 0..30 {
        let e = energy_form(chart, state)?;
        if e.abs() <= 1e-14 * chart.kappa {
            return Ok(());
        }
        state.upsilon -= e / (2.0 * state.upsilon);
    }
    Ok(())
}

/// Largest backward growth rate transverse to the unstable directions at
/// the Upsilon = +sqrt(kappa) restpoint; sets how long backward integration
/// stays meaningful before amplified noise floods the decaying signal.
fn max_stable_rate(chart: &FrameChart) -> f64 {
    let kappa = chart.kappa;
    chart
        .mu
        .iter()
        .map(|mu| {
            let disc = mu + kappa / 16.0;
            kappa.sqrt() / 4.0 + if disc > 0.0 { disc.sqrt() } else { 0.0 }
        })
        .fold(0.0, f64::max)
}

pub fn make_collision_orbit(
    chart: &FrameChart,
    mix: Option<&[f64]>,
    delta: f64,
    rtol: f64,
) -> Result<CollisionOrbit, BlowupError> {
    let unstable = unstable_modes(chart);
    if unstable.is_empty() {
        return Err(BlowupError::NoUnstableMode);
    }
    // Default: all weight on the leading (fastest) unstable mode.
    let coeffs: Vec<f64> = match mix {
        Some(c) => {
            if c.len() != unstable.len() {
                return Err(BlowupError::BadModeMix {
                    got: c.len(),
                    expected: unstable.len(),
                });
            }
            c.to_vec()
        }
        None => {
            let lead = unstable
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .map(|(i, _)| i)
                .expect("nonempty");
            let mut c = vec![0.0; unstable.len()];
            c[lead] = 1.0;
            c
        }
    };
    let norm: f64 = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut seeded_rate = f64::INFINITY;
    let mut lead_rate = 0.0_f64;
    for ((_, rate), c) in unstable.iter().zip(&coeffs) {
        if *c != 0.0 {
            seeded_rate = seeded_rate.min(*rate);
            lead_rate = lead_rate.max(*rate);
        }
    }

    // Backward window: a point at distance delta off the exact unstable
    // manifold picks up errors that grow backward at the largest stable
    // rate while the signal decays at the seeded rate, so the clean span
    // is limited by the integration tolerance.
    let t_back = 0.8 * (4.0 / rtol).ln() / (seeded_rate + max_stable_rate(chart));

    // The linear seed itself leaves the manifold at second order in delta.
    // Refine it by seeding far smaller (per mode, scaled so the linear flow
    // would arrive at delta after t_back) and flowing forward onto the
    // manifold, where the transverse error contracts relative to the size.
    let mut pre = BlowupState::equilibrium(chart, 1.0);
    for ((mode, rate), c) in unstable.iter().zip(&coeffs) {
        if *c == 0.0 {
            continue;
        }
        let amp = delta * c / norm * (-rate * t_back).exp();
        pre.z[*mode] = amp;
        pre.zv[*mode] = amp * rate;
    }
    project_to_energy_manifold(chart, &mut pre)?;
    let target = pre.equilibrium_distance(chart) * (seeded_rate * t_back).exp();
    let sys = BlowupSystem { chart };
    let grown = Integrator::new(rtol, rtol * 1e-2).integrate_observed(
        &sys,
        0.0,
        pre.pack(),
        2.0 * t_back,
        |step| {
            BlowupState::unpack(chart.n_modes(), &step.y).equilibrium_distance(chart) < target
        },
    )?;
    let mut seed = BlowupState::unpack(chart.n_modes(), &grown.last().y);
    project_to_energy_manifold(chart, &mut seed)?;

    let backward = integrate_blowup(chart, &seed, (0.0, -t_back), rtol, rtol * 1e-2)?;
    let d_start = backward.samples[0].1.equilibrium_distance(chart);
    let d_end = backward.last().equilibrium_distance(chart);
    if !(d_end < 0.5 * d_start) {
        return Err(BlowupError::SeedEscapes {
            norm_start: d_start,
            norm_end: d_end,
        });
    }

    // Tail fit of ln(distance) against tau over the trailing window.
    let m = backward.samples.len();
    let tail_start = m - ((m as f64) * tol::TAIL_FRACTION).ceil() as usize;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (tau, s) in &backward.samples[tail_start..] {
        let d = s.equilibrium_distance(chart);
        if d > 0.0 {
            xs.push(*tau);
            ys.push(d.ln());
        }
    }
    let fitted_rate = fit::lad_linear_fit(&xs, &ys)?.slope;

    let t_fwd = (0.25 / delta).ln() / lead_rate;
    let forward = integrate_blowup_bounded(chart, &seed, (0.0, t_fwd), rtol, rtol * 1e-2, 0.3)?;

    Ok(CollisionOrbit {
        backward,
        forward,
        seeded_rate,
        fitted_rate,
        seed,
    })
}

/// Tail behaviour of the chart angle along a trajectory.
#[derive(Debug, Clone)]
pub enum TailModel {
    /// Angle constant to rounding.
    Constant,
    /// |theta - theta0| ~ amplitude * exp(sigma tau).
    Exponential { sigma: f64, amplitude: f64, r2: f64 },
    /// |theta - theta0| ~ c * |tau|^(-p).
    PowerLaw { p: f64, c: f64, r2: f64 },
    /// Dyadic window variations refuse to settle; the recorded variations
    /// are the evidence.
    NotConvergent { window_variation: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ThetaLimit {
    pub theta0: f64,
    pub model: TailModel,
}

/// Estimate the angle limit from a (tau, theta) series whose tail (end of
/// the list) approaches the limit regime.
pub fn theta_limit_series(taus: &[f64], thetas: &[f64]) -> Result<ThetaLimit, BlowupError> {
    assert_eq!(taus.len(), thetas.len());
    let m = taus.len();
    let tail_start = m - ((m as f64) * tol::TAIL_FRACTION).ceil() as usize;
    let tail_t = &taus[tail_start..];
    let tail_th = &thetas[tail_start..];
    let last = *tail_th.last().expect("nonempty tail");

    let variation = tail_th
        .iter()
        .map(|th| (th - last).abs())
        .fold(0.0, f64::max);
    if variation <= 1e-12 {
        return Ok(ThetaLimit {
            theta0: last,
            model: TailModel::Constant,
        });
    }

    // Profile the limit value against an exponential tail by least absolute
    // deviations, then against a power law, and keep the better model.
    let log_resid = |theta0: f64, xs: &[f64]| -> f64 {
        let ys: Vec<f64> = tail_th
            .iter()
            .map(|th| (th - theta0).abs().max(1e-300).ln())
            .collect();
        fit::lad_objective(xs, &ys)
    };
    let spread = variation;
    let (lo, hi) = (last - 2.0 * spread, last + 2.0 * spread);

    let exp_obj = |theta0: f64| log_resid(theta0, tail_t);
    let (theta0_exp, obj_exp) = fit::golden_min(exp_obj, lo, hi, 1e-12 * spread.max(1e-12));

    let log_tau: Vec<f64> = tail_t.iter().map(|t| t.abs().max(1e-300).ln()).collect();
    let pow_obj = |theta0: f64| log_resid(theta0, &log_tau);
    let (theta0_pow, obj_pow) = fit::golden_min(pow_obj, lo, hi, 1e-12 * spread.max(1e-12));

    // A limit claim is only trustworthy when the fitted model has mostly
    // converged inside the window: the gap still open at the list end must
    // be small next to the variation already traversed. Slow creep of the
    // ln(ln) kind fits both models with a gap larger than the variation.
    let gap = (last - if obj_exp <= obj_pow { theta0_exp } else { theta0_pow }).abs();
    if gap > 0.75 * variation && variation > 1e-10 {
        let windows = 4;
        let mut window_variation = Vec::with_capacity(windows);
        for w in 0..windows {
            let lo = tail_start + w * (m - tail_start) / windows;
            let hi = tail_start + (w + 1) * (m - tail_start) / windows;
            let slice = &thetas[lo..hi.max(lo + 1).min(m)];
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in slice {
                mn = mn.min(v);
                mx = mx.max(v);
            }
            window_variation.push(mx - mn);
        }
        return Ok(ThetaLimit {
            theta0: last,
            model: TailModel::NotConvergent { window_variation },
        });
    }

    if obj_exp <= obj_pow {
        let ys: Vec<f64> = tail_th
            .iter()
            .map(|th| (th - theta0_exp).abs().max(1e-300).ln())
            .collect();
        let f = fit::linear_fit(tail_t, &ys)?;
        Ok(ThetaLimit {
            theta0: theta0_exp,
            model: TailModel::Exponential {
                sigma: f.slope,
                amplitude: f.intercept.exp(),
                r2: f.r2,
            },
        })
    } else {
        let ys: Vec<f64> = tail_th
            .iter()
            .map(|th| (th - theta0_pow).abs().max(1e-300).ln())
            .collect();
        let f = fit::linear_fit(&log_tau, &ys)?;
        Ok(ThetaLimit {
            theta0: theta0_pow,
            model: TailModel::PowerLaw {
                p: -f.slope,
                c: f.intercept.exp(),
                r2: f.r2,
            },
        })
    }
}

pub fn theta_limit(traj: &Trajectory) -> Result<ThetaLimit, BlowupError> {
    let taus: Vec<f64> = traj.samples.iter().map(|(t, _)| *t).collect();
    let thetas: Vec<f64> = traj.samples.iter().map(|(_, s)| s.theta).collect();
    theta_limit_series(&taus, &thetas)
}

/// Result of sweeping r = 0 energy-manifold states for monotonicity of
/// Upsilon, the gradient-like structure of the collision-manifold flow.
#[derive(Debug, Clone, Default)]
pub struct GradientLikeReport {
    pub checked: usize,
    /// Arcs with a Upsilon decrease beyond tolerance.
    pub violations: usize,
    /// Largest observed decrease between consecutive samples.
    pub max_drop: f64,
    /// Smallest pointwise Upsilon' seen anywhere.
    pub min_rate: f64,
}

pub fn gradient_like_check(
    chart: &FrameChart,
    states: &[BlowupState],
    tau_span: f64,
    rtol: f64,
) -> Result<GradientLikeReport, BlowupError> {
    let mut report = GradientLikeReport {
        min_rate: f64::INFINITY,
        ..Default::default()
    };
    for s0 in states {
        let traj = integrate_blowup_bounded(chart, s0, (0.0, tau_span), rtol, rtol * 1e-2, 0.7)?;
        let mut prev: Option<f64> = None;
        let mut violated = false;
        for (_, s) in &traj.samples {
            let rate = blowup_rhs(chart, s)?.upsilon;
            report.min_rate = report.min_rate.min(rate);
            if let Some(p) = prev {
                let drop = p - s.upsilon;
                if drop > 1e-12 {
                    violated = true;
                    report.max_drop = report.max_drop.max(drop);
                }
            }
            prev = Some(s.upsilon);
        }
        report.checked += 1;
        if violated {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// One fitted power law y ~ prefactor * s^slope near collision.
#[derive(Debug, Clone)]
pub struct PowerFit {
    pub slope: f64,
    pub prefactor: f64,
    pub se_slope: f64,
    pub r2: f64,
}

/// Power-law fits of the collision asymptotics, with time measured from the
/// estimated collision instant.
#[derive(Debug, Clone)]
pub struct AsymptoticExponents {
    pub t_collision: f64,
    pub inertia: PowerFit,
    pub potential: PowerFit,
    pub kinetic: PowerFit,
    pub radius: PowerFit,
    pub max_j: f64,
    pub decades: f64,
}

/// Log-log fits of I, U, K and r over the last two decades before the
/// collision detected at the end of a Cartesian trajectory.
pub fn asymptotic_exponents(
    traj: &CartesianTrajectory,
) -> Result<AsymptoticExponents, BlowupError> {
    if !matches!(traj.end, CartesianEnd::NearCollision { .. }) {
        return Err(BlowupError::NoCollisionDetected);
    }
    let md = traj.masses.metric_diag();
    let m = traj.len();

    // Collision time from the last two samples and r^(3/2) = B(t_c - t),
    // exact for the limiting power law. A least-squares estimate over a
    // longer window carries an error comparable to the final time-to-go
    // itself and would corrupt the log abscissae.
    let (ta, tb) = (traj.times[m - 2], traj.times[m - 1]);
    let ra = mass_norm(&md, &traj.positions[m - 2]).powf(1.5);
    let rb = mass_norm(&md, &traj.positions[m - 1]).powf(1.5);
    let rho = ra / rb;
    let t_c = (rho * tb - ta) / (rho - 1.0);

    let s_of = |i: usize| t_c - traj.times[i];
    let s_min = s_of(m - 1).max(f64::MIN_POSITIVE);
    let s_max_avail = s_of(0);
    let s_max = (100.0 * s_min).min(s_max_avail);
    let decades = (s_max / s_min).log10();
    if decades < 1.5 {
        return Err(BlowupError::InsufficientRange {
            decades,
            needed: 2.0,
        });
    }

    let mut ls = Vec::new();
    let mut li = Vec::new();
    let mut lu = Vec::new();
    let mut lk = Vec::new();
    let mut lr = Vec::new();
    let mut max_j = 0.0_f64;
    for i in 0..m {
        let s = s_of(i);
        if s < s_min || s > s_max {
            continue;
        }
        let c = traj.configuration(i)?;
        let r = mass_norm(&md, &traj.positions[i]);
        let u = c.potential()?;
        let mut kin = 0.0;
        for j in 0..traj.velocities[i].len() {
            kin += 0.5 * md[j] * traj.velocities[i][j] * traj.velocities[i][j];
        }
        ls.push(s.ln());
        li.push(c.moment_of_inertia().ln());
        lu.push(u.ln());
        lk.push(kin.ln());
        lr.push(r.ln());
        max_j = max_j.max(traj.angular_momentum(i).abs());
    }
    let power = |ys: &[f64]| -> Result<PowerFit, BlowupError> {
        let f = fit::linear_fit(&ls, ys)?;
        Ok(PowerFit {
            slope: f.slope,
            prefactor: f.intercept.exp(),
            se_slope: f.se_slope,
            r2: f.r2,
        })
    };
    Ok(AsymptoticExponents {
        t_collision: t_c,
        inertia: power(&li)?,
        potential: power(&lu)?,
        kinetic: power(&lk)?,
        radius: power(&lr)?,
        max_j,
        decades,
    })
}

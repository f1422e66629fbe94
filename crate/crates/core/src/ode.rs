//! Embedded Runge-Kutta-Fehlberg 7(8) integration over dynamic state vectors.
//!
//! The 13-stage pair gives an 8th order solution with a 7th order error
//! estimate, which suits the smooth but occasionally stiff-looking vector
//! fields on the collision manifold. Systems report domain violations from
//! their right-hand side; the stepper treats those as step rejections, so an
//! integration never evaluates the field outside its admissible set.

use nalgebra::DVector;
use thiserror::Error;

const STAGES: usize = 13;

const C: [f64; STAGES] = [
    0.0,
    2.0 / 27.0,
    1.0 / 9.0,
    1.0 / 6.0,
    5.0 / 12.0,
    0.5,
    5.0 / 6.0,
    1.0 / 6.0,
    2.0 / 3.0,
    1.0 / 3.0,
    1.0,
    0.0,
    1.0,
];

const A: [[f64; STAGES - 1]; STAGES - 1] = [
    [2.0 / 27.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 36.0, 1.0 / 12.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 24.0, 0.0, 1.0 / 8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [5.0 / 12.0, 0.0, -25.0 / 16.0, 25.0 / 16.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 20.0, 0.0, 0.0, 0.25, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        -25.0 / 108.0,
        0.0,
        0.0,
        125.0 / 108.0,
        -65.0 / 27.0,
        125.0 / 54.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [31.0 / 300.0, 0.0, 0.0, 0.0, 61.0 / 225.0, -2.0 / 9.0, 13.0 / 900.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        2.0,
        0.0,
        0.0,
        -53.0 / 6.0,
        704.0 / 45.0,
        -107.0 / 9.0,
        67.0 / 90.0,
        3.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        -91.0 / 108.0,
        0.0,
        0.0,
        23.0 / 108.0,
        -976.0 / 135.0,
        311.0 / 54.0,
        -19.0 / 60.0,
        17.0 / 6.0,
        -1.0 / 12.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        2383.0 / 4100.0,
        0.0,
        0.0,
        -341.0 / 164.0,
        4496.0 / 1025.0,
        -301.0 / 82.0,
        2133.0 / 4100.0,
        45.0 / 82.0,
        45.0 / 164.0,
        18.0 / 41.0,
        0.0,
        0.0,
    ],
    [
        3.0 / 205.0,
        0.0,
        0.0,
        0.0,
        0.0,
        -6.0 / 41.0,
        -3.0 / 205.0,
        -3.0 / 41.0,
        3.0 / 41.0,
        6.0 / 41.0,
        0.0,
        0.0,
    ],
    [
        -1777.0 / 4100.0,
        0.0,
        0.0,
        -341.0 / 164.0,
        4496.0 / 1025.0,
        -289.0 / 82.0,
        2193.0 / 4100.0,
        51.0 / 82.0,
        33.0 / 164.0,
        12.0 / 41.0,
        0.0,
        1.0,
    ],
];

const B8: [f64; STAGES] = [
    0.0,
    0.0,
    0.0,
    0.0,
    0.0,
    34.0 / 105.0,
    9.0 / 35.0,
    9.0 / 35.0,
    9.0 / 280.0,
    9.0 / 280.0,
    0.0,
    41.0 / 840.0,
    41.0 / 840.0,
];

/// Failure reported by a system's right-hand side.
#[derive(Debug, Clone, Error)]
pub enum RhsError {
    #[error("state left the admissible domain: {0}")]
    OutOfDomain(String),
    #[error("right-hand side evaluation failed: {0}")]
    Eval(String),
}

/// Integration failure.
#[derive(Debug, Clone, Error)]
pub enum OdeError {
    #[error("integration forced out of the domain near t = {t:.6e}: {detail}")]
    DomainExit { t: f64, detail: String },
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps at t = {t:.6e}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("invalid integration span [{t0}, {t1}]")]
    BadSpan { t0: f64, t1: f64 },
}

/// A first-order system y' = f(t, y).
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &DVector<f64>, dydt: &mut DVector<f64>) -> Result<(), RhsError>;
}

/// Step-size controller: h_new = safety * h * err^(-1/8), clamped.
#[derive(Debug, Clone)]
pub struct StepController {
    pub safety: f64,
    pub max_factor: f64,
    pub min_factor: f64,
}

impl Default for StepController {
    fn default() -> Self {
        Self {
            safety: 0.9,
            max_factor: 5.0,
            min_factor: 0.2,
        }
    }
}

impl StepController {
    fn factor(&self, err: f64) -> f64 {
        if err == 0.0 {
            return self.max_factor;
        }
        (self.safety * err.powf(-1.0 / 8.0)).clamp(self.min_factor, self.max_factor)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Stats {
    pub rhs_evals: u64,
    pub accepted: u64,
    pub rejected: u64,
}

/// One accepted step: state and derivative, enough for cubic Hermite
/// interpolation between nodes.
#[derive(Debug, Clone)]
pub struct Step {
    pub t: f64,
    pub y: DVector<f64>,
    pub dy: DVector<f64>,
}

/// Accepted steps of one integration, ordered in integration direction.
#[derive(Debug, Clone)]
pub struct Solution {
    pub steps: Vec<Step>,
    pub stats: Stats,
}

impl Solution {
    pub fn last(&self) -> &Step {
        self.steps.last().expect("solution has at least the initial step")
    }

    pub fn first(&self) -> &Step {
        self.steps.first().expect("solution has at least the initial step")
    }

    /// Cubic Hermite interpolation at time t, clamped to the covered span.
    pub fn sample(&self, t: f64) -> DVector<f64> {
        let steps = &self.steps;
        if steps.len() == 1 {
            return steps[0].y.clone();
        }
        let forward = steps[steps.len() - 1].t >= steps[0].t;
        let pos = steps.partition_point(|s| if forward { s.t <= t } else { s.t >= t });
        let hi = pos.clamp(1, steps.len() - 1);
        let (a, b) = (&steps[hi - 1], &steps[hi]);
        let h = b.t - a.t;
        if h == 0.0 {
            return a.y.clone();
        }
        let s = ((t - a.t) / h).clamp(0.0, 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * &a.y + (h10 * h) * &a.dy + h01 * &b.y + (h11 * h) * &b.dy
    }
}

/// Adaptive RKF7(8) driver.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub rtol: f64,
    pub atol: f64,
    pub controller: StepController,
    pub first_step: Option<f64>,
    pub min_step: Option<f64>,
    pub max_step: Option<f64>,
    pub max_steps: usize,
}

impl Integrator {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            controller: StepController::default(),
            first_step: None,
            min_step: None,
            max_step: None,
            max_steps: 2_000_000,
        }
    }

    pub fn with_first_step(mut self, h: f64) -> Self {
        self.first_step = Some(h);
        self
    }

    pub fn with_min_step(mut self, h: f64) -> Self {
        self.min_step = Some(h);
        self
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = Some(h.abs());
        self
    }

    /// Integrate from t0 to t1 (either direction), recording every accepted
    /// step.
    pub fn integrate(
        &self,
        sys: &dyn OdeSystem,
        t0: f64,
        y0: DVector<f64>,
        t1: f64,
    ) -> Result<Solution, OdeError> {
        self.drive(sys, t0, y0, t1, &[], |_| true)
    }

    /// Integrate with an observer called after every accepted step; the
    /// observer returns false to stop early (not an error).
    pub fn integrate_observed<F>(
        &self,
        sys: &dyn OdeSystem,
        t0: f64,
        y0: DVector<f64>,
        t1: f64,
        keep_going: F,
    ) -> Result<Solution, OdeError>
    where
        F: FnMut(&Step) -> bool,
    {
        self.drive(sys, t0, y0, t1, &[], keep_going)
    }

    /// Integrate while forcing accepted steps to land exactly on each
    /// checkpoint time, so the recorded states there carry full integrator
    /// accuracy rather than interpolation accuracy.
    pub fn integrate_checkpointed(
        &self,
        sys: &dyn OdeSystem,
        t0: f64,
        y0: DVector<f64>,
        t1: f64,
        checkpoints: &[f64],
    ) -> Result<Solution, OdeError> {
        self.drive(sys, t0, y0, t1, checkpoints, |_| true)
    }

    fn drive<F>(
        &self,
        sys: &dyn OdeSystem,
        t0: f64,
        y0: DVector<f64>,
        t1: f64,
        checkpoints: &[f64],
        mut keep_going: F,
    ) -> Result<Solution, OdeError>
    where
        F: FnMut(&Step) -> bool,
    {
        if !(t0.is_finite() && t1.is_finite()) || t0 == t1 {
            return Err(OdeError::BadSpan { t0, t1 });
        }
        let dir = (t1 - t0).signum();
        let span = (t1 - t0).abs();
        let h_floor = self
            .min_step
            .unwrap_or(1e-13 * span.max(t0.abs()).max(1.0))
            .abs();

        let dim = sys.dim();
        let mut stats = Stats::default();
        let mut k: Vec<DVector<f64>> = (0..STAGES).map(|_| DVector::zeros(dim)).collect();
        let mut t = t0;
        let mut y = y0;

        let mut dy0 = DVector::zeros(dim);
        sys.rhs(t, &y, &mut dy0)
            .map_err(|e| OdeError::DomainExit { t, detail: e.to_string() })?;
        stats.rhs_evals += 1;

        let mut h = dir
            * self
                .first_step
                .map(f64::abs)
                .unwrap_or_else(|| self.guess_first_step(sys, t, &y, &dy0, &mut stats))
                .min(span);

        let mut marks: Vec<f64> = checkpoints
            .iter()
            .copied()
            .filter(|&c| (c - t0) * dir > 0.0 && (t1 - c) * dir > 0.0)
            .collect();
        marks.sort_by(|a, b| if dir > 0.0 { a.total_cmp(b) } else { b.total_cmp(a) });
        let mut next_mark = 0usize;

        let mut steps = vec![Step { t, y: y.clone(), dy: dy0.clone() }];
        let mut dy = dy0;
        let mut last_rhs_failure: Option<RhsError> = None;

        loop {
            if (t - t1) * dir >= 0.0 {
                break;
            }
            if stats.accepted + stats.rejected > self.max_steps as u64 {
                return Err(OdeError::MaxSteps { t, max_steps: self.max_steps });
            }
            if h.abs() < h_floor {
                return Err(match last_rhs_failure {
                    Some(RhsError::OutOfDomain(detail)) => OdeError::DomainExit { t, detail },
                    _ => OdeError::StepSizeUnderflow { t, h },
                });
            }
            if let Some(cap) = self.max_step {
                if h.abs() > cap {
                    h = dir * cap;
                }
            }
            while next_mark < marks.len() && (marks[next_mark] - t) * dir <= 0.0 {
                next_mark += 1;
            }
            if next_mark < marks.len() && (t + h - marks[next_mark]) * dir > 0.0 {
                h = marks[next_mark] - t;
            }
            if (t + h - t1) * dir > 0.0 {
                h = t1 - t;
            }

            k[0].copy_from(&dy);
            let mut stage_failed = None;
            for i in 1..STAGES {
                let mut yi = y.clone();
                for (j, kj) in k.iter().enumerate().take(i) {
                    let a = A[i - 1][j];
                    if a != 0.0 {
                        yi.axpy(h * a, kj, 1.0);
                    }
                }
                let (head, tail) = k.split_at_mut(i);
                let _ = head;
                match sys.rhs(t + C[i] * h, &yi, &mut tail[0]) {
                    Ok(()) => stats.rhs_evals += 1,
                    Err(e) => {
                        stage_failed = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = stage_failed {
                last_rhs_failure = Some(e);
                stats.rejected += 1;
                h *= 0.5;
                continue;
            }

            let mut y_new = y.clone();
            for (i, ki) in k.iter().enumerate() {
                if B8[i] != 0.0 {
                    y_new.axpy(h * B8[i], ki, 1.0);
                }
            }
            // y8 - y7 = (41/840) h (k11 + k12 - k0 - k10)
            let err_vec = (41.0 / 840.0) * h * (&k[11] + &k[12] - &k[0] - &k[10]);
            let mut acc = 0.0;
            for i in 0..dim {
                let sc = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
                let e = err_vec[i] / sc;
                acc += e * e;
            }
            let err = (acc / dim as f64).sqrt();

            if !err.is_finite() {
                last_rhs_failure = Some(RhsError::Eval("non-finite error estimate".into()));
                stats.rejected += 1;
                h *= 0.5;
                continue;
            }

            if err <= 1.0 {
                let t_new = t + h;
                let mut dy_new = DVector::zeros(dim);
                match sys.rhs(t_new, &y_new, &mut dy_new) {
                    Ok(()) => stats.rhs_evals += 1,
                    Err(e) => {
                        last_rhs_failure = Some(e);
                        stats.rejected += 1;
                        h *= 0.5;
                        continue;
                    }
                }
                t = t_new;
                y = y_new;
                dy = dy_new;
                stats.accepted += 1;
                last_rhs_failure = None;
                let step = Step { t, y: y.clone(), dy: dy.clone() };
                let go_on = keep_going(&step);
                steps.push(step);
                if !go_on {
                    break;
                }
                h *= self.controller.factor(err);
            } else {
                stats.rejected += 1;
                h *= self.controller.factor(err).min(1.0);
            }
        }

        Ok(Solution { steps, stats })
    }

    fn guess_first_step(
        &self,
        sys: &dyn OdeSystem,
        t: f64,
        y: &DVector<f64>,
        dy: &DVector<f64>,
        stats: &mut Stats,
    ) -> f64 {
        let dim = y.len() as f64;
        let wnorm = |v: &DVector<f64>, yref: &DVector<f64>| {
            let mut acc = 0.0;
            for i in 0..v.len() {
                let sc = self.atol + self.rtol * yref[i].abs();
                acc += (v[i] / sc).powi(2);
            }
            (acc / dim).sqrt()
        };
        let d0 = wnorm(y, y);
        let d1 = wnorm(dy, y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1 = y + h0 * dy;
        let mut dy1 = DVector::zeros(y.len());
        let d2 = match sys.rhs(t + h0, &y1, &mut dy1) {
            Ok(()) => {
                stats.rhs_evals += 1;
                wnorm(&(&dy1 - dy), y) / h0
            }
            Err(_) => return h0 * 1e-2,
        };
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 8.0)
        };
        (100.0 * h0).min(h1)
    }
}

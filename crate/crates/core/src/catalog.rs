//! Closed-form four-body families: kites, rhombi, and the equilateral
//! triangle with a fourth body at its centroid.
//!
//! Every configuration produced here satisfies the central-configuration
//! equations to rounding error, so the families double as reference data
//! for the numeric pipeline: the solver must accept them as seeds without
//! moving them, and [`classify`](crate::ccfind::classify) must reproduce
//! the tabulated eigenvalue expressions. The kite scan evaluates, on a
//! parameter grid, the two determinant conditions that a doubly degenerate
//! kite would have to satisfy at once.

use std::io::Write;

use nalgebra::{DVector, Matrix2};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ccfind::{classify, CcError, CentralConfiguration};
use crate::nbody::{MassVector, MassedConfiguration, NBodyError};
use crate::tol;

/// How close a parameter may come to an excluded locus before the closed
/// forms are considered degenerate there.
const LOCUS_REL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error(transparent)]
    Cc(#[from] CcError),
    #[error(transparent)]
    Geometry(#[from] NBodyError),
    /// Parameters sit on or too close to a locus where the mass formulas
    /// degenerate: a collinear limit, a vanishing mass, the equilateral
    /// point, or a pole of the closed form.
    #[error("excluded parameter locus: {0}")]
    ExcludedLocus(String),
    #[error("{0}")]
    OutOfRange(String),
    /// The smallest restricted eigenvalue has the same sign at both ends
    /// of the proposed bracket.
    #[error("no sign change of the smallest restricted eigenvalue on [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Kites
// ---------------------------------------------------------------------------

/// Kite with the symmetric unit masses at (-s, -t) and (s, -t) and the two
/// axis masses m3, m4 at (0, u) and (0, u - 1).
///
/// Only s and u + t enter the mass equations; the split of u + t into u
/// and t encodes the center of mass and must satisfy
/// u (m3 + m4) = 2 t + m4 for the assembled configuration to be centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KiteShape {
    pub s: f64,
    pub t: f64,
    pub u: f64,
}

impl KiteShape {
    pub fn new(s: f64, t: f64, u: f64) -> Result<Self, CatalogError> {
        if !(s > 0.0) || !s.is_finite() || !t.is_finite() || !u.is_finite() {
            return Err(CatalogError::OutOfRange(format!(
                "kite shape needs finite offsets and s > 0, got s = {s}"
            )));
        }
        Ok(Self { s, t, u })
    }

    /// Signed heights of the two axis bodies above the symmetric pair.
    pub fn axis_offsets(&self) -> (f64, f64) {
        (self.u + self.t, self.u + self.t - 1.0)
    }

    /// Distances from either unit mass to the two axis bodies.
    pub fn leg_lengths(&self) -> (f64, f64) {
        let (a3, a4) = self.axis_offsets();
        (self.s.hypot(a3), self.s.hypot(a4))
    }

    /// Rational parameters (xi, eta) with xi > eta > 0, defined by
    /// u + t = s (xi^2 - 1)/(2 xi) and u + t - 1 = s (eta^2 - 1)/(2 eta).
    pub fn rational(&self) -> (f64, f64) {
        let (a3, a4) = self.axis_offsets();
        let g3 = a3 / self.s;
        let g4 = a4 / self.s;
        (g3 + g3.hypot(1.0), g4 + g4.hypot(1.0))
    }

    /// The rhombus case t = 0, where the axis masses coincide.
    pub fn is_rhombus(&self) -> bool {
        self.t.abs() <= 1e-12 * (1.0 + self.u.abs() + self.s.abs())
    }
}

/// Axis masses solving the central-configuration equations for a kite
/// shape, together with the multiplier.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KiteMasses {
    pub m3: f64,
    pub m4: f64,
    pub lambda: f64,
    /// Both axis masses are strictly positive.
    pub positive: bool,
}

/// Solve the two linear mass equations of the kite family.
///
/// Bodies 1 and 2 carry unit mass. Positivity of the axis masses is
/// reported rather than required, so the sign structure of the family can
/// be mapped; an error is returned only when a denominator degenerates
/// (an axis body at unit distance from the symmetric pair).
pub fn kite_masses(shape: &KiteShape) -> Result<KiteMasses, CatalogError> {
    masses_from_geometry(shape.s, shape.u + shape.t)
}

fn masses_from_geometry(s: f64, a3: f64) -> Result<KiteMasses, CatalogError> {
    let a4 = a3 - 1.0;
    let r3 = s.hypot(a3);
    let r4 = s.hypot(a4);
    let ir3 = r3.powi(-3);
    let ir4 = r4.powi(-3);
    let d3 = ir3 - 1.0;
    let d4 = 1.0 - ir4;
    if d3.abs() <= 1e-12 || d4.abs() <= 1e-12 {
        return Err(CatalogError::ExcludedLocus(format!(
            "axis body at unit distance from the symmetric pair (r3 = {r3}, r4 = {r4})"
        )));
    }
    let w = 1.0 / (8.0 * s.powi(3));
    let m3 = 2.0 * a4 * (w - ir4) / d3;
    let m4 = 2.0 * a3 * (w - ir3) / d4;
    let lambda = 1.0 / (4.0 * s.powi(3)) + m3 * ir3 + m4 * ir4;
    Ok(KiteMasses {
        m3,
        m4,
        lambda,
        positive: m3 > 0.0 && m4 > 0.0,
    })
}

/// Build a kite from the rational parameters (xi, eta), xi > eta > 0.
///
/// Excluded values for either parameter: 1 (collinear limit) and
/// 2 +- sqrt(3) (a vanishing axis mass, or the equilateral point where
/// the mass split is indeterminate). xi eta = 1 is the rhombus and is
/// allowed. The returned shape already carries the center-of-mass
/// consistent height u.
pub fn from_rational(xi: f64, eta: f64) -> Result<(KiteShape, KiteMasses), CatalogError> {
    if !(xi > eta && eta > 0.0) || !xi.is_finite() {
        return Err(CatalogError::OutOfRange(format!(
            "rational kite parameters need xi > eta > 0, got ({xi}, {eta})"
        )));
    }
    let excluded = [1.0, 2.0 - 3.0_f64.sqrt(), 2.0 + 3.0_f64.sqrt()];
    for (name, v) in [("xi", xi), ("eta", eta)] {
        for r in excluded {
            if (v - r).abs() <= LOCUS_REL * r.max(1.0) {
                return Err(CatalogError::ExcludedLocus(format!("{name} = {v} is within tolerance of {r}")));
            }
        }
    }
    let g3 = (xi * xi - 1.0) / (2.0 * xi);
    let g4 = (eta * eta - 1.0) / (2.0 * eta);
    let s = 1.0 / (g3 - g4);
    let a3 = s * g3;
    let km = masses_from_geometry(s, a3)?;
    let u = (2.0 * a3 + km.m4) / (km.m3 + km.m4 + 2.0);
    let shape = KiteShape { s, t: a3 - u, u };
    Ok((shape, km))
}

/// Fully factored rational forms of the axis masses, used to cross-check
/// the geometric solve.
pub(crate) fn kite_masses_rational(xi: f64, eta: f64) -> (f64, f64) {
    let (x, y) = (xi, eta);
    let m3_num = -(y - 1.0)
        * (y + 1.0)
        * (y * y - 4.0 * y + 1.0)
        * (y.powi(4) + 4.0 * y.powi(3) + 18.0 * y * y + 4.0 * y + 1.0)
        * (x * x + 1.0).powi(3)
        * (y - x).powi(2)
        * (y * x + 1.0).powi(2);
    let m3_den = 32.0
        * (y * y + 1.0).powi(3)
        * x
        * x
        * (y * y * x + 2.0 * y - x)
        * (y.powi(4) * x * x - 3.0 * y.powi(3) * x.powi(3) + y.powi(3) * x + 3.0 * y * y * x.powi(4)
            - 2.0 * y * y * x * x
            + y * y
            + 3.0 * y * x.powi(3)
            - y * x
            + x * x);
    let m4_num = (y * y + 1.0).powi(3)
        * (x - 1.0)
        * (x + 1.0)
        * (x * x - 4.0 * x + 1.0)
        * (x.powi(4) + 4.0 * x.powi(3) + 18.0 * x * x + 4.0 * x + 1.0)
        * (y - x).powi(2)
        * (y * x + 1.0).powi(2);
    let m4_den = 32.0
        * y.powi(3)
        * (x * x + 1.0).powi(3)
        * (2.0 * y * x - x * x + 1.0)
        * (y.powi(4) * x * x - y.powi(3) * x.powi(3) + y.powi(3) * x + y * y * x.powi(4)
            - 2.0 * y * y * x * x
            + y * y
            + 3.0 * y * x.powi(3)
            - 3.0 * y * x
            + 3.0 * x * x);
    (m3_num / m3_den, m4_num / m4_den)
}

/// Sign predicates for the axis masses in the rational parameters.
///
/// m3 > 0 iff (1 - eta)(eta^2 - 4 eta + 1)(eta^2 xi + 2 eta - xi) > 0 and
/// m4 > 0 iff (xi - 1)(xi^2 - 4 xi + 1)(2 eta xi - xi^2 + 1) > 0.
pub fn kite_positivity(xi: f64, eta: f64) -> (bool, bool) {
    let p3 = (1.0 - eta) * (eta * eta - 4.0 * eta + 1.0) * (eta * eta * xi + 2.0 * eta - xi);
    let p4 = (xi - 1.0) * (xi * xi - 4.0 * xi + 1.0) * (2.0 * eta * xi - xi * xi + 1.0);
    (p3 > 0.0, p4 > 0.0)
}

/// Assemble the kite as a centered massed configuration. Requires positive
/// axis masses and a center-of-mass consistent u.
pub fn kite_configuration(shape: &KiteShape) -> Result<(MassedConfiguration, KiteMasses), CatalogError> {
    let km = kite_masses(shape)?;
    if !km.positive {
        return Err(CatalogError::OutOfRange(format!(
            "nonpositive axis mass (m3 = {}, m4 = {})",
            km.m3, km.m4
        )));
    }
    let a3 = shape.u + shape.t;
    let com_defect = shape.u * (km.m3 + km.m4 + 2.0) - (2.0 * a3 + km.m4);
    if com_defect.abs() > 1e-9 * (1.0 + a3.abs()) {
        return Err(CatalogError::OutOfRange(
            "u is not the center-of-mass height for the solved masses".into(),
        ));
    }
    let masses = MassVector::new(vec![1.0, 1.0, km.m3, km.m4])?;
    let config = MassedConfiguration::from_points(
        masses,
        &[
            [-shape.s, -shape.t],
            [shape.s, -shape.t],
            [0.0, shape.u],
            [0.0, shape.u - 1.0],
        ],
    )?;
    Ok((config, km))
}

/// The two 2x2 blocks of the restricted quadratic form lambda M + B on
/// the kite-adapted shape directions, for arbitrary (possibly negative)
/// axis masses.
///
/// The first block acts on the pair (V, P), where V spreads the unit
/// masses horizontally and P trades vertical motion of the pair against
/// the axis bodies; the second acts on their rotations by ninety degrees.
/// Projecting out the scaling direction subtracts
/// 3 lambda <a, r0><b, r0> / I from the form; for the rotated pair that
/// correction vanishes identically because both vectors are orthogonal
/// to r0. A degeneracy beyond the generic single one requires either the
/// first block to vanish as a matrix or both determinants to vanish at
/// once, since the rotated block's leading entry stays positive. The
/// determinant conditions are pure algebra, so sign mapping over cells
/// with a negative axis mass is legitimate; NaN blocks are returned when
/// the mass sum or the moment of inertia degenerates.
pub fn kite_blocks_from_parts(shape: &KiteShape, m3: f64, m4: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let (s, t, u) = (shape.s, shape.t, shape.u);
    let x = [[-s, -t], [s, -t], [0.0, u], [0.0, u - 1.0]];
    let masses = [1.0, 1.0, m3, m4];
    let inertia: f64 = (0..4).map(|i| masses[i] * (x[i][0] * x[i][0] + x[i][1] * x[i][1])).sum();
    if (m3 + m4).abs() <= 1e-12 || inertia <= 0.0 {
        let nan = Matrix2::from_element(f64::NAN);
        return (nan, nan);
    }
    let (r3, r4) = shape.leg_lengths();
    let lambda = 1.0 / (4.0 * s.powi(3)) + m3 / r3.powi(3) + m4 / r4.powi(3);

    let share = 2.0 / (m3 + m4);
    let v = [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
    let p = [[0.0, -1.0], [0.0, -1.0], [0.0, share], [0.0, share]];
    let rot = |w: &[[f64; 2]; 4]| {
        let mut out = [[0.0; 2]; 4];
        for i in 0..4 {
            out[i] = [-w[i][1], w[i][0]];
        }
        out
    };
    let iv = rot(&v);
    let ip = rot(&p);

    // Hessian quadratic form of the potential summed over pairs:
    // sum m_i m_j [3 (dv.d)(dw.d)/r^5 - (dv.dw)/r^3], d = x_i - x_j.
    let hess = |a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]| {
        let mut acc = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d = [x[i][0] - x[j][0], x[i][1] - x[j][1]];
                let r2 = d[0] * d[0] + d[1] * d[1];
                let r3 = r2 * r2.sqrt();
                let r5 = r2 * r3;
                let da = [a[i][0] - a[j][0], a[i][1] - a[j][1]];
                let db = [b[i][0] - b[j][0], b[i][1] - b[j][1]];
                let ad = da[0] * d[0] + da[1] * d[1];
                let bd = db[0] * d[0] + db[1] * d[1];
                let ab = da[0] * db[0] + da[1] * db[1];
                acc += masses[i] * masses[j] * (3.0 * ad * bd / r5 - ab / r3);
            }
        }
        acc
    };
    let metric = |a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]| {
        (0..4).map(|i| masses[i] * (a[i][0] * b[i][0] + a[i][1] * b[i][1])).sum::<f64>()
    };
    let radial = |a: &[[f64; 2]; 4]| metric(a, &x);
    let form = |a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]| {
        hess(a, b) + lambda * metric(a, b) - 3.0 * lambda * radial(a) * radial(b) / inertia
    };
    let sym = Matrix2::new(form(&v, &v), form(&v, &p), form(&v, &p), form(&p, &p));
    let anti = Matrix2::new(form(&iv, &iv), form(&iv, &ip), form(&iv, &ip), form(&ip, &ip));
    (sym, anti)
}

/// Restricted blocks of a kite given as a classified central
/// configuration. Validates the layout (symmetric pair first, axis bodies
/// on x = 0) and delegates to [`kite_blocks_from_parts`].
pub fn kite_restricted_blocks(
    cc: &CentralConfiguration,
) -> Result<(Matrix2<f64>, Matrix2<f64>), CatalogError> {
    let c = &cc.config;
    if c.n() != 4 {
        return Err(CatalogError::OutOfRange(format!(
            "kite blocks need four bodies, got {}",
            c.n()
        )));
    }
    let m = c.masses();
    let x = c.coords();
    let scale = x.amax().max(1.0);
    let layout_ok = (m[0] - m[1]).abs() <= 1e-9 * m[0]
        && (x[0] + x[2]).abs() <= 1e-9 * scale
        && (x[1] - x[3]).abs() <= 1e-9 * scale
        && x[4].abs() <= 1e-9 * scale
        && x[6].abs() <= 1e-9 * scale
        && (x[5] - x[7] - 1.0).abs() <= 1e-9 * scale;
    if !layout_ok {
        return Err(CatalogError::OutOfRange(
            "configuration is not in kite layout (pair first, axis bodies on x = 0, unit axis gap)"
                .into(),
        ));
    }
    let shape = KiteShape {
        s: x[2],
        t: -x[1],
        u: x[5],
    };
    Ok(kite_blocks_from_parts(&shape, m[2], m[3]))
}

/// One evaluated cell of the kite scan.
///
/// Determinants refer to the two restricted blocks and are evaluated for
/// negative axis masses as well, since the degeneracy conditions are pure
/// algebra and the sign structure of the family is part of the scan
/// output. `min_eig` is the smallest restricted-eigenvalue magnitude
/// relative to the multiplier at unit inertia, computed only on
/// positive-mass cells (NaN otherwise).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KiteCell {
    pub xi: f64,
    pub eta: f64,
    pub m3: f64,
    pub m4: f64,
    pub det1: f64,
    pub det2: f64,
    pub min_eig: f64,
    pub positive: bool,
}

/// Result of a grid scan for simultaneous degeneracy of both kite blocks.
#[derive(Debug, Clone, Serialize)]
pub struct KiteScan {
    pub cells: Vec<KiteCell>,
    /// Positive-mass cells with |det1| <= tol and |det2| <= tol at once.
    pub simultaneous: Vec<(f64, f64)>,
    /// Positive-mass cells where every entry of the symmetric block is
    /// below sqrt(tol).
    pub full_zero: Vec<(f64, f64)>,
    /// Absolute threshold on the determinant values.
    pub tol: f64,
    /// Cells whose parameters hit an excluded locus or failed to build.
    pub skipped: usize,
}

/// Scan the rational kite parameters on an n1 x n2 grid of cell centers
/// over `xi_range` x `eta_range`.
///
/// `tol` is the absolute near-zero threshold for the two determinants;
/// the matrix-vanishing detector uses its square root, matching units.
/// Cells are evaluated in parallel and reported in row-major order, eta
/// fastest.
pub fn kite_two_degree_scan(
    xi_range: (f64, f64),
    eta_range: (f64, f64),
    n: (usize, usize),
    tol: f64,
) -> KiteScan {
    let (nx, ny) = (n.0.max(1), n.1.max(1));
    let dx = (xi_range.1 - xi_range.0) / nx as f64;
    let dy = (eta_range.1 - eta_range.0) / ny as f64;

    struct Evaluated {
        cell: KiteCell,
        simultaneous: bool,
        full_zero: bool,
    }

    let evaluate = |idx: usize| -> Option<Evaluated> {
        let i = idx / ny;
        let j = idx % ny;
        let xi = xi_range.0 + (i as f64 + 0.5) * dx;
        let eta = eta_range.0 + (j as f64 + 0.5) * dy;
        let (shape, km) = from_rational(xi, eta).ok()?;
        let (sym, anti) = kite_blocks_from_parts(&shape, km.m3, km.m4);
        let det1 = sym.determinant();
        let det2 = anti.determinant();
        if !det1.is_finite() || !det2.is_finite() {
            return None;
        }
        let min_eig = if km.positive {
            kite_configuration(&shape)
                .and_then(|(config, _)| Ok(CentralConfiguration::from_config(&config)?))
                .and_then(|cc| Ok(classify(&cc, tol::DEGENERACY_REL)?))
                .map(|report| {
                    let floor = report.mu.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
                    floor / report.lambda
                })
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let degeneracy_checked = km.positive;
        Some(Evaluated {
            cell: KiteCell {
                xi,
                eta,
                m3: km.m3,
                m4: km.m4,
                det1,
                det2,
                min_eig,
                positive: km.positive,
            },
            simultaneous: degeneracy_checked && det1.abs() <= tol && det2.abs() <= tol,
            full_zero: degeneracy_checked && sym.iter().all(|e| e.abs() <= tol.sqrt()),
        })
    };

    let evaluated: Vec<Option<Evaluated>> = (0..nx * ny).into_par_iter().map(evaluate).collect();

    let mut scan = KiteScan {
        cells: Vec::with_capacity(nx * ny),
        simultaneous: Vec::new(),
        full_zero: Vec::new(),
        tol,
        skipped: 0,
    };
    for slot in evaluated {
        match slot {
            None => scan.skipped += 1,
            Some(e) => {
                if e.simultaneous {
                    scan.simultaneous.push((e.cell.xi, e.cell.eta));
                }
                if e.full_zero {
                    scan.full_zero.push((e.cell.xi, e.cell.eta));
                }
                scan.cells.push(e.cell);
            }
        }
    }
    scan
}

/// Write the scan as CSV with columns xi, eta, m3, m4, det1, det2, min_eig.
pub fn write_kite_scan_csv<W: Write>(mut out: W, scan: &KiteScan) -> std::io::Result<()> {
    writeln!(out, "xi,eta,m3,m4,det1,det2,min_eig")?;
    for c in &scan.cells {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            c.xi, c.eta, c.m3, c.m4, c.det1, c.det2, c.min_eig
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rhombi
// ---------------------------------------------------------------------------

fn rhombic_pc(z: f64) -> f64 {
    z.powi(6) + 3.0 * z.powi(4) - 64.0 * z.powi(3) + 3.0 * z * z + 1.0
}

fn rhombic_pl(z: f64) -> f64 {
    z.powi(12) + 6.0 * z.powi(10) - 512.0 * z.powi(9) + 15.0 * z.powi(8) + 1536.0 * z.powi(7)
        + 20.0 * z.powi(6)
        - 1536.0 * z.powi(5)
        + 15.0 * z.powi(4)
        + 512.0 * z.powi(3)
        + 6.0 * z * z
        + 1.0
}

fn rhombic_pi(z: f64) -> f64 {
    z.powi(12) - 4.0 * z.powi(10) - 64.0 * z.powi(9) + 5.0 * z.powi(8) + 224.0 * z.powi(7)
        - 160.0 * z.powi(5)
        - 5.0 * z.powi(4)
        + 64.0 * z.powi(3)
        + 4.0 * z * z
        - 1.0
}

/// Rhombus member: unit masses at (+-s, 0) and masses m_tilde at
/// (0, +-1/2), with s = (zeta^2 - 1)/(4 zeta) and zeta > 1.
#[derive(Debug, Clone, Serialize)]
pub struct RhombicFamily {
    pub zeta: f64,
    pub s: f64,
    pub m_tilde: f64,
    pub lambda: f64,
    pub inertia: f64,
    pub kappa: f64,
    /// m_tilde > 0 exactly for zeta in (sqrt 3, sqrt 3 + 2).
    pub positive: bool,
    /// Present when the masses are positive.
    pub config: Option<MassedConfiguration>,
}

/// Evaluate the rhombus family at `zeta`.
///
/// The shape parameter must exceed 1 and stay away from the multiplier
/// pole at 2 + sqrt 3, where the diagonal ratio makes the paired mass
/// blow up.
pub fn rhombic_family(zeta: f64) -> Result<RhombicFamily, CatalogError> {
    if !(zeta > 1.0) || !zeta.is_finite() {
        return Err(CatalogError::OutOfRange(format!(
            "rhombus parameter needs zeta > 1, got {zeta}"
        )));
    }
    let pole = zeta * zeta - 4.0 * zeta + 1.0;
    if pole.abs() <= LOCUS_REL * zeta * zeta {
        return Err(CatalogError::ExcludedLocus(format!(
            "zeta = {zeta} is at the mass pole 2 + sqrt 3"
        )));
    }
    let s = (zeta * zeta - 1.0) / (4.0 * zeta);
    let r_diag = (zeta * zeta + 1.0) / (4.0 * zeta);
    let rd3 = r_diag.powi(3);
    let m_tilde = (rd3 / (8.0 * s.powi(3)) - 1.0) / (rd3 - 1.0);
    let lambda =
        16.0 * zeta.powi(3) * rhombic_pl(zeta) / ((zeta.powi(4) - 1.0).powi(3) * rhombic_pc(zeta));
    let inertia = (zeta * zeta + 1.0).powi(2) * rhombic_pi(zeta)
        / (8.0 * zeta * zeta * (zeta * zeta - 1.0).powi(3) * rhombic_pc(zeta));
    let positive = zeta > 3.0_f64.sqrt() && zeta < 3.0_f64.sqrt() + 2.0;
    let config = if positive {
        let masses = MassVector::new(vec![1.0, 1.0, m_tilde, m_tilde])?;
        Some(MassedConfiguration::from_points(
            masses,
            &[[s, 0.0], [-s, 0.0], [0.0, 0.5], [0.0, -0.5]],
        )?)
    } else {
        None
    };
    Ok(RhombicFamily {
        zeta,
        s,
        m_tilde,
        lambda,
        inertia,
        kappa: 2.0 * lambda,
        positive,
        config,
    })
}

/// Rational form of the paired mass, kept as a cross-check against the
/// diagonal-ratio form used by [`rhombic_family`].
pub(crate) fn rhombic_mass_rational(z: f64) -> f64 {
    -8.0 * z.powi(3) * (z * z - 3.0) * (7.0 * z.powi(4) - 6.0 * z * z + 3.0)
        / ((z * z - 1.0).powi(3)
            * (z * z - 4.0 * z + 1.0)
            * (z.powi(4) + 4.0 * z.powi(3) + 18.0 * z * z + 4.0 * z + 1.0))
}

/// Tabulated restricted eigenvalues of the rhombus, divided by sqrt(I).
///
/// The labels follow the family convention and are not sorted: the last
/// two cross at zeta = 1 + sqrt 2.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RhombicEigenvalues {
    pub zeta: f64,
    pub mu_over_sqrt_i: [f64; 4],
    pub kappa_half_over_sqrt_i: f64,
}

pub fn rhombic_eigenvalues(zeta: f64) -> Result<RhombicEigenvalues, CatalogError> {
    if !(zeta > 1.0) || !zeta.is_finite() {
        return Err(CatalogError::OutOfRange(format!(
            "rhombus parameter needs zeta > 1, got {zeta}"
        )));
    }
    let z = zeta;
    let pc = rhombic_pc(z);
    if pc.abs() <= f64::MIN_POSITIVE {
        return Err(CatalogError::ExcludedLocus(format!(
            "zeta = {z} is at the mass pole 2 + sqrt 3"
        )));
    }
    let d3 = (z * z - 1.0).powi(3);
    let zp1_2 = (z * z + 1.0).powi(2);
    let zp1_3 = (z * z + 1.0).powi(3);
    let zp1_5 = (z * z + 1.0).powi(5);

    let p5 = 7.0 * z.powi(10) - 45.0 * z.powi(8) + 70.0 * z.powi(6) + 256.0 * z.powi(5)
        - 90.0 * z.powi(4)
        + 35.0 * z * z
        - 9.0;
    let p7 = 7.0 * z.powi(16) - 88.0 * z.powi(14) - 448.0 * z.powi(13) - 44.0 * z.powi(12)
        + 12352.0 * z.powi(11)
        + 184.0 * z.powi(10)
        - 37504.0 * z.powi(9)
        - 70.0 * z.powi(8)
        + 34176.0 * z.powi(7)
        - 296.0 * z.powi(6)
        - 13248.0 * z.powi(5)
        - 12.0 * z.powi(4)
        + 576.0 * z.powi(3)
        + 72.0 * z * z
        - 9.0;
    let p8 = 17.0 * z.powi(16) - 56.0 * z.powi(14) - 2432.0 * z.powi(13) - 4.0 * z.powi(12)
        + 14720.0 * z.powi(11)
        + 248.0 * z.powi(10)
        - 32768.0 * z.powi(9)
        + 70.0 * z.powi(8)
        + 30720.0 * z.powi(7)
        - 136.0 * z.powi(6)
        - 14976.0 * z.powi(5)
        + 60.0 * z.powi(4)
        + 2688.0 * z.powi(3)
        + 72.0 * z * z
        - 15.0;

    let mu5 = -48.0 * z.powi(3) * p5 / (d3 * zp1_2 * pc);
    let mu6 = 384.0 * z.powi(3) * rhombic_pi(z) / (d3 * zp1_3 * pc);
    let mu7 = 16.0 * z.powi(3) * p7 / (-d3 * zp1_5 * pc);
    let mu8 = 16.0 * z.powi(3) * p8 / (d3 * zp1_5 * pc);
    let kappa_half = 16.0 * (z.powi(5) * rhombic_pl(z) / (zp1_5 * rhombic_pi(z))).sqrt();

    Ok(RhombicEigenvalues {
        zeta,
        mu_over_sqrt_i: [mu5, mu6, mu7, mu8],
        kappa_half_over_sqrt_i: kappa_half,
    })
}

/// One tabulated rhombus, with the eigenvalues at the family's own scale:
/// mu_j = sqrt(I) times the tabulated ratio, kappa = 2 lambda.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RhombicRow {
    pub zeta: f64,
    pub m_tilde: f64,
    pub lambda: f64,
    pub mu: [f64; 4],
    pub kappa: f64,
}

/// Tabulate the rhombus family at n points spaced evenly over [lo, hi],
/// skipping parameters that hit the excluded pole.
pub fn rhombic_table(lo: f64, hi: f64, n: usize) -> Vec<RhombicRow> {
    let n = n.max(2);
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .filter_map(|k| {
            let zeta = lo + k as f64 * step;
            let fam = rhombic_family(zeta).ok()?;
            let eig = rhombic_eigenvalues(zeta).ok()?;
            let sqrt_i = fam.inertia.sqrt();
            Some(RhombicRow {
                zeta,
                m_tilde: fam.m_tilde,
                lambda: fam.lambda,
                mu: eig.mu_over_sqrt_i.map(|m| m * sqrt_i),
                kappa: fam.kappa,
            })
        })
        .collect()
}

/// Write the tabulated family as CSV with columns
/// zeta, m_tilde, lambda, mu5, mu6, mu7, mu8, kappa.
pub fn write_rhombic_table_csv<W: Write>(mut out: W, rows: &[RhombicRow]) -> std::io::Result<()> {
    writeln!(out, "zeta,m_tilde,lambda,mu5,mu6,mu7,mu8,kappa")?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.zeta, r.m_tilde, r.lambda, r.mu[0], r.mu[1], r.mu[2], r.mu[3], r.kappa
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Equilateral triangle with a centroid mass
// ---------------------------------------------------------------------------

/// Unit masses at the vertices of an equilateral triangle of circumradius
/// one, plus a body of mass m4 at the centroid. A central configuration
/// for every m4 > 0, with multiplier 1/sqrt(3) + m4 and moment of
/// inertia 3.
pub fn equilateral_configuration(m4: f64) -> Result<MassedConfiguration, CatalogError> {
    if !(m4 > 0.0) || !m4.is_finite() {
        return Err(CatalogError::OutOfRange(format!(
            "centroid mass must be positive, got {m4}"
        )));
    }
    let h = 3.0_f64.sqrt() / 2.0;
    let masses = MassVector::new(vec![1.0, 1.0, 1.0, m4])?;
    Ok(MassedConfiguration::from_points(
        masses,
        &[[-h, -0.5], [h, -0.5], [0.0, 1.0], [0.0, 0.0]],
    )?)
}

pub fn equilateral_lambda(m4: f64) -> f64 {
    1.0 / 3.0_f64.sqrt() + m4
}

/// A classified member of the centroid family. The report is taken at the
/// stated scale (I = 3), where the tabulated eigenvalue ratios mu/sqrt(3)
/// apply directly.
#[derive(Debug, Clone)]
pub struct EquilateralPoint {
    pub m4: f64,
    pub cc: CentralConfiguration,
    pub report: crate::ccfind::SpectralReport,
}

pub fn equilateral_family(m4: f64) -> Result<EquilateralPoint, CatalogError> {
    let config = equilateral_configuration(m4)?;
    let cc = CentralConfiguration::from_config(&config)?;
    let report = crate::ccfind::classify_with(
        &cc,
        tol::DEGENERACY_REL,
        crate::ccfind::Normalization::AsStated,
    )?;
    Ok(EquilateralPoint { m4, cc, report })
}

/// The centroid mass at which the family degenerates, (81 + 64 sqrt 3)/249.
pub fn degenerate_mass() -> f64 {
    (81.0 + 64.0 * 3.0_f64.sqrt()) / 249.0
}

/// Common determinant of both restricted blocks along the centroid family:
/// m4 (m4 + 3)((5 sqrt 3 - 18) m4 + 3 sqrt 3 + 2) / (3 (m4 + 1)^2).
///
/// Positive below the degenerate mass, negative above it.
pub fn degenerate_block_determinant(m4: f64) -> f64 {
    let s3 = 3.0_f64.sqrt();
    m4 * (m4 + 3.0) * ((5.0 * s3 - 18.0) * m4 + 3.0 * s3 + 2.0) / (3.0 * (m4 + 1.0).powi(2))
}

/// Bisect for the degenerate centroid mass using the sign of the smallest
/// restricted eigenvalue, which is positive below the crossing and
/// negative above it.
pub fn locate_degenerate_mass(lo: f64, hi: f64, tol: f64) -> Result<f64, CatalogError> {
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(CatalogError::OutOfRange(format!(
            "bad bracket or tolerance: [{lo}, {hi}], tol = {tol}"
        )));
    }
    let smallest = |m4: f64| -> Result<f64, CatalogError> {
        let cc = CentralConfiguration::from_config(&equilateral_configuration(m4)?)?;
        let report = classify(&cc, tol::DEGENERACY_REL)?;
        Ok(report.mu.iter().fold(f64::INFINITY, |a, &b| a.min(b)))
    };
    let f_lo = smallest(lo)?;
    let f_hi = smallest(hi)?;
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(CatalogError::BracketFailure { lo, hi });
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if smallest(mid)? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// The tabulated eigenvectors of the degenerate member exactly as printed,
/// kernel pair first. The first one is not orthogonal to the rotation
/// direction, so these are raw table data rather than frame modes.
fn degenerate_raw_vectors() -> [DVector<f64>; 4] {
    let s3 = 3.0_f64.sqrt();
    [
        DVector::from_column_slice(&[
            (64.0 * s3 + 81.0) / 498.0,
            -(741.0 * s3 + 908.0) / 1494.0,
            (64.0 * s3 + 81.0) / 498.0,
            (741.0 * s3 + 908.0) / 1494.0,
            0.0,
            0.0,
            -1.0,
            0.0,
        ]),
        DVector::from_column_slice(&[
            (165.0 * s3 + 179.0) / 747.0,
            -(371.0 * s3 + 738.0) / 2241.0,
            -(165.0 * s3 + 179.0) / 747.0,
            -(371.0 * s3 + 738.0) / 2241.0,
            0.0,
            (2.0 * s3 + 9.0) / 27.0,
            0.0,
            1.0,
        ]),
        DVector::from_column_slice(&[
            (275.0 * s3 + 243.0) / 1494.0,
            (9.0 * s3 + 49.0) / 166.0,
            (275.0 * s3 + 243.0) / 1494.0,
            -(9.0 * s3 + 49.0) / 166.0,
            -1.0 / (3.0 * s3),
            0.0,
            -1.0,
            0.0,
        ]),
        DVector::from_column_slice(&[
            (9.0 * s3 + 49.0) / 166.0,
            (81.0 - 19.0 * s3) / 1494.0,
            -(9.0 * s3 + 49.0) / 166.0,
            (81.0 - 19.0 * s3) / 1494.0,
            0.0,
            (211.0 * s3 + 162.0) / 747.0,
            0.0,
            -1.0,
        ]),
    ]
}

/// The adapted eigenbasis of the degenerate member, mass-orthonormalized:
/// two kernel vectors first, then the positive pair. All four are given in
/// the stated coordinates (circumradius one) and are scale-free.
pub fn degenerate_basis() -> [DVector<f64>; 4] {
    let m4 = degenerate_mass();
    let raw = degenerate_raw_vectors();

    let masses = [1.0, 1.0, 1.0, m4];
    let md: Vec<f64> = masses.iter().flat_map(|&m| [m, m]).collect();
    let inner = |a: &DVector<f64>, b: &DVector<f64>| (0..8).map(|i| md[i] * a[i] * b[i]).sum::<f64>();

    let h = 3.0_f64.sqrt() / 2.0;
    let r0 = DVector::from_column_slice(&[-h, -0.5, h, -0.5, 0.0, 1.0, 0.0, 0.0]);
    let ir0 = DVector::from_column_slice(&[0.5, -h, 0.5, h, -1.0, 0.0, 0.0, 0.0]);
    let total: f64 = masses.iter().sum();
    let ex = DVector::from_fn(8, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
    let ey = DVector::from_fn(8, |i, _| if i % 2 == 1 { 1.0 } else { 0.0 });
    let frame = [
        ex / total.sqrt(),
        ey / total.sqrt(),
        r0.clone() / inner(&r0, &r0).sqrt(),
        ir0.clone() / inner(&ir0, &ir0).sqrt(),
    ];

    let mut basis: Vec<DVector<f64>> = raw.into_iter().collect();
    for v in basis.iter_mut() {
        for f in &frame {
            let c = inner(v, f);
            v.axpy(-c, f, 1.0);
        }
    }
    // Orthonormalize inside each eigenspace pair; across pairs the vectors
    // are orthogonal already.
    for pair in [[0, 1], [2, 3]] {
        let n0 = inner(&basis[pair[0]], &basis[pair[0]]).sqrt();
        basis[pair[0]] /= n0;
        let c = inner(&basis[pair[0]].clone(), &basis[pair[1]]);
        let first = basis[pair[0]].clone();
        basis[pair[1]].axpy(-c, &first, 1.0);
        let n1 = inner(&basis[pair[1]], &basis[pair[1]]).sqrt();
        basis[pair[1]] /= n1;
    }
    let mut it = basis.into_iter();
    [
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ]
}

/// The two kernel directions of the degenerate member.
pub fn degenerate_modes() -> [DVector<f64>; 2] {
    let [a, b, _, _] = degenerate_basis();
    [a, b]
}

/// Monomial coefficients of the restricted cubic of the potential at the
/// unit-inertia degenerate member, along the tabulated kernel pair exactly
/// as printed, each vector mass-normalized but otherwise untouched (in
/// particular the rotational component of the first one stays in).
///
/// Entry order (a555, a556, a566, a666). The two mixed entries carry the
/// multinomial weight three of their index pattern, so all four read as
/// coefficients of the monomials in six times the cubic Taylor term of the
/// potential restricted to the pair.
pub fn degenerate_cubic_slice() -> Result<[f64; 4], CatalogError> {
    let m4 = degenerate_mass();
    let config = equilateral_configuration(m4)?;
    let unit = config.with_coords(config.coords() / 3.0_f64.sqrt())?;

    let md: Vec<f64> = [1.0, 1.0, 1.0, m4].iter().flat_map(|&m| [m, m]).collect();
    let mass_norm =
        |v: &DVector<f64>| (0..8).map(|i| md[i] * v[i] * v[i]).sum::<f64>().sqrt();
    let [raw5, raw6, _, _] = degenerate_raw_vectors();
    let d5 = unit.with_coords(&raw5 / mass_norm(&raw5))?;
    let d6 = unit.with_coords(&raw6 / mass_norm(&raw6))?;

    Ok([
        unit.third_directional(&d5, &d5, &d5)?,
        3.0 * unit.third_directional(&d5, &d5, &d6)?,
        3.0 * unit.third_directional(&d5, &d6, &d6)?,
        unit.third_directional(&d6, &d6, &d6)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccfind::{classify_with, solve_cc, Normalization};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn rational_roundtrip_and_exclusions() {
        let (shape, km) = from_rational(3.0, 0.7).unwrap();
        let (xi, eta) = shape.rational();
        assert_relative_eq!(xi, 3.0, max_relative = 1e-12);
        assert_relative_eq!(eta, 0.7, max_relative = 1e-12);
        assert!(km.positive);

        assert!(matches!(
            from_rational(0.7, 3.0),
            Err(CatalogError::OutOfRange(_))
        ));
        assert!(matches!(
            from_rational(1.0 + 1e-12, 0.5),
            Err(CatalogError::ExcludedLocus(_))
        ));
        assert!(matches!(
            from_rational(2.0 + 3.0_f64.sqrt(), 0.5),
            Err(CatalogError::ExcludedLocus(_))
        ));
        assert!(matches!(
            from_rational(3.0, 2.0 - 3.0_f64.sqrt()),
            Err(CatalogError::ExcludedLocus(_))
        ));
    }

    #[test]
    fn rational_masses_match_geometric_solve() {
        for &(xi, eta) in &[
            (3.0, 0.7),
            (1.5, 0.4),
            (5.0, 0.9),
            (2.5, 0.25),
            (4.2, 0.55),
            (1.3, 0.8),
        ] {
            let (_, km) = from_rational(xi, eta).unwrap();
            let (m3, m4) = kite_masses_rational(xi, eta);
            assert_relative_eq!(km.m3, m3, max_relative = 1e-11);
            assert_relative_eq!(km.m4, m4, max_relative = 1e-11);
        }
    }

    #[test]
    fn positivity_predicates_agree_with_mass_signs() {
        let mut checked = 0;
        for i in 0..30 {
            for j in 0..30 {
                let xi = 1.05 + 4.85 * (i as f64 + 0.5) / 30.0;
                let eta = 0.22 + 0.76 * (j as f64 + 0.5) / 30.0;
                let Ok((_, km)) = from_rational(xi, eta) else {
                    continue;
                };
                let (p3, p4) = kite_positivity(xi, eta);
                assert_eq!(km.m3 > 0.0, p3, "m3 sign mismatch at ({xi}, {eta})");
                assert_eq!(km.m4 > 0.0, p4, "m4 sign mismatch at ({xi}, {eta})");
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn kites_are_exact_central_configurations() {
        for &(xi, eta) in &[(3.0, 0.7), (1.5, 0.4), (3.5, 0.5)] {
            let (shape, km) = from_rational(xi, eta).unwrap();
            let (config, _) = kite_configuration(&shape).unwrap();
            let cc = CentralConfiguration::from_config(&config).unwrap();
            assert!(cc.residual <= 1e-10 * cc.lambda, "residual {}", cc.residual);
            assert_relative_eq!(cc.lambda, km.lambda, max_relative = 1e-12);

            let seed = cc.normalized().unwrap();
            let refined = solve_cc(&seed.config, 1e-12, 10).unwrap();
            assert!(refined.iterations <= 3, "took {}", refined.iterations);
            assert!(refined.residual <= 1e-10);

            // The config-based block path agrees with the raw algebra.
            let (sym_cc, anti_cc) = kite_restricted_blocks(&cc).unwrap();
            let (sym_raw, anti_raw) = kite_blocks_from_parts(&shape, km.m3, km.m4);
            assert_relative_eq!(sym_cc, sym_raw, max_relative = 1e-12);
            assert_relative_eq!(anti_cc, anti_raw, max_relative = 1e-12);
        }
    }

    #[test]
    fn rhombus_limit_of_the_kite_family() {
        // xi eta = 1 forces t = 0 and equal axis masses; for xi = 2 the
        // matching rhombus parameter solves (zeta^2 - 1)/(4 zeta) = 2/3.
        let (shape, km) = from_rational(2.0, 0.5).unwrap();
        assert!(shape.is_rhombus());
        assert_abs_diff_eq!(shape.t, 0.0, epsilon = 1e-13);
        assert_relative_eq!(shape.u, 0.5, max_relative = 1e-12);
        assert_relative_eq!(km.m3, km.m4, max_relative = 1e-12);

        let fam = rhombic_family(3.0).unwrap();
        assert_relative_eq!(fam.s, shape.s, max_relative = 1e-12);
        assert_relative_eq!(fam.m_tilde, km.m3, max_relative = 1e-12);
    }

    #[test]
    fn rhombic_closed_forms_are_consistent() {
        let fam = rhombic_family(2.0).unwrap();
        assert_relative_eq!(fam.m_tilde, rhombic_mass_rational(2.0), max_relative = 1e-13);
        assert!(fam.positive);

        let config = fam.config.as_ref().unwrap();
        let cc = CentralConfiguration::from_config(config).unwrap();
        assert!(cc.residual <= 1e-12 * cc.lambda);
        assert_relative_eq!(cc.lambda, fam.lambda, max_relative = 1e-12);
        assert_relative_eq!(config.moment_of_inertia(), fam.inertia, max_relative = 1e-12);

        // Sign of the paired mass on and off the admissible interval.
        assert!(!rhombic_family(1.5).unwrap().positive);
        assert!(rhombic_family(3.72).unwrap().positive);
        assert!(!rhombic_family(3.75).unwrap().positive);
        assert!(matches!(
            rhombic_family(2.0 + 3.0_f64.sqrt()),
            Err(CatalogError::ExcludedLocus(_))
        ));
    }

    #[test]
    fn rhombic_eigenvalues_match_classify() {
        for &zeta in &[1.9, 2.0, 2.6, 3.1, 3.5] {
            let fam = rhombic_family(zeta).unwrap();
            let eig = rhombic_eigenvalues(zeta).unwrap();
            let cc = CentralConfiguration::from_config(fam.config.as_ref().unwrap()).unwrap();
            let report = classify_with(&cc, tol::DEGENERACY_REL, Normalization::AsStated).unwrap();
            let sqrt_i = report.scale_note.norm_r0;
            assert_relative_eq!(sqrt_i * sqrt_i, fam.inertia, max_relative = 1e-12);

            let mut tabulated: Vec<f64> = eig.mu_over_sqrt_i.to_vec();
            tabulated.sort_by(f64::total_cmp);
            let mut observed: Vec<f64> = report.mu.iter().map(|m| m / sqrt_i).collect();
            observed.sort_by(f64::total_cmp);
            for (t, o) in tabulated.iter().zip(&observed) {
                assert_relative_eq!(t, o, max_relative = tol::CLOSED_FORM_REL);
            }
            let kappa_ratio = eig.kappa_half_over_sqrt_i;
            assert_relative_eq!(
                kappa_ratio * kappa_ratio * fam.inertia,
                fam.kappa,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn rhombic_eigenvalue_crossing() {
        let at = |z: f64| {
            let e = rhombic_eigenvalues(z).unwrap();
            e.mu_over_sqrt_i[2] - e.mu_over_sqrt_i[3]
        };
        let crossing = 1.0 + 2.0_f64.sqrt();
        let scale = rhombic_eigenvalues(crossing).unwrap().mu_over_sqrt_i[2].abs();
        assert!(at(crossing).abs() <= 1e-8 * scale);
        // mu8 < mu7 below the crossing, mu7 < mu8 above it.
        assert!(at(2.3) > 0.0);
        assert!(at(2.5) < 0.0);

        let e2 = rhombic_eigenvalues(2.0).unwrap().mu_over_sqrt_i;
        assert!(e2[0] > 0.0 && e2[0] < e2[1] && e2[1] < e2[2]);
        assert!(e2[3] < e2[1]);
    }

    #[test]
    fn equilateral_blocks_match_tabulated_entries() {
        let s3 = 3.0_f64.sqrt();
        for &m4 in &[0.3, degenerate_mass(), 1.2] {
            let config = equilateral_configuration(m4).unwrap();
            let cc = CentralConfiguration::from_config(&config).unwrap();
            assert_relative_eq!(cc.lambda, equilateral_lambda(m4), max_relative = 1e-13);
            let (sym, anti) = kite_restricted_blocks(&cc).unwrap();

            let vp11 = (3.0 * m4 + s3) / 2.0;
            let vp12 = (s3 * m4 - 1.0) * (3.0 + m4) / (2.0 + 2.0 * m4);
            let vp22 = (m4 + 3.0) * (9.0 * m4 * m4 + (11.0 * s3 - 45.0) * m4 + 9.0 * s3)
                / (18.0 * (m4 + 1.0).powi(2));
            let iv12 = -(m4 + 3.0) * (3.0 * s3 * m4 + 1.0) / (2.0 * (m4 + 1.0));
            let iv22 = (m4 + 3.0) * (81.0 * m4 * m4 + (11.0 * s3 + 171.0) * m4 + 9.0 * s3)
                / (18.0 * (m4 + 1.0).powi(2));

            assert_relative_eq!(sym[(0, 0)], vp11, max_relative = 1e-12);
            assert_relative_eq!(sym[(0, 1)], vp12, max_relative = 1e-12);
            assert_relative_eq!(sym[(1, 1)], vp22, max_relative = 1e-12);
            assert_relative_eq!(anti[(0, 0)], vp11, max_relative = 1e-12);
            assert_relative_eq!(anti[(0, 1)], iv12, max_relative = 1e-12);
            assert_relative_eq!(anti[(1, 1)], iv22, max_relative = 1e-12);

            let det = degenerate_block_determinant(m4);
            assert_relative_eq!(sym.determinant(), det, max_relative = 1e-10, epsilon = 1e-13);
            assert_relative_eq!(anti.determinant(), det, max_relative = 1e-10, epsilon = 1e-13);
        }
    }

    #[test]
    fn equilateral_partition_across_the_degenerate_mass() {
        let below = equilateral_family(0.3).unwrap().report;
        assert_eq!(below.partition.n0, 0);
        assert_eq!(below.partition.np, 4);

        let at = equilateral_family(degenerate_mass()).unwrap().report;
        assert_eq!(at.partition.n0, 2);
        assert_eq!(at.partition.np, 2);
        let sqrt_i = at.scale_note.norm_r0;
        assert_relative_eq!(sqrt_i, 3.0_f64.sqrt(), max_relative = 1e-12);
        let s3 = 3.0_f64.sqrt();
        let tabulated = (799.0 * s3 + 1233.0) / 498.0;
        assert_relative_eq!(at.mu[2] / sqrt_i, tabulated, max_relative = tol::CLOSED_FORM_REL);
        assert_relative_eq!(at.mu[3] / sqrt_i, tabulated, max_relative = tol::CLOSED_FORM_REL);

        let above = equilateral_family(1.2).unwrap().report;
        assert_eq!(above.partition.n0, 0);
        assert_eq!(above.partition.np, 2);
    }

    #[test]
    fn degenerate_mass_bisection() {
        let m = locate_degenerate_mass(0.5, 1.0, 1e-10).unwrap();
        assert_abs_diff_eq!(m, degenerate_mass(), epsilon = 1e-8);
        assert!(matches!(
            locate_degenerate_mass(0.1, 0.2, 1e-10),
            Err(CatalogError::BracketFailure { .. })
        ));
    }

    #[test]
    fn degenerate_basis_is_the_adapted_eigenbasis() {
        let point = equilateral_family(degenerate_mass()).unwrap();
        let basis = degenerate_basis();
        let with = point.report.with_modes(basis.to_vec()).unwrap();
        assert_eq!(with.partition.n0, 2);

        // The first two vectors really are kernel directions of
        // lambda M + B at the stated scale.
        let config = &point.cc.config;
        let b = config.hessian_blocks().unwrap();
        let md = config.masses().metric_diag();
        for v in degenerate_modes() {
            let mut img = &b * &v;
            for i in 0..img.len() {
                img[i] += point.cc.lambda * md[i] * v[i];
            }
            let norm = img.iter().map(|e| e * e).sum::<f64>().sqrt();
            assert!(norm <= 1e-9 * point.cc.lambda, "kernel defect {norm}");
        }
    }

    #[test]
    fn printed_cubic_slice_reproduces_the_radicals() {
        let s3 = 3.0_f64.sqrt();
        let [a555, a556, a566, a666] = degenerate_cubic_slice().unwrap();
        let a556_expected =
            -6630331032.0 * (2.0 / (13129701006956661.0 * s3 + 22740709543896356.0)).sqrt();
        let a666_expected = 3269394.0 * (2.0 / (6312834009.0 * s3 + 10926270656.0)).sqrt();
        assert!(a555.abs() <= 1e-10, "a555 = {a555:e}");
        assert!(a566.abs() <= 1e-10, "a566 = {a566:e}");
        assert_relative_eq!(a556, a556_expected, max_relative = 1e-7);
        assert_relative_eq!(a666, a666_expected, max_relative = 1e-7);

        let disc = 4.0 * a556.powi(3) * a666;
        assert!(disc < 0.0 && disc.abs() > 1e-12, "discriminant {disc:e}");
    }

    #[test]
    fn scan_smoke_finds_single_but_not_double_zeros() {
        let scan = kite_two_degree_scan((1.0, 6.0), (0.2, 1.0), (24, 24), 1e-8);
        assert!(scan.simultaneous.is_empty());
        assert!(scan.full_zero.is_empty());
        let positive: Vec<&KiteCell> = scan.cells.iter().filter(|c| c.positive).collect();
        assert!(positive.len() > 100, "only {} positive cells", positive.len());

        // Single determinants do change sign along grid lines once the
        // signed-mass cells are included.
        let mut flips = 0;
        for w in scan.cells.windows(2) {
            if (w[0].xi - w[1].xi).abs() > 1e-12 {
                continue;
            }
            if w[0].det1 * w[1].det1 < 0.0 {
                flips += 1;
            }
            if w[0].det2 * w[1].det2 < 0.0 {
                flips += 1;
            }
        }
        assert!(flips > 0, "no determinant sign change found along grid lines");
    }

    #[test]
    fn scan_csv_schema() {
        let scan = kite_two_degree_scan((2.0, 3.0), (0.4, 0.8), (4, 4), 1e-8);
        let mut buf = Vec::new();
        write_kite_scan_csv(&mut buf, &scan).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "xi,eta,m3,m4,det1,det2,min_eig");
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 7);
        let xi: f64 = fields[0].parse().unwrap();
        assert!((1.9..3.1).contains(&xi));

        let rows = rhombic_table(1.9, 3.5, 5);
        let mut buf = Vec::new();
        write_rhombic_table_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "zeta,m_tilde,lambda,mu5,mu6,mu7,mu8,kappa"
        );
        assert_eq!(text.lines().count(), 1 + rows.len());
    }

    #[test]
    fn kite_blocks_approach_the_equilateral_limit() {
        // Walk toward the equilateral point along the diagonal
        // (xi, eta) = (2 + sqrt 3 - delta, sqrt 3 - delta), which stays in
        // the positive-mass wedge, and compare the symmetric-block
        // determinant with the centroid-family formula at the drifting m4.
        let corner = (2.0 + 3.0_f64.sqrt(), 3.0_f64.sqrt());
        let mut previous_gap = f64::INFINITY;
        let mut previous_m3 = f64::INFINITY;
        for &delta in &[1e-2, 1e-3, 1e-4] {
            let (shape, km) = from_rational(corner.0 - delta, corner.1 - delta).unwrap();
            assert!(km.positive, "left the positive wedge at delta = {delta}");
            let (sym, _) = kite_blocks_from_parts(&shape, km.m3, km.m4);
            let gap = (sym.determinant() - degenerate_block_determinant(km.m4)).abs();
            let m3_err = (km.m3 - 1.0).abs();
            assert!(gap < previous_gap, "no contraction at delta = {delta}");
            assert!(m3_err < previous_m3);
            previous_gap = gap;
            previous_m3 = m3_err;
        }
        assert!(previous_gap <= 1e-3, "limit gap {previous_gap}");
        assert!(previous_m3 <= 1e-3, "m3 limit gap {previous_m3}");
    }
}

//! Centralized numerical tolerances.
//!
//! Every threshold used across the crate is defined here with a short note
//! on where it comes from, so no module carries ad-hoc magic numbers.

/// Tolerance for operations exact in f64 up to a handful of roundings
/// (inner products, congruence transforms, orthonormality checks).
pub const EXACT_F64: f64 = 1e-12;

/// Default residual target for Newton solves of central configurations.
pub const NEWTON_RESIDUAL: f64 = 1e-12;

/// Relative threshold on |μ_j|/λ below which a restricted eigenvalue is
/// counted as zero (degeneracy detection).
pub const DEGENERACY_REL: f64 = 1e-8;

/// Relative threshold on |μ_j + κ/16|/κ below which a mode is treated as
/// resonant (the borderline of the eigenvalue partition).
pub const RESONANCE_REL: f64 = 1e-9;

/// Pair separations below `COLLISION_REL` times the configuration diameter
/// are treated as collisions and reported as errors.
pub const COLLISION_REL: f64 = 1e-12;

/// Default relative tolerance for adaptive integration of blow-up orbits.
pub const ODE_RTOL: f64 = 1e-10;

/// Default absolute tolerance for adaptive integration.
pub const ODE_ATOL: f64 = 1e-12;

/// Agreement required between closed-form reference values and the
/// numerical pipeline (eigenvalues of catalog families, radical constants).
pub const CLOSED_FORM_REL: f64 = 1e-8;

/// Agreement required between independently derived representations of the
/// same vector field (shifted quadratics vs. full blow-up right-hand side,
/// conjugated linearization vs. block-diagonal form).
pub const CONJUGACY_REL: f64 = 1e-10;

/// Relative tolerance for exact rational/radical resonance detection in
/// eigenvalue combinations.
pub const RESONANCE_SCAN_REL: f64 = 1e-9;

/// Looser threshold below which an eigenvalue combination is reported as a
/// near-resonance rather than an exact one.
pub const RESONANCE_NEAR_REL: f64 = 1e-6;

/// Fraction of the trailing τ-range used for asymptotic tail fits.
pub const TAIL_FRACTION: f64 = 0.4;

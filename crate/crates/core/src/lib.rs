//! Numerical laboratory for planar N-body central configurations and
//! total-collision dynamics.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`nbody`] — mass-metric geometry: potential, gradient, Hessian blocks,
//!    and closed-form third directional derivatives.
//! 2. [`ccfind`] — Newton solver for central configurations and spectral
//!    classification of the restricted Hessian.
//! 3. [`frame`] — the rotating orthonormal frame adapted to a central
//!    configuration and the local chart (r, θ, z).
//! 4. [`blowup`] — collision blow-up coordinates, the full vector field on
//!    the collision manifold, and orbit integration/diagnostics.
//! 5. [`normal`] — linearization at the collision equilibrium, center
//!    manifold reduction, and the infinite-spin verdict.
//! 6. [`catalog`] — closed-form four-body families (kite, rhombus,
//!    equilateral with central mass) used as reference data.
//!
//! Supporting modules: [`ode`] (embedded RK7(8) integrator), [`fit`]
//! (regression and root-finding helpers), [`tol`] (centralized tolerances).

pub mod blowup;
pub mod catalog;
pub mod ccfind;
pub mod fit;
pub mod frame;
pub mod nbody;
pub mod normal;
pub mod ode;
pub mod tol;

pub use blowup::{
    asymptotic_exponents, blowup_rhs, crosscheck_frames, gradient_like_check, homothetic_orbit,
    integrate_blowup, integrate_cartesian, make_collision_orbit, theta_limit, theta_limit_series,
    write_trajectory_csv, AsymptoticExponents, BlowupError, BlowupState, CartesianEnd,
    CartesianTrajectory, CollisionOrbit, CrosscheckReport, GradientLikeReport, HomotheticState,
    TailModel, ThetaLimit, Trajectory,
};
pub use catalog::{
    degenerate_basis, degenerate_cubic_slice, degenerate_mass, equilateral_configuration,
    equilateral_family, from_rational, kite_configuration, kite_masses, kite_restricted_blocks,
    kite_two_degree_scan,
    locate_degenerate_mass, rhombic_eigenvalues, rhombic_family, rhombic_table,
    write_kite_scan_csv, write_rhombic_table_csv, CatalogError, EquilateralPoint, KiteCell,
    KiteMasses, KiteScan, KiteShape, RhombicEigenvalues, RhombicFamily, RhombicRow,
};
pub use normal::{
    assemble_linearization, build_linearization, center_manifold_quadratic,
    characteristic_directions, discriminant, invariance_residual, pair_resultant, polar_forms,
    rate_estimate, resonance_scan, shifted_quadratics, simulate_and_fit, simulate_planar,
    spin_verdict, CenterData, LinearData, NormalError, PlanarFit, PlanarSystem, RateEstimate,
    Resonance, ShiftedQuadratics, ShiftedSystem, SpinCase, SpinVerdict, TrigPoly,
};
pub use ccfind::{
    bordered_nullity, classify, classify_with, collision_manifold_dimension, solve_cc, CcError,
    CentralConfiguration, ManifoldDimension, Normalization, Partition, ScaleNote, SpectralReport,
};
pub use frame::{build_chart, ChartPoint, FrameChart, FrameError};
pub use nbody::{MassVector, MassedConfiguration, NBodyError, PairTable};

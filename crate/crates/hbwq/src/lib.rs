//! Galerkin mass matrices for adaptive hierarchical B-spline spaces.
//!
//! The crate builds nested dyadic spline hierarchies, assembles the mass
//! matrix either with weighted quadrature (univariate exactness rules
//! combined across levels and evaluated by sum-factorization) or with a
//! conventional element-based Gauss loop, and drives adaptive L2-projection
//! experiments from a benchmark CLI.

pub mod assembly;
pub mod experiment;
pub mod gauss;
pub mod geometry;
pub mod hierarchical;
pub mod solver;
pub mod sparse;
pub mod splines;
pub mod wq;

pub use assembly::{assemble_rhs, compute_matrix, AssemblyStats};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentRecord, QuadMethod};
pub use gauss::{assemble_mass_gauss, l2_error, l2_error_indicators};
pub use geometry::GeometryMap;
pub use hierarchical::{
    admissible_refine, check_admissibility, classify_basis_functions, compute_active_basis,
    dorfler_mark, interaction_level, Classification, HierarchicalBasis, HierarchicalMesh,
    MeshSnapshot, SpaceHierarchy,
};
pub use solver::bicgstab;
pub use sparse::SparseMatrix;
pub use splines::{
    exact_mass_1d, gauss_legendre, refinement_coefficients, KnotVector, TensorSpace, TwoScaleRow,
};
pub use wq::{preprocessing, wq_rule_apply, WqData};

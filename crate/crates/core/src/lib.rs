//! Solvers for discrete elliptic Dirichlet problems posed on the maximal
//! cluster of supercritical Bernoulli bond percolation in a finite cube.
//!
//! The crate is organized around the pipeline
//! sample → cluster → partition → effective conductance → iterative solve:
//!
//! * [`lattice`] — cube domains of `Z^d`, triadic cubes, fields, discrete calculus;
//! * [`percolation`] — i.i.d. edge conductances and cluster masks;
//! * [`cluster`] — union-find connectivity, good cubes, partitions, coarsening;
//! * [`elliptic`] — stencil operators, conjugate gradients, geometric multigrid,
//!   and a dense direct oracle;
//! * [`homogenization`] — effective conductance, correctors, cutoffs, two-scale
//!   expansion and flux diagnostics;
//! * [`scheme`] — the three-step homogenization-preconditioned iteration;
//! * [`io`] — binary field/conductance/label file formats.

pub mod cluster;
pub mod elliptic;
pub mod homogenization;
pub mod io;
pub mod lattice;
pub mod percolation;
pub mod scheme;

mod error;

pub use error::{Error, Result};
pub use lattice::{CubeDomain, EdgeField, ScalarField, TriadicCube, VectorField};
pub use percolation::{ConductanceField, LawKind, PercolationLaw};
pub use cluster::{ClusterLabels, Partition};
pub use elliptic::{OperatorKind, OperatorSpec, SolveReport};
pub use homogenization::{CorrectorSet, EffectiveTensor};
pub use scheme::{IterationConfig, IterationTrace};

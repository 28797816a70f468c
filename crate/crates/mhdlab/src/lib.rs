//! Desk-scale laboratory for free-boundary compressible resistive MHD in
//! Lagrangian coordinates on the unit disk.
//!
//! The crate evolves the flow map of a liquid blob with a free surface,
//! evaluates the geometric quantities of the evolving metric (normal, second
//! fundamental form, interior q-tensor), monitors energy functionals and the
//! exact identities the system satisfies (energy dissipation, div-B heat
//! equation, derived wave equation, commutators), constructs compatible
//! initial data by elliptic ladders, and drives the incompressible-limit
//! sweep in the sound-speed parameter κ.
//!
//! Layout:
//! - [`grid`], [`field`], [`stencil`], [`linalg`]: discrete substrate
//!   (logically rectangular polar grid with pass-through pole stencils).
//! - [`geometry`]: metric, normal, projection, curvature, q-tensor.
//! - [`numerics`]: Eulerian derivatives, quadrature, elliptic solves.
//! - [`dynamics`]: RK4 time integration of the compressible system, the
//!   incompressible reference solver, residual monitors.
//! - [`energies`]: physical and higher-order energy functionals.
//! - [`initial_data`]: compatible-data construction and κ-convergence.
//! - [`verification`]: commutator identities and inequality ratio monitors.
//! - [`cli`]: config, snapshot persistence, CSV/SVG reports, subcommands.

pub mod cli;
pub mod dynamics;
pub mod energies;
pub mod eos;
pub mod error;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod history;
pub mod initial_data;
pub mod linalg;
pub mod numerics;
pub mod stencil;
pub mod verification;

pub use error::{MhdError, Result};

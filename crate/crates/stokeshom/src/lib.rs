//! Periodic homogenization machinery for Neumann problems of Stokes
//! systems: coefficient tensors, cell correctors, effective tensors, dual
//! correctors, Steklov smoothing, two-scale expansions and convergence-rate
//! studies, all on structured Q2-P1disc meshes with a deterministic sparse
//! direct solver.

pub mod cell;
pub mod coeff;
pub mod grid;
pub mod linsolve;
pub mod neumann;
pub mod quad;
pub mod rates;
pub mod twoscale;

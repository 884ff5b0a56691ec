//! Neural surrogate flowsheets: per-unit MLP surrogates connected into a
//! cyclic flowsheet, tear-stream solvers, and fine-tuning through the
//! unrolled solver.

pub mod autograd;
pub mod nn;
pub mod flowsheet;
pub mod solvers;
pub mod plantgen;
pub mod training;
pub mod analysis;
pub mod experiment;

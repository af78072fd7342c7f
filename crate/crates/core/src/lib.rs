//! Symbolic regression of ODE systems for steel phase-transformation kinetics.
//!
//! The engine evolves four expression trees, one right-hand side per equation,
//! scores each candidate by integrating the system over measured (or
//! synthetic) cooling trajectories, and tunes embedded constants with
//! Levenberg-Marquardt.

pub mod alps;
pub mod cli;
pub mod data;
pub mod expr;
pub mod fitness;
pub mod genotype;
pub mod kinetics;
pub mod ode;

//! Construction, simulation and numerical verification of strong stationary
//! duals for continuous-time Markov chains.
//!
//! The toolkit covers two families of primal chains: birth-death processes on
//! `Z` and reversible random walks on graphs made of a finite center plus
//! finitely many infinite branches. For each it builds the set-valued dual
//! chain intertwined with the primal through the kernel `Λ(Q, ·) = μ|_Q`,
//! simulates the dual through its explosions (stratified restarts), and
//! evaluates the series criteria deciding whether a finite strong stationary
//! time exists.
//!
//! Module map:
//!
//! * [`state_space`] - rate families, stationary measures, graph centers,
//!   standing-assumption checks.
//! * [`ctmc`] - event-driven simulation of minimal processes and exact
//!   transient distributions on finite truncations.
//! * [`interval_dual`] - the dual chain on intervals of `Z`.
//! * [`graph_dual`] - the dual chain on connected compact subsets of the
//!   compactified graph.
//! * [`intertwining`] - the coupling generator, algebraic duality residual,
//!   and trajectory-driven coupled construction.
//! * [`analysis`] - criterion evaluation, separation curves, absorption-time
//!   experiments.
//! * [`config`] / [`cli`] - declarative model files and the batch driver.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod ctmc;
pub mod graph_dual;
pub mod intertwining;
pub mod interval_dual;
pub mod logspace;
pub mod rng;
pub mod state_space;

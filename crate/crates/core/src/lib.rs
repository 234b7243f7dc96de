//! Spatial-domain dynamic programming toolkit for a P0 mild-hybrid passenger car.
//!
//! The crate optimizes a velocity trajectory and an engine/starter-generator
//! torque split jointly over a fixed route, trading fuel against travel time.
//! Three solvers are provided:
//!
//! * a benchmark dynamic program over both torque inputs,
//! * a reduced dynamic program over total powertrain torque with an embedded
//!   equivalent-consumption split rule ([`dp::backward_solve_dpecms`]),
//! * a receding-horizon wrapper that re-solves short look-ahead windows and
//!   picks the charge-equivalence factor per stage ([`lookahead`]).
//!
//! Stages advance over distance, not time: the state is kinetic energy per
//! unit mass (`v²`) plus battery state of charge, so travel time becomes part
//! of the running cost and road grade/speed limits become stage data.

pub mod dp;
pub mod ecms;
pub mod eval;
pub mod grid;
pub mod lookahead;
pub mod powertrain;
pub mod route;
pub mod shooting;
pub mod spatial;

pub(crate) mod par;

pub use powertrain::VehicleParams;
pub use route::Route;
pub use spatial::ProblemConfig;

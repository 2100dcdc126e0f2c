//! Simulation and verification toolkit for university-admission matching
//! mechanisms with costly preference learning.
//!
//! The crate provides:
//!
//! - [`market`]: students, programs, rankings, offer timing, and CSV I/O;
//! - [`matching`]: program-proposing deferred acceptance (plain and seeded
//!   with held offers), stability checking, ex-post feasibility, clearing;
//! - [`learning`]: the costly-inspection dynamic program and the per-period
//!   myopic re-optimization used under sequential offer arrival;
//! - [`two_univ`]: closed-form benchmark results for the two-program market,
//!   with a Monte Carlo oracle;
//! - [`mechanism`]: the period-by-period runtime tying offers, learning, and
//!   the final match together;
//! - [`logit`]: conditional and rank-ordered logit estimation;
//! - [`sim`]: the synthetic-market harness comparing mechanisms end to end;
//! - [`rng`]: deterministic splittable random streams.

pub mod learning;
pub mod logit;
pub mod market;
pub mod matching;
pub mod mechanism;
pub mod rng;
pub mod sim;
pub mod two_univ;

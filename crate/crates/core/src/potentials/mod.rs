//! Guillemin potential, class-S potentials, sections and explicit barriers.

pub mod barrier;
pub mod guillemin;
pub mod section;
pub mod spotential;

pub use barrier::{alpha_schedule, barrier_eval, AlphaSchedule, BarrierEval, BarrierKind, BarrierSpec};
pub use guillemin::{guillemin_det_product, guillemin_eval, guillemin_trace, GuilleminEval};
pub use section::{section, Section};
pub use spotential::{normalize_at, SPotential};

// Comparisons are written `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod avatar;
pub mod biosignal;
pub mod exec;
pub mod orchestrator;
pub mod phase;
pub mod protocol;
pub mod registration;
pub mod robot;
pub mod spatial;
pub mod stats;

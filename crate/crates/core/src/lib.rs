#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cases;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod ph;
pub mod qbd;
pub mod reparam;
pub mod sampler;

pub use error::{Error, Result};
pub use objective::{FitTarget, ShapePoint};
pub use ph::{MarkovianPH, MomentVector, Violation};
pub use reparam::{CoxianParams, Family, GeneralParams, HyperErlangParams, Params, Structure};

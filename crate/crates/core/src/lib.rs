//! DistIR: an intermediate representation for distributed tensor programs.
//!
//! Programs are modules of straight-line SSA functions whose op order is
//! the execution schedule. The crate provides the text format, an abstract
//! interpreter over a mixed concrete/abstract domain, a reference executor,
//! a runtime and memory simulator, regression cost models, data/tensor/
//! pipeline parallelism transforms, per-rank lowering and a grid search over
//! distribution strategies.

pub mod cost;
pub mod exec;
pub mod interp;
pub mod ir;
pub mod lowering;
pub mod models;
pub mod ops;
pub mod search;
pub mod sim;
pub mod text;
pub mod transforms;

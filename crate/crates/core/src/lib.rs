//! Representation learning on hyper-relational knowledge graphs whose
//! entities may be numeric literals.
//!
//! Facts are encoded with a context transformer over the primary triplet
//! and its qualifiers, then a prediction transformer reads out a masked
//! slot: a discrete entity, a relation or a numeric value.

mod error;
pub mod eval;
pub mod ingest;
pub mod kg;
pub mod model;
pub mod training;

pub use error::{Error, ErrorClass, LineError, Result};
pub use hynt_kernel as kernel;

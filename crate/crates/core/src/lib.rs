//! Look-ahead section identification: predict the rhetorical section of the
//! next, not yet written sentence of an abstract from the sentences before it.
//!
//! The crate is self-contained. [`tensor`] provides reverse-mode autodiff,
//! [`nn`] the transformer blocks, [`models`] mini encoder/decoder language
//! models, [`stitching`] the encoder/decoder combination models, [`corpus`]
//! PubMed-RCT handling and [`training`] optimisation and metrics.

pub mod tensor;
pub mod corpus;
pub mod error;
pub mod models;
pub mod nn;
pub mod params;
pub mod stitching;
pub mod task;
pub mod training;

pub use error::{Error, Result};

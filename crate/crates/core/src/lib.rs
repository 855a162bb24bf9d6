//! Post-hoc debiasing of word embedding spaces and the measurements used to
//! judge it: explicit bias (WEAT, ECT, BAT), implicit bias (clustering and
//! classification of target terms) and preservation of semantic quality.

pub mod error;
pub mod eval;
pub mod codec;
pub mod embedding;
pub mod linear;
pub mod ml;
pub mod net;
pub mod numerics;
pub mod pipeline;
pub mod spec;
pub mod xling;

pub use error::{Error, Result};

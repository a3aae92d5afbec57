//! Multitask speech-to-keyword models supervised by an image tagger and by
//! transcripts, for semantic speech retrieval.

pub mod binfmt;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod tagger;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

//! Speaker embeddings trained under subjective inter-speaker similarity.
//!
//! The crate covers the whole pipeline: aggregating pairwise listener
//! scores into a similarity matrix ([`scoring`]), a small feed-forward
//! network with analytic gradients ([`network`]), the four training
//! objectives ([`losses`]), training and d-vector extraction
//! ([`embedding`]), evaluation and similarity-graph analysis
//! ([`analysis`]) and a synthetic planted-world generator ([`datagen`]).

pub mod analysis;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod io;
pub mod losses;
pub mod network;
pub mod scoring;
pub mod simcore;

pub use error::{Error, Result};

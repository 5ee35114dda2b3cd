//! Small-scale laboratory for kNN-augmented language modeling.
//!
//! The pipeline is: tokenize a corpus ([`corpus`]), train a decoder-only
//! transformer with an optional activation regularizer ([`model`],
//! [`regularizers`]), collect a datastore of context vectors ([`datastore`]),
//! interpolate retrieval with the LM distribution at inference time ([`knn`]),
//! and inspect how representations cluster ([`analysis`]).

pub mod analysis;
pub mod corpus;
pub mod datastore;
pub mod digest;
pub mod error;
pub mod kmeans;
pub mod knn;
pub mod model;
pub mod regularizers;
pub mod synth;

pub use error::{Error, Result};

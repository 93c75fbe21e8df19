//! Query-based scientific dataset recommendation over an attributed
//! heterogeneous graph of papers, datasets and words.
//!
//! Papers and datasets share one topic space. Each paper carries an embedding
//! `v = [t; s]` built from a stacked denoising autoencoder over its text (`t`)
//! and a skip-gram embedding of the citation graph (`s`). A peaked softmax maps
//! `v` onto topic proportions, which couple the embedding to per-token and
//! per-dataset-usage topic assignments. Training alternates L-BFGS over the
//! continuous parameters with representation fine-tuning and Gibbs sweeps.

pub mod bundle;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod graph_embedding;
pub mod linalg;
pub mod optim;
pub mod recommender;
pub mod serve;
pub mod text_autoencoder;
pub mod topic_model;

pub use error::{Error, Result};

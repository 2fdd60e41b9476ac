#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

//! Robust heterogeneous treatment effect estimation.
//!
//! The pipeline embeds covariates through a graph attention layer over the
//! confounder correlation graph, encodes samples with a conditional VAE,
//! clusters the latent codes while promoting outliers to their own clusters,
//! and estimates a doubly robust, outlier-resistant effect per cluster.

pub mod bench;
pub mod clustering;
pub mod cvae;
pub mod data;
pub mod error;
pub mod estimate;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod simgen;
pub mod stats;

pub use data::{load_csv, save_csv, Dataset, ObservedSample};
pub use error::{Error, Result};
pub use rng::{split_rng, RngState};

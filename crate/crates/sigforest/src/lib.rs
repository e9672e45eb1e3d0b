//! Isolation-forest anomaly detection with per-feature anomaly signatures.
//!
//! The crate fits an ensemble of randomized isolation trees, scores samples
//! by their expected isolation depth, and decomposes each sample's depth
//! into exact per-split contributions. Averaged per feature, those
//! contributions form a signature vector that explains *which* features drove
//! an anomaly call; clustering the signatures of the strongest anomalies
//! groups them into reviewable kinds.
//!
//! With the default `parallel` feature, tree construction and batch
//! evaluation run on rayon; results are identical to the sequential
//! fallback and independent of thread count.

pub mod clustering;
pub mod data_io;
mod error;
mod exec;
pub mod forest;
pub mod math;
pub mod scoring;
pub mod signature;

pub use clustering::{cluster_signatures, kmeans, top_anomalies, ClusterConfig, ClusterReport};
pub use data_io::{
    featurize_spectra, load_csv, load_model, load_spectra_combined, load_spectra_pair, save_csv,
    save_model, CsvOptions, Dataset, SpectraPair, MODEL_FORMAT_VERSION,
};
pub use error::{Error, Result};
pub use forest::{build_tree, fit, ForestConfig, ForestModel, IsolationTree, TreeNode};
pub use math::{expected_depth, harmonic, ExpectedDepthTable};
pub use scoring::{
    expected_path_depth, score, score_batch, trace_path, PathTrace, ScoreReport, SplitRecord,
};
pub use signature::{
    delta_signature, reconstruct_depth, signature, signature_batch, verify_depth_identity,
    SignatureMatrix, SignatureVector,
};

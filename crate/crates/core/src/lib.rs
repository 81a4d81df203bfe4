//! Balanced inverted-file indexing.
//!
//! The crate clusters a vector collection with Lloyd's k-means, then
//! rebalances cell populations by attaching a multiplicative penalty to each
//! cell's squared distance and iterating until the cells fill evenly. The
//! resulting codebook backs a multi-probe inverted file whose query cost
//! becomes nearly constant across queries.
//!
//! Modules, bottom-up:
//!
//! * [`dataset`]: `fvecs`/`bvecs` I/O and a seeded Gaussian-mixture generator.
//! * [`kmeans`]: centroid initialization, plain assignment and Lloyd iterations.
//! * [`balancer`]: penalized assignment, the penalty update and the balancing loop.
//! * [`index`]: the inverted file, cell selection, search and persistence.
//! * [`metrics`]: imbalance factor, list variance, ground truth and evaluation.
//! * [`harness`]: experiment drivers that write CSV reports.

pub mod balancer;
pub mod dataset;
mod distance;
mod error;
pub mod harness;
pub mod index;
pub mod kmeans;
pub mod metrics;
mod textmeta;

pub use balancer::{
    assign_balanced, balance, embed_augmented, embed_point, penalized_distance_sq,
    update_penalties, BalanceConfig, BalanceOutcome, BalanceTrace, Codebook, StopRule, TraceRecord,
};
pub use dataset::{
    gen_gaussian_mixture, load_bvecs, load_fvecs, load_vectors, save_fvecs, GaussianMixture,
    VectorSet,
};
pub use distance::{squared_l2, squared_l2_mixed};
pub use error::{Error, Result};
pub use index::{search, select_cells, Hit, InvertedFile, QueryResult, Route, SearchParams};
pub use kmeans::{
    assign_plain, init_centroids, lloyd, Assignment, Centroids, InitMethod, KMeansConfig,
    KMeansOutput,
};
pub use metrics::{
    brute_force_nn, evaluate, imbalance_factor, list_variance, EvalReport, GroundTruth,
    ScanHistogram,
};

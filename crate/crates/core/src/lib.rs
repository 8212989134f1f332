//! Concept discovery and importance ranking for layered video models.
//!
//! The pipeline runs over exported feature volumes:
//!
//! 1. [`tubelets`] partitions each video's features at a site into connected
//!    spatiotemporal regions (SLIC in feature space) and pools a feature
//!    vector per region.
//! 2. [`concepts`] clusters tubelets across videos with convex NMF and picks
//!    the cluster count by silhouette.
//! 3. [`importance`] ranks concepts or attention heads by masking random
//!    subsets of them through a [`backend::ModelBackend`].
//! 4. [`rosetta`] mines concepts whose supports coincide across models.
//! 5. [`eval`] holds the evaluation protocols: attribution curves, head
//!    pruning, groundtruth validation and the random-crop baseline.

pub mod error;
pub mod store;
pub mod concepts;
pub mod tubelets;
pub mod backend;
pub mod importance;
pub mod rosetta;
pub mod eval;
pub mod fixtures;
pub mod cli;

pub use error::{Error, Result};

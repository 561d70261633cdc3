//! Clustering and dimensionality reduction used for filter estimation.

mod kmeans;
mod pca;

pub use kmeans::{minibatch_kmeans, ClusterResult, KMeansConfig};
pub use pca::{covariance, pca_components, PcaResult};

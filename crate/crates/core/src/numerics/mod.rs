//! Dense linear algebra and statistics used across the toolkit.

mod matrix;
mod pca;
mod procrustes;
mod stats;
mod svd;

pub use matrix::{canonical_sign, cosine, dot, euclidean_distance, norm, Matrix};
pub use pca::{pca_2d, Pca2d};
pub use procrustes::{orthogonal_polar, procrustes};
pub use stats::{average_ranks, mean, pearson, population_std, spearman};
pub use svd::{
    svd, top_right_singular_vector, top_singular_vector_from_gram, Svd, TopSingularVector,
};

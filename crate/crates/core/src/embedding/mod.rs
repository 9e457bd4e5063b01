//! Vector algebra of the shared vision-language space, encoder backends and
//! on-disk embedding caches.

mod backend;
mod cache;
mod vector;

pub(crate) use backend::gaussian_matrix;
pub use backend::{split_words, EncoderBackend, Token, ToyBackend, TwistWarp};
pub use cache::{cache_load, cache_store, manifest_path, EmbeddingCache, ManifestEntry, CACHE_MAGIC};
pub use vector::{
    cosine, cosine_distance, cosine_similarity, dot, mean_embedding, mean_rows, norm, normalize, offset, sub,
    EmbeddingVector, OffsetVector, ZERO_NORM_EPS,
};

//! Segment retrieval: descriptors of a scene and a box, an exact nearest-neighbour index
//! over a pool of person segments, and a size prefilter.

pub mod features;
pub mod kdtree;
pub mod pool;
pub mod store;

pub use features::{
    concat_descriptor, context_patch, extract_global, extract_local, l2_normalize,
    ColorLayoutExtractor, FeatureExtractor, MIN_PATCH,
};
pub use kdtree::{brute_force_nearest, cosine_distance, KdTree, Neighbor};
pub use pool::{
    build_pool, make_entry, mask_bounds, size_passes, CandidatePool, Hit, PoolEntry, PoolParams,
    QueryOutcome, SegmentRecord, UiCandidates, DEFAULT_MARGIN, DEFAULT_SIZE_THRESHOLD,
    UI_CANDIDATES,
};
pub use store::{load_pool, read_pool, save_pool, write_pool};

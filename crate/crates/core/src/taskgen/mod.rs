//! Synthetic class pools and episodic samplers producing meta labeled
//! examples `(D_tr, D_val)`.

mod episode;
mod pool;
mod rng;

pub use episode::{sample_episode, EpisodeSource, EpisodeSpec, LabeledInstance, MetaExample, PerSubSampler};
pub use pool::{
    make_gaussian_pool, make_heterogeneous_pool, make_two_domain_pool, subsample_pool, ClassPool, DomainTransform,
    GaussianPoolParams, HeterogeneousPoolParams, Instance, PoolClass, PoolMeta, POOL_HEADER,
};
pub use rng::RngStream;

pub(crate) use pool::parse_header;

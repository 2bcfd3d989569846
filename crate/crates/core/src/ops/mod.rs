//! Spatiotemporal kernels with reverse-mode rules.

pub mod conv;
pub mod norm;
pub mod pool;

pub use conv::{conv3d_forward, out_extent, sepconv3d_forward, ConvOpts, FilterBank, Padding, TimeBorder};
pub use norm::{BatchStats, BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::{avgpool_spacetime_forward, maxpool3d_forward, PoolOpts};

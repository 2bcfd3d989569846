//! Cost accounting, weight statistics, reversal probes and embeddings.

pub mod cost;
pub mod curve;
pub mod embed;
pub mod offsets;
pub mod probe;

pub use cost::{count_flops, count_params, BnParams, CostConvention, CostReport, CostRow, MacConvention};
pub use curve::{tradeoff_curve, CurvePoint, TradeoffCurve};
pub use embed::{export_embeddings, Embeddings};
pub use offsets::{weight_offset_stats, LayerOffsets, OffsetStats, Summary};
pub use probe::{reversal_probe, ReversalReport};

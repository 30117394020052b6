//! Saliency criteria, mask construction and structured shrinking.

pub mod criteria;
pub mod mask;
pub mod structured;

pub use criteria::{
    first_order_meta_gradient, layer_collapse_report, magnitude_scores, meta_gradient, normalize,
    prospr_first_order_scores, prospr_scores, random_scores, retained_count, snip_scores, top_k_mask,
    CollapseReport, Criterion, LayerRetention, SaliencyReport,
};
pub use mask::{decode_mask, encode_mask, read_mask, write_mask, Granularity, Mask, MaskGroup, MaskSpec};
pub use structured::shrink;

/// Sparsity levels (percent) of the standard comparison grid: `1 - 0.8^i`
/// rounded to one decimal, for i = 1..=18.
pub const SPARSITY_GRID_PERCENT: [f64; 18] = [
    20.0, 36.0, 48.8, 59.0, 67.2, 73.8, 79.0, 83.2, 86.6, 89.3, 91.4, 93.1, 94.5, 95.6, 96.5, 97.2,
    97.7, 98.2,
];

/// Density corresponding to a sparsity given in percent.
pub fn density_from_sparsity_percent(sparsity: f64) -> f64 {
    (100.0 - sparsity) / 100.0
}

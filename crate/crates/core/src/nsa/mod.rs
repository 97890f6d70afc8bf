//! Reference NSA attention: compressed cache, block routing, the three branches
//! with independent streaming-softmax states, and gated aggregation.

mod branch;
mod cache;
mod partial;
mod routing;

pub use branch::{
    branch_attend_compressed, branch_attend_selected, branch_attend_window, gated_combine,
    window_range, DraftRow, GateVector, IntraTree, RowVisibility,
};
pub use cache::{build_compressed_cache, CompressedCache, KvCache};
pub use partial::{dot_wide, merge_partials, BranchPartial};
pub use routing::{forced_blocks, route_query, select_blocks, selection_scores, SelectedIndexSet};

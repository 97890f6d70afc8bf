//! The compression, selection and sliding-window branches, and gated aggregation.
//!
//! Every branch returns one [`BranchPartial`] per query head. Keys are visited in
//! ascending token order (compressed blocks by id, selected blocks by id then
//! token, window by position) so results do not depend on how callers batch
//! queries.

use serde::{Deserialize, Serialize};

use super::cache::{CompressedCache, KvCache};
use super::partial::{dot_wide, BranchPartial};
use crate::config::NsaConfig;

/// Key/value row of an uncommitted draft token, all KV heads back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftRow {
    pub pos: usize,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Draft rows visible to one query: the rows plus that query's tree-mask row.
#[derive(Debug, Clone, Copy)]
pub struct IntraTree<'a> {
    pub rows: &'a [DraftRow],
    pub admit: &'a [bool],
}

/// Causal bound (exclusive token position) and optional per-block ownership for
/// the selection branch.
#[derive(Debug, Clone, Copy)]
pub struct RowVisibility<'a> {
    pub bound: usize,
    pub ownership: Option<&'a [bool]>,
}

impl RowVisibility<'_> {
    pub fn causal(bound: usize) -> Self {
        Self {
            bound,
            ownership: None,
        }
    }
}

/// Per-query-head gates for the three branches, each in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    /// `[g_cmp, g_slc, g_win]` per query head.
    pub gates: Vec<[f32; 3]>,
}

impl GateVector {
    /// Sigmoid of raw gate logits laid out as `[head][branch]`.
    pub fn from_logits(logits: &[f32], n_q_heads: usize) -> Self {
        assert_eq!(logits.len(), n_q_heads * 3);
        let sig = |x: f32| 1.0 / (1.0 + (-x).exp());
        Self {
            gates: logits
                .chunks_exact(3)
                .map(|c| [sig(c[0]), sig(c[1]), sig(c[2])])
                .collect(),
        }
    }

    pub fn uniform(n_q_heads: usize, g: [f32; 3]) -> Self {
        Self {
            gates: vec![g; n_q_heads],
        }
    }
}

fn empties(cfg: &NsaConfig) -> Vec<BranchPartial> {
    (0..cfg.n_q_heads)
        .map(|_| BranchPartial::empty(cfg.d_head))
        .collect()
}

/// Attention over the compressed blocks whose source range ends at or before
/// `visible_len`.
pub fn branch_attend_compressed(
    q: &[f32],
    cc: &CompressedCache,
    visible_len: usize,
    cfg: &NsaConfig,
) -> Vec<BranchPartial> {
    let mut parts = empties(cfg);
    let visible = cc.visible_blocks(visible_len);
    let scale = cfg.softmax_scale();
    let dh = cfg.d_head;
    for (h, p) in parts.iter_mut().enumerate() {
        let qh = &q[h * dh..(h + 1) * dh];
        let kvh = cfg.kv_head_of(h);
        for i in 0..visible {
            p.push(dot_wide(qh, cc.key(kvh, i)) * scale, cc.value(kvh, i));
        }
    }
    parts
}

/// Attention restricted to the tokens of `blocks`.
///
/// Tokens at or past `vis.bound`, tokens not yet committed, and blocks whose
/// ownership flag is false are masked to `-inf` and contribute nothing.
pub fn branch_attend_selected(
    q: &[f32],
    kv: &KvCache,
    layer: usize,
    blocks: &[u32],
    vis: RowVisibility<'_>,
    cfg: &NsaConfig,
) -> Vec<BranchPartial> {
    if let Some(own) = vis.ownership {
        assert_eq!(own.len(), blocks.len(), "ownership row width");
    }
    let mut parts = empties(cfg);
    let scale = cfg.softmax_scale();
    let dh = cfg.d_head;
    let limit = vis.bound.min(kv.committed_len());
    for (h, p) in parts.iter_mut().enumerate() {
        let qh = &q[h * dh..(h + 1) * dh];
        let kvh = cfg.kv_head_of(h);
        for (j, &b) in blocks.iter().enumerate() {
            if vis.ownership.is_some_and(|own| !own[j]) {
                continue;
            }
            let start = b as usize * cfg.l_sel;
            let end = ((b as usize + 1) * cfg.l_sel).min(limit);
            for t in start..end {
                p.push(dot_wide(qh, kv.key(layer, kvh, t)) * scale, kv.value(layer, kvh, t));
            }
        }
    }
    parts
}

/// Token range `[lo, hi)` of committed rows inside the window of `pos`.
pub fn window_range(pos: usize, w: usize, committed_len: usize) -> std::ops::Range<usize> {
    let lo = (pos + 1).saturating_sub(w);
    let hi = (pos + 1).min(committed_len);
    lo..hi.max(lo)
}

/// Dense causal attention over the last `w` positions: committed rows in the
/// window, then draft rows admitted by the tree-mask row.
pub fn branch_attend_window(
    q: &[f32],
    kv: &KvCache,
    layer: usize,
    pos: usize,
    cfg: &NsaConfig,
    intra: Option<IntraTree<'_>>,
) -> Vec<BranchPartial> {
    let mut parts = empties(cfg);
    let scale = cfg.softmax_scale();
    let dh = cfg.d_head;
    let range = window_range(pos, cfg.w, kv.committed_len());
    let lo = range.start;
    for (h, p) in parts.iter_mut().enumerate() {
        let qh = &q[h * dh..(h + 1) * dh];
        let kvh = cfg.kv_head_of(h);
        for t in range.clone() {
            p.push(dot_wide(qh, kv.key(layer, kvh, t)) * scale, kv.value(layer, kvh, t));
        }
        if let Some(tree) = intra {
            for (row, _) in tree.rows.iter().zip(tree.admit).filter(|(_, a)| **a) {
                if row.pos < lo || row.pos > pos {
                    continue;
                }
                let k = &row.k[kvh * dh..(kvh + 1) * dh];
                let v = &row.v[kvh * dh..(kvh + 1) * dh];
                p.push(dot_wide(qh, k) * scale, v);
            }
        }
    }
    parts
}

/// Gated sum of the normalized branch outputs, one `d_head` slice per query head.
/// Empty partials contribute zero whatever their gate.
pub fn gated_combine(
    p_cmp: &[BranchPartial],
    p_slc: &[BranchPartial],
    p_win: &[BranchPartial],
    g: &GateVector,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(p_cmp.len() * p_cmp.first().map_or(0, |p| p.out.len()));
    for h in 0..p_cmp.len() {
        let [gc, gs, gw] = g.gates[h];
        let (c, s, w) = (
            p_cmp[h].normalized(),
            p_slc[h].normalized(),
            p_win[h].normalized(),
        );
        for i in 0..c.len() {
            out.push((gc as f64 * c[i] + gs as f64 * s[i] + gw as f64 * w[i]) as f32);
        }
    }
    out
}

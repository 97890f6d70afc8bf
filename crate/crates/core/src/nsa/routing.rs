//! Block routing: compressed-key scores remapped onto selection blocks, then Top-n.

use serde::{Deserialize, Serialize};

use super::cache::CompressedCache;
use super::partial::dot_wide;
use crate::config::NsaConfig;

/// Sorted selection-block ids chosen for one query at one layer.
///
/// Block `b` covers tokens `[b*l_sel, (b+1)*l_sel)`. `forced` is the subset that
/// was included unconditionally (initial and local blocks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedIndexSet {
    pub query: usize,
    pub layer: usize,
    pub indices: Vec<u32>,
    pub forced: Vec<u32>,
}

impl SelectedIndexSet {
    pub fn new(query: usize, layer: usize, indices: Vec<u32>, forced: Vec<u32>) -> Self {
        Self {
            query,
            layer,
            indices,
            forced,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, b: u32) -> bool {
        self.indices.binary_search(&b).is_ok()
    }

    /// Size of the intersection with another set (both sorted).
    pub fn overlap(&self, other: &SelectedIndexSet) -> usize {
        let (a, b) = (&self.indices, &other.indices);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Checks the structural invariants against a selection budget and visible range.
    pub fn is_valid(&self, n: usize, visible_blocks: usize) -> bool {
        self.indices.windows(2).all(|w| w[0] < w[1])
            && self.indices.len() <= n
            && self.indices.iter().all(|&b| (b as usize) < visible_blocks)
            && self.forced.iter().all(|f| self.contains(*f))
    }
}

/// Per-selection-block routing scores for one query.
///
/// Each query head takes a softmax over the visible compressed keys of its KV
/// head; the probabilities are summed over heads and each compressed block's
/// mass is spread over the selection blocks its source range overlaps, in
/// proportion to the overlap. Returns one score per selection block
/// intersecting `[0, visible_len)`.
pub fn selection_scores(
    q: &[f32],
    cc: &CompressedCache,
    visible_len: usize,
    cfg: &NsaConfig,
) -> Vec<f64> {
    let n_sel = cfg.selection_block_count(visible_len);
    let mut scores = vec![0.0f64; n_sel];
    let visible = cc.visible_blocks(visible_len);
    if visible == 0 {
        return scores;
    }
    let mass = compressed_mass(q, cc, visible, cfg);
    remap_to_selection(&mass, cfg, &mut scores);
    scores
}

/// Softmax mass on each visible compressed block, summed over query heads.
fn compressed_mass(q: &[f32], cc: &CompressedCache, visible: usize, cfg: &NsaConfig) -> Vec<f64> {
    let dh = cfg.d_head;
    let scale = cfg.softmax_scale();
    let mut mass = vec![0.0f64; visible];
    let mut logits = vec![0.0f64; visible];
    for h in 0..cfg.n_q_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let kvh = cfg.kv_head_of(h);
        let mut m = f64::NEG_INFINITY;
        for (i, lg) in logits.iter_mut().enumerate() {
            *lg = dot_wide(qh, cc.key(kvh, i)) * scale;
            m = m.max(*lg);
        }
        let mut den = 0.0;
        for lg in logits.iter_mut() {
            *lg = (*lg - m).exp();
            den += *lg;
        }
        for (acc, p) in mass.iter_mut().zip(&logits) {
            *acc += p / den;
        }
    }
    mass
}

fn remap_to_selection(mass: &[f64], cfg: &NsaConfig, scores: &mut [f64]) {
    let l = cfg.l;
    for (i, &p) in mass.iter().enumerate() {
        let start = i * cfg.d;
        let end = start + l;
        let first = start / cfg.l_sel;
        let last = (end - 1) / cfg.l_sel;
        for b in first..=last.min(scores.len().saturating_sub(1)) {
            let lo = start.max(b * cfg.l_sel);
            let hi = end.min((b + 1) * cfg.l_sel);
            if hi > lo {
                scores[b] += p * (hi - lo) as f64 / l as f64;
            }
        }
    }
}

/// Mandatory blocks for a visible range: block 0 and the two most recent
/// selection blocks intersecting `[0, visible_len)`.
pub fn forced_blocks(visible_len: usize, cfg: &NsaConfig) -> Vec<u32> {
    let n_sel = cfg.selection_block_count(visible_len);
    let mut forced: Vec<u32> = [0usize, n_sel.saturating_sub(2), n_sel.saturating_sub(1)]
        .into_iter()
        .filter(|&b| b < n_sel)
        .map(|b| b as u32)
        .collect();
    forced.sort_unstable();
    forced.dedup();
    forced
}

/// Top-n selection over `scores` with `forced` blocks always included.
///
/// Remaining slots go to the highest-scoring non-forced blocks, ties to the lower
/// block id. Returns `(indices, forced)`, both ascending.
pub fn select_blocks(scores: &[f64], n: usize, forced: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut forced: Vec<u32> = forced
        .iter()
        .copied()
        .filter(|&b| (b as usize) < scores.len())
        .collect();
    forced.sort_unstable();
    forced.dedup();
    let budget = n.min(scores.len());
    let mut rest: Vec<u32> = (0..scores.len() as u32)
        .filter(|b| forced.binary_search(b).is_err())
        .collect();
    rest.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    let mut indices = forced.clone();
    indices.extend(rest.into_iter().take(budget.saturating_sub(forced.len())));
    indices.sort_unstable();
    (indices, forced)
}

/// Full index construction for one query: scores, forced set, Top-n.
pub fn route_query(
    q: &[f32],
    cc: &CompressedCache,
    visible_len: usize,
    cfg: &NsaConfig,
    query: usize,
) -> SelectedIndexSet {
    let scores = selection_scores(q, cc, visible_len, cfg);
    let forced = forced_blocks(visible_len, cfg);
    let (indices, forced) = select_blocks(&scores, cfg.n, &forced);
    SelectedIndexSet::new(query, cc.layer, indices, forced)
}

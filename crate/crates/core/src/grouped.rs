//! Cross-query grouped verification: adjacent verifier queries are executed in
//! groups of up to `C`, either exactly (merged schedule with ownership masks)
//! or approximately (one representative's indices shared by the group).

use serde::{Deserialize, Serialize};

use crate::config::NsaConfig;
use crate::error::{Error, Result};
use crate::fusion::clamp_inherited_indices;
use crate::nsa::{
    branch_attend_compressed, branch_attend_selected, branch_attend_window, gated_combine,
    route_query, window_range, BranchPartial, CompressedCache, DraftRow, GateVector, IntraTree,
    KvCache, RowVisibility, SelectedIndexSet,
};
use crate::tree::FlatBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseningMode {
    Exact,
    Approximate,
}

impl std::fmt::Display for CoarseningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoarseningMode::Exact => "exact",
            CoarseningMode::Approximate => "approximate",
        })
    }
}

impl std::str::FromStr for CoarseningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" | "e" => Ok(CoarseningMode::Exact),
            "approximate" | "approx" | "a" => Ok(CoarseningMode::Approximate),
            _ => Err(Error::config(format!("unknown coarsening mode '{s}'"))),
        }
    }
}

/// Contiguous slots of the flattened batch executed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub members: Vec<usize>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Split `0..gamma` into consecutive groups of `c`; the last may be shorter.
pub fn partition_slots(gamma: usize, c: usize) -> Result<Vec<QueryGroup>> {
    if c == 0 {
        return Err(Error::config("coarsening factor C must be at least 1"));
    }
    Ok((0..gamma)
        .step_by(c)
        .map(|s| QueryGroup {
            members: (s..(s + c).min(gamma)).collect(),
        })
        .collect())
}

pub fn partition_groups(batch: &FlatBatch, c: usize) -> Result<Vec<QueryGroup>> {
    partition_slots(batch.gamma, c)
}

/// Sorted union of a group's index sets with per-member ownership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedSchedule {
    pub unique_blocks: Vec<u32>,
    /// `ownership[m][i]`: member `m` selected `unique_blocks[i]`.
    pub ownership: Vec<Vec<bool>>,
}

impl MergedSchedule {
    pub fn requested(&self) -> usize {
        self.ownership.iter().flatten().filter(|o| **o).count()
    }

    pub fn savings(&self) -> usize {
        self.requested() - self.unique_blocks.len()
    }
}

pub fn merged_schedule(sets: &[&SelectedIndexSet]) -> MergedSchedule {
    let mut all: Vec<u32> = sets.iter().flat_map(|s| s.indices.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    let ownership = sets
        .iter()
        .map(|s| all.iter().map(|&b| s.contains(b)).collect())
        .collect();
    MergedSchedule {
        unique_blocks: all,
        ownership,
    }
}

/// Load and launch accounting for one group at one layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub unique_block_loads: usize,
    pub total_requested_loads: usize,
    pub dedup_savings: usize,
    /// `|I_t ∩ I_{t-1}|` for each adjacent member pair.
    pub pairwise_overlap: Vec<usize>,
    /// Distinct window rows (committed plus draft) read by the group.
    pub window_token_loads: usize,
    pub launches: usize,
    pub index_constructions: usize,
}

impl LoadStats {
    fn from_sets(sets: &[&SelectedIndexSet], unique: usize) -> Self {
        let requested: usize = sets.iter().map(|s| s.len()).sum();
        Self {
            unique_block_loads: unique,
            total_requested_loads: requested,
            dedup_savings: requested.saturating_sub(unique),
            pairwise_overlap: sets.windows(2).map(|w| w[1].overlap(w[0])).collect(),
            ..Self::default()
        }
    }

    pub fn add(&mut self, other: &LoadStats) {
        self.unique_block_loads += other.unique_block_loads;
        self.total_requested_loads += other.total_requested_loads;
        self.dedup_savings += other.dedup_savings;
        self.pairwise_overlap.extend_from_slice(&other.pairwise_overlap);
        self.window_token_loads += other.window_token_loads;
        self.launches += other.launches;
        self.index_constructions += other.index_constructions;
    }

    pub fn mean_overlap(&self) -> f64 {
        if self.pairwise_overlap.is_empty() {
            0.0
        } else {
            self.pairwise_overlap.iter().sum::<usize>() as f64 / self.pairwise_overlap.len() as f64
        }
    }
}

/// Flat CSV row for one (step, layer, group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub step: usize,
    pub layer: usize,
    pub group: usize,
    pub unique_block_loads: usize,
    pub total_requested_loads: usize,
    pub dedup_savings: usize,
    pub pairwise_overlap: String,
    pub window_token_loads: usize,
    pub launches: usize,
    pub index_constructions: usize,
}

impl LoadRecord {
    pub fn new(step: usize, layer: usize, group: usize, s: &LoadStats) -> Self {
        Self {
            step,
            layer,
            group,
            unique_block_loads: s.unique_block_loads,
            total_requested_loads: s.total_requested_loads,
            dedup_savings: s.dedup_savings,
            pairwise_overlap: s
                .pairwise_overlap
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            window_token_loads: s.window_token_loads,
            launches: s.launches,
            index_constructions: s.index_constructions,
        }
    }
}

pub fn write_load_csv<W: std::io::Write>(w: W, rows: &[LoadRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Everything a layer's attention reads besides the queries themselves.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub cfg: &'a NsaConfig,
    pub layer: usize,
    pub kv: &'a KvCache,
    pub cc: &'a CompressedCache,
    /// Uncommitted rows of this layer, in batch order.
    pub draft_rows: &'a [DraftRow],
}

/// One verifier query at one layer.
#[derive(Debug, Clone, Copy)]
pub struct VerifierQuery<'a> {
    pub slot: usize,
    pub pos: usize,
    pub q: &'a [f32],
    /// Tree-mask row over `draft_rows`.
    pub admit: &'a [bool],
    pub gates: &'a GateVector,
}

impl VerifierQuery<'_> {
    /// Exclusive token bound of the compression and selection branches.
    pub fn frontier(&self, cfg: &NsaConfig) -> usize {
        cfg.routing_frontier(self.pos)
    }
}

/// Attention output of one member with its three branch partials.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberOutput {
    pub out: Vec<f32>,
    pub cmp: Vec<BranchPartial>,
    pub slc: Vec<BranchPartial>,
    pub win: Vec<BranchPartial>,
}

/// Index construction for one query.
pub fn route_member(query: &VerifierQuery<'_>, view: &LayerView<'_>) -> SelectedIndexSet {
    route_query(query.q, view.cc, query.frontier(view.cfg), view.cfg, query.slot)
}

fn attend_member(
    query: &VerifierQuery<'_>,
    blocks: &[u32],
    ownership: Option<&[bool]>,
    view: &LayerView<'_>,
) -> MemberOutput {
    let cfg = view.cfg;
    let bound = query.frontier(cfg);
    let cmp = branch_attend_compressed(query.q, view.cc, bound, cfg);
    let slc = branch_attend_selected(
        query.q,
        view.kv,
        view.layer,
        blocks,
        RowVisibility { bound, ownership },
        cfg,
    );
    let win = branch_attend_window(
        query.q,
        view.kv,
        view.layer,
        query.pos,
        cfg,
        Some(IntraTree {
            rows: view.draft_rows,
            admit: query.admit,
        }),
    );
    MemberOutput {
        out: gated_combine(&cmp, &slc, &win, query.gates),
        cmp,
        slc,
        win,
    }
}

/// Plain per-query NSA execution with the given index set.
pub fn attend_independent(
    query: &VerifierQuery<'_>,
    set: &SelectedIndexSet,
    view: &LayerView<'_>,
) -> MemberOutput {
    attend_member(query, &set.indices, None, view)
}

fn window_union(members: &[VerifierQuery<'_>], view: &LayerView<'_>) -> usize {
    let committed = view.kv.committed_len();
    let mut ranges: Vec<_> = members
        .iter()
        .map(|m| window_range(m.pos, view.cfg.w, committed))
        .collect();
    ranges.sort_by_key(|r| r.start);
    let (mut total, mut reach) = (0, 0);
    for r in ranges {
        let start = r.start.max(reach);
        if r.end > start {
            total += r.end - start;
            reach = r.end;
        }
    }
    let mut used = vec![false; view.draft_rows.len()];
    for m in members {
        let lo = (m.pos + 1).saturating_sub(view.cfg.w);
        for (j, row) in view.draft_rows.iter().enumerate() {
            if m.admit[j] && row.pos >= lo && row.pos <= m.pos {
                used[j] = true;
            }
        }
    }
    total + used.iter().filter(|u| **u).count()
}

/// Exact grouped execution: every unique block is visited once per group and
/// each member skips blocks it does not own, so outputs equal
/// [`attend_independent`] for every member.
pub fn group_attend_exact(
    members: &[VerifierQuery<'_>],
    sets: &[&SelectedIndexSet],
    schedule: &MergedSchedule,
    view: &LayerView<'_>,
) -> Result<(Vec<MemberOutput>, LoadStats)> {
    if members.is_empty() || sets.len() != members.len() || schedule.ownership.len() != members.len()
    {
        return Err(Error::config(format!(
            "merged schedule covers {} members, {} index sets, group has {}",
            schedule.ownership.len(),
            sets.len(),
            members.len()
        )));
    }
    for (m, (set, own)) in sets.iter().zip(&schedule.ownership).enumerate() {
        let owned: Vec<u32> = schedule
            .unique_blocks
            .iter()
            .zip(own)
            .filter_map(|(&b, &o)| o.then_some(b))
            .collect();
        if owned != set.indices {
            return Err(Error::config(format!(
                "merged schedule ownership of member {m} does not match its index set"
            )));
        }
    }
    let outs = members
        .iter()
        .zip(&schedule.ownership)
        .map(|(q, own)| attend_member(q, &schedule.unique_blocks, Some(own), view))
        .collect();
    let mut stats = LoadStats::from_sets(sets, schedule.unique_blocks.len());
    stats.window_token_loads = window_union(members, view);
    stats.index_constructions = members.len();
    Ok((outs, stats))
}

/// Member whose indices the approximate variant shares: the largest absolute
/// position, ties to the later slot.
pub fn representative(members: &[VerifierQuery<'_>]) -> usize {
    let mut best = 0;
    for (i, m) in members.iter().enumerate() {
        if m.pos >= members[best].pos {
            best = i;
        }
    }
    best
}

/// Approximate grouped execution.
///
/// The representative's index set (routed here unless `shared` is given) is
/// applied to every member after clamping to the member's own bound. Window
/// branches are computed per member exactly as in the exact variant.
/// Returns the outputs, load stats and the shared set.
pub fn group_attend_approx(
    members: &[VerifierQuery<'_>],
    view: &LayerView<'_>,
    shared: Option<&SelectedIndexSet>,
) -> Result<(Vec<MemberOutput>, LoadStats, SelectedIndexSet)> {
    if members.is_empty() {
        return Err(Error::config("empty query group"));
    }
    let rep = &members[representative(members)];
    let rep_set = match shared {
        Some(s) => s.clone(),
        None => route_member(rep, view),
    };
    let clamped: Vec<_> = members
        .iter()
        .map(|m| clamp_inherited_indices(&rep_set, m.frontier(view.cfg), view.cfg.l_sel).set)
        .collect();
    let outs = members
        .iter()
        .zip(&clamped)
        .map(|(q, set)| attend_member(q, &set.indices, None, view))
        .collect();
    let refs: Vec<&SelectedIndexSet> = clamped.iter().collect();
    let mut stats = LoadStats::from_sets(&refs, rep_set.len());
    stats.window_token_loads = window_union(members, view);
    stats.index_constructions = 1;
    Ok((outs, stats, rep_set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsa::build_compressed_cache;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(idx: &[u32]) -> SelectedIndexSet {
        SelectedIndexSet::new(0, 0, idx.to_vec(), vec![])
    }

    #[test]
    fn partition_shapes() {
        let sizes = |g: usize, c: usize| -> Vec<usize> {
            partition_slots(g, c).unwrap().iter().map(|q| q.len()).collect()
        };
        assert_eq!(sizes(7, 2), vec![2, 2, 2, 1]);
        assert_eq!(sizes(3, 1), vec![1, 1, 1]);
        assert_eq!(sizes(5, 8), vec![5]);
        assert!(partition_slots(4, 0).is_err());
    }

    #[test]
    fn ab_schedule() {
        let (a, b) = (set(&[0, 2, 5, 7]), set(&[0, 3, 5, 8]));
        let s = merged_schedule(&[&a, &b]);
        assert_eq!(s.unique_blocks, vec![0, 2, 3, 5, 7, 8]);
        assert_eq!(s.ownership[0], vec![true, true, false, true, true, false]);
        assert_eq!(s.ownership[1], vec![true, false, true, true, false, true]);
        assert_eq!((s.unique_blocks.len(), s.requested(), s.savings()), (6, 8, 2));
        assert_eq!(merged_schedule(&[&a, &a]).savings(), 4);
        // idempotent: merging the union with itself changes nothing
        let u = set(&s.unique_blocks);
        assert_eq!(merged_schedule(&[&u]).unique_blocks, s.unique_blocks);
    }

    #[test]
    fn disjoint_with_shared_forced() {
        let a = set(&[0, 1, 2, 8, 9]);
        let b = set(&[0, 3, 4, 8, 9]);
        let c = set(&[0, 5, 6, 8, 9]);
        assert_eq!(merged_schedule(&[&a, &b, &c]).savings(), 3 * 2);
    }

    struct Fixture {
        cfg: NsaConfig,
        kv: KvCache,
        cc: CompressedCache,
        rows: Vec<DraftRow>,
        qs: Vec<Vec<f32>>,
        pos: Vec<usize>,
        mask: Vec<Vec<bool>>,
        gates: GateVector,
    }

    fn fixture(seed: u64) -> Fixture {
        let cfg = NsaConfig {
            l: 8,
            d: 4,
            l_sel: 8,
            n: 4,
            w: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            n_layers: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kv = KvCache::for_config(&cfg);
        let n = 120;
        for _ in 0..n {
            let k: Vec<f32> = (0..cfg.kv_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..cfg.kv_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            kv.commit_token(&[&k], &[&v]);
        }
        let pe = vec![0.01f32; cfg.l * cfg.d_head];
        let cc = build_compressed_cache(&kv, &cfg, 0, &pe);
        // chain of 3 draft rows plus a sibling branch
        let pos = vec![n, n, n + 1, n + 1];
        let mask = vec![
            vec![true, false, false, false],
            vec![false, true, false, false],
            vec![true, false, true, false],
            vec![false, true, false, true],
        ];
        let rows = pos
            .iter()
            .map(|&p| DraftRow {
                pos: p,
                k: (0..cfg.kv_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                v: (0..cfg.kv_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let qs = (0..4)
            .map(|_| (0..cfg.q_dim()).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        Fixture {
            gates: GateVector::uniform(cfg.n_q_heads, [0.3, 0.5, 0.7]),
            cfg,
            kv,
            cc,
            rows,
            qs,
            pos,
            mask,
        }
    }

    impl Fixture {
        fn view(&self) -> LayerView<'_> {
            LayerView {
                cfg: &self.cfg,
                layer: 0,
                kv: &self.kv,
                cc: &self.cc,
                draft_rows: &self.rows,
            }
        }
        fn queries(&self) -> Vec<VerifierQuery<'_>> {
            (0..4)
                .map(|i| VerifierQuery {
                    slot: i,
                    pos: self.pos[i],
                    q: &self.qs[i],
                    admit: &self.mask[i],
                    gates: &self.gates,
                })
                .collect()
        }
    }

    #[test]
    fn exact_matches_independent() {
        let f = fixture(7);
        let view = f.view();
        let qs = f.queries();
        let sets: Vec<_> = qs.iter().map(|q| route_member(q, &view)).collect();
        let refs: Vec<_> = sets.iter().collect();
        let sched = merged_schedule(&refs);
        let (outs, stats) = group_attend_exact(&qs, &refs, &sched, &view).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let ind = attend_independent(q, &sets[i], &view);
            assert_eq!(outs[i], ind);
        }
        assert_eq!(stats.index_constructions, 4);
        assert_eq!(stats.total_requested_loads - stats.unique_block_loads, stats.dedup_savings);
        assert!(stats.dedup_savings >= 3 * 3);
    }

    #[test]
    fn exact_rejects_mismatched_schedule() {
        let f = fixture(8);
        let view = f.view();
        let qs = f.queries();
        let sets: Vec<_> = qs.iter().map(|q| route_member(q, &view)).collect();
        let refs: Vec<_> = sets.iter().collect();
        let sched = merged_schedule(&refs[..2]);
        assert!(group_attend_exact(&qs, &refs, &sched, &view).is_err());
        let other = set(&[0]);
        let sched = merged_schedule(&[&other, &other, &other, &other]);
        assert!(group_attend_exact(&qs, &refs, &sched, &view).is_err());
    }

    #[test]
    fn approx_window_exact_and_singleton_equal() {
        let f = fixture(9);
        let view = f.view();
        let qs = f.queries();
        let sets: Vec<_> = qs.iter().map(|q| route_member(q, &view)).collect();
        let refs: Vec<_> = sets.iter().collect();
        let sched = merged_schedule(&refs);
        let (ex, _) = group_attend_exact(&qs, &refs, &sched, &view).unwrap();
        let (ap, stats, rep) = group_attend_approx(&qs, &view, None).unwrap();
        assert_eq!(representative(&qs), 3);
        assert_eq!(rep, sets[3]);
        assert_eq!(stats.index_constructions, 1);
        assert_eq!(stats.unique_block_loads, sets[3].len());
        for i in 0..4 {
            assert_eq!(ex[i].win, ap[i].win);
            assert_eq!(ex[i].cmp, ap[i].cmp);
        }
        for q in &qs {
            let one = std::slice::from_ref(q);
            let s = route_member(q, &view);
            let (e, _) = group_attend_exact(one, &[&s], &merged_schedule(&[&s]), &view).unwrap();
            let (a, _, _) = group_attend_approx(one, &view, None).unwrap();
            assert_eq!(e, a);
        }
    }

    #[test]
    fn load_csv_header() {
        let s = LoadStats {
            unique_block_loads: 6,
            total_requested_loads: 8,
            dedup_savings: 2,
            pairwise_overlap: vec![2],
            window_token_loads: 10,
            launches: 2,
            index_constructions: 2,
        };
        let mut buf = Vec::new();
        write_load_csv(&mut buf, &[LoadRecord::new(0, 1, 2, &s)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,layer,group,unique_block_loads"));
        assert!(text.contains("0,1,2,6,8,2,2,10,2,2"));
    }
}

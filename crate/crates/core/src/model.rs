//! Seeded toy transformer used as target and draft model.
//!
//! Pre-norm residual blocks: RMS norm, NSA (or dense) attention, RMS norm, ReLU
//! MLP. Weights come from a ChaCha8 stream, so a spec fully determines a model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::NsaConfig;
use crate::cost::annotate_layer;
use crate::error::{Error, Result};
use crate::fusion::{clamp_inherited_indices, resolve_layer_roles, LayerRole, LayerRolePlan};
use crate::grouped::{
    group_attend_approx, group_attend_exact, merged_schedule, partition_slots, route_member,
    CoarseningMode, LayerView, LoadStats, VerifierQuery,
};
use crate::nsa::{
    dot_wide, BranchPartial, CompressedCache, DraftRow, GateVector, KvCache, SelectedIndexSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Target,
    Draft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftDerivation {
    /// A separately seeded model with dense attention and its own cache.
    Independent { seed: u64 },
    /// The target's first `depth` layers and its NSA attention; shares the
    /// target's cache.
    TruncatedTarget { depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Nsa,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub seed: u64,
    pub n_layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub ffn: usize,
    pub nsa: NsaConfig,
    pub role: ModelRole,
    pub draft: Option<DraftDerivation>,
    /// Multiplier on every residual branch.
    pub residual_scale: f32,
    pub max_context: usize,
}

impl ToyModelSpec {
    /// Default target: 8 layers, hidden 256, vocab 1024.
    pub fn target(seed: u64) -> Self {
        Self {
            seed,
            n_layers: 8,
            hidden: 256,
            vocab: 1024,
            ffn: 512,
            nsa: NsaConfig::toy(8),
            role: ModelRole::Target,
            draft: None,
            residual_scale: 0.5,
            max_context: 16 * 1024 + 256,
        }
    }

    /// Small target for tests: 4 layers, hidden 64, a compact NSA geometry.
    pub fn small(seed: u64) -> Self {
        let nsa = NsaConfig {
            l: 16,
            d: 8,
            l_sel: 32,
            n: 6,
            w: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            n_layers: 4,
        };
        Self {
            seed,
            n_layers: 4,
            hidden: 64,
            vocab: 288,
            ffn: 128,
            nsa,
            role: ModelRole::Target,
            draft: None,
            residual_scale: 0.5,
            max_context: 8 * 1024,
        }
    }

    /// Independent dense-attention draft sized after `target`, 2 layers.
    pub fn independent_draft(target: &ToyModelSpec, seed: u64) -> Self {
        let mut nsa = target.nsa;
        nsa.n_layers = 2;
        Self {
            seed,
            n_layers: 2,
            role: ModelRole::Draft,
            draft: Some(DraftDerivation::Independent { seed }),
            nsa,
            ..target.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nsa.validate()?;
        if self.nsa.n_layers != self.n_layers {
            return Err(Error::config("spec layer count differs from NSA config"));
        }
        if self.hidden == 0 || self.ffn == 0 || self.vocab < 256 {
            return Err(Error::config("hidden and ffn must be positive, vocab at least 256"));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionKind {
        match self.role {
            ModelRole::Target => AttentionKind::Nsa,
            ModelRole::Draft => AttentionKind::Dense,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub wg: Vec<f32>,
    pub pos_emb: Vec<f32>,
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Vec<f32>,
}

/// Sum of `a[i]*b[i]` with eight fixed accumulation lanes.
#[inline]
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `w` is row-major `[out][in]`.
fn matvec(w: &[f32], x: &[f32]) -> Vec<f32> {
    w.chunks_exact(x.len()).map(|row| dot8(row, x)).collect()
}

fn rmsnorm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| (*v as f64 * inv) as f32).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Execution plan of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecPlan {
    pub c: usize,
    pub mode: CoarseningMode,
    pub roles: LayerRolePlan,
}

impl ExecPlan {
    /// Per-query exact execution with every layer routing its own indices.
    pub fn strict(n_layers: usize) -> Self {
        Self {
            c: 1,
            mode: CoarseningMode::Exact,
            roles: resolve_layer_roles(&[], n_layers).expect("empty schedule is valid"),
        }
    }
}

/// Committed K/V rows plus the compressed cache of every layer.
#[derive(Debug, Clone)]
pub struct SeqCache {
    pub kv: KvCache,
    pub cc: Vec<CompressedCache>,
}

impl SeqCache {
    pub fn new(spec: &ToyModelSpec) -> Self {
        Self {
            kv: KvCache::for_config(&spec.nsa),
            cc: (0..spec.n_layers)
                .map(|j| CompressedCache::empty(&spec.nsa, j))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.kv.committed_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nodes forwarded together, with the rows of earlier nodes they may attend to.
#[derive(Debug, Clone, Copy)]
pub struct NodeBatch<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [usize],
    /// `prior[layer]`: uncommitted rows computed by earlier passes.
    pub prior: &'a [Vec<DraftRow>],
    /// One row per node over `prior ++ batch` rows.
    pub admit: &'a [Vec<bool>],
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOutput {
    /// Residual stream after the last layer run, per node.
    pub hidden: Vec<Vec<f32>>,
    /// Residual stream after `capture` layers, if requested.
    pub captured: Vec<Vec<f32>>,
    /// New K/V rows, `[layer][node]`.
    pub rows: Vec<Vec<DraftRow>>,
    /// Load stats, `[layer][group]`.
    pub stats: Vec<Vec<LoadStats>>,
    /// Effective selection indices, `[layer][node]` (NSA only).
    pub index_sets: Vec<Vec<SelectedIndexSet>>,
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (h, cfg) = (spec.hidden, spec.nsa);
        let (qd, kvd) = (cfg.q_dim(), cfg.kv_dim());
        let embed = gaussian(&mut rng, spec.vocab * h, 1.0);
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                wq: gaussian(&mut rng, qd * h, 1.0 / (h as f32).sqrt()),
                wk: gaussian(&mut rng, kvd * h, 1.0 / (h as f32).sqrt()),
                wv: gaussian(&mut rng, kvd * h, 1.0 / (h as f32).sqrt()),
                wo: gaussian(&mut rng, h * qd, 1.0 / (qd as f32).sqrt()),
                wg: gaussian(&mut rng, cfg.n_q_heads * 3 * qd, 1.0 / (qd as f32).sqrt()),
                pos_emb: gaussian(&mut rng, cfg.l * cfg.d_head, 0.1),
                w1: gaussian(&mut rng, spec.ffn * h, 1.0 / (h as f32).sqrt()),
                w2: gaussian(&mut rng, h * spec.ffn, 1.0 / (spec.ffn as f32).sqrt()),
            })
            .collect();
        let lm_head = gaussian(&mut rng, spec.vocab * h, 1.0 / (h as f32).sqrt());
        Ok(Self {
            spec,
            embed,
            layers,
            lm_head,
        })
    }

    pub fn cfg(&self) -> &NsaConfig {
        &self.spec.nsa
    }

    pub fn n_layers(&self) -> usize {
        self.spec.n_layers
    }

    /// Zero the query projection of `layer`; routing there then depends only
    /// on block geometry.
    pub fn zero_query_projection(&mut self, layer: usize) {
        self.layers[layer].wq.iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn embed_token(&self, token: u32) -> Vec<f32> {
        let h = self.spec.hidden;
        let t = token as usize % self.spec.vocab;
        self.embed[t * h..(t + 1) * h].to_vec()
    }

    /// Logits from a residual stream.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        matvec(&self.lm_head, &rmsnorm(hidden))
    }

    /// Commit one token's rows, `rows[layer]`, and extend compressed caches.
    pub fn commit(&self, cache: &mut SeqCache, rows: &[&DraftRow]) {
        let ks: Vec<&[f32]> = rows.iter().map(|r| r.k.as_slice()).collect();
        let vs: Vec<&[f32]> = rows.iter().map(|r| r.v.as_slice()).collect();
        debug_assert!(rows.iter().all(|r| r.pos == cache.len()));
        cache.kv.commit_token(&ks, &vs);
        if self.spec.attention() == AttentionKind::Nsa {
            for (j, cc) in cache.cc.iter_mut().enumerate() {
                cc.extend(&cache.kv, &self.layers[j].pos_emb);
            }
        }
    }

    /// Commit node `i` of a forward output.
    pub fn commit_node(&self, cache: &mut SeqCache, out: &ForwardOutput, i: usize) {
        let rows: Vec<&DraftRow> = out.rows.iter().map(|layer| &layer[i]).collect();
        self.commit(cache, &rows);
    }

    /// Process tokens that are already decided (prompt prefill), in chained
    /// chunks no longer than the window.
    pub fn prefill(&self, cache: &mut SeqCache, tokens: &[u32]) -> Result<()> {
        let chunk = self.spec.nsa.w.max(1);
        let plan = ExecPlan::strict(self.n_layers());
        for part in tokens.chunks(chunk) {
            let start = cache.len();
            let positions: Vec<usize> = (start..start + part.len()).collect();
            let admit: Vec<Vec<bool>> = (0..part.len())
                .map(|i| (0..part.len()).map(|j| j <= i).collect())
                .collect();
            let prior = vec![Vec::new(); self.n_layers()];
            let batch = NodeBatch {
                tokens: part,
                positions: &positions,
                prior: &prior,
                admit: &admit,
            };
            let out = self.forward(cache, &batch, &plan, self.n_layers(), None)?;
            for i in 0..part.len() {
                self.commit_node(cache, &out, i);
            }
        }
        Ok(())
    }

    /// Forward `batch` through the first `n_layers` layers.
    pub fn forward(
        &self,
        cache: &SeqCache,
        batch: &NodeBatch<'_>,
        plan: &ExecPlan,
        n_layers: usize,
        capture: Option<usize>,
    ) -> Result<ForwardOutput> {
        let nb = batch.tokens.len();
        if batch.positions.len() != nb || batch.admit.len() != nb {
            return Err(Error::config("node batch arrays differ in length"));
        }
        if n_layers > self.n_layers() || plan.roles.n_layers() < n_layers {
            return Err(Error::config("layer plan does not cover the forward depth"));
        }
        let cfg = &self.spec.nsa;
        if let Some(&p) = batch.positions.iter().max() {
            if p >= self.spec.max_context {
                return Err(Error::ContextOverflow {
                    needed: p + 1,
                    limit: self.spec.max_context,
                });
            }
            if cfg.routing_frontier(p) > cache.len() {
                return Err(Error::config(format!(
                    "position {p} reaches past the window of {} committed tokens",
                    cache.len()
                )));
            }
        }
        let rs = self.spec.residual_scale;
        let mut x: Vec<Vec<f32>> = batch.tokens.iter().map(|&t| self.embed_token(t)).collect();
        let mut out = ForwardOutput::default();
        let groups = partition_slots(nb, plan.c)?;
        // routed sets kept for reuse layers: per node (exact) or per group (approx)
        let mut node_sets: Vec<Vec<SelectedIndexSet>> = Vec::with_capacity(n_layers);
        let mut group_sets: Vec<Vec<SelectedIndexSet>> = Vec::with_capacity(n_layers);
        for j in 0..n_layers {
            if capture == Some(j) {
                out.captured = x.clone();
            }
            let lw = &self.layers[j];
            let xn: Vec<Vec<f32>> = x.iter().map(|v| rmsnorm(v)).collect();
            let q: Vec<Vec<f32>> = xn.iter().map(|v| matvec(&lw.wq, v)).collect();
            let new_rows: Vec<DraftRow> = xn
                .iter()
                .zip(batch.positions)
                .map(|(v, &pos)| DraftRow {
                    pos,
                    k: matvec(&lw.wk, v),
                    v: matvec(&lw.wv, v),
                })
                .collect();
            let mut intra = batch.prior.get(j).cloned().unwrap_or_default();
            intra.extend(new_rows.iter().cloned());
            let gates: Vec<GateVector> = q
                .iter()
                .map(|qi| GateVector::from_logits(&matvec(&lw.wg, qi), cfg.n_q_heads))
                .collect();
            let queries: Vec<VerifierQuery<'_>> = (0..nb)
                .map(|i| VerifierQuery {
                    slot: i,
                    pos: batch.positions[i],
                    q: &q[i],
                    admit: &batch.admit[i],
                    gates: &gates[i],
                })
                .collect();
            if queries.iter().any(|m| m.admit.len() != intra.len()) {
                return Err(Error::config("tree-mask row width differs from visible draft rows"));
            }
            let attn: Vec<Vec<f32>> = match self.spec.attention() {
                AttentionKind::Dense => queries
                    .iter()
                    .map(|m| dense_attend(m, &cache.kv, j, &intra, cfg))
                    .collect(),
                AttentionKind::Nsa => {
                    let view = LayerView {
                        cfg,
                        layer: j,
                        kv: &cache.kv,
                        cc: &cache.cc[j],
                        draft_rows: &intra,
                    };
                    let (attn, mut stats, nsets, gsets) = self.nsa_layer(
                        &queries,
                        &groups,
                        &view,
                        plan,
                        j,
                        &node_sets,
                        &group_sets,
                    )?;
                    annotate_layer(&mut stats, &plan.roles, j);
                    out.stats.push(stats);
                    out.index_sets.push(nsets.clone());
                    node_sets.push(nsets);
                    group_sets.push(gsets);
                    attn
                }
            };
            for (xi, a) in x.iter_mut().zip(&attn) {
                let o = matvec(&lw.wo, a);
                for (v, d) in xi.iter_mut().zip(&o) {
                    *v += rs * d;
                }
                let h1: Vec<f32> = matvec(&lw.w1, &rmsnorm(xi))
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let h2 = matvec(&lw.w2, &h1);
                for (v, d) in xi.iter_mut().zip(&h2) {
                    *v += rs * d;
                }
            }
            out.rows.push(new_rows);
        }
        if capture == Some(n_layers) {
            out.captured = x.clone();
        }
        out.hidden = x;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn nsa_layer(
        &self,
        queries: &[VerifierQuery<'_>],
        groups: &[crate::grouped::QueryGroup],
        view: &LayerView<'_>,
        plan: &ExecPlan,
        j: usize,
        node_sets: &[Vec<SelectedIndexSet>],
        group_sets: &[Vec<SelectedIndexSet>],
    ) -> Result<(
        Vec<Vec<f32>>,
        Vec<LoadStats>,
        Vec<SelectedIndexSet>,
        Vec<SelectedIndexSet>,
    )> {
        let cfg = view.cfg;
        let nb = queries.len();
        let mut attn = vec![Vec::new(); nb];
        let mut stats = Vec::with_capacity(groups.len());
        let mut gsets = Vec::new();
        let source = match plan.roles.role(j) {
            LayerRole::Refresh => None,
            LayerRole::Reuse { source } => Some(source),
        };
        let nsets: Vec<SelectedIndexSet> = match plan.mode {
            CoarseningMode::Exact => {
                let sets: Vec<SelectedIndexSet> = match source {
                    None => queries.iter().map(|m| route_member(m, view)).collect(),
                    Some(s) => queries
                        .iter()
                        .map(|m| {
                            clamp_inherited_indices(&node_sets[s][m.slot], m.frontier(cfg), cfg.l_sel)
                                .set
                        })
                        .collect(),
                };
                for g in groups {
                    let members = &queries[g.members[0]..=g.members[g.len() - 1]];
                    let refs: Vec<&SelectedIndexSet> = g.members.iter().map(|&i| &sets[i]).collect();
                    let sched = merged_schedule(&refs);
                    let (outs, st) = group_attend_exact(members, &refs, &sched, view)?;
                    for (&i, o) in g.members.iter().zip(outs) {
                        attn[i] = o.out;
                    }
                    stats.push(st);
                }
                sets
            }
            CoarseningMode::Approximate => {
                let mut eff = vec![None; nb];
                for (gi, g) in groups.iter().enumerate() {
                    let members = &queries[g.members[0]..=g.members[g.len() - 1]];
                    let shared = source.map(|s| &group_sets[s][gi]);
                    let (outs, st, rep) = group_attend_approx(members, view, shared)?;
                    for (&i, o) in g.members.iter().zip(outs) {
                        attn[i] = o.out;
                        eff[i] = Some(
                            clamp_inherited_indices(&rep, queries[i].frontier(cfg), cfg.l_sel).set,
                        );
                    }
                    stats.push(st);
                    gsets.push(rep);
                }
                eff.into_iter().map(|s| s.expect("every node is in a group")).collect()
            }
        };
        Ok((attn, stats, nsets, gsets))
    }
}

/// Dense causal attention over every committed row and the admitted draft rows.
fn dense_attend(
    m: &VerifierQuery<'_>,
    kv: &KvCache,
    layer: usize,
    rows: &[DraftRow],
    cfg: &NsaConfig,
) -> Vec<f32> {
    let dh = cfg.d_head;
    let scale = cfg.softmax_scale();
    let mut out = Vec::with_capacity(cfg.q_dim());
    for h in 0..cfg.n_q_heads {
        let qh = &m.q[h * dh..(h + 1) * dh];
        let kvh = cfg.kv_head_of(h);
        let mut p = BranchPartial::empty(dh);
        for t in 0..kv.committed_len().min(m.pos) {
            p.push(dot_wide(qh, kv.key(layer, kvh, t)) * scale, kv.value(layer, kvh, t));
        }
        for (row, _) in rows.iter().zip(m.admit).filter(|(_, a)| **a) {
            if row.pos <= m.pos {
                let k = &row.k[kvh * dh..(kvh + 1) * dh];
                let v = &row.v[kvh * dh..(kvh + 1) * dh];
                p.push(dot_wide(qh, k) * scale, v);
            }
        }
        out.extend(p.normalized().into_iter().map(|x| x as f32));
    }
    out
}

/// Index of the largest logit, ties to the lower token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// The `k` most likely tokens with log-probabilities, best first, ties to the
/// lower id.
pub fn top_k_logprobs(logits: &[f32], k: usize) -> Vec<(u32, f64)> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|t| (t, logits[t as usize] as f64 - lse))
        .collect()
}

//! Autoregressive and speculative decode loops over the toy models.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{account_step, estimate_latency, CostCoeffs, StepAccounting};
use crate::error::{Error, Result};
use crate::fusion::{calibrate_greedy, resolve_layer_roles, CalibrationStep};
use crate::grouped::{LoadRecord, LoadStats};
use crate::model::{argmax, top_k_logprobs, ExecPlan, NodeBatch, SeqCache, ToyModel, ToyModelSpec};
use crate::nsa::DraftRow;
use crate::planner::{
    bucket_of, preselect, refine_step, GuardConfig, PrecisionClass, ProfileTable, RefineEvent,
    RefinerState, StepMetrics, StrategyTuple,
};
use crate::tree::{expand_draft_tree, flatten_tree, greedy_verify, DraftProposer, DraftTree, ROOT};

/// Draft model attached to a target.
#[derive(Debug, Clone)]
pub enum Draft {
    /// The target's first `depth` layers.
    Truncated { depth: usize },
    Independent(Box<ToyModel>),
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub target: ToyModel,
    pub draft: Draft,
}

impl Engine {
    pub fn new(target: ToyModel, draft: Draft) -> Result<Self> {
        match &draft {
            Draft::Truncated { depth } if *depth == 0 || *depth > target.n_layers() => {
                return Err(Error::config(format!(
                    "truncated draft depth {depth} must be in 1..={}",
                    target.n_layers()
                )));
            }
            Draft::Independent(d) if d.spec.vocab != target.spec.vocab => {
                return Err(Error::config("draft and target vocabularies differ"));
            }
            _ => {}
        }
        Ok(Self { target, draft })
    }

    /// Target from `spec` with a truncated draft of `depth` layers.
    pub fn truncated(spec: ToyModelSpec, depth: usize) -> Result<Self> {
        Self::new(ToyModel::new(spec)?, Draft::Truncated { depth })
    }
}

pub fn decode_autoregressive(model: &ToyModel, prompt: &[u32], steps: usize) -> Result<Vec<u32>> {
    let Some((&last, head)) = prompt.split_last() else {
        return Err(Error::config("prompt must contain at least one token"));
    };
    if prompt.len() + steps > model.spec.max_context {
        return Err(Error::ContextOverflow {
            needed: prompt.len() + steps,
            limit: model.spec.max_context,
        });
    }
    let mut cache = SeqCache::new(&model.spec);
    model.prefill(&mut cache, head)?;
    let plan = ExecPlan::strict(model.n_layers());
    let prior = vec![Vec::new(); model.n_layers()];
    let admit = vec![vec![true]];
    let mut pending = last;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let pos = [cache.len()];
        let batch = NodeBatch {
            tokens: &[pending],
            positions: &pos,
            prior: &prior,
            admit: &admit,
        };
        let fwd = model.forward(&cache, &batch, &plan, model.n_layers(), None)?;
        model.commit_node(&mut cache, &fwd, 0);
        pending = argmax(&model.logits(&fwd.hidden[0]));
        out.push(pending);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeBase {
    Wall,
    Modeled(CostCoeffs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuardMode {
    Off,
    /// Track guard state every step but never act on it.
    Bookkeeping,
    Active,
}

#[derive(Debug, Clone)]
pub struct SpecOptions<'a> {
    pub steps: usize,
    pub class: PrecisionClass,
    /// Explicit strategy; when absent the profile's rank-1 entry is used.
    pub strategy: Option<StrategyTuple>,
    pub profile: Option<&'a ProfileTable>,
    pub guard: GuardMode,
    pub guard_cfg: GuardConfig,
    pub tree_budget: Option<usize>,
    pub time_base: TimeBase,
    /// Also run a Strict verification of every batch and report the hidden-state deviation.
    pub compare_strict: bool,
}

impl SpecOptions<'_> {
    pub fn explicit(steps: usize, class: PrecisionClass, strategy: StrategyTuple) -> Self {
        Self {
            steps,
            class,
            strategy: Some(strategy),
            profile: None,
            guard: GuardMode::Off,
            guard_cfg: GuardConfig::default(),
            tree_budget: None,
            time_base: TimeBase::Wall,
            compare_strict: false,
        }
    }
}

/// One verification step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub context_len: usize,
    pub bucket: usize,
    pub strategy: String,
    pub gamma: usize,
    pub accepted: usize,
    pub wall_secs: f64,
    pub modeled: f64,
    /// Latency in the run's time base.
    pub latency: f64,
    pub accounting: StepAccounting,
    pub hidden_deviation: Option<f64>,
}

impl StepRecord {
    pub fn metrics(&self) -> StepMetrics {
        StepMetrics {
            accepted: self.accepted,
            latency: self.latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecOutput {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    pub load_trail: Vec<LoadRecord>,
    pub events: Vec<RefineEvent>,
    pub initial_strategy: StrategyTuple,
}

impl SpecOutput {
    pub fn total_accepted(&self) -> usize {
        self.steps.iter().map(|s| s.accepted).sum()
    }

    pub fn total_latency(&self) -> f64 {
        self.steps.iter().map(|s| s.latency).sum()
    }

    /// Accepted tokens per unit of latency.
    pub fn throughput(&self) -> f64 {
        let t = self.total_latency();
        if t > 0.0 {
            self.total_accepted() as f64 / t
        } else {
            0.0
        }
    }

    pub fn mean_accepted(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.total_accepted() as f64 / self.steps.len() as f64
        }
    }
}

fn exec_plan(s: &StrategyTuple, n_layers: usize) -> Result<ExecPlan> {
    Ok(ExecPlan {
        c: s.c,
        mode: s.mode,
        roles: resolve_layer_roles(&s.schedule, n_layers)?,
    })
}

/// Draft-side state of one step: forwards frontier nodes through the draft and
/// hands back top-k continuations.
struct Proposer<'a> {
    model: &'a ToyModel,
    cache: &'a SeqCache,
    layers: usize,
    plan: ExecPlan,
    base_pos: usize,
    root_hidden: Vec<f32>,
    /// Node ids whose rows are in `rows`, in row order.
    row_nodes: Vec<usize>,
    rows: Vec<Vec<DraftRow>>,
}

impl DraftProposer for Proposer<'_> {
    fn propose(
        &mut self,
        tree: &DraftTree,
        frontier: &[usize],
        k: usize,
    ) -> Result<Vec<Vec<(u32, f64)>>> {
        if frontier == [ROOT] {
            return Ok(vec![top_k_logprobs(&self.model.logits(&self.root_hidden), k)]);
        }
        let tokens: Vec<u32> = frontier.iter().map(|&n| tree.node(n).token).collect();
        let positions: Vec<usize> = frontier
            .iter()
            .map(|&n| self.base_pos + tree.node(n).depth)
            .collect();
        let cols: Vec<usize> = self.row_nodes.iter().chain(frontier).copied().collect();
        let admit: Vec<Vec<bool>> = frontier
            .iter()
            .map(|&n| cols.iter().map(|&c| tree.is_ancestor_or_self(c, n)).collect())
            .collect();
        let batch = NodeBatch {
            tokens: &tokens,
            positions: &positions,
            prior: &self.rows,
            admit: &admit,
        };
        let out = self.model.forward(self.cache, &batch, &self.plan, self.layers, None)?;
        for (j, new) in out.rows.into_iter().enumerate() {
            self.rows[j].extend(new);
        }
        self.row_nodes.extend_from_slice(frontier);
        Ok(out
            .hidden
            .iter()
            .map(|h| top_k_logprobs(&self.model.logits(h), k))
            .collect())
    }
}

fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

pub fn decode_speculative(engine: &Engine, prompt: &[u32], opts: &SpecOptions<'_>) -> Result<SpecOutput> {
    let target = &engine.target;
    let cfg = target.cfg();
    let n_layers = target.n_layers();
    let Some((&last, head)) = prompt.split_last() else {
        return Err(Error::config("prompt must contain at least one token"));
    };
    let initial_bucket = bucket_of(prompt.len());
    let (mut strategy, expected_a) = match (&opts.strategy, opts.profile) {
        (Some(s), _) => {
            let ea = opts
                .profile
                .and_then(|t| t.entry(initial_bucket, opts.class).ok())
                .and_then(|e| e.iter().find(|c| &c.strategy == s).map(|c| c.exp_a))
                .unwrap_or(0.0);
            (s.clone(), ea)
        }
        (None, Some(t)) => preselect(t, initial_bucket, opts.class)?,
        (None, None) => {
            return Err(Error::config("either a strategy or a profile is required"));
        }
    };
    opts.class.check(&strategy, cfg)?;
    if opts.guard == GuardMode::Active && opts.profile.is_none() {
        return Err(Error::config("refinement requires a profile"));
    }
    opts.guard_cfg.validate()?;
    let coeffs = match opts.time_base {
        TimeBase::Modeled(c) => c,
        TimeBase::Wall => opts.profile.and_then(|p| p.cost_coeffs).unwrap_or_default(),
    };
    let initial_strategy = strategy.clone();
    let mut refiner = (opts.guard != GuardMode::Off)
        .then(|| RefinerState::new(opts.guard_cfg, strategy.clone(), expected_a));
    let mut plan = exec_plan(&strategy, n_layers)?;

    let mut cache = SeqCache::new(&target.spec);
    target.prefill(&mut cache, head)?;
    let mut draft_cache = match &engine.draft {
        Draft::Independent(d) => {
            let mut c = SeqCache::new(&d.spec);
            d.prefill(&mut c, head)?;
            Some(c)
        }
        Draft::Truncated { .. } => None,
    };
    let strict = ExecPlan::strict(n_layers);
    let no_prior = vec![Vec::new(); n_layers];
    let mut pending = last;
    let mut tokens = Vec::with_capacity(opts.steps + strategy.d + 1);
    let mut steps = Vec::new();
    let mut load_trail = Vec::new();

    while tokens.len() < opts.steps {
        let step_no = steps.len() + 1;
        let needed = cache.len() + strategy.d + 2;
        if needed > target.spec.max_context {
            return Err(Error::ContextOverflow {
                needed,
                limit: target.spec.max_context,
            });
        }
        // root pass: the pending token through the target, then committed
        let root_pos = [cache.len()];
        let root_batch = NodeBatch {
            tokens: &[pending],
            positions: &root_pos,
            prior: &no_prior,
            admit: &[vec![true]],
        };
        let root_plan = ExecPlan { c: 1, ..plan.clone() };
        let capture = match engine.draft {
            Draft::Truncated { depth } => Some(depth),
            Draft::Independent(_) => None,
        };
        let root = target.forward(&cache, &root_batch, &root_plan, n_layers, capture)?;
        target.commit_node(&mut cache, &root, 0);
        let root_argmax = argmax(&target.logits(&root.hidden[0]));

        // draft tree
        let base_pos = cache.len() - 1;
        let tree = match (&engine.draft, draft_cache.as_mut()) {
            (Draft::Truncated { depth }, _) => {
                let mut p = Proposer {
                    model: target,
                    cache: &cache,
                    layers: *depth,
                    plan: ExecPlan::strict(n_layers),
                    base_pos,
                    root_hidden: root.captured[0].clone(),
                    row_nodes: Vec::new(),
                    rows: vec![Vec::new(); *depth],
                };
                expand_draft_tree(&mut p, pending, strategy.d, strategy.k, opts.tree_budget)?
            }
            (Draft::Independent(d), Some(dc)) => {
                let dl = d.n_layers();
                let pos = [dc.len()];
                let b = NodeBatch {
                    tokens: &[pending],
                    positions: &pos,
                    prior: &vec![Vec::new(); dl],
                    admit: &[vec![true]],
                };
                let dr = d.forward(dc, &b, &ExecPlan::strict(dl), dl, None)?;
                d.commit_node(dc, &dr, 0);
                let mut p = Proposer {
                    model: d,
                    cache: &*dc,
                    layers: dl,
                    plan: ExecPlan::strict(dl),
                    base_pos,
                    root_hidden: dr.hidden[0].clone(),
                    row_nodes: Vec::new(),
                    rows: vec![Vec::new(); dl],
                };
                expand_draft_tree(&mut p, pending, strategy.d, strategy.k, opts.tree_budget)?
            }
            (Draft::Independent(_), None) => unreachable!("independent draft has a cache"),
        };

        // verification pass
        let batch = flatten_tree(&tree, strategy.traversal, cache.len());
        let vtokens: Vec<u32> = batch.order.iter().map(|&n| tree.node(n).token).collect();
        let vb = NodeBatch {
            tokens: &vtokens,
            positions: &batch.positions,
            prior: &no_prior,
            admit: &batch.mask,
        };
        let t0 = Instant::now();
        let ver = target.forward(&cache, &vb, &plan, n_layers, None)?;
        let wall = t0.elapsed().as_secs_f64();
        let hidden_deviation = if opts.compare_strict {
            let s = target.forward(&cache, &vb, &strict, n_layers, None)?;
            let devs: Vec<f64> = ver.hidden.iter().zip(&s.hidden).map(|(a, b)| relative_l2(a, b)).collect();
            Some(devs.iter().sum::<f64>() / devs.len().max(1) as f64)
        } else {
            None
        };

        let mut target_argmax = vec![0u32; tree.nodes().len()];
        target_argmax[ROOT] = root_argmax;
        for (slot, &node) in batch.order.iter().enumerate() {
            target_argmax[node] = argmax(&target.logits(&ver.hidden[slot]));
        }
        let verdict = greedy_verify(&tree, &target_argmax);
        let slot_of = |node: usize| batch.order.iter().position(|&n| n == node).expect("node in batch");
        for &node in &verdict.accepted_nodes {
            target.commit_node(&mut cache, &ver, slot_of(node));
        }
        if let (Draft::Independent(d), Some(dc)) = (&engine.draft, draft_cache.as_mut()) {
            d.prefill(dc, &verdict.accepted_tokens)?;
        }

        let committed = verdict.committed();
        let room = opts.steps - tokens.len();
        let accepted = committed.len().min(room);
        tokens.extend_from_slice(&committed[..accepted]);
        pending = verdict.bonus;

        let acc = account_step(&ver.stats, &plan.roles)?;
        let modeled = estimate_latency(&acc, &coeffs);
        let latency = match opts.time_base {
            TimeBase::Wall => wall,
            TimeBase::Modeled(_) => modeled,
        };
        for (j, groups) in ver.stats.iter().enumerate() {
            for (g, s) in groups.iter().enumerate() {
                load_trail.push(LoadRecord::new(step_no, j, g, s));
            }
        }
        let record = StepRecord {
            step: step_no,
            context_len: cache.len(),
            bucket: bucket_of(cache.len()),
            strategy: strategy.label(),
            gamma: batch.gamma,
            accepted,
            wall_secs: wall,
            modeled,
            latency,
            accounting: acc,
            hidden_deviation,
        };
        if let Some(state) = refiner.as_mut() {
            let table = opts.profile;
            let switched = match table {
                Some(t) => refine_step(state, &record.metrics(), t, record.bucket, opts.class, step_no)?,
                None => {
                    // bookkeeping without a table: only the smoothed statistics move
                    let a = record.accepted as f64;
                    state.ema = Some(state.ema.map_or(a, |e| state.cfg.alpha * a + (1.0 - state.cfg.alpha) * e));
                    None
                }
            };
            if opts.guard == GuardMode::Active {
                if let Some(next) = switched {
                    opts.class.check(&next, cfg)?;
                    strategy = next;
                    plan = exec_plan(&strategy, n_layers)?;
                }
            }
        }
        steps.push(record);
    }
    let events = match (&refiner, opts.guard) {
        (Some(r), GuardMode::Active) => r.events.clone(),
        _ => Vec::new(),
    };
    Ok(SpecOutput {
        tokens,
        steps,
        load_trail,
        events,
        initial_strategy,
    })
}

/// Mean relative L2 distance between final hidden states of `schedule` and
/// all-refresh, teacher-forced over the last window of each prompt.
pub fn schedule_deviation(model: &ToyModel, prompts: &[Vec<u32>], schedule: &[usize]) -> Result<f64> {
    let n_layers = model.n_layers();
    let plan = ExecPlan {
        roles: resolve_layer_roles(schedule, n_layers)?,
        ..ExecPlan::strict(n_layers)
    };
    let strict = ExecPlan::strict(n_layers);
    let (mut total, mut count) = (0.0, 0usize);
    for p in prompts {
        if p.len() < 2 {
            return Err(Error::config("calibration prompts need at least two tokens"));
        }
        let eval = model.cfg().w.min(p.len() - 1);
        let split = p.len() - eval;
        let mut cache = SeqCache::new(&model.spec);
        model.prefill(&mut cache, &p[..split])?;
        let toks = &p[split..];
        let positions: Vec<usize> = (split..p.len()).collect();
        let admit: Vec<Vec<bool>> = (0..eval).map(|i| (0..eval).map(|j| j <= i).collect()).collect();
        let prior = vec![Vec::new(); n_layers];
        let batch = NodeBatch {
            tokens: toks,
            positions: &positions,
            prior: &prior,
            admit: &admit,
        };
        let a = model.forward(&cache, &batch, &plan, n_layers, None)?;
        let b = model.forward(&cache, &batch, &strict, n_layers, None)?;
        for (x, y) in a.hidden.iter().zip(&b.hidden) {
            total += relative_l2(x, y);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Greedy reuse-schedule calibration against all-refresh on `prompts`.
pub fn calibrate_reuse_schedule(
    prompts: &[Vec<u32>],
    model: &ToyModel,
    tolerance: f64,
) -> Result<(Vec<usize>, Vec<CalibrationStep>)> {
    if prompts.is_empty() {
        return Err(Error::config("calibration needs at least one prompt"));
    }
    calibrate_greedy(model.n_layers(), tolerance, |s| schedule_deviation(model, prompts, s))
}

/// Verification-pass samples for fitting cost coefficients: for each prompt
/// and strategy, the accounting and wall time of every step.
pub fn collect_cost_samples(
    engine: &Engine,
    prompts: &[Vec<u32>],
    strategies: &[(PrecisionClass, StrategyTuple)],
    steps: usize,
    tree_budget: Option<usize>,
) -> Result<Vec<(StepAccounting, f64)>> {
    let mut out = Vec::new();
    for p in prompts {
        for (class, s) in strategies {
            let mut opts = SpecOptions::explicit(steps, *class, s.clone());
            opts.tree_budget = tree_budget;
            let r = decode_speculative(engine, p, &opts)?;
            out.extend(r.steps.iter().map(|st| (st.accounting, st.wall_secs)));
        }
    }
    Ok(out)
}

/// Sum a step's group stats into one record per layer.
pub fn layer_totals(stats: &[Vec<LoadStats>]) -> Vec<LoadStats> {
    stats
        .iter()
        .map(|groups| {
            let mut t = LoadStats::default();
            for g in groups {
                t.add(g);
            }
            t
        })
        .collect()
}

//! Benchmark arms (Base, Static-best, Best+R, explicit), offline profiling
//! against the engine, and CSV reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostCoeffs;
use crate::engine::{decode_speculative, Engine, GuardMode, SpecOptions, SpecOutput, TimeBase};
use crate::error::{Error, Result};
use crate::grouped::CoarseningMode;
use crate::planner::{
    profile_offline, GuardConfig, PrecisionClass, ProfileTable, StepMetrics, StrategyTuple,
};
use crate::tree::Traversal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmKind {
    /// Fixed default strategy, no planner.
    Base,
    /// Rank-1 profiled strategy, no refinement.
    StaticBest,
    /// Rank-1 profiled strategy with runtime refinement.
    #[serde(rename = "best+r")]
    BestR,
    /// A strategy given in the arm itself.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub kind: ArmKind,
    pub class: PrecisionClass,
    /// `D,k,T,C,M` for explicit arms.
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub schedule: Option<String>,
    #[serde(default)]
    pub guard: Option<GuardConfig>,
    /// Track guard state without acting (only meaningful for non-refining arms).
    #[serde(default)]
    pub bookkeeping: bool,
}

impl ArmSpec {
    pub fn new(name: &str, kind: ArmKind, class: PrecisionClass) -> Self {
        Self {
            name: name.to_string(),
            kind,
            class,
            strategy: None,
            schedule: None,
            guard: None,
            bookkeeping: false,
        }
    }
}

/// The unplanned default: a wide tree verified one query at a time.
pub fn base_strategy(class: PrecisionClass, n_layers: usize) -> StrategyTuple {
    let approx = matches!(class, PrecisionClass::ApproxOnly | PrecisionClass::ApproxReuse);
    let reuse = matches!(class, PrecisionClass::ReuseOnly | PrecisionClass::ApproxReuse);
    StrategyTuple {
        d: 6,
        k: 4,
        traversal: Traversal::Bfs,
        c: if approx { 2 } else { 1 },
        mode: if approx { CoarseningMode::Approximate } else { CoarseningMode::Exact },
        schedule: if reuse { (1..n_layers).step_by(2).collect() } else { Vec::new() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub steps: usize,
    pub tree_budget: Option<usize>,
    pub time_base: TimeBase,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            tree_budget: Some(128),
            time_base: TimeBase::Modeled(CostCoeffs::default()),
        }
    }
}

/// Per-step log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub arm: String,
    pub prompt: usize,
    pub step: usize,
    pub strategy: String,
    pub gamma: usize,
    pub accepted: usize,
    pub latency: f64,
    pub modeled: f64,
    pub wall_secs: f64,
    pub unique_loads: usize,
    pub index_constructions: usize,
    pub launches: usize,
    pub window_tokens: usize,
}

/// Per-arm summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub kind: ArmKind,
    pub class: PrecisionClass,
    pub prompts: usize,
    pub steps: usize,
    pub total_accepted: usize,
    pub total_latency: f64,
    /// Sum of accepted tokens over sum of latency, all prompts pooled.
    pub throughput: f64,
    /// Mean of per-prompt throughputs.
    pub mean_prompt_throughput: f64,
    pub mean_accepted: f64,
    pub unique_loads: usize,
    pub requested_loads: usize,
    pub index_constructions: usize,
    pub launches: usize,
    pub window_tokens: usize,
    pub refinement_events: usize,
    pub initial_strategy: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub arms: Vec<ArmRow>,
    pub steps: Vec<StepRow>,
    pub events: Vec<(String, usize, crate::planner::RefineEvent)>,
}

/// Run one arm on one prompt.
pub fn run_arm(
    engine: &Engine,
    prompt: &[u32],
    arm: &ArmSpec,
    run: &RunConfig,
    profile: Option<&ProfileTable>,
) -> Result<SpecOutput> {
    let n_layers = engine.target.n_layers();
    let strategy = match arm.kind {
        ArmKind::Base => Some(base_strategy(arm.class, n_layers)),
        ArmKind::Explicit => {
            let s = arm
                .strategy
                .as_deref()
                .ok_or_else(|| Error::config(format!("arm '{}' needs a strategy", arm.name)))?;
            Some(StrategyTuple::parse_with_schedule(
                s,
                arm.schedule.as_deref().unwrap_or("none"),
                n_layers,
            )?)
        }
        ArmKind::StaticBest | ArmKind::BestR => {
            if profile.is_none() {
                return Err(Error::config(format!("arm '{}' requires a profile", arm.name)));
            }
            None
        }
    };
    let guard = match arm.kind {
        ArmKind::BestR => GuardMode::Active,
        _ if arm.bookkeeping => GuardMode::Bookkeeping,
        _ => GuardMode::Off,
    };
    let opts = SpecOptions {
        steps: run.steps,
        class: arm.class,
        strategy,
        profile,
        guard,
        guard_cfg: arm.guard.unwrap_or_default(),
        tree_budget: run.tree_budget,
        time_base: run.time_base,
        compare_strict: false,
    };
    decode_speculative(engine, prompt, &opts)
}

pub fn run_benchmark(
    engine: &Engine,
    prompts: &[Vec<u32>],
    arms: &[ArmSpec],
    run: &RunConfig,
    profile: Option<&ProfileTable>,
) -> Result<BenchReport> {
    if prompts.is_empty() {
        return Err(Error::config("benchmark needs at least one prompt"));
    }
    let mut report = BenchReport::default();
    for arm in arms {
        let mut row = ArmRow {
            arm: arm.name.clone(),
            kind: arm.kind,
            class: arm.class,
            prompts: prompts.len(),
            steps: 0,
            total_accepted: 0,
            total_latency: 0.0,
            throughput: 0.0,
            mean_prompt_throughput: 0.0,
            mean_accepted: 0.0,
            unique_loads: 0,
            requested_loads: 0,
            index_constructions: 0,
            launches: 0,
            window_tokens: 0,
            refinement_events: 0,
            initial_strategy: String::new(),
        };
        for (pi, p) in prompts.iter().enumerate() {
            let out = run_arm(engine, p, arm, run, profile)?;
            if pi == 0 {
                row.initial_strategy = out.initial_strategy.label();
            }
            row.mean_prompt_throughput += out.throughput() / prompts.len() as f64;
            row.refinement_events += out.events.iter().filter(|e| e.kind == "switch").count();
            for e in &out.events {
                report.events.push((arm.name.clone(), pi, e.clone()));
            }
            for s in &out.steps {
                row.steps += 1;
                row.total_accepted += s.accepted;
                row.total_latency += s.latency;
                row.unique_loads += s.accounting.unique_loads;
                row.requested_loads += s.accounting.requested_loads;
                row.index_constructions += s.accounting.index_constructions;
                row.launches += s.accounting.launches;
                row.window_tokens += s.accounting.window_tokens;
                report.steps.push(StepRow {
                    arm: arm.name.clone(),
                    prompt: pi,
                    step: s.step,
                    strategy: s.strategy.clone(),
                    gamma: s.gamma,
                    accepted: s.accepted,
                    latency: s.latency,
                    modeled: s.modeled,
                    wall_secs: s.wall_secs,
                    unique_loads: s.accounting.unique_loads,
                    index_constructions: s.accounting.index_constructions,
                    launches: s.accounting.launches,
                    window_tokens: s.accounting.window_tokens,
                });
            }
        }
        row.throughput = if row.total_latency > 0.0 {
            row.total_accepted as f64 / row.total_latency
        } else {
            0.0
        };
        row.mean_accepted = row.total_accepted as f64 / row.steps.max(1) as f64;
        report.arms.push(row);
    }
    Ok(report)
}

pub fn write_csv<T: Serialize, W: std::io::Write>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for r in rd.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

/// Path of the per-step log written next to an arm report.
pub fn steps_path(report: &Path) -> std::path::PathBuf {
    report.with_extension("steps.csv")
}

impl BenchReport {
    /// Write the arm summary to `path` and the raw step log beside it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_csv(std::fs::File::create(path)?, &self.arms)?;
        write_csv(std::fs::File::create(steps_path(path))?, &self.steps)?;
        Ok(())
    }
}

/// Throughput recomputed from the step log, per arm.
pub fn recompute_throughput(steps: &[StepRow], arm: &str) -> f64 {
    let (a, t) = steps
        .iter()
        .filter(|s| s.arm == arm)
        .fold((0usize, 0.0f64), |(a, t), s| (a + s.accepted, t + s.latency));
    if t > 0.0 {
        a as f64 / t
    } else {
        0.0
    }
}

/// Plain-text summary of arm rows with gains relative to the first Base arm.
pub fn summarize(rows: &[ArmRow]) -> String {
    let base = rows.iter().find(|r| r.kind == ArmKind::Base).map(|r| r.throughput);
    let mut s = format!(
        "{:<20} {:<13} {:>12} {:>8} {:>8} {:>8}\n",
        "arm", "class", "throughput", "mean_A", "events", "gain"
    );
    for r in rows {
        let gain = base
            .filter(|b| *b > 0.0)
            .map_or("-".to_string(), |b| format!("{:+.1}%", (r.throughput / b - 1.0) * 100.0));
        s.push_str(&format!(
            "{:<20} {:<13} {:>12.4} {:>8.3} {:>8} {:>8}\n",
            r.arm,
            r.class.name(),
            r.throughput,
            r.mean_accepted,
            r.refinement_events,
            gain
        ));
    }
    s
}

/// Profile strategies with the engine: every candidate runs on every prompt
/// of its bucket and the step metrics are pooled.
pub fn profile_with_engine<C>(
    engine: &Engine,
    bucket_prompts: &[(usize, Vec<Vec<u32>>)],
    classes: &[PrecisionClass],
    candidates: C,
    run: &RunConfig,
) -> Result<ProfileTable>
where
    C: Fn(usize, PrecisionClass) -> Vec<StrategyTuple>,
{
    let buckets: Vec<usize> = bucket_prompts.iter().map(|(b, _)| *b).collect();
    let mut table = profile_offline(&buckets, classes, candidates, |b, class, s| {
        let prompts = &bucket_prompts
            .iter()
            .find(|(bb, _)| *bb == b)
            .expect("bucket listed")
            .1;
        if prompts.is_empty() {
            return Err(Error::config(format!("no calibration prompt for bucket {b}")));
        }
        let mut steps: Vec<StepMetrics> = Vec::new();
        for p in prompts {
            let mut opts = SpecOptions::explicit(run.steps, class, s.clone());
            opts.tree_budget = run.tree_budget;
            opts.time_base = run.time_base;
            let out = decode_speculative(engine, p, &opts)?;
            steps.extend(out.steps.iter().map(|st| st.metrics()));
        }
        Ok(steps)
    })?;
    if let TimeBase::Modeled(c) = run.time_base {
        table.cost_coeffs = Some(c);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModelSpec;
    use crate::prompts::synthetic_prompt;

    fn engine() -> Engine {
        Engine::truncated(ToyModelSpec::small(5), 2).unwrap()
    }

    #[test]
    fn single_arm_passes_metrics_through() {
        let e = engine();
        let p = vec![synthetic_prompt(1, 200)];
        let mut arm = ArmSpec::new("x", ArmKind::Explicit, PrecisionClass::Strict);
        arm.strategy = Some("3,2,BFS,2,exact".into());
        let run = RunConfig { steps: 20, ..RunConfig::default() };
        let rep = run_benchmark(&e, &p, &[arm.clone()], &run, None).unwrap();
        let direct = run_arm(&e, &p[0], &arm, &run, None).unwrap();
        assert_eq!(rep.arms[0].total_accepted, direct.total_accepted());
        assert!((rep.arms[0].throughput - direct.throughput()).abs() < 1e-12);
        assert!((recompute_throughput(&rep.steps, "x") - rep.arms[0].throughput).abs() < 1e-12);
        assert_eq!(rep.arms[0].total_accepted, 20);
    }

    #[test]
    fn profile_arms_need_profile() {
        let e = engine();
        let arm = ArmSpec::new("s", ArmKind::StaticBest, PrecisionClass::Strict);
        let r = run_benchmark(&e, &[synthetic_prompt(2, 100)], &[arm], &RunConfig::default(), None);
        assert!(r.is_err());
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let e = engine();
        let p = vec![synthetic_prompt(3, 150)];
        let arms = vec![ArmSpec::new("base", ArmKind::Base, PrecisionClass::Strict)];
        let run = RunConfig { steps: 8, ..RunConfig::default() };
        let rep = run_benchmark(&e, &p, &arms, &run, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        rep.write(&path).unwrap();
        let rows: Vec<ArmRow> = read_csv(&path).unwrap();
        assert_eq!(rows, rep.arms);
        let steps: Vec<StepRow> = read_csv(&steps_path(&path)).unwrap();
        assert_eq!(steps.len(), rep.steps.len());
        assert!(summarize(&rows).contains("+0.0%"));
    }
}

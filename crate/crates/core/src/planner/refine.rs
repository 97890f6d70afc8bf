use serde::{Deserialize, Serialize};

use super::{PrecisionClass, ProfileTable, StepMetrics, StrategyTuple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    pub alpha: f64,
    pub rho: f64,
    pub warmup: usize,
    pub hysteresis: usize,
    pub max_transitions: usize,
    /// Steps (1-based) during which the guard may act.
    pub early_window: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.40,
            rho: 0.85,
            warmup: 8,
            hysteresis: 5,
            max_transitions: 2,
            early_window: 32,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho must lie in (0, 1)"));
        }
        if self.hysteresis == 0 {
            return Err(Error::config("hysteresis must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explored {
    pub strategy: StrategyTuple,
    pub sum_a: f64,
    pub sum_t: f64,
}

impl Explored {
    pub fn throughput(&self) -> f64 {
        if self.sum_t > 0.0 {
            self.sum_a / self.sum_t
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineEvent {
    pub step: usize,
    pub from: String,
    pub to: String,
    /// `switch` to the next candidate, or `settle` on the best explored one.
    pub kind: String,
}

/// Per-request guard state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerState {
    pub cfg: GuardConfig,
    pub ema: Option<f64>,
    pub below_count: usize,
    pub transitions: usize,
    pub active: StrategyTuple,
    /// Profiled `E[A]` of the active strategy.
    pub expected_a: f64,
    pub explored: Vec<Explored>,
    pub settled: bool,
    pub events: Vec<RefineEvent>,
}

impl RefinerState {
    pub fn new(cfg: GuardConfig, initial: StrategyTuple, expected_a: f64) -> Self {
        Self {
            cfg,
            ema: None,
            below_count: 0,
            transitions: 0,
            explored: vec![Explored {
                strategy: initial.clone(),
                sum_a: 0.0,
                sum_t: 0.0,
            }],
            active: initial,
            expected_a,
            settled: false,
            events: Vec::new(),
        }
    }

    /// Strategy switches made by the guard (the final settle is not counted).
    pub fn refinement_events(&self) -> usize {
        self.transitions
    }

    fn record(&mut self, m: &StepMetrics) {
        let e = self
            .explored
            .iter_mut()
            .find(|e| e.strategy == self.active)
            .expect("active strategy is always explored");
        e.sum_a += m.accepted as f64;
        e.sum_t += m.latency;
    }

    fn switch_to(&mut self, step: usize, to: StrategyTuple, expected_a: f64, kind: &str) {
        self.events.push(RefineEvent {
            step,
            from: self.active.label(),
            to: to.label(),
            kind: kind.to_string(),
        });
        if !self.explored.iter().any(|e| e.strategy == to) {
            self.explored.push(Explored {
                strategy: to.clone(),
                sum_a: 0.0,
                sum_t: 0.0,
            });
        }
        self.active = to;
        self.expected_a = expected_a;
        self.ema = None;
        self.below_count = 0;
    }
}

/// Feed one step's metrics to the guard. `step` is 1-based over the request.
/// Returns the new strategy when the guard changes it.
pub fn refine_step(
    state: &mut RefinerState,
    metrics: &StepMetrics,
    table: &ProfileTable,
    bucket: usize,
    class: PrecisionClass,
    step: usize,
) -> Result<Option<StrategyTuple>> {
    state.record(metrics);
    if state.settled || step > state.cfg.early_window {
        return Ok(None);
    }
    let a = metrics.accepted as f64;
    let ema = match state.ema {
        None => a,
        Some(prev) => state.cfg.alpha * a + (1.0 - state.cfg.alpha) * prev,
    };
    state.ema = Some(ema);
    if step > state.cfg.warmup {
        if ema < state.cfg.rho * state.expected_a {
            state.below_count += 1;
        } else {
            state.below_count = 0;
        }
    }
    if state.below_count < state.cfg.hysteresis {
        return Ok(None);
    }
    if state.transitions < state.cfg.max_transitions {
        let next = table
            .entry(bucket, class)?
            .iter()
            .find(|c| !state.explored.iter().any(|e| e.strategy == c.strategy))
            .cloned();
        if let Some(c) = next {
            state.transitions += 1;
            state.switch_to(step, c.strategy.clone(), c.exp_a, "switch");
            return Ok(Some(c.strategy));
        }
    }
    // out of transitions or candidates: keep the best configuration seen
    state.settled = true;
    let best = state
        .explored
        .iter()
        .max_by(|a, b| a.throughput().total_cmp(&b.throughput()))
        .map(|e| e.strategy.clone())
        .expect("at least one explored strategy");
    if best != state.active {
        let exp = table
            .entry(bucket, class)?
            .iter()
            .find(|c| c.strategy == best)
            .map_or(state.expected_a, |c| c.exp_a);
        state.switch_to(step, best.clone(), exp, "settle");
        return Ok(Some(best));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::super::{default_candidates, Candidate};
    use super::*;

    fn table(exp_a: &[f64]) -> ProfileTable {
        let cands = default_candidates(PrecisionClass::Strict, 4);
        let mut t = ProfileTable::new();
        t.insert_ranked(
            0,
            PrecisionClass::Strict,
            exp_a
                .iter()
                .zip(cands)
                .map(|(&a, s)| Candidate::new(s, a, 1.0))
                .collect(),
        );
        t
    }

    fn run(trace: &[f64], t: &ProfileTable, cfg: GuardConfig) -> (Vec<usize>, RefinerState) {
        let (s, ea) = super::super::preselect(t, 0, PrecisionClass::Strict).unwrap();
        let mut st = RefinerState::new(cfg, s, ea);
        let mut switches = Vec::new();
        for (i, &a) in trace.iter().enumerate() {
            let m = StepMetrics {
                accepted: a as usize,
                latency: 1.0,
            };
            if refine_step(&mut st, &m, t, 0, PrecisionClass::Strict, i + 1)
                .unwrap()
                .is_some()
            {
                switches.push(i + 1);
            }
        }
        (switches, st)
    }

    #[test]
    fn constant_low_trace_switches_at_13() {
        let t = table(&[4.0, 4.0, 4.0]);
        let (sw, st) = run(&[2.0; 13], &t, GuardConfig::default());
        assert_eq!(sw, vec![13]);
        assert_eq!(st.transitions, 1);
    }

    #[test]
    fn on_target_trace_never_switches() {
        let t = table(&[4.0, 4.0]);
        let (sw, _) = run(&[4.0; 40], &t, GuardConfig::default());
        assert!(sw.is_empty());
    }

    #[test]
    fn two_transitions_then_settle_on_best() {
        let t = table(&[6.0, 6.0, 6.0, 6.0]);
        // second candidate does best (A=3), others A=2
        let mut trace = vec![2.0; 13];
        trace.extend(vec![3.0; 5]);
        trace.extend(vec![2.0; 14]);
        let (sw, st) = run(&trace, &t, GuardConfig::default());
        assert_eq!(st.transitions, 2);
        assert_eq!(&sw[..2], &[13, 18]);
        assert!(st.settled);
        assert_eq!(st.active, default_candidates(PrecisionClass::Strict, 4)[1]);
        assert_eq!(st.events.last().unwrap().kind, "settle");
    }

    #[test]
    fn hysteresis_direction() {
        let t = table(&[4.0; 4]);
        let pat = [4.0, 4.0, 2.0, 2.0, 2.0, 4.0, 5.0, 4.0, 3.0, 2.0, 2.0, 2.0, 5.0, 4.0];
        let trace: Vec<f64> = pat.iter().cycle().take(32).copied().collect();
        let events = |h| {
            let cfg = GuardConfig { hysteresis: h, ..GuardConfig::default() };
            run(&trace, &t, cfg).1.refinement_events()
        };
        let (e3, e5, e8) = (events(3), events(5), events(8));
        assert!(e3 >= e5 && e5 >= e8);
        assert!(e3 > e8);
    }

    #[test]
    fn guard_config_checks() {
        assert!(GuardConfig { alpha: 0.0, ..GuardConfig::default() }.validate().is_err());
        assert!(GuardConfig { rho: 1.0, ..GuardConfig::default() }.validate().is_err());
        GuardConfig::default().validate().unwrap();
    }
}

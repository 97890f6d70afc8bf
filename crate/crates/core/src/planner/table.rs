use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PrecisionClass, StepMetrics, StrategyTuple, BUCKET_COUNT, BUCKET_LABELS};
use crate::cost::CostCoeffs;
use crate::error::{Error, Result};
use crate::grouped::CoarseningMode;
use crate::tree::Traversal;

pub const CANDIDATES_PER_ENTRY: usize = 12;

/// A profiled strategy with its measured expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub strategy: StrategyTuple,
    #[serde(rename = "expA")]
    pub exp_a: f64,
    #[serde(rename = "expT")]
    pub exp_t: f64,
    pub thr: f64,
}

impl Candidate {
    pub fn new(strategy: StrategyTuple, exp_a: f64, exp_t: f64) -> Self {
        Self {
            strategy,
            exp_a,
            exp_t,
            thr: exp_a / exp_t,
        }
    }
}

/// Ranked candidates per (bucket, class), stored densely for direct lookup.
#[derive(Debug, Clone, Default)]
pub struct ProfileTable {
    entries: Vec<Option<Vec<Candidate>>>,
    pub cost_coeffs: Option<CostCoeffs>,
    reads: Cell<usize>,
}

impl PartialEq for ProfileTable {
    fn eq(&self, o: &Self) -> bool {
        self.entries == o.entries && self.cost_coeffs == o.cost_coeffs
    }
}

#[derive(Serialize, Deserialize)]
struct TableJson {
    buckets: BTreeMap<String, BTreeMap<String, Vec<Candidate>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cost_coeffs: Option<CostCoeffs>,
}

fn slot(bucket: usize, class: PrecisionClass) -> usize {
    bucket * PrecisionClass::ALL.len() + class.index()
}

impl ProfileTable {
    pub fn new() -> Self {
        Self {
            entries: vec![None; BUCKET_COUNT * PrecisionClass::ALL.len()],
            cost_coeffs: None,
            reads: Cell::new(0),
        }
    }

    /// Store an entry, re-ranking by descending throughput and keeping the top 12.
    pub fn insert(&mut self, bucket: usize, class: PrecisionClass, mut cands: Vec<Candidate>) {
        cands.sort_by(|a, b| b.thr.total_cmp(&a.thr));
        cands.truncate(CANDIDATES_PER_ENTRY);
        self.entries[slot(bucket, class)] = Some(cands);
    }

    /// Store an entry in the given order, without re-ranking.
    pub fn insert_ranked(&mut self, bucket: usize, class: PrecisionClass, cands: Vec<Candidate>) {
        self.entries[slot(bucket, class)] = Some(cands);
    }

    pub fn entry(&self, bucket: usize, class: PrecisionClass) -> Result<&[Candidate]> {
        self.reads.set(self.reads.get() + 1);
        self.entries
            .get(slot(bucket.min(BUCKET_COUNT - 1), class))
            .and_then(|e| e.as_deref())
            .ok_or_else(|| Error::MissingProfileEntry {
                bucket: BUCKET_LABELS[bucket.min(BUCKET_COUNT - 1)].to_string(),
                class: class.name().to_string(),
            })
    }

    /// Entry lookups performed so far.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn strategy_count(&self) -> usize {
        self.entries.iter().flatten().map(|e| e.len()).sum()
    }

    /// Iterate `(bucket, class, candidates)` over stored entries.
    pub fn iter(&self) -> impl Iterator<Item = (usize, PrecisionClass, &[Candidate])> {
        self.entries.iter().enumerate().filter_map(|(i, e)| {
            e.as_deref().map(|c| {
                let n = PrecisionClass::ALL.len();
                (i / n, PrecisionClass::ALL[i % n], c)
            })
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut buckets: BTreeMap<String, BTreeMap<String, Vec<Candidate>>> = BTreeMap::new();
        for (b, c, cands) in self.iter() {
            buckets
                .entry(BUCKET_LABELS[b].to_string())
                .or_default()
                .insert(c.name().to_string(), cands.to_vec());
        }
        Ok(serde_json::to_string_pretty(&TableJson {
            buckets,
            cost_coeffs: self.cost_coeffs,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: TableJson = serde_json::from_str(s)?;
        let mut t = ProfileTable::new();
        for (bl, classes) in raw.buckets {
            let b = super::bucket_from_label(&bl)?;
            for (cl, cands) in classes {
                let class: PrecisionClass = cl.parse()?;
                if let Some(bad) = cands.iter().find(|c| !class.admits(&c.strategy)) {
                    return Err(Error::config(format!(
                        "profile entry {bl}/{cl} holds {} which violates its class",
                        bad.strategy
                    )));
                }
                t.insert_ranked(b, class, cands);
            }
        }
        t.cost_coeffs = raw.cost_coeffs;
        Ok(t)
    }
}

/// Rank-1 strategy of an entry and its expected accepted tokens.
pub fn preselect(
    table: &ProfileTable,
    bucket: usize,
    class: PrecisionClass,
) -> Result<(StrategyTuple, f64)> {
    let entry = table.entry(bucket, class)?;
    let first = entry.first().ok_or_else(|| Error::MissingProfileEntry {
        bucket: BUCKET_LABELS[bucket.min(BUCKET_COUNT - 1)].to_string(),
        class: class.name().to_string(),
    })?;
    Ok((first.strategy.clone(), first.exp_a))
}

/// Twelve candidates per class: three tree shapes, two traversals, two group
/// sizes. Reuse classes use the alternating schedule.
pub fn default_candidates(class: PrecisionClass, n_layers: usize) -> Vec<StrategyTuple> {
    let mode = match class {
        PrecisionClass::Strict | PrecisionClass::ReuseOnly => CoarseningMode::Exact,
        _ => CoarseningMode::Approximate,
    };
    let schedule: Vec<usize> = match class {
        PrecisionClass::ReuseOnly | PrecisionClass::ApproxReuse => (1..n_layers).step_by(2).collect(),
        _ => Vec::new(),
    };
    let mut out = Vec::with_capacity(CANDIDATES_PER_ENTRY);
    for (d, k) in [(2, 2), (4, 2), (6, 4)] {
        for traversal in [Traversal::Bfs, Traversal::Dfs] {
            for c in [2, 4] {
                out.push(StrategyTuple {
                    d,
                    k,
                    traversal,
                    c,
                    mode,
                    schedule: schedule.clone(),
                });
            }
        }
    }
    out
}

/// Evaluate candidates for every requested (bucket, class) and keep the best
/// twelve by `E[A]/E[T]`. `eval` returns per-step metrics pooled over the
/// bucket's calibration prompts; the means are taken over all those steps.
pub fn profile_offline<C, F>(
    buckets: &[usize],
    classes: &[PrecisionClass],
    candidates: C,
    mut eval: F,
) -> Result<ProfileTable>
where
    C: Fn(usize, PrecisionClass) -> Vec<StrategyTuple>,
    F: FnMut(usize, PrecisionClass, &StrategyTuple) -> Result<Vec<StepMetrics>>,
{
    let mut table = ProfileTable::new();
    for &b in buckets {
        if b >= BUCKET_COUNT {
            return Err(Error::config(format!("bucket {b} out of range")));
        }
        for &class in classes {
            let valid: Vec<StrategyTuple> = candidates(b, class)
                .into_iter()
                .filter(|s| class.admits(s))
                .collect();
            if valid.is_empty() {
                return Err(Error::config(format!(
                    "no valid candidate for bucket {} class {}",
                    BUCKET_LABELS[b], class
                )));
            }
            let mut ranked = Vec::with_capacity(valid.len());
            for s in valid {
                let steps = eval(b, class, &s)?;
                if steps.is_empty() {
                    return Err(Error::config(format!("strategy {s} produced no steps")));
                }
                let n = steps.len() as f64;
                let ea = steps.iter().map(|m| m.accepted as f64).sum::<f64>() / n;
                let et = steps.iter().map(|m| m.latency).sum::<f64>() / n;
                ranked.push(Candidate::new(s, ea, et));
            }
            table.insert(b, class, ranked);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_eval(_: usize, _: PrecisionClass, s: &StrategyTuple) -> Result<Vec<StepMetrics>> {
        Ok(vec![
            StepMetrics {
                accepted: s.d,
                latency: 1.0 + s.c as f64,
            };
            3
        ])
    }

    #[test]
    fn full_table_has_192_valid_entries() {
        let t = profile_offline(&[0, 1, 2, 3], &PrecisionClass::ALL, |_, c| default_candidates(c, 8), fake_eval)
            .unwrap();
        assert_eq!(t.entry_count(), 16);
        assert_eq!(t.strategy_count(), 192);
        for (_, class, cands) in t.iter() {
            assert!(cands.iter().all(|c| class.admits(&c.strategy)));
            assert!(cands.windows(2).all(|w| w[0].thr >= w[1].thr));
        }
    }

    #[test]
    fn single_candidate_means_and_dominance() {
        let s = default_candidates(PrecisionClass::Strict, 4);
        let one = s[0].clone();
        let t = profile_offline(&[0], &[PrecisionClass::Strict], |_, _| vec![one.clone()], |_, _, _| {
            Ok(vec![
                StepMetrics { accepted: 2, latency: 1.0 },
                StepMetrics { accepted: 4, latency: 3.0 },
            ])
        })
        .unwrap();
        let e = &t.entry(0, PrecisionClass::Strict).unwrap()[0];
        assert_eq!((e.exp_a, e.exp_t), (3.0, 2.0));
        let (best, ea) = preselect(&t, 0, PrecisionClass::Strict).unwrap();
        assert_eq!((best, ea), (one, 3.0));
        // d=6 has larger A at equal C: ranks above d=2
        let t = profile_offline(&[0], &[PrecisionClass::Strict], |_, c| default_candidates(c, 4), fake_eval)
            .unwrap();
        assert_eq!(preselect(&t, 0, PrecisionClass::Strict).unwrap().0.d, 6);
    }

    #[test]
    fn invalid_candidates_and_missing_entries() {
        let r = profile_offline(&[0], &[PrecisionClass::Strict], |_, _| default_candidates(PrecisionClass::ApproxOnly, 4), fake_eval);
        assert!(r.is_err());
        let t = ProfileTable::new();
        assert!(matches!(
            preselect(&t, 2, PrecisionClass::Strict),
            Err(Error::MissingProfileEntry { .. })
        ));
    }

    #[test]
    fn preselect_reads_one_entry() {
        let t = profile_offline(&[0, 1, 2, 3], &PrecisionClass::ALL, |_, c| default_candidates(c, 8), fake_eval)
            .unwrap();
        let before = t.reads();
        preselect(&t, 3, PrecisionClass::ApproxReuse).unwrap();
        assert_eq!(t.reads() - before, 1);
    }

    #[test]
    fn json_round_trip() {
        let mut t = profile_offline(&[0, 2], &PrecisionClass::ALL, |_, c| default_candidates(c, 8), fake_eval)
            .unwrap();
        t.cost_coeffs = Some(CostCoeffs::default());
        let s = t.to_json().unwrap();
        assert!(s.contains("\"expA\"") && s.contains("\"cost_coeffs\""));
        assert_eq!(ProfileTable::from_json(&s).unwrap(), t);
    }
}

//! Strategy space, precision classes, the offline profile table and the
//! runtime refinement guard.

mod refine;
mod table;

pub use refine::{refine_step, GuardConfig, RefineEvent, RefinerState};
pub use table::{
    default_candidates, preselect, profile_offline, Candidate, ProfileTable, CANDIDATES_PER_ENTRY,
};

use serde::{Deserialize, Serialize};

use crate::config::NsaConfig;
use crate::error::{Error, Result};
use crate::fusion::{parse_schedule, resolve_layer_roles};
use crate::grouped::CoarseningMode;
use crate::tree::Traversal;

/// Joint drafting (`D`, `k`, `T`) and verification (`C`, `M`, `S`) plan.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyTuple {
    #[serde(rename = "D")]
    pub d: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub traversal: Traversal,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "M")]
    pub mode: CoarseningMode,
    #[serde(rename = "S")]
    pub schedule: Vec<usize>,
}

impl StrategyTuple {
    /// Parse `D,k,T,C,M`; the schedule is supplied separately.
    pub fn parse(s: &str, schedule: Vec<usize>) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::config(format!("strategy '{s}' must be D,k,T,C,M")));
        }
        let num = |p: &str, name: &str| -> Result<usize> {
            p.parse()
                .map_err(|_| Error::config(format!("strategy field {name} = '{p}' is not an integer")))
        };
        Ok(Self {
            d: num(parts[0], "D")?,
            k: num(parts[1], "k")?,
            traversal: parts[2].parse()?,
            c: num(parts[3], "C")?,
            mode: parts[4].parse()?,
            schedule,
        })
    }

    pub fn parse_with_schedule(s: &str, schedule: &str, n_layers: usize) -> Result<Self> {
        Self::parse(s, parse_schedule(schedule, n_layers)?)
    }

    /// Structural checks against a model: positive sizes, a resolvable
    /// schedule, and a tree depth that fits inside the sliding window.
    pub fn validate(&self, cfg: &NsaConfig) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.c == 0 {
            return Err(Error::config("D, k and C must be at least 1"));
        }
        if self.d > cfg.w {
            return Err(Error::config(format!(
                "tree depth {} exceeds the window size {}",
                self.d, cfg.w
            )));
        }
        resolve_layer_roles(&self.schedule, cfg.n_layers)?;
        Ok(())
    }

    pub fn label(&self) -> String {
        let s = if self.schedule.is_empty() {
            "none".to_string()
        } else {
            self.schedule.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
        };
        format!("{},{},{},{},{};S={}", self.d, self.k, self.traversal, self.c, self.mode, s)
    }
}

impl std::fmt::Display for StrategyTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrecisionClass {
    Strict,
    #[serde(rename = "Reuse-only")]
    ReuseOnly,
    #[serde(rename = "Approx-only")]
    ApproxOnly,
    #[serde(rename = "Approx+Reuse")]
    ApproxReuse,
}

impl PrecisionClass {
    pub const ALL: [PrecisionClass; 4] = [
        PrecisionClass::Strict,
        PrecisionClass::ReuseOnly,
        PrecisionClass::ApproxOnly,
        PrecisionClass::ApproxReuse,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecisionClass::Strict => "Strict",
            PrecisionClass::ReuseOnly => "Reuse-only",
            PrecisionClass::ApproxOnly => "Approx-only",
            PrecisionClass::ApproxReuse => "Approx+Reuse",
        }
    }

    pub fn admits(self, s: &StrategyTuple) -> bool {
        let exact = s.mode == CoarseningMode::Exact;
        let reuse = !s.schedule.is_empty();
        match self {
            PrecisionClass::Strict => exact && !reuse,
            PrecisionClass::ReuseOnly => exact && reuse,
            PrecisionClass::ApproxOnly => !exact && !reuse,
            PrecisionClass::ApproxReuse => !exact && reuse,
        }
    }

    /// Class check plus [`StrategyTuple::validate`].
    pub fn check(self, s: &StrategyTuple, cfg: &NsaConfig) -> Result<()> {
        s.validate(cfg)?;
        if !self.admits(s) {
            return Err(Error::config(format!(
                "strategy {s} does not satisfy precision class {}",
                self.name()
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for PrecisionClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PrecisionClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "strict" => Ok(PrecisionClass::Strict),
            "reuseonly" | "reuse" => Ok(PrecisionClass::ReuseOnly),
            "approxonly" | "approx" => Ok(PrecisionClass::ApproxOnly),
            "approx+reuse" | "approxreuse" => Ok(PrecisionClass::ApproxReuse),
            _ => Err(Error::config(format!("unknown precision class '{s}'"))),
        }
    }
}

pub const BUCKET_COUNT: usize = 4;
pub const BUCKET_WIDTH: usize = 4096;
pub const BUCKET_LABELS: [&str; BUCKET_COUNT] = ["0-4K", "4-8K", "8-12K", "12-16K"];

/// Context-length regime; lengths past the top bucket clamp into it.
pub fn bucket_of(context_len: usize) -> usize {
    (context_len / BUCKET_WIDTH).min(BUCKET_COUNT - 1)
}

pub fn bucket_from_label(s: &str) -> Result<usize> {
    BUCKET_LABELS
        .iter()
        .position(|l| l.eq_ignore_ascii_case(s.trim()))
        .or_else(|| s.trim().parse::<usize>().ok().filter(|&b| b < BUCKET_COUNT))
        .ok_or_else(|| Error::config(format!("unknown bucket '{s}'")))
}

/// Accepted tokens and latency of one verification step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub accepted: usize,
    pub latency: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets() {
        assert_eq!(bucket_of(5000), 1);
        assert_eq!(bucket_of(0), 0);
        assert_eq!(bucket_of(4096), 1);
        assert_eq!(bucket_of(20000), 3);
        assert_eq!(bucket_from_label("8-12K").unwrap(), 2);
        assert_eq!(bucket_from_label("3").unwrap(), 3);
        assert!(bucket_from_label("x").is_err());
    }

    #[test]
    fn class_admission() {
        let s = StrategyTuple::parse("4,2,BFS,2,exact", vec![]).unwrap();
        assert!(PrecisionClass::Strict.admits(&s));
        assert!(!PrecisionClass::ReuseOnly.admits(&s));
        let r = StrategyTuple { schedule: vec![1, 3], ..s.clone() };
        assert!(PrecisionClass::ReuseOnly.admits(&r));
        let a = StrategyTuple { mode: CoarseningMode::Approximate, ..r };
        assert!(PrecisionClass::ApproxReuse.admits(&a));
        assert!(!PrecisionClass::ApproxOnly.admits(&a));
        let cfg = NsaConfig::toy(4);
        assert!(PrecisionClass::Strict.check(&a, &cfg).is_err());
        let deep = StrategyTuple { d: 1000, ..s };
        assert!(deep.validate(&cfg).is_err());
    }

    #[test]
    fn parse_and_serde() {
        let s = StrategyTuple::parse_with_schedule("6, 4, dfs, 4, approx", "1,3", 8).unwrap();
        assert_eq!((s.d, s.k, s.c), (6, 4, 4));
        assert_eq!(s.traversal, Traversal::Dfs);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"M\":\"approximate\""));
        assert_eq!(serde_json::from_str::<StrategyTuple>(&json).unwrap(), s);
        assert!(StrategyTuple::parse("6,4,BFS,4", vec![]).is_err());
        assert_eq!("Approx+Reuse".parse::<PrecisionClass>().unwrap(), PrecisionClass::ApproxReuse);
        assert_eq!("reuse-only".parse::<PrecisionClass>().unwrap(), PrecisionClass::ReuseOnly);
    }
}

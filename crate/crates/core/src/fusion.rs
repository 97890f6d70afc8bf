//! Refresh/reuse layer roles, inherited-index clamping and launch accounting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nsa::SelectedIndexSet;

/// Launches per refresh layer (routing kernel + fused attention kernel).
pub const REFRESH_LAUNCHES: usize = 2;
/// Launches per reuse layer (single fused kernel over inherited indices).
pub const REUSE_LAUNCHES: usize = 1;
/// Launches per layer of the unfused baseline: routing, three branches, aggregation.
pub const VANILLA_LAUNCHES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRole {
    Refresh,
    Reuse { source: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRolePlan {
    pub reuse_set: Vec<usize>,
    pub roles: Vec<LayerRole>,
}

impl LayerRolePlan {
    pub fn n_layers(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, layer: usize) -> LayerRole {
        self.roles[layer]
    }

    pub fn is_refresh(&self, layer: usize) -> bool {
        self.roles[layer] == LayerRole::Refresh
    }

    pub fn refresh_count(&self) -> usize {
        self.roles.iter().filter(|r| **r == LayerRole::Refresh).count()
    }

    pub fn reuse_count(&self) -> usize {
        self.n_layers() - self.refresh_count()
    }

    pub fn launches(&self, layer: usize) -> usize {
        match self.roles[layer] {
            LayerRole::Refresh => REFRESH_LAUNCHES,
            LayerRole::Reuse { .. } => REUSE_LAUNCHES,
        }
    }

    pub fn total_launches(&self) -> usize {
        (0..self.n_layers()).map(|j| self.launches(j)).sum()
    }

    pub fn vanilla_launches(&self) -> usize {
        VANILLA_LAUNCHES * self.n_layers()
    }
}

/// Assign each layer its role. Reuse layers read indices from the nearest
/// preceding refresh layer.
pub fn resolve_layer_roles(reuse_set: &[usize], n_layers: usize) -> Result<LayerRolePlan> {
    let set: BTreeSet<usize> = reuse_set.iter().copied().collect();
    if set.contains(&0) {
        return Err(Error::config("layer 0 must be a refresh layer"));
    }
    if let Some(&bad) = set.iter().find(|&&j| j >= n_layers) {
        return Err(Error::config(format!(
            "reuse layer {bad} out of range for {n_layers} layers"
        )));
    }
    let mut roles = Vec::with_capacity(n_layers);
    let mut last_refresh = 0;
    for j in 0..n_layers {
        if set.contains(&j) {
            roles.push(LayerRole::Reuse { source: last_refresh });
        } else {
            last_refresh = j;
            roles.push(LayerRole::Refresh);
        }
    }
    Ok(LayerRolePlan {
        reuse_set: set.into_iter().collect(),
        roles,
    })
}

/// Inherited indices after applying a member's causal bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClampedIndices {
    pub set: SelectedIndexSet,
    /// Exclusive token bound; tokens at or past it are masked in the boundary block.
    pub bound: usize,
    /// Boundary block and its count of unmasked tokens, if one straddles `bound`.
    pub partial_block: Option<(u32, usize)>,
}

/// Drop blocks starting at or past `bound`; keep a straddling block with a token mask.
pub fn clamp_inherited_indices(
    source: &SelectedIndexSet,
    bound: usize,
    l_sel: usize,
) -> ClampedIndices {
    let keep = |b: &u32| (*b as usize) * l_sel < bound;
    let indices: Vec<u32> = source.indices.iter().copied().filter(keep).collect();
    let forced: Vec<u32> = source.forced.iter().copied().filter(keep).collect();
    let partial_block = indices.last().and_then(|&b| {
        let end = (b as usize + 1) * l_sel;
        (end > bound).then(|| (b, bound - b as usize * l_sel))
    });
    ClampedIndices {
        set: SelectedIndexSet::new(source.query, source.layer, indices, forced),
        bound,
        partial_block,
    }
}

/// Parse a reuse schedule: `none`, `alt` (odd layers), or a comma-separated id list.
pub fn parse_schedule(s: &str, n_layers: usize) -> Result<Vec<usize>> {
    let s = s.trim();
    match s {
        "" | "none" => Ok(Vec::new()),
        "alt" => Ok((1..n_layers).step_by(2).collect()),
        _ => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad reuse layer id '{}'", p.trim())))
            })
            .collect(),
    }
}

pub fn schedule_to_json(s: &[usize]) -> String {
    serde_json::to_string(s).expect("list of integers serializes")
}

pub fn schedule_from_json(s: &str) -> Result<Vec<usize>> {
    Ok(serde_json::from_str(s)?)
}

/// One accepted greedy move during schedule calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub layer: usize,
    pub deviation: f64,
}

/// Greedy reuse-schedule search.
///
/// `deviation(S)` measures output drift of schedule `S` against all-refresh.
/// Each round tries every remaining layer in `1..n_layers` and adds the one
/// with the smallest resulting deviation (ties to the lower id) while that
/// deviation stays within `tolerance`.
pub fn calibrate_greedy<F>(
    n_layers: usize,
    tolerance: f64,
    mut deviation: F,
) -> Result<(Vec<usize>, Vec<CalibrationStep>)>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    if !(tolerance >= 0.0) {
        return Err(Error::config("tolerance must be non-negative"));
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for cand in 1..n_layers {
            if chosen.contains(&cand) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(cand);
            trial.sort_unstable();
            let dev = deviation(&trial)?;
            if best.map_or(true, |(_, b)| dev < b) {
                best = Some((cand, dev));
            }
        }
        match best {
            Some((layer, dev)) if dev <= tolerance => {
                chosen.push(layer);
                chosen.sort_unstable();
                trace.push(CalibrationStep { layer, deviation: dev });
            }
            _ => break,
        }
    }
    Ok((chosen, trace))
}

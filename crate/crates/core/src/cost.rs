//! Linear step-latency model over load and launch counts, with a non-negative
//! least-squares fit against measured step times.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::LayerRolePlan;
use crate::grouped::LoadStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoeffs {
    pub c_block: f64,
    pub c_index: f64,
    pub c_launch: f64,
    pub c_window: f64,
    pub c_base: f64,
}

impl Default for CostCoeffs {
    /// Hand-set coefficients in microseconds, roughly matching the toy engine.
    fn default() -> Self {
        Self {
            c_block: 1.0,
            c_index: 4.0,
            c_launch: 5.0,
            c_window: 0.05,
            c_base: 200.0,
        }
    }
}

impl CostCoeffs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c_block, self.c_index, self.c_launch, self.c_window, self.c_base];
        if all.iter().all(|c| c.is_finite() && *c >= 0.0) {
            Ok(())
        } else {
            Err(Error::config("cost coefficients must be finite and non-negative"))
        }
    }

    fn as_vec(&self) -> [f64; 5] {
        [self.c_base, self.c_launch, self.c_block, self.c_index, self.c_window]
    }

    fn from_vec(v: &[f64]) -> Self {
        Self {
            c_base: v[0],
            c_launch: v[1],
            c_block: v[2],
            c_index: v[3],
            c_window: v[4],
        }
    }
}

/// Per-step totals consumed by the latency model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAccounting {
    pub unique_loads: usize,
    pub requested_loads: usize,
    pub index_constructions: usize,
    pub launches: usize,
    pub window_tokens: usize,
}

impl StepAccounting {
    fn features(&self) -> [f64; 5] {
        [
            1.0,
            self.launches as f64,
            self.unique_loads as f64,
            self.index_constructions as f64,
            self.window_tokens as f64,
        ]
    }

    pub fn add(&mut self, o: &StepAccounting) {
        self.unique_loads += o.unique_loads;
        self.requested_loads += o.requested_loads;
        self.index_constructions += o.index_constructions;
        self.launches += o.launches;
        self.window_tokens += o.window_tokens;
    }
}

/// Apply a layer plan to one layer's group stats: reuse layers construct no
/// indices, and the layer's launches are booked on its first group.
pub fn annotate_layer(stats: &mut [LoadStats], plan: &LayerRolePlan, layer: usize) {
    let refresh = plan.is_refresh(layer);
    for (g, s) in stats.iter_mut().enumerate() {
        if !refresh {
            s.index_constructions = 0;
        }
        s.launches = if g == 0 { plan.launches(layer) } else { 0 };
    }
}

/// Sum per-layer group stats under `plan`. `per_layer[j]` holds layer `j`'s groups.
pub fn account_step(per_layer: &[Vec<LoadStats>], plan: &LayerRolePlan) -> Result<StepAccounting> {
    if per_layer.len() != plan.n_layers() {
        return Err(Error::LayerCoverage {
            expected: plan.n_layers(),
            got: per_layer.len(),
        });
    }
    let mut acc = StepAccounting::default();
    for (j, groups) in per_layer.iter().enumerate() {
        acc.launches += plan.launches(j);
        for g in groups {
            acc.unique_loads += g.unique_block_loads;
            acc.requested_loads += g.total_requested_loads;
            acc.window_tokens += g.window_token_loads;
            if plan.is_refresh(j) {
                acc.index_constructions += g.index_constructions;
            }
        }
    }
    Ok(acc)
}

pub fn estimate_latency(acc: &StepAccounting, coeffs: &CostCoeffs) -> f64 {
    acc.features()
        .iter()
        .zip(coeffs.as_vec())
        .map(|(x, c)| x * c)
        .sum()
}

/// Fraction of the estimate spent constructing indices.
pub fn index_share(acc: &StepAccounting, coeffs: &CostCoeffs) -> f64 {
    let t = estimate_latency(acc, coeffs);
    if t > 0.0 {
        coeffs.c_index * acc.index_constructions as f64 / t
    } else {
        0.0
    }
}

/// Lawson-Hanson non-negative least squares: argmin |Ax - b| with x >= 0.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-10 * a.norm().max(1.0) * b.norm().max(1.0);
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let z = solve_passive(a, b, &passive);
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in 0..n {
                if passive[i] && z[i] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - z[i]));
                }
            }
            x = &x + (&z - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= 1e-15 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let sub = a.select_columns(&cols);
    let sol = sub
        .svd(true, true)
        .solve(b, 1e-12)
        .expect("svd with both factors solves");
    let mut z = DVector::zeros(a.ncols());
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}

/// Fit coefficients to `(accounting, measured latency)` samples.
pub fn fit_coeffs(samples: &[(StepAccounting, f64)]) -> Result<CostCoeffs> {
    if samples.is_empty() {
        return Err(Error::config("no samples to fit cost coefficients"));
    }
    let rows: Vec<[f64; 5]> = samples.iter().map(|(a, _)| a.features()).collect();
    // column scaling keeps the solve well conditioned
    let mut scale = [0.0f64; 5];
    for r in &rows {
        for (s, x) in scale.iter_mut().zip(r) {
            *s = s.max(x.abs());
        }
    }
    let a = DMatrix::from_fn(rows.len(), 5, |i, j| {
        if scale[j] > 0.0 {
            rows[i][j] / scale[j]
        } else {
            0.0
        }
    });
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|(_, t)| *t));
    let x = nnls(&a, &b);
    let v: Vec<f64> = (0..5)
        .map(|j| if scale[j] > 0.0 { x[j] / scale[j] } else { 0.0 })
        .collect();
    Ok(CostCoeffs::from_vec(&v))
}

/// Median of `|pred - actual| / actual` over the samples.
pub fn median_relative_error(samples: &[(StepAccounting, f64)], coeffs: &CostCoeffs) -> f64 {
    let mut errs: Vec<f64> = samples
        .iter()
        .map(|(a, t)| (estimate_latency(a, coeffs) - t).abs() / t.abs().max(f64::MIN_POSITIVE))
        .collect();
    median(&mut errs)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::resolve_layer_roles;

    fn stats(unique: usize, constructions: usize) -> LoadStats {
        LoadStats {
            unique_block_loads: unique,
            total_requested_loads: unique,
            index_constructions: constructions,
            window_token_loads: 3,
            ..LoadStats::default()
        }
    }

    #[test]
    fn strict_c1_constructions() {
        let (gamma, l) = (10, 4);
        let plan = resolve_layer_roles(&[], l).unwrap();
        let per_layer = vec![(0..gamma).map(|_| stats(5, 1)).collect::<Vec<_>>(); l];
        let acc = account_step(&per_layer, &plan).unwrap();
        assert_eq!(acc.index_constructions, gamma * l);
        assert_eq!(acc.launches, 2 * l);
    }

    #[test]
    fn approx_half_reuse_constructions() {
        let plan = resolve_layer_roles(&(1..16).step_by(2).collect::<Vec<_>>(), 16).unwrap();
        // gamma 64, C 4: 16 groups, one construction each
        let per_layer = vec![(0..16).map(|_| stats(16, 1)).collect::<Vec<_>>(); 16];
        assert_eq!(account_step(&per_layer, &plan).unwrap().index_constructions, 128);
        assert!(account_step(&per_layer[..3], &plan).is_err());
    }

    #[test]
    fn latency_linearity() {
        let acc = StepAccounting {
            unique_loads: 10,
            requested_loads: 12,
            index_constructions: 4,
            launches: 8,
            window_tokens: 100,
        };
        let base = CostCoeffs {
            c_block: 0.0,
            c_index: 0.0,
            c_launch: 0.0,
            c_window: 0.0,
            c_base: 7.0,
        };
        assert_eq!(estimate_latency(&acc, &base), 7.0);
        let blk = CostCoeffs { c_block: 2.0, ..base };
        let doubled = StepAccounting { unique_loads: 20, ..acc };
        assert_eq!(
            estimate_latency(&doubled, &blk) - 7.0,
            2.0 * (estimate_latency(&acc, &blk) - 7.0)
        );
        assert!(CostCoeffs { c_index: -1.0, ..base }.validate().is_err());
    }

    #[test]
    fn nnls_recovers_and_clamps() {
        let truth = CostCoeffs {
            c_block: 1.5,
            c_index: 3.0,
            c_launch: 0.0,
            c_window: 0.1,
            c_base: 50.0,
        };
        let samples: Vec<_> = (0..30)
            .map(|i| {
                let a = StepAccounting {
                    unique_loads: 10 + 7 * i,
                    requested_loads: 0,
                    index_constructions: 5 + (i * 13) % 17,
                    launches: 8 + i % 3,
                    window_tokens: 100 + (i * 31) % 40,
                };
                (a, estimate_latency(&a, &truth))
            })
            .collect();
        let fit = fit_coeffs(&samples).unwrap();
        assert!(median_relative_error(&samples, &fit) < 1e-6);
        fit.validate().unwrap();
        // a target needing a negative coefficient gets clamped to zero
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, -1.0, 0.0]);
        let x = nnls(&a, &b);
        assert!(x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn index_share_bounds() {
        let acc = StepAccounting {
            index_constructions: 10,
            ..StepAccounting::default()
        };
        let c = CostCoeffs {
            c_index: 1.0,
            c_base: 10.0,
            ..CostCoeffs::default()
        };
        assert!((index_share(&acc, &c) - 0.5).abs() < 1e-12);
    }
}

//! Streaming softmax state for one query head over one key set.

/// Running softmax accumulator: unnormalized output, running max logit and
/// running denominator. Keys are folded in one at a time in a fixed order, so
/// two evaluations that visit the same keys in the same order agree bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPartial {
    pub out: Vec<f64>,
    pub run_max: f64,
    pub run_den: f64,
}

impl BranchPartial {
    pub fn empty(d_head: usize) -> Self {
        Self {
            out: vec![0.0; d_head],
            run_max: f64::NEG_INFINITY,
            run_den: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.run_den == 0.0
    }

    /// Fold one key. A logit of `-inf` is a masked key and contributes nothing.
    #[inline]
    pub fn push(&mut self, logit: f64, value: &[f32]) {
        if logit == f64::NEG_INFINITY {
            return;
        }
        if logit > self.run_max {
            let scale = if self.run_max == f64::NEG_INFINITY {
                0.0
            } else {
                (self.run_max - logit).exp()
            };
            if scale != 1.0 {
                for o in &mut self.out {
                    *o *= scale;
                }
                self.run_den *= scale;
            }
            self.run_max = logit;
        }
        let p = (logit - self.run_max).exp();
        self.run_den += p;
        for (o, &v) in self.out.iter_mut().zip(value) {
            *o += p * v as f64;
        }
    }

    /// Normalized output; the empty partial normalizes to zeros.
    pub fn normalized(&self) -> Vec<f64> {
        if self.is_empty() {
            return vec![0.0; self.out.len()];
        }
        self.out.iter().map(|o| o / self.run_den).collect()
    }
}

/// Combine two partials computed over disjoint key sets of the same query head.
pub fn merge_partials(a: &BranchPartial, b: &BranchPartial) -> BranchPartial {
    if b.is_empty() {
        return a.clone();
    }
    if a.is_empty() {
        return b.clone();
    }
    let m = a.run_max.max(b.run_max);
    let sa = (a.run_max - m).exp();
    let sb = (b.run_max - m).exp();
    BranchPartial {
        out: a
            .out
            .iter()
            .zip(&b.out)
            .map(|(x, y)| x * sa + y * sb)
            .collect(),
        run_max: m,
        run_den: a.run_den * sa + b.run_den * sb,
    }
}

/// Dot product of two f32 rows accumulated in f64 with eight fixed lanes.
#[inline]
pub fn dot_wide(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for lane in 0..8 {
            acc[lane] += a[base + lane] as f64 * b[base + lane] as f64;
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 8..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

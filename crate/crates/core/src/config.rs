//! NSA hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All NSA hyperparameters in one validated record.
///
/// Lengths are in tokens. `l_sel` is the selection block size, `n` the number of
/// selected blocks per query, `w` the sliding-window size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NsaConfig {
    pub l: usize,
    pub d: usize,
    pub l_sel: usize,
    pub n: usize,
    pub w: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
}

impl NsaConfig {
    /// The standard GPU-scale configuration (32 query heads, 8 KV heads, head dim 64).
    pub fn reference(n_layers: usize) -> Self {
        Self {
            l: 32,
            d: 16,
            l_sel: 64,
            n: 16,
            w: 512,
            n_q_heads: 32,
            n_kv_heads: 8,
            d_head: 64,
            n_layers,
        }
    }

    /// Desk-scale defaults used by the toy target model.
    pub fn toy(n_layers: usize) -> Self {
        Self {
            l: 32,
            d: 16,
            l_sel: 64,
            n: 16,
            w: 128,
            n_q_heads: 8,
            n_kv_heads: 2,
            d_head: 32,
            n_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(format!("invalid NsaConfig: {msg}")));
        if self.l == 0 {
            return fail("l must be positive");
        }
        if self.d == 0 || self.d > self.l {
            return fail("stride d must satisfy 0 < d <= l");
        }
        if self.l_sel == 0 || self.l_sel % self.d != 0 {
            return fail("l_sel must be a positive multiple of d");
        }
        if self.n < 3 {
            return fail("n must be at least 3 (initial + two local blocks)");
        }
        if self.w == 0 {
            return fail("w must be positive");
        }
        if self.n_q_heads == 0 || self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return fail("n_q_heads must be a positive multiple of n_kv_heads");
        }
        if self.d_head == 0 {
            return fail("d_head must be positive");
        }
        if self.n_layers == 0 {
            return fail("n_layers must be positive");
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// KV head serving query head `h`.
    pub fn kv_head_of(&self, h: usize) -> usize {
        h / self.group_size()
    }

    pub fn q_dim(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Number of compressed blocks over `n_tokens` committed tokens.
    pub fn compressed_block_count(&self, n_tokens: usize) -> usize {
        if n_tokens < self.l {
            0
        } else {
            (n_tokens - self.l) / self.d + 1
        }
    }

    /// Number of selection blocks intersecting `[0, visible_len)`.
    pub fn selection_block_count(&self, visible_len: usize) -> usize {
        visible_len.div_ceil(self.l_sel)
    }

    /// Exclusive upper token bound for the compression and selection branches of
    /// a query at absolute position `pos`.
    ///
    /// Those branches cover history older than the sliding window; the most
    /// recent `w` tokens (including the query itself) are reached only through
    /// the window branch.
    pub fn routing_frontier(&self, pos: usize) -> usize {
        (pos + 1).saturating_sub(self.w)
    }

    pub fn softmax_scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }
}

//! Committed KV rows and the compressed-block cache built over them.

use std::ops::Range;

use crate::config::NsaConfig;

/// Per-layer, per-KV-head key and value rows for committed tokens.
#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    n_kv_heads: usize,
    d_head: usize,
    // [layer][head] -> rows * d_head
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    committed_len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            d_head,
            keys: vec![vec![Vec::new(); n_kv_heads]; n_layers],
            values: vec![vec![Vec::new(); n_kv_heads]; n_layers],
            committed_len: 0,
        }
    }

    pub fn for_config(cfg: &NsaConfig) -> Self {
        Self::new(cfg.n_layers, cfg.n_kv_heads, cfg.d_head)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    /// Rows stored at `layer` (equal for every head of the layer).
    pub fn rows(&self, layer: usize) -> usize {
        self.keys[layer][0].len() / self.d_head
    }

    #[inline]
    pub fn key(&self, layer: usize, head: usize, t: usize) -> &[f32] {
        let d = self.d_head;
        &self.keys[layer][head][t * d..(t + 1) * d]
    }

    #[inline]
    pub fn value(&self, layer: usize, head: usize, t: usize) -> &[f32] {
        let d = self.d_head;
        &self.values[layer][head][t * d..(t + 1) * d]
    }

    /// Append one row at `layer`. `k` and `v` hold all KV heads back to back.
    pub fn push_row(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        let d = self.d_head;
        assert_eq!(k.len(), self.n_kv_heads * d, "key row width");
        assert_eq!(v.len(), self.n_kv_heads * d, "value row width");
        for h in 0..self.n_kv_heads {
            self.keys[layer][h].extend_from_slice(&k[h * d..(h + 1) * d]);
            self.values[layer][h].extend_from_slice(&v[h * d..(h + 1) * d]);
        }
    }

    /// Append one token's rows for every layer and mark it committed.
    pub fn commit_token(&mut self, k_per_layer: &[&[f32]], v_per_layer: &[&[f32]]) {
        assert_eq!(k_per_layer.len(), self.n_layers);
        for layer in 0..self.n_layers {
            assert_eq!(self.rows(layer), self.committed_len, "layer {layer} out of step");
            self.push_row(layer, k_per_layer[layer], v_per_layer[layer]);
        }
        self.committed_len += 1;
    }

    /// Mark tokens committed after rows were pushed layer by layer.
    pub fn set_committed_len(&mut self, len: usize) {
        for layer in 0..self.n_layers {
            assert!(len <= self.rows(layer), "committed_len beyond stored rows");
        }
        self.committed_len = len;
    }
}

/// Compressed key/value blocks of one layer.
///
/// Block `i` summarizes committed tokens `[i*d, i*d + l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub layer: usize,
    l: usize,
    d: usize,
    d_head: usize,
    n_kv_heads: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    block_count: usize,
}

impl CompressedCache {
    pub fn empty(cfg: &NsaConfig, layer: usize) -> Self {
        Self {
            layer,
            l: cfg.l,
            d: cfg.d,
            d_head: cfg.d_head,
            n_kv_heads: cfg.n_kv_heads,
            keys: vec![Vec::new(); cfg.n_kv_heads],
            values: vec![Vec::new(); cfg.n_kv_heads],
            block_count: 0,
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn source_range(&self, i: usize) -> Range<usize> {
        i * self.d..i * self.d + self.l
    }

    #[inline]
    pub fn key(&self, head: usize, i: usize) -> &[f32] {
        &self.keys[head][i * self.d_head..(i + 1) * self.d_head]
    }

    #[inline]
    pub fn value(&self, head: usize, i: usize) -> &[f32] {
        &self.values[head][i * self.d_head..(i + 1) * self.d_head]
    }

    /// Blocks whose whole source range lies inside `[0, visible_len)`.
    pub fn visible_blocks(&self, visible_len: usize) -> usize {
        if visible_len < self.l {
            0
        } else {
            ((visible_len - self.l) / self.d + 1).min(self.block_count)
        }
    }

    /// Append every block that became complete since the last call.
    ///
    /// `pos_emb` holds `l` rows of `d_head` values added to keys by intra-block
    /// offset before mean pooling.
    pub fn extend(&mut self, kv: &KvCache, pos_emb: &[f32]) {
        let n = kv.committed_len();
        let target = if n < self.l { 0 } else { (n - self.l) / self.d + 1 };
        let dh = self.d_head;
        assert_eq!(pos_emb.len(), self.l * dh, "position embedding shape");
        let inv = 1.0 / self.l as f64;
        for i in self.block_count..target {
            let start = i * self.d;
            for h in 0..self.n_kv_heads {
                let mut ks = vec![0.0f64; dh];
                let mut vs = vec![0.0f64; dh];
                for o in 0..self.l {
                    let k = kv.key(self.layer, h, start + o);
                    let v = kv.value(self.layer, h, start + o);
                    let pe = &pos_emb[o * dh..(o + 1) * dh];
                    for c in 0..dh {
                        ks[c] += k[c] as f64 + pe[c] as f64;
                        vs[c] += v[c] as f64;
                    }
                }
                self.keys[h].extend(ks.iter().map(|x| (x * inv) as f32));
                self.values[h].extend(vs.iter().map(|x| (x * inv) as f32));
            }
        }
        self.block_count = target;
    }
}

/// Build the compressed cache of `layer` from scratch over all committed tokens.
pub fn build_compressed_cache(
    kv: &KvCache,
    cfg: &NsaConfig,
    layer: usize,
    pos_emb: &[f32],
) -> CompressedCache {
    let mut cc = CompressedCache::empty(cfg, layer);
    cc.extend(kv, pos_emb);
    cc
}

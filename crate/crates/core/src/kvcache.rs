//! Static key/value cache and pre-computed causal mask.
//!
//! All arenas are sized once at allocation. The cache tracks how many positions hold
//! accepted history through a single `committed` cursor; rolling back only moves that
//! cursor. Entries at or past the cursor are stale and are never read, because attention
//! only sees the columns selected by a [`StaticMaskView`].

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Per-layer key and value arenas of `capacity × kv_heads × head_dim` values each.
#[derive(Clone, Debug)]
pub struct StaticKvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    capacity: usize,
    kv_dim: usize,
    committed: usize,
}

impl StaticKvCache {
    /// Cache sized to the model's `max_seq_len`.
    pub fn allocate(cfg: &ModelConfig) -> Result<Self> {
        Self::with_capacity(cfg, cfg.max_seq_len)
    }

    pub fn with_capacity(cfg: &ModelConfig, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("cache capacity must be positive"));
        }
        if capacity > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "cache capacity {capacity} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let kv_dim = cfg.kv_dim();
        let arena = || vec![0f32; capacity * kv_dim];
        Ok(StaticKvCache {
            keys: (0..cfg.num_layers).map(|_| arena()).collect(),
            values: (0..cfg.num_layers).map(|_| arena()).collect(),
            capacity,
            kv_dim,
            committed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn committed(&self) -> usize {
        self.committed
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    /// Total f32 elements across all key and value arenas.
    pub fn element_count(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Vec::len).sum()
    }

    /// (address, capacity) of every arena; unchanged for the lifetime of the cache.
    pub fn arena_fingerprint(&self) -> Vec<(usize, usize)> {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|a| (a.as_ptr() as usize, a.capacity()))
            .collect()
    }

    /// Overwrites positions `[start, start + n)` of one layer. Does not move the cursor.
    pub fn write_window(
        &mut self,
        layer: usize,
        start: usize,
        keys: &[f32],
        values: &[f32],
    ) -> Result<()> {
        if keys.len() != values.len() || !keys.len().is_multiple_of(self.kv_dim) {
            return Err(Error::invalid(format!(
                "key/value windows must be equal multiples of {}",
                self.kv_dim
            )));
        }
        if layer >= self.keys.len() {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        let n = keys.len() / self.kv_dim;
        if start + n > self.capacity {
            return Err(Error::Capacity {
                requested: start + n,
                capacity: self.capacity,
            });
        }
        let range = start * self.kv_dim..(start + n) * self.kv_dim;
        self.keys[layer][range.clone()].copy_from_slice(keys);
        self.values[layer][range].copy_from_slice(values);
        Ok(())
    }

    pub fn commit(&mut self, n: usize) -> Result<()> {
        if self.committed + n > self.capacity {
            return Err(Error::invalid(format!(
                "commit of {n} past capacity ({} committed of {})",
                self.committed, self.capacity
            )));
        }
        self.committed += n;
        Ok(())
    }

    /// Retracts the last `n` committed positions. Cursor-only.
    pub fn rollback(&mut self, n: usize) -> Result<()> {
        if n > self.committed {
            return Err(Error::invalid(format!(
                "rollback of {n} exceeds {} committed positions",
                self.committed
            )));
        }
        self.committed -= n;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.committed = 0;
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }
}

/// Lower-triangular `capacity × capacity` attention mask, computed once and shared.
#[derive(Clone, Debug)]
pub struct CausalMask {
    capacity: usize,
    allowed: Vec<bool>,
}

impl CausalMask {
    pub fn new(capacity: usize) -> Self {
        let mut allowed = vec![false; capacity * capacity];
        for i in 0..capacity {
            allowed[i * capacity..i * capacity + i + 1].fill(true);
        }
        CausalMask { capacity, allowed }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Rows `[window_start, window_start + window_len)`, columns
    /// `[0, window_start + window_len)`.
    pub fn view(&self, window_start: usize, window_len: usize) -> Result<StaticMaskView<'_>> {
        if window_start + window_len > self.capacity {
            return Err(Error::invalid(format!(
                "mask window {window_start}+{window_len} exceeds capacity {}",
                self.capacity
            )));
        }
        Ok(StaticMaskView {
            mask: self,
            window_start,
            window_len,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StaticMaskView<'a> {
    mask: &'a CausalMask,
    pub window_start: usize,
    pub window_len: usize,
}

impl StaticMaskView<'_> {
    pub fn rows(&self) -> usize {
        self.window_len
    }

    pub fn cols(&self) -> usize {
        self.window_start + self.window_len
    }

    /// Whether window row `i` may attend to absolute position `j`.
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.window_len && j < self.cols());
        self.mask.allowed[(self.window_start + i) * self.mask.capacity + j]
    }

    /// Absolute positions visible from window row `i`, ascending.
    pub fn visible(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cols()).filter(move |&j| self.allows(i, j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn fresh_cache_and_sizes() {
        let c = StaticKvCache::allocate(&cfg()).unwrap();
        assert_eq!(c.committed(), 0);
        assert_eq!(c.element_count(), 2 * 4 * 4096 * 4 * 32);
        let mut zero = cfg();
        zero.max_seq_len = 0;
        assert!(StaticKvCache::allocate(&zero).is_err());
    }

    #[test]
    fn cursor_bounds() {
        let mut c = StaticKvCache::with_capacity(&cfg(), 10).unwrap();
        c.commit(5).unwrap();
        c.rollback(5).unwrap();
        assert_eq!(c.committed(), 0);
        assert!(c.rollback(1).is_err());
        c.commit(10).unwrap();
        assert!(c.commit(1).is_err());
    }

    #[test]
    fn window_writes() {
        let mut c = StaticKvCache::with_capacity(&cfg(), 4).unwrap();
        let kv = vec![1.0; 128 * 2];
        c.write_window(0, 1, &kv, &kv).unwrap();
        assert_eq!(c.committed(), 0);
        assert!(matches!(
            c.write_window(0, 3, &kv, &kv),
            Err(Error::Capacity { requested: 5, capacity: 4 })
        ));
        let kv2 = vec![2.0; 128 * 2];
        c.write_window(0, 1, &kv2, &kv2).unwrap();
        assert!(c.keys(0)[128..384].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn staticness_under_mixed_ops() {
        let mut c = StaticKvCache::with_capacity(&cfg(), 64).unwrap();
        let before = c.arena_fingerprint();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kv = vec![0.5; 128 * 8];
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let start = c.committed();
            if start + n <= 64 && rng.random_bool(0.6) {
                for l in 0..4 {
                    c.write_window(l, start, &kv[..n * 128], &kv[..n * 128]).unwrap();
                }
                c.commit(n).unwrap();
            } else {
                let k = rng.random_range(0..=c.committed());
                c.rollback(k).unwrap();
            }
        }
        assert_eq!(c.arena_fingerprint(), before);
    }

    #[test]
    fn mask_views() {
        let m = CausalMask::new(6);
        let full = m.view(0, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(full.allows(i, j), j <= i);
            }
        }
        let one = m.view(3, 1).unwrap();
        assert_eq!(one.visible(0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(m.view(5, 2).is_err());
    }

    #[test]
    fn views_match_dynamic_causal_masks() {
        let cap = 12;
        let m = CausalMask::new(cap);
        for start in 0..cap {
            for len in 1..=cap - start {
                let v = m.view(start, len).unwrap();
                // Freshly built mask for this window shape.
                let dynamic: Vec<Vec<bool>> = (0..len)
                    .map(|i| (0..start + len).map(|j| j <= start + i).collect())
                    .collect();
                for i in 0..len {
                    for j in 0..start + len {
                        assert_eq!(v.allows(i, j), dynamic[i][j]);
                    }
                }
            }
        }
    }
}

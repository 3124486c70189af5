use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::model::detector::{assemble_context, ContextBlock, PooledContext};
use crate::numerics::Tensor;

/// In-band state of a window awaiting detection.
#[derive(Clone, Debug)]
pub struct FullEntry {
    pub features: Tensor<f32>,
    pub pixels: Vec<u8>,
}

/// Pooled context for every window that may still serve as a neighbor, and
/// full-resolution features for windows not yet detected.
#[derive(Debug, Default)]
pub struct ContextCache {
    pooled: BTreeMap<(usize, usize), Tensor<f32>>,
    full: BTreeMap<(usize, usize), FullEntry>,
    inserted: HashSet<(usize, usize)>,
    pub peak_pooled: usize,
    pub peak_full: usize,
    /// Bytes of pooled and full features currently held.
    pub resident_bytes: usize,
    pub peak_bytes: usize,
}

fn entry_bytes(e: &FullEntry) -> usize {
    e.features.numel() * 4 + e.pixels.len()
}

impl ContextCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pooled_len(&self) -> usize {
        self.pooled.len()
    }

    pub fn full_len(&self) -> usize {
        self.full.len()
    }

    /// Stores both entries of a freshly encoded window. A second insert for the
    /// same window is an invariant violation.
    pub fn insert(&mut self, r: usize, c: usize, pooled: Tensor<f32>, full: FullEntry) -> Result<()> {
        if !self.inserted.insert((r, c)) {
            return Err(Error::CacheInvariant(format!("window ({r},{c}) inserted twice")));
        }
        self.resident_bytes += pooled.numel() * 4 + entry_bytes(&full);
        self.pooled.insert((r, c), pooled);
        self.full.insert((r, c), full);
        self.peak_pooled = self.peak_pooled.max(self.pooled.len());
        self.peak_full = self.peak_full.max(self.full.len());
        self.peak_bytes = self.peak_bytes.max(self.resident_bytes);
        Ok(())
    }

    pub fn was_inserted(&self, r: usize, c: usize) -> bool {
        self.inserted.contains(&(r, c))
    }

    pub fn full(&self, r: usize, c: usize) -> Result<&FullEntry> {
        self.full
            .get(&(r, c))
            .ok_or_else(|| Error::CacheInvariant(format!("full-resolution features of ({r},{c}) are not resident")))
    }

    pub fn evict_full_row(&mut self, r: usize) {
        let keys: Vec<_> = self.full.range((r, 0)..(r + 1, 0)).map(|(k, _)| *k).collect();
        for k in keys {
            let e = self.full.remove(&k).expect("key listed above");
            self.resident_bytes -= entry_bytes(&e);
        }
    }

    pub fn evict_pooled_row(&mut self, r: usize) {
        let keys: Vec<_> = self.pooled.range((r, 0)..(r + 1, 0)).map(|(k, _)| *k).collect();
        for k in keys {
            let t = self.pooled.remove(&k).expect("key listed above");
            self.resident_bytes -= t.numel() * 4;
        }
    }

    /// Context block for `(r, c)`. Positions off the slide are absent; with
    /// `causal`, so are positions not yet encoded. Any other missing entry is
    /// an invariant violation.
    pub fn context(&self, r: usize, c: usize, delta: usize, rows: usize, cols: usize, causal: bool) -> Result<ContextBlock> {
        let center = self.pooled.get(&(r, c)).ok_or_else(|| Error::CacheInvariant(format!("center ({r},{c}) is not resident")))?;
        let zero = Tensor::zeros(center.shape().to_vec());
        let d = delta as i64;
        let mut entries = Vec::with_capacity((2 * delta + 1).pow(2));
        for dr in -d..=d {
            for dc in -d..=d {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                let on_slide = rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols;
                let key = (rr.max(0) as usize, cc.max(0) as usize);
                let tokens = if !on_slide || (causal && !self.inserted.contains(&key)) {
                    None
                } else {
                    match self.pooled.get(&key) {
                        Some(t) => Some(t.clone()),
                        None if self.inserted.contains(&key) => {
                            return Err(Error::CacheInvariant(format!("neighbor {key:?} of ({r},{c}) was evicted too early")))
                        }
                        None => return Err(Error::CacheInvariant(format!("neighbor {key:?} of ({r},{c}) was never encoded"))),
                    }
                };
                entries.push(PooledContext {
                    present: tokens.is_some(),
                    tokens: tokens.unwrap_or_else(|| zero.clone()),
                    source: (rr, cc),
                });
            }
        }
        assemble_context(&entries, delta)
    }

    /// Keeps only the center entry present.
    pub fn center_only(block: &ContextBlock) -> ContextBlock {
        let n = block.blocks();
        let per = block.tokens.numel() / n;
        let mid = n / 2;
        let mut data = vec![0.0; block.tokens.numel()];
        data[mid * per..(mid + 1) * per].copy_from_slice(&block.tokens.data()[mid * per..(mid + 1) * per]);
        ContextBlock {
            tokens: Tensor::new(block.tokens.shape().to_vec(), data).expect("same shape"),
            presence: (0..n).map(|i| i == mid).collect(),
        }
    }
}

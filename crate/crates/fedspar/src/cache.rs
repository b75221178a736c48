//! Shared, size-bounded store of orthogonal matrices.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use fedspar_core::transform::{OrthoTransform, TransformError, TransformSource};

type Slot = Arc<OnceLock<Result<Arc<OrthoTransform>, TransformError>>>;

struct Entry {
    slot: Slot,
    bytes: usize,
    last_used: u64,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<(usize, u64), Entry>,
    bytes: usize,
    clock: u64,
}

/// Least-recently-used cache keyed by `(dim, seed)`. Concurrent requests for
/// the same key generate the matrix once.
pub struct TransformCache {
    inner: Mutex<Inner>,
    max_bytes: usize,
}

impl TransformCache {
    pub fn new(max_bytes: usize) -> Self {
        Self { inner: Mutex::new(Inner::default()), max_bytes }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, dim: usize, seed: u64) -> Slot {
        let mut inner = self.inner.lock().unwrap();
        inner.clock += 1;
        let now = inner.clock;
        if let Some(e) = inner.entries.get_mut(&(dim, seed)) {
            e.last_used = now;
            return e.slot.clone();
        }
        let bytes = dim * dim * 8;
        while inner.bytes + bytes > self.max_bytes && !inner.entries.is_empty() {
            let oldest = *inner.entries.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k).unwrap();
            let e = inner.entries.remove(&oldest).unwrap();
            inner.bytes -= e.bytes;
        }
        let slot = Slot::default();
        inner.entries.insert((dim, seed), Entry { slot: slot.clone(), bytes, last_used: now });
        inner.bytes += bytes;
        slot
    }
}

impl TransformSource for TransformCache {
    fn transform(&self, dim: usize, seed: u64) -> Result<Arc<OrthoTransform>, TransformError> {
        self.slot(dim, seed).get_or_init(|| OrthoTransform::generate_haar(dim, seed).map(Arc::new)).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reuses_and_evicts() {
        let cache = TransformCache::new(2 * 8 * 8 * 8);
        let a = cache.transform(8, 1).unwrap();
        assert!(Arc::ptr_eq(&a, &cache.transform(8, 1).unwrap()));
        cache.transform(8, 2).unwrap();
        cache.transform(8, 1).unwrap();
        cache.transform(8, 3).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(Arc::ptr_eq(&a, &cache.transform(8, 1).unwrap()));
        let fresh = OrthoTransform::generate_haar(8, 2).unwrap();
        assert_eq!(*cache.transform(8, 2).unwrap(), fresh);
    }
}

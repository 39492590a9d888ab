//! Process-wide memo tables for expensive per-(model, grid) results.
//!
//! Each key owns a `OnceLock`, so concurrent requests for the same key
//! compute once and everyone else waits on that computation.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::{Arc, Mutex, OnceLock};

pub struct KeyedCache<K, V> {
    capacity: usize,
    slots: Mutex<(HashMap<K, Arc<OnceLock<V>>>, Vec<K>)>,
}

impl<K: Eq + Hash + Clone, V: Clone> KeyedCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            slots: Mutex::new((HashMap::new(), Vec::new())),
        }
    }

    /// Returns the cached value for `key`, computing it with `init` on a miss.
    /// Failed computations are not cached.
    pub fn get_or_try_init<E>(&self, key: K, init: impl FnOnce() -> Result<V, E>) -> Result<V, E> {
        let cell = {
            let mut guard = self.slots.lock().unwrap_or_else(|p| p.into_inner());
            let (map, order) = &mut *guard;
            if let Some(cell) = map.get(&key) {
                cell.clone()
            } else {
                if order.len() >= self.capacity {
                    let evicted = order.remove(0);
                    map.remove(&evicted);
                }
                let cell = Arc::new(OnceLock::new());
                map.insert(key.clone(), cell.clone());
                order.push(key.clone());
                cell
            }
        };
        if let Some(v) = cell.get() {
            return Ok(v.clone());
        }
        match init() {
            Ok(v) => Ok(cell.get_or_init(|| v).clone()),
            Err(e) => {
                let mut guard = self.slots.lock().unwrap_or_else(|p| p.into_inner());
                let (map, order) = &mut *guard;
                if map.get(&key).is_some_and(|c| Arc::ptr_eq(c, &cell)) {
                    map.remove(&key);
                    order.retain(|k| k != &key);
                }
                Err(e)
            }
        }
    }
}

/// Bitwise key for a (k, t, n) triple.
pub fn model_key(k: f64, t: f64, n: usize) -> (u64, u64, usize) {
    (k.to_bits(), t.to_bits(), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn computes_once_and_evicts() {
        let cache: KeyedCache<u32, u32> = KeyedCache::new(2);
        let calls = AtomicUsize::new(0);
        for _ in 0..3 {
            let v: Result<u32, ()> = cache.get_or_try_init(1, || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(10)
            });
            assert_eq!(v, Ok(10));
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let _ = cache.get_or_try_init::<()>(2, || Ok(20));
        let _ = cache.get_or_try_init::<()>(3, || Ok(30));
        let _ = cache.get_or_try_init::<()>(1, || {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(11)
        });
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn errors_are_not_cached() {
        let cache: KeyedCache<u32, u32> = KeyedCache::new(4);
        assert_eq!(cache.get_or_try_init(7, || Err("boom")), Err("boom"));
        assert_eq!(cache.get_or_try_init::<&str>(7, || Ok(1)), Ok(1));
    }
}

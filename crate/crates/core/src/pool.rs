//! Per-thread free lists of boxed records, so that hot-path submissions reuse
//! previously allocated (and already sized) records instead of allocating.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

const MAX_PER_TYPE: usize = 1024;

thread_local! {
    static POOLS: RefCell<HashMap<TypeId, Vec<Box<dyn Any>>>> = RefCell::new(HashMap::new());
}

static HITS: AtomicU64 = AtomicU64::new(0);
static MISSES: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolStats {
    pub hits: u64,
    pub misses: u64,
}

/// Takes a record from the calling thread's pool, or allocates a fresh one.
/// Recycled records keep whatever state they were returned with; callers
/// reinitialise the fields they use.
pub fn take<T: Default + 'static>() -> Box<T> {
    let recycled = POOLS.with(|p| {
        p.borrow_mut()
            .get_mut(&TypeId::of::<T>())
            .and_then(|v| v.pop())
    });
    match recycled.and_then(|b| b.downcast::<T>().ok()) {
        Some(b) => {
            HITS.fetch_add(1, Ordering::Relaxed);
            b
        }
        None => {
            MISSES.fetch_add(1, Ordering::Relaxed);
            Box::default()
        }
    }
}

/// Returns a record to the calling thread's pool.
pub fn give<T: 'static>(record: Box<T>) {
    POOLS.with(|p| {
        let mut p = p.borrow_mut();
        let v = p.entry(TypeId::of::<T>()).or_default();
        if v.len() < MAX_PER_TYPE {
            v.push(record);
        }
    });
}

/// Process-wide hit/miss counters.
pub fn stats() -> PoolStats {
    PoolStats {
        hits: HITS.load(Ordering::Relaxed),
        misses: MISSES.load(Ordering::Relaxed),
    }
}

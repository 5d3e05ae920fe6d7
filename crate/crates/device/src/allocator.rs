//! First-fit pool allocator over an address-ordered free list.
//!
//! The pool is reserved once and carved into aligned blocks. Freed blocks are
//! coalesced with their neighbours so that releasing every live allocation
//! restores a single free block spanning the usable capacity.

use std::collections::{BTreeMap, HashMap};

pub const DEFAULT_ALIGNMENT: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocError {
    OutOfMemory { requested: u64, largest_free: u64 },
    ZeroSize,
    DoubleFree { offset: u64 },
}

#[derive(Debug, Clone)]
pub struct FirstFitAllocator {
    capacity: u64,
    alignment: u64,
    /// offset -> length, address ordered
    free: BTreeMap<u64, u64>,
    /// offset -> reserved length
    live: HashMap<u64, u64>,
}

impl FirstFitAllocator {
    pub fn new(capacity: u64) -> Self {
        Self::with_alignment(capacity, DEFAULT_ALIGNMENT)
    }

    pub fn with_alignment(capacity: u64, alignment: u64) -> Self {
        assert!(alignment.is_power_of_two(), "alignment must be a power of two");
        // The tail that cannot hold an aligned block is never handed out.
        let usable = capacity - capacity % alignment;
        let mut free = BTreeMap::new();
        if usable > 0 {
            free.insert(0, usable);
        }
        Self {
            capacity,
            alignment,
            free,
            live: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn alignment(&self) -> u64 {
        self.alignment
    }

    /// Bytes actually reserved for a request of `size` bytes.
    pub fn reserved_size(&self, size: u64) -> u64 {
        size.div_ceil(self.alignment) * self.alignment
    }

    pub fn allocate(&mut self, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let need = self.reserved_size(size);
        let hit = self
            .free
            .iter()
            .find(|(_, &len)| len >= need)
            .map(|(&off, &len)| (off, len));
        let Some((offset, len)) = hit else {
            return Err(AllocError::OutOfMemory {
                requested: size,
                largest_free: self.largest_free(),
            });
        };
        self.free.remove(&offset);
        if len > need {
            self.free.insert(offset + need, len - need);
        }
        self.live.insert(offset, need);
        Ok(offset)
    }

    pub fn free(&mut self, offset: u64) -> Result<u64, AllocError> {
        let Some(mut len) = self.live.remove(&offset) else {
            return Err(AllocError::DoubleFree { offset });
        };
        let reserved = len;
        let mut start = offset;
        if let Some((&prev, &prev_len)) = self.free.range(..offset).next_back() {
            if prev + prev_len == offset {
                self.free.remove(&prev);
                start = prev;
                len += prev_len;
            }
        }
        if let Some(next_len) = self.free.remove(&(offset + reserved)) {
            len += next_len;
        }
        self.free.insert(start, len);
        Ok(reserved)
    }

    pub fn is_live(&self, offset: u64) -> bool {
        self.live.contains_key(&offset)
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.values().sum()
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    pub fn largest_free(&self) -> u64 {
        self.free.values().copied().max().unwrap_or(0)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Free blocks as `(offset, len)` in address order.
    pub fn free_blocks(&self) -> Vec<(u64, u64)> {
        self.free.iter().map(|(&o, &l)| (o, l)).collect()
    }

    /// Live blocks as `(offset, reserved_len)` in address order.
    pub fn live_blocks(&self) -> Vec<(u64, u64)> {
        let mut v: Vec<_> = self.live.iter().map(|(&o, &l)| (o, l)).collect();
        v.sort_unstable();
        v
    }

    /// Usable bytes: capacity rounded down to the alignment.
    pub fn usable(&self) -> u64 {
        self.capacity - self.capacity % self.alignment
    }
}

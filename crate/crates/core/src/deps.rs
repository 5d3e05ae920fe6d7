use std::collections::HashMap;

use crate::{AccessMode, ObjectId, TaskId};

#[derive(Debug, Default, Clone)]
struct ObjectHistory {
    last_writer: Option<TaskId>,
    readers_since_write: Vec<TaskId>,
}

/// Infers read-after-write, write-after-read and write-after-write edges from
/// the order in which operations are registered.
#[derive(Debug, Default)]
pub struct DependencyTracker {
    objects: HashMap<ObjectId, ObjectHistory>,
}

impl DependencyTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `task`'s accesses and returns the earlier operations it must
    /// wait for, deduplicated, in first-seen order.
    pub fn register(&mut self, task: TaskId, args: &[(ObjectId, AccessMode)]) -> Vec<TaskId> {
        let mut deps = Vec::new();
        let push = |d: TaskId, deps: &mut Vec<TaskId>| {
            if d != task && !deps.contains(&d) {
                deps.push(d);
            }
        };
        for &(obj, mode) in args {
            let h = self.objects.entry(obj).or_default();
            if let Some(w) = h.last_writer {
                push(w, &mut deps);
            }
            if mode.writes() {
                for &r in &h.readers_since_write {
                    push(r, &mut deps);
                }
                h.last_writer = Some(task);
                h.readers_since_write.clear();
            } else {
                h.readers_since_write.push(task);
            }
        }
        deps
    }

    /// Drops history entries that only mention finished operations.
    pub fn prune(&mut self, mut finished: impl FnMut(TaskId) -> bool) {
        self.objects.retain(|_, h| {
            h.readers_since_write.retain(|&r| !finished(r));
            if h.last_writer.is_some_and(&mut finished) {
                h.last_writer = None;
            }
            h.last_writer.is_some() || !h.readers_since_write.is_empty()
        });
    }

    pub fn forget(&mut self, obj: ObjectId) {
        self.objects.remove(&obj);
    }

    pub fn tracked_objects(&self) -> usize {
        self.objects.len()
    }
}

//! Time bases for device operations.
//!
//! In virtual mode every asynchronous operation has a precomputed completion
//! time and the clock only moves when a driver asks it to jump to the next
//! pending event. Nothing sleeps, so makespans are deterministic.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;

use crate::ClockMode;

#[derive(Debug, Clone, Copy, PartialEq)]
struct EventTime(f64);

impl Eq for EventTime {}

impl PartialOrd for EventTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Default)]
struct VirtualState {
    now: f64,
    events: BinaryHeap<Reverse<EventTime>>,
}

#[derive(Debug, Default)]
pub struct VirtualClock {
    state: Mutex<VirtualState>,
}

impl VirtualClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn now(&self) -> f64 {
        self.state.lock().now
    }

    /// Registers a future completion time.
    pub fn schedule(&self, at: f64) {
        let mut st = self.state.lock();
        if at > st.now {
            st.events.push(Reverse(EventTime(at)));
        }
    }

    /// Earliest pending event strictly after `now`.
    pub fn next_event(&self) -> Option<f64> {
        let mut st = self.state.lock();
        let now = st.now;
        while let Some(Reverse(EventTime(t))) = st.events.peek().copied() {
            if t > now {
                return Some(t);
            }
            st.events.pop();
        }
        None
    }

    /// Jumps to the next pending event. Returns the new time, or `None` when
    /// no event is pending.
    pub fn advance_to_next(&self) -> Option<f64> {
        let mut st = self.state.lock();
        loop {
            let Reverse(EventTime(t)) = st.events.pop()?;
            if t > st.now {
                st.now = t;
                // Drop every event due at the same instant.
                while st.events.peek().is_some_and(|Reverse(EventTime(u))| *u <= t) {
                    st.events.pop();
                }
                return Some(t);
            }
        }
    }

    pub fn pending_events(&self) -> usize {
        let st = self.state.lock();
        st.events.iter().filter(|Reverse(EventTime(t))| *t > st.now).count()
    }
}

#[derive(Debug, Clone)]
pub enum Clock {
    Virtual(Arc<VirtualClock>),
    Wall(Instant),
}

impl Clock {
    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Virtual => Clock::Virtual(VirtualClock::new()),
            ClockMode::Wall => Clock::Wall(Instant::now()),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Virtual(_) => ClockMode::Virtual,
            Clock::Wall(_) => ClockMode::Wall,
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    /// Seconds since the clock's origin.
    pub fn now(&self) -> f64 {
        match self {
            Clock::Virtual(v) => v.now(),
            Clock::Wall(epoch) => epoch.elapsed().as_secs_f64(),
        }
    }

    pub fn as_virtual(&self) -> Option<&Arc<VirtualClock>> {
        match self {
            Clock::Virtual(v) => Some(v),
            Clock::Wall(_) => None,
        }
    }

    /// Virtual mode: jump to the next event. Wall mode: yields the thread.
    /// Returns whether time moved (always true in wall mode).
    pub fn advance(&self) -> bool {
        match self {
            Clock::Virtual(v) => v.advance_to_next().is_some(),
            Clock::Wall(_) => {
                std::thread::yield_now();
                true
            }
        }
    }
}

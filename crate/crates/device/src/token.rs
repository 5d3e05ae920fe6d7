use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use crate::Clock;

pub type TokenId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Transfer,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenStatus {
    Pending,
    Complete,
    Failed,
}

const PENDING: u8 = 0;
const COMPLETE: u8 = 1;
const FAILED: u8 = 2;

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

struct TokenInner {
    id: TokenId,
    kind: TokenKind,
    status: AtomicU8,
    /// Virtual completion time; unused under the wall clock.
    complete_at: f64,
    /// Outcome decided when the operation executed, published at completion.
    outcome: Mutex<Option<Result<(), String>>>,
    clock: Clock,
}

/// Shareable handle to an asynchronous device operation.
#[derive(Clone)]
pub struct CompletionToken(Arc<TokenInner>);

impl fmt::Debug for CompletionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionToken")
            .field("id", &self.0.id)
            .field("kind", &self.0.kind)
            .field("status", &self.status())
            .finish()
    }
}

impl CompletionToken {
    pub(crate) fn new(kind: TokenKind, clock: Clock, complete_at: f64) -> Self {
        Self(Arc::new(TokenInner {
            id: NEXT_TOKEN.fetch_add(1, Ordering::Relaxed),
            kind,
            status: AtomicU8::new(PENDING),
            complete_at,
            outcome: Mutex::new(None),
            clock,
        }))
    }

    /// A token that is already complete.
    pub fn completed(kind: TokenKind, clock: Clock) -> Self {
        let t = Self::new(kind, clock, 0.0);
        *t.0.outcome.lock() = Some(Ok(()));
        t.0.status.store(COMPLETE, Ordering::Release);
        t
    }

    pub fn id(&self) -> TokenId {
        self.0.id
    }

    pub fn kind(&self) -> TokenKind {
        self.0.kind
    }

    /// Virtual completion time (0 under the wall clock).
    pub fn complete_at(&self) -> f64 {
        self.0.complete_at
    }

    pub(crate) fn set_outcome(&self, outcome: Result<(), String>) {
        *self.0.outcome.lock() = Some(outcome);
    }

    /// Wall mode: publish the outcome recorded by the worker.
    pub(crate) fn finish(&self) {
        let ok = matches!(*self.0.outcome.lock(), Some(Ok(())));
        self.0
            .status
            .store(if ok { COMPLETE } else { FAILED }, Ordering::Release);
    }

    /// Non-blocking status check. Never moves the clock.
    pub fn status(&self) -> TokenStatus {
        match self.0.status.load(Ordering::Acquire) {
            COMPLETE => return TokenStatus::Complete,
            FAILED => return TokenStatus::Failed,
            _ => {}
        }
        if let Clock::Virtual(v) = &self.0.clock {
            if v.now() >= self.0.complete_at && self.0.outcome.lock().is_some() {
                self.finish();
                return self.status();
            }
        }
        TokenStatus::Pending
    }

    pub fn is_done(&self) -> bool {
        self.status() != TokenStatus::Pending
    }

    pub fn error(&self) -> Option<String> {
        match self.status() {
            TokenStatus::Failed => self.0.outcome.lock().as_ref().and_then(|o| o.clone().err()),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub(crate) struct WeakToken(std::sync::Weak<TokenInner>);

impl WeakToken {
    pub(crate) fn upgrade(&self) -> Option<CompletionToken> {
        self.0.upgrade().map(CompletionToken)
    }
}

impl CompletionToken {
    pub(crate) fn downgrade(&self) -> WeakToken {
        WeakToken(Arc::downgrade(&self.0))
    }
}

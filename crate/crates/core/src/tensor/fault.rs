//! Mutation hook for exercising the gradient checker.
//!
//! When a fault is armed, the backward rule of the named op kind negates the
//! gradient it propagates. The hook is thread-local so concurrent tests do
//! not interfere.

use std::cell::RefCell;

thread_local! {
    static ARMED: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Arms a sign flip in the backward rule of `op` (e.g. `"relu"`, `"matmul"`).
pub fn inject_sign_flip(op: &str) {
    ARMED.with(|a| *a.borrow_mut() = Some(op.to_string()));
}

pub fn clear() {
    ARMED.with(|a| *a.borrow_mut() = None);
}

pub(crate) fn flipped(op: &str) -> bool {
    ARMED.with(|a| a.borrow().as_deref() == Some(op))
}

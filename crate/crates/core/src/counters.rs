//! Per-thread invocation counters for the training-only branches.
//!
//! The support-set weights and the ground-truth text encoder must never run
//! while decoding for evaluation; these counters make that observable. They
//! are thread-local so concurrent runs in one process do not interfere.

use std::cell::Cell;

thread_local! {
    static SUPPORT_WEIGHTS: Cell<u64> = const { Cell::new(0) };
    static TEXT_ENCODER: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub support_weights: u64,
    pub text_encoder: u64,
}

impl std::ops::Sub for Counters {
    type Output = Counters;

    fn sub(self, rhs: Counters) -> Counters {
        Counters {
            support_weights: self.support_weights - rhs.support_weights,
            text_encoder: self.text_encoder - rhs.text_encoder,
        }
    }
}

pub fn snapshot() -> Counters {
    Counters {
        support_weights: SUPPORT_WEIGHTS.with(Cell::get),
        text_encoder: TEXT_ENCODER.with(Cell::get),
    }
}

pub fn reset() {
    SUPPORT_WEIGHTS.with(|c| c.set(0));
    TEXT_ENCODER.with(|c| c.set(0));
}

pub(crate) fn bump_support_weights() {
    SUPPORT_WEIGHTS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn bump_text_encoder() {
    TEXT_ENCODER.with(|c| c.set(c.get() + 1));
}

//! Per-thread evaluation counters.
//!
//! Counters are thread-local so that concurrent workers do not pollute each
//! other's counts. Code that must prove it never touches the model (the
//! grid-mode homotopy) is checked by snapshotting before and after on the
//! calling thread.

use std::cell::Cell;

thread_local! {
    static DYNAMICS: Cell<u64> = const { Cell::new(0) };
    static COSTS: Cell<u64> = const { Cell::new(0) };
    static OPTIMIZATIONS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub dynamics: u64,
    pub costs: u64,
    pub optimizations: u64,
}

impl Counters {
    pub fn snapshot() -> Self {
        Counters {
            dynamics: DYNAMICS.with(Cell::get),
            costs: COSTS.with(Cell::get),
            optimizations: OPTIMIZATIONS.with(Cell::get),
        }
    }

    /// Counts accumulated since `earlier` was taken.
    pub fn since(earlier: Counters) -> Self {
        let now = Self::snapshot();
        Counters {
            dynamics: now.dynamics - earlier.dynamics,
            costs: now.costs - earlier.costs,
            optimizations: now.optimizations - earlier.optimizations,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Counters::default()
    }
}

pub(crate) fn count_dynamics() {
    DYNAMICS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_cost() {
    COSTS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_optimization() {
    OPTIMIZATIONS.with(|c| c.set(c.get() + 1));
}

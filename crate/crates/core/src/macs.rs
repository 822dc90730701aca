//! Thread-local multiply-accumulate counter.
//!
//! Every matrix product kernel reports `m * k * n` MACs to the category that is
//! active on the current thread. The attention core switches to
//! [`Category::Correlation`] around its score and mixing products, so callers
//! can separate the instance-correlation cost from projection cost.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Projection,
    Correlation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub projection: u64,
    pub correlation: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.projection + self.correlation
    }
}

thread_local! {
    static ACTIVE: Cell<Category> = const { Cell::new(Category::Projection) };
    static PROJECTION: Cell<u64> = const { Cell::new(0) };
    static CORRELATION: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(n: u64) {
    let cell = match ACTIVE.with(Cell::get) {
        Category::Projection => &PROJECTION,
        Category::Correlation => &CORRELATION,
    };
    cell.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    PROJECTION.with(|c| c.set(0));
    CORRELATION.with(|c| c.set(0));
}

pub fn snapshot() -> MacCount {
    MacCount {
        projection: PROJECTION.with(Cell::get),
        correlation: CORRELATION.with(Cell::get),
    }
}

/// Counts the MACs performed by `f` on this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, MacCount) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    (
        out,
        MacCount {
            projection: after.projection - before.projection,
            correlation: after.correlation - before.correlation,
        },
    )
}

/// Routes MACs to `category` until the guard drops.
#[must_use]
pub struct CategoryGuard {
    previous: Category,
}

pub fn enter(category: Category) -> CategoryGuard {
    let previous = ACTIVE.with(|a| a.replace(category));
    CategoryGuard { previous }
}

impl Drop for CategoryGuard {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(self.previous));
    }
}

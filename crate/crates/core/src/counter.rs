use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Shared count of PDE-type linear solves. Cloning shares the count.
#[derive(Clone, Debug, Default)]
pub struct SolveCounter(Arc<AtomicUsize>);

impl SolveCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

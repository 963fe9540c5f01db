//! Counted activation memory.
//!
//! Forward passes report every activation buffer they create to an
//! [`ActivationMeter`]. Buffers stay live until released, so the peak is the
//! number of floats an autograd engine would hold for the backward pass.

/// Live and peak float counts for one or more forward passes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationMeter {
    live: usize,
    peak: usize,
    allocations: usize,
}

impl ActivationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, floats: usize) {
        self.live += floats;
        self.allocations += 1;
        self.peak = self.peak.max(self.live);
    }

    pub fn release(&mut self, floats: usize) {
        debug_assert!(floats <= self.live, "released more than allocated");
        self.live = self.live.saturating_sub(floats);
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn allocations(&self) -> usize {
        self.allocations
    }
}

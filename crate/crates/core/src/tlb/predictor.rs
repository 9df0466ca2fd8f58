//! Region-indexed page-size predictor: 2-bit saturating counters selected by
//! `mix64(va >> 30)`.

use crate::addr::{PageSize, VirtAddr};
use crate::config::PredictorConfig;
use crate::hash::mix64;

const STATIC_ORDER: [PageSize; 3] = [PageSize::Size4K, PageSize::Size2M, PageSize::Size1G];
const HUGE_FIRST: [PageSize; 3] = [PageSize::Size2M, PageSize::Size4K, PageSize::Size1G];

#[derive(Debug, Clone)]
pub struct SizePredictor {
    enabled: bool,
    max: u8,
    counters: Vec<u8>,
}

impl SizePredictor {
    pub fn new(cfg: &PredictorConfig) -> Self {
        SizePredictor {
            enabled: cfg.enabled,
            max: ((1u32 << cfg.counter_bits.clamp(1, 8)) - 1) as u8,
            counters: vec![0; cfg.table_entries.max(1) as usize],
        }
    }

    fn slot(&self, va: VirtAddr) -> usize {
        (mix64(va.as_u64() >> 30) % self.counters.len() as u64) as usize
    }

    pub fn counter(&self, va: VirtAddr) -> u8 {
        self.counters[self.slot(va)]
    }

    /// Probe order for all sizes; the static order when disabled.
    pub fn order(&self, va: VirtAddr) -> [PageSize; 3] {
        if self.enabled && self.counter(va) >= 2 {
            HUGE_FIRST
        } else {
            STATIC_ORDER
        }
    }

    /// Trains on the size a translation resolved to.
    pub fn update(&mut self, va: VirtAddr, resolved: PageSize) {
        if !self.enabled {
            return;
        }
        let i = self.slot(va);
        let c = &mut self.counters[i];
        if resolved == PageSize::Size2M {
            *c = (*c + 1).min(self.max);
        } else {
            *c = c.saturating_sub(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn on() -> SizePredictor {
        SizePredictor::new(&PredictorConfig { enabled: true, table_entries: 64, counter_bits: 2 })
    }

    #[test]
    fn counter_examples() {
        let va = VirtAddr::new(0x4000_0000).unwrap();
        let mut p = on();
        assert_eq!(p.order(va)[0], PageSize::Size4K);
        p.update(va, PageSize::Size2M);
        p.update(va, PageSize::Size2M);
        assert_eq!(p.counter(va), 2);
        assert_eq!(p.order(va)[0], PageSize::Size2M);
        p.update(va, PageSize::Size4K);
        assert_eq!(p.counter(va), 1);
        assert_eq!(p.order(va)[0], PageSize::Size4K);
    }

    #[test]
    fn saturates_both_ways() {
        let va = VirtAddr::new(0).unwrap();
        let mut p = on();
        for _ in 0..10 {
            p.update(va, PageSize::Size2M);
        }
        assert_eq!(p.counter(va), 3);
        for _ in 0..10 {
            p.update(va, PageSize::Size4K);
        }
        assert_eq!(p.counter(va), 0);
    }
}

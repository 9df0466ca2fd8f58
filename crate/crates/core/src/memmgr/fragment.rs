//! Artificial fragmentation generator.

use super::{Buddy, MmError};
use crate::hash::SplitMix64;

pub const FRAGMENT_TOLERANCE: f64 = 0.02;
pub const FRAGMENT_ITERATION_CAP: u64 = 10_000_000;

impl Buddy {
    /// Pins random frames (occasionally releasing a random pinned one) until
    /// the fmfi lands within [`FRAGMENT_TOLERANCE`] of `target`.
    pub fn fragment_to(&mut self, target: f64, seed: u64) -> Result<f64, MmError> {
        self.fragment_to_capped(target, seed, FRAGMENT_ITERATION_CAP)
    }

    pub fn fragment_to_capped(&mut self, target: f64, seed: u64, cap: u64) -> Result<f64, MmError> {
        let mut rng = SplitMix64::new(seed);
        let mut held: Vec<u64> = self.pinned().collect();
        for _ in 0..cap {
            let f = self.fmfi();
            if (f - target).abs() <= FRAGMENT_TOLERANCE {
                return Ok(f);
            }
            let release = if f < target {
                if self.free_frames() == 0 {
                    break;
                }
                !held.is_empty() && rng.below(16) == 0
            } else {
                if held.is_empty() {
                    break;
                }
                true
            };
            if release {
                let i = rng.below(held.len() as u64) as usize;
                self.unpin(held.swap_remove(i));
            } else {
                let pfn = rng.below(self.total_frames());
                if self.pin(pfn) {
                    held.push(pfn);
                }
            }
        }
        Err(MmError::TargetUnreachable { target, achieved: self.fmfi() })
    }

    /// Pins every odd frame so no free block exceeds order 0 (fmfi = 1).
    pub fn fragment_checkerboard(&mut self) -> f64 {
        for pfn in (1..self.total_frames()).step_by(2) {
            self.pin(pfn);
        }
        self.fmfi()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_target_on_fresh_pool_is_immediate() {
        let mut b = Buddy::new(1 << 12, 10);
        assert_eq!(b.fragment_to(0.0, 42), Ok(0.0));
        assert_eq!(b.pinned_frames(), 0);
    }

    #[test]
    fn reaches_targets_and_is_deterministic() {
        for target in [0.3, 0.6, 0.9] {
            let mut a = Buddy::new(1 << 16, 10);
            let fa = a.fragment_to(target, 42).unwrap();
            assert!((fa - target).abs() <= FRAGMENT_TOLERANCE, "{target}: {fa}");
            let mut b = Buddy::new(1 << 16, 10);
            assert_eq!(b.fragment_to(target, 42).unwrap(), fa);
            assert_eq!(a, b);
            a.audit().unwrap();
        }
    }

    #[test]
    fn unreachable_when_nothing_can_move() {
        let mut b = Buddy::new(1 << 10, 10);
        b.alloc_block(10, super::super::Owner::User).unwrap();
        assert!(matches!(b.fragment_to_capped(0.5, 1, 1000), Err(MmError::TargetUnreachable { .. })));
    }

    #[test]
    fn checkerboard_is_fully_fragmented() {
        let mut b = Buddy::new(1 << 12, 10);
        assert_eq!(b.fragment_checkerboard(), 1.0);
        assert!(b.alloc_block(1, super::super::Owner::User).is_err());
    }
}

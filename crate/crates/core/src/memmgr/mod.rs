//! Physical memory emulation: buddy allocator, fragmentation generator,
//! THP reservations and snapshots.

mod fragment;
mod reserve;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addr::HUGE_ORDER;

pub use reserve::{Reservation, ReservationTable};
pub use snapshot::SNAPSHOT_VERSION;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MmError {
    #[error("out of memory (order {order})")]
    OutOfMemory { order: u32 },
    #[error("double free of frame {pfn:#x}")]
    DoubleFree { pfn: u64 },
    #[error("no allocated block at frame {pfn:#x} with order {order}")]
    UnknownBlock { pfn: u64, order: u32 },
    #[error("order {order} exceeds max order {max}")]
    BadOrder { order: u32, max: u32 },
    #[error("fragmentation target {target} unreachable (achieved {achieved:.6})")]
    TargetUnreachable { target: f64, achieved: f64 },
    #[error("snapshot checksum mismatch")]
    ChecksumMismatch,
    #[error("snapshot schema version {found} not supported")]
    SchemaVersionMismatch { found: u64 },
    #[error("inconsistent snapshot: {0}")]
    CorruptSnapshot(String),
}

/// Who holds an allocated block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    /// Frames handed to a fault handler (user data, reservations).
    User,
    /// Translation structures (page tables, stashes).
    PageTable,
    /// Fixed carve-outs: segments, RestSeg, software TLB.
    Reserved,
}

/// Free frames per order and the huge-page fragmentation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentationReport {
    pub fmfi: f64,
    pub free_frames_per_order: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buddy {
    total_frames: u64,
    max_order: u32,
    free: Vec<BTreeSet<u64>>,
    allocated: BTreeMap<u64, (u32, Owner)>,
    pinned: BTreeSet<u64>,
}

impl Buddy {
    /// `total_frames` must be a non-zero multiple of `2^max_order`.
    pub fn new(total_frames: u64, max_order: u32) -> Self {
        assert!(total_frames > 0 && total_frames.is_multiple_of(1 << max_order));
        let mut free = vec![BTreeSet::new(); max_order as usize + 1];
        free[max_order as usize] = (0..total_frames).step_by(1 << max_order).collect();
        Buddy { total_frames, max_order, free, allocated: BTreeMap::new(), pinned: BTreeSet::new() }
    }

    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn free_frames(&self) -> u64 {
        self.free.iter().enumerate().map(|(o, s)| (s.len() as u64) << o).sum()
    }

    pub fn allocated_frames(&self) -> u64 {
        self.allocated.values().map(|(o, _)| 1u64 << o).sum()
    }

    pub fn pinned_frames(&self) -> u64 {
        self.pinned.len() as u64
    }

    /// Free blocks per order.
    pub fn free_blocks(&self, order: u32) -> impl Iterator<Item = u64> + '_ {
        self.free[order as usize].iter().copied()
    }

    pub fn allocated_blocks(&self) -> impl Iterator<Item = (u64, u32, Owner)> + '_ {
        self.allocated.iter().map(|(&p, &(o, w))| (p, o, w))
    }

    pub fn pinned(&self) -> impl Iterator<Item = u64> + '_ {
        self.pinned.iter().copied()
    }

    pub fn order_of(&self, pfn: u64) -> Option<(u32, Owner)> {
        self.allocated.get(&pfn).copied()
    }

    /// `1 - free frames in blocks of order >= 9 / total free frames`, 0 when
    /// nothing is free.
    pub fn fmfi(&self) -> f64 {
        let total = self.free_frames();
        if total == 0 {
            return 0.0;
        }
        let huge: u64 = (HUGE_ORDER.min(self.max_order)..=self.max_order)
            .map(|o| (self.free[o as usize].len() as u64) << o)
            .sum();
        1.0 - huge as f64 / total as f64
    }

    pub fn report(&self) -> FragmentationReport {
        FragmentationReport {
            fmfi: self.fmfi(),
            free_frames_per_order: self.free.iter().enumerate().map(|(o, s)| (s.len() as u64) << o).collect(),
        }
    }

    fn check_order(&self, order: u32) -> Result<(), MmError> {
        if order > self.max_order {
            Err(MmError::BadOrder { order, max: self.max_order })
        } else {
            Ok(())
        }
    }

    /// Lowest-address block of the smallest sufficient order, split down.
    pub fn alloc_block(&mut self, order: u32, owner: Owner) -> Result<u64, MmError> {
        self.check_order(order)?;
        let from = (order..=self.max_order)
            .find(|&o| !self.free[o as usize].is_empty())
            .ok_or(MmError::OutOfMemory { order })?;
        let pfn = self.free[from as usize].pop_first().expect("non-empty list");
        for o in (order..from).rev() {
            self.free[o as usize].insert(pfn + (1 << o));
        }
        self.allocated.insert(pfn, (order, owner));
        Ok(pfn)
    }

    /// Frees exactly the block `(pfn, order)`, coalescing eagerly.
    pub fn free_block(&mut self, pfn: u64, order: u32) -> Result<(), MmError> {
        match self.allocated.get(&pfn) {
            Some(&(o, _)) if o == order => {
                self.allocated.remove(&pfn);
                self.insert_free(pfn, order);
                Ok(())
            }
            Some(_) => Err(MmError::UnknownBlock { pfn, order }),
            None if self.free_containing(pfn).is_some() => Err(MmError::DoubleFree { pfn }),
            None => Err(MmError::UnknownBlock { pfn, order }),
        }
    }

    /// Like [`free_block`](Self::free_block) but also accepts a sub-block of
    /// a larger allocated block, splitting the allocation first.
    pub fn release(&mut self, pfn: u64, order: u32) -> Result<(), MmError> {
        self.check_order(order)?;
        if !pfn.is_multiple_of(1 << order) {
            return Err(MmError::UnknownBlock { pfn, order });
        }
        while !self.allocated.get(&pfn).is_some_and(|&(o, _)| o <= order) {
            let (base, o) = match self.allocated_containing(pfn) {
                Some((base, o, _)) if o > order => (base, o),
                _ => break,
            };
            self.split_allocated(base, o);
        }
        self.free_block(pfn, order)
    }

    /// Splits an allocated block into two allocated halves.
    pub fn split_allocated(&mut self, pfn: u64, order: u32) {
        let (o, owner) = self.allocated.remove(&pfn).expect("allocated block");
        assert!(o == order && order > 0);
        let half = order - 1;
        self.allocated.insert(pfn, (half, owner));
        self.allocated.insert(pfn + (1 << half), (half, owner));
    }

    fn insert_free(&mut self, mut pfn: u64, mut order: u32) {
        while order < self.max_order {
            let buddy = pfn ^ (1 << order);
            if !self.free[order as usize].remove(&buddy) {
                break;
            }
            pfn = pfn.min(buddy);
            order += 1;
        }
        self.free[order as usize].insert(pfn);
    }

    fn free_containing(&self, pfn: u64) -> Option<(u64, u32)> {
        (0..=self.max_order).find_map(|o| {
            let base = pfn & !((1u64 << o) - 1);
            self.free[o as usize].contains(&base).then_some((base, o))
        })
    }

    fn allocated_containing(&self, pfn: u64) -> Option<(u64, u32, Owner)> {
        let (&base, &(o, w)) = self.allocated.range(..=pfn).next_back()?;
        (pfn < base + (1 << o)).then_some((base, o, w))
    }

    pub fn is_free(&self, pfn: u64) -> bool {
        self.free_containing(pfn).is_some()
    }

    /// Greedy largest-first cover of `frames` frames. Falls back to smaller
    /// orders when no block of the wanted order is free. Rolls back on
    /// failure.
    pub fn alloc_contig(&mut self, frames: u64, owner: Owner) -> Result<Vec<(u64, u32)>, MmError> {
        assert!(frames >= 1);
        let mut out = Vec::new();
        let mut remaining = frames;
        while remaining > 0 {
            let mut order = (63 - remaining.leading_zeros()).min(self.max_order);
            let pfn = loop {
                match self.alloc_block(order, owner) {
                    Ok(p) => break Some(p),
                    Err(_) if order > 0 => order -= 1,
                    Err(_) => break None,
                }
            };
            match pfn {
                Some(p) => {
                    out.push((p, order));
                    remaining -= 1 << order;
                }
                None => {
                    for (p, o) in out.into_iter().rev() {
                        self.free_block(p, o).expect("rollback of fresh block");
                    }
                    return Err(MmError::OutOfMemory { order: 0 });
                }
            }
        }
        Ok(out)
    }

    /// Allocates `frames` physically consecutive frames at the lowest
    /// address that fits. Returns the first frame.
    pub fn alloc_run(&mut self, frames: u64, owner: Owner) -> Result<u64, MmError> {
        assert!(frames >= 1);
        let mut blocks: Vec<(u64, u32)> =
            (0..=self.max_order).flat_map(|o| self.free[o as usize].iter().map(move |&p| (p, o))).collect();
        blocks.sort_unstable();
        let mut start = None;
        let mut run: Option<(u64, u64)> = None;
        for (p, o) in blocks {
            let end = p + (1 << o);
            let (base, _) = match run {
                Some((b, e)) if e == p => *run.insert((b, end)),
                _ => *run.insert((p, end)),
            };
            if end - base >= frames {
                start = Some(base);
                break;
            }
        }
        let start = start.ok_or(MmError::OutOfMemory { order: 0 })?;
        self.carve(start, frames);
        for (p, o) in decompose(start, start + frames, self.max_order) {
            self.allocated.insert(p, (o, owner));
        }
        Ok(start)
    }

    /// Frees a run previously returned by [`alloc_run`](Self::alloc_run).
    pub fn free_run(&mut self, start: u64, frames: u64) -> Result<(), MmError> {
        for (p, o) in decompose(start, start + frames, self.max_order) {
            self.release(p, o)?;
        }
        Ok(())
    }

    /// Removes the free frames `[start, start+n)` from the free lists. Every
    /// frame in the range must be free.
    fn carve(&mut self, start: u64, n: u64) {
        let end = start + n;
        let mut pfn = start;
        while pfn < end {
            let (base, o) = self.free_containing(pfn).expect("carved frame must be free");
            self.free[o as usize].remove(&base);
            let block_end = base + (1 << o);
            for (p, po) in decompose(base, pfn, self.max_order) {
                self.free[po as usize].insert(p);
            }
            let cut = block_end.min(end);
            for (p, po) in decompose(cut, block_end, self.max_order) {
                self.free[po as usize].insert(p);
            }
            pfn = cut;
        }
    }

    /// Pins one free frame (fragmentation generator). Returns false when the
    /// frame is not free.
    pub fn pin(&mut self, pfn: u64) -> bool {
        if pfn >= self.total_frames || !self.is_free(pfn) {
            return false;
        }
        self.carve(pfn, 1);
        self.pinned.insert(pfn);
        true
    }

    pub fn unpin(&mut self, pfn: u64) -> bool {
        if !self.pinned.remove(&pfn) {
            return false;
        }
        self.insert_free(pfn, 0);
        true
    }

    /// Full structural check: alignment, disjointness, eager coalescing and
    /// frame conservation.
    pub fn audit(&self) -> Result<(), String> {
        let mut owner = vec![0u8; self.total_frames as usize];
        let mut mark = |base: u64, order: u32, tag: u8| -> Result<(), String> {
            if !base.is_multiple_of(1 << order) {
                return Err(format!("block {base:#x} misaligned for order {order}"));
            }
            if base + (1 << order) > self.total_frames {
                return Err(format!("block {base:#x} order {order} beyond pool"));
            }
            for f in base..base + (1 << order) {
                if owner[f as usize] != 0 {
                    return Err(format!("frame {f:#x} covered twice"));
                }
                owner[f as usize] = tag;
            }
            Ok(())
        };
        for (o, set) in self.free.iter().enumerate() {
            for &p in set {
                mark(p, o as u32, 1)?;
                if (o as u32) < self.max_order && set.contains(&(p ^ (1 << o))) {
                    return Err(format!("free buddies {p:#x} order {o} not coalesced"));
                }
            }
        }
        for (&p, &(o, _)) in &self.allocated {
            mark(p, o, 2)?;
        }
        for &p in &self.pinned {
            mark(p, 0, 3)?;
        }
        if let Some(f) = owner.iter().position(|&t| t == 0) {
            return Err(format!("frame {f:#x} unaccounted"));
        }
        Ok(())
    }
}

/// Splits `[start, end)` into maximal aligned power-of-two blocks.
pub fn decompose(mut start: u64, end: u64, max_order: u32) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    while start < end {
        let mut o = if start == 0 { max_order } else { start.trailing_zeros().min(max_order) };
        while start + (1 << o) > end {
            o -= 1;
        }
        out.push((start, o));
        start += 1 << o;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_chain_and_exact_alloc() {
        let mut b = Buddy::new(1024, 10);
        assert_eq!(b.alloc_block(0, Owner::User), Ok(0));
        for o in 0..10 {
            assert_eq!(b.free_blocks(o).collect::<Vec<_>>(), vec![1 << o]);
        }
        assert_eq!(b.alloc_block(9, Owner::User), Ok(512));
        assert_eq!(b.alloc_block(10, Owner::User), Err(MmError::OutOfMemory { order: 10 }));
        b.free_block(0, 0).unwrap();
        b.free_block(512, 9).unwrap();
        assert_eq!(b.free_blocks(10).collect::<Vec<_>>(), vec![0]);
        assert_eq!(b.free_frames(), 1024);
    }

    #[test]
    fn free_errors() {
        let mut b = Buddy::new(1024, 10);
        let p = b.alloc_block(2, Owner::User).unwrap();
        assert_eq!(b.free_block(p, 1), Err(MmError::UnknownBlock { pfn: p, order: 1 }));
        b.free_block(p, 2).unwrap();
        assert_eq!(b.free_block(p, 2), Err(MmError::DoubleFree { pfn: p }));
    }

    #[test]
    fn alloc_contig_examples() {
        let mut b = Buddy::new(1024, 10);
        assert_eq!(b.alloc_contig(768, Owner::User), Ok(vec![(0, 9), (512, 8)]));
        let mut b = Buddy::new(1024, 10);
        assert_eq!(b.alloc_contig(1, Owner::User), Ok(vec![(0, 0)]));
        let mut b = Buddy::new(1024, 10);
        let before = b.clone();
        assert!(matches!(b.alloc_contig(1025, Owner::User), Err(MmError::OutOfMemory { .. })));
        assert_eq!(b, before);
    }

    #[test]
    fn fmfi_extremes() {
        let mut b = Buddy::new(1 << 12, 10);
        assert_eq!(b.fmfi(), 0.0);
        for p in (1..1 << 12).step_by(2) {
            assert!(b.pin(p));
        }
        assert_eq!(b.fmfi(), 1.0);
        b.audit().unwrap();
    }

    #[test]
    fn release_splits_larger_allocation() {
        let mut b = Buddy::new(1024, 10);
        let p = b.alloc_block(9, Owner::User).unwrap();
        b.release(p + 5, 0).unwrap();
        assert!(b.is_free(p + 5));
        assert_eq!(b.allocated_frames(), 511);
        b.audit().unwrap();
    }

    #[test]
    fn alloc_run_is_contiguous_and_reversible() {
        let mut b = Buddy::new(4096, 10);
        b.alloc_block(0, Owner::User).unwrap();
        let start = b.alloc_run(1500, Owner::Reserved).unwrap();
        assert_eq!(start, 1);
        b.audit().unwrap();
        assert_eq!(b.allocated_frames(), 1501);
        b.free_run(start, 1500).unwrap();
        b.free_block(0, 0).unwrap();
        assert_eq!(b.fmfi(), 0.0);
        assert_eq!(b.free_blocks(10).count(), 4);
    }

    #[test]
    fn decompose_is_maximal() {
        assert_eq!(decompose(1, 8, 10), vec![(1, 0), (2, 1), (4, 2)]);
        assert_eq!(decompose(0, 1024, 10), vec![(0, 10)]);
        assert_eq!(decompose(0, 2048, 10), vec![(0, 10), (1024, 10)]);
    }

    /// Naive bitmap allocator used as an oracle for the frame-level state.
    struct Bitmap(Vec<bool>);

    impl Bitmap {
        fn take(&mut self, pfn: u64, order: u32) {
            for f in pfn..pfn + (1 << order) {
                assert!(!self.0[f as usize], "oracle: frame {f} handed out twice");
                self.0[f as usize] = true;
            }
        }
        fn give(&mut self, pfn: u64, order: u32) {
            for f in pfn..pfn + (1 << order) {
                self.0[f as usize] = false;
            }
        }
    }

    proptest! {
        #[test]
        fn random_sequences_match_bitmap_oracle(ops in proptest::collection::vec((any::<bool>(), 0u32..=10, any::<u16>()), 1..400)) {
            let mut b = Buddy::new(4096, 10);
            let mut oracle = Bitmap(vec![false; 4096]);
            let mut held: Vec<(u64, u32)> = Vec::new();
            for (alloc, order, pick) in ops {
                if alloc || held.is_empty() {
                    match b.alloc_block(order, Owner::User) {
                        Ok(p) => { oracle.take(p, order); held.push((p, order)); }
                        Err(MmError::OutOfMemory { .. }) => {
                            let want = 1u64 << order;
                            let any_fit = (0..4096u64).step_by(want as usize)
                                .any(|s| (s..s + want).all(|f| !oracle.0[f as usize]));
                            prop_assert!(!any_fit, "allocator refused a satisfiable order {}", order);
                        }
                        Err(e) => prop_assert!(false, "{e}"),
                    }
                } else {
                    let (p, o) = held.swap_remove(pick as usize % held.len());
                    b.free_block(p, o).unwrap();
                    oracle.give(p, o);
                }
                prop_assert!(b.audit().is_ok(), "{:?}", b.audit());
                let used = oracle.0.iter().filter(|&&x| x).count() as u64;
                prop_assert_eq!(b.allocated_frames(), used);
                prop_assert_eq!(b.free_frames() + b.allocated_frames() + b.pinned_frames(), 4096);
            }
            for (p, o) in held {
                b.free_block(p, o).unwrap();
            }
            prop_assert_eq!(b.free_blocks(10).count(), 4);
        }

        #[test]
        fn identical_sequences_give_identical_state(orders in proptest::collection::vec(0u32..=6, 1..100)) {
            let run = || {
                let mut b = Buddy::new(1 << 12, 10);
                for &o in &orders {
                    let _ = b.alloc_block(o, Owner::User);
                }
                b
            };
            prop_assert_eq!(run(), run());
        }
    }
}

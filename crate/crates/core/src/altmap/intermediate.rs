//! Intermediate address space: VMAs are placed in a global intermediate
//! space by offset, caches see intermediate addresses, and the physical
//! translation happens only past the LLC.

use std::collections::BTreeMap;

use super::lru::FullyAssoc;
use crate::addr::{PageSize, PhysAddr, Pid, VirtAddr, PAGE_SHIFT};
use crate::config::{FullyAssocConfig, SmallCacheConfig};
use crate::memhier::{AccessKind, MemError, MemHier, INTERMEDIATE_BASE, VMA_TABLE_BASE};
use crate::setassoc::SetAssoc;

const HUGE: u64 = 1 << 21;
const VMA_ENTRY_BYTES: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmaEntry {
    pub vbase: u64,
    pub len: u64,
    /// Absolute intermediate address of `vbase`.
    pub ibase: u64,
}

impl VmaEntry {
    pub fn contains(&self, va: u64) -> bool {
        self.vbase <= va && va < self.vbase + self.len
    }

    pub fn to_ia(&self, va: VirtAddr) -> u64 {
        self.ibase + (va.as_u64() - self.vbase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrontOutcome {
    pub ia: Option<u64>,
    pub latency: u64,
    pub accesses: u64,
    pub vma_tlb_hit: bool,
}

pub struct Intermediate {
    tables: BTreeMap<Pid, Vec<VmaEntry>>,
    vma_tlb: FullyAssoc<(Pid, u64), VmaEntry>,
    vma_tlb_latency: u64,
    bump: u64,
    backside_tlb: SetAssoc<u64>,
    backside_latency: u64,
}

impl Intermediate {
    pub fn new(vma_tlb: &FullyAssocConfig, backside: &SmallCacheConfig) -> Self {
        Intermediate {
            tables: BTreeMap::new(),
            vma_tlb: FullyAssoc::new(vma_tlb.entries as usize),
            vma_tlb_latency: vma_tlb.latency,
            bump: 0,
            backside_tlb: SetAssoc::new(backside.entries as usize, backside.assoc as usize),
            backside_latency: backside.latency,
        }
    }

    /// Places a VMA in the intermediate space. The bump pointer moves in
    /// 2 MiB steps and the VMA keeps its offset within 2 MiB, so huge pages
    /// line up in both spaces.
    pub fn add_vma(&mut self, pid: Pid, vbase: u64, len: u64) -> VmaEntry {
        let skew = vbase % HUGE;
        let e = VmaEntry { vbase, len, ibase: INTERMEDIATE_BASE + self.bump + skew };
        self.bump += (skew + len).div_ceil(HUGE) * HUGE;
        let t = self.tables.entry(pid).or_default();
        let i = t.partition_point(|x| x.vbase < vbase);
        t.insert(i, e);
        e
    }

    pub fn remove_vma(&mut self, pid: Pid, vbase: u64) -> Option<VmaEntry> {
        self.vma_tlb.retain(|k, _| *k != (pid, vbase));
        let t = self.tables.get_mut(&pid)?;
        let i = t.iter().position(|e| e.vbase == vbase)?;
        Some(t.remove(i))
    }

    pub fn vma_count(&self, pid: Pid) -> usize {
        self.tables.get(&pid).map_or(0, Vec::len)
    }

    /// Untimed virtual to intermediate conversion.
    pub fn ia_of(&self, pid: Pid, va: VirtAddr) -> Option<u64> {
        let t = self.tables.get(&pid)?;
        let i = t.partition_point(|e| e.vbase <= va.as_u64());
        t.get(i.checked_sub(1)?).filter(|e| e.contains(va.as_u64())).map(|e| e.to_ia(va))
    }

    /// VMA-TLB, then a binary search of the in-memory VMA array.
    pub fn front_translate(&mut self, pid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<FrontOutcome, MemError> {
        let v = va.as_u64();
        let mut latency = self.vma_tlb_latency;
        if let Some(e) = self.vma_tlb.find(|k, e| k.0 == pid && e.contains(v)) {
            return Ok(FrontOutcome { ia: Some(e.to_ia(va)), latency, accesses: 0, vma_tlb_hit: true });
        }
        let t = self.tables.get(&pid).map_or(&[][..], Vec::as_slice);
        if t.is_empty() {
            return Ok(FrontOutcome { ia: None, latency, accesses: 0, vma_tlb_hit: false });
        }
        let addr = |i: usize| PhysAddr(VMA_TABLE_BASE + (u64::from(pid.0) << 32) + i as u64 * VMA_ENTRY_BYTES);
        let mut accesses = 0;
        let (mut lo, mut len) = (0usize, t.len());
        while len > 1 {
            let half = len / 2;
            latency += mem.access(addr(lo + half), AccessKind::Pte, false)?.latency;
            accesses += 1;
            if t[lo + half].vbase <= v {
                lo += half;
            }
            len -= half;
        }
        latency += mem.access(addr(lo), AccessKind::Pte, false)?.latency;
        accesses += 1;
        let e = t[lo];
        if !e.contains(v) {
            return Ok(FrontOutcome { ia: None, latency, accesses, vma_tlb_hit: false });
        }
        self.vma_tlb.insert((pid, e.vbase), e);
        Ok(FrontOutcome { ia: Some(e.to_ia(va)), latency, accesses, vma_tlb_hit: false })
    }

    /// Key of `ia` in the backside page table (a 48-bit "virtual" address).
    pub fn backside_key(ia: u64) -> VirtAddr {
        VirtAddr::new_truncate(ia - INTERMEDIATE_BASE)
    }

    /// Backside TLB probe: `(frame, latency)`.
    pub fn backside_probe(&mut self, ia: u64) -> (Option<u64>, u64) {
        if !self.backside_tlb.enabled() {
            return (None, 0);
        }
        (self.backside_tlb.get(ia >> PAGE_SHIFT), self.backside_latency)
    }

    /// Caches the 4 KiB frame backing `ia`.
    pub fn backside_fill(&mut self, ia: u64, pfn: u64, size: PageSize) {
        let off = (ia >> PAGE_SHIFT) & (size.frames() - 1);
        self.backside_tlb.insert(ia >> PAGE_SHIFT, pfn + off);
    }

    pub fn backside_invalidate(&mut self, ia: u64, len: u64) {
        let (lo, hi) = (ia >> PAGE_SHIFT, (ia + len).div_ceil(1 << PAGE_SHIFT));
        self.backside_tlb.retain(|k, _| !(lo..hi).contains(&k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MemConfig;

    fn inter() -> Intermediate {
        Intermediate::new(
            &FullyAssocConfig { entries: 4, latency: 1 },
            &SmallCacheConfig { entries: 16, assoc: 4, latency: 10 },
        )
    }

    #[test]
    fn offset_arithmetic() {
        let e = VmaEntry { vbase: 0x1000, len: 0x1000, ibase: 0x10_0000 };
        assert_eq!(e.to_ia(VirtAddr::new(0x1234).unwrap()), 0x10_0234);
    }

    #[test]
    fn single_vma_cold_costs_one_access() {
        let mut m = MemHier::new(&MemConfig::default(), 1 << 30);
        let mut x = inter();
        let e = x.add_vma(Pid(1), 0x40_1000, 0x3000);
        assert_eq!(e.ibase % HUGE, 0x1000);
        let va = VirtAddr::new(0x40_1010).unwrap();
        let o = x.front_translate(Pid(1), va, &mut m).unwrap();
        assert_eq!((o.ia, o.accesses, o.vma_tlb_hit), (Some(e.ibase + 0x10), 1, false));
        let o = x.front_translate(Pid(1), va, &mut m).unwrap();
        assert_eq!((o.accesses, o.latency, o.vma_tlb_hit), (0, 1, true));
        assert_eq!(x.ia_of(Pid(1), va), Some(e.ibase + 0x10));
    }

    #[test]
    fn intermediate_ranges_are_disjoint() {
        let mut x = inter();
        let a = x.add_vma(Pid(1), 0x1000, 0x30_0000);
        let b = x.add_vma(Pid(2), 0x1000, 0x1000);
        assert!(a.ibase + a.len <= b.ibase);
    }
}

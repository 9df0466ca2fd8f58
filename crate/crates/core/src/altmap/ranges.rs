use std::collections::BTreeMap;

use super::lru::FullyAssoc;
use crate::addr::{PhysAddr, Pid, VirtAddr};
use crate::memhier::{AccessKind, MemError, MemHier, RANGE_TABLE_BASE};

/// Bytes per in-memory range-table entry (base, limit, offset).
pub const RANGE_ENTRY_BYTES: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeEntry {
    pub vbase: u64,
    pub vlimit: u64,
    pub offset: i64,
}

impl RangeEntry {
    pub fn contains(&self, va: u64) -> bool {
        self.vbase <= va && va < self.vlimit
    }

    pub fn translate(&self, va: VirtAddr) -> PhysAddr {
        PhysAddr(va.as_u64().wrapping_add_signed(self.offset))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeSource {
    Rtlb,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeLookup {
    pub hit: Option<(RangeEntry, RangeSource)>,
    pub latency: u64,
    pub accesses: u64,
}

#[derive(Debug, Clone)]
pub struct RangeTables {
    tables: BTreeMap<Pid, Vec<RangeEntry>>,
    rtlb: FullyAssoc<(Pid, u64), RangeEntry>,
    rtlb_latency: u64,
}

impl RangeTables {
    pub fn new(rtlb_entries: u32, rtlb_latency: u64) -> Self {
        RangeTables { tables: BTreeMap::new(), rtlb: FullyAssoc::new(rtlb_entries as usize), rtlb_latency }
    }

    /// Adds a range; false if it is empty, misaligned or overlaps another.
    pub fn add(&mut self, pid: Pid, r: RangeEntry) -> bool {
        if r.vbase >= r.vlimit || !r.vbase.is_multiple_of(4096) || !r.vlimit.is_multiple_of(4096) {
            return false;
        }
        let t = self.tables.entry(pid).or_default();
        let i = t.partition_point(|e| e.vbase < r.vbase);
        let clash = (i > 0 && t[i - 1].vlimit > r.vbase) || (i < t.len() && t[i].vbase < r.vlimit);
        if clash {
            return false;
        }
        t.insert(i, r);
        true
    }

    /// Drops every range overlapping `[base, base+len)`; returns how many.
    pub fn remove_overlapping(&mut self, pid: Pid, base: u64, len: u64) -> usize {
        let end = base + len;
        let hit = |e: &RangeEntry| e.vbase < end && base < e.vlimit;
        self.rtlb.retain(|k, e| k.0 != pid || !hit(e));
        let Some(t) = self.tables.get_mut(&pid) else { return 0 };
        let before = t.len();
        t.retain(|e| !hit(e));
        before - t.len()
    }

    pub fn count(&self, pid: Pid) -> usize {
        self.tables.get(&pid).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.tables.values().map(Vec::len).sum()
    }

    pub fn ranges(&self, pid: Pid) -> &[RangeEntry] {
        self.tables.get(&pid).map_or(&[], Vec::as_slice)
    }

    fn entry_addr(pid: Pid, idx: usize) -> PhysAddr {
        PhysAddr(RANGE_TABLE_BASE + (u64::from(pid.0) << 32) + idx as u64 * RANGE_ENTRY_BYTES)
    }

    /// Range TLB, then a fixed-depth binary search of the table costing
    /// `ceil(log2 n) + 1` accesses. A table hit refills the range TLB.
    pub fn lookup(&mut self, pid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<RangeLookup, MemError> {
        let v = va.as_u64();
        let mut latency = self.rtlb_latency;
        if let Some(e) = self.rtlb.find(|k, e| k.0 == pid && e.contains(v)) {
            return Ok(RangeLookup { hit: Some((e, RangeSource::Rtlb)), latency, accesses: 0 });
        }
        let t = self.tables.get(&pid).map_or(&[][..], Vec::as_slice);
        if t.is_empty() {
            return Ok(RangeLookup { hit: None, latency, accesses: 0 });
        }
        let mut accesses = 0;
        let (mut lo, mut len) = (0usize, t.len());
        while len > 1 {
            let half = len / 2;
            let mid = lo + half;
            latency += mem.access(Self::entry_addr(pid, mid), AccessKind::Pte, false)?.latency;
            accesses += 1;
            if t[mid].vbase <= v {
                lo = mid;
            }
            len -= half;
        }
        latency += mem.access(Self::entry_addr(pid, lo), AccessKind::Pte, false)?.latency;
        accesses += 1;
        let e = t[lo];
        if e.contains(v) {
            self.rtlb.insert((pid, e.vbase), e);
            Ok(RangeLookup { hit: Some((e, RangeSource::Table)), latency, accesses })
        } else {
            Ok(RangeLookup { hit: None, latency, accesses })
        }
    }
}

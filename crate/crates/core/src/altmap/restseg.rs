//! Restrictive segment: a hash-placed physical region whose location for a
//! page is computable from the VPN, so membership is one tag-line access.

use crate::addr::{PhysAddr, Pid, VirtAddr, LINE_SIZE, PAGE_SHIFT, PAGE_SIZE};
use crate::hash::mix64;
use crate::memhier::{AccessKind, MemError, MemHier};

const TAG_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestSegLookup {
    pub pa: Option<PhysAddr>,
    pub latency: u64,
}

#[derive(Debug, Clone)]
pub struct RestSeg {
    base: u64,
    sets: u64,
    ways: u64,
    tags: Vec<Option<(Pid, u64)>>,
}

impl RestSeg {
    /// Frames needed for data plus the tag array.
    pub fn frames_needed(sets: u64, ways: u32) -> u64 {
        let slots = sets * u64::from(ways);
        slots + (slots * TAG_BYTES).div_ceil(PAGE_SIZE)
    }

    pub fn new(base: u64, sets: u64, ways: u32) -> Self {
        let ways = u64::from(ways);
        RestSeg { base, sets, ways, tags: vec![None; (sets * ways) as usize] }
    }

    pub fn set_of(&self, pid: Pid, vpn4k: u64) -> u64 {
        mix64(u64::from(pid.0) ^ vpn4k) % self.sets
    }

    fn tag_line(&self, set: u64) -> PhysAddr {
        let tag_base = self.base + self.sets * self.ways * PAGE_SIZE;
        PhysAddr((tag_base + set * self.ways * TAG_BYTES) & !(LINE_SIZE - 1))
    }

    pub fn frame_addr(&self, set: u64, way: u64) -> PhysAddr {
        PhysAddr(self.base + (set * self.ways + way) * PAGE_SIZE)
    }

    fn way_of(&self, set: u64, pid: Pid, vpn4k: u64) -> Option<u64> {
        (0..self.ways).find(|&w| self.tags[(set * self.ways + w) as usize] == Some((pid, vpn4k)))
    }

    pub fn translate(&self, pid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<RestSegLookup, MemError> {
        let vpn = va.as_u64() >> PAGE_SHIFT;
        let set = self.set_of(pid, vpn);
        let latency = mem.access(self.tag_line(set), AccessKind::Pte, false)?.latency;
        let pa = self.way_of(set, pid, vpn).map(|w| PhysAddr(self.frame_addr(set, w).0 | (va.as_u64() & (PAGE_SIZE - 1))));
        Ok(RestSegLookup { pa, latency })
    }

    /// Untimed membership check.
    pub fn holds(&self, pid: Pid, vpn4k: u64) -> bool {
        self.way_of(self.set_of(pid, vpn4k), pid, vpn4k).is_some()
    }

    /// A free way in the page's set, if any.
    pub fn free_slot(&self, pid: Pid, vpn4k: u64) -> Option<(u64, u64)> {
        let set = self.set_of(pid, vpn4k);
        (0..self.ways).find(|&w| self.tags[(set * self.ways + w) as usize].is_none()).map(|w| (set, w))
    }

    /// Places a page. Returns the tag line written, or `None` when the slot
    /// is wrong for this page or already taken.
    pub fn fill(&mut self, pid: Pid, vpn4k: u64, set: u64, way: u64) -> Option<PhysAddr> {
        if set != self.set_of(pid, vpn4k) || way >= self.ways || self.holds(pid, vpn4k) {
            return None;
        }
        let slot = &mut self.tags[(set * self.ways + way) as usize];
        if slot.is_some() {
            return None;
        }
        *slot = Some((pid, vpn4k));
        Some(self.tag_line(set))
    }

    /// Evicts every page of `pid` in `[base, base+len)`; returns how many.
    pub fn evict_range(&mut self, pid: Pid, base: u64, len: u64) -> u64 {
        let (lo, hi) = (base >> PAGE_SHIFT, (base + len) >> PAGE_SHIFT);
        let mut n = 0;
        for t in &mut self.tags {
            if t.is_some_and(|(p, v)| p == pid && (lo..hi).contains(&v)) {
                *t = None;
                n += 1;
            }
        }
        n
    }

    pub fn resident(&self) -> u64 {
        self.tags.iter().flatten().count() as u64
    }
}

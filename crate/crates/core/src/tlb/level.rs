//! One set-associative TLB level holding entries of several page sizes.

use super::TlbEntryRec;
use crate::addr::{PageSize, Pid};
use crate::config::{ProbeMode, TlbLevelConfig};
use crate::hash::mix64;

#[derive(Debug, Clone, Copy)]
struct Slot {
    entry: TlbEntryRec,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct TlbLevel {
    pub name: String,
    pub latency: u64,
    pub probe: ProbeMode,
    sizes: Vec<PageSize>,
    sets: u64,
    ways: usize,
    slots: Vec<Option<Slot>>,
    clock: u64,
}

impl TlbLevel {
    pub fn new(cfg: &TlbLevelConfig) -> Self {
        let ways = cfg.assoc.max(1) as usize;
        let sets = u64::from(cfg.entries) / ways as u64;
        let mut sizes = cfg.sizes.clone();
        sizes.sort();
        sizes.dedup();
        TlbLevel {
            name: cfg.name.clone(),
            latency: cfg.latency,
            probe: cfg.probe,
            sizes,
            sets,
            ways,
            slots: vec![None; sets as usize * ways],
            clock: 0,
        }
    }

    pub fn sizes(&self) -> &[PageSize] {
        &self.sizes
    }

    pub fn supports(&self, size: PageSize) -> bool {
        self.sizes.contains(&size)
    }

    fn set(&self, asid: Pid, vpn: u64) -> std::ops::Range<usize> {
        let s = (mix64(u64::from(asid.0) ^ vpn) % self.sets.max(1)) as usize;
        s * self.ways..(s + 1) * self.ways
    }

    /// Looks up the translation of `vpn` (in `size` pages) and refreshes LRU.
    pub fn probe(&mut self, asid: Pid, vpn: u64, size: PageSize) -> Option<TlbEntryRec> {
        if self.sets == 0 || !self.supports(size) {
            return None;
        }
        self.clock += 1;
        let now = self.clock;
        let r = self.set(asid, vpn);
        self.slots[r].iter_mut().flatten().find(|s| s.entry.matches(asid, vpn, size)).map(|s| {
            s.stamp = now;
            s.entry
        })
    }

    /// Inserts or refreshes; returns the LRU victim when the set was full.
    pub fn insert(&mut self, e: TlbEntryRec) -> Option<TlbEntryRec> {
        if self.sets == 0 || !self.supports(e.size) {
            return None;
        }
        self.clock += 1;
        let now = self.clock;
        let r = self.set(e.asid, e.vpn);
        let set = &mut self.slots[r];
        if let Some(s) = set.iter_mut().flatten().find(|s| s.entry.matches(e.asid, e.vpn, e.size)) {
            *s = Slot { entry: e, stamp: now };
            return None;
        }
        if let Some(free) = set.iter_mut().find(|s| s.is_none()) {
            *free = Some(Slot { entry: e, stamp: now });
            return None;
        }
        let victim = set.iter_mut().min_by_key(|s| s.map_or(0, |s| s.stamp)).expect("ways > 0");
        victim.replace(Slot { entry: e, stamp: now }).map(|s| s.entry)
    }

    /// Drops entries for which `pred` holds; returns how many.
    pub fn remove_where(&mut self, mut pred: impl FnMut(&TlbEntryRec) -> bool) -> u64 {
        let mut n = 0;
        for s in &mut self.slots {
            if s.is_some_and(|s| pred(&s.entry)) {
                *s = None;
                n += 1;
            }
        }
        n
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntryRec> {
        self.slots.iter().flatten().map(|s| &s.entry)
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// No (asid, vpn, size) appears twice.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for e in self.entries() {
            if !seen.insert((e.asid, e.vpn, e.size)) {
                return Err(format!("tlb level {}: duplicate entry {:?}", self.name, e));
            }
        }
        Ok(())
    }
}

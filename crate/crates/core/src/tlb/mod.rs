//! TLB hierarchy: set-associative levels probed in order, then a sequential
//! prefetch buffer, TLB entries parked in the data caches, and a DRAM-resident
//! software TLB.
//!
//! The engine splits a lookup in two ([`Tlb::lookup_first`] and
//! [`Tlb::lookup_rest`]) so segment and range checks can sit between the
//! first level and the rest.

mod level;
mod predictor;

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

pub use level::TlbLevel;
pub use predictor::SizePredictor;

use crate::addr::{vpn_of, PageSize, Pfn, PhysAddr, Pid, VirtAddr, LINE_SIZE, PAGE_SHIFT};
use crate::config::{ProbeMode, TlbConfig};
use crate::hash::mix64;
use crate::memhier::{AccessKind, MemError, MemHier, VICTIMA_BASE};

const POM_ENTRY_BYTES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Walk,
    Prefetch,
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntryRec {
    pub asid: Pid,
    /// Page number in units of `size`.
    pub vpn: u64,
    pub size: PageSize,
    /// First frame of the page.
    pub pfn: Pfn,
    pub origin: Origin,
}

impl TlbEntryRec {
    /// Entry translating `va` to the page starting at frame `pfn`.
    pub fn for_va(asid: Pid, va: VirtAddr, size: PageSize, pfn: Pfn, origin: Origin) -> Self {
        TlbEntryRec { asid, vpn: vpn_of(va, size), size, pfn, origin }
    }

    pub fn matches(&self, asid: Pid, vpn: u64, size: PageSize) -> bool {
        self.asid == asid && self.vpn == vpn && self.size == size
    }

    pub fn translate(&self, va: VirtAddr) -> PhysAddr {
        PhysAddr((self.pfn.0 << PAGE_SHIFT) + (va.as_u64() & (self.size.bytes() - 1)))
    }

    fn overlaps(&self, asid: Pid, base: u64, end: u64) -> bool {
        let start = self.vpn * self.size.bytes();
        self.asid == asid && start < end && base < start + self.size.bytes()
    }
}

/// Where a lookup was satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbSource {
    Level(usize),
    Prefetch,
    Victima,
    PomTlb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbOutcome {
    pub hit: Option<TlbSource>,
    /// Sum of every probe cost incurred.
    pub latency: u64,
    pub entry: Option<TlbEntryRec>,
}

impl TlbOutcome {
    fn miss(latency: u64) -> Self {
        TlbOutcome { hit: None, latency, entry: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LevelStats {
    pub name: String,
    /// Hits per page size, indexed by `PageSize::index`.
    pub hits: [u64; 3],
    pub misses: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TlbStats {
    pub levels: Vec<LevelStats>,
    pub prefetch_hits: u64,
    pub prefetches_filled: u64,
    pub victima_writes: u64,
    pub victima_hits: u64,
    pub pomtlb_hits: u64,
    pub pomtlb_misses: u64,
    pub pomtlb_writes: u64,
    pub shootdowns: u64,
    pub invalidated: u64,
}

#[derive(Debug, Clone, Copy)]
struct PomSlot {
    asid: Pid,
    vpn4k: u64,
    pfn: u64,
}

pub struct Tlb {
    levels: Vec<TlbLevel>,
    predictor: SizePredictor,
    prefetch: VecDeque<TlbEntryRec>,
    prefetch_cap: usize,
    prefetch_latency: u64,
    victima: Option<(u64, HashMap<u64, TlbEntryRec>)>,
    pom: Option<(u64, u64, HashMap<u64, PomSlot>)>,
    shootdown_cycles: u64,
    stats: TlbStats,
}

impl Tlb {
    /// `pom_base` is the physical base of the software TLB when enabled.
    pub fn new(cfg: &TlbConfig, pom_base: Option<u64>) -> Self {
        let levels: Vec<TlbLevel> = cfg.levels.iter().map(TlbLevel::new).collect();
        let stats = TlbStats {
            levels: levels.iter().map(|l| LevelStats { name: l.name.clone(), ..Default::default() }).collect(),
            ..Default::default()
        };
        Tlb {
            levels,
            predictor: SizePredictor::new(&cfg.predictor),
            prefetch: VecDeque::new(),
            prefetch_cap: cfg.prefetch.entries as usize,
            prefetch_latency: cfg.prefetch.latency,
            victima: cfg.victima.enabled.then(|| (cfg.victima.capacity_lines, HashMap::new())),
            pom: match (cfg.pomtlb.enabled, pom_base) {
                (true, Some(b)) => Some((b, cfg.pomtlb.entries, HashMap::new())),
                _ => None,
            },
            shootdown_cycles: cfg.shootdown_cycles,
            stats,
        }
    }

    /// Bytes of physical memory the software TLB needs, if enabled.
    pub fn pom_bytes(cfg: &TlbConfig) -> Option<u64> {
        cfg.pomtlb.enabled.then(|| (cfg.pomtlb.entries * POM_ENTRY_BYTES).div_ceil(LINE_SIZE) * LINE_SIZE)
    }

    pub fn stats(&self) -> &TlbStats {
        &self.stats
    }

    pub fn levels(&self) -> &[TlbLevel] {
        &self.levels
    }

    pub fn predictor(&self) -> &SizePredictor {
        &self.predictor
    }

    pub fn prefetch_enabled(&self) -> bool {
        self.prefetch_cap > 0
    }

    /// Probes one level; the cost follows the level's probe mode.
    fn probe_level(&mut self, idx: usize, asid: Pid, va: VirtAddr) -> (Option<TlbEntryRec>, u64) {
        let order = self.predictor.order(va);
        let l = &mut self.levels[idx];
        let mut cost = 0;
        let mut found = None;
        let sizes: Vec<PageSize> = order.into_iter().filter(|s| l.supports(*s)).collect();
        for s in sizes {
            if l.probe == ProbeMode::Serial || cost == 0 {
                cost += l.latency;
            }
            if let Some(e) = l.probe(asid, vpn_of(va, s), s) {
                found = Some(e);
                break;
            }
        }
        let st = &mut self.stats.levels[idx];
        match found {
            Some(e) => st.hits[e.size.index()] += 1,
            None => st.misses += 1,
        }
        (found, cost)
    }

    /// Probes the first level only.
    pub fn lookup_first(&mut self, asid: Pid, va: VirtAddr) -> TlbOutcome {
        if self.levels.is_empty() {
            return TlbOutcome::miss(0);
        }
        match self.probe_level(0, asid, va) {
            (Some(e), lat) => TlbOutcome { hit: Some(TlbSource::Level(0)), latency: lat, entry: Some(e) },
            (None, lat) => TlbOutcome::miss(lat),
        }
    }

    /// Probes the remaining levels, the prefetch buffer, cache-parked entries
    /// and the software TLB, in that order. A hit is refilled into the first
    /// level.
    pub fn lookup_rest(&mut self, asid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<TlbOutcome, MemError> {
        let mut latency = 0;
        for idx in 1..self.levels.len() {
            let (hit, lat) = self.probe_level(idx, asid, va);
            latency += lat;
            if let Some(e) = hit {
                self.insert_from(0, e, mem)?;
                return Ok(TlbOutcome { hit: Some(TlbSource::Level(idx)), latency, entry: Some(e) });
            }
        }
        if self.prefetch_cap > 0 {
            latency += self.prefetch_latency;
            let pos = self.prefetch.iter().position(|e| e.asid == asid && e.vpn == vpn_of(va, e.size));
            if let Some(p) = pos {
                let e = self.prefetch.remove(p).expect("position is valid");
                self.stats.prefetch_hits += 1;
                self.insert_from(0, e, mem)?;
                return Ok(TlbOutcome { hit: Some(TlbSource::Prefetch), latency, entry: Some(e) });
            }
        }
        if self.victima.is_some() {
            let (hit, lat) = self.victima_probe(asid, va, mem)?;
            latency += lat;
            if let Some(e) = hit {
                self.stats.victima_hits += 1;
                self.insert_from(0, e, mem)?;
                return Ok(TlbOutcome { hit: Some(TlbSource::Victima), latency, entry: Some(e) });
            }
        }
        if self.pom.is_some() {
            let (hit, lat) = self.pom_lookup(asid, va, mem)?;
            latency += lat;
            if let Some(e) = hit {
                self.insert_from(0, e, mem)?;
                return Ok(TlbOutcome { hit: Some(TlbSource::PomTlb), latency, entry: Some(e) });
            }
        }
        Ok(TlbOutcome::miss(latency))
    }

    /// Full lookup through every structure.
    pub fn lookup(&mut self, asid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<TlbOutcome, MemError> {
        let first = self.lookup_first(asid, va);
        if first.hit.is_some() {
            return Ok(first);
        }
        let mut rest = self.lookup_rest(asid, va, mem)?;
        rest.latency += first.latency;
        Ok(rest)
    }

    fn victima_line(&self, asid: Pid, vpn: u64) -> u64 {
        let cap = self.victima.as_ref().map_or(1, |v| v.0);
        VICTIMA_BASE + (mix64(u64::from(asid.0) ^ vpn) % cap) * LINE_SIZE
    }

    /// Cache-only probe per size; a line that would come from DRAM counts
    /// as absent.
    fn victima_probe(&mut self, asid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<(Option<TlbEntryRec>, u64), MemError> {
        let mut latency = 0;
        for s in self.predictor.order(va) {
            if !self.levels.iter().any(|l| l.supports(s)) {
                continue;
            }
            let vpn = vpn_of(va, s);
            let line = self.victima_line(asid, vpn);
            let (lat, level) = mem.probe_cached(line, AccessKind::TlbEntry)?;
            latency += lat;
            let store = &mut self.victima.as_mut().expect("enabled").1;
            match (level, store.get(&line)) {
                (Some(_), Some(e)) if e.matches(asid, vpn, s) => return Ok((Some(*e), latency)),
                (None, Some(_)) => {
                    store.remove(&line);
                }
                _ => {}
            }
        }
        Ok((None, latency))
    }

    fn pom_slot(&self, asid: Pid, vpn4k: u64) -> (u64, u64) {
        let (base, entries, _) = self.pom.as_ref().expect("enabled");
        let slot = mix64(u64::from(asid.0) ^ vpn4k) % entries;
        let line = (base + slot * POM_ENTRY_BYTES) & !(LINE_SIZE - 1);
        (slot, line)
    }

    /// One access to the slot's line; tag match is a hit.
    pub fn pom_lookup(&mut self, asid: Pid, va: VirtAddr, mem: &mut MemHier) -> Result<(Option<TlbEntryRec>, u64), MemError> {
        let vpn4k = va.as_u64() >> PAGE_SHIFT;
        let (slot, line) = self.pom_slot(asid, vpn4k);
        let lat = mem.access(PhysAddr(line), AccessKind::TlbEntry, false)?.latency;
        let store = &self.pom.as_ref().expect("enabled").2;
        match store.get(&slot) {
            Some(p) if p.asid == asid && p.vpn4k == vpn4k => {
                self.stats.pomtlb_hits += 1;
                let e = TlbEntryRec { asid, vpn: vpn4k, size: PageSize::Size4K, pfn: Pfn(p.pfn), origin: Origin::Walk };
                Ok((Some(e), lat))
            }
            _ => {
                self.stats.pomtlb_misses += 1;
                Ok((None, lat))
            }
        }
    }

    /// Inserts at the first level that holds the entry's size. Victims move
    /// down; one leaving the last level is parked in the data caches when
    /// that option is on, and returned.
    pub fn fill(&mut self, e: TlbEntryRec, mem: &mut MemHier) -> Result<Option<TlbEntryRec>, MemError> {
        self.insert_from(0, e, mem)
    }

    fn insert_from(&mut self, start: usize, e: TlbEntryRec, mem: &mut MemHier) -> Result<Option<TlbEntryRec>, MemError> {
        let mut pending = e;
        let mut idx = start;
        loop {
            let Some(i) = (idx..self.levels.len()).find(|&i| self.levels[i].supports(pending.size)) else {
                return self.retire(pending, mem).map(Some);
            };
            match self.levels[i].insert(pending) {
                None => return Ok(None),
                Some(v) => {
                    pending = v;
                    idx = i + 1;
                }
            }
        }
    }

    fn retire(&mut self, e: TlbEntryRec, mem: &mut MemHier) -> Result<TlbEntryRec, MemError> {
        if self.victima.is_some() {
            let line = self.victima_line(e.asid, e.vpn);
            mem.access(PhysAddr(line), AccessKind::TlbEntry, true)?;
            if let Some((_, cache)) = &mut self.victima {
                cache.insert(line, e);
            }
            self.stats.victima_writes += 1;
        }
        Ok(e)
    }

    /// Records a completed walk in the software TLB (4 KiB granular). The
    /// write is off the critical path: its latency is not returned.
    pub fn pom_record(&mut self, asid: Pid, va: VirtAddr, e: &TlbEntryRec, mem: &mut MemHier) -> Result<(), MemError> {
        if self.pom.is_none() {
            return Ok(());
        }
        let vpn4k = va.as_u64() >> PAGE_SHIFT;
        let pfn = e.translate(va).0 >> PAGE_SHIFT;
        let (slot, line) = self.pom_slot(asid, vpn4k);
        mem.access(PhysAddr(line), AccessKind::TlbEntry, true)?;
        self.pom.as_mut().expect("enabled").2.insert(slot, PomSlot { asid, vpn4k, pfn });
        self.stats.pomtlb_writes += 1;
        Ok(())
    }

    /// Places a prefetched entry in the FIFO buffer.
    pub fn fill_prefetch(&mut self, e: TlbEntryRec) {
        if self.prefetch_cap == 0 {
            return;
        }
        if self.prefetch.iter().any(|p| p.matches(e.asid, e.vpn, e.size)) {
            return;
        }
        if self.prefetch.len() == self.prefetch_cap {
            self.prefetch.pop_front();
        }
        self.prefetch.push_back(e);
        self.stats.prefetches_filled += 1;
    }

    /// True if some structure already holds a translation for `va`.
    pub fn holds(&self, asid: Pid, va: VirtAddr) -> bool {
        let hit = |e: &TlbEntryRec| e.asid == asid && e.vpn == vpn_of(va, e.size);
        self.levels.iter().any(|l| l.entries().any(hit)) || self.prefetch.iter().any(hit)
    }

    pub fn train(&mut self, va: VirtAddr, resolved: PageSize) {
        self.predictor.update(va, resolved);
    }

    /// Removes every entry of `asid` overlapping `[base, base+len)`.
    /// Returns the count and the cycles charged for the shootdown.
    pub fn invalidate_region(&mut self, asid: Pid, base: VirtAddr, len: u64) -> (u64, u64) {
        let (b, end) = (base.as_u64(), base.as_u64() + len);
        let mut n = 0;
        for l in &mut self.levels {
            n += l.remove_where(|e| e.overlaps(asid, b, end));
        }
        let before = self.prefetch.len();
        self.prefetch.retain(|e| !e.overlaps(asid, b, end));
        n += (before - self.prefetch.len()) as u64;
        if let Some((_, store)) = &mut self.victima {
            let before = store.len();
            store.retain(|_, e| !e.overlaps(asid, b, end));
            n += (before - store.len()) as u64;
        }
        if let Some((_, _, store)) = &mut self.pom {
            let before = store.len();
            store.retain(|_, p| !(p.asid == asid && p.vpn4k << PAGE_SHIFT < end && b < (p.vpn4k + 1) << PAGE_SHIFT));
            n += (before - store.len()) as u64;
        }
        self.stats.shootdowns += 1;
        self.stats.invalidated += n;
        (n, self.shootdown_cycles)
    }

    pub fn audit(&self) -> Result<(), String> {
        self.levels.iter().try_for_each(|l| l.audit())
    }
}

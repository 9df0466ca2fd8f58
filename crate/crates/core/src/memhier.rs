//! Three-level cache plus DRAM latency model.
//!
//! Physically indexed, 64-byte lines, LRU, non-inclusive with fill-everywhere.
//! Every resident line is tagged with the [`AccessKind`] of its most recent
//! access so translation structures' cache footprint can be measured.

use serde::Serialize;

use crate::addr::{PhysAddr, LINE_SIZE};
use crate::config::MemConfig;

/// Synthetic kernel regions that live outside simulated DRAM but are still
/// cacheable. Frame descriptors (64 bytes per frame).
pub const MEMMAP_BASE: u64 = 1 << 52;
/// Per-process sorted range tables.
pub const RANGE_TABLE_BASE: u64 = 1 << 53;
/// Per-process VMA arrays for intermediate-address translation.
pub const VMA_TABLE_BASE: u64 = 1 << 54;
/// Backing lines for TLB entries spilled into the data caches.
pub const VICTIMA_BASE: u64 = 1 << 55;
/// Start of the intermediate address space.
pub const INTERMEDIATE_BASE: u64 = 1 << 56;
const SYNTHETIC_END: u64 = 1 << 57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AccessKind {
    Data,
    Pte,
    TlbEntry,
    Kernel,
}

impl AccessKind {
    pub const ALL: [AccessKind; 4] = [AccessKind::Data, AccessKind::Pte, AccessKind::TlbEntry, AccessKind::Kernel];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn label(self) -> &'static str {
        match self {
            AccessKind::Data => "data",
            AccessKind::Pte => "pte",
            AccessKind::TlbEntry => "tlb_entry",
            AccessKind::Kernel => "kernel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum HitLevel {
    L1,
    L2,
    Llc,
    Dram,
}

impl HitLevel {
    pub const CACHES: [HitLevel; 3] = [HitLevel::L1, HitLevel::L2, HitLevel::Llc];

    pub fn label(self) -> &'static str {
        match self {
            HitLevel::L1 => "l1",
            HitLevel::L2 => "l2",
            HitLevel::Llc => "llc",
            HitLevel::Dram => "dram",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub latency: u64,
    pub hit_level: HitLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MemError {
    #[error("address {0:#x} is outside physical memory and every synthetic region")]
    OutOfRange(u64),
}

#[derive(Debug, Clone, Copy)]
struct Line {
    addr: u64,
    kind: AccessKind,
    stamp: u64,
}

#[derive(Debug, Clone)]
struct CacheLevel {
    sets: u64,
    assoc: usize,
    latency: u64,
    lines: Vec<Option<Line>>,
    resident: [u64; 4],
}

impl CacheLevel {
    fn new(size: u64, assoc: u32, latency: u64) -> Self {
        let sets = size / (u64::from(assoc) * LINE_SIZE);
        CacheLevel {
            sets,
            assoc: assoc as usize,
            latency,
            lines: vec![None; (sets as usize) * assoc as usize],
            resident: [0; 4],
        }
    }

    fn set_of(&self, line: u64) -> std::ops::Range<usize> {
        let s = (line & (self.sets - 1)) as usize;
        s * self.assoc..(s + 1) * self.assoc
    }

    /// Looks the line up; on hit refreshes LRU and retags the kind.
    fn lookup(&mut self, line: u64, kind: AccessKind, now: u64) -> bool {
        let r = self.set_of(line);
        for l in self.lines[r].iter_mut().flatten() {
            if l.addr == line {
                self.resident[l.kind.index()] -= 1;
                self.resident[kind.index()] += 1;
                l.kind = kind;
                l.stamp = now;
                return true;
            }
        }
        false
    }

    fn contains(&self, line: u64) -> bool {
        self.lines[self.set_of(line)].iter().flatten().any(|l| l.addr == line)
    }

    fn fill(&mut self, line: u64, kind: AccessKind, now: u64) {
        let r = self.set_of(line);
        let set = &mut self.lines[r];
        let slot = match set.iter().position(|s| s.is_none()) {
            Some(i) => i,
            None => {
                let (i, _) = set
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, s)| s.map_or(0, |s| s.stamp))
                    .expect("non-empty set");
                i
            }
        };
        if let Some(old) = set[slot] {
            self.resident[old.kind.index()] -= 1;
        }
        set[slot] = Some(Line { addr: line, kind, stamp: now });
        self.resident[kind.index()] += 1;
    }

    fn clear(&mut self) {
        self.lines.iter_mut().for_each(|l| *l = None);
        self.resident = [0; 4];
    }
}

/// Per-level hit/miss counters broken down by access kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MemStats {
    pub hits: [[u64; 4]; 3],
    pub misses: [[u64; 4]; 3],
    pub dram: [u64; 4],
    pub writes: u64,
}

#[derive(Debug, Clone)]
pub struct MemHier {
    levels: [CacheLevel; 3],
    dram_latency: u64,
    phys_limit: u64,
    clock: u64,
    pub stats: MemStats,
}

impl MemHier {
    pub fn new(cfg: &MemConfig, phys_bytes: u64) -> Self {
        MemHier {
            levels: [
                CacheLevel::new(cfg.l1.size, cfg.l1.assoc, cfg.l1.latency),
                CacheLevel::new(cfg.l2.size, cfg.l2.assoc, cfg.l2.latency),
                CacheLevel::new(cfg.llc.size, cfg.llc.assoc, cfg.llc.latency),
            ],
            dram_latency: cfg.dram.latency,
            phys_limit: phys_bytes,
            clock: 0,
            stats: MemStats::default(),
        }
    }

    pub fn in_range(&self, addr: u64) -> bool {
        addr < self.phys_limit || (MEMMAP_BASE..SYNTHETIC_END).contains(&addr)
    }

    fn check(&self, addr: u64) -> Result<(), MemError> {
        if self.in_range(addr) {
            Ok(())
        } else {
            Err(MemError::OutOfRange(addr))
        }
    }

    pub fn dram_latency(&self) -> u64 {
        self.dram_latency
    }

    /// Latency charged for a hit at `level` (sum of all probed levels).
    pub fn latency_to(&self, level: HitLevel) -> u64 {
        let caches: u64 = match level {
            HitLevel::L1 => self.levels[0].latency,
            HitLevel::L2 => self.levels[0].latency + self.levels[1].latency,
            HitLevel::Llc | HitLevel::Dram => self.levels.iter().map(|l| l.latency).sum(),
        };
        if level == HitLevel::Dram {
            caches + self.dram_latency
        } else {
            caches
        }
    }

    /// Full access: L1 → L2 → LLC → DRAM, filling every level above the hit.
    pub fn access(&mut self, pa: PhysAddr, kind: AccessKind, write: bool) -> Result<AccessOutcome, MemError> {
        let mut out = self.access_caches(pa.as_u64(), kind, write)?;
        if out.hit_level == HitLevel::Dram {
            out.latency += self.dram_latency;
        }
        Ok(out)
    }

    /// Like [`access`](Self::access) but does not add the DRAM latency on a
    /// full miss, so the caller can interpose work (e.g. backside
    /// translation) before the memory fetch. Lines are still filled.
    pub fn access_caches(&mut self, addr: u64, kind: AccessKind, write: bool) -> Result<AccessOutcome, MemError> {
        self.check(addr)?;
        self.clock += 1;
        let now = self.clock;
        if write {
            self.stats.writes += 1;
        }
        let line = addr / LINE_SIZE;
        let mut latency = 0;
        for i in 0..3 {
            latency += self.levels[i].latency;
            if self.levels[i].lookup(line, kind, now) {
                self.stats.hits[i][kind.index()] += 1;
                for upper in &mut self.levels[..i] {
                    upper.fill(line, kind, now);
                }
                return Ok(AccessOutcome { latency, hit_level: HitLevel::CACHES[i] });
            }
            self.stats.misses[i][kind.index()] += 1;
        }
        self.stats.dram[kind.index()] += 1;
        for l in &mut self.levels {
            l.fill(line, kind, now);
        }
        Ok(AccessOutcome { latency, hit_level: HitLevel::Dram })
    }

    /// Probes the caches only. A hit behaves like a normal access; a miss
    /// fills nothing and fetches nothing. Returns the probe latency and the
    /// hit level (`None` when the line is not cached).
    pub fn probe_cached(&mut self, addr: u64, kind: AccessKind) -> Result<(u64, Option<HitLevel>), MemError> {
        self.check(addr)?;
        let line = addr / LINE_SIZE;
        match self.levels.iter().position(|l| l.contains(line)) {
            Some(i) => {
                let out = self.access_caches(addr, kind, false)?;
                debug_assert_eq!(out.hit_level, HitLevel::CACHES[i]);
                Ok((out.latency, Some(out.hit_level)))
            }
            None => Ok((self.latency_to(HitLevel::Llc), None)),
        }
    }

    /// Resident lines of `kind` at L1, L2 and LLC.
    pub fn footprint(&self, kind: AccessKind) -> [u64; 3] {
        [0, 1, 2].map(|i| self.levels[i].resident[kind.index()])
    }

    pub fn resident_lines(&self) -> [u64; 3] {
        [0, 1, 2].map(|i| self.levels[i].lines.iter().flatten().count() as u64)
    }

    pub fn reset(&mut self) {
        self.levels.iter_mut().for_each(CacheLevel::clear);
        self.stats = MemStats::default();
        self.clock = 0;
    }

    /// Recounts every level from scratch and checks the structural
    /// invariants. Test and debug aid.
    pub fn audit(&self) -> Result<(), String> {
        for (i, l) in self.levels.iter().enumerate() {
            let mut counts = [0u64; 4];
            for set in l.lines.chunks(l.assoc) {
                let present: Vec<&Line> = set.iter().flatten().collect();
                if present.len() > l.assoc {
                    return Err(format!("level {i}: set over capacity"));
                }
                for (a, x) in present.iter().enumerate() {
                    if present[a + 1..].iter().any(|y| y.addr == x.addr) {
                        return Err(format!("level {i}: duplicate line {:#x}", x.addr));
                    }
                    counts[x.kind.index()] += 1;
                }
            }
            if counts != l.resident {
                return Err(format!("level {i}: footprint counters {:?} != recount {counts:?}", l.resident));
            }
        }
        Ok(())
    }
}

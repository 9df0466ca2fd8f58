use std::collections::BTreeMap;

use serde::Serialize;

use crate::addr::PageSize;

/// The structure that resolved one access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    L1tlb,
    L2tlb,
    Prefetch,
    Victima,
    Pomtlb,
    Segment,
    Range,
    Restseg,
    Walk,
    /// Intermediate mode: VMA found in the VMA-TLB.
    VmaTlb,
    /// Intermediate mode: VMA found by searching the in-memory table.
    VmaTable,
}

impl Path {
    pub const ALL: [Path; 11] = [
        Path::L1tlb,
        Path::L2tlb,
        Path::Prefetch,
        Path::Victima,
        Path::Pomtlb,
        Path::Segment,
        Path::Range,
        Path::Restseg,
        Path::Walk,
        Path::VmaTlb,
        Path::VmaTable,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Path::L1tlb => "l1tlb",
            Path::L2tlb => "l2tlb",
            Path::Prefetch => "prefetch",
            Path::Victima => "victima",
            Path::Pomtlb => "pomtlb",
            Path::Segment => "segment",
            Path::Range => "range",
            Path::Restseg => "restseg",
            Path::Walk => "walk",
            Path::VmaTlb => "vma_tlb",
            Path::VmaTable => "vma_table",
        }
    }
}

/// Counters restricted to memory events after `report.warmup`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PostWarmup {
    pub accesses: u64,
    /// Resolved by a segment or range, including L1 hits on range fills.
    pub segment_or_range: u64,
    pub walk_mem_accesses: u64,
    pub faults: u64,
    /// Accesses whose translation came from a 2 MiB page.
    pub resolved_2m: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub events: u64,
    pub mem_events: u64,
    pub alloc_events: u64,
    pub free_events: u64,

    pub total_cycles: u64,
    pub translation_cycles: u64,
    pub data_cycles: u64,
    pub fault_cycles: u64,
    pub vma_cycles: u64,

    pub paths: BTreeMap<Path, u64>,
    pub l1_tlb_hits: u64,
    pub l1_tlb_misses: u64,
    /// L1 hits on entries filled from a range translation.
    pub l1_tlb_range_hits: u64,
    /// Resolutions per page size, indexed by [`PageSize::index`].
    pub resolved_by_size: [u64; 3],

    pub walks: u64,
    pub walk_mem_accesses: u64,
    /// Accesses per walked request (fault and retry concatenated).
    pub walk_histogram: BTreeMap<u64, u64>,
    pub prefetch_walks: u64,
    pub prefetch_walk_accesses: u64,

    pub minor_faults: u64,
    pub vma_requests: u64,
    pub handler_cycles: u64,
    pub touches: u64,
    pub touch_cycles: u64,
    pub apply_cycles: u64,
    pub shootdown_cycles: u64,

    pub maps: u64,
    pub unmaps: u64,
    pub reservations: u64,
    pub promotions: u64,
    pub restseg_fills: u64,
    pub ranges_added: u64,
    pub segments: u64,

    /// Accesses outside every VMA (non-strict mode).
    pub wild_accesses: u64,
    pub post_warmup: PostWarmup,
}

impl EngineStats {
    pub fn count_path(&mut self, p: Path) {
        *self.paths.entry(p).or_default() += 1;
    }

    pub fn count_size(&mut self, s: PageSize) {
        self.resolved_by_size[s.index()] += 1;
    }

    pub fn path(&self, p: Path) -> u64 {
        self.paths.get(&p).copied().unwrap_or(0)
    }
}

/// One row of the time series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub event: u64,
    pub cycle: u64,
    pub fmfi: f64,
    pub l1_tlb_hit_rate: f64,
    pub walk_rate: f64,
    pub faults: u64,
}

/// Per-event cost breakdown written to the debug log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EventLog {
    pub event: u64,
    pub kind: char,
    pub translation: u64,
    pub data: u64,
    pub fault: u64,
    pub vma: u64,
    pub total: u64,
    pub path: Option<Path>,
    pub walk_accesses: u64,
    pub faults: u64,
}

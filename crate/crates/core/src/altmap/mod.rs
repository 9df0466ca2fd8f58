//! Translation paths that bypass or replace the page-table walk.

mod intermediate;
mod lru;
mod ranges;
mod restseg;
mod segment;

use serde::Serialize;

pub use intermediate::{FrontOutcome, Intermediate, VmaEntry};
pub use lru::FullyAssoc;
pub use ranges::{RangeEntry, RangeLookup, RangeSource, RangeTables, RANGE_ENTRY_BYTES};
pub use restseg::{RestSeg, RestSegLookup};
pub use segment::{DirectSegment, Segments};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AltmapStats {
    pub segment_hits: u64,
    pub range_tlb_hits: u64,
    pub range_table_hits: u64,
    pub range_misses: u64,
    pub range_table_accesses: u64,
    pub ranges_added: u64,
    pub restseg_hits: u64,
    pub restseg_misses: u64,
    pub restseg_fills: u64,
    pub vma_tlb_hits: u64,
    pub vma_tlb_misses: u64,
    pub vma_table_accesses: u64,
    pub backside_tlb_hits: u64,
    pub backside_walks: u64,
}

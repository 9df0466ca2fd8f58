//! Page-table designs behind one walk contract, plus nested composition.
//!
//! Tables never touch the cache model or the allocator directly; every
//! structure read and frame allocation goes through a [`WalkPort`], which is
//! what lets the same table run natively, inside a guest, or as the
//! backside table of the intermediate address space.

mod compact;
mod cuckoo;
mod clustered;
mod hashed;
mod nested;
mod radix;
mod storage;
mod system;

use serde::Serialize;

use crate::addr::{PageSize, Pfn, PhysAddr, Pte, VirtAddr};
use crate::config::{PtConfig, PtKind};
use crate::memhier::{AccessKind, MemError, MemHier};
use crate::memmgr::{Buddy, MmError, Owner};

pub use compact::CompactStore;
pub use clustered::ClusteredStore;
pub use cuckoo::CuckooStore;
pub use hashed::{Cluster, ClusterStore, HashedTable};
pub use nested::{NestedMmu, NestedPort};
pub use radix::RadixTable;
pub use storage::TableStorage;
pub use system::PtSystem;
pub use nested::NestedStats;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PtError {
    #[error("out of memory while growing a translation structure")]
    OutOfMemory,
    #[error("misaligned promotion at {va:#x}")]
    MisalignedPromotion { va: u64 },
    #[error("page size {0} not supported by this table")]
    UnsupportedSize(PageSize),
    #[error("mapping conflict at {va:#x}: {reason}")]
    Conflict { va: u64, reason: &'static str },
    #[error("structure corrupt: {0}")]
    StructureCorrupt(String),
    #[error(transparent)]
    Mem(#[from] MemError),
}

impl From<MmError> for PtError {
    fn from(_: MmError) -> Self {
        PtError::OutOfMemory
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WalkFault {
    pub vpn: u64,
    pub size_hint: PageSize,
}

/// Outcome of one walk. Every access in `accesses` is of kind
/// [`AccessKind::Pte`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WalkResult {
    pub pte: Option<Pte>,
    pub accesses: Vec<PhysAddr>,
    pub latency: u64,
    pub fault: Option<WalkFault>,
}

impl WalkResult {
    fn fault(va: VirtAddr, accesses: Vec<PhysAddr>, latency: u64) -> Self {
        WalkResult {
            pte: None,
            accesses,
            latency,
            fault: Some(WalkFault { vpn: va.as_u64() >> 12, size_hint: PageSize::Size4K }),
        }
    }

    fn hit(pte: Pte, accesses: Vec<PhysAddr>, latency: u64) -> Self {
        WalkResult { pte: Some(pte), accesses, latency, fault: None }
    }
}

/// Where a table's memory traffic and frame allocations go.
pub trait WalkPort {
    /// One timed structure read at physical address `addr`. Implementations
    /// append every memory access they issue to `log` and return the total
    /// latency.
    fn read(&mut self, addr: u64, log: &mut Vec<PhysAddr>) -> Result<u64, PtError>;
    fn alloc_frames(&mut self, order: u32) -> Result<u64, PtError>;
    fn free_frames(&mut self, pfn: u64, order: u32);
    fn max_order(&self) -> u32;
}

/// Direct port onto the cache model and the host allocator.
pub struct NativePort<'a> {
    pub mem: &'a mut MemHier,
    pub mm: &'a mut Buddy,
}

impl WalkPort for NativePort<'_> {
    fn read(&mut self, addr: u64, log: &mut Vec<PhysAddr>) -> Result<u64, PtError> {
        let out = self.mem.access(PhysAddr(addr), AccessKind::Pte, false)?;
        log.push(PhysAddr(addr));
        Ok(out.latency)
    }

    fn alloc_frames(&mut self, order: u32) -> Result<u64, PtError> {
        Ok(self.mm.alloc_block(order, Owner::PageTable)?)
    }

    fn free_frames(&mut self, pfn: u64, order: u32) {
        self.mm.free_block(pfn, order).expect("table frame was allocated through this port");
    }

    fn max_order(&self) -> u32 {
        self.mm.max_order()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PtStats {
    pub walks: u64,
    pub walk_accesses: u64,
    pub single_access_walks: u64,
    pub resizes: u64,
    pub kicks: u64,
    pub stash_probes: u64,
    pub pwc_hits: u64,
    pub pwc_misses: u64,
}

impl PtStats {
    fn record(&mut self, w: &WalkResult) {
        self.walks += 1;
        self.walk_accesses += w.accesses.len() as u64;
        if w.accesses.len() == 1 {
            self.single_access_walks += 1;
        }
    }
}

/// Result of an unmap: the removed entry and the lines written.
pub type Unmapped = (Option<Pte>, Vec<PhysAddr>);

pub trait PageTable: Send {
    fn kind(&self) -> PtKind;

    /// Timed walk. `sizes` is the probe order for tables keyed by page size;
    /// the radix table ignores it.
    fn walk(&mut self, port: &mut dyn WalkPort, va: VirtAddr, sizes: &[PageSize]) -> Result<WalkResult, PtError>;

    /// Installs `pte` covering `va`. Returns the lines written.
    fn map(&mut self, port: &mut dyn WalkPort, va: VirtAddr, pte: Pte) -> Result<Vec<PhysAddr>, PtError>;

    fn unmap(&mut self, port: &mut dyn WalkPort, va: VirtAddr, size: PageSize) -> Result<Unmapped, PtError>;

    /// Replaces the 512 4 KiB mappings of a 2 MiB region with one 2 MiB leaf.
    fn promote(&mut self, port: &mut dyn WalkPort, va: VirtAddr, pfn: Pfn) -> Result<Vec<PhysAddr>, PtError>;

    /// Functional (untimed) lookup.
    fn lookup(&self, va: VirtAddr) -> Option<Pte>;

    /// Bytes of physical memory owned by the structure.
    fn footprint(&self) -> u64;

    /// Returns every frame to the port's allocator.
    fn release(&mut self, port: &mut dyn WalkPort);

    fn stats(&self) -> &PtStats;

    /// Internal consistency check; test aid.
    fn audit(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Builds an empty table of `kind`.
pub fn new_table(kind: PtKind, cfg: &PtConfig, port: &mut dyn WalkPort, pwc: bool) -> Result<Box<dyn PageTable>, PtError> {
    Ok(match kind {
        PtKind::Radix => {
            let pwc_cfg = if pwc { cfg.pwc.clone() } else { crate::config::PwcConfig::disabled() };
            Box::new(RadixTable::new(port, &pwc_cfg)?)
        }
        PtKind::Clustered => Box::new(HashedTable::new(PtKind::Clustered, [
            ClusteredStore::new(port, cfg.buckets, cfg.max_load, 0)?,
            ClusteredStore::new_lazy(cfg.buckets_huge, cfg.max_load, 1),
        ])),
        PtKind::Cuckoo => Box::new(HashedTable::new(PtKind::Cuckoo, [
            CuckooStore::new(port, &cfg.cuckoo, cfg.buckets / u64::from(cfg.cuckoo.ways), 0)?,
            CuckooStore::new_lazy(&cfg.cuckoo, cfg.buckets_huge / u64::from(cfg.cuckoo.ways), 1),
        ])),
        PtKind::Compact => Box::new(HashedTable::new(PtKind::Compact, [
            CompactStore::new(port, &cfg.compact, cfg.buckets, 0)?,
            CompactStore::new_lazy(&cfg.compact, cfg.buckets_huge, 1),
        ])),
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::config::MemConfig;

    pub struct Rig {
        pub mem: MemHier,
        pub mm: Buddy,
    }

    impl Rig {
        pub fn new(frames: u64) -> Self {
            Rig { mem: MemHier::new(&MemConfig::default(), frames << 12), mm: Buddy::new(frames, 10) }
        }

        pub fn port(&mut self) -> NativePort<'_> {
            NativePort { mem: &mut self.mem, mm: &mut self.mm }
        }
    }
}

#[cfg(test)]
mod oracle_tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::testutil::Rig;
    use super::*;

    #[derive(Debug, Clone)]
    enum Op {
        Map { region: u64, page: u64, pfn: u64 },
        Unmap { region: u64, page: u64 },
        Promote { region: u64 },
        UnmapHuge { region: u64 },
        Walk { region: u64, page: u64 },
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            6 => (0u64..6, 0u64..512, 0u64..4096).prop_map(|(region, page, pfn)| Op::Map { region, page, pfn }),
            2 => (0u64..6, 0u64..512).prop_map(|(region, page)| Op::Unmap { region, page }),
            1 => (0u64..6).prop_map(|region| Op::Promote { region }),
            1 => (0u64..6).prop_map(|region| Op::UnmapHuge { region }),
            4 => (0u64..6, 0u64..512).prop_map(|(region, page)| Op::Walk { region, page }),
        ]
    }

    /// Regions are spread so radix paths and hash tags differ.
    fn region_base(r: u64) -> u64 {
        (r * 0x13_4000_0000) & !0x1f_ffff
    }

    fn small_cfg() -> PtConfig {
        let mut cfg = PtConfig::default();
        cfg.buckets = 16;
        cfg.buckets_huge = 4;
        cfg
    }

    fn check(kind: PtKind, ops: &[Op]) -> Result<(), TestCaseError> {
        let mut rig = Rig::new(1 << 14);
        let cfg = small_cfg();
        let mut t = new_table(kind, &cfg, &mut rig.port(), true).unwrap();
        // (region, page) -> pfn for 4K pages; region -> block for 2M pages.
        let mut small: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        let mut huge: BTreeMap<u64, u64> = BTreeMap::new();
        let sizes = [PageSize::Size4K, PageSize::Size2M];
        for op in ops {
            match *op {
                Op::Map { region, page, pfn } => {
                    if huge.contains_key(&region) {
                        continue;
                    }
                    let va = VirtAddr::new(region_base(region) + (page << 12)).unwrap();
                    t.map(&mut rig.port(), va, Pte::new(Pfn(pfn), PageSize::Size4K)).unwrap();
                    small.insert((region, page), pfn);
                }
                Op::Unmap { region, page } => {
                    let va = VirtAddr::new(region_base(region) + (page << 12)).unwrap();
                    let (old, _) = t.unmap(&mut rig.port(), va, PageSize::Size4K).unwrap();
                    prop_assert_eq!(old.map(|p| p.pfn.0), small.remove(&(region, page)));
                }
                Op::Promote { region } => {
                    if huge.contains_key(&region) {
                        continue;
                    }
                    let block = 8192 + region * 512;
                    for page in 0..512 {
                        let va = VirtAddr::new(region_base(region) + (page << 12)).unwrap();
                        t.map(&mut rig.port(), va, Pte::new(Pfn(block + page), PageSize::Size4K)).unwrap();
                        small.remove(&(region, page));
                    }
                    let va = VirtAddr::new(region_base(region)).unwrap();
                    t.promote(&mut rig.port(), va, Pfn(block)).unwrap();
                    huge.insert(region, block);
                }
                Op::UnmapHuge { region } => {
                    let va = VirtAddr::new(region_base(region)).unwrap();
                    let (old, _) = t.unmap(&mut rig.port(), va, PageSize::Size2M).unwrap();
                    prop_assert_eq!(old.map(|p| p.pfn.0), huge.remove(&region));
                }
                Op::Walk { region, page } => {
                    let va = VirtAddr::new(region_base(region) + (page << 12) + 0x18).unwrap();
                    let w = t.walk(&mut rig.port(), va, &sizes).unwrap();
                    let expect = huge
                        .get(&region)
                        .map(|b| (b + page, PageSize::Size2M))
                        .or_else(|| small.get(&(region, page)).map(|&p| (p, PageSize::Size4K)));
                    let got = w.pte.map(|p| (p.translate(va).0 >> 12, p.size));
                    prop_assert_eq!(got, expect);
                    prop_assert_eq!(w.fault.is_some(), expect.is_none());
                }
            }
        }
        prop_assert!(t.audit().is_ok(), "{:?}", t.audit());
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_kind_matches_flat_reference(ops in proptest::collection::vec(op(), 1..300)) {
            for kind in PtKind::ALL {
                check(kind, &ops)?;
            }
        }
    }
}

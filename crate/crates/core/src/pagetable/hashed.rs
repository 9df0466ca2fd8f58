//! Page-size-split hashed tables built from a cluster store.

use super::{PageTable, PtError, PtStats, Unmapped, WalkPort, WalkResult};
use crate::addr::{vpn_of, PageSize, Pfn, PhysAddr, Pte, VirtAddr, HUGE_FRAMES};
use crate::config::PtKind;
use crate::hash::mix64;

/// One hashed entry: a tag plus up to eight consecutive PTEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cluster {
    pub tag: u64,
    pub ptes: [u64; 8],
}

impl Cluster {
    pub fn new(tag: u64) -> Self {
        Cluster { tag, ptes: [0; 8] }
    }

    pub fn is_empty(&self) -> bool {
        self.ptes.iter().all(|&p| p == 0)
    }
}

pub(crate) fn salt_for(seed: u64) -> u64 {
    mix64(0x7ab1_e5a1_7000 + seed)
}

/// Storage and probing strategy for clusters of one page size.
pub trait ClusterStore: Send {
    /// PTEs per cluster.
    const FACTOR: u64;

    /// Allocates backing storage on first use.
    fn ensure(&mut self, port: &mut dyn WalkPort) -> Result<(), PtError>;

    /// Timed search. Returns the cluster (if found) and the latency.
    fn probe(
        &mut self,
        port: &mut dyn WalkPort,
        tag: u64,
        log: &mut Vec<PhysAddr>,
        stats: &mut PtStats,
    ) -> Result<(Option<Cluster>, u64), PtError>;

    fn get(&self, tag: u64) -> Option<&Cluster>;

    /// Mutable access plus the address of the line holding the cluster.
    fn get_mut(&mut self, tag: u64) -> Option<(&mut Cluster, u64)>;

    /// Inserts a cluster whose tag is absent. Returns the lines written.
    fn insert(&mut self, port: &mut dyn WalkPort, c: Cluster, stats: &mut PtStats) -> Result<Vec<PhysAddr>, PtError>;

    fn remove(&mut self, port: &mut dyn WalkPort, tag: u64) -> Option<(Cluster, Vec<PhysAddr>)>;

    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn footprint(&self) -> u64;

    fn release(&mut self, port: &mut dyn WalkPort);

    fn audit(&self) -> Result<(), String>;
}

/// Separate stores for 4 KiB and 2 MiB pages.
pub struct HashedTable<S> {
    kind: PtKind,
    stores: [S; 2],
    stats: PtStats,
}

fn store_index(size: PageSize) -> Result<usize, PtError> {
    match size {
        PageSize::Size4K => Ok(0),
        PageSize::Size2M => Ok(1),
        PageSize::Size1G => Err(PtError::UnsupportedSize(size)),
    }
}

impl<S: ClusterStore> HashedTable<S> {
    pub fn new(kind: PtKind, stores: [S; 2]) -> Self {
        HashedTable { kind, stores, stats: PtStats::default() }
    }

    pub fn store(&self, size: PageSize) -> &S {
        &self.stores[store_index(size).expect("hashed sizes")]
    }

    fn split(va: VirtAddr, size: PageSize) -> (u64, usize) {
        let vpn = vpn_of(va, size);
        (vpn / S::FACTOR, (vpn % S::FACTOR) as usize)
    }

    fn get_pte(&self, va: VirtAddr, size: PageSize) -> Option<Pte> {
        let (tag, idx) = Self::split(va, size);
        let c = self.stores[store_index(size).ok()?].get(tag)?;
        let p = Pte::decode(c.ptes[idx]);
        p.present.then_some(p)
    }

    fn set_pte(&mut self, port: &mut dyn WalkPort, va: VirtAddr, size: PageSize, raw: u64) -> Result<Vec<PhysAddr>, PtError> {
        let (tag, idx) = Self::split(va, size);
        let si = store_index(size)?;
        let store = &mut self.stores[si];
        if let Some((c, line)) = store.get_mut(tag) {
            c.ptes[idx] = raw;
            if c.is_empty() {
                let (_, writes) = store.remove(port, tag).expect("cluster just seen");
                return Ok(writes);
            }
            return Ok(vec![PhysAddr(line)]);
        }
        if raw == 0 {
            return Ok(Vec::new());
        }
        store.ensure(port)?;
        let mut c = Cluster::new(tag);
        c.ptes[idx] = raw;
        store.insert(port, c, &mut self.stats)
    }
}

impl<S: ClusterStore> PageTable for HashedTable<S> {
    fn kind(&self) -> PtKind {
        self.kind
    }

    fn walk(&mut self, port: &mut dyn WalkPort, va: VirtAddr, sizes: &[PageSize]) -> Result<WalkResult, PtError> {
        let mut order: Vec<PageSize> = sizes.iter().copied().filter(|s| store_index(*s).is_ok()).collect();
        if order.is_empty() {
            order = vec![PageSize::Size4K, PageSize::Size2M];
        }
        // Empty per-size tables are skipped; a walk always probes at least one.
        let mut active: Vec<PageSize> = order.iter().copied().filter(|s| self.store(*s).len() > 0).collect();
        if active.is_empty() {
            active.push(order[0]);
        }
        let mut log = Vec::new();
        let mut latency = 0;
        let mut found = None;
        for size in active {
            let (tag, idx) = Self::split(va, size);
            let si = store_index(size)?;
            self.stores[si].ensure(port)?;
            let (c, lat) = self.stores[si].probe(port, tag, &mut log, &mut self.stats)?;
            latency += lat;
            if let Some(p) = c.map(|c| Pte::decode(c.ptes[idx])).filter(|p| p.present) {
                if p.size != size {
                    return Err(PtError::StructureCorrupt(format!("{size} table holds a {} entry", p.size)));
                }
                found = Some(p);
                break;
            }
        }
        let result = match found {
            Some(p) => WalkResult::hit(p, log, latency),
            None => WalkResult::fault(va, log, latency),
        };
        self.stats.record(&result);
        Ok(result)
    }

    fn map(&mut self, port: &mut dyn WalkPort, va: VirtAddr, pte: Pte) -> Result<Vec<PhysAddr>, PtError> {
        assert!(pte.present);
        store_index(pte.size)?;
        let va = va.align_down(pte.size);
        match pte.size {
            PageSize::Size4K if self.get_pte(va, PageSize::Size2M).is_some() => {
                return Err(PtError::Conflict { va: va.as_u64(), reason: "larger leaf covers the address" });
            }
            PageSize::Size2M => {
                let any_small = (0..HUGE_FRAMES / S::FACTOR).any(|i| {
                    let (tag, _) = Self::split(VirtAddr::new_truncate(va.as_u64() + ((i * S::FACTOR) << 12)), PageSize::Size4K);
                    self.stores[0].get(tag).is_some()
                });
                if any_small {
                    return Err(PtError::Conflict { va: va.as_u64(), reason: "smaller mappings exist below" });
                }
            }
            _ => {}
        }
        self.set_pte(port, va, pte.size, pte.encode())
    }

    fn unmap(&mut self, port: &mut dyn WalkPort, va: VirtAddr, size: PageSize) -> Result<Unmapped, PtError> {
        store_index(size)?;
        let va = va.align_down(size);
        let Some(old) = self.get_pte(va, size) else {
            return Ok((None, Vec::new()));
        };
        let writes = self.set_pte(port, va, size, 0)?;
        Ok((Some(old), writes))
    }

    fn promote(&mut self, port: &mut dyn WalkPort, va: VirtAddr, pfn: Pfn) -> Result<Vec<PhysAddr>, PtError> {
        let bad = PtError::MisalignedPromotion { va: va.as_u64() };
        if !va.as_u64().is_multiple_of(PageSize::Size2M.bytes()) || !pfn.0.is_multiple_of(HUGE_FRAMES) {
            return Err(bad);
        }
        let mut dirty = false;
        for i in 0..HUGE_FRAMES {
            let v = VirtAddr::new_truncate(va.as_u64() + (i << 12));
            match self.get_pte(v, PageSize::Size4K) {
                Some(p) if p.pfn.0 == pfn.0 + i => dirty |= p.dirty,
                _ => return Err(bad),
            }
        }
        let mut writes = Vec::new();
        for i in 0..HUGE_FRAMES / S::FACTOR {
            let v = VirtAddr::new_truncate(va.as_u64() + ((i * S::FACTOR) << 12));
            let (tag, _) = Self::split(v, PageSize::Size4K);
            let (_, w) = self.stores[0].remove(port, tag).expect("cluster of a mapped page");
            writes.extend(w);
        }
        let mut huge = Pte::new(pfn, PageSize::Size2M);
        huge.dirty = dirty;
        writes.extend(self.set_pte(port, va, PageSize::Size2M, huge.encode())?);
        Ok(writes)
    }

    fn lookup(&self, va: VirtAddr) -> Option<Pte> {
        self.get_pte(va, PageSize::Size4K).or_else(|| self.get_pte(va, PageSize::Size2M))
    }

    fn footprint(&self) -> u64 {
        self.stores.iter().map(|s| s.footprint()).sum()
    }

    fn release(&mut self, port: &mut dyn WalkPort) {
        for s in &mut self.stores {
            s.release(port);
        }
    }

    fn stats(&self) -> &PtStats {
        &self.stats
    }

    fn audit(&self) -> Result<(), String> {
        self.stores.iter().try_for_each(|s| s.audit())
    }
}

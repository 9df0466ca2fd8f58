//! Per-process page tables, natively or under nested translation.

use std::collections::BTreeMap;

use super::{new_table, NativePort, NestedMmu, PageTable, PtError, PtStats, Unmapped, WalkResult};
use crate::addr::{PageSize, Pfn, PhysAddr, Pid, Pte, VirtAddr, PAGE_SHIFT};
use crate::config::PtConfig;
use crate::memhier::MemHier;
use crate::memmgr::Buddy;

pub struct PtSystem {
    cfg: PtConfig,
    tables: BTreeMap<Pid, Box<dyn PageTable>>,
    nested: Option<NestedMmu>,
}

impl PtSystem {
    /// `host_mm` switches on nested translation; `mm` passed to the other
    /// methods is then the guest-physical pool.
    pub fn new(cfg: &PtConfig, host_mm: Option<Buddy>, mem: &mut MemHier) -> Result<Self, PtError> {
        let nested = match host_mm {
            Some(h) => Some(NestedMmu::new(cfg, h, mem)?),
            None => None,
        };
        Ok(PtSystem { cfg: cfg.clone(), tables: BTreeMap::new(), nested })
    }

    pub fn nested(&self) -> Option<&NestedMmu> {
        self.nested.as_ref()
    }

    pub fn nested_mut(&mut self) -> Option<&mut NestedMmu> {
        self.nested.as_mut()
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> + '_ {
        self.tables.keys().copied()
    }

    pub fn table(&self, pid: Pid) -> Option<&dyn PageTable> {
        self.tables.get(&pid).map(|t| t.as_ref())
    }

    /// Creates the table for `pid` on first use.
    pub fn ensure(&mut self, pid: Pid, mem: &mut MemHier, mm: &mut Buddy) -> Result<(), PtError> {
        if self.tables.contains_key(&pid) {
            return Ok(());
        }
        let kind = if self.nested.is_some() { self.cfg.nested.guest } else { self.cfg.kind };
        let t = match &mut self.nested {
            Some(n) => new_table(kind, &self.cfg, &mut n.port(mem, mm), true)?,
            None => new_table(kind, &self.cfg, &mut NativePort { mem, mm }, true)?,
        };
        self.tables.insert(pid, t);
        Ok(())
    }

    /// Timed walk. Under nesting the returned PTE is the host-physical 4 KiB
    /// translation of `va`.
    pub fn walk(&mut self, pid: Pid, va: VirtAddr, sizes: &[PageSize], mem: &mut MemHier, mm: &mut Buddy) -> Result<WalkResult, PtError> {
        self.ensure(pid, mem, mm)?;
        let t = self.tables.get_mut(&pid).expect("ensured");
        let Some(n) = &mut self.nested else {
            return t.walk(&mut NativePort { mem, mm }, va, sizes);
        };
        let mut port = n.port(mem, mm);
        let mut w = t.walk(&mut port, va, sizes)?;
        if let Some(g) = w.pte {
            let gfn = g.pfn.0 + ((va.as_u64() >> PAGE_SHIFT) & (g.size.frames() - 1));
            let (hfn, lat) = port.translate(gfn, &mut w.accesses)?;
            w.latency += lat;
            w.pte = Some(Pte { pfn: Pfn(hfn), size: PageSize::Size4K, ..g });
        }
        Ok(w)
    }

    /// Installs a mapping. Returned writes are host-physical lines.
    pub fn map(&mut self, pid: Pid, va: VirtAddr, pte: Pte, mem: &mut MemHier, mm: &mut Buddy) -> Result<Vec<PhysAddr>, PtError> {
        self.ensure(pid, mem, mm)?;
        let t = self.tables.get_mut(&pid).expect("ensured");
        match &mut self.nested {
            None => t.map(&mut NativePort { mem, mm }, va, pte),
            Some(n) => {
                for f in pte.pfn.0..pte.pfn.0 + pte.size.frames() {
                    n.back(mem, f)?;
                }
                let writes = t.map(&mut n.port(mem, mm), va, pte)?;
                Ok(Self::to_host(n, writes))
            }
        }
    }

    pub fn unmap(&mut self, pid: Pid, va: VirtAddr, size: PageSize, mem: &mut MemHier, mm: &mut Buddy) -> Result<Unmapped, PtError> {
        let Some(t) = self.tables.get_mut(&pid) else {
            return Ok((None, Vec::new()));
        };
        match &mut self.nested {
            None => t.unmap(&mut NativePort { mem, mm }, va, size),
            Some(n) => {
                let (old, writes) = t.unmap(&mut n.port(mem, mm), va, size)?;
                n.flush_ntlb();
                Ok((old, Self::to_host(n, writes)))
            }
        }
    }

    pub fn promote(&mut self, pid: Pid, va: VirtAddr, pfn: Pfn, mem: &mut MemHier, mm: &mut Buddy) -> Result<Vec<PhysAddr>, PtError> {
        let t = self.tables.get_mut(&pid).ok_or(PtError::MisalignedPromotion { va: va.as_u64() })?;
        match &mut self.nested {
            None => t.promote(&mut NativePort { mem, mm }, va, pfn),
            Some(n) => {
                let writes = t.promote(&mut n.port(mem, mm), va, pfn)?;
                Ok(Self::to_host(n, writes))
            }
        }
    }

    fn to_host(n: &NestedMmu, writes: Vec<PhysAddr>) -> Vec<PhysAddr> {
        writes
            .into_iter()
            .filter_map(|g| n.host_frame(g.0 >> PAGE_SHIFT).map(|h| PhysAddr((h << PAGE_SHIFT) | (g.0 & 0xfff))))
            .collect()
    }

    /// Untimed lookup of the (guest-level, when nested) PTE.
    pub fn lookup(&self, pid: Pid, va: VirtAddr) -> Option<Pte> {
        self.tables.get(&pid)?.lookup(va)
    }

    pub fn footprint(&self, pid: Pid) -> u64 {
        self.tables.get(&pid).map_or(0, |t| t.footprint())
    }

    pub fn stats(&self) -> PtStats {
        let mut s = PtStats::default();
        for t in self.tables.values() {
            let x = t.stats();
            s.walks += x.walks;
            s.walk_accesses += x.walk_accesses;
            s.single_access_walks += x.single_access_walks;
            s.resizes += x.resizes;
            s.kicks += x.kicks;
            s.stash_probes += x.stash_probes;
            s.pwc_hits += x.pwc_hits;
            s.pwc_misses += x.pwc_misses;
        }
        s
    }

    pub fn audit(&self) -> Result<(), String> {
        self.tables.values().try_for_each(|t| t.audit())
    }
}

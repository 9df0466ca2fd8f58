//! Two-dimensional translation: guest tables live in guest-physical memory
//! and every guest-physical access is host-translated first, through the
//! nested TLB or a host walk.

use serde::Serialize;

use super::{new_table, NativePort, PageTable, PtError, WalkPort};
use crate::addr::{PageSize, Pfn, PhysAddr, Pte, VirtAddr, PAGE_SHIFT};
use crate::config::PtConfig;
use crate::memhier::{AccessKind, MemHier};
use crate::memmgr::{Buddy, Owner};
use crate::setassoc::SetAssoc;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NestedStats {
    pub ntlb_hits: u64,
    pub ntlb_misses: u64,
    pub host_walks: u64,
    pub host_walk_accesses: u64,
    pub backed_frames: u64,
}

pub struct NestedMmu {
    pub host_mm: Buddy,
    host: Box<dyn PageTable>,
    ntlb: SetAssoc<u64>,
    ntlb_latency: u64,
    pub stats: NestedStats,
}

impl NestedMmu {
    pub fn new(cfg: &PtConfig, host_mm: Buddy, mem: &mut MemHier) -> Result<Self, PtError> {
        let mut host_mm = host_mm;
        let host = new_table(cfg.nested.host, cfg, &mut NativePort { mem, mm: &mut host_mm }, cfg.nested.host_pwc)?;
        let n = &cfg.nested.ntlb;
        Ok(NestedMmu {
            host_mm,
            host,
            ntlb: SetAssoc::new(n.entries as usize, n.assoc as usize),
            ntlb_latency: n.latency,
            stats: NestedStats::default(),
        })
    }

    pub fn port<'a>(&'a mut self, mem: &'a mut MemHier, guest_mm: &'a mut Buddy) -> NestedPort<'a> {
        NestedPort { mmu: self, mem, guest_mm }
    }

    /// Host frame backing guest frame `gfn`, if any (untimed).
    pub fn host_frame(&self, gfn: u64) -> Option<u64> {
        self.host.lookup(VirtAddr::new_truncate(gfn << PAGE_SHIFT)).map(|p| {
            p.pfn.0 + (gfn & (p.size.frames() - 1))
        })
    }

    /// Backs `gfn` with a host frame at 4 KiB granularity. Idempotent.
    pub fn back(&mut self, mem: &mut MemHier, gfn: u64) -> Result<u64, PtError> {
        if let Some(h) = self.host_frame(gfn) {
            return Ok(h);
        }
        let hfn = self.host_mm.alloc_block(0, Owner::User)?;
        let mut port = NativePort { mem, mm: &mut self.host_mm };
        self.host.map(&mut port, VirtAddr::new_truncate(gfn << PAGE_SHIFT), Pte::new(Pfn(hfn), PageSize::Size4K))?;
        self.stats.backed_frames += 1;
        Ok(hfn)
    }

    pub fn host_footprint(&self) -> u64 {
        self.host.footprint()
    }

    pub fn host_table(&self) -> &dyn PageTable {
        self.host.as_ref()
    }

    pub fn flush_ntlb(&mut self) {
        self.ntlb.clear();
    }
}

pub struct NestedPort<'a> {
    mmu: &'a mut NestedMmu,
    mem: &'a mut MemHier,
    guest_mm: &'a mut Buddy,
}

impl NestedPort<'_> {
    /// Timed guest-frame to host-frame translation.
    pub fn translate(&mut self, gfn: u64, log: &mut Vec<PhysAddr>) -> Result<(u64, u64), PtError> {
        let mmu = &mut *self.mmu;
        let mut latency = 0;
        if mmu.ntlb.enabled() {
            latency += mmu.ntlb_latency;
            if let Some(h) = mmu.ntlb.get(gfn) {
                mmu.stats.ntlb_hits += 1;
                return Ok((h, latency));
            }
            mmu.stats.ntlb_misses += 1;
        }
        let mut port = NativePort { mem: self.mem, mm: &mut mmu.host_mm };
        let w = mmu.host.walk(&mut port, VirtAddr::new_truncate(gfn << PAGE_SHIFT), &[PageSize::Size4K, PageSize::Size2M])?;
        mmu.stats.host_walks += 1;
        mmu.stats.host_walk_accesses += w.accesses.len() as u64;
        log.extend_from_slice(&w.accesses);
        latency += w.latency;
        let pte = w.pte.ok_or_else(|| PtError::StructureCorrupt(format!("guest frame {gfn:#x} has no host backing")))?;
        let hfn = pte.pfn.0 + (gfn & (pte.size.frames() - 1));
        mmu.ntlb.insert(gfn, hfn);
        Ok((hfn, latency))
    }
}

impl WalkPort for NestedPort<'_> {
    fn read(&mut self, gpa: u64, log: &mut Vec<PhysAddr>) -> Result<u64, PtError> {
        let (hfn, mut latency) = self.translate(gpa >> PAGE_SHIFT, log)?;
        let hpa = (hfn << PAGE_SHIFT) | (gpa & ((1 << PAGE_SHIFT) - 1));
        latency += self.mem.access(PhysAddr(hpa), AccessKind::Pte, false)?.latency;
        log.push(PhysAddr(hpa));
        Ok(latency)
    }

    fn alloc_frames(&mut self, order: u32) -> Result<u64, PtError> {
        let gfn = self.guest_mm.alloc_block(order, Owner::PageTable)?;
        for f in gfn..gfn + (1 << order) {
            self.mmu.back(self.mem, f)?;
        }
        Ok(gfn)
    }

    fn free_frames(&mut self, gfn: u64, order: u32) {
        self.guest_mm.free_block(gfn, order).expect("guest table frame was allocated through this port");
    }

    fn max_order(&self) -> u32 {
        self.guest_mm.max_order()
    }
}

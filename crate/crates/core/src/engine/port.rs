//! The simulator side of handler queries. Every frame handed out is
//! recorded so actions can be audited against it.

use super::{Grants, BACKSIDE};
use crate::addr::{PageSize, Pid, VirtAddr, PAGE_SHIFT};
use crate::altmap::{Intermediate, RestSeg};
use crate::faultsvc::QueryPort;
use crate::memmgr::{Buddy, FragmentationReport, Owner};
use crate::pagetable::PtSystem;

pub(super) struct SimPort<'a> {
    pub mm: &'a mut Buddy,
    pub pts: &'a PtSystem,
    pub restseg: Option<&'a RestSeg>,
    pub inter: Option<&'a Intermediate>,
    pub grants: &'a mut Grants,
}

impl QueryPort for SimPort<'_> {
    fn alloc_block(&mut self, order: u32) -> Result<u64, String> {
        let pfn = self.mm.alloc_block(order, Owner::User).map_err(|e| e.to_string())?;
        self.grants.add(pfn, 1 << order);
        Ok(pfn)
    }

    fn alloc_contig(&mut self, frames: u64) -> Result<Vec<(u64, u32)>, String> {
        if frames == 0 {
            return Err("zero frames requested".into());
        }
        let blocks = self.mm.alloc_contig(frames, Owner::User).map_err(|e| e.to_string())?;
        for &(pfn, order) in &blocks {
            self.grants.add(pfn, 1 << order);
        }
        Ok(blocks)
    }

    fn free_block(&mut self, pfn: u64, order: u32) -> Result<(), String> {
        if order > self.mm.max_order() || !self.grants.covers(pfn, 1 << order) {
            return Err(format!("frames {pfn:#x}+{} were not granted", 1u64 << order.min(63)));
        }
        self.mm.release(pfn, order).map_err(|e| e.to_string())?;
        self.grants.remove(pfn, 1 << order);
        Ok(())
    }

    fn read_pte(&mut self, pid: Pid, vpn: u64) -> Option<(u64, PageSize)> {
        let va = VirtAddr::new(vpn.checked_mul(1 << PAGE_SHIFT)?).ok()?;
        let pte = match self.inter {
            Some(i) => self.pts.lookup(BACKSIDE, Intermediate::backside_key(i.ia_of(pid, va)?)),
            None => self.pts.lookup(pid, va),
        }?;
        Some((pte.pfn.0, pte.size))
    }

    fn frag(&mut self) -> FragmentationReport {
        self.mm.report()
    }

    fn restseg_slot(&mut self, pid: Pid, vpn: u64) -> Option<(u64, u64)> {
        self.restseg?.free_slot(pid, vpn)
    }
}

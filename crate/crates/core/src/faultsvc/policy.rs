//! In-process reference handlers: demand 4 KiB, reservation-based THP and
//! eager paging. They talk to the simulator only through [`QueryPort`], so
//! an external handler issuing the same queries produces the same actions.

use std::collections::BTreeMap;

use super::{frame_descriptor, vpn4k, Action, FaultCosts, FaultError, FaultRequest, FaultResponse, Handler, QueryPort, RequestContext};
use crate::addr::{PageSize, Pid, HUGE_FRAMES, HUGE_ORDER, PAGE_SHIFT};
use crate::config::MmPolicy;
use crate::memmgr::ReservationTable;
use crate::trace::AllocHint;

const HUGE_BYTES: u64 = HUGE_FRAMES << PAGE_SHIFT;

pub struct PolicyHandler {
    policy: MmPolicy,
    costs: FaultCosts,
    promote_threshold: f64,
    restseg: bool,
    /// Explicit VMAs per process: base -> (len, hint).
    vmas: BTreeMap<Pid, BTreeMap<u64, (u64, AllocHint)>>,
    reservations: ReservationTable,
}

/// Per-request scratch: actions and kernel lines touched.
#[derive(Default)]
struct Work {
    actions: Vec<Action>,
    touches: Vec<u64>,
}

impl PolicyHandler {
    pub fn new(policy: MmPolicy, costs: FaultCosts, promote_threshold: f64, restseg: bool) -> Self {
        PolicyHandler {
            policy,
            costs,
            promote_threshold,
            restseg,
            vmas: BTreeMap::new(),
            reservations: ReservationTable::default(),
        }
    }

    pub fn reservations(&self) -> &ReservationTable {
        &self.reservations
    }

    fn alloc(&mut self, port: &mut dyn QueryPort, order: u32, w: &mut Work) -> Option<u64> {
        let pfn = port.alloc_block(order).ok()?;
        w.touches.push(frame_descriptor(pfn));
        Some(pfn)
    }

    fn free(&mut self, port: &mut dyn QueryPort, pfn: u64, order: u32, w: &mut Work) {
        if port.free_block(pfn, order).is_ok() {
            w.touches.push(frame_descriptor(pfn));
        }
    }

    /// Releases the untouched frames of a reservation; touched frames stay
    /// mapped as 4 KiB pages.
    fn break_reservation(&mut self, port: &mut dyn QueryPort, pid: Pid, region: u64, w: &mut Work) {
        let Some(r) = self.reservations.remove(pid, region) else { return };
        for i in 0..HUGE_FRAMES {
            if !r.is_touched(i) {
                self.free(port, r.pfn + i, 0, w);
            }
        }
    }

    /// One order-0 frame, breaking reservations (least touched first)
    /// under memory pressure.
    fn alloc_4k(&mut self, port: &mut dyn QueryPort, w: &mut Work) -> Option<u64> {
        loop {
            if let Some(p) = self.alloc(port, 0, w) {
                return Some(p);
            }
            let (pid, region) = self.reservations.least_touched()?;
            self.break_reservation(port, pid, region, w);
        }
    }

    fn demand(&mut self, port: &mut dyn QueryPort, pid: Pid, vpn: u64, w: &mut Work) {
        if self.restseg {
            if let Some((set, way)) = port.restseg_slot(pid, vpn) {
                w.actions.push(Action::FillRestseg { vpn, set, way });
                return;
            }
        }
        match self.alloc_4k(port, w) {
            Some(pfn) => w.actions.push(Action::Map { vpn, pfn, size: PageSize::Size4K }),
            None => w.actions.push(Action::Kill { reason: "out of memory".into() }),
        }
    }

    fn covered_by_vma(&self, pid: Pid, region: u64) -> bool {
        let Some(m) = self.vmas.get(&pid) else { return false };
        m.range(..=region).next_back().is_some_and(|(&b, &(len, _))| b + len >= region + HUGE_BYTES)
    }

    fn thp(&mut self, port: &mut dyn QueryPort, pid: Pid, va: u64, w: &mut Work) {
        let vpn = vpn4k(va);
        let region = va & !(HUGE_BYTES - 1);
        let index = vpn & (HUGE_FRAMES - 1);
        if self.reservations.get(pid, region).is_none() && self.covered_by_vma(pid, region) {
            if let Some(block) = self.alloc(port, HUGE_ORDER, w) {
                self.reservations.insert(pid, region, block);
                w.actions.push(Action::Reserve { va_2m: region, pfn_block: block });
            }
        }
        let Some(r) = self.reservations.get_mut(pid, region) else {
            return self.demand(port, pid, vpn, w);
        };
        r.touch(index);
        let block = r.pfn;
        w.actions.push(Action::Map { vpn, pfn: block + index, size: PageSize::Size4K });
        let ratio = r.touched_count() as f64 / HUGE_FRAMES as f64;
        if ratio >= self.promote_threshold {
            let r = self.reservations.remove(pid, region).expect("present");
            let base_vpn = vpn4k(region);
            for i in (0..HUGE_FRAMES).filter(|&i| !r.is_touched(i)) {
                w.actions.push(Action::Map { vpn: base_vpn + i, pfn: block + i, size: PageSize::Size4K });
            }
            w.actions.push(Action::Promote { va_2m: region, pfn_block: block });
        }
    }

    /// Physically adjacent blocks share one range.
    fn eager_alloc(&mut self, port: &mut dyn QueryPort, base: u64, len: u64, w: &mut Work) {
        let Ok(blocks) = port.alloc_contig(len >> PAGE_SHIFT) else { return };
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for &(pfn, order) in &blocks {
            w.touches.push(frame_descriptor(pfn));
            match runs.last_mut() {
                Some((start, n)) if *start + *n == pfn => *n += 1 << order,
                _ => runs.push((pfn, 1 << order)),
            }
        }
        let mut cursor = base;
        for (pfn, frames) in runs {
            let bytes = frames << PAGE_SHIFT;
            w.actions.push(Action::AddRange {
                vbase: cursor,
                vlimit: cursor + bytes,
                offset: (pfn << PAGE_SHIFT) as i64 - cursor as i64,
            });
            for i in 0..frames {
                w.actions.push(Action::Map { vpn: vpn4k(cursor) + i, pfn: pfn + i, size: PageSize::Size4K });
            }
            cursor += bytes;
        }
    }

    fn eager_for(&self, hint: AllocHint) -> bool {
        hint == AllocHint::Eager || (self.policy == MmPolicy::Eager && hint == AllocHint::None)
    }
}

impl Handler for PolicyHandler {
    fn handle(&mut self, req: &FaultRequest, port: &mut dyn QueryPort) -> Result<FaultResponse, FaultError> {
        let mut w = Work::default();
        let pid = req.pid;
        match req.context {
            RequestContext::Fault { va, .. } => match self.policy {
                MmPolicy::ThpReserve => self.thp(port, pid, va, &mut w),
                MmPolicy::Demand4k | MmPolicy::Eager => self.demand(port, pid, vpn4k(va), &mut w),
            },
            RequestContext::VmaAlloc { base, len, hint } => {
                self.vmas.entry(pid).or_default().insert(base, (len, hint));
                if self.eager_for(hint) {
                    self.eager_alloc(port, base, len, &mut w);
                }
            }
            RequestContext::VmaFree { base, len } => {
                if let Some(m) = self.vmas.get_mut(&pid) {
                    m.remove(&base);
                }
                for r in self.reservations.drain_overlapping(pid, base, len) {
                    for i in (0..HUGE_FRAMES).filter(|&i| !r.is_touched(i)) {
                        self.free(port, r.pfn + i, 0, &mut w);
                    }
                }
            }
        }
        let handler_cycles = if w.actions.is_empty() && w.touches.is_empty() { 0 } else { self.costs.cycles(w.actions.len()) };
        Ok(FaultResponse { re: req.id, actions: w.actions, handler_cycles, touches: w.touches })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::faultsvc::QueryPort;
    use crate::memmgr::{Buddy, FragmentationReport, Owner};
    use crate::trace::Access;

    /// Minimal simulator side over a bare buddy allocator.
    pub struct BuddyPort(pub Buddy);

    impl QueryPort for BuddyPort {
        fn alloc_block(&mut self, order: u32) -> Result<u64, String> {
            self.0.alloc_block(order, Owner::User).map_err(|e| e.to_string())
        }
        fn alloc_contig(&mut self, frames: u64) -> Result<Vec<(u64, u32)>, String> {
            self.0.alloc_contig(frames, Owner::User).map_err(|e| e.to_string())
        }
        fn free_block(&mut self, pfn: u64, order: u32) -> Result<(), String> {
            self.0.release(pfn, order).map_err(|e| e.to_string())
        }
        fn read_pte(&mut self, _: Pid, _: u64) -> Option<(u64, PageSize)> {
            None
        }
        fn frag(&mut self) -> FragmentationReport {
            self.0.report()
        }
        fn restseg_slot(&mut self, _: Pid, _: u64) -> Option<(u64, u64)> {
            None
        }
    }

    const COSTS: FaultCosts = FaultCosts { base: 1000, per_action: 200 };

    fn fault(id: u64, va: u64) -> FaultRequest {
        FaultRequest { id, pid: Pid(1), cycle: 0, context: RequestContext::Fault { va, access: Access::Read } }
    }

    fn alloc(id: u64, base: u64, len: u64, hint: AllocHint) -> FaultRequest {
        FaultRequest { id, pid: Pid(1), cycle: 0, context: RequestContext::VmaAlloc { base, len, hint } }
    }

    #[test]
    fn demand4k_maps_frame_zero() {
        let mut port = BuddyPort(Buddy::new(1024, 10));
        let mut h = PolicyHandler::new(MmPolicy::Demand4k, COSTS, 1.0, false);
        let r = h.handle(&fault(1, 0x123000), &mut port).unwrap();
        assert_eq!(r.actions, vec![Action::Map { vpn: 0x123, pfn: 0, size: PageSize::Size4K }]);
        assert_eq!(r.handler_cycles, 1000);
        assert_eq!(r.touches, vec![frame_descriptor(0)]);
    }

    #[test]
    fn eager_alloc_maps_whole_region() {
        let mut port = BuddyPort(Buddy::new(1024, 10));
        let mut h = PolicyHandler::new(MmPolicy::Eager, COSTS, 1.0, false);
        let r = h.handle(&alloc(1, 0x4000_0000, 2 << 20, AllocHint::None), &mut port).unwrap();
        assert_eq!(r.actions.len(), 513);
        assert_eq!(r.actions[0], Action::AddRange { vbase: 0x4000_0000, vlimit: 0x4020_0000, offset: -0x4000_0000 });
        assert_eq!(r.actions[512], Action::Map { vpn: 0x401ff, pfn: 511, size: PageSize::Size4K });
        assert_eq!(r.handler_cycles, 1000 + 200 * 512);
    }

    #[test]
    fn thp_promotes_on_512th_fault() {
        let mut port = BuddyPort(Buddy::new(1024, 10));
        let mut h = PolicyHandler::new(MmPolicy::ThpReserve, COSTS, 1.0, false);
        h.handle(&alloc(1, 0x4000_0000, 2 << 20, AllocHint::None), &mut port).unwrap();
        let first = h.handle(&fault(2, 0x4000_0000), &mut port).unwrap();
        assert_eq!(first.actions[0], Action::Reserve { va_2m: 0x4000_0000, pfn_block: 0 });
        for i in 1..511u64 {
            let r = h.handle(&fault(2 + i, 0x4000_0000 + (i << 12)), &mut port).unwrap();
            assert_eq!(r.actions.len(), 1);
        }
        let last = h.handle(&fault(600, 0x401f_f000), &mut port).unwrap();
        assert_eq!(last.actions.last(), Some(&Action::Promote { va_2m: 0x4000_0000, pfn_block: 0 }));
        assert!(h.reservations().is_empty());
    }

    #[test]
    fn thp_without_huge_block_falls_back() {
        let mut b = Buddy::new(1024, 10);
        b.fragment_checkerboard();
        let mut port = BuddyPort(b);
        let mut h = PolicyHandler::new(MmPolicy::ThpReserve, COSTS, 1.0, false);
        h.handle(&alloc(1, 0x4000_0000, 2 << 20, AllocHint::None), &mut port).unwrap();
        let r = h.handle(&fault(2, 0x4000_0000), &mut port).unwrap();
        assert!(matches!(r.actions[..], [Action::Map { size: PageSize::Size4K, .. }]));
    }

    #[test]
    fn pressure_breaks_least_touched_reservation() {
        // 2048 frames: two reservations take every order-9 block but two.
        let mut port = BuddyPort(Buddy::new(2048, 10));
        let mut h = PolicyHandler::new(MmPolicy::ThpReserve, COSTS, 1.0, false);
        h.handle(&alloc(1, 0x4000_0000, 8 << 20, AllocHint::None), &mut port).unwrap();
        // Region A: 3 touches, region B: 1 touch.
        for i in 0..3u64 {
            h.handle(&fault(10 + i, 0x4000_0000 + (i << 12)), &mut port).unwrap();
        }
        h.handle(&fault(20, 0x4020_0000), &mut port).unwrap();
        h.handle(&fault(21, 0x4040_0000), &mut port).unwrap();
        h.handle(&fault(22, 0x4060_0000), &mut port).unwrap();
        assert_eq!(h.reservations().len(), 4);
        assert_eq!(port.0.free_frames(), 0);
        // Outside any VMA: a plain 4 KiB fault under pressure.
        let r = h.handle(&fault(30, 0x9000_0000), &mut port).unwrap();
        // The oldest one-touch reservation (region B at pfn 512) is broken:
        // its 511 untouched frames are freed and one of them is mapped.
        assert_eq!(h.reservations().len(), 3);
        assert!(h.reservations().get(Pid(1), 0x4020_0000).is_none());
        assert_eq!(r.actions, vec![Action::Map { vpn: 0x90000, pfn: 513, size: PageSize::Size4K }]);
        assert_eq!(port.0.free_frames(), 510);
    }
}

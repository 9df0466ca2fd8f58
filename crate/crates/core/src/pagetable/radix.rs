//! Four-level radix table with page-walk caches.

use std::collections::{BTreeSet, HashMap};

use super::{PageTable, PtError, PtStats, Unmapped, WalkPort, WalkResult};
use crate::addr::{split_radix_indices, PageSize, Pfn, PhysAddr, Pte, VirtAddr, HUGE_FRAMES, PAGE_SHIFT};
use crate::config::{PtKind, PwcConfig, SmallCacheConfig};
use crate::setassoc::SetAssoc;

/// Level at which a leaf of `size` lives.
fn leaf_level(size: PageSize) -> u8 {
    match size {
        PageSize::Size4K => 1,
        PageSize::Size2M => 2,
        PageSize::Size1G => 3,
    }
}

fn is_leaf(level: u8, pte: &Pte) -> bool {
    level == 1 || (level == 2 && pte.size == PageSize::Size2M) || (level == 3 && pte.size == PageSize::Size1G)
}

/// VA bits above the table reached after consulting the entry at `level`.
fn prefix_shift(level: u8) -> u32 {
    12 + 9 * u32::from(level - 1)
}

struct Pwc {
    cache: SetAssoc<u64>,
    latency: u64,
}

impl Pwc {
    fn new(c: &SmallCacheConfig) -> Self {
        Pwc { cache: SetAssoc::new(c.entries as usize, c.assoc as usize), latency: c.latency }
    }
}

pub struct RadixTable {
    root: u64,
    entries: HashMap<u64, u64>,
    nodes: BTreeSet<u64>,
    /// Indexed by the level whose entry they cache: [L4, L3, L2].
    pwc: [Pwc; 3],
    stats: PtStats,
}

impl RadixTable {
    pub fn new(port: &mut dyn WalkPort, pwc: &PwcConfig) -> Result<Self, PtError> {
        let root = port.alloc_frames(0)?;
        Ok(RadixTable {
            root,
            entries: HashMap::new(),
            nodes: BTreeSet::from([root]),
            pwc: [Pwc::new(&pwc.l4), Pwc::new(&pwc.l3), Pwc::new(&pwc.l2)],
            stats: PtStats::default(),
        })
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn table_frames(&self) -> u64 {
        self.nodes.len() as u64
    }

    fn entry_addr(node: u64, va: VirtAddr, level: u8) -> u64 {
        (node << PAGE_SHIFT) + split_radix_indices(va).at(level) as u64 * 8
    }

    fn entry(&self, addr: u64) -> Pte {
        Pte::decode(self.entries.get(&addr).copied().unwrap_or(0))
    }

    fn pwc_slot(level: u8) -> usize {
        (4 - level) as usize
    }

    /// Follows present interior entries from the root down to `stop`
    /// (exclusive), returning the node holding the `stop`-level entry.
    fn descend(&self, va: VirtAddr, stop: u8) -> Result<Option<u64>, ()> {
        let mut node = self.root;
        for level in (stop + 1..=4).rev() {
            let e = self.entry(Self::entry_addr(node, va, level));
            if !e.present {
                return Ok(None);
            }
            if is_leaf(level, &e) {
                return Err(());
            }
            node = e.pfn.0;
        }
        Ok(Some(node))
    }

    pub fn invalidate_pwc(&mut self) {
        for p in &mut self.pwc {
            p.cache.clear();
        }
    }
}

impl PageTable for RadixTable {
    fn kind(&self) -> PtKind {
        PtKind::Radix
    }

    fn walk(&mut self, port: &mut dyn WalkPort, va: VirtAddr, _sizes: &[PageSize]) -> Result<WalkResult, PtError> {
        let mut log = Vec::with_capacity(4);
        let mut latency = 0;
        let (mut level, mut node) = (4u8, self.root);
        for cached in [2u8, 3, 4] {
            let pwc = &mut self.pwc[Self::pwc_slot(cached)];
            if !pwc.cache.enabled() {
                continue;
            }
            latency += pwc.latency;
            if let Some(n) = pwc.cache.get(va.as_u64() >> prefix_shift(cached)) {
                self.stats.pwc_hits += 1;
                level = cached - 1;
                node = n;
                break;
            }
            self.stats.pwc_misses += 1;
        }
        let result = loop {
            let addr = Self::entry_addr(node, va, level);
            latency += port.read(addr, &mut log)?;
            let e = self.entry(addr);
            if !e.present {
                break WalkResult::fault(va, log, latency);
            }
            if is_leaf(level, &e) {
                break WalkResult::hit(e, log, latency);
            }
            node = e.pfn.0;
            let pwc = &mut self.pwc[Self::pwc_slot(level)];
            pwc.cache.insert(va.as_u64() >> prefix_shift(level), node);
            level -= 1;
        };
        self.stats.record(&result);
        Ok(result)
    }

    fn map(&mut self, port: &mut dyn WalkPort, va: VirtAddr, pte: Pte) -> Result<Vec<PhysAddr>, PtError> {
        assert!(pte.present);
        let va = va.align_down(pte.size);
        let target = leaf_level(pte.size);
        let mut writes = Vec::new();
        let mut node = self.root;
        for level in (target + 1..=4).rev() {
            let addr = Self::entry_addr(node, va, level);
            let e = self.entry(addr);
            if !e.present {
                let child = port.alloc_frames(0)?;
                self.nodes.insert(child);
                self.entries.insert(addr, Pte::new(Pfn(child), PageSize::Size4K).encode());
                writes.push(PhysAddr(addr));
                node = child;
            } else if is_leaf(level, &e) {
                return Err(PtError::Conflict { va: va.as_u64(), reason: "larger leaf covers the address" });
            } else {
                node = e.pfn.0;
            }
        }
        let addr = Self::entry_addr(node, va, target);
        let old = self.entry(addr);
        if old.present && !is_leaf(target, &old) {
            return Err(PtError::Conflict { va: va.as_u64(), reason: "smaller mappings exist below" });
        }
        self.entries.insert(addr, pte.encode());
        writes.push(PhysAddr(addr));
        Ok(writes)
    }

    fn unmap(&mut self, _port: &mut dyn WalkPort, va: VirtAddr, size: PageSize) -> Result<Unmapped, PtError> {
        let va = va.align_down(size);
        let level = leaf_level(size);
        let Ok(Some(node)) = self.descend(va, level) else {
            return Ok((None, Vec::new()));
        };
        let addr = Self::entry_addr(node, va, level);
        let e = self.entry(addr);
        if !e.present || !is_leaf(level, &e) {
            return Ok((None, Vec::new()));
        }
        self.entries.remove(&addr);
        Ok((Some(e), vec![PhysAddr(addr)]))
    }

    fn promote(&mut self, port: &mut dyn WalkPort, va: VirtAddr, pfn: Pfn) -> Result<Vec<PhysAddr>, PtError> {
        let bad = PtError::MisalignedPromotion { va: va.as_u64() };
        if !va.as_u64().is_multiple_of(PageSize::Size2M.bytes()) || !pfn.0.is_multiple_of(HUGE_FRAMES) {
            return Err(bad);
        }
        let Ok(Some(l2_node)) = self.descend(va, 2) else {
            return Err(bad);
        };
        let l2_addr = Self::entry_addr(l2_node, va, 2);
        let l2 = self.entry(l2_addr);
        if !l2.present || is_leaf(2, &l2) {
            return Err(bad);
        }
        let l1_node = l2.pfn.0;
        let mut dirty = false;
        for i in 0..HUGE_FRAMES {
            let e = self.entry((l1_node << PAGE_SHIFT) + i * 8);
            if !e.present || e.pfn.0 != pfn.0 + i {
                return Err(bad);
            }
            dirty |= e.dirty;
        }
        for i in 0..HUGE_FRAMES {
            self.entries.remove(&((l1_node << PAGE_SHIFT) + i * 8));
        }
        self.nodes.remove(&l1_node);
        port.free_frames(l1_node, 0);
        let mut huge = Pte::new(pfn, PageSize::Size2M);
        huge.dirty = dirty;
        self.entries.insert(l2_addr, huge.encode());
        self.pwc[Self::pwc_slot(2)].cache.remove(va.as_u64() >> prefix_shift(2));
        Ok(vec![PhysAddr(l2_addr)])
    }

    fn lookup(&self, va: VirtAddr) -> Option<Pte> {
        let mut node = self.root;
        for level in (1..=4u8).rev() {
            let e = self.entry(Self::entry_addr(node, va, level));
            if !e.present {
                return None;
            }
            if is_leaf(level, &e) {
                return Some(e);
            }
            node = e.pfn.0;
        }
        None
    }

    fn footprint(&self) -> u64 {
        (self.nodes.len() as u64) << PAGE_SHIFT
    }

    fn release(&mut self, port: &mut dyn WalkPort) {
        for n in std::mem::take(&mut self.nodes) {
            port.free_frames(n, 0);
        }
        self.entries.clear();
        self.invalidate_pwc();
    }

    fn stats(&self) -> &PtStats {
        &self.stats
    }

    fn audit(&self) -> Result<(), String> {
        for &addr in self.entries.keys() {
            if !self.nodes.contains(&(addr >> PAGE_SHIFT)) {
                return Err(format!("entry {addr:#x} outside table frames"));
            }
        }
        Ok(())
    }
}

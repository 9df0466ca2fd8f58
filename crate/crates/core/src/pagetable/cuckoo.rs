//! Elastic cuckoo hashing: d-ary cuckoo tables that grow by gradual,
//! pointer-driven migration instead of a stop-the-world rehash.

use super::hashed::{salt_for, Cluster, ClusterStore};
use super::{PtError, PtStats, TableStorage, WalkPort};
use crate::addr::PhysAddr;
use crate::config::CuckooConfig;
use crate::hash::mix64;

struct Way {
    storage: TableStorage,
    slots: Vec<Option<Cluster>>,
    salt: u64,
}

impl Way {
    fn new(port: &mut dyn WalkPort, size: u64, salt: u64) -> Result<Self, PtError> {
        Ok(Way { storage: TableStorage::new(port, size)?, slots: vec![None; size as usize], salt })
    }

    fn slot(&self, tag: u64) -> u64 {
        mix64(tag ^ self.salt) % self.slots.len() as u64
    }

    fn line(&self, slot: u64) -> u64 {
        self.storage.line_addr(slot)
    }
}

/// Old tables being drained into the current ones. Old slots below `ptr`
/// have been migrated.
struct Migration {
    old: Vec<Way>,
    ptr: u64,
}

pub struct CuckooStore {
    ways: Vec<Way>,
    migration: Option<Migration>,
    size: u64,
    d: usize,
    threshold: f64,
    kick_limit: u32,
    migrate_per_insert: u64,
    parallel: bool,
    len: u64,
    salt_seed: u64,
    generation: u64,
}

impl CuckooStore {
    pub fn new(port: &mut dyn WalkPort, cfg: &CuckooConfig, size_per_way: u64, salt_seed: u64) -> Result<Self, PtError> {
        let mut s = Self::new_lazy(cfg, size_per_way, salt_seed);
        s.ensure(port)?;
        Ok(s)
    }

    pub fn new_lazy(cfg: &CuckooConfig, size_per_way: u64, salt_seed: u64) -> Self {
        assert!(cfg.ways >= 2 && size_per_way >= 1);
        CuckooStore {
            ways: Vec::new(),
            migration: None,
            size: size_per_way,
            d: cfg.ways as usize,
            threshold: cfg.threshold,
            kick_limit: cfg.kick_limit,
            migrate_per_insert: u64::from(cfg.migrate_per_insert),
            parallel: cfg.parallel,
            len: 0,
            salt_seed,
            generation: 0,
        }
    }

    pub fn size_per_way(&self) -> u64 {
        self.size
    }

    pub fn is_migrating(&self) -> bool {
        self.migration.is_some()
    }

    /// Occupancy of the current tables.
    pub fn occupancy(&self) -> f64 {
        let in_old: u64 = self
            .migration
            .as_ref()
            .map_or(0, |m| m.old.iter().map(|w| w.slots.iter().flatten().count() as u64).sum());
        (self.len - in_old) as f64 / (self.size * self.d as u64) as f64
    }

    fn new_ways(&mut self, port: &mut dyn WalkPort, size: u64) -> Result<Vec<Way>, PtError> {
        self.generation += 1;
        let mut ways = Vec::with_capacity(self.d);
        for w in 0..self.d {
            let salt = salt_for(self.salt_seed * 1_000_003 + self.generation * 64 + w as u64);
            match Way::new(port, size, salt) {
                Ok(way) => ways.push(way),
                Err(e) => {
                    for mut way in ways {
                        way.storage.release(port);
                    }
                    return Err(e);
                }
            }
        }
        Ok(ways)
    }

    /// Where `tag` lives: (in old tables?, way, slot).
    fn locate(&self, tag: u64) -> Option<(bool, usize, u64)> {
        for w in 0..self.ways.len() {
            if let Some(m) = &self.migration {
                let s = m.old[w].slot(tag);
                if s >= m.ptr && m.old[w].slots[s as usize].is_some_and(|c| c.tag == tag) {
                    return Some((true, w, s));
                }
            }
            let s = self.ways[w].slot(tag);
            if self.ways[w].slots[s as usize].is_some_and(|c| c.tag == tag) {
                return Some((false, w, s));
            }
        }
        None
    }

    /// Cuckoo insertion into `ways`. Returns the lines written, or the
    /// cluster left homeless once the kick limit is exceeded.
    fn place(ways: &mut [Way], mut c: Cluster, kick_limit: u32, stats: &mut PtStats, writes: &mut Vec<PhysAddr>) -> Result<(), Cluster> {
        let d = ways.len();
        let mut victim_way = 0;
        for kick in 0..=kick_limit {
            for way in ways.iter_mut() {
                let s = way.slot(c.tag);
                if way.slots[s as usize].is_none() {
                    way.slots[s as usize] = Some(c);
                    writes.push(PhysAddr(way.line(s)));
                    return Ok(());
                }
            }
            if kick == kick_limit {
                break;
            }
            let way = &mut ways[victim_way];
            let s = way.slot(c.tag);
            let evicted = way.slots[s as usize].replace(c).expect("occupied slot");
            writes.push(PhysAddr(way.line(s)));
            stats.kicks += 1;
            c = evicted;
            victim_way = (victim_way + 1) % d;
        }
        Err(c)
    }

    fn start_resize(&mut self, port: &mut dyn WalkPort, stats: &mut PtStats) -> Result<(), PtError> {
        debug_assert!(self.migration.is_none());
        let ways = self.new_ways(port, self.size * 2)?;
        let old = std::mem::replace(&mut self.ways, ways);
        self.size *= 2;
        self.migration = Some(Migration { old, ptr: 0 });
        stats.resizes += 1;
        Ok(())
    }

    /// Moves up to `budget` old slots (per way) into the current tables.
    fn migrate(&mut self, port: &mut dyn WalkPort, budget: u64, stats: &mut PtStats, writes: &mut Vec<PhysAddr>) -> Result<(), PtError> {
        let Some(m) = self.migration.as_mut() else { return Ok(()) };
        let old_size = m.old[0].slots.len() as u64;
        let end = (m.ptr + budget).min(old_size);
        let mut homeless = Vec::new();
        for s in m.ptr..end {
            for w in 0..m.old.len() {
                if let Some(c) = m.old[w].slots[s as usize].take() {
                    if let Err(c) = Self::place(&mut self.ways, c, self.kick_limit, stats, writes) {
                        homeless.push(c);
                    }
                }
            }
        }
        m.ptr = end;
        if !homeless.is_empty() {
            return self.full_rehash(port, homeless, stats, writes);
        }
        if end == old_size {
            let m = self.migration.take().expect("migration");
            for mut w in m.old {
                w.storage.release(port);
            }
        }
        Ok(())
    }

    /// Stop-the-world rebuild at twice the current size, used when a
    /// cluster cannot be placed while a migration is in flight.
    fn full_rehash(&mut self, port: &mut dyn WalkPort, extra: Vec<Cluster>, stats: &mut PtStats, writes: &mut Vec<PhysAddr>) -> Result<(), PtError> {
        let mut all: Vec<Cluster> = extra;
        if let Some(m) = &mut self.migration {
            for w in &mut m.old {
                all.extend(w.slots.iter_mut().filter_map(Option::take));
            }
        }
        for w in &mut self.ways {
            all.extend(w.slots.iter_mut().filter_map(Option::take));
        }
        let mut size = self.size * 2;
        loop {
            let mut ways = self.new_ways(port, size)?;
            let mut attempt = Vec::new();
            let ok = all.iter().all(|c| Self::place(&mut ways, *c, self.kick_limit, stats, &mut attempt).is_ok());
            if ok {
                if let Some(m) = self.migration.take() {
                    for mut w in m.old {
                        w.storage.release(port);
                    }
                }
                for mut w in std::mem::replace(&mut self.ways, ways) {
                    w.storage.release(port);
                }
                self.size = size;
                writes.extend(attempt);
                stats.resizes += 1;
                return Ok(());
            }
            for mut w in ways {
                w.storage.release(port);
            }
            size *= 2;
        }
    }
}

impl ClusterStore for CuckooStore {
    const FACTOR: u64 = 8;

    fn ensure(&mut self, port: &mut dyn WalkPort) -> Result<(), PtError> {
        if self.ways.is_empty() {
            self.ways = self.new_ways(port, self.size)?;
        }
        Ok(())
    }

    fn probe(
        &mut self,
        port: &mut dyn WalkPort,
        tag: u64,
        log: &mut Vec<PhysAddr>,
        _stats: &mut PtStats,
    ) -> Result<(Option<Cluster>, u64), PtError> {
        let mut serial = 0;
        let mut slowest = 0;
        let mut found = None;
        for w in 0..self.ways.len() {
            let mut lines = Vec::with_capacity(2);
            if let Some(m) = &self.migration {
                let s = m.old[w].slot(tag);
                if s >= m.ptr {
                    lines.push((m.old[w].line(s), m.old[w].slots[s as usize]));
                }
            }
            let s = self.ways[w].slot(tag);
            lines.push((self.ways[w].line(s), self.ways[w].slots[s as usize]));
            for (addr, content) in lines {
                let lat = port.read(addr, log)?;
                serial += lat;
                slowest = slowest.max(lat);
                if found.is_none() {
                    found = content.filter(|c| c.tag == tag);
                }
                if found.is_some() && !self.parallel {
                    return Ok((found, serial));
                }
            }
        }
        Ok((found, if self.parallel { slowest } else { serial }))
    }

    fn get(&self, tag: u64) -> Option<&Cluster> {
        let (old, w, s) = self.locate(tag)?;
        let way = if old { &self.migration.as_ref()?.old[w] } else { &self.ways[w] };
        way.slots[s as usize].as_ref()
    }

    fn get_mut(&mut self, tag: u64) -> Option<(&mut Cluster, u64)> {
        let (old, w, s) = self.locate(tag)?;
        let way = if old { &mut self.migration.as_mut()?.old[w] } else { &mut self.ways[w] };
        let line = way.line(s);
        way.slots[s as usize].as_mut().map(|c| (c, line))
    }

    fn insert(&mut self, port: &mut dyn WalkPort, c: Cluster, stats: &mut PtStats) -> Result<Vec<PhysAddr>, PtError> {
        debug_assert!(self.locate(c.tag).is_none());
        let mut writes = Vec::new();
        self.migrate(port, self.migrate_per_insert, stats, &mut writes)?;
        if let Err(homeless) = Self::place(&mut self.ways, c, self.kick_limit, stats, &mut writes) {
            if self.migration.is_some() {
                self.full_rehash(port, vec![homeless], stats, &mut writes)?;
            } else {
                self.start_resize(port, stats)?;
                if let Err(h) = Self::place(&mut self.ways, homeless, self.kick_limit, stats, &mut writes) {
                    self.full_rehash(port, vec![h], stats, &mut writes)?;
                }
            }
        }
        self.len += 1;
        if self.migration.is_none() && self.occupancy() > self.threshold {
            self.start_resize(port, stats)?;
        }
        Ok(writes)
    }

    fn remove(&mut self, _port: &mut dyn WalkPort, tag: u64) -> Option<(Cluster, Vec<PhysAddr>)> {
        let (old, w, s) = self.locate(tag)?;
        let way = if old { &mut self.migration.as_mut()?.old[w] } else { &mut self.ways[w] };
        let c = way.slots[s as usize].take()?;
        self.len -= 1;
        Some((c, vec![PhysAddr(way.line(s))]))
    }

    fn len(&self) -> u64 {
        self.len
    }

    fn footprint(&self) -> u64 {
        let cur: u64 = self.ways.iter().map(|w| w.storage.bytes()).sum();
        let old: u64 = self.migration.as_ref().map_or(0, |m| m.old.iter().map(|w| w.storage.bytes()).sum());
        cur + old
    }

    fn release(&mut self, port: &mut dyn WalkPort) {
        if let Some(m) = self.migration.take() {
            for mut w in m.old {
                w.storage.release(port);
            }
        }
        for mut w in self.ways.drain(..) {
            w.storage.release(port);
        }
        self.len = 0;
    }

    fn audit(&self) -> Result<(), String> {
        let mut n = 0;
        let mut check = |ways: &[Way], old_ptr: Option<u64>| -> Result<(), String> {
            for way in ways {
                for (i, c) in way.slots.iter().enumerate() {
                    let Some(c) = c else { continue };
                    n += 1;
                    if way.slot(c.tag) != i as u64 {
                        return Err(format!("cluster {:#x} outside its hash slot", c.tag));
                    }
                    if old_ptr.is_some_and(|p| (i as u64) < p) {
                        return Err(format!("cluster {:#x} left behind the migration pointer", c.tag));
                    }
                }
            }
            Ok(())
        };
        check(&self.ways, None)?;
        if let Some(m) = &self.migration {
            check(&m.old, Some(m.ptr))?;
        }
        if n != self.len {
            return Err(format!("length {} != resident {n}", self.len));
        }
        // Each cluster must live in exactly one place.
        let mut tags: Vec<u64> = self.ways.iter().flat_map(|w| w.slots.iter().flatten().map(|c| c.tag)).collect();
        if let Some(m) = &self.migration {
            tags.extend(m.old.iter().flat_map(|w| w.slots.iter().flatten().map(|c| c.tag)));
        }
        tags.sort_unstable();
        if tags.windows(2).any(|p| p[0] == p[1]) {
            return Err("duplicate cluster".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{PageSize, Pfn, Pte, VirtAddr};
    use crate::config::PtKind;
    use crate::pagetable::testutil::Rig;
    use crate::pagetable::{HashedTable, PageTable};
    use std::collections::BTreeMap;

    fn cfg() -> CuckooConfig {
        CuckooConfig::default()
    }

    #[test]
    fn entry_in_second_way_costs_two_accesses() {
        let mut rig = Rig::new(1 << 12);
        let mut s = CuckooStore::new(&mut rig.port(), &cfg(), 64, 0).unwrap();
        let mut stats = PtStats::default();
        // Fill the way-0 home of tag 1000 so it lands in way 1.
        let target = s.ways[0].slot(1000);
        let blocker = (0..).find(|&t| t != 1000 && s.ways[0].slot(t) == target).unwrap();
        s.insert(&mut rig.port(), Cluster::new(blocker), &mut stats).unwrap();
        s.insert(&mut rig.port(), Cluster::new(1000), &mut stats).unwrap();
        assert_eq!(s.locate(1000).map(|l| l.1), Some(1));
        let mut log = Vec::new();
        let (c, _) = s.probe(&mut rig.port(), 1000, &mut log, &mut stats).unwrap();
        assert_eq!(c.unwrap().tag, 1000);
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn displacement_keeps_both_clusters() {
        // Tiny table (4 slots per way): insert until the first kick and
        // check every cluster against a reference set.
        let mut rig = Rig::new(1 << 12);
        let mut c = cfg();
        c.threshold = 1.0;
        let mut s = CuckooStore::new(&mut rig.port(), &c, 4, 9).unwrap();
        let mut stats = PtStats::default();
        let mut reference = BTreeMap::new();
        let mut tag = 0;
        while stats.kicks == 0 {
            tag += 1;
            s.insert(&mut rig.port(), Cluster::new(tag), &mut stats).unwrap();
            reference.insert(tag, ());
        }
        assert_eq!(stats.resizes, 0);
        assert!(!s.is_migrating());
        for t in reference.keys() {
            assert!(s.get(*t).is_some(), "lost cluster {t}");
        }
        s.audit().unwrap();
    }

    #[test]
    fn resize_migrates_gradually_and_preserves_mappings() {
        let mut rig = Rig::new(1 << 14);
        let mut t = HashedTable::new(PtKind::Cuckoo, [
            CuckooStore::new(&mut rig.port(), &cfg(), 32, 0).unwrap(),
            CuckooStore::new_lazy(&cfg(), 8, 1),
        ]);
        let mut saw_migration = false;
        for i in 0..2000u64 {
            let v = VirtAddr::new(i * 8 * 4096).unwrap();
            t.map(&mut rig.port(), v, Pte::new(Pfn(i), PageSize::Size4K)).unwrap();
            saw_migration |= t.store(PageSize::Size4K).is_migrating();
            if i % 97 == 0 {
                t.audit().unwrap();
            }
        }
        assert!(saw_migration);
        for i in 0..2000u64 {
            let v = VirtAddr::new(i * 8 * 4096).unwrap();
            assert_eq!(t.lookup(v).map(|p| p.pfn), Some(Pfn(i)));
        }
        let s = t.store(PageSize::Size4K);
        if !s.is_migrating() {
            assert!(s.occupancy() <= 0.6);
        }
    }
}

//! Open-addressing hash table of 8-PTE cluster lines with linear probing.

use super::hashed::{salt_for, Cluster, ClusterStore};
use super::{PtError, PtStats, TableStorage, WalkPort};
use crate::addr::PhysAddr;
use crate::hash::mix64;

pub struct ClusteredStore {
    storage: Option<TableStorage>,
    buckets: u64,
    slots: Vec<Option<Cluster>>,
    len: u64,
    max_load: f64,
    salt: u64,
}

impl ClusteredStore {
    pub fn new(port: &mut dyn WalkPort, buckets: u64, max_load: f64, salt_seed: u64) -> Result<Self, PtError> {
        let mut s = Self::new_lazy(buckets, max_load, salt_seed);
        s.ensure(port)?;
        Ok(s)
    }

    /// Storage is allocated on first insert.
    pub fn new_lazy(buckets: u64, max_load: f64, salt_seed: u64) -> Self {
        assert!(buckets.is_power_of_two());
        ClusteredStore { storage: None, buckets, slots: Vec::new(), len: 0, max_load, salt: salt_for(salt_seed) }
    }

    pub fn buckets(&self) -> u64 {
        self.buckets
    }

    fn home(&self, tag: u64) -> u64 {
        mix64(tag ^ self.salt) & (self.buckets - 1)
    }

    fn find(&self, tag: u64) -> Option<u64> {
        if self.slots.is_empty() {
            return None;
        }
        let h = self.home(tag);
        for i in 0..self.buckets {
            let s = (h + i) & (self.buckets - 1);
            match &self.slots[s as usize] {
                None => return None,
                Some(c) if c.tag == tag => return Some(s),
                Some(_) => {}
            }
        }
        None
    }

    fn line(&self, slot: u64) -> u64 {
        self.storage.as_ref().expect("allocated").line_addr(slot)
    }

    /// Places `c` at its first free probe position; returns the slot.
    fn place(&mut self, c: Cluster) -> u64 {
        let h = self.home(c.tag);
        for i in 0..self.buckets {
            let s = (h + i) & (self.buckets - 1);
            if self.slots[s as usize].is_none() {
                self.slots[s as usize] = Some(c);
                return s;
            }
        }
        unreachable!("load factor keeps a free bucket");
    }

    fn grow(&mut self, port: &mut dyn WalkPort) -> Result<Vec<PhysAddr>, PtError> {
        let new_storage = TableStorage::new(port, self.buckets * 2)?;
        let old: Vec<Cluster> = self.slots.drain(..).flatten().collect();
        if let Some(mut s) = self.storage.replace(new_storage) {
            s.release(port);
        }
        self.buckets *= 2;
        self.slots = vec![None; self.buckets as usize];
        let mut writes = Vec::with_capacity(old.len());
        for c in old {
            let s = self.place(c);
            writes.push(PhysAddr(self.line(s)));
        }
        Ok(writes)
    }
}

impl ClusterStore for ClusteredStore {
    const FACTOR: u64 = 8;

    fn ensure(&mut self, port: &mut dyn WalkPort) -> Result<(), PtError> {
        if self.storage.is_none() {
            self.storage = Some(TableStorage::new(port, self.buckets)?);
            self.slots = vec![None; self.buckets as usize];
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
        let h = self.home(tag);
        let mut latency = 0;
        for i in 0..self.buckets {
            let s = (h + i) & (self.buckets - 1);
            latency += port.read(self.line(s), log)?;
            match &self.slots[s as usize] {
                None => return Ok((None, latency)),
                Some(c) if c.tag == tag => return Ok((Some(*c), latency)),
                Some(_) => {}
            }
        }
        Ok((None, latency))
    }

    fn get(&self, tag: u64) -> Option<&Cluster> {
        self.find(tag).and_then(|s| self.slots[s as usize].as_ref())
    }

    fn get_mut(&mut self, tag: u64) -> Option<(&mut Cluster, u64)> {
        let s = self.find(tag)?;
        let line = self.line(s);
        self.slots[s as usize].as_mut().map(|c| (c, line))
    }

    fn insert(&mut self, port: &mut dyn WalkPort, c: Cluster, stats: &mut PtStats) -> Result<Vec<PhysAddr>, PtError> {
        debug_assert!(self.find(c.tag).is_none());
        let mut writes = Vec::new();
        if (self.len + 1) as f64 > self.max_load * self.buckets as f64 {
            writes = self.grow(port)?;
            stats.resizes += 1;
        }
        let s = self.place(c);
        self.len += 1;
        writes.push(PhysAddr(self.line(s)));
        Ok(writes)
    }

    fn remove(&mut self, _port: &mut dyn WalkPort, tag: u64) -> Option<(Cluster, Vec<PhysAddr>)> {
        let mask = self.buckets - 1;
        let mut hole = self.find(tag)?;
        let removed = self.slots[hole as usize].take().expect("found slot");
        self.len -= 1;
        let mut writes = vec![PhysAddr(self.line(hole))];
        // Backward-shift deletion keeps every probe chain gap-free.
        let mut k = (hole + 1) & mask;
        while let Some(c) = self.slots[k as usize] {
            let h = self.home(c.tag);
            if (k.wrapping_sub(h) & mask) >= (k.wrapping_sub(hole) & mask) {
                self.slots[hole as usize] = self.slots[k as usize].take();
                writes.push(PhysAddr(self.line(k)));
                hole = k;
            }
            k = (k + 1) & mask;
        }
        Some((removed, writes))
    }

    fn len(&self) -> u64 {
        self.len
    }

    fn footprint(&self) -> u64 {
        self.storage.as_ref().map_or(0, TableStorage::bytes)
    }

    fn release(&mut self, port: &mut dyn WalkPort) {
        if let Some(mut s) = self.storage.take() {
            s.release(port);
        }
        self.slots.clear();
        self.len = 0;
    }

    fn audit(&self) -> Result<(), String> {
        let mut n = 0;
        for (i, c) in self.slots.iter().enumerate() {
            let Some(c) = c else { continue };
            n += 1;
            if self.find(c.tag) != Some(i as u64) {
                return Err(format!("cluster {:#x} unreachable from its home", c.tag));
            }
        }
        if n != self.len {
            return Err(format!("length {} != occupied {n}", self.len));
        }
        Ok(())
    }
}

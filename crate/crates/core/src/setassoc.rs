//! Small set-associative LRU cache keyed by `u64`.
//!
//! Backs the page-walk caches, the nested TLB and other fixed-latency
//! structures. Sets are selected by `mix64(key) % sets`.

use crate::hash::mix64;

#[derive(Debug, Clone, Copy)]
struct Slot<V> {
    key: u64,
    value: V,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct SetAssoc<V> {
    sets: usize,
    ways: usize,
    slots: Vec<Option<Slot<V>>>,
    clock: u64,
}

impl<V: Copy> SetAssoc<V> {
    /// `entries == 0` yields a disabled cache that never hits.
    pub fn new(entries: usize, ways: usize) -> Self {
        let ways = ways.max(1).min(entries.max(1));
        let sets = if entries == 0 { 0 } else { entries.div_ceil(ways) };
        SetAssoc { sets, ways, slots: vec![None; sets * ways], clock: 0 }
    }

    pub fn enabled(&self) -> bool {
        self.sets > 0
    }

    pub fn capacity(&self) -> usize {
        self.sets * self.ways
    }

    fn set_range(&self, key: u64) -> std::ops::Range<usize> {
        let s = (mix64(key) % self.sets as u64) as usize;
        s * self.ways..(s + 1) * self.ways
    }

    pub fn get(&mut self, key: u64) -> Option<V> {
        if !self.enabled() {
            return None;
        }
        self.clock += 1;
        let now = self.clock;
        let r = self.set_range(key);
        self.slots[r].iter_mut().flatten().find(|s| s.key == key).map(|s| {
            s.stamp = now;
            s.value
        })
    }

    pub fn contains(&self, key: u64) -> bool {
        self.enabled() && self.slots[self.set_range(key)].iter().flatten().any(|s| s.key == key)
    }

    /// Inserts or refreshes `key`; returns the evicted entry, if any.
    pub fn insert(&mut self, key: u64, value: V) -> Option<(u64, V)> {
        if !self.enabled() {
            return None;
        }
        self.clock += 1;
        let now = self.clock;
        let r = self.set_range(key);
        let set = &mut self.slots[r];
        if let Some(s) = set.iter_mut().flatten().find(|s| s.key == key) {
            s.value = value;
            s.stamp = now;
            return None;
        }
        let new = Slot { key, value, stamp: now };
        if let Some(empty) = set.iter_mut().find(|s| s.is_none()) {
            *empty = Some(new);
            return None;
        }
        let victim = set
            .iter_mut()
            .min_by_key(|s| s.as_ref().map_or(0, |s| s.stamp))
            .expect("non-empty set");
        let old = victim.replace(new).expect("full set");
        Some((old.key, old.value))
    }

    pub fn remove(&mut self, key: u64) -> Option<V> {
        if !self.enabled() {
            return None;
        }
        let r = self.set_range(key);
        for s in &mut self.slots[r] {
            if s.is_some_and(|s| s.key == key) {
                return s.take().map(|s| s.value);
            }
        }
        None
    }

    /// Removes every entry whose key satisfies `pred`; returns how many.
    pub fn retain(&mut self, mut keep: impl FnMut(u64, &V) -> bool) -> usize {
        let mut n = 0;
        for s in &mut self.slots {
            if let Some(e) = s {
                if !keep(e.key, &e.value) {
                    *s = None;
                    n += 1;
                }
            }
        }
        n
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

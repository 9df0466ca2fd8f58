//! Reservation bookkeeping for transparent huge pages.

use std::collections::BTreeMap;

use crate::addr::{Pid, HUGE_FRAMES};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub pid: Pid,
    /// 2 MiB-aligned virtual base of the region.
    pub region: u64,
    /// First frame of the order-9 block.
    pub pfn: u64,
    touched: [u64; 8],
    seq: u64,
}

impl Reservation {
    pub fn is_touched(&self, index: u64) -> bool {
        self.touched[(index / 64) as usize] >> (index % 64) & 1 == 1
    }

    /// Marks page `index`; returns whether it was newly touched.
    pub fn touch(&mut self, index: u64) -> bool {
        assert!(index < HUGE_FRAMES);
        let was = self.is_touched(index);
        self.touched[(index / 64) as usize] |= 1 << (index % 64);
        !was
    }

    pub fn touched_count(&self) -> u64 {
        self.touched.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn touched_indices(&self) -> impl Iterator<Item = u64> + '_ {
        (0..HUGE_FRAMES).filter(|&i| self.is_touched(i))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReservationTable {
    map: BTreeMap<(Pid, u64), Reservation>,
    next_seq: u64,
}

impl ReservationTable {
    pub fn get(&self, pid: Pid, region: u64) -> Option<&Reservation> {
        self.map.get(&(pid, region))
    }

    pub fn get_mut(&mut self, pid: Pid, region: u64) -> Option<&mut Reservation> {
        self.map.get_mut(&(pid, region))
    }

    /// Records a reservation. At most one per `(pid, region)`.
    pub fn insert(&mut self, pid: Pid, region: u64, pfn: u64) -> &mut Reservation {
        assert!(!self.map.contains_key(&(pid, region)), "duplicate reservation");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.map
            .entry((pid, region))
            .or_insert(Reservation { pid, region, pfn, touched: [0; 8], seq })
    }

    pub fn remove(&mut self, pid: Pid, region: u64) -> Option<Reservation> {
        self.map.remove(&(pid, region))
    }

    /// Reservation with the fewest touched pages; ties go to the oldest.
    pub fn least_touched(&self) -> Option<(Pid, u64)> {
        self.map
            .values()
            .min_by_key(|r| (r.touched_count(), r.seq))
            .map(|r| (r.pid, r.region))
    }

    /// Removes every reservation of `pid` overlapping `[base, base+len)`.
    pub fn drain_overlapping(&mut self, pid: Pid, base: u64, len: u64) -> Vec<Reservation> {
        let keys: Vec<_> = self
            .map
            .keys()
            .filter(|(p, r)| *p == pid && *r < base + len && base < r + (HUGE_FRAMES << 12))
            .copied()
            .collect();
        keys.into_iter().filter_map(|k| self.map.remove(&k)).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Reservation> {
        self.map.values()
    }
}

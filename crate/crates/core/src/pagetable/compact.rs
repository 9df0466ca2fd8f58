//! Memory-efficient hash table: each 64-byte line packs four 2-PTE
//! sub-clusters (tag bits live in the PTEs' unused high bits), so a lookup
//! is one line read. Clusters that find their home line full go to a small
//! fully associative stash; the stash is read only when the home line is
//! full and does not hold the tag.

use super::hashed::{salt_for, Cluster, ClusterStore};
use super::{PtError, PtStats, TableStorage, WalkPort};
use crate::addr::{PhysAddr, LINE_SIZE};
use crate::config::CompactConfig;
use crate::hash::mix64;

pub const SLOTS_PER_LINE: u64 = 4;

pub struct CompactStore {
    storage: Option<TableStorage>,
    stash_storage: Option<TableStorage>,
    lines: u64,
    slots: Vec<Option<Cluster>>,
    stash: Vec<Option<Cluster>>,
    target_load: f64,
    len: u64,
    salt: u64,
}

impl CompactStore {
    /// `buckets` is the slot count; the table has `buckets / 4` lines.
    pub fn new(port: &mut dyn WalkPort, cfg: &CompactConfig, buckets: u64, salt_seed: u64) -> Result<Self, PtError> {
        let mut s = Self::new_lazy(cfg, buckets, salt_seed);
        s.ensure(port)?;
        Ok(s)
    }

    pub fn new_lazy(cfg: &CompactConfig, buckets: u64, salt_seed: u64) -> Self {
        let lines = (buckets / SLOTS_PER_LINE).max(1).next_power_of_two();
        CompactStore {
            storage: None,
            stash_storage: None,
            lines,
            slots: Vec::new(),
            stash: vec![None; cfg.stash as usize],
            target_load: cfg.target_load,
            len: 0,
            salt: salt_for(salt_seed),
        }
    }

    pub fn load(&self) -> f64 {
        self.len as f64 / (self.lines * SLOTS_PER_LINE) as f64
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn stash_len(&self) -> usize {
        self.stash.iter().flatten().count()
    }

    fn home(&self, tag: u64) -> u64 {
        mix64(tag ^ self.salt) & (self.lines - 1)
    }

    fn line_slots(&self, line: u64) -> std::ops::Range<usize> {
        let b = (line * SLOTS_PER_LINE) as usize;
        b..b + SLOTS_PER_LINE as usize
    }

    fn line_full(&self, line: u64) -> bool {
        self.slots[self.line_slots(line)].iter().all(Option::is_some)
    }

    fn stash_line(&self, i: usize) -> u64 {
        self.stash_storage.as_ref().expect("allocated").line_addr(i as u64 / SLOTS_PER_LINE)
    }

    fn table_line(&self, line: u64) -> u64 {
        self.storage.as_ref().expect("allocated").line_addr(line)
    }

    /// Index into `slots` (Ok) or `stash` (Err) holding `tag`.
    fn find(&self, tag: u64) -> Option<Result<usize, usize>> {
        if self.slots.is_empty() {
            return None;
        }
        let r = self.line_slots(self.home(tag));
        if let Some(i) = r.clone().find(|&i| self.slots[i].is_some_and(|c| c.tag == tag)) {
            return Some(Ok(i));
        }
        self.stash.iter().position(|s| s.is_some_and(|c| c.tag == tag)).map(Err)
    }

    /// Places without growing. Returns the written line, or the cluster back
    /// when both its home line and the stash are full.
    fn place(&mut self, c: Cluster) -> Result<u64, Cluster> {
        let line = self.home(c.tag);
        if let Some(i) = self.line_slots(line).find(|&i| self.slots[i].is_none()) {
            self.slots[i] = Some(c);
            return Ok(self.table_line(line));
        }
        if let Some(i) = self.stash.iter().position(Option::is_none) {
            self.stash[i] = Some(c);
            return Ok(self.stash_line(i));
        }
        Err(c)
    }

    fn grow(&mut self, port: &mut dyn WalkPort, stats: &mut PtStats) -> Result<Vec<PhysAddr>, PtError> {
        let mut all: Vec<Cluster> = self.slots.iter().chain(self.stash.iter()).flatten().copied().collect();
        let mut lines = self.lines * 2;
        loop {
            let storage = TableStorage::new(port, lines)?;
            let old_storage = self.storage.replace(storage);
            self.lines = lines;
            self.slots = vec![None; (lines * SLOTS_PER_LINE) as usize];
            self.stash.iter_mut().for_each(|s| *s = None);
            if let Some(mut s) = old_storage {
                s.release(port);
            }
            let mut writes = Vec::with_capacity(all.len());
            let mut failed = None;
            for (n, c) in all.iter().enumerate() {
                match self.place(*c) {
                    Ok(line) => writes.push(PhysAddr(line)),
                    Err(_) => {
                        failed = Some(n);
                        break;
                    }
                }
            }
            stats.resizes += 1;
            if failed.is_none() {
                return Ok(writes);
            }
            all = self.slots.iter().chain(self.stash.iter()).flatten().copied().chain(all[failed.unwrap()..].iter().copied()).collect();
            lines *= 2;
        }
    }
}

impl ClusterStore for CompactStore {
    const FACTOR: u64 = 2;

    fn ensure(&mut self, port: &mut dyn WalkPort) -> Result<(), PtError> {
        if self.storage.is_none() {
            let stash_lines = (self.stash.len() as u64).div_ceil(SLOTS_PER_LINE).max(1);
            self.stash_storage = Some(TableStorage::new(port, stash_lines)?);
            self.storage = Some(TableStorage::new(port, self.lines)?);
            self.slots = vec![None; (self.lines * SLOTS_PER_LINE) as usize];
        }
        Ok(())
    }

    fn probe(
        &mut self,
        port: &mut dyn WalkPort,
        tag: u64,
        log: &mut Vec<PhysAddr>,
        stats: &mut PtStats,
    ) -> Result<(Option<Cluster>, u64), PtError> {
        let line = self.home(tag);
        let mut latency = port.read(self.table_line(line), log)?;
        let r = self.line_slots(line);
        if let Some(c) = self.slots[r].iter().flatten().find(|c| c.tag == tag) {
            return Ok((Some(*c), latency));
        }
        if !self.line_full(line) {
            return Ok((None, latency));
        }
        stats.stash_probes += 1;
        for (chunk_no, chunk) in self.stash.chunks(SLOTS_PER_LINE as usize).enumerate() {
            let addr = self.stash_line(chunk_no * SLOTS_PER_LINE as usize);
            latency += port.read(addr, log)?;
            if let Some(c) = chunk.iter().flatten().find(|c| c.tag == tag) {
                return Ok((Some(*c), latency));
            }
        }
        Ok((None, latency))
    }

    fn get(&self, tag: u64) -> Option<&Cluster> {
        match self.find(tag)? {
            Ok(i) => self.slots[i].as_ref(),
            Err(i) => self.stash[i].as_ref(),
        }
    }

    fn get_mut(&mut self, tag: u64) -> Option<(&mut Cluster, u64)> {
        match self.find(tag)? {
            Ok(i) => {
                let line = self.table_line(i as u64 / SLOTS_PER_LINE);
                self.slots[i].as_mut().map(|c| (c, line))
            }
            Err(i) => {
                let line = self.stash_line(i);
                self.stash[i].as_mut().map(|c| (c, line))
            }
        }
    }

    fn insert(&mut self, port: &mut dyn WalkPort, c: Cluster, stats: &mut PtStats) -> Result<Vec<PhysAddr>, PtError> {
        debug_assert!(self.find(c.tag).is_none());
        let mut writes = Vec::new();
        if (self.len + 1) as f64 > self.target_load * (self.lines * SLOTS_PER_LINE) as f64 {
            writes = self.grow(port, stats)?;
        }
        let line = match self.place(c) {
            Ok(l) => l,
            Err(c) => {
                writes = self.grow(port, stats)?;
                self.place(c).map_err(|_| PtError::StructureCorrupt("placement failed after growth".into()))?
            }
        };
        self.len += 1;
        writes.push(PhysAddr(line));
        Ok(writes)
    }

    fn remove(&mut self, _port: &mut dyn WalkPort, tag: u64) -> Option<(Cluster, Vec<PhysAddr>)> {
        let loc = self.find(tag)?;
        self.len -= 1;
        match loc {
            Err(i) => {
                let c = self.stash[i].take()?;
                Some((c, vec![PhysAddr(self.stash_line(i))]))
            }
            Ok(i) => {
                let c = self.slots[i].take()?;
                let line = i as u64 / SLOTS_PER_LINE;
                let mut writes = vec![PhysAddr(self.table_line(line))];
                // Keep stash entries only for lines that are full.
                if let Some(j) = self.stash.iter().position(|s| s.is_some_and(|s| self.home(s.tag) == line)) {
                    self.slots[i] = self.stash[j].take();
                    writes.push(PhysAddr(self.stash_line(j)));
                }
                Some((c, writes))
            }
        }
    }

    fn len(&self) -> u64 {
        self.len
    }

    fn footprint(&self) -> u64 {
        self.storage.as_ref().map_or(0, TableStorage::bytes) + self.stash_storage.as_ref().map_or(0, TableStorage::bytes)
    }

    fn release(&mut self, port: &mut dyn WalkPort) {
        for s in [self.storage.take(), self.stash_storage.take()].into_iter().flatten() {
            let mut s = s;
            s.release(port);
        }
        self.slots.clear();
        self.stash.iter_mut().for_each(|s| *s = None);
        self.len = 0;
    }

    fn audit(&self) -> Result<(), String> {
        let mut n = 0;
        for (i, c) in self.slots.iter().enumerate() {
            if let Some(c) = c {
                n += 1;
                if self.home(c.tag) != i as u64 / SLOTS_PER_LINE {
                    return Err(format!("cluster {:#x} outside its home line", c.tag));
                }
            }
        }
        for c in self.stash.iter().flatten() {
            n += 1;
            if !self.line_full(self.home(c.tag)) {
                return Err(format!("stashed cluster {:#x} has room at home", c.tag));
            }
        }
        if n != self.len {
            return Err(format!("length {} != resident {n}", self.len));
        }
        debug_assert_eq!(LINE_SIZE / 16, SLOTS_PER_LINE);
        Ok(())
    }
}

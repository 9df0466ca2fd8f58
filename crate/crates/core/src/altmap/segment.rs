use std::collections::BTreeMap;

use crate::addr::{PhysAddr, Pid, VirtAddr};

/// One base/limit/offset region per process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectSegment {
    pub base: u64,
    pub limit: u64,
    pub offset: i64,
}

impl DirectSegment {
    pub fn translate(&self, va: VirtAddr) -> Option<PhysAddr> {
        let v = va.as_u64();
        (self.base <= v && v < self.limit).then(|| PhysAddr(v.wrapping_add_signed(self.offset)))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Segments {
    by_pid: BTreeMap<Pid, DirectSegment>,
}

impl Segments {
    /// Installs the segment for `pid`; false if one already exists.
    pub fn set(&mut self, pid: Pid, seg: DirectSegment) -> bool {
        if self.by_pid.contains_key(&pid) || seg.base >= seg.limit {
            return false;
        }
        self.by_pid.insert(pid, seg);
        true
    }

    pub fn get(&self, pid: Pid) -> Option<&DirectSegment> {
        self.by_pid.get(&pid)
    }

    pub fn remove(&mut self, pid: Pid, base: u64) -> Option<DirectSegment> {
        match self.by_pid.get(&pid) {
            Some(s) if s.base == base => self.by_pid.remove(&pid),
            _ => None,
        }
    }

    pub fn translate(&self, pid: Pid, va: VirtAddr) -> Option<PhysAddr> {
        self.by_pid.get(&pid)?.translate(va)
    }
}

//! Frames handed to the fault handler, as disjoint half-open intervals.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grants {
    runs: BTreeMap<u64, u64>,
}

impl Grants {
    pub fn add(&mut self, pfn: u64, n: u64) {
        let (mut start, mut end) = (pfn, pfn + n);
        if let Some((&s, &e)) = self.runs.range(..=start).next_back() {
            if e >= start {
                start = s;
                end = end.max(e);
                self.runs.remove(&s);
            }
        }
        while let Some((&s, &e)) = self.runs.range(start..=end).next() {
            end = end.max(e);
            self.runs.remove(&s);
        }
        self.runs.insert(start, end);
    }

    pub fn covers(&self, pfn: u64, n: u64) -> bool {
        self.runs.range(..=pfn).next_back().is_some_and(|(_, &e)| e >= pfn + n)
    }

    /// Drops `[pfn, pfn+n)`; false if any frame was not granted.
    pub fn remove(&mut self, pfn: u64, n: u64) -> bool {
        if !self.covers(pfn, n) {
            return false;
        }
        let (&s, &e) = self.runs.range(..=pfn).next_back().expect("covered");
        self.runs.remove(&s);
        if s < pfn {
            self.runs.insert(s, pfn);
        }
        if pfn + n < e {
            self.runs.insert(pfn + n, e);
        }
        true
    }

    pub fn frames(&self) -> u64 {
        self.runs.iter().map(|(s, e)| e - s).sum()
    }
}

/// Tiny fully associative LRU map for the range and VMA TLBs.
#[derive(Debug, Clone)]
pub struct FullyAssoc<K, V> {
    cap: usize,
    slots: Vec<(K, V, u64)>,
    clock: u64,
}

impl<K: PartialEq + Copy, V: Copy> FullyAssoc<K, V> {
    pub fn new(cap: usize) -> Self {
        FullyAssoc { cap, slots: Vec::with_capacity(cap), clock: 0 }
    }

    /// First entry satisfying `pred`, refreshed as most recently used.
    pub fn find(&mut self, mut pred: impl FnMut(&K, &V) -> bool) -> Option<V> {
        self.clock += 1;
        let now = self.clock;
        self.slots.iter_mut().find(|(k, v, _)| pred(k, v)).map(|s| {
            s.2 = now;
            s.1
        })
    }

    pub fn insert(&mut self, key: K, value: V) {
        if self.cap == 0 {
            return;
        }
        self.clock += 1;
        let now = self.clock;
        if let Some(s) = self.slots.iter_mut().find(|s| s.0 == key) {
            *s = (key, value, now);
        } else if self.slots.len() < self.cap {
            self.slots.push((key, value, now));
        } else {
            let lru = (0..self.slots.len()).min_by_key(|&i| self.slots[i].2).expect("cap > 0");
            self.slots[lru] = (key, value, now);
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K, &V) -> bool) {
        self.slots.retain(|(k, v, _)| keep(k, v));
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

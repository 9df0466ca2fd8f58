//! Physically backed line arrays for hashed tables.

use super::{PtError, WalkPort};
use crate::addr::{LINE_SIZE, PAGE_SHIFT};

/// `lines` 64-byte lines backed by one buddy block, or by several
/// max-order blocks when the array outgrows the largest order.
#[derive(Debug, Clone)]
pub struct TableStorage {
    blocks: Vec<u64>,
    block_order: u32,
    lines: u64,
}

impl TableStorage {
    pub fn new(port: &mut dyn WalkPort, lines: u64) -> Result<Self, PtError> {
        let frames = (lines * LINE_SIZE).div_ceil(1 << PAGE_SHIFT).max(1);
        let want = frames.next_power_of_two().trailing_zeros();
        let block_order = want.min(port.max_order());
        let count = frames.div_ceil(1 << block_order);
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            match port.alloc_frames(block_order) {
                Ok(p) => blocks.push(p),
                Err(e) => {
                    for p in blocks {
                        port.free_frames(p, block_order);
                    }
                    return Err(e);
                }
            }
        }
        Ok(TableStorage { blocks, block_order, lines })
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn line_addr(&self, line: u64) -> u64 {
        debug_assert!(line < self.lines);
        let per_block = (1u64 << (self.block_order + PAGE_SHIFT)) / LINE_SIZE;
        (self.blocks[(line / per_block) as usize] << PAGE_SHIFT) + (line % per_block) * LINE_SIZE
    }

    pub fn bytes(&self) -> u64 {
        (self.blocks.len() as u64) << (self.block_order + PAGE_SHIFT)
    }

    pub fn release(&mut self, port: &mut dyn WalkPort) {
        for p in self.blocks.drain(..) {
            port.free_frames(p, self.block_order);
        }
        self.lines = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pagetable::testutil::Rig;

    #[test]
    fn small_and_large_arrays() {
        let mut rig = Rig::new(1 << 13);
        let s = TableStorage::new(&mut rig.port(), 1 << 14).unwrap();
        assert_eq!(s.bytes(), 1 << 20);
        assert_eq!(s.line_addr(1), s.line_addr(0) + 64);
        let mut big = TableStorage::new(&mut rig.port(), 1 << 17).unwrap();
        assert_eq!(big.bytes(), 8 << 20);
        assert_eq!(rig.mm.allocated_frames(), 256 + 2048);
        big.release(&mut rig.port());
        assert_eq!(rig.mm.allocated_frames(), 256);
    }
}

//! Address arithmetic shared by every translation structure.
//!
//! Virtual addresses are 48-bit canonical; radix geometry is 9-9-9-9-12.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const VA_BITS: u32 = 48;
pub const LINE_SIZE: u64 = 64;

/// Frames in a 2 MiB huge page.
pub const HUGE_FRAMES: u64 = 512;
/// Buddy order of a 2 MiB block.
pub const HUGE_ORDER: u32 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("virtual address {0:#x} exceeds the 48-bit address space")]
pub struct NonCanonical(pub u64);

/// A byte address in a 48-bit virtual address space.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VirtAddr(u64);

impl VirtAddr {
    pub const MAX: u64 = (1 << VA_BITS) - 1;

    pub fn new(value: u64) -> Result<Self, NonCanonical> {
        if value > Self::MAX {
            Err(NonCanonical(value))
        } else {
            Ok(VirtAddr(value))
        }
    }

    /// Masks the address into the 48-bit space.
    pub const fn new_truncate(value: u64) -> Self {
        VirtAddr(value & Self::MAX)
    }

    #[inline]
    pub const fn as_u64(self) -> u64 {
        self.0
    }

    pub fn align_down(self, size: PageSize) -> Self {
        VirtAddr(self.0 & !(size.bytes() - 1))
    }
}

impl fmt::Debug for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtAddr({:#x})", self.0)
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A byte address in simulated physical (or cache-visible) memory.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    #[inline]
    pub const fn as_u64(self) -> u64 {
        self.0
    }

    pub const fn pfn(self) -> Pfn {
        Pfn(self.0 >> PAGE_SHIFT)
    }
}

impl fmt::Debug for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhysAddr({:#x})", self.0)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Physical frame number (4 KiB frames).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pfn(pub u64);

impl Pfn {
    #[inline]
    pub const fn addr(self) -> PhysAddr {
        PhysAddr(self.0 << PAGE_SHIFT)
    }

    #[inline]
    pub const fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pfn({:#x})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PageSize {
    #[serde(rename = "4K")]
    Size4K,
    #[serde(rename = "2M")]
    Size2M,
    #[serde(rename = "1G")]
    Size1G,
}

impl PageSize {
    pub const ALL: [PageSize; 3] = [PageSize::Size4K, PageSize::Size2M, PageSize::Size1G];

    pub const fn shift(self) -> u32 {
        match self {
            PageSize::Size4K => 12,
            PageSize::Size2M => 21,
            PageSize::Size1G => 30,
        }
    }

    pub const fn bytes(self) -> u64 {
        1 << self.shift()
    }

    /// Number of 4 KiB frames covered by one page of this size.
    pub const fn frames(self) -> u64 {
        self.bytes() >> PAGE_SHIFT
    }

    pub const fn label(self) -> &'static str {
        match self {
            PageSize::Size4K => "4K",
            PageSize::Size2M => "2M",
            PageSize::Size1G => "1G",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "4K" => Some(PageSize::Size4K),
            "2M" => Some(PageSize::Size2M),
            "1G" => Some(PageSize::Size1G),
            _ => None,
        }
    }

    /// Position in the static probe order 4K, 2M, 1G.
    pub const fn index(self) -> usize {
        match self {
            PageSize::Size4K => 0,
            PageSize::Size2M => 1,
            PageSize::Size1G => 2,
        }
    }
}

impl fmt::Display for PageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Process identifier; doubles as the ASID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A decoded page-table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pte {
    pub pfn: Pfn,
    pub present: bool,
    pub size: PageSize,
    pub writable: bool,
    pub accessed: bool,
    pub dirty: bool,
}

const PTE_PRESENT: u64 = 1 << 0;
const PTE_WRITABLE: u64 = 1 << 1;
const PTE_ACCESSED: u64 = 1 << 5;
const PTE_DIRTY: u64 = 1 << 6;
const PTE_HUGE: u64 = 1 << 7;
const PTE_GIANT: u64 = 1 << 9;
const PTE_PFN_MASK: u64 = 0x000f_ffff_ffff_f000;

impl Pte {
    pub fn new(pfn: Pfn, size: PageSize) -> Self {
        Pte {
            pfn,
            present: true,
            size,
            writable: true,
            accessed: false,
            dirty: false,
        }
    }

    pub const fn not_present() -> Self {
        Pte {
            pfn: Pfn(0),
            present: false,
            size: PageSize::Size4K,
            writable: false,
            accessed: false,
            dirty: false,
        }
    }

    /// x86-like 64-bit encoding. Non-present entries encode to zero.
    pub fn encode(&self) -> u64 {
        if !self.present {
            return 0;
        }
        let mut raw = PTE_PRESENT | ((self.pfn.0 << PAGE_SHIFT) & PTE_PFN_MASK);
        if self.writable {
            raw |= PTE_WRITABLE;
        }
        if self.accessed {
            raw |= PTE_ACCESSED;
        }
        if self.dirty {
            raw |= PTE_DIRTY;
        }
        match self.size {
            PageSize::Size4K => {}
            PageSize::Size2M => raw |= PTE_HUGE,
            PageSize::Size1G => raw |= PTE_HUGE | PTE_GIANT,
        }
        raw
    }

    pub fn decode(raw: u64) -> Self {
        if raw & PTE_PRESENT == 0 {
            return Pte::not_present();
        }
        let size = match (raw & PTE_HUGE != 0, raw & PTE_GIANT != 0) {
            (false, _) => PageSize::Size4K,
            (true, false) => PageSize::Size2M,
            (true, true) => PageSize::Size1G,
        };
        Pte {
            pfn: Pfn((raw & PTE_PFN_MASK) >> PAGE_SHIFT),
            present: true,
            size,
            writable: raw & PTE_WRITABLE != 0,
            accessed: raw & PTE_ACCESSED != 0,
            dirty: raw & PTE_DIRTY != 0,
        }
    }

    /// Physical address of `va` under this (present) mapping.
    pub fn translate(&self, va: VirtAddr) -> PhysAddr {
        PhysAddr(self.pfn.addr().0 + (va.as_u64() & (self.size.bytes() - 1)))
    }
}

/// Radix indices for the four levels plus the page offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadixIndices {
    pub l4: u16,
    pub l3: u16,
    pub l2: u16,
    pub l1: u16,
    pub offset: u16,
}

impl RadixIndices {
    pub fn compose(&self) -> VirtAddr {
        VirtAddr(
            (u64::from(self.l4) << 39)
                | (u64::from(self.l3) << 30)
                | (u64::from(self.l2) << 21)
                | (u64::from(self.l1) << 12)
                | u64::from(self.offset),
        )
    }

    /// Index for radix level `level` (4 = root, 1 = leaf level).
    pub fn at(&self, level: u8) -> usize {
        match level {
            4 => self.l4 as usize,
            3 => self.l3 as usize,
            2 => self.l2 as usize,
            1 => self.l1 as usize,
            _ => panic!("radix level {level} out of range"),
        }
    }
}

pub fn split_radix_indices(va: VirtAddr) -> RadixIndices {
    let v = va.as_u64();
    RadixIndices {
        l4: ((v >> 39) & 0x1ff) as u16,
        l3: ((v >> 30) & 0x1ff) as u16,
        l2: ((v >> 21) & 0x1ff) as u16,
        l1: ((v >> 12) & 0x1ff) as u16,
        offset: (v & 0xfff) as u16,
    }
}

#[inline]
pub fn vpn_of(va: VirtAddr, size: PageSize) -> u64 {
    va.as_u64() >> size.shift()
}

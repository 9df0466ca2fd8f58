//! Line-oriented trace format, VMA bookkeeping, and synthetic trace generation.
//!
//! ```text
//! M <pid> <R|W|I> <0xVA>
//! A <pid> <0xBASE> <LEN> [eager|segment]
//! F <pid> <0xBASE> <LEN>
//! # comment
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::addr::{Pid, VirtAddr, PAGE_SIZE};
use crate::hash::SplitMix64;

/// Access granularity of synthetic traces (one cache line).
pub const ACCESS_GRANULE: u64 = 64;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line_no}: {reason}")]
    MalformedLine { line_no: u64, reason: String },
    #[error("event {ordinal}: access to {va} by pid {pid} outside every VMA")]
    UncoveredAccess { ordinal: u64, pid: u32, va: VirtAddr },
    #[error("event {ordinal}: free of {base}+{len} does not match an allocated region")]
    BadFree { ordinal: u64, base: VirtAddr, len: u64 },
    #[error("event {ordinal}: allocation {base}+{len} overlaps an existing VMA")]
    OverlappingAlloc { ordinal: u64, base: VirtAddr, len: u64 },
    #[error("trace I/O error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "W")]
    Write,
    #[serde(rename = "I")]
    Fetch,
}

impl Access {
    pub fn code(self) -> char {
        match self {
            Access::Read => 'R',
            Access::Write => 'W',
            Access::Fetch => 'I',
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "R" => Some(Access::Read),
            "W" => Some(Access::Write),
            "I" => Some(Access::Fetch),
            _ => None,
        }
    }

    pub fn is_write(self) -> bool {
        self == Access::Write
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocHint {
    #[default]
    None,
    Eager,
    Segment,
}

impl AllocHint {
    pub fn label(self) -> &'static str {
        match self {
            AllocHint::None => "none",
            AllocHint::Eager => "eager",
            AllocHint::Segment => "segment",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AllocHint::None),
            "eager" => Some(AllocHint::Eager),
            "segment" => Some(AllocHint::Segment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Mem { pid: Pid, access: Access, va: VirtAddr },
    Alloc { pid: Pid, base: VirtAddr, len: u64, hint: AllocHint },
    Free { pid: Pid, base: VirtAddr, len: u64 },
}

impl TraceEvent {
    pub fn pid(&self) -> Pid {
        match *self {
            TraceEvent::Mem { pid, .. } | TraceEvent::Alloc { pid, .. } | TraceEvent::Free { pid, .. } => pid,
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceEvent::Mem { pid, access, va } => write!(f, "M {} {} {:#x}", pid.0, access.code(), va.as_u64()),
            TraceEvent::Alloc { pid, base, len, hint } => {
                write!(f, "A {} {:#x} {}", pid.0, base.as_u64(), len)?;
                if hint != AllocHint::None {
                    write!(f, " {}", hint.label())?;
                }
                Ok(())
            }
            TraceEvent::Free { pid, base, len } => write!(f, "F {} {:#x} {}", pid.0, base.as_u64(), len),
        }
    }
}

/// Decodes one line. Blank and comment-only lines yield `Ok(None)`.
pub fn parse_event(line: &str, line_no: u64) -> Result<Option<TraceEvent>, TraceError> {
    let bad = |reason: String| TraceError::MalformedLine { line_no, reason };
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let toks: Vec<&str> = body.split_whitespace().collect();
    let pid = |s: &str| -> Result<Pid, TraceError> {
        match s.parse::<u32>() {
            Ok(p) if p >= 1 => Ok(Pid(p)),
            _ => Err(bad(format!("invalid pid `{s}`"))),
        }
    };
    let addr = |s: &str| -> Result<VirtAddr, TraceError> {
        let hex = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .ok_or_else(|| bad(format!("address `{s}` is not 0x-prefixed hex")))?;
        let v = u64::from_str_radix(hex, 16).map_err(|_| bad(format!("address `{s}` is not hex")))?;
        VirtAddr::new(v).map_err(|e| bad(e.to_string()))
    };
    let region = |b: &str, l: &str| -> Result<(VirtAddr, u64), TraceError> {
        let base = addr(b)?;
        let len: u64 = l.parse().map_err(|_| bad(format!("length `{l}` is not decimal")))?;
        if base.as_u64() % PAGE_SIZE != 0 {
            return Err(bad(format!("base {base} is not page-aligned")));
        }
        if len == 0 || !len.is_multiple_of(PAGE_SIZE) {
            return Err(bad(format!("length {len} is not a positive multiple of 4096")));
        }
        if base.as_u64().checked_add(len).is_none_or(|end| end > VirtAddr::MAX + 1) {
            return Err(bad("region exceeds the virtual address space".into()));
        }
        Ok((base, len))
    };
    match toks[0] {
        "M" => {
            if toks.len() != 4 {
                return Err(bad("expected `M <pid> <R|W|I> <0xVA>`".into()));
            }
            let access = Access::from_code(toks[2]).ok_or_else(|| bad(format!("bad access type `{}`", toks[2])))?;
            Ok(Some(TraceEvent::Mem { pid: pid(toks[1])?, access, va: addr(toks[3])? }))
        }
        "A" => {
            if !(4..=5).contains(&toks.len()) {
                return Err(bad("expected `A <pid> <0xBASE> <LEN> [eager|segment]`".into()));
            }
            let (base, len) = region(toks[2], toks[3])?;
            let hint = match toks.get(4) {
                None => AllocHint::None,
                Some(&"eager") => AllocHint::Eager,
                Some(&"segment") => AllocHint::Segment,
                Some(h) => return Err(bad(format!("unknown allocation hint `{h}`"))),
            };
            Ok(Some(TraceEvent::Alloc { pid: pid(toks[1])?, base, len, hint }))
        }
        "F" => {
            if toks.len() != 4 {
                return Err(bad("expected `F <pid> <0xBASE> <LEN>`".into()));
            }
            let (base, len) = region(toks[2], toks[3])?;
            Ok(Some(TraceEvent::Free { pid: pid(toks[1])?, base, len }))
        }
        op => Err(bad(format!("unknown opcode `{op}`"))),
    }
}

/// Streams events from a reader, skipping blank and comment lines.
pub struct TraceReader<R> {
    inner: R,
    line_no: u64,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(inner: R) -> Self {
        TraceReader { inner, line_no: 0, buf: String::new() }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceEvent, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line_no += 1;
                    match parse_event(&self.buf, self.line_no) {
                        Ok(None) => continue,
                        Ok(Some(e)) => return Some(Ok(e)),
                        Err(e) => return Some(Err(e)),
                    }
                }
                Err(e) => return Some(Err(TraceError::Io(e.to_string()))),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vma {
    pub base: VirtAddr,
    pub len: u64,
    pub hint: AllocHint,
    /// Created for an access outside every allocated region.
    pub implicit: bool,
}

impl Vma {
    pub fn end(&self) -> u64 {
        self.base.as_u64() + self.len
    }

    pub fn contains(&self, va: VirtAddr) -> bool {
        (self.base.as_u64()..self.end()).contains(&va.as_u64())
    }
}

/// Per-process VMA sets.
#[derive(Debug, Default, Clone)]
pub struct VmaSet {
    by_pid: BTreeMap<Pid, BTreeMap<u64, Vma>>,
}

impl VmaSet {
    pub fn find(&self, pid: Pid, va: VirtAddr) -> Option<&Vma> {
        let m = self.by_pid.get(&pid)?;
        m.range(..=va.as_u64()).next_back().map(|(_, v)| v).filter(|v| v.contains(va))
    }

    /// VMAs overlapping `[base, base+len)`.
    pub fn overlapping(&self, pid: Pid, base: u64, len: u64) -> Vec<Vma> {
        let Some(m) = self.by_pid.get(&pid) else { return Vec::new() };
        let end = base + len;
        let mut out: Vec<Vma> = m.range(..end).map(|(_, v)| *v).filter(|v| v.end() > base).collect();
        out.sort_by_key(|v| v.base);
        out
    }

    /// Inserts an explicit allocation. Implicit VMAs inside the range are
    /// absorbed and returned; overlap with an explicit VMA is an error
    /// carrying the first conflicting region.
    pub fn insert(&mut self, pid: Pid, vma: Vma) -> Result<Vec<Vma>, Vma> {
        let overlaps = self.overlapping(pid, vma.base.as_u64(), vma.len);
        if let Some(c) = overlaps.iter().find(|v| !v.implicit || v.base < vma.base || v.end() > vma.end()) {
            return Err(*c);
        }
        let m = self.by_pid.entry(pid).or_default();
        for v in &overlaps {
            m.remove(&v.base.as_u64());
        }
        m.insert(vma.base.as_u64(), vma);
        Ok(overlaps)
    }

    /// Removes an exact region.
    pub fn remove_exact(&mut self, pid: Pid, base: VirtAddr, len: u64) -> Option<Vma> {
        let m = self.by_pid.get_mut(&pid)?;
        match m.get(&base.as_u64()) {
            Some(v) if v.len == len && !v.implicit => m.remove(&base.as_u64()),
            _ => None,
        }
    }

    pub fn for_pid(&self, pid: Pid) -> impl Iterator<Item = &Vma> {
        self.by_pid.get(&pid).into_iter().flat_map(|m| m.values())
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> + '_ {
        self.by_pid.keys().copied()
    }
}

/// Checks a stream for VMA consistency. In strict mode every access must fall
/// inside an allocated region. Returns the number of events.
pub fn validate_stream<I>(events: I, strict: bool) -> Result<u64, TraceError>
where
    I: IntoIterator<Item = Result<TraceEvent, TraceError>>,
{
    let mut vmas = VmaSet::default();
    let mut n = 0u64;
    for ev in events {
        let ev = ev?;
        match ev {
            TraceEvent::Mem { pid, va, .. } => {
                if vmas.find(pid, va).is_none() {
                    if strict {
                        return Err(TraceError::UncoveredAccess { ordinal: n, pid: pid.0, va });
                    }
                    let page = va.align_down(crate::addr::PageSize::Size4K);
                    let _ = vmas.insert(pid, Vma { base: page, len: PAGE_SIZE, hint: AllocHint::None, implicit: true });
                }
            }
            TraceEvent::Alloc { pid, base, len, hint } => {
                vmas.insert(pid, Vma { base, len, hint, implicit: false })
                    .map_err(|_| TraceError::OverlappingAlloc { ordinal: n, base, len })?;
            }
            TraceEvent::Free { pid, base, len } => {
                vmas.remove_exact(pid, base, len).ok_or(TraceError::BadFree { ordinal: n, base, len })?;
            }
        }
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Sequential,
    Random,
    Strided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub pattern: Pattern,
    pub footprint: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    pub count: u64,
    #[serde(default = "default_pid")]
    pub pid: u32,
    #[serde(default = "default_base")]
    pub base: u64,
    #[serde(default)]
    pub hint: AllocHint,
    #[serde(default = "default_access")]
    pub access: Access,
}

fn default_stride() -> u64 {
    ACCESS_GRANULE
}
fn default_pid() -> u32 {
    1
}
fn default_base() -> u64 {
    0x4000_0000
}
fn default_access() -> Access {
    Access::Read
}

impl SyntheticSpec {
    pub fn new(pattern: Pattern, footprint: u64, count: u64) -> Self {
        SyntheticSpec {
            pattern,
            footprint,
            stride: ACCESS_GRANULE,
            count,
            pid: 1,
            base: default_base(),
            hint: AllocHint::None,
            access: Access::Read,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.footprint < PAGE_SIZE {
            return Err("footprint must be at least one page".into());
        }
        if self.stride == 0 || !self.stride.is_multiple_of(ACCESS_GRANULE) {
            return Err("stride must be a positive multiple of 64".into());
        }
        if self.pid == 0 {
            return Err("pid must be >= 1".into());
        }
        if !self.base.is_multiple_of(PAGE_SIZE) {
            return Err("base must be page-aligned".into());
        }
        let len = self.footprint.div_ceil(PAGE_SIZE) * PAGE_SIZE;
        if self.base.checked_add(len).is_none_or(|e| e > VirtAddr::MAX + 1) {
            return Err("footprint exceeds the virtual address space".into());
        }
        Ok(())
    }
}

/// One Alloc covering the footprint followed by `count` accesses.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Vec<TraceEvent> {
    let pid = Pid(spec.pid);
    let len = spec.footprint.div_ceil(PAGE_SIZE) * PAGE_SIZE;
    let base = spec.base;
    let mut out = Vec::with_capacity(spec.count as usize + 1);
    out.push(TraceEvent::Alloc { pid, base: VirtAddr::new_truncate(base), len, hint: spec.hint });
    let lines = spec.footprint / ACCESS_GRANULE;
    let mut rng = SplitMix64::new(seed);
    for i in 0..spec.count {
        let off = match spec.pattern {
            Pattern::Sequential => (i * ACCESS_GRANULE) % spec.footprint,
            Pattern::Strided => i.wrapping_mul(spec.stride) % spec.footprint,
            Pattern::Random => rng.below(lines.max(1)) * ACCESS_GRANULE,
        };
        out.push(TraceEvent::Mem { pid, access: spec.access, va: VirtAddr::new_truncate(base + off) });
    }
    out
}

pub fn render(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn va(v: u64) -> VirtAddr {
        VirtAddr::new(v).unwrap()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_event("M 1 R 0x7f00deadb000", 1).unwrap(),
            Some(TraceEvent::Mem { pid: Pid(1), access: Access::Read, va: va(0x7f00_dead_b000) })
        );
        assert_eq!(
            parse_event("A 1 0x40000000 2097152 eager", 1).unwrap(),
            Some(TraceEvent::Alloc { pid: Pid(1), base: va(0x4000_0000), len: 2 << 20, hint: AllocHint::Eager })
        );
        assert!(matches!(
            parse_event("A 1 0x1001 4096", 7),
            Err(TraceError::MalformedLine { line_no: 7, .. })
        ));
    }

    #[test]
    fn parse_skips_comments_and_rejects_garbage() {
        assert_eq!(parse_event("   # hello", 1).unwrap(), None);
        assert_eq!(parse_event("", 1).unwrap(), None);
        assert!(parse_event("M 1 R 7f00", 1).is_err());
        assert!(parse_event("M 1 X 0x1000", 1).is_err());
        assert!(parse_event("Q 1 R 0x1000", 1).is_err());
        assert!(parse_event("M 0 R 0x1000", 1).is_err());
        assert!(parse_event("M 1 R 0x1000000000000", 1).is_err());
        assert!(parse_event("F 1 0x1000 100", 1).is_err());
        assert!(parse_event("A 1 0x1000 4096 huge", 1).is_err());
        assert!(parse_event("M 1 W 0x1000 # trailing", 1).unwrap().is_some());
    }

    #[test]
    fn synthetic_sequential_and_strided() {
        let ev = gen_synthetic(&SyntheticSpec::new(Pattern::Sequential, 8192, 2), 0);
        let b = 0x4000_0000;
        assert_eq!(ev.len(), 3);
        assert!(matches!(ev[0], TraceEvent::Alloc { len: 8192, .. }));
        assert!(matches!(ev[1], TraceEvent::Mem { va, .. } if va.as_u64() == b));
        assert!(matches!(ev[2], TraceEvent::Mem { va, .. } if va.as_u64() == b + 64));

        let mut s = SyntheticSpec::new(Pattern::Strided, 1 << 20, 3);
        s.stride = 4096;
        let ev = gen_synthetic(&s, 0);
        let vas: Vec<u64> = ev[1..]
            .iter()
            .map(|e| match e {
                TraceEvent::Mem { va, .. } => va.as_u64(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(vas, vec![b, b + 4096, b + 8192]);
    }

    #[test]
    fn synthetic_random_is_deterministic() {
        let s = SyntheticSpec::new(Pattern::Random, 1 << 24, 1000);
        assert_eq!(render(&gen_synthetic(&s, 7)), render(&gen_synthetic(&s, 7)));
        assert_ne!(render(&gen_synthetic(&s, 7)), render(&gen_synthetic(&s, 8)));
        for e in &gen_synthetic(&s, 7)[1..] {
            let TraceEvent::Mem { va, .. } = e else { panic!() };
            assert!((0x4000_0000..0x4000_0000 + (1 << 24)).contains(&va.as_u64()));
            assert_eq!(va.as_u64() % 64, 0);
        }
    }

    #[test]
    fn strict_stream_rejects_uncovered_access() {
        let text = "A 1 0x1000 4096\nM 1 R 0x1000\nM 1 R 0x9000\n";
        let evs = || TraceReader::new(text.as_bytes());
        assert_eq!(validate_stream(evs(), false), Ok(3));
        assert!(matches!(validate_stream(evs(), true), Err(TraceError::UncoveredAccess { ordinal: 2, .. })));
    }

    #[test]
    fn free_must_match_and_alloc_must_not_overlap() {
        let text = "A 1 0x1000 8192\nF 1 0x1000 4096\n";
        assert!(matches!(
            validate_stream(TraceReader::new(text.as_bytes()), false),
            Err(TraceError::BadFree { ordinal: 1, .. })
        ));
        let text = "A 1 0x1000 8192\nA 1 0x2000 4096\n";
        assert!(matches!(
            validate_stream(TraceReader::new(text.as_bytes()), false),
            Err(TraceError::OverlappingAlloc { ordinal: 1, .. })
        ));
        // an implicit VMA is absorbed by a later covering allocation
        let text = "M 1 R 0x2000\nA 1 0x1000 8192\nF 1 0x1000 8192\n";
        assert_eq!(validate_stream(TraceReader::new(text.as_bytes()), false), Ok(3));
    }

    fn arb_event() -> impl Strategy<Value = TraceEvent> {
        let pid = (1u32..100).prop_map(Pid);
        let page = (0u64..(1 << 35)).prop_map(|p| VirtAddr::new(p << 12).unwrap());
        prop_oneof![
            (pid.clone(), 0usize..3, 0u64..(1 << 48)).prop_map(|(pid, a, v)| TraceEvent::Mem {
                pid,
                access: [Access::Read, Access::Write, Access::Fetch][a],
                va: VirtAddr::new(v).unwrap()
            }),
            (pid.clone(), page.clone(), 1u64..1024, 0usize..3).prop_map(|(pid, base, n, h)| TraceEvent::Alloc {
                pid,
                base,
                len: n * 4096,
                hint: [AllocHint::None, AllocHint::Eager, AllocHint::Segment][h]
            }),
            (pid, page, 1u64..1024).prop_map(|(pid, base, n)| TraceEvent::Free { pid, base, len: n * 4096 }),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(e in arb_event()) {
            prop_assert_eq!(parse_event(&e.to_string(), 1).unwrap(), Some(e));
        }
    }
}

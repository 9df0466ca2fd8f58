//! Acceptance criteria. Built without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero
//! when any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use vmsim::addr::{PageSize, Pfn, Pid, Pte, VirtAddr, PAGE_SIZE};
use vmsim::config::{
    FragmentConfig, FragmentPattern, MemConfig, MmPolicy, PtConfig, PtKind, PwcConfig, SimConfig, SmallCacheConfig,
};
use vmsim::engine::{self, load_config, run_batch, Report, Sim};
use vmsim::hash::SplitMix64;
use vmsim::memhier::{AccessKind, MemHier};
use vmsim::memmgr::{Buddy, Owner};
use vmsim::pagetable::{
    new_table, CompactStore, CuckooStore, HashedTable, NativePort, PageTable, PtSystem, RadixTable,
};
use vmsim::trace::{gen_synthetic, AllocHint, Pattern, SyntheticSpec, TraceEvent};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn or_fail<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn va(x: u64) -> VirtAddr {
    VirtAddr::new(x).expect("canonical test address")
}

struct Rig {
    mem: MemHier,
    mm: Buddy,
}

impl Rig {
    fn new(frames: u64) -> Self {
        Rig { mem: MemHier::new(&MemConfig::default(), frames << 12), mm: Buddy::new(frames, 10) }
    }

    fn port(&mut self) -> NativePort<'_> {
        NativePort { mem: &mut self.mem, mm: &mut self.mm }
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn simulate(cfg: SimConfig, events: impl IntoIterator<Item = TraceEvent>) -> Result<Report, String> {
    let mut sim = or_fail(Sim::new(cfg, Path::new(".")), "setup")?;
    for ev in events {
        or_fail(sim.step(ev), "step")?;
    }
    Ok(sim.finish())
}

// ---------------------------------------------------------------------------
// 1. Translation structures against a flat reference map.
// ---------------------------------------------------------------------------

const ORACLE_OPS: u64 = 100_000;
const REGIONS: u64 = 48;

fn region_base(r: u64) -> u64 {
    // Spread over the whole user half so radix paths and hash tags differ.
    (r.wrapping_mul(0x2_9a4c_0000_0000 + 0x5d_4000_0000) % (1 << 47)) & !0x1f_ffff
}

#[derive(Default)]
struct OracleTally {
    walks: u64,
    walks_mid_resize: u64,
    promotions: u64,
}

/// Drives `t` with random operations and checks every walk and lookup
/// against a flat map. `mid` reports whether the table is between states.
fn oracle_run<T: PageTable + ?Sized>(
    t: &mut T,
    rig: &mut Rig,
    seed: u64,
    mid: impl Fn(&T) -> bool,
) -> Result<OracleTally, String> {
    let mut rng = SplitMix64::new(seed);
    let mut small: BTreeMap<u64, u64> = BTreeMap::new(); // 4K vpn -> pfn
    let mut huge: BTreeMap<u64, u64> = BTreeMap::new(); // region -> first pfn
    let mut tally = OracleTally::default();
    let sizes = [PageSize::Size4K, PageSize::Size2M];
    let vpn = |r: u64, p: u64| (region_base(r) >> 12) + p;
    for op in 0..ORACLE_OPS {
        let r = rng.below(REGIONS);
        let page = rng.below(512);
        let addr = va((vpn(r, page) << 12) | (rng.below(64) * 64));
        match rng.below(100) {
            0..=39 => {
                if huge.contains_key(&r) {
                    continue;
                }
                let pfn = rng.below(1 << 28);
                or_fail(t.map(&mut rig.port(), addr, Pte::new(Pfn(pfn), PageSize::Size4K)), "map")?;
                small.insert(vpn(r, page), pfn);
            }
            40..=54 => {
                if huge.contains_key(&r) {
                    continue;
                }
                let (old, _) = or_fail(t.unmap(&mut rig.port(), addr, PageSize::Size4K), "unmap")?;
                let expect = small.remove(&vpn(r, page));
                ensure!(old.map(|p| p.pfn.0) == expect, "op {op}: unmap returned {old:?}, reference {expect:?}");
            }
            55 => {
                if huge.contains_key(&r) {
                    continue;
                }
                let block = (1 << 29) + r * 512;
                for p in 0..512 {
                    let a = va(vpn(r, p) << 12);
                    or_fail(t.map(&mut rig.port(), a, Pte::new(Pfn(block + p), PageSize::Size4K)), "map")?;
                    small.remove(&vpn(r, p));
                }
                or_fail(t.promote(&mut rig.port(), va(region_base(r)), Pfn(block)), "promote")?;
                huge.insert(r, block);
                tally.promotions += 1;
            }
            56..=57 => {
                let (old, _) = or_fail(t.unmap(&mut rig.port(), va(region_base(r)), PageSize::Size2M), "unmap 2M")?;
                let expect = huge.remove(&r);
                ensure!(old.map(|p| p.pfn.0) == expect, "op {op}: 2M unmap returned {old:?}, reference {expect:?}");
            }
            _ => {
                let expect = huge
                    .get(&r)
                    .map(|b| (b + page, PageSize::Size2M))
                    .or_else(|| small.get(&vpn(r, page)).map(|&p| (p, PageSize::Size4K)));
                if mid(t) {
                    tally.walks_mid_resize += 1;
                }
                let w = or_fail(t.walk(&mut rig.port(), addr, &sizes), "walk")?;
                tally.walks += 1;
                let got = w.pte.map(|p| (p.translate(addr).0 >> 12, p.size));
                ensure!(got == expect, "op {op}: walk of {addr:?} gave {got:?}, reference {expect:?}");
                ensure!(w.fault.is_some() == expect.is_none(), "op {op}: fault flag disagrees");
                let looked = t.lookup(addr).map(|p| (p.translate(addr).0 >> 12, p.size));
                ensure!(looked == expect, "op {op}: lookup disagrees with walk");
            }
        }
        if op % 20_000 == 19_999 {
            or_fail(t.audit(), "audit")?;
        }
    }
    for (&v, &pfn) in &small {
        let got = t.lookup(va(v << 12)).map(|p| p.pfn.0);
        ensure!(got == Some(pfn), "final sweep: vpn {v:#x} maps to {got:?}, reference {pfn}");
    }
    for (&r, &b) in &huge {
        let got = t.lookup(va(region_base(r) + 0x1234)).map(|p| (p.pfn.0, p.size));
        ensure!(got == Some((b, PageSize::Size2M)), "final sweep: region {r} maps to {got:?}");
    }
    or_fail(t.audit(), "final audit")?;
    Ok(tally)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = PtConfig { buckets: 64, buckets_huge: 8, ..PtConfig::default() };
    let mut notes = Vec::new();
    for (i, kind) in PtKind::ALL.into_iter().enumerate() {
        let mut rig = Rig::new(1 << 16);
        let seed = 0xacce_0000 + i as u64;
        let tally = if kind == PtKind::Cuckoo {
            let stores = {
                let mut port = rig.port();
                [
                    or_fail(CuckooStore::new(&mut port, &cfg.cuckoo, cfg.buckets / 2, 0), "cuckoo")?,
                    CuckooStore::new_lazy(&cfg.cuckoo, cfg.buckets_huge / 2, 1),
                ]
            };
            let mut t = HashedTable::new(PtKind::Cuckoo, stores);
            let tally = oracle_run(&mut t, &mut rig, seed, |t| {
                t.store(PageSize::Size4K).is_migrating() || t.store(PageSize::Size2M).is_migrating()
            })?;
            ensure!(t.stats().resizes > 0, "cuckoo never resized");
            ensure!(tally.walks_mid_resize > 0, "no walk observed a cuckoo table mid-resize");
            tally
        } else {
            let mut t = or_fail(new_table(kind, &cfg, &mut rig.port(), true), "new table")?;
            oracle_run(&mut *t, &mut rig, seed, |_| false)?
        };
        notes.push(format!(
            "{} {} walks/{} promotions{}",
            kind.label(),
            tally.walks,
            tally.promotions,
            if kind == PtKind::Cuckoo { format!("/{} mid-resize", tally.walks_mid_resize) } else { String::new() }
        ));
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:.1?} (limit 60 s)");
    Ok(format!("{ORACLE_OPS} ops per kind agree ({}); {took:.1?}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. Walk access counts, native and two-dimensional.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Host table read while translating guest frame `target` (guest level
    /// index, or `None` for the final data frame).
    Host { target: Option<u8> },
    /// Guest table entry read at guest level `level`.
    Guest { level: u8 },
}

/// Every memory reference of a two-dimensional walk, in order, given which
/// guest frames hit in the nested TLB.
fn enumerate_2d(guest_levels: u8, host_levels: u8, ntlb_hit: impl Fn(Option<u8>) -> bool) -> Vec<Step> {
    let mut out = Vec::new();
    let targets = (0..guest_levels).map(Some).chain(std::iter::once(None));
    for target in targets {
        if !ntlb_hit(target) {
            for _ in 0..host_levels {
                out.push(Step::Host { target });
            }
        }
        if let Some(level) = target {
            out.push(Step::Guest { level });
        }
    }
    out
}

fn nested_cfg(ntlb: u32) -> PtConfig {
    let mut cfg = PtConfig { pwc: PwcConfig::disabled(), ..PtConfig::default() };
    cfg.nested.enabled = true;
    cfg.nested.guest = PtKind::Radix;
    cfg.nested.host = PtKind::Radix;
    cfg.nested.ntlb = SmallCacheConfig { entries: ntlb, assoc: ntlb.clamp(1, 4), latency: 1 };
    cfg
}

/// Checks that the recorded accesses have the shape the enumerator
/// predicts: guest steps land in host frames backing guest page-table
/// frames, host steps land elsewhere.
fn check_2d_shape(sys: &PtSystem, guest_mm: &Buddy, accesses: &[u64], expect: &[Step]) -> Result<(), String> {
    ensure!(accesses.len() == expect.len(), "{} accesses, enumerator says {}", accesses.len(), expect.len());
    let n = sys.nested().ok_or("not nested")?;
    let mut backing: BTreeMap<u64, Owner> = BTreeMap::new();
    for (gfn, order, owner) in guest_mm.allocated_blocks() {
        for g in gfn..gfn + (1 << order) {
            if let Some(h) = n.host_frame(g) {
                backing.insert(h, owner);
            }
        }
    }
    for (i, (a, s)) in accesses.iter().zip(expect).enumerate() {
        let owner = backing.get(&(a >> 12));
        match s {
            Step::Guest { .. } => ensure!(owner == Some(&Owner::PageTable), "access {i} ({a:#x}) is not a guest table read"),
            Step::Host { .. } => ensure!(owner.is_none(), "access {i} ({a:#x}) touches guest memory, expected a host table"),
        }
    }
    Ok(())
}

fn criterion_2() -> Outcome {
    let sizes = [PageSize::Size4K, PageSize::Size2M];
    // Native radix with page-walk caches.
    let mut rig = Rig::new(1 << 14);
    let mut t = or_fail(RadixTable::new(&mut rig.port(), &PwcConfig::default()), "radix")?;
    let a = va(0x7f12_3456_7000);
    or_fail(t.map(&mut rig.port(), a, Pte::new(Pfn(77), PageSize::Size4K)), "map")?;
    or_fail(t.map(&mut rig.port(), va(0x7f12_3456_8000), Pte::new(Pfn(78), PageSize::Size4K)), "map")?;
    let cold = or_fail(t.walk(&mut rig.port(), a, &sizes), "walk")?.accesses.len();
    let warm = or_fail(t.walk(&mut rig.port(), va(0x7f12_3456_8000), &sizes), "walk")?.accesses.len();
    let mut rig2 = Rig::new(1 << 14);
    let mut t2 = or_fail(RadixTable::new(&mut rig2.port(), &PwcConfig::default()), "radix")?;
    let h = va(0x7f12_3440_0000);
    or_fail(t2.map(&mut rig2.port(), h, Pte::new(Pfn(1024), PageSize::Size2M)), "map 2M")?;
    let cold2m = or_fail(t2.walk(&mut rig2.port(), va(0x7f12_3441_2345), &sizes), "walk")?.accesses.len();
    ensure!((cold, cold2m, warm) == (4, 3, 1), "radix cold 4K/2M/deepest-PWC = {cold}/{cold2m}/{warm}, want 4/3/1");

    // Nested radix over radix, compared with the enumerator.
    let run = |ntlb: u32| -> Result<(usize, usize), String> {
        let mut mem = MemHier::new(&MemConfig::default(), 1 << 32);
        let mut sys = or_fail(PtSystem::new(&nested_cfg(ntlb), Some(Buddy::new(1 << 16, 10)), &mut mem), "nested")?;
        let mut guest = Buddy::new(1 << 14, 10);
        let pid = Pid(1);
        let gva = va(0x7f12_3456_7000);
        let gfn = or_fail(guest.alloc_block(0, Owner::User), "alloc")?;
        or_fail(sys.map(pid, gva, Pte::new(Pfn(gfn), PageSize::Size4K), &mut mem, &mut guest), "map")?;
        let c = or_fail(sys.walk(pid, gva, &sizes[..1], &mut mem, &mut guest), "walk")?;
        let host = sys.nested().and_then(|n| n.host_frame(gfn));
        ensure!(c.pte.map(|p| p.pfn.0) == host, "nested walk translated to {:?}, host backing is {host:?}", c.pte);
        let cold_expect = enumerate_2d(4, 4, |_| false);
        let cold_addrs: Vec<u64> = c.accesses.iter().map(|p| p.0).collect();
        check_2d_shape(&sys, &guest, &cold_addrs, &cold_expect)?;
        let w = or_fail(sys.walk(pid, gva, &sizes[..1], &mut mem, &mut guest), "walk")?;
        let warm_expect = enumerate_2d(4, 4, |_| ntlb > 0);
        let warm_addrs: Vec<u64> = w.accesses.iter().map(|p| p.0).collect();
        check_2d_shape(&sys, &guest, &warm_addrs, &warm_expect)?;
        Ok((c.accesses.len(), w.accesses.len()))
    };
    let (cold_n, _) = run(0)?;
    let (_, warm_n) = run(64)?;
    ensure!((cold_n, warm_n) == (24, 4), "nested cold/warm = {cold_n}/{warm_n}, want 24/4");
    Ok("radix 4/3/1, nested 24/4, access shapes match the 2D enumerator".into())
}

// ---------------------------------------------------------------------------
// 3. Buddy allocator, fragmentation generator, snapshots.
// ---------------------------------------------------------------------------

/// Frames of `free` that sit in fully free, aligned 512-frame chunks, over
/// all free frames. Computed from per-frame state only.
fn fmfi_oracle(b: &Buddy) -> f64 {
    let total = b.total_frames();
    let mut free = 0u64;
    let mut huge = 0u64;
    for chunk in (0..total).step_by(512) {
        let n = (chunk..chunk + 512).filter(|&p| b.is_free(p)).count() as u64;
        free += n;
        if n == 512 {
            huge += 512;
        }
    }
    if free == 0 {
        0.0
    } else {
        1.0 - huge as f64 / free as f64
    }
}

fn buddy_vs_bitmap(seed: u64, frames: u64, ops: u64) -> Result<(), String> {
    let mut b = Buddy::new(frames, 10);
    let mut used = vec![false; frames as usize];
    let mut live: Vec<(u64, u32)> = Vec::new();
    let mut rng = SplitMix64::new(seed);
    let aligned_free_run = |used: &[bool], order: u32| {
        let n = 1usize << order;
        used.chunks(n).any(|c| c.iter().all(|u| !u))
    };
    for op in 0..ops {
        if live.is_empty() || rng.below(100) < 55 {
            let order = [0, 0, 0, 1, 2, 3, 4, 9][rng.below(8) as usize];
            let possible = aligned_free_run(&used, order);
            match b.alloc_block(order, Owner::User) {
                Ok(pfn) => {
                    ensure!(pfn % (1 << order) == 0, "op {op}: block {pfn:#x} misaligned for order {order}");
                    for f in pfn..pfn + (1 << order) {
                        ensure!(!used[f as usize], "op {op}: frame {f:#x} handed out twice");
                        used[f as usize] = true;
                    }
                    live.push((pfn, order));
                }
                Err(e) => ensure!(!possible, "op {op}: order {order} refused ({e}) though an aligned free run exists"),
            }
        } else {
            let (pfn, order) = live.swap_remove(rng.below(live.len() as u64) as usize);
            or_fail(b.free_block(pfn, order), "free")?;
            for f in pfn..pfn + (1 << order) {
                used[f as usize] = false;
            }
        }
        let held = used.iter().filter(|u| **u).count() as u64;
        ensure!(b.free_frames() + b.allocated_frames() == frames, "op {op}: frames not conserved");
        ensure!(b.allocated_frames() == held, "op {op}: allocator holds {} frames, oracle {held}", b.allocated_frames());
        if op % 500 == 0 {
            or_fail(b.audit(), "audit")?;
        }
    }
    for (pfn, order) in live.drain(..) {
        or_fail(b.free_block(pfn, order), "free")?;
    }
    ensure!(b.free_blocks(10).count() as u64 == frames >> 10, "free memory did not coalesce back to max-order blocks");
    Ok(())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    for seed in 0..8 {
        buddy_vs_bitmap(seed, 1 << 12, 4_000)?;
    }
    let mut achieved = Vec::new();
    for target in [0.3, 0.6, 0.9] {
        let mut b = Buddy::new(1 << 18, 10);
        let got = or_fail(b.fragment_to(target, 42), "fragment_to")?;
        let oracle = fmfi_oracle(&b);
        ensure!((oracle - got).abs() < 1e-12, "reported fmfi {got} but frame states give {oracle}");
        ensure!((oracle - target).abs() <= 0.02, "target {target}: achieved {oracle:.4}");
        or_fail(b.audit(), "audit")?;
        let bytes = b.snapshot_bytes();
        let back = or_fail(Buddy::from_snapshot(&bytes), "snapshot load")?;
        ensure!(back == b, "target {target}: snapshot round trip changed allocator state");
        ensure!(back.snapshot_bytes() == bytes, "target {target}: snapshot re-save differs");
        achieved.push(format!("{target}->{oracle:.4}"));
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "took {took:.1?} (limit 120 s)");
    Ok(format!("bitmap oracle agrees; fmfi {}; snapshots bit-exact; {took:.1?}", achieved.join(" ")))
}

// ---------------------------------------------------------------------------
// 4. Page-table memory and cache footprint.
// ---------------------------------------------------------------------------

fn random_pages(n: usize, span: u64, base: u64, seed: u64) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = base + rng.below(span >> 12);
        if seen.insert(p) {
            out.push(p);
        }
    }
    out
}

fn criterion_4() -> Outcome {
    const TIB: u64 = 1 << 40;
    let pages = random_pages(10_000, TIB, TIB >> 12, 4);
    let cfg = PtConfig::default();
    let mut footprint = BTreeMap::new();
    for kind in [PtKind::Radix, PtKind::Clustered] {
        let mut rig = Rig::new(1 << 15);
        let mut t = or_fail(new_table(kind, &cfg, &mut rig.port(), true), "table")?;
        for (i, &p) in pages.iter().enumerate() {
            or_fail(t.map(&mut rig.port(), va(p << 12), Pte::new(Pfn(i as u64), PageSize::Size4K)), "map")?;
        }
        footprint.insert(kind.label(), t.footprint());
    }
    let ratio = footprint["radix"] as f64 / footprint["clustered"] as f64;
    ensure!(ratio >= 5.0, "radix/clustered footprint {ratio:.2} < 5 ({footprint:?})");

    let mut rig = Rig::new(1 << 15);
    let stores = {
        let mut port = rig.port();
        [
            or_fail(CompactStore::new(&mut port, &cfg.compact, cfg.buckets, 0), "compact")?,
            CompactStore::new_lazy(&cfg.compact, cfg.buckets_huge, 1),
        ]
    };
    let mut compact = HashedTable::new(PtKind::Compact, stores);
    for (i, &p) in pages.iter().enumerate() {
        or_fail(compact.map(&mut rig.port(), va(p << 12), Pte::new(Pfn(i as u64), PageSize::Size4K)), "map")?;
    }
    let load = compact.store(PageSize::Size4K).load();
    ensure!(load <= 0.5, "compact load {load:.3} exceeds 0.5");
    let mut single = 0;
    for &p in &pages {
        let w = or_fail(compact.walk(&mut rig.port(), va(p << 12), &[PageSize::Size4K]), "walk")?;
        ensure!(w.pte.is_some(), "compact lost page {p:#x}");
        single += usize::from(w.accesses.len() == 1);
    }
    let frac = single as f64 / pages.len() as f64;
    ensure!(frac >= 0.95, "compact single-access fraction {frac:.4} < 0.95 at load {load:.3}");

    // Footprint counters by kind, against per-kind sets of touched lines.
    let mut mem = MemHier::new(&MemConfig::default(), 1 << 30);
    let mut rng = SplitMix64::new(9);
    let mut lines: BTreeMap<AccessKind, HashSet<u64>> = BTreeMap::new();
    let mut access = |mem: &mut MemHier, kinds: &[AccessKind], n: usize, lines: &mut BTreeMap<_, HashSet<u64>>| {
        for _ in 0..n {
            let k = kinds[rng.below(kinds.len() as u64) as usize];
            let addr = rng.below(1 << 24) & !63;
            mem.access(vmsim::addr::PhysAddr(addr), k, false).expect("in range");
            lines.entry(k).or_default().insert(addr >> 6);
        }
    };
    let others = [AccessKind::Data, AccessKind::TlbEntry, AccessKind::Kernel];
    access(&mut mem, &others, 50_000, &mut lines);
    ensure!(mem.footprint(AccessKind::Pte) == [0; 3], "Pte footprint nonzero with no Pte accesses");
    access(&mut mem, &AccessKind::ALL, 50_000, &mut lines);
    let pte = mem.footprint(AccessKind::Pte);
    ensure!(pte.iter().all(|&n| n > 0), "Pte footprint {pte:?} after Pte accesses");
    for k in AccessKind::ALL {
        let fp = mem.footprint(k);
        let touched = lines.get(&k).map_or(0, |s| s.len() as u64);
        ensure!(fp.iter().all(|&n| n <= touched), "{} footprint {fp:?} exceeds {touched} touched lines", k.label());
    }
    or_fail(mem.audit(), "cache audit")?;

    // End to end: a walk-free run leaves no Pte lines; a demand run does.
    let spec = |hint| SyntheticSpec { hint, ..SyntheticSpec::new(Pattern::Random, 8 << 20, 5_000) };
    let mut seg = SimConfig::default();
    seg.mm.frames = 1 << 15;
    seg.altmap.segment.enabled = true;
    let r = simulate(seg.clone(), gen_synthetic(&spec(AllocHint::Segment), 1))?;
    let seg_pte: u64 = ["l1", "l2", "llc"].iter().map(|l| r.u64(&format!("mem.{l}.footprint_lines.pte"))).sum();
    ensure!(seg_pte == 0 && r.u64("engine.walks") == 0, "segment run has {seg_pte} Pte lines resident");
    let r = simulate(seg, gen_synthetic(&spec(AllocHint::None), 1))?;
    ensure!(r.u64("mem.llc.footprint_lines.pte") > 0, "demand run left no Pte lines in the LLC");
    Ok(format!(
        "radix/clustered = {ratio:.1}x ({} / {} bytes); compact single-access {frac:.4} at load {load:.3}; Pte footprint isolated",
        footprint["radix"], footprint["clustered"]
    ))
}

// ---------------------------------------------------------------------------
// 5. Eager paging with range translations.
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let footprint = 960 << 20;
    let spec = SyntheticSpec { hint: AllocHint::Eager, ..SyntheticSpec::new(Pattern::Random, footprint, 100_000) };
    let events = gen_synthetic(&spec, 5);
    let base = {
        let mut c = SimConfig::default();
        c.mm.frames = 1 << 18;
        c.mm.policy = MmPolicy::Eager;
        c.altmap.ranges.enabled = true;
        c.report.warmup = 1_000;
        c
    };
    let r = simulate(base.clone(), events.clone())?;
    let acc = r.u64("engine.post_warmup.accesses");
    let alt = r.u64("engine.post_warmup.segment_or_range");
    let walk = r.u64("engine.post_warmup.walk_mem_accesses");
    let share = alt as f64 / acc as f64;
    ensure!(share >= 0.99, "only {share:.4} of post-warmup accesses via segment/range");
    ensure!(walk == 0, "{walk} walk accesses after warmup");
    let clean = r.u64("altmap.ranges_live_total");

    let mut frag = base;
    frag.mm.fragment = Some(FragmentConfig { target: 0.9, seed: 7, pattern: FragmentPattern::Random });
    let r = simulate(frag, events)?;
    let fmfi = r.f64("mm.fmfi_initial");
    ensure!((fmfi - 0.9).abs() <= 0.02, "fragmented pool fmfi {fmfi:.4}");
    let fragged = r.u64("altmap.ranges_live_total");
    ensure!(fragged >= 10 * clean, "ranges grew {clean} -> {fragged}, less than 10x");
    Ok(format!("{share:.4} via segment/range, 0 walk accesses; ranges {clean} -> {fragged} at fmfi {fmfi:.3}"))
}

// ---------------------------------------------------------------------------
// 6. THP across fragmentation levels.
// ---------------------------------------------------------------------------

fn thp_trace() -> (Vec<TraceEvent>, Vec<TraceEvent>) {
    let footprint = 64 << 20;
    let touch = SyntheticSpec { stride: PAGE_SIZE, ..SyntheticSpec::new(Pattern::Strided, footprint, footprint / PAGE_SIZE) };
    let warm = gen_synthetic(&touch, 0);
    let random = gen_synthetic(&SyntheticSpec::new(Pattern::Random, footprint, 50_000), 6);
    // Drop the second Alloc: the region already exists.
    (warm, random.into_iter().skip(1).collect())
}

fn tlb_hits_2m(sim: &Sim) -> u64 {
    sim.tlb().stats().levels.iter().map(|l| l.hits[PageSize::Size2M.index()]).sum()
}

fn criterion_6() -> Outcome {
    let (warm, random) = thp_trace();
    let regions = (64 << 20) / (2 << 20);
    let mut cfg = SimConfig::default();
    cfg.mm.frames = 1 << 16;
    cfg.mm.policy = MmPolicy::ThpReserve;

    let mut sim = or_fail(Sim::new(cfg.clone(), Path::new(".")), "setup")?;
    for ev in warm.iter().cloned() {
        or_fail(sim.step(ev), "step")?;
    }
    let promoted = sim.stats().promotions;
    ensure!(promoted == regions, "{promoted} promotions after touching every page, want {regions}");
    let before = tlb_hits_2m(&sim);
    let n = random.len() as u64;
    for ev in random.iter().cloned() {
        or_fail(sim.step(ev), "step")?;
    }
    let share = (tlb_hits_2m(&sim) - before) as f64 / n as f64;
    ensure!(share >= 0.9, "{share:.4} of post-promotion accesses hit 2 MiB TLB entries");

    let mut cb = cfg;
    cb.mm.fragment = Some(FragmentConfig { pattern: FragmentPattern::Checkerboard, ..FragmentConfig::default() });
    let r = simulate(cb, warm.into_iter().chain(random))?;
    let promotions = r.u64("engine.promotions");
    let faults = r.u64("engine.minor_faults");
    ensure!(promotions == 0, "{promotions} promotions on an all-order-0 pool");
    ensure!(r.u64("engine.resolved_by_size.2M") == 0, "2 MiB translations on an all-order-0 pool");
    ensure!(faults == (64 << 20) / PAGE_SIZE, "{faults} faults, want one per 4 KiB page");
    Ok(format!("fmfi 0: {promoted} promotions, {share:.4} 2 MiB TLB hits; checkerboard: 0 promotions, {faults} 4 KiB faults"))
}

// ---------------------------------------------------------------------------
// 7. Minor faults and cost accounting.
// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let spec = SyntheticSpec { access: vmsim::trace::Access::Write, ..SyntheticSpec::new(Pattern::Random, 64 << 20, 30_000) };
    let events = gen_synthetic(&spec, 7);
    let distinct: HashSet<u64> = events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Mem { va, .. } => Some(va.as_u64() >> 12),
            _ => None,
        })
        .collect();
    let mut cfg = SimConfig::default();
    cfg.mm.frames = 1 << 16;
    let r = simulate(cfg.clone(), events.clone())?;
    let faults = r.u64("engine.minor_faults");
    ensure!(faults == distinct.len() as u64, "demand4k: {faults} faults for {} distinct pages", distinct.len());

    let mut eager = cfg;
    eager.mm.policy = MmPolicy::Eager;
    let mut ev = events;
    if let Some(TraceEvent::Alloc { hint, .. }) = ev.first_mut() {
        *hint = AllocHint::Eager;
    }
    let r = simulate(eager, ev)?;
    let eager_faults = r.u64("engine.minor_faults");
    ensure!(eager_faults == 0, "eager: {eager_faults} faults after the Alloc");

    // Every bundled scenario: the debug log re-sums to the report.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for cfg_path in or_fail(engine::batch_configs(&scenarios_dir()), "scenarios")? {
        let (cfg, base) = or_fail(load_config(&cfg_path, &[]), "config")?;
        let trace = base.join(cfg.trace.clone().ok_or("scenario without trace")?);
        let log_path = dir.path().join("debug.jsonl");
        let log = fs::File::create(&log_path).map_err(|e| e.to_string())?;
        let f = fs::File::open(&trace).map_err(|e| e.to_string())?;
        let report = or_fail(engine::run(cfg, &base, BufReader::new(f), Some(Box::new(log))), "run")?;
        let text = fs::read_to_string(&log_path).map_err(|e| e.to_string())?;
        let mut sum = 0u64;
        let mut lines = 0u64;
        for line in text.lines() {
            let v: serde_json::Value = or_fail(serde_json::from_str(line), "debug line")?;
            let g = |k: &str| v[k].as_u64().unwrap_or(0);
            ensure!(
                g("total") == g("translation") + g("data") + g("fault") + g("vma"),
                "{}: event {} parts do not add up",
                cfg_path.display(),
                g("event")
            );
            sum += g("total");
            lines += 1;
        }
        ensure!(lines == report.u64("events"), "{}: {lines} log lines for {} events", cfg_path.display(), report.u64("events"));
        ensure!(sum == report.u64("total_cycles"), "{}: log sums to {sum}, report {}", cfg_path.display(), report.u64("total_cycles"));
        checked += 1;
    }
    Ok(format!("demand4k {faults} faults = distinct pages; eager 0 faults; debug logs re-sum on {checked} scenarios"))
}

// ---------------------------------------------------------------------------
// 8. Determinism.
// ---------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let dir = scenarios_dir();
    let configs = or_fail(engine::batch_configs(&dir), "scenarios")?;
    ensure!(!configs.is_empty(), "no bundled scenarios in {}", dir.display());
    let mut first = BTreeMap::new();
    for p in &configs {
        let mut outs = Vec::new();
        for _ in 0..2 {
            let (cfg, base) = or_fail(load_config(p, &[]), "config")?;
            let trace = base.join(cfg.trace.clone().ok_or("scenario without trace")?);
            let f = fs::File::open(&trace).map_err(|e| e.to_string())?;
            outs.push(or_fail(engine::run(cfg, &base, BufReader::new(f), None), "run")?.to_json());
        }
        ensure!(outs[0] == outs[1], "{}: two runs differ", p.display());
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        first.insert(stem, outs.swap_remove(0));
    }
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    for o in or_fail(run_batch(&dir, out.path(), 4, &[]), "batch")? {
        let path = o.report.map_err(|e| format!("{}: {e}", o.config.display()))?;
        let stem = o.config.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let bytes = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        ensure!(first.get(stem) == Some(&bytes), "{stem}: batch report differs from sequential run");
    }
    Ok(format!("{} scenarios byte-identical across two runs and the batch runner", configs.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "translation-structure oracle", criterion_1),
        (2, "walk access counts", criterion_2),
        (3, "buddy and fragmentation", criterion_3),
        (4, "page-table footprint", criterion_4),
        (5, "eager paging with ranges", criterion_5),
        (6, "THP across fragmentation", criterion_6),
        (7, "minor faults and cost accounting", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let results: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria.iter().map(|&(_, _, f)| s.spawn(f)).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default();
                    Err(format!("panicked: {msg}"))
                })
            })
            .collect()
    });
    let mut failed = 0;
    for ((n, name, _), r) in criteria.iter().zip(results) {
        match r {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}

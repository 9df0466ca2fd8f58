//! Orchestrates a run: trace events flow through the TLBs, the alternative
//! translation paths, the page tables and the fault handler, and every
//! latency is charged to the simulated clock.

mod batch;
mod grants;
mod port;
mod report;
mod stats;

use std::io::{BufRead, Write};
use std::path::Path as FsPath;

pub use batch::{batch_configs, load_config, run_batch, BatchOutcome};
pub use grants::Grants;
pub use report::{canonical_json, compare, flatten, Report, REPORT_VERSION, TIMESERIES_HEADER};
pub use stats::{EngineStats, EventLog, Path, PostWarmup, Sample};

use crate::addr::{PageSize, Pfn, PhysAddr, Pid, Pte, VirtAddr, HUGE_FRAMES, PAGE_SHIFT, PAGE_SIZE};
use crate::altmap::{AltmapStats, DirectSegment, Intermediate, RangeEntry, RangeSource, RangeTables, RestSeg, Segments};
use crate::config::{ConfigError, Endpoint, FragmentPattern, SimConfig, TranslationMode};
use crate::faultsvc::{Action, ExternalHandler, FaultCosts, FaultError, FaultRequest, Handler, PolicyHandler, RequestContext};
use crate::memhier::{AccessKind, HitLevel, MemError, MemHier};
use crate::memmgr::{Buddy, MmError, Owner};
use crate::pagetable::{PtError, PtSystem};
use crate::tlb::{Origin, Tlb, TlbEntryRec, TlbSource};
use crate::trace::{Access, AllocHint, TraceError, TraceEvent, TraceReader, Vma, VmaSet};
use port::SimPort;

/// Page sizes probed by walks of size-keyed tables.
const WALK_SIZES: [PageSize; 2] = [PageSize::Size4K, PageSize::Size2M];

/// Address space of the backside table in intermediate mode.
const BACKSIDE: Pid = Pid(0);

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Setup(String),
    #[error("event {ordinal}: {message}")]
    Runtime { ordinal: u64, message: String },
    #[error("event {ordinal}: handler requested kill: {reason}")]
    Killed { ordinal: u64, reason: String },
}

impl EngineError {
    /// 2 for bad input, 3 for a run that started and had to stop.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::Trace(_) | EngineError::Input(_) => 2,
            EngineError::Setup(_) | EngineError::Runtime { .. } | EngineError::Killed { .. } => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::Config(_) => "config",
            EngineError::Trace(_) => "trace",
            EngineError::Input(_) => "input",
            EngineError::Setup(_) => "setup",
            EngineError::Runtime { .. } => "runtime",
            EngineError::Killed { .. } => "killed",
        }
    }

    pub fn ordinal(&self) -> Option<u64> {
        match self {
            EngineError::Runtime { ordinal, .. } | EngineError::Killed { ordinal, .. } => Some(*ordinal),
            EngineError::Trace(
                TraceError::UncoveredAccess { ordinal, .. }
                | TraceError::BadFree { ordinal, .. }
                | TraceError::OverlappingAlloc { ordinal, .. },
            ) => Some(*ordinal),
            _ => None,
        }
    }

    /// Single-line machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        m.insert("error".into(), self.kind().into());
        m.insert("exit_code".into(), self.exit_code().into());
        m.insert("message".into(), self.to_string().into());
        if let Some(o) = self.ordinal() {
            m.insert("event".into(), o.into());
        }
        serde_json::Value::Object(m).to_string()
    }
}

/// Why an event could not complete, before the ordinal is attached.
#[derive(Debug)]
enum Abort {
    Trace(TraceError),
    Kill(String),
    Runtime(String),
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Abort {
            fn from(e: $t) -> Self {
                Abort::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(PtError, MemError, MmError, FaultError);

impl Abort {
    fn at(self, ordinal: u64) -> EngineError {
        match self {
            Abort::Trace(e) => EngineError::Trace(e),
            Abort::Kill(reason) => EngineError::Killed { ordinal, reason },
            Abort::Runtime(message) => EngineError::Runtime { ordinal, message },
        }
    }
}

/// Costs accumulated while translating one access.
#[derive(Debug, Default)]
struct Xlate {
    latency: u64,
    fault: u64,
    walk_accesses: u64,
    walked: bool,
    faults: u64,
}

/// The page that resolved an access.
#[derive(Debug, Clone, Copy)]
struct Resolved {
    pa: PhysAddr,
    path: Path,
    size: Option<PageSize>,
    via_range: bool,
}

pub struct Sim {
    cfg: SimConfig,
    mem: MemHier,
    mm: Buddy,
    pts: PtSystem,
    tlb: Tlb,
    segments: Segments,
    ranges: RangeTables,
    restseg: Option<RestSeg>,
    inter: Option<Intermediate>,
    handler: Box<dyn Handler>,
    vmas: VmaSet,
    grants: Grants,
    stats: EngineStats,
    alt: AltmapStats,
    next_id: u64,
    fmfi_initial: f64,
    fragment_achieved: Option<f64>,
    samples: Vec<Sample>,
    log: Option<Box<dyn Write>>,
    closed: bool,
}

/// Reserves `frames` frames at `base` (pinned) or anywhere (allocated).
fn carve(pool: &mut Buddy, base: Option<u64>, frames: u64, what: &str) -> Result<u64, EngineError> {
    match base {
        Some(b) => {
            if b % PAGE_SIZE != 0 {
                return Err(EngineError::Setup(format!("{what} base {b:#x} is not page aligned")));
            }
            let first = b >> PAGE_SHIFT;
            if (first..first + frames).all(|f| pool.pin(f)) {
                Ok(b)
            } else {
                Err(EngineError::Setup(format!("{what} at {b:#x} overlaps memory in use or exceeds the pool")))
            }
        }
        None => pool
            .alloc_run(frames, Owner::Reserved)
            .map(|f| f << PAGE_SHIFT)
            .map_err(|e| EngineError::Setup(format!("{what}: {e}"))),
    }
}

/// Hex CRC-32 of the canonical config, sent in the handshake.
pub fn config_digest(cfg: &SimConfig) -> String {
    format!("{:08x}", crc32fast::hash(canonical_json(&cfg.to_value()).as_bytes()))
}

impl Sim {
    /// Builds every component. Relative snapshot paths resolve against
    /// `base_dir`.
    pub fn new(cfg: SimConfig, base_dir: &FsPath) -> Result<Self, EngineError> {
        cfg.validate()?;
        let nested = cfg.pt.nested.enabled;
        let pool_frames = if nested { cfg.guest_frames() } else { cfg.mm.frames };
        let mut pool = match &cfg.mm.snapshot {
            Some(p) => {
                let path = base_dir.join(p);
                let bytes = std::fs::read(&path).map_err(|e| EngineError::Input(format!("snapshot {}: {e}", path.display())))?;
                Buddy::from_snapshot(&bytes).map_err(|e| EngineError::Input(format!("snapshot {}: {e}", path.display())))?
            }
            None => Buddy::new(pool_frames, cfg.mm.max_order),
        };
        let host = nested.then(|| Buddy::new(cfg.mm.frames, cfg.mm.max_order));
        let phys_frames = host.as_ref().map_or(pool.total_frames(), Buddy::total_frames);
        let mut mem = MemHier::new(&cfg.mem, phys_frames << PAGE_SHIFT);

        let pom_base = match Tlb::pom_bytes(&cfg.tlb) {
            Some(bytes) => Some(carve(&mut pool, cfg.tlb.pomtlb.base, bytes.div_ceil(PAGE_SIZE), "software TLB")?),
            None => None,
        };
        let rs = &cfg.altmap.restseg;
        let restseg = if rs.enabled && cfg.mode == TranslationMode::Classic {
            let base = carve(&mut pool, rs.base, RestSeg::frames_needed(rs.sets, rs.ways), "restseg")?;
            Some(RestSeg::new(base, rs.sets, rs.ways))
        } else {
            None
        };
        let fragment_achieved = match &cfg.mm.fragment {
            Some(f) => Some(match f.pattern {
                FragmentPattern::Random => pool.fragment_to(f.target, f.seed).map_err(|e| EngineError::Setup(e.to_string()))?,
                FragmentPattern::Checkerboard => pool.fragment_checkerboard(),
            }),
            None => None,
        };
        let fmfi_initial = pool.fmfi();

        let pts = PtSystem::new(&cfg.pt, host, &mut mem).map_err(|e| EngineError::Setup(e.to_string()))?;
        let tlb = Tlb::new(&cfg.tlb, pom_base);
        let costs = FaultCosts { base: cfg.fault.base_cycles, per_action: cfg.fault.per_action_cycles };
        let handler: Box<dyn Handler> = match cfg.endpoint()? {
            Endpoint::InProc(policy) => {
                Box::new(PolicyHandler::new(policy, costs, cfg.mm.thp.promote_threshold, restseg.is_some()))
            }
            ep => Box::new(
                ExternalHandler::connect(&ep, &config_digest(&cfg), restseg.is_some(), cfg.fault.timeout_ms)
                    .map_err(|e| EngineError::Setup(e.to_string()))?,
            ),
        };
        let inter = (cfg.mode == TranslationMode::Intermediate)
            .then(|| Intermediate::new(&cfg.altmap.vma_tlb, &cfg.altmap.backside.tlb));
        let r = &cfg.altmap.ranges.rtlb;
        Ok(Sim {
            ranges: RangeTables::new(r.entries, r.latency),
            cfg,
            mem,
            mm: pool,
            pts,
            tlb,
            segments: Segments::default(),
            restseg,
            inter,
            handler,
            vmas: VmaSet::default(),
            grants: Grants::default(),
            stats: EngineStats::default(),
            alt: AltmapStats::default(),
            next_id: 1,
            fmfi_initial,
            fragment_achieved,
            samples: Vec::new(),
            log: None,
            closed: false,
        })
    }

    /// Writes one JSON line per event to `w`.
    pub fn set_debug_log(&mut self, w: Box<dyn Write>) {
        self.log = Some(w);
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn altmap_stats(&self) -> &AltmapStats {
        &self.alt
    }

    pub fn mem(&self) -> &MemHier {
        &self.mem
    }

    pub fn mm(&self) -> &Buddy {
        &self.mm
    }

    pub fn page_tables(&self) -> &PtSystem {
        &self.pts
    }

    pub fn tlb(&self) -> &Tlb {
        &self.tlb
    }

    pub fn ranges(&self) -> &RangeTables {
        &self.ranges
    }

    pub fn grants(&self) -> &Grants {
        &self.grants
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Processes one event.
    pub fn step(&mut self, ev: TraceEvent) -> Result<EventLog, EngineError> {
        let ordinal = self.stats.events;
        let mut log = EventLog { event: ordinal, ..Default::default() };
        let r = match ev {
            TraceEvent::Mem { pid, access, va } => {
                log.kind = 'M';
                self.on_mem(pid, access, va, &mut log)
            }
            TraceEvent::Alloc { pid, base, len, hint } => {
                log.kind = 'A';
                self.on_alloc(pid, base, len, hint).map(|c| log.vma = c)
            }
            TraceEvent::Free { pid, base, len } => {
                log.kind = 'F';
                self.on_free(pid, base, len).map(|c| log.vma = c)
            }
        };
        r.map_err(|a| a.at(ordinal))?;
        log.total = log.translation + log.data + log.fault + log.vma;
        let s = &mut self.stats;
        s.events += 1;
        s.translation_cycles += log.translation;
        s.data_cycles += log.data;
        s.fault_cycles += log.fault;
        s.vma_cycles += log.vma;
        s.total_cycles += log.total;
        let every = self.cfg.report.sample_every;
        if every > 0 && s.events.is_multiple_of(every) {
            self.samples.push(self.sample());
        }
        if let Some(w) = &mut self.log {
            let line = serde_json::to_string(&log).expect("log serializes");
            writeln!(w, "{line}").map_err(|e| EngineError::Runtime { ordinal, message: format!("debug log: {e}") })?;
        }
        Ok(log)
    }

    fn sample(&self) -> Sample {
        let s = &self.stats;
        let rate = |n: u64| if s.mem_events == 0 { 0.0 } else { n as f64 / s.mem_events as f64 };
        Sample {
            event: s.events,
            cycle: s.total_cycles,
            fmfi: self.mm.fmfi(),
            l1_tlb_hit_rate: rate(s.l1_tlb_hits),
            walk_rate: rate(s.walks),
            faults: s.minor_faults,
        }
    }

    /// Ends the handler session and assembles the report.
    pub fn finish(mut self) -> Report {
        self.close();
        if let Some(w) = &mut self.log {
            let _ = w.flush();
        }
        Report::build(&self)
    }

    fn close(&mut self) {
        if !self.closed {
            self.handler.close();
            self.closed = true;
        }
    }

    // ----- events ---------------------------------------------------------

    fn on_mem(&mut self, pid: Pid, access: Access, va: VirtAddr, log: &mut EventLog) -> Result<(), Abort> {
        if self.vmas.find(pid, va).is_none() {
            if self.cfg.strict {
                return Err(Abort::Trace(TraceError::UncoveredAccess { ordinal: self.stats.events, pid: pid.0, va }));
            }
            let page = va.align_down(PageSize::Size4K);
            self.vmas
                .insert(pid, Vma { base: page, len: PAGE_SIZE, hint: AllocHint::None, implicit: true })
                .expect("a page outside every VMA cannot overlap one");
            if let Some(i) = &mut self.inter {
                i.add_vma(pid, page.as_u64(), PAGE_SIZE);
            }
            self.stats.wild_accesses += 1;
        }
        self.stats.mem_events += 1;
        let write = access.is_write();
        let mut x = Xlate::default();
        let res = if self.inter.is_some() {
            let (r, data) = self.translate_intermediate(pid, va, access, &mut x)?;
            log.data = data;
            r
        } else {
            let r = self.translate(pid, va, access, &mut x)?;
            log.data = self.mem.access(r.pa, AccessKind::Data, write)?.latency;
            r
        };
        log.translation = x.latency;
        log.fault = x.fault;
        log.path = Some(res.path);
        log.walk_accesses = x.walk_accesses;
        log.faults = x.faults;

        let s = &mut self.stats;
        s.count_path(res.path);
        if let Some(sz) = res.size {
            s.count_size(sz);
        }
        if x.walked {
            s.walks += 1;
            s.walk_mem_accesses += x.walk_accesses;
            *s.walk_histogram.entry(x.walk_accesses).or_default() += 1;
        }
        if s.mem_events > self.cfg.report.warmup {
            let p = &mut s.post_warmup;
            p.accesses += 1;
            p.walk_mem_accesses += x.walk_accesses;
            p.faults += x.faults;
            p.cycles += x.latency + x.fault + log.data;
            if matches!(res.path, Path::Segment | Path::Range) || res.via_range {
                p.segment_or_range += 1;
            }
            if res.size == Some(PageSize::Size2M) {
                p.resolved_2m += 1;
            }
        }
        Ok(())
    }

    fn on_alloc(&mut self, pid: Pid, base: VirtAddr, len: u64, hint: AllocHint) -> Result<u64, Abort> {
        self.stats.alloc_events += 1;
        let ordinal = self.stats.events;
        let absorbed = self
            .vmas
            .insert(pid, Vma { base, len, hint, implicit: false })
            .map_err(|_| Abort::Trace(TraceError::OverlappingAlloc { ordinal, base, len }))?;
        if let Some(i) = &mut self.inter {
            for v in &absorbed {
                i.remove_vma(pid, v.base.as_u64());
            }
            i.add_vma(pid, base.as_u64(), len);
        }
        if hint == AllocHint::Segment && self.cfg.altmap.segment.enabled && self.segments.get(pid).is_none() {
            if let Ok(first) = self.mm.alloc_run(len.div_ceil(PAGE_SIZE), Owner::Reserved) {
                let b = base.as_u64();
                let seg = DirectSegment { base: b, limit: b + len, offset: (first << PAGE_SHIFT) as i64 - b as i64 };
                self.segments.set(pid, seg);
                self.stats.segments += 1;
            }
        }
        self.stats.vma_requests += 1;
        self.request(pid, RequestContext::VmaAlloc { base: base.as_u64(), len, hint })
    }

    fn on_free(&mut self, pid: Pid, base: VirtAddr, len: u64) -> Result<u64, Abort> {
        self.stats.free_events += 1;
        let ordinal = self.stats.events;
        self.vmas.remove_exact(pid, base, len).ok_or(Abort::Trace(TraceError::BadFree { ordinal, base, len }))?;
        let (b, end) = (base.as_u64(), base.as_u64() + len);
        let mut cost = 0;
        if let Some(seg) = self.segments.remove(pid, b) {
            let first = b.wrapping_add_signed(seg.offset) >> PAGE_SHIFT;
            self.mm.free_run(first, len.div_ceil(PAGE_SIZE))?;
        }
        self.ranges.remove_overlapping(pid, b, len);
        if let Some(rs) = &mut self.restseg {
            rs.evict_range(pid, b, len);
        }
        let ia_base = self.inter.as_ref().and_then(|i| i.ia_of(pid, base));
        let mut va = b;
        while va < end {
            let v = VirtAddr::new_truncate(va);
            let (tpid, key) = self.table_key(pid, v);
            let Some(pte) = self.pts.lookup(tpid, key) else {
                va += PAGE_SIZE;
                continue;
            };
            let page = key.align_down(pte.size);
            let (_, writes) = self.pts.unmap(tpid, page, pte.size, &mut self.mem, &mut self.mm)?;
            cost += self.charge_writes(&writes)?;
            let frames = pte.size.frames();
            if !self.grants.remove(pte.pfn.0, frames) {
                return Err(Abort::Runtime(format!("mapped frame {:#x} was never granted", pte.pfn.0)));
            }
            self.mm.release(pte.pfn.0, frames.trailing_zeros())?;
            self.stats.unmaps += 1;
            va = va - (key.as_u64() - page.as_u64()) + pte.size.bytes();
        }
        let (_, sd) = self.tlb.invalidate_region(pid, base, len);
        cost += sd;
        self.stats.shootdown_cycles += sd;
        if let (Some(i), Some(ia)) = (&mut self.inter, ia_base) {
            i.backside_invalidate(ia, len);
            i.remove_vma(pid, b);
        }
        self.stats.vma_requests += 1;
        Ok(cost + self.request(pid, RequestContext::VmaFree { base: b, len })?)
    }

    // ----- translation ----------------------------------------------------

    /// Classic mode: L1 TLB, segment, range, the rest of the TLB hierarchy,
    /// RestSeg, then the walk.
    fn translate(&mut self, pid: Pid, va: VirtAddr, access: Access, x: &mut Xlate) -> Result<Resolved, Abort> {
        let first = self.tlb.lookup_first(pid, va);
        x.latency += first.latency;
        if let Some(e) = first.entry {
            self.stats.l1_tlb_hits += 1;
            let via_range = e.origin == Origin::Range;
            if via_range {
                self.stats.l1_tlb_range_hits += 1;
            }
            self.tlb.train(va, e.size);
            return Ok(Resolved { pa: e.translate(va), path: Path::L1tlb, size: Some(e.size), via_range });
        }
        self.stats.l1_tlb_misses += 1;

        let seg = &self.cfg.altmap.segment;
        if seg.enabled {
            x.latency += seg.latency;
            if let Some(pa) = self.segments.translate(pid, va) {
                self.alt.segment_hits += 1;
                return Ok(Resolved { pa, path: Path::Segment, size: None, via_range: false });
            }
        }
        if self.cfg.altmap.ranges.enabled {
            let r = self.ranges.lookup(pid, va, &mut self.mem)?;
            x.latency += r.latency;
            self.alt.range_table_accesses += r.accesses;
            match r.hit {
                Some((e, src)) => {
                    match src {
                        RangeSource::Rtlb => self.alt.range_tlb_hits += 1,
                        RangeSource::Table => self.alt.range_table_hits += 1,
                    }
                    let pa = e.translate(va);
                    let fill = TlbEntryRec::for_va(pid, va, PageSize::Size4K, pa.pfn(), Origin::Range);
                    self.tlb.fill(fill, &mut self.mem)?;
                    return Ok(Resolved { pa, path: Path::Range, size: None, via_range: true });
                }
                None => self.alt.range_misses += 1,
            }
        }

        let rest = self.tlb.lookup_rest(pid, va, &mut self.mem)?;
        x.latency += rest.latency;
        if let (Some(src), Some(e)) = (rest.hit, rest.entry) {
            let path = match src {
                TlbSource::Level(_) => Path::L2tlb,
                TlbSource::Prefetch => Path::Prefetch,
                TlbSource::Victima => Path::Victima,
                TlbSource::PomTlb => Path::Pomtlb,
            };
            self.tlb.train(va, e.size);
            return Ok(Resolved { pa: e.translate(va), path, size: Some(e.size), via_range: e.origin == Origin::Range });
        }

        let r = self.resolve_miss(pid, va, access, x)?;
        if self.tlb.prefetch_enabled() {
            self.prefetch(pid, va)?;
        }
        Ok(r)
    }

    /// RestSeg and the walk, with one handler round and one retry.
    fn resolve_miss(&mut self, pid: Pid, va: VirtAddr, access: Access, x: &mut Xlate) -> Result<Resolved, Abort> {
        for attempt in 0..2 {
            if let Some(rs) = &self.restseg {
                let l = rs.translate(pid, va, &mut self.mem)?;
                x.latency += l.latency;
                if let Some(pa) = l.pa {
                    self.alt.restseg_hits += 1;
                    let fill = TlbEntryRec::for_va(pid, va, PageSize::Size4K, pa.pfn(), Origin::Walk);
                    self.tlb.fill(fill, &mut self.mem)?;
                    self.tlb.train(va, PageSize::Size4K);
                    return Ok(Resolved { pa, path: Path::Restseg, size: Some(PageSize::Size4K), via_range: false });
                }
                self.alt.restseg_misses += 1;
            }
            let w = self.pts.walk(pid, va, &WALK_SIZES, &mut self.mem, &mut self.mm)?;
            x.walked = true;
            x.latency += w.latency;
            x.walk_accesses += w.accesses.len() as u64;
            if let Some(pte) = w.pte {
                let e = TlbEntryRec::for_va(pid, va, pte.size, pte.pfn, Origin::Walk);
                self.tlb.fill(e, &mut self.mem)?;
                self.tlb.pom_record(pid, va, &e, &mut self.mem)?;
                self.tlb.train(va, pte.size);
                return Ok(Resolved { pa: pte.translate(va), path: Path::Walk, size: Some(pte.size), via_range: false });
            }
            if attempt == 0 {
                x.faults += 1;
                x.fault += self.fault(pid, va, access)?;
            }
        }
        Err(Abort::Runtime(format!("fault at {va} for pid {} not resolved by the handler", pid.0)))
    }

    /// Next-page prefetch: walked off the critical path, never faults.
    fn prefetch(&mut self, pid: Pid, va: VirtAddr) -> Result<(), Abort> {
        let Ok(next) = VirtAddr::new(va.align_down(PageSize::Size4K).as_u64() + PAGE_SIZE) else { return Ok(()) };
        if self.tlb.holds(pid, next) || self.pts.lookup(pid, next).is_none() {
            return Ok(());
        }
        let w = self.pts.walk(pid, next, &WALK_SIZES, &mut self.mem, &mut self.mm)?;
        self.stats.prefetch_walks += 1;
        self.stats.prefetch_walk_accesses += w.accesses.len() as u64;
        if let Some(pte) = w.pte {
            self.tlb.fill_prefetch(TlbEntryRec::for_va(pid, next, pte.size, pte.pfn, Origin::Prefetch));
        }
        Ok(())
    }

    /// Intermediate mode: VMA lookup, caches by intermediate address, and
    /// the backside translation only when the LLC misses. Returns the
    /// resolution and the data latency.
    fn translate_intermediate(&mut self, pid: Pid, va: VirtAddr, access: Access, x: &mut Xlate) -> Result<(Resolved, u64), Abort> {
        let inter = self.inter.as_mut().expect("intermediate mode");
        let f = inter.front_translate(pid, va, &mut self.mem)?;
        x.latency += f.latency;
        let path = if f.vma_tlb_hit {
            self.alt.vma_tlb_hits += 1;
            Path::VmaTlb
        } else {
            self.alt.vma_tlb_misses += 1;
            self.alt.vma_table_accesses += f.accesses;
            Path::VmaTable
        };
        let ia = f.ia.ok_or_else(|| Abort::Runtime(format!("{va} has no intermediate mapping")))?;
        let out = self.mem.access_caches(ia, AccessKind::Data, access.is_write())?;
        let mut data = out.latency;
        let mut size = None;
        if out.hit_level == HitLevel::Dram {
            let (hit, lat) = self.inter.as_mut().expect("intermediate mode").backside_probe(ia);
            x.latency += lat;
            if hit.is_some() {
                self.alt.backside_tlb_hits += 1;
            } else {
                size = Some(self.backside_walk(pid, va, ia, access, x)?);
            }
            data += self.mem.dram_latency();
        }
        Ok((Resolved { pa: PhysAddr(ia), path, size, via_range: false }, data))
    }

    fn backside_walk(&mut self, pid: Pid, va: VirtAddr, ia: u64, access: Access, x: &mut Xlate) -> Result<PageSize, Abort> {
        let key = Intermediate::backside_key(ia);
        self.alt.backside_walks += 1;
        for attempt in 0..2 {
            let w = self.pts.walk(BACKSIDE, key, &WALK_SIZES, &mut self.mem, &mut self.mm)?;
            x.walked = true;
            x.latency += w.latency;
            x.walk_accesses += w.accesses.len() as u64;
            if let Some(pte) = w.pte {
                self.inter.as_mut().expect("intermediate mode").backside_fill(ia, pte.pfn.0, pte.size);
                return Ok(pte.size);
            }
            if attempt == 0 {
                x.faults += 1;
                x.fault += self.fault(pid, va, access)?;
            }
        }
        Err(Abort::Runtime(format!("fault at {va} for pid {} not resolved by the handler", pid.0)))
    }

    /// Page table and key holding the mapping of `va`.
    fn table_key(&self, pid: Pid, va: VirtAddr) -> (Pid, VirtAddr) {
        match &self.inter {
            Some(i) => match i.ia_of(pid, va) {
                Some(ia) => (BACKSIDE, Intermediate::backside_key(ia)),
                None => (BACKSIDE, VirtAddr::new_truncate(u64::MAX)),
            },
            None => (pid, va),
        }
    }

    // ----- fault service --------------------------------------------------

    fn fault(&mut self, pid: Pid, va: VirtAddr, access: Access) -> Result<u64, Abort> {
        self.stats.minor_faults += 1;
        self.request(pid, RequestContext::Fault { va: va.as_u64(), access })
    }

    /// Sends one request, applies the response and returns its total cost.
    fn request(&mut self, pid: Pid, context: RequestContext) -> Result<u64, Abort> {
        let id = self.next_id.max(self.handler.next_id_floor());
        self.next_id = id + 1;
        let req = FaultRequest { id, pid, cycle: self.stats.total_cycles, context };
        let mut port = SimPort {
            mm: &mut self.mm,
            pts: &self.pts,
            restseg: self.restseg.as_ref(),
            inter: self.inter.as_ref(),
            grants: &mut self.grants,
        };
        let resp = self.handler.handle(&req, &mut port)?;
        if resp.re != id {
            return Err(Abort::Runtime(format!("response to {} answers request {id}", resp.re)));
        }
        let mut cost = resp.handler_cycles;
        self.stats.handler_cycles += resp.handler_cycles;
        for &t in &resp.touches {
            let l = self.mem.access(PhysAddr(t), AccessKind::Kernel, true)?.latency;
            self.stats.touches += 1;
            self.stats.touch_cycles += l;
            cost += l;
        }
        for a in &resp.actions {
            cost += self.apply(pid, a)?;
        }
        Ok(cost)
    }

    fn charge_writes(&mut self, writes: &[PhysAddr]) -> Result<u64, Abort> {
        let mut c = 0;
        for &w in writes {
            c += self.mem.access(w, AccessKind::Pte, true)?.latency;
        }
        self.stats.apply_cycles += c;
        Ok(c)
    }

    fn audit_grant(&self, pfn: u64, frames: u64, what: &str) -> Result<(), Abort> {
        if self.grants.covers(pfn, frames) {
            Ok(())
        } else {
            Err(Abort::Runtime(format!("audit: {what} uses frames {pfn:#x}+{frames} not granted to the handler")))
        }
    }

    fn vaddr(raw: u64) -> Result<VirtAddr, Abort> {
        VirtAddr::new(raw).map_err(|e| Abort::Runtime(format!("action address: {e}")))
    }

    fn page_va(vpn: u64) -> Result<VirtAddr, Abort> {
        Self::vaddr(vpn.checked_mul(PAGE_SIZE).ok_or_else(|| Abort::Runtime(format!("vpn {vpn:#x} out of range")))?)
    }

    /// Applies one action and returns the cycles it costs.
    fn apply(&mut self, pid: Pid, a: &Action) -> Result<u64, Abort> {
        match *a {
            Action::Map { vpn, pfn, size } => {
                self.audit_grant(pfn, size.frames(), "map")?;
                let va = Self::page_va(vpn)?;
                let (tpid, key) = self.table_key(pid, va);
                let writes = self.pts.map(tpid, key, Pte::new(Pfn(pfn), size), &mut self.mem, &mut self.mm)?;
                self.stats.maps += 1;
                self.charge_writes(&writes)
            }
            Action::Unmap { vpn, size } => {
                let va = Self::page_va(vpn)?;
                let (tpid, key) = self.table_key(pid, va);
                let (_, writes) = self.pts.unmap(tpid, key, size, &mut self.mem, &mut self.mm)?;
                self.stats.unmaps += 1;
                let c = self.charge_writes(&writes)?;
                Ok(c + self.shootdown(pid, va, size.bytes()))
            }
            Action::Reserve { va_2m, pfn_block } => {
                self.audit_grant(pfn_block, HUGE_FRAMES, "reserve")?;
                Self::vaddr(va_2m)?;
                self.stats.reservations += 1;
                Ok(0)
            }
            Action::Promote { va_2m, pfn_block } => {
                self.audit_grant(pfn_block, HUGE_FRAMES, "promote")?;
                let va = Self::vaddr(va_2m)?;
                let (tpid, key) = self.table_key(pid, va);
                let writes = self.pts.promote(tpid, key, Pfn(pfn_block), &mut self.mem, &mut self.mm)?;
                self.stats.promotions += 1;
                let c = self.charge_writes(&writes)?;
                Ok(c + self.shootdown(pid, va, PageSize::Size2M.bytes()))
            }
            Action::FillRestseg { vpn, set, way } => {
                let rs = self.restseg.as_mut().ok_or_else(|| Abort::Runtime("fill_restseg without a restseg".into()))?;
                let line = rs
                    .fill(pid, vpn, set, way)
                    .ok_or_else(|| Abort::Runtime(format!("audit: restseg slot ({set}, {way}) invalid for vpn {vpn:#x}")))?;
                self.stats.restseg_fills += 1;
                self.alt.restseg_fills += 1;
                self.charge_writes(&[line])
            }
            Action::AddRange { vbase, vlimit, offset } => {
                let pa = vbase.checked_add_signed(offset).ok_or_else(|| Abort::Runtime("range offset underflows".into()))?;
                let frames = vlimit.saturating_sub(vbase) >> PAGE_SHIFT;
                self.audit_grant(pa >> PAGE_SHIFT, frames, "add_range")?;
                if !self.ranges.add(pid, RangeEntry { vbase, vlimit, offset }) {
                    return Err(Abort::Runtime(format!("range {vbase:#x}..{vlimit:#x} is malformed or overlaps another")));
                }
                self.stats.ranges_added += 1;
                self.alt.ranges_added += 1;
                Ok(0)
            }
            Action::Kill { ref reason } => Err(Abort::Kill(reason.clone())),
        }
    }

    fn shootdown(&mut self, pid: Pid, va: VirtAddr, len: u64) -> u64 {
        let (_, c) = self.tlb.invalidate_region(pid, va, len);
        if let Some(i) = &mut self.inter {
            if let Some(ia) = i.ia_of(pid, va) {
                i.backside_invalidate(ia, len);
            }
        }
        self.stats.shootdown_cycles += c;
        c
    }
}

impl Drop for Sim {
    fn drop(&mut self) {
        self.close();
    }
}

/// Runs a whole trace.
pub fn run<R: BufRead>(cfg: SimConfig, base_dir: &FsPath, trace: R, debug: Option<Box<dyn Write>>) -> Result<Report, EngineError> {
    let mut sim = Sim::new(cfg, base_dir)?;
    if let Some(w) = debug {
        sim.set_debug_log(w);
    }
    for ev in TraceReader::new(trace) {
        sim.step(ev?)?;
    }
    Ok(sim.finish())
}

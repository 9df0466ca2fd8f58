//! Simulation configuration.
//!
//! A run is described by one JSON document. Every field has a default, unknown
//! keys are rejected, and `key.path=value` overrides are applied on top of the
//! resolved document before validation. Array elements carrying a `name`
//! field can be addressed by that name, so `tlb.l1d.entries=64` edits the TLB
//! level named `l1d`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::addr::PageSize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TranslationMode {
    #[default]
    Classic,
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub mode: TranslationMode,
    /// Reject memory accesses outside every VMA instead of creating one.
    pub strict: bool,
    /// Trace path, relative to the config file. The CLI `-t` flag wins.
    pub trace: Option<String>,
    pub mem: MemConfig,
    pub tlb: TlbConfig,
    pub pt: PtConfig,
    pub altmap: AltmapConfig,
    pub mm: MmConfig,
    pub fault: FaultConfig,
    pub report: ReportConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            mode: TranslationMode::Classic,
            strict: false,
            trace: None,
            mem: MemConfig::default(),
            tlb: TlbConfig::default(),
            pt: PtConfig::default(),
            altmap: AltmapConfig::default(),
            mm: MmConfig::default(),
            fault: FaultConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheLevelConfig {
    pub size: u64,
    pub assoc: u32,
    pub latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DramConfig {
    pub latency: u64,
}

impl Default for DramConfig {
    fn default() -> Self {
        DramConfig { latency: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemConfig {
    pub l1: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub llc: CacheLevelConfig,
    pub dram: DramConfig,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            l1: CacheLevelConfig { size: 32 << 10, assoc: 8, latency: 4 },
            l2: CacheLevelConfig { size: 256 << 10, assoc: 8, latency: 12 },
            llc: CacheLevelConfig { size: 2 << 20, assoc: 16, latency: 40 },
            dram: DramConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Parallel,
    Serial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbLevelConfig {
    pub name: String,
    pub entries: u32,
    pub assoc: u32,
    pub latency: u64,
    pub sizes: Vec<PageSize>,
    pub probe: ProbeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub enabled: bool,
    pub table_entries: u32,
    pub counter_bits: u32,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { enabled: false, table_entries: 64, counter_bits: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefetchConfig {
    /// Prefetch buffer capacity; 0 disables the prefetcher.
    pub entries: u32,
    pub latency: u64,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        PrefetchConfig { entries: 0, latency: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimaConfig {
    pub enabled: bool,
    pub capacity_lines: u64,
}

impl Default for VictimaConfig {
    fn default() -> Self {
        VictimaConfig { enabled: false, capacity_lines: 1 << 14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PomTlbConfig {
    pub enabled: bool,
    pub entries: u64,
    /// Physical base; allocated from the memory manager when absent.
    pub base: Option<u64>,
}

impl Default for PomTlbConfig {
    fn default() -> Self {
        PomTlbConfig { enabled: false, entries: 1 << 16, base: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TlbConfig {
    pub levels: Vec<TlbLevelConfig>,
    pub predictor: PredictorConfig,
    pub prefetch: PrefetchConfig,
    pub victima: VictimaConfig,
    pub pomtlb: PomTlbConfig,
    pub shootdown_cycles: u64,
}

impl Default for TlbConfig {
    fn default() -> Self {
        TlbConfig {
            levels: vec![
                TlbLevelConfig {
                    name: "l1d".into(),
                    entries: 64,
                    assoc: 4,
                    latency: 1,
                    sizes: vec![PageSize::Size4K, PageSize::Size2M],
                    probe: ProbeMode::Parallel,
                },
                TlbLevelConfig {
                    name: "l2".into(),
                    entries: 1536,
                    assoc: 12,
                    latency: 7,
                    sizes: vec![PageSize::Size4K, PageSize::Size2M],
                    probe: ProbeMode::Serial,
                },
            ],
            predictor: PredictorConfig::default(),
            prefetch: PrefetchConfig::default(),
            victima: VictimaConfig::default(),
            pomtlb: PomTlbConfig::default(),
            shootdown_cycles: 500,
        }
    }
}

/// Geometry for small set-associative structures (PWCs, nested TLB, ...).
/// `entries == 0` disables the structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallCacheConfig {
    pub entries: u32,
    pub assoc: u32,
    pub latency: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PtKind {
    #[default]
    Radix,
    Clustered,
    Cuckoo,
    Compact,
}

impl PtKind {
    pub const ALL: [PtKind; 4] = [PtKind::Radix, PtKind::Clustered, PtKind::Cuckoo, PtKind::Compact];

    pub fn label(self) -> &'static str {
        match self {
            PtKind::Radix => "radix",
            PtKind::Clustered => "clustered",
            PtKind::Cuckoo => "cuckoo",
            PtKind::Compact => "compact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PwcConfig {
    pub l4: SmallCacheConfig,
    pub l3: SmallCacheConfig,
    pub l2: SmallCacheConfig,
}

impl Default for PwcConfig {
    fn default() -> Self {
        PwcConfig {
            l4: SmallCacheConfig { entries: 4, assoc: 4, latency: 1 },
            l3: SmallCacheConfig { entries: 8, assoc: 8, latency: 1 },
            l2: SmallCacheConfig { entries: 32, assoc: 4, latency: 1 },
        }
    }
}

impl PwcConfig {
    pub fn disabled() -> Self {
        let off = SmallCacheConfig { entries: 0, assoc: 1, latency: 0 };
        PwcConfig { l4: off.clone(), l3: off.clone(), l2: off }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CuckooConfig {
    pub ways: u32,
    pub threshold: f64,
    pub kick_limit: u32,
    pub migrate_per_insert: u32,
    /// Probe all ways at once (latency = max) instead of one after another.
    pub parallel: bool,
}

impl Default for CuckooConfig {
    fn default() -> Self {
        CuckooConfig { ways: 2, threshold: 0.6, kick_limit: 32, migrate_per_insert: 8, parallel: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompactConfig {
    pub stash: u32,
    pub target_load: f64,
}

impl Default for CompactConfig {
    fn default() -> Self {
        CompactConfig { stash: 16, target_load: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NestedConfig {
    pub enabled: bool,
    pub guest: PtKind,
    pub host: PtKind,
    pub ntlb: SmallCacheConfig,
    /// Give the host radix table its own page-walk caches.
    pub host_pwc: bool,
    /// Guest-physical memory size in frames; 0 means half of `mm.frames`.
    pub guest_frames: u64,
}

impl Default for NestedConfig {
    fn default() -> Self {
        NestedConfig {
            enabled: false,
            guest: PtKind::Radix,
            host: PtKind::Radix,
            ntlb: SmallCacheConfig { entries: 64, assoc: 4, latency: 1 },
            host_pwc: false,
            guest_frames: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtConfig {
    pub kind: PtKind,
    pub pwc: PwcConfig,
    /// Initial line count of the 4 KiB hash table (power of two).
    pub buckets: u64,
    /// Initial line count of the 2 MiB / 1 GiB hash tables.
    pub buckets_huge: u64,
    /// Clustered-table load factor that triggers doubling.
    pub max_load: f64,
    pub cuckoo: CuckooConfig,
    pub compact: CompactConfig,
    pub nested: NestedConfig,
}

impl Default for PtConfig {
    fn default() -> Self {
        PtConfig {
            kind: PtKind::Radix,
            pwc: PwcConfig::default(),
            buckets: 1 << 14,
            buckets_huge: 1 << 10,
            max_load: 0.75,
            cuckoo: CuckooConfig::default(),
            compact: CompactConfig::default(),
            nested: NestedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub enabled: bool,
    pub latency: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { enabled: false, latency: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullyAssocConfig {
    pub entries: u32,
    pub latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangesConfig {
    pub enabled: bool,
    pub rtlb: FullyAssocConfig,
}

impl Default for RangesConfig {
    fn default() -> Self {
        RangesConfig { enabled: false, rtlb: FullyAssocConfig { entries: 32, latency: 1 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestSegConfig {
    pub enabled: bool,
    pub sets: u64,
    pub ways: u32,
    /// Physical base of the data region; allocated when absent.
    pub base: Option<u64>,
}

impl Default for RestSegConfig {
    fn default() -> Self {
        RestSegConfig { enabled: false, sets: 1024, ways: 4, base: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacksideConfig {
    pub tlb: SmallCacheConfig,
}

impl Default for BacksideConfig {
    fn default() -> Self {
        BacksideConfig { tlb: SmallCacheConfig { entries: 1024, assoc: 8, latency: 10 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AltmapConfig {
    pub segment: SegmentConfig,
    pub ranges: RangesConfig,
    pub restseg: RestSegConfig,
    pub vma_tlb: FullyAssocConfig,
    pub backside: BacksideConfig,
}

impl Default for AltmapConfig {
    fn default() -> Self {
        AltmapConfig {
            segment: SegmentConfig::default(),
            ranges: RangesConfig::default(),
            restseg: RestSegConfig::default(),
            vma_tlb: FullyAssocConfig { entries: 16, latency: 1 },
            backside: BacksideConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MmPolicy {
    #[default]
    Demand4k,
    ThpReserve,
    Eager,
}

impl MmPolicy {
    pub fn label(self) -> &'static str {
        match self {
            MmPolicy::Demand4k => "demand4k",
            MmPolicy::ThpReserve => "thp",
            MmPolicy::Eager => "eager",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "demand4k" => Some(MmPolicy::Demand4k),
            "thp" | "thp_reserve" => Some(MmPolicy::ThpReserve),
            "eager" => Some(MmPolicy::Eager),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThpConfig {
    pub promote_threshold: f64,
}

impl Default for ThpConfig {
    fn default() -> Self {
        ThpConfig { promote_threshold: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FragmentPattern {
    /// Pin random frames until the FMFI target is reached.
    #[default]
    Random,
    /// Pin every odd frame: all free memory is order-0.
    Checkerboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FragmentConfig {
    pub target: f64,
    pub seed: u64,
    pub pattern: FragmentPattern,
}

impl Default for FragmentConfig {
    fn default() -> Self {
        FragmentConfig { target: 0.0, seed: 42, pattern: FragmentPattern::Random }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmConfig {
    pub frames: u64,
    pub max_order: u32,
    pub policy: MmPolicy,
    pub thp: ThpConfig,
    pub fragment: Option<FragmentConfig>,
    pub snapshot: Option<String>,
}

impl Default for MmConfig {
    fn default() -> Self {
        MmConfig {
            frames: 1 << 18,
            max_order: 10,
            policy: MmPolicy::Demand4k,
            thp: ThpConfig::default(),
            fragment: None,
            snapshot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultConfig {
    /// `inproc`, `inproc:<policy>`, `exec:<command>` or `tcp:<host:port>`.
    pub handler: String,
    pub base_cycles: u64,
    pub per_action_cycles: u64,
    pub timeout_ms: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            handler: "inproc".into(),
            base_cycles: 1000,
            per_action_cycles: 200,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Sample the time series every N events; 0 disables sampling.
    pub sample_every: u64,
    /// Memory events excluded from the `post_warmup` counters.
    pub warmup: u64,
}

/// Parsed `fault.handler` endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    InProc(MmPolicy),
    Exec(String),
    Tcp(String),
}

impl SimConfig {
    /// Parses a JSON document, applies overrides, and validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_value(raw, overrides)
    }

    pub fn from_value(raw: Value, overrides: &[String]) -> Result<Self, ConfigError> {
        let base: SimConfig =
            serde_json::from_value(raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if overrides.is_empty() {
            base.validate()?;
            return Ok(base);
        }
        let mut doc = serde_json::to_value(&base).expect("config serializes");
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: SimConfig =
            serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn endpoint(&self) -> Result<Endpoint, ConfigError> {
        let h = self.fault.handler.as_str();
        if h == "inproc" {
            return Ok(Endpoint::InProc(self.mm.policy));
        }
        if let Some(p) = h.strip_prefix("inproc:") {
            return MmPolicy::from_label(p)
                .map(Endpoint::InProc)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown in-process policy `{p}`")));
        }
        if let Some(cmd) = h.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(ConfigError::Invalid("empty exec: endpoint".into()));
            }
            return Ok(Endpoint::Exec(cmd.to_string()));
        }
        if let Some(addr) = h.strip_prefix("tcp:") {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        Err(ConfigError::Invalid(format!("unknown fault.handler `{h}`")))
    }

    /// The allocation policy in force, whichever way it was named.
    pub fn policy(&self) -> MmPolicy {
        match self.endpoint() {
            Ok(Endpoint::InProc(p)) => p,
            _ => self.mm.policy,
        }
    }

    pub fn guest_frames(&self) -> u64 {
        if self.pt.nested.guest_frames == 0 {
            self.mm.frames / 2
        } else {
            self.pt.nested.guest_frames
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, c) in [("l1", &self.mem.l1), ("l2", &self.mem.l2), ("llc", &self.mem.llc)] {
            if c.assoc == 0 || c.size == 0 || c.size % (u64::from(c.assoc) * 64) != 0 {
                return bad(format!("mem.{name}: size must be divisible by assoc*64"));
            }
            let sets = c.size / (u64::from(c.assoc) * 64);
            if !sets.is_power_of_two() {
                return bad(format!("mem.{name}: set count {sets} is not a power of two"));
            }
        }
        if self.tlb.levels.is_empty() {
            return bad("tlb.levels must not be empty".into());
        }
        for l in &self.tlb.levels {
            if l.assoc == 0 || l.entries == 0 || l.entries % l.assoc != 0 {
                return bad(format!("tlb level {}: entries must be divisible by assoc", l.name));
            }
            if l.sizes.is_empty() {
                return bad(format!("tlb level {}: sizes must not be empty", l.name));
            }
        }
        let p = &self.tlb.predictor;
        if p.enabled && (!p.table_entries.is_power_of_two() || p.counter_bits != 2) {
            return bad("tlb.predictor: table_entries must be a power of two and counter_bits 2".into());
        }
        if self.tlb.victima.enabled && self.tlb.victima.capacity_lines == 0 {
            return bad("tlb.victima.capacity_lines must be positive".into());
        }
        if self.tlb.pomtlb.enabled && self.tlb.pomtlb.entries == 0 {
            return bad("tlb.pomtlb.entries must be positive".into());
        }
        for (n, b) in [("pt.buckets", self.pt.buckets), ("pt.buckets_huge", self.pt.buckets_huge)] {
            if !b.is_power_of_two() {
                return bad(format!("{n} must be a power of two"));
            }
        }
        if !(self.pt.max_load > 0.0 && self.pt.max_load <= 1.0) {
            return bad("pt.max_load must be in (0, 1]".into());
        }
        let c = &self.pt.cuckoo;
        if c.ways == 0 || !(c.threshold > 0.0 && c.threshold <= 1.0) || c.migrate_per_insert == 0 {
            return bad("pt.cuckoo: ways >= 1, threshold in (0, 1], migrate_per_insert >= 1".into());
        }
        if !self.pt.buckets.is_multiple_of(u64::from(c.ways)) && self.pt.kind == PtKind::Cuckoo {
            return bad("pt.buckets must be divisible by pt.cuckoo.ways".into());
        }
        if !(self.pt.compact.target_load > 0.0 && self.pt.compact.target_load <= 1.0) {
            return bad("pt.compact.target_load must be in (0, 1]".into());
        }
        if self.mm.max_order < 9 || self.mm.max_order > 20 {
            return bad("mm.max_order must be in 9..=20".into());
        }
        if self.mm.frames < 1 << self.mm.max_order || !self.mm.frames.is_multiple_of(1 << self.mm.max_order) {
            return bad("mm.frames must be a positive multiple of 2^max_order".into());
        }
        if !(self.mm.thp.promote_threshold > 0.0 && self.mm.thp.promote_threshold <= 1.0) {
            return bad("mm.thp.promote_threshold must be in (0, 1]".into());
        }
        if let Some(f) = &self.mm.fragment {
            if !(0.0..=1.0).contains(&f.target) {
                return bad("mm.fragment.target must be in [0, 1]".into());
            }
            if self.mm.snapshot.is_some() {
                return bad("mm.fragment and mm.snapshot are mutually exclusive".into());
            }
        }
        let rs = &self.altmap.restseg;
        if rs.enabled && (rs.sets == 0 || rs.ways == 0 || rs.ways > 8) {
            return bad("altmap.restseg: sets >= 1 and ways in 1..=8".into());
        }
        if self.pt.nested.enabled {
            if self.mode == TranslationMode::Intermediate {
                return bad("nested paging is not supported in intermediate mode".into());
            }
            if self.altmap.segment.enabled || self.altmap.ranges.enabled || rs.enabled {
                return bad("nested paging cannot be combined with segments, ranges or restseg".into());
            }
            let g = self.guest_frames();
            if g < 1 << self.mm.max_order || !g.is_multiple_of(1 << self.mm.max_order) {
                return bad("pt.nested.guest_frames must be a multiple of 2^max_order".into());
            }
        }
        self.endpoint()?;
        Ok(())
    }
}

/// Applies one `a.b.c=value` override to a JSON document.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::Override(spec.to_string(), m.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(|| err("expected key=value"))?;
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segs: Vec<&str> = path.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(err("empty path segment"));
    }
    let mut cur = doc;
    for (i, seg) in segs.iter().enumerate() {
        let last = i + 1 == segs.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*seg) {
                    if let Some(key) = named_array_field(map, seg) {
                        let arr = map.get_mut(&key).and_then(Value::as_array_mut).expect("array");
                        let el = arr.iter_mut().find(|e| e.get("name").and_then(Value::as_str) == Some(seg));
                        el.expect("located above")
                    } else {
                        map.entry(seg.to_string()).or_insert(Value::Null)
                    }
                } else {
                    map.get_mut(*seg).expect("checked")
                }
            }
            Value::Array(arr) => {
                let idx = match seg.parse::<usize>() {
                    Ok(i) => Some(i),
                    Err(_) => arr.iter().position(|e| e.get("name").and_then(Value::as_str) == Some(seg)),
                };
                match idx {
                    Some(i) if i < arr.len() => &mut arr[i],
                    _ => return Err(err(&format!("no array element `{seg}`"))),
                }
            }
            _ => return Err(err(&format!("`{seg}` does not name a field"))),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("loop returns on last segment")
}

fn named_array_field(map: &serde_json::Map<String, Value>, name: &str) -> Option<String> {
    map.iter()
        .find(|(_, v)| {
            v.as_array()
                .is_some_and(|a| a.iter().any(|e| e.get("name").and_then(Value::as_str) == Some(name)))
        })
        .map(|(k, _)| k.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
        let cfg = SimConfig::from_json_str("{}", &[]).unwrap();
        assert_eq!(cfg, SimConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            SimConfig::from_json_str(r#"{"tlb":{"bogus":1}}"#, &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(SimConfig::from_json_str("{}", &["pt.colour=red".into()]).is_err());
    }

    #[test]
    fn named_level_override() {
        let cfg = SimConfig::from_json_str("{}", &["tlb.l1d.entries=128".into()]).unwrap();
        assert_eq!(cfg.tlb.levels[0].entries, 128);
        let cfg = SimConfig::from_json_str("{}", &["tlb.levels.1.latency=9".into()]).unwrap();
        assert_eq!(cfg.tlb.levels[1].latency, 9);
    }

    #[test]
    fn string_and_nested_null_overrides() {
        let cfg = SimConfig::from_json_str(
            "{}",
            &["pt.kind=cuckoo".into(), "mm.fragment.target=0.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.pt.kind, PtKind::Cuckoo);
        assert_eq!(cfg.mm.fragment.unwrap().target, 0.5);
    }

    #[test]
    fn geometry_is_validated() {
        assert!(SimConfig::from_json_str("{}", &["mem.l1.size=1000".into()]).is_err());
        assert!(SimConfig::from_json_str("{}", &["tlb.l1d.entries=63".into()]).is_err());
        assert!(SimConfig::from_json_str("{}", &["pt.buckets=1000".into()]).is_err());
        assert!(SimConfig::from_json_str("{}", &["fault.handler=smoke".into()]).is_err());
    }

    #[test]
    fn endpoints() {
        let mut c = SimConfig::default();
        assert_eq!(c.endpoint().unwrap(), Endpoint::InProc(MmPolicy::Demand4k));
        c.fault.handler = "inproc:thp".into();
        assert_eq!(c.endpoint().unwrap(), Endpoint::InProc(MmPolicy::ThpReserve));
        c.fault.handler = "exec:./h --policy thp".into();
        assert_eq!(c.endpoint().unwrap(), Endpoint::Exec("./h --policy thp".into()));
        c.fault.handler = "tcp:127.0.0.1:9000".into();
        assert_eq!(c.endpoint().unwrap(), Endpoint::Tcp("127.0.0.1:9000".into()));
    }
}

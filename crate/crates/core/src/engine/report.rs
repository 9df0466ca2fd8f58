//! Report assembly and byte-stable serialization: keys in lexicographic
//! order, reals with six decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde_json::{json, Map, Value};

use super::{Sample, Sim};
use crate::addr::PageSize;
use crate::memhier::{AccessKind, HitLevel};

pub const REPORT_VERSION: u64 = 1;
pub const TIMESERIES_HEADER: &str = "event,cycle,fmfi,l1_tlb_hit_rate,walk_rate,faults";

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub value: Value,
    pub samples: Vec<Sample>,
}

fn by_size(a: &[u64; 3]) -> Value {
    let mut m = Map::new();
    for s in PageSize::ALL {
        m.insert(s.label().into(), a[s.index()].into());
    }
    Value::Object(m)
}

fn by_kind(a: &[u64; 4]) -> Value {
    let mut m = Map::new();
    for k in AccessKind::ALL {
        m.insert(k.label().into(), a[k.index()].into());
    }
    Value::Object(m)
}

fn f(x: f64) -> Value {
    json!(x)
}

impl Report {
    pub(super) fn build(sim: &Sim) -> Report {
        let s = &sim.stats;
        let mut engine = serde_json::to_value(s).expect("stats serialize");
        let e = engine.as_object_mut().expect("object");
        e.insert("resolved_by_size".into(), by_size(&s.resolved_by_size));
        e.insert("walk_histogram".into(), s.walk_histogram.iter().map(|(k, v)| (k.to_string(), json!(v))).collect());
        e.insert("paths".into(), super::Path::ALL.iter().map(|p| (p.label().to_string(), json!(s.path(*p)))).collect());
        for k in ["events", "total_cycles"] {
            e.remove(k);
        }

        let t = sim.tlb.stats();
        let mut tlb = serde_json::to_value(t).expect("tlb stats serialize");
        tlb["levels"] = t
            .levels
            .iter()
            .map(|l| json!({"name": l.name, "hits": by_size(&l.hits), "misses": l.misses}))
            .collect();

        let mut pt = serde_json::to_value(sim.pts.stats()).expect("pt stats serialize");
        let footprints: Map<String, Value> =
            sim.pts.pids().map(|p| (p.0.to_string(), json!(sim.pts.footprint(p)))).collect();
        let total: u64 = sim.pts.pids().map(|p| sim.pts.footprint(p)).sum();
        pt["footprint_bytes"] = Value::Object(footprints);
        pt["footprint_total_bytes"] = json!(total);
        pt["kind"] = json!(sim.pts.pids().next().and_then(|p| sim.pts.table(p)).map(|t| t.kind().label()));
        if let Some(n) = sim.pts.nested() {
            pt["nested"] = serde_json::to_value(&n.stats).expect("nested stats serialize");
            pt["nested"]["host_footprint_bytes"] = json!(n.host_footprint());
        }

        let mut alt = serde_json::to_value(&sim.alt).expect("altmap stats serialize");
        let pids: BTreeSet<_> = sim.vmas.pids().chain(sim.pts.pids()).collect();
        alt["ranges_live"] = pids
            .iter()
            .filter(|p| sim.ranges.count(**p) > 0)
            .map(|p| (p.0.to_string(), json!(sim.ranges.count(*p))))
            .collect();
        alt["ranges_live_total"] = json!(sim.ranges.total());
        alt["restseg_resident"] = json!(sim.restseg.as_ref().map_or(0, |r| r.resident()));

        let m = &sim.mem.stats;
        let mut mem = Map::new();
        for (i, lvl) in HitLevel::CACHES.iter().enumerate() {
            mem.insert(
                lvl.label().into(),
                json!({
                    "hits": by_kind(&m.hits[i]),
                    "misses": by_kind(&m.misses[i]),
                    "footprint_lines": by_kind(&AccessKind::ALL.map(|k| sim.mem.footprint(k)[i])),
                }),
            );
        }
        mem.insert("dram".into(), by_kind(&m.dram));
        mem.insert("writes".into(), json!(m.writes));

        let frag = sim.mm.report();
        let mm = json!({
            "fmfi_initial": f(sim.fmfi_initial),
            "fmfi_final": f(frag.fmfi),
            "fragment_achieved": sim.fragment_achieved.map(f),
            "free_frames_per_order": frag.free_frames_per_order,
            "free_frames": sim.mm.free_frames(),
            "allocated_frames": sim.mm.allocated_frames(),
            "pinned_frames": sim.mm.pinned_frames(),
            "granted_frames": sim.grants.frames(),
            "total_frames": sim.mm.total_frames(),
        });

        // Transport settings are not simulation parameters: in-process and
        // external runs of the same policy produce the same report.
        let mut config = sim.cfg.to_value();
        if let Some(f) = config.get_mut("fault").and_then(Value::as_object_mut) {
            f.remove("handler");
            f.remove("timeout_ms");
        }
        let value = json!({
            "version": REPORT_VERSION,
            "config": config,
            "events": s.events,
            "total_cycles": s.total_cycles,
            "engine": engine,
            "tlb": tlb,
            "pt": pt,
            "altmap": alt,
            "mem": Value::Object(mem),
            "mm": mm,
            "timeseries": serde_json::to_value(&sim.samples).expect("samples serialize"),
        });
        Report { value, samples: sim.samples.clone() }
    }

    /// The report file contents, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = canonical_json(&self.value);
        s.push('\n');
        s
    }

    pub fn timeseries_csv(&self) -> String {
        let mut out = String::from(TIMESERIES_HEADER);
        out.push('\n');
        for r in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.event, r.cycle, r.fmfi, r.l1_tlb_hit_rate, r.walk_rate, r.faults
            );
        }
        out
    }

    /// Looks up a dotted path such as `engine.minor_faults`.
    pub fn get(&self, path: &str) -> Option<&Value> {
        path.split('.').try_fold(&self.value, |v, k| match v {
            Value::Array(a) => a.get(k.parse::<usize>().ok()?),
            _ => v.get(k),
        })
    }

    pub fn u64(&self, path: &str) -> u64 {
        self.get(path).and_then(Value::as_u64).unwrap_or_else(|| panic!("report has no integer at {path}"))
    }

    pub fn f64(&self, path: &str) -> f64 {
        self.get(path).and_then(Value::as_f64).unwrap_or_else(|| panic!("report has no number at {path}"))
    }
}

/// Compact JSON with sorted keys and every real printed as `{:.6}`.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v);
    out
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => {
                let _ = write!(out, "{u}");
            }
            (None, Some(i)) => {
                let _ = write!(out, "{i}");
            }
            _ => {
                let x = n.as_f64().unwrap_or(0.0);
                let x = if x == 0.0 { 0.0 } else { x };
                let _ = write!(out, "{x:.6}");
            }
        },
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, x);
            }
            out.push(']');
        }
        Value::Object(m) => {
            let sorted: BTreeMap<&String, &Value> = m.iter().collect();
            out.push('{');
            for (i, (k, x)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(out, x);
            }
            out.push('}');
        }
    }
}

/// Flattens nested objects and arrays into dotted keys.
pub fn flatten(v: &Value) -> BTreeMap<String, String> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(m) => m.iter().for_each(|(k, x)| go(&key(k), x, out)),
            Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| go(&key(&i.to_string()), x, out)),
            Value::String(s) => {
                out.insert(prefix.to_string(), s.clone());
            }
            Value::Null => {
                out.insert(prefix.to_string(), String::new());
            }
            other => {
                out.insert(prefix.to_string(), canonical_json(other));
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

/// One CSV row per report; columns are the union of flattened keys, with
/// the time series left out. The first column names the report.
pub fn compare(reports: &[(String, Value)]) -> Result<String, csv::Error> {
    let flat: Vec<BTreeMap<String, String>> = reports
        .iter()
        .map(|(_, v)| flatten(v).into_iter().filter(|(k, _)| !k.starts_with("timeseries.")).collect())
        .collect();
    let columns: BTreeSet<&String> = flat.iter().flat_map(|m| m.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("report").chain(columns.iter().map(|c| c.as_str())))?;
    for ((name, _), m) in reports.iter().zip(&flat) {
        let row = columns.iter().map(|c| m.get(*c).map_or("", String::as_str));
        w.write_record(std::iter::once(name.as_str()).chain(row))?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_sorts_keys_and_pins_reals() {
        let v = json!({"b": 1, "a": {"z": 0.5, "y": [1.0, -2, "s"]}, "c": null});
        assert_eq!(canonical_json(&v), r#"{"a":{"y":[1.000000,-2,"s"],"z":0.500000},"b":1,"c":null}"#);
    }

    #[test]
    fn flatten_uses_dotted_paths() {
        let v = json!({"a": {"b": [3, {"c": true}]}, "s": "x"});
        let f = flatten(&v);
        assert_eq!(f["a.b.0"], "3");
        assert_eq!(f["a.b.1.c"], "true");
        assert_eq!(f["s"], "x");
    }

    #[test]
    fn compare_has_one_row_per_report() {
        let a = json!({"engine": {"walks": 3}, "config": {"pt": {"kind": "radix"}}});
        let b = json!({"engine": {"walks": 5, "extra": 1.5}, "config": {"pt": {"kind": "cuckoo"}}});
        let csv = compare(&[("a.json".into(), a), ("b.json".into(), b)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "report,config.pt.kind,engine.extra,engine.walks");
        assert_eq!(lines[1], "a.json,radix,,3");
        assert_eq!(lines[2], "b.json,cuckoo,1.500000,5");
    }
}

//! Allocator snapshots: JSON body plus a crc32 over its canonical form.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Buddy, MmError, Owner};

pub const SNAPSHOT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct FreeRec {
    order: u32,
    pfn: u64,
}

#[derive(Serialize, Deserialize)]
struct AllocRec {
    pfn: u64,
    order: u32,
    owner: Owner,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    version: u64,
    total_frames: u64,
    max_order: u32,
    free: Vec<FreeRec>,
    pinned: Vec<u64>,
    allocated: Vec<AllocRec>,
}

fn checksum(body: &Value) -> u32 {
    crc32fast::hash(body.to_string().as_bytes())
}

impl Buddy {
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let body = Body {
            version: SNAPSHOT_VERSION,
            total_frames: self.total_frames,
            max_order: self.max_order,
            free: (0..=self.max_order).flat_map(|o| self.free_blocks(o).map(move |pfn| FreeRec { order: o, pfn })).collect(),
            pinned: self.pinned().collect(),
            allocated: self.allocated_blocks().map(|(pfn, order, owner)| AllocRec { pfn, order, owner }).collect(),
        };
        let mut doc = serde_json::to_value(&body).expect("serializable body");
        let crc = checksum(&doc);
        doc.as_object_mut().expect("object").insert("crc32".into(), crc.into());
        let mut out = doc.to_string().into_bytes();
        out.push(b'\n');
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Buddy, MmError> {
        let mut doc: Value = serde_json::from_slice(bytes).map_err(|_| MmError::ChecksumMismatch)?;
        let obj = doc.as_object_mut().ok_or(MmError::ChecksumMismatch)?;
        let stored = obj.remove("crc32").and_then(|v| v.as_u64()).ok_or(MmError::ChecksumMismatch)?;
        if u64::from(checksum(&doc)) != stored {
            return Err(MmError::ChecksumMismatch);
        }
        let version = doc.get("version").and_then(Value::as_u64).unwrap_or(0);
        if version != SNAPSHOT_VERSION {
            return Err(MmError::SchemaVersionMismatch { found: version });
        }
        let body: Body = serde_json::from_value(doc).map_err(|e| MmError::CorruptSnapshot(e.to_string()))?;
        if body.max_order > 20 || body.total_frames == 0 || !body.total_frames.is_multiple_of(1 << body.max_order) {
            return Err(MmError::CorruptSnapshot("bad pool geometry".into()));
        }
        let mut free = vec![BTreeSet::new(); body.max_order as usize + 1];
        for f in body.free {
            if f.order > body.max_order {
                return Err(MmError::CorruptSnapshot(format!("free block order {}", f.order)));
            }
            free[f.order as usize].insert(f.pfn);
        }
        let mut allocated = BTreeMap::new();
        for a in body.allocated {
            allocated.insert(a.pfn, (a.order, a.owner));
        }
        let b = Buddy {
            total_frames: body.total_frames,
            max_order: body.max_order,
            free,
            allocated,
            pinned: body.pinned.into_iter().collect(),
        };
        b.audit().map_err(MmError::CorruptSnapshot)?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Buddy {
        let mut b = Buddy::new(1 << 14, 10);
        b.fragment_to(0.6, 7).unwrap();
        b.alloc_block(3, Owner::PageTable).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = sample();
        let bytes = b.snapshot_bytes();
        let back = Buddy::from_snapshot(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.fmfi(), b.fmfi());
        assert_eq!(back.snapshot_bytes(), bytes);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = sample().snapshot_bytes();
        assert_eq!(Buddy::from_snapshot(&bytes[..bytes.len() / 2]), Err(MmError::ChecksumMismatch));
    }

    #[test]
    fn tampered_body_fails_checksum() {
        let text = String::from_utf8(Buddy::new(1024, 10).snapshot_bytes()).unwrap();
        let tampered = text.replace("\"total_frames\":1024", "\"total_frames\":2048");
        assert_ne!(text, tampered);
        assert_eq!(Buddy::from_snapshot(tampered.as_bytes()), Err(MmError::ChecksumMismatch));
    }

    #[test]
    fn version_mismatch_detected() {
        let mut doc: Value = serde_json::from_slice(&Buddy::new(1024, 10).snapshot_bytes()).unwrap();
        let obj = doc.as_object_mut().unwrap();
        obj.remove("crc32");
        obj.insert("version".into(), 2.into());
        let crc = checksum(&doc);
        doc.as_object_mut().unwrap().insert("crc32".into(), crc.into());
        assert_eq!(
            Buddy::from_snapshot(doc.to_string().as_bytes()),
            Err(MmError::SchemaVersionMismatch { found: 2 })
        );
    }
}

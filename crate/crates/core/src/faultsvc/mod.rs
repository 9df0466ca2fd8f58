//! Page-fault and VMA-event handling: the action vocabulary, the query
//! channel back into the simulator, in-process policies, and the `vfault/1`
//! session with an external handler.

mod external;
mod policy;
pub mod protocol;
mod serve;

use serde::{Deserialize, Serialize};

pub use external::ExternalHandler;
pub use policy::PolicyHandler;
pub use serve::{serve, serve_tcp, ServeOptions};

use crate::addr::{PageSize, Pid, PAGE_SHIFT};
use crate::memhier::MEMMAP_BASE;
use crate::memmgr::FragmentationReport;
use crate::trace::{Access, AllocHint};

pub const PROTO: &str = "vfault/1";

#[derive(Debug, thiserror::Error)]
pub enum FaultError {
    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: usize, reason: String },
    #[error("handler did not answer within {0} ms")]
    Timeout(u64),
    #[error("handler requested kill: {0}")]
    KillRequested(String),
    #[error("handler speaks {0}, expected vfault/1")]
    VersionMismatch(String),
    #[error("cannot reach handler: {0}")]
    ConnectFailed(String),
    #[error("handler I/O: {0}")]
    Io(String),
}

impl FaultError {
    pub(crate) fn protocol(reason: impl Into<String>) -> Self {
        FaultError::Protocol { offset: 0, reason: reason.into() }
    }
}

pub(crate) mod hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad hex address `{s}`")))
    }

    pub fn parse(s: &str) -> Option<u64> {
        u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&format!("{x:#x}"))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| super::parse(s).ok_or_else(|| serde::de::Error::custom(format!("bad hex address `{s}`"))))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestContext {
    Fault { va: u64, access: Access },
    VmaAlloc { base: u64, len: u64, hint: AllocHint },
    VmaFree { base: u64, len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultRequest {
    pub id: u64,
    pub pid: Pid,
    pub cycle: u64,
    pub context: RequestContext,
}

/// A state change the handler asks the simulator to apply. Page numbers
/// are always in 4 KiB units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Map { vpn: u64, pfn: u64, size: PageSize },
    Unmap { vpn: u64, size: PageSize },
    Reserve {
        #[serde(with = "hex")]
        va_2m: u64,
        pfn_block: u64,
    },
    Promote {
        #[serde(with = "hex")]
        va_2m: u64,
        pfn_block: u64,
    },
    FillRestseg { vpn: u64, set: u64, way: u64 },
    AddRange {
        #[serde(with = "hex")]
        vbase: u64,
        #[serde(with = "hex")]
        vlimit: u64,
        offset: i64,
    },
    Kill { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultResponse {
    pub re: u64,
    pub actions: Vec<Action>,
    pub handler_cycles: u64,
    /// Kernel memory lines the handler touched.
    pub touches: Vec<u64>,
}

/// Synchronous questions a handler may ask while serving a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum HandlerQuery {
    AllocBlock { order: u32 },
    AllocContig { frames: u64 },
    FreeBlock { pfn: u64, order: u32 },
    ReadPte { pid: u32, vpn: u64 },
    Frag {},
    RestsegSlot { pid: u32, vpn: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryReply {
    Pfn(u64),
    Blocks(Vec<(u64, u32)>),
    Ok,
    Pte(Option<(u64, PageSize)>),
    Frag(FragmentationReport),
    Slot(Option<(u64, u64)>),
    Error(String),
}

/// The simulator side of the query channel.
pub trait QueryPort {
    fn alloc_block(&mut self, order: u32) -> Result<u64, String>;
    fn alloc_contig(&mut self, frames: u64) -> Result<Vec<(u64, u32)>, String>;
    /// Frees `2^order` frames at `pfn`, splitting a larger grant if needed.
    fn free_block(&mut self, pfn: u64, order: u32) -> Result<(), String>;
    fn read_pte(&mut self, pid: Pid, vpn: u64) -> Option<(u64, PageSize)>;
    fn frag(&mut self) -> FragmentationReport;
    fn restseg_slot(&mut self, pid: Pid, vpn: u64) -> Option<(u64, u64)>;
}

/// Answers `q` against `port`.
pub fn answer(port: &mut dyn QueryPort, q: &HandlerQuery) -> QueryReply {
    match *q {
        HandlerQuery::AllocBlock { order } => port.alloc_block(order).map_or_else(QueryReply::Error, QueryReply::Pfn),
        HandlerQuery::AllocContig { frames } => port.alloc_contig(frames).map_or_else(QueryReply::Error, QueryReply::Blocks),
        HandlerQuery::FreeBlock { pfn, order } => port.free_block(pfn, order).map_or_else(QueryReply::Error, |_| QueryReply::Ok),
        HandlerQuery::ReadPte { pid, vpn } => QueryReply::Pte(port.read_pte(Pid(pid), vpn)),
        HandlerQuery::Frag {} => QueryReply::Frag(port.frag()),
        HandlerQuery::RestsegSlot { pid, vpn } => QueryReply::Slot(port.restseg_slot(Pid(pid), vpn)),
    }
}

/// Serves fault and VMA requests, in process or over the wire.
pub trait Handler {
    fn handle(&mut self, req: &FaultRequest, port: &mut dyn QueryPort) -> Result<FaultResponse, FaultError>;

    /// Smallest id the next request may use. External sessions share the
    /// id space with handler queries.
    fn next_id_floor(&self) -> u64 {
        0
    }

    /// Ends the session; the default does nothing.
    fn close(&mut self) {}
}

/// Handler cost model: the first action is covered by the base cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultCosts {
    pub base: u64,
    pub per_action: u64,
}

impl FaultCosts {
    pub fn cycles(&self, actions: usize) -> u64 {
        self.base + self.per_action * (actions as u64).saturating_sub(1)
    }
}

/// Kernel line describing frame `pfn`.
pub fn frame_descriptor(pfn: u64) -> u64 {
    MEMMAP_BASE + pfn * 64
}

pub(crate) fn vpn4k(va: u64) -> u64 {
    va >> PAGE_SHIFT
}

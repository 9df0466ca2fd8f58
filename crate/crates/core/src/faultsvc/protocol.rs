//! `vfault/1` wire format: one JSON object per line.
//!
//! ```text
//! {"id":1,"type":"fault","pid":1,"vpn":291,"va":"0x123000","access":"W","cycle":100}
//! {"id":2,"type":"query","op":"alloc_block","order":9}
//! {"re":2,"pfn":512}
//! {"re":1,"type":"fault_done","actions":[{"op":"map","vpn":291,"pfn":0,"size":"4K"}],"handler_cycles":1500,"touches":["0x7f000"]}
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{hex, Action, FaultError, FaultRequest, FaultResponse, HandlerQuery, QueryReply, RequestContext};
use crate::addr::{PageSize, Pid};
use crate::memmgr::FragmentationReport;
use crate::trace::{Access, AllocHint};

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { proto: String, config_digest: Option<String>, restseg: Option<bool> },
    Request(FaultRequest),
    Query { id: u64, query: HandlerQuery },
    Reply { re: u64, reply: QueryReply },
    Done(FaultResponse),
    Bye,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireHello {
    #[serde(rename = "type")]
    ty: String,
    proto: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    restseg: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireFault {
    id: u64,
    #[serde(rename = "type")]
    ty: String,
    pid: u32,
    vpn: u64,
    #[serde(with = "hex")]
    va: u64,
    access: Access,
    cycle: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireVmaAlloc {
    id: u64,
    #[serde(rename = "type")]
    ty: String,
    pid: u32,
    #[serde(with = "hex")]
    base: u64,
    len: u64,
    hint: AllocHint,
    cycle: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireVmaFree {
    id: u64,
    #[serde(rename = "type")]
    ty: String,
    pid: u32,
    #[serde(with = "hex")]
    base: u64,
    len: u64,
    cycle: u64,
}

#[derive(Serialize, Deserialize)]
struct WireQuery {
    id: u64,
    #[serde(rename = "type")]
    ty: String,
    #[serde(flatten)]
    query: HandlerQuery,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDone {
    re: u64,
    #[serde(rename = "type")]
    ty: String,
    actions: Vec<Action>,
    handler_cycles: u64,
    #[serde(with = "hex::vec")]
    touches: Vec<u64>,
}

#[derive(Serialize)]
struct WireReply {
    re: u64,
    #[serde(flatten)]
    body: Map<String, Value>,
}

fn reply_body(r: &QueryReply) -> Value {
    match r {
        QueryReply::Pfn(p) => json!({ "pfn": p }),
        QueryReply::Blocks(b) => json!({ "blocks": b }),
        QueryReply::Ok => json!({ "ok": true }),
        QueryReply::Pte(None) => json!({ "pte": null }),
        QueryReply::Pte(Some((pfn, size))) => json!({ "pte": { "pfn": pfn, "size": size } }),
        QueryReply::Frag(f) => json!({ "fmfi": f.fmfi, "free_frames_per_order": f.free_frames_per_order }),
        QueryReply::Slot(None) => json!({ "slot": null }),
        QueryReply::Slot(Some((set, way))) => json!({ "slot": { "set": set, "way": way } }),
        QueryReply::Error(e) => json!({ "error": e }),
    }
}

/// Serializes one message, newline included.
pub fn encode(msg: &Message) -> String {
    let s = match msg {
        Message::Hello { proto, config_digest, restseg } => serde_json::to_string(&WireHello {
            ty: "hello".into(),
            proto: proto.clone(),
            config_digest: config_digest.clone(),
            restseg: *restseg,
        }),
        Message::Request(r) => match r.context {
            RequestContext::Fault { va, access } => serde_json::to_string(&WireFault {
                id: r.id,
                ty: "fault".into(),
                pid: r.pid.0,
                vpn: super::vpn4k(va),
                va,
                access,
                cycle: r.cycle,
            }),
            RequestContext::VmaAlloc { base, len, hint } => serde_json::to_string(&WireVmaAlloc {
                id: r.id,
                ty: "vma_alloc".into(),
                pid: r.pid.0,
                base,
                len,
                hint,
                cycle: r.cycle,
            }),
            RequestContext::VmaFree { base, len } => serde_json::to_string(&WireVmaFree {
                id: r.id,
                ty: "vma_free".into(),
                pid: r.pid.0,
                base,
                len,
                cycle: r.cycle,
            }),
        },
        Message::Query { id, query } => serde_json::to_string(&WireQuery { id: *id, ty: "query".into(), query: query.clone() }),
        Message::Reply { re, reply } => {
            let Value::Object(body) = reply_body(reply) else { unreachable!("reply bodies are objects") };
            serde_json::to_string(&WireReply { re: *re, body })
        }
        Message::Done(d) => serde_json::to_string(&WireDone {
            re: d.re,
            ty: "fault_done".into(),
            actions: d.actions.clone(),
            handler_cycles: d.handler_cycles,
            touches: d.touches.clone(),
        }),
        Message::Bye => Ok(r#"{"type":"bye"}"#.to_string()),
    };
    let mut s = s.expect("wire structs serialize");
    s.push('\n');
    s
}

fn syntax(e: &serde_json::Error, line: &str) -> FaultError {
    // Column is 1-based and counts bytes on a single-line message.
    let offset = e.column().saturating_sub(1).min(line.len());
    FaultError::Protocol { offset, reason: e.to_string() }
}

fn typed<T: for<'de> Deserialize<'de>>(v: Value, line: &str) -> Result<T, FaultError> {
    serde_json::from_value(v).map_err(|e| FaultError::Protocol { offset: 0, reason: format!("{e} in `{}`", line.trim_end()) })
}

fn decode_reply(re: u64, mut body: Map<String, Value>) -> Result<QueryReply, FaultError> {
    if body.len() != 1 && !(body.len() == 2 && body.contains_key("fmfi")) {
        return Err(FaultError::protocol("reply must carry exactly one result field"));
    }
    let bad = |what: &str| FaultError::protocol(format!("reply {re}: malformed `{what}`"));
    if let Some(v) = body.remove("pfn") {
        return v.as_u64().map(QueryReply::Pfn).ok_or_else(|| bad("pfn"));
    }
    if let Some(v) = body.remove("blocks") {
        return serde_json::from_value(v).map(QueryReply::Blocks).map_err(|_| bad("blocks"));
    }
    if let Some(v) = body.remove("ok") {
        return (v == Value::Bool(true)).then_some(QueryReply::Ok).ok_or_else(|| bad("ok"));
    }
    if let Some(v) = body.remove("error") {
        return v.as_str().map(|s| QueryReply::Error(s.to_string())).ok_or_else(|| bad("error"));
    }
    if let Some(v) = body.remove("pte") {
        if v.is_null() {
            return Ok(QueryReply::Pte(None));
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct P {
            pfn: u64,
            size: PageSize,
        }
        let p: P = serde_json::from_value(v).map_err(|_| bad("pte"))?;
        return Ok(QueryReply::Pte(Some((p.pfn, p.size))));
    }
    if let Some(v) = body.remove("slot") {
        if v.is_null() {
            return Ok(QueryReply::Slot(None));
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct S {
            set: u64,
            way: u64,
        }
        let s: S = serde_json::from_value(v).map_err(|_| bad("slot"))?;
        return Ok(QueryReply::Slot(Some((s.set, s.way))));
    }
    if body.contains_key("fmfi") {
        let f: FragmentationReport = serde_json::from_value(Value::Object(body)).map_err(|_| bad("frag"))?;
        return Ok(QueryReply::Frag(f));
    }
    Err(FaultError::protocol(format!("reply {re}: unknown result field")))
}

/// Parses one line (trailing newline optional).
pub fn decode(line: &str) -> Result<Message, FaultError> {
    let v: Value = serde_json::from_str(line).map_err(|e| syntax(&e, line))?;
    let Value::Object(mut obj) = v else {
        return Err(FaultError::protocol("message is not a JSON object"));
    };
    let ty = obj.get("type").and_then(Value::as_str).map(str::to_string);
    let Some(ty) = ty else {
        let re = obj.remove("re").and_then(|v| v.as_u64()).ok_or_else(|| FaultError::protocol("message has neither `type` nor `re`"))?;
        return Ok(Message::Reply { re, reply: decode_reply(re, obj)? });
    };
    let v = Value::Object(obj);
    Ok(match ty.as_str() {
        "hello" => {
            let h: WireHello = typed(v, line)?;
            Message::Hello { proto: h.proto, config_digest: h.config_digest, restseg: h.restseg }
        }
        "fault" => {
            let f: WireFault = typed(v, line)?;
            if f.vpn != super::vpn4k(f.va) {
                return Err(FaultError::protocol(format!("fault {}: vpn does not match va", f.id)));
            }
            Message::Request(FaultRequest {
                id: f.id,
                pid: Pid(f.pid),
                cycle: f.cycle,
                context: RequestContext::Fault { va: f.va, access: f.access },
            })
        }
        "vma_alloc" => {
            let f: WireVmaAlloc = typed(v, line)?;
            Message::Request(FaultRequest {
                id: f.id,
                pid: Pid(f.pid),
                cycle: f.cycle,
                context: RequestContext::VmaAlloc { base: f.base, len: f.len, hint: f.hint },
            })
        }
        "vma_free" => {
            let f: WireVmaFree = typed(v, line)?;
            Message::Request(FaultRequest {
                id: f.id,
                pid: Pid(f.pid),
                cycle: f.cycle,
                context: RequestContext::VmaFree { base: f.base, len: f.len },
            })
        }
        "query" => {
            let q: WireQuery = typed(v, line)?;
            Message::Query { id: q.id, query: q.query }
        }
        "fault_done" => {
            let d: WireDone = typed(v, line)?;
            Message::Done(FaultResponse { re: d.re, actions: d.actions, handler_cycles: d.handler_cycles, touches: d.touches })
        }
        "bye" => Message::Bye,
        other => return Err(FaultError::protocol(format!("unknown message type `{other}`"))),
    })
}

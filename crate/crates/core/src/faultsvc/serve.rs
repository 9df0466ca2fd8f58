//! Reference external handler: serves an in-process policy over a
//! `vfault/1` stream, asking its queries over the wire.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use super::protocol::{decode, encode, Message};
use super::{FaultCosts, FaultError, Handler, HandlerQuery, PolicyHandler, QueryPort, QueryReply};
use crate::addr::{PageSize, Pid};
use crate::config::MmPolicy;
use crate::memmgr::FragmentationReport;

/// How the served policy is set up.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub policy: MmPolicy,
    pub costs: FaultCosts,
    pub promote_threshold: f64,
    /// Protocol string sent back in the hello (tests use a wrong one).
    pub proto: String,
}

struct Wire<'a, R, W> {
    input: &'a mut R,
    output: &'a mut W,
    next_id: u64,
    error: Option<FaultError>,
}

impl<R: BufRead, W: Write> Wire<'_, R, W> {
    fn read(&mut self) -> Result<Option<Message>, FaultError> {
        let mut line = String::new();
        match self.input.read_line(&mut line) {
            Ok(0) => Ok(None),
            Ok(_) => decode(&line).map(Some),
            Err(e) => Err(FaultError::Io(e.to_string())),
        }
    }

    fn write(&mut self, m: &Message) -> Result<(), FaultError> {
        self.output.write_all(encode(m).as_bytes()).and_then(|_| self.output.flush()).map_err(|e| FaultError::Io(e.to_string()))
    }

    fn ask(&mut self, query: HandlerQuery) -> Option<QueryReply> {
        if self.error.is_some() {
            return None;
        }
        let id = self.next_id;
        self.next_id += 1;
        let r = self.write(&Message::Query { id, query }).and_then(|_| self.read());
        match r {
            Ok(Some(Message::Reply { re, reply })) if re == id => Some(reply),
            Ok(other) => {
                self.error = Some(FaultError::protocol(format!("expected reply {id}, got {other:?}")));
                None
            }
            Err(e) => {
                self.error = Some(e);
                None
            }
        }
    }
}

impl<R: BufRead, W: Write> QueryPort for Wire<'_, R, W> {
    fn alloc_block(&mut self, order: u32) -> Result<u64, String> {
        match self.ask(HandlerQuery::AllocBlock { order }) {
            Some(QueryReply::Pfn(p)) => Ok(p),
            Some(QueryReply::Error(e)) => Err(e),
            _ => Err("no reply".into()),
        }
    }

    fn alloc_contig(&mut self, frames: u64) -> Result<Vec<(u64, u32)>, String> {
        match self.ask(HandlerQuery::AllocContig { frames }) {
            Some(QueryReply::Blocks(b)) => Ok(b),
            Some(QueryReply::Error(e)) => Err(e),
            _ => Err("no reply".into()),
        }
    }

    fn free_block(&mut self, pfn: u64, order: u32) -> Result<(), String> {
        match self.ask(HandlerQuery::FreeBlock { pfn, order }) {
            Some(QueryReply::Ok) => Ok(()),
            Some(QueryReply::Error(e)) => Err(e),
            _ => Err("no reply".into()),
        }
    }

    fn read_pte(&mut self, pid: Pid, vpn: u64) -> Option<(u64, PageSize)> {
        match self.ask(HandlerQuery::ReadPte { pid: pid.0, vpn }) {
            Some(QueryReply::Pte(p)) => p,
            _ => None,
        }
    }

    fn frag(&mut self) -> FragmentationReport {
        match self.ask(HandlerQuery::Frag {}) {
            Some(QueryReply::Frag(f)) => f,
            _ => FragmentationReport { fmfi: 0.0, free_frames_per_order: Vec::new() },
        }
    }

    fn restseg_slot(&mut self, pid: Pid, vpn: u64) -> Option<(u64, u64)> {
        match self.ask(HandlerQuery::RestsegSlot { pid: pid.0, vpn }) {
            Some(QueryReply::Slot(s)) => s,
            _ => None,
        }
    }
}

/// Serves one session until `bye` or end of input.
pub fn serve<R: BufRead, W: Write>(mut input: R, mut output: W, opts: &ServeOptions) -> Result<(), FaultError> {
    let mut wire = Wire { input: &mut input, output: &mut output, next_id: 1, error: None };
    let restseg = match wire.read()? {
        Some(Message::Hello { restseg, .. }) => restseg.unwrap_or(false),
        Some(other) => return Err(FaultError::protocol(format!("expected hello, got {other:?}"))),
        None => return Ok(()),
    };
    wire.write(&Message::Hello { proto: opts.proto.clone(), config_digest: None, restseg: None })?;
    let mut handler = PolicyHandler::new(opts.policy, opts.costs, opts.promote_threshold, restseg);
    loop {
        let req = match wire.read()? {
            Some(Message::Request(r)) => r,
            Some(Message::Bye) | None => return Ok(()),
            Some(other) => return Err(FaultError::protocol(format!("unexpected message {other:?}"))),
        };
        wire.next_id = wire.next_id.max(req.id + 1);
        let resp = handler.handle(&req, &mut wire)?;
        if let Some(e) = wire.error.take() {
            return Err(e);
        }
        wire.write(&Message::Done(resp))?;
    }
}

/// Binds `addr`, prints the bound address on stdout, and serves one
/// connection.
pub fn serve_tcp(addr: &str, opts: &ServeOptions) -> Result<(), FaultError> {
    let listener = TcpListener::bind(addr).map_err(|e| FaultError::ConnectFailed(format!("{addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| FaultError::Io(e.to_string()))?;
    println!("listening on {local}");
    std::io::stdout().flush().ok();
    let (stream, _) = listener.accept().map_err(|e| FaultError::Io(e.to_string()))?;
    stream.set_nodelay(true).ok();
    let read = stream.try_clone().map_err(|e| FaultError::Io(e.to_string()))?;
    serve(BufReader::new(read), stream, opts)
}

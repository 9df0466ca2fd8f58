//! Client side of a `vfault/1` session with an out-of-process handler.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{decode, encode, Message};
use super::{answer, FaultError, FaultRequest, FaultResponse, Handler, QueryPort, PROTO};
use crate::config::Endpoint;

pub struct ExternalHandler {
    writer: Option<Box<dyn Write + Send>>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    timeout_ms: u64,
    last_id: u64,
    /// Set once the session has failed; the child is then killed, not awaited.
    broken: bool,
}

/// How long a handler may take to exit after `bye`.
const EXIT_GRACE: Duration = Duration::from_secs(2);

fn spawn_reader<R: Read + Send + 'static>(r: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(r).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl ExternalHandler {
    /// Opens the transport and performs the hello exchange.
    pub fn connect(endpoint: &Endpoint, config_digest: &str, restseg: bool, timeout_ms: u64) -> Result<Self, FaultError> {
        let (writer, lines, child): (Box<dyn Write + Send>, _, _) = match endpoint {
            Endpoint::Exec(cmd) => {
                let mut parts = cmd.split_whitespace();
                let prog = parts.next().ok_or_else(|| FaultError::ConnectFailed("empty command".into()))?;
                let mut child = Command::new(prog)
                    .args(parts)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| FaultError::ConnectFailed(format!("{cmd}: {e}")))?;
                let stdin = child.stdin.take().expect("piped");
                let stdout = child.stdout.take().expect("piped");
                (Box::new(stdin), spawn_reader(stdout), Some(child))
            }
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(|e| FaultError::ConnectFailed(format!("{addr}: {e}")))?
                    .next()
                    .ok_or_else(|| FaultError::ConnectFailed(format!("{addr}: no address")))?;
                let stream = TcpStream::connect_timeout(&sock, Duration::from_millis(timeout_ms.max(1)))
                    .map_err(|e| FaultError::ConnectFailed(format!("{addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let read = stream.try_clone().map_err(|e| FaultError::ConnectFailed(e.to_string()))?;
                (Box::new(stream), spawn_reader(read), None)
            }
            Endpoint::InProc(_) => return Err(FaultError::ConnectFailed("in-process endpoint has no session".into())),
        };
        let mut h = ExternalHandler { writer: Some(writer), lines, child, timeout_ms, last_id: 0, broken: true };
        let hello = Message::Hello { proto: PROTO.into(), config_digest: Some(config_digest.into()), restseg: Some(restseg) };
        h.send(&hello).map_err(|e| FaultError::ConnectFailed(e.to_string()))?;
        match h.recv() {
            Ok(Message::Hello { proto, .. }) if proto == PROTO => {
                h.broken = false;
                Ok(h)
            }
            Ok(Message::Hello { proto, .. }) => Err(FaultError::VersionMismatch(proto)),
            Ok(other) => Err(FaultError::protocol(format!("expected hello, got {other:?}"))),
            Err(FaultError::Io(e)) => Err(FaultError::ConnectFailed(e)),
            Err(e) => Err(e),
        }
    }

    fn send(&mut self, m: &Message) -> Result<(), FaultError> {
        let w = self.writer.as_mut().ok_or_else(|| FaultError::Io("session closed".into()))?;
        w.write_all(encode(m).as_bytes()).and_then(|_| w.flush()).map_err(|e| FaultError::Io(e.to_string()))
    }

    fn recv(&mut self) -> Result<Message, FaultError> {
        match self.lines.recv_timeout(Duration::from_millis(self.timeout_ms)) {
            Ok(Ok(line)) => decode(&line),
            Ok(Err(e)) => Err(FaultError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(FaultError::Timeout(self.timeout_ms)),
            Err(RecvTimeoutError::Disconnected) => Err(FaultError::Io("handler closed the connection".into())),
        }
    }
}

impl Handler for ExternalHandler {
    fn handle(&mut self, req: &FaultRequest, port: &mut dyn QueryPort) -> Result<FaultResponse, FaultError> {
        let r = self.exchange(req, port);
        self.broken |= r.is_err();
        r
    }

    fn next_id_floor(&self) -> u64 {
        self.last_id + 1
    }

    fn close(&mut self) {
        if self.writer.is_some() {
            if !self.broken {
                let _ = self.send(&Message::Bye);
            }
            self.writer = None;
        }
        let Some(mut c) = self.child.take() else { return };
        let deadline = Instant::now() + if self.broken { Duration::ZERO } else { EXIT_GRACE };
        while Instant::now() < deadline {
            if let Ok(Some(_)) = c.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = c.kill();
        let _ = c.wait();
    }
}

impl ExternalHandler {
    fn exchange(&mut self, req: &FaultRequest, port: &mut dyn QueryPort) -> Result<FaultResponse, FaultError> {
        self.last_id = self.last_id.max(req.id);
        self.send(&Message::Request(*req))?;
        loop {
            match self.recv()? {
                Message::Query { id, query } => {
                    self.last_id = self.last_id.max(id);
                    let reply = answer(port, &query);
                    self.send(&Message::Reply { re: id, reply })?;
                }
                Message::Done(resp) if resp.re == req.id => return Ok(resp),
                other => return Err(FaultError::protocol(format!("unexpected message while serving request {}: {other:?}", req.id))),
            }
        }
    }
}

impl Drop for ExternalHandler {
    fn drop(&mut self) {
        self.close();
    }
}

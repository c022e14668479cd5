//! Interactive-mode wire protocol. Frame layouts are in `docs/protocol.md`.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{GpParam, GpParamSet, InvocationResult, OutParam, TaInstance};
use crate::vtee::{FileBacking, PauseHook, TeeState, TEE_ERROR_BAD_FORMAT, TEE_ORIGIN_COMMS};

pub const MAGIC: u32 = 0x5441_4D55;
pub const OP_OPEN: u8 = 1;
pub const OP_INVOKE: u8 = 2;
pub const OP_CLOSE: u8 = 3;
pub const OP_RESUME: u8 = 4;
pub const OP_PAUSED: u8 = 0x80;

pub const KIND_NONE: u8 = 0;
pub const KIND_VALUE: u8 = 1;
pub const KIND_MEMREF: u8 = 2;
pub const KIND_SHM: u8 = 3;

/// Largest slot payload accepted; bigger lengths drop the connection.
pub const MAX_PAYLOAD: u32 = 16 << 20;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawSlot {
    pub kind: u8,
    pub payload: Vec<u8>,
}

/// A request frame as read off the wire, before validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub magic: u32,
    pub opcode: u8,
    pub session: u32,
    pub cmd: u32,
    pub param_types: u16,
    pub slots: [RawSlot; 4],
}

impl Request {
    pub fn new(opcode: u8, session: u32, cmd: u32, param_types: u16) -> Self {
        let none = RawSlot {
            kind: KIND_NONE,
            payload: Vec::new(),
        };
        Request {
            magic: MAGIC,
            opcode,
            session,
            cmd,
            param_types,
            slots: [none.clone(), none.clone(), none.clone(), none],
        }
    }

    pub fn with_value(mut self, i: usize, a: u32, b: u32) -> Self {
        let mut p = a.to_le_bytes().to_vec();
        p.extend_from_slice(&b.to_le_bytes());
        self.slots[i] = RawSlot {
            kind: KIND_VALUE,
            payload: p,
        };
        self
    }

    pub fn with_memref(mut self, i: usize, declared: u32, bytes: &[u8]) -> Self {
        let mut p = declared.to_le_bytes().to_vec();
        p.extend_from_slice(bytes);
        self.slots[i] = RawSlot {
            kind: KIND_MEMREF,
            payload: p,
        };
        self
    }

    pub fn with_shm(mut self, i: usize, declared: u32, path: &Path) -> Self {
        let mut p = declared.to_le_bytes().to_vec();
        p.extend_from_slice(path.to_string_lossy().as_bytes());
        self.slots[i] = RawSlot {
            kind: KIND_SHM,
            payload: p,
        };
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic.to_le_bytes());
        out.push(self.opcode);
        out.extend_from_slice(&self.session.to_le_bytes());
        out.extend_from_slice(&self.cmd.to_le_bytes());
        out.extend_from_slice(&self.param_types.to_le_bytes());
        for s in &self.slots {
            out.push(s.kind);
            out.extend_from_slice(&(s.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    /// Reads one frame. `Ok(None)` on clean end of stream.
    pub fn read_from(r: &mut impl Read) -> io::Result<Option<Request>> {
        let mut head = [0u8; 15];
        match r.read_exact(&mut head[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        r.read_exact(&mut head[1..])?;
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let mut slots: [RawSlot; 4] = Default::default();
        for s in slots.iter_mut() {
            let mut sh = [0u8; 5];
            r.read_exact(&mut sh)?;
            let len = u32::from_le_bytes(sh[1..].try_into().unwrap());
            if len > MAX_PAYLOAD {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "slot payload too large"));
            }
            let mut payload = vec![0; len as usize];
            r.read_exact(&mut payload)?;
            *s = RawSlot {
                kind: sh[0],
                payload,
            };
        }
        Ok(Some(Request {
            magic: u32_at(0),
            opcode: head[4],
            session: u32_at(5),
            cmd: u32_at(9),
            param_types: u16::from_le_bytes([head[13], head[14]]),
            slots,
        }))
    }

    /// Converts slots to parameters, opening shared files as needed.
    pub fn params(&self) -> Result<GpParamSet, String> {
        let mut params: [GpParam; 4] = Default::default();
        for (i, s) in self.slots.iter().enumerate() {
            let p = &s.payload;
            params[i] = match s.kind {
                KIND_NONE if p.is_empty() => GpParam::None,
                KIND_VALUE if p.len() == 8 => GpParam::Value {
                    a: u32::from_le_bytes(p[..4].try_into().unwrap()),
                    b: u32::from_le_bytes(p[4..].try_into().unwrap()),
                },
                KIND_MEMREF if p.len() >= 4 => GpParam::Memref {
                    size: u32::from_le_bytes(p[..4].try_into().unwrap()),
                    data: p[4..].to_vec(),
                },
                KIND_SHM if p.len() > 4 => {
                    let path = String::from_utf8(p[4..].to_vec())
                        .map_err(|_| format!("slot {i}: shared path is not UTF-8"))?;
                    let backing = FileBacking::open(Path::new(&path))
                        .map_err(|e| format!("slot {i}: {path}: {e}"))?;
                    GpParam::Shared {
                        size: u32::from_le_bytes(p[..4].try_into().unwrap()),
                        backing: Arc::new(backing),
                    }
                }
                k => return Err(format!("slot {i}: bad kind {k} or payload length {}", p.len())),
            };
        }
        Ok(GpParamSet::new(self.param_types, params))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u32,
    pub origin: u8,
    pub slots: [Vec<u8>; 4],
}

impl Response {
    pub fn error(status: u32) -> Self {
        Response {
            status,
            origin: TEE_ORIGIN_COMMS,
            slots: Default::default(),
        }
    }

    fn from_result(r: &InvocationResult) -> Self {
        let slots = r.out_params.clone().map(|p| match p {
            OutParam::None => Vec::new(),
            OutParam::Value { a, b } => [a.to_le_bytes(), b.to_le_bytes()].concat(),
            OutParam::Memref { data, .. } => data,
        });
        Response {
            status: r.return_code,
            origin: r.return_origin,
            slots,
        }
    }

    /// Session id carried in slot 0 of an open response.
    pub fn session_id(&self) -> Option<u32> {
        Some(u32::from_le_bytes(self.slots[0].get(..4)?.try_into().ok()?))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.status.to_le_bytes().to_vec();
        out.push(self.origin);
        for s in &self.slots {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Response> {
        let mut head = [0u8; 5];
        r.read_exact(&mut head)?;
        let mut slots: [Vec<u8>; 4] = Default::default();
        for s in slots.iter_mut() {
            let mut l = [0u8; 4];
            r.read_exact(&mut l)?;
            let len = u32::from_le_bytes(l);
            if len > MAX_PAYLOAD {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "slot payload too large"));
            }
            *s = vec![0; len as usize];
            r.read_exact(s)?;
        }
        Ok(Response {
            status: u32::from_le_bytes(head[..4].try_into().unwrap()),
            origin: head[4],
            slots,
        })
    }
}

/// Either a response or a pause notification, as seen by a client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerMessage {
    Paused(String),
    Response(Response),
}

impl ServerMessage {
    pub fn read_from(r: &mut impl Read) -> io::Result<ServerMessage> {
        // A pause notice starts with the magic; a response starts with a
        // status word, which never equals it.
        let mut first = [0u8; 4];
        r.read_exact(&mut first)?;
        if u32::from_le_bytes(first) == MAGIC {
            let mut h = [0u8; 3];
            r.read_exact(&mut h)?;
            if h[0] != OP_PAUSED {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "unknown server frame"));
            }
            let mut name = vec![0; u16::from_le_bytes([h[1], h[2]]) as usize];
            r.read_exact(&mut name)?;
            return Ok(ServerMessage::Paused(String::from_utf8_lossy(&name).into_owned()));
        }
        let mut rest = io::Cursor::new(first).chain(r);
        Response::read_from(&mut rest).map(ServerMessage::Response)
    }
}

/// Blocking client for scripting a served TA.
pub struct Client<S> {
    stream: S,
}

impl<S: Read + Write> Client<S> {
    pub fn new(stream: S) -> Self {
        Client { stream }
    }

    pub fn send(&mut self, req: &Request) -> io::Result<()> {
        self.stream.write_all(&req.encode())
    }

    pub fn next_message(&mut self) -> io::Result<ServerMessage> {
        ServerMessage::read_from(&mut self.stream)
    }

    pub fn resume(&mut self) -> io::Result<()> {
        self.send(&Request::new(OP_RESUME, 0, 0, 0))
    }

    /// Sends `req` and waits for its response, resuming through any pauses.
    pub fn call(&mut self, req: &Request) -> io::Result<Response> {
        self.send(req)?;
        loop {
            match self.next_message()? {
                ServerMessage::Response(r) => return Ok(r),
                ServerMessage::Paused(api) => {
                    log::debug!("resuming past {api}");
                    self.resume()?;
                }
            }
        }
    }

    /// Opens a session with no parameters and returns its id.
    pub fn open(&mut self) -> io::Result<u32> {
        let r = self.call(&Request::new(OP_OPEN, 0, 0, 0))?;
        match r.session_id() {
            Some(id) if r.status == crate::vtee::TEE_SUCCESS => Ok(id),
            _ => Err(io::Error::other(format!("open failed: {:#010x}", r.status))),
        }
    }

    pub fn invoke(&mut self, session: u32, cmd: u32, req: Request) -> io::Result<Response> {
        let mut req = req;
        req.opcode = OP_INVOKE;
        req.session = session;
        req.cmd = cmd;
        self.call(&req)
    }

    pub fn close(&mut self, session: u32) -> io::Result<Response> {
        self.call(&Request::new(OP_CLOSE, session, 0, 0))
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

pub fn pause_notice(api: &str) -> Vec<u8> {
    let mut out = MAGIC.to_le_bytes().to_vec();
    out.push(OP_PAUSED);
    out.extend_from_slice(&(api.len() as u16).to_le_bytes());
    out.extend_from_slice(api.as_bytes());
    out
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// APIs at which the TA pauses and the client is notified.
    pub pause_at: BTreeSet<String>,
    /// Object store file, loaded at start and rewritten after each request.
    pub store: Option<std::path::PathBuf>,
}

/// Blocks on the client until it sends a resume frame.
struct ClientPause<'a, S: Read + Write> {
    stream: &'a mut S,
    failed: bool,
}

impl<S: Read + Write> PauseHook for ClientPause<'_, S> {
    fn before_api(&mut self, api: &str, _: &mut TeeState) {
        if self.failed {
            return;
        }
        log::debug!("paused before {api}");
        let ok = self.stream.write_all(&pause_notice(api)).is_ok()
            && loop {
                match Request::read_from(self.stream) {
                    Ok(Some(r)) if r.magic == MAGIC && r.opcode == OP_RESUME => break true,
                    Ok(Some(_)) => {
                        let _ = self
                            .stream
                            .write_all(&Response::error(TEE_ERROR_BAD_FORMAT).encode());
                    }
                    _ => break false,
                }
            };
        if !ok {
            // Client gone: finish the call without further pauses.
            self.failed = true;
        }
    }
}

/// Handles one request and returns the response to send.
fn handle<S: Read + Write>(
    inst: &mut TaInstance,
    req: &Request,
    owned: &mut BTreeSet<u32>,
    stream: &mut S,
) -> Response {
    if req.magic != MAGIC {
        return Response::error(TEE_ERROR_BAD_FORMAT);
    }
    let params = match req.opcode {
        OP_OPEN | OP_INVOKE => match req.params() {
            Ok(p) => p,
            Err(e) => {
                log::warn!("bad request: {e}");
                return Response::error(TEE_ERROR_BAD_FORMAT);
            }
        },
        _ => GpParamSet::empty(),
    };
    let mut pause = ClientPause {
        stream,
        failed: false,
    };
    match req.opcode {
        OP_OPEN => match inst.open_session_with(&params, Some(&mut pause)) {
            Ok((id, r)) => {
                owned.insert(id);
                let mut resp = Response::from_result(&r);
                resp.slots[0] = id.to_le_bytes().to_vec();
                resp
            }
            Err(r) => Response::from_result(&r),
        },
        OP_INVOKE => match inst.invoke_command_with(req.session, req.cmd, &params, Some(&mut pause)) {
            Ok(r) => Response::from_result(&r),
            Err(e) => {
                log::warn!("{e}");
                Response::error(crate::vtee::TEE_ERROR_BAD_PARAMETERS)
            }
        },
        OP_CLOSE => {
            owned.remove(&req.session);
            match inst.close_session(req.session) {
                Ok(r) => Response::from_result(&r),
                Err(_) => Response::error(crate::vtee::TEE_ERROR_BAD_PARAMETERS),
            }
        }
        _ => Response::error(TEE_ERROR_BAD_FORMAT),
    }
}

/// Serves one connected client until it disconnects. Sessions it left
/// open are closed afterwards.
pub fn serve_connection<S: Read + Write>(
    inst: &mut TaInstance,
    config: &ServerConfig,
    stream: &mut S,
) -> io::Result<()> {
    inst.tee.pause_at = config.pause_at.clone();
    let mut owned = BTreeSet::new();
    let result = loop {
        let req = match Request::read_from(stream) {
            Ok(Some(r)) => r,
            Ok(None) => break Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let _ = stream.write_all(&Response::error(TEE_ERROR_BAD_FORMAT).encode());
                break Err(e);
            }
            Err(e) => break Err(e),
        };
        let resp = handle(inst, &req, &mut owned, stream);
        if let Some(path) = &config.store {
            if let Err(e) = std::fs::write(path, inst.tee.store_bytes()) {
                log::warn!("store {}: {e}", path.display());
            }
        }
        if let Err(e) = stream.write_all(&resp.encode()) {
            break Err(e);
        }
    };
    for s in owned {
        let _ = inst.close_session(s);
    }
    result
}

/// Accepts clients one after another, forever.
pub fn serve_unix(inst: &mut TaInstance, config: &ServerConfig, path: &Path) -> io::Result<()> {
    let _ = std::fs::remove_file(path);
    let listener = std::os::unix::net::UnixListener::bind(path)?;
    log::info!("listening on {}", path.display());
    load_store(inst, config);
    for conn in listener.incoming() {
        let mut s = conn?;
        if let Err(e) = serve_connection(inst, config, &mut s) {
            log::warn!("client dropped: {e}");
        }
    }
    Ok(())
}

pub fn serve_tcp(inst: &mut TaInstance, config: &ServerConfig, listener: std::net::TcpListener) -> io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    load_store(inst, config);
    for conn in listener.incoming() {
        let mut s = conn?;
        if let Err(e) = serve_connection(inst, config, &mut s) {
            log::warn!("client dropped: {e}");
        }
    }
    Ok(())
}

fn load_store(inst: &mut TaInstance, config: &ServerConfig) {
    if let Some(path) = &config.store {
        match std::fs::read(path) {
            Ok(bytes) => {
                if let Err(e) = inst.tee.load_store(&bytes) {
                    log::warn!("store {}: {e}", path.display());
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => log::warn!("store {}: {e}", path.display()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let r = Request::new(OP_INVOKE, 3, 7, 0x65)
            .with_memref(0, 4, b"abcd")
            .with_value(1, 1, 2);
        let bytes = r.encode();
        assert_eq!(&bytes[..4], &MAGIC.to_le_bytes());
        let back = Request::read_from(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(back, r);
        let p = back.params().unwrap();
        assert_eq!(p.params[0], GpParam::memref(b"abcd".to_vec()));
        assert_eq!(p.params[1], GpParam::value(1, 2));
    }

    #[test]
    fn declared_size_passes_through() {
        let r = Request::new(OP_INVOKE, 1, 0, 0x5).with_memref(0, 0xFFFF_FFFF, b"x");
        let p = r.params().unwrap();
        assert_eq!(
            p.params[0],
            GpParam::Memref {
                data: b"x".to_vec(),
                size: 0xFFFF_FFFF
            }
        );
    }

    #[test]
    fn server_message_discriminates() {
        let n = pause_notice("TEE_Wait");
        assert_eq!(
            ServerMessage::read_from(&mut n.as_slice()).unwrap(),
            ServerMessage::Paused("TEE_Wait".into())
        );
        let resp = Response::error(TEE_ERROR_BAD_FORMAT);
        assert_eq!(
            ServerMessage::read_from(&mut resp.encode().as_slice()).unwrap(),
            ServerMessage::Response(resp)
        );
    }
}

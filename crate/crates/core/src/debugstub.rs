//! GDB remote serial protocol stub for one TA invocation.
//!
//! The register file is sent as sixteen little-endian 32-bit values,
//! r0 first and pc (r15) last. Breakpoints live in the hook table, so
//! no guest memory is patched.

use std::fmt::Write as _;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use crate::manager::{GpParamSet, InvocationResult, ManagerError, PendingCall, TaInstance};
use crate::outcome::ExecOutcome;

pub const PACKET_SIZE: usize = 0x4000;

pub const TARGET_XML: &str = r#"<?xml version="1.0"?>
<!DOCTYPE target SYSTEM "gdb-target.dtd">
<target version="1.0">
  <feature name="org.taemu.tir32">
    <reg name="r0" bitsize="32"/><reg name="r1" bitsize="32"/>
    <reg name="r2" bitsize="32"/><reg name="r3" bitsize="32"/>
    <reg name="r4" bitsize="32"/><reg name="r5" bitsize="32"/>
    <reg name="r6" bitsize="32"/><reg name="r7" bitsize="32"/>
    <reg name="r8" bitsize="32"/><reg name="r9" bitsize="32"/>
    <reg name="r10" bitsize="32"/><reg name="r11" bitsize="32"/>
    <reg name="r12" bitsize="32"/><reg name="sp" bitsize="32" type="data_ptr"/>
    <reg name="lr" bitsize="32" type="code_ptr"/><reg name="pc" bitsize="32" type="code_ptr"/>
  </feature>
</target>
"#;

pub fn checksum(payload: &[u8]) -> u8 {
    payload.iter().fold(0u8, |a, b| a.wrapping_add(*b))
}

/// `$payload#xx`
pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.push(b'$');
    out.extend_from_slice(payload);
    out.extend_from_slice(format!("#{:02x}", checksum(payload)).as_bytes());
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Incoming {
    Packet(Vec<u8>),
    BadChecksum,
    Ack,
    Nack,
    Interrupt,
}

/// Reads the next protocol element. `Ok(None)` at end of stream.
pub fn read_incoming(r: &mut impl BufRead) -> io::Result<Option<Incoming>> {
    let mut b = [0u8];
    loop {
        if r.read(&mut b)? == 0 {
            return Ok(None);
        }
        match b[0] {
            b'+' => return Ok(Some(Incoming::Ack)),
            b'-' => return Ok(Some(Incoming::Nack)),
            0x03 => return Ok(Some(Incoming::Interrupt)),
            b'$' => break,
            _ => {}
        }
    }
    let mut payload = Vec::new();
    r.read_until(b'#', &mut payload)?;
    if payload.pop() != Some(b'#') {
        return Ok(None);
    }
    let mut sum = [0u8; 2];
    r.read_exact(&mut sum)?;
    let ok = std::str::from_utf8(&sum)
        .ok()
        .and_then(|s| u8::from_str_radix(s, 16).ok())
        .is_some_and(|s| s == checksum(&payload));
    Ok(Some(if ok {
        Incoming::Packet(payload)
    } else {
        Incoming::BadChecksum
    }))
}

/// Parses `$payload#xx` exactly, checksum included.
pub fn decode(frame: &[u8]) -> Option<Vec<u8>> {
    let mut r = frame;
    match read_incoming(&mut r).ok()?? {
        Incoming::Packet(p) if r.is_empty() && frame.first() == Some(&b'$') => Some(p),
        _ => None,
    }
}

fn hex_bytes(data: &[u8]) -> String {
    data.iter().fold(String::with_capacity(data.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn parse_hex_bytes(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn parse_addr_len(s: &str) -> Option<(u32, u32)> {
    let (a, l) = s.split_once(',')?;
    Some((u32::from_str_radix(a, 16).ok()?, u32::from_str_radix(l, 16).ok()?))
}

fn stop_reply(outcome: &ExecOutcome) -> String {
    match outcome {
        ExecOutcome::ReturnedFromEntrypoint => "W00".into(),
        ExecOutcome::BreakpointHit(_) => "S05".into(),
        ExecOutcome::Crash(_) => "S0B".into(),
        // Out of instructions: reported like a timer signal.
        ExecOutcome::BudgetExhausted => "S0E".into(),
    }
}

/// What the connection loop should do after a packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Send(String),
    /// Reply, then close the connection.
    Close(String),
    /// Close without replying.
    Kill,
}

/// A prepared invocation under debugger control.
pub struct DebugTarget {
    pub inst: TaInstance,
    pending: PendingCall,
    last_stop: String,
    result: Option<InvocationResult>,
}

impl DebugTarget {
    /// Opens a session and stops at the first instruction of the
    /// invoke entrypoint for `cmd`.
    pub fn new(mut inst: TaInstance, cmd: u32, params: &GpParamSet) -> Result<DebugTarget, ManagerError> {
        let session = match inst.open_session(&GpParamSet::empty()) {
            Ok((s, _)) => s,
            Err(r) => {
                log::warn!("open session returned {:#010x}", r.return_code);
                return Err(ManagerError::BadHandle(0));
            }
        };
        let pending = inst.begin_invoke(session, cmd, params)?;
        Ok(DebugTarget {
            inst,
            pending,
            last_stop: "S05".into(),
            result: None,
        })
    }

    /// Outcome of the invocation once it has ended.
    pub fn result(&self) -> Option<&InvocationResult> {
        self.result.as_ref()
    }

    fn finish(&mut self, outcome: ExecOutcome) -> String {
        let reply = stop_reply(&outcome);
        if !matches!(outcome, ExecOutcome::BreakpointHit(_)) && self.result.is_none() {
            self.result = Some(self.inst.finish_invoke(&self.pending, outcome));
        }
        self.last_stop = reply.clone();
        reply
    }

    fn resume(&mut self, step: bool) -> String {
        if self.result.is_some() {
            return self.last_stop.clone();
        }
        if step {
            match self.inst.step() {
                Some(o) => self.finish(o),
                None => {
                    self.last_stop = "S05".into();
                    self.last_stop.clone()
                }
            }
        } else {
            let o = self.inst.run(None);
            self.finish(o)
        }
    }

    /// Runs to the end with breakpoints cleared.
    pub fn detach(&mut self) {
        self.inst.hooks.clear_breakpoints();
        if self.result.is_none() {
            let o = self.inst.run(None);
            self.finish(o);
        }
    }

    fn read_registers(&self) -> String {
        self.inst.guest.regs.iter().map(|r| hex_bytes(&r.to_le_bytes())).collect()
    }

    fn write_registers(&mut self, hex: &str) -> Option<()> {
        let bytes = parse_hex_bytes(hex)?;
        if bytes.len() != 64 {
            return None;
        }
        for (i, c) in bytes.chunks(4).enumerate() {
            self.inst.guest.regs[i] = u32::from_le_bytes(c.try_into().unwrap());
        }
        Some(())
    }

    fn features(&self, args: &str) -> String {
        let Some((annex, range)) = args.split_once(':') else {
            return "E00".into();
        };
        let Some((off, len)) = parse_addr_len(range) else {
            return "E00".into();
        };
        if annex != "target.xml" {
            return "E00".into();
        }
        let xml = TARGET_XML.as_bytes();
        let start = (off as usize).min(xml.len());
        let end = (start + len as usize).min(xml.len());
        let chunk = String::from_utf8_lossy(&xml[start..end]);
        if end == xml.len() {
            format!("l{chunk}")
        } else {
            format!("m{chunk}")
        }
    }

    /// Handles one packet payload.
    pub fn handle(&mut self, packet: &str) -> Reply {
        let ok = || Reply::Send("OK".into());
        let err = || Reply::Send("E01".into());
        let Some(cmd) = packet.chars().next() else {
            return Reply::Send(String::new());
        };
        let rest = &packet[cmd.len_utf8()..];
        match cmd {
            '?' => Reply::Send(self.last_stop.clone()),
            'g' => Reply::Send(self.read_registers()),
            'G' => match self.write_registers(rest) {
                Some(()) => ok(),
                None => err(),
            },
            'p' => match usize::from_str_radix(rest, 16).ok().filter(|n| *n < 16) {
                Some(n) => Reply::Send(hex_bytes(&self.inst.guest.regs[n].to_le_bytes())),
                None => err(),
            },
            'P' => {
                let parsed = rest.split_once('=').and_then(|(n, v)| {
                    let n = usize::from_str_radix(n, 16).ok().filter(|n| *n < 16)?;
                    let v = parse_hex_bytes(v).filter(|v| v.len() == 4)?;
                    Some((n, u32::from_le_bytes(v.try_into().unwrap())))
                });
                match parsed {
                    Some((n, v)) => {
                        self.inst.guest.regs[n] = v;
                        ok()
                    }
                    None => err(),
                }
            }
            'm' => match parse_addr_len(rest) {
                Some((a, l)) if (l as usize) <= PACKET_SIZE / 2 => match self.inst.guest.mem.read_vec(a, l) {
                    Ok(data) => Reply::Send(hex_bytes(&data)),
                    Err(_) => err(),
                },
                _ => err(),
            },
            'M' => {
                let parsed = rest.split_once(':').and_then(|(al, data)| {
                    let (a, l) = parse_addr_len(al)?;
                    let data = parse_hex_bytes(data).filter(|d| d.len() == l as usize)?;
                    Some((a, data))
                });
                match parsed {
                    Some((a, data)) if self.inst.guest.mem.write_raw(a, &data).is_ok() => ok(),
                    _ => err(),
                }
            }
            'Z' | 'z' => {
                let mut parts = rest.split(',');
                let (Some(kind), Some(addr)) = (parts.next(), parts.next()) else {
                    return err();
                };
                if kind != "0" {
                    return Reply::Send(String::new());
                }
                let Ok(addr) = u32::from_str_radix(addr, 16) else {
                    return err();
                };
                if cmd == 'Z' {
                    match self.inst.hooks.add_breakpoint(addr) {
                        Ok(()) => ok(),
                        Err(_) => err(),
                    }
                } else {
                    self.inst.hooks.remove_breakpoint(addr);
                    ok()
                }
            }
            'c' => Reply::Send(self.resume(false)),
            's' => Reply::Send(self.resume(true)),
            'D' => {
                self.detach();
                Reply::Close("OK".into())
            }
            'k' => Reply::Kill,
            'H' => ok(),
            'T' => ok(),
            'q' if packet == "qAttached" => Reply::Send("1".into()),
            'q' if packet == "qC" => Reply::Send("QC1".into()),
            'q' if packet == "qfThreadInfo" => Reply::Send("m1".into()),
            'q' if packet == "qsThreadInfo" => Reply::Send("l".into()),
            'q' if packet.starts_with("qSupported") => Reply::Send(format!(
                "PacketSize={PACKET_SIZE:x};qXfer:features:read+;QStartNoAckMode+"
            )),
            'q' if packet.starts_with("qXfer:features:read:") => {
                Reply::Send(self.features(&packet["qXfer:features:read:".len()..]))
            }
            _ => Reply::Send(String::new()),
        }
    }
}

/// Serves one debugger connection until it detaches, kills or hangs up.
pub fn serve<S: Read + Write>(target: &mut DebugTarget, stream: S) -> io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut no_ack = false;
    let mut last_sent: Vec<u8> = Vec::new();
    loop {
        let Some(item) = read_incoming(&mut reader)? else {
            return Ok(());
        };
        let packet = match item {
            Incoming::Ack | Incoming::Interrupt => continue,
            Incoming::Nack => {
                reader.get_mut().write_all(&last_sent)?;
                continue;
            }
            Incoming::BadChecksum => {
                reader.get_mut().write_all(b"-")?;
                continue;
            }
            Incoming::Packet(p) => p,
        };
        let text = String::from_utf8_lossy(&packet).into_owned();
        log::debug!("rsp <- {text}");
        if !no_ack {
            reader.get_mut().write_all(b"+")?;
        }
        let reply = if text == "QStartNoAckMode" {
            Reply::Send("OK".into())
        } else {
            target.handle(&text)
        };
        let (payload, close) = match reply {
            Reply::Send(p) => (p, false),
            Reply::Close(p) => (p, true),
            Reply::Kill => return Ok(()),
        };
        log::debug!("rsp -> {payload}");
        last_sent = frame(payload.as_bytes());
        reader.get_mut().write_all(&last_sent)?;
        reader.get_mut().flush()?;
        if text == "QStartNoAckMode" {
            no_ack = true;
        }
        if close {
            return Ok(());
        }
    }
}

/// Waits for one debugger on `listener` and serves it.
pub fn serve_tcp(target: &mut DebugTarget, listener: &TcpListener) -> io::Result<()> {
    log::info!("waiting for debugger on {}", listener.local_addr()?);
    let (stream, peer) = listener.accept()?;
    log::info!("debugger attached from {peer}");
    stream.set_nodelay(true)?;
    serve(target, stream)
}

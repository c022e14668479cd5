mod common;

use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use proptest::prelude::*;
use taemu::debugstub::{decode, frame, read_incoming, serve_tcp, DebugTarget, Incoming, Reply};
use taemu::manager::{GpParam, GpParamSet};
use taemu::vtee::TEE_SUCCESS;

fn keyinstall_params() -> GpParamSet {
    GpParamSet::new(
        0x0065,
        [
            GpParam::memref(common::key_record(1, 0x1122_3344)),
            GpParam::memref(vec![0; 16]),
            GpParam::None,
            GpParam::None,
        ],
    )
}

fn keyinstall_target() -> DebugTarget {
    DebugTarget::new(common::instance("keyinstall"), 0, &keyinstall_params()).unwrap()
}

fn send(t: &mut DebugTarget, p: &str) -> String {
    match t.handle(p) {
        Reply::Send(s) | Reply::Close(s) => s,
        Reply::Kill => panic!("unexpected kill"),
    }
}

fn le_hex(v: u32) -> String {
    v.to_le_bytes().iter().map(|b| format!("{b:02x}")).collect()
}

fn reg(g: &str, n: usize) -> u32 {
    let b: Vec<u8> = (0..4)
        .map(|i| u8::from_str_radix(&g[n * 8 + i * 2..n * 8 + i * 2 + 2], 16).unwrap())
        .collect();
    u32::from_le_bytes(b.try_into().unwrap())
}

struct Client {
    r: BufReader<TcpStream>,
}

impl Client {
    fn packet(&mut self, p: &str) -> String {
        self.r.get_mut().write_all(&frame(p.as_bytes())).unwrap();
        assert_eq!(read_incoming(&mut self.r).unwrap(), Some(Incoming::Ack));
        match read_incoming(&mut self.r).unwrap() {
            Some(Incoming::Packet(p)) => {
                self.r.get_mut().write_all(b"+").unwrap();
                String::from_utf8(p).unwrap()
            }
            other => panic!("expected packet, got {other:?}"),
        }
    }
}

fn attach(mut target: DebugTarget) -> (Client, thread::JoinHandle<DebugTarget>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        serve_tcp(&mut target, &listener).unwrap();
        target
    });
    let stream = TcpStream::connect(addr).unwrap();
    (Client { r: BufReader::new(stream) }, server)
}

#[test]
fn registers_at_reset_are_zero() {
    let mut t = DebugTarget::new(common::instance("identity"), 0, &GpParamSet::empty()).unwrap();
    // Clear the prepared call so the register file is all zero.
    assert_eq!(send(&mut t, &format!("G{}", "0".repeat(128))), "OK");
    let (mut c, server) = attach(t);
    assert_eq!(c.packet("g"), "0".repeat(128));
    assert_eq!(c.packet("qAttached"), "1");
    assert_eq!(c.packet("vUnknownThing"), "");
    c.r.get_mut().write_all(&frame(b"k")).unwrap();
    server.join().unwrap();
}

#[test]
fn raw_g_frame_bytes() {
    let mut t = DebugTarget::new(common::instance("identity"), 0, &GpParamSet::empty()).unwrap();
    send(&mut t, &format!("G{}", "0".repeat(128)));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || serve_tcp(&mut t, &listener).unwrap());
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(b"$g#67").unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    assert_eq!(read_incoming(&mut r).unwrap(), Some(Incoming::Ack));
    let expect = frame("0".repeat(128).as_bytes());
    assert_eq!(&expect[expect.len() - 3..], b"#00");
    assert_eq!(read_incoming(&mut r).unwrap(), Some(Incoming::Packet(vec![b'0'; 128])));
    // A corrupted checksum is refused.
    s.write_all(b"$g#00").unwrap();
    assert_eq!(read_incoming(&mut r).unwrap(), Some(Incoming::Nack));
    s.write_all(b"$D#44").unwrap();
    assert_eq!(read_incoming(&mut r).unwrap(), Some(Incoming::Ack));
    assert_eq!(read_incoming(&mut r).unwrap(), Some(Incoming::Packet(b"OK".to_vec())));
    server.join().unwrap();
}

#[test]
fn breakpoint_at_entry_then_continue_to_exit() {
    let asm = common::assembly("identity");
    let entry = asm.symbol("invoke").unwrap();
    let mut t = DebugTarget::new(common::instance("identity"), 0, &GpParamSet::empty()).unwrap();
    assert_eq!(reg(&send(&mut t, "g"), 15), entry);
    assert_eq!(send(&mut t, &format!("Z0,{entry:x},4")), "OK");
    assert_eq!(send(&mut t, "?"), "S05");
    assert_eq!(send(&mut t, "c"), "S05");
    assert_eq!(reg(&send(&mut t, "g"), 15), entry);
    assert!(t.result().is_none());
    // Resuming from a reported breakpoint executes past it.
    assert_eq!(send(&mut t, "c"), "W00");
    assert_eq!(t.result().unwrap().return_code, TEE_SUCCESS);
}

#[test]
fn single_step_advances_pc() {
    let asm = common::assembly("keyinstall");
    let entry = asm.symbol("invoke").unwrap();
    let mut t = keyinstall_target();
    assert_eq!(send(&mut t, "s"), "S05");
    assert_eq!(reg(&send(&mut t, "g"), 15), entry + 8);
    assert_eq!(send(&mut t, "p0f"), le_hex(entry + 8));
}

#[test]
fn memory_read_write() {
    let asm = common::assembly("keyinstall");
    let got = asm.symbol("got.msee_ta_printf_va").unwrap();
    let mut t = keyinstall_target();
    let before = send(&mut t, &format!("m{got:x},4"));
    assert_eq!(before.len(), 8);
    assert_eq!(send(&mut t, &format!("M{got:x},4:deadbeef")), "OK");
    assert_eq!(send(&mut t, &format!("m{got:x},4")), "deadbeef");
    assert_eq!(send(&mut t, "m0,4"), "E01");
    assert_eq!(send(&mut t, &format!("M{got:x},4:dead")), "E01");
}

#[test]
fn got_overwrite_from_debugger_diverts_control() {
    let asm = common::assembly("keyinstall");
    let got = asm.symbol("got.msee_ta_printf_va").unwrap();
    let win = asm.symbol("win").unwrap();
    let (mut c, server) = attach(keyinstall_target());
    assert!(c.packet("qSupported:multiprocess+").contains("PacketSize="));
    assert_eq!(c.packet(&format!("Z0,{win:x},4")), "OK");
    assert_eq!(c.packet(&format!("M{got:x},4:{}", le_hex(win))), "OK");
    assert_eq!(c.packet("c"), "S05");
    assert_eq!(reg(&c.packet("g"), 15), win);
    assert_eq!(c.packet(&format!("z0,{win:x},4")), "OK");
    assert_eq!(c.packet("s"), "S05");
    assert_eq!(reg(&c.packet("g"), 0), 0x600D);
    assert_eq!(c.packet("c"), "W00");
    assert_eq!(c.packet("D"), "OK");
    let t = server.join().unwrap();
    // Both printf calls went to `win`, so the copy still ran.
    let r = t.result().unwrap();
    assert_eq!(r.return_code, TEE_SUCCESS);
    assert!(r.log.iter().all(|l| !l.contains("keyinstall:")));
}

#[test]
fn crash_reports_segv() {
    let asm = common::assembly("keyinstall");
    let got = asm.symbol("got.msee_ta_printf_va").unwrap();
    let mut t = keyinstall_target();
    send(&mut t, &format!("M{got:x},4:{}", le_hex(0x4141_4140)));
    assert_eq!(send(&mut t, "c"), "S0B");
    assert!(t.result().unwrap().crashed());
    assert_eq!(send(&mut t, "?"), "S0B");
}

#[test]
fn detach_runs_to_completion() {
    let mut t = keyinstall_target();
    let asm = common::assembly("keyinstall");
    send(&mut t, &format!("Z0,{:x},4", asm.symbol("done").unwrap()));
    assert!(matches!(t.handle("D"), Reply::Close(ref s) if s == "OK"));
    assert_eq!(t.result().unwrap().return_code, TEE_SUCCESS);
}

#[test]
fn target_description() {
    let mut t = keyinstall_target();
    let mut xml = String::new();
    let mut off = 0;
    loop {
        let r = send(&mut t, &format!("qXfer:features:read:target.xml:{off:x},40"));
        xml.push_str(&r[1..]);
        off += r.len() - 1;
        if r.starts_with('l') {
            break;
        }
        assert!(r.starts_with('m'));
    }
    assert_eq!(xml, taemu::debugstub::TARGET_XML);
    assert_eq!(xml.matches("<reg ").count(), 16);
}

#[test]
fn no_ack_mode() {
    let (mut c, server) = attach(keyinstall_target());
    assert_eq!(c.packet("QStartNoAckMode"), "OK");
    c.r.get_mut().write_all(&frame(b"qC")).unwrap();
    assert_eq!(read_incoming(&mut c.r).unwrap(), Some(Incoming::Packet(b"QC1".to_vec())));
    c.r.get_mut().write_all(&frame(b"k")).unwrap();
    server.join().unwrap();
}

proptest! {
    #[test]
    fn framing_round_trips(payload in proptest::collection::vec(any::<u8>().prop_filter("no framing bytes", |b| *b != b'#' && *b != b'$'), 0..200)) {
        let f = frame(&payload);
        prop_assert_eq!(decode(&f), Some(payload.clone()));
        // Any single corrupted checksum digit is rejected.
        let mut bad = f.clone();
        let n = bad.len() - 1;
        bad[n] = if bad[n] == b'0' { b'1' } else { b'0' };
        prop_assert_eq!(decode(&bad), None);
    }
}

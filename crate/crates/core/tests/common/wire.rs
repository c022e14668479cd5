use std::io::Write;
use std::os::unix::net::UnixStream;
use std::thread;

use taemu::manager::server::*;
use taemu::vtee::*;

use super::instance;

pub fn spawn(name: &str, config: ServerConfig) -> (UnixStream, thread::JoinHandle<taemu::manager::TaInstance>) {
    let (client, mut server) = UnixStream::pair().unwrap();
    let mut ta = instance(name);
    let h = thread::spawn(move || {
        let _ = serve_connection(&mut ta, &config, &mut server);
        ta
    });
    (client, h)
}

pub fn call(c: &mut UnixStream, req: &Request) -> Response {
    c.write_all(&req.encode()).unwrap();
    match ServerMessage::read_from(c).unwrap() {
        ServerMessage::Response(r) => r,
        m => panic!("unexpected {m:?}"),
    }
}

pub fn open(c: &mut UnixStream) -> u32 {
    Client::new(c).open().unwrap()
}

/// One TOCTTOU fixture run over the pause protocol; `mutate` rewrites
/// the shared length while the TA sits in `TEE_Wait`.
pub fn tocttou_over_wire(mutate: bool) -> Response {
    let dir = tempfile::tempdir().unwrap();
    let shm = dir.path().join("shm");
    let mut buf = vec![0u8; 128];
    buf[..4].copy_from_slice(&8u32.to_le_bytes());
    std::fs::write(&shm, &buf).unwrap();

    let config = ServerConfig {
        pause_at: ["TEE_Wait".to_string()].into(),
        store: None,
    };
    let (c, h) = spawn("tocttou", config);
    let mut c = Client::new(c);
    let s = c.open().unwrap();
    c.send(&Request::new(OP_INVOKE, s, 0, 0x7).with_shm(0, 128, &shm)).unwrap();
    assert_eq!(c.next_message().unwrap(), ServerMessage::Paused("TEE_Wait".into()));
    if mutate {
        let f = FileBacking::open(&shm).unwrap();
        f.write_at(0, &64u32.to_le_bytes());
    }
    c.resume().unwrap();
    let ServerMessage::Response(r) = c.next_message().unwrap() else {
        panic!("expected response");
    };
    drop(c);
    h.join().unwrap();
    r
}


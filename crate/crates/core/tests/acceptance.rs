//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any FAIL.

mod common;

use std::collections::BTreeSet;
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use common::*;
use taemu::debugstub::{frame, read_incoming, serve_tcp, DebugTarget, Incoming};
use taemu::fuzz::*;
use taemu::greedy::*;
use taemu::manager::*;
use taemu::vtee::*;
use taemu::{CrashClass, ViolationKind};

const GREEDY_CASES: u32 = 200;
const GREEDY_LIMIT: Duration = Duration::from_secs(60);
const ASAN_CASES: u32 = 10_000;
const TOCTTOU_RUNS: usize = 10;
const FUZZ_SEED: u64 = 1;
const FUZZ_MAX_ITERS: u64 = 500_000;
const MIN_EXECS_PER_SEC: f64 = 100.0;
const THROUGHPUT_ITERS: u64 = 20_000;
const LOADER_CASES: u32 = 100;

type Outcome = Result<String, String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn icfg(name: &str) -> Vec<Icfg> {
    let path = format!("{}/fixtures/{name}.icfg", env!("CARGO_MANIFEST_DIR"));
    parse_icfg(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn harness(name: &str) -> HarnessSpec {
    let path = format!("{}/fixtures/{name}.harness", env!("CARGO_MANIFEST_DIR"));
    HarnessSpec::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn c1_greedy_oracle() -> Outcome {
    let start = Instant::now();
    let strategy = (greedy_oracle::icfg_text(), proptest::collection::vec(any::<bool>(), 8));
    runner(GREEDY_CASES)
        .run(&strategy, |(text, pick)| {
            let g = &parse_icfg(&text).unwrap()[0];
            greedy_oracle::check_reachability(g, &pick)?;
            greedy_oracle::check_greedy(g)
        })
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(took < GREEDY_LIMIT, format!("took {took:?}"))?;
    Ok(format!("{GREEDY_CASES}/{GREEDY_CASES} random ICFGs exact, {:.1}s (limit 60s)", took.as_secs_f64()))
}

fn steps(r: &GreedyResult) -> Vec<(String, u32, u32)> {
    r.steps.iter().map(|s| (s.api.clone(), s.gain, s.cumulative)).collect()
}

fn monotone(r: &GreedyResult) -> bool {
    let curve = emit_report(r, ReportFormat::Curve);
    let ys: Vec<f64> = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    ys.windows(2).all(|w| w[0] <= w[1])
}

fn c2_hand_traces() -> Outcome {
    let chain = merge(&icfg("chain"), MergeLevel::Tee);
    let r = greedy_rank(&chain, &ApiUniverse::of(&chain).tee);
    ensure(r.baseline == 0 && r.total == 2, format!("chain baseline {} total {}", r.baseline, r.total))?;
    ensure(steps(&r) == vec![("tee_thing".into(), 2, 2)], format!("chain steps {:?}", steps(&r)))?;
    ensure(monotone(&r), "chain curve not monotone")?;

    let g = &icfg("two_branch")[0];
    let r = greedy_rank(g, &ApiUniverse::of(g).tee);
    let want = vec![("ut_t1".to_string(), 5, 6), ("ut_t2".to_string(), 3, 9)];
    ensure(r.baseline == 1 && steps(&r) == want, format!("two-branch {} {:?}", r.baseline, steps(&r)))?;
    ensure(monotone(&r), "two-branch curve not monotone")?;
    Ok("chain (0 -> tee_thing +2) and two-branch (1 -> ut_t1 +5 -> ut_t2 +3) exact, curves monotone".into())
}

fn c3_asan_oracle() -> Outcome {
    let strategy = proptest::collection::vec(asan_oracle::op(), 1..200);
    runner(ASAN_CASES)
        .run(&strategy, |ops| asan_oracle::run_sequence(&ops))
        .map_err(|e| e.to_string())?;

    use taemu::asan::{AsanHeap, QUARANTINE_DEPTH};
    use taemu::emucore::Memory;
    let (mut h, mut m) = (AsanHeap::new(), Memory::new());
    let p = h.alloc(&mut m, 32, false);
    let q = h.alloc(&mut m, 32, false);
    h.free(&mut m, p).unwrap();
    ensure(h.free(&mut m, p).map_err(|v| v.kind) == Err(ViolationKind::DoubleFree), "double free")?;
    ensure(h.free(&mut m, q + 4).map_err(|v| v.kind) == Err(ViolationKind::InvalidFree), "invalid free")?;
    for _ in 0..QUARANTINE_DEPTH - 1 {
        let x = h.alloc(&mut m, 32, false);
        h.free(&mut m, x).unwrap();
    }
    let uaf = h.is_access_valid(&m, p, 4, false).map_err(|v| v.kind);
    ensure(uaf == Err(ViolationKind::UseAfterFree), format!("uaf at quarantine depth: {uaf:?}"))?;
    Ok(format!("{ASAN_CASES} sequences, 0 divergences; double-free, invalid-free, use-after-free classified"))
}

fn c4_cipher() -> Outcome {
    let mut ta = instance("cipher");
    let s = session(&mut ta);
    let mut rejected = 0;
    for t in 0..=0xFFFFu16 {
        if t == 0x0065 {
            continue;
        }
        let r = ta.invoke_command(s, 0, &GpParamSet::new(t, Default::default())).unwrap();
        ensure(r.return_code == 0xFFFF_0006, format!("types {t:#06x} returned {:#x}", r.return_code))?;
        ensure(r.log == ["bad parameter types!"], format!("types {t:#06x} log {:?}", r.log))?;
        rejected += 1;
    }
    let input: Vec<u8> = (0..200u32).map(|i| (i * 37 + 11) as u8).collect();
    let params = GpParamSet::new(
        0x0065,
        [GpParam::memref(input.clone()), GpParam::memref(vec![0; 256]), GpParam::None, GpParam::None],
    );
    let r = ta.invoke_command(s, 0, &params).unwrap();
    let want: Vec<u8> = input.iter().zip(DEVICE_KEY.iter().cycle()).map(|(a, k)| a ^ k).collect();
    ensure(r.return_code == 0, format!("0x0065 returned {:#x}", r.return_code))?;
    ensure(r.out_params[1].bytes() == &want[..], "0x0065 output is not in XOR key")?;
    Ok(format!("{rejected} other param_types -> 0xFFFF0006 + log; 0x0065 -> 0, out = in XOR key"))
}

fn c5_type_confusion() -> Outcome {
    let got = assembly("keyinstall").symbol("got.msee_ta_printf_va").unwrap();
    let mut ta = instance("keyinstall");
    let s = session(&mut ta);
    let types = param_types(TEE_PARAM_TYPE_MEMREF_INPUT, TEE_PARAM_TYPE_VALUE_INPUT, 0, 0);
    let params = GpParamSet::new(
        types,
        [GpParam::memref(key_record(1, 0x4141_4140)), GpParam::value(got, 4), GpParam::None, GpParam::None],
    );
    let r = ta.invoke_command(s, 0, &params).unwrap();
    let c = r.outcome.crash().ok_or("no crash")?;
    ensure(Triage::of(&c.class) == Triage::Bug, format!("triaged {:?}", Triage::of(&c.class)))?;
    ensure(
        (r.return_code, r.return_origin) == (TEE_ERROR_TARGET_DEAD, TEE_ORIGIN_TEE),
        format!("{:#x}/{}", r.return_code, r.return_origin),
    )?;

    let mut id = instance("identity");
    let s = session(&mut id);
    for t in 0..=0xFFFFu16 {
        let r = id.invoke_command(s, 0, &GpParamSet::new(t, Default::default()));
        let r = r.map_err(|e| format!("types {t:#06x} rejected: {e}"))?;
        ensure(r.return_code == 0 && id.guest.regs[2] == t as u32, format!("types {t:#06x} altered"))?;
    }
    Ok(format!("{} at pc {:#010x}, Bug, TARGET_DEAD/ORIGIN_TEE; all 65536 param_types forwarded", c.class, c.fault_pc))
}

fn c6_tocttou() -> Outcome {
    let dead = |r: &server::Response| (r.status, r.origin) == (TEE_ERROR_TARGET_DEAD, TEE_ORIGIN_TEE);
    let with = (0..TOCTTOU_RUNS).filter(|_| dead(&wire::tocttou_over_wire(true))).count();
    let without = (0..TOCTTOU_RUNS).filter(|_| dead(&wire::tocttou_over_wire(false))).count();
    ensure(with == TOCTTOU_RUNS && without == 0, format!("{with}/10 with, {without}/10 without"))?;
    Ok(format!("violating branch {with}/{TOCTTOU_RUNS} with mutation, {without}/{TOCTTOU_RUNS} without"))
}

fn c7_fuzz_finds_bug() -> Outcome {
    let h = harness("oobwrite");
    let cfg = FuzzConfig {
        stop_on_bug: true,
        ..FuzzConfig::iterations(FUZZ_MAX_ITERS, FUZZ_SEED)
    };
    let r = fuzz_loop(instance("oobwrite"), &h, &cfg).map_err(|e| e.to_string())?;
    let bug = r.crashes.iter().find(|c| c.triage == Triage::Bug).ok_or("no Bug crash")?;
    let ok = matches!(&bug.crash.class, CrashClass::AsanViolation { violation, .. } if violation.kind == ViolationKind::OobWrite);
    ensure(ok, format!("first bug is {}", bug.crash.class))?;

    let mut all = r.crashes.clone();
    let m = fuzz_loop(instance_with("missing_api", ApiRegistry::new()), &harness("single_memref"), &FuzzConfig::iterations(2_000, FUZZ_SEED))
        .map_err(|e| e.to_string())?;
    all.extend(m.crashes.iter().cloned());
    for c in &r.crashes {
        let again = replay(instance("oobwrite"), &h, &c.input).map_err(|e| e.to_string())?.ok_or("skipped")?;
        let key = again.outcome.crash().map(DedupKey::of);
        ensure(key.as_ref() == Some(&c.key), format!("replay of {} gave {key:?}", c.key))?;
    }
    for c in &m.crashes {
        let again = replay(instance_with("missing_api", ApiRegistry::new()), &harness("single_memref"), &c.input)
            .map_err(|e| e.to_string())?
            .ok_or("skipped")?;
        ensure(again.outcome.crash().map(DedupKey::of).as_ref() == Some(&c.key), "missing-api replay")?;
    }
    let bugs = all.iter().filter(|c| c.triage == Triage::Bug).count();
    let missing = all.iter().filter(|c| c.triage == Triage::MissingApi).count();
    ensure(bugs + missing == all.len(), "triage is not a partition")?;
    ensure(
        all.iter().all(|c| (c.triage == Triage::MissingApi) == matches!(c.crash.class, CrashClass::MissingApi(_))),
        "triage disagrees with crash class",
    )?;
    Ok(format!(
        "Bug {} at iteration {} (seed {FUZZ_SEED}); {} crashes replay to their keys; {bugs} bug + {missing} missing-api",
        bug.key,
        bug.iteration,
        all.len()
    ))
}

fn c8_throughput() -> Outcome {
    let r = fuzz_loop(instance("identity"), &HarnessSpec::fixed(0), &FuzzConfig::iterations(THROUGHPUT_ITERS, 1))
        .map_err(|e| e.to_string())?;
    let rate = r.stats.execs_per_sec();
    let line = r.stats.line();
    let reported: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    ensure((reported - rate).abs() <= 0.05, "stats line does not carry the rate")?;
    ensure(rate >= MIN_EXECS_PER_SEC, format!("{rate:.1} execs/s"))?;
    Ok(format!("{rate:.1} execs/s on identity over {THROUGHPUT_ITERS} execs (floor 100); stats: {line}"))
}

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["corpus", "crashes"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let e = e.unwrap();
            out.push((format!("{sub}/{}", e.file_name().to_string_lossy()), std::fs::read(e.path()).unwrap()));
        }
    }
    out.sort();
    out
}

/// The stats file without the wall-clock rate column.
fn stats_without_rate(dir: &std::path::Path) -> String {
    std::fs::read_to_string(dir.join("stats"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(1);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut files = 0;
    for (ta, h) in [("oobwrite", "oobwrite"), ("cipher", "cipher")] {
        let cfg = FuzzConfig::iterations(20_000, 7);
        for run in ["a", "b"] {
            let r = fuzz_loop(instance(ta), &harness(h), &cfg).map_err(|e| e.to_string())?;
            r.write_to(&tmp.path().join(ta).join(run)).unwrap();
        }
        let (a, b) = (tmp.path().join(ta).join("a"), tmp.path().join(ta).join("b"));
        let (ta_files, tb_files) = (read_tree(&a), read_tree(&b));
        ensure(ta_files == tb_files, format!("{ta}: corpus or crash files differ"))?;
        ensure(stats_without_rate(&a) == stats_without_rate(&b), format!("{ta}: stats differ"))?;
        files += ta_files.len() + 1;
    }
    Ok(format!("2 campaign pairs, {files} output files identical (stats compared without the wall-clock rate)"))
}

struct Rsp {
    r: BufReader<TcpStream>,
    frames: usize,
}

impl Rsp {
    fn packet(&mut self, p: &str) -> Result<String, String> {
        self.r.get_mut().write_all(&frame(p.as_bytes())).map_err(|e| e.to_string())?;
        ensure(read_incoming(&mut self.r).map_err(|e| e.to_string())? == Some(Incoming::Ack), "no ack")?;
        match read_incoming(&mut self.r).map_err(|e| e.to_string())? {
            Some(Incoming::Packet(p)) => {
                self.frames += 1;
                self.r.get_mut().write_all(b"+").map_err(|e| e.to_string())?;
                Ok(String::from_utf8_lossy(&p).into_owned())
            }
            other => Err(format!("`{p}` answered with {other:?}")),
        }
    }
}

fn reg(g: &str, n: usize) -> u32 {
    let b: Vec<u8> = (0..4).map(|i| u8::from_str_radix(&g[n * 8 + i * 2..n * 8 + i * 2 + 2], 16).unwrap()).collect();
    u32::from_le_bytes(b.try_into().unwrap())
}

fn le_hex(v: u32) -> String {
    v.to_le_bytes().iter().map(|b| format!("{b:02x}")).collect()
}

fn attach(mut t: DebugTarget) -> (Rsp, thread::JoinHandle<DebugTarget>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let h = thread::spawn(move || {
        serve_tcp(&mut t, &listener).unwrap();
        t
    });
    (Rsp { r: BufReader::new(TcpStream::connect(addr).unwrap()), frames: 0 }, h)
}

fn c10_rsp() -> Outcome {
    let asm = assembly("keyinstall");
    let entry = asm.symbol("invoke").unwrap();
    let got = asm.symbol("got.msee_ta_printf_va").unwrap();
    let win = asm.symbol("win").unwrap();
    let params = GpParamSet::new(
        0x0065,
        [GpParam::memref(key_record(1, 7)), GpParam::memref(vec![0; 16]), GpParam::None, GpParam::None],
    );

    // Breakpoint at the invoke entrypoint.
    let t = DebugTarget::new(instance("keyinstall"), 0, &params).map_err(|e| e.to_string())?;
    let (mut c, h) = attach(t);
    ensure(c.packet("?")? == "S05", "? reply")?;
    let g = c.packet("g")?;
    ensure(g.len() == 128, "g length")?;
    let mut regs: Vec<u32> = (0..16).map(|i| reg(&g, i)).collect();
    regs[9] = 0x1234_5678;
    let g_new: String = regs.iter().map(|r| le_hex(*r)).collect();
    ensure(c.packet(&format!("G{g_new}"))? == "OK", "G")?;
    ensure(reg(&c.packet("g")?, 9) == 0x1234_5678, "G readback")?;
    ensure(c.packet(&format!("Z0,{entry:x},4"))? == "OK", "Z0")?;
    ensure(c.packet("c")? == "S05", "c to entry")?;
    let pc = reg(&c.packet("g")?, 15);
    ensure(pc == entry, format!("stopped at {pc:#x}, entry {entry:#x}"))?;
    ensure(c.packet(&format!("z0,{entry:x},4"))? == "OK", "z0")?;
    ensure(c.packet("s")? == "S05", "s")?;
    ensure(reg(&c.packet("g")?, 15) == entry + 8, "step advanced")?;

    // GOT overwrite diverts the printf call to `win`.
    let before = c.packet(&format!("m{got:x},4"))?;
    ensure(before == le_hex(0xF000_0000), format!("GOT slot holds {before}"))?;
    ensure(c.packet(&format!("M{got:x},4:{}", le_hex(win)))? == "OK", "M")?;
    ensure(c.packet(&format!("m{got:x},4"))? == le_hex(win), "M readback")?;
    ensure(c.packet(&format!("Z0,{win:x},4"))? == "OK", "Z0 win")?;
    ensure(c.packet("c")? == "S05", "c to win")?;
    let g = c.packet("g")?;
    ensure(reg(&g, 15) == win, format!("diverted to {:#x}", reg(&g, 15)))?;
    ensure(c.packet(&format!("z0,{win:x},4"))? == "OK", "z0 win")?;
    ensure(c.packet("s")? == "S05", "s in win")?;
    ensure(reg(&c.packet("g")?, 0) == 0x600D, "win body ran")?;
    ensure(c.packet("D")? == "OK", "D")?;
    let t = h.join().map_err(|_| "stub thread panicked")?;
    let r = t.result().ok_or("no result after detach")?;
    ensure(r.return_code == 0 && r.log.is_empty(), "printf still reached after the overwrite")?;
    Ok(format!(
        "{} frames checksum-verified; stop at entry {entry:#x}; GOT slot {got:#x} -> win {win:#x} diverted",
        c.frames
    ))
}

fn c11_loader() -> Outcome {
    runner(LOADER_CASES)
        .run(&programs::program(), |(imports, src)| programs::check_round_trip(&imports, &src))
        .map_err(|e| e.to_string())?;
    Ok(format!("{LOADER_CASES} random programs byte-identical; every slot i holds 0xF0000000 + 16*i"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("greedy oracle equivalence", c1_greedy_oracle),
        ("hand-trace fixtures", c2_hand_traces),
        ("asan oracle equivalence", c3_asan_oracle),
        ("cipher parameter check", c4_cipher),
        ("type-confusion reproduction", c5_type_confusion),
        ("tocttou reproduction", c6_tocttou),
        ("fuzzing finds the seeded bug", c7_fuzz_finds_bug),
        ("throughput", c8_throughput),
        ("determinism", c9_determinism),
        ("rsp conformance", c10_rsp),
        ("loader round-trip", c11_loader),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = BTreeSet::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || *p == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                println!("criterion {n:2} FAIL  {name}: {why} [{secs:.1}s]");
                failed.insert(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

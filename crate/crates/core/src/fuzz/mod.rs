//! In-process coverage-guided fuzzing over instance snapshots.

pub mod harness;
pub mod mutate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

pub use harness::{CommandRule, HarnessError, HarnessSpec, InitCall, Invocation, SlotTemplate};
pub use mutate::{havoc, Xorshift64};

use crate::emucore::MAP_SIZE;
use crate::manager::{GpParamSet, InstanceSnapshot, InvocationResult, TaInstance};
use crate::outcome::{Crash, CrashClass};

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("open session failed with {0:#010x}")]
    OpenSession(u32),
    #[error("init call {index} crashed: {crash}")]
    InitCrashed { index: usize, crash: Crash },
    #[error(transparent)]
    Manager(#[from] crate::manager::ManagerError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed crash file: {0}")]
    BadCrashFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Triage {
    Bug,
    MissingApi,
}

impl Triage {
    pub fn of(class: &CrashClass) -> Triage {
        if class.is_missing_api() {
            Triage::MissingApi
        } else {
            Triage::Bug
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Triage::Bug => "bug",
            Triage::MissingApi => "missing-api",
        }
    }
}

/// Crash bucket: class tag, faulting pc and a class-specific detail
/// (API name, or API plus violation kind and offset).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DedupKey {
    pub class: &'static str,
    pub fault_pc: u32,
    pub detail: String,
}

impl DedupKey {
    pub fn of(crash: &Crash) -> DedupKey {
        let detail = match &crash.class {
            CrashClass::MissingApi(name) => name.clone(),
            CrashClass::AsanViolation { violation, api } => {
                format!("{api}:{}:{}", violation.kind, violation.offset)
            }
            CrashClass::Panic(code) => format!("{code:#x}"),
            _ => String::new(),
        };
        DedupKey {
            class: crash.class.tag(),
            fault_pc: crash.fault_pc,
            detail,
        }
    }
}

impl fmt::Display for DedupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{:#010x}", self.class, self.fault_pc)?;
        if !self.detail.is_empty() {
            write!(f, ":{}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub crash: Crash,
    pub key: DedupKey,
    pub triage: Triage,
    pub input: Vec<u8>,
    /// Map cells this execution hit that no earlier execution had.
    pub new_cells: usize,
    /// Loop iteration (1-based) that found it.
    pub iteration: u64,
}

impl CrashReport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "class: {}\nkey: {}\ntriage: {}\nfault_pc: {:#010x}\nfault_addr: {:#010x}\nnew_cells: {}\niteration: {}\ninput_len: {}\n\n",
            self.crash.class,
            self.key,
            self.triage.as_str(),
            self.crash.fault_pc,
            self.crash.fault_addr,
            self.new_cells,
            self.iteration,
            self.input.len()
        )
        .into_bytes();
        out.extend_from_slice(&self.input);
        out
    }
}

/// Splits a crash file into its header fields and the raw input.
pub fn parse_crash_file(bytes: &[u8]) -> Result<(BTreeMap<String, String>, Vec<u8>), FuzzError> {
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| FuzzError::BadCrashFile("no header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..sep]).map_err(|_| FuzzError::BadCrashFile("header is not UTF-8".into()))?;
    let mut fields = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| FuzzError::BadCrashFile(format!("bad header line `{line}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok((fields, bytes[sep + 2..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub input: Vec<u8>,
    pub new_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Iterations(u64),
    Seconds(f64),
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub budget: Budget,
    pub seed: u64,
    /// Initial inputs; when empty a zero-filled input is used.
    pub seeds: Vec<Vec<u8>>,
    pub max_len: usize,
    /// End the campaign at the first crash triaged as a bug.
    pub stop_on_bug: bool,
}

impl FuzzConfig {
    pub fn iterations(n: u64, seed: u64) -> Self {
        FuzzConfig {
            budget: Budget::Iterations(n),
            seed,
            seeds: Vec::new(),
            max_len: 4096,
            stop_on_bug: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stats {
    pub iterations: u64,
    pub execs: u64,
    pub elapsed: Duration,
    pub blocks: usize,
    pub crashes_bug: usize,
    pub crashes_missing_api: usize,
}

impl Stats {
    pub const HEADER: &'static str = "execs,execs_per_sec,blocks,crashes_bug,crashes_missing_api";

    pub fn execs_per_sec(&self) -> f64 {
        let s = self.elapsed.as_secs_f64();
        if s > 0.0 {
            self.execs as f64 / s
        } else {
            0.0
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{},{:.1},{},{},{}",
            self.execs,
            self.execs_per_sec(),
            self.blocks,
            self.crashes_bug,
            self.crashes_missing_api
        )
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}\n", Self::HEADER, self.line())
    }
}

#[derive(Debug, Clone)]
pub struct FuzzResult {
    pub corpus: Vec<CorpusEntry>,
    /// First report per dedup key, in discovery order.
    pub crashes: Vec<CrashReport>,
    pub stats: Stats,
    /// Union of runtime blocks over all executions.
    pub blocks: BTreeSet<u32>,
}

impl FuzzResult {
    /// Writes `corpus/id-NNNNNN`, `crashes/crash-NNNN` and `stats`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        let corpus = dir.join("corpus");
        let crashes = dir.join("crashes");
        std::fs::create_dir_all(&corpus)?;
        std::fs::create_dir_all(&crashes)?;
        for (i, e) in self.corpus.iter().enumerate() {
            std::fs::write(corpus.join(format!("id-{i:06}")), &e.input)?;
        }
        for (i, c) in self.crashes.iter().enumerate() {
            std::fs::write(crashes.join(format!("crash-{i:04}")), c.to_bytes())?;
        }
        std::fs::write(dir.join("stats"), self.stats.to_text())
    }
}

/// A TA instance with an open session and the post-init snapshot.
pub struct Fuzzer {
    inst: TaInstance,
    harness: HarnessSpec,
    session: u32,
    snap: InstanceSnapshot,
}

impl Fuzzer {
    /// Opens a session, runs the harness init calls once and snapshots.
    pub fn new(mut inst: TaInstance, harness: HarnessSpec) -> Result<Fuzzer, FuzzError> {
        let session = match inst.open_session(&GpParamSet::empty()) {
            Ok((s, _)) => s,
            Err(r) => return Err(FuzzError::OpenSession(r.return_code)),
        };
        for (index, call) in harness.init.iter().enumerate() {
            let r = inst.invoke_command(session, call.cmd, &call.params)?;
            if let Some(c) = r.outcome.crash() {
                return Err(FuzzError::InitCrashed {
                    index,
                    crash: c.clone(),
                });
            }
        }
        let snap = inst.snapshot();
        Ok(Fuzzer {
            inst,
            harness,
            session,
            snap,
        })
    }

    pub fn instance(&self) -> &TaInstance {
        &self.inst
    }

    pub fn harness(&self) -> &HarnessSpec {
        &self.harness
    }

    /// Runs one input from the snapshot. `None` when the harness skips it.
    /// Coverage of the run is left in the instance's guest.
    pub fn execute(&mut self, input: &[u8]) -> Option<InvocationResult> {
        let inv = self.harness.build_paramset(input)?;
        self.inst.restore(&self.snap);
        match self.inst.invoke_command(self.session, inv.cmd, &inv.params) {
            Ok(r) => Some(r),
            Err(e) => {
                // Only a parameter set too large for the guest gets here.
                log::debug!("input skipped: {e}");
                None
            }
        }
    }
}

/// Runs `input` once from the post-init state.
pub fn replay(inst: TaInstance, harness: &HarnessSpec, input: &[u8]) -> Result<Option<InvocationResult>, FuzzError> {
    Ok(Fuzzer::new(inst, harness.clone())?.execute(input))
}

pub fn fuzz_loop(inst: TaInstance, harness: &HarnessSpec, config: &FuzzConfig) -> Result<FuzzResult, FuzzError> {
    let mut fz = Fuzzer::new(inst, harness.clone())?;
    let mut rng = Xorshift64::new(config.seed);
    let mut seen = vec![false; MAP_SIZE];
    let mut corpus: Vec<CorpusEntry> = Vec::new();
    let mut crashes: Vec<CrashReport> = Vec::new();
    let mut keys = BTreeSet::new();
    let mut blocks = BTreeSet::new();
    let mut stats = Stats::default();

    let seeds = if config.seeds.is_empty() {
        vec![vec![0u8; (harness.min_input_len as usize).max(1)]]
    } else {
        config.seeds.clone()
    };

    let start = Instant::now();
    let done = |stats: &Stats| match config.budget {
        Budget::Iterations(n) => stats.iterations >= n,
        Budget::Seconds(s) => start.elapsed().as_secs_f64() >= s,
    };

    let mut pending_seeds = seeds.iter();
    while !done(&stats) {
        stats.iterations += 1;
        let input = match pending_seeds.next() {
            Some(s) => s.clone(),
            None => {
                let (parent, other) = if corpus.is_empty() {
                    (&seeds[rng.below(seeds.len())], &seeds[rng.below(seeds.len())])
                } else {
                    let n = corpus.len();
                    (&corpus[rng.below(n)].input, &corpus[rng.below(n)].input)
                };
                havoc(&mut rng, parent, other, config.max_len)
            }
        };
        let Some(result) = fz.execute(&input) else {
            continue;
        };
        stats.execs += 1;

        let guest = &fz.inst.guest;
        blocks.extend(guest.blocks_seen().iter().copied());
        let mut new_cells = 0;
        for cell in guest.coverage.hit_cells() {
            if !seen[cell] {
                new_cells += 1;
            }
        }

        if let Some(crash) = result.outcome.crash() {
            let key = DedupKey::of(crash);
            if keys.insert(key.clone()) {
                let triage = Triage::of(&crash.class);
                log::info!("new crash {key} ({})", triage.as_str());
                match triage {
                    Triage::Bug => stats.crashes_bug += 1,
                    Triage::MissingApi => stats.crashes_missing_api += 1,
                }
                crashes.push(CrashReport {
                    crash: crash.clone(),
                    key,
                    triage,
                    input,
                    new_cells,
                    iteration: stats.iterations,
                });
                if config.stop_on_bug && triage == Triage::Bug {
                    break;
                }
            }
        } else if new_cells > 0 {
            for cell in guest.coverage.hit_cells() {
                seen[cell] = true;
            }
            log::debug!("corpus +1 ({new_cells} new cells, {} bytes)", input.len());
            corpus.push(CorpusEntry { input, new_cells });
        }
    }
    stats.elapsed = start.elapsed();
    stats.blocks = blocks.len();
    Ok(FuzzResult {
        corpus,
        crashes,
        stats,
        blocks,
    })
}

/// Runs `jobs` independent campaigns with seeds `seed`, `seed + 1`, ...
pub fn fuzz_parallel<F>(make: F, harness: &HarnessSpec, config: &FuzzConfig, jobs: usize) -> Vec<Result<FuzzResult, FuzzError>>
where
    F: Fn() -> Result<TaInstance, FuzzError> + Sync,
{
    (0..jobs as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(i);
            fuzz_loop(make()?, harness, &c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// Static blocks hit, with the number of inputs that reached each.
    pub hits: BTreeMap<u32, usize>,
    pub total: usize,
}

impl CoverageReport {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.hits.len() as f64 / self.total as f64
        }
    }
}

/// Replays `inputs` and reports which of the TA's static blocks they reach.
pub fn coverage_report(inst: TaInstance, harness: &HarnessSpec, inputs: &[Vec<u8>]) -> Result<CoverageReport, FuzzError> {
    let statics: BTreeSet<u32> = inst.image.blocks.iter().copied().collect();
    let mut fz = Fuzzer::new(inst, harness.clone())?;
    let mut hits = BTreeMap::new();
    for input in inputs {
        if fz.execute(input).is_none() {
            continue;
        }
        for b in fz.inst.guest.blocks_seen().intersection(&statics) {
            *hits.entry(*b).or_insert(0) += 1;
        }
    }
    Ok(CoverageReport {
        hits,
        total: statics.len(),
    })
}

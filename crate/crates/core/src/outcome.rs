//! Execution outcomes shared by the emulator, the virtual TEE and the fuzzer.

use std::fmt;

/// Classes of heap-safety violation reported by the sanitizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    OobRead,
    OobWrite,
    UseAfterFree,
    WildAccess,
    DoubleFree,
    InvalidFree,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::OobRead => "oob-read",
            ViolationKind::OobWrite => "oob-write",
            ViolationKind::UseAfterFree => "use-after-free",
            ViolationKind::WildAccess => "wild-access",
            ViolationKind::DoubleFree => "double-free",
            ViolationKind::InvalidFree => "invalid-free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "oob-read" => ViolationKind::OobRead,
            "oob-write" => ViolationKind::OobWrite,
            "use-after-free" => ViolationKind::UseAfterFree,
            "wild-access" => ViolationKind::WildAccess,
            "double-free" => ViolationKind::DoubleFree,
            "invalid-free" => ViolationKind::InvalidFree,
            _ => return None,
        })
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single sanitizer finding.
///
/// `offset` is the distance from the start of the checked access to the
/// first offending byte (always 0 for free-related violations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Violation {
    pub kind: ViolationKind,
    pub chunk_base: Option<u32>,
    pub offset: u32,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at offset {}", self.kind, self.offset)?;
        if let Some(base) = self.chunk_base {
            write!(f, " (chunk {base:#010x})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CrashClass {
    InvalidMemAccess,
    InvalidInstruction,
    Halt,
    AsanViolation { violation: Violation, api: String },
    MissingApi(String),
    Panic(u32),
}

impl CrashClass {
    /// Short stable tag, used in crash file names and dedup keys.
    pub fn tag(&self) -> &'static str {
        match self {
            CrashClass::InvalidMemAccess => "invalid-mem-access",
            CrashClass::InvalidInstruction => "invalid-instruction",
            CrashClass::Halt => "halt",
            CrashClass::AsanViolation { .. } => "asan",
            CrashClass::MissingApi(_) => "missing-api",
            CrashClass::Panic(_) => "panic",
        }
    }

    pub fn is_missing_api(&self) -> bool {
        matches!(self, CrashClass::MissingApi(_))
    }
}

impl fmt::Display for CrashClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrashClass::InvalidMemAccess => f.write_str("InvalidMemAccess"),
            CrashClass::InvalidInstruction => f.write_str("InvalidInstruction"),
            CrashClass::Halt => f.write_str("Halt"),
            CrashClass::AsanViolation { violation, api } => {
                write!(f, "AsanViolation({violation} in {api})")
            }
            CrashClass::MissingApi(name) => write!(f, "MissingApi({name})"),
            CrashClass::Panic(code) => write!(f, "Panic({code:#010x})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Crash {
    pub class: CrashClass,
    pub fault_pc: u32,
    pub fault_addr: u32,
}

impl fmt::Display for Crash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at pc={:#010x} addr={:#010x}",
            self.class, self.fault_pc, self.fault_addr
        )
    }
}

/// How a run of guest code ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    ReturnedFromEntrypoint,
    Crash(Crash),
    BreakpointHit(u32),
    BudgetExhausted,
}

impl ExecOutcome {
    pub fn crash(&self) -> Option<&Crash> {
        match self {
            ExecOutcome::Crash(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for ExecOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecOutcome::ReturnedFromEntrypoint => f.write_str("returned"),
            ExecOutcome::Crash(c) => write!(f, "crash: {c}"),
            ExecOutcome::BreakpointHit(addr) => write!(f, "breakpoint at {addr:#010x}"),
            ExecOutcome::BudgetExhausted => f.write_str("instruction budget exhausted"),
        }
    }
}

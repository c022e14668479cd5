//! Rehosting framework for GlobalPlatform trusted applications.
//!
//! A trusted application (TA) is loaded from a TAELF container into a
//! deterministic TIR-32 guest. Its GP, libc and vendor API imports are
//! intercepted at the call boundary and served by the virtual TEE in
//! [`vtee`], with heap accesses checked by [`asan`]. On top of that sit the
//! session manager, an in-process coverage-guided fuzzer, a GDB remote stub
//! and the greedy API ranking used to decide which vendor APIs to emulate
//! next.

pub mod asan;
pub mod debugstub;
pub mod emucore;
pub mod fuzz;
pub mod greedy;
pub mod manager;
pub mod outcome;
pub mod taelf;
pub mod vtee;

pub use outcome::{Crash, CrashClass, ExecOutcome, Violation, ViolationKind};

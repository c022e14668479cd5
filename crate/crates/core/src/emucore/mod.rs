//! Deterministic TIR-32 interpreter with program-counter hook dispatch and
//! edge coverage.
//!
//! Guest code reaches host-side API handlers by jumping into the hook
//! region (`0xF000_0000..0xF100_0000`). Each import owns one 16-byte slot;
//! when the program counter lands on a bound slot the dispatcher runs the
//! handler and execution resumes at `lr`. Statically linked code is hooked
//! the same way through inline hooks on ordinary addresses.

pub mod coverage;
pub mod hooks;
pub mod isa;
pub mod memory;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

pub use coverage::{CoverageMap, MAP_SIZE};
pub use hooks::{sentinel_for, HandlerId, HookError, HookTable, MAX_IMPORTS};
pub use isa::{Instruction, Opcode, INSN_SIZE, LR, PC, SP};
pub use memory::{AccessKind, MemFault, Memory, MemoryImage, Perm, PAGE_SIZE};

use crate::outcome::{Crash, CrashClass, ExecOutcome};

pub const HOOK_BASE: u32 = 0xF000_0000;
pub const HOOK_END: u32 = 0xF100_0000;
pub const HOOK_STRIDE: u32 = 16;
/// `lr` value planted by [`GuestState::prepare_call`]; reaching it ends the run.
pub const RETURN_TRAMPOLINE: u32 = HOOK_END - HOOK_STRIDE;

pub const STACK_TOP: u32 = 0x8000_0000;
pub const STACK_SIZE: u32 = 0x0010_0000;

pub const DEFAULT_BUDGET: u64 = 1_000_000;

pub fn in_hook_region(addr: u32) -> bool {
    (HOOK_BASE..HOOK_END).contains(&addr)
}

/// Failure reported by an API handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookFault {
    pub class: CrashClass,
    pub fault_addr: u32,
}

impl HookFault {
    pub fn new(class: CrashClass, fault_addr: u32) -> Self {
        HookFault { class, fault_addr }
    }
}

impl From<MemFault> for HookFault {
    fn from(f: MemFault) -> Self {
        HookFault::new(CrashClass::InvalidMemAccess, f.addr)
    }
}

/// Runs API handlers on behalf of the interpreter.
///
/// On `Ok` the interpreter returns to the caller (`pc <- lr`); the handler
/// is responsible for setting `r0`.
pub trait HookDispatch {
    fn dispatch(&mut self, handler: HandlerId, guest: &mut GuestState) -> Result<(), HookFault>;
}

/// Dispatcher that treats every handler as missing.
pub struct NoHandlers;

impl HookDispatch for NoHandlers {
    fn dispatch(&mut self, handler: HandlerId, _: &mut GuestState) -> Result<(), HookFault> {
        Err(HookFault::new(
            CrashClass::MissingApi(format!("handler#{}", handler.0)),
            0,
        ))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub z: bool,
    pub n: bool,
}

/// Register file, memory and coverage state of one guest.
#[derive(Debug, Clone)]
pub struct GuestState {
    pub regs: [u32; 16],
    pub flags: Flags,
    pub mem: Memory,
    pub coverage: CoverageMap,
    pub instruction_budget: u64,
    prev_block: u32,
    at_block_start: bool,
    executed: u64,
    skip_breakpoint: Option<u32>,
    blocks_seen: BTreeSet<u32>,
    trace: Option<BTreeSet<u32>>,
    checkpoint: Option<u64>,
}

/// Saved guest state; see [`GuestState::snapshot`].
#[derive(Clone)]
pub struct GuestSnapshot {
    id: u64,
    regs: [u32; 16],
    flags: Flags,
    mem: MemoryImage,
    instruction_budget: u64,
}

static SNAPSHOT_IDS: AtomicU64 = AtomicU64::new(1);

impl Default for GuestState {
    fn default() -> Self {
        GuestState::new()
    }
}

impl GuestState {
    pub fn new() -> Self {
        GuestState {
            regs: [0; 16],
            flags: Flags::default(),
            mem: Memory::new(),
            coverage: CoverageMap::new(),
            instruction_budget: DEFAULT_BUDGET,
            prev_block: 0,
            at_block_start: true,
            executed: 0,
            skip_breakpoint: None,
            blocks_seen: BTreeSet::new(),
            trace: None,
            checkpoint: None,
        }
    }

    pub fn pc(&self) -> u32 {
        self.regs[PC]
    }

    pub fn set_pc(&mut self, pc: u32) {
        self.regs[PC] = pc;
    }

    pub fn map_stack(&mut self) {
        self.mem.map(STACK_TOP - STACK_SIZE, STACK_SIZE, Perm::RW);
    }

    /// Reads call argument `n` (r0..r3, then the stack at `sp`).
    pub fn arg(&self, n: usize) -> Result<u32, MemFault> {
        if n < 4 {
            Ok(self.regs[n])
        } else {
            self.mem
                .read_u32(self.regs[SP].wrapping_add(4 * (n as u32 - 4)))
        }
    }

    pub fn set_return(&mut self, value: u32) {
        self.regs[0] = value;
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    /// Distinct runtime block starts executed since the last reset.
    pub fn blocks_seen(&self) -> &BTreeSet<u32> {
        &self.blocks_seen
    }

    /// Enables recording of every executed instruction address.
    pub fn enable_trace(&mut self) {
        self.trace = Some(BTreeSet::new());
    }

    pub fn take_trace(&mut self) -> Option<BTreeSet<u32>> {
        self.trace.take()
    }

    /// Clears coverage and block bookkeeping ahead of a fresh execution.
    pub fn reset_coverage(&mut self) {
        self.coverage.clear();
        self.blocks_seen.clear();
        self.prev_block = 0;
        self.at_block_start = true;
    }

    /// Sets up a call of `entry` with `args` in r0..r3, `lr` pointing at
    /// the return trampoline and a fresh instruction count.
    pub fn prepare_call(&mut self, entry: u32, args: [u32; 4]) {
        self.regs[..4].copy_from_slice(&args);
        self.regs[LR] = RETURN_TRAMPOLINE;
        self.regs[SP] = STACK_TOP;
        self.regs[PC] = entry;
        self.executed = 0;
        self.prev_block = 0;
        self.at_block_start = true;
        self.skip_breakpoint = None;
    }

    /// Executes one instruction or hook dispatch. Returns `Some` when the
    /// run ends (return, crash, breakpoint, budget).
    pub fn step<D: HookDispatch + ?Sized>(
        &mut self,
        hooks: &HookTable,
        dispatch: &mut D,
    ) -> Option<ExecOutcome> {
        let pc = self.regs[PC];
        if pc == RETURN_TRAMPOLINE {
            return Some(ExecOutcome::ReturnedFromEntrypoint);
        }
        if self.executed >= self.instruction_budget {
            return Some(ExecOutcome::BudgetExhausted);
        }

        if in_hook_region(pc) {
            return match hooks.sentinel_handler(pc) {
                Some(h) => self.run_handler(h, dispatch),
                None => Some(self.crash(CrashClass::InvalidMemAccess, pc, pc)),
            };
        }

        let skip = self.skip_breakpoint.take();
        if skip != Some(pc) && hooks.has_breakpoint(pc) {
            self.skip_breakpoint = Some(pc);
            return Some(ExecOutcome::BreakpointHit(pc));
        }

        if let Some(h) = hooks.inline_handler(pc) {
            self.enter_block(pc);
            return self.run_handler(h, dispatch);
        }

        if pc % INSN_SIZE != 0 {
            return Some(self.crash(CrashClass::InvalidInstruction, pc, pc));
        }
        let mut raw = [0u8; 8];
        if let Err(f) = self.mem.read(pc, &mut raw, AccessKind::Fetch) {
            return Some(self.crash(CrashClass::InvalidMemAccess, pc, f.addr));
        }
        let Some(insn) = Instruction::decode(raw) else {
            return Some(self.crash(CrashClass::InvalidInstruction, pc, pc));
        };

        self.enter_block(pc);
        if let Some(trace) = self.trace.as_mut() {
            trace.insert(pc);
        }
        self.executed += 1;
        match self.execute(pc, insn) {
            Ok(()) => {
                if insn.op.ends_block() {
                    self.at_block_start = true;
                }
                None
            }
            Err(outcome) => Some(outcome),
        }
    }

    fn enter_block(&mut self, pc: u32) {
        if self.at_block_start {
            self.coverage.record(self.prev_block, pc);
            self.blocks_seen.insert(pc);
            self.prev_block = pc;
            self.at_block_start = false;
        }
    }

    fn run_handler<D: HookDispatch + ?Sized>(
        &mut self,
        handler: HandlerId,
        dispatch: &mut D,
    ) -> Option<ExecOutcome> {
        self.executed += 1;
        let call_site = self.regs[LR].wrapping_sub(INSN_SIZE);
        match dispatch.dispatch(handler, self) {
            Ok(()) => {
                self.regs[PC] = self.regs[LR];
                self.at_block_start = true;
                None
            }
            Err(fault) => Some(self.crash(fault.class, call_site, fault.fault_addr)),
        }
    }

    fn crash(&self, class: CrashClass, fault_pc: u32, fault_addr: u32) -> ExecOutcome {
        ExecOutcome::Crash(Crash {
            class,
            fault_pc,
            fault_addr,
        })
    }

    fn execute(&mut self, pc: u32, insn: Instruction) -> Result<(), ExecOutcome> {
        let rd = insn.rd as usize;
        let a = self.regs[insn.rs1 as usize];
        let b = self.regs[insn.rs2 as usize];
        let imm = insn.imm as u32;
        let mut next = pc.wrapping_add(INSN_SIZE);
        let mem_fault = |s: &Self, f: MemFault| s.crash(CrashClass::InvalidMemAccess, pc, f.addr);

        match insn.op {
            Opcode::Movi => self.regs[rd] = imm,
            Opcode::Mov => self.regs[rd] = a,
            Opcode::Add => self.regs[rd] = a.wrapping_add(b),
            Opcode::Sub => self.regs[rd] = a.wrapping_sub(b),
            Opcode::And => self.regs[rd] = a & b,
            Opcode::Or => self.regs[rd] = a | b,
            Opcode::Xor => self.regs[rd] = a ^ b,
            Opcode::Shl => self.regs[rd] = a.wrapping_shl(b & 31),
            Opcode::Shr => self.regs[rd] = a.wrapping_shr(b & 31),
            Opcode::Addi => self.regs[rd] = a.wrapping_add(imm),
            Opcode::Ldw => {
                let v = self
                    .mem
                    .read_u32(a.wrapping_add(imm))
                    .map_err(|f| mem_fault(self, f))?;
                self.regs[rd] = v;
            }
            Opcode::Ldb => {
                let mut byte = [0u8];
                self.mem
                    .read(a.wrapping_add(imm), &mut byte, AccessKind::Read)
                    .map_err(|f| mem_fault(self, f))?;
                self.regs[rd] = byte[0] as u32;
            }
            Opcode::Stw => {
                let v = self.regs[rd];
                self.mem
                    .write_u32(a.wrapping_add(imm), v)
                    .map_err(|f| mem_fault(self, f))?;
            }
            Opcode::Stb => {
                let v = self.regs[rd] as u8;
                self.mem
                    .write(a.wrapping_add(imm), &[v])
                    .map_err(|f| mem_fault(self, f))?;
            }
            Opcode::Cmp => self.set_flags(a, b),
            Opcode::Cmpi => self.set_flags(a, imm),
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge | Opcode::Jmp => {
                let taken = match insn.op {
                    Opcode::Beq => self.flags.z,
                    Opcode::Bne => !self.flags.z,
                    Opcode::Blt => self.flags.n,
                    Opcode::Bge => !self.flags.n,
                    _ => true,
                };
                if taken {
                    next = pc.wrapping_add(imm);
                }
            }
            Opcode::Call => {
                self.regs[LR] = next;
                next = imm;
            }
            Opcode::Callr => {
                self.regs[LR] = next;
                next = a;
            }
            Opcode::Ret => next = self.regs[LR],
            Opcode::Push => {
                let v = self.regs[rd];
                let sp = self.regs[SP].wrapping_sub(4);
                self.mem.write_u32(sp, v).map_err(|f| mem_fault(self, f))?;
                self.regs[SP] = sp;
            }
            Opcode::Pop => {
                let sp = self.regs[SP];
                let v = self.mem.read_u32(sp).map_err(|f| mem_fault(self, f))?;
                self.regs[rd] = v;
                self.regs[SP] = sp.wrapping_add(4);
            }
            Opcode::Halt => return Err(self.crash(CrashClass::Halt, pc, pc)),
        }
        // POP into pc or a write to r15 is a jump.
        if rd == PC && matches!(insn.op, Opcode::Pop | Opcode::Mov | Opcode::Movi) {
            self.at_block_start = true;
            return Ok(());
        }
        self.regs[PC] = next;
        Ok(())
    }

    fn set_flags(&mut self, a: u32, b: u32) {
        self.flags.z = a == b;
        self.flags.n = (a as i32) < (b as i32);
    }

    /// Steps until the run ends.
    pub fn run<D: HookDispatch + ?Sized>(
        &mut self,
        hooks: &HookTable,
        dispatch: &mut D,
    ) -> ExecOutcome {
        loop {
            if let Some(outcome) = self.step(hooks, dispatch) {
                return outcome;
            }
        }
    }

    /// Calls `entry` with `args` and runs until it returns to the
    /// trampoline or the run otherwise ends.
    pub fn run_until_return<D: HookDispatch + ?Sized>(
        &mut self,
        hooks: &HookTable,
        dispatch: &mut D,
        entry: u32,
        args: [u32; 4],
    ) -> ExecOutcome {
        self.prepare_call(entry, args);
        self.run(hooks, dispatch)
    }

    /// Captures registers, flags and memory. Coverage is not part of the
    /// snapshot; [`GuestState::restore`] clears it.
    pub fn snapshot(&mut self) -> GuestSnapshot {
        let id = SNAPSHOT_IDS.fetch_add(1, Ordering::Relaxed);
        self.checkpoint = Some(id);
        GuestSnapshot {
            id,
            regs: self.regs,
            flags: self.flags,
            mem: self.mem.checkpoint(),
            instruction_budget: self.instruction_budget,
        }
    }

    pub fn restore(&mut self, snap: &GuestSnapshot) {
        if self.checkpoint == Some(snap.id) {
            self.mem.rollback(&snap.mem);
        } else {
            self.mem.reset_to(&snap.mem);
            self.checkpoint = Some(snap.id);
        }
        self.regs = snap.regs;
        self.flags = snap.flags;
        self.instruction_budget = snap.instruction_budget;
        self.executed = 0;
        self.skip_breakpoint = None;
        self.reset_coverage();
    }
}

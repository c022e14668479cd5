//! TA manager: sessions, byte-exact parameter marshalling, entrypoint
//! invocation and outcome classification.

pub mod params;
pub mod server;

use std::collections::BTreeMap;

use thiserror::Error;

pub use params::*;

use crate::emucore::{
    GuestSnapshot, GuestState, HandlerId, HookTable, Perm, PAGE_SIZE,
};
use crate::outcome::ExecOutcome;
use crate::taelf::{self, Entrypoint, LoadError, StaticAnnotationConfig, TaElfFile, TaImage};
use crate::vtee::{
    ApiRegistry, PauseHook, SharedRegion, ShmDirection, TeeState, VteeDispatch, TEE_ERROR_TARGET_DEAD,
    TEE_ORIGIN_TEE, TEE_ORIGIN_TRUSTED_APP, TEE_SUCCESS,
};

/// Guest address of the `TEE_Param[4]` array.
pub const PARAM_BASE: u32 = 0x7000_0000;
/// Where `TA_OpenSessionEntryPoint` stores the session context.
pub const SESSION_CTX_SLOT: u32 = PARAM_BASE + 0x40;
const PARAM_AREA: u32 = 0x0800_0000;

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Container(#[from] taelf::TaElfError),
    #[error("no open session {0}")]
    BadHandle(u32),
    #[error("memref buffers exceed the parameter area")]
    ParamsTooLarge,
}

/// What came back from one entrypoint call.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationResult {
    pub return_code: u32,
    pub return_origin: u8,
    pub out_params: [OutParam; 4],
    pub log: Vec<String>,
    pub outcome: ExecOutcome,
}

impl InvocationResult {
    pub fn crashed(&self) -> bool {
        self.outcome.crash().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotLayout {
    None,
    Value,
    Memref { addr: u32, len: u32 },
}

/// Marshalled parameters of a call in flight.
#[derive(Debug, Clone)]
pub struct PendingCall {
    slots: [SlotLayout; 4],
    log_start: usize,
    shm_bound: bool,
}

#[derive(Debug, Clone, Copy)]
struct Session {
    ctx: u32,
}

/// Saved instance state, for persistent-mode fuzzing.
#[derive(Clone)]
pub struct InstanceSnapshot {
    guest: GuestSnapshot,
    tee: TeeState,
    sessions: BTreeMap<u32, Session>,
    next_session: u32,
    created: bool,
}

/// A loaded TA with its own guest, virtual TEE and sessions.
pub struct TaInstance {
    pub guest: GuestState,
    pub tee: TeeState,
    pub registry: ApiRegistry,
    pub hooks: HookTable,
    pub image: TaImage,
    handler_names: Vec<String>,
    sessions: BTreeMap<u32, Session>,
    next_session: u32,
    created: bool,
}

impl TaInstance {
    pub fn new(
        file: &TaElfFile,
        config: Option<&StaticAnnotationConfig>,
        mut registry: ApiRegistry,
    ) -> Result<Self, ManagerError> {
        let mut guest = GuestState::new();
        let image = taelf::load(file, config, &mut guest)?;
        let mut hooks = HookTable::new();
        let mut handler_names = Vec::new();
        for (i, name) in image.import_bindings.iter().enumerate() {
            registry.ensure(name);
            hooks
                .bind_import(i as u32, HandlerId(handler_names.len() as u32))
                .expect("import count checked by loader");
            handler_names.push(name.clone());
        }
        for (addr, name) in &image.inline_hooks {
            registry.ensure(name);
            hooks
                .add_inline(*addr, HandlerId(handler_names.len() as u32))
                .expect("annotation checked by loader");
            handler_names.push(name.clone());
        }
        Ok(TaInstance {
            guest,
            tee: TeeState::new(),
            registry,
            hooks,
            image,
            handler_names,
            sessions: BTreeMap::new(),
            next_session: 1,
            created: false,
        })
    }

    /// Parses and loads a TAELF container.
    pub fn from_bytes(
        bytes: &[u8],
        config: Option<&StaticAnnotationConfig>,
        registry: ApiRegistry,
    ) -> Result<Self, ManagerError> {
        let file = taelf::parse_taelf(bytes)?;
        Self::new(&file, config, registry)
    }

    /// API name bound to each handler id.
    pub fn handler_names(&self) -> &[String] {
        &self.handler_names
    }

    pub fn sessions(&self) -> impl Iterator<Item = u32> + '_ {
        self.sessions.keys().copied()
    }

    pub fn snapshot(&mut self) -> InstanceSnapshot {
        InstanceSnapshot {
            guest: self.guest.snapshot(),
            tee: self.tee.clone(),
            sessions: self.sessions.clone(),
            next_session: self.next_session,
            created: self.created,
        }
    }

    pub fn restore(&mut self, snap: &InstanceSnapshot) {
        self.guest.restore(&snap.guest);
        self.tee.clone_from(&snap.tee);
        self.sessions.clone_from(&snap.sessions);
        self.next_session = snap.next_session;
        self.created = snap.created;
    }

    fn dispatcher<'a>(
        &'a mut self,
        pause: Option<&'a mut (dyn PauseHook + '_)>,
    ) -> (&'a mut GuestState, &'a HookTable, VteeDispatch<'a>) {
        let pause = pause.map(|p| p as &mut dyn PauseHook);
        (
            &mut self.guest,
            &self.hooks,
            VteeDispatch {
                tee: &mut self.tee,
                registry: &self.registry,
                names: &self.handler_names,
                pause,
            },
        )
    }

    /// Executes one instruction or API call of the current run.
    pub fn step(&mut self) -> Option<ExecOutcome> {
        let (guest, hooks, mut d) = self.dispatcher(None);
        guest.step(hooks, &mut d)
    }

    /// Runs the current call until it ends.
    pub fn run(&mut self, pause: Option<&mut (dyn PauseHook + '_)>) -> ExecOutcome {
        let (guest, hooks, mut d) = self.dispatcher(pause);
        guest.run(hooks, &mut d)
    }

    /// Unmaps the previous call's parameter area and lays out `params`:
    /// the `TEE_Param[4]` array at [`PARAM_BASE`], then each buffer on
    /// its own pages separated by an unmapped guard page.
    fn marshal(&mut self, params: &GpParamSet) -> Result<PendingCall, ManagerError> {
        self.guest.mem.unmap(PARAM_BASE, PARAM_AREA);
        self.tee.clear_shm();
        self.guest.mem.map(PARAM_BASE, PAGE_SIZE, Perm::RW);
        self.guest
            .mem
            .write_raw(PARAM_BASE, &[0; 0x48])
            .expect("param page mapped");

        let mut cursor = PARAM_BASE + 2 * PAGE_SIZE;
        let mut slots = [SlotLayout::None; 4];
        let mut shm_bound = false;
        for (i, p) in params.params.iter().enumerate() {
            let rec = PARAM_BASE + 8 * i as u32;
            let (w0, w1) = match p {
                GpParam::None => (0, 0),
                GpParam::Value { a, b } => {
                    slots[i] = SlotLayout::Value;
                    (*a, *b)
                }
                GpParam::Memref { data, size } => {
                    let addr = self.place(&mut cursor, data.len() as u32)?;
                    self.guest.mem.write_raw(addr, data).expect("buffer mapped");
                    slots[i] = SlotLayout::Memref {
                        addr,
                        len: data.len() as u32,
                    };
                    (addr, *size)
                }
                GpParam::Shared { backing, size } => {
                    let len = backing.len() as u32;
                    let addr = self.place(&mut cursor, len)?;
                    let region = SharedRegion {
                        guest_vaddr: addr,
                        length: len,
                        backing: backing.clone(),
                        direction: ShmDirection::InOut,
                    };
                    self.tee.bind_shm(region);
                    self.tee.sync_in(&mut self.guest.mem, addr, len);
                    shm_bound = true;
                    slots[i] = SlotLayout::Memref { addr, len };
                    (addr, *size)
                }
            };
            self.guest.mem.write_u32(rec, w0).expect("param page mapped");
            self.guest.mem.write_u32(rec + 4, w1).expect("param page mapped");
        }
        Ok(PendingCall {
            slots,
            log_start: self.tee.log.len(),
            shm_bound,
        })
    }

    fn place(&mut self, cursor: &mut u32, len: u32) -> Result<u32, ManagerError> {
        let addr = *cursor;
        let span = len.max(1).div_ceil(PAGE_SIZE) as u64 * PAGE_SIZE as u64;
        if addr as u64 + span + PAGE_SIZE as u64 > (PARAM_BASE + PARAM_AREA) as u64 {
            return Err(ManagerError::ParamsTooLarge);
        }
        self.guest.mem.map(addr, span as u32, Perm::RW);
        *cursor = addr + span as u32 + PAGE_SIZE;
        Ok(addr)
    }

    fn collect(&mut self, pending: &PendingCall, outcome: ExecOutcome) -> InvocationResult {
        if pending.shm_bound {
            for r in self.tee.shm.clone() {
                self.tee.sync_out(&self.guest.mem, r.guest_vaddr, r.length);
            }
        }
        let mut out: [OutParam; 4] = Default::default();
        for (i, slot) in pending.slots.iter().enumerate() {
            let rec = PARAM_BASE + 8 * i as u32;
            let mut words = [0u8; 8];
            if self.guest.mem.read_raw(rec, &mut words).is_err() {
                continue;
            }
            let w0 = u32::from_le_bytes(words[..4].try_into().unwrap());
            let w1 = u32::from_le_bytes(words[4..].try_into().unwrap());
            out[i] = match slot {
                SlotLayout::None => OutParam::None,
                SlotLayout::Value => OutParam::Value { a: w0, b: w1 },
                SlotLayout::Memref { addr, len } => {
                    let n = w1.min(*len);
                    let mut data = vec![0; n as usize];
                    let _ = self.guest.mem.read_raw(*addr, &mut data);
                    OutParam::Memref { data, size: w1 }
                }
            };
        }
        let (return_code, return_origin) = match &outcome {
            ExecOutcome::ReturnedFromEntrypoint => (self.guest.regs[0], TEE_ORIGIN_TRUSTED_APP),
            _ => (TEE_ERROR_TARGET_DEAD, TEE_ORIGIN_TEE),
        };
        if let Some(c) = outcome.crash() {
            log::info!("TA crashed: {c}");
        }
        InvocationResult {
            return_code,
            return_origin,
            out_params: out,
            log: self.tee.log[pending.log_start..].to_vec(),
            outcome,
        }
    }

    fn call_entry(
        &mut self,
        ep: Entrypoint,
        args: [u32; 4],
        pending: &PendingCall,
        pause: Option<&mut (dyn PauseHook + '_)>,
    ) -> InvocationResult {
        let outcome = match self.image.entry(ep) {
            Some(entry) => {
                self.guest.prepare_call(entry, args);
                self.run(pause)
            }
            None => {
                self.guest.regs[0] = TEE_SUCCESS;
                ExecOutcome::ReturnedFromEntrypoint
            }
        };
        self.collect(pending, outcome)
    }

    /// Runs create (first time only) and open-session. On success returns
    /// the session handle.
    pub fn open_session(
        &mut self,
        params: &GpParamSet,
    ) -> Result<(u32, InvocationResult), InvocationResult> {
        self.open_session_with(params, None)
    }

    pub fn open_session_with(
        &mut self,
        params: &GpParamSet,
        mut pause: Option<&mut (dyn PauseHook + '_)>,
    ) -> Result<(u32, InvocationResult), InvocationResult> {
        if !self.created {
            let pending = self.marshal(&GpParamSet::empty()).expect("empty params fit");
            let r = self.call_entry(Entrypoint::Create, [0; 4], &pending, pause.as_deref_mut());
            if r.return_code != TEE_SUCCESS {
                return Err(r);
            }
            self.created = true;
        }
        let pending = match self.marshal(params) {
            Ok(p) => p,
            Err(e) => return Err(self.reject(e)),
        };
        self.guest
            .mem
            .write_u32(SESSION_CTX_SLOT, 0)
            .expect("param page mapped");
        let args = [params.param_types as u32, PARAM_BASE, SESSION_CTX_SLOT, 0];
        let r = self.call_entry(Entrypoint::OpenSession, args, &pending, pause);
        if r.return_code != TEE_SUCCESS {
            return Err(r);
        }
        let ctx = self.guest.mem.read_u32(SESSION_CTX_SLOT).unwrap_or(0);
        let id = self.next_session;
        self.next_session += 1;
        self.sessions.insert(id, Session { ctx });
        Ok((id, r))
    }

    fn reject(&self, e: ManagerError) -> InvocationResult {
        log::warn!("{e}");
        InvocationResult {
            return_code: crate::vtee::TEE_ERROR_OUT_OF_MEMORY,
            return_origin: crate::vtee::TEE_ORIGIN_COMMS,
            out_params: Default::default(),
            log: Vec::new(),
            outcome: ExecOutcome::ReturnedFromEntrypoint,
        }
    }

    /// Marshals `params` and prepares the invoke entrypoint without
    /// running it (for single-stepping).
    pub fn begin_invoke(&mut self, session: u32, cmd: u32, params: &GpParamSet) -> Result<PendingCall, ManagerError> {
        let s = *self
            .sessions
            .get(&session)
            .ok_or(ManagerError::BadHandle(session))?;
        let pending = self.marshal(params)?;
        let entry = self
            .image
            .entry(Entrypoint::InvokeCommand)
            .expect("parser requires the invoke entrypoint");
        self.guest
            .prepare_call(entry, [s.ctx, cmd, params.param_types as u32, PARAM_BASE]);
        Ok(pending)
    }

    /// Collects outputs of a call started with [`TaInstance::begin_invoke`].
    pub fn finish_invoke(&mut self, pending: &PendingCall, outcome: ExecOutcome) -> InvocationResult {
        self.collect(pending, outcome)
    }

    pub fn invoke_command(&mut self, session: u32, cmd: u32, params: &GpParamSet) -> Result<InvocationResult, ManagerError> {
        self.invoke_command_with(session, cmd, params, None)
    }

    pub fn invoke_command_with(
        &mut self,
        session: u32,
        cmd: u32,
        params: &GpParamSet,
        pause: Option<&mut (dyn PauseHook + '_)>,
    ) -> Result<InvocationResult, ManagerError> {
        let pending = self.begin_invoke(session, cmd, params)?;
        let outcome = self.run(pause);
        Ok(self.finish_invoke(&pending, outcome))
    }

    /// Runs close-session; the session is removed even if that crashes.
    pub fn close_session(&mut self, session: u32) -> Result<InvocationResult, ManagerError> {
        let s = self
            .sessions
            .remove(&session)
            .ok_or(ManagerError::BadHandle(session))?;
        let pending = self.marshal(&GpParamSet::empty())?;
        Ok(self.call_entry(Entrypoint::CloseSession, [s.ctx, 0, 0, 0], &pending, None))
    }

    /// Closes remaining sessions and runs the destroy entrypoint.
    pub fn destroy(&mut self) -> InvocationResult {
        let open: Vec<u32> = self.sessions().collect();
        for s in open {
            let _ = self.close_session(s);
        }
        let pending = self.marshal(&GpParamSet::empty()).expect("empty params fit");
        self.created = false;
        self.call_entry(Entrypoint::Destroy, [0; 4], &pending, None)
    }
}

//! Virtual TEE: high-level handlers for GP Internal Core, libc and
//! vendor-specific APIs, plus the state they share.

mod ext;
mod gp;
mod libc;
pub mod registry;
pub mod shm;
pub mod state;

pub use registry::{
    gp_api_names, libc_api_names, ApiCategory, ApiEntry, ApiRegistry, Handler, MissingApiPolicy,
    RegistryError,
};
pub use shm::{FileBacking, MemBacking, SharedRegion, ShmBacking, ShmDirection};
pub use state::{CryptoError, CryptoOp, OpenObject, StorageError, TeeState, DEVICE_KEY, STORAGE_CAP};

use crate::emucore::{GuestState, HandlerId, HookDispatch, HookFault, MemFault};
use crate::outcome::{CrashClass, Violation, ViolationKind};

pub const TEE_SUCCESS: u32 = 0x0000_0000;
pub const TEE_ERROR_ACCESS_DENIED: u32 = 0xFFFF_0001;
pub const TEE_ERROR_ACCESS_CONFLICT: u32 = 0xFFFF_0003;
pub const TEE_ERROR_GENERIC: u32 = 0xFFFF_0000;
pub const TEE_ERROR_BAD_FORMAT: u32 = 0xFFFF_0005;
pub const TEE_ERROR_BAD_PARAMETERS: u32 = 0xFFFF_0006;
pub const TEE_ERROR_BAD_STATE: u32 = 0xFFFF_0007;
pub const TEE_ERROR_ITEM_NOT_FOUND: u32 = 0xFFFF_0008;
pub const TEE_ERROR_OUT_OF_MEMORY: u32 = 0xFFFF_000C;
pub const TEE_ERROR_SHORT_BUFFER: u32 = 0xFFFF_0010;
pub const TEE_ERROR_TARGET_DEAD: u32 = 0xFFFF_3024;
pub const TEE_ERROR_STORAGE_NO_SPACE: u32 = 0xFFFF_3041;

pub const TEE_ORIGIN_API: u8 = 1;
pub const TEE_ORIGIN_COMMS: u8 = 2;
pub const TEE_ORIGIN_TEE: u8 = 3;
pub const TEE_ORIGIN_TRUSTED_APP: u8 = 4;

pub const TEE_MEMORY_ACCESS_READ: u32 = 0x1;
pub const TEE_MEMORY_ACCESS_WRITE: u32 = 0x2;
pub const TEE_MEMORY_ACCESS_ANY_OWNER: u32 = 0x4;

/// Longest C string a handler will scan for.
pub const MAX_CSTR: u32 = 1 << 20;

/// Called before a handler runs for an API listed in the pause set.
pub trait PauseHook {
    fn before_api(&mut self, api: &str, tee: &mut TeeState);
}

/// One in-flight API call as seen by a handler.
pub struct ApiCall<'a> {
    pub tee: &'a mut TeeState,
    pub guest: &'a mut GuestState,
    pub api: &'a str,
}

impl ApiCall<'_> {
    pub fn arg(&self, n: usize) -> Result<u32, HookFault> {
        Ok(self.guest.arg(n)?)
    }

    pub fn ret(&mut self, value: u32) {
        self.guest.set_return(value);
    }

    /// Converts a sanitizer verdict into a crash. Wild accesses to
    /// unmapped memory surface as plain invalid memory accesses.
    fn violation(&self, base: u32, v: Violation) -> HookFault {
        let addr = base.wrapping_add(v.offset);
        if v.kind == ViolationKind::WildAccess && !self.guest.mem.is_mapped(addr) {
            return HookFault::new(CrashClass::InvalidMemAccess, addr);
        }
        HookFault::new(
            CrashClass::AsanViolation {
                violation: v,
                api: self.api.to_string(),
            },
            addr,
        )
    }

    pub fn check(&self, base: u32, size: u32, is_write: bool) -> Result<(), HookFault> {
        self.tee
            .heap
            .is_access_valid(&self.guest.mem, base, size, is_write)
            .map_err(|v| self.violation(base, v))
    }

    pub fn free(&mut self, ptr: u32) -> Result<(), HookFault> {
        let r = self.tee.heap.free(&mut self.guest.mem, ptr);
        r.map_err(|v| self.violation(ptr, v))
    }

    pub fn alloc(&mut self, size: u32, zero: bool) -> u32 {
        self.tee.heap.alloc(&mut self.guest.mem, size, zero)
    }

    /// Sanitizer-checked read.
    pub fn read(&mut self, base: u32, size: u32) -> Result<Vec<u8>, HookFault> {
        self.check(base, size, false)?;
        self.tee.sync_in(&mut self.guest.mem, base, size);
        Ok(self.guest.mem.read_raw_vec(base, size)?)
    }

    /// Sanitizer-checked write.
    pub fn write(&mut self, base: u32, data: &[u8]) -> Result<(), HookFault> {
        self.check(base, data.len() as u32, true)?;
        self.guest.mem.write_raw(base, data)?;
        self.tee.sync_out(&self.guest.mem, base, data.len() as u32);
        Ok(())
    }

    pub fn read_u32(&mut self, addr: u32) -> Result<u32, HookFault> {
        let b = self.read(addr, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Result<(), HookFault> {
        self.write(addr, &value.to_le_bytes())
    }

    /// Reads a NUL-terminated string one checked byte at a time. The
    /// reported offset of a violation is relative to `addr`.
    pub fn read_cstr(&mut self, addr: u32) -> Result<Vec<u8>, HookFault> {
        let mut out = Vec::new();
        for i in 0..MAX_CSTR {
            let at = addr.wrapping_add(i);
            if let Err(mut v) = self.tee.heap.is_access_valid(&self.guest.mem, at, 1, false) {
                v.offset += i;
                return Err(self.violation(addr, v));
            }
            self.tee.sync_in(&mut self.guest.mem, at, 1);
            let mut b = [0u8];
            self.guest.mem.read_raw(at, &mut b)?;
            if b[0] == 0 {
                break;
            }
            out.push(b[0]);
        }
        Ok(out)
    }

    /// Formats a printf-style string with arguments starting at `first`.
    /// Supports `%s %d %x %p %%`; other directives pass through literally.
    pub fn format(&mut self, fmt_ptr: u32, first: usize) -> Result<String, HookFault> {
        let fmt = self.read_cstr(fmt_ptr)?;
        let mut out = String::new();
        let mut next = first;
        let mut i = 0;
        while i < fmt.len() {
            let c = fmt[i];
            if c != b'%' || i + 1 == fmt.len() {
                out.push(c as char);
                i += 1;
                continue;
            }
            let d = fmt[i + 1];
            i += 2;
            match d {
                b'%' => out.push('%'),
                b's' | b'd' | b'x' | b'p' => {
                    let v = self.arg(next)?;
                    next += 1;
                    match d {
                        b's' => {
                            let s = self.read_cstr(v)?;
                            out.push_str(&String::from_utf8_lossy(&s));
                        }
                        b'd' => out.push_str(&(v as i32).to_string()),
                        b'x' => out.push_str(&format!("{v:x}")),
                        _ => out.push_str(&format!("0x{v:08x}")),
                    }
                }
                other => {
                    out.push('%');
                    out.push(other as char);
                }
            }
        }
        Ok(out)
    }

    pub fn log(&mut self, line: String) {
        log::debug!(target: "ta", "{line}");
        self.tee.log.push(line);
    }
}

impl crate::emucore::Memory {
    /// Reads mapped bytes regardless of permissions into a fresh vector.
    pub fn read_raw_vec(&self, addr: u32, len: u32) -> Result<Vec<u8>, MemFault> {
        let mut v = vec![0; len as usize];
        self.read_raw(addr, &mut v)?;
        Ok(v)
    }
}

/// Bridges the interpreter's hook dispatch to registry handlers.
///
/// `names[i]` is the API bound to `HandlerId(i)`.
pub struct VteeDispatch<'a> {
    pub tee: &'a mut TeeState,
    pub registry: &'a ApiRegistry,
    pub names: &'a [String],
    pub pause: Option<&'a mut dyn PauseHook>,
}

impl HookDispatch for VteeDispatch<'_> {
    fn dispatch(&mut self, handler: HandlerId, guest: &mut GuestState) -> Result<(), HookFault> {
        let Some(name) = self.names.get(handler.0 as usize) else {
            return Err(HookFault::new(
                CrashClass::MissingApi(format!("handler#{}", handler.0)),
                guest.pc(),
            ));
        };
        if self.tee.pause_at.contains(name) {
            if let Some(p) = self.pause.as_deref_mut() {
                p.before_api(name, self.tee);
            }
        }
        self.tee.epoch += 1;
        self.registry.call(name, self.tee, guest)
    }
}

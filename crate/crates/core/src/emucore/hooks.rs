use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{in_hook_region, HOOK_BASE, HOOK_STRIDE, RETURN_TRAMPOLINE};

/// Opaque index of an API handler; meaning is owned by the dispatcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HandlerId(pub u32);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HookError {
    #[error("address {0:#010x} lies inside the hook region")]
    InHookRegion(u32),
    #[error("import index {0} exceeds the hook region")]
    IndexOutOfRange(u32),
}

/// Maximum number of import sentinels; the last 16-byte slot of the
/// region is the entrypoint return trampoline.
pub const MAX_IMPORTS: u32 = (RETURN_TRAMPOLINE - HOOK_BASE) / HOOK_STRIDE;

/// The sentinel address assigned to import slot `index`.
pub fn sentinel_for(index: u32) -> u32 {
    HOOK_BASE + HOOK_STRIDE * index
}

#[derive(Debug, Clone, Default)]
pub struct HookTable {
    sentinels: BTreeMap<u32, HandlerId>,
    inline: BTreeMap<u32, HandlerId>,
    breakpoints: BTreeSet<u32>,
}

impl HookTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind_import(&mut self, index: u32, handler: HandlerId) -> Result<(), HookError> {
        if index >= MAX_IMPORTS {
            return Err(HookError::IndexOutOfRange(index));
        }
        self.sentinels.insert(index, handler);
        Ok(())
    }

    pub fn add_inline(&mut self, vaddr: u32, handler: HandlerId) -> Result<(), HookError> {
        if in_hook_region(vaddr) {
            return Err(HookError::InHookRegion(vaddr));
        }
        self.inline.insert(vaddr, handler);
        Ok(())
    }

    pub fn add_breakpoint(&mut self, vaddr: u32) -> Result<(), HookError> {
        if in_hook_region(vaddr) {
            return Err(HookError::InHookRegion(vaddr));
        }
        self.breakpoints.insert(vaddr);
        Ok(())
    }

    pub fn remove_breakpoint(&mut self, vaddr: u32) -> bool {
        self.breakpoints.remove(&vaddr)
    }

    pub fn clear_breakpoints(&mut self) {
        self.breakpoints.clear();
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = u32> + '_ {
        self.breakpoints.iter().copied()
    }

    pub fn has_breakpoint(&self, vaddr: u32) -> bool {
        self.breakpoints.contains(&vaddr)
    }

    /// Handler bound to the sentinel at `pc`, if `pc` is exactly a slot start.
    pub fn sentinel_handler(&self, pc: u32) -> Option<HandlerId> {
        let off = pc.checked_sub(HOOK_BASE)?;
        if off % HOOK_STRIDE != 0 {
            return None;
        }
        self.sentinels.get(&(off / HOOK_STRIDE)).copied()
    }

    pub fn inline_handler(&self, pc: u32) -> Option<HandlerId> {
        self.inline.get(&pc).copied()
    }

    pub fn inline_hooks(&self) -> impl Iterator<Item = (u32, HandlerId)> + '_ {
        self.inline.iter().map(|(a, h)| (*a, *h))
    }

    pub fn import_bindings(&self) -> impl Iterator<Item = (u32, HandlerId)> + '_ {
        self.sentinels.iter().map(|(i, h)| (*i, *h))
    }
}

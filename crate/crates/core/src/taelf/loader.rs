use std::collections::BTreeMap;

use thiserror::Error;

use super::format::{Entrypoint, TaElfFile};
use crate::emucore::{
    in_hook_region, sentinel_for, GuestState, Perm, HOOK_BASE, HOOK_END, MAX_IMPORTS,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("segment {0:#010x} overlaps the hook region")]
    OverlapWithHookRegion(u32),
    #[error("static TA loaded without an annotation config")]
    UnresolvedStaticTa,
    #[error("segment {0:#010x} overlaps memory already mapped in the guest")]
    AddressInUse(u32),
    #[error("too many imports ({0})")]
    TooManyImports(usize),
    #[error("annotation {0:#010x} is not inside an executable segment")]
    BadAnnotation(u32),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

/// Hand-written annotation of API entry addresses for statically linked
/// TAs. One `<hex-vaddr> <api-name>` per line, `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StaticAnnotationConfig {
    pub entries: Vec<(u32, String)>,
}

impl StaticAnnotationConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| ConfigError {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let (Some(addr), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected `<hex-vaddr> <api-name>`"));
            };
            let digits = addr
                .strip_prefix("0x")
                .or_else(|| addr.strip_prefix("0X"))
                .unwrap_or(addr);
            let vaddr = u32::from_str_radix(digits, 16).map_err(|_| err("bad hex address"))?;
            if entries.iter().any(|(a, _)| *a == vaddr) {
                return Err(err("duplicate address"));
            }
            entries.push((vaddr, name.to_string()));
        }
        Ok(StaticAnnotationConfig { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(a, n)| format!("{a:#x} {n}\n"))
            .collect()
    }
}

/// A TA mapped into a guest, with its GOT rewritten to hook sentinels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaImage {
    /// `(vaddr, len, perm)` of every mapped segment.
    pub segments: Vec<(u32, u32, Perm)>,
    /// Import index to API name; index `i` is reached through `0xF000_0000 + 16*i`.
    pub import_bindings: Vec<String>,
    /// GOT slot address per import index.
    pub import_slots: Vec<u32>,
    /// Inline hook address to API name (static TAs).
    pub inline_hooks: BTreeMap<u32, String>,
    pub entrypoints: BTreeMap<Entrypoint, u32>,
    /// Slot contents before rewriting, per import index.
    pub got_original: Vec<[u8; 4]>,
    pub blocks: Vec<u32>,
}

impl TaImage {
    pub fn entry(&self, ep: Entrypoint) -> Option<u32> {
        self.entrypoints.get(&ep).copied()
    }

    pub fn slot_of(&self, api: &str) -> Option<u32> {
        self.import_bindings
            .iter()
            .position(|n| n == api)
            .map(|i| self.import_slots[i])
    }

    /// Writes the saved pre-rewrite bytes back into every GOT slot.
    pub fn restore_got(&self, guest: &mut GuestState) {
        for (slot, orig) in self.import_slots.iter().zip(&self.got_original) {
            guest
                .mem
                .write_raw(*slot, orig)
                .expect("GOT slot mapped by load");
        }
    }
}

/// Maps `file` into `guest`, rewrites each import slot `i` to
/// `0xF000_0000 + 16*i` and records inline hooks from `config`.
pub fn load(
    file: &TaElfFile,
    config: Option<&StaticAnnotationConfig>,
    guest: &mut GuestState,
) -> Result<TaImage, LoadError> {
    if file.is_static && config.is_none() {
        return Err(LoadError::UnresolvedStaticTa);
    }
    if file.imports.len() as u64 > MAX_IMPORTS as u64 {
        return Err(LoadError::TooManyImports(file.imports.len()));
    }
    for s in &file.segments {
        if s.vaddr as u64 <= (HOOK_END - 1) as u64 && s.end() > HOOK_BASE as u64 {
            return Err(LoadError::OverlapWithHookRegion(s.vaddr));
        }
        if guest.mem.any_mapped(s.vaddr, s.bytes.len() as u32) {
            return Err(LoadError::AddressInUse(s.vaddr));
        }
    }

    let mut segments = Vec::new();
    for s in &file.segments {
        let len = s.bytes.len() as u32;
        guest.mem.map(s.vaddr, len, s.perm);
        guest
            .mem
            .write_raw(s.vaddr, &s.bytes)
            .expect("segment just mapped");
        segments.push((s.vaddr, len, s.perm));
    }

    let mut got_original = Vec::new();
    let mut import_slots = Vec::new();
    for (i, imp) in file.imports.iter().enumerate() {
        let mut orig = [0u8; 4];
        guest
            .mem
            .read_raw(imp.slot_vaddr, &mut orig)
            .expect("slot validated by parser");
        got_original.push(orig);
        import_slots.push(imp.slot_vaddr);
        guest
            .mem
            .write_raw(imp.slot_vaddr, &sentinel_for(i as u32).to_le_bytes())
            .expect("slot validated by parser");
    }

    let mut inline_hooks = BTreeMap::new();
    if let Some(cfg) = config {
        for (vaddr, name) in &cfg.entries {
            let in_code = file
                .segments
                .iter()
                .any(|s| s.perm.contains(Perm::X) && s.contains(*vaddr, 1));
            if !in_code || in_hook_region(*vaddr) {
                return Err(LoadError::BadAnnotation(*vaddr));
            }
            inline_hooks.insert(*vaddr, name.clone());
        }
    }

    guest.map_stack();

    Ok(TaImage {
        segments,
        import_bindings: file.imports.iter().map(|i| i.name.clone()).collect(),
        import_slots,
        inline_hooks,
        entrypoints: file.entrypoints.clone(),
        got_original,
        blocks: file.blocks.clone(),
    })
}

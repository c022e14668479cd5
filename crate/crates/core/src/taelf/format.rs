//! The TAELF container: ELF32 little-endian, machine `0x5441`, with the
//! import and entrypoint tables carried in custom sections.
//!
//! Layout produced by [`TaElfFile::to_bytes`]:
//!
//! ```text
//! ELF header (52 bytes)
//! program headers, one PT_LOAD per segment (32 bytes each)
//! segment contents, each padded to 4 bytes
//! .tastr  string table (NUL separated names)
//! .taimp  {slot_vaddr u32, name_off u32} per import
//! .taent  {vaddr u32, name_off u32} per entrypoint
//! .tablk  u32 basic-block start addresses
//! .shstrtab
//! section headers (40 bytes each), 4-byte aligned
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::emucore::Perm;

pub const ELF_MAGIC: [u8; 4] = [0x7F, b'E', b'L', b'F'];
pub const EM_TAELF: u16 = 0x5441;
/// `e_flags` bit marking a statically linked TA.
pub const EF_TA_STATIC: u32 = 1;

const EHDR_SIZE: usize = 52;
const PHDR_SIZE: usize = 32;
const SHDR_SIZE: usize = 40;
const PT_LOAD: u32 = 1;
const SHT_STRTAB: u32 = 3;
pub const SHT_TA_IMPORTS: u32 = 0x8000_0001;
pub const SHT_TA_ENTRIES: u32 = 0x8000_0002;
pub const SHT_TA_BLOCKS: u32 = 0x8000_0003;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaElfError {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("missing TA_InvokeCommandEntryPoint")]
    MissingEntrypoint,
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, TaElfError> {
    Err(TaElfError::MalformedContainer(msg.into()))
}

/// The five GP entrypoints a TA may export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Entrypoint {
    Create,
    OpenSession,
    InvokeCommand,
    CloseSession,
    Destroy,
}

impl Entrypoint {
    pub const ALL: [Entrypoint; 5] = [
        Entrypoint::Create,
        Entrypoint::OpenSession,
        Entrypoint::InvokeCommand,
        Entrypoint::CloseSession,
        Entrypoint::Destroy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Entrypoint::Create => "TA_CreateEntryPoint",
            Entrypoint::OpenSession => "TA_OpenSessionEntryPoint",
            Entrypoint::InvokeCommand => "TA_InvokeCommandEntryPoint",
            Entrypoint::CloseSession => "TA_CloseSessionEntryPoint",
            Entrypoint::Destroy => "TA_DestroyEntryPoint",
        }
    }

    pub fn from_name(s: &str) -> Option<Entrypoint> {
        Entrypoint::ALL.into_iter().find(|e| e.name() == s)
    }
}

impl fmt::Display for Entrypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub vaddr: u32,
    pub perm: Perm,
    pub bytes: Vec<u8>,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.vaddr as u64 + self.bytes.len() as u64
    }

    pub fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.vaddr && addr as u64 + len as u64 <= self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Import {
    pub slot_vaddr: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaElfFile {
    pub segments: Vec<Segment>,
    pub imports: Vec<Import>,
    pub entrypoints: BTreeMap<Entrypoint, u32>,
    pub is_static: bool,
    /// Static basic-block start addresses (may be empty).
    pub blocks: Vec<u32>,
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn slice(&self, off: usize, len: usize, what: &str) -> Result<&'a [u8], TaElfError> {
        match off.checked_add(len) {
            Some(end) if end <= self.data.len() => Ok(&self.data[off..end]),
            _ => malformed(format!("{what} out of bounds")),
        }
    }

    fn u16(&self, off: usize) -> Result<u16, TaElfError> {
        let b = self.slice(off, 2, "field")?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, off: usize) -> Result<u32, TaElfError> {
        let b = self.slice(off, 4, "field")?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn le32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn cstr_at(table: &[u8], off: u32) -> Result<String, TaElfError> {
    let off = off as usize;
    if off >= table.len() {
        return malformed("string offset out of bounds");
    }
    let end = table[off..]
        .iter()
        .position(|b| *b == 0)
        .map(|p| off + p)
        .ok_or_else(|| TaElfError::MalformedContainer("unterminated string".into()))?;
    String::from_utf8(table[off..end].to_vec())
        .map_err(|_| TaElfError::MalformedContainer("non UTF-8 name".into()))
}

struct SectionHeader {
    name: u32,
    kind: u32,
    offset: u32,
    size: u32,
}

pub fn parse_taelf(bytes: &[u8]) -> Result<TaElfFile, TaElfError> {
    let r = Reader { data: bytes };
    if bytes.len() < EHDR_SIZE {
        return malformed("truncated ELF header");
    }
    if bytes[..4] != ELF_MAGIC {
        return malformed("bad ELF magic");
    }
    if bytes[4] != 1 || bytes[5] != 1 {
        return malformed("not ELF32 little-endian");
    }
    if r.u16(18)? != EM_TAELF {
        return malformed(format!("machine {:#06x} is not TAELF", r.u16(18)?));
    }
    let flags = r.u32(36)?;
    let phoff = r.u32(28)? as usize;
    let shoff = r.u32(32)? as usize;
    if r.u16(40)? as usize != EHDR_SIZE
        || r.u16(42)? as usize != PHDR_SIZE
        || r.u16(46)? as usize != SHDR_SIZE
    {
        return malformed("unexpected header entry sizes");
    }
    let phnum = r.u16(44)? as usize;
    let shnum = r.u16(48)? as usize;

    let mut segments = Vec::with_capacity(phnum);
    let phdrs = r.slice(phoff, phnum * PHDR_SIZE, "program headers")?;
    for ph in phdrs.chunks_exact(PHDR_SIZE) {
        if le32(ph, 0) != PT_LOAD {
            return malformed("only PT_LOAD program headers are supported");
        }
        let (off, vaddr, filesz, memsz, pflags) =
            (le32(ph, 4), le32(ph, 8), le32(ph, 16), le32(ph, 20), le32(ph, 24));
        if filesz != memsz {
            return malformed("segment memory size differs from file size");
        }
        if vaddr % 4 != 0 {
            return malformed(format!("segment {vaddr:#x} not 4-byte aligned"));
        }
        if vaddr as u64 + filesz as u64 > 1 << 32 {
            return malformed("segment wraps the address space");
        }
        let data = r.slice(off as usize, filesz as usize, "segment data")?;
        segments.push(Segment {
            vaddr,
            perm: Perm((pflags & 7) as u8),
            bytes: data.to_vec(),
        });
    }
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort_by_key(|s| s.vaddr);
    for pair in sorted.windows(2) {
        if pair[0].end() > pair[1].vaddr as u64 {
            return malformed(format!(
                "segments at {:#x} and {:#x} overlap",
                pair[0].vaddr, pair[1].vaddr
            ));
        }
    }

    let shdrs = r.slice(shoff, shnum * SHDR_SIZE, "section headers")?;
    let sections: Vec<SectionHeader> = shdrs
        .chunks_exact(SHDR_SIZE)
        .map(|sh| SectionHeader {
            name: le32(sh, 0),
            kind: le32(sh, 4),
            offset: le32(sh, 16),
            size: le32(sh, 20),
        })
        .collect();
    let shstrndx = r.u16(50)? as usize;
    let shstr = match sections.get(shstrndx) {
        Some(s) if s.kind == SHT_STRTAB => r.slice(s.offset as usize, s.size as usize, ".shstrtab")?,
        _ => return malformed("missing section name table"),
    };
    let find = |name: &str, kind: u32| -> Result<Option<&[u8]>, TaElfError> {
        for s in &sections {
            if s.kind == kind && cstr_at(shstr, s.name)? == name {
                return r.slice(s.offset as usize, s.size as usize, name).map(Some);
            }
        }
        Ok(None)
    };
    let strtab = find(".tastr", SHT_STRTAB)?
        .ok_or_else(|| TaElfError::MalformedContainer("missing .tastr".into()))?;
    let imp = find(".taimp", SHT_TA_IMPORTS)?
        .ok_or_else(|| TaElfError::MalformedContainer("missing .taimp".into()))?;
    let ent = find(".taent", SHT_TA_ENTRIES)?
        .ok_or_else(|| TaElfError::MalformedContainer("missing .taent".into()))?;
    let blk = find(".tablk", SHT_TA_BLOCKS)?.unwrap_or(&[]);
    if imp.len() % 8 != 0 || ent.len() % 8 != 0 || blk.len() % 4 != 0 {
        return malformed("table size not a multiple of its record size");
    }

    let mut imports = Vec::new();
    for rec in imp.chunks_exact(8) {
        let slot_vaddr = le32(rec, 0);
        let name = cstr_at(strtab, le32(rec, 4))?;
        if !segments
            .iter()
            .any(|s| s.perm.contains(Perm::W) && s.contains(slot_vaddr, 4))
        {
            return malformed(format!(
                "import {name} slot {slot_vaddr:#x} is not in a writable segment"
            ));
        }
        imports.push(Import { slot_vaddr, name });
    }

    let mut entrypoints = BTreeMap::new();
    for rec in ent.chunks_exact(8) {
        let vaddr = le32(rec, 0);
        let name = cstr_at(strtab, le32(rec, 4))?;
        let ep = Entrypoint::from_name(&name)
            .ok_or_else(|| TaElfError::MalformedContainer(format!("unknown entrypoint {name}")))?;
        if entrypoints.insert(ep, vaddr).is_some() {
            return malformed(format!("duplicate entrypoint {name}"));
        }
    }

    let is_static = flags & EF_TA_STATIC != 0;
    if is_static && !imports.is_empty() {
        return malformed("static TA carries an import table");
    }
    if !entrypoints.contains_key(&Entrypoint::InvokeCommand) {
        return Err(TaElfError::MissingEntrypoint);
    }
    let blocks = blk.chunks_exact(4).map(|b| le32(b, 0)).collect();

    Ok(TaElfFile {
        segments,
        imports,
        entrypoints,
        is_static,
        blocks,
    })
}

fn pad4(buf: &mut Vec<u8>) {
    while buf.len() % 4 != 0 {
        buf.push(0);
    }
}

fn put16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

impl TaElfFile {
    pub fn entry(&self, ep: Entrypoint) -> Option<u32> {
        self.entrypoints.get(&ep).copied()
    }

    /// Canonical serialization; `parse_taelf(f.to_bytes()) == f`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut strtab = vec![0u8];
        let mut intern = |name: &str| {
            let off = strtab.len() as u32;
            strtab.extend_from_slice(name.as_bytes());
            strtab.push(0);
            off
        };
        let mut imp = Vec::new();
        for i in &self.imports {
            put32(&mut imp, i.slot_vaddr);
            put32(&mut imp, intern(&i.name));
        }
        let mut ent = Vec::new();
        for (ep, vaddr) in &self.entrypoints {
            put32(&mut ent, *vaddr);
            put32(&mut ent, intern(ep.name()));
        }
        let mut blk = Vec::new();
        for b in &self.blocks {
            put32(&mut blk, *b);
        }

        let names = ["", ".shstrtab", ".tastr", ".taimp", ".taent", ".tablk"];
        let mut shstr = Vec::new();
        let mut name_off = Vec::new();
        for n in names {
            name_off.push(shstr.len() as u32);
            shstr.extend_from_slice(n.as_bytes());
            shstr.push(0);
        }

        let phoff = EHDR_SIZE;
        let mut body = Vec::new();
        let data_start = phoff + PHDR_SIZE * self.segments.len();
        let mut seg_offsets = Vec::new();
        for s in &self.segments {
            seg_offsets.push((data_start + body.len()) as u32);
            body.extend_from_slice(&s.bytes);
            pad4(&mut body);
        }
        let place = |body: &mut Vec<u8>, data: &[u8]| {
            let off = (data_start + body.len()) as u32;
            body.extend_from_slice(data);
            pad4(body);
            (off, data.len() as u32)
        };
        let strtab_loc = place(&mut body, &strtab);
        let imp_loc = place(&mut body, &imp);
        let ent_loc = place(&mut body, &ent);
        let blk_loc = place(&mut body, &blk);
        let shstr_loc = place(&mut body, &shstr);
        let shoff = data_start + body.len();

        let mut out = Vec::with_capacity(shoff + SHDR_SIZE * names.len());
        out.extend_from_slice(&ELF_MAGIC);
        out.extend_from_slice(&[1, 1, 1, 0]);
        out.extend_from_slice(&[0; 8]);
        put16(&mut out, 2); // ET_EXEC
        put16(&mut out, EM_TAELF);
        put32(&mut out, 1);
        put32(&mut out, self.entry(Entrypoint::InvokeCommand).unwrap_or(0));
        put32(&mut out, phoff as u32);
        put32(&mut out, shoff as u32);
        put32(&mut out, if self.is_static { EF_TA_STATIC } else { 0 });
        put16(&mut out, EHDR_SIZE as u16);
        put16(&mut out, PHDR_SIZE as u16);
        put16(&mut out, self.segments.len() as u16);
        put16(&mut out, SHDR_SIZE as u16);
        put16(&mut out, names.len() as u16);
        put16(&mut out, 1);

        for (s, off) in self.segments.iter().zip(&seg_offsets) {
            put32(&mut out, PT_LOAD);
            put32(&mut out, *off);
            put32(&mut out, s.vaddr);
            put32(&mut out, s.vaddr);
            put32(&mut out, s.bytes.len() as u32);
            put32(&mut out, s.bytes.len() as u32);
            put32(&mut out, s.perm.0 as u32);
            put32(&mut out, 4);
        }
        out.extend_from_slice(&body);

        let sections = [
            (0, 0, (0, 0), 0, 0),
            (name_off[1], SHT_STRTAB, shstr_loc, 0, 0),
            (name_off[2], SHT_STRTAB, strtab_loc, 0, 0),
            (name_off[3], SHT_TA_IMPORTS, imp_loc, 2, 8),
            (name_off[4], SHT_TA_ENTRIES, ent_loc, 2, 8),
            (name_off[5], SHT_TA_BLOCKS, blk_loc, 0, 4),
        ];
        for (name, kind, (off, size), link, entsize) in sections {
            put32(&mut out, name);
            put32(&mut out, kind);
            put32(&mut out, 0); // sh_flags
            put32(&mut out, 0); // sh_addr
            put32(&mut out, off);
            put32(&mut out, size);
            put32(&mut out, link);
            put32(&mut out, 0); // sh_info
            put32(&mut out, if kind == 0 { 0 } else { 1 });
            put32(&mut out, entsize);
        }
        out
    }
}

//! Sparse paged guest memory with per-page permissions and dirty tracking.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::{BitOr, BitOrAssign};

pub const PAGE_SIZE: u32 = 4096;
const PAGE_SHIFT: u32 = 12;

/// Page permissions, using the ELF `p_flags` bit assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perm(pub u8);

impl Perm {
    pub const NONE: Perm = Perm(0);
    pub const X: Perm = Perm(1);
    pub const W: Perm = Perm(2);
    pub const R: Perm = Perm(4);
    pub const RW: Perm = Perm(6);
    pub const RX: Perm = Perm(5);
    pub const RWX: Perm = Perm(7);

    pub fn contains(self, other: Perm) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn parse(s: &str) -> Option<Perm> {
        let mut p = Perm::NONE;
        for c in s.chars() {
            p |= match c.to_ascii_lowercase() {
                'r' => Perm::R,
                'w' => Perm::W,
                'x' => Perm::X,
                '-' => Perm::NONE,
                _ => return None,
            };
        }
        Some(p)
    }
}

impl BitOr for Perm {
    type Output = Perm;
    fn bitor(self, rhs: Perm) -> Perm {
        Perm(self.0 | rhs.0)
    }
}

impl BitOrAssign for Perm {
    fn bitor_assign(&mut self, rhs: Perm) {
        self.0 |= rhs.0;
    }
}

impl fmt::Display for Perm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |p: Perm, ch: char| if self.contains(p) { ch } else { '-' };
        write!(f, "{}{}{}", c(Perm::R, 'r'), c(Perm::W, 'w'), c(Perm::X, 'x'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

impl AccessKind {
    fn required(self) -> Perm {
        match self {
            AccessKind::Read => Perm::R,
            AccessKind::Write => Perm::W,
            AccessKind::Fetch => Perm::X,
        }
    }
}

/// A guest access that hit an unmapped page or lacked permission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemFault {
    pub addr: u32,
    pub kind: AccessKind,
}

#[derive(Clone)]
struct Page {
    perm: Perm,
    data: Box<[u8; PAGE_SIZE as usize]>,
}

impl Page {
    fn new(perm: Perm) -> Page {
        Page {
            perm,
            data: Box::new([0; PAGE_SIZE as usize]),
        }
    }
}

#[derive(Clone, Default)]
pub struct Memory {
    pages: BTreeMap<u32, Page>,
    dirty: HashSet<u32>,
}

/// Full copy of the page table taken by [`Memory::checkpoint`].
#[derive(Clone)]
pub struct MemoryImage {
    pages: BTreeMap<u32, Page>,
}

fn page_of(addr: u32) -> u32 {
    addr >> PAGE_SHIFT
}

fn page_span(start: u32, len: u32) -> std::ops::RangeInclusive<u32> {
    let last = (start as u64 + len.max(1) as u64 - 1).min(u32::MAX as u64);
    page_of(start)..=((last >> PAGE_SHIFT) as u32)
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    /// Maps every page touching `[start, start+len)`. Pages that are
    /// already mapped keep their contents and gain `perm`.
    pub fn map(&mut self, start: u32, len: u32, perm: Perm) {
        for p in page_span(start, len.max(1)) {
            self.pages
                .entry(p)
                .and_modify(|page| page.perm |= perm)
                .or_insert_with(|| Page::new(perm));
            self.dirty.insert(p);
        }
    }

    pub fn unmap(&mut self, start: u32, len: u32) {
        let mapped: Vec<u32> = self.pages.range(page_span(start, len)).map(|(p, _)| *p).collect();
        for p in mapped {
            self.pages.remove(&p);
            self.dirty.insert(p);
        }
    }

    pub fn protect(&mut self, start: u32, len: u32, perm: Perm) {
        for p in page_span(start, len.max(1)) {
            if let Some(page) = self.pages.get_mut(&p) {
                page.perm = perm;
                self.dirty.insert(p);
            }
        }
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        self.pages.contains_key(&page_of(addr))
    }

    pub fn perm_at(&self, addr: u32) -> Option<Perm> {
        self.pages.get(&page_of(addr)).map(|p| p.perm)
    }

    /// True when any page in the range is mapped.
    pub fn any_mapped(&self, start: u32, len: u32) -> bool {
        self.pages.range(page_span(start, len)).next().is_some()
    }

    /// Checks that `[start, start+len)` is mapped with at least `perm`,
    /// returning the first offending address otherwise. Ranges that wrap
    /// past the top of the address space fail at the wrap point.
    pub fn check_range(&self, start: u32, len: u32, perm: Perm) -> Result<(), u32> {
        if len == 0 {
            return Ok(());
        }
        let end = start as u64 + len as u64;
        let mut addr = start as u64;
        while addr < end {
            if addr > u32::MAX as u64 {
                return Err(0);
            }
            match self.pages.get(&page_of(addr as u32)) {
                Some(page) if page.perm.contains(perm) => {}
                _ => return Err(addr as u32),
            }
            addr = ((addr >> PAGE_SHIFT) + 1) << PAGE_SHIFT;
        }
        Ok(())
    }

    fn access(&self, addr: u32, len: u32, kind: AccessKind) -> Result<(), MemFault> {
        self.check_range(addr, len, kind.required())
            .map_err(|addr| MemFault { addr, kind })
    }

    /// Reads with permission checks.
    pub fn read(&self, addr: u32, buf: &mut [u8], kind: AccessKind) -> Result<(), MemFault> {
        self.access(addr, buf.len() as u32, kind)?;
        self.copy_out(addr, buf);
        Ok(())
    }

    pub fn write(&mut self, addr: u32, data: &[u8]) -> Result<(), MemFault> {
        self.access(addr, data.len() as u32, AccessKind::Write)?;
        self.copy_in(addr, data);
        Ok(())
    }

    /// Reads mapped memory regardless of permissions.
    pub fn read_raw(&self, addr: u32, buf: &mut [u8]) -> Result<(), MemFault> {
        self.check_range(addr, buf.len() as u32, Perm::NONE)
            .map_err(|addr| MemFault {
                addr,
                kind: AccessKind::Read,
            })?;
        self.copy_out(addr, buf);
        Ok(())
    }

    /// Writes mapped memory regardless of permissions (loader, debugger).
    pub fn write_raw(&mut self, addr: u32, data: &[u8]) -> Result<(), MemFault> {
        self.check_range(addr, data.len() as u32, Perm::NONE)
            .map_err(|addr| MemFault {
                addr,
                kind: AccessKind::Write,
            })?;
        self.copy_in(addr, data);
        Ok(())
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, MemFault> {
        let mut b = [0; 4];
        self.read(addr, &mut b, AccessKind::Read)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Result<(), MemFault> {
        self.write(addr, &value.to_le_bytes())
    }

    pub fn read_vec(&self, addr: u32, len: u32) -> Result<Vec<u8>, MemFault> {
        let mut v = vec![0; len as usize];
        self.read(addr, &mut v, AccessKind::Read)?;
        Ok(v)
    }

    fn copy_out(&self, addr: u32, buf: &mut [u8]) {
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr.wrapping_add(done as u32);
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            let page = &self.pages[&page_of(a)];
            buf[done..done + n].copy_from_slice(&page.data[off..off + n]);
            done += n;
        }
    }

    fn copy_in(&mut self, addr: u32, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr.wrapping_add(done as u32);
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let idx = page_of(a);
            let page = self.pages.get_mut(&idx).expect("range checked");
            page.data[off..off + n].copy_from_slice(&data[done..done + n]);
            self.dirty.insert(idx);
            done += n;
        }
    }

    /// Sorted list of `(page_base, perm)` for every mapped page.
    pub fn mappings(&self) -> Vec<(u32, Perm)> {
        self.pages
            .iter()
            .map(|(idx, p)| (idx << PAGE_SHIFT, p.perm))
            .collect()
    }

    /// Copies the whole page table and clears the dirty set, so a later
    /// [`Memory::rollback`] only touches pages written since.
    pub fn checkpoint(&mut self) -> MemoryImage {
        self.dirty.clear();
        MemoryImage {
            pages: self.pages.clone(),
        }
    }

    /// Restores pages dirtied since the matching checkpoint.
    pub fn rollback(&mut self, image: &MemoryImage) {
        for idx in self.dirty.drain() {
            match image.pages.get(&idx) {
                Some(saved) => match self.pages.get_mut(&idx) {
                    Some(cur) => {
                        cur.perm = saved.perm;
                        cur.data.copy_from_slice(&saved.data[..]);
                    }
                    None => {
                        self.pages.insert(idx, saved.clone());
                    }
                },
                None => {
                    self.pages.remove(&idx);
                }
            }
        }
    }

    /// Replaces the whole page table with `image`.
    pub fn reset_to(&mut self, image: &MemoryImage) {
        self.pages = image.pages.clone();
        self.dirty.clear();
    }

    /// Byte-wise equality of two memories (mapping, permissions, contents).
    pub fn same_contents(&self, other: &Memory) -> bool {
        self.pages.len() == other.pages.len()
            && self.pages.iter().all(|(idx, p)| {
                other
                    .pages
                    .get(idx)
                    .is_some_and(|q| q.perm == p.perm && q.data[..] == p.data[..])
            })
    }
}

impl fmt::Debug for Memory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Memory")
            .field("pages", &self.pages.len())
            .field("dirty", &self.dirty.len())
            .finish()
    }
}

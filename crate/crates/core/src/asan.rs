//! Redzone heap used by every memory-touching API handler.
//!
//! Chunks are carved from a bump arena at [`HEAP_BASE`]:
//! `[16-byte left redzone][user bytes, padded to 8][16-byte right redzone]`.
//! Validation only happens at API boundaries; raw guest loads and stores
//! are checked against page mappings alone.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::emucore::{Memory, Perm};
use crate::outcome::{Violation, ViolationKind};

pub const HEAP_BASE: u32 = 0x4000_0000;
pub const HEAP_CAP: u32 = 16 << 20;
pub const REDZONE: u32 = 16;
pub const POISON: u8 = 0xA5;
pub const QUARANTINE_DEPTH: usize = 64;

/// `Ok` or the violation found; see [`AsanHeap::is_access_valid`].
pub type AccessVerdict = Result<(), Violation>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkState {
    Allocated,
    Freed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub user_size: u32,
    /// User size rounded up to 8; fixes the chunk's extent for life.
    pub padded: u32,
    pub state: ChunkState,
}

impl Chunk {
    fn extent(&self, base: u32) -> (u32, u32) {
        (base - REDZONE, base + self.padded + REDZONE)
    }
}

fn round8(n: u32) -> u32 {
    (n + 7) & !7
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AsanHeap {
    chunks: BTreeMap<u32, Chunk>,
    quarantine: VecDeque<u32>,
    /// Chunks evicted from quarantine, by padded size, ready for reuse.
    recycled: BTreeMap<u32, BTreeSet<u32>>,
    /// Bytes of arena handed out so far.
    cursor: u32,
    mapped_to: u32,
}

impl AsanHeap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chunk(&self, base: u32) -> Option<&Chunk> {
        self.chunks.get(&base)
    }

    pub fn chunks(&self) -> impl Iterator<Item = (u32, &Chunk)> {
        self.chunks.iter().map(|(b, c)| (*b, c))
    }

    pub fn live_chunks(&self) -> usize {
        self.chunks
            .values()
            .filter(|c| c.state == ChunkState::Allocated)
            .count()
    }

    pub fn quarantine(&self) -> impl Iterator<Item = u32> + '_ {
        self.quarantine.iter().copied()
    }

    pub fn arena_end(&self) -> u32 {
        HEAP_BASE + self.cursor
    }

    pub fn in_arena(addr: u32) -> bool {
        (HEAP_BASE..HEAP_BASE + HEAP_CAP).contains(&addr)
    }

    /// Allocates `size` bytes; returns 0 when the arena is exhausted.
    pub fn alloc(&mut self, mem: &mut Memory, size: u32, zero: bool) -> u32 {
        if size > HEAP_CAP {
            return 0;
        }
        let padded = round8(size);
        let reuse = self.recycled.get_mut(&padded).and_then(|set| set.pop_first());
        let base = match reuse {
            Some(b) => {
                if self.recycled.get(&padded).is_some_and(|s| s.is_empty()) {
                    self.recycled.remove(&padded);
                }
                b
            }
            None => {
                let extent = padded as u64 + 2 * REDZONE as u64;
                if self.cursor as u64 + extent > HEAP_CAP as u64 {
                    return 0;
                }
                let base = HEAP_BASE + self.cursor + REDZONE;
                self.cursor += extent as u32;
                self.ensure_mapped(mem);
                base
            }
        };

        mem.write_raw(base - REDZONE, &[POISON; REDZONE as usize])
            .expect("arena mapped");
        if zero {
            mem.write_raw(base, &vec![0; size as usize])
                .expect("arena mapped");
        }
        let tail = padded - size + REDZONE;
        mem.write_raw(base + size, &vec![POISON; tail as usize])
            .expect("arena mapped");
        self.chunks.insert(
            base,
            Chunk {
                user_size: size,
                padded,
                state: ChunkState::Allocated,
            },
        );
        base
    }

    fn ensure_mapped(&mut self, mem: &mut Memory) {
        let end = HEAP_BASE + self.cursor;
        if end > self.mapped_to.max(HEAP_BASE) {
            let start = self.mapped_to.max(HEAP_BASE);
            mem.map(start, end - start, Perm::RW);
            self.mapped_to = end.div_ceil(crate::emucore::PAGE_SIZE) * crate::emucore::PAGE_SIZE;
        }
    }

    /// Frees `ptr`. NULL is a no-op.
    pub fn free(&mut self, mem: &mut Memory, ptr: u32) -> AccessVerdict {
        if ptr == 0 {
            return Ok(());
        }
        let Some(chunk) = self.chunks.get_mut(&ptr) else {
            let owner = self.chunk_containing(ptr).map(|(b, _)| b);
            return Err(Violation {
                kind: ViolationKind::InvalidFree,
                chunk_base: owner,
                offset: 0,
            });
        };
        if chunk.state == ChunkState::Freed {
            return Err(Violation {
                kind: ViolationKind::DoubleFree,
                chunk_base: Some(ptr),
                offset: 0,
            });
        }
        chunk.state = ChunkState::Freed;
        let padded = chunk.padded;
        mem.write_raw(ptr, &vec![POISON; padded as usize])
            .expect("arena mapped");
        self.quarantine.push_back(ptr);
        if self.quarantine.len() > QUARANTINE_DEPTH {
            let old = self.quarantine.pop_front().expect("non-empty");
            let p = self.chunks[&old].padded;
            self.recycled.entry(p).or_default().insert(old);
        }
        Ok(())
    }

    /// Chunk whose extent (redzones included) holds `addr`.
    fn chunk_containing(&self, addr: u32) -> Option<(u32, &Chunk)> {
        let (base, chunk) = self
            .chunks
            .range(..=addr.saturating_add(REDZONE))
            .next_back()?;
        let (lo, hi) = chunk.extent(*base);
        (lo <= addr && addr < hi).then_some((*base, chunk))
    }

    /// Checks an API-mediated access of `size` bytes at `base`.
    ///
    /// Heap accesses must lie inside one allocated chunk's user bytes.
    /// Other accesses must be mapped with the needed permission and stay
    /// out of the arena. The reported offset is the distance from `base`
    /// to the first offending byte.
    pub fn is_access_valid(&self, mem: &Memory, base: u32, size: u32, is_write: bool) -> AccessVerdict {
        if size == 0 {
            return Ok(());
        }
        let oob = if is_write {
            ViolationKind::OobWrite
        } else {
            ViolationKind::OobRead
        };
        let wild = |offset| Violation {
            kind: ViolationKind::WildAccess,
            chunk_base: None,
            offset,
        };
        if base as u64 + size as u64 > 1 << 32 {
            return Err(wild(0));
        }

        if Self::in_arena(base) {
            let Some((cbase, chunk)) = self.chunk_containing(base) else {
                return Err(wild(0));
            };
            let violation = |kind, offset| Violation {
                kind,
                chunk_base: Some(cbase),
                offset,
            };
            if chunk.state == ChunkState::Freed {
                return Err(violation(ViolationKind::UseAfterFree, 0));
            }
            let user_end = cbase + chunk.user_size;
            if base < cbase || base >= user_end {
                return Err(violation(oob, 0));
            }
            if base as u64 + size as u64 > user_end as u64 {
                return Err(violation(oob, user_end - base));
            }
            return Ok(());
        }

        let need = if is_write { Perm::W } else { Perm::R };
        let first_bad_map = mem.check_range(base, size, need).err();
        let end = base as u64 + size as u64;
        let first_arena = (base < HEAP_BASE && end > HEAP_BASE as u64).then_some(HEAP_BASE);
        match (first_bad_map, first_arena) {
            (None, None) => Ok(()),
            (a, b) => {
                let addr = a.unwrap_or(u32::MAX).min(b.unwrap_or(u32::MAX));
                Err(wild(addr - base))
            }
        }
    }
}

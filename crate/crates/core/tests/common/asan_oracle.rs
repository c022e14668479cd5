use std::collections::BTreeMap;

use proptest::prelude::*;
use taemu::asan::{AsanHeap, HEAP_BASE, POISON, QUARANTINE_DEPTH, REDZONE};
use taemu::emucore::Memory;
use taemu::{Violation, ViolationKind};

#[derive(Debug, Clone)]
pub enum Op {
    Alloc(u32),
    Free { pick: usize, delta: i32 },
    Access { pick: usize, offset: i32, len: u32, write: bool },
    PastEnd { gap: u32, len: u32 },
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u32..=96).prop_map(Op::Alloc),
        2 => (any::<usize>(), prop_oneof![4 => Just(0), 1 => Just(1), 1 => Just(8), 1 => Just(-8)])
            .prop_map(|(pick, delta)| Op::Free { pick, delta }),
        4 => (any::<usize>(), -24i32..=120, 1u32..=40, any::<bool>())
            .prop_map(|(pick, offset, len, write)| Op::Access { pick, offset, len, write }),
        1 => (0u32..64, 1u32..=16).prop_map(|(gap, len)| Op::PastEnd { gap, len }),
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct OChunk {
    size: u32,
    live: bool,
    /// Number of frees performed when this one was freed.
    freed_at: u64,
}

/// Independent model: chunk table by base, with layout
/// `[16 redzone][size rounded to 8][16 redzone]`.
#[derive(Default)]
pub struct Oracle {
    chunks: BTreeMap<u32, OChunk>,
    order: Vec<u32>,
    frees: u64,
}

pub fn padded(size: u32) -> u32 {
    size.div_ceil(8) * 8
}

impl Oracle {
    pub fn extent(base: u32, c: &OChunk) -> (u32, u32) {
        (base - 16, base + padded(c.size) + 16)
    }

    fn owner(&self, addr: u32) -> Option<(u32, OChunk)> {
        self.chunks.iter().find_map(|(b, c)| {
            let (lo, hi) = Self::extent(*b, c);
            (lo <= addr && addr < hi).then_some((*b, *c))
        })
    }

    /// Plain interval-containment check on the live user ranges.
    fn inside_live(&self, start: u32, len: u32) -> bool {
        let end = start as u64 + len as u64;
        self.chunks
            .iter()
            .any(|(b, c)| c.live && *b <= start && end <= *b as u64 + c.size as u64)
    }

    fn access(&self, start: u32, len: u32, write: bool) -> Result<(), Violation> {
        let oob = if write { ViolationKind::OobWrite } else { ViolationKind::OobRead };
        let Some((base, c)) = self.owner(start) else {
            return Err(Violation { kind: ViolationKind::WildAccess, chunk_base: None, offset: 0 });
        };
        let v = |kind, offset| Err(Violation { kind, chunk_base: Some(base), offset });
        if !c.live {
            return v(ViolationKind::UseAfterFree, 0);
        }
        if start < base || start >= base + c.size {
            return v(oob, 0);
        }
        if start as u64 + len as u64 > (base + c.size) as u64 {
            return v(oob, base + c.size - start);
        }
        Ok(())
    }

    fn free(&mut self, ptr: u32) -> Result<(), ViolationKind> {
        if ptr == 0 {
            return Ok(());
        }
        match self.chunks.get_mut(&ptr) {
            None => Err(ViolationKind::InvalidFree),
            Some(c) if !c.live => Err(ViolationKind::DoubleFree),
            Some(c) => {
                self.frees += 1;
                c.live = false;
                c.freed_at = self.frees;
                Ok(())
            }
        }
    }

    fn end(&self) -> u32 {
        self.chunks
            .iter()
            .map(|(b, c)| Self::extent(*b, c).1)
            .max()
            .unwrap_or(HEAP_BASE)
    }
}

pub fn run_sequence(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut heap = AsanHeap::new();
    let mut mem = Memory::new();
    let mut o = Oracle::default();
    for op in ops {
        match *op {
            Op::Alloc(size) => {
                let p = heap.alloc(&mut mem, size, true);
                prop_assert!(p != 0);
                prop_assert_eq!(p % 8, 0);
                let (lo, hi) = (p - REDZONE, p + padded(size) + REDZONE);
                for (b, c) in &o.chunks {
                    let (clo, chi) = Oracle::extent(*b, c);
                    if *b == p {
                        prop_assert!(!c.live, "live chunk {p:#x} handed out twice");
                        prop_assert_eq!(padded(c.size), padded(size));
                        prop_assert!(o.frees - c.freed_at >= QUARANTINE_DEPTH as u64, "reused inside quarantine");
                    } else {
                        prop_assert!(hi <= clo || chi <= lo, "extent overlaps {b:#x}");
                    }
                }
                prop_assert_eq!(mem.read_vec(p, size).unwrap(), vec![0; size as usize]);
                prop_assert_eq!(mem.read_vec(lo, REDZONE).unwrap(), vec![POISON; 16]);
                prop_assert_eq!(
                    mem.read_vec(p + size, hi - p - size).unwrap(),
                    vec![POISON; (hi - p - size) as usize]
                );
                if !o.chunks.contains_key(&p) {
                    o.order.push(p);
                }
                o.chunks.insert(p, OChunk { size, live: true, freed_at: 0 });
            }
            Op::Free { pick, delta } => {
                if o.order.is_empty() {
                    continue;
                }
                let ptr = o.order[pick % o.order.len()].wrapping_add_signed(delta);
                let expect = o.free(ptr);
                let got = heap.free(&mut mem, ptr).map_err(|v| v.kind);
                prop_assert_eq!(got, expect, "free({:#x})", ptr);
            }
            Op::Access { pick, offset, len, write } => {
                if o.order.is_empty() {
                    continue;
                }
                let base = o.order[pick % o.order.len()];
                let start = base.wrapping_add_signed(offset);
                let expect = o.access(start, len, write);
                prop_assert_eq!(expect.is_ok(), o.inside_live(start, len));
                let got = heap.is_access_valid(&mem, start, len, write);
                prop_assert_eq!(got, expect, "access({:#x}, {})", start, len);
            }
            Op::PastEnd { gap, len } => {
                let start = o.end() + gap;
                let got = heap.is_access_valid(&mem, start, len, false);
                prop_assert_eq!(got, o.access(start, len, false));
            }
        }
    }
    prop_assert_eq!(heap.live_chunks(), o.chunks.values().filter(|c| c.live).count());
    Ok(())
}


//! Memory shared between a client and the guest.
//!
//! Backings tolerate concurrent raw mutation by another thread or process;
//! the guest only observes them at explicit sync points.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

pub trait ShmBacking: Send + Sync + fmt::Debug {
    fn len(&self) -> usize;
    fn read_at(&self, off: usize, buf: &mut [u8]);
    fn write_at(&self, off: usize, data: &[u8]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_vec(&self) -> Vec<u8> {
        let mut v = vec![0; self.len()];
        self.read_at(0, &mut v);
        v
    }
}

/// In-process backing; clones share the same bytes.
#[derive(Clone)]
pub struct MemBacking(Arc<[AtomicU8]>);

impl MemBacking {
    pub fn new(bytes: &[u8]) -> Self {
        MemBacking(bytes.iter().map(|b| AtomicU8::new(*b)).collect())
    }
}

impl fmt::Debug for MemBacking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MemBacking({} bytes)", self.0.len())
    }
}

impl ShmBacking for MemBacking {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn read_at(&self, off: usize, buf: &mut [u8]) {
        for (b, cell) in buf.iter_mut().zip(&self.0[off..]) {
            *b = cell.load(Ordering::Relaxed);
        }
    }

    fn write_at(&self, off: usize, data: &[u8]) {
        for (b, cell) in data.iter().zip(&self.0[off..]) {
            cell.store(*b, Ordering::Relaxed);
        }
    }
}

/// File-backed buffer a separate client process can open and mutate.
#[derive(Debug)]
pub struct FileBacking {
    file: File,
    len: usize,
    path: PathBuf,
}

impl FileBacking {
    /// Opens an existing file; its current size is the region length.
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len() as usize;
        Ok(FileBacking {
            file,
            len,
            path: path.to_path_buf(),
        })
    }

    /// Creates (or truncates) `path` holding `bytes`.
    pub fn create(path: &Path, bytes: &[u8]) -> io::Result<Self> {
        std::fs::write(path, bytes)?;
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl ShmBacking for FileBacking {
    fn len(&self) -> usize {
        self.len
    }

    fn read_at(&self, off: usize, buf: &mut [u8]) {
        if let Err(e) = self.file.read_exact_at(buf, off as u64) {
            log::warn!("shared file {}: {e}", self.path.display());
        }
    }

    fn write_at(&self, off: usize, data: &[u8]) {
        if let Err(e) = self.file.write_all_at(data, off as u64) {
            log::warn!("shared file {}: {e}", self.path.display());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShmDirection {
    In,
    Out,
    InOut,
}

impl ShmDirection {
    pub fn syncs_in(self) -> bool {
        matches!(self, ShmDirection::In | ShmDirection::InOut)
    }

    pub fn syncs_out(self) -> bool {
        matches!(self, ShmDirection::Out | ShmDirection::InOut)
    }
}

#[derive(Debug, Clone)]
pub struct SharedRegion {
    pub guest_vaddr: u32,
    pub length: u32,
    pub backing: Arc<dyn ShmBacking>,
    pub direction: ShmDirection,
}

impl SharedRegion {
    /// Overlap of `[addr, addr+len)` with this region as
    /// `(guest address, offset into backing, length)`.
    pub fn overlap(&self, addr: u32, len: u32) -> Option<(u32, usize, usize)> {
        let lo = (addr as u64).max(self.guest_vaddr as u64);
        let hi = (addr as u64 + len as u64).min(self.guest_vaddr as u64 + self.length as u64);
        (lo < hi).then(|| {
            (
                lo as u32,
                (lo - self.guest_vaddr as u64) as usize,
                (hi - lo) as usize,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mem_backing_is_shared_between_clones() {
        let a = MemBacking::new(&[1, 2, 3]);
        let b = a.clone();
        b.write_at(1, &[9]);
        assert_eq!(a.to_vec(), vec![1, 9, 3]);
    }

    #[test]
    fn file_backing_sees_external_writes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buf");
        let f = FileBacking::create(&p, &[0; 8]).unwrap();
        std::fs::OpenOptions::new()
            .write(true)
            .open(&p)
            .unwrap()
            .write_all_at(&[7, 7], 2)
            .unwrap();
        assert_eq!(f.to_vec(), vec![0, 0, 7, 7, 0, 0, 0, 0]);
    }

    #[test]
    fn overlap_math() {
        let r = SharedRegion {
            guest_vaddr: 0x100,
            length: 0x10,
            backing: Arc::new(MemBacking::new(&[0; 16])),
            direction: ShmDirection::InOut,
        };
        assert_eq!(r.overlap(0xF8, 0x10), Some((0x100, 0, 8)));
        assert_eq!(r.overlap(0x108, 0x100), Some((0x108, 8, 8)));
        assert_eq!(r.overlap(0x110, 4), None);
    }
}

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::shm::SharedRegion;
use super::{
    TEE_ERROR_ACCESS_CONFLICT, TEE_ERROR_BAD_PARAMETERS, TEE_ERROR_BAD_STATE,
    TEE_ERROR_ITEM_NOT_FOUND, TEE_ERROR_SHORT_BUFFER, TEE_ERROR_STORAGE_NO_SPACE,
};
use crate::asan::AsanHeap;
use crate::emucore::Memory;

/// Per-object storage cap.
pub const STORAGE_CAP: usize = 1 << 20;

/// Fixed device key returned by the `tee_get_key` extension.
pub const DEVICE_KEY: [u8; 16] = *b"TAEMU-DEVICE-KEY";

const RNG_SEED: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("object not found")]
    ItemNotFound,
    #[error("bad object handle")]
    BadHandle,
    #[error("object already exists")]
    AccessConflict,
    #[error("storage cap exceeded")]
    StorageFull,
}

impl StorageError {
    pub fn code(self) -> u32 {
        match self {
            StorageError::ItemNotFound => TEE_ERROR_ITEM_NOT_FOUND,
            StorageError::BadHandle => TEE_ERROR_BAD_PARAMETERS,
            StorageError::AccessConflict => TEE_ERROR_ACCESS_CONFLICT,
            StorageError::StorageFull => TEE_ERROR_STORAGE_NO_SPACE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("bad operation handle")]
    BadHandle,
    #[error("operation has no key")]
    KeyNotSet,
    #[error("output buffer too small, {needed} bytes needed")]
    ShortBuffer { needed: u32 },
}

impl CryptoError {
    pub fn code(self) -> u32 {
        match self {
            CryptoError::BadHandle => TEE_ERROR_BAD_PARAMETERS,
            CryptoError::KeyNotSet => TEE_ERROR_BAD_STATE,
            CryptoError::ShortBuffer { .. } => TEE_ERROR_SHORT_BUFFER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenObject {
    pub name: Vec<u8>,
    pub cursor: usize,
}

/// A cipher operation. The cipher is a placeholder XOR with the key
/// repeated; it is not cryptography.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CryptoOp {
    pub alg: u32,
    pub mode: u32,
    pub key: Option<Vec<u8>>,
}

/// Everything the virtual TEE tracks across API calls.
#[derive(Debug, Clone)]
pub struct TeeState {
    pub heap: AsanHeap,
    pub objects: BTreeMap<Vec<u8>, Vec<u8>>,
    pub open_objects: BTreeMap<u32, OpenObject>,
    pub crypto_ops: BTreeMap<u32, CryptoOp>,
    pub properties: BTreeMap<String, String>,
    pub shm: Vec<SharedRegion>,
    pub panic_code: Option<u32>,
    /// Bumped on every API call; snapshots carry it.
    pub epoch: u64,
    pub log: Vec<String>,
    /// APIs before which the pause hook fires.
    pub pause_at: BTreeSet<String>,
    next_handle: u32,
    rng: u64,
}

impl Default for TeeState {
    fn default() -> Self {
        TeeState::new()
    }
}

impl TeeState {
    pub fn new() -> Self {
        let properties = [
            ("gpd.tee.apiversion", "1.3.1"),
            ("gpd.tee.description", "taemu virtual TEE"),
            ("gpd.tee.deviceID", "00000000-7461-656d-7500-000000000001"),
            ("gpd.tee.systemTime.protectionLevel", "100"),
            ("gpd.tee.trustedos.implementation.version", "taemu-1"),
            ("gpd.tee.trustedos.manufacturer", "taemu"),
            ("gpd.tee.firmware.manufacturer", "taemu"),
            ("gpd.client.identity", "0:00000000-0000-0000-0000-000000000000"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        TeeState {
            heap: AsanHeap::new(),
            objects: BTreeMap::new(),
            open_objects: BTreeMap::new(),
            crypto_ops: BTreeMap::new(),
            properties,
            shm: Vec::new(),
            panic_code: None,
            epoch: 0,
            log: Vec::new(),
            pause_at: BTreeSet::new(),
            next_handle: 1,
            rng: RNG_SEED,
        }
    }

    fn handle(&mut self) -> u32 {
        let h = self.next_handle;
        self.next_handle = self.next_handle.wrapping_add(1).max(1);
        self.epoch += 1;
        h
    }

    /// Deterministic xorshift64 stream.
    pub fn random_bytes(&mut self, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let mut x = self.rng;
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            self.rng = x;
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.truncate(len);
        self.epoch += 1;
        out
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = if seed == 0 { RNG_SEED } else { seed };
    }

    pub fn bind_shm(&mut self, region: SharedRegion) {
        self.epoch += 1;
        self.shm.push(region);
    }

    pub fn clear_shm(&mut self) {
        self.shm.clear();
    }

    /// Copies backing bytes of every inbound region overlapping the range
    /// into guest memory.
    pub fn sync_in(&self, mem: &mut Memory, addr: u32, len: u32) {
        for r in self.shm.iter().filter(|r| r.direction.syncs_in()) {
            if let Some((at, off, n)) = r.overlap(addr, len) {
                let mut buf = vec![0; n];
                r.backing.read_at(off, &mut buf);
                let _ = mem.write_raw(at, &buf);
            }
        }
    }

    /// Copies guest bytes in the range out to every outbound region.
    pub fn sync_out(&self, mem: &Memory, addr: u32, len: u32) {
        for r in self.shm.iter().filter(|r| r.direction.syncs_out()) {
            if let Some((at, off, n)) = r.overlap(addr, len) {
                let mut buf = vec![0; n];
                if mem.read_raw(at, &mut buf).is_ok() {
                    r.backing.write_at(off, &buf);
                }
            }
        }
    }

    // Persistent objects.

    pub fn create_object(&mut self, name: &[u8], data: &[u8], overwrite: bool) -> Result<u32, StorageError> {
        if data.len() > STORAGE_CAP {
            return Err(StorageError::StorageFull);
        }
        if self.objects.contains_key(name) && !overwrite {
            return Err(StorageError::AccessConflict);
        }
        self.objects.insert(name.to_vec(), data.to_vec());
        Ok(self.open_handle(name))
    }

    fn open_handle(&mut self, name: &[u8]) -> u32 {
        let h = self.handle();
        self.open_objects.insert(
            h,
            OpenObject {
                name: name.to_vec(),
                cursor: 0,
            },
        );
        h
    }

    pub fn open_object(&mut self, name: &[u8]) -> Result<u32, StorageError> {
        if !self.objects.contains_key(name) {
            return Err(StorageError::ItemNotFound);
        }
        Ok(self.open_handle(name))
    }

    /// Reads up to `len` bytes at the cursor and advances it.
    pub fn read_object(&mut self, handle: u32, len: usize) -> Result<Vec<u8>, StorageError> {
        let obj = self
            .open_objects
            .get_mut(&handle)
            .ok_or(StorageError::BadHandle)?;
        let data = self
            .objects
            .get(&obj.name)
            .ok_or(StorageError::ItemNotFound)?;
        let start = obj.cursor.min(data.len());
        let end = start + len.min(data.len() - start);
        obj.cursor = end;
        self.epoch += 1;
        Ok(data[start..end].to_vec())
    }

    /// Writes at the cursor, growing the object as needed.
    pub fn write_object(&mut self, handle: u32, bytes: &[u8]) -> Result<(), StorageError> {
        let obj = self
            .open_objects
            .get_mut(&handle)
            .ok_or(StorageError::BadHandle)?;
        let data = self
            .objects
            .get_mut(&obj.name)
            .ok_or(StorageError::ItemNotFound)?;
        let end = obj.cursor + bytes.len();
        if end > STORAGE_CAP {
            return Err(StorageError::StorageFull);
        }
        if data.len() < end {
            data.resize(end, 0);
        }
        data[obj.cursor..end].copy_from_slice(bytes);
        obj.cursor = end;
        self.epoch += 1;
        Ok(())
    }

    pub fn object_cursor(&self, handle: u32) -> Option<usize> {
        self.open_objects.get(&handle).map(|o| o.cursor)
    }

    pub fn close_object(&mut self, handle: u32) -> Result<(), StorageError> {
        self.open_objects
            .remove(&handle)
            .map(|_| self.epoch += 1)
            .ok_or(StorageError::BadHandle)
    }

    pub fn delete_object(&mut self, name: &[u8]) -> Result<(), StorageError> {
        self.objects
            .remove(name)
            .ok_or(StorageError::ItemNotFound)?;
        self.open_objects.retain(|_, o| o.name != name);
        self.epoch += 1;
        Ok(())
    }

    /// Serializes the object store: `name_len u16 | name | data_len u32 | data`.
    pub fn store_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, data) in &self.objects {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            out.extend_from_slice(data);
        }
        out
    }

    /// Replaces the object store with the records in `bytes`.
    pub fn load_store(&mut self, bytes: &[u8]) -> Result<(), String> {
        let mut objects = BTreeMap::new();
        let mut rest = bytes;
        let take = |n: usize, rest: &mut &[u8]| -> Result<Vec<u8>, String> {
            if rest.len() < n {
                return Err("truncated store record".into());
            }
            let (a, b) = rest.split_at(n);
            *rest = b;
            Ok(a.to_vec())
        };
        while !rest.is_empty() {
            let nl = u16::from_le_bytes(take(2, &mut rest)?.try_into().unwrap()) as usize;
            let name = take(nl, &mut rest)?;
            let dl = u32::from_le_bytes(take(4, &mut rest)?.try_into().unwrap()) as usize;
            if dl > STORAGE_CAP {
                return Err("store record exceeds storage cap".into());
            }
            let data = take(dl, &mut rest)?;
            objects.insert(name, data);
        }
        self.objects = objects;
        self.epoch += 1;
        Ok(())
    }

    // Cipher operations.

    pub fn allocate_operation(&mut self, alg: u32, mode: u32) -> u32 {
        let h = self.handle();
        self.crypto_ops.insert(h, CryptoOp { alg, mode, key: None });
        h
    }

    pub fn set_operation_key(&mut self, handle: u32, key: &[u8]) -> Result<(), CryptoError> {
        let op = self
            .crypto_ops
            .get_mut(&handle)
            .ok_or(CryptoError::BadHandle)?;
        op.key = (!key.is_empty()).then(|| key.to_vec());
        self.epoch += 1;
        Ok(())
    }

    pub fn free_operation(&mut self, handle: u32) -> Result<(), CryptoError> {
        self.crypto_ops
            .remove(&handle)
            .map(|_| self.epoch += 1)
            .ok_or(CryptoError::BadHandle)
    }

    /// `out[i] = input[i] ^ key[i % key.len()]`.
    pub fn cipher_do_final(&self, handle: u32, input: &[u8], out_cap: u32) -> Result<Vec<u8>, CryptoError> {
        let op = self.crypto_ops.get(&handle).ok_or(CryptoError::BadHandle)?;
        let key = op.key.as_ref().ok_or(CryptoError::KeyNotSet)?;
        if (out_cap as usize) < input.len() {
            return Err(CryptoError::ShortBuffer {
                needed: input.len() as u32,
            });
        }
        Ok(input
            .iter()
            .zip(key.iter().cycle())
            .map(|(a, k)| a ^ k)
            .collect())
    }
}

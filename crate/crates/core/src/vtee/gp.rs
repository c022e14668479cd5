//! GP Internal Core API handlers.

use std::sync::Arc;

use super::registry::Handler;
use super::*;
use crate::emucore::Perm;

const TEE_MALLOC_FILL_ZERO: u32 = 0;
const TEE_DATA_FLAG_OVERWRITE: u32 = 0x400;

fn h<F>(f: F) -> Handler
where
    F: Fn(&mut ApiCall) -> Result<(), HookFault> + Send + Sync + 'static,
{
    Arc::new(f)
}

/// Validate dest, validate src, sync-in src, copy, sync-out dest.
pub(super) fn mem_move(c: &mut ApiCall, dest: u32, src: u32, size: u32) -> Result<(), HookFault> {
    c.check(dest, size, true)?;
    c.check(src, size, false)?;
    c.tee.sync_in(&mut c.guest.mem, src, size);
    let data = c.guest.mem.read_raw_vec(src, size)?;
    c.guest.mem.write_raw(dest, &data)?;
    c.tee.sync_out(&c.guest.mem, dest, size);
    c.ret(dest);
    Ok(())
}

pub(super) fn mem_compare(c: &mut ApiCall, a: u32, b: u32, size: u32) -> Result<(), HookFault> {
    let x = c.read(a, size)?;
    let y = c.read(b, size)?;
    let r = x
        .iter()
        .zip(&y)
        .find(|(p, q)| p != q)
        .map_or(0i32, |(p, q)| *p as i32 - *q as i32);
    c.ret(r as u32);
    Ok(())
}

pub(super) fn check_access_rights(c: &ApiCall, flags: u32, base: u32, size: u32) -> u32 {
    let mut need = Perm::NONE;
    if flags & TEE_MEMORY_ACCESS_READ != 0 {
        need = need | Perm::R;
    }
    if flags & TEE_MEMORY_ACCESS_WRITE != 0 {
        need = need | Perm::W;
    }
    if base as u64 + size as u64 > 1 << 32 {
        return TEE_ERROR_ACCESS_DENIED;
    }
    match c.guest.mem.check_range(base, size, need) {
        Ok(()) => TEE_SUCCESS,
        Err(_) => TEE_ERROR_ACCESS_DENIED,
    }
}

pub(super) fn generate_random(c: &mut ApiCall, buf: u32, len: u32) -> Result<(), HookFault> {
    c.check(buf, len, true)?;
    let bytes = c.tee.random_bytes(len as usize);
    c.write(buf, &bytes)
}

fn realloc(c: &mut ApiCall, ptr: u32, size: u32) -> Result<(), HookFault> {
    if ptr == 0 {
        let p = c.alloc(size, false);
        c.ret(p);
        return Ok(());
    }
    let old = match c.tee.heap.chunk(ptr) {
        Some(ch) if ch.state == crate::asan::ChunkState::Allocated => ch.user_size,
        // Let the heap classify the bad pointer.
        _ => return c.free(ptr),
    };
    let new = c.alloc(size, false);
    if new != 0 {
        let data = c.guest.mem.read_raw_vec(ptr, old.min(size))?;
        c.guest.mem.write_raw(new, &data)?;
        c.free(ptr)?;
    }
    c.ret(new);
    Ok(())
}

fn property_string(c: &mut ApiCall) -> Result<(), HookFault> {
    let name = c.read_cstr(c.arg(1)?)?;
    let (buf, len_ptr) = (c.arg(2)?, c.arg(3)?);
    let Some(value) = c.tee.properties.get(&*String::from_utf8_lossy(&name)).cloned() else {
        c.ret(TEE_ERROR_ITEM_NOT_FOUND);
        return Ok(());
    };
    let mut bytes = value.into_bytes();
    bytes.push(0);
    let cap = c.read_u32(len_ptr)?;
    c.write_u32(len_ptr, bytes.len() as u32)?;
    if (cap as usize) < bytes.len() {
        c.ret(TEE_ERROR_SHORT_BUFFER);
        return Ok(());
    }
    c.write(buf, &bytes)?;
    c.ret(TEE_SUCCESS);
    Ok(())
}

fn property_u32(c: &mut ApiCall) -> Result<(), HookFault> {
    let name = c.read_cstr(c.arg(1)?)?;
    let out = c.arg(2)?;
    let value = c.tee.properties.get(&*String::from_utf8_lossy(&name)).cloned();
    let code = match value {
        None => TEE_ERROR_ITEM_NOT_FOUND,
        Some(v) => match v.parse::<u32>() {
            Ok(n) => {
                c.write_u32(out, n)?;
                TEE_SUCCESS
            }
            Err(_) => TEE_ERROR_BAD_FORMAT,
        },
    };
    c.ret(code);
    Ok(())
}

fn cipher_do_final(c: &mut ApiCall) -> Result<(), HookFault> {
    let (op, src, src_len, dst, len_ptr) = (c.arg(0)?, c.arg(1)?, c.arg(2)?, c.arg(3)?, c.arg(4)?);
    let input = c.read(src, src_len)?;
    let cap = c.read_u32(len_ptr)?;
    let code = match c.tee.cipher_do_final(op, &input, cap) {
        Ok(out) => {
            c.write(dst, &out)?;
            c.write_u32(len_ptr, out.len() as u32)?;
            TEE_SUCCESS
        }
        Err(e @ CryptoError::ShortBuffer { needed }) => {
            c.write_u32(len_ptr, needed)?;
            e.code()
        }
        Err(e) => e.code(),
    };
    c.ret(code);
    Ok(())
}

fn create_object(c: &mut ApiCall) -> Result<(), HookFault> {
    let (id, id_len, flags) = (c.arg(1)?, c.arg(2)?, c.arg(3)?);
    let (data_ptr, data_len, out) = (c.arg(5)?, c.arg(6)?, c.arg(7)?);
    let name = c.read(id, id_len)?;
    let data = c.read(data_ptr, data_len)?;
    let code = match c
        .tee
        .create_object(&name, &data, flags & TEE_DATA_FLAG_OVERWRITE != 0)
    {
        Ok(handle) => {
            if out != 0 {
                c.write_u32(out, handle)?;
            }
            TEE_SUCCESS
        }
        Err(e) => e.code(),
    };
    c.ret(code);
    Ok(())
}

fn open_object(c: &mut ApiCall) -> Result<(), HookFault> {
    let (id, id_len, out) = (c.arg(1)?, c.arg(2)?, c.arg(4)?);
    let name = c.read(id, id_len)?;
    let code = match c.tee.open_object(&name) {
        Ok(handle) => {
            c.write_u32(out, handle)?;
            TEE_SUCCESS
        }
        Err(e) => e.code(),
    };
    c.ret(code);
    Ok(())
}

fn read_object(c: &mut ApiCall) -> Result<(), HookFault> {
    let (obj, buf, size, count) = (c.arg(0)?, c.arg(1)?, c.arg(2)?, c.arg(3)?);
    c.check(buf, size, true)?;
    let code = match c.tee.read_object(obj, size as usize) {
        Ok(data) => {
            c.write(buf, &data)?;
            c.write_u32(count, data.len() as u32)?;
            TEE_SUCCESS
        }
        Err(e) => e.code(),
    };
    c.ret(code);
    Ok(())
}

fn write_object(c: &mut ApiCall) -> Result<(), HookFault> {
    let (obj, buf, size) = (c.arg(0)?, c.arg(1)?, c.arg(2)?);
    let data = c.read(buf, size)?;
    let code = c.tee.write_object(obj, &data).err().map_or(TEE_SUCCESS, |e| e.code());
    c.ret(code);
    Ok(())
}

fn close_and_delete(c: &mut ApiCall) -> Result<(), HookFault> {
    let obj = c.arg(0)?;
    let code = match c.tee.open_objects.get(&obj).map(|o| o.name.clone()) {
        Some(name) => c.tee.delete_object(&name).err().map_or(TEE_SUCCESS, |e| e.code()),
        None => StorageError::BadHandle.code(),
    };
    c.ret(code);
    Ok(())
}

pub(super) fn handlers() -> Vec<(&'static str, Handler)> {
    vec![
        ("TEE_Malloc", h(|c| {
            let (size, hint) = (c.arg(0)?, c.arg(1)?);
            let p = c.alloc(size, hint == TEE_MALLOC_FILL_ZERO);
            c.ret(p);
            Ok(())
        })),
        ("TEE_Realloc", h(|c| realloc(c, c.arg(0)?, c.arg(1)?))),
        ("TEE_Free", h(|c| {
            c.free(c.arg(0)?)?;
            c.ret(0);
            Ok(())
        })),
        ("TEE_MemMove", h(|c| mem_move(c, c.arg(0)?, c.arg(1)?, c.arg(2)?))),
        ("TEE_MemCompare", h(|c| mem_compare(c, c.arg(0)?, c.arg(1)?, c.arg(2)?))),
        ("TEE_MemFill", h(|c| {
            let (buf, x, size) = (c.arg(0)?, c.arg(1)?, c.arg(2)?);
            c.write(buf, &vec![x as u8; size as usize])?;
            c.ret(buf);
            Ok(())
        })),
        ("TEE_CheckMemoryAccessRights", h(|c| {
            let code = check_access_rights(c, c.arg(0)?, c.arg(1)?, c.arg(2)?);
            c.ret(code);
            Ok(())
        })),
        ("TEE_Panic", h(|c| {
            let code = c.arg(0)?;
            c.tee.panic_code = Some(code);
            Err(HookFault::new(CrashClass::Panic(code), c.guest.pc()))
        })),
        ("TEE_Wait", h(|c| {
            c.ret(TEE_SUCCESS);
            Ok(())
        })),
        ("TEE_GetSystemTime", h(|c| {
            let t = c.arg(0)?;
            c.write(t, &[0; 8])?;
            c.ret(0);
            Ok(())
        })),
        ("TEE_GenerateRandom", h(|c| {
            generate_random(c, c.arg(0)?, c.arg(1)?)?;
            c.ret(0);
            Ok(())
        })),
        ("TEE_GetPropertyAsString", h(property_string)),
        ("TEE_GetPropertyAsU32", h(property_u32)),
        ("TEE_AllocateOperation", h(|c| {
            let (out, alg, mode) = (c.arg(0)?, c.arg(1)?, c.arg(2)?);
            c.check(out, 4, true)?;
            let op = c.tee.allocate_operation(alg, mode);
            c.write_u32(out, op)?;
            c.ret(TEE_SUCCESS);
            Ok(())
        })),
        ("TEE_FreeOperation", h(|c| {
            let _ = c.tee.free_operation(c.arg(0)?);
            c.ret(0);
            Ok(())
        })),
        ("TEE_SetOperationKey", h(|c| {
            let (op, key, len) = (c.arg(0)?, c.arg(1)?, c.arg(2)?);
            let key = c.read(key, len)?;
            let code = c.tee.set_operation_key(op, &key).err().map_or(TEE_SUCCESS, |e| e.code());
            c.ret(code);
            Ok(())
        })),
        ("TEE_CipherInit", h(|c| {
            c.ret(0);
            Ok(())
        })),
        ("TEE_CipherDoFinal", h(cipher_do_final)),
        ("TEE_CreatePersistentObject", h(create_object)),
        ("TEE_OpenPersistentObject", h(open_object)),
        ("TEE_ReadObjectData", h(read_object)),
        ("TEE_WriteObjectData", h(write_object)),
        ("TEE_CloseObject", h(|c| {
            let _ = c.tee.close_object(c.arg(0)?);
            c.ret(0);
            Ok(())
        })),
        ("TEE_CloseAndDeletePersistentObject", h(close_and_delete)),
        ("TEE_CloseAndDeletePersistentObject1", h(close_and_delete)),
        // TA-to-TA sessions: canned success, no routing.
        ("TEE_OpenTASession", h(|c| {
            let (session, origin) = (c.arg(4)?, c.arg(5)?);
            if session != 0 {
                c.write_u32(session, 1)?;
            }
            if origin != 0 {
                c.write_u32(origin, TEE_ORIGIN_TRUSTED_APP as u32)?;
            }
            c.ret(TEE_SUCCESS);
            Ok(())
        })),
        ("TEE_InvokeTACommand", h(|c| {
            c.ret(TEE_SUCCESS);
            Ok(())
        })),
        ("TEE_CloseTASession", h(|c| {
            c.ret(0);
            Ok(())
        })),
    ]
}

//! Shipped handlers for vendor APIs that map onto existing GP or libc
//! behavior. Installed by [`ApiRegistry::with_extensions`].

use std::sync::Arc;

use super::gp::{check_access_rights, generate_random};
use super::registry::Handler;
use super::*;

fn log_fmt(c: &mut ApiCall) -> Result<(), HookFault> {
    let line = c.format(c.arg(0)?, 1)?;
    c.log(line);
    c.ret(0);
    Ok(())
}

pub(super) fn handlers() -> Vec<(&'static str, Handler)> {
    vec![
        ("tee_log", Arc::new(log_fmt)),
        ("msee_ta_printf_va", Arc::new(log_fmt)),
        ("debug_log", Arc::new(log_fmt)),
        // tee_get_key(&key_ptr, &key_len): hands out a heap copy of the device key.
        ("tee_get_key", Arc::new(|c: &mut ApiCall| {
            let (key_out, len_out) = (c.arg(0)?, c.arg(1)?);
            c.check(key_out, 4, true)?;
            c.check(len_out, 4, true)?;
            let p = c.alloc(DEVICE_KEY.len() as u32, false);
            c.guest.mem.write_raw(p, &DEVICE_KEY)?;
            c.write_u32(key_out, p)?;
            c.write_u32(len_out, DEVICE_KEY.len() as u32)?;
            c.ret(TEE_SUCCESS);
            Ok(())
        })),
        // TEES_IsREESharedMemory(buf, size) is a read-permission check.
        ("TEES_IsREESharedMemory", Arc::new(|c: &mut ApiCall| {
            let flags = TEE_MEMORY_ACCESS_READ | TEE_MEMORY_ACCESS_ANY_OWNER;
            let code = check_access_rights(c, flags, c.arg(0)?, c.arg(1)?);
            c.ret(code);
            Ok(())
        })),
        ("ut_pf_cp_rd_random", Arc::new(|c: &mut ApiCall| {
            generate_random(c, c.arg(0)?, c.arg(1)?)?;
            c.ret(0);
            Ok(())
        })),
    ]
}

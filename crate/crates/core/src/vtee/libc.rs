//! C library handlers. They share the sanitized heap with the GP ones.

use std::sync::Arc;

use super::gp::{mem_compare, mem_move};
use super::registry::Handler;
use super::*;

fn h<F>(f: F) -> Handler
where
    F: Fn(&mut ApiCall) -> Result<(), HookFault> + Send + Sync + 'static,
{
    Arc::new(f)
}

fn printf(c: &mut ApiCall) -> Result<(), HookFault> {
    let line = c.format(c.arg(0)?, 1)?;
    let n = line.len() as u32;
    c.log(line);
    c.ret(n);
    Ok(())
}

pub(super) fn handlers() -> Vec<(&'static str, Handler)> {
    vec![
        ("memcpy", h(|c| mem_move(c, c.arg(0)?, c.arg(1)?, c.arg(2)?))),
        ("memmove", h(|c| mem_move(c, c.arg(0)?, c.arg(1)?, c.arg(2)?))),
        ("memset", h(|c| {
            let (dst, v, n) = (c.arg(0)?, c.arg(1)?, c.arg(2)?);
            c.write(dst, &vec![v as u8; n as usize])?;
            c.ret(dst);
            Ok(())
        })),
        ("memcmp", h(|c| mem_compare(c, c.arg(0)?, c.arg(1)?, c.arg(2)?))),
        ("strlen", h(|c| {
            let s = c.read_cstr(c.arg(0)?)?;
            c.ret(s.len() as u32);
            Ok(())
        })),
        ("malloc", h(|c| {
            let p = c.alloc(c.arg(0)?, false);
            c.ret(p);
            Ok(())
        })),
        ("calloc", h(|c| {
            let total = (c.arg(0)? as u64) * (c.arg(1)? as u64);
            let p = if total > u32::MAX as u64 {
                0
            } else {
                c.alloc(total as u32, true)
            };
            c.ret(p);
            Ok(())
        })),
        ("free", h(|c| {
            c.free(c.arg(0)?)?;
            Ok(())
        })),
        ("printf", h(printf)),
        ("puts", h(|c| {
            let s = c.read_cstr(c.arg(0)?)?;
            c.log(String::from_utf8_lossy(&s).into_owned());
            c.ret(s.len() as u32 + 1);
            Ok(())
        })),
    ]
}

use std::fmt;
use std::sync::Arc;

use crate::vtee::ShmBacking;

pub const TEE_PARAM_TYPE_NONE: u8 = 0;
pub const TEE_PARAM_TYPE_VALUE_INPUT: u8 = 1;
pub const TEE_PARAM_TYPE_VALUE_OUTPUT: u8 = 2;
pub const TEE_PARAM_TYPE_VALUE_INOUT: u8 = 3;
pub const TEE_PARAM_TYPE_MEMREF_INPUT: u8 = 5;
pub const TEE_PARAM_TYPE_MEMREF_OUTPUT: u8 = 6;
pub const TEE_PARAM_TYPE_MEMREF_INOUT: u8 = 7;

/// Builds a `paramTypes` word from four nibbles.
pub const fn param_types(t0: u8, t1: u8, t2: u8, t3: u8) -> u16 {
    (t0 as u16 & 0xF) | (t1 as u16 & 0xF) << 4 | (t2 as u16 & 0xF) << 8 | (t3 as u16 & 0xF) << 12
}

/// Nibble `i` of a `paramTypes` word.
pub const fn param_type(types: u16, i: usize) -> u8 {
    ((types >> (4 * i)) & 0xF) as u8
}

/// Client-side content of one parameter slot. What gets marshalled is
/// decided by this content, never by the `paramTypes` nibble.
#[derive(Clone, Default)]
pub enum GpParam {
    #[default]
    None,
    Value {
        a: u32,
        b: u32,
    },
    /// Buffer copied into guest memory; `size` is the declared size and
    /// passes through unchanged even when it disagrees with `data.len()`.
    Memref {
        data: Vec<u8>,
        size: u32,
    },
    /// Buffer backed by client-shared memory.
    Shared {
        backing: Arc<dyn ShmBacking>,
        size: u32,
    },
}

impl GpParam {
    pub fn memref(data: impl Into<Vec<u8>>) -> Self {
        let data = data.into();
        let size = data.len() as u32;
        GpParam::Memref { data, size }
    }

    pub fn value(a: u32, b: u32) -> Self {
        GpParam::Value { a, b }
    }
}

impl fmt::Debug for GpParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GpParam::None => write!(f, "None"),
            GpParam::Value { a, b } => write!(f, "Value({a:#x}, {b:#x})"),
            GpParam::Memref { data, size } => write!(f, "Memref({} bytes, size {size:#x})", data.len()),
            GpParam::Shared { backing, size } => {
                write!(f, "Shared({} bytes, size {size:#x})", backing.len())
            }
        }
    }
}

impl PartialEq for GpParam {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (GpParam::None, GpParam::None) => true,
            (GpParam::Value { a, b }, GpParam::Value { a: c, b: d }) => (a, b) == (c, d),
            (GpParam::Memref { data, size }, GpParam::Memref { data: d, size: s }) => {
                (data, size) == (d, s)
            }
            (GpParam::Shared { backing, size }, GpParam::Shared { backing: b, size: s }) => {
                size == s && backing.to_vec() == b.to_vec()
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpParamSet {
    pub param_types: u16,
    pub params: [GpParam; 4],
}

impl GpParamSet {
    pub fn new(param_types: u16, params: [GpParam; 4]) -> Self {
        GpParamSet {
            param_types,
            params,
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }
}

/// A parameter slot after the call returned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum OutParam {
    #[default]
    None,
    Value {
        a: u32,
        b: u32,
    },
    /// Buffer contents up to the size the TA left in the slot, capped at
    /// the buffer actually provided.
    Memref {
        data: Vec<u8>,
        size: u32,
    },
}

impl OutParam {
    pub fn bytes(&self) -> &[u8] {
        match self {
            OutParam::Memref { data, .. } => data,
            _ => &[],
        }
    }
}

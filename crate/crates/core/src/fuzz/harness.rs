//! Declarative harness files. The format is described in `docs/harness.md`.

use thiserror::Error;

use crate::manager::{param_type, GpParam, GpParamSet};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("harness line {line}: {msg}")]
pub struct HarnessError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandRule {
    Fixed(u32),
    /// `cmd = input[index] % modulo`
    FromInput { index: u32, modulo: u32 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SlotTemplate {
    #[default]
    None,
    Value { a: u32, b: u32 },
    /// The input from `offset` to its end.
    MemrefIn { offset: u32 },
    /// A zeroed buffer of `size` bytes.
    MemrefOut { size: u32 },
    MemrefInFixed(Vec<u8>),
}

impl SlotTemplate {
    fn fits_nibble(&self, nibble: u8) -> bool {
        match self {
            SlotTemplate::None => nibble == 0,
            SlotTemplate::Value { .. } => (1..=3).contains(&nibble),
            SlotTemplate::MemrefIn { .. } | SlotTemplate::MemrefInFixed(_) => nibble == 5 || nibble == 7,
            SlotTemplate::MemrefOut { .. } => nibble == 6 || nibble == 7,
        }
    }

    fn uses_input(&self) -> bool {
        matches!(self, SlotTemplate::MemrefIn { .. })
    }

    fn instantiate(&self, input: &[u8]) -> GpParam {
        match self {
            SlotTemplate::None => GpParam::None,
            SlotTemplate::Value { a, b } => GpParam::value(*a, *b),
            SlotTemplate::MemrefIn { offset } => GpParam::memref(&input[(*offset as usize).min(input.len())..]),
            SlotTemplate::MemrefOut { size } => GpParam::memref(vec![0; *size as usize]),
            SlotTemplate::MemrefInFixed(bytes) => GpParam::memref(bytes.clone()),
        }
    }
}

/// One invocation run before the fuzz loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InitCall {
    pub cmd: u32,
    pub params: GpParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessSpec {
    pub command: CommandRule,
    pub param_types: u16,
    pub slots: [SlotTemplate; 4],
    pub min_input_len: u32,
    pub init: Vec<InitCall>,
}

/// What a harness turns one fuzzer input into.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub cmd: u32,
    pub params: GpParamSet,
}

fn parse_u32(s: &str) -> Option<u32> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn parse_slot(s: &str) -> Result<SlotTemplate, String> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let num = |p: &str| parse_u32(p).ok_or_else(|| format!("bad number `{p}`"));
    match parts.as_slice() {
        ["none"] => Ok(SlotTemplate::None),
        ["value", a, b] => Ok(SlotTemplate::Value { a: num(a)?, b: num(b)? }),
        ["memref_in", off] => Ok(SlotTemplate::MemrefIn { offset: num(off)? }),
        ["memref_out", size] => Ok(SlotTemplate::MemrefOut { size: num(size)? }),
        ["memref_fixed", hex] => parse_hex(hex)
            .map(SlotTemplate::MemrefInFixed)
            .ok_or_else(|| format!("bad hex `{hex}`")),
        _ => Err(format!("bad slot template `{}`", s.trim())),
    }
}

fn parse_command(s: &str) -> Result<CommandRule, String> {
    let s = s.trim();
    if let Some(v) = parse_u32(s) {
        return Ok(CommandRule::Fixed(v));
    }
    // input[N] % M
    let bad = || format!("bad command rule `{s}`");
    let rest = s.strip_prefix("input[").ok_or_else(bad)?;
    let (index, rest) = rest.split_once(']').ok_or_else(bad)?;
    let modulo = rest.trim().strip_prefix('%').ok_or_else(bad)?;
    let index = parse_u32(index).ok_or_else(bad)?;
    let modulo = parse_u32(modulo).ok_or_else(bad)?;
    if modulo == 0 {
        return Err("modulo must be non-zero".into());
    }
    Ok(CommandRule::FromInput { index, modulo })
}

fn parse_init(s: &str) -> Result<InitCall, String> {
    let fields: Vec<&str> = s.split_whitespace().collect();
    let [cmd, types, slots @ ..] = fields.as_slice() else {
        return Err("expected `init = <cmd> <param_types> <slot0> .. <slot3>`".into());
    };
    if slots.len() != 4 {
        return Err("init needs exactly four slot templates".into());
    }
    let cmd = parse_u32(cmd).ok_or_else(|| format!("bad number `{cmd}`"))?;
    let types = parse_u32(types)
        .filter(|t| *t <= 0xFFFF)
        .ok_or_else(|| format!("bad param_types `{types}`"))? as u16;
    let mut params: [GpParam; 4] = Default::default();
    for (i, s) in slots.iter().enumerate() {
        let t = parse_slot(s)?;
        if t.uses_input() {
            return Err("init slots cannot take fuzzer input".into());
        }
        params[i] = t.instantiate(&[]);
    }
    Ok(InitCall {
        cmd,
        params: GpParamSet::new(types, params),
    })
}

impl HarnessSpec {
    /// A harness with every slot empty and a fixed command.
    pub fn fixed(cmd: u32) -> Self {
        HarnessSpec {
            command: CommandRule::Fixed(cmd),
            param_types: 0,
            slots: Default::default(),
            min_input_len: 0,
            init: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<HarnessSpec, HarnessError> {
        let mut command = None;
        let mut param_types = None;
        let mut slots: [SlotTemplate; 4] = Default::default();
        let mut min_input_len = 0;
        let mut init = Vec::new();
        let mut last = 0;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last = line;
            let err = |msg: String| HarnessError { line, msg };
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (key, value) = l
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "cmd" => command = Some(parse_command(value).map_err(err)?),
                "param_types" => {
                    let t = parse_u32(value)
                        .filter(|t| *t <= 0xFFFF)
                        .ok_or_else(|| err(format!("bad param_types `{value}`")))?;
                    param_types = Some(t as u16);
                }
                "min_input_len" => {
                    min_input_len = parse_u32(value).ok_or_else(|| err(format!("bad number `{value}`")))?;
                }
                "init" => init.push(parse_init(value).map_err(err)?),
                _ => match key.strip_prefix("slot").and_then(|n| n.parse::<usize>().ok()) {
                    Some(n) if n < 4 => slots[n] = parse_slot(value).map_err(err)?,
                    _ => return Err(err(format!("unknown key `{key}`"))),
                },
            }
        }

        let at_end = |msg: String| HarnessError { line: last, msg };
        let command = command.ok_or_else(|| at_end("missing `cmd`".into()))?;
        let param_types = param_types.unwrap_or(0);
        for (i, s) in slots.iter().enumerate() {
            let nibble = param_type(param_types, i);
            if !s.fits_nibble(nibble) {
                return Err(at_end(format!("slot{i} template does not match type nibble {nibble}")));
            }
        }
        let mut consumed = 0;
        if let CommandRule::FromInput { index, .. } = command {
            consumed = index + 1;
        }
        for s in &slots {
            if let SlotTemplate::MemrefIn { offset } = s {
                consumed = consumed.max(*offset);
            }
        }
        if min_input_len < consumed {
            return Err(at_end(format!("min_input_len must be at least {consumed}")));
        }
        Ok(HarnessSpec {
            command,
            param_types,
            slots,
            min_input_len,
            init,
        })
    }

    /// Builds the invocation for `input`, or `None` when it is too short.
    pub fn build_paramset(&self, input: &[u8]) -> Option<Invocation> {
        if input.len() < self.min_input_len as usize {
            return None;
        }
        let cmd = match self.command {
            CommandRule::Fixed(c) => c,
            CommandRule::FromInput { index, modulo } => *input.get(index as usize)? as u32 % modulo,
        };
        let params = self.slots.clone().map(|s| s.instantiate(input));
        Some(Invocation {
            cmd,
            params: GpParamSet::new(self.param_types, params),
        })
    }
}

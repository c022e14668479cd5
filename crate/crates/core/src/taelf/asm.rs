//! Two-pass assembler from TIR-32 source to a TAELF container.
//!
//! See `docs/isa.md` for the source dialect.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::format::{Entrypoint, Import, Segment, TaElfFile};
use crate::emucore::{Instruction, Opcode, Perm, INSN_SIZE, LR, PAGE_SIZE, PC, SP};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct AssemblyError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, AssemblyError> {
    Err(AssemblyError {
        line,
        msg: msg.into(),
    })
}

/// Result of assembling a source file.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub file: TaElfFile,
    pub bytes: Vec<u8>,
    pub symbols: BTreeMap<String, u32>,
}

impl Assembly {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }
}

/// Assembles `source` into TAELF bytes.
pub fn assemble(source: &str) -> Result<Vec<u8>, AssemblyError> {
    assemble_full(source).map(|a| a.bytes)
}

/// Register used by the `CALLG` pseudo-instruction to load the GOT slot.
const SCRATCH: u8 = 12;
const GOT_PREFIX: &str = "got.";

#[derive(Debug)]
enum Item {
    Insn {
        line: usize,
        op: Opcode,
        operands: Vec<String>,
    },
    CallGot {
        line: usize,
        name: String,
    },
    Bytes(Vec<u8>),
    Words {
        line: usize,
        exprs: Vec<String>,
    },
    Space(u32),
}

impl Item {
    fn size(&self) -> u32 {
        match self {
            Item::Insn { .. } => INSN_SIZE,
            Item::CallGot { .. } => 3 * INSN_SIZE,
            Item::Bytes(b) => b.len() as u32,
            Item::Words { exprs, .. } => 4 * exprs.len() as u32,
            Item::Space(n) => *n,
        }
    }
}

struct SegmentBuild {
    name: String,
    vaddr: u32,
    perm: Perm,
    items: Vec<(u32, Item)>,
    size: u32,
}

struct Source {
    segments: Vec<SegmentBuild>,
    labels: BTreeMap<String, (usize, u32, usize)>,
    imports: Vec<(usize, String)>,
    entries: Vec<(usize, Entrypoint, String)>,
    is_static: bool,
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut prev = '\0';
    for (i, c) in line.char_indices() {
        match c {
            '"' if prev != '\\' => in_str = !in_str,
            ';' | '#' if !in_str => return &line[..i],
            _ => {}
        }
        prev = c;
    }
    line
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c)
            }
            ']' => {
                depth -= 1;
                cur.push(c)
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else if body.len() == 3 && body.starts_with('\'') && body.ends_with('\'') {
        body.as_bytes()[1] as i64
    } else if !body.is_empty() && body.chars().all(|c| c.is_ascii_digit() || c == '_') {
        body.replace('_', "").parse().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn parse_string(line: usize, s: &str) -> Result<Vec<u8>, AssemblyError> {
    let s = s.trim();
    let Some(inner) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) else {
        return err(line, "expected a quoted string");
    };
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            _ => return err(line, "bad escape in string"),
        }
    }
    Ok(out)
}

fn parse_reg(line: usize, s: &str) -> Result<u8, AssemblyError> {
    let s = s.trim().to_ascii_lowercase();
    let idx = match s.as_str() {
        "sp" => SP,
        "lr" => LR,
        "pc" => PC,
        _ => match s.strip_prefix('r').and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if n < 16 => n,
            _ => return err(line, format!("bad register `{s}`")),
        },
    };
    Ok(idx as u8)
}

fn default_segment(name: &str) -> Option<(u32, Perm)> {
    match name {
        "text" => Some((0x0001_0000, Perm::RX)),
        "data" => Some((0x0002_0000, Perm::RW)),
        _ => None,
    }
}

fn first_pass(src: &str) -> Result<Source, AssemblyError> {
    let mut s = Source {
        segments: Vec::new(),
        labels: BTreeMap::new(),
        imports: Vec::new(),
        entries: Vec::new(),
        is_static: false,
    };
    let mut cur: Option<usize> = None;

    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        let mut text = strip_comment(raw).trim();

        // Leading `label:`; may be followed by a statement.
        if let Some(colon) = text.find(':') {
            let head = &text[..colon];
            if is_ident(head) {
                let Some(seg) = cur else {
                    return err(line, "label outside of any segment");
                };
                if head.starts_with(GOT_PREFIX) {
                    return err(line, "labels may not use the `got.` prefix");
                }
                let off = s.segments[seg].size;
                if s.labels.insert(head.to_string(), (seg, off, line)).is_some() {
                    return err(line, format!("duplicate label `{head}`"));
                }
                text = text[colon + 1..].trim();
            }
        }
        if text.is_empty() {
            continue;
        }

        let (word, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };

        if let Some(dir) = word.strip_prefix('.') {
            let args: Vec<&str> = rest.split_whitespace().collect();
            match dir {
                "segment" => {
                    if args.len() != 3 {
                        return err(line, "expected `.segment <name> <vaddr> <perms>`");
                    }
                    let vaddr = parse_number(args[1])
                        .filter(|v| (0..=u32::MAX as i64).contains(v))
                        .ok_or_else(|| AssemblyError {
                            line,
                            msg: "bad segment address".into(),
                        })? as u32;
                    if vaddr % 4 != 0 {
                        return err(line, "segment address must be 4-byte aligned");
                    }
                    let perm = Perm::parse(args[2]).ok_or_else(|| AssemblyError {
                        line,
                        msg: "bad permission string".into(),
                    })?;
                    cur = Some(open_segment(&mut s, line, args[0], Some((vaddr, perm)))?);
                }
                "text" | "data" => {
                    cur = Some(open_segment(&mut s, line, dir, None)?);
                }
                "import" => {
                    if args.len() != 1 {
                        return err(line, "expected `.import <name>`");
                    }
                    if s.imports.iter().any(|(_, n)| n == args[0]) {
                        return err(line, format!("duplicate import `{}`", args[0]));
                    }
                    s.imports.push((line, args[0].to_string()));
                }
                "entry" => {
                    if args.len() != 2 {
                        return err(line, "expected `.entry <entrypoint> <label>`");
                    }
                    let ep = Entrypoint::from_name(args[0]).ok_or_else(|| AssemblyError {
                        line,
                        msg: format!("unknown entrypoint `{}`", args[0]),
                    })?;
                    if s.entries.iter().any(|(_, e, _)| *e == ep) {
                        return err(line, format!("duplicate entrypoint `{}`", args[0]));
                    }
                    s.entries.push((line, ep, args[1].to_string()));
                }
                "static" => s.is_static = true,
                "word" | "byte" | "ascii" | "asciz" | "space" | "align" => {
                    let Some(seg) = cur else {
                        return err(line, "data outside of any segment");
                    };
                    let item = match dir {
                        "word" => Item::Words {
                            line,
                            exprs: split_operands(rest),
                        },
                        "byte" => {
                            let mut bytes = Vec::new();
                            for e in split_operands(rest) {
                                match parse_number(&e) {
                                    Some(v) if (-128..=255).contains(&v) => bytes.push(v as u8),
                                    _ => return err(line, format!("bad byte `{e}`")),
                                }
                            }
                            Item::Bytes(bytes)
                        }
                        "ascii" => Item::Bytes(parse_string(line, rest)?),
                        "asciz" => {
                            let mut b = parse_string(line, rest)?;
                            b.push(0);
                            Item::Bytes(b)
                        }
                        "space" => match parse_number(rest) {
                            Some(n) if (0..=16 << 20).contains(&n) => Item::Space(n as u32),
                            _ => return err(line, "bad .space size"),
                        },
                        _ => {
                            let Some(n) = parse_number(rest).filter(|n| *n > 0 && (*n as u64).is_power_of_two() && *n <= 4096) else {
                                return err(line, "bad .align value");
                            };
                            let size = s.segments[seg].size;
                            let pad = (n as u32 - size % n as u32) % n as u32;
                            Item::Space(pad)
                        }
                    };
                    push_item(&mut s, seg, item);
                }
                _ => return err(line, format!("unknown directive `.{dir}`")),
            }
            continue;
        }

        let Some(seg) = cur else {
            return err(line, "instruction outside of any segment");
        };
        if word.eq_ignore_ascii_case("CALLG") {
            if !is_ident(rest) {
                return err(line, "expected `CALLG <import>`");
            }
            push_item(
                &mut s,
                seg,
                Item::CallGot {
                    line,
                    name: rest.to_string(),
                },
            );
            continue;
        }
        let op = Opcode::from_mnemonic(word).ok_or_else(|| AssemblyError {
            line,
            msg: format!("unknown mnemonic `{word}`"),
        })?;
        push_item(
            &mut s,
            seg,
            Item::Insn {
                line,
                op,
                operands: split_operands(rest),
            },
        );
    }
    Ok(s)
}

fn open_segment(
    s: &mut Source,
    line: usize,
    name: &str,
    place: Option<(u32, Perm)>,
) -> Result<usize, AssemblyError> {
    if let Some(i) = s.segments.iter().position(|g| g.name == name) {
        if let Some((vaddr, perm)) = place {
            if s.segments[i].vaddr != vaddr || s.segments[i].perm != perm {
                return err(line, format!("segment `{name}` redefined differently"));
            }
        }
        return Ok(i);
    }
    let Some((vaddr, perm)) = place.or_else(|| default_segment(name)) else {
        return err(line, format!("segment `{name}` needs an address"));
    };
    s.segments.push(SegmentBuild {
        name: name.to_string(),
        vaddr,
        perm,
        items: Vec::new(),
        size: 0,
    });
    Ok(s.segments.len() - 1)
}

fn push_item(s: &mut Source, seg: usize, item: Item) {
    let g = &mut s.segments[seg];
    let off = g.size;
    g.size += item.size();
    g.items.push((off, item));
}

struct Resolver<'a> {
    symbols: &'a BTreeMap<String, u32>,
}

impl Resolver<'_> {
    fn value(&self, line: usize, expr: &str) -> Result<i64, AssemblyError> {
        let expr = expr.trim();
        if let Some(v) = parse_number(expr) {
            return Ok(v);
        }
        let split = expr
            .char_indices()
            .skip(1)
            .filter(|(_, c)| *c == '+' || *c == '-')
            .last();
        let (sym, off) = match split {
            Some((i, _)) => {
                let off = parse_number(&expr[i..].replace('+', "")).ok_or_else(|| AssemblyError {
                    line,
                    msg: format!("bad offset in `{expr}`"),
                })?;
                (expr[..i].trim(), off)
            }
            None => (expr, 0),
        };
        match self.symbols.get(sym) {
            Some(a) => Ok(*a as i64 + off),
            None if is_ident(sym) => err(line, format!("undefined label `{sym}`")),
            None => err(line, format!("bad operand `{expr}`")),
        }
    }

    fn imm32(&self, line: usize, expr: &str) -> Result<i32, AssemblyError> {
        let v = self.value(line, expr)?;
        if v < i32::MIN as i64 || v > u32::MAX as i64 {
            return err(line, format!("`{expr}` does not fit in 32 bits"));
        }
        Ok(v as u32 as i32)
    }

    fn is_symbol(&self, expr: &str) -> bool {
        parse_number(expr).is_none()
    }
}

fn parse_mem(line: usize, r: &Resolver, s: &str) -> Result<(u8, i32), AssemblyError> {
    let Some(inner) = s.trim().strip_prefix('[').and_then(|x| x.strip_suffix(']')) else {
        return err(line, format!("expected memory operand, got `{s}`"));
    };
    let inner = inner.trim();
    let cut = inner.find(['+', '-']);
    match cut {
        None => Ok((parse_reg(line, inner)?, 0)),
        Some(i) => {
            let reg = parse_reg(line, &inner[..i])?;
            let off = r.value(line, inner[i..].trim_start_matches('+'))?;
            if off < i32::MIN as i64 || off > i32::MAX as i64 {
                return err(line, "memory offset out of range");
            }
            Ok((reg, off as i32))
        }
    }
}

fn encode_insn(
    line: usize,
    op: Opcode,
    ops: &[String],
    pc: u32,
    r: &Resolver,
    targets: &mut BTreeSet<u32>,
) -> Result<Instruction, AssemblyError> {
    let want = |n: usize| -> Result<(), AssemblyError> {
        if ops.len() == n {
            Ok(())
        } else {
            err(line, format!("{} takes {n} operand(s)", op.mnemonic()))
        }
    };
    let insn = |rd, rs1, rs2, imm| Instruction::new(op, rd, rs1, rs2, imm);
    Ok(match op {
        Opcode::Movi => {
            want(2)?;
            let imm = r.imm32(line, &ops[1])?;
            if r.is_symbol(&ops[1]) {
                targets.insert(imm as u32);
            }
            insn(parse_reg(line, &ops[0])?, 0, 0, imm)
        }
        Opcode::Mov => {
            want(2)?;
            insn(parse_reg(line, &ops[0])?, parse_reg(line, &ops[1])?, 0, 0)
        }
        Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Or | Opcode::Xor | Opcode::Shl
        | Opcode::Shr => {
            want(3)?;
            insn(
                parse_reg(line, &ops[0])?,
                parse_reg(line, &ops[1])?,
                parse_reg(line, &ops[2])?,
                0,
            )
        }
        Opcode::Addi => {
            want(3)?;
            insn(
                parse_reg(line, &ops[0])?,
                parse_reg(line, &ops[1])?,
                0,
                r.imm32(line, &ops[2])?,
            )
        }
        Opcode::Ldw | Opcode::Ldb | Opcode::Stw | Opcode::Stb => {
            want(2)?;
            let (base, off) = parse_mem(line, r, &ops[1])?;
            insn(parse_reg(line, &ops[0])?, base, 0, off)
        }
        Opcode::Cmp => {
            want(2)?;
            insn(0, parse_reg(line, &ops[0])?, parse_reg(line, &ops[1])?, 0)
        }
        Opcode::Cmpi => {
            want(2)?;
            insn(0, parse_reg(line, &ops[0])?, 0, r.imm32(line, &ops[1])?)
        }
        Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge | Opcode::Jmp => {
            want(1)?;
            let target = r.imm32(line, &ops[0])? as u32;
            targets.insert(target);
            insn(0, 0, 0, target.wrapping_sub(pc) as i32)
        }
        Opcode::Call => {
            want(1)?;
            let target = r.imm32(line, &ops[0])?;
            targets.insert(target as u32);
            insn(0, 0, 0, target)
        }
        Opcode::Callr => {
            want(1)?;
            insn(0, parse_reg(line, &ops[0])?, 0, 0)
        }
        Opcode::Push | Opcode::Pop => {
            want(1)?;
            insn(parse_reg(line, &ops[0])?, 0, 0, 0)
        }
        Opcode::Ret | Opcode::Halt => {
            want(0)?;
            insn(0, 0, 0, 0)
        }
    })
}

pub fn assemble_full(source: &str) -> Result<Assembly, AssemblyError> {
    let src = first_pass(source)?;
    let last_line = source.lines().count().max(1);

    if src.is_static && !src.imports.is_empty() {
        return err(src.imports[0].0, "a static TA cannot declare imports");
    }

    let mut symbols: BTreeMap<String, u32> = src
        .labels
        .iter()
        .map(|(name, (seg, off, _))| (name.clone(), src.segments[*seg].vaddr.wrapping_add(*off)))
        .collect();

    // GOT goes on the first page boundary past every declared segment.
    let got_base = if src.imports.is_empty() {
        None
    } else {
        let end = src
            .segments
            .iter()
            .map(|g| g.vaddr as u64 + g.size as u64)
            .max()
            .unwrap_or(0x3_0000);
        let base = end.div_ceil(PAGE_SIZE as u64) * PAGE_SIZE as u64;
        if base + 4 * src.imports.len() as u64 > u32::MAX as u64 {
            return err(src.imports[0].0, "no room for the GOT");
        }
        Some(base as u32)
    };
    if let Some(base) = got_base {
        for (i, (_, name)) in src.imports.iter().enumerate() {
            symbols.insert(format!("{GOT_PREFIX}{name}"), base + 4 * i as u32);
        }
    }

    let resolver = Resolver { symbols: &symbols };
    let mut segments = Vec::new();
    let mut insn_addrs = BTreeSet::new();
    let mut leaders = BTreeSet::new();
    let mut targets = BTreeSet::new();

    for g in &src.segments {
        let mut bytes = Vec::with_capacity(g.size as usize);
        let exec = g.perm.contains(Perm::X);
        let mut block_start = true;
        for (off, item) in &g.items {
            let addr = g.vaddr.wrapping_add(*off);
            match item {
                Item::Insn { line, op, operands } => {
                    let i = encode_insn(*line, *op, operands, addr, &resolver, &mut targets)?;
                    bytes.extend_from_slice(&i.encode());
                    if exec {
                        insn_addrs.insert(addr);
                        if block_start {
                            leaders.insert(addr);
                        }
                        block_start = op.ends_block();
                    }
                }
                Item::CallGot { line, name } => {
                    let Some(slot) = symbols.get(&format!("{GOT_PREFIX}{name}")) else {
                        return err(*line, format!("`{name}` is not imported"));
                    };
                    let seq = [
                        Instruction::new(Opcode::Movi, SCRATCH, 0, 0, *slot as i32),
                        Instruction::new(Opcode::Ldw, SCRATCH, SCRATCH, 0, 0),
                        Instruction::new(Opcode::Callr, 0, SCRATCH, 0, 0),
                    ];
                    for (k, i) in seq.iter().enumerate() {
                        bytes.extend_from_slice(&i.encode());
                        if exec {
                            let a = addr + k as u32 * INSN_SIZE;
                            insn_addrs.insert(a);
                            if block_start {
                                leaders.insert(a);
                                block_start = false;
                            }
                        }
                    }
                    block_start = true;
                }
                Item::Bytes(b) => {
                    bytes.extend_from_slice(b);
                    block_start = true;
                }
                Item::Words { line, exprs } => {
                    for e in exprs {
                        let v = resolver.imm32(*line, e)?;
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    block_start = true;
                }
                Item::Space(n) => {
                    bytes.resize(bytes.len() + *n as usize, 0);
                    block_start = true;
                }
            }
        }
        if !bytes.is_empty() {
            segments.push(Segment {
                vaddr: g.vaddr,
                perm: g.perm,
                bytes,
            });
        }
    }
    if let Some(base) = got_base {
        segments.push(Segment {
            vaddr: base,
            perm: Perm::RW,
            bytes: vec![0; 4 * src.imports.len()],
        });
    }

    let mut entrypoints = BTreeMap::new();
    for (line, ep, label) in &src.entries {
        let addr = resolver.imm32(*line, label)? as u32;
        targets.insert(addr);
        entrypoints.insert(*ep, addr);
    }
    if !entrypoints.contains_key(&Entrypoint::InvokeCommand) {
        return err(last_line, "no `.entry TA_InvokeCommandEntryPoint` declared");
    }

    leaders.extend(targets.intersection(&insn_addrs).copied());
    let imports = src
        .imports
        .iter()
        .enumerate()
        .map(|(i, (_, name))| Import {
            slot_vaddr: got_base.unwrap() + 4 * i as u32,
            name: name.clone(),
        })
        .collect();

    let file = TaElfFile {
        segments,
        imports,
        entrypoints,
        is_static: src.is_static,
        blocks: leaders.into_iter().collect(),
    };
    let bytes = file.to_bytes();
    // Overlap and other structural problems surface here with the same
    // checks the loader applies.
    if let Err(e) = super::format::parse_taelf(&bytes) {
        return err(last_line, e.to_string());
    }
    Ok(Assembly {
        file,
        bytes,
        symbols,
    })
}

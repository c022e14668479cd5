use proptest::prelude::*;
use taemu::emucore::GuestState;
use taemu::taelf::{assemble_full, load, parse_taelf};

pub const POOL: [&str; 10] = [
    "TEE_Malloc",
    "TEE_Free",
    "TEE_MemMove",
    "TEE_MemFill",
    "memcpy",
    "strlen",
    "tee_get_key",
    "msee_ta_printf_va",
    "ut_pf_km_gen",
    "TEE_Wait",
];

#[derive(Debug, Clone)]
enum Line {
    Insn(String),
    CallImport(usize),
    Branch(&'static str, usize),
}

fn line() -> impl Strategy<Value = Line> {
    let reg = || 0u8..16;
    prop_oneof![
        (reg(), any::<i32>()).prop_map(|(r, i)| Line::Insn(format!("MOVI r{r}, {i}"))),
        (reg(), reg(), reg()).prop_map(|(a, b, c)| Line::Insn(format!("XOR r{a}, r{b}, r{c}"))),
        (reg(), reg(), -64i32..64).prop_map(|(a, b, o)| Line::Insn(format!("LDW r{a}, [r{b}+{o}]"))),
        (reg(), reg(), 0i32..64).prop_map(|(a, b, o)| Line::Insn(format!("STB r{a}, [r{b}+{o}]"))),
        (reg(), any::<i32>()).prop_map(|(a, i)| Line::Insn(format!("CMPI r{a}, {i:#x}"))),
        Just(Line::Insn("RET".into())),
        Just(Line::Insn("PUSH lr".into())),
        any::<usize>().prop_map(Line::CallImport),
        (prop_oneof![Just("BEQ"), Just("BNE"), Just("BLT"), Just("BGE"), Just("JMP")], any::<usize>())
            .prop_map(|(m, t)| Line::Branch(m, t)),
    ]
}

#[derive(Debug, Clone)]
enum Datum {
    Word(u32),
    Byte(u8),
    Asciz(String),
    Space(u32),
    Align,
}

fn datum() -> impl Strategy<Value = Datum> {
    prop_oneof![
        any::<u32>().prop_map(Datum::Word),
        any::<u8>().prop_map(Datum::Byte),
        "[a-zA-Z0-9 ]{0,12}".prop_map(Datum::Asciz),
        (0u32..40).prop_map(Datum::Space),
        Just(Datum::Align),
    ]
}

pub fn program() -> impl Strategy<Value = (Vec<usize>, String)> {
    (
        proptest::sample::subsequence((0..POOL.len()).collect::<Vec<_>>(), 0..=POOL.len()).prop_shuffle(),
        proptest::collection::vec(line(), 1..40),
        proptest::collection::vec(datum(), 0..12),
        any::<bool>(),
    )
        .prop_map(|(imports, lines, data, more_entries)| {
            let mut s = String::from(".text\n");
            for i in &imports {
                s.push_str(&format!(".import {}\n", POOL[*i]));
            }
            s.push_str(".entry TA_InvokeCommandEntryPoint L0\n");
            if more_entries {
                s.push_str(".entry TA_CreateEntryPoint L0\n");
                s.push_str(&format!(".entry TA_OpenSessionEntryPoint L{}\n", lines.len() - 1));
            }
            let n = lines.len();
            for (k, l) in lines.iter().enumerate() {
                s.push_str(&format!("L{k}:\n"));
                match l {
                    Line::Insn(t) => s.push_str(&format!("    {t}\n")),
                    Line::CallImport(i) if !imports.is_empty() => {
                        s.push_str(&format!("    CALLG {}\n", POOL[imports[i % imports.len()]]))
                    }
                    Line::CallImport(_) => s.push_str("    HALT\n"),
                    Line::Branch(m, t) => s.push_str(&format!("    {m} L{}\n", t % n)),
                }
            }
            if !data.is_empty() {
                s.push_str(".data\n");
                for (k, d) in data.iter().enumerate() {
                    s.push_str(&format!("D{k}:\n"));
                    match d {
                        Datum::Word(w) => s.push_str(&format!("    .word {w:#x}\n")),
                        Datum::Byte(b) => s.push_str(&format!("    .byte {b}\n")),
                        Datum::Asciz(t) => s.push_str(&format!("    .asciz \"{t}\"\n")),
                        Datum::Space(n) => s.push_str(&format!("    .space {n}\n")),
                        Datum::Align => s.push_str("    .align 4\n"),
                    }
                }
                s.push_str("    .word L0\n");
            }
            (imports, s)
        })
}

/// Assembles, reparses and loads one generated program.
pub fn check_round_trip(imports: &[usize], src: &str) -> Result<(), TestCaseError> {
    let asm = assemble_full(src).map_err(|e| TestCaseError::fail(format!("{e}\n{src}")))?;
    let parsed = parse_taelf(&asm.bytes).unwrap();
    prop_assert_eq!(&parsed, &asm.file);
    prop_assert_eq!(parsed.to_bytes(), asm.bytes.clone());

    prop_assert_eq!(parsed.imports.len(), imports.len());
    let mut guest = GuestState::new();
    let image = load(&parsed, None, &mut guest).unwrap();
    for (i, imp) in parsed.imports.iter().enumerate() {
        prop_assert_eq!(&imp.name, POOL[imports[i]]);
        prop_assert_eq!(Some(imp.slot_vaddr), asm.symbol(&format!("got.{}", imp.name)));
        let slot = guest.mem.read_vec(imp.slot_vaddr, 4).unwrap();
        let sentinel = 0xF000_0000u32 + 16 * i as u32;
        prop_assert_eq!(u32::from_le_bytes(slot.try_into().unwrap()), sentinel);
        prop_assert_eq!(image.import_slots[i], imp.slot_vaddr);
    }
    Ok(())
}

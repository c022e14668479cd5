//! TIR-32 instruction encoding.
//!
//! Every instruction is 8 bytes, little-endian:
//! `[opcode u8 | rd u8 | rs1 u8 | rs2 u8 | imm i32]`.

pub const INSN_SIZE: u32 = 8;

pub const SP: usize = 13;
pub const LR: usize = 14;
pub const PC: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Movi = 0x01,
    Mov = 0x02,
    Add = 0x03,
    Sub = 0x04,
    And = 0x05,
    Or = 0x06,
    Xor = 0x07,
    Shl = 0x08,
    Shr = 0x09,
    Ldw = 0x10,
    Stw = 0x11,
    Ldb = 0x12,
    Stb = 0x13,
    Cmp = 0x18,
    Cmpi = 0x19,
    Addi = 0x1A,
    Beq = 0x20,
    Bne = 0x21,
    Blt = 0x22,
    Bge = 0x23,
    Jmp = 0x24,
    Call = 0x28,
    Callr = 0x29,
    Ret = 0x2A,
    Push = 0x30,
    Pop = 0x31,
    Halt = 0x3F,
}

impl Opcode {
    pub const ALL: [Opcode; 27] = [
        Opcode::Movi,
        Opcode::Mov,
        Opcode::Add,
        Opcode::Sub,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Ldw,
        Opcode::Stw,
        Opcode::Ldb,
        Opcode::Stb,
        Opcode::Cmp,
        Opcode::Cmpi,
        Opcode::Addi,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Bge,
        Opcode::Jmp,
        Opcode::Call,
        Opcode::Callr,
        Opcode::Ret,
        Opcode::Push,
        Opcode::Pop,
        Opcode::Halt,
    ];

    pub fn from_u8(b: u8) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| *op as u8 == b)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Movi => "MOVI",
            Opcode::Mov => "MOV",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Xor => "XOR",
            Opcode::Shl => "SHL",
            Opcode::Shr => "SHR",
            Opcode::Ldw => "LDW",
            Opcode::Stw => "STW",
            Opcode::Ldb => "LDB",
            Opcode::Stb => "STB",
            Opcode::Cmp => "CMP",
            Opcode::Cmpi => "CMPI",
            Opcode::Addi => "ADDI",
            Opcode::Beq => "BEQ",
            Opcode::Bne => "BNE",
            Opcode::Blt => "BLT",
            Opcode::Bge => "BGE",
            Opcode::Jmp => "JMP",
            Opcode::Call => "CALL",
            Opcode::Callr => "CALLR",
            Opcode::Ret => "RET",
            Opcode::Push => "PUSH",
            Opcode::Pop => "POP",
            Opcode::Halt => "HALT",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        let upper = s.to_ascii_uppercase();
        Opcode::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic() == upper)
    }

    /// True for instructions after which a new basic block starts.
    pub fn ends_block(self) -> bool {
        matches!(
            self,
            Opcode::Beq
                | Opcode::Bne
                | Opcode::Blt
                | Opcode::Bge
                | Opcode::Jmp
                | Opcode::Call
                | Opcode::Callr
                | Opcode::Ret
                | Opcode::Halt
        )
    }

    pub fn is_pc_relative(self) -> bool {
        matches!(
            self,
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge | Opcode::Jmp
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub op: Opcode,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i32,
}

impl Instruction {
    pub fn new(op: Opcode, rd: u8, rs1: u8, rs2: u8, imm: i32) -> Self {
        Instruction {
            op,
            rd,
            rs1,
            rs2,
            imm,
        }
    }

    pub fn encode(&self) -> [u8; 8] {
        let imm = self.imm.to_le_bytes();
        [
            self.op as u8,
            self.rd,
            self.rs1,
            self.rs2,
            imm[0],
            imm[1],
            imm[2],
            imm[3],
        ]
    }

    /// Decodes one instruction; `None` for undefined opcodes or register
    /// fields outside r0..r15.
    pub fn decode(bytes: [u8; 8]) -> Option<Instruction> {
        let op = Opcode::from_u8(bytes[0])?;
        let (rd, rs1, rs2) = (bytes[1], bytes[2], bytes[3]);
        if rd > 15 || rs1 > 15 || rs2 > 15 {
            return None;
        }
        let imm = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        Some(Instruction {
            op,
            rd,
            rs1,
            rs2,
            imm,
        })
    }
}

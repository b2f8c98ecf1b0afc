//! Fixed-width 32-bit instruction set.
//!
//! Bit layout of every instruction word:
//!
//! ```text
//!  31      24 23   19 18   14 13    9 8      0
//! +----------+-------+-------+-------+--------+
//! |  opcode  |  rd   |  rn   |  rm   |        |
//! +----------+-------+-------+-------+--------+
//!                            |      imm[13:0] |
//! ```
//!
//! `rm` and `imm` overlap; each opcode uses one or the other. Fields an
//! opcode does not use are ignored by the decoder and emitted as zero by the
//! encoder.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of architectural general registers (`x0`..`x30`).
pub const NUM_REGS: usize = 31;

pub const IMM_BITS: u32 = 14;
pub const IMM_MASK: u32 = (1 << IMM_BITS) - 1;
pub const UIMM_MAX: i64 = IMM_MASK as i64;
pub const SIMM_MIN: i64 = -(1 << (IMM_BITS - 1));
pub const SIMM_MAX: i64 = (1 << (IMM_BITS - 1)) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    Nop = 0x00,
    Halt = 0x01,
    Trig = 0x02,
    Wait = 0x03,
    Movi = 0x10,
    Addi = 0x11,
    Subi = 0x12,
    Add = 0x13,
    Ldr = 0x20,
    Str = 0x21,
    B = 0x30,
    Cbnz = 0x31,
    IcIallu = 0x40,
    DcCivac = 0x41,
    TlbiAll = 0x42,
    At = 0x43,
}

/// Which fields an opcode reads from the instruction word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operands {
    None,
    /// `#uimm`
    Imm,
    /// `xD, #uimm`
    RdImm,
    /// `xD, xN, #uimm`
    RdRnImm,
    /// `xD, xN, xM`
    RdRnRm,
    /// `xD, [xN, #uimm]`
    RdMem,
    /// `#simm` (word-relative)
    Branch,
    /// `xD, #simm` (word-relative)
    RdBranch,
    /// `xN`
    Rn,
    /// `xD, xN`
    RdRn,
}

impl Opcode {
    pub const ALL: [Opcode; 16] = [
        Opcode::Nop,
        Opcode::Halt,
        Opcode::Trig,
        Opcode::Wait,
        Opcode::Movi,
        Opcode::Addi,
        Opcode::Subi,
        Opcode::Add,
        Opcode::Ldr,
        Opcode::Str,
        Opcode::B,
        Opcode::Cbnz,
        Opcode::IcIallu,
        Opcode::DcCivac,
        Opcode::TlbiAll,
        Opcode::At,
    ];

    pub fn from_byte(byte: u8) -> Option<Opcode> {
        Self::ALL.iter().copied().find(|op| *op as u8 == byte)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "nop",
            Opcode::Halt => "halt",
            Opcode::Trig => "trig",
            Opcode::Wait => "wait",
            Opcode::Movi => "movi",
            Opcode::Addi => "addi",
            Opcode::Subi => "subi",
            Opcode::Add => "add",
            Opcode::Ldr => "ldr",
            Opcode::Str => "str",
            Opcode::B => "b",
            Opcode::Cbnz => "cbnz",
            Opcode::IcIallu => "ic_iallu",
            Opcode::DcCivac => "dc_civac",
            Opcode::TlbiAll => "tlbi_all",
            Opcode::At => "at",
        }
    }

    pub fn from_mnemonic(text: &str) -> Option<Opcode> {
        let lower = text.to_ascii_lowercase();
        Self::ALL.iter().copied().find(|op| op.mnemonic() == lower)
    }

    pub fn operands(self) -> Operands {
        match self {
            Opcode::Nop | Opcode::Halt | Opcode::Trig | Opcode::IcIallu | Opcode::TlbiAll => Operands::None,
            Opcode::Wait => Operands::Imm,
            Opcode::Movi => Operands::RdImm,
            Opcode::Addi | Opcode::Subi => Operands::RdRnImm,
            Opcode::Add => Operands::RdRnRm,
            Opcode::Ldr | Opcode::Str => Operands::RdMem,
            Opcode::B => Operands::Branch,
            Opcode::Cbnz => Operands::RdBranch,
            Opcode::DcCivac => Operands::Rn,
            Opcode::At => Operands::RdRn,
        }
    }

    fn uses_rd(self) -> bool {
        matches!(
            self.operands(),
            Operands::RdImm
                | Operands::RdRnImm
                | Operands::RdRnRm
                | Operands::RdMem
                | Operands::RdBranch
                | Operands::RdRn
        )
    }

    fn uses_rn(self) -> bool {
        matches!(
            self.operands(),
            Operands::RdRnImm | Operands::RdRnRm | Operands::RdMem | Operands::Rn | Operands::RdRn
        )
    }

    fn uses_rm(self) -> bool {
        self.operands() == Operands::RdRnRm
    }

    fn uses_imm(self) -> bool {
        matches!(
            self.operands(),
            Operands::Imm
                | Operands::RdImm
                | Operands::RdRnImm
                | Operands::RdMem
                | Operands::Branch
                | Operands::RdBranch
        )
    }

    /// Branch immediates are signed word offsets; everything else is zero-extended.
    pub fn signed_imm(self) -> bool {
        matches!(self, Opcode::B | Opcode::Cbnz)
    }
}

/// A decoded instruction. Unused fields are always zero so that
/// `decode(encode(i)) == i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecodedInstruction {
    pub opcode: Opcode,
    pub rd: u8,
    pub rn: u8,
    pub rm: u8,
    pub imm: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("register x{0} out of range")]
    Register(u8),
    #[error("immediate {imm} out of range for {opcode:?}")]
    Immediate { opcode: Opcode, imm: i32 },
}

/// Why a word failed to decode. Never aborts the simulator: the core turns
/// this into an `UndefinedInstruction` trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("undefined opcode 0x{opcode:02x} in word 0x{word:08x}")]
    UnknownOpcode { word: u32, opcode: u8 },
    #[error("register field 31 is not addressable in word 0x{word:08x}")]
    BadRegister { word: u32 },
}

impl DecodeError {
    pub fn word(&self) -> u32 {
        match *self {
            DecodeError::UnknownOpcode { word, .. } | DecodeError::BadRegister { word } => word,
        }
    }
}

impl DecodedInstruction {
    pub fn new(opcode: Opcode) -> Self {
        DecodedInstruction { opcode, rd: 0, rn: 0, rm: 0, imm: 0 }
    }

    pub fn with_rd(mut self, rd: u8) -> Self {
        self.rd = rd;
        self
    }

    pub fn with_rn(mut self, rn: u8) -> Self {
        self.rn = rn;
        self
    }

    pub fn with_rm(mut self, rm: u8) -> Self {
        self.rm = rm;
        self
    }

    pub fn with_imm(mut self, imm: i32) -> Self {
        self.imm = imm;
        self
    }

    /// Checks field ranges and that unused fields are zero.
    pub fn validate(&self) -> Result<(), EncodeError> {
        let op = self.opcode;
        for (used, reg) in [(op.uses_rd(), self.rd), (op.uses_rn(), self.rn), (op.uses_rm(), self.rm)] {
            if reg as usize >= NUM_REGS || (!used && reg != 0) {
                return Err(EncodeError::Register(reg));
            }
        }
        let imm = self.imm as i64;
        let ok = if !op.uses_imm() {
            imm == 0
        } else if op.signed_imm() {
            (SIMM_MIN..=SIMM_MAX).contains(&imm)
        } else {
            (0..=UIMM_MAX).contains(&imm)
        };
        if ok {
            Ok(())
        } else {
            Err(EncodeError::Immediate { opcode: op, imm: self.imm })
        }
    }

    pub fn encode(&self) -> Result<u32, EncodeError> {
        self.validate()?;
        Ok(self.encode_unchecked())
    }

    fn encode_unchecked(&self) -> u32 {
        let mut word = (self.opcode as u32) << 24;
        word |= (self.rd as u32 & 0x1f) << 19;
        word |= (self.rn as u32 & 0x1f) << 14;
        if self.opcode.uses_rm() {
            word |= (self.rm as u32 & 0x1f) << 9;
        } else {
            word |= self.imm as u32 & IMM_MASK;
        }
        word
    }
}

pub fn decode(word: u32) -> Result<DecodedInstruction, DecodeError> {
    let byte = (word >> 24) as u8;
    let opcode = Opcode::from_byte(byte).ok_or(DecodeError::UnknownOpcode { word, opcode: byte })?;
    let rd = ((word >> 19) & 0x1f) as u8;
    let rn = ((word >> 14) & 0x1f) as u8;
    let rm = ((word >> 9) & 0x1f) as u8;
    let raw_imm = word & IMM_MASK;

    let mut insn = DecodedInstruction::new(opcode);
    if opcode.uses_rd() {
        insn.rd = rd;
    }
    if opcode.uses_rn() {
        insn.rn = rn;
    }
    if opcode.uses_rm() {
        insn.rm = rm;
    }
    if opcode.uses_imm() {
        insn.imm = if opcode.signed_imm() {
            // sign-extend 14 bits
            ((raw_imm << (32 - IMM_BITS)) as i32) >> (32 - IMM_BITS)
        } else {
            raw_imm as i32
        };
    }
    if [insn.rd, insn.rn, insn.rm].iter().any(|&r| r as usize >= NUM_REGS) {
        return Err(DecodeError::BadRegister { word });
    }
    Ok(insn)
}

/// Text form of a word; undefined words render as `.word 0x...`.
pub fn disassemble(word: u32) -> String {
    match decode(word) {
        Ok(insn) => insn.to_string(),
        Err(_) => format!(".word 0x{word:08x}"),
    }
}

impl fmt::Display for DecodedInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.opcode.mnemonic();
        let (rd, rn, rm, imm) = (self.rd, self.rn, self.rm, self.imm);
        match self.opcode.operands() {
            Operands::None => write!(f, "{m}"),
            Operands::Imm | Operands::Branch => write!(f, "{m} #{imm}"),
            Operands::RdImm | Operands::RdBranch => write!(f, "{m} x{rd}, #{imm}"),
            Operands::RdRnImm => write!(f, "{m} x{rd}, x{rn}, #{imm}"),
            Operands::RdRnRm => write!(f, "{m} x{rd}, x{rn}, x{rm}"),
            Operands::RdMem => write!(f, "{m} x{rd}, [x{rn}, #{imm}]"),
            Operands::Rn => write!(f, "{m} x{rn}"),
            Operands::RdRn => write!(f, "{m} x{rd}, x{rn}"),
        }
    }
}

//! Two-pass assembler and program images.
//!
//! Source format: one instruction per line, `;` starts a comment, `label:`
//! defines a label (optionally followed by an instruction on the same line).
//! Directives:
//!
//! * `.org ADDR`  move the location counter (gaps are filled with `nop`)
//! * `.entry LABEL|ADDR`  entry point, defaults to the image base
//! * `.word VALUE`  raw 32-bit data word

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::isa::{DecodedInstruction, EncodeError, Opcode, Operands, NUM_REGS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub base: u64,
    pub entry: u64,
    pub words: Vec<u32>,
}

/// JSON sidecar written next to a flat binary image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub base: u64,
    pub entry: u64,
}

impl Image {
    pub fn len_bytes(&self) -> u64 {
        self.words.len() as u64 * 4
    }

    pub fn end(&self) -> u64 {
        self.base + self.len_bytes()
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn word_at(&self, addr: u64) -> Option<u32> {
        if !self.contains(addr) || !addr.is_multiple_of(4) {
            return None;
        }
        self.words.get(((addr - self.base) / 4) as usize).copied()
    }

    /// Flat little-endian binary.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn meta(&self) -> ImageMeta {
        ImageMeta { base: self.base, entry: self.entry }
    }

    pub fn from_parts(bytes: &[u8], meta: ImageMeta) -> Result<Image, AsmError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(AsmError::new(0, AsmErrorKind::Syntax("binary length is not a multiple of 4".into())));
        }
        let words = bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Image { base: meta.base, entry: meta.entry, words })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

impl AsmError {
    fn new(line: usize, kind: AsmErrorKind) -> Self {
        AsmError { line, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("immediate {0} out of range")]
    ImmediateRange(i64),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("bad register `{0}`")]
    BadRegister(String),
    #[error("{0}")]
    Syntax(String),
}

enum Item {
    Insn { opcode: Opcode, operands: Vec<String> },
    Word(String),
}

struct Located {
    line: usize,
    addr: u64,
    item: Item,
}

fn strip_comment(line: &str) -> &str {
    match line.find(';') {
        Some(i) => &line[..i],
        None => line,
    }
}

pub fn parse_number(text: &str) -> Option<i64> {
    let t = text.trim().trim_start_matches('#');
    let (neg, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let t = t.replace('_', "");
    let value = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        t.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

fn parse_register(text: &str, line: usize) -> Result<u8, AsmError> {
    let t = text.trim().to_ascii_lowercase();
    t.strip_prefix('x')
        .or_else(|| t.strip_prefix('w'))
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| (n as usize) < NUM_REGS)
        .ok_or_else(|| AsmError::new(line, AsmErrorKind::BadRegister(text.trim().to_string())))
}

fn split_operands(rest: &str) -> Vec<String> {
    rest.replace(['[', ']'], " ").split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn is_label(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Assembles `source` into an image.
pub fn assemble(source: &str) -> Result<Image, AsmError> {
    let mut labels: BTreeMap<String, u64> = BTreeMap::new();
    let mut items: Vec<Located> = Vec::new();
    let mut base: Option<u64> = None;
    let mut loc: u64 = 0;
    let mut entry: Option<(usize, String)> = None;

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let mut text = strip_comment(raw).trim();
        // leading labels
        while let Some(colon) = text.find(':') {
            let name = text[..colon].trim();
            if !is_label(name) {
                return Err(AsmError::new(line_no, AsmErrorKind::Syntax(format!("bad label `{name}`"))));
            }
            if labels.insert(name.to_string(), loc).is_some() {
                return Err(AsmError::new(line_no, AsmErrorKind::DuplicateLabel(name.to_string())));
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        match head.to_ascii_lowercase().as_str() {
            ".org" => {
                let addr = parse_number(rest)
                    .filter(|&a| a >= 0 && a % 4 == 0)
                    .ok_or_else(|| AsmError::new(line_no, AsmErrorKind::Syntax(format!("bad .org `{rest}`"))))?
                    as u64;
                match base {
                    None if items.is_empty() => {
                        base = Some(addr);
                        // labels defined before the first .org belong to it
                        for v in labels.values_mut() {
                            *v = addr;
                        }
                    }
                    _ if addr < loc => {
                        return Err(AsmError::new(
                            line_no,
                            AsmErrorKind::Syntax(format!(".org 0x{addr:x} moves backwards")),
                        ))
                    }
                    _ => {}
                }
                loc = addr;
            }
            ".entry" => entry = Some((line_no, rest.to_string())),
            ".word" => {
                base.get_or_insert(0);
                items.push(Located { line: line_no, addr: loc, item: Item::Word(rest.to_string()) });
                loc += 4;
            }
            mnemonic => {
                let opcode = Opcode::from_mnemonic(mnemonic)
                    .ok_or_else(|| AsmError::new(line_no, AsmErrorKind::UnknownMnemonic(head.to_string())))?;
                base.get_or_insert(0);
                items.push(Located {
                    line: line_no,
                    addr: loc,
                    item: Item::Insn { opcode, operands: split_operands(rest) },
                });
                loc += 4;
            }
        }
    }

    let base = base.unwrap_or(0);
    let mut words = vec![0u32; ((loc.max(base) - base) / 4) as usize];
    for it in &items {
        let word = match &it.item {
            Item::Word(v) => {
                let value = parse_number(v)
                    .filter(|&n| (i64::from(i32::MIN)..=i64::from(u32::MAX)).contains(&n))
                    .ok_or_else(|| AsmError::new(it.line, AsmErrorKind::Syntax(format!("bad .word `{v}`"))))?;
                value as u32
            }
            Item::Insn { opcode, operands } => encode_line(*opcode, operands, it.addr, &labels, it.line)?,
        };
        words[((it.addr - base) / 4) as usize] = word;
    }

    let entry = match entry {
        None => base,
        Some((line, target)) => match labels.get(target.trim()) {
            Some(&addr) => addr,
            None => parse_number(&target)
                .map(|n| n as u64)
                .ok_or(AsmError::new(line, AsmErrorKind::UnresolvedLabel(target)))?,
        },
    };
    Ok(Image { base, entry, words })
}

fn encode_line(
    opcode: Opcode,
    ops: &[String],
    addr: u64,
    labels: &BTreeMap<String, u64>,
    line: usize,
) -> Result<u32, AsmError> {
    let arity = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(AsmError::new(
                line,
                AsmErrorKind::Syntax(format!("{} expects {n} operand(s), got {}", opcode.mnemonic(), ops.len())),
            ))
        }
    };
    let imm = |text: &str| -> Result<i32, AsmError> {
        let v = parse_number(text)
            .ok_or_else(|| AsmError::new(line, AsmErrorKind::Syntax(format!("bad immediate `{text}`"))))?;
        i32::try_from(v).map_err(|_| AsmError::new(line, AsmErrorKind::ImmediateRange(v)))
    };
    let branch = |text: &str| -> Result<i32, AsmError> {
        let t = text.trim();
        if t.starts_with('#') || t.starts_with('-') || t.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            return imm(t);
        }
        let target = *labels.get(t).ok_or_else(|| AsmError::new(line, AsmErrorKind::UnresolvedLabel(t.to_string())))?;
        let delta = (target as i64 - addr as i64) / 4;
        i32::try_from(delta).map_err(|_| AsmError::new(line, AsmErrorKind::ImmediateRange(delta)))
    };
    let reg = |text: &str| parse_register(text, line);

    let mut insn = DecodedInstruction::new(opcode);
    match opcode.operands() {
        Operands::None => arity(0)?,
        Operands::Imm => {
            arity(1)?;
            insn.imm = imm(&ops[0])?;
        }
        Operands::RdImm => {
            arity(2)?;
            insn.rd = reg(&ops[0])?;
            insn.imm = imm(&ops[1])?;
        }
        Operands::RdRnImm => {
            arity(3)?;
            insn.rd = reg(&ops[0])?;
            insn.rn = reg(&ops[1])?;
            insn.imm = imm(&ops[2])?;
        }
        Operands::RdRnRm => {
            arity(3)?;
            insn.rd = reg(&ops[0])?;
            insn.rn = reg(&ops[1])?;
            insn.rm = reg(&ops[2])?;
        }
        Operands::RdMem => {
            if ops.len() == 2 {
                insn.rd = reg(&ops[0])?;
                insn.rn = reg(&ops[1])?;
            } else {
                arity(3)?;
                insn.rd = reg(&ops[0])?;
                insn.rn = reg(&ops[1])?;
                insn.imm = imm(&ops[2])?;
            }
        }
        Operands::Branch => {
            arity(1)?;
            insn.imm = branch(&ops[0])?;
        }
        Operands::RdBranch => {
            arity(2)?;
            insn.rd = reg(&ops[0])?;
            insn.imm = branch(&ops[1])?;
        }
        Operands::Rn => {
            arity(1)?;
            insn.rn = reg(&ops[0])?;
        }
        Operands::RdRn => {
            arity(2)?;
            insn.rd = reg(&ops[0])?;
            insn.rn = reg(&ops[1])?;
        }
    }
    insn.encode().map_err(|e| match e {
        EncodeError::Immediate { imm, .. } => AsmError::new(line, AsmErrorKind::ImmediateRange(imm.into())),
        EncodeError::Register(r) => AsmError::new(line, AsmErrorKind::BadRegister(format!("x{r}"))),
    })
}

/// `ADDR: WORD  text` listing of an image.
pub fn listing(image: &Image) -> String {
    let mut out = String::new();
    for (i, word) in image.words.iter().enumerate() {
        let addr = image.base + 4 * i as u64;
        out.push_str(&format!("{addr:08x}: {word:08x}  {}\n", crate::isa::disassemble(*word)));
    }
    out
}

//! Line-oriented command interpreter over a [`ProbeSession`].
//!
//! ```text
//! halt | go | s [n] | rr i | wr i v | pc addr | md addr len | exec hex...
//! map lo hi | iciallu | civac addr | tlbi | dump LEVEL | regs | help
//! ```
//!
//! Blank lines and lines starting with `#` are ignored so command files can
//! be replayed as regression scripts.

use std::fmt::Write as _;

use crate::asm::parse_number;
use crate::isa::{disassemble, DecodedInstruction, Opcode};
use crate::machine::Termination;
use crate::mem::MemLevel;
use crate::mmu::{mapping_report, PAGE_BYTES};
use crate::probe::{ProbeError, ProbeSession};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplError {
    #[error("unknown command `{0}`")]
    Unknown(String),
    #[error("usage: {0}")]
    Usage(&'static str),
    #[error("bad number `{0}`")]
    Number(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub const HELP: &str = "\
halt            stop the core
go              resume until halt, trap or the cycle limit
s [n]           single-step n instructions
rr i / wr i v   read / write register xi
regs            all registers and pc
pc addr         set the program counter
md addr len     read physical memory through the cache hierarchy
exec hex...     run instruction words at the scratch area
map lo hi       classify the VA->PA mapping of a range
iciallu         invalidate the instruction cache
civac addr      clean and invalidate the data line holding addr
tlbi            invalidate all TLBs
dump LEVEL      cache dump of L1I, L1D or L2
";

pub struct Repl {
    session: ProbeSession,
}

fn num(text: &str) -> Result<u64, ReplError> {
    parse_number(text).map(|v| v as u64).ok_or_else(|| ReplError::Number(text.to_string()))
}

fn hex_word(text: &str) -> Result<u32, ReplError> {
    let t = text.trim_start_matches("0x");
    u32::from_str_radix(t, 16).map_err(|_| ReplError::Number(text.to_string()))
}

fn encode(op: Opcode, rd: u8, rn: u8) -> u32 {
    DecodedInstruction::new(op).with_rd(rd).with_rn(rn).encode().expect("fixed encoding")
}

pub fn hexdump(base: u64, bytes: &[u8]) -> String {
    let mut out = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(out, "0x{:08x}:", base + i as u64 * 16);
        for b in chunk {
            let _ = write!(out, " {b:02x}");
        }
        out.push('\n');
    }
    out
}

impl Repl {
    pub fn new(session: ProbeSession) -> Self {
        Repl { session }
    }

    pub fn session(&self) -> &ProbeSession {
        &self.session
    }

    pub fn into_session(self) -> ProbeSession {
        self.session
    }

    /// Runs one command and returns its output text.
    pub fn execute(&mut self, line: &str) -> Result<String, ReplError> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(String::new());
        }
        let args: Vec<&str> = line.split_whitespace().collect();
        let p = &mut self.session;
        let out = match args.as_slice() {
            ["halt"] => {
                p.halt();
                format!("halted at 0x{:08x}\n", p.pc())
            }
            ["go"] => {
                let t = p.resume();
                match t {
                    Termination::Halted => format!("halted at 0x{:08x}, x0 = {}\n", p.pc(), p.soc().state().x[0]),
                    Termination::CycleLimit => format!("cycle limit at 0x{:08x}\n", p.pc()),
                    Termination::Trap(r) => format!("trap at 0x{:08x}: {r:?}\n", p.pc()),
                }
            }
            ["s", rest @ ..] => {
                let n = match rest {
                    [] => 1,
                    [n] => num(n)? as usize,
                    _ => return Err(ReplError::Usage("s [n]")),
                };
                let recs = p.step_n(n)?;
                if recs.is_empty() && n > 0 {
                    return Ok(format!("core stopped at 0x{:08x}; use `pc` to move it\n", p.pc()));
                }
                let mut out = String::new();
                for rec in recs {
                    let text = rec.word.map_or("??".to_string(), disassemble);
                    let _ = write!(out, "0x{:08x}: {text}", rec.pc);
                    if let Some((r, v)) = rec.reg_write {
                        let _ = write!(out, "  ; x{r} = 0x{v:x}");
                    }
                    if let Some(t) = rec.trap {
                        let _ = write!(out, "  ; trap {t:?}");
                    }
                    out.push('\n');
                }
                out
            }
            ["rr", i] => format!("x{} = 0x{:x}\n", num(i)?, p.read_reg(num(i)? as usize)?),
            ["wr", i, v] => {
                p.write_reg(num(i)? as usize, num(v)?)?;
                String::new()
            }
            ["help"] => HELP.to_string(),
            ["regs"] => {
                let mut out = String::new();
                for (i, v) in p.soc().state().x.iter().enumerate() {
                    let _ = writeln!(out, "x{i} = 0x{v:x}");
                }
                let _ = writeln!(out, "pc = 0x{:x}", p.pc());
                out
            }
            ["pc", addr] => {
                p.set_pc(num(addr)?)?;
                String::new()
            }
            ["md", addr, len] => {
                let addr = num(addr)?;
                hexdump(addr, &p.read_mem(addr, num(len)?)?)
            }
            ["exec", words @ ..] if !words.is_empty() => {
                let words = words.iter().map(|w| hex_word(w)).collect::<Result<Vec<_>, _>>()?;
                let r = p.exec_at(&words, &[])?;
                let mut out = String::new();
                for (reg, v) in &r.written {
                    let _ = writeln!(out, "x{reg} = 0x{v:x}");
                }
                if let Some(t) = r.trap {
                    let _ = writeln!(out, "trap {t:?}");
                }
                out
            }
            ["map", lo, hi] => {
                let soc = p.soc();
                mapping_report(&soc.mmu().classify_mapping(soc.mem(), num(lo)?, num(hi)?, PAGE_BYTES))
            }
            ["iciallu"] => {
                p.exec_at(&[encode(Opcode::IcIallu, 0, 0)], &[])?;
                String::new()
            }
            ["civac", addr] => {
                p.exec_at(&[encode(Opcode::DcCivac, 0, 0)], &[(0, num(addr)?)])?;
                String::new()
            }
            ["tlbi"] => {
                p.exec_at(&[encode(Opcode::TlbiAll, 0, 0)], &[])?;
                String::new()
            }
            ["dump", level] => {
                let level = match level.to_ascii_uppercase().as_str() {
                    "L1I" => MemLevel::L1I,
                    "L1D" => MemLevel::L1D,
                    "L2" => MemLevel::L2,
                    _ => return Err(ReplError::Usage("dump L1I|L1D|L2")),
                };
                p.soc().mem().dump(level)
            }
            [cmd, ..] => {
                return Err(match *cmd {
                    "s" => ReplError::Usage("s [n]"),
                    "rr" => ReplError::Usage("rr i"),
                    "wr" => ReplError::Usage("wr i v"),
                    "pc" => ReplError::Usage("pc addr"),
                    "md" => ReplError::Usage("md addr len"),
                    "exec" => ReplError::Usage("exec hex..."),
                    "map" => ReplError::Usage("map lo hi"),
                    "civac" => ReplError::Usage("civac addr"),
                    "dump" => ReplError::Usage("dump LEVEL"),
                    other => ReplError::Unknown(other.to_string()),
                })
            }
            [] => String::new(),
        };
        Ok(out)
    }

    /// Runs every line of `script`, echoing each command with a `> ` prefix.
    /// Errors are reported inline and do not stop the script.
    pub fn run_script(&mut self, script: &str) -> String {
        let mut out = String::new();
        for line in script.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let _ = writeln!(out, "> {trimmed}");
            match self.execute(trimmed) {
                Ok(text) => out.push_str(&text),
                Err(e) => {
                    let _ = writeln!(out, "error: {e}");
                }
            }
        }
        out
    }
}

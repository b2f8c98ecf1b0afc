//! JTAG-style access to a halted machine: registers, data-viewpoint memory
//! reads, injected instruction execution and golden-trace replay.
//!
//! The fault engine is suspended for the lifetime of a session.

use std::fmt::{self, Write as _};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::isa::{disassemble, NUM_REGS};
use crate::machine::{Soc, Status, StepRecord, Termination, TrapReason};
use crate::mem::MemError;

/// Where `exec_at` writes injected code. Page 4, outside every shipped program.
pub const DEFAULT_SCRATCH: u64 = 0x4f000;
pub const SCRATCH_BYTES: u64 = 0x100;
const EXEC_STEP_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProbeError {
    #[error("core is running; halt it first")]
    NotHalted,
    #[error("invalid register index {0}")]
    BadRegister(usize),
    #[error("translation fault at 0x{0:x}")]
    Translation(u64),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("injected code too long ({0} words)")]
    TooLong(usize),
    #[error("region 0x{:x}..0x{:x} is not executable", .0.start, .0.end)]
    NotExecutable(Range<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    /// Final value of every register the injected code wrote.
    pub written: Vec<(u8, u64)>,
    pub regs: Vec<u64>,
    pub trap: Option<TrapReason>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub first_divergent_pc: Option<u64>,
    pub expected: Option<StepRecord>,
    pub observed: Option<StepRecord>,
    /// Replayed instructions up to and including the divergent one.
    pub trace: Vec<StepRecord>,
}

impl DivergenceReport {
    pub fn is_empty(&self) -> bool {
        self.first_divergent_pc.is_none()
    }
}

fn effect(rec: &StepRecord) -> String {
    let mut out = String::new();
    if let Some((r, v)) = rec.reg_write {
        let _ = write!(out, "x{r}=0x{v:x}");
    }
    for (a, v) in &rec.mem_writes {
        let _ = write!(out, "{}[0x{a:x}]=0x{v:x}", if out.is_empty() { "" } else { " " });
    }
    if let Some(t) = rec.trap {
        let _ = write!(out, "trap {t:?}");
    }
    if out.is_empty() {
        out.push('-');
    }
    out
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rec in &self.trace {
            let word = rec.word.map_or("--------".to_string(), |w| format!("{w:08x}"));
            let text = rec.word.map_or(String::new(), disassemble);
            writeln!(f, "0x{:08x}  {word}  {text:<24} {}", rec.pc, effect(rec))?;
        }
        match (self.first_divergent_pc, &self.expected, &self.observed) {
            (Some(pc), expected, observed) => {
                let e = expected.as_ref().map_or("end of golden trace".to_string(), effect);
                let o = observed.as_ref().map_or("-".to_string(), effect);
                writeln!(f, "divergence at 0x{pc:08x}: expected {e}, observed {o}")
            }
            _ => writeln!(f, "no divergence"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeSession {
    soc: Soc,
    halted: bool,
    scratch: u64,
    cycle_limit: u64,
}

impl ProbeSession {
    /// Attaches to `soc` in the halted state.
    pub fn attach(mut soc: Soc) -> ProbeSession {
        if let Some(f) = soc.fault.as_mut() {
            f.set_suspended(true);
        }
        ProbeSession { soc, halted: true, scratch: DEFAULT_SCRATCH, cycle_limit: 1_000_000 }
    }

    pub fn with_scratch(mut self, scratch: u64) -> Self {
        self.scratch = scratch;
        self
    }

    pub fn with_cycle_limit(mut self, limit: u64) -> Self {
        self.cycle_limit = limit;
        self
    }

    pub fn soc(&self) -> &Soc {
        &self.soc
    }

    pub fn into_soc(self) -> Soc {
        self.soc
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    fn require_halted(&self) -> Result<(), ProbeError> {
        if self.halted {
            Ok(())
        } else {
            Err(ProbeError::NotHalted)
        }
    }

    pub fn halt(&mut self) {
        self.halted = true;
    }

    /// Lets the core run until it stops or the session cycle budget is used.
    pub fn resume(&mut self) -> Termination {
        self.halted = false;
        let limit = self.soc.state.cycles.saturating_add(self.cycle_limit);
        let t = self.soc.run(limit);
        self.halted = true;
        t
    }

    pub fn step_n(&mut self, n: usize) -> Result<Vec<StepRecord>, ProbeError> {
        self.require_halted()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.soc.state.status != Status::Running {
                break;
            }
            out.push(self.soc.step());
        }
        Ok(out)
    }

    pub fn read_reg(&self, i: usize) -> Result<u64, ProbeError> {
        self.require_halted()?;
        self.soc.state.x.get(i).copied().ok_or(ProbeError::BadRegister(i))
    }

    pub fn write_reg(&mut self, i: usize, v: u64) -> Result<(), ProbeError> {
        self.require_halted()?;
        *self.soc.state.x.get_mut(i).ok_or(ProbeError::BadRegister(i))? = v;
        Ok(())
    }

    pub fn pc(&self) -> u64 {
        self.soc.state.pc
    }

    /// Moves the pc and makes a stopped core runnable again.
    pub fn set_pc(&mut self, addr: u64) -> Result<(), ProbeError> {
        self.require_halted()?;
        self.soc.state.pc = addr;
        self.soc.state.status = Status::Running;
        Ok(())
    }

    /// Data-viewpoint read: AT-style translation, then L1D over L2 over DRAM.
    pub fn read_mem(&self, vaddr: u64, len: u64) -> Result<Vec<u8>, ProbeError> {
        self.require_halted()?;
        let mut out = Vec::with_capacity(len as usize);
        let mut addr = vaddr;
        while addr < vaddr + len {
            let r = self.soc.mmu.query(addr, &self.soc.mem);
            let pa = r.paddr.filter(|_| r.fault.is_none()).ok_or(ProbeError::Translation(addr))?;
            let chunk = (crate::mmu::PAGE_BYTES - addr % crate::mmu::PAGE_BYTES).min(vaddr + len - addr);
            out.extend(self.soc.mem.probe_read(pa, chunk)?);
            addr += chunk;
        }
        Ok(out)
    }

    /// Writes `words` to the scratch area, sets `inputs`, runs them and
    /// restores pc, registers, status and cycle count. Cache and TLB effects
    /// of the injected code are kept.
    pub fn exec_at(&mut self, words: &[u32], inputs: &[(usize, u64)]) -> Result<ExecResult, ProbeError> {
        self.require_halted()?;
        let len = words.len() as u64 * 4;
        if len > SCRATCH_BYTES {
            return Err(ProbeError::TooLong(words.len()));
        }
        let saved = self.soc.state.clone();
        let r = self.soc.mmu.query(self.scratch, &self.soc.mem);
        let pa = r.paddr.ok_or(ProbeError::Translation(self.scratch))?;
        if !r.attrs.is_some_and(|a| a.exec) {
            return Err(ProbeError::NotExecutable(self.scratch..self.scratch + len));
        }
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        self.soc.mem.poke(pa, &bytes)?;
        self.soc.mem.ic_invalidate_range(pa, len);

        for &(i, v) in inputs {
            *self.soc.state.x.get_mut(i).ok_or(ProbeError::BadRegister(i))? = v;
        }
        self.soc.state.pc = self.scratch;
        self.soc.state.status = Status::Running;
        let region = self.scratch..self.scratch + len;
        let mut written: Vec<(u8, u64)> = Vec::new();
        let mut trap = None;
        let mut steps = 0;
        while region.contains(&self.soc.state.pc) && steps < EXEC_STEP_CAP {
            let rec = self.soc.step();
            steps += 1;
            if let Some((r, v)) = rec.reg_write {
                written.retain(|(w, _)| *w != r);
                written.push((r, v));
            }
            if rec.trap.is_some() || self.soc.state.status != Status::Running {
                trap = rec.trap;
                break;
            }
        }
        let regs = self.soc.state.x.to_vec();
        self.soc.state = saved;
        Ok(ExecResult { written, regs, trap, steps })
    }

    /// Steps from `region.start` and compares each instruction's side effects
    /// with `golden`, stopping at the first difference.
    pub fn replay_diagnose(
        &mut self,
        region: Range<u64>,
        golden: &[StepRecord],
    ) -> Result<DivergenceReport, ProbeError> {
        self.require_halted()?;
        let r = self.soc.mmu.query(region.start, &self.soc.mem);
        if r.fault.is_some() || !r.attrs.is_some_and(|a| a.exec) {
            return Err(ProbeError::NotExecutable(region));
        }
        self.set_pc(region.start)?;
        let mut report = DivergenceReport::default();
        for expected in golden {
            if !region.contains(&self.soc.state.pc) || self.soc.state.status != Status::Running {
                break;
            }
            let observed = self.soc.step();
            report.trace.push(observed.clone());
            if observed.side_effects() != expected.side_effects() || observed.trap != expected.trap {
                report.first_divergent_pc = Some(observed.pc);
                report.expected = Some(expected.clone());
                report.observed = Some(observed);
                break;
            }
        }
        Ok(report)
    }
}

/// Records a golden trace on a fault-free machine: `regs` are loaded, the pc
/// moves to `start` and up to `n` instructions are stepped.
pub fn golden_trace(reference: &Soc, regs: &[u64; NUM_REGS], start: u64, n: usize) -> Vec<StepRecord> {
    let mut twin = reference.clone();
    twin.fault = None;
    twin.state.x = *regs;
    twin.state.pc = start;
    twin.state.status = Status::Running;
    (0..n).map_while(|_| (twin.state.status == Status::Running).then(|| twin.step())).collect()
}

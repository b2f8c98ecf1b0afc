//! The in-order core: one instruction per step, every fetch and data access
//! translated by the MMU and served by the cache hierarchy.

use serde::{Deserialize, Serialize};

use crate::asm::Image;
use crate::fault::{FaultEngine, FaultError, FaultSpec, Mutation, DEFAULT_MIN_WINDOW_OFFSET};
use crate::isa::{decode, Opcode, NUM_REGS};
use crate::mac::{MacConfig, MacEvent, MacMetrics};
use crate::mem::{AccessKind, Effects, LineTransfer, MemError, MemLevel, MemoryConfig, MemorySystem};
use crate::mmu::{Intent, Mmu, MmuConfig, MmuError, WalkEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapReason {
    UndefinedInstruction { pc: u64, word: u32 },
    TranslationFault { vaddr: u64 },
    BusError { paddr: u64 },
    Misaligned { vaddr: u64 },
    IntegrityAlarm { paddr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Running,
    Halted,
    Trapped(TrapReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineState {
    pub x: [u64; NUM_REGS],
    pub pc: u64,
    /// Result of the last `at`.
    pub par: u64,
    pub cycles: u64,
    pub status: Status,
    pub trigger_cycle: Option<u64>,
}

impl MachineState {
    pub fn new(pc: u64) -> Self {
        MachineState { x: [0; NUM_REGS], pc, par: 0, cycles: 0, status: Status::Running, trigger_cycle: None }
    }
}

/// `(register, value)` written by one instruction.
pub type RegWrite = (u8, u64);

/// Architectural side effects of one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pc: u64,
    pub word: Option<u32>,
    pub cycle: u64,
    pub charge: u64,
    pub reg_write: Option<RegWrite>,
    pub mem_writes: Vec<(u64, u64)>,
    pub trap: Option<TrapReason>,
}

impl StepRecord {
    /// The part compared against a golden trace.
    pub fn side_effects(&self) -> (u64, Option<RegWrite>, &[(u64, u64)]) {
        (self.pc, self.reg_write, &self.mem_writes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Trigger { cycle: u64 },
    Transfer(LineTransfer),
    Walk(WalkEvent),
    Mutation(Mutation),
    Mac(MacEvent),
    Trap { cycle: u64, reason: TrapReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Halted,
    CycleLimit,
    Trap(TrapReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub termination: Termination,
    /// x0 when the core halted.
    pub output: Option<u64>,
    pub cycles: u64,
    pub instructions: u64,
    pub event_log: Vec<Event>,
    pub mac: Option<MacMetrics>,
    pub mac_first_detection: Option<MemLevel>,
}

impl RunResult {
    pub fn mutations(&self) -> impl Iterator<Item = &Mutation> {
        self.event_log.iter().filter_map(|e| match e {
            Event::Mutation(m) => Some(m),
            _ => None,
        })
    }

    /// Cycles of every beat moved and every walk issued.
    pub fn event_cycles(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for e in &self.event_log {
            match e {
                Event::Transfer(t) => out.extend(t.intended.iter().map(|b| b.cycle)),
                Event::Walk(w) => out.push(w.cycle),
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SocConfig {
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub mmu: MmuConfig,
    #[serde(default)]
    pub mac: Option<MacConfig>,
    #[serde(default)]
    pub min_window_offset: Option<i64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SocError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Mmu(#[from] MmuError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("MAC configuration: {0}")]
    Mac(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Soc {
    pub(crate) state: MachineState,
    pub(crate) mem: MemorySystem,
    pub(crate) mmu: Mmu,
    pub(crate) fault: Option<FaultEngine>,
    min_window_offset: i64,
    log: Vec<Event>,
    instructions: u64,
}

impl Soc {
    pub fn new(config: &SocConfig) -> Result<Soc, SocError> {
        let mut mem = MemorySystem::new(config.memory)?;
        let mmu = Mmu::new(config.mmu, &mut mem)?;
        if let Some(mac) = &config.mac {
            mac.validate().map_err(SocError::Mac)?;
            mem.enable_mac(mac.clone());
            let tables = mmu.tables();
            mem.generate_on_load_image(tables.base_paddr, tables.len_bytes());
        }
        Ok(Soc {
            state: MachineState::new(0),
            mem,
            mmu,
            fault: None,
            min_window_offset: config.min_window_offset.unwrap_or(DEFAULT_MIN_WINDOW_OFFSET),
            log: Vec::new(),
            instructions: 0,
        })
    }

    /// Builds a SoC with `image` loaded at its base and the pc at its entry.
    pub fn with_image(config: &SocConfig, image: &Image) -> Result<Soc, SocError> {
        let mut soc = Soc::new(config)?;
        soc.load_image(image)?;
        Ok(soc)
    }

    pub fn load_image(&mut self, image: &Image) -> Result<(), SocError> {
        self.mem.load_dram(image.base, &image.to_bytes())?;
        self.mem.generate_on_load_image(image.base, image.len_bytes());
        self.state.pc = image.entry;
        Ok(())
    }

    pub fn arm(&mut self, spec: FaultSpec) -> Result<(), SocError> {
        if self.fault.is_some() {
            return Err(FaultError::AlreadyArmed.into());
        }
        self.fault = Some(FaultEngine::arm(spec, self.min_window_offset)?);
        Ok(())
    }

    pub fn fault(&self) -> Option<&FaultEngine> {
        self.fault.as_ref()
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut MachineState {
        &mut self.state
    }

    pub fn mem(&self) -> &MemorySystem {
        &self.mem
    }

    pub fn mem_mut(&mut self) -> &mut MemorySystem {
        &mut self.mem
    }

    pub fn mmu(&self) -> &Mmu {
        &self.mmu
    }

    pub fn mmu_mut(&mut self) -> &mut Mmu {
        &mut self.mmu
    }

    pub fn event_log(&self) -> &[Event] {
        &self.log
    }

    pub fn instructions(&self) -> u64 {
        self.instructions
    }

    fn absorb(&mut self, fx: Effects) -> Option<TrapReason> {
        for t in fx.transfers {
            self.log.push(Event::Transfer(t));
        }
        for m in fx.mutations {
            self.log.push(Event::Mutation(m));
        }
        for e in fx.mac_events {
            self.log.push(Event::Mac(e));
        }
        fx.alarm.map(|paddr| TrapReason::IntegrityAlarm { paddr })
    }

    fn translate(&mut self, vaddr: u64, intent: Intent, cycle: u64) -> Result<(u64, u64), TrapReason> {
        let t = self
            .mmu
            .translate(vaddr, intent, &mut self.mem, cycle, self.fault.as_mut())
            .map_err(|e| mem_trap(e, vaddr))?;
        if let Some(w) = t.walk {
            self.log.push(Event::Walk(w));
        }
        if let Some(trap) = self.absorb(t.effects) {
            return Err(trap);
        }
        match t.result.paddr {
            Some(pa) if t.result.fault.is_none() => Ok((pa, t.latency)),
            _ => Err(TrapReason::TranslationFault { vaddr }),
        }
    }

    fn mem_access(
        &mut self,
        kind: AccessKind,
        paddr: u64,
        width: usize,
        cycle: u64,
        value: u64,
    ) -> Result<(u64, u64), TrapReason> {
        let out =
            self.mem.access(kind, paddr, width, cycle, value, self.fault.as_mut()).map_err(|e| mem_trap(e, paddr))?;
        if let Some(trap) = self.absorb(out.effects) {
            return Err(trap);
        }
        Ok((out.data, out.latency))
    }

    /// Executes one instruction. Does nothing unless the core is running.
    pub fn step(&mut self) -> StepRecord {
        let pc = self.state.pc;
        let start = self.state.cycles;
        let mut rec =
            StepRecord { pc, word: None, cycle: start, charge: 0, reg_write: None, mem_writes: Vec::new(), trap: None };
        if self.state.status != Status::Running {
            return rec;
        }
        let mut charge = 1u64;
        let result = self.execute(pc, start, &mut charge, &mut rec);
        rec.charge = charge;
        self.state.cycles = start + charge;
        self.instructions += 1;
        if let Err(reason) = result {
            rec.trap = Some(reason);
            rec.reg_write = None;
            self.state.status = Status::Trapped(reason);
            self.log.push(Event::Trap { cycle: self.state.cycles, reason });
        }
        rec
    }

    fn execute(&mut self, pc: u64, start: u64, charge: &mut u64, rec: &mut StepRecord) -> Result<(), TrapReason> {
        if !pc.is_multiple_of(4) {
            return Err(TrapReason::Misaligned { vaddr: pc });
        }
        let (pa, lat) = self.translate(pc, Intent::Ifetch, start + *charge)?;
        *charge += lat;
        let (word, lat) = self.mem_access(AccessKind::Ifetch, pa, 4, start + *charge, 0)?;
        *charge += lat;
        let word = word as u32;
        rec.word = Some(word);
        let insn = decode(word).map_err(|_| TrapReason::UndefinedInstruction { pc, word })?;
        let regs = self.state.x;
        let x = |r: u8| regs[r as usize];
        let imm = insn.imm as i64 as u64;
        let mut next = pc.wrapping_add(4);
        let mut write = None;

        match insn.opcode {
            Opcode::Nop => {}
            Opcode::Halt => {
                self.state.status = Status::Halted;
                next = pc;
            }
            Opcode::Trig => {
                let cycle = start + *charge;
                if self.state.trigger_cycle.is_none() {
                    self.state.trigger_cycle = Some(cycle);
                    self.log.push(Event::Trigger { cycle });
                }
                if let Some(f) = self.fault.as_mut() {
                    f.on_trigger(cycle);
                }
            }
            Opcode::Wait => *charge += imm,
            Opcode::Movi => write = Some((insn.rd, imm)),
            Opcode::Addi => write = Some((insn.rd, x(insn.rn).wrapping_add(imm))),
            Opcode::Subi => write = Some((insn.rd, x(insn.rn).wrapping_sub(imm))),
            Opcode::Add => write = Some((insn.rd, x(insn.rn).wrapping_add(x(insn.rm)))),
            Opcode::Ldr | Opcode::Str => {
                let vaddr = x(insn.rn).wrapping_add(imm);
                if vaddr % 8 != 0 {
                    return Err(TrapReason::Misaligned { vaddr });
                }
                let store = insn.opcode == Opcode::Str;
                let intent = if store { Intent::Write } else { Intent::Read };
                let (pa, lat) = self.translate(vaddr, intent, start + *charge)?;
                *charge += lat;
                let kind = if store { AccessKind::Store } else { AccessKind::Load };
                let value = x(insn.rd);
                let (data, lat) = self.mem_access(kind, pa, 8, start + *charge, value)?;
                *charge += lat;
                if store {
                    rec.mem_writes.push((vaddr, value));
                } else {
                    write = Some((insn.rd, data));
                }
            }
            Opcode::B => next = pc.wrapping_add((insn.imm as i64 * 4) as u64),
            Opcode::Cbnz => {
                if x(insn.rd) != 0 {
                    next = pc.wrapping_add((insn.imm as i64 * 4) as u64);
                }
            }
            Opcode::IcIallu => self.mem.ic_iallu(),
            Opcode::DcCivac => {
                let vaddr = x(insn.rn);
                let (pa, lat) = self.translate(vaddr, Intent::Read, start + *charge)?;
                *charge += lat;
                let fx = self.mem.dc_civac(pa, start + *charge).map_err(|e| mem_trap(e, pa))?;
                self.absorb(fx);
            }
            Opcode::TlbiAll => self.mmu.tlbi_all(),
            Opcode::At => {
                let par = self.mmu.at_query(x(insn.rn), &self.mem);
                self.state.par = par;
                write = Some((insn.rd, par));
            }
        }
        if let Some((rd, v)) = write {
            self.state.x[rd as usize] = v;
        }
        rec.reg_write = write;
        self.state.pc = next;
        Ok(())
    }

    /// Steps until the core stops or `cycle_limit` is reached.
    pub fn run(&mut self, cycle_limit: u64) -> Termination {
        while self.state.status == Status::Running {
            if self.state.cycles >= cycle_limit {
                return Termination::CycleLimit;
            }
            self.step();
        }
        self.termination()
    }

    pub fn termination(&self) -> Termination {
        match self.state.status {
            Status::Running => Termination::CycleLimit,
            Status::Halted => Termination::Halted,
            Status::Trapped(r) => Termination::Trap(r),
        }
    }

    /// Snapshot of the run so far.
    pub fn result(&self) -> RunResult {
        let termination = self.termination();
        RunResult {
            termination,
            output: (termination == Termination::Halted).then_some(self.state.x[0]),
            cycles: self.state.cycles,
            instructions: self.instructions,
            event_log: self.log.clone(),
            mac: self.mem.mac_unit().map(|m| m.metrics()),
            mac_first_detection: self.mem.mac_unit().and_then(|m| m.first_detection()),
        }
    }
}

fn mem_trap(e: MemError, addr: u64) -> TrapReason {
    match e {
        MemError::BusError { paddr } => TrapReason::BusError { paddr },
        MemError::Misaligned { .. } => TrapReason::Misaligned { vaddr: addr },
        MemError::Config(_) => TrapReason::BusError { paddr: addr },
    }
}

/// Loads `image`, optionally arms `fault`, and runs to completion.
pub fn run(
    config: &SocConfig,
    image: &Image,
    fault: Option<FaultSpec>,
    cycle_limit: u64,
) -> Result<RunResult, SocError> {
    let mut soc = Soc::with_image(config, image)?;
    if let Some(spec) = fault {
        soc.arm(spec)?;
    }
    soc.run(cycle_limit);
    Ok(soc.result())
}

//! Parameterized fault models and the interception engine.
//!
//! A [`FaultSpec`] describes one EM pulse: a cycle window relative to the
//! `trig` instruction, a jitter spread, a coupling probability and a
//! model-specific effect. [`FaultEngine::intercept`] is called by the memory
//! hierarchy and the MMU for every beat transfer and table walk; it decides
//! whether the pulse lands and returns the [`Mutation`] to apply. The engine
//! never edits simulator state itself.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mem::{BeatTransfer, Direction, MemLevel, BEAT_BYTES, LINE_BYTES};
use crate::mmu::WalkEvent;

/// Default minimum trigger-to-pulse latency, in cycles (1 cycle ~ 1 ns).
pub const DEFAULT_MIN_WINDOW_OFFSET: i64 = 700;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Self {
        Window { start, end }
    }

    pub fn shifted(self, by: i64) -> Self {
        Window { start: self.start + by, end: self.end + by }
    }

    pub fn contains(&self, rel: i64) -> bool {
        rel >= self.start && rel <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(flatten)]
    pub model: FaultModel,
    /// Inclusive cycle window relative to the trigger.
    pub window: Window,
    #[serde(default)]
    pub jitter_sigma: u64,
    pub success_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "params")]
pub enum FaultModel {
    #[serde(rename = "F_L1I_FILL")]
    L1iFill(L1iParams),
    #[serde(rename = "F_MMU")]
    Mmu(MmuParams),
    #[serde(rename = "F_L2_BEAT")]
    L2Beat(L2Params),
}

impl FaultModel {
    pub fn name(&self) -> &'static str {
        match self {
            FaultModel::L1iFill(_) => "F_L1I_FILL",
            FaultModel::Mmu(_) => "F_MMU",
            FaultModel::L2Beat(_) => "F_L2_BEAT",
        }
    }
}

/// Corrupts one instruction word while its line is installed in L1I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1iParams {
    pub target_paddr_word: u64,
    pub xor_mask: u32,
}

/// Page-table and walker corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmuParams {
    /// How far the in-memory table contents move, in bytes.
    pub table_shift_bytes: u64,
    /// Inclusive range of virtual page addresses whose entries lose bits.
    pub zero_range: [u64; 2],
    /// Translation offset seen by walks after the fault, in bytes.
    pub shift_delta: i64,
    /// Bits cleared in the entries selected by `zero_range`.
    pub pte_corrupt_mask: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum L2Variant {
    F1,
    F2,
}

/// Which path into L2 is faulted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Path {
    /// DRAM to L2 line fill.
    #[default]
    Fill,
    /// L1D to L2 write-back.
    Writeback,
}

/// Redirects one 16-byte beat inside the L2 line being installed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2Params {
    /// Inclusive range of eligible (intended) beat addresses.
    pub beat_paddr_range: [u64; 2],
    pub beat_delta: i64,
    pub variant: L2Variant,
    #[serde(default)]
    pub path: L2Path,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaultError {
    #[error("a fault is already armed for this run")]
    AlreadyArmed,
    #[error("window start {start} is after end {end}")]
    EmptyWindow { start: i64, end: i64 },
    #[error("window start {start} is below the minimum trigger latency {min}")]
    BelowMinLatency { start: i64, min: i64 },
    #[error("success ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("beat delta {0} must be a non-zero multiple of 16 within one line")]
    BeatDelta(i64),
    #[error("F_L1I target 0x{0:x} is not word aligned")]
    Target(u64),
    #[error("F_MMU parameters: {0}")]
    Mmu(String),
}

/// What a fired fault does to simulator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MutationKind {
    /// XOR applied to one word of an L1I fill beat.
    L1iXor { mask: u32 },
    /// Beat written at `after` instead of `before` inside L2.
    L2Shift { delta: i64, variant: L2Variant },
    /// Walk base moved from `before` to `after`; tables rewritten.
    MmuCorrupt(MmuParams),
}

/// A concrete state edit, logged exactly when applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutation {
    pub kind: MutationKind,
    pub location: u64,
    pub before: u64,
    pub after: u64,
    pub cycle: u64,
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MutationKind::L1iXor { .. } => {
                write!(f, "L1I_XOR@0x{:x}:0x{:08x}->0x{:08x}@{}", self.location, self.before, self.after, self.cycle)
            }
            MutationKind::L2Shift { variant, .. } => {
                write!(f, "L2_SHIFT_{:?}@0x{:x}->0x{:x}@{}", variant, self.before, self.after, self.cycle)
            }
            MutationKind::MmuCorrupt(_) => {
                write!(f, "MMU_WALKBASE@0x{:x}:0x{:x}->0x{:x}@{}", self.location, self.before, self.after, self.cycle)
            }
        }
    }
}

/// Events the engine may act on.
#[derive(Debug, Clone, Copy)]
pub enum FaultEvent<'a> {
    Beat(&'a BeatTransfer),
    Walk(&'a WalkEvent),
}

/// Which L2 install path a beat belongs to; carried with beat events.
pub(crate) fn beat_path(beat: &BeatTransfer) -> Option<L2Path> {
    match (beat.direction, beat.src) {
        (Direction::Fill, MemLevel::Dram) => Some(L2Path::Fill),
        (Direction::Evict, MemLevel::L1D) => Some(L2Path::Writeback),
        _ => None,
    }
}

/// An armed fault for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultEngine {
    spec: FaultSpec,
    effective: Window,
    jitter: i64,
    coupled: bool,
    fired: bool,
    suspended: bool,
    trigger_cycle: Option<u64>,
}

impl FaultEngine {
    /// Validates `spec` and draws the jitter and coupling outcome from its seed.
    pub fn arm(spec: FaultSpec, min_window_offset: i64) -> Result<FaultEngine, FaultError> {
        let w = spec.window;
        if w.start > w.end {
            return Err(FaultError::EmptyWindow { start: w.start, end: w.end });
        }
        if w.start < min_window_offset {
            return Err(FaultError::BelowMinLatency { start: w.start, min: min_window_offset });
        }
        if !(0.0..=1.0).contains(&spec.success_ratio) || spec.success_ratio.is_nan() {
            return Err(FaultError::Ratio(spec.success_ratio));
        }
        match &spec.model {
            FaultModel::L1iFill(p) if p.target_paddr_word % 4 != 0 => {
                return Err(FaultError::Target(p.target_paddr_word))
            }
            FaultModel::L2Beat(p) => {
                let d = p.beat_delta;
                if d == 0 || d % BEAT_BYTES as i64 != 0 || d.unsigned_abs() >= LINE_BYTES as u64 {
                    return Err(FaultError::BeatDelta(d));
                }
            }
            FaultModel::Mmu(p) => {
                if p.table_shift_bytes % 8 != 0 {
                    return Err(FaultError::Mmu("table_shift_bytes must be a multiple of 8".into()));
                }
                if p.zero_range[0] > p.zero_range[1] {
                    return Err(FaultError::Mmu("zero_range is empty".into()));
                }
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let spread = 2 * spec.jitter_sigma as i64;
        let jitter = if spread > 0 { rng.gen_range(-spread..=spread) } else { 0 };
        let coupled = rng.gen_bool(spec.success_ratio);
        Ok(FaultEngine {
            effective: w.shifted(jitter),
            spec,
            jitter,
            coupled,
            fired: false,
            suspended: false,
            trigger_cycle: None,
        })
    }

    pub fn spec(&self) -> &FaultSpec {
        &self.spec
    }

    /// Window after the jitter draw, relative to the trigger.
    pub fn effective_window(&self) -> Window {
        self.effective
    }

    pub fn jitter(&self) -> i64 {
        self.jitter
    }

    /// Outcome of the per-shot coupling draw.
    pub fn coupled(&self) -> bool {
        self.coupled
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    pub fn trigger_cycle(&self) -> Option<u64> {
        self.trigger_cycle
    }

    /// Records the trigger. Only the first `trig` of a run counts.
    pub fn on_trigger(&mut self, cycle: u64) {
        self.trigger_cycle.get_or_insert(cycle);
    }

    /// Forensic sessions run with interception disabled.
    pub fn set_suspended(&mut self, suspended: bool) {
        self.suspended = suspended;
    }

    pub fn suspended(&self) -> bool {
        self.suspended
    }

    fn in_window(&self, cycle: u64) -> bool {
        match self.trigger_cycle {
            Some(t) if cycle >= t => self.effective.contains((cycle - t) as i64),
            _ => false,
        }
    }

    /// Returns the mutation to apply for `event`, firing at most once per run.
    pub fn intercept(&mut self, event: FaultEvent<'_>, cycle: u64) -> Option<Mutation> {
        if self.fired || self.suspended || !self.coupled || !self.in_window(cycle) {
            return None;
        }
        let mutation = match (&self.spec.model, event) {
            (FaultModel::L1iFill(p), FaultEvent::Beat(beat)) => {
                let target = p.target_paddr_word;
                if beat.dst != MemLevel::L1I
                    || beat.direction != Direction::Fill
                    || !(beat.beat_paddr..beat.beat_paddr + BEAT_BYTES as u64).contains(&target)
                {
                    return None;
                }
                let off = (target - beat.beat_paddr) as usize;
                let before = u32::from_le_bytes(beat.data[off..off + 4].try_into().unwrap());
                Mutation {
                    kind: MutationKind::L1iXor { mask: p.xor_mask },
                    location: target,
                    before: before as u64,
                    after: (before ^ p.xor_mask) as u64,
                    cycle,
                }
            }
            (FaultModel::L2Beat(p), FaultEvent::Beat(beat)) => {
                let [lo, hi] = p.beat_paddr_range;
                if beat.dst != MemLevel::L2 || beat_path(beat) != Some(p.path) {
                    return None;
                }
                if beat.beat_paddr < lo || beat.beat_paddr > hi {
                    return None;
                }
                let target = beat.beat_paddr as i64 + p.beat_delta;
                let line = beat.beat_paddr & !(LINE_BYTES as u64 - 1);
                // displacement stays inside the line being installed
                if target < line as i64 || target >= (line + LINE_BYTES as u64) as i64 {
                    return None;
                }
                Mutation {
                    kind: MutationKind::L2Shift { delta: p.beat_delta, variant: p.variant },
                    location: beat.beat_paddr,
                    before: beat.beat_paddr,
                    after: target as u64,
                    cycle,
                }
            }
            (FaultModel::Mmu(p), FaultEvent::Walk(walk)) => {
                let after = (walk.walk_base as i64
                    + p.table_shift_bytes as i64
                    + p.shift_delta / crate::mmu::PAGE_BYTES as i64 * crate::mmu::PTE_BYTES as i64)
                    as u64;
                Mutation {
                    kind: MutationKind::MmuCorrupt(*p),
                    location: walk.vaddr,
                    before: walk.walk_base,
                    after,
                    cycle,
                }
            }
            _ => return None,
        };
        self.fired = true;
        Some(mutation)
    }
}

//! Cycle-approximate model of a single-core SoC (caches, MMU, in-order core)
//! with parameterized electromagnetic fault models, a JTAG-style probe and
//! per-block MAC countermeasures.
//!
//! ```
//! use socfault_core::{programs, run, SocConfig, Termination};
//!
//! let r = run(&SocConfig::default(), &programs::loop_image(), None, 1_000_000).unwrap();
//! assert_eq!(r.termination, Termination::Halted);
//! assert_eq!(r.output, Some(2500));
//! ```

pub mod asm;
pub mod campaign;
pub mod fault;
pub mod heatmap;
pub mod isa;
pub mod mac;
pub mod machine;
pub mod mem;
pub mod mmu;
pub mod probe;
pub mod programs;
pub mod repl;

pub use asm::{assemble, Image, ImageMeta};
pub use campaign::{classify, run_scenario, sweep, CampaignRow, OutcomeClass, OutcomeRecord, Scenario, SweepParams};
pub use fault::{
    FaultEngine, FaultModel, FaultSpec, L1iParams, L2Params, L2Path, L2Variant, MmuParams, Mutation, Window,
};
pub use heatmap::Heatmap;
pub use isa::{decode, disassemble, DecodedInstruction, Opcode};
pub use mac::{mac_tag, MacConfig, MacMetrics, MacPolicy, VerifyOutcome, VerifyStatus};
pub use machine::{run, Event, MachineState, RunResult, Soc, SocConfig, StepRecord, Termination, TrapReason};
pub use mem::{AccessKind, BeatTransfer, CacheConfig, MemLevel, MemoryConfig, MemorySystem};
pub use mmu::{MappingClass, MappingEntry, Mmu, MmuConfig};
pub use probe::{DivergenceReport, ProbeSession};
pub use repl::Repl;

//! Scenario files, outcome classification and delay sweeps.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::asm::{assemble, Image, ImageMeta};
use crate::fault::FaultSpec;
use crate::mac::MacConfig;
use crate::machine::{RunResult, Soc, SocConfig, SocError, Termination};
use crate::mem::MemLevel;
use crate::mmu::{mapping_report, PAGE_BYTES};
use crate::probe::{golden_trace, DivergenceReport, ProbeSession};
use crate::repl::hexdump;

fn default_cycle_limit() -> u64 {
    1_000_000
}

fn default_replay_steps() -> usize {
    256
}

fn default_map() -> [u64; 2] {
    [0, 0x100000]
}

fn default_trials() -> u32 {
    27
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForensicsConfig {
    /// Code region replayed against the golden trace; defaults to the image.
    #[serde(default)]
    pub region: Option<[u64; 2]>,
    #[serde(default = "default_replay_steps")]
    pub replay_steps: usize,
    /// Virtual range classified in the mapping report.
    #[serde(default = "default_map")]
    pub map: [u64; 2],
    /// Range shown in the probe memory dump; defaults to the image.
    #[serde(default)]
    pub dump: Option<[u64; 2]>,
}

impl Default for ForensicsConfig {
    fn default() -> Self {
        ForensicsConfig { region: None, replay_steps: default_replay_steps(), map: default_map(), dump: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepParams {
    pub delay_start: i64,
    pub delay_end: i64,
    pub step: i64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed_base: u64,
}

impl SweepParams {
    pub fn delays(&self) -> Vec<i64> {
        let step = self.step.max(1) as usize;
        (self.delay_start..=self.delay_end).step_by(step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Assembly source (`.s`) or flat binary (`.bin` with a `.json` sidecar),
    /// relative to the scenario file.
    pub program: PathBuf,
    #[serde(default)]
    pub config: SocConfig,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
    #[serde(default)]
    pub mac: Option<MacConfig>,
    pub expected_output: u64,
    #[serde(default = "default_cycle_limit")]
    pub cycle_limit: u64,
    #[serde(default)]
    pub forensics: ForensicsConfig,
    #[serde(default)]
    pub sweep: Option<SweepParams>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}:{line}: {msg}")]
    Asm { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Soc(#[from] SocError),
    #[error("scenario has no fault to sweep")]
    NoFault,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Loads a program image: `.s` files are assembled, anything else is read as
/// a flat little-endian binary described by a `.json` sidecar.
pub fn load_program(path: &Path) -> Result<Image, ScenarioError> {
    let io_err = |source| ScenarioError::Io { path: path.to_path_buf(), source };
    if path.extension().is_some_and(|e| e == "s") {
        let src = std::fs::read_to_string(path).map_err(io_err)?;
        return assemble(&src).map_err(|e| ScenarioError::Asm {
            path: path.to_path_buf(),
            line: e.line,
            msg: e.kind.to_string(),
        });
    }
    let bytes = std::fs::read(path).map_err(io_err)?;
    let meta_path = path.with_extension("json");
    let meta_text =
        std::fs::read_to_string(&meta_path).map_err(|source| ScenarioError::Io { path: meta_path.clone(), source })?;
    let meta: ImageMeta =
        serde_json::from_str(&meta_text).map_err(|source| ScenarioError::Json { path: meta_path.clone(), source })?;
    Image::from_parts(&bytes, meta).map_err(|e| ScenarioError::Asm {
        path: path.to_path_buf(),
        line: e.line,
        msg: e.kind.to_string(),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        let mut s: Scenario =
            serde_json::from_str(&text).map_err(|source| ScenarioError::Json { path: path.to_path_buf(), source })?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn program_path(&self) -> PathBuf {
        self.base_dir.join(&self.program)
    }

    pub fn image(&self) -> Result<Image, ScenarioError> {
        load_program(&self.program_path())
    }

    /// Machine configuration with the scenario-level MAC setting applied.
    pub fn soc_config(&self) -> SocConfig {
        let mut cfg = self.config.clone();
        if self.mac.is_some() {
            cfg.mac = self.mac.clone();
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutcomeClass {
    Correct,
    WrongOutput,
    Timeout,
    Trap,
    Detected(MemLevel),
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeClass::Correct => f.write_str("CORRECT"),
            OutcomeClass::WrongOutput => f.write_str("WRONG_OUTPUT"),
            OutcomeClass::Timeout => f.write_str("TIMEOUT"),
            OutcomeClass::Trap => f.write_str("TRAP"),
            OutcomeClass::Detected(level) => write!(f, "DETECTED({})", level.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown outcome `{0}`")]
pub struct ParseOutcomeError(String);

impl FromStr for OutcomeClass {
    type Err = ParseOutcomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseOutcomeError(s.to_string());
        Ok(match s {
            "CORRECT" => OutcomeClass::Correct,
            "WRONG_OUTPUT" => OutcomeClass::WrongOutput,
            "TIMEOUT" => OutcomeClass::Timeout,
            "TRAP" => OutcomeClass::Trap,
            _ => {
                let inner = s.strip_prefix("DETECTED(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
                let level = match inner {
                    "L1I" => MemLevel::L1I,
                    "L1D" => MemLevel::L1D,
                    "L2" => MemLevel::L2,
                    "DRAM" => MemLevel::Dram,
                    _ => return Err(bad()),
                };
                OutcomeClass::Detected(level)
            }
        })
    }
}

impl Serialize for OutcomeClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OutcomeClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// A MAC mismatch anywhere in the run takes precedence over the termination.
pub fn classify(result: &RunResult, expected: u64) -> OutcomeClass {
    if let Some(level) = result.mac_first_detection {
        return OutcomeClass::Detected(level);
    }
    match result.termination {
        Termination::Halted if result.output == Some(expected) => OutcomeClass::Correct,
        Termination::Halted => OutcomeClass::WrongOutput,
        Termination::CycleLimit => OutcomeClass::Timeout,
        Termination::Trap(_) => OutcomeClass::Trap,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forensics {
    pub mapping: String,
    pub l1i: String,
    pub l1d: String,
    pub l2: String,
    pub probe_dump: String,
    pub divergence: Option<DivergenceReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeRecord {
    pub class: OutcomeClass,
    pub result: RunResult,
    pub forensics: Option<Forensics>,
}

/// Runs the scenario with `fault` armed and returns the stopped machine.
pub fn execute(scenario: &Scenario, image: &Image, fault: Option<FaultSpec>) -> Result<Soc, ScenarioError> {
    let mut soc = Soc::with_image(&scenario.soc_config(), image)?;
    if let Some(spec) = fault {
        soc.arm(spec)?;
    }
    soc.run(scenario.cycle_limit);
    Ok(soc)
}

/// Fault-free reference run of the same scenario.
pub fn reference_run(scenario: &Scenario, image: &Image) -> Result<Soc, ScenarioError> {
    execute(scenario, image, None)
}

/// Runs the scenario once with its own fault. Non-correct outcomes get a
/// mapping report, cache dumps, a probe memory dump and a replay diagnosis.
pub fn run_scenario(scenario: &Scenario) -> Result<OutcomeRecord, ScenarioError> {
    let image = scenario.image()?;
    run_with(scenario, &image, scenario.fault.clone(), true)
}

pub fn run_with(
    scenario: &Scenario,
    image: &Image,
    fault: Option<FaultSpec>,
    with_forensics: bool,
) -> Result<OutcomeRecord, ScenarioError> {
    let soc = execute(scenario, image, fault)?;
    let result = soc.result();
    let class = classify(&result, scenario.expected_output);
    let forensics = if with_forensics && class != OutcomeClass::Correct {
        Some(collect_forensics(scenario, image, soc)?)
    } else {
        None
    };
    Ok(OutcomeRecord { class, result, forensics })
}

pub fn collect_forensics(scenario: &Scenario, image: &Image, soc: Soc) -> Result<Forensics, ScenarioError> {
    let f = &scenario.forensics;
    let reference = reference_run(scenario, image)?;
    let mem = soc.mem();
    let [lo, hi] = f.map;
    let mapping = mapping_report(&soc.mmu().classify_mapping(mem, lo, hi, PAGE_BYTES));
    let (l1i, l1d, l2) = (mem.dump(MemLevel::L1I), mem.dump(MemLevel::L1D), mem.dump(MemLevel::L2));
    let [rs, re] = f.region.unwrap_or([image.base, image.end()]);
    let [ds, dl] = f.dump.unwrap_or([image.base, image.len_bytes()]);
    let golden = golden_trace(&reference, &soc.state().x, rs, f.replay_steps);

    let mut session = ProbeSession::attach(soc);
    let probe_dump = match session.read_mem(ds, dl) {
        Ok(bytes) => hexdump(ds, &bytes),
        Err(e) => format!("{e}\n"),
    };
    let divergence = session.replay_diagnose(rs..re, &golden).ok();
    Ok(Forensics { mapping, l1i, l1d, l2, probe_dump, divergence })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub delay: i64,
    pub trial: u32,
    pub seed: u64,
    pub outcome: OutcomeClass,
    pub mutation: String,
}

pub fn cell_seed(seed_base: u64, delay_index: usize, trial: u32) -> u64 {
    seed_base.wrapping_add((delay_index as u64) << 32 | trial as u64)
}

/// Runs `trials` shots at every delay. Cells run in parallel, each on its own
/// machine; rows come back in (delay, trial) order.
pub fn sweep(scenario: &Scenario, image: &Image, params: &SweepParams) -> Result<Vec<CampaignRow>, ScenarioError> {
    let base = scenario.fault.clone().ok_or(ScenarioError::NoFault)?;
    let cells: Vec<(usize, i64, u32)> =
        params.delays().into_iter().enumerate().flat_map(|(i, d)| (0..params.trials).map(move |t| (i, d, t))).collect();
    cells
        .par_iter()
        .map(|&(i, delay, trial)| {
            let seed = cell_seed(params.seed_base, i, trial);
            let spec = FaultSpec { window: base.window.shifted(delay), seed, ..base.clone() };
            let rec = run_with(scenario, image, Some(spec), false)?;
            let mutation = rec.result.mutations().next().map(|m| m.to_string()).unwrap_or_default();
            Ok(CampaignRow { delay, trial, seed, outcome: rec.class, mutation })
        })
        .collect()
}

pub fn write_csv<W: io::Write>(rows: &[CampaignRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<CampaignRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Event, TrapReason};

    fn result(termination: Termination, output: Option<u64>) -> RunResult {
        RunResult {
            termination,
            output,
            cycles: 0,
            instructions: 0,
            event_log: Vec::<Event>::new(),
            mac: None,
            mac_first_detection: None,
        }
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&result(Termination::Halted, Some(2500)), 2500), OutcomeClass::Correct);
        assert_eq!(classify(&result(Termination::Halted, Some(2450)), 2500), OutcomeClass::WrongOutput);
        assert_eq!(classify(&result(Termination::CycleLimit, None), 2500), OutcomeClass::Timeout);
        let trap = Termination::Trap(TrapReason::BusError { paddr: 0 });
        assert_eq!(classify(&result(trap, None), 2500), OutcomeClass::Trap);
        let mut detected = result(Termination::Halted, Some(2500));
        detected.mac_first_detection = Some(MemLevel::L2);
        assert_eq!(classify(&detected, 2500), OutcomeClass::Detected(MemLevel::L2));
    }

    #[test]
    fn outcome_text_round_trip() {
        for c in [
            OutcomeClass::Correct,
            OutcomeClass::WrongOutput,
            OutcomeClass::Timeout,
            OutcomeClass::Trap,
            OutcomeClass::Detected(MemLevel::L1I),
            OutcomeClass::Detected(MemLevel::Dram),
        ] {
            assert_eq!(c.to_string().parse::<OutcomeClass>(), Ok(c));
        }
        assert!("DETECTED(L3)".parse::<OutcomeClass>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            CampaignRow { delay: 0, trial: 0, seed: 1, outcome: OutcomeClass::Correct, mutation: String::new() },
            CampaignRow {
                delay: 5,
                trial: 1,
                seed: 2,
                outcome: OutcomeClass::Detected(MemLevel::L2),
                mutation: "L2_SHIFT_F1@0x489f0->0x489e0@2317".into(),
            },
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("delay,trial,seed,outcome,mutation\n0,0,1,CORRECT,\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn delays_and_seeds() {
        let p = SweepParams { delay_start: 0, delay_end: 10, step: 5, trials: 2, seed_base: 9 };
        assert_eq!(p.delays(), vec![0, 5, 10]);
        assert_ne!(cell_seed(9, 0, 1), cell_seed(9, 1, 0));
    }
}

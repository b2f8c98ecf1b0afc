//! Scenario-level acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socfault_core::campaign::{self, execute, run_with, write_csv};
use socfault_core::heatmap::Heatmap;
use socfault_core::isa::{DecodedInstruction, Opcode};
use socfault_core::mmu::{MappingClass, PAGE_BYTES, PTE_FRAME_MASK};
use socfault_core::probe::{golden_trace, DEFAULT_SCRATCH, SCRATCH_BYTES};
use socfault_core::programs::{self, LOOP_ADD, LOOP_START};
use socfault_core::{
    mac_tag, Event, FaultModel, FaultSpec, Image, L1iParams, L2Params, L2Path, L2Variant, MacConfig, MacPolicy,
    MemLevel, MemoryConfig, MmuParams, OutcomeClass, ProbeSession, RunResult, Scenario, Soc, SweepParams, Termination,
    Window,
};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap()
}

fn encode(op: Opcode) -> u32 {
    DecodedInstruction::new(op).encode().unwrap()
}

fn dram_outside_scratch(soc: &Soc) -> Vec<u8> {
    let mut d = soc.mem().dram().to_vec();
    let s = DEFAULT_SCRATCH as usize;
    d[s..s + SCRATCH_BYTES as usize].fill(0);
    d
}

/// L2 dump without lines of the probe scratch area.
fn l2_outside_scratch(soc: &Soc) -> Vec<String> {
    let sets = MemoryConfig::default().l2.sets() as u64;
    let scratch = DEFAULT_SCRATCH..DEFAULT_SCRATCH + SCRATCH_BYTES;
    soc.mem()
        .dump(MemLevel::L2)
        .lines()
        .filter(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let set: u64 = f[1].parse().unwrap();
            let tag = u64::from_str_radix(f[3], 16).unwrap();
            !scratch.contains(&((tag * sets + set) * 64))
        })
        .map(str::to_string)
        .collect()
}

fn trigger_cycle(r: &RunResult) -> u64 {
    r.event_log
        .iter()
        .find_map(|e| match e {
            Event::Trigger { cycle } => Some(*cycle),
            _ => None,
        })
        .expect("program has a trig")
}

fn baseline() -> Check {
    let s = scenario("s0_loop.json");
    let first = campaign::run_scenario(&s).map_err(|e| e.to_string())?;
    ensure!(first.class == OutcomeClass::Correct, "class {}", first.class);
    ensure!(first.result.output == Some(2500), "output {:?}", first.result.output);
    for i in 1..10 {
        let again = campaign::run_scenario(&s).map_err(|e| e.to_string())?;
        ensure!(again.result == first.result, "run {i} differs from run 0");
    }
    Ok(format!("output 2500, {} cycles, 10 identical runs", first.result.cycles))
}

fn sticky_skip() -> Check {
    let s = scenario("s1_l1i.json");
    let img = s.image().unwrap();
    let reference = campaign::reference_run(&s, &img).unwrap();
    let ref_dram = dram_outside_scratch(&reference);
    let ref_l2 = l2_outside_scratch(&reference);

    let soc = execute(&s, &img, s.fault.clone()).unwrap();
    let result = soc.result();
    ensure!(campaign::classify(&result, 2500) == OutcomeClass::WrongOutput, "first run {:?}", result.output);
    let same_backing = |soc: &Soc| dram_outside_scratch(soc) == ref_dram && l2_outside_scratch(soc) == ref_l2;
    ensure!(same_backing(&soc), "DRAM or L2 differ after the faulted run");

    // Golden trace from the loop start with the registers the loop sees.
    let golden = golden_trace(&reference, &[0; 31], LOOP_START, 64);
    let mut probe = ProbeSession::attach(soc);
    let report = probe.replay_diagnose(LOOP_START..programs::LOOP_END, &golden).unwrap();
    ensure!(report.first_divergent_pc == Some(LOOP_ADD), "divergence at {:x?}", report.first_divergent_pc);
    ensure!(same_backing(probe.soc()), "DRAM or L2 differ after replay");

    probe.set_pc(LOOP_START).unwrap();
    let t = probe.resume();
    let sticky = probe.read_reg(0).unwrap();
    ensure!(t == Termination::Halted && sticky != 2500, "rerun without re-arming gave {sticky}");
    ensure!(same_backing(probe.soc()), "DRAM or L2 differ after the rerun");

    probe.exec_at(&[encode(Opcode::IcIallu)], &[]).unwrap();
    probe.set_pc(LOOP_START).unwrap();
    let t = probe.resume();
    let fixed = probe.read_reg(0).unwrap();
    ensure!(t == Termination::Halted && fixed == 2500, "after ic_iallu got {fixed}");
    ensure!(same_backing(probe.soc()), "DRAM or L2 differ after ic_iallu");
    Ok(format!("output 0, divergence at 0x{LOOP_ADD:x}, rerun {sticky}, after ic_iallu {fixed}"))
}

fn mmu_fault() -> Check {
    let s = scenario("s2_mmu.json");
    let img = s.image().unwrap();
    let reference = campaign::reference_run(&s, &img).unwrap();
    let soc = execute(&s, &img, s.fault.clone()).unwrap();
    ensure!(soc.mmu().corruption().is_some(), "fault did not couple");

    let report = soc.mmu().classify_mapping(soc.mem(), 0, 0x10_0000, PAGE_BYTES);
    let mut kinds = BTreeSet::new();
    for e in &report {
        let v = e.vpage;
        let kind = match e.class {
            MappingClass::Identity => {
                ensure!(v <= 0x70000, "identity at 0x{v:x}");
                "identity"
            }
            MappingClass::Zero => {
                ensure!((0x80000..=0xb0000).contains(&v), "zero at 0x{v:x}");
                "zero"
            }
            MappingClass::Shifted(d) => {
                ensure!(v >= 0xc0000 && d == 0x740000, "shifted at 0x{v:x} by 0x{d:x}");
                "shifted"
            }
            MappingClass::Fault => return Err(format!("fault at 0x{v:x}")),
        };
        kinds.insert(kind);
    }
    ensure!(kinds.len() == 3, "classes {kinds:?}");
    let c0 = report.iter().find(|e| e.vpage == 0xc0000).unwrap();
    ensure!(c0.ppage == Some(0x80_0000), "0xc0000 maps to {:x?}", c0.ppage);

    let mut probe = ProbeSession::attach(soc);
    let before = socfault_core::mmu::mapping_report(&report);
    probe.exec_at(&[encode(Opcode::TlbiAll)], &[]).unwrap();
    let soc = probe.soc();
    let after = socfault_core::mmu::mapping_report(&soc.mmu().classify_mapping(soc.mem(), 0, 0x10_0000, PAGE_BYTES));
    ensure!(before == after, "classification changed after tlbi_all");

    let [base, len] = s.forensics.dump.unwrap();
    let dump = probe.read_mem(base, len).unwrap();
    let clean = ProbeSession::attach(reference).read_mem(base, len).unwrap();
    ensure!(dump != clean, "table region unchanged");
    let walk = probe.soc().mmu().walk_base();
    let pte = |vpage: u64| {
        let off = (walk + vpage * 8 - base) as usize;
        u64::from_le_bytes(dump[off..off + 8].try_into().unwrap())
    };
    for vpage in 8..=11 {
        ensure!(pte(vpage) & PTE_FRAME_MASK == 0, "entry {vpage} keeps frame bits: 0x{:x}", pte(vpage));
    }
    ensure!(pte(12) & PTE_FRAME_MASK == 0x80_0000, "entry 12 is 0x{:x}", pte(12));
    Ok(format!("{} pages in 3 classes, walk base 0x{walk:x}, tlbi stable", report.len()))
}

struct L2Run {
    class: OutcomeClass,
    trace: Vec<(u64, Option<u32>, Option<(u8, u64)>)>,
    executed: Vec<(u64, u32)>,
    probe: ProbeSession,
}

fn l2_run(variant: L2Variant) -> L2Run {
    let mut s = scenario("s3_l2_f1.json");
    if let Some(FaultModel::L2Beat(p)) = s.fault.as_mut().map(|f| &mut f.model) {
        p.variant = variant;
    }
    let img = s.image().unwrap();
    let mut soc = Soc::with_image(&s.soc_config(), &img).unwrap();
    soc.arm(s.fault.clone().unwrap()).unwrap();
    let mut trace = Vec::new();
    let mut executed = Vec::new();
    while soc.termination() == Termination::CycleLimit && soc.state().cycles < s.cycle_limit {
        let rec = soc.step();
        if let Some(w) = rec.word {
            if (0x489c0..0x48a00).contains(&rec.pc) && !executed.contains(&(rec.pc, w)) {
                executed.push((rec.pc, w));
            }
        }
        if trace.len() < 4000 {
            trace.push((rec.pc, rec.word, rec.reg_write));
        }
    }
    let class = campaign::classify(&soc.result(), s.expected_output);
    L2Run { class, trace, executed, probe: ProbeSession::attach(soc) }
}

fn l2_shift() -> Check {
    let line = programs::REG_TRANSFER_BODY;
    let original = programs::reg_transfer_image();
    let orig = |a: u64| original.word_at(a).unwrap();

    let f1 = l2_run(L2Variant::F1);
    ensure!(f1.class == OutcomeClass::Timeout, "F1 class {}", f1.class);
    let f1_dump = f1.probe.read_mem(line, 64).unwrap();
    let word = |d: &[u8], a: u64| {
        let o = (a - line) as usize;
        u32::from_le_bytes(d[o..o + 4].try_into().unwrap())
    };
    // The beat meant for 0x489f0 lands 16 bytes lower.
    let (dst, src) = (0x489e0, 0x489f0);
    ensure!(f1.executed.iter().any(|&(pc, _)| (dst..dst + 16).contains(&pc)), "displaced beat never executed");
    for &(pc, w) in &f1.executed {
        ensure!(word(&f1_dump, pc) == w, "executed 0x{w:08x} at 0x{pc:x}, dump has 0x{:08x}", word(&f1_dump, pc));
    }
    for a in (dst..dst + 16).step_by(4) {
        ensure!(word(&f1_dump, a) == orig(a + 16), "word 0x{a:x} is not the one from 16 bytes above");
    }
    ensure!((dst..dst + 16).step_by(4).any(|a| orig(a) != orig(a + 16)), "shift is invisible");
    let changed: Vec<u64> = (line..line + 64).step_by(4).filter(|&a| word(&f1_dump, a) != orig(a)).collect();
    ensure!(
        changed.iter().all(|&a| (dst..src + 16).contains(&a)),
        "changed words outside the shifted pair {changed:x?}"
    );

    let mut f2 = l2_run(L2Variant::F2);
    ensure!(f2.class == OutcomeClass::Timeout, "F2 class {}", f2.class);
    ensure!(f2.trace == f1.trace, "F2 execution trace differs from F1");
    let before = f2.probe.read_mem(line, 64).unwrap();
    ensure!(before != f1_dump, "F2 dump already equals F1 before dc_civac");
    ensure!((line..line + 64).step_by(4).all(|a| word(&before, a) == orig(a)), "F2 dump is not the clean copy");
    f2.probe.exec_at(&[encode(Opcode::DcCivac)], &[(0, 0x489f0)]).unwrap();
    let after = f2.probe.read_mem(line, 64).unwrap();
    ensure!(after == f1_dump, "F2 dump after dc_civac differs from F1");
    Ok(format!(
        "F1/F2 TIMEOUT, one beat moved 16 bytes down ({} words changed), F2 dump converges after dc_civac",
        changed.len()
    ))
}

fn campaign_trials(s: &Scenario, policy: MacPolicy, trials: u32) -> Result<Vec<RunResult>, String> {
    let mut s = s.clone();
    s.mac = Some(MacConfig::with_policy(0x0123_4567_89ab_cdef, policy));
    let img = s.image().unwrap();
    let base = s.fault.clone().unwrap();
    (0..trials)
        .map(|t| {
            let spec = FaultSpec { seed: campaign::cell_seed(1000, 0, t), ..base.clone() };
            run_with(&s, &img, Some(spec), false).map(|r| r.result).map_err(|e| e.to_string())
        })
        .collect()
}

fn countermeasures() -> Check {
    const TRIALS: u32 = 100;
    let mut summary = Vec::new();
    for name in ["s1_l1i.json", "s3_l2_f1.json"] {
        let s = scenario(name);
        for policy in [MacPolicy::Proactive, MacPolicy::Jit] {
            let runs = campaign_trials(&s, policy, TRIALS)?;
            let mut detected = 0;
            for r in &runs {
                let class = campaign::classify(r, s.expected_output);
                ensure!(matches!(class, OutcomeClass::Detected(_)), "{name} {policy:?}: {class}");
                detected += 1;
                let m = r.mac.unwrap();
                if policy == MacPolicy::Jit {
                    ensure!(m.alarms == 0 && m.recoveries > 0, "{name} JIT: {m:?}");
                    ensure!(r.output == Some(s.expected_output), "{name} JIT recovered run gave {:?}", r.output);
                }
            }
            summary.push(format!("{name} {policy:?} {detected}/{TRIALS}"));
        }
    }
    let s0 = scenario("s0_loop.json");
    let img = s0.image().unwrap();
    let checks = |policy| {
        let mut s = s0.clone();
        s.mac = Some(MacConfig::with_policy(7, policy));
        run_with(&s, &img, None, false).unwrap().result.mac.unwrap()
    };
    let (pro, jit) = (checks(MacPolicy::Proactive), checks(MacPolicy::Jit));
    ensure!(pro.checks >= jit.checks && jit.checks > 0, "checks proactive {} jit {}", pro.checks, jit.checks);
    ensure!(pro.mismatches == 0 && jit.mismatches == 0, "fault-free mismatches");
    summary.push(format!("fault-free checks proactive {} >= jit {}", pro.checks, jit.checks));
    Ok(summary.join(", "))
}

fn oracle_mix(z: u64) -> u64 {
    let z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn oracle_tag(key: u64, paddr: u64, block: &[u8; 16]) -> u64 {
    let d0 = u64::from_le_bytes(block[..8].try_into().unwrap());
    let d1 = u64::from_le_bytes(block[8..].try_into().unwrap());
    let s = oracle_mix(key ^ paddr);
    let s = oracle_mix(s ^ d0);
    oracle_mix(s ^ d1)
}

fn mac_vectors() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let key: u64 = rng.gen();
        let paddr = rng.gen::<u64>() & !15;
        let block: [u8; 16] = rng.gen();
        let got = mac_tag(key, paddr, &block).map_err(|e| e.to_string())?;
        ensure!(got == oracle_tag(key, paddr, &block), "mismatch key 0x{key:x} paddr 0x{paddr:x}");
    }
    let mut distinct = 0;
    for _ in 0..10_000 {
        let key: u64 = rng.gen();
        let paddr = rng.gen::<u64>() & !15 & (u64::MAX >> 1);
        let block: [u8; 16] = rng.gen();
        distinct += (mac_tag(key, paddr, &block).unwrap() != mac_tag(key, paddr + 16, &block).unwrap()) as u32;
    }
    ensure!(distinct >= 9990, "only {distinct}/10000 shifted pairs differ");
    Ok(format!("1000/1000 oracle matches, {distinct}/10000 shifted pairs differ"))
}

fn random_spec(rng: &mut ChaCha8Rng, window: Window) -> FaultSpec {
    let model = match rng.gen_range(0..3) {
        0 => FaultModel::L1iFill(L1iParams {
            target_paddr_word: 0x48000 + 4 * rng.gen_range(0..0x300),
            xor_mask: rng.gen_range(1..u32::MAX),
        }),
        1 => FaultModel::Mmu(MmuParams {
            table_shift_bytes: 0x40,
            zero_range: [0x80000, 0xb0000],
            shift_delta: 0x740000,
            pte_corrupt_mask: PTE_FRAME_MASK,
        }),
        _ => {
            let lo = 0x48000 + 16 * rng.gen_range(0..0xc0);
            let variant = if rng.gen() { L2Variant::F1 } else { L2Variant::F2 };
            let path = if rng.gen() { L2Path::Fill } else { L2Path::Writeback };
            FaultModel::L2Beat(L2Params { beat_paddr_range: [lo, lo + 15], beat_delta: -16, variant, path })
        }
    };
    FaultSpec { model, window, jitter_sigma: 0, success_ratio: 1.0, seed: rng.gen() }
}

fn negative_result() -> Check {
    let programs: [(Image, u64); 3] =
        [(programs::loop_image(), 2500), (programs::reg_transfer_image(), 36), (programs::mmu_image(), 1)];
    let config = socfault_core::SocConfig::default();
    let references: Vec<(RunResult, Vec<i64>)> = programs
        .iter()
        .map(|(img, _)| {
            let r = socfault_core::run(&config, img, None, 200_000).unwrap();
            let trig = trigger_cycle(&r) as i64;
            let rel = r.event_cycles().into_iter().map(|c| c as i64 - trig).collect();
            (r, rel)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut placed = 0;
    while placed < 100 {
        let p = rng.gen_range(0..programs.len());
        let (reference, rel) = &references[p];
        let start = rng.gen_range(700..reference.cycles as i64);
        let window = Window::new(start, start + rng.gen_range(0..400));
        if rel.iter().any(|&c| window.contains(c)) {
            continue;
        }
        let spec = random_spec(&mut rng, window);
        let r = socfault_core::run(&config, &programs[p].0, Some(spec.clone()), 200_000).map_err(|e| e.to_string())?;
        ensure!(&r == reference, "window {window:?} with {:?} changed the run", spec.model.name());
        placed += 1;
    }
    Ok(format!("{placed}/100 event-free placements identical to fault-free"))
}

fn sweep_localization() -> Check {
    let s = scenario("s1_sweep.json");
    let img = s.image().unwrap();
    let spec = s.fault.clone().unwrap();
    let params: SweepParams = s.sweep.unwrap();
    ensure!(params.trials == 27, "trials {}", params.trials);

    let reference = campaign::reference_run(&s, &img).unwrap().result();
    let trig = trigger_cycle(&reference) as i64;
    let FaultModel::L1iFill(p) = spec.model else { return Err("not an L1I scenario".into()) };
    let line = p.target_paddr_word & !63;
    let fill: Vec<i64> = reference
        .event_log
        .iter()
        .filter_map(|e| match e {
            Event::Transfer(t) if t.dst == MemLevel::L1I && t.line_paddr == line => Some(t),
            _ => None,
        })
        .flat_map(|t| t.intended.iter().map(|b| b.cycle as i64 - trig))
        .collect();
    ensure!(!fill.is_empty(), "no fill of 0x{line:x} in the fault-free log");
    let (lo, hi) = (*fill.iter().min().unwrap(), *fill.iter().max().unwrap());
    let spread = 2 * spec.jitter_sigma as i64;
    let inside = |d: i64| spec.window.start + d - spread <= hi && spec.window.end + d + spread >= lo;

    let rows = campaign::sweep(&s, &img, &params).map_err(|e| e.to_string())?;
    let hits: BTreeSet<i64> = rows.iter().filter(|r| r.outcome != OutcomeClass::Correct).map(|r| r.delay).collect();
    ensure!(!hits.is_empty(), "no non-correct outcome anywhere");
    let outside: Vec<_> = hits.iter().filter(|&&d| !inside(d)).collect();
    ensure!(outside.is_empty(), "non-correct outside the fill interval at delays {outside:?}");

    let mut csv_a = Vec::new();
    write_csv(&rows, &mut csv_a).unwrap();
    let mut csv_b = Vec::new();
    write_csv(&campaign::sweep(&s, &img, &params).unwrap(), &mut csv_b).unwrap();
    ensure!(csv_a == csv_b, "CSV differs between reruns");
    let svg = |csv: &[u8]| Heatmap::from_rows(&campaign::read_csv(csv).unwrap()).unwrap().to_svg();
    ensure!(svg(&csv_a) == svg(&csv_b), "SVG differs between reruns");
    Ok(format!(
        "fill interval [{lo}, {hi}], non-correct at delays {}..={}, CSV {} bytes stable",
        hits.first().unwrap(),
        hits.last().unwrap(),
        csv_a.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("S0 baseline", baseline),
        ("S1 sticky instruction skip", sticky_skip),
        ("S2 MMU fault", mmu_fault),
        ("S3 L2 beat shift", l2_shift),
        ("countermeasures", countermeasures),
        ("MAC vectors", mac_vectors),
        ("negative result", negative_result),
        ("sweep localization", sweep_localization),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

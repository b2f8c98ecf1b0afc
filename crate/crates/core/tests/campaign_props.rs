use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use socfault_core::campaign::{classify, read_csv, sweep, write_csv, CampaignRow};
use socfault_core::heatmap::Heatmap;
use socfault_core::{
    MacConfig, MacPolicy, MemLevel, OutcomeClass, RunResult, Scenario, SweepParams, Termination, TrapReason,
};

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap()
}

fn csv_bytes(rows: &[CampaignRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(rows, &mut out).unwrap();
    out
}

fn class() -> impl Strategy<Value = OutcomeClass> {
    let level = prop::sample::select(vec![MemLevel::L1I, MemLevel::L1D, MemLevel::L2, MemLevel::Dram]);
    prop_oneof![
        Just(OutcomeClass::Correct),
        Just(OutcomeClass::WrongOutput),
        Just(OutcomeClass::Timeout),
        Just(OutcomeClass::Trap),
        level.prop_map(OutcomeClass::Detected),
    ]
}

fn termination() -> impl Strategy<Value = Termination> {
    prop_oneof![
        Just(Termination::Halted),
        Just(Termination::CycleLimit),
        any::<u64>().prop_map(|v| Termination::Trap(TrapReason::TranslationFault { vaddr: v })),
        any::<u64>().prop_map(|p| Termination::Trap(TrapReason::IntegrityAlarm { paddr: p })),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sweeps_are_reproducible(start in 1300i64..1500, step in 1i64..20, trials in 1u32..4, seed_base in any::<u64>()) {
        let s = scenario("s1_sweep.json");
        let img = s.image().unwrap();
        let params = SweepParams { delay_start: start, delay_end: start + 2 * step, step, trials, seed_base };
        let a = sweep(&s, &img, &params).unwrap();
        let b = sweep(&s, &img, &params).unwrap();
        prop_assert_eq!(csv_bytes(&a), csv_bytes(&b));
        prop_assert_eq!(a.len(), params.delays().len() * trials as usize);
        let order: Vec<(i64, u32)> = a.iter().map(|r| (r.delay, r.trial)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(order, sorted);
        let svg_a = Heatmap::from_rows(&a).unwrap().to_svg();
        prop_assert_eq!(svg_a, Heatmap::from_rows(&read_csv(&csv_bytes(&b)[..]).unwrap()).unwrap().to_svg());
    }
}

proptest! {
    #[test]
    fn csv_round_trip(rows in prop::collection::vec((any::<i64>(), any::<u32>(), any::<u64>(), class(), "[ -~]{0,40}"), 0..30)) {
        let rows: Vec<CampaignRow> = rows
            .into_iter()
            .map(|(delay, trial, seed, outcome, mutation)| CampaignRow { delay, trial, seed, outcome, mutation })
            .collect();
        let bytes = csv_bytes(&rows);
        if rows.is_empty() {
            prop_assert!(read_csv(&bytes[..]).unwrap().is_empty());
        } else {
            prop_assert!(bytes.starts_with(b"delay,trial,seed,outcome,mutation\n"));
            prop_assert_eq!(read_csv(&bytes[..]).unwrap(), rows);
        }
    }

    #[test]
    fn outcome_text_round_trip(c in class()) {
        prop_assert_eq!(c.to_string().parse::<OutcomeClass>().unwrap(), c);
    }

    #[test]
    fn every_result_has_one_class(t in termination(), output in prop::option::of(0u64..4), expected in 0u64..4, detected in prop::option::of(Just(MemLevel::L2))) {
        let r = RunResult {
            termination: t,
            output: if t == Termination::Halted { output.or(Some(0)) } else { None },
            cycles: 0,
            instructions: 0,
            event_log: Vec::new(),
            mac: None,
            mac_first_detection: detected,
        };
        let c = classify(&r, expected);
        let hits = [
            c == OutcomeClass::Correct,
            c == OutcomeClass::WrongOutput,
            c == OutcomeClass::Timeout,
            c == OutcomeClass::Trap,
            matches!(c, OutcomeClass::Detected(_)),
        ];
        prop_assert_eq!(hits.iter().filter(|&&h| h).count(), 1);
        prop_assert_eq!(detected.is_some(), matches!(c, OutcomeClass::Detected(_)));
    }
}

fn wrong_per_cell(rows: &[CampaignRow]) -> BTreeMap<i64, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r.delay).or_default() += (r.outcome == OutcomeClass::WrongOutput) as usize;
    }
    m
}

#[test]
fn proactive_never_adds_wrong_outputs() {
    for (name, params) in [
        ("s1_sweep.json", SweepParams { delay_start: 1400, delay_end: 1480, step: 4, trials: 6, seed_base: 9 }),
        ("s3_l2_f1.json", SweepParams { delay_start: -40, delay_end: 40, step: 4, trials: 6, seed_base: 9 }),
        ("s3_l2_f2.json", SweepParams { delay_start: -40, delay_end: 40, step: 4, trials: 6, seed_base: 9 }),
    ] {
        let off = scenario(name);
        let img = off.image().unwrap();
        let mut on = off.clone();
        on.mac = Some(MacConfig::with_policy(0xfeed, MacPolicy::Proactive));
        let plain = sweep(&off, &img, &params).unwrap();
        let protected = sweep(&on, &img, &params).unwrap();
        assert!(plain.iter().any(|r| r.outcome != OutcomeClass::Correct), "{name}: sweep never faults");
        let (a, b) = (wrong_per_cell(&plain), wrong_per_cell(&protected));
        for (delay, n) in &b {
            assert!(*n <= a[delay], "{name}: delay {delay} has {n} wrong outputs with MACs, {} without", a[delay]);
        }
        assert!(protected.iter().all(|r| !matches!(r.outcome, OutcomeClass::WrongOutput | OutcomeClass::Timeout)));
    }
}

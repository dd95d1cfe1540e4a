//! Interpreter-only, tiered and cached configurations run side by side.

use std::collections::BTreeMap;
use std::fs;

use super::fixtures::{call_loop, CYCLE, CYCLE_END};
use super::oracle::{self, Cpu, CODE};
use pinky_core::engine::{Engine, StopReason};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: [(&str, &[(&str, &str)]); 6] = [
    ("interpreter", &[("engine.backend", "none")]),
    ("tier0", &[("engine.tier_threshold", "0")]),
    ("tier1", &[("engine.tier_threshold", "1")]),
    ("tier16", &[("engine.tier_threshold", "16")]),
    (
        "lru2",
        &[
            ("engine.cache", "lru"),
            ("engine.cache_capacity", "2"),
            ("engine.tier_threshold", "1"),
        ],
    ),
    (
        "uncached",
        &[("engine.cache", "none"), ("engine.backend", "none")],
    ),
];

pub fn mmu_files(e: &Engine) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    e.machine.mmu.dump(dir.path()).unwrap();
    fs::read_dir(dir.path())
        .unwrap()
        .map(|f| {
            let f = f.unwrap();
            (
                f.file_name().to_string_lossy().into_owned(),
                fs::read(f.path()).unwrap(),
            )
        })
        .collect()
}

pub struct Outcome {
    pub stop: StopReason,
    pub cpu: Cpu,
    pub mmu: BTreeMap<String, Vec<u8>>,
    /// Translator invocations, including the failed one at the end marker.
    pub translations: u64,
    pub translated: u64,
    pub compilations: u64,
    pub blocks: u64,
}

pub fn run(settings: &[(&str, &str)], code: &[u8], start: &Cpu) -> Outcome {
    let mut e = super::engine_with(settings);
    super::install(&mut e, start, code);
    let stop = e.run();
    Outcome {
        stop,
        cpu: super::observe(&e),
        mmu: mmu_files(&e),
        translations: e.stats.translations,
        translated: e
            .machine
            .counters
            .get(pinky_core::Counter::BlocksTranslated),
        compilations: e.stats.compilations,
        blocks: e.machine.counters.get(pinky_core::Counter::BlocksExecuted),
    }
}

pub fn start_cpu(seed: u64) -> Cpu {
    Cpu::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// The three-block loop: hand-traced state and per-configuration
/// translation and promotion counts.
pub fn cyclic_loop_counts_and_state() {
    let start = start_cpu(1);
    let outcomes: Vec<(&str, Outcome)> = CONFIGS
        .iter()
        .map(|(n, s)| (*n, run(s, &CYCLE, &start)))
        .collect();

    // hand-traced result
    let mut eax = start.r[0];
    let mut edx = start.r[2];
    let mut mem = start.mem.clone();
    for ecx in (1..=20u32).rev() {
        eax = eax.wrapping_add(ecx);
        mem[4 * ecx as usize..4 * ecx as usize + 4].copy_from_slice(&eax.to_le_bytes());
        edx ^= eax;
    }
    // blocks: entry, L2, L3, then 19 rounds of L1, L2, L3
    let executed = 3 + 3 * 19;
    for (name, o) in &outcomes {
        assert!(
            matches!(
                o.stop,
                StopReason::UnsupportedInstruction { va: CYCLE_END, .. }
            ),
            "{name}: {:?}",
            o.stop
        );
        assert_eq!(
            (o.cpu.r[0], o.cpu.r[1], o.cpu.r[2]),
            (eax, 0, edx),
            "{name}"
        );
        assert_eq!(o.cpu.mem, mem, "{name}");
        assert_eq!(o.blocks, executed, "{name}");
    }
    let base = &outcomes[0].1;
    for (name, o) in &outcomes[1..] {
        assert_eq!(o.cpu, base.cpu, "{name}");
        assert_eq!(o.mmu, base.mmu, "{name}");
    }
    let by_name: BTreeMap<&str, &Outcome> = outcomes.iter().map(|(n, o)| (*n, o)).collect();
    // four distinct blocks; a cached revisit never retranslates
    for name in ["interpreter", "tier0", "tier1", "tier16"] {
        assert_eq!(
            (by_name[name].translated, by_name[name].translations),
            (4, 5),
            "{name}"
        );
    }
    // three blocks cycling through two slots miss every time
    assert_eq!(by_name["lru2"].translated, executed);
    assert_eq!(by_name["uncached"].translated, executed);
    assert_eq!(by_name["lru2"].translations, executed + 1);
    assert_eq!(by_name["interpreter"].compilations, 0);
    assert_eq!(by_name["tier0"].compilations, 4);
    // the entry block runs once, so only the loop blocks are promoted
    assert_eq!(by_name["tier1"].compilations, 3);
    assert_eq!(by_name["tier16"].compilations, 3);
    assert_eq!(by_name["uncached"].compilations, 0);
}

/// A call/return loop agrees everywhere.
pub fn call_loop_agrees() {
    let code = call_loop();
    let start = start_cpu(2);
    let outcomes: Vec<(&str, Outcome)> = CONFIGS
        .iter()
        .map(|(n, s)| (*n, run(s, &code, &start)))
        .collect();
    let base = &outcomes[0].1;
    assert_eq!(base.cpu.r[0], start.r[0].wrapping_add(15));
    assert_eq!(base.cpu.r[4], oracle::STACK);
    // entry, F, return site, then four rounds of call site, F, return site
    assert_eq!(base.blocks, 15);
    assert_eq!(base.translated, 4);
    for (name, o) in &outcomes[1..] {
        assert_eq!(o.stop, base.stop, "{name}");
        assert_eq!(o.cpu, base.cpu, "{name}");
        assert_eq!(o.mmu, base.mmu, "{name}");
    }
}

/// Runs `cases` random oracle programs under every configuration and
/// compares stops, registers, code pages and MMU dumps.
pub fn corpus_agrees(seed: u64, cases: u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engines: Vec<Engine> = CONFIGS.iter().map(|(_, s)| super::engine_with(s)).collect();
    for case in 0..cases {
        let len = rng.gen_range(5..=20);
        let prog = oracle::random_program(&mut rng, len);
        let start = Cpu::random(&mut rng);
        let (code, _) = oracle::assemble(&prog);
        let mut first: Option<(StopReason, Cpu, Vec<u8>)> = None;
        for (k, e) in engines.iter_mut().enumerate() {
            super::install(e, &start, &code);
            let stop = e.run();
            let got = (
                stop,
                super::observe(e),
                e.machine.mmu.read_vec(CODE, 0x1000).unwrap(),
            );
            match &first {
                None => first = Some(got),
                Some(f) => assert!(
                    *f == got,
                    "case {case}: {} differs from interpreter",
                    CONFIGS[k].0
                ),
            }
        }
        let dumps: Vec<_> = engines.iter().map(mmu_files).collect();
        assert!(
            dumps.windows(2).all(|w| w[0] == w[1]),
            "case {case}: MMU dumps differ"
        );
    }
}

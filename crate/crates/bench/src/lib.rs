//! Workloads shared by the criterion benches and the acceptance run.

use std::hint::black_box;
use std::time::{Duration, Instant};

use pinky_core::engine::{Engine, StopReason};
use pinky_core::loader::load_flat;
use pinky_core::probes::{ProbeContext, ProbeId, Probes, Verdict, BLOCK_ENTER};

pub const GUEST_BASE: u32 = 0x40_0000;

/// `mov ecx, n; L: add eax, ecx; xor edx, eax; dec ecx; jnz L` followed by
/// an unregistered trap that ends the run.
pub fn hot_loop_code(n: u32) -> Vec<u8> {
    let mut code = vec![0xB9];
    code.extend_from_slice(&n.to_le_bytes());
    code.extend_from_slice(&[0x01, 0xC8, 0x31, 0xC2, 0x49, 0x75, 0xF9]);
    code.extend_from_slice(&[0x0F, 0x04, 0xE7, 0x03]);
    code
}

/// Fresh engine with the hot loop mapped at [`GUEST_BASE`] and the PC on it.
pub fn hot_loop_engine(n: u32, settings: &[(&str, &str)]) -> Engine {
    let mut e = Engine::new();
    for (k, v) in settings {
        e.set_config_str(k, v).expect("valid setting");
    }
    load_flat(&mut e.machine.mmu, &hot_loop_code(n), GUEST_BASE).expect("fresh MMU");
    e.machine.state.pc = GUEST_BASE;
    e
}

/// Runs the loop to its trap; returns EAX.
pub fn run_hot_loop(e: &mut Engine) -> u32 {
    e.machine.state.pc = GUEST_BASE;
    let stop = e.run();
    debug_assert!(matches!(stop, StopReason::UnknownSyscall(_)), "{stop:?}");
    e.machine.state.gpr(0)
}

#[inline(always)]
fn mix(x: u64, i: u64) -> u64 {
    (x ^ i).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// The hot loop body alone.
#[inline(never)]
pub fn plain_loop(n: u64, seed: u64) -> u64 {
    let mut x = seed;
    for i in 0..n {
        x = mix(x, i);
    }
    x
}

/// The same loop with a probe site per iteration, written the way the
/// engine writes its own.
#[inline(never)]
pub fn probed_loop(probes: &mut Probes, probe: ProbeId, n: u64, seed: u64) -> u64 {
    let mut x = seed;
    for i in 0..n {
        if probes.is_enabled(probe) {
            let mut ctx = ProbeContext {
                pc: x as u32,
                ..Default::default()
            };
            if probes.fire(probe, &mut ctx) == Verdict::Stop {
                x = !x;
            }
        }
        x = mix(x, i);
    }
    x
}

#[derive(Debug, Clone)]
pub struct Overhead {
    pub baseline: Vec<Duration>,
    pub probed: Vec<Duration>,
}

fn median(v: &[Duration]) -> Duration {
    let mut s = v.to_vec();
    s.sort();
    s[s.len() / 2]
}

impl Overhead {
    pub fn baseline_median(&self) -> Duration {
        median(&self.baseline)
    }

    pub fn probed_median(&self) -> Duration {
        median(&self.probed)
    }

    /// Median probed time over median baseline time, minus one.
    pub fn ratio(&self) -> f64 {
        self.probed_median().as_secs_f64() / self.baseline_median().as_secs_f64() - 1.0
    }
}

/// Times `runs` alternating pairs of the plain loop and the loop firing a
/// disabled probe, `n` iterations each.
pub fn probe_overhead(n: u64, runs: usize) -> Overhead {
    let mut probes = Probes::with_standard_set();
    probes
        .register(BLOCK_ENTER, 1, Box::new(|_| Ok(())))
        .expect("fresh probe");
    assert!(!probes.is_enabled(BLOCK_ENTER));
    // warm up both paths once
    black_box(plain_loop(black_box(n / 10), 1));
    black_box(probed_loop(
        &mut probes,
        black_box(BLOCK_ENTER),
        black_box(n / 10),
        1,
    ));
    let mut o = Overhead {
        baseline: Vec::new(),
        probed: Vec::new(),
    };
    for r in 0..runs as u64 {
        let time_plain = || {
            let t = Instant::now();
            let x = plain_loop(black_box(n), black_box(r));
            (t.elapsed(), x)
        };
        let mut time_probed = || {
            let t = Instant::now();
            let x = probed_loop(
                &mut probes,
                black_box(BLOCK_ENTER),
                black_box(n),
                black_box(r),
            );
            (t.elapsed(), x)
        };
        // alternate the order so neither loop always runs first
        let ((ta, a), (tb, b)) = if r % 2 == 0 {
            let a = time_plain();
            (a, time_probed())
        } else {
            let b = time_probed();
            (time_plain(), b)
        };
        assert_eq!(a, b, "a disabled probe must not change the result");
        o.baseline.push(ta);
        o.probed.push(tb);
    }
    o
}

//! Shared helpers for the integration tests.

#![allow(dead_code)]

pub mod fixtures;
pub mod mmu_model;
pub mod oracle;
pub mod tiering;

use oracle::{Cpu, Ins, CODE, COMPARED, SCRATCH};
use pinky_core::engine::{Engine, StopReason};
use pinky_core::mmu::{prot, Mmu};
use pinky_core::vm::FaultKind;
use pinky_core::xir::regs;

/// Engine configured by `key=value` pairs.
pub fn engine_with(settings: &[(&str, &str)]) -> Engine {
    let mut e = Engine::new();
    for (k, v) in settings {
        e.set_config_str(k, v).unwrap();
    }
    e
}

/// Maps `code` at [`CODE`], the scratch page, and loads the register file.
pub fn install(e: &mut Engine, cpu: &Cpu, code: &[u8]) {
    e.invalidate(CODE, 0x1000);
    e.clear_pending();
    let m = &mut e.machine;
    m.mmu = Mmu::new();
    m.mmu
        .pmap(
            code.len() as u64,
            CODE,
            prot::FIXED | prot::RWX,
            0,
            u32::MAX,
        )
        .unwrap();
    m.mmu.write_memory(CODE, code).unwrap();
    m.mmu
        .pmap(0x1000, SCRATCH, prot::FIXED | prot::RW, 0, u32::MAX)
        .unwrap();
    m.mmu.write_memory(SCRATCH, &cpu.mem).unwrap();
    for (n, v) in cpu.r.iter().enumerate() {
        m.state.set_gpr(n as u8, *v);
    }
    m.state.set(regs::EFLAGS, cpu.eflags);
    m.state.pc = CODE;
}

pub fn observe(e: &Engine) -> Cpu {
    let s = &e.machine.state;
    Cpu {
        r: std::array::from_fn(|n| s.gpr(n as u8)),
        eflags: s.eflags(),
        mem: e.machine.mmu.read_vec(SCRATCH, 0x1000).unwrap(),
    }
}

/// Runs `prog` through the oracle and the engine and reports the first
/// difference. `Ok(true)` means the program ran to its end without a
/// divide error.
pub fn differential(e: &mut Engine, prog: &[Ins], start: &Cpu) -> Result<bool, String> {
    let (code, end) = oracle::assemble(prog);
    let mut want = start.clone();
    let (_, fault) = want.run(prog);
    install(e, start, &code);
    let stop = e.run();
    let ok_stop = match (&stop, fault) {
        (StopReason::UnsupportedInstruction { va, .. }, None) => *va == end,
        (StopReason::Fault(f), Some(_)) => f.kind == FaultKind::DivideError,
        _ => false,
    };
    if !ok_stop {
        return Err(format!("stop {stop:?}, oracle fault {fault:?}"));
    }
    let got = observe(e);
    if got.r != want.r {
        return Err(format!(
            "registers\n got  {:08x?}\n want {:08x?}",
            got.r, want.r
        ));
    }
    if got.eflags & COMPARED != want.eflags & COMPARED {
        return Err(format!(
            "flags got {:03x} want {:03x}",
            got.eflags & COMPARED,
            want.eflags & COMPARED
        ));
    }
    if got.mem != want.mem {
        let at = got
            .mem
            .iter()
            .zip(&want.mem)
            .position(|(a, b)| a != b)
            .unwrap();
        return Err(format!("memory differs at scratch+0x{at:x}"));
    }
    Ok(fault.is_none())
}

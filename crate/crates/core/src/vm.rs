//! XIRVM: the XIR interpreter.
//!
//! The operand value of an instruction is `V = regs[src] + imm` truncated
//! to the access width (r0 reads zero, so `src = 0` leaves just `imm`).
//! Arithmetic updates the flag register r1 with x86 semantics. Faults are
//! precise: the faulting instruction has no visible effect.

use std::fmt;

use crate::metrics::{Counter, CounterSet};
use crate::mmu::{Mmu, MmuError, PAGE_BITS, PAGE_SIZE};
use crate::probes::{self, ProbeContext, Probes};
use crate::xir::{eflags, regs, CodeBlock, Cond, Opcode, Width, XirInstr, SR_ARITHMETIC};

/// 256 registers plus the guest program counter. The flag register and
/// the shadow slot live in r1 and r2.
#[derive(Clone, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u32; 256],
    pub pc: u32,
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState {
            regs: [0; 256],
            pc: 0,
        }
    }
}

impl fmt::Debug for MachineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.regs[regs::EAX as usize..=regs::EFLAGS as usize];
        write!(
            f,
            "MachineState {{ pc: {:#010x}, r1: {:#x}, guest: {:08x?} }}",
            self.pc, self.regs[1], g
        )
    }
}

const GPR_NAMES: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"];

impl MachineState {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline(always)]
    pub fn get(&self, r: u8) -> u32 {
        self.regs[r as usize]
    }

    /// Full-width write; writes to r0 are dropped.
    #[inline(always)]
    pub fn set(&mut self, r: u8, v: u32) {
        if r != regs::ZERO {
            self.regs[r as usize] = v;
        }
    }

    /// Width-limited write that keeps the untouched upper bytes.
    #[inline(always)]
    pub fn set_width(&mut self, r: u8, w: Width, v: u32) {
        let m = w.mask();
        let old = self.regs[r as usize];
        self.set(r, (old & !m) | (v & m));
    }

    pub fn flags(&self) -> u32 {
        self.regs[regs::FLAGS as usize]
    }

    pub fn eflags(&self) -> u32 {
        self.regs[regs::EFLAGS as usize]
    }

    /// x86 general purpose register by hardware number.
    pub fn gpr(&self, n: u8) -> u32 {
        self.get(regs::gpr(n))
    }

    pub fn set_gpr(&mut self, n: u8, v: u32) {
        self.set(regs::gpr(n), v)
    }

    /// Text form used by snapshots: guest registers first, then all 256.
    pub fn dump_text(&self) -> String {
        let mut s = format!("pc {:08x}\n", self.pc);
        for (i, n) in GPR_NAMES.iter().enumerate() {
            s.push_str(&format!("{n} {:08x}\n", self.gpr(i as u8)));
        }
        s.push_str(&format!(
            "eflags {:08x}\nflags {:08x}\nshadow {:08x}\n",
            self.eflags(),
            self.flags(),
            self.get(regs::SHADOW_FLAGS)
        ));
        for (i, v) in self.regs.iter().enumerate() {
            s.push_str(&format!("r{i} {v:08x}\n"));
        }
        s
    }

    /// Short human readable register summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (i, n) in GPR_NAMES.iter().enumerate() {
            s.push_str(&format!(
                "{n}={:08x}{}",
                self.gpr(i as u8),
                match i {
                    3 => "\n",
                    7 => "",
                    _ => " ",
                }
            ));
        }
        s.push_str(&format!(
            "\neflags={:08x} pc={:08x}",
            self.eflags(),
            self.pc
        ));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    UnmappedRead,
    UnmappedWrite,
    UnmappedFetch,
    Protection,
    DivideError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fault {
    pub kind: FaultKind,
    /// Faulting address; for divide errors the guest PC of the block.
    pub addr: u32,
    pub size: u8,
}

impl Fault {
    pub fn from_mmu(e: &MmuError, size: usize, write: bool) -> Fault {
        let (kind, addr) = match *e {
            MmuError::UnmappedRead(a) => (FaultKind::UnmappedRead, a),
            MmuError::UnmappedWrite(a) => (FaultKind::UnmappedWrite, a),
            MmuError::Protection { va, .. } => (FaultKind::Protection, va),
            _ if write => (FaultKind::UnmappedWrite, 0),
            _ => (FaultKind::UnmappedRead, 0),
        };
        Fault {
            kind,
            addr,
            size: size as u8,
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            FaultKind::UnmappedRead => "unmapped read",
            FaultKind::UnmappedWrite => "unmapped write",
            FaultKind::UnmappedFetch => "unmapped fetch",
            FaultKind::Protection => "protection fault",
            FaultKind::DivideError => "divide error",
        };
        write!(f, "{what} at 0x{:08X}", self.addr)?;
        if self.size > 0 {
            write!(f, " ({} bytes)", self.size)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockExit {
    NextVa(u32),
    /// Host call requested; execution resumes at `resume` in the same block.
    Syscall {
        id: u32,
        resume: usize,
    },
    Fault(Fault),
}

/// Everything an executing block may touch.
pub struct ExecCtx<'a> {
    pub state: &'a mut MachineState,
    pub mmu: &'a mut Mmu,
    pub counters: &'a mut CounterSet,
    pub probes: &'a mut Probes,
    /// Route every load and store through the MMU slow path.
    pub slow_path_only: bool,
}

/// Control outcome of one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Next,
    Jump(isize),
    Exit(BlockExit),
}

#[inline(always)]
fn parity(v: u32) -> bool {
    (v as u8).count_ones().is_multiple_of(2)
}

#[inline(always)]
fn szp(r: u32, w: Width) -> u32 {
    let mut f = 0;
    if r == 0 {
        f |= eflags::ZF;
    }
    if r & w.sign_bit() != 0 {
        f |= eflags::SF;
    }
    if parity(r) {
        f |= eflags::PF;
    }
    f
}

#[inline(always)]
fn bit(cond: bool, flag: u32) -> u32 {
    if cond {
        flag
    } else {
        0
    }
}

/// Result of an ALU operation on width-masked inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AluOut {
    pub value: u32,
    pub flags: u32,
    /// Whether `value` should be written to the destination.
    pub write: bool,
}

/// Two-operand arithmetic, logic, shift and rotate semantics shared by the
/// interpreter and the predecoded backend. `a` is the destination value,
/// `b` the operand value; both are already masked to the width.
#[inline(always)]
pub fn alu(op: Opcode, w: Width, modifier: u8, a: u32, b: u32, flags: u32) -> AluOut {
    use eflags::*;
    let m = w.mask();
    let sign = w.sign_bit();
    let keep = flags & !STATUS;
    let out = |value: u32, status: u32| AluOut {
        value,
        flags: keep | status,
        write: true,
    };
    match op {
        Opcode::Add | Opcode::Addc => {
            let c = (op == Opcode::Addc && flags & CF != 0) as u64;
            let wide = a as u64 + b as u64 + c;
            let r = wide as u32 & m;
            let f = bit(wide > m as u64, CF)
                | bit((a ^ r) & (b ^ r) & sign != 0, OF)
                | bit((a ^ b ^ r) & 0x10 != 0, AF)
                | szp(r, w);
            out(r, f)
        }
        Opcode::Sub | Opcode::Subc | Opcode::Cmp => {
            let c = (op == Opcode::Subc && flags & CF != 0) as u64;
            let r = (a as u64).wrapping_sub(b as u64).wrapping_sub(c) as u32 & m;
            let f = bit((a as u64) < b as u64 + c, CF)
                | bit((a ^ b) & (a ^ r) & sign != 0, OF)
                | bit((a ^ b ^ r) & 0x10 != 0, AF)
                | szp(r, w);
            let mut o = out(r, f);
            o.write = op != Opcode::Cmp;
            o
        }
        Opcode::And | Opcode::Or | Opcode::Xor => {
            let r = match op {
                Opcode::And => a & b,
                Opcode::Or => a | b,
                _ => a ^ b,
            };
            out(r, szp(r, w))
        }
        Opcode::Sl | Opcode::Sr => {
            let count = b & 31;
            if count == 0 {
                return AluOut {
                    value: a,
                    flags,
                    write: true,
                };
            }
            let bits = w.bits();
            let (r, cf, of) = if op == Opcode::Sl {
                let wide = (a as u64) << count;
                let r = wide as u32 & m;
                let cf = (wide >> bits) & 1 != 0;
                (r, cf, (r & sign != 0) != cf)
            } else if modifier == SR_ARITHMETIC {
                let sa = if a & sign != 0 {
                    a as i64 - (1i64 << bits)
                } else {
                    a as i64
                };
                let r = (sa >> count) as u32 & m;
                let cf = (sa >> (count - 1)) & 1 != 0;
                (r, cf, false)
            } else {
                let r = a >> count;
                let cf = count <= bits && (a >> (count - 1)) & 1 != 0;
                (r, cf, a & sign != 0)
            };
            out(r, bit(cf, CF) | bit(of, OF) | szp(r, w))
        }
        Opcode::Rl | Opcode::Rr => {
            let count = b & 31;
            if count == 0 {
                return AluOut {
                    value: a,
                    flags,
                    write: true,
                };
            }
            let bits = w.bits();
            let k = count % bits;
            let r = if k == 0 {
                a
            } else if op == Opcode::Rl {
                ((a << k) | (a >> (bits - k))) & m
            } else {
                ((a >> k) | (a << (bits - k))) & m
            };
            let msb = r & sign != 0;
            let (cf, of) = if op == Opcode::Rl {
                let cf = r & 1 != 0;
                (cf, msb != cf)
            } else {
                (msb, msb != (r & (sign >> 1) != 0))
            };
            // rotates leave SF/ZF/PF/AF alone
            let f = (flags & !(CF | OF)) | bit(cf, CF) | bit(of, OF);
            AluOut {
                value: r,
                flags: f,
                write: true,
            }
        }
        Opcode::Mv => AluOut {
            value: b,
            flags,
            write: true,
        },
        Opcode::Not => AluOut {
            value: !b & m,
            flags,
            write: true,
        },
        _ => AluOut {
            value: a,
            flags,
            write: false,
        },
    }
}

/// Widening multiply; returns (low, high, flags).
#[inline(always)]
pub fn mul_pair(w: Width, a: u32, b: u32, flags: u32) -> (u32, u32, u32) {
    use eflags::*;
    let p = a as u64 * b as u64;
    let lo = p as u32 & w.mask();
    let hi = (p >> w.bits()) as u32 & w.mask();
    let f = (flags & !STATUS) | bit(hi != 0, CF | OF) | szp(lo, w);
    (lo, hi, f)
}

/// Unsigned divide of `hi:lo` by `d`; `None` on divide error.
#[inline(always)]
pub fn div_pair(w: Width, lo: u32, hi: u32, d: u32) -> Option<(u32, u32)> {
    if d == 0 {
        return None;
    }
    let n = ((hi as u64) << w.bits()) | lo as u64;
    let q = n / d as u64;
    if q > w.mask() as u64 {
        return None;
    }
    Some((q as u32, (n % d as u64) as u32))
}

impl ExecCtx<'_> {
    #[inline(always)]
    pub fn operand(&self, src: u8, imm: i32, w: Width) -> u32 {
        self.state.regs[src as usize].wrapping_add(imm as u32) & w.mask()
    }

    #[inline(always)]
    pub fn load(&mut self, addr: u32, w: Width) -> Result<u32, Fault> {
        self.counters.bump(Counter::MemLoads, 1);
        let size = w.bytes();
        let off = addr as usize & (PAGE_SIZE - 1);
        if !self.slow_path_only && off + size <= PAGE_SIZE {
            if let Some(page) = self.mmu.fast_page(addr) {
                let mut b = [0u8; 4];
                b[..size].copy_from_slice(&page[off..off + size]);
                return Ok(u32::from_le_bytes(b));
            }
        }
        let mut b = [0u8; 4];
        self.mmu
            .read_memory(addr, &mut b[..size])
            .map_err(|e| Fault::from_mmu(&e, size, false))?;
        Ok(u32::from_le_bytes(b))
    }

    #[inline(always)]
    pub fn store<const PROBES: bool>(
        &mut self,
        addr: u32,
        w: Width,
        val: u32,
    ) -> Result<(), Fault> {
        self.counters.bump(Counter::MemStores, 1);
        let size = w.bytes();
        let bytes = val.to_le_bytes();
        let off = addr as usize & (PAGE_SIZE - 1);
        let mut done = false;
        if !self.slow_path_only && off + size <= PAGE_SIZE {
            if let Some(page) = self.mmu.fast_page_mut(addr) {
                page[off..off + size].copy_from_slice(&bytes[..size]);
                done = true;
            }
        }
        if !done {
            self.mmu
                .write_memory(addr, &bytes[..size])
                .map_err(|e| Fault::from_mmu(&e, size, true))?;
        }
        if PROBES && self.probes.is_enabled(probes::MMU_WRITE) {
            let mut ctx = ProbeContext {
                pc: self.state.pc,
                addr,
                size: size as u32,
                value: val as u64,
                state: Some(self.state),
                ..Default::default()
            };
            self.probes.fire(probes::MMU_WRITE, &mut ctx);
        }
        Ok(())
    }

    /// Executes one instruction.
    #[inline(always)]
    pub fn step<const PROBES: bool>(&mut self, i: &XirInstr, idx: usize) -> Result<Flow, Fault> {
        let w = i.width;
        match i.opcode {
            Opcode::Jmp => {
                let c = Cond::from_u8(i.modifier).unwrap_or(Cond::Always);
                if c.holds(self.state.flags()) {
                    return Ok(Flow::Jump(i.imm as isize));
                }
            }
            Opcode::Ret => {
                let v = self.operand(i.src, i.imm, Width::B32);
                return Ok(Flow::Exit(BlockExit::NextVa(v)));
            }
            Opcode::Syscall => {
                return Ok(Flow::Exit(BlockExit::Syscall {
                    id: i.imm as u32,
                    resume: idx + 1,
                }));
            }
            Opcode::Fsave => {
                let f = self.state.flags();
                self.state.set(regs::SHADOW_FLAGS, f);
            }
            Opcode::Frestore => {
                let f = self.state.get(regs::SHADOW_FLAGS);
                self.state.set(regs::FLAGS, f);
            }
            Opcode::Ld => {
                let addr = self.state.get(i.src).wrapping_add(i.imm as u32);
                let v = self.load(addr, w)?;
                self.state.set(i.dst, v);
            }
            Opcode::St => {
                let addr = self.state.get(i.dst).wrapping_add(i.imm as u32);
                let v = self.state.get(i.src) & w.mask();
                self.store::<PROBES>(addr, w, v)?;
            }
            Opcode::Mul => {
                let a = self.state.get(i.dst) & w.mask();
                let b = self.operand(i.src, i.imm, w);
                let (lo, hi, f) = mul_pair(w, a, b, self.state.flags());
                self.state.set(regs::FLAGS, f);
                self.state.set_width(i.dst, w, lo);
                self.state.set_width(i.dst.wrapping_add(1), w, hi);
            }
            Opcode::Div => {
                let lo = self.state.get(i.dst) & w.mask();
                let hi = self.state.get(i.dst.wrapping_add(1)) & w.mask();
                let d = self.operand(i.src, i.imm, w);
                let Some((q, r)) = div_pair(w, lo, hi, d) else {
                    return Err(Fault {
                        kind: FaultKind::DivideError,
                        addr: self.state.pc,
                        size: 0,
                    });
                };
                self.state.set_width(i.dst, w, q);
                self.state.set_width(i.dst.wrapping_add(1), w, r);
            }
            op => {
                let a = self.state.get(i.dst) & w.mask();
                let b = self.operand(i.src, i.imm, w);
                let o = alu(op, w, i.modifier, a, b, self.state.flags());
                // flags first so that a result aimed at r1 wins
                self.state.set(regs::FLAGS, o.flags);
                if o.write {
                    self.state.set_width(i.dst, w, o.value);
                }
            }
        }
        Ok(Flow::Next)
    }
}

/// Interprets `block` starting at instruction `start` until it exits.
/// `exec_count` is bumped when a run starts at index 0.
pub fn run_block<const PROBES: bool>(
    ctx: &mut ExecCtx<'_>,
    block: &mut CodeBlock,
    start: usize,
) -> BlockExit {
    if start == 0 {
        block.exec_count += 1;
    }
    run_instrs::<PROBES>(ctx, &block.instrs, start)
}

pub fn run_instrs<const PROBES: bool>(
    ctx: &mut ExecCtx<'_>,
    instrs: &[XirInstr],
    start: usize,
) -> BlockExit {
    let mut idx = start;
    while let Some(i) = instrs.get(idx) {
        ctx.counters.bump(Counter::InstrsInterpreted, 1);
        match ctx.step::<PROBES>(i, idx) {
            Ok(Flow::Next) => idx += 1,
            Ok(Flow::Jump(k)) => idx = idx.wrapping_add_signed(k),
            Ok(Flow::Exit(e)) => return e,
            Err(f) => return BlockExit::Fault(f),
        }
    }
    // falling off the end is a malformed block; treat as a fetch fault
    BlockExit::Fault(Fault {
        kind: FaultKind::UnmappedFetch,
        addr: ctx.state.pc,
        size: 0,
    })
}

/// Page number of a guest address.
pub fn page_of(va: u32) -> u32 {
    va >> PAGE_BITS
}

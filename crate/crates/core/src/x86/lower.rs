//! Lowering of decoded guest instructions to XIR.
//!
//! Guest EFLAGS live in r169 between guest instructions. A flag-writing
//! guest instruction copies r169 into the VM flag register r1, runs the
//! XIR operation, and copies r1 back. Anything else may clobber r1 freely.

use crate::xir::{eflags, regs, Cond, Opcode, Width, XirInstr, SR_ARITHMETIC};

use super::decode::{GuestInstr, MemRef, Mnemonic, Operand};
use super::TranslateError;

/// Syscall ids for the x87 escape subset.
pub mod sys {
    pub const FABS: u32 = 0x10;
    pub const FCHS: u32 = 0x11;
    pub const FSQRT: u32 = 0x12;
    pub const FLD1: u32 = 0x13;
    /// Trap `0F 04 idx` raises `TRAP_BASE + idx`.
    pub const TRAP_BASE: u32 = 0x1000;
}

/// Free set over the temporaries r32..r159.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempAllocator {
    free: u128,
    high_water: u8,
}

impl Default for TempAllocator {
    fn default() -> Self {
        TempAllocator {
            free: u128::MAX,
            high_water: 0,
        }
    }
}

impl TempAllocator {
    pub fn alloc(&mut self) -> Result<u8, TranslateError> {
        if self.free == 0 {
            return Err(TranslateError::TempExhausted);
        }
        let k = self.free.trailing_zeros();
        self.free &= !(1u128 << k);
        self.high_water = self.high_water.max(k as u8 + 1);
        Ok(regs::TEMP_FIRST + k as u8)
    }

    /// Two consecutive temporaries, for the mul/div register pair.
    pub fn alloc_pair(&mut self) -> Result<u8, TranslateError> {
        let pairs = self.free & (self.free >> 1);
        if pairs == 0 {
            return Err(TranslateError::TempExhausted);
        }
        let k = pairs.trailing_zeros();
        self.free &= !(3u128 << k);
        self.high_water = self.high_water.max(k as u8 + 2);
        Ok(regs::TEMP_FIRST + k as u8)
    }

    pub fn free(&mut self, r: u8) {
        debug_assert!(regs::is_temp(r), "r{r} is not a temporary");
        self.free |= 1u128 << (r - regs::TEMP_FIRST);
    }

    pub fn free_set(&self) -> u128 {
        self.free
    }

    pub fn high_water(&self) -> u8 {
        self.high_water
    }
}

/// XIR emitter for one codeblock.
#[derive(Debug, Default)]
pub struct Emitter {
    pub out: Vec<XirInstr>,
    pub temps: TempAllocator,
}

fn xr(n: u8) -> u8 {
    regs::gpr(n)
}

fn alu_opcode(m: Mnemonic) -> Opcode {
    match m {
        Mnemonic::Add => Opcode::Add,
        Mnemonic::Adc => Opcode::Addc,
        Mnemonic::Sub => Opcode::Sub,
        Mnemonic::Sbb => Opcode::Subc,
        Mnemonic::And | Mnemonic::Test => Opcode::And,
        Mnemonic::Or => Opcode::Or,
        Mnemonic::Xor => Opcode::Xor,
        Mnemonic::Cmp => Opcode::Cmp,
        Mnemonic::Shl => Opcode::Sl,
        Mnemonic::Shr | Mnemonic::Sar => Opcode::Sr,
        Mnemonic::Rol => Opcode::Rl,
        Mnemonic::Ror => Opcode::Rr,
        _ => unreachable!("not an alu mnemonic"),
    }
}

impl Emitter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(&mut self, op: Opcode, w: Width, dst: u8, src: u8, imm: i32) {
        self.out.push(XirInstr::new(op, w, dst, src, imm));
    }

    fn emit_mod(&mut self, op: Opcode, w: Width, modifier: u8, dst: u8, src: u8, imm: i32) {
        let mut i = XirInstr::new(op, w, dst, src, imm);
        i.modifier = modifier;
        self.out.push(i);
    }

    fn mv(&mut self, w: Width, dst: u8, src: u8, imm: i32) {
        self.emit(Opcode::Mv, w, dst, src, imm);
    }

    fn ret(&mut self, src: u8, imm: i32) {
        self.emit(Opcode::Ret, Width::B32, 0, src, imm);
    }

    fn flags_in(&mut self) {
        self.mv(Width::B32, regs::FLAGS, regs::EFLAGS, 0);
    }

    fn flags_out(&mut self) {
        self.mv(Width::B32, regs::EFLAGS, regs::FLAGS, 0);
    }

    /// Address of a memory operand as `(register, displacement)`. Scaled
    /// index forms compute into a temporary the caller must release with
    /// [`Emitter::release`].
    fn address(&mut self, m: &MemRef) -> Result<(u8, i32), TranslateError> {
        let Some(index) = m.index else {
            return Ok((m.base.map_or(0, xr), m.disp));
        };
        let t = self.temps.alloc()?;
        self.mv(Width::B32, t, xr(index), 0);
        if m.scale > 1 {
            self.emit(
                Opcode::Sl,
                Width::B32,
                t,
                0,
                m.scale.trailing_zeros() as i32,
            );
        }
        if let Some(b) = m.base {
            self.emit(Opcode::Add, Width::B32, t, xr(b), 0);
        }
        Ok((t, m.disp))
    }

    fn release(&mut self, r: u8) {
        if regs::is_temp(r) {
            self.temps.free(r);
        }
    }

    /// Source value as an XIR `(src, imm)` operand pair.
    fn value(&mut self, op: &Operand) -> Result<(u8, i32), TranslateError> {
        Ok(match *op {
            Operand::Reg(n, _) => (xr(n), 0),
            Operand::Imm(v, _) => (0, v as i32),
            Operand::Target(t) => (0, t as i32),
            Operand::Mem(m, w) => {
                let (a, d) = self.address(&m)?;
                let t = self.temps.alloc()?;
                self.emit(Opcode::Ld, w, t, a, d);
                self.release(a);
                (t, 0)
            }
        })
    }

    /// Applies `body` to the destination operand, loading and storing
    /// through a temporary when it lives in memory. `flags` brackets the
    /// body with the r169/r1 copies.
    fn modify(
        &mut self,
        dst: &Operand,
        flags: bool,
        store: bool,
        body: impl FnOnce(&mut Self, u8, Width) -> Result<(), TranslateError>,
    ) -> Result<(), TranslateError> {
        match *dst {
            Operand::Reg(n, w) => {
                if flags {
                    self.flags_in();
                }
                body(self, xr(n), w)?;
                if flags {
                    self.flags_out();
                }
            }
            Operand::Mem(m, w) => {
                let (a, d) = self.address(&m)?;
                let t = self.temps.alloc()?;
                if flags {
                    self.flags_in();
                }
                self.emit(Opcode::Ld, w, t, a, d);
                body(self, t, w)?;
                if store {
                    self.emit(Opcode::St, w, a, t, d);
                }
                if flags {
                    self.flags_out();
                }
                self.temps.free(t);
                self.release(a);
            }
            _ => unreachable!("immediate destination"),
        }
        Ok(())
    }

    fn push_value(&mut self, src: u8, imm: i32) -> Result<(), TranslateError> {
        if src == 0 {
            let t = self.temps.alloc()?;
            self.mv(Width::B32, t, 0, imm);
            self.emit(Opcode::St, Width::B32, regs::ESP, t, -4);
            self.temps.free(t);
        } else {
            self.emit(Opcode::St, Width::B32, regs::ESP, src, -4);
        }
        self.mv(Width::B32, regs::ESP, regs::ESP, -4);
        Ok(())
    }

    /// Lowers one guest instruction. Returns true when it ends the block.
    pub fn lower(&mut self, g: &GuestInstr) -> Result<bool, TranslateError> {
        use Mnemonic as M;
        let before = self.temps.free_set();
        let ops = &g.operands;
        let next = g.next_va();
        match g.mnemonic {
            M::Nop => {}
            M::Mov => match (ops[0], ops[1]) {
                (Operand::Reg(d, w), Operand::Mem(m, _)) => {
                    let (a, disp) = self.address(&m)?;
                    if w == Width::B32 {
                        self.emit(Opcode::Ld, w, xr(d), a, disp);
                    } else {
                        let t = self.temps.alloc()?;
                        self.emit(Opcode::Ld, w, t, a, disp);
                        self.mv(w, xr(d), t, 0);
                        self.temps.free(t);
                    }
                    self.release(a);
                }
                (Operand::Reg(d, w), src) => {
                    let (s, imm) = self.value(&src)?;
                    self.mv(w, xr(d), s, imm);
                }
                (Operand::Mem(m, w), src) => {
                    let (s, imm) = self.value(&src)?;
                    let (a, disp) = self.address(&m)?;
                    if s == 0 {
                        let t = self.temps.alloc()?;
                        self.mv(w, t, 0, imm);
                        self.emit(Opcode::St, w, a, t, disp);
                        self.temps.free(t);
                    } else {
                        self.emit(Opcode::St, w, a, s, disp);
                    }
                    self.release(a);
                    self.release(s);
                }
                _ => return Err(unsupported(g)),
            },
            M::Movzx => {
                let Operand::Reg(d, w) = ops[0] else {
                    return Err(unsupported(g));
                };
                match ops[1] {
                    Operand::Mem(m, sw) => {
                        let (a, disp) = self.address(&m)?;
                        let t = self.temps.alloc()?;
                        self.emit(Opcode::Ld, sw, t, a, disp);
                        self.mv(w, xr(d), t, 0);
                        self.temps.free(t);
                        self.release(a);
                    }
                    Operand::Reg(s, sw) => {
                        let t = self.temps.alloc()?;
                        self.mv(Width::B32, t, 0, 0);
                        self.mv(sw, t, xr(s), 0);
                        self.mv(w, xr(d), t, 0);
                        self.temps.free(t);
                    }
                    _ => return Err(unsupported(g)),
                }
            }
            M::Lea => {
                let (Operand::Reg(d, w), Operand::Mem(m, _)) = (ops[0], ops[1]) else {
                    return Err(unsupported(g));
                };
                let (a, disp) = self.address(&m)?;
                self.mv(w, xr(d), a, disp);
                self.release(a);
            }
            M::Xchg => {
                let (Operand::Reg(a, w), Operand::Reg(b, _)) = (ops[0], ops[1]) else {
                    return Err(unsupported(g));
                };
                let t = self.temps.alloc()?;
                self.mv(Width::B32, t, xr(a), 0);
                self.mv(w, xr(a), xr(b), 0);
                self.mv(w, xr(b), t, 0);
                self.temps.free(t);
            }
            M::Push => {
                let (s, imm) = match ops[0] {
                    Operand::Reg(n, _) => (xr(n), 0),
                    other => self.value(&other)?,
                };
                self.push_value(s, imm)?;
                self.release(s);
            }
            M::Pop => {
                let Operand::Reg(n, _) = ops[0] else {
                    return Err(unsupported(g));
                };
                if xr(n) == regs::ESP {
                    self.emit(Opcode::Ld, Width::B32, regs::ESP, regs::ESP, 0);
                } else {
                    self.emit(Opcode::Ld, Width::B32, xr(n), regs::ESP, 0);
                    self.mv(Width::B32, regs::ESP, regs::ESP, 4);
                }
            }
            M::Pushfd => self.push_value(regs::EFLAGS, 0)?,
            M::Popfd => {
                let t = self.temps.alloc()?;
                self.emit(Opcode::Ld, Width::B32, t, regs::ESP, 0);
                self.mv(Width::B32, regs::ESP, regs::ESP, 4);
                self.emit(Opcode::And, Width::B32, t, 0, eflags::POPFD_MASK as i32);
                self.emit(
                    Opcode::And,
                    Width::B32,
                    regs::EFLAGS,
                    0,
                    !eflags::POPFD_MASK as i32,
                );
                self.emit(Opcode::Or, Width::B32, regs::EFLAGS, t, 0);
                self.temps.free(t);
            }
            M::Add | M::Or | M::Adc | M::Sbb | M::And | M::Sub | M::Xor | M::Cmp => {
                let op = alu_opcode(g.mnemonic);
                let (s, imm) = self.value(&ops[1])?;
                self.modify(&ops[0], true, op != Opcode::Cmp, |e, d, w| {
                    e.emit(op, w, d, s, imm);
                    Ok(())
                })?;
                self.release(s);
            }
            M::Test => {
                let (s, imm) = self.value(&ops[1])?;
                let (d, _) = self.value(&ops[0])?;
                let w = ops[0].width();
                let t = self.temps.alloc()?;
                self.mv(Width::B32, t, d, 0);
                self.flags_in();
                self.emit(Opcode::And, w, t, s, imm);
                self.flags_out();
                self.temps.free(t);
                self.release(d);
                self.release(s);
            }
            M::Inc | M::Dec => {
                let op = if g.mnemonic == M::Inc {
                    Opcode::Add
                } else {
                    Opcode::Sub
                };
                self.modify(&ops[0], true, true, |e, d, w| {
                    // CF survives inc/dec
                    let t = e.temps.alloc()?;
                    e.emit(Opcode::Fsave, Width::B32, 0, 0, 0);
                    e.emit(op, w, d, 0, 1);
                    e.mv(Width::B32, t, regs::FLAGS, 0);
                    e.emit(Opcode::And, Width::B32, t, 0, !eflags::CF as i32);
                    e.emit(Opcode::Frestore, Width::B32, 0, 0, 0);
                    e.emit(Opcode::And, Width::B32, regs::FLAGS, 0, eflags::CF as i32);
                    e.emit(Opcode::Or, Width::B32, regs::FLAGS, t, 0);
                    e.temps.free(t);
                    Ok(())
                })?;
            }
            M::Neg => {
                self.modify(&ops[0], true, true, |e, d, w| {
                    let t = e.temps.alloc()?;
                    e.mv(Width::B32, t, 0, 0);
                    e.emit(Opcode::Sub, w, t, d, 0);
                    e.mv(w, d, t, 0);
                    e.temps.free(t);
                    Ok(())
                })?;
            }
            M::Not => {
                self.modify(&ops[0], false, true, |e, d, w| {
                    e.emit(Opcode::Not, w, d, d, 0);
                    Ok(())
                })?;
            }
            M::Mul | M::Div => {
                let w = ops[0].width();
                let (s, imm) = self.value(&ops[0])?;
                let p = self.temps.alloc_pair()?;
                self.mv(Width::B32, p, regs::EAX, 0);
                if g.mnemonic == M::Mul {
                    self.flags_in();
                    self.emit(Opcode::Mul, w, p, s, imm);
                    self.flags_out();
                } else {
                    self.mv(Width::B32, p + 1, regs::EDX, 0);
                    self.emit(Opcode::Div, w, p, s, imm);
                }
                self.mv(w, regs::EAX, p, 0);
                self.mv(w, regs::EDX, p + 1, 0);
                self.temps.free(p);
                self.temps.free(p + 1);
                self.release(s);
            }
            M::Shl | M::Shr | M::Sar | M::Rol | M::Ror => {
                let op = alu_opcode(g.mnemonic);
                let modifier = if g.mnemonic == M::Sar {
                    SR_ARITHMETIC
                } else {
                    0
                };
                let (s, imm) = match ops[1] {
                    Operand::Reg(n, _) => (xr(n), 0),
                    Operand::Imm(v, _) => (0, v as i32),
                    _ => return Err(unsupported(g)),
                };
                self.modify(&ops[0], true, true, |e, d, w| {
                    e.emit_mod(op, w, modifier, d, s, imm);
                    Ok(())
                })?;
            }
            M::Clc => self.emit(Opcode::And, Width::B32, regs::EFLAGS, 0, !eflags::CF as i32),
            M::Stc => self.emit(Opcode::Or, Width::B32, regs::EFLAGS, 0, eflags::CF as i32),
            M::Jmp => match ops[0] {
                Operand::Target(t) => self.ret(0, t as i32),
                Operand::Reg(n, _) => self.ret(xr(n), 0),
                other => {
                    let (s, _) = self.value(&other)?;
                    self.ret(s, 0);
                    self.release(s);
                }
            },
            M::Jcc(c) => {
                let Operand::Target(target) = ops[0] else {
                    return Err(unsupported(g));
                };
                let t = self.temps.alloc()?;
                self.flags_in();
                self.mv(Width::B32, t, 0, next as i32);
                self.emit_mod(Opcode::Jmp, Width::B32, c.negate() as u8, 0, 0, 2);
                self.mv(Width::B32, t, 0, target as i32);
                self.ret(t, 0);
                self.temps.free(t);
            }
            M::Call => {
                // resolve the target before ESP moves
                let target = match ops[0] {
                    Operand::Target(t) => Some((0u8, t as i32)),
                    Operand::Reg(n, _) if xr(n) == regs::ESP => {
                        let t = self.temps.alloc()?;
                        self.mv(Width::B32, t, regs::ESP, 0);
                        Some((t, 0))
                    }
                    Operand::Reg(n, _) => Some((xr(n), 0)),
                    Operand::Mem(m, _) if m.base == Some(4) || m.index == Some(4) => {
                        Some(self.value(&ops[0])?)
                    }
                    Operand::Mem(..) => None,
                    _ => return Err(unsupported(g)),
                };
                self.mv(Width::B32, regs::ESP, regs::ESP, -4);
                let t = self.temps.alloc()?;
                self.mv(Width::B32, t, 0, next as i32);
                self.emit(Opcode::St, Width::B32, regs::ESP, t, 0);
                self.temps.free(t);
                match target {
                    Some((s, imm)) => {
                        self.ret(s, imm);
                        self.release(s);
                    }
                    None => {
                        let (s, _) = self.value(&ops[0])?;
                        self.ret(s, 0);
                        self.release(s);
                    }
                }
            }
            M::Ret => {
                let extra = match ops.first() {
                    Some(Operand::Imm(v, _)) => *v as i32,
                    _ => 0,
                };
                let t = self.temps.alloc()?;
                self.emit(Opcode::Ld, Width::B32, t, regs::ESP, 0);
                self.mv(Width::B32, regs::ESP, regs::ESP, 4 + extra);
                self.ret(t, 0);
                self.temps.free(t);
            }
            M::Fabs => self.emit(Opcode::Syscall, Width::B32, 0, 0, sys::FABS as i32),
            M::Fchs => self.emit(Opcode::Syscall, Width::B32, 0, 0, sys::FCHS as i32),
            M::Fsqrt => self.emit(Opcode::Syscall, Width::B32, 0, 0, sys::FSQRT as i32),
            M::Fld1 => self.emit(Opcode::Syscall, Width::B32, 0, 0, sys::FLD1 as i32),
            M::Trap => {
                let Some(Operand::Imm(idx, _)) = ops.first() else {
                    return Err(unsupported(g));
                };
                self.emit(
                    Opcode::Syscall,
                    Width::B32,
                    0,
                    0,
                    (sys::TRAP_BASE + idx) as i32,
                );
                self.ret(regs::NEXT_PC, 0);
            }
        }
        if self.temps.free_set() != before {
            return Err(TranslateError::TempLeak(g.va));
        }
        Ok(g.mnemonic.ends_block())
    }

    /// Fall-through terminator for blocks cut by the instruction cap.
    pub fn fall_through(&mut self, next: u32) {
        self.ret(0, next as i32);
    }
}

fn unsupported(g: &GuestInstr) -> TranslateError {
    TranslateError::Unsupported {
        va: g.va,
        bytes: Vec::new(),
    }
}

/// Condition used by `jcc`, exposed for tests.
pub fn jcc_cond(m: Mnemonic) -> Option<Cond> {
    match m {
        Mnemonic::Jcc(c) => Some(c),
        _ => None,
    }
}

//! IA-32 decoder for the supported subset.
//!
//! Decoding starts at exactly the requested byte, so jumping into the
//! middle of an earlier instruction yields whatever those bytes spell.

use std::fmt;

use crate::mmu::Mmu;
use crate::xir::{Cond, Width};

use super::TranslateError;

/// Opcode of the host-call trap used by loader trampolines: `0F 04 lo hi`.
pub const TRAP_OPCODE: [u8; 2] = [0x0F, 0x04];

const MAX_INSTR_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Mov,
    Movzx,
    Lea,
    Push,
    Pop,
    Pushfd,
    Popfd,
    Add,
    Or,
    Adc,
    Sbb,
    And,
    Sub,
    Xor,
    Cmp,
    Inc,
    Dec,
    Neg,
    Not,
    Mul,
    Div,
    Test,
    Rol,
    Ror,
    Shl,
    Shr,
    Sar,
    Jmp,
    Jcc(Cond),
    Call,
    Ret,
    Nop,
    Clc,
    Stc,
    Xchg,
    Fabs,
    Fchs,
    Fsqrt,
    Fld1,
    /// Host-call trap with a 16-bit index.
    Trap,
}

/// Group 1 order: add, or, adc, sbb, and, sub, xor, cmp.
const GROUP1: [Mnemonic; 8] = [
    Mnemonic::Add,
    Mnemonic::Or,
    Mnemonic::Adc,
    Mnemonic::Sbb,
    Mnemonic::And,
    Mnemonic::Sub,
    Mnemonic::Xor,
    Mnemonic::Cmp,
];

/// x86 condition code order (low nibble of 7x / 0F 8x).
pub const JCC_CONDS: [Cond; 16] = [
    Cond::O,
    Cond::No,
    Cond::B,
    Cond::Ae,
    Cond::Eq,
    Cond::Ne,
    Cond::Be,
    Cond::A,
    Cond::S,
    Cond::Ns,
    Cond::P,
    Cond::Np,
    Cond::L,
    Cond::Ge,
    Cond::Le,
    Cond::G,
];

const JCC_NAMES: [&str; 16] = [
    "jo", "jno", "jb", "jnb", "je", "jne", "jbe", "ja", "js", "jns", "jp", "jnp", "jl", "jge",
    "jle", "jg",
];

impl Mnemonic {
    pub fn name(self) -> &'static str {
        use Mnemonic::*;
        match self {
            Mov => "mov",
            Movzx => "movzx",
            Lea => "lea",
            Push => "push",
            Pop => "pop",
            Pushfd => "pushfd",
            Popfd => "popfd",
            Add => "add",
            Or => "or",
            Adc => "adc",
            Sbb => "sbb",
            And => "and",
            Sub => "sub",
            Xor => "xor",
            Cmp => "cmp",
            Inc => "inc",
            Dec => "dec",
            Neg => "neg",
            Not => "not",
            Mul => "mul",
            Div => "div",
            Test => "test",
            Rol => "rol",
            Ror => "ror",
            Shl => "shl",
            Shr => "shr",
            Sar => "sar",
            Jmp => "jmp",
            Jcc(c) => {
                let i = JCC_CONDS.iter().position(|x| *x == c).unwrap_or(0);
                JCC_NAMES[i]
            }
            Call => "call",
            Ret => "ret",
            Nop => "nop",
            Clc => "clc",
            Stc => "stc",
            Xchg => "xchg",
            Fabs => "fabs",
            Fchs => "fchs",
            Fsqrt => "fsqrt",
            Fld1 => "fld1",
            Trap => "trap",
        }
    }

    /// Control transfers end a codeblock.
    pub fn ends_block(self) -> bool {
        matches!(
            self,
            Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call | Mnemonic::Ret | Mnemonic::Trap
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Option<u8>,
    pub index: Option<u8>,
    /// 1, 2, 4 or 8.
    pub scale: u8,
    pub disp: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    /// Hardware register number with access width. Byte registers are
    /// limited to al, cl, dl, bl.
    Reg(u8, Width),
    Mem(MemRef, Width),
    /// Immediate already masked to the operand width.
    Imm(u32, Width),
    /// Absolute branch target.
    Target(u32),
}

impl Operand {
    pub fn width(&self) -> Width {
        match *self {
            Operand::Reg(_, w) | Operand::Mem(_, w) | Operand::Imm(_, w) => w,
            Operand::Target(_) => Width::B32,
        }
    }

    pub fn is_reg(&self) -> bool {
        matches!(self, Operand::Reg(..))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestInstr {
    pub va: u32,
    pub len: u8,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    /// Operand-size override (0x66) was present.
    pub opsize16: bool,
}

impl GuestInstr {
    pub fn next_va(&self) -> u32 {
        self.va.wrapping_add(self.len as u32)
    }

    /// Lowercase Intel-syntax text.
    pub fn text(&self) -> String {
        self.to_string()
    }
}

const REG32: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"];
const REG16: [&str; 8] = ["ax", "cx", "dx", "bx", "sp", "bp", "si", "di"];
const REG8: [&str; 8] = ["al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"];

pub fn reg_name(n: u8, w: Width) -> &'static str {
    match w {
        Width::B32 => REG32[n as usize & 7],
        Width::B16 => REG16[n as usize & 7],
        Width::B8 => REG8[n as usize & 7],
    }
}

fn size_cast(w: Width) -> &'static str {
    match w {
        Width::B8 => "byte ",
        Width::B16 => "word ",
        Width::B32 => "dword ",
    }
}

fn fmt_mem(f: &mut fmt::Formatter<'_>, m: &MemRef) -> fmt::Result {
    f.write_str("[")?;
    let mut any = false;
    if let Some(b) = m.base {
        f.write_str(REG32[b as usize])?;
        any = true;
    }
    if let Some(i) = m.index {
        if any {
            f.write_str("+")?;
        }
        f.write_str(REG32[i as usize])?;
        if m.scale > 1 {
            write!(f, "*{}", m.scale)?;
        }
        any = true;
    }
    if !any {
        write!(f, "0x{:x}", m.disp as u32)?;
    } else if m.disp < 0 {
        write!(f, "-0x{:x}", (m.disp as i64).unsigned_abs())?;
    } else if m.disp > 0 {
        write!(f, "+0x{:x}", m.disp)?;
    }
    f.write_str("]")
}

impl fmt::Display for GuestInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.mnemonic == Mnemonic::Ret {
            return match self.operands.first() {
                Some(Operand::Imm(v, _)) => write!(f, "ret 0x{v:x}"),
                _ => f.write_str("ret"),
            };
        }
        f.write_str(self.mnemonic.name())?;
        // memory operands carry a size cast unless a register operand
        // already fixes the size
        let cast = self.mnemonic == Mnemonic::Movzx || !self.operands.iter().any(Operand::is_reg);
        for (k, op) in self.operands.iter().enumerate() {
            f.write_str(if k == 0 { " " } else { ", " })?;
            match op {
                Operand::Reg(n, w) => f.write_str(reg_name(*n, *w))?,
                Operand::Mem(m, w) => {
                    if cast {
                        f.write_str(size_cast(*w))?;
                    }
                    fmt_mem(f, m)?;
                }
                Operand::Imm(v, _) => write!(f, "0x{v:x}")?,
                Operand::Target(t) => write!(f, "0x{t:x}")?,
            }
        }
        Ok(())
    }
}

/// Byte cursor over guest memory.
struct Cursor<'a> {
    mmu: &'a Mmu,
    start: u32,
    pos: usize,
}

impl Cursor<'_> {
    fn u8(&mut self) -> Result<u8, TranslateError> {
        if self.pos >= MAX_INSTR_LEN {
            return Err(self.unsupported());
        }
        let va = self.start.wrapping_add(self.pos as u32);
        let b = self
            .mmu
            .read_u8(va)
            .map_err(|_| TranslateError::UnmappedFetch(va))?;
        self.pos += 1;
        Ok(b)
    }

    fn i8(&mut self) -> Result<i32, TranslateError> {
        Ok(self.u8()? as i8 as i32)
    }

    fn u16(&mut self) -> Result<u32, TranslateError> {
        Ok(self.u8()? as u32 | (self.u8()? as u32) << 8)
    }

    fn u32(&mut self) -> Result<u32, TranslateError> {
        Ok(self.u16()? | self.u16()? << 16)
    }

    fn bytes(&self) -> Vec<u8> {
        (0..self.pos.max(1))
            .filter_map(|i| self.mmu.read_u8(self.start.wrapping_add(i as u32)).ok())
            .collect()
    }

    fn unsupported(&self) -> TranslateError {
        TranslateError::Unsupported {
            va: self.start,
            bytes: self.bytes(),
        }
    }
}

/// Result of a ModRM byte: the `reg` field and the r/m operand location.
enum Rm {
    Reg(u8),
    Mem(MemRef),
}

fn modrm(c: &mut Cursor<'_>) -> Result<(u8, Rm), TranslateError> {
    let b = c.u8()?;
    let md = b >> 6;
    let reg = (b >> 3) & 7;
    let rm = b & 7;
    if md == 3 {
        return Ok((reg, Rm::Reg(rm)));
    }
    let mut m = MemRef {
        base: Some(rm),
        index: None,
        scale: 1,
        disp: 0,
    };
    if rm == 4 {
        let sib = c.u8()?;
        let scale = 1 << (sib >> 6);
        let index = (sib >> 3) & 7;
        let base = sib & 7;
        m.index = (index != 4).then_some(index);
        m.scale = scale;
        m.base = Some(base);
        if base == 5 && md == 0 {
            m.base = None;
            m.disp = c.u32()? as i32;
        }
    } else if rm == 5 && md == 0 {
        m.base = None;
        m.disp = c.u32()? as i32;
    }
    match md {
        1 => m.disp = c.i8()?,
        2 => m.disp = c.u32()? as i32,
        _ => {}
    }
    if m.index.is_none() && m.scale != 1 {
        m.scale = 1;
    }
    Ok((reg, Rm::Mem(m)))
}

fn mask_imm(v: u32, w: Width) -> u32 {
    v & w.mask()
}

/// Decodes the instruction at `va`.
pub fn decode_guest(mmu: &Mmu, va: u32) -> Result<GuestInstr, TranslateError> {
    let mut c = Cursor {
        mmu,
        start: va,
        pos: 0,
    };
    let mut opsize16 = false;
    let mut b = c.u8()?;
    while b == 0x66 {
        opsize16 = true;
        b = c.u8()?;
    }
    let wv = if opsize16 { Width::B16 } else { Width::B32 };

    let reg_op = |c: &Cursor<'_>, n: u8, w: Width| -> Result<Operand, TranslateError> {
        if w == Width::B8 && n >= 4 {
            // ah/ch/dh/bh have no XIR sub-register form
            return Err(c.unsupported());
        }
        Ok(Operand::Reg(n, w))
    };
    let rm_op = |c: &Cursor<'_>, rm: Rm, w: Width| -> Result<Operand, TranslateError> {
        match rm {
            Rm::Reg(n) => reg_op(c, n, w),
            Rm::Mem(m) => Ok(Operand::Mem(m, w)),
        }
    };
    let imm_z = |c: &mut Cursor<'_>, w: Width| -> Result<u32, TranslateError> {
        Ok(if w == Width::B16 { c.u16()? } else { c.u32()? })
    };

    use Mnemonic as M;
    let (mnemonic, operands): (Mnemonic, Vec<Operand>) = match b {
        // group 1 register/memory forms
        0x00..=0x3F if b & 7 < 6 && b != 0x0F => {
            let m = GROUP1[(b >> 3) as usize];
            match b & 7 {
                0..=3 => {
                    let w = if b & 1 == 0 { Width::B8 } else { wv };
                    let (reg, rm) = modrm(&mut c)?;
                    let r = reg_op(&c, reg, w)?;
                    let x = rm_op(&c, rm, w)?;
                    if b & 2 == 0 {
                        (m, vec![x, r])
                    } else {
                        (m, vec![r, x])
                    }
                }
                4 => {
                    let v = c.u8()? as u32;
                    (
                        m,
                        vec![Operand::Reg(0, Width::B8), Operand::Imm(v, Width::B8)],
                    )
                }
                _ => {
                    let v = imm_z(&mut c, wv)?;
                    (m, vec![Operand::Reg(0, wv), Operand::Imm(v, wv)])
                }
            }
        }
        0x40..=0x47 => (M::Inc, vec![Operand::Reg(b - 0x40, wv)]),
        0x48..=0x4F => (M::Dec, vec![Operand::Reg(b - 0x48, wv)]),
        0x50..=0x57 if !opsize16 => (M::Push, vec![Operand::Reg(b - 0x50, Width::B32)]),
        0x58..=0x5F if !opsize16 => (M::Pop, vec![Operand::Reg(b - 0x58, Width::B32)]),
        0x68 if !opsize16 => (M::Push, vec![Operand::Imm(c.u32()?, Width::B32)]),
        0x6A if !opsize16 => (M::Push, vec![Operand::Imm(c.i8()? as u32, Width::B32)]),
        0x70..=0x7F => {
            let rel = c.i8()?;
            let t = va.wrapping_add(c.pos as u32).wrapping_add(rel as u32);
            (
                M::Jcc(JCC_CONDS[(b & 0xF) as usize]),
                vec![Operand::Target(t)],
            )
        }
        0x80 | 0x81 | 0x83 => {
            let w = if b == 0x80 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            let x = rm_op(&c, rm, w)?;
            let v = match b {
                0x81 => imm_z(&mut c, w)?,
                0x83 => mask_imm(c.i8()? as u32, w),
                _ => c.u8()? as u32,
            };
            (GROUP1[reg as usize], vec![x, Operand::Imm(v, w)])
        }
        0x84 | 0x85 => {
            let w = if b == 0x84 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            let x = rm_op(&c, rm, w)?;
            (M::Test, vec![x, reg_op(&c, reg, w)?])
        }
        0x86 | 0x87 => {
            let w = if b == 0x86 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            let Rm::Reg(n) = rm else {
                return Err(c.unsupported());
            };
            (M::Xchg, vec![reg_op(&c, n, w)?, reg_op(&c, reg, w)?])
        }
        0x88..=0x8B => {
            let w = if b & 1 == 0 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            let r = reg_op(&c, reg, w)?;
            let x = rm_op(&c, rm, w)?;
            if b & 2 == 0 {
                (M::Mov, vec![x, r])
            } else {
                (M::Mov, vec![r, x])
            }
        }
        0x8D => {
            let (reg, rm) = modrm(&mut c)?;
            let Rm::Mem(m) = rm else {
                return Err(c.unsupported());
            };
            (M::Lea, vec![Operand::Reg(reg, wv), Operand::Mem(m, wv)])
        }
        0x90 if !opsize16 => (M::Nop, vec![]),
        0x90..=0x97 => (
            M::Xchg,
            vec![Operand::Reg(0, wv), Operand::Reg(b - 0x90, wv)],
        ),
        0x9C if !opsize16 => (M::Pushfd, vec![]),
        0x9D if !opsize16 => (M::Popfd, vec![]),
        0xA8 => (
            M::Test,
            vec![
                Operand::Reg(0, Width::B8),
                Operand::Imm(c.u8()? as u32, Width::B8),
            ],
        ),
        0xA9 => {
            let v = imm_z(&mut c, wv)?;
            (M::Test, vec![Operand::Reg(0, wv), Operand::Imm(v, wv)])
        }
        0xB0..=0xB3 => (
            M::Mov,
            vec![
                Operand::Reg(b - 0xB0, Width::B8),
                Operand::Imm(c.u8()? as u32, Width::B8),
            ],
        ),
        0xB8..=0xBF => {
            let v = imm_z(&mut c, wv)?;
            (
                M::Mov,
                vec![Operand::Reg(b - 0xB8, wv), Operand::Imm(v, wv)],
            )
        }
        0xC0 | 0xC1 | 0xD0..=0xD3 => {
            let w = if b & 1 == 0 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            let m = match reg {
                0 => M::Rol,
                1 => M::Ror,
                4 | 6 => M::Shl,
                5 => M::Shr,
                7 => M::Sar,
                _ => return Err(c.unsupported()),
            };
            let x = rm_op(&c, rm, w)?;
            let count = match b {
                0xC0 | 0xC1 => Operand::Imm(c.u8()? as u32, Width::B8),
                0xD0 | 0xD1 => Operand::Imm(1, Width::B8),
                _ => Operand::Reg(1, Width::B8),
            };
            (m, vec![x, count])
        }
        0xC2 => (M::Ret, vec![Operand::Imm(c.u16()?, Width::B16)]),
        0xC3 => (M::Ret, vec![]),
        0xC6 | 0xC7 => {
            let w = if b == 0xC6 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            if reg != 0 {
                return Err(c.unsupported());
            }
            let x = rm_op(&c, rm, w)?;
            let v = if w == Width::B8 {
                c.u8()? as u32
            } else {
                imm_z(&mut c, w)?
            };
            (M::Mov, vec![x, Operand::Imm(v, w)])
        }
        0xD9 => match c.u8()? {
            0xE0 => (M::Fchs, vec![]),
            0xE1 => (M::Fabs, vec![]),
            0xE8 => (M::Fld1, vec![]),
            0xFA => (M::Fsqrt, vec![]),
            _ => return Err(c.unsupported()),
        },
        0xE8 if !opsize16 => {
            let rel = c.u32()?;
            let t = va.wrapping_add(c.pos as u32).wrapping_add(rel);
            (M::Call, vec![Operand::Target(t)])
        }
        0xE9 if !opsize16 => {
            let rel = c.u32()?;
            let t = va.wrapping_add(c.pos as u32).wrapping_add(rel);
            (M::Jmp, vec![Operand::Target(t)])
        }
        0xEB => {
            let rel = c.i8()?;
            let t = va.wrapping_add(c.pos as u32).wrapping_add(rel as u32);
            (M::Jmp, vec![Operand::Target(t)])
        }
        0xF6 | 0xF7 => {
            let w = if b == 0xF6 { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            let x = rm_op(&c, rm, w)?;
            match reg {
                0 => {
                    let v = if w == Width::B8 {
                        c.u8()? as u32
                    } else {
                        imm_z(&mut c, w)?
                    };
                    (M::Test, vec![x, Operand::Imm(v, w)])
                }
                2 => (M::Not, vec![x]),
                3 => (M::Neg, vec![x]),
                // byte forms would need ah
                4 if w != Width::B8 => (M::Mul, vec![x]),
                6 if w != Width::B8 => (M::Div, vec![x]),
                _ => return Err(c.unsupported()),
            }
        }
        0xF8 => (M::Clc, vec![]),
        0xF9 => (M::Stc, vec![]),
        0xFE | 0xFF => {
            let w = if b == 0xFE { Width::B8 } else { wv };
            let (reg, rm) = modrm(&mut c)?;
            match (reg, b) {
                (0, _) => (M::Inc, vec![rm_op(&c, rm, w)?]),
                (1, _) => (M::Dec, vec![rm_op(&c, rm, w)?]),
                (2, 0xFF) if !opsize16 => (M::Call, vec![rm_op(&c, rm, Width::B32)?]),
                (4, 0xFF) if !opsize16 => (M::Jmp, vec![rm_op(&c, rm, Width::B32)?]),
                (6, 0xFF) if !opsize16 => (M::Push, vec![rm_op(&c, rm, Width::B32)?]),
                _ => return Err(c.unsupported()),
            }
        }
        0x0F => {
            let b2 = c.u8()?;
            match b2 {
                0x04 if !opsize16 => (M::Trap, vec![Operand::Imm(c.u16()?, Width::B16)]),
                0x80..=0x8F if !opsize16 => {
                    let rel = c.u32()?;
                    let t = va.wrapping_add(c.pos as u32).wrapping_add(rel);
                    (
                        M::Jcc(JCC_CONDS[(b2 & 0xF) as usize]),
                        vec![Operand::Target(t)],
                    )
                }
                0xB6 | 0xB7 => {
                    let sw = if b2 == 0xB6 { Width::B8 } else { Width::B16 };
                    let (reg, rm) = modrm(&mut c)?;
                    let x = rm_op(&c, rm, sw)?;
                    (M::Movzx, vec![Operand::Reg(reg, wv), x])
                }
                _ => return Err(c.unsupported()),
            }
        }
        _ => return Err(c.unsupported()),
    };
    Ok(GuestInstr {
        va,
        len: c.pos as u8,
        mnemonic,
        operands,
        opsize16,
    })
}

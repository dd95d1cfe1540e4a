//! A tiny IA-32 reference: random straight-line programs, their encoding,
//! and direct semantics written from the instruction set manual. It shares
//! no code with the translator so the two can be checked against each other.
//!
//! Undefined flags follow the emulator's documented pinning: logic, mul and
//! multi-bit shifts use the one-bit formulas, and shift counts past the
//! operand width shift out zeros. AF is never compared.

#![allow(dead_code)]

use rand::Rng;

pub const CODE: u32 = 0x1000;
pub const SCRATCH: u32 = 0x20_0000;
pub const STACK: u32 = SCRATCH + 0x800;

pub const CF: u32 = 1;
pub const PF: u32 = 1 << 2;
pub const AF: u32 = 1 << 4;
pub const ZF: u32 = 1 << 6;
pub const SF: u32 = 1 << 7;
pub const DF: u32 = 1 << 10;
pub const OF: u32 = 1 << 11;
/// Flags the differential comparison checks.
pub const COMPARED: u32 = CF | PF | ZF | SF | OF;

const EBX: u8 = 3;
const ESP: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W {
    B8,
    B16,
    B32,
}

impl W {
    fn bits(self) -> u32 {
        match self {
            W::B8 => 8,
            W::B16 => 16,
            W::B32 => 32,
        }
    }
    fn mask(self) -> u32 {
        match self {
            W::B8 => 0xFF,
            W::B16 => 0xFFFF,
            W::B32 => 0xFFFF_FFFF,
        }
    }
    fn msb(self) -> u32 {
        1 << (self.bits() - 1)
    }
}

/// Register or `[ebx + disp]` inside the scratch page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loc {
    Reg(u8),
    Mem(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Loc(Loc),
    Imm(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Count {
    One,
    Imm(u8),
    Cl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ins {
    /// Group 1: add or adc sbb and sub xor cmp.
    Alu {
        op: u8,
        w: W,
        dst: Loc,
        src: Src,
        short: bool,
    },
    Test {
        w: W,
        dst: Loc,
        src: Src,
    },
    Mov {
        w: W,
        dst: Loc,
        src: Src,
        short: bool,
    },
    Movzx {
        w: W,
        sw: W,
        dst: u8,
        src: Loc,
    },
    Lea {
        dst: u8,
        base: u8,
        index: Option<u8>,
        scale: u8,
        disp: i32,
    },
    Inc {
        w: W,
        dst: Loc,
        short: bool,
    },
    Dec {
        w: W,
        dst: Loc,
        short: bool,
    },
    Neg {
        w: W,
        dst: Loc,
    },
    Not {
        w: W,
        dst: Loc,
    },
    Mul {
        w: W,
        src: Loc,
    },
    Div {
        w: W,
        src: Loc,
    },
    /// 0 rol, 1 ror, 4 shl, 5 shr, 7 sar.
    Shift {
        kind: u8,
        w: W,
        dst: Loc,
        count: Count,
    },
    Xchg {
        w: W,
        a: u8,
        b: u8,
    },
    PushReg(u8),
    PushImm(u32),
    PushMem(u8),
    Pop(u8),
    Popfd,
    Clc,
    Stc,
    Nop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cpu {
    pub r: [u32; 8],
    pub eflags: u32,
    /// The scratch page.
    pub mem: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivideError;

fn modrm(loc: Loc, reg: u8, out: &mut Vec<u8>) {
    match loc {
        Loc::Reg(n) => out.push(0xC0 | reg << 3 | n),
        Loc::Mem(d) => {
            out.push(0x40 | reg << 3 | EBX);
            out.push(d);
        }
    }
}

fn imm(v: u32, w: W, out: &mut Vec<u8>) {
    match w {
        W::B8 => out.push(v as u8),
        W::B16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
        W::B32 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

fn fits_i8(v: u32, w: W) -> bool {
    let sx = v as u8 as i8 as i32 as u32 & w.mask();
    sx == v & w.mask()
}

impl Ins {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Vec::new();
        let wide = |w: W, o: &mut Vec<u8>| {
            if w == W::B16 {
                o.push(0x66)
            }
        };
        let byte = |w: W| (w != W::B8) as u8;
        match *self {
            Ins::Alu {
                op,
                w,
                dst,
                src,
                short,
            } => {
                wide(w, &mut o);
                match src {
                    Src::Loc(Loc::Reg(r)) => {
                        o.push(op * 8 + byte(w));
                        modrm(dst, r, &mut o);
                    }
                    Src::Loc(m @ Loc::Mem(_)) => {
                        let Loc::Reg(d) = dst else { unreachable!() };
                        o.push(op * 8 + 2 + byte(w));
                        modrm(m, d, &mut o);
                    }
                    Src::Imm(v) => {
                        if short && dst == Loc::Reg(0) {
                            o.push(op * 8 + 4 + byte(w));
                            imm(v, w, &mut o);
                        } else if w == W::B8 {
                            o.push(0x80);
                            modrm(dst, op, &mut o);
                            o.push(v as u8);
                        } else if short && fits_i8(v, w) {
                            o.push(0x83);
                            modrm(dst, op, &mut o);
                            o.push(v as u8);
                        } else {
                            o.push(0x81);
                            modrm(dst, op, &mut o);
                            imm(v, w, &mut o);
                        }
                    }
                }
            }
            Ins::Test { w, dst, src } => {
                wide(w, &mut o);
                match src {
                    Src::Loc(Loc::Reg(r)) => {
                        o.push(0x84 + byte(w));
                        modrm(dst, r, &mut o);
                    }
                    Src::Imm(v) if dst == Loc::Reg(0) => {
                        o.push(0xA8 + byte(w));
                        imm(v, w, &mut o);
                    }
                    Src::Imm(v) => {
                        o.push(0xF6 + byte(w));
                        modrm(dst, 0, &mut o);
                        imm(v, w, &mut o);
                    }
                    Src::Loc(Loc::Mem(_)) => unreachable!(),
                }
            }
            Ins::Mov { w, dst, src, short } => {
                wide(w, &mut o);
                match (dst, src) {
                    (_, Src::Loc(Loc::Reg(r))) => {
                        o.push(0x88 + byte(w));
                        modrm(dst, r, &mut o);
                    }
                    (Loc::Reg(d), Src::Loc(m @ Loc::Mem(_))) => {
                        o.push(0x8A + byte(w));
                        modrm(m, d, &mut o);
                    }
                    (Loc::Reg(d), Src::Imm(v)) if short => {
                        o.push(if w == W::B8 { 0xB0 } else { 0xB8 } + d);
                        imm(v, w, &mut o);
                    }
                    (_, Src::Imm(v)) => {
                        o.push(0xC6 + byte(w));
                        modrm(dst, 0, &mut o);
                        imm(v, w, &mut o);
                    }
                    _ => unreachable!(),
                }
            }
            Ins::Movzx { w, sw, dst, src } => {
                wide(w, &mut o);
                o.extend_from_slice(&[0x0F, if sw == W::B8 { 0xB6 } else { 0xB7 }]);
                modrm(src, dst, &mut o);
            }
            Ins::Lea {
                dst,
                base,
                index,
                scale,
                disp,
            } => {
                o.push(0x8D);
                o.push(0x80 | dst << 3 | 4);
                let sc = scale.trailing_zeros() as u8;
                o.push(sc << 6 | index.unwrap_or(4) << 3 | base);
                o.extend_from_slice(&disp.to_le_bytes());
            }
            Ins::Inc { w, dst, short } | Ins::Dec { w, dst, short } => {
                let dec = matches!(self, Ins::Dec { .. }) as u8;
                wide(w, &mut o);
                match dst {
                    Loc::Reg(r) if short && w != W::B8 => o.push(0x40 + 8 * dec + r),
                    _ => {
                        o.push(0xFE + byte(w));
                        modrm(dst, dec, &mut o);
                    }
                }
            }
            Ins::Neg { w, dst } | Ins::Not { w, dst } => {
                wide(w, &mut o);
                o.push(0xF6 + byte(w));
                modrm(
                    dst,
                    if matches!(self, Ins::Neg { .. }) {
                        3
                    } else {
                        2
                    },
                    &mut o,
                );
            }
            Ins::Mul { w, src } | Ins::Div { w, src } => {
                wide(w, &mut o);
                o.push(0xF7);
                modrm(
                    src,
                    if matches!(self, Ins::Mul { .. }) {
                        4
                    } else {
                        6
                    },
                    &mut o,
                );
            }
            Ins::Shift {
                kind,
                w,
                dst,
                count,
            } => {
                wide(w, &mut o);
                match count {
                    Count::One => {
                        o.push(0xD0 + byte(w));
                        modrm(dst, kind, &mut o);
                    }
                    Count::Cl => {
                        o.push(0xD2 + byte(w));
                        modrm(dst, kind, &mut o);
                    }
                    Count::Imm(n) => {
                        o.push(0xC0 + byte(w));
                        modrm(dst, kind, &mut o);
                        o.push(n);
                    }
                }
            }
            Ins::Xchg { w, a, b } => {
                wide(w, &mut o);
                if w != W::B8 && a == 0 {
                    o.push(0x90 + b);
                } else {
                    o.push(0x86 + byte(w));
                    modrm(Loc::Reg(a), b, &mut o);
                }
            }
            Ins::PushReg(r) => o.push(0x50 + r),
            Ins::PushImm(v) => {
                if fits_i8(v, W::B32) {
                    o.extend_from_slice(&[0x6A, v as u8]);
                } else {
                    o.push(0x68);
                    o.extend_from_slice(&v.to_le_bytes());
                }
            }
            Ins::PushMem(d) => {
                o.push(0xFF);
                modrm(Loc::Mem(d), 6, &mut o);
            }
            Ins::Pop(r) => o.push(0x58 + r),
            Ins::Popfd => o.push(0x9D),
            Ins::Clc => o.push(0xF8),
            Ins::Stc => o.push(0xF9),
            Ins::Nop => o.push(0x90),
        }
        o
    }
}

fn parity(v: u32) -> bool {
    (v as u8).count_ones().is_multiple_of(2)
}

fn szp(r: u32, w: W) -> u32 {
    let mut f = 0;
    if r & w.mask() == 0 {
        f |= ZF;
    }
    if r & w.msb() != 0 {
        f |= SF;
    }
    if parity(r) {
        f |= PF;
    }
    f
}

impl Cpu {
    pub fn random(rng: &mut impl Rng) -> Cpu {
        let mut r: [u32; 8] = rng.gen();
        // bias some registers toward small values so div and shifts by cl
        // see interesting operands
        for v in r.iter_mut() {
            match rng.gen_range(0..4) {
                0 => *v &= 0xFF,
                1 => *v &= 0x1F,
                _ => {}
            }
        }
        r[EBX as usize] = SCRATCH;
        r[ESP as usize] = STACK;
        let mut mem = vec![0u8; 0x1000];
        rng.fill(&mut mem[..]);
        let eflags = 0x202 | (rng.gen::<u32>() & (CF | PF | AF | ZF | SF | OF));
        Cpu { r, eflags, mem }
    }

    fn reg(&self, n: u8, w: W) -> u32 {
        self.r[n as usize] & w.mask()
    }

    fn set_reg(&mut self, n: u8, w: W, v: u32) {
        let m = w.mask();
        let old = self.r[n as usize];
        self.r[n as usize] = (old & !m) | (v & m);
    }

    fn addr(&self, d: u8) -> usize {
        (self.r[EBX as usize].wrapping_add(d as u32) - SCRATCH) as usize
    }

    fn load(&self, a: usize, w: W) -> u32 {
        let mut v = 0u32;
        for k in 0..(w.bits() / 8) as usize {
            v |= (self.mem[a + k] as u32) << (8 * k);
        }
        v
    }

    fn store(&mut self, a: usize, w: W, v: u32) {
        for k in 0..(w.bits() / 8) as usize {
            self.mem[a + k] = (v >> (8 * k)) as u8;
        }
    }

    fn get(&self, l: Loc, w: W) -> u32 {
        match l {
            Loc::Reg(n) => self.reg(n, w),
            Loc::Mem(d) => self.load(self.addr(d), w),
        }
    }

    fn put(&mut self, l: Loc, w: W, v: u32) {
        match l {
            Loc::Reg(n) => self.set_reg(n, w, v),
            Loc::Mem(d) => {
                let a = self.addr(d);
                self.store(a, w, v)
            }
        }
    }

    fn src(&self, s: Src, w: W) -> u32 {
        match s {
            Src::Loc(l) => self.get(l, w),
            Src::Imm(v) => v & w.mask(),
        }
    }

    fn set_status(&mut self, f: u32) {
        self.eflags = (self.eflags & !(CF | PF | AF | ZF | SF | OF)) | f;
    }

    fn push(&mut self, v: u32) {
        let sp = self.r[ESP as usize].wrapping_sub(4);
        self.r[ESP as usize] = sp;
        self.store((sp - SCRATCH) as usize, W::B32, v);
    }

    fn pop(&mut self) -> u32 {
        let sp = self.r[ESP as usize];
        self.r[ESP as usize] = sp.wrapping_add(4);
        self.load((sp - SCRATCH) as usize, W::B32)
    }

    fn add(&mut self, a: u32, b: u32, carry: u32, w: W) -> u32 {
        let wide = a as u64 + b as u64 + carry as u64;
        let r = wide as u32 & w.mask();
        let mut f = szp(r, w);
        if wide > w.mask() as u64 {
            f |= CF;
        }
        // signed overflow: operands agree in sign, result differs
        if (a & w.msb() == b & w.msb()) && (r & w.msb() != a & w.msb()) {
            f |= OF;
        }
        self.set_status(f);
        r
    }

    fn sub(&mut self, a: u32, b: u32, borrow: u32, w: W) -> u32 {
        let r = (a as u64).wrapping_sub(b as u64 + borrow as u64) as u32 & w.mask();
        let mut f = szp(r, w);
        if (a as u64) < b as u64 + borrow as u64 {
            f |= CF;
        }
        if (a & w.msb() != b & w.msb()) && (r & w.msb() != a & w.msb()) {
            f |= OF;
        }
        self.set_status(f);
        r
    }

    pub fn exec(&mut self, ins: &Ins) -> Result<(), DivideError> {
        let cf = self.eflags & CF;
        match *ins {
            Ins::Alu {
                op, w, dst, src, ..
            } => {
                let a = self.get(dst, w);
                let b = self.src(src, w);
                let r = match op {
                    0 => self.add(a, b, 0, w),
                    2 => self.add(a, b, cf, w),
                    3 => self.sub(a, b, cf, w),
                    5 | 7 => self.sub(a, b, 0, w),
                    _ => {
                        let r = match op {
                            1 => a | b,
                            4 => a & b,
                            _ => a ^ b,
                        };
                        self.set_status(szp(r, w));
                        r
                    }
                };
                if op != 7 {
                    self.put(dst, w, r);
                }
            }
            Ins::Test { w, dst, src } => {
                let r = self.get(dst, w) & self.src(src, w);
                self.set_status(szp(r, w));
            }
            Ins::Mov { w, dst, src, .. } => {
                let v = self.src(src, w);
                self.put(dst, w, v);
            }
            Ins::Movzx { w, sw, dst, src } => {
                let v = self.get(src, sw);
                self.set_reg(dst, w, v);
            }
            Ins::Lea {
                dst,
                base,
                index,
                scale,
                disp,
            } => {
                let i = index.map_or(0, |i| self.r[i as usize].wrapping_mul(scale as u32));
                self.r[dst as usize] = self.r[base as usize]
                    .wrapping_add(i)
                    .wrapping_add(disp as u32);
            }
            Ins::Inc { w, dst, .. } => {
                let a = self.get(dst, w);
                let r = self.add(a, 1, 0, w);
                self.eflags = (self.eflags & !CF) | cf;
                self.put(dst, w, r);
            }
            Ins::Dec { w, dst, .. } => {
                let a = self.get(dst, w);
                let r = self.sub(a, 1, 0, w);
                self.eflags = (self.eflags & !CF) | cf;
                self.put(dst, w, r);
            }
            Ins::Neg { w, dst } => {
                let a = self.get(dst, w);
                let r = self.sub(0, a, 0, w);
                self.put(dst, w, r);
            }
            Ins::Not { w, dst } => {
                let a = self.get(dst, w);
                self.put(dst, w, !a);
            }
            Ins::Mul { w, src } => {
                let p = self.reg(0, w) as u64 * self.get(src, w) as u64;
                let lo = p as u32 & w.mask();
                let hi = (p >> w.bits()) as u32 & w.mask();
                self.set_reg(0, w, lo);
                self.set_reg(2, w, hi);
                let mut f = szp(lo, w);
                if hi != 0 {
                    f |= CF | OF;
                }
                self.set_status(f);
            }
            Ins::Div { w, src } => {
                let d = self.get(src, w) as u64;
                let n = (self.reg(2, w) as u64) << w.bits() | self.reg(0, w) as u64;
                if d == 0 || n / d > w.mask() as u64 {
                    return Err(DivideError);
                }
                self.set_reg(0, w, (n / d) as u32);
                self.set_reg(2, w, (n % d) as u32);
            }
            Ins::Shift {
                kind,
                w,
                dst,
                count,
            } => {
                let n = match count {
                    Count::One => 1,
                    Count::Imm(n) => n as u32,
                    Count::Cl => self.r[1] & 0xFF,
                } & 31;
                if n != 0 {
                    let a = self.get(dst, w);
                    let bits = w.bits();
                    let msb = |v: u32| v & w.msb() != 0;
                    let (r, c, o, arith) = match kind {
                        0 | 1 => {
                            let k = n % bits;
                            let r = if k == 0 {
                                a
                            } else if kind == 0 {
                                (a << k | a >> (bits - k)) & w.mask()
                            } else {
                                (a >> k | a << (bits - k)) & w.mask()
                            };
                            if kind == 0 {
                                let c = r & 1 != 0;
                                (r, c, msb(r) != c, false)
                            } else {
                                (r, msb(r), msb(r) != (r & (w.msb() >> 1) != 0), false)
                            }
                        }
                        4 => {
                            let r = if n >= bits { 0 } else { (a << n) & w.mask() };
                            let c = n <= bits && (a >> (bits - n)) & 1 != 0;
                            (r, c, msb(r) != c, true)
                        }
                        5 => {
                            let r = if n >= bits { 0 } else { a >> n };
                            let c = n <= bits && (a >> (n - 1)) & 1 != 0;
                            (r, c, msb(a), true)
                        }
                        _ => {
                            let neg = msb(a);
                            let fill = if neg { w.mask() } else { 0 };
                            let r = if n >= bits {
                                fill
                            } else {
                                ((a >> n) | (fill << (bits - n))) & w.mask()
                            };
                            let c = if n > bits {
                                neg
                            } else {
                                (a >> (n - 1)) & 1 != 0
                            };
                            (r, c, false, true)
                        }
                    };
                    let mut f = if arith {
                        szp(r, w)
                    } else {
                        self.eflags & (PF | AF | ZF | SF)
                    };
                    if c {
                        f |= CF;
                    }
                    if o {
                        f |= OF;
                    }
                    self.set_status(f);
                    self.put(dst, w, r);
                }
            }
            Ins::Xchg { w, a, b } => {
                let (x, y) = (self.reg(a, w), self.reg(b, w));
                self.set_reg(a, w, y);
                self.set_reg(b, w, x);
            }
            Ins::PushReg(r) => {
                let v = self.r[r as usize];
                self.push(v);
            }
            Ins::PushImm(v) => self.push(v),
            Ins::PushMem(d) => {
                let v = self.load(self.addr(d), W::B32);
                self.push(v);
            }
            Ins::Pop(r) => {
                let v = self.pop();
                self.r[r as usize] = v;
            }
            Ins::Popfd => {
                let v = self.pop();
                let m = CF | PF | AF | ZF | SF | OF | DF;
                self.eflags = (self.eflags & !m) | (v & m);
            }
            Ins::Clc => self.eflags &= !CF,
            Ins::Stc => self.eflags |= CF,
            Ins::Nop => {}
        }
        Ok(())
    }

    /// Runs until the end or the first divide error; returns how many
    /// instructions completed.
    pub fn run(&mut self, prog: &[Ins]) -> (usize, Option<DivideError>) {
        for (k, i) in prog.iter().enumerate() {
            if let Err(e) = self.exec(i) {
                return (k, Some(e));
            }
        }
        (prog.len(), None)
    }
}

/// Registers an instruction may write: everything but ebx and esp.
const WRITABLE: [u8; 6] = [0, 1, 2, 5, 6, 7];

fn pick_w(rng: &mut impl Rng) -> W {
    match rng.gen_range(0..5) {
        0 => W::B8,
        1 => W::B16,
        _ => W::B32,
    }
}

fn dst_reg(rng: &mut impl Rng, w: W) -> u8 {
    if w == W::B8 {
        // al, cl, dl
        rng.gen_range(0..3)
    } else {
        WRITABLE[rng.gen_range(0..WRITABLE.len())]
    }
}

fn src_reg(rng: &mut impl Rng, w: W) -> u8 {
    if w == W::B8 {
        rng.gen_range(0..4)
    } else {
        rng.gen_range(0..8)
    }
}

fn mem(rng: &mut impl Rng) -> u8 {
    rng.gen_range(0..0x7C)
}

fn dst_loc(rng: &mut impl Rng, w: W) -> Loc {
    if rng.gen_bool(0.3) {
        Loc::Mem(mem(rng))
    } else {
        Loc::Reg(dst_reg(rng, w))
    }
}

fn any_loc(rng: &mut impl Rng, w: W) -> Loc {
    if rng.gen_bool(0.3) {
        Loc::Mem(mem(rng))
    } else {
        Loc::Reg(src_reg(rng, w))
    }
}

fn imm_val(rng: &mut impl Rng, w: W) -> u32 {
    let v: u32 = match rng.gen_range(0..4) {
        0 => rng.gen_range(0..4),
        1 => rng.gen::<i8>() as i32 as u32,
        2 => w.msb().wrapping_sub(rng.gen_range(0..2)),
        _ => rng.gen(),
    };
    v & w.mask()
}

/// One random instruction; `depth` is the current push depth so pops never
/// run past the initial stack pointer by more than the page allows.
pub fn random_ins(rng: &mut impl Rng, depth: &mut i32) -> Ins {
    loop {
        let w = pick_w(rng);
        let ins = match rng.gen_range(0..22) {
            0..=5 => {
                let op = rng.gen_range(0..8);
                let dst = dst_loc(rng, w);
                let src = match (dst, rng.gen_range(0..3)) {
                    (_, 0) => Src::Imm(imm_val(rng, w)),
                    (Loc::Reg(_), 1) => Src::Loc(Loc::Mem(mem(rng))),
                    _ => Src::Loc(Loc::Reg(src_reg(rng, w))),
                };
                // cmp never writes, so any register may be its destination
                let dst = match dst {
                    Loc::Reg(_) if op == 7 => Loc::Reg(src_reg(rng, w)),
                    d => d,
                };
                Ins::Alu {
                    op,
                    w,
                    dst,
                    src,
                    short: rng.gen(),
                }
            }
            6 => {
                let dst = any_loc(rng, w);
                let src = if rng.gen() {
                    Src::Imm(imm_val(rng, w))
                } else {
                    Src::Loc(Loc::Reg(src_reg(rng, w)))
                };
                Ins::Test { w, dst, src }
            }
            7 | 8 => {
                let dst = dst_loc(rng, w);
                let src = match (dst, rng.gen_range(0..3)) {
                    (_, 0) => Src::Imm(imm_val(rng, w)),
                    (Loc::Reg(_), 1) => Src::Loc(Loc::Mem(mem(rng))),
                    _ => Src::Loc(Loc::Reg(src_reg(rng, w))),
                };
                Ins::Mov {
                    w,
                    dst,
                    src,
                    short: rng.gen(),
                }
            }
            9 => {
                let w = if rng.gen() { W::B16 } else { W::B32 };
                let sw = if w == W::B16 || rng.gen() {
                    W::B8
                } else {
                    W::B16
                };
                Ins::Movzx {
                    w,
                    sw,
                    dst: dst_reg(rng, w),
                    src: any_loc(rng, sw),
                }
            }
            10 => {
                let index = loop {
                    let i = rng.gen_range(0..8);
                    if i != ESP {
                        break i;
                    }
                };
                Ins::Lea {
                    dst: dst_reg(rng, W::B32),
                    base: rng.gen_range(0..8),
                    index: if rng.gen() { Some(index) } else { None },
                    scale: 1 << rng.gen_range(0..4),
                    disp: rng.gen::<i16>() as i32,
                }
            }
            11 => Ins::Inc {
                w,
                dst: dst_loc(rng, w),
                short: rng.gen(),
            },
            12 => Ins::Dec {
                w,
                dst: dst_loc(rng, w),
                short: rng.gen(),
            },
            13 => {
                if rng.gen() {
                    Ins::Neg {
                        w,
                        dst: dst_loc(rng, w),
                    }
                } else {
                    Ins::Not {
                        w,
                        dst: dst_loc(rng, w),
                    }
                }
            }
            14 => {
                let w = if rng.gen_bool(0.25) { W::B16 } else { W::B32 };
                if rng.gen() {
                    Ins::Mul {
                        w,
                        src: any_loc(rng, w),
                    }
                } else {
                    Ins::Div {
                        w,
                        src: any_loc(rng, w),
                    }
                }
            }
            15 | 16 => {
                let kind = [0, 1, 4, 5, 7][rng.gen_range(0..5)];
                let count = match rng.gen_range(0..3) {
                    0 => Count::One,
                    1 => Count::Imm(rng.gen_range(0..40)),
                    _ => Count::Cl,
                };
                Ins::Shift {
                    kind,
                    w,
                    dst: dst_loc(rng, w),
                    count,
                }
            }
            17 => Ins::Xchg {
                w,
                a: dst_reg(rng, w),
                b: dst_reg(rng, w),
            },
            18 | 19 if *depth < 16 => {
                *depth += 1;
                match rng.gen_range(0..3) {
                    0 => Ins::PushReg(rng.gen_range(0..8)),
                    1 => Ins::PushImm(imm_val(rng, W::B32)),
                    _ => Ins::PushMem(mem(rng)),
                }
            }
            20 if *depth > -16 => {
                *depth -= 1;
                if rng.gen_bool(0.2) {
                    Ins::Popfd
                } else {
                    Ins::Pop(dst_reg(rng, W::B32))
                }
            }
            21 => [Ins::Clc, Ins::Stc, Ins::Nop][rng.gen_range(0..3)],
            _ => continue,
        };
        return ins;
    }
}

pub fn random_program(rng: &mut impl Rng, len: usize) -> Vec<Ins> {
    let mut depth = 0;
    (0..len).map(|_| random_ins(rng, &mut depth)).collect()
}

/// Encodes a program and appends an undecodable byte so execution stops
/// right after the last instruction.
pub fn assemble(prog: &[Ins]) -> (Vec<u8>, u32) {
    let mut code: Vec<u8> = prog.iter().flat_map(|i| i.encode()).collect();
    let end = CODE + code.len() as u32;
    code.push(0xCC);
    (code, end)
}

//! XIR, the cross intermediate representation.
//!
//! Every instruction has the same six fields (`opcode width dst src imm
//! flags`) and serializes to exactly eight bytes:
//!
//! ```text
//! [opcode u8][flags u8][dst u8][src u8][imm i32 little-endian]
//! ```
//!
//! The flags byte carries the access width in bits 0-1 and an opcode
//! modifier in bits 2-6 (the branch condition for `jmp`, the arithmetic
//! bit for `sr`). Bit 7 is reserved and must be zero.

use std::fmt;

use thiserror::Error;

/// Size of one encoded instruction in bytes.
pub const INSTR_BYTES: usize = 8;

pub const BITS_MASK: u8 = 0x03;
const MODIFIER_SHIFT: u8 = 2;
const MODIFIER_MASK: u8 = 0x1f;
const RESERVED_MASK: u8 = 0x80;

/// Register file layout.
pub mod regs {
    /// Always reads zero; a `src` of 0 means "no source register".
    pub const ZERO: u8 = 0;
    /// XIR flag register, x86 EFLAGS bit layout.
    pub const FLAGS: u8 = 1;
    /// Slot written by `fsave` and read by `frestore`.
    pub const SHADOW_FLAGS: u8 = 2;
    /// Interrupt / init status. Reserved.
    pub const STATUS: u8 = 3;
    /// Next guest VA delivered by host handlers after a trap syscall.
    pub const NEXT_PC: u8 = 4;

    pub const SPECIAL_FIRST: u8 = 0;
    pub const SPECIAL_LAST: u8 = 31;
    pub const TEMP_FIRST: u8 = 32;
    pub const TEMP_LAST: u8 = 159;
    pub const GUEST_FIRST: u8 = 160;
    pub const GUEST_LAST: u8 = 255;

    pub const EAX: u8 = 161;
    pub const ECX: u8 = 162;
    pub const EDX: u8 = 163;
    pub const EBX: u8 = 164;
    pub const ESP: u8 = 165;
    pub const EBP: u8 = 166;
    pub const ESI: u8 = 167;
    pub const EDI: u8 = 168;
    pub const EFLAGS: u8 = 169;

    /// XIR register holding the x86 general purpose register with
    /// hardware number `n` (0 = EAX ... 7 = EDI).
    pub const fn gpr(n: u8) -> u8 {
        EAX + n
    }

    pub fn is_temp(r: u8) -> bool {
        (TEMP_FIRST..=TEMP_LAST).contains(&r)
    }

    pub fn is_guest(r: u8) -> bool {
        r >= GUEST_FIRST
    }
}

/// x86 EFLAGS status bits, shared by the VM flag register and the guest
/// EFLAGS register.
pub mod eflags {
    pub const CF: u32 = 1 << 0;
    pub const PF: u32 = 1 << 2;
    pub const AF: u32 = 1 << 4;
    pub const ZF: u32 = 1 << 6;
    pub const SF: u32 = 1 << 7;
    pub const DF: u32 = 1 << 10;
    pub const OF: u32 = 1 << 11;
    pub const STATUS: u32 = CF | PF | AF | ZF | SF | OF;
    /// Bits a guest `popfd` may change.
    pub const POPFD_MASK: u32 = STATUS | DF;
    /// Reserved bit 1 plus IF, the state a fresh process starts with.
    pub const INITIAL: u32 = 0x202;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    Jmp = 0,
    Ret,
    Fsave,
    Frestore,
    Ld,
    St,
    Mv,
    Add,
    Addc,
    Sub,
    Subc,
    Mul,
    Div,
    And,
    Or,
    Xor,
    Not,
    Cmp,
    Rl,
    Rr,
    Sl,
    Sr,
    Syscall,
}

impl Opcode {
    pub const COUNT: usize = 23;

    pub const ALL: [Opcode; Self::COUNT] = [
        Opcode::Jmp,
        Opcode::Ret,
        Opcode::Fsave,
        Opcode::Frestore,
        Opcode::Ld,
        Opcode::St,
        Opcode::Mv,
        Opcode::Add,
        Opcode::Addc,
        Opcode::Sub,
        Opcode::Subc,
        Opcode::Mul,
        Opcode::Div,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Not,
        Opcode::Cmp,
        Opcode::Rl,
        Opcode::Rr,
        Opcode::Sl,
        Opcode::Sr,
        Opcode::Syscall,
    ];

    pub fn from_u8(v: u8) -> Option<Opcode> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Jmp => "JMP",
            Opcode::Ret => "RET",
            Opcode::Fsave => "FSAVE",
            Opcode::Frestore => "FRESTORE",
            Opcode::Ld => "LD",
            Opcode::St => "ST",
            Opcode::Mv => "MV",
            Opcode::Add => "ADD",
            Opcode::Addc => "ADDC",
            Opcode::Sub => "SUB",
            Opcode::Subc => "SUBC",
            Opcode::Mul => "MUL",
            Opcode::Div => "DIV",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Xor => "XOR",
            Opcode::Not => "NOT",
            Opcode::Cmp => "CMP",
            Opcode::Rl => "RL",
            Opcode::Rr => "RR",
            Opcode::Sl => "SL",
            Opcode::Sr => "SR",
            Opcode::Syscall => "SYSCALL",
        }
    }

    /// Control and special opcodes carry no width and always encode B32.
    pub fn is_widthless(self) -> bool {
        matches!(
            self,
            Opcode::Jmp | Opcode::Ret | Opcode::Fsave | Opcode::Frestore | Opcode::Syscall
        )
    }

    /// Opcodes that update the flag register.
    pub fn writes_flags(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Addc
                | Opcode::Sub
                | Opcode::Subc
                | Opcode::Mul
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Cmp
                | Opcode::Rl
                | Opcode::Rr
                | Opcode::Sl
                | Opcode::Sr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Width {
    B8 = 0,
    B16 = 1,
    B32 = 2,
}

impl Width {
    pub fn from_code(code: u8) -> Option<Width> {
        match code {
            0 => Some(Width::B8),
            1 => Some(Width::B16),
            2 => Some(Width::B32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        1 << self as u8
    }

    pub fn bits(self) -> u32 {
        8 << self as u32
    }

    pub fn mask(self) -> u32 {
        match self {
            Width::B8 => 0xff,
            Width::B16 => 0xffff,
            Width::B32 => 0xffff_ffff,
        }
    }

    pub fn sign_bit(self) -> u32 {
        1 << (self.bits() - 1)
    }
}

/// Branch conditions for `jmp`, evaluated against the flag register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Cond {
    Always = 0,
    Eq,
    Ne,
    B,
    Ae,
    Be,
    A,
    S,
    Ns,
    L,
    Ge,
    Le,
    G,
    O,
    No,
    P,
    Np,
}

impl Cond {
    pub const ALL: [Cond; 17] = [
        Cond::Always,
        Cond::Eq,
        Cond::Ne,
        Cond::B,
        Cond::Ae,
        Cond::Be,
        Cond::A,
        Cond::S,
        Cond::Ns,
        Cond::L,
        Cond::Ge,
        Cond::Le,
        Cond::G,
        Cond::O,
        Cond::No,
        Cond::P,
        Cond::Np,
    ];

    pub fn from_u8(v: u8) -> Option<Cond> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn negate(self) -> Cond {
        use Cond::*;
        match self {
            Always => Always,
            Eq => Ne,
            Ne => Eq,
            B => Ae,
            Ae => B,
            Be => A,
            A => Be,
            S => Ns,
            Ns => S,
            L => Ge,
            Ge => L,
            Le => G,
            G => Le,
            O => No,
            No => O,
            P => Np,
            Np => P,
        }
    }

    pub fn holds(self, flags: u32) -> bool {
        use eflags::*;
        let cf = flags & CF != 0;
        let zf = flags & ZF != 0;
        let sf = flags & SF != 0;
        let of = flags & OF != 0;
        let pf = flags & PF != 0;
        match self {
            Cond::Always => true,
            Cond::Eq => zf,
            Cond::Ne => !zf,
            Cond::B => cf,
            Cond::Ae => !cf,
            Cond::Be => cf || zf,
            Cond::A => !cf && !zf,
            Cond::S => sf,
            Cond::Ns => !sf,
            Cond::L => sf != of,
            Cond::Ge => sf == of,
            Cond::Le => zf || sf != of,
            Cond::G => !zf && sf == of,
            Cond::O => of,
            Cond::No => !of,
            Cond::P => pf,
            Cond::Np => !pf,
        }
    }

    fn suffix(self) -> &'static str {
        use Cond::*;
        match self {
            Always => "",
            Eq => ".EQ",
            Ne => ".NE",
            B => ".B",
            Ae => ".AE",
            Be => ".BE",
            A => ".A",
            S => ".S",
            Ns => ".NS",
            L => ".L",
            Ge => ".GE",
            Le => ".LE",
            G => ".G",
            O => ".O",
            No => ".NO",
            P => ".P",
            Np => ".NP",
        }
    }
}

/// Modifier value selecting an arithmetic right shift on `sr`.
pub const SR_ARITHMETIC: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct XirInstr {
    pub opcode: Opcode,
    pub width: Width,
    /// Condition for `jmp`, arithmetic bit for `sr`, zero otherwise.
    pub modifier: u8,
    pub dst: u8,
    pub src: u8,
    pub imm: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum XirError {
    #[error("invalid width code {0}")]
    InvalidWidth(u8),
    #[error("reserved bits set in flags byte {0:#04x}")]
    ReservedBitsSet(u8),
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("{opcode:?} does not use operand {field}")]
    UnusedOperand { opcode: Opcode, field: &'static str },
    #[error("record must be {INSTR_BYTES} bytes, got {0}")]
    BadLength(usize),
}

impl XirInstr {
    pub const fn new(opcode: Opcode, width: Width, dst: u8, src: u8, imm: i32) -> Self {
        XirInstr {
            opcode,
            width,
            modifier: 0,
            dst,
            src,
            imm,
        }
    }

    pub fn flags_byte(&self) -> u8 {
        self.width as u8 | (self.modifier << MODIFIER_SHIFT)
    }

    pub fn cond(&self) -> Option<Cond> {
        if self.opcode == Opcode::Jmp {
            Cond::from_u8(self.modifier)
        } else {
            None
        }
    }

    /// Checks that unused fields are zero and the modifier is legal for
    /// the opcode. Valid instructions have a unique encoding and
    /// rendering.
    pub fn check(&self) -> Result<(), XirError> {
        let op = self.opcode;
        let max_modifier = match op {
            Opcode::Jmp => Cond::Np as u8,
            Opcode::Sr => SR_ARITHMETIC,
            _ => 0,
        };
        if self.modifier > max_modifier {
            return Err(XirError::ReservedBitsSet(self.flags_byte()));
        }
        if op.is_widthless() && self.width != Width::B32 {
            return Err(XirError::UnusedOperand {
                opcode: op,
                field: "width",
            });
        }
        let unused = |field| Err(XirError::UnusedOperand { opcode: op, field });
        match op {
            Opcode::Jmp | Opcode::Syscall => {
                if self.dst != 0 {
                    return unused("dst");
                }
                if self.src != 0 {
                    return unused("src");
                }
            }
            Opcode::Ret => {
                if self.dst != 0 {
                    return unused("dst");
                }
            }
            Opcode::Fsave | Opcode::Frestore => {
                if self.dst != 0 {
                    return unused("dst");
                }
                if self.src != 0 {
                    return unused("src");
                }
                if self.imm != 0 {
                    return unused("imm");
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; INSTR_BYTES], XirError> {
        self.check()?;
        let imm = self.imm.to_le_bytes();
        Ok([
            self.opcode as u8,
            self.flags_byte(),
            self.dst,
            self.src,
            imm[0],
            imm[1],
            imm[2],
            imm[3],
        ])
    }

    pub fn decode(record: &[u8]) -> Result<XirInstr, XirError> {
        let record: &[u8; INSTR_BYTES] = record
            .try_into()
            .map_err(|_| XirError::BadLength(record.len()))?;
        let opcode = Opcode::from_u8(record[0]).ok_or(XirError::UnknownOpcode(record[0]))?;
        let flags = record[1];
        if flags & RESERVED_MASK != 0 {
            return Err(XirError::ReservedBitsSet(flags));
        }
        let width =
            Width::from_code(flags & BITS_MASK).ok_or(XirError::InvalidWidth(flags & BITS_MASK))?;
        let instr = XirInstr {
            opcode,
            width,
            modifier: (flags >> MODIFIER_SHIFT) & MODIFIER_MASK,
            dst: record[2],
            src: record[3],
            imm: i32::from_le_bytes([record[4], record[5], record[6], record[7]]),
        };
        instr.check()?;
        Ok(instr)
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

/// `r<src>±0x<imm>`, or a bare unsigned immediate when there is no source.
fn fmt_operand(f: &mut fmt::Formatter<'_>, src: u8, imm: i32) -> fmt::Result {
    if src == 0 {
        write!(f, "0x{:X}", imm as u32)
    } else {
        write!(f, "r{src}")?;
        fmt_disp(f, imm)
    }
}

fn fmt_disp(f: &mut fmt::Formatter<'_>, imm: i32) -> fmt::Result {
    match imm {
        0 => Ok(()),
        i if i < 0 => write!(f, "-0x{:X}", (i as i64).unsigned_abs()),
        i => write!(f, "+0x{i:X}"),
    }
}

/// `[r<reg>±0x<imm>]`, absolute addresses are zero padded to 8 digits.
fn fmt_address(f: &mut fmt::Formatter<'_>, reg: u8, imm: i32) -> fmt::Result {
    if reg == 0 {
        write!(f, "[0x{:08X}]", imm as u32)
    } else {
        write!(f, "[r{reg}")?;
        fmt_disp(f, imm)?;
        f.write_str("]")
    }
}

impl fmt::Display for XirInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits = self.width.bits();
        match self.opcode {
            Opcode::Jmp => {
                let cond = Cond::from_u8(self.modifier).unwrap_or(Cond::Always);
                write!(f, "JMP{} ", cond.suffix())?;
                if self.imm < 0 {
                    write!(f, "-0x{:X}", (self.imm as i64).unsigned_abs())
                } else {
                    write!(f, "+0x{:X}", self.imm)
                }
            }
            Opcode::Ret => {
                f.write_str("RET ")?;
                fmt_operand(f, self.src, self.imm)
            }
            Opcode::Fsave | Opcode::Frestore => f.write_str(self.opcode.mnemonic()),
            Opcode::Syscall => write!(f, "SYSCALL 0x{:X}", self.imm as u32),
            Opcode::St => {
                write!(f, "ST{bits} ")?;
                fmt_address(f, self.dst, self.imm)?;
                write!(f, ", r{}", self.src)
            }
            Opcode::Ld => {
                write!(f, "LD{bits} r{}, ", self.dst)?;
                fmt_address(f, self.src, self.imm)
            }
            Opcode::Sr if self.modifier == SR_ARITHMETIC => {
                write!(f, "SRA{bits} r{}, ", self.dst)?;
                fmt_operand(f, self.src, self.imm)
            }
            op => {
                write!(f, "{}{bits} r{}, ", op.mnemonic(), self.dst)?;
                fmt_operand(f, self.src, self.imm)
            }
        }
    }
}

/// Execution tier of a cached codeblock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tier {
    #[default]
    Interpreted,
    Compiled,
}

/// Ties a range of XIR instructions back to the guest instruction they
/// were lowered from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpan {
    pub va: u32,
    pub len: u8,
    pub text: String,
    pub first: usize,
    pub count: usize,
}

/// A translated straight-line guest region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub entry_va: u32,
    pub instrs: Vec<XirInstr>,
    pub guest_len: u32,
    pub exec_count: u64,
    pub tier: Tier,
    pub sources: Vec<SourceSpan>,
}

impl CodeBlock {
    pub fn new(entry_va: u32, instrs: Vec<XirInstr>) -> Self {
        CodeBlock {
            entry_va,
            instrs,
            guest_len: 0,
            exec_count: 0,
            tier: Tier::Interpreted,
            sources: Vec::new(),
        }
    }

    /// Guest pages covered by the block's source bytes.
    pub fn pages(&self) -> impl Iterator<Item = u32> {
        let first = self.entry_va >> 12;
        let last = (self.entry_va as u64 + self.guest_len.max(1) as u64 - 1) >> 12;
        (first as u64..=last.min(0xf_ffff)).map(|p| p as u32)
    }

    pub fn encode(&self) -> Result<Vec<u8>, XirError> {
        let mut out = Vec::with_capacity(self.instrs.len() * INSTR_BYTES);
        for i in &self.instrs {
            out.extend_from_slice(&i.encode()?);
        }
        Ok(out)
    }

    /// Two-column `guest -> XIR` listing. `+` marks a line followed by more
    /// XIR for the same guest instruction, `-` the last one.
    pub fn trace(&self) -> String {
        const MARK_COL: usize = 35;
        let mut out = String::new();
        for span in &self.sources {
            let lines = &self.instrs[span.first..span.first + span.count];
            for (k, xi) in lines.iter().enumerate() {
                let mark = if k + 1 == lines.len() { '-' } else { '+' };
                let mut left = format!("{:08X}", span.va);
                if k == 0 {
                    left.push(' ');
                    left.push_str(&span.text);
                    left.push_str("  ");
                    while left.len() < MARK_COL {
                        left.push('-');
                    }
                } else {
                    while left.len() < MARK_COL {
                        left.push(' ');
                    }
                }
                out.push_str(&format!("{left}{mark}  {xi}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    MissingTerminator,
    RetBeforeLast { index: usize },
    JumpOutOfBlock { index: usize, target: i64 },
    PairOverflow { index: usize },
    Invalid { index: usize, error: XirError },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => f.write_str("empty block"),
            Violation::MissingTerminator => f.write_str("missing terminator"),
            Violation::RetBeforeLast { index } => write!(f, "ret before last (index {index})"),
            Violation::JumpOutOfBlock { index, target } => {
                write!(f, "jmp at {index} targets {target}, outside the block")
            }
            Violation::PairOverflow { index } => {
                write!(f, "mul/div at {index} needs dst+1 but dst is r255")
            }
            Violation::Invalid { index, error } => write!(f, "instruction {index}: {error}"),
        }
    }
}

/// Checks codeblock well-formedness, returning every violation found.
///
/// `jmp` at index `i` with immediate `k` continues at index `i + k`.
pub fn validate_block(block: &CodeBlock) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let n = block.instrs.len();
    if n == 0 {
        v.push(Violation::Empty);
    }
    for (i, instr) in block.instrs.iter().enumerate() {
        if let Err(error) = instr.check() {
            v.push(Violation::Invalid { index: i, error });
        }
        match instr.opcode {
            Opcode::Ret if i + 1 < n => v.push(Violation::RetBeforeLast { index: i }),
            Opcode::Jmp => {
                let target = i as i64 + instr.imm as i64;
                if target < 0 || target >= n as i64 {
                    v.push(Violation::JumpOutOfBlock { index: i, target });
                }
            }
            Opcode::Mul | Opcode::Div if instr.dst == 255 => {
                v.push(Violation::PairOverflow { index: i })
            }
            _ => {}
        }
    }
    if n > 0 && block.instrs[n - 1].opcode != Opcode::Ret {
        v.push(Violation::MissingTerminator);
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mv(dst: u8, src: u8, imm: i32) -> XirInstr {
        XirInstr::new(Opcode::Mv, Width::B32, dst, src, imm)
    }

    #[test]
    fn opcode_table_order() {
        assert_eq!(Opcode::Jmp as u8, 0);
        assert_eq!(Opcode::Mv as u8, 6);
        assert_eq!(Opcode::Syscall as u8, 22);
        for (i, op) in Opcode::ALL.iter().enumerate() {
            assert_eq!(*op as usize, i);
        }
    }

    #[test]
    fn golden_mv_encoding() {
        let bytes = mv(165, 165, -4).encode().unwrap();
        assert_eq!(bytes, [0x06, 0x02, 0xA5, 0xA5, 0xFC, 0xFF, 0xFF, 0xFF]);
    }

    #[test]
    fn width_code_three_rejected() {
        let rec = [0x06, 0x03, 1, 0, 0, 0, 0, 0];
        assert_eq!(XirInstr::decode(&rec), Err(XirError::InvalidWidth(3)));
        let rec = [0x06, 0x82, 1, 0, 0, 0, 0, 0];
        assert_eq!(XirInstr::decode(&rec), Err(XirError::ReservedBitsSet(0x82)));
        let mut bad = mv(1, 0, 0);
        bad.modifier = 1;
        assert!(matches!(bad.encode(), Err(XirError::ReservedBitsSet(_))));
    }

    #[test]
    fn decode_errors() {
        assert_eq!(
            XirInstr::decode(&[23, 2, 0, 0, 0, 0, 0, 0]),
            Err(XirError::UnknownOpcode(23))
        );
        assert_eq!(
            XirInstr::decode(&[21, 2, 0, 0, 0, 0, 0, 0]).unwrap().opcode,
            Opcode::Sr
        );
        assert_eq!(XirInstr::decode(&[0; 7]), Err(XirError::BadLength(7)));
        let i = XirInstr::decode(&[6, 2, 1, 0, 0xFC, 0xFF, 0xFF, 0xFF]).unwrap();
        assert_eq!(i.imm, -4);
    }

    #[test]
    fn render_paper_forms() {
        let st = XirInstr::new(Opcode::St, Width::B32, 165, 164, -4);
        assert_eq!(st.render(), "ST32 [r165-0x4], r164");
        assert_eq!(mv(32, 0, 0x10029EB).render(), "MV32 r32, 0x10029EB");
        let ret = XirInstr::new(Opcode::Ret, Width::B32, 0, 0, 0x7DE9FA97u32 as i32);
        assert_eq!(ret.render(), "RET 0x7DE9FA97");
        let ld = XirInstr::new(Opcode::Ld, Width::B32, 32, 0, 0x01001058);
        assert_eq!(ld.render(), "LD32 r32, [0x01001058]");
        assert_eq!(mv(165, 165, -4).render(), "MV32 r165, r165-0x4");
        assert_eq!(mv(32, 0, -1).render(), "MV32 r32, 0xFFFFFFFF");
        assert_eq!(
            XirInstr::new(Opcode::Ret, Width::B32, 0, 32, 0).render(),
            "RET r32"
        );
        let st0 = XirInstr::new(Opcode::St, Width::B32, 165, 32, 0);
        assert_eq!(st0.render(), "ST32 [r165], r32");
        let mut sra = XirInstr::new(Opcode::Sr, Width::B8, 161, 0, 3);
        sra.modifier = SR_ARITHMETIC;
        assert_eq!(sra.render(), "SRA8 r161, 0x3");
    }

    #[test]
    fn validate_examples() {
        let ok = CodeBlock::new(
            0,
            vec![
                mv(32, 0, 1),
                XirInstr::new(Opcode::Ret, Width::B32, 0, 32, 0),
            ],
        );
        assert!(validate_block(&ok).is_ok());

        let bad = CodeBlock::new(
            0,
            vec![
                XirInstr::new(Opcode::Ret, Width::B32, 0, 0, 0),
                mv(32, 0, 1),
            ],
        );
        let v = validate_block(&bad).unwrap_err();
        assert!(v.contains(&Violation::RetBeforeLast { index: 0 }));
        assert!(v.contains(&Violation::MissingTerminator));
        assert!(v
            .iter()
            .any(|x| x.to_string() == "ret before last (index 0)"));

        let bad = CodeBlock::new(0, vec![mv(32, 0, 1)]);
        assert_eq!(
            validate_block(&bad).unwrap_err(),
            vec![Violation::MissingTerminator]
        );

        let mut j = XirInstr::new(Opcode::Jmp, Width::B32, 0, 0, 5);
        j.modifier = Cond::Eq as u8;
        let bad = CodeBlock::new(0, vec![j, XirInstr::new(Opcode::Ret, Width::B32, 0, 0, 0)]);
        assert_eq!(
            validate_block(&bad).unwrap_err(),
            vec![Violation::JumpOutOfBlock {
                index: 0,
                target: 5
            }]
        );
    }

    fn arb_instr() -> impl Strategy<Value = XirInstr> {
        (
            0usize..Opcode::COUNT,
            0u8..3,
            any::<u8>(),
            any::<u8>(),
            any::<i32>(),
            0u8..17,
        )
            .prop_map(|(op, w, dst, src, imm, m)| {
                let opcode = Opcode::ALL[op];
                let mut i = XirInstr::new(opcode, Width::from_code(w).unwrap(), dst, src, imm);
                if opcode.is_widthless() {
                    i.width = Width::B32;
                }
                match opcode {
                    Opcode::Jmp => {
                        i.modifier = m;
                        i.dst = 0;
                        i.src = 0;
                    }
                    Opcode::Syscall => {
                        i.dst = 0;
                        i.src = 0;
                    }
                    Opcode::Ret => i.dst = 0,
                    Opcode::Fsave | Opcode::Frestore => {
                        i.dst = 0;
                        i.src = 0;
                        i.imm = 0;
                    }
                    Opcode::Sr => i.modifier = m & 1,
                    _ => {}
                }
                i
            })
    }

    proptest! {
        #[test]
        fn encode_roundtrip(i in arb_instr()) {
            let bytes = i.encode().unwrap();
            prop_assert_eq!(bytes.len(), INSTR_BYTES);
            prop_assert_eq!(XirInstr::decode(&bytes).unwrap(), i);
        }

        #[test]
        fn render_injective(a in arb_instr(), b in arb_instr()) {
            if a != b {
                prop_assert_ne!(a.render(), b.render());
            }
        }

        #[test]
        fn block_bytes_are_eight_per_instr(v in proptest::collection::vec(arb_instr(), 0..40)) {
            let b = CodeBlock::new(0, v.clone());
            prop_assert_eq!(b.encode().unwrap().len(), 8 * v.len());
        }
    }
}

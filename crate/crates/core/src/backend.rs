//! Second-tier execution backends.
//!
//! A backend turns a hot codeblock into an executable form once; the
//! engine then runs that form instead of interpreting the block. The
//! shipped backend pre-resolves opcode dispatch, condition codes, jump
//! targets and operand shapes into a flat op list. Every op delegates its
//! semantics to the interpreter's own helpers, so the two tiers cannot
//! drift apart.

use crate::metrics::Counter;
use crate::vm::{alu, div_pair, mul_pair, BlockExit, ExecCtx, Fault, FaultKind};
use crate::xir::{regs, CodeBlock, Cond, Opcode, Width, XirInstr};

/// Executable form of one block.
pub trait CompiledCode {
    /// Runs from instruction index `start` until the block exits. With
    /// `probes` false, probe sites are skipped entirely.
    fn run(&self, ctx: &mut ExecCtx<'_>, start: usize, probes: bool) -> BlockExit;
}

pub trait Backend {
    fn name(&self) -> &'static str;
    fn compile(&mut self, block: &CodeBlock) -> Box<dyn CompiledCode>;
}

#[derive(Debug, Clone, Copy)]
enum Op {
    MvImm {
        dst: u8,
        val: u32,
    },
    MvReg32 {
        dst: u8,
        src: u8,
        imm: u32,
    },
    Generic(XirInstr),
    Alu {
        op: Opcode,
        w: Width,
        modifier: u8,
        dst: u8,
        src: u8,
        imm: u32,
    },
    Ld {
        w: Width,
        dst: u8,
        src: u8,
        imm: u32,
    },
    St {
        w: Width,
        dst: u8,
        src: u8,
        imm: u32,
    },
    Goto(usize),
    GotoIf {
        cond: Cond,
        target: usize,
    },
    RetImm(u32),
    RetReg {
        src: u8,
        imm: u32,
    },
    Syscall(u32),
    Mul {
        w: Width,
        dst: u8,
        src: u8,
        imm: u32,
    },
    Div {
        w: Width,
        dst: u8,
        src: u8,
        imm: u32,
    },
}

/// Portable backend: block -> pre-decoded op list.
#[derive(Debug, Default)]
pub struct Predecoded;

struct PredecodedBlock {
    ops: Vec<Op>,
}

fn predecode(i: &XirInstr, idx: usize) -> Op {
    let imm = i.imm as u32;
    let (dst, src, w) = (i.dst, i.src, i.width);
    match i.opcode {
        Opcode::Mv if w == Width::B32 && dst != regs::FLAGS && src == 0 => {
            Op::MvImm { dst, val: imm }
        }
        Opcode::Mv if w == Width::B32 && dst != regs::FLAGS => Op::MvReg32 { dst, src, imm },
        Opcode::Jmp => {
            let target = idx.wrapping_add_signed(i.imm as isize);
            match Cond::from_u8(i.modifier).unwrap_or(Cond::Always) {
                Cond::Always => Op::Goto(target),
                cond => Op::GotoIf { cond, target },
            }
        }
        Opcode::Ret if src == 0 => Op::RetImm(imm),
        Opcode::Ret => Op::RetReg { src, imm },
        Opcode::Syscall => Op::Syscall(imm),
        Opcode::Ld => Op::Ld { w, dst, src, imm },
        Opcode::St => Op::St { w, dst, src, imm },
        Opcode::Mul => Op::Mul { w, dst, src, imm },
        Opcode::Div => Op::Div { w, dst, src, imm },
        Opcode::Fsave | Opcode::Frestore | Opcode::Mv | Opcode::Not => Op::Generic(*i),
        op => Op::Alu {
            op,
            w,
            modifier: i.modifier,
            dst,
            src,
            imm,
        },
    }
}

impl Backend for Predecoded {
    fn name(&self) -> &'static str {
        "predecoded"
    }

    fn compile(&mut self, block: &CodeBlock) -> Box<dyn CompiledCode> {
        let ops = block
            .instrs
            .iter()
            .enumerate()
            .map(|(k, i)| predecode(i, k))
            .collect();
        Box::new(PredecodedBlock { ops })
    }
}

impl PredecodedBlock {
    #[inline(always)]
    fn exec<const PROBES: bool>(&self, ctx: &mut ExecCtx<'_>, start: usize) -> BlockExit {
        let mut pc = start;
        loop {
            let Some(op) = self.ops.get(pc) else {
                return BlockExit::Fault(Fault {
                    kind: FaultKind::UnmappedFetch,
                    addr: ctx.state.pc,
                    size: 0,
                });
            };
            ctx.counters.bump(Counter::InstrsInterpreted, 1);
            match *op {
                Op::MvImm { dst, val } => ctx.state.set(dst, val),
                Op::MvReg32 { dst, src, imm } => {
                    let v = ctx.state.regs[src as usize].wrapping_add(imm);
                    ctx.state.set(dst, v);
                }
                Op::Alu {
                    op,
                    w,
                    modifier,
                    dst,
                    src,
                    imm,
                } => {
                    let a = ctx.state.regs[dst as usize] & w.mask();
                    let b = ctx.state.regs[src as usize].wrapping_add(imm) & w.mask();
                    let o = alu(op, w, modifier, a, b, ctx.state.regs[regs::FLAGS as usize]);
                    ctx.state.set(regs::FLAGS, o.flags);
                    if o.write {
                        ctx.state.set_width(dst, w, o.value);
                    }
                }
                Op::Ld { w, dst, src, imm } => {
                    let addr = ctx.state.regs[src as usize].wrapping_add(imm);
                    match ctx.load(addr, w) {
                        Ok(v) => ctx.state.set(dst, v),
                        Err(f) => return BlockExit::Fault(f),
                    }
                }
                Op::St { w, dst, src, imm } => {
                    let addr = ctx.state.regs[dst as usize].wrapping_add(imm);
                    let v = ctx.state.regs[src as usize] & w.mask();
                    if let Err(f) = ctx.store::<PROBES>(addr, w, v) {
                        return BlockExit::Fault(f);
                    }
                }
                Op::Goto(t) => {
                    pc = t;
                    continue;
                }
                Op::GotoIf { cond, target } => {
                    if cond.holds(ctx.state.regs[regs::FLAGS as usize]) {
                        pc = target;
                        continue;
                    }
                }
                Op::RetImm(v) => return BlockExit::NextVa(v),
                Op::RetReg { src, imm } => {
                    return BlockExit::NextVa(ctx.state.regs[src as usize].wrapping_add(imm))
                }
                Op::Syscall(id) => return BlockExit::Syscall { id, resume: pc + 1 },
                Op::Mul { w, dst, src, imm } => {
                    let a = ctx.state.regs[dst as usize] & w.mask();
                    let b = ctx.state.regs[src as usize].wrapping_add(imm) & w.mask();
                    let (lo, hi, f) = mul_pair(w, a, b, ctx.state.regs[regs::FLAGS as usize]);
                    ctx.state.set(regs::FLAGS, f);
                    ctx.state.set_width(dst, w, lo);
                    ctx.state.set_width(dst.wrapping_add(1), w, hi);
                }
                Op::Div { w, dst, src, imm } => {
                    let lo = ctx.state.regs[dst as usize] & w.mask();
                    let hi = ctx.state.regs[dst.wrapping_add(1) as usize] & w.mask();
                    let d = ctx.state.regs[src as usize].wrapping_add(imm) & w.mask();
                    let Some((q, r)) = div_pair(w, lo, hi, d) else {
                        return BlockExit::Fault(Fault {
                            kind: FaultKind::DivideError,
                            addr: ctx.state.pc,
                            size: 0,
                        });
                    };
                    ctx.state.set_width(dst, w, q);
                    ctx.state.set_width(dst.wrapping_add(1), w, r);
                }
                Op::Generic(i) => match ctx.step::<PROBES>(&i, pc) {
                    Ok(crate::vm::Flow::Next) => {}
                    Ok(_) => unreachable!("generic ops never transfer control"),
                    Err(f) => return BlockExit::Fault(f),
                },
            }
            pc += 1;
        }
    }
}

impl CompiledCode for PredecodedBlock {
    fn run(&self, ctx: &mut ExecCtx<'_>, start: usize, probes: bool) -> BlockExit {
        if probes {
            self.exec::<true>(ctx, start)
        } else {
            self.exec::<false>(ctx, start)
        }
    }
}

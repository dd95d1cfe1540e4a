//! IA-32 front end: decoder, lowering and block translation.

pub mod decode;
pub mod lower;

use thiserror::Error;

use crate::mmu::Mmu;
use crate::xir::{CodeBlock, SourceSpan};

pub use decode::{decode_guest, GuestInstr, MemRef, Mnemonic, Operand};
pub use lower::{sys, Emitter, TempAllocator};

/// Default cap on guest instructions per block.
pub const DEFAULT_MAX_BLOCK_INSTRS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranslateError {
    #[error("unmapped fetch at 0x{0:08X}")]
    UnmappedFetch(u32),
    #[error("unsupported instruction at 0x{va:08X} (bytes {})", hex(bytes))]
    Unsupported { va: u32, bytes: Vec<u8> },
    #[error("temporary registers exhausted")]
    TempExhausted,
    #[error("temporary leaked while lowering 0x{0:08X}")]
    TempLeak(u32),
}

impl TranslateError {
    /// Guest address the error refers to, when there is one.
    pub fn va(&self) -> Option<u32> {
        match self {
            TranslateError::UnmappedFetch(va) | TranslateError::TempLeak(va) => Some(*va),
            TranslateError::Unsupported { va, .. } => Some(*va),
            TranslateError::TempExhausted => None,
        }
    }
}

fn hex(b: &[u8]) -> String {
    b.iter()
        .map(|x| format!("{x:02X}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Translates guest code at `va` into one codeblock.
///
/// The block ends after the first control transfer or after
/// `max_instrs` guest instructions. When an instruction after the first
/// cannot be decoded the block ends just before it, so the error surfaces
/// only if execution actually gets there.
pub fn translate(mmu: &Mmu, va: u32, max_instrs: usize) -> Result<CodeBlock, TranslateError> {
    let mut em = Emitter::new();
    let mut sources = Vec::new();
    let mut pc = va;
    let mut ended = false;
    for k in 0..max_instrs.max(1) {
        let g = match decode_guest(mmu, pc) {
            Ok(g) => g,
            Err(e) if k == 0 => return Err(e),
            Err(_) => break,
        };
        let first = em.out.len();
        let mark = em.out.len();
        match em.lower(&g) {
            Ok(end) => ended = end,
            Err(e) if k == 0 => return Err(e),
            Err(_) => {
                em.out.truncate(mark);
                break;
            }
        }
        pc = g.next_va();
        sources.push(SourceSpan {
            va: g.va,
            len: g.len,
            text: g.text(),
            first,
            count: em.out.len() - first,
        });
        if ended {
            break;
        }
    }
    if !ended {
        let first = em.out.len();
        em.fall_through(pc);
        // attach the terminator to the last guest line for the trace
        if let Some(last) = sources.last_mut() {
            last.count += em.out.len() - first;
        }
    }
    let mut block = CodeBlock::new(va, em.out);
    block.guest_len = pc.wrapping_sub(va);
    block.sources = sources;
    Ok(block)
}

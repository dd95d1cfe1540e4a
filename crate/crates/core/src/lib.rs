//! IA-32 to XIR dynamic binary translation with a tiered interpreter,
//! software MMU, virtual file system, PE loader, probe framework and a
//! deterministic stopping model.
//!
//! Guest code is decoded and lowered block by block ([`x86::translate`])
//! into fixed-width [`xir`] instructions, which the [`vm`] interpreter runs
//! against a [`vm::MachineState`] and an [`mmu::Mmu`]. The [`engine`] ties
//! these together with a block cache, a second execution tier and the
//! syscall escape used for x87 and Windows API shims.

pub mod backend;
pub mod config;
pub mod engine;
pub mod loader;
pub mod metrics;
pub mod mmu;
pub mod probes;
pub mod vfs;
pub mod vm;
pub mod x86;
pub mod xir;

pub use config::{ConfigError, ConfigStore, LogModule, Logger, Value};
pub use engine::{CacheStrategy, Engine, Machine, StopReason};
pub use loader::{LoadError, LoadedImage};
pub use metrics::{Counter, CounterSet, MetricModel, MetricsError};
pub use mmu::{Mmu, MmuError, PAGE_SIZE};
pub use probes::{ProbeContext, ProbeError, Probes, Verdict};
pub use vfs::{Vfs, VfsError};
pub use vm::{BlockExit, Fault, FaultKind, MachineState};
pub use x86::{translate, TranslateError};
pub use xir::{CodeBlock, Cond, Opcode, Width, XirInstr};

//! The execution engine: fetch, translate or reuse, tier up, execute.
//!
//! Blocks are cached by entry VA and indexed by every guest page their
//! source bytes span, so a guest store into code evicts exactly the
//! blocks it may have changed. Stop conditions (metric threshold,
//! breakpoints, guest exit, faults) are checked at block boundaries only,
//! which keeps stops deterministic.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::num::NonZeroUsize;
use std::rc::Rc;

use lru::LruCache;

use crate::backend::{Backend, CompiledCode, Predecoded};
use crate::config::{
    ConfigError, ConfigStore, LogModule, Logger, Value, LEVEL_DEBUG, LEVEL_INFO, LOG_MODULES,
};
use crate::metrics::{Counter, CounterSet, MetricModel};
use crate::mmu::{Mmu, PAGE_BITS};
use crate::probes::{self, ProbeContext, Probes, Verdict};
use crate::vfs::Vfs;
use crate::vm::{run_block, BlockExit, ExecCtx, Fault, FaultKind, MachineState};
use crate::x86::{self, sys, TranslateError};
use crate::xir::{CodeBlock, Tier};

/// Why a run returned.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    GuestExit(u32),
    MetricThreshold(f64),
    /// A block-enter or step consumer asked to stop before `va` ran.
    Breakpoint(u32),
    /// A memory-write consumer asked to stop; `pc` is where execution
    /// resumes.
    Watchpoint {
        pc: u32,
    },
    Fault(Fault),
    UnsupportedInstruction {
        va: u32,
        bytes: Vec<u8>,
    },
    UnknownSyscall(u32),
    /// A host handler failed.
    HandlerError {
        id: u32,
        message: String,
    },
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::GuestExit(c) => write!(f, "guest exited with code {c}"),
            StopReason::MetricThreshold(m) => write!(f, "metric threshold reached ({m:.3})"),
            StopReason::Breakpoint(va) => write!(f, "breakpoint at 0x{va:08X}"),
            StopReason::Watchpoint { pc } => write!(f, "watchpoint hit, pc 0x{pc:08X}"),
            StopReason::Fault(x) => write!(f, "fault: {x}"),
            StopReason::UnsupportedInstruction { va, bytes } => {
                let hex: Vec<String> = bytes.iter().map(|b| format!("{b:02X}")).collect();
                write!(
                    f,
                    "unsupported instruction at 0x{va:08X} ({})",
                    hex.join(" ")
                )
            }
            StopReason::UnknownSyscall(id) => write!(f, "unknown syscall 0x{id:X}"),
            StopReason::HandlerError { id, message } => {
                write!(f, "syscall 0x{id:X} failed: {message}")
            }
        }
    }
}

/// x87 side state: eight slots addressed relative to `top`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fpu {
    pub slots: [f64; 8],
    pub top: usize,
}

impl Default for Fpu {
    fn default() -> Self {
        Fpu {
            slots: [0.0; 8],
            top: 0,
        }
    }
}

impl Fpu {
    /// ST(i).
    pub fn st(&self, i: usize) -> f64 {
        self.slots[(self.top + i) % 8]
    }

    pub fn set_st(&mut self, i: usize, v: f64) {
        self.slots[(self.top + i) % 8] = v;
    }

    pub fn push(&mut self, v: f64) {
        self.top = (self.top + 7) % 8;
        self.slots[self.top] = v;
    }

    pub fn pop(&mut self) -> f64 {
        let v = self.slots[self.top];
        self.top = (self.top + 1) % 8;
        v
    }
}

/// A module visible to the guest (main image, DLL, or the shim pseudo
/// module).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModuleInfo {
    pub name: String,
    pub base: u32,
    pub entry: u32,
    /// Lowercase export name -> VA.
    pub exports: BTreeMap<String, u32>,
}

/// Guest operating-system side state used by host handlers.
#[derive(Debug, Default)]
pub struct OsState {
    pub vfs: Option<Vfs>,
    /// Bytes written to the guest's standard output.
    pub stdout: Vec<u8>,
    /// Lowercase module name -> module.
    pub modules: BTreeMap<String, ModuleInfo>,
    /// Key of the main executable in `modules`.
    pub main: Option<String>,
    /// Virtual clock in milliseconds, advanced per query.
    pub ticks: u64,
    pub exit_code: Option<u32>,
}

/// What a host handler sees.
pub struct SysEnv<'a> {
    pub state: &'a mut MachineState,
    pub mmu: &'a mut Mmu,
    pub fpu: &'a mut Fpu,
    pub os: &'a mut OsState,
    pub counters: &'a mut CounterSet,
    pub probes: &'a mut Probes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SysAction {
    Continue,
    Exit(u32),
}

pub type SyscallHandler = Box<dyn FnMut(&mut SysEnv<'_>) -> Result<SysAction, String>>;

/// Everything a run mutates besides the block cache.
#[derive(Debug, Default)]
pub struct Machine {
    pub state: MachineState,
    pub mmu: Mmu,
    pub counters: CounterSet,
    pub probes: Probes,
    pub fpu: Fpu,
    pub os: OsState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStrategy {
    /// No caching: every block entry is translated afresh.
    Off,
    Unbounded,
    Lru(usize),
}

struct Entry {
    block: CodeBlock,
    compiled: Option<Box<dyn CompiledCode>>,
}

enum Store {
    Off,
    Unbounded(HashMap<u32, Entry>),
    Lru(LruCache<u32, Entry>),
}

/// Entry VA -> block, plus page -> entry VAs.
pub struct BlockCache {
    store: Store,
    page_index: HashMap<u32, BTreeSet<u32>>,
}

impl BlockCache {
    pub fn new(strategy: CacheStrategy) -> Self {
        let store = match strategy {
            CacheStrategy::Off => Store::Off,
            CacheStrategy::Unbounded => Store::Unbounded(HashMap::new()),
            CacheStrategy::Lru(n) => {
                Store::Lru(LruCache::new(NonZeroUsize::new(n.max(1)).unwrap()))
            }
        };
        BlockCache {
            store,
            page_index: HashMap::new(),
        }
    }

    pub fn strategy(&self) -> CacheStrategy {
        match &self.store {
            Store::Off => CacheStrategy::Off,
            Store::Unbounded(_) => CacheStrategy::Unbounded,
            Store::Lru(c) => CacheStrategy::Lru(c.cap().get()),
        }
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Off => 0,
            Store::Unbounded(m) => m.len(),
            Store::Lru(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, va: u32) -> bool {
        match &self.store {
            Store::Off => false,
            Store::Unbounded(m) => m.contains_key(&va),
            Store::Lru(c) => c.contains(&va),
        }
    }

    fn get_mut(&mut self, va: u32) -> Option<&mut Entry> {
        match &mut self.store {
            Store::Off => None,
            Store::Unbounded(m) => m.get_mut(&va),
            Store::Lru(c) => c.get_mut(&va),
        }
    }

    pub fn block(&self, va: u32) -> Option<&CodeBlock> {
        match &self.store {
            Store::Off => None,
            Store::Unbounded(m) => m.get(&va).map(|e| &e.block),
            Store::Lru(c) => c.peek(&va).map(|e| &e.block),
        }
    }

    /// Cached entry VAs in ascending order.
    pub fn vas(&self) -> Vec<u32> {
        let mut v: Vec<u32> = match &self.store {
            Store::Off => Vec::new(),
            Store::Unbounded(m) => m.keys().copied().collect(),
            Store::Lru(c) => c.iter().map(|(k, _)| *k).collect(),
        };
        v.sort_unstable();
        v
    }

    fn unindex(&mut self, block: &CodeBlock) {
        for p in block.pages() {
            if let Some(set) = self.page_index.get_mut(&p) {
                set.remove(&block.entry_va);
                if set.is_empty() {
                    self.page_index.remove(&p);
                }
            }
        }
    }

    /// Inserts a block; returns entry VAs evicted to make room.
    fn insert(&mut self, entry: Entry) -> Vec<u32> {
        let va = entry.block.entry_va;
        let pages: Vec<u32> = entry.block.pages().collect();
        let old = match &mut self.store {
            Store::Off => return Vec::new(),
            Store::Unbounded(m) => m.insert(va, entry).map(|e| (va, e)),
            Store::Lru(c) => c.push(va, entry),
        };
        let mut evicted = Vec::new();
        if let Some((k, e)) = old {
            self.unindex(&e.block);
            if k != va {
                evicted.push(k);
            }
        }
        for p in pages {
            self.page_index.entry(p).or_default().insert(va);
        }
        evicted
    }

    fn remove(&mut self, va: u32) -> bool {
        let e = match &mut self.store {
            Store::Off => None,
            Store::Unbounded(m) => m.remove(&va),
            Store::Lru(c) => c.pop(&va),
        };
        match e {
            Some(e) => {
                self.unindex(&e.block);
                true
            }
            None => false,
        }
    }

    /// Evicts every block overlapping one of `pages`.
    pub fn invalidate_pages(&mut self, pages: &[u32]) -> usize {
        let mut victims = BTreeSet::new();
        for p in pages {
            if let Some(set) = self.page_index.get(p) {
                victims.extend(set.iter().copied());
            }
        }
        victims.into_iter().filter(|va| self.remove(*va)).count()
    }

    /// Evicts every block overlapping a page of `[start, start + len)`.
    pub fn invalidate_range(&mut self, start: u32, len: u32) -> usize {
        if len == 0 {
            return 0;
        }
        let first = start >> PAGE_BITS;
        let last = ((start as u64 + len as u64 - 1) >> PAGE_BITS).min(0xF_FFFF) as u32;
        let pages: Vec<u32> = (first..=last).collect();
        self.invalidate_pages(&pages)
    }

    pub fn clear(&mut self) {
        *self = BlockCache::new(self.strategy());
    }

    /// Switches strategy, keeping as many blocks as fit.
    pub fn set_strategy(&mut self, strategy: CacheStrategy) {
        if strategy == self.strategy() {
            return;
        }
        let old = std::mem::replace(&mut self.store, Store::Off);
        self.page_index.clear();
        let entries: Vec<Entry> = match old {
            Store::Off => Vec::new(),
            Store::Unbounded(m) => {
                let mut v: Vec<(u32, Entry)> = m.into_iter().collect();
                v.sort_by_key(|(k, _)| *k);
                v.into_iter().map(|(_, e)| e).collect()
            }
            // least recently used first, so re-insertion keeps recency
            Store::Lru(c) => c
                .into_iter()
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .map(|(_, e)| e)
                .collect(),
        };
        *self = BlockCache::new(strategy);
        for e in entries {
            self.insert(e);
        }
    }

    pub fn pages_indexed(&self) -> usize {
        self.page_index.len()
    }
}

/// Engine-level bookkeeping that is not a guest-visible counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    /// Translator invocations.
    pub translations: u64,
    pub cache_hits: u64,
    pub compilations: u64,
    pub evictions: u64,
    pub invalidated: u64,
}

enum Slot {
    Cached(u32),
    Owned(Box<CodeBlock>),
}

pub struct Engine {
    pub machine: Machine,
    cache: BlockCache,
    backend: Option<Box<dyn Backend>>,
    syscalls: HashMap<u32, SyscallHandler>,
    config: ConfigStore,
    pub log: Logger,
    pub model: MetricModel,
    pub stats: EngineStats,
    tier_threshold: u64,
    max_block_instrs: usize,
    slow_path_only: bool,
    step_mode: Rc<Cell<bool>>,
    /// Block stopped at by a breakpoint, run on resume without re-firing
    /// the enter probe.
    pending: Option<Slot>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("pc", &format_args!("0x{:08X}", self.machine.state.pc))
            .field("cached", &self.cache.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl Engine {
    /// Fresh engine with default configuration, the standard probe set and
    /// the FPU escape handlers.
    pub fn new() -> Self {
        let config = ConfigStore::new();
        let mut machine = Machine {
            probes: Probes::with_standard_set(),
            ..Default::default()
        };
        let step_mode = Rc::new(Cell::new(false));
        let flag = step_mode.clone();
        machine
            .probes
            .set_enabler(probes::STEP_MODE, Box::new(move |on| flag.set(on)))
            .expect("standard probe");
        let mut e = Engine {
            machine,
            cache: BlockCache::new(CacheStrategy::Unbounded),
            backend: None,
            syscalls: HashMap::new(),
            config,
            log: Logger::new(),
            model: MetricModel::default(),
            stats: EngineStats::default(),
            tier_threshold: 16,
            max_block_instrs: x86::DEFAULT_MAX_BLOCK_INSTRS,
            slow_path_only: false,
            step_mode,
            pending: None,
        };
        e.register_fpu_handlers();
        e.apply_config().expect("defaults are valid");
        e
    }

    fn register_fpu_handlers(&mut self) {
        self.register_syscall(
            sys::FABS,
            Box::new(|env| {
                let v = env.fpu.st(0);
                if !v.is_nan() {
                    env.fpu.set_st(0, v.abs());
                }
                Ok(SysAction::Continue)
            }),
        );
        self.register_syscall(
            sys::FCHS,
            Box::new(|env| {
                let v = env.fpu.st(0);
                env.fpu.set_st(0, -v);
                Ok(SysAction::Continue)
            }),
        );
        self.register_syscall(
            sys::FSQRT,
            Box::new(|env| {
                let v = env.fpu.st(0);
                env.fpu.set_st(0, v.sqrt());
                Ok(SysAction::Continue)
            }),
        );
        self.register_syscall(
            sys::FLD1,
            Box::new(|env| {
                env.fpu.push(1.0);
                Ok(SysAction::Continue)
            }),
        );
    }

    pub fn register_syscall(&mut self, id: u32, handler: SyscallHandler) {
        self.syscalls.insert(id, handler);
    }

    pub fn unregister_syscall(&mut self, id: u32) -> bool {
        self.syscalls.remove(&id).is_some()
    }

    pub fn has_syscall(&self, id: u32) -> bool {
        self.syscalls.contains_key(&id)
    }

    pub fn config(&self) -> &ConfigStore {
        &self.config
    }

    /// Sets a configuration key; takes effect before the next block.
    pub fn set_config(&mut self, key: &str, value: impl Into<Value>) -> Result<(), ConfigError> {
        self.config.set(key, value)?;
        self.apply_config()
    }

    /// Like [`Engine::set_config`] with the value parsed from text.
    pub fn set_config_str(&mut self, key: &str, text: &str) -> Result<(), ConfigError> {
        self.config.set_str(key, text)?;
        self.apply_config()
    }

    fn apply_config(&mut self) -> Result<(), ConfigError> {
        let c = &self.config;
        for m in LOG_MODULES {
            let module = LogModule::from_name(m).expect("known module");
            self.log
                .set_level(module, c.get_int(&format!("log.{m}")) as u8);
        }
        self.tier_threshold = c.get_int("engine.tier_threshold") as u64;
        self.max_block_instrs = c.get_int("engine.max_block_instrs") as usize;
        let strategy = match c.get_str("engine.cache").as_str() {
            "lru" => CacheStrategy::Lru(c.get_int("engine.cache_capacity") as usize),
            "none" => CacheStrategy::Off,
            _ => CacheStrategy::Unbounded,
        };
        self.cache.set_strategy(strategy);
        match c.get_str("engine.backend").as_str() {
            "none" => self.backend = None,
            _ if self.backend.is_none() => self.backend = Some(Box::new(Predecoded)),
            _ => {}
        }
        self.model.threshold = c.get_float("stop.threshold_metrics");
        self.model.platform_speed = c.get_float("stop.metrics_per_second");
        let weights = c.get_str("stop.weights");
        if !weights.trim().is_empty() {
            let parsed: Result<Vec<f64>, _> = weights
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect();
            match parsed {
                Ok(w) if w.len() == CounterSet::LEN => self.model.weights = w,
                _ => {
                    return Err(ConfigError::OutOfRange {
                        key: "stop.weights".into(),
                        value: weights,
                    });
                }
            }
        }
        self.machine
            .mmu
            .set_enforce_protection(c.get_bool("mmu.enforce_protection"));
        self.slow_path_only = c.get_bool("mmu.slow_path_only");
        Ok(())
    }

    /// Replaces the second-tier backend (`None` disables tiering).
    pub fn set_backend(&mut self, backend: Option<Box<dyn Backend>>) {
        self.backend = backend;
    }

    pub fn backend_name(&self) -> Option<&'static str> {
        self.backend.as_ref().map(|b| b.name())
    }

    pub fn cache(&self) -> &BlockCache {
        &self.cache
    }

    pub fn step_mode(&self) -> bool {
        self.step_mode.get()
    }

    /// Current value of the stopping metric.
    pub fn metric(&self) -> f64 {
        self.model.metric(&self.machine.counters)
    }

    /// Drops any block held from a previous breakpoint stop.
    pub fn clear_pending(&mut self) {
        self.pending = None;
    }

    fn translate_now(&mut self, va: u32, max: usize) -> Result<CodeBlock, StopReason> {
        self.stats.translations += 1;
        let block =
            x86::translate(&self.machine.mmu, va, max).map_err(|e| self.translate_stop(va, e))?;
        self.machine.counters.bump(Counter::BlocksTranslated, 1);
        if self.log.enabled(LogModule::Ir, LEVEL_INFO) {
            self.log.emit("DEBUG", LogModule::Ir, "Source -> IR:");
            for line in block.trace().lines() {
                self.log.raw(line);
            }
        }
        Ok(block)
    }

    fn translate_stop(&self, va: u32, e: TranslateError) -> StopReason {
        match e {
            TranslateError::UnmappedFetch(a) => StopReason::Fault(Fault {
                kind: FaultKind::UnmappedFetch,
                addr: a,
                size: 0,
            }),
            TranslateError::Unsupported { va, bytes } => {
                StopReason::UnsupportedInstruction { va, bytes }
            }
            TranslateError::TempExhausted | TranslateError::TempLeak(_) => {
                let bytes = (0..4)
                    .map_while(|k| self.machine.mmu.read_u8(va.wrapping_add(k)).ok())
                    .collect();
                StopReason::UnsupportedInstruction { va, bytes }
            }
        }
    }

    /// Returns the cached block at `va`, translating and caching on a miss.
    /// With caching off the block is translated but not kept.
    pub fn lookup_or_translate(&mut self, va: u32) -> Result<CodeBlock, StopReason> {
        if let Some(e) = self.cache.get_mut(va) {
            self.stats.cache_hits += 1;
            return Ok(e.block.clone());
        }
        let block = self.translate_now(va, self.max_block_instrs)?;
        self.insert(block.clone());
        Ok(block)
    }

    fn insert(&mut self, block: CodeBlock) {
        if self.cache.strategy() == CacheStrategy::Off {
            return;
        }
        for p in block.pages() {
            self.machine.mmu.mark_code(p);
        }
        let evicted = self.cache.insert(Entry {
            block,
            compiled: None,
        });
        self.stats.evictions += evicted.len() as u64;
        if !evicted.is_empty() {
            self.log.log(LogModule::Engine, LEVEL_DEBUG, || {
                format!("evicted {} block(s)", evicted.len())
            });
        }
    }

    /// Evicts cached blocks overlapping `[start, start + len)`.
    pub fn invalidate(&mut self, start: u32, len: u32) -> usize {
        let n = self.cache.invalidate_range(start, len);
        self.stats.invalidated += n as u64;
        n
    }

    fn fetch(&mut self, pc: u32, step: bool) -> Result<Slot, StopReason> {
        if step {
            return Ok(Slot::Owned(Box::new(self.translate_now(pc, 1)?)));
        }
        if self.cache.contains(pc) {
            self.stats.cache_hits += 1;
            return Ok(Slot::Cached(pc));
        }
        let block = self.translate_now(pc, self.max_block_instrs)?;
        if self.cache.strategy() == CacheStrategy::Off {
            return Ok(Slot::Owned(Box::new(block)));
        }
        self.insert(block);
        Ok(Slot::Cached(pc))
    }

    fn slot_block<'a>(&'a self, slot: &'a Slot) -> Option<&'a CodeBlock> {
        match slot {
            Slot::Cached(va) => self.cache.block(*va),
            Slot::Owned(b) => Some(b),
        }
    }

    fn any_probe_enabled(&self) -> bool {
        let p = &self.machine.probes;
        [
            probes::BLOCK_ENTER,
            probes::BLOCK_EXIT,
            probes::STEP_MODE,
            probes::MMU_WRITE,
            probes::SYSCALL,
        ]
        .iter()
        .any(|id| p.is_enabled(*id))
    }

    /// Runs from the current PC until a stop condition.
    pub fn run(&mut self) -> StopReason {
        loop {
            let stop = if self.any_probe_enabled() {
                self.run_one::<true>()
            } else {
                self.run_one::<false>()
            };
            if let Some(s) = stop {
                self.log
                    .log(LogModule::Engine, LEVEL_INFO, || format!("stop: {s}"));
                return s;
            }
        }
    }

    /// Sets the PC and runs.
    pub fn run_from(&mut self, va: u32) -> StopReason {
        self.machine.state.pc = va;
        self.pending = None;
        self.run()
    }

    /// Executes exactly one block (or one guest instruction in step mode)
    /// unless a stop condition intervenes first.
    pub fn step_block(&mut self) -> Option<StopReason> {
        if self.any_probe_enabled() {
            self.run_one::<true>()
        } else {
            self.run_one::<false>()
        }
    }

    fn fire_enter(&mut self, id: probes::ProbeId, pc: u32, text: Option<&str>) -> Verdict {
        let m = &mut self.machine;
        let mut ctx = ProbeContext {
            pc,
            block_va: pc,
            text,
            state: Some(&m.state),
            mmu: Some(&m.mmu),
            ..Default::default()
        };
        m.probes.fire(id, &mut ctx)
    }

    fn run_one<const PROBES: bool>(&mut self) -> Option<StopReason> {
        if self.model.should_stop(&self.machine.counters) {
            return Some(StopReason::MetricThreshold(self.metric()));
        }
        let pc = self.machine.state.pc;
        let step = self.step_mode.get();

        let (slot, resumed) = match self.pending.take() {
            Some(slot) if self.slot_block(&slot).is_some_and(|b| b.entry_va == pc) => {
                let multi = self.slot_block(&slot).is_some_and(|b| b.sources.len() > 1);
                if step && multi {
                    match self.fetch(pc, true) {
                        Ok(s) => (s, true),
                        Err(e) => return Some(e),
                    }
                } else {
                    (slot, true)
                }
            }
            _ => match self.fetch(pc, step) {
                Ok(s) => (s, false),
                Err(e) => return Some(e),
            },
        };

        if PROBES && !resumed {
            let text = self
                .slot_block(&slot)
                .and_then(|b| b.sources.first())
                .map(|s| s.text.clone());
            let mut verdict = self.fire_enter(probes::BLOCK_ENTER, pc, text.as_deref());
            if step && verdict == Verdict::Continue {
                verdict = self.fire_enter(probes::STEP_MODE, pc, text.as_deref());
            }
            if verdict == Verdict::Stop {
                self.machine.probes.take_stop();
                self.pending = Some(slot);
                return Some(StopReason::Breakpoint(pc));
            }
        }

        let stop = self.execute::<PROBES>(slot);
        if stop.is_some() {
            return stop;
        }

        let dirty = self.machine.mmu.take_dirty_code();
        if !dirty.is_empty() {
            let n = self.cache.invalidate_pages(&dirty);
            self.stats.invalidated += n as u64;
            if n > 0 {
                self.log.log(LogModule::Engine, LEVEL_DEBUG, || {
                    format!("code write invalidated {n} block(s)")
                });
            }
        }
        if PROBES {
            let next = self.machine.state.pc;
            let verdict = {
                let m = &mut self.machine;
                let mut ctx = ProbeContext {
                    pc: next,
                    block_va: pc,
                    state: Some(&m.state),
                    mmu: Some(&m.mmu),
                    ..Default::default()
                };
                m.probes.fire(probes::BLOCK_EXIT, &mut ctx)
            };
            if self.machine.probes.take_stop() || verdict == Verdict::Stop {
                return Some(StopReason::Watchpoint { pc: next });
            }
        }
        None
    }

    fn execute<const PROBES: bool>(&mut self, slot: Slot) -> Option<StopReason> {
        let (threshold, slow_path_only) = (self.tier_threshold, self.slow_path_only);
        let Engine {
            machine,
            cache,
            backend,
            syscalls,
            stats,
            log,
            ..
        } = self;
        let mut owned;
        let (block, compiled): (&mut CodeBlock, Option<&dyn CompiledCode>) = match slot {
            Slot::Owned(b) => {
                owned = b;
                (&mut *owned, None)
            }
            Slot::Cached(va) => {
                let e = cache.get_mut(va).expect("slot refers to a cached block");
                if e.block.exec_count >= threshold && e.block.tier == Tier::Interpreted {
                    if let Some(be) = backend.as_mut() {
                        e.compiled = Some(be.compile(&e.block));
                        e.block.tier = Tier::Compiled;
                        stats.compilations += 1;
                        log.log(LogModule::Engine, LEVEL_DEBUG, || {
                            format!("promoted block 0x{va:08X}")
                        });
                    }
                }
                (&mut e.block, e.compiled.as_deref())
            }
        };
        machine.counters.bump(Counter::BlocksExecuted, 1);
        let mut start = 0;
        loop {
            let exit = {
                let mut ctx = ExecCtx {
                    state: &mut machine.state,
                    mmu: &mut machine.mmu,
                    counters: &mut machine.counters,
                    probes: &mut machine.probes,
                    slow_path_only,
                };
                match compiled {
                    Some(c) => {
                        if start == 0 {
                            block.exec_count += 1;
                        }
                        c.run(&mut ctx, start, PROBES)
                    }
                    None => run_block::<PROBES>(&mut ctx, block, start),
                }
            };
            match exit {
                BlockExit::NextVa(va) => {
                    machine.state.pc = va;
                    return None;
                }
                BlockExit::Fault(f) => return Some(StopReason::Fault(f)),
                BlockExit::Syscall { id, resume } => {
                    machine.counters.bump(Counter::Syscalls, 1);
                    let Some(h) = syscalls.get_mut(&id) else {
                        return Some(StopReason::UnknownSyscall(id));
                    };
                    let mut env = SysEnv {
                        state: &mut machine.state,
                        mmu: &mut machine.mmu,
                        fpu: &mut machine.fpu,
                        os: &mut machine.os,
                        counters: &mut machine.counters,
                        probes: &mut machine.probes,
                    };
                    let action = h(&mut env);
                    if PROBES {
                        let mut ctx = ProbeContext {
                            pc: machine.state.pc,
                            block_va: block.entry_va,
                            value: id as u64,
                            state: Some(&machine.state),
                            mmu: Some(&machine.mmu),
                            ..Default::default()
                        };
                        machine.probes.fire(probes::SYSCALL, &mut ctx);
                    }
                    match action {
                        Ok(SysAction::Continue) => start = resume,
                        Ok(SysAction::Exit(code)) => {
                            machine.os.exit_code = Some(code);
                            return Some(StopReason::GuestExit(code));
                        }
                        Err(message) => return Some(StopReason::HandlerError { id, message }),
                    }
                }
            }
        }
    }
}

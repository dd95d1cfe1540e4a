//! Named instrumentation probes with one provider and many consumers.
//!
//! Enable flags live in a fixed table inside [`Probes`], so a disabled
//! probe costs one load and a predictable branch at the probe site:
//!
//! ```ignore
//! if probes.is_enabled(BLOCK_ENTER) {
//!     probes.fire(BLOCK_ENTER, &mut ctx);
//! }
//! ```
//!
//! Consumers receive a [`ProbeContext`] and may set its verdict to ask the
//! engine to stop. A consumer that returns an error or panics is logged
//! and disabled; emulation continues.

use std::panic::{self, AssertUnwindSafe};

use thiserror::Error;

use crate::mmu::Mmu;
use crate::vm::MachineState;

pub type ProbeId = u32;

// Standard probe set, created in this order by `Probes::with_standard_set`.
pub const BLOCK_ENTER: ProbeId = 1;
pub const BLOCK_EXIT: ProbeId = 2;
pub const STEP_MODE: ProbeId = 3;
pub const MMU_WRITE: ProbeId = 4;
pub const VFS_OPEN: ProbeId = 5;
pub const IMPORT_RESOLVED: ProbeId = 6;
pub const SYSCALL: ProbeId = 7;

pub const STANDARD_PROBES: [(&str, &str); 7] = [
    ("engine.block_enter", "engine"),
    ("engine.block_exit", "engine"),
    ("x86.step_mode", "x86"),
    ("mmu.write", "mmu"),
    ("vfs.open", "vfs"),
    ("loader.import_resolved", "loader"),
    ("engine.syscall", "engine"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Verdict {
    #[default]
    Continue,
    Stop,
}

/// Payload handed to consumers; borrowed views are valid only for the
/// duration of the fire call.
#[derive(Default)]
pub struct ProbeContext<'a> {
    pub pc: u32,
    pub block_va: u32,
    /// Accessed address for memory probes.
    pub addr: u32,
    pub size: u32,
    /// Syscall id, import address and similar probe-specific values.
    pub value: u64,
    pub text: Option<&'a str>,
    pub state: Option<&'a MachineState>,
    pub mmu: Option<&'a Mmu>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("probe name {0:?} already exists")]
    DuplicateName(String),
    #[error("unknown probe {0}")]
    UnknownProbe(String),
    #[error("consumer id {0} already registered on this probe")]
    DuplicateConsumerId(u32),
    #[error("at most {MAX_PROBES} probes can exist")]
    TooManyProbes,
}

/// Capacity of the probe table, counting the unused id 0.
pub const MAX_PROBES: usize = 256;

pub type ConsumerFn = Box<dyn FnMut(&mut ProbeContext<'_>) -> Result<(), String>>;
pub type EnablerFn = Box<dyn FnMut(bool)>;

struct Consumer {
    id: u32,
    active: bool,
    callback: ConsumerFn,
}

struct Probe {
    name: String,
    provider: String,
    enabler: Option<EnablerFn>,
    consumers: Vec<Consumer>,
}

/// Either a probe id or its name.
#[derive(Debug, Clone, Copy)]
pub enum ProbeRef<'a> {
    Id(ProbeId),
    Name(&'a str),
}

impl From<ProbeId> for ProbeRef<'_> {
    fn from(id: ProbeId) -> Self {
        ProbeRef::Id(id)
    }
}

impl<'a> From<&'a str> for ProbeRef<'a> {
    fn from(name: &'a str) -> Self {
        ProbeRef::Name(name)
    }
}

pub struct Probes {
    // index 0 unused so ids stay dense from 1
    enabled: [bool; MAX_PROBES],
    probes: Vec<Probe>,
    stop_requested: bool,
    log: Vec<String>,
}

impl std::fmt::Debug for Probes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let enabled: Vec<&str> = self
            .probes
            .iter()
            .enumerate()
            .filter(|(k, _)| self.enabled[k + 1])
            .map(|(_, p)| p.name.as_str())
            .collect();
        f.debug_struct("Probes")
            .field("count", &self.probes.len())
            .field("enabled", &enabled)
            .finish()
    }
}

impl Default for Probes {
    fn default() -> Self {
        Self::new()
    }
}

impl Probes {
    pub fn new() -> Self {
        Probes {
            enabled: [false; MAX_PROBES],
            probes: Vec::new(),
            stop_requested: false,
            log: Vec::new(),
        }
    }

    pub fn with_standard_set() -> Self {
        let mut p = Probes::new();
        for (name, provider) in STANDARD_PROBES {
            p.create(name, provider, None)
                .expect("standard names are unique");
        }
        p
    }

    pub fn create(
        &mut self,
        name: &str,
        provider: &str,
        enabler: Option<EnablerFn>,
    ) -> Result<ProbeId, ProbeError> {
        if self.probes.iter().any(|p| p.name == name) {
            return Err(ProbeError::DuplicateName(name.to_string()));
        }
        if self.probes.len() + 1 >= MAX_PROBES {
            return Err(ProbeError::TooManyProbes);
        }
        self.probes.push(Probe {
            name: name.to_string(),
            provider: provider.to_string(),
            enabler,
            consumers: Vec::new(),
        });
        Ok(self.probes.len() as ProbeId)
    }

    /// Installs or replaces the provider hook run on enable/disable.
    pub fn set_enabler(&mut self, id: ProbeId, enabler: EnablerFn) -> Result<(), ProbeError> {
        self.probe_mut(id)?.enabler = Some(enabler);
        Ok(())
    }

    pub fn resolve<'a>(&self, r: impl Into<ProbeRef<'a>>) -> Result<ProbeId, ProbeError> {
        match r.into() {
            ProbeRef::Id(id) if id >= 1 && (id as usize) <= self.probes.len() => Ok(id),
            ProbeRef::Id(id) => Err(ProbeError::UnknownProbe(id.to_string())),
            ProbeRef::Name(n) => self
                .probes
                .iter()
                .position(|p| p.name == n)
                .map(|i| i as ProbeId + 1)
                .ok_or_else(|| ProbeError::UnknownProbe(n.to_string())),
        }
    }

    fn probe_mut(&mut self, id: ProbeId) -> Result<&mut Probe, ProbeError> {
        self.probes
            .get_mut((id as usize).wrapping_sub(1))
            .ok_or_else(|| ProbeError::UnknownProbe(id.to_string()))
    }

    pub fn name(&self, id: ProbeId) -> Option<&str> {
        self.probes
            .get((id as usize).wrapping_sub(1))
            .map(|p| p.name.as_str())
    }

    pub fn provider(&self, id: ProbeId) -> Option<&str> {
        self.probes
            .get((id as usize).wrapping_sub(1))
            .map(|p| p.provider.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.probes.iter().map(|p| p.name.as_str())
    }

    pub fn register<'a>(
        &mut self,
        probe: impl Into<ProbeRef<'a>>,
        consumer_id: u32,
        callback: ConsumerFn,
    ) -> Result<(), ProbeError> {
        let id = self.resolve(probe)?;
        let p = self.probe_mut(id)?;
        if p.consumers.iter().any(|c| c.id == consumer_id) {
            return Err(ProbeError::DuplicateConsumerId(consumer_id));
        }
        p.consumers.push(Consumer {
            id: consumer_id,
            active: true,
            callback,
        });
        Ok(())
    }

    pub fn unregister(&mut self, id: ProbeId, consumer_id: u32) -> Result<bool, ProbeError> {
        let p = self.probe_mut(id)?;
        let before = p.consumers.len();
        p.consumers.retain(|c| c.id != consumer_id);
        Ok(p.consumers.len() != before)
    }

    pub fn consumer_count(&self, id: ProbeId) -> usize {
        self.probes
            .get((id as usize).wrapping_sub(1))
            .map_or(0, |p| p.consumers.len())
    }

    pub fn enable(&mut self, id: ProbeId) -> Result<(), ProbeError> {
        self.set_enabled(id, true)
    }

    pub fn disable(&mut self, id: ProbeId) -> Result<(), ProbeError> {
        self.set_enabled(id, false)
    }

    fn set_enabled(&mut self, id: ProbeId, on: bool) -> Result<(), ProbeError> {
        let p = self.probe_mut(id)?;
        if let Some(enabler) = p.enabler.as_mut() {
            enabler(on);
        }
        self.enabled[id as usize] = on;
        Ok(())
    }

    #[inline(always)]
    pub fn is_enabled(&self, id: ProbeId) -> bool {
        // out-of-range ids read as disabled
        self.enabled.get(id as usize).copied().unwrap_or(false)
    }

    /// Fires a probe. A disabled probe returns immediately.
    #[inline]
    pub fn fire(&mut self, id: ProbeId, ctx: &mut ProbeContext<'_>) -> Verdict {
        if !self.is_enabled(id) {
            return Verdict::Continue;
        }
        self.cb_consumers(id, ctx)
    }

    /// Walks every active consumer in registration order.
    pub fn cb_consumers(&mut self, id: ProbeId, ctx: &mut ProbeContext<'_>) -> Verdict {
        let Some(p) = self.probes.get_mut((id as usize).wrapping_sub(1)) else {
            return Verdict::Continue;
        };
        for c in p.consumers.iter_mut().filter(|c| c.active) {
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| (c.callback)(ctx)));
            let failure = match outcome {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e),
                Err(payload) => Some(
                    payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".to_string()),
                ),
            };
            if let Some(e) = failure {
                c.active = false;
                self.log
                    .push(format!("consumer {} on {} disabled: {e}", c.id, p.name));
            }
        }
        if ctx.verdict == Verdict::Stop {
            self.stop_requested = true;
        }
        ctx.verdict
    }

    /// Fires one consumer, for providers that filter triggers themselves.
    pub fn cb_consumer(
        &mut self,
        id: ProbeId,
        consumer_id: u32,
        ctx: &mut ProbeContext<'_>,
    ) -> Result<Verdict, ProbeError> {
        let p = self.probe_mut(id)?;
        if let Some(c) = p
            .consumers
            .iter_mut()
            .find(|c| c.id == consumer_id && c.active)
        {
            if let Err(e) = (c.callback)(ctx) {
                c.active = false;
                self.log
                    .push(format!("consumer {consumer_id} disabled: {e}"));
            }
        }
        if ctx.verdict == Verdict::Stop {
            self.stop_requested = true;
        }
        Ok(ctx.verdict)
    }

    /// Whether any consumer asked to stop since the last call.
    pub fn take_stop(&mut self) -> bool {
        std::mem::take(&mut self.stop_requested)
    }

    pub fn take_log(&mut self) -> Vec<String> {
        std::mem::take(&mut self.log)
    }
}

//! The debugger session: a command parser and a REPL driving one engine.
//!
//! Breakpoints and watchpoints are probe consumers. The block-enter and
//! memory-write probes are enabled only while a point needs them, so a
//! session without points runs the probe-free engine path.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use pinky_core::config::ConfigStore;
use pinky_core::engine::{Engine, StopReason};
use pinky_core::loader::load_process;
use pinky_core::mmu::Mmu;
use pinky_core::probes::{self, ProbeId, Verdict};
use pinky_core::vfs::{pack_dir, Vfs};
use pinky_core::vm::MachineState;

/// Consumer ids the session registers under.
const BREAK_CONSUMER: u32 = 0xB0;
const WATCH_CONSUMER: u32 = 0xB1;

pub const HELP: &str = "\
commands:
  run <path>           load and run a sample (a bare path works too)
  break <va>           stop before the block at <va> runs
  delete <n>           remove breakpoint or watchpoint <n>
  watch <va>           stop after a block writes <va>
  next                 run one code block
  step                 enable step mode and run one guest instruction
  continue             resume until the next stop
  probe [<name> [off]] list probes, or enable/disable one
  set <key> <value>    change a setting (log:ir 1 and log.ir 1 are equal)
  regs                 show guest registers
  mem <va> <len>       hex dump guest memory
  dump <dir>           write an MMU snapshot plus registers.txt
  quit                 leave the debugger";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Run(String),
    Break(u32),
    Delete(u32),
    Next,
    Step,
    Continue,
    Probe(Option<(String, bool)>),
    Set(String, String),
    Regs,
    Mem(u32, usize),
    Dump(PathBuf),
    Watch(u32),
    Help,
    Quit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    Unknown(String),
    Usage(&'static str),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Unknown(c) => write!(f, "unknown command {c:?}\n{HELP}"),
            ParseError::Usage(u) => write!(f, "usage: {u}"),
        }
    }
}

pub fn parse_hex(s: &str) -> Option<u32> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    u32::from_str_radix(digits, 16).ok()
}

impl Command {
    /// Parses one non-empty line.
    pub fn parse(line: &str) -> Result<Command, ParseError> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let (&head, args) = words.split_first().ok_or(ParseError::Usage("<command>"))?;
        let one_va = |usage| match args {
            [va] => parse_hex(va).ok_or(ParseError::Usage(usage)),
            _ => Err(ParseError::Usage(usage)),
        };
        let none = |c: Command, usage| {
            if args.is_empty() {
                Ok(c)
            } else {
                Err(ParseError::Usage(usage))
            }
        };
        match head {
            "run" | "r" => match args {
                [path] => Ok(Command::Run(path.to_string())),
                _ => Err(ParseError::Usage("run <path>")),
            },
            "break" | "b" => one_va("break <hex va>").map(Command::Break),
            "watch" => one_va("watch <hex va>").map(Command::Watch),
            "delete" | "d" => match args {
                [n] => n
                    .parse()
                    .map(Command::Delete)
                    .map_err(|_| ParseError::Usage("delete <number>")),
                _ => Err(ParseError::Usage("delete <number>")),
            },
            "next" | "n" => none(Command::Next, "next"),
            "step" | "s" => none(Command::Step, "step"),
            "continue" | "c" => none(Command::Continue, "continue"),
            "regs" => none(Command::Regs, "regs"),
            "help" | "?" => Ok(Command::Help),
            "quit" | "q" | "exit" => none(Command::Quit, "quit"),
            "probe" => match args {
                [] => Ok(Command::Probe(None)),
                [name] => Ok(Command::Probe(Some((name.to_string(), true)))),
                [name, "off"] => Ok(Command::Probe(Some((name.to_string(), false)))),
                _ => Err(ParseError::Usage("probe [<name> [off]]")),
            },
            "set" => match args {
                [key, value] => Ok(Command::Set(key.to_string(), value.to_string())),
                _ => Err(ParseError::Usage("set <key> <value>")),
            },
            "mem" | "x" => match args {
                [va, len] => match (parse_hex(va), len.parse()) {
                    (Some(va), Ok(len)) => Ok(Command::Mem(va, len)),
                    _ => Err(ParseError::Usage("mem <hex va> <len>")),
                },
                _ => Err(ParseError::Usage("mem <hex va> <len>")),
            },
            "dump" => match args {
                [dir] => Ok(Command::Dump(PathBuf::from(dir))),
                _ => Err(ParseError::Usage("dump <dir>")),
            },
            path if args.is_empty() && (path.contains('.') || path.contains('/')) => {
                Ok(Command::Run(path.to_string()))
            }
            other => Err(ParseError::Unknown(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PointKind {
    Break,
    Watch,
}

/// Point table shared with the probe consumers.
#[derive(Debug, Default)]
struct Points {
    next_id: u32,
    table: BTreeMap<u32, (PointKind, u32)>,
    /// One-shot stop at the next block entry, used by `next`.
    temp: Option<u32>,
    /// The point that caused the last stop, with the address it matched.
    hit: Option<(u32, u32)>,
}

impl Points {
    fn add(&mut self, kind: PointKind, va: u32) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        self.table.insert(id, (kind, va));
        id
    }

    fn any(&self, kind: PointKind) -> bool {
        self.table.values().any(|(k, _)| *k == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplMode {
    /// Print each command after its prompt, for non-interactive input.
    pub echo: bool,
    /// Stop with exit code 2 on the first parse error.
    pub script: bool,
}

/// How the REPL ended.
pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE_ERROR: i32 = 2;

pub struct Session {
    engine: Option<Engine>,
    /// Whether the loaded sample can still run.
    live: bool,
    vfs_image: Option<Vec<u8>>,
    settings: Vec<(String, String)>,
    /// Probes the user enabled by name.
    user_probes: Vec<String>,
    points: Rc<RefCell<Points>>,
    stdout_seen: usize,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Session {
            engine: None,
            live: false,
            vfs_image: None,
            settings: Vec::new(),
            user_probes: Vec::new(),
            points: Rc::default(),
            stdout_seen: 0,
        }
    }

    /// Samples are loaded from this container; without one, `run` packs
    /// the sample's host directory.
    pub fn set_vfs_image(&mut self, image: Vec<u8>) {
        self.vfs_image = Some(image);
    }

    /// Records a setting applied to every engine this session creates.
    pub fn add_setting(&mut self, key: &str, value: &str) -> Result<(), String> {
        ConfigStore::new()
            .set_str(key, value)
            .map_err(|e| e.to_string())?;
        if let Some(e) = self.engine.as_mut() {
            e.set_config_str(key, value).map_err(|e| e.to_string())?;
        }
        self.settings.push((key.to_string(), value.to_string()));
        Ok(())
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.engine.as_ref()
    }

    /// Reads commands until `quit` or end of input.
    pub fn repl(
        &mut self,
        input: impl BufRead,
        out: &mut dyn Write,
        mode: ReplMode,
    ) -> io::Result<i32> {
        let mut lines = input.lines();
        loop {
            if !mode.echo {
                write!(out, "> ")?;
                out.flush()?;
            }
            let Some(line) = lines.next().transpose()? else {
                return Ok(EXIT_OK);
            };
            let line = line.trim();
            if mode.echo {
                writeln!(out, "> {line}")?;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match Command::parse(line) {
                Ok(Command::Quit) => return Ok(EXIT_OK),
                Ok(cmd) => self.execute(cmd, out)?,
                Err(e) => {
                    writeln!(out, "{e}")?;
                    if mode.script {
                        return Ok(EXIT_PARSE_ERROR);
                    }
                }
            }
        }
    }

    pub fn execute(&mut self, cmd: Command, out: &mut dyn Write) -> io::Result<()> {
        match cmd {
            Command::Run(path) => self.run(&path, out),
            Command::Break(va) => {
                self.points.borrow_mut().add(PointKind::Break, va);
                self.sync_probes();
                Ok(())
            }
            Command::Watch(va) => {
                let id = self.points.borrow_mut().add(PointKind::Watch, va);
                self.sync_probes();
                writeln!(out, "Watchpoint {id} at 0x{va:08X}")
            }
            Command::Delete(n) => {
                let removed = self.points.borrow_mut().table.remove(&n);
                self.sync_probes();
                match removed {
                    Some(_) => Ok(()),
                    None => writeln!(out, "No breakpoint number {n}."),
                }
            }
            Command::Next => {
                if !self.live {
                    return writeln!(out, "The program is not being run.");
                }
                let mut p = self.points.borrow_mut();
                let id = p.next_id;
                p.next_id += 1;
                p.temp = Some(id);
                drop(p);
                self.sync_probes();
                self.resume(out)
            }
            Command::Step => self.step(out),
            Command::Continue => {
                if !self.live {
                    return writeln!(out, "The program is not being run.");
                }
                self.resume(out)
            }
            Command::Probe(None) => {
                let scratch;
                let e = match &self.engine {
                    Some(e) => e,
                    None => {
                        scratch = self.new_engine().unwrap_or_default();
                        &scratch
                    }
                };
                let p = &e.machine.probes;
                for name in p.names() {
                    let on = p.resolve(name).is_ok_and(|id| p.is_enabled(id));
                    writeln!(out, "{name} {}", if on { "on" } else { "off" })?;
                }
                Ok(())
            }
            Command::Probe(Some((name, on))) => self.toggle_probe(&name, on, out),
            Command::Set(key, value) => match self.add_setting(&key, &value) {
                Ok(()) => self.flush_log(out),
                Err(e) => writeln!(out, "error: {e}"),
            },
            Command::Regs => {
                let state = self
                    .engine
                    .as_ref()
                    .map(|e| e.machine.state.clone())
                    .unwrap_or_default();
                writeln!(out, "{}", state.summary())
            }
            Command::Mem(va, len) => self.mem(va, len, out),
            Command::Dump(dir) => match self.snapshot(&dir) {
                Ok(n) => writeln!(out, "Dumped {n} region(s) to {}", dir.display()),
                Err(e) => writeln!(out, "error: {e}"),
            },
            Command::Help => writeln!(out, "{HELP}"),
            Command::Quit => Ok(()),
        }
    }

    /// Writes the MMU dump and `registers.txt` into `dir`; returns the
    /// number of regions.
    pub fn snapshot(&self, dir: &Path) -> Result<usize, String> {
        let empty = (Mmu::new(), MachineState::new());
        let (mmu, state) = match &self.engine {
            Some(e) => (&e.machine.mmu, &e.machine.state),
            None => (&empty.0, &empty.1),
        };
        let manifest = mmu.dump(dir).map_err(|e| e.to_string())?;
        fs::write(dir.join("registers.txt"), state.dump_text()).map_err(|e| e.to_string())?;
        Ok(manifest.lines().count())
    }

    fn resolve_probe(e: &Engine, name: &str) -> Option<ProbeId> {
        let p = &e.machine.probes;
        p.resolve(name)
            .or_else(|_| p.resolve(name.replacen('_', ".", 1).as_str()))
            .ok()
    }

    fn toggle_probe(&mut self, name: &str, on: bool, out: &mut dyn Write) -> io::Result<()> {
        let scratch;
        let e = match self.engine.as_mut() {
            Some(e) => e,
            None => {
                scratch = Engine::new();
                return match Self::resolve_probe(&scratch, name) {
                    Some(_) => {
                        self.remember_probe(name, on);
                        Ok(())
                    }
                    None => writeln!(out, "error: unknown probe {name:?}"),
                };
            }
        };
        let Some(id) = Self::resolve_probe(e, name) else {
            return writeln!(out, "error: unknown probe {name:?}");
        };
        let r = if on {
            e.machine.probes.enable(id)
        } else {
            e.machine.probes.disable(id)
        };
        if let Err(err) = r {
            return writeln!(out, "error: {err}");
        }
        self.remember_probe(name, on);
        // the session still owns the probes its points rely on
        self.sync_probes();
        Ok(())
    }

    fn remember_probe(&mut self, name: &str, on: bool) {
        self.user_probes.retain(|p| p != name);
        if on {
            self.user_probes.push(name.to_string());
        }
    }

    /// Enables exactly the probes the point table and the user need.
    fn sync_probes(&mut self) {
        let Some(e) = self.engine.as_mut() else {
            return;
        };
        let user: Vec<ProbeId> = self
            .user_probes
            .iter()
            .filter_map(|n| Self::resolve_probe(e, n))
            .collect();
        let p = self.points.borrow();
        let wanted = [
            (
                probes::BLOCK_ENTER,
                p.any(PointKind::Break) || p.temp.is_some(),
            ),
            (probes::MMU_WRITE, p.any(PointKind::Watch)),
        ];
        for (id, need) in wanted {
            let on = need || user.contains(&id);
            if on != e.machine.probes.is_enabled(id) {
                let _ = if on {
                    e.machine.probes.enable(id)
                } else {
                    e.machine.probes.disable(id)
                };
            }
        }
    }

    fn new_engine(&self) -> Result<Engine, String> {
        let mut e = Engine::new();
        for (k, v) in &self.settings {
            e.set_config_str(k, v).map_err(|e| e.to_string())?;
        }
        let points = self.points.clone();
        e.machine
            .probes
            .register(
                probes::BLOCK_ENTER,
                BREAK_CONSUMER,
                Box::new(move |ctx| {
                    let mut p = points.borrow_mut();
                    if let Some(id) = p.temp.take() {
                        p.hit = Some((id, ctx.pc));
                        ctx.verdict = Verdict::Stop;
                        return Ok(());
                    }
                    let found = p
                        .table
                        .iter()
                        .find(|(_, (k, va))| *k == PointKind::Break && *va == ctx.pc)
                        .map(|(id, _)| *id);
                    if let Some(id) = found {
                        p.hit = Some((id, ctx.pc));
                        ctx.verdict = Verdict::Stop;
                    }
                    Ok(())
                }),
            )
            .map_err(|e| e.to_string())?;
        let points = self.points.clone();
        e.machine
            .probes
            .register(
                probes::MMU_WRITE,
                WATCH_CONSUMER,
                Box::new(move |ctx| {
                    let mut p = points.borrow_mut();
                    let end = ctx.addr as u64 + ctx.size as u64;
                    let found = p
                        .table
                        .iter()
                        .find(|(_, (k, va))| {
                            *k == PointKind::Watch && (ctx.addr as u64..end).contains(&(*va as u64))
                        })
                        .map(|(id, (_, va))| (*id, *va));
                    if let Some(hit) = found {
                        p.hit.get_or_insert(hit);
                        ctx.verdict = Verdict::Stop;
                    }
                    Ok(())
                }),
            )
            .map_err(|e| e.to_string())?;
        for name in &self.user_probes {
            if let Some(id) = Self::resolve_probe(&e, name) {
                e.machine.probes.enable(id).map_err(|e| e.to_string())?;
            }
        }
        Ok(e)
    }

    fn mount(&self, path: &str) -> Result<(Vfs, String), String> {
        if let Some(image) = &self.vfs_image {
            return Ok((
                Vfs::init(image.clone()).map_err(|e| e.to_string())?,
                path.to_string(),
            ));
        }
        let host = Path::new(path);
        let dir = host
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let name = host
            .file_name()
            .ok_or_else(|| format!("not a file: {path}"))?
            .to_string_lossy()
            .into_owned();
        let image = pack_dir(dir).map_err(|e| e.to_string())?;
        Ok((Vfs::init(image).map_err(|e| e.to_string())?, name))
    }

    fn run(&mut self, path: &str, out: &mut dyn Write) -> io::Result<()> {
        self.live = false;
        self.stdout_seen = 0;
        {
            let mut p = self.points.borrow_mut();
            p.temp = None;
            p.hit = None;
        }
        let setup = || -> Result<Engine, String> {
            let (vfs, name) = self.mount(path)?;
            let mut e = self.new_engine()?;
            e.machine.os.vfs = Some(vfs);
            load_process(&mut e, &name).map_err(|e| e.to_string())?;
            Ok(e)
        };
        match setup() {
            Ok(e) => self.engine = Some(e),
            Err(err) => {
                self.engine = None;
                return writeln!(out, "error: {err}");
            }
        }
        self.live = true;
        self.sync_probes();
        let name = path.rsplit('/').next().unwrap_or(path);
        writeln!(out, "EMULATING {name}")?;
        self.resume(out)
    }

    fn resume(&mut self, out: &mut dyn Write) -> io::Result<()> {
        let e = self.engine.as_mut().expect("live session has an engine");
        let stop = e.run();
        self.points.borrow_mut().temp = None;
        self.sync_probes();
        self.flush_log(out)?;
        self.report(stop, out)
    }

    fn step(&mut self, out: &mut dyn Write) -> io::Result<()> {
        if !self.live {
            return writeln!(out, "The program is not being run.");
        }
        let e = self.engine.as_mut().expect("live session has an engine");
        if !e.step_mode() {
            e.machine
                .probes
                .enable(probes::STEP_MODE)
                .expect("standard probe");
            self.remember_probe("x86.step_mode", true);
        }
        let e = self.engine.as_mut().expect("live session has an engine");
        let pc = e.machine.state.pc;
        let mut stop = e.step_block();
        // a breakpoint on the current instruction does not hold a step back
        if stop == Some(StopReason::Breakpoint(pc)) {
            stop = e.step_block();
        }
        self.flush_log(out)?;
        match stop {
            None => {
                let pc = self.engine.as_ref().expect("live").machine.state.pc;
                writeln!(out, "Stepped to 0x{pc:08X}")
            }
            Some(s) => self.report(s, out),
        }
    }

    /// Copies engine log lines and new guest output to `out`.
    fn flush_log(&mut self, out: &mut dyn Write) -> io::Result<()> {
        let Some(e) = self.engine.as_mut() else {
            return Ok(());
        };
        for line in e.log.take_lines() {
            writeln!(out, "{line}")?;
        }
        for line in e.machine.probes.take_log() {
            writeln!(out, "warning: {line}")?;
        }
        let fresh = &e.machine.os.stdout[self.stdout_seen..];
        if !fresh.is_empty() {
            out.write_all(fresh)?;
            if !fresh.ends_with(b"\n") {
                writeln!(out)?;
            }
            self.stdout_seen = e.machine.os.stdout.len();
        }
        Ok(())
    }

    fn report(&mut self, stop: StopReason, out: &mut dyn Write) -> io::Result<()> {
        let hit = self.points.borrow_mut().hit.take();
        match (&stop, hit) {
            (StopReason::Breakpoint(va), Some((id, _))) => {
                writeln!(out, "Breakpoint {id} at 0x{va:08X}")
            }
            (StopReason::Watchpoint { pc }, Some((id, addr))) => {
                writeln!(
                    out,
                    "Watchpoint {id} at 0x{addr:08X} written, pc 0x{pc:08X}"
                )
            }
            (StopReason::GuestExit(code), _) => {
                self.live = false;
                writeln!(out, "Process exited with code {code}")
            }
            _ => writeln!(out, "Stopped: {stop}"),
        }
    }

    fn mem(&self, va: u32, len: usize, out: &mut dyn Write) -> io::Result<()> {
        let Some(e) = self.engine.as_ref() else {
            return writeln!(out, "error: no process");
        };
        let bytes = match e.machine.mmu.read_vec(va, len) {
            Ok(b) => b,
            Err(err) => return writeln!(out, "error: {err}"),
        };
        for (k, chunk) in bytes.chunks(16).enumerate() {
            let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02X}")).collect();
            writeln!(
                out,
                "{:08X}: {}",
                va.wrapping_add(16 * k as u32),
                hex.join(" ")
            )?;
        }
        Ok(())
    }
}

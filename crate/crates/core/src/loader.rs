//! PE32 loading, import binding and process setup.
//!
//! Imports are bound per function: a native shim wins when one exists for
//! `(dll, function)`, otherwise the DLL is loaded from the VFS under
//! `windows/system32/` and the export is bound. Shims live in a trampoline
//! region of 4-byte stubs `0F 04 <idx16>`, each trapping into the host
//! handler registered for syscall `TRAP_BASE + idx`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::engine::{Engine, ModuleInfo, OsState, SysAction, SysEnv};
use crate::metrics::Counter;
use crate::mmu::{prot, Mmu, MmuError, PAGE_SIZE};
use crate::probes::{self, ProbeContext, Probes};
use crate::vfs::{VfsError, Whence};
use crate::vm::MachineState;
use crate::x86::sys;
use crate::xir::{eflags, regs};

pub const TRAMPOLINE_BASE: u32 = 0x7DD8_0000;
pub const STACK_TOP: u32 = 0x0020_0000;
pub const STACK_SIZE: u32 = 0x0010_0000;
/// Where rebased images and `VirtualAlloc` look for space.
pub const DYNAMIC_MIN: u32 = 0x1000_0000;
pub const DYNAMIC_MAX: u32 = 0x7000_0000;
/// Directory searched for DLLs that no shim covers.
pub const SYSTEM_DIR: &str = "windows/system32";
/// Pseudo handle of the guest's standard output.
pub const STD_OUTPUT_HANDLE: u32 = 0xFFFF_FFF5;
pub const INVALID_HANDLE_VALUE: u32 = 0xFFFF_FFFF;

/// Module name the native shims are filed under.
pub const SHIM_DLL: &str = "kernel32.dll";

/// Native shims in trampoline order: name and stdcall argument count.
pub const SHIMS: [(&str, u32); 12] = [
    ("ExitProcess", 1),
    ("GetTickCount", 0),
    ("GetSystemTimeAsFileTime", 1),
    ("WriteFile", 5),
    ("VirtualAlloc", 4),
    ("VirtualFree", 3),
    ("GetModuleHandleA", 1),
    ("LoadLibraryA", 1),
    ("GetProcAddress", 2),
    ("CreateFileA", 7),
    ("ReadFile", 5),
    ("CloseHandle", 1),
];

/// FILETIME reported at virtual tick 0 (2020-01-01T00:00:00Z).
pub const FILETIME_EPOCH: u64 = 132_223_104_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("missing MZ signature")]
    BadDosMagic,
    #[error("missing PE signature")]
    BadNtMagic,
    #[error("truncated or inconsistent headers: {0}")]
    TruncatedHeaders(String),
    #[error("not a 32-bit PE image")]
    NotPe32,
    #[error("unresolved import {dll}!{name}")]
    UnresolvedImport { dll: String, name: String },
    #[error("preferred base 0x{0:08X} is taken and the image has no relocations")]
    FixedBaseCollision(u32),
    #[error("import cycle through {0}")]
    ImportCycle(String),
    #[error("unsupported relocation type {0}")]
    BadRelocation(u16),
    #[error("empty image")]
    EmptyImage,
    #[error("memory: {0}")]
    Mmu(#[from] MmuError),
    #[error("vfs: {0}")]
    Vfs(#[from] VfsError),
    #[error("no file system mounted")]
    NoVfs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub rva: u32,
    pub virtual_size: u32,
    pub raw_offset: u32,
    pub raw_size: u32,
    pub characteristics: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImportName {
    Name(String),
    Ordinal(u16),
}

impl std::fmt::Display for ImportName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImportName::Name(n) => f.write_str(n),
            ImportName::Ordinal(o) => write!(f, "#{o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportDll {
    pub dll: String,
    /// RVA of the first IAT slot.
    pub iat_rva: u32,
    pub names: Vec<ImportName>,
}

/// Parsed PE32 headers plus the image laid out at its RVAs.
#[derive(Debug, Clone)]
pub struct PeImage {
    pub preferred_base: u32,
    pub entry_rva: u32,
    pub size_of_image: u32,
    pub is_dll: bool,
    pub sections: Vec<Section>,
    pub imports: Vec<ImportDll>,
    /// Lowercase export name -> RVA.
    pub exports: BTreeMap<String, u32>,
    /// Ordinal -> RVA.
    pub export_ordinals: BTreeMap<u16, u32>,
    /// (rva, size) of the base relocation directory, if present.
    pub relocs: Option<(u32, u32)>,
    /// Memory image of size `size_of_image`, relative to the base.
    pub image: Vec<u8>,
}

fn trunc(what: &str) -> LoadError {
    LoadError::TruncatedHeaders(what.to_string())
}

fn u16_at(b: &[u8], off: usize, what: &str) -> Result<u16, LoadError> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| trunc(what))
}

fn u32_at(b: &[u8], off: usize, what: &str) -> Result<u32, LoadError> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| trunc(what))
}

fn cstr_at(b: &[u8], off: usize, what: &str) -> Result<String, LoadError> {
    let tail = b.get(off..).ok_or_else(|| trunc(what))?;
    let end = tail
        .iter()
        .position(|c| *c == 0)
        .ok_or_else(|| trunc(what))?;
    Ok(String::from_utf8_lossy(&tail[..end]).into_owned())
}

const DIR_EXPORT: usize = 0;
const DIR_IMPORT: usize = 1;
const DIR_BASERELOC: usize = 5;

/// Parses a PE32 file and lays its sections out in memory order.
pub fn parse_pe(file: &[u8]) -> Result<PeImage, LoadError> {
    if file.len() < 2 || &file[..2] != b"MZ" {
        return Err(LoadError::BadDosMagic);
    }
    let nt = u32_at(file, 0x3C, "e_lfanew")? as usize;
    if file.get(nt..nt + 4) != Some(b"PE\0\0") {
        return Err(LoadError::BadNtMagic);
    }
    let fh = nt + 4;
    let nsections = u16_at(file, fh + 2, "section count")? as usize;
    let opt_size = u16_at(file, fh + 16, "optional header size")? as usize;
    let characteristics = u16_at(file, fh + 18, "characteristics")?;
    let opt = fh + 20;
    if u16_at(file, opt, "optional magic")? != 0x10B {
        return Err(LoadError::NotPe32);
    }
    let entry_rva = u32_at(file, opt + 16, "entry point")?;
    let preferred_base = u32_at(file, opt + 28, "image base")?;
    let size_of_image = u32_at(file, opt + 56, "size of image")?;
    let size_of_headers = u32_at(file, opt + 60, "size of headers")?;
    let ndirs = u32_at(file, opt + 92, "directory count")? as usize;
    if opt_size < 96 + 8 * ndirs.min(16) || size_of_image == 0 || size_of_image > 0x1000_0000 {
        return Err(trunc("optional header"));
    }
    let dir = |k: usize| -> Result<Option<(u32, u32)>, LoadError> {
        if k >= ndirs {
            return Ok(None);
        }
        let rva = u32_at(file, opt + 96 + 8 * k, "data directory")?;
        let size = u32_at(file, opt + 100 + 8 * k, "data directory")?;
        Ok((rva != 0 && size != 0).then_some((rva, size)))
    };

    let mut image = vec![0u8; size_of_image as usize];
    let hdr = (size_of_headers as usize).min(file.len()).min(image.len());
    image[..hdr].copy_from_slice(&file[..hdr]);
    let mut sections = Vec::new();
    let st = opt + opt_size;
    for k in 0..nsections {
        let s = st + 40 * k;
        let raw_name = file.get(s..s + 8).ok_or_else(|| trunc("section table"))?;
        let name = String::from_utf8_lossy(raw_name)
            .trim_end_matches('\0')
            .to_string();
        let sec = Section {
            name,
            virtual_size: u32_at(file, s + 8, "section")?,
            rva: u32_at(file, s + 12, "section")?,
            raw_size: u32_at(file, s + 16, "section")?,
            raw_offset: u32_at(file, s + 20, "section")?,
            characteristics: u32_at(file, s + 36, "section")?,
        };
        let vsize = if sec.virtual_size == 0 {
            sec.raw_size
        } else {
            sec.virtual_size
        };
        let end = sec.rva as u64 + vsize as u64;
        if end > size_of_image as u64 {
            return Err(trunc(&format!("section {} beyond image", sec.name)));
        }
        let n = sec.raw_size.min(vsize) as usize;
        let src = file
            .get(sec.raw_offset as usize..sec.raw_offset as usize + n)
            .ok_or_else(|| trunc(&format!("section {} raw data", sec.name)))?;
        image[sec.rva as usize..sec.rva as usize + n].copy_from_slice(src);
        sections.push(sec);
    }

    let mut imports = Vec::new();
    if let Some((rva, _)) = dir(DIR_IMPORT)? {
        let mut d = rva as usize;
        loop {
            let ilt = u32_at(&image, d, "import descriptor")?;
            let name_rva = u32_at(&image, d + 12, "import descriptor")?;
            let iat = u32_at(&image, d + 16, "import descriptor")?;
            if ilt == 0 && name_rva == 0 && iat == 0 {
                break;
            }
            let dll = cstr_at(&image, name_rva as usize, "import dll name")?;
            let mut names = Vec::new();
            let mut t = if ilt != 0 { ilt } else { iat } as usize;
            loop {
                let thunk = u32_at(&image, t, "import thunk")?;
                if thunk == 0 {
                    break;
                }
                names.push(if thunk & 0x8000_0000 != 0 {
                    ImportName::Ordinal(thunk as u16)
                } else {
                    ImportName::Name(cstr_at(&image, thunk as usize + 2, "import name")?)
                });
                t += 4;
            }
            imports.push(ImportDll {
                dll,
                iat_rva: iat,
                names,
            });
            d += 20;
        }
    }

    let mut exports = BTreeMap::new();
    let mut export_ordinals = BTreeMap::new();
    if let Some((rva, _)) = dir(DIR_EXPORT)? {
        let e = rva as usize;
        let ord_base = u32_at(&image, e + 16, "export directory")?;
        let nfuncs = u32_at(&image, e + 20, "export directory")? as usize;
        let nnames = u32_at(&image, e + 24, "export directory")? as usize;
        let funcs = u32_at(&image, e + 28, "export directory")? as usize;
        let names = u32_at(&image, e + 32, "export directory")? as usize;
        let ords = u32_at(&image, e + 36, "export directory")? as usize;
        for k in 0..nfuncs {
            let f = u32_at(&image, funcs + 4 * k, "export address")?;
            if f != 0 {
                export_ordinals.insert((ord_base as usize + k) as u16, f);
            }
        }
        for k in 0..nnames {
            let name = cstr_at(
                &image,
                u32_at(&image, names + 4 * k, "export name")? as usize,
                "export name",
            )?;
            let idx = u16_at(&image, ords + 2 * k, "export ordinal")? as usize;
            let f = u32_at(&image, funcs + 4 * idx, "export address")?;
            exports.insert(name.to_lowercase(), f);
        }
    }

    Ok(PeImage {
        preferred_base,
        entry_rva,
        size_of_image,
        is_dll: characteristics & 0x2000 != 0,
        sections,
        imports,
        exports,
        export_ordinals,
        relocs: dir(DIR_BASERELOC)?,
        image,
    })
}

/// Applies HIGHLOW base relocations for a move by `delta`.
fn relocate(pe: &mut PeImage, delta: u32) -> Result<(), LoadError> {
    let Some((rva, size)) = pe.relocs else {
        return Ok(());
    };
    let mut b = rva as usize;
    let end = (rva + size) as usize;
    while b + 8 <= end {
        let page = u32_at(&pe.image, b, "relocation block")?;
        let block = u32_at(&pe.image, b + 4, "relocation block")? as usize;
        if block < 8 {
            break;
        }
        for k in 0..(block - 8) / 2 {
            let e = u16_at(&pe.image, b + 8 + 2 * k, "relocation entry")?;
            match e >> 12 {
                0 => {}
                3 => {
                    let at = page as usize + (e & 0xFFF) as usize;
                    let v = u32_at(&pe.image, at, "relocation target")?.wrapping_add(delta);
                    pe.image[at..at + 4].copy_from_slice(&v.to_le_bytes());
                }
                t => return Err(LoadError::BadRelocation(t)),
            }
        }
        b += block;
    }
    Ok(())
}

/// How an import slot was bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Native(usize),
    VfsDll { path: String, export: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportResolution {
    pub dll: String,
    pub name: String,
    pub slot_va: u32,
    pub va: u32,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedImage {
    pub name: String,
    pub base: u32,
    pub entry_va: u32,
    /// Every module loaded for this image, dependencies first.
    pub images: Vec<ModuleInfo>,
    pub imports: Vec<ImportResolution>,
}

/// VA of shim `idx`'s trampoline.
pub fn shim_va(idx: usize) -> u32 {
    TRAMPOLINE_BASE + 4 * idx as u32
}

pub fn shim_index(name: &str) -> Option<usize> {
    SHIMS.iter().position(|(n, _)| n.eq_ignore_ascii_case(name))
}

fn shim_for(dll: &str, name: &ImportName) -> Option<usize> {
    match name {
        ImportName::Name(n) if dll.eq_ignore_ascii_case(SHIM_DLL) => shim_index(n),
        _ => None,
    }
}

/// Maps the trampoline stubs once.
pub fn ensure_trampolines(mmu: &mut Mmu) -> Result<(), LoadError> {
    if mmu.is_mapped(TRAMPOLINE_BASE) {
        return Ok(());
    }
    let size = (SHIMS.len() * 4) as u64;
    mmu.pmap_named(
        size,
        TRAMPOLINE_BASE,
        prot::FIXED | prot::READ | prot::EXEC,
        0,
        u32::MAX,
        "trampolines",
    )?;
    let mut stubs = Vec::with_capacity(size as usize);
    for k in 0..SHIMS.len() as u16 {
        stubs.extend_from_slice(&[0x0F, 0x04]);
        stubs.extend_from_slice(&k.to_le_bytes());
    }
    mmu.write_memory(TRAMPOLINE_BASE, &stubs)?;
    Ok(())
}

/// Mutable pieces of a machine the loader works on.
pub struct LoadCtx<'a> {
    pub mmu: &'a mut Mmu,
    pub os: &'a mut OsState,
    pub probes: &'a mut Probes,
    pub pages_mapped: &'a mut u64,
}

fn module_key(path: &str) -> String {
    let base = path
        .rsplit(['/', '\\'])
        .next()
        .unwrap_or(path)
        .to_lowercase();
    if base.contains('.') {
        base
    } else {
        format!("{base}.dll")
    }
}

fn dll_path(name: &str) -> String {
    format!("{SYSTEM_DIR}/{}", module_key(name))
}

impl LoadCtx<'_> {
    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, LoadError> {
        let vfs = self.os.vfs.as_mut().ok_or(LoadError::NoVfs)?;
        let data = vfs.read_all(path)?;
        let mut ctx = ProbeContext {
            text: Some(path),
            size: data.len() as u32,
            ..Default::default()
        };
        self.probes.fire(probes::VFS_OPEN, &mut ctx);
        Ok(data)
    }

    fn map_image(&mut self, pe: &mut PeImage, label: &str) -> Result<u32, LoadError> {
        let size = pe.size_of_image as u64;
        let flags = prot::FIXED | prot::RWX;
        let base = match self
            .mmu
            .pmap_named(size, pe.preferred_base, flags, 0, u32::MAX, label)
        {
            Ok(b) => b,
            Err(MmuError::FixedCollision(_)) | Err(MmuError::RangeExhausted { .. })
                if pe.relocs.is_some() =>
            {
                let b = self.mmu.pmap_named(
                    size,
                    DYNAMIC_MIN,
                    prot::RWX,
                    DYNAMIC_MIN,
                    DYNAMIC_MAX,
                    label,
                )?;
                relocate(pe, b.wrapping_sub(pe.preferred_base))?;
                b
            }
            Err(MmuError::FixedCollision(_)) | Err(MmuError::RangeExhausted { .. }) => {
                return Err(LoadError::FixedBaseCollision(pe.preferred_base));
            }
            Err(e) => return Err(e.into()),
        };
        *self.pages_mapped += size.div_ceil(PAGE_SIZE as u64);
        self.mmu.write_memory(base, &pe.image)?;
        Ok(base)
    }

    /// Loads `path` and, recursively, the DLLs it imports from.
    pub fn load(&mut self, path: &str) -> Result<LoadedImage, LoadError> {
        ensure_trampolines(self.mmu)?;
        let mut loaded = LoadedImage {
            name: module_key(path),
            base: 0,
            entry_va: 0,
            images: Vec::new(),
            imports: Vec::new(),
        };
        let m = self.load_module(path, &mut Vec::new(), &mut loaded)?;
        loaded.base = m.base;
        loaded.entry_va = m.entry;
        Ok(loaded)
    }

    fn load_module(
        &mut self,
        path: &str,
        stack: &mut Vec<String>,
        out: &mut LoadedImage,
    ) -> Result<ModuleInfo, LoadError> {
        let key = module_key(path);
        if let Some(m) = self.os.modules.get(&key) {
            return Ok(m.clone());
        }
        if stack.contains(&key) {
            return Err(LoadError::ImportCycle(key));
        }
        let file = self.read_file(path)?;
        let mut pe = parse_pe(&file)?;
        let base = self.map_image(&mut pe, &key)?;
        stack.push(key.clone());
        for imp in &pe.imports {
            for (k, name) in imp.names.iter().enumerate() {
                let slot_va = base + imp.iat_rva + 4 * k as u32;
                let (va, provenance) = match shim_for(&imp.dll, name) {
                    Some(idx) => (shim_va(idx), Provenance::Native(idx)),
                    None => {
                        let unresolved = || LoadError::UnresolvedImport {
                            dll: imp.dll.clone(),
                            name: name.to_string(),
                        };
                        let dpath = dll_path(&imp.dll);
                        let dll = match self.load_module(&dpath, stack, out) {
                            Ok(m) => m,
                            Err(LoadError::Vfs(VfsError::NotFound(_))) | Err(LoadError::NoVfs) => {
                                return Err(unresolved())
                            }
                            Err(e) => return Err(e),
                        };
                        let va = match name {
                            ImportName::Name(n) => dll.exports.get(&n.to_lowercase()).copied(),
                            ImportName::Ordinal(o) => dll.exports.get(&format!("#{o}")).copied(),
                        };
                        (
                            va.ok_or_else(unresolved)?,
                            Provenance::VfsDll {
                                path: dpath,
                                export: name.to_string(),
                            },
                        )
                    }
                };
                self.mmu.write_u32(slot_va, va)?;
                let text = format!("{}!{name}", imp.dll);
                let mut ctx = ProbeContext {
                    addr: slot_va,
                    value: va as u64,
                    text: Some(&text),
                    ..Default::default()
                };
                self.probes.fire(probes::IMPORT_RESOLVED, &mut ctx);
                out.imports.push(ImportResolution {
                    dll: imp.dll.clone(),
                    name: name.to_string(),
                    slot_va,
                    va,
                    provenance,
                });
            }
        }
        stack.pop();
        let mut exports: BTreeMap<String, u32> = pe
            .exports
            .iter()
            .map(|(n, rva)| (n.clone(), base + rva))
            .collect();
        for (o, rva) in &pe.export_ordinals {
            exports.insert(format!("#{o}"), base + rva);
        }
        let info = ModuleInfo {
            name: key.clone(),
            base,
            entry: base + pe.entry_rva,
            exports,
        };
        self.os.modules.insert(key, info.clone());
        out.images.push(info.clone());
        Ok(info)
    }
}

/// Loads a PE from the machine's VFS and makes it the main module.
pub fn load_pe(engine: &mut Engine, path: &str) -> Result<LoadedImage, LoadError> {
    let m = &mut engine.machine;
    let mut pages = 0;
    let loaded = LoadCtx {
        mmu: &mut m.mmu,
        os: &mut m.os,
        probes: &mut m.probes,
        pages_mapped: &mut pages,
    }
    .load(path)?;
    m.counters.bump(Counter::PagesMapped, pages);
    m.os.main = Some(loaded.name.clone());
    Ok(loaded)
}

/// Maps the stack and sets the initial register file for `image`.
pub fn setup_process(
    state: &mut MachineState,
    mmu: &mut Mmu,
    entry_va: u32,
) -> Result<(), LoadError> {
    ensure_trampolines(mmu)?;
    let bottom = STACK_TOP - STACK_SIZE;
    mmu.pmap_named(
        STACK_SIZE as u64,
        bottom,
        prot::FIXED | prot::RW,
        0,
        u32::MAX,
        "stack",
    )?;
    let esp = STACK_TOP - 16;
    mmu.write_u32(esp, shim_va(0))?;
    *state = MachineState::new();
    state.set(regs::ESP, esp);
    state.set(regs::EBP, esp);
    state.set(regs::EFLAGS, eflags::INITIAL);
    state.pc = entry_va;
    Ok(())
}

/// Maps raw code at `base_va` and returns the entry point.
pub fn load_flat(mmu: &mut Mmu, bytes: &[u8], base_va: u32) -> Result<u32, LoadError> {
    if bytes.is_empty() {
        return Err(LoadError::EmptyImage);
    }
    mmu.pmap_named(
        bytes.len() as u64,
        base_va & !0xFFF,
        prot::FIXED | prot::RWX,
        0,
        u32::MAX,
        "flat",
    )?;
    mmu.write_memory(base_va, bytes)?;
    Ok(base_va)
}

/// Installs the shim handlers, loads `path` and prepares the process.
pub fn load_process(engine: &mut Engine, path: &str) -> Result<LoadedImage, LoadError> {
    install_shims(engine);
    let loaded = load_pe(engine, path)?;
    let m = &mut engine.machine;
    setup_process(&mut m.state, &mut m.mmu, loaded.entry_va)?;
    m.counters
        .bump(Counter::PagesMapped, (STACK_SIZE as u64) / PAGE_SIZE as u64);
    Ok(loaded)
}

/// Stack-argument view for a stdcall shim.
struct Call {
    ret: u32,
    esp: u32,
}

impl Call {
    fn new(env: &SysEnv<'_>) -> Result<Call, String> {
        let esp = env.state.get(regs::ESP);
        let ret = env.mmu.read_u32(esp).map_err(|e| e.to_string())?;
        Ok(Call { ret, esp })
    }

    fn arg(&self, env: &SysEnv<'_>, k: u32) -> Result<u32, String> {
        env.mmu
            .read_u32(self.esp + 4 + 4 * k)
            .map_err(|e| e.to_string())
    }

    /// Pops the return address and `nargs`, sets EAX and the resume PC.
    fn finish(self, env: &mut SysEnv<'_>, nargs: u32, eax: u32) -> Result<SysAction, String> {
        env.state.set(regs::ESP, self.esp + 4 + 4 * nargs);
        env.state.set(regs::EAX, eax);
        env.state.set(regs::NEXT_PC, self.ret);
        Ok(SysAction::Continue)
    }
}

fn guest_path(p: &str) -> String {
    let p = p.replace('\\', "/");
    let p = match p.as_bytes() {
        [d, b':', ..] if d.is_ascii_alphabetic() => p[2..].to_string(),
        _ => p,
    };
    p.trim_start_matches('/').to_string()
}

fn find_module_by_base(os: &OsState, base: u32) -> Option<&ModuleInfo> {
    os.modules.values().find(|m| m.base == base)
}

fn shim(idx: usize, env: &mut SysEnv<'_>) -> Result<SysAction, String> {
    env.counters.bump(Counter::ApiCalls, 1);
    let nargs = SHIMS[idx].1;
    let call = Call::new(env)?;
    let a = |k| call.arg(env, k);
    let eax = match SHIMS[idx].0 {
        "ExitProcess" => return Ok(SysAction::Exit(a(0)?)),
        "GetTickCount" => {
            env.os.ticks += 16;
            env.os.ticks as u32
        }
        "GetSystemTimeAsFileTime" => {
            let ptr = a(0)?;
            let ft = FILETIME_EPOCH + env.os.ticks * 10_000;
            env.mmu
                .write_memory(ptr, &ft.to_le_bytes())
                .map_err(|e| e.to_string())?;
            0
        }
        "WriteFile" => {
            let (h, buf, n, written) = (a(0)?, a(1)?, a(2)?, a(3)?);
            let data = env
                .mmu
                .read_vec(buf, n as usize)
                .map_err(|e| e.to_string())?;
            let ok = if h == STD_OUTPUT_HANDLE {
                env.os.stdout.extend_from_slice(&data);
                true
            } else {
                env.os
                    .vfs
                    .as_mut()
                    .is_some_and(|v| v.write(h as i32, &data).is_ok())
            };
            if ok && written != 0 {
                env.mmu.write_u32(written, n).map_err(|e| e.to_string())?;
            }
            ok as u32
        }
        "ReadFile" => {
            let (h, buf, n, read) = (a(0)?, a(1)?, a(2)?, a(3)?);
            match env.os.vfs.as_mut().map(|v| v.read(h as i32, n as usize)) {
                Some(Ok(data)) => {
                    env.mmu
                        .write_memory(buf, &data)
                        .map_err(|e| e.to_string())?;
                    if read != 0 {
                        env.mmu
                            .write_u32(read, data.len() as u32)
                            .map_err(|e| e.to_string())?;
                    }
                    1
                }
                _ => 0,
            }
        }
        "CreateFileA" => {
            let path = env.mmu.read_cstr(a(0)?, 260).map_err(|e| e.to_string())?;
            let (access, disposition) = (a(1)?, a(4)?);
            let write = access & 0x4000_0000 != 0;
            let mode = match (disposition, write) {
                (1 | 2, _) => "w+",
                (5, _) => "w+",
                (4, true) => "a+",
                (_, true) => "r+",
                _ => "r",
            };
            let path = guest_path(&path);
            match env.os.vfs.as_mut() {
                Some(v) => match v.open(&path, mode) {
                    Ok(fd) => {
                        if mode == "a+" {
                            v.seek(fd, 0, Whence::Set).map_err(|e| e.to_string())?;
                        }
                        let mut ctx = ProbeContext {
                            text: Some(&path),
                            value: fd as u64,
                            ..Default::default()
                        };
                        env.probes.fire(probes::VFS_OPEN, &mut ctx);
                        fd as u32
                    }
                    Err(_) => INVALID_HANDLE_VALUE,
                },
                None => INVALID_HANDLE_VALUE,
            }
        }
        "CloseHandle" => {
            let h = a(0)?;
            env.os
                .vfs
                .as_mut()
                .is_some_and(|v| v.close(h as i32).is_ok()) as u32
        }
        "VirtualAlloc" => {
            let (addr, size) = (a(0)?, a(1)?);
            let r = if addr != 0 {
                env.mmu.pmap_named(
                    size as u64,
                    addr & !0xFFF,
                    prot::FIXED | prot::RWX,
                    0,
                    u32::MAX,
                    "VirtualAlloc",
                )
            } else {
                env.mmu.pmap_named(
                    size as u64,
                    DYNAMIC_MIN,
                    prot::RWX,
                    DYNAMIC_MIN,
                    DYNAMIC_MAX,
                    "VirtualAlloc",
                )
            };
            match r {
                Ok(va) => {
                    env.counters.bump(
                        Counter::PagesMapped,
                        (size as u64).div_ceil(PAGE_SIZE as u64),
                    );
                    va
                }
                Err(_) => 0,
            }
        }
        "VirtualFree" => {
            let addr = a(0)?;
            match env.mmu.region_at(addr).map(|r| (r.start, r.end())) {
                Some((start, end)) if start == addr => {
                    env.mmu.pmap_remove(start, end);
                    1
                }
                _ => 0,
            }
        }
        "GetModuleHandleA" => {
            let p = a(0)?;
            if p == 0 {
                env.os
                    .main
                    .as_ref()
                    .and_then(|k| env.os.modules.get(k))
                    .map_or(0, |m| m.base)
            } else {
                let key = module_key(&env.mmu.read_cstr(p, 260).map_err(|e| e.to_string())?);
                match env.os.modules.get(&key) {
                    Some(m) => m.base,
                    None if key == SHIM_DLL => TRAMPOLINE_BASE,
                    None => 0,
                }
            }
        }
        "LoadLibraryA" => {
            let key = module_key(&env.mmu.read_cstr(a(0)?, 260).map_err(|e| e.to_string())?);
            if let Some(m) = env.os.modules.get(&key) {
                m.base
            } else if key == SHIM_DLL {
                TRAMPOLINE_BASE
            } else {
                let mut pages = 0;
                let r = LoadCtx {
                    mmu: env.mmu,
                    os: env.os,
                    probes: env.probes,
                    pages_mapped: &mut pages,
                }
                .load(&dll_path(&key));
                env.counters.bump(Counter::PagesMapped, pages);
                r.map_or(0, |l| l.base)
            }
        }
        "GetProcAddress" => {
            let (h, p) = (a(0)?, a(1)?);
            let name = if p < 0x10000 {
                format!("#{p}")
            } else {
                env.mmu.read_cstr(p, 260).map_err(|e| e.to_string())?
            };
            if h == TRAMPOLINE_BASE {
                shim_index(&name).map_or(0, shim_va)
            } else {
                find_module_by_base(env.os, h)
                    .and_then(|m| m.exports.get(&name.to_lowercase()).copied())
                    .unwrap_or(0)
            }
        }
        other => return Err(format!("no handler for {other}")),
    };
    call.finish(env, nargs, eax)
}

/// Registers a handler for every shim trampoline.
pub fn install_shims(engine: &mut Engine) {
    for idx in 0..SHIMS.len() {
        engine.register_syscall(
            sys::TRAP_BASE + idx as u32,
            Box::new(move |env| shim(idx, env)),
        );
    }
}

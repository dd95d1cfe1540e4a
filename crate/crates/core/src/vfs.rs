//! Virtual file system over an immutable container image.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "PVFS" | version u32 = 1 | entry_count u32
//! entry*: path_len u16 | path (UTF-8, '/' separated) | offset u64 | size u64
//!         | attributes u32 | mode u32
//! data blobs
//! ```
//!
//! Offsets are absolute positions in the image. Entries are sorted by
//! normalized path. An entry with the empty path describes the root; its
//! [`WINDOWS_PROFILE`] attribute makes path lookups case-insensitive.
//!
//! Mutations never touch the image: the first write to a container file
//! copies it into an in-memory overlay. Files are nodes in an arena and
//! the namespace maps names to nodes, so open handles survive rename and
//! unlink the UNIX way.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PVFS";
pub const VERSION: u32 = 1;
/// Root-entry attribute selecting case-insensitive (Windows) paths.
pub const WINDOWS_PROFILE: u32 = 0x1;
/// Simultaneously open descriptors per instance.
pub const MAX_FDS: usize = 4096;
pub const FIRST_FD: i32 = 3;
/// Sidecar written by [`unpack`] so that [`pack_dir`] can restore
/// attributes and modes exactly.
pub const META_FILE: &str = ".pvfs-meta";
/// Container file seeding the registry provider.
pub const REGISTRY_SEED: &str = "registry.txt";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VfsError {
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("corrupt entry table: {0}")]
    CorruptEntryTable(String),
    #[error("no such file: {0}")]
    NotFound(String),
    #[error("bad file descriptor {0}")]
    BadFd(i32),
    #[error("container is read-only and the overlay is disabled")]
    ReadOnlyContainerViolation,
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("descriptor {0} not open for {1}")]
    BadMode(i32, &'static str),
    #[error("too many open files")]
    TooManyOpenFiles,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for VfsError {
    fn from(e: std::io::Error) -> Self {
        VfsError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    pub offset: u64,
    pub size: u64,
    pub attributes: u32,
    pub mode: u32,
}

/// Checks and canonicalizes a path: `/` separators, no empty, `.` or `..`
/// components, no leading slash.
pub fn clean_path(p: &str) -> Result<String, VfsError> {
    let p = p.replace('\\', "/");
    let trimmed = p.trim_start_matches('/');
    if trimmed.is_empty() {
        return Ok(String::new());
    }
    let mut parts = Vec::new();
    for c in trimmed.split('/') {
        if c.is_empty() || c == "." || c == ".." || c.contains('\0') {
            return Err(VfsError::InvalidPath(p.clone()));
        }
        parts.push(c);
    }
    Ok(parts.join("/"))
}

fn key_for(path: &str, windows: bool) -> String {
    if windows {
        path.to_lowercase()
    } else {
        path.to_string()
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], VfsError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.b.len());
        let end = end.ok_or_else(|| {
            VfsError::CorruptEntryTable(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, VfsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, VfsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, VfsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A parsed, validated container image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub image: Vec<u8>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn parse(image: Vec<u8>) -> Result<Container, VfsError> {
        if image.len() < 4 || &image[..4] != MAGIC {
            return Err(VfsError::BadMagic);
        }
        let mut r = Reader { b: &image, pos: 4 };
        let version = r.u32().map_err(|_| VfsError::BadMagic)?;
        if version != VERSION {
            return Err(VfsError::BadVersion(version));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let raw = r.take(n)?;
            let path = std::str::from_utf8(raw)
                .map_err(|_| VfsError::CorruptEntryTable("path is not UTF-8".into()))?
                .to_string();
            if clean_path(&path).ok().as_deref() != Some(path.as_str()) {
                return Err(VfsError::CorruptEntryTable(format!(
                    "non-canonical path {path:?}"
                )));
            }
            let e = Entry {
                path,
                offset: r.u64()?,
                size: r.u64()?,
                attributes: r.u32()?,
                mode: r.u32()?,
            };
            let end = e.offset.checked_add(e.size);
            if end.is_none_or(|end| end > image.len() as u64) {
                return Err(VfsError::CorruptEntryTable(format!(
                    "{} out of bounds",
                    e.path
                )));
            }
            entries.push(e);
        }
        let windows = entries
            .first()
            .is_some_and(|e| e.path.is_empty() && e.attributes & WINDOWS_PROFILE != 0);
        for pair in entries.windows(2) {
            if key_for(&pair[0].path, windows) >= key_for(&pair[1].path, windows) {
                return Err(VfsError::CorruptEntryTable(format!(
                    "unsorted or duplicate {:?}",
                    pair[1].path
                )));
            }
        }
        Ok(Container { image, entries })
    }

    pub fn windows_profile(&self) -> bool {
        self.entries
            .first()
            .is_some_and(|e| e.path.is_empty() && e.attributes & WINDOWS_PROFILE != 0)
    }

    pub fn data(&self, e: &Entry) -> &[u8] {
        &self.image[e.offset as usize..(e.offset + e.size) as usize]
    }

    /// Builds a canonical image: entries sorted, blobs in entry order.
    pub fn build(files: Vec<(Entry, Vec<u8>)>) -> Result<Vec<u8>, VfsError> {
        let windows = files
            .iter()
            .any(|(e, _)| e.path.is_empty() && e.attributes & WINDOWS_PROFILE != 0);
        let mut files: Vec<(String, Entry, Vec<u8>)> = files
            .into_iter()
            .map(|(mut e, d)| {
                e.path = clean_path(&e.path)?;
                Ok((key_for(&e.path, windows), e, d))
            })
            .collect::<Result<_, VfsError>>()?;
        files.sort_by(|a, b| a.0.cmp(&b.0));
        for w in files.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(VfsError::CorruptEntryTable(format!(
                    "duplicate path {:?}",
                    w[1].1.path
                )));
            }
        }
        let table: usize = files.iter().map(|(_, e, _)| 2 + e.path.len() + 24).sum();
        let mut offset = (12 + table) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(files.len() as u32).to_le_bytes());
        for (_, e, d) in &files {
            if e.path.len() > u16::MAX as usize {
                return Err(VfsError::InvalidPath(e.path.clone()));
            }
            out.extend_from_slice(&(e.path.len() as u16).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(d.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.attributes.to_le_bytes());
            out.extend_from_slice(&e.mode.to_le_bytes());
            offset += d.len() as u64;
        }
        for (_, _, d) in &files {
            out.extend_from_slice(d);
        }
        Ok(out)
    }
}

/// Packs a directory tree. A [`META_FILE`] sidecar, when present, supplies
/// attributes and modes (and the root entry).
pub fn pack_dir(dir: &Path) -> Result<Vec<u8>, VfsError> {
    let mut meta: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(dir.join(META_FILE)) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.splitn(3, ' ');
            let bad = || VfsError::CorruptEntryTable(format!("bad meta line {line:?}"));
            let a = u32::from_str_radix(it.next().ok_or_else(bad)?, 16).map_err(|_| bad())?;
            let m = u32::from_str_radix(it.next().ok_or_else(bad)?, 8).map_err(|_| bad())?;
            meta.insert(it.next().unwrap_or("").to_string(), (a, m));
        }
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut kids: Vec<_> = fs::read_dir(&d)?.collect::<Result<_, _>>()?;
        kids.sort_by_key(|e| e.file_name());
        for k in kids {
            let p = k.path();
            if k.file_type()?.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p
                .strip_prefix(dir)
                .map_err(|e| VfsError::Io(e.to_string()))?;
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel == META_FILE {
                continue;
            }
            let (attributes, mode) = meta
                .get(&rel)
                .copied()
                .unwrap_or((0, default_mode(&k.metadata()?)));
            files.push((
                Entry {
                    path: rel,
                    offset: 0,
                    size: 0,
                    attributes,
                    mode,
                },
                fs::read(&p)?,
            ));
        }
    }
    if let Some((a, m)) = meta.get("") {
        files.push((
            Entry {
                path: String::new(),
                offset: 0,
                size: 0,
                attributes: *a,
                mode: *m,
            },
            Vec::new(),
        ));
    }
    Container::build(files)
}

#[cfg(unix)]
fn default_mode(m: &fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    m.permissions().mode() & 0o7777
}

#[cfg(not(unix))]
fn default_mode(_: &fs::Metadata) -> u32 {
    0o644
}

/// Extracts every entry into `dir` and writes the [`META_FILE`] sidecar.
pub fn unpack(image: &[u8], dir: &Path) -> Result<(), VfsError> {
    let c = Container::parse(image.to_vec())?;
    fs::create_dir_all(dir)?;
    let mut meta = String::new();
    for e in &c.entries {
        meta.push_str(&format!("{:x} {:o} {}\n", e.attributes, e.mode, e.path));
        if e.path.is_empty() {
            continue;
        }
        let p = dir.join(&e.path);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, c.data(e))?;
    }
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

/// `ls`-style listing: `<mode octal> <attributes hex> <size> <path>`.
pub fn list(image: &[u8]) -> Result<Vec<String>, VfsError> {
    let c = Container::parse(image.to_vec())?;
    Ok(c.entries
        .iter()
        .map(|e| {
            format!(
                "{:06o} {:08x} {:>10} {}",
                e.mode,
                e.attributes,
                e.size,
                if e.path.is_empty() { "/" } else { &e.path }
            )
        })
        .collect())
}

/// fopen-style open mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenMode {
    pub read: bool,
    pub write: bool,
    pub append: bool,
    pub create: bool,
    pub truncate: bool,
}

impl OpenMode {
    pub const READ: OpenMode = OpenMode {
        read: true,
        write: false,
        append: false,
        create: false,
        truncate: false,
    };

    /// Parses `r`, `w`, `a`, optionally followed by `+` (and `b`, ignored).
    pub fn parse(s: &str) -> Result<OpenMode, VfsError> {
        let plus = s.contains('+');
        let m = match s.chars().next() {
            Some('r') => OpenMode {
                read: true,
                write: plus,
                append: false,
                create: false,
                truncate: false,
            },
            Some('w') => OpenMode {
                read: plus,
                write: true,
                append: false,
                create: true,
                truncate: true,
            },
            Some('a') => OpenMode {
                read: plus,
                write: true,
                append: true,
                create: true,
                truncate: false,
            },
            _ => return Err(VfsError::InvalidPath(format!("mode {s:?}"))),
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Whence {
    Set,
    Cur,
    End,
}

/// Where a file's bytes currently live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    Container,
    Overlay,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stat {
    pub size: u64,
    pub attributes: u32,
    pub mode: u32,
    pub base: Base,
}

#[derive(Debug, Clone)]
enum Content {
    Container { offset: u64, size: u64 },
    Overlay(Vec<u8>),
}

#[derive(Debug, Clone)]
struct Node {
    content: Content,
    attributes: u32,
    mode: u32,
}

/// Synthetic files under a path prefix.
pub trait SpecialProvider {
    fn prefix(&self) -> &str;
    /// Current content of `rel` (the path below the prefix), if it exists.
    fn read(&mut self, rel: &str) -> Option<Vec<u8>>;
    /// Replaces the content of `rel`; false when the file is read-only.
    fn write(&mut self, rel: &str, data: &[u8]) -> bool;
    fn remove(&mut self, _rel: &str) -> bool {
        false
    }
}

/// `dev/null`: reads are empty, writes vanish.
pub struct DevNull;

impl SpecialProvider for DevNull {
    fn prefix(&self) -> &str {
        "dev/null"
    }
    fn read(&mut self, rel: &str) -> Option<Vec<u8>> {
        rel.is_empty().then(Vec::new)
    }
    fn write(&mut self, rel: &str, _: &[u8]) -> bool {
        rel.is_empty()
    }
}

/// Key/value registry under `registry/`, keyed by the remaining path.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    pub values: BTreeMap<String, String>,
}

impl Registry {
    /// Seeds from `key = value` lines.
    pub fn from_text(text: &str) -> Self {
        let values = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| {
                (
                    k.trim().replace('\\', "/").to_lowercase(),
                    v.trim().to_string(),
                )
            })
            .collect();
        Registry { values }
    }
}

impl SpecialProvider for Registry {
    fn prefix(&self) -> &str {
        "registry"
    }
    fn read(&mut self, rel: &str) -> Option<Vec<u8>> {
        self.values
            .get(&rel.to_lowercase())
            .map(|v| v.as_bytes().to_vec())
    }
    fn write(&mut self, rel: &str, data: &[u8]) -> bool {
        if rel.is_empty() {
            return false;
        }
        self.values.insert(
            rel.to_lowercase(),
            String::from_utf8_lossy(data).into_owned(),
        );
        true
    }
    fn remove(&mut self, rel: &str) -> bool {
        self.values.remove(&rel.to_lowercase()).is_some()
    }
}

enum Target {
    Node(usize),
    Special {
        provider: usize,
        rel: String,
        buf: Vec<u8>,
    },
}

struct Handle {
    target: Target,
    pos: u64,
    mode: OpenMode,
}

pub struct Vfs {
    container: Container,
    windows: bool,
    nodes: Vec<Node>,
    /// normalized key -> (display path, node)
    names: BTreeMap<String, (String, usize)>,
    fds: BTreeMap<i32, Handle>,
    providers: Vec<Box<dyn SpecialProvider>>,
    overlay_enabled: bool,
}

impl std::fmt::Debug for Vfs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vfs")
            .field("files", &self.names.len())
            .field("open", &self.fds.len())
            .finish()
    }
}

impl Vfs {
    /// Validates the image and mounts it with `registry/` and `dev/null`.
    pub fn init(image: Vec<u8>) -> Result<Vfs, VfsError> {
        let container = Container::parse(image)?;
        let windows = container.windows_profile();
        let mut v = Vfs {
            container,
            windows,
            nodes: Vec::new(),
            names: BTreeMap::new(),
            fds: BTreeMap::new(),
            providers: Vec::new(),
            overlay_enabled: true,
        };
        for e in v.container.entries.clone() {
            if e.path.is_empty() {
                continue;
            }
            let idx = v.nodes.len();
            v.nodes.push(Node {
                content: Content::Container {
                    offset: e.offset,
                    size: e.size,
                },
                attributes: e.attributes,
                mode: e.mode,
            });
            v.names
                .insert(key_for(&e.path, windows), (e.path.clone(), idx));
        }
        let seed = v
            .read_all(REGISTRY_SEED)
            .map(|d| String::from_utf8_lossy(&d).into_owned())
            .unwrap_or_default();
        v.add_provider(Box::new(Registry::from_text(&seed)));
        v.add_provider(Box::new(DevNull));
        Ok(v)
    }

    /// An empty case-sensitive file system.
    pub fn empty() -> Vfs {
        Vfs::init(Container::build(Vec::new()).expect("empty image")).expect("valid image")
    }

    pub fn add_provider(&mut self, p: Box<dyn SpecialProvider>) {
        self.providers.push(p);
    }

    pub fn set_overlay_enabled(&mut self, on: bool) {
        self.overlay_enabled = on;
    }

    pub fn windows_profile(&self) -> bool {
        self.windows
    }

    /// The untouched container image.
    pub fn image(&self) -> &[u8] {
        &self.container.image
    }

    fn key(&self, path: &str) -> Result<(String, String), VfsError> {
        let clean = clean_path(path)?;
        if clean.is_empty() {
            return Err(VfsError::InvalidPath(path.to_string()));
        }
        Ok((key_for(&clean, self.windows), clean))
    }

    fn provider_for(&self, clean: &str) -> Option<(usize, String)> {
        let lower = clean.to_lowercase();
        self.providers.iter().enumerate().find_map(|(i, p)| {
            let pre = p.prefix();
            let cmp = if self.windows { lower.as_str() } else { clean };
            if cmp == pre {
                Some((i, String::new()))
            } else {
                cmp.strip_prefix(pre)
                    .and_then(|r| r.strip_prefix('/'))
                    .map(|_| (i, clean[pre.len() + 1..].to_string()))
            }
        })
    }

    fn node_data<'a>(&'a self, n: &'a Node) -> &'a [u8] {
        match &n.content {
            Content::Container { offset, size } => {
                &self.container.image[*offset as usize..(*offset + *size) as usize]
            }
            Content::Overlay(v) => v,
        }
    }

    fn alloc_fd(&self) -> Result<i32, VfsError> {
        if self.fds.len() >= MAX_FDS {
            return Err(VfsError::TooManyOpenFiles);
        }
        let mut fd = FIRST_FD;
        for k in self.fds.keys() {
            if *k != fd {
                break;
            }
            fd += 1;
        }
        Ok(fd)
    }

    fn make_private(&mut self, idx: usize) -> Result<(), VfsError> {
        if let Content::Container { .. } = self.nodes[idx].content {
            if !self.overlay_enabled {
                return Err(VfsError::ReadOnlyContainerViolation);
            }
            let data = self.node_data(&self.nodes[idx]).to_vec();
            self.nodes[idx].content = Content::Overlay(data);
        }
        Ok(())
    }

    pub fn open(&mut self, path: &str, mode: &str) -> Result<i32, VfsError> {
        let mode = OpenMode::parse(mode)?;
        let (key, clean) = self.key(path)?;
        let fd = self.alloc_fd()?;
        if let Some((p, rel)) = self.provider_for(&clean) {
            let existing = self.providers[p].read(&rel);
            let buf = match (existing, mode.create) {
                (Some(d), _) if !mode.truncate => d,
                (Some(_), _) | (None, true) => Vec::new(),
                (None, false) => return Err(VfsError::NotFound(clean)),
            };
            let pos = if mode.append { buf.len() as u64 } else { 0 };
            self.fds.insert(
                fd,
                Handle {
                    target: Target::Special {
                        provider: p,
                        rel,
                        buf,
                    },
                    pos,
                    mode,
                },
            );
            return Ok(fd);
        }
        let idx = match self.names.get(&key) {
            Some((_, idx)) => *idx,
            None if mode.create => {
                if !self.overlay_enabled {
                    return Err(VfsError::ReadOnlyContainerViolation);
                }
                self.nodes.push(Node {
                    content: Content::Overlay(Vec::new()),
                    attributes: 0,
                    mode: 0o644,
                });
                let idx = self.nodes.len() - 1;
                self.names.insert(key, (clean, idx));
                idx
            }
            None => return Err(VfsError::NotFound(clean)),
        };
        if mode.truncate {
            if !self.overlay_enabled {
                return Err(VfsError::ReadOnlyContainerViolation);
            }
            self.nodes[idx].content = Content::Overlay(Vec::new());
        }
        let pos = if mode.append {
            self.node_data(&self.nodes[idx]).len() as u64
        } else {
            0
        };
        self.fds.insert(
            fd,
            Handle {
                target: Target::Node(idx),
                pos,
                mode,
            },
        );
        Ok(fd)
    }

    pub fn close(&mut self, fd: i32) -> Result<(), VfsError> {
        self.fds.remove(&fd).map(|_| ()).ok_or(VfsError::BadFd(fd))
    }

    pub fn read(&mut self, fd: i32, n: usize) -> Result<Vec<u8>, VfsError> {
        let h = self.fds.get(&fd).ok_or(VfsError::BadFd(fd))?;
        if !h.mode.read {
            return Err(VfsError::BadMode(fd, "reading"));
        }
        let data: &[u8] = match &h.target {
            Target::Node(i) => self.node_data(&self.nodes[*i]),
            Target::Special { buf, .. } => buf,
        };
        let start = (h.pos as usize).min(data.len());
        let end = start.saturating_add(n).min(data.len());
        let out = data[start..end].to_vec();
        self.fds.get_mut(&fd).expect("checked").pos += out.len() as u64;
        Ok(out)
    }

    pub fn write(&mut self, fd: i32, bytes: &[u8]) -> Result<usize, VfsError> {
        let h = self.fds.get(&fd).ok_or(VfsError::BadFd(fd))?;
        if !h.mode.write {
            return Err(VfsError::BadMode(fd, "writing"));
        }
        let append = h.mode.append;
        if let Target::Node(i) = h.target {
            self.make_private(i)?;
        }
        let h = self.fds.get_mut(&fd).expect("checked");
        let buf = match &mut h.target {
            Target::Node(i) => match &mut self.nodes[*i].content {
                Content::Overlay(v) => v,
                Content::Container { .. } => unreachable!("made private"),
            },
            Target::Special { buf, .. } => buf,
        };
        if append {
            h.pos = buf.len() as u64;
        }
        let pos = h.pos as usize;
        if buf.len() < pos + bytes.len() {
            buf.resize(pos + bytes.len(), 0);
        }
        buf[pos..pos + bytes.len()].copy_from_slice(bytes);
        h.pos += bytes.len() as u64;
        if let Target::Special { provider, rel, buf } = &h.target {
            if !self.providers[*provider].write(rel, buf) {
                return Err(VfsError::BadMode(fd, "writing"));
            }
        }
        Ok(bytes.len())
    }

    pub fn seek(&mut self, fd: i32, offset: i64, whence: Whence) -> Result<u64, VfsError> {
        let len = self.fstat(fd)?.size as i64;
        let h = self.fds.get_mut(&fd).ok_or(VfsError::BadFd(fd))?;
        let base = match whence {
            Whence::Set => 0,
            Whence::Cur => h.pos as i64,
            Whence::End => len,
        };
        let p = base
            .checked_add(offset)
            .filter(|p| *p >= 0)
            .ok_or(VfsError::InvalidPath(format!("seek to {offset}")))?;
        h.pos = p as u64;
        Ok(h.pos)
    }

    pub fn fstat(&self, fd: i32) -> Result<Stat, VfsError> {
        let h = self.fds.get(&fd).ok_or(VfsError::BadFd(fd))?;
        Ok(match &h.target {
            Target::Node(i) => self.node_stat(*i),
            Target::Special { buf, .. } => Stat {
                size: buf.len() as u64,
                attributes: 0,
                mode: 0o666,
                base: Base::Special,
            },
        })
    }

    fn node_stat(&self, i: usize) -> Stat {
        let n = &self.nodes[i];
        let base = match n.content {
            Content::Container { .. } => Base::Container,
            Content::Overlay(_) => Base::Overlay,
        };
        Stat {
            size: self.node_data(n).len() as u64,
            attributes: n.attributes,
            mode: n.mode,
            base,
        }
    }

    pub fn stat(&mut self, path: &str) -> Result<Stat, VfsError> {
        let (key, clean) = self.key(path)?;
        if let Some((p, rel)) = self.provider_for(&clean) {
            let d = self.providers[p]
                .read(&rel)
                .ok_or(VfsError::NotFound(clean))?;
            return Ok(Stat {
                size: d.len() as u64,
                attributes: 0,
                mode: 0o666,
                base: Base::Special,
            });
        }
        let (_, i) = self.names.get(&key).ok_or(VfsError::NotFound(clean))?;
        Ok(self.node_stat(*i))
    }

    pub fn exists(&mut self, path: &str) -> bool {
        self.stat(path).is_ok()
    }

    pub fn chmod(&mut self, path: &str, mode: u32) -> Result<(), VfsError> {
        let (key, clean) = self.key(path)?;
        let (_, i) = *self.names.get(&key).ok_or(VfsError::NotFound(clean))?;
        self.make_private(i)?;
        self.nodes[i].mode = mode;
        Ok(())
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), VfsError> {
        let (key, clean) = self.key(path)?;
        if let Some((p, rel)) = self.provider_for(&clean) {
            return if self.providers[p].remove(&rel) {
                Ok(())
            } else {
                Err(VfsError::NotFound(clean))
            };
        }
        if !self.names.contains_key(&key) {
            return Err(VfsError::NotFound(clean));
        }
        if !self.overlay_enabled {
            return Err(VfsError::ReadOnlyContainerViolation);
        }
        self.names.remove(&key);
        Ok(())
    }

    /// Moves `from` to `to`, replacing any existing `to`.
    pub fn rename(&mut self, from: &str, to: &str) -> Result<(), VfsError> {
        let (fk, fclean) = self.key(from)?;
        let (tk, tclean) = self.key(to)?;
        if self.provider_for(&fclean).is_some() || self.provider_for(&tclean).is_some() {
            return Err(VfsError::InvalidPath(format!("{from} -> {to}")));
        }
        if !self.names.contains_key(&fk) {
            return Err(VfsError::NotFound(fclean));
        }
        if !self.overlay_enabled {
            return Err(VfsError::ReadOnlyContainerViolation);
        }
        let (_, idx) = self.names.remove(&fk).expect("checked");
        self.names.insert(tk, (tclean, idx));
        Ok(())
    }

    /// Whole file content.
    pub fn read_all(&mut self, path: &str) -> Result<Vec<u8>, VfsError> {
        let fd = self.open(path, "r")?;
        let size = self.fstat(fd)?.size as usize;
        let out = self.read(fd, size);
        self.close(fd)?;
        out
    }

    /// Creates or replaces a file.
    pub fn write_all(&mut self, path: &str, data: &[u8]) -> Result<(), VfsError> {
        let fd = self.open(path, "w")?;
        let r = self.write(fd, data);
        self.close(fd)?;
        r.map(|_| ())
    }

    /// Visible paths in namespace order.
    pub fn paths(&self) -> Vec<String> {
        self.names.values().map(|(p, _)| p.clone()).collect()
    }

    pub fn open_fds(&self) -> usize {
        self.fds.len()
    }

    /// Paths whose content lives in the overlay.
    pub fn overlay_paths(&self) -> Vec<String> {
        self.names
            .values()
            .filter(|(_, i)| matches!(self.nodes[*i].content, Content::Overlay(_)))
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Writes every overlay file under `dir`; returns the paths written.
    pub fn export_overlay(&self, dir: &Path) -> Result<Vec<String>, VfsError> {
        let paths = self.overlay_paths();
        for p in &paths {
            let key = key_for(p, self.windows);
            let (_, i) = self.names[&key];
            let out = dir.join(p);
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(out, self.node_data(&self.nodes[i]))?;
        }
        Ok(paths)
    }

    /// Current view as a new canonical container image.
    pub fn snapshot_image(&self) -> Result<Vec<u8>, VfsError> {
        let mut files: Vec<(Entry, Vec<u8>)> = self
            .names
            .values()
            .map(|(p, i)| {
                let n = &self.nodes[*i];
                (
                    Entry {
                        path: p.clone(),
                        offset: 0,
                        size: 0,
                        attributes: n.attributes,
                        mode: n.mode,
                    },
                    self.node_data(n).to_vec(),
                )
            })
            .collect();
        if let Some(root) = self.container.entries.first().filter(|e| e.path.is_empty()) {
            files.push((root.clone(), Vec::new()));
        }
        Container::build(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(files: &[(&str, &[u8])], windows: bool) -> Vec<u8> {
        let mut v: Vec<(Entry, Vec<u8>)> = files
            .iter()
            .map(|(p, d)| {
                (
                    Entry {
                        path: p.to_string(),
                        offset: 0,
                        size: 0,
                        attributes: 0,
                        mode: 0o644,
                    },
                    d.to_vec(),
                )
            })
            .collect();
        if windows {
            v.push((
                Entry {
                    path: String::new(),
                    offset: 0,
                    size: 0,
                    attributes: WINDOWS_PROFILE,
                    mode: 0,
                },
                vec![],
            ));
        }
        Container::build(v).unwrap()
    }

    #[test]
    fn one_file_container() {
        let img = image(&[("windows/system32/kernel32.dll", b"MZ")], false);
        assert_eq!(&img[..4], b"PVFS");
        assert_eq!(u32::from_le_bytes(img[8..12].try_into().unwrap()), 1);
        let c = Container::parse(img.clone()).unwrap();
        assert_eq!(c.data(&c.entries[0]), b"MZ");
        // first blob sits right after the table: 12 + 2 + 29 + 24
        assert_eq!(c.entries[0].offset, 67);
    }

    #[test]
    fn header_errors() {
        let mut img = image(&[("a", b"x")], false);
        img[..4].copy_from_slice(b"XXXX");
        assert_eq!(Container::parse(img).unwrap_err(), VfsError::BadMagic);
        let mut img = image(&[("a", b"x")], false);
        img[4] = 2;
        assert_eq!(Container::parse(img).unwrap_err(), VfsError::BadVersion(2));
        let mut img = image(&[("a", b"x")], false);
        img[15..23].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            Container::parse(img),
            Err(VfsError::CorruptEntryTable(_))
        ));
    }

    #[test]
    fn unix_semantics() {
        let mut v = Vfs::init(image(&[("a.txt", b"hello")], false)).unwrap();
        assert_eq!(
            v.open("missing", "r"),
            Err(VfsError::NotFound("missing".into()))
        );
        let fd = v.open("new.txt", "w+").unwrap();
        assert_eq!(fd, 3);
        v.write(fd, b"abc").unwrap();
        v.seek(fd, 0, Whence::Set).unwrap();
        assert_eq!(v.read(fd, 3).unwrap(), b"abc");
        let fd2 = v.open("a.txt", "r").unwrap();
        assert_eq!(fd2, 4);
        v.close(fd).unwrap();
        assert_eq!(v.open("a.txt", "r").unwrap(), 3, "smallest free fd");
        assert_eq!(v.read(fd2, 100).unwrap(), b"hello");
        v.rename("a.txt", "b.txt").unwrap();
        assert_eq!(v.stat("a.txt"), Err(VfsError::NotFound("a.txt".into())));
        assert_eq!(v.stat("b.txt").unwrap().size, 5);
        v.seek(fd2, 0, Whence::Set).unwrap();
        assert_eq!(v.read(fd2, 2).unwrap(), b"he", "handle survives rename");
        v.unlink("b.txt").unwrap();
        assert!(v.stat("b.txt").is_err());
        assert_eq!(v.read(fd2, 10).unwrap(), b"llo", "handle survives unlink");
        assert_eq!(v.close(99), Err(VfsError::BadFd(99)));
    }

    #[test]
    fn copy_on_write_keeps_image() {
        let img = image(&[("a.txt", b"hello")], false);
        let mut v = Vfs::init(img.clone()).unwrap();
        let fd = v.open("a.txt", "r+").unwrap();
        v.write(fd, b"J").unwrap();
        assert_eq!(v.read_all("a.txt").unwrap(), b"Jello");
        assert_eq!(v.image(), &img[..]);
        assert_eq!(v.stat("a.txt").unwrap().base, Base::Overlay);
        v.set_overlay_enabled(false);
        assert_eq!(
            v.write_all("z", b"1"),
            Err(VfsError::ReadOnlyContainerViolation)
        );
    }

    #[test]
    fn windows_profile_is_case_insensitive() {
        let mut v = Vfs::init(image(&[("Windows/System32/KERNEL32.dll", b"MZ")], true)).unwrap();
        assert!(v.exists("windows/system32/kernel32.dll"));
        let mut u = Vfs::init(image(&[("Windows/x", b"1")], false)).unwrap();
        assert!(!u.exists("windows/x"));
    }

    #[test]
    fn special_files() {
        let mut v = Vfs::init(image(
            &[("registry.txt", b"HKLM/Software/Foo = bar\n")],
            false,
        ))
        .unwrap();
        assert_eq!(v.read_all("registry/hklm/software/foo").unwrap(), b"bar");
        v.write_all("registry/HKCU/x", b"1").unwrap();
        assert_eq!(v.read_all("registry/hkcu/x").unwrap(), b"1");
        v.write_all("dev/null", b"gone").unwrap();
        assert_eq!(v.read_all("dev/null").unwrap(), b"");
        assert!(v.overlay_paths().is_empty());
    }

    #[test]
    fn fd_limit() {
        let mut v = Vfs::init(image(&[("a", b"x")], false)).unwrap();
        for _ in 0..MAX_FDS {
            v.open("a", "r").unwrap();
        }
        assert_eq!(v.open("a", "r"), Err(VfsError::TooManyOpenFiles));
    }

    #[test]
    fn invalid_paths() {
        let mut v = Vfs::empty();
        assert!(matches!(
            v.open("../etc/passwd", "r"),
            Err(VfsError::InvalidPath(_))
        ));
        assert!(matches!(v.open("a//b", "w"), Err(VfsError::InvalidPath(_))));
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let img = image(
            &[
                ("windows/system32/kernel32.dll", b"MZ\x90"),
                ("docs/readme.txt", b"hi"),
            ],
            true,
        );
        let dir = tempfile::tempdir().unwrap();
        unpack(&img, dir.path()).unwrap();
        assert_eq!(pack_dir(dir.path()).unwrap(), img);
    }
}

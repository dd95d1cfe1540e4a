//! Software MMU: flat 4096-byte paging over the 32-bit guest address space.
//!
//! The page table is direct-indexed (a 1024 x 1024 two-level array), so a
//! lookup is two shifts and two loads. Pages are grouped into regions that
//! are created by [`Mmu::pmap`] and trimmed or split by
//! [`Mmu::pmap_remove`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_BITS: u32 = 12;
const DIR_BITS: u32 = 10;
const DIR_LEN: usize = 1 << DIR_BITS;
const TOTAL_PAGES: u64 = 1 << 20;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Region flags.
pub mod prot {
    /// Map exactly at the preferred address or fail.
    pub const FIXED: u32 = 0x1;
    pub const READ: u32 = 0x2;
    pub const WRITE: u32 = 0x4;
    pub const EXEC: u32 = 0x8;
    pub const RW: u32 = READ | WRITE;
    pub const RWX: u32 = READ | WRITE | EXEC;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmuError {
    #[error("unmapped read at {0:#010x}")]
    UnmappedRead(u32),
    #[error("unmapped write at {0:#010x}")]
    UnmappedWrite(u32),
    #[error("protection fault ({}) at {va:#010x}", if *.write { "write" } else { "read" })]
    Protection { va: u32, write: bool },
    #[error("no free range of {pages} pages in [{min:#010x}, {max:#010x}]")]
    RangeExhausted { pages: u64, min: u32, max: u32 },
    #[error("fixed mapping at {0:#010x} collides with mapped pages")]
    FixedCollision(u32),
    #[error("invalid mapping request: {0}")]
    InvalidRequest(&'static str),
    #[error("dump i/o: {0}")]
    Io(String),
    #[error("malformed dump: {0}")]
    BadDump(String),
}

impl From<std::io::Error> for MmuError {
    fn from(e: std::io::Error) -> Self {
        MmuError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub start: u32,
    pub size: u64,
    pub flags: u32,
    pub label: String,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.start as u64 + self.size
    }

    pub fn contains(&self, va: u32) -> bool {
        (self.start as u64..self.end()).contains(&(va as u64))
    }
}

#[derive(Clone)]
struct Page {
    data: Box<[u8; PAGE_SIZE]>,
    flags: u32,
    /// Set while translated code from this page is cached.
    code: bool,
}

impl Page {
    fn zeroed(flags: u32) -> Self {
        Page {
            data: Box::new([0; PAGE_SIZE]),
            flags,
            code: false,
        }
    }
}

type PageDir = Box<[Option<Page>]>;

#[derive(Clone)]
pub struct Mmu {
    dir: Vec<Option<PageDir>>,
    regions: BTreeMap<u32, Region>,
    dirty_code: Vec<u32>,
    enforce_protection: bool,
    mapped: u64,
}

impl Default for Mmu {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Mmu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mmu")
            .field("regions", &self.regions.values().collect::<Vec<_>>())
            .field("mapped_pages", &self.mapped)
            .finish()
    }
}

#[inline]
fn split(page: u32) -> (usize, usize) {
    ((page >> DIR_BITS) as usize, (page as usize) & (DIR_LEN - 1))
}

impl Mmu {
    pub fn new() -> Self {
        Mmu {
            dir: (0..DIR_LEN).map(|_| None).collect(),
            regions: BTreeMap::new(),
            dirty_code: Vec::new(),
            enforce_protection: false,
            mapped: 0,
        }
    }

    pub fn set_enforce_protection(&mut self, on: bool) {
        self.enforce_protection = on;
    }

    pub fn mapped_pages(&self) -> u64 {
        self.mapped
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn region_at(&self, va: u32) -> Option<&Region> {
        self.regions
            .range(..=va)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.contains(va))
    }

    #[inline]
    fn page(&self, page: u32) -> Option<&Page> {
        let (d, i) = split(page);
        self.dir[d].as_ref().and_then(|t| t[i].as_ref())
    }

    #[inline]
    fn page_mut(&mut self, page: u32) -> Option<&mut Page> {
        let (d, i) = split(page);
        self.dir[d].as_mut().and_then(|t| t[i].as_mut())
    }

    pub fn is_mapped(&self, va: u32) -> bool {
        self.page(va >> PAGE_BITS).is_some()
    }

    /// Direct page access for the interpreter's load fast path.
    #[inline]
    pub fn fast_page(&self, va: u32) -> Option<&[u8; PAGE_SIZE]> {
        if self.enforce_protection {
            return None;
        }
        self.page(va >> PAGE_BITS).map(|p| &*p.data)
    }

    /// Direct page access for the store fast path. Pages holding cached
    /// code are excluded so that stores to them go through
    /// [`Mmu::write_memory`] and get recorded for invalidation.
    #[inline]
    pub fn fast_page_mut(&mut self, va: u32) -> Option<&mut [u8; PAGE_SIZE]> {
        if self.enforce_protection {
            return None;
        }
        match self.page_mut(va >> PAGE_BITS) {
            Some(p) if !p.code => Some(&mut *p.data),
            _ => None,
        }
    }

    fn window(min_va: u32, max_va: u32) -> (u64, u64) {
        let first = (min_va as u64).div_ceil(PAGE_SIZE as u64);
        let last = (max_va as u64 + 1) / PAGE_SIZE as u64;
        (first, last)
    }

    /// First run of `count` free pages inside `[from, to)` (page numbers).
    fn find_run(&self, count: u64, from: u64, to: u64) -> Option<u64> {
        let mut p = from;
        let mut start = p;
        while p < to {
            let (d, i) = ((p >> DIR_BITS) as usize, (p as usize) & (DIR_LEN - 1));
            match &self.dir[d] {
                None => {
                    // whole directory slot is free
                    p = ((d as u64) + 1) << DIR_BITS;
                }
                Some(t) if t[i].is_some() => {
                    p += 1;
                    start = p;
                    continue;
                }
                Some(_) => p += 1,
            }
            if p.min(to) - start >= count {
                return Some(start);
            }
        }
        None
    }

    /// Returns the address a [`Mmu::pmap`] with the same arguments would
    /// choose, without mapping anything.
    pub fn pmap_lookup(
        &self,
        count: u64,
        pref_va: u32,
        min_va: u32,
        max_va: u32,
    ) -> Result<u32, MmuError> {
        if count == 0 {
            return Err(MmuError::InvalidRequest("page count must be at least 1"));
        }
        if min_va > max_va {
            return Err(MmuError::InvalidRequest("min_va > max_va"));
        }
        let exhausted = MmuError::RangeExhausted {
            pages: count,
            min: min_va,
            max: max_va,
        };
        let (first, end) = Self::window(min_va, max_va);
        if end <= first {
            return Err(exhausted);
        }
        let pref = (pref_va as u64) >> PAGE_BITS;
        if pref_va != 0 && pref >= first && pref < end {
            if let Some(p) = self.find_run(count, pref, end) {
                return Ok((p << PAGE_BITS) as u32);
            }
        }
        self.find_run(count, first, end)
            .map(|p| (p << PAGE_BITS) as u32)
            .ok_or(exhausted)
    }

    pub fn pmap(
        &mut self,
        size: u64,
        pref_va: u32,
        flags: u32,
        min_va: u32,
        max_va: u32,
    ) -> Result<u32, MmuError> {
        self.pmap_named(size, pref_va, flags, min_va, max_va, "")
    }

    /// Maps `ceil(size / 4096)` zeroed pages as one region.
    pub fn pmap_named(
        &mut self,
        size: u64,
        pref_va: u32,
        flags: u32,
        min_va: u32,
        max_va: u32,
        label: &str,
    ) -> Result<u32, MmuError> {
        if size == 0 {
            return Err(MmuError::InvalidRequest("size must be positive"));
        }
        let count = size.div_ceil(PAGE_SIZE as u64);
        let va = if flags & prot::FIXED != 0 {
            if !(pref_va as usize).is_multiple_of(PAGE_SIZE) {
                return Err(MmuError::InvalidRequest(
                    "fixed address must be page aligned",
                ));
            }
            let first = (pref_va >> PAGE_BITS) as u64;
            if first + count > TOTAL_PAGES {
                return Err(MmuError::RangeExhausted {
                    pages: count,
                    min: pref_va,
                    max: u32::MAX,
                });
            }
            if (first..first + count).any(|p| self.page(p as u32).is_some()) {
                return Err(MmuError::FixedCollision(pref_va));
            }
            pref_va
        } else {
            self.pmap_lookup(count, pref_va, min_va, max_va)?
        };
        let first = va >> PAGE_BITS;
        for p in first as u64..first as u64 + count {
            self.install(p as u32, flags);
        }
        let label = label.split_whitespace().collect::<Vec<_>>().join("_");
        self.regions.insert(
            va,
            Region {
                start: va,
                size: count * PAGE_SIZE as u64,
                flags,
                label,
            },
        );
        Ok(va)
    }

    fn install(&mut self, page: u32, flags: u32) {
        let (d, i) = split(page);
        let table = self.dir[d].get_or_insert_with(|| (0..DIR_LEN).map(|_| None).collect());
        debug_assert!(table[i].is_none());
        table[i] = Some(Page::zeroed(flags));
        self.mapped += 1;
    }

    /// Unmaps every page in `[start_va, end_va)`, trimming or splitting the
    /// regions involved. Pages that held cached code are reported through
    /// [`Mmu::take_dirty_code`].
    pub fn pmap_remove(&mut self, start_va: u32, end_va: u64) {
        let first = (start_va >> PAGE_BITS) as u64;
        let end = end_va.div_ceil(PAGE_SIZE as u64).min(TOTAL_PAGES);
        if end <= first {
            return;
        }
        for p in first..end {
            let (d, i) = split(p as u32);
            if let Some(t) = self.dir[d].as_mut() {
                if let Some(page) = t[i].take() {
                    if page.code {
                        self.dirty_code.push(p as u32);
                    }
                    self.mapped -= 1;
                }
            }
        }
        let lo = first * PAGE_SIZE as u64;
        let hi = end * PAGE_SIZE as u64;
        let affected: Vec<u32> = self
            .regions
            .values()
            .filter(|r| (r.start as u64) < hi && r.end() > lo)
            .map(|r| r.start)
            .collect();
        for start in affected {
            let r = self.regions.remove(&start).expect("region present");
            if (r.start as u64) < lo {
                let mut left = r.clone();
                left.size = lo - r.start as u64;
                self.regions.insert(left.start, left);
            }
            if r.end() > hi {
                let mut right = r.clone();
                right.start = hi as u32;
                right.size = r.end() - hi;
                self.regions.insert(right.start, right);
            }
        }
    }

    fn check_range(&self, va: u32, len: usize, write: bool) -> Result<(), MmuError> {
        let mut off = 0usize;
        while off < len {
            let a = va.wrapping_add(off as u32);
            match self.page(a >> PAGE_BITS) {
                None if write => return Err(MmuError::UnmappedWrite(a)),
                None => return Err(MmuError::UnmappedRead(a)),
                Some(p) if self.enforce_protection => {
                    let need = if write { prot::WRITE } else { prot::READ };
                    if p.flags & need == 0 {
                        return Err(MmuError::Protection { va: a, write });
                    }
                }
                Some(_) => {}
            }
            off += PAGE_SIZE - (a as usize & (PAGE_SIZE - 1));
        }
        Ok(())
    }

    pub fn read_memory(&self, va: u32, buf: &mut [u8]) -> Result<(), MmuError> {
        self.check_range(va, buf.len(), false)?;
        let mut off = 0usize;
        while off < buf.len() {
            let a = va.wrapping_add(off as u32);
            let po = a as usize & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - po).min(buf.len() - off);
            let page = self.page(a >> PAGE_BITS).expect("checked");
            buf[off..off + n].copy_from_slice(&page.data[po..po + n]);
            off += n;
        }
        Ok(())
    }

    /// Writes are validated over the whole span first, so a faulting
    /// write leaves memory untouched.
    pub fn write_memory(&mut self, va: u32, bytes: &[u8]) -> Result<(), MmuError> {
        self.check_range(va, bytes.len(), true)?;
        let mut off = 0usize;
        while off < bytes.len() {
            let a = va.wrapping_add(off as u32);
            let pn = a >> PAGE_BITS;
            let po = a as usize & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - po).min(bytes.len() - off);
            let page = self.page_mut(pn).expect("checked");
            page.data[po..po + n].copy_from_slice(&bytes[off..off + n]);
            if page.code {
                page.code = false;
                self.dirty_code.push(pn);
            }
            off += n;
        }
        Ok(())
    }

    pub fn read_vec(&self, va: u32, len: usize) -> Result<Vec<u8>, MmuError> {
        let mut v = vec![0; len];
        self.read_memory(va, &mut v)?;
        Ok(v)
    }

    pub fn read_u8(&self, va: u32) -> Result<u8, MmuError> {
        match self.page(va >> PAGE_BITS) {
            Some(p) if !self.enforce_protection => Ok(p.data[va as usize & (PAGE_SIZE - 1)]),
            _ => {
                let mut b = [0u8; 1];
                self.read_memory(va, &mut b)?;
                Ok(b[0])
            }
        }
    }

    pub fn read_u32(&self, va: u32) -> Result<u32, MmuError> {
        let mut b = [0u8; 4];
        self.read_memory(va, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, va: u32, v: u32) -> Result<(), MmuError> {
        self.write_memory(va, &v.to_le_bytes())
    }

    /// NUL-terminated string, at most `max` bytes.
    pub fn read_cstr(&self, va: u32, max: usize) -> Result<String, MmuError> {
        let mut out = Vec::new();
        for i in 0..max {
            let b = self.read_u8(va.wrapping_add(i as u32))?;
            if b == 0 {
                break;
            }
            out.push(b);
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    /// Marks a page as holding cached code.
    pub fn mark_code(&mut self, page: u32) {
        if let Some(p) = self.page_mut(page) {
            p.code = true;
        }
    }

    pub fn is_code(&self, page: u32) -> bool {
        self.page(page).is_some_and(|p| p.code)
    }

    /// Code pages written or unmapped since the last call.
    pub fn take_dirty_code(&mut self) -> Vec<u32> {
        std::mem::take(&mut self.dirty_code)
    }

    pub fn has_dirty_code(&self) -> bool {
        !self.dirty_code.is_empty()
    }

    /// Checks that regions are disjoint, page aligned and cover exactly
    /// the mapped pages.
    pub fn verify_cover(&self) -> Result<(), String> {
        let mut covered = 0u64;
        let mut prev_end = 0u64;
        for (k, r) in &self.regions {
            if *k != r.start {
                return Err(format!("region keyed {k:#x} starts at {:#x}", r.start));
            }
            if !(r.start as usize).is_multiple_of(PAGE_SIZE) || r.size == 0 || !r.size.is_multiple_of(PAGE_SIZE as u64) {
                return Err(format!("region {:#x}+{} not page aligned", r.start, r.size));
            }
            if (r.start as u64) < prev_end {
                return Err(format!("region {:#x} overlaps its predecessor", r.start));
            }
            prev_end = r.end();
            for p in (r.start as u64 >> PAGE_BITS)..(r.end() >> PAGE_BITS) {
                if self.page(p as u32).is_none() {
                    return Err(format!(
                        "page {p:#x} in region {:#x} is not mapped",
                        r.start
                    ));
                }
            }
            covered += r.size / PAGE_SIZE as u64;
        }
        if covered != self.mapped {
            return Err(format!(
                "{} pages mapped but regions cover {covered}",
                self.mapped
            ));
        }
        Ok(())
    }

    /// Writes one `region_<start>.bin` per region plus a manifest with one
    /// `<start hex> <size decimal> <flags hex> <label>` line per region,
    /// ordered by start address. Returns the manifest text.
    pub fn dump(&self, dir: &Path) -> Result<String, MmuError> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for r in self.regions.values() {
            let label = if r.label.is_empty() { "-" } else { &r.label };
            writeln!(
                manifest,
                "{:08x} {} {:x} {}",
                r.start, r.size, r.flags, label
            )
            .unwrap();
            let mut image = vec![0u8; r.size as usize];
            self.read_memory(r.start, &mut image)
                .expect("regions cover mapped pages");
            fs::write(dir.join(format!("region_{:08x}.bin", r.start)), image)?;
        }
        fs::write(dir.join(MANIFEST_NAME), &manifest)?;
        Ok(manifest)
    }

    /// Rebuilds an MMU from a directory written by [`Mmu::dump`].
    pub fn restore(dir: &Path) -> Result<Mmu, MmuError> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let mut mmu = Mmu::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.splitn(4, ' ');
            let bad = || MmuError::BadDump(line.to_string());
            let start = u32::from_str_radix(it.next().ok_or_else(bad)?, 16).map_err(|_| bad())?;
            let size: u64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let flags = u32::from_str_radix(it.next().ok_or_else(bad)?, 16).map_err(|_| bad())?;
            let label = it.next().unwrap_or("-");
            let label = if label == "-" { "" } else { label };
            let image = fs::read(dir.join(format!("region_{start:08x}.bin")))?;
            if image.len() as u64 != size {
                return Err(bad());
            }
            mmu.pmap_named(size, start, flags | prot::FIXED, 0, u32::MAX, label)?;
            if let Some(r) = mmu.regions.get_mut(&start) {
                r.flags = flags;
            }
            mmu.write_memory(start, &image)?;
        }
        Ok(mmu)
    }
}

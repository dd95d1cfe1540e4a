//! Randomized MMU operations against a page-set model.

use std::collections::{BTreeMap, HashMap};
use std::fs;

use pinky_core::mmu::{prot, Mmu, MmuError, PAGE_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WINDOW: u32 = 0x1000_0000;
const PAGES: u32 = 256;
const PS: u32 = PAGE_SIZE as u32;

/// Page number -> (id of the map call that created it, bytes).
#[derive(Default)]
struct Model {
    pages: BTreeMap<u32, (u32, Vec<u8>)>,
    regions: BTreeMap<u32, u64>,
    maps: u32,
}

impl Model {
    fn free(&self, p: u32) -> bool {
        !self.pages.contains_key(&p)
    }

    fn first_run(&self, count: u32, from: u32, to: u32) -> Option<u32> {
        let mut p = from;
        while p + count <= to {
            match (p..p + count).find(|q| !self.free(*q)) {
                None => return Some(p),
                Some(busy) => p = busy + 1,
            }
        }
        None
    }

    /// First fit in `[lo, hi)` page numbers, trying `pref` first.
    fn choose(&self, count: u32, pref: u32, lo: u32, hi: u32) -> Option<u32> {
        if pref != 0 && (lo..hi).contains(&pref) {
            if let Some(p) = self.first_run(count, pref, hi) {
                return Some(p);
            }
        }
        self.first_run(count, lo, hi)
    }

    fn map(&mut self, start: u32, count: u32) {
        self.maps += 1;
        for p in start..start + count {
            self.pages.insert(p, (self.maps, vec![0; PAGE_SIZE]));
        }
        self.regions.insert(start * PS, count as u64 * PS as u64);
    }

    fn remove(&mut self, first: u32, end: u32) {
        for p in first..end {
            self.pages.remove(&p);
        }
        // regions are maximal runs of pages that came from the same map call
        let mut regions = BTreeMap::new();
        let mut prev: Option<(u32, u32)> = None;
        for (&p, &(owner, _)) in &self.pages {
            match prev {
                Some((q, o)) if q + 1 == p && o == owner => {
                    let last = *regions.keys().next_back().unwrap();
                    *regions.get_mut(&last).unwrap() += PS as u64;
                }
                _ => {
                    regions.insert(p * PS, PS as u64);
                }
            }
            prev = Some((p, owner));
        }
        self.regions = regions;
    }

    fn read(&self, va: u32, len: usize) -> Option<Vec<u8>> {
        (0..len)
            .map(|k| {
                let a = va + k as u32;
                self.pages.get(&(a / PS)).map(|(_, d)| d[(a % PS) as usize])
            })
            .collect()
    }

    fn write(&mut self, va: u32, bytes: &[u8]) -> bool {
        if (0..bytes.len()).any(|k| self.free((va + k as u32) / PS)) {
            return false;
        }
        for (k, b) in bytes.iter().enumerate() {
            let a = va + k as u32;
            self.pages.get_mut(&(a / PS)).unwrap().1[(a % PS) as usize] = *b;
        }
        true
    }
}

fn regions_of(m: &Mmu) -> BTreeMap<u32, u64> {
    m.regions().map(|r| (r.start, r.size)).collect()
}

fn all_bytes(m: &Mmu) -> HashMap<u32, Vec<u8>> {
    m.regions()
        .map(|r| (r.start, m.read_vec(r.start, r.size as usize).unwrap()))
        .collect()
}

/// Runs `ops` seeded random map, remove, write and read operations,
/// checking the cover invariant after each one and a dump/restore
/// roundtrip every 20,000.
pub fn random_operations(seed: u64, ops: u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mmu = Mmu::new();
    let mut model = Model::default();
    let base = WINDOW / PS;
    for step in 0..ops {
        match rng.gen_range(0..10) {
            0..=2 => {
                let count = rng.gen_range(1..=8u32);
                let size = (count - 1) as u64 * PS as u64 + rng.gen_range(1..=PS) as u64;
                if rng.gen_bool(0.3) {
                    let p = base + rng.gen_range(0..PAGES);
                    let got = mmu.pmap(size, p * PS, prot::FIXED | prot::RW, 0, u32::MAX);
                    let free = (p..p + count).all(|q| model.free(q));
                    if free {
                        assert_eq!(got, Ok(p * PS), "step {step}");
                        model.map(p, count);
                    } else {
                        assert_eq!(got, Err(MmuError::FixedCollision(p * PS)), "step {step}");
                    }
                } else {
                    let pref = if rng.gen() {
                        (base + rng.gen_range(0..PAGES)) * PS
                    } else {
                        0
                    };
                    let got = mmu.pmap(size, pref, prot::RW, WINDOW, WINDOW + PAGES * PS - 1);
                    match model.choose(count, pref / PS, base, base + PAGES) {
                        Some(p) => {
                            assert_eq!(got, Ok(p * PS), "step {step}");
                            model.map(p, count);
                        }
                        None => assert!(
                            matches!(got, Err(MmuError::RangeExhausted { .. })),
                            "step {step}"
                        ),
                    }
                }
            }
            3..=4 => {
                let first = base + rng.gen_range(0..PAGES);
                let end = (first + rng.gen_range(1..=12)).min(base + PAGES);
                mmu.pmap_remove(first * PS, end as u64 * PS as u64);
                model.remove(first, end);
            }
            5..=7 => {
                let va = WINDOW + rng.gen_range(0..PAGES * PS);
                let len = rng
                    .gen_range(1..=2 * PS as usize)
                    .min((WINDOW + PAGES * PS - va) as usize);
                let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let ok = model.write(va, &bytes);
                assert_eq!(mmu.write_memory(va, &bytes).is_ok(), ok, "step {step}");
            }
            _ => {
                let va = WINDOW + rng.gen_range(0..PAGES * PS);
                let len = rng
                    .gen_range(1..=2 * PS as usize)
                    .min((WINDOW + PAGES * PS - va) as usize);
                assert_eq!(
                    mmu.read_vec(va, len).ok(),
                    model.read(va, len),
                    "step {step}"
                );
            }
        }
        mmu.verify_cover()
            .unwrap_or_else(|e| panic!("step {step}: {e}"));
        assert_eq!(mmu.mapped_pages(), model.pages.len() as u64);
        if step % 10 == 0 {
            assert_eq!(regions_of(&mmu), model.regions, "step {step}");
        }
        if step % 20_000 == 19_999 {
            dump_restore_identical(&mmu);
        }
    }
}

pub fn dump_restore_identical(mmu: &Mmu) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = mmu.dump(a.path()).unwrap();
    let back = Mmu::restore(a.path()).unwrap();
    assert_eq!(regions_of(&back), regions_of(mmu));
    assert_eq!(all_bytes(&back), all_bytes(mmu));
    assert_eq!(back.dump(b.path()).unwrap(), manifest);
    let files = |d: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(d)
            .unwrap()
            .map(|f| {
                let f = f.unwrap();
                (
                    f.file_name().to_string_lossy().into_owned(),
                    fs::read(f.path()).unwrap(),
                )
            })
            .collect()
    };
    assert_eq!(files(a.path()), files(b.path()));
}

/// Writes and reads back buffers straddling a page boundary.
pub fn page_crossing(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mmu = Mmu::new();
    mmu.pmap(
        4 * PAGE_SIZE as u64,
        WINDOW,
        prot::FIXED | prot::RW,
        0,
        u32::MAX,
    )
    .unwrap();
    for _ in 0..2000 {
        let len = rng.gen_range(1..=PAGE_SIZE + 16);
        let va = WINDOW + PS - rng.gen_range(1..=len as u32).min(PS);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        mmu.write_memory(va, &bytes).unwrap();
        assert_eq!(mmu.read_vec(va, len).unwrap(), bytes);
    }
    let v = 0xA1B2_C3D4;
    mmu.write_u32(WINDOW + PS - 2, v).unwrap();
    assert_eq!(mmu.read_u32(WINDOW + PS - 2).unwrap(), v);
    assert_eq!(mmu.read_vec(WINDOW + PS - 2, 4).unwrap(), v.to_le_bytes());
    // a crossing access into an unmapped page fails without a partial write
    let end = WINDOW + 4 * PS;
    assert_eq!(
        mmu.write_memory(end - 2, &[1, 2, 3, 4]),
        Err(MmuError::UnmappedWrite(end))
    );
    assert_ne!(mmu.read_vec(end - 2, 2).unwrap(), [1, 2]);
}

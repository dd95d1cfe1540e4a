//! Randomized MMU operations against a page-set model.

mod common;

use common::mmu_model;
use pinky_core::mmu::Mmu;

#[test]
fn random_operations_keep_the_cover_invariant() {
    mmu_model::random_operations(42, 100_000);
}

#[test]
fn page_crossing_roundtrips() {
    mmu_model::page_crossing(9);
}

#[test]
fn empty_mmu_dumps_an_empty_manifest() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(Mmu::new().dump(d.path()).unwrap(), "");
    assert_eq!(Mmu::restore(d.path()).unwrap().mapped_pages(), 0);
    mmu_model::dump_restore_identical(&Mmu::new());
}

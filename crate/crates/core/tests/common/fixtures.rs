//! Guest images, trees and published listings shared by several suites.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pinky_core::engine::Engine;
use pinky_core::vfs::{pack_dir, Vfs, META_FILE};

use super::oracle::CODE;

/// The PE fixtures, reachable from any crate in the workspace.
pub fn pe_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/pe")
}

/// Engine with the PE fixture directory mounted as its file system.
pub fn pe_engine() -> Engine {
    let mut e = Engine::new();
    e.machine.os.vfs = Some(Vfs::init(pack_dir(&pe_dir()).unwrap()).unwrap());
    e
}

// Listings as published, trailing blanks included; compare via [`trimmed`].
pub const PUSH_PUSH_CALL: &str = "\
010029E3 push ebx  ----------------+  ST32 [r165-0x4], r164
010029E3                           -  MV32 r165, r165-0x4
010029E4 push edi  ----------------+  ST32 [r165-0x4], r168
010029E4                           -  MV32 r165, r165-0x4
010029E5 call dword [0x1001058]  --+  MV32 r165, r165-0x4
010029E5                           +  MV32 r32, 0x10029EB
010029E5                           +  ST32 [r165], r32
010029E5                           +  LD32 r32, [0x01001058]
010029E5                           -  RET r32 
";
pub const PUSH_PUSH_CALL_BYTES: [u8; 8] = [0x53, 0x57, 0xFF, 0x15, 0x58, 0x10, 0x00, 0x01];

pub const STORE_IMMEDIATE: &str = "\
7DE9FA90 mov dword [ebp-0x10], 0xffffffff  +  MV32 r32, 0xFFFFFFFF
7DE9FA90                           +  ST32 [r166-0x10], r32
7DE9FA90                           -  RET 0x7DE9FA97 
";
pub const STORE_IMMEDIATE_BYTES: [u8; 7] = [0xC7, 0x45, 0xF0, 0xFF, 0xFF, 0xFF, 0xFF];

/// Lines with trailing blanks removed.
pub fn trimmed(s: &str) -> Vec<&str> {
    s.lines().map(str::trim_end).collect()
}

/// The call at 0x407F1A lands four bytes into the `and` at 0x407F4F.
pub fn overlap_image() -> Vec<u8> {
    let mut code = vec![0xE8, 0x34, 0x00, 0x00, 0x00];
    code.resize(0x407F4F - 0x407F1A, 0x90);
    code.extend_from_slice(&[0x20, 0x97, 0x8C, 0xEA, 0xF8, 0x73, 0x02, 0x0F]);
    code
}

/// Calls a routine twice, patching its `mov al, imm8` in between.
///
/// ```text
/// 1000 mov cl, 2
/// 1002 mov dl, 0
/// 1004 call 1020
/// 1009 mov byte [0x1021], 7
/// 1010 dec cl
/// 1012 jnz 1004
/// 1020 mov al, 3
/// 1022 add dl, al
/// 1024 ret
/// ```
pub fn self_patching() -> Vec<u8> {
    let mut code = vec![
        0xB1, 0x02, 0xB2, 0x00, 0xE8, 0x17, 0x00, 0x00, 0x00, 0xC6, 0x05, 0x21, 0x10, 0x00, 0x00,
        0x07, 0xFE, 0xC9, 0x75, 0xF0, 0xCC,
    ];
    code.resize(0x20, 0xCC);
    code.extend_from_slice(&[0xB0, 0x03, 0x00, 0xC2, 0xC3]);
    code
}

/// mov ecx,20; L1: add eax,ecx; jmp L2; L2: mov [ebx+ecx*4],eax;
/// xor edx,eax; jmp L3; L3: dec ecx; jnz L1
pub const CYCLE: [u8; 20] = [
    0xB9, 0x14, 0x00, 0x00, 0x00, 0x01, 0xC8, 0xEB, 0x00, 0x89, 0x04, 0x8B, 0x31, 0xC2, 0xEB, 0x00,
    0x49, 0x75, 0xF2, 0xCC,
];
pub const CYCLE_END: u32 = CODE + 0x13;

/// mov ecx,5; L: call F; dec ecx; jnz L; ... F: add eax,3; ret
pub fn call_loop() -> Vec<u8> {
    let mut code = vec![
        0xB9, 0x05, 0, 0, 0, 0xE8, 0x16, 0, 0, 0, 0x49, 0x75, 0xF8, 0xCC,
    ];
    code.resize(0x20, 0xCC);
    code.extend_from_slice(&[0x83, 0xC0, 0x03, 0xC3]);
    code
}

/// Nested text, binary, empty and deep files with explicit modes.
pub fn build_tree(root: &Path) {
    let files: [(&str, Vec<u8>); 6] = [
        ("readme.txt", b"top level\n".to_vec()),
        ("bin/tool.exe", (0..=255u8).cycle().take(5000).collect()),
        ("bin/empty.dat", Vec::new()),
        ("etc/conf/app.ini", b"[main]\nkey=value\n".to_vec()),
        ("a/b/c/d/deep.txt", b"deep".to_vec()),
        ("registry.txt", b"HKLM\\Software\\Demo = 1\n".to_vec()),
    ];
    for (p, data) in &files {
        let full = root.join(p);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(full, data).unwrap();
    }
    let meta = "1 755 \n0 755 bin/tool.exe\n0 644 bin/empty.dat\n20 600 etc/conf/app.ini\n\
                0 444 a/b/c/d/deep.txt\n0 644 readme.txt\n0 644 registry.txt\n";
    fs::write(root.join(META_FILE), meta).unwrap();
}

pub fn tree_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != META_FILE {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(p).unwrap());
            }
        }
    }
    out
}

//! Helpers for the microbenchmarks.

use ssufs::pmem::PmDevice;
use ssufs::Fs;

pub const IMAGE_SIZE: u64 = 4 << 20;

pub fn fresh_fs() -> Fs {
    Fs::mkfs(PmDevice::new(IMAGE_SIZE)).expect("mkfs")
}

/// A file system with `files` regular files `/f0..` in the root.
pub fn populated_fs(files: usize) -> Fs {
    let mut fs = fresh_fs();
    for i in 0..files {
        fs.create(&format!("/f{i}"), 0o644).expect("create");
    }
    fs
}

pub fn pattern(len: u64) -> Vec<u8> {
    ssufs::crashcheck::Op::pattern(0, len)
}

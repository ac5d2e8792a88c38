use thiserror::Error;

/// Errors surfaced by device, layout and file-system operations.
///
/// POSIX-style variants carry their conventional names; the numeric codes
/// used at the CLI boundary live in `FsError::errno`.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FsError {
    #[error("address out of bounds: offset {offset} len {len}")]
    Address { offset: u64, len: u64 },
    #[error("store of {len} bytes at {offset} straddles an 8-byte boundary")]
    UnalignedStore { offset: u64, len: u64 },
    #[error("device too small: {capacity} bytes")]
    TooSmall { capacity: u64 },
    #[error("bad superblock magic")]
    BadMagic,
    #[error("file system not cleanly unmounted")]
    NotCleanlyUnmounted,
    #[error("EEXIST: {0}")]
    Exist(String),
    #[error("ENOENT: {0}")]
    NoEnt(String),
    #[error("ENOTDIR: {0}")]
    NotDir(String),
    #[error("EISDIR: {0}")]
    IsDir(String),
    #[error("ENOTEMPTY: {0}")]
    NotEmpty(String),
    #[error("ENOSPC: out of {0}")]
    NoSpc(&'static str),
    #[error("ENAMETOOLONG: name is {0} bytes, max 110")]
    NameTooLong(usize),
    #[error("invalid name: {0}")]
    InvalidName(String),
    #[error("EINVAL: {0}")]
    Inval(String),
    #[error("corruption detected: {0}")]
    Corruption(String),
}

impl FsError {
    /// Stable numeric codes for the CLI surface.
    pub fn errno(&self) -> i32 {
        match self {
            FsError::Exist(_) => 17,
            FsError::NoEnt(_) => 2,
            FsError::NotDir(_) => 20,
            FsError::IsDir(_) => 21,
            FsError::NotEmpty(_) => 39,
            FsError::NoSpc(_) => 28,
            FsError::NameTooLong(_) => 36,
            FsError::Inval(_) => 22,
            _ => 5,
        }
    }
}

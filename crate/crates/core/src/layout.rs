//! Bit-exact on-media format.
//!
//! The device is split into four regions: superblock, inode table, page
//! descriptor table, and data/directory pages. All integers are
//! little-endian u64 so that every mutable field is 8-byte crash atomic.
//! A record is allocated iff any of its bytes is nonzero; ino 0 is the null
//! inode and the root directory is ino 1.

use crate::error::FsError;
use crate::pmem::PmDevice;

pub const MAGIC: u64 = 0x3173_6675_7373; // "ssufs1"
pub const PAGE_SIZE: u64 = 4096;
pub const INODE_SIZE: u64 = 128;
pub const DENTRY_SIZE: u64 = 128;
pub const DESC_SIZE: u64 = 24;
pub const NAME_MAX: usize = 110;
pub const DENTRIES_PER_PAGE: u64 = PAGE_SIZE / DENTRY_SIZE;
/// One inode is reserved for every 16 KiB (four pages) of data region.
pub const BYTES_PER_INODE: u64 = 16384;
pub const ROOT_INO: u64 = 1;
pub const MIN_CAPACITY: u64 = 1 << 20;

/// Superblock field offsets (bytes from device start).
pub mod sb {
    pub const MAGIC: u64 = 0;
    pub const PAGE_SIZE: u64 = 8;
    pub const NUM_INODES: u64 = 16;
    pub const NUM_PAGES: u64 = 24;
    pub const CLEAN_UNMOUNT: u64 = 32;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Superblock {
    pub magic: u64,
    pub page_size: u64,
    pub num_inodes: u64,
    pub num_pages: u64,
    pub clean_unmount: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    File,
    Dir,
}

impl FileKind {
    pub fn from_mode(mode: u64) -> Option<FileKind> {
        match mode >> 16 {
            1 => Some(FileKind::File),
            2 => Some(FileKind::Dir),
            _ => None,
        }
    }

    pub fn mode(self, perm: u64) -> u64 {
        let kind = match self {
            FileKind::File => 1u64,
            FileKind::Dir => 2u64,
        };
        kind << 16 | (perm & 0o7777)
    }
}

/// In-memory view of a 128-byte on-media inode record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InodeRecord {
    pub ino: u64,
    pub link_count: u64,
    pub size: u64,
    pub mode: u64,
    pub uid: u64,
    pub gid: u64,
    pub atime: u64,
    pub mtime: u64,
    pub ctime: u64,
}

impl InodeRecord {
    pub const FIELD_INO: u64 = 0;
    pub const FIELD_LINK_COUNT: u64 = 8;
    pub const FIELD_SIZE: u64 = 16;
    pub const FIELD_MODE: u64 = 24;

    pub fn encode(&self) -> [u8; INODE_SIZE as usize] {
        let mut b = [0u8; INODE_SIZE as usize];
        for (i, v) in [
            self.ino,
            self.link_count,
            self.size,
            self.mode,
            self.uid,
            self.gid,
            self.atime,
            self.mtime,
            self.ctime,
        ]
        .iter()
        .enumerate()
        {
            b[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn decode(b: &[u8]) -> InodeRecord {
        let f = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        InodeRecord {
            ino: f(0),
            link_count: f(1),
            size: f(2),
            mode: f(3),
            uid: f(4),
            gid: f(5),
            atime: f(6),
            mtime: f(7),
            ctime: f(8),
        }
    }

    pub fn kind(&self) -> Option<FileKind> {
        FileKind::from_mode(self.mode)
    }
}

/// In-memory view of a 128-byte on-media directory entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DentryRecord {
    pub name: Vec<u8>, // at most NAME_MAX bytes, stored NUL-padded
    pub ino: u64,
    pub rename_ptr: u64,
}

impl DentryRecord {
    pub const FIELD_INO: u64 = 112;
    pub const FIELD_RENAME_PTR: u64 = 120;

    pub fn encode(&self) -> [u8; DENTRY_SIZE as usize] {
        let mut b = [0u8; DENTRY_SIZE as usize];
        b[..self.name.len()].copy_from_slice(&self.name);
        b[112..120].copy_from_slice(&self.ino.to_le_bytes());
        b[120..128].copy_from_slice(&self.rename_ptr.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> DentryRecord {
        let name_len = b[..NAME_MAX].iter().position(|&c| c == 0).unwrap_or(NAME_MAX);
        DentryRecord {
            name: b[..name_len].to_vec(),
            ino: u64::from_le_bytes(b[112..120].try_into().unwrap()),
            rename_ptr: u64::from_le_bytes(b[120..128].try_into().unwrap()),
        }
    }

    pub fn name_str(&self) -> String {
        String::from_utf8_lossy(&self.name).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageKind {
    Data,
    Dir,
}

impl PageKind {
    pub fn as_u64(self) -> u64 {
        match self {
            PageKind::Data => 1,
            PageKind::Dir => 2,
        }
    }

    pub fn from_u64(v: u64) -> Option<PageKind> {
        match v {
            1 => Some(PageKind::Data),
            2 => Some(PageKind::Dir),
            _ => None,
        }
    }
}

/// In-memory view of a 24-byte page descriptor. `owner_ino == 0` means free;
/// the descriptor carries the page's own metadata so inodes never point at
/// their pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PageDescriptor {
    pub owner_ino: u64,
    pub kind: u64,
    pub offset: u64,
}

impl PageDescriptor {
    pub const FIELD_OWNER: u64 = 0;
    pub const FIELD_KIND: u64 = 8;
    pub const FIELD_OFFSET: u64 = 16;

    pub fn encode(&self) -> [u8; DESC_SIZE as usize] {
        let mut b = [0u8; DESC_SIZE as usize];
        b[0..8].copy_from_slice(&self.owner_ino.to_le_bytes());
        b[8..16].copy_from_slice(&self.kind.to_le_bytes());
        b[16..24].copy_from_slice(&self.offset.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> PageDescriptor {
        PageDescriptor {
            owner_ino: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            kind: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            offset: u64::from_le_bytes(b[16..24].try_into().unwrap()),
        }
    }
}

/// True iff any byte is nonzero: the allocation test for every record type.
pub fn is_allocated(record: &[u8]) -> bool {
    record.iter().any(|&b| b != 0)
}

/// Derived byte offsets of the four on-media regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub capacity: u64,
    /// Usable inode numbers are 1..=num_inodes; slot 0 is the null inode.
    pub num_inodes: u64,
    pub num_pages: u64,
    pub inode_table_off: u64,
    pub desc_table_off: u64,
    pub page_region_off: u64,
}

impl Geometry {
    pub fn inode_offset(&self, ino: u64) -> Result<u64, FsError> {
        if ino > self.num_inodes {
            return Err(FsError::Address {
                offset: ino,
                len: 0,
            });
        }
        Ok(self.inode_table_off + ino * INODE_SIZE)
    }

    pub fn desc_offset(&self, page: u64) -> Result<u64, FsError> {
        if page >= self.num_pages {
            return Err(FsError::Address {
                offset: page,
                len: 0,
            });
        }
        Ok(self.desc_table_off + page * DESC_SIZE)
    }

    pub fn page_offset(&self, page: u64) -> Result<u64, FsError> {
        if page >= self.num_pages {
            return Err(FsError::Address {
                offset: page,
                len: 0,
            });
        }
        Ok(self.page_region_off + page * PAGE_SIZE)
    }

    pub fn dentry_offset(&self, page: u64, slot: u64) -> Result<u64, FsError> {
        if slot >= DENTRIES_PER_PAGE {
            return Err(FsError::Address {
                offset: slot,
                len: 0,
            });
        }
        Ok(self.page_offset(page)? + slot * DENTRY_SIZE)
    }

    /// Inverse of `dentry_offset`: (page index, slot) for a dentry location.
    pub fn dentry_location(&self, off: u64) -> Option<(u64, u64)> {
        if off < self.page_region_off || off >= self.page_region_off + self.num_pages * PAGE_SIZE {
            return None;
        }
        let rel = off - self.page_region_off;
        if rel % DENTRY_SIZE != 0 {
            return None;
        }
        Some((rel / PAGE_SIZE, rel % PAGE_SIZE / DENTRY_SIZE))
    }
}

/// Split a device of the given capacity into the four regions.
///
/// The page count is the largest that fits once the inode table is sized at
/// one inode per 16 KiB of data region (rounded up) and the page region is
/// aligned to 4096.
pub fn compute_geometry(capacity: u64) -> Result<Geometry, FsError> {
    if capacity < MIN_CAPACITY {
        return Err(FsError::TooSmall { capacity });
    }
    let mut pages = (capacity - PAGE_SIZE) / PAGE_SIZE;
    loop {
        if pages == 0 {
            return Err(FsError::TooSmall { capacity });
        }
        let inodes = (pages * PAGE_SIZE).div_ceil(BYTES_PER_INODE);
        let inode_table_off = PAGE_SIZE;
        let desc_table_off = inode_table_off + (inodes + 1) * INODE_SIZE;
        let page_region_off = (desc_table_off + pages * DESC_SIZE).next_multiple_of(PAGE_SIZE);
        if page_region_off + pages * PAGE_SIZE <= capacity {
            return Ok(Geometry {
                capacity,
                num_inodes: inodes,
                num_pages: pages,
                inode_table_off,
                desc_table_off,
                page_region_off,
            });
        }
        pages -= 1;
    }
}

/// Read and validate the superblock.
pub fn read_superblock(dev: &PmDevice) -> Result<(Superblock, Geometry), FsError> {
    let sb = Superblock {
        magic: dev.read_u64(sb::MAGIC)?,
        page_size: dev.read_u64(sb::PAGE_SIZE)?,
        num_inodes: dev.read_u64(sb::NUM_INODES)?,
        num_pages: dev.read_u64(sb::NUM_PAGES)?,
        clean_unmount: dev.read_u64(sb::CLEAN_UNMOUNT)?,
    };
    if sb.magic != MAGIC || sb.page_size != PAGE_SIZE {
        return Err(FsError::BadMagic);
    }
    let geo = compute_geometry(dev.capacity())?;
    if geo.num_inodes != sb.num_inodes || geo.num_pages != sb.num_pages {
        return Err(FsError::BadMagic);
    }
    Ok((sb, geo))
}

/// Initialize a fresh file system on the device: zero the metadata regions,
/// write the superblock (clean), and create the root directory inode.
/// Everything is flushed and fenced before return.
pub fn mkfs(dev: &mut PmDevice) -> Result<Geometry, FsError> {
    let geo = compute_geometry(dev.capacity())?;
    dev.mark("begin mkfs");
    // Bulk-zero the metadata regions; modeled as non-temporal initialization.
    dev.bulk_zero(0, geo.page_region_off)?;

    dev.store_u64(sb::MAGIC, MAGIC)?;
    dev.store_u64(sb::PAGE_SIZE, PAGE_SIZE)?;
    dev.store_u64(sb::NUM_INODES, geo.num_inodes)?;
    dev.store_u64(sb::NUM_PAGES, geo.num_pages)?;
    dev.store_u64(sb::CLEAN_UNMOUNT, 1)?;
    dev.flush(0, 40)?;

    let root = InodeRecord {
        ino: ROOT_INO,
        link_count: 2,
        size: 0,
        mode: FileKind::Dir.mode(0o755),
        ..Default::default()
    };
    let root_off = geo.inode_offset(ROOT_INO)?;
    dev.store(root_off, &root.encode())?;
    dev.flush(root_off, INODE_SIZE)?;
    dev.fence();
    dev.mark("end mkfs");
    Ok(geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_sizes_are_exact() {
        assert_eq!(std::mem::size_of_val(&InodeRecord::default().encode()), 128);
        assert_eq!(
            DentryRecord {
                name: b"x".to_vec(),
                ino: 1,
                rename_ptr: 0
            }
            .encode()
            .len(),
            128
        );
        assert_eq!(PageDescriptor::default().encode().len(), 24);
        assert_eq!(NAME_MAX, 110);
    }

    #[test]
    fn zero_decodes_to_free_records() {
        let z = [0u8; 128];
        assert_eq!(InodeRecord::decode(&z), InodeRecord::default());
        let d = DentryRecord::decode(&z);
        assert!(d.name.is_empty() && d.ino == 0 && d.rename_ptr == 0);
        assert_eq!(PageDescriptor::decode(&z[..24]), PageDescriptor::default());
        assert!(!is_allocated(&z));
    }

    #[test]
    fn single_nonzero_byte_means_allocated() {
        let mut b = [0u8; 128];
        b[77] = 1;
        assert!(is_allocated(&b));
    }

    #[test]
    fn geometry_inode_ratio() {
        let geo = compute_geometry(128 << 20).unwrap();
        let data_bytes = geo.num_pages * PAGE_SIZE;
        assert_eq!(geo.num_inodes, data_bytes.div_ceil(BYTES_PER_INODE));
        assert_eq!(geo.page_region_off % PAGE_SIZE, 0);
        assert!(geo.page_region_off + data_bytes <= 128 << 20);
        // regions in order, non-overlapping
        assert!(geo.inode_table_off >= PAGE_SIZE);
        assert!(geo.desc_table_off >= geo.inode_table_off + (geo.num_inodes + 1) * INODE_SIZE);
        assert!(geo.page_region_off >= geo.desc_table_off + geo.num_pages * DESC_SIZE);
    }

    #[test]
    fn geometry_too_small() {
        assert!(matches!(
            compute_geometry(64 << 10),
            Err(FsError::TooSmall { .. })
        ));
    }

    #[test]
    fn geometry_is_deterministic() {
        assert_eq!(
            compute_geometry(1 << 24).unwrap(),
            compute_geometry(1 << 24).unwrap()
        );
    }

    #[test]
    fn mkfs_allocates_only_root() {
        let mut dev = PmDevice::new(1 << 20);
        let geo = mkfs(&mut dev).unwrap();
        for ino in 0..=geo.num_inodes {
            let off = geo.inode_offset(ino).unwrap();
            let bytes = dev.read_durable(off, INODE_SIZE).unwrap();
            assert_eq!(is_allocated(&bytes), ino == ROOT_INO, "ino {ino}");
        }
        let root = InodeRecord::decode(
            &dev.read_durable(geo.inode_offset(ROOT_INO).unwrap(), INODE_SIZE)
                .unwrap(),
        );
        assert_eq!(root.link_count, 2);
        assert_eq!(root.kind(), Some(FileKind::Dir));
        assert!(dev.pending_chunks().is_empty());
    }

    #[test]
    fn mkfs_leaves_all_descriptors_free() {
        let mut dev = PmDevice::new(1 << 20);
        let geo = mkfs(&mut dev).unwrap();
        for p in 0..geo.num_pages {
            let off = geo.desc_offset(p).unwrap();
            let d = PageDescriptor::decode(&dev.read_durable(off, DESC_SIZE).unwrap());
            assert_eq!(d.owner_ino, 0);
        }
    }

    #[test]
    fn superblock_roundtrip_after_mkfs() {
        let mut dev = PmDevice::new(1 << 20);
        let geo = mkfs(&mut dev).unwrap();
        let (sb, geo2) = read_superblock(&dev).unwrap();
        assert_eq!(sb.clean_unmount, 1);
        assert_eq!(geo, geo2);
    }

    #[test]
    fn dentry_slot_offsets() {
        let geo = compute_geometry(1 << 20).unwrap();
        let base = geo.page_offset(0).unwrap();
        assert_eq!(geo.dentry_offset(0, 0).unwrap(), base);
        assert_eq!(geo.dentry_offset(0, 31).unwrap(), base + 31 * 128);
        assert!(geo.dentry_offset(0, 32).is_err());
        assert_eq!(geo.dentry_location(base + 31 * 128), Some((0, 31)));
    }

    proptest! {
        #[test]
        fn inode_record_roundtrip(ino in 1u64..1000, lc in 0u64..10, size: u64, mode: u64) {
            let r = InodeRecord { ino, link_count: lc, size, mode, ..Default::default() };
            prop_assert_eq!(InodeRecord::decode(&r.encode()), r);
        }

        #[test]
        fn dentry_record_roundtrip(
            name in proptest::collection::vec(1u8..=255, 1..=NAME_MAX),
            ino: u64,
            rename_ptr: u64,
        ) {
            let r = DentryRecord { name, ino, rename_ptr };
            prop_assert_eq!(DentryRecord::decode(&r.encode()), r);
        }

        #[test]
        fn descriptor_roundtrip(owner_ino: u64, kind in 0u64..3, offset: u64) {
            let r = PageDescriptor { owner_ino, kind, offset };
            prop_assert_eq!(PageDescriptor::decode(&r.encode()), r);
        }

        #[test]
        fn geometry_fits_any_capacity(cap in MIN_CAPACITY..(1u64 << 28)) {
            let geo = compute_geometry(cap).unwrap();
            let data = geo.num_pages * PAGE_SIZE;
            prop_assert_eq!(geo.num_inodes, data.div_ceil(BYTES_PER_INODE));
            prop_assert!(geo.page_region_off + data <= cap);
            prop_assert_eq!(geo.page_region_off % PAGE_SIZE, 0);
        }
    }
}

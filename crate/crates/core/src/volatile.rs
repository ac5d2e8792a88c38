//! In-memory indexes and allocators, rebuilt from media at mount time.
//!
//! Nothing here is durable: allocation state is derived from the
//! allocation-by-nonzero rule, the name and page indexes from scanning
//! directory pages and page descriptors. The same scan also feeds fsck and
//! crash recovery.

use crate::error::FsError;
use crate::layout::{
    self, DentryRecord, FileKind, Geometry, InodeRecord, PageDescriptor, PageKind, DENTRIES_PER_PAGE,
    DENTRY_SIZE, DESC_SIZE, INODE_SIZE, ROOT_INO,
};
use crate::pmem::PmDevice;
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Location and target of a durable directory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DentryRef {
    pub location: u64,
    pub ino: u64,
}

/// Free lists for inodes and pages; lowest-numbered-first, deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allocators {
    pub free_inos: BTreeSet<u64>,
    pub free_pages: BTreeSet<u64>,
}

impl Allocators {
    pub fn allocate_ino(&mut self) -> Result<u64, FsError> {
        let ino = *self.free_inos.iter().next().ok_or(FsError::NoSpc("inodes"))?;
        self.free_inos.remove(&ino);
        Ok(ino)
    }

    pub fn release_ino(&mut self, ino: u64) {
        self.free_inos.insert(ino);
    }

    pub fn allocate_pages(&mut self, n: usize) -> Result<Vec<u64>, FsError> {
        if self.free_pages.len() < n {
            return Err(FsError::NoSpc("pages"));
        }
        let pages: Vec<u64> = self.free_pages.iter().take(n).copied().collect();
        for p in &pages {
            self.free_pages.remove(p);
        }
        Ok(pages)
    }

    pub fn release_pages(&mut self, pages: impl IntoIterator<Item = u64>) {
        self.free_pages.extend(pages);
    }
}

/// Volatile file-system state: name index, page indexes, free lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VolatileState {
    /// dir ino -> name -> dentry location + target ino
    pub names: HashMap<u64, BTreeMap<String, DentryRef>>,
    /// file ino -> file offset -> page index
    pub file_pages: HashMap<u64, BTreeMap<u64, u64>>,
    /// dir ino -> page indexes holding its dentries
    pub dir_pages: HashMap<u64, BTreeSet<u64>>,
    /// child ino -> parent dir ino (for synthesizing "..")
    pub parents: HashMap<u64, u64>,
    pub alloc: Allocators,
}

impl VolatileState {
    pub fn insert_name(&mut self, dir: u64, name: &str, entry: DentryRef) -> Result<(), FsError> {
        let prev = self.names.entry(dir).or_default().insert(name.to_string(), entry);
        if prev.is_some() {
            return Err(FsError::Corruption(format!("duplicate index insert: {name}")));
        }
        Ok(())
    }

    pub fn remove_name(&mut self, dir: u64, name: &str) -> Option<DentryRef> {
        let m = self.names.get_mut(&dir)?;
        let out = m.remove(name);
        if m.is_empty() {
            self.names.remove(&dir);
        }
        out
    }

    pub fn lookup_name(&self, dir: u64, name: &str) -> Option<DentryRef> {
        self.names.get(&dir)?.get(name).copied()
    }

    pub fn map_pages(&mut self, ino: u64, pages: impl IntoIterator<Item = (u64, u64)>) {
        self.file_pages.entry(ino).or_default().extend(pages);
    }

    pub fn unmap_pages(&mut self, ino: u64) -> Vec<u64> {
        self.file_pages
            .remove(&ino)
            .map(|m| m.into_values().collect())
            .unwrap_or_default()
    }

    pub fn pages_of(&self, ino: u64) -> Vec<(u64, u64)> {
        self.file_pages
            .get(&ino)
            .map(|m| m.iter().map(|(&o, &p)| (o, p)).collect())
            .unwrap_or_default()
    }

    /// Deterministic text listing of the tree: `path ino size links` per
    /// line, depth-first in name order. Used by equality oracles.
    pub fn dump_tree(&self, dev: &PmDevice, geo: &Geometry) -> String {
        let mut out = String::new();
        let mut stack = vec![("/".to_string(), ROOT_INO)];
        while let Some((path, ino)) = stack.pop() {
            let rec = InodeRecord::decode(
                &dev.read(geo.inode_offset(ino).unwrap(), INODE_SIZE).unwrap(),
            );
            out.push_str(&format!("{} {} {} {}\n", path, ino, rec.size, rec.link_count));
            if rec.kind() == Some(FileKind::Dir) {
                if let Some(children) = self.names.get(&ino) {
                    // reverse order so the stack pops in name order
                    for (name, entry) in children.iter().rev() {
                        let child_path = if path == "/" {
                            format!("/{name}")
                        } else {
                            format!("{path}/{name}")
                        };
                        stack.push((child_path, entry.ino));
                    }
                }
            }
        }
        out
    }
}

/// A directory entry found during a media scan.
#[derive(Debug, Clone)]
pub struct ScannedDentry {
    pub page: u64,
    pub slot: u64,
    pub location: u64,
    pub dir_ino: u64,
    pub rec: DentryRecord,
}

/// Raw facts from one pass over the metadata regions, shared by mount
/// rebuild, fsck and crash recovery.
#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    /// slot index -> decoded record, for every allocated inode slot
    pub inodes: BTreeMap<u64, InodeRecord>,
    /// page index -> decoded descriptor, for every valid (owner != 0) descriptor
    pub descriptors: BTreeMap<u64, PageDescriptor>,
    /// allocated-but-invalid descriptors (owner == 0, other bytes set)
    pub leaked_descriptors: Vec<u64>,
    /// every allocated dentry slot in any dir-kind page
    pub dentries: Vec<ScannedDentry>,
    /// inos reachable from the root via valid dentries
    pub reachable: BTreeSet<u64>,
    /// dentries with a nonzero rename pointer, in location order
    pub rename_pointers: Vec<ScannedDentry>,
}

impl ScanReport {
    /// Valid dentries (ino set) grouped by directory.
    pub fn valid_dentries(&self) -> impl Iterator<Item = &ScannedDentry> {
        self.dentries.iter().filter(|d| d.rec.ino != 0)
    }

    /// Fan-in per ino: number of valid dentries targeting it.
    pub fn fan_in(&self) -> HashMap<u64, u64> {
        let mut m = HashMap::new();
        for d in self.valid_dentries() {
            *m.entry(d.rec.ino).or_insert(0) += 1;
        }
        m
    }

    /// The link count each reachable inode should have: fan-in for files,
    /// 2 + number of child directories for directories.
    pub fn true_link_counts(&self) -> HashMap<u64, u64> {
        let fan_in = self.fan_in();
        let mut out = HashMap::new();
        for (&ino, rec) in &self.inodes {
            if !self.reachable.contains(&ino) {
                continue;
            }
            let t = match rec.kind() {
                Some(FileKind::Dir) => {
                    let child_dirs = self
                        .valid_dentries()
                        .filter(|d| {
                            d.dir_ino == ino
                                && self
                                    .inodes
                                    .get(&d.rec.ino)
                                    .is_some_and(|r| r.kind() == Some(FileKind::Dir))
                        })
                        .count() as u64;
                    2 + child_dirs
                }
                _ => *fan_in.get(&ino).unwrap_or(&0),
            };
            out.insert(ino, t);
        }
        out
    }
}

/// Scan the inode table, descriptor table and directory pages.
pub fn scan(dev: &PmDevice, geo: &Geometry) -> Result<ScanReport, FsError> {
    let mut rep = ScanReport::default();

    for slot in 1..=geo.num_inodes {
        let off = geo.inode_offset(slot)?;
        let bytes = dev.read(off, INODE_SIZE)?;
        if layout::is_allocated(&bytes) {
            rep.inodes.insert(slot, InodeRecord::decode(&bytes));
        }
    }

    for page in 0..geo.num_pages {
        let off = geo.desc_offset(page)?;
        let bytes = dev.read(off, DESC_SIZE)?;
        if layout::is_allocated(&bytes) {
            let desc = PageDescriptor::decode(&bytes);
            if desc.owner_ino != 0 {
                rep.descriptors.insert(page, desc);
            } else {
                rep.leaked_descriptors.push(page);
            }
        }
    }

    for (&page, desc) in &rep.descriptors {
        if PageKind::from_u64(desc.kind) != Some(PageKind::Dir) {
            continue;
        }
        for slot in 0..DENTRIES_PER_PAGE {
            let off = geo.dentry_offset(page, slot)?;
            let bytes = dev.read(off, DENTRY_SIZE)?;
            if layout::is_allocated(&bytes) {
                let d = ScannedDentry {
                    page,
                    slot,
                    location: off,
                    dir_ino: desc.owner_ino,
                    rec: DentryRecord::decode(&bytes),
                };
                if d.rec.rename_ptr != 0 {
                    rep.rename_pointers.push(d.clone());
                }
                rep.dentries.push(d);
            }
        }
    }

    // Reachability from the root through valid dentries.
    if rep.inodes.contains_key(&ROOT_INO) {
        let mut frontier = vec![ROOT_INO];
        rep.reachable.insert(ROOT_INO);
        while let Some(dir) = frontier.pop() {
            for d in rep.dentries.iter().filter(|d| d.dir_ino == dir && d.rec.ino != 0) {
                if rep.inodes.contains_key(&d.rec.ino) && rep.reachable.insert(d.rec.ino) {
                    if rep.inodes[&d.rec.ino].kind() == Some(FileKind::Dir) {
                        frontier.push(d.rec.ino);
                    }
                }
            }
        }
    }

    Ok(rep)
}

/// Rebuild the volatile indexes and allocators from a scanned image.
///
/// Dentries and descriptors count only if their ino is set; inodes count
/// only if reachable from the root. Every all-zero slot goes to a free list.
pub fn rebuild(dev: &PmDevice, geo: &Geometry) -> Result<VolatileState, FsError> {
    let rep = scan(dev, geo)?;
    Ok(rebuild_from_scan(&rep, geo))
}

pub fn rebuild_from_scan(rep: &ScanReport, geo: &Geometry) -> VolatileState {
    let mut vol = VolatileState::default();

    for ino in 1..=geo.num_inodes {
        if !rep.inodes.contains_key(&ino) {
            vol.alloc.free_inos.insert(ino);
        }
    }
    for page in 0..geo.num_pages {
        if !rep.descriptors.contains_key(&page) && !rep.leaked_descriptors.contains(&page) {
            vol.alloc.free_pages.insert(page);
        }
    }

    for (&page, desc) in &rep.descriptors {
        if !rep.reachable.contains(&desc.owner_ino) {
            continue;
        }
        match PageKind::from_u64(desc.kind) {
            Some(PageKind::Dir) => {
                vol.dir_pages.entry(desc.owner_ino).or_default().insert(page);
            }
            Some(PageKind::Data) => {
                vol.file_pages
                    .entry(desc.owner_ino)
                    .or_default()
                    .insert(desc.offset, page);
            }
            None => {}
        }
    }

    for d in rep.valid_dentries() {
        if rep.reachable.contains(&d.dir_ino) && rep.reachable.contains(&d.rec.ino) {
            vol.names
                .entry(d.dir_ino)
                .or_default()
                .insert(d.rec.name_str(), DentryRef { location: d.location, ino: d.rec.ino });
            vol.parents.insert(d.rec.ino, d.dir_ino);
        }
    }
    vol.parents.insert(ROOT_INO, ROOT_INO);

    vol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::mkfs;

    #[test]
    fn allocator_is_lowest_first() {
        let mut a = Allocators::default();
        a.free_inos.extend([5, 2, 9]);
        assert_eq!(a.allocate_ino().unwrap(), 2);
        assert_eq!(a.allocate_ino().unwrap(), 5);
        a.release_ino(2);
        assert_eq!(a.allocate_ino().unwrap(), 2);
        assert_eq!(a.allocate_ino().unwrap(), 9);
        assert_eq!(a.allocate_ino(), Err(FsError::NoSpc("inodes")));
    }

    #[test]
    fn allocate_pages_takes_lowest_block() {
        let mut a = Allocators::default();
        a.free_pages.extend([7, 1, 3, 8]);
        assert_eq!(a.allocate_pages(2).unwrap(), vec![1, 3]);
        assert_eq!(a.allocate_pages(3), Err(FsError::NoSpc("pages")));
    }

    #[test]
    fn index_insert_lookup_remove() {
        let mut v = VolatileState::default();
        let e = DentryRef { location: 4096, ino: 2 };
        v.insert_name(1, "foo", e).unwrap();
        assert_eq!(v.lookup_name(1, "foo"), Some(e));
        assert!(v.insert_name(1, "foo", e).is_err());
        assert_eq!(v.remove_name(1, "foo"), Some(e));
        assert_eq!(v.lookup_name(1, "foo"), None);
    }

    #[test]
    fn rebuild_of_fresh_fs() {
        let mut dev = PmDevice::new(1 << 20);
        let geo = mkfs(&mut dev).unwrap();
        let vol = rebuild(&dev, &geo).unwrap();
        assert_eq!(vol.alloc.free_inos.len() as u64, geo.num_inodes - 1);
        assert!(!vol.alloc.free_inos.contains(&ROOT_INO));
        assert_eq!(vol.alloc.free_pages.len() as u64, geo.num_pages);
        assert!(vol.names.get(&ROOT_INO).is_none());
        // first allocation after mkfs yields ino 2
        let mut a = vol.alloc.clone();
        assert_eq!(a.allocate_ino().unwrap(), 2);
    }

    #[test]
    fn dump_tree_of_fresh_fs() {
        let mut dev = PmDevice::new(1 << 20);
        let geo = mkfs(&mut dev).unwrap();
        let vol = rebuild(&dev, &geo).unwrap();
        assert_eq!(vol.dump_tree(&dev, &geo), "/ 1 0 2\n");
    }
}

//! File-system operations over the typestate layer.
//!
//! Every operation validates its arguments first, then drives the durable
//! updates through typed handles so each store is flushed and fenced in a
//! legal order, and returns only once everything it changed is durable.
//! `fsync` is therefore a no-op. Mounting an image that was not cleanly
//! unmounted runs crash recovery before anything else.

use crate::error::FsError;
use crate::layout::{
    self, sb, DentryRecord, FileKind, Geometry, InodeRecord, PageDescriptor, PageKind,
    DENTRIES_PER_PAGE, DENTRY_SIZE, DESC_SIZE, INODE_SIZE, PAGE_SIZE, ROOT_INO,
};
use crate::pmem::PmDevice;
use crate::typestate::{
    fence_all, Clean, DentryHandle, InFlight, InodeHandle, OpCtx, PageRangeHandle, UnmapPages,
    Written,
};
use crate::volatile::{self, DentryRef, ScanReport, VolatileState};

/// What recovery did while mounting a dirty image.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub was_clean: bool,
    pub renames_completed: usize,
    pub renames_rolled_back: usize,
    pub dentries_swept: usize,
    pub inodes_swept: usize,
    pub descriptors_swept: usize,
    pub links_repaired: usize,
    pub sizes_repaired: usize,
}

impl RecoveryReport {
    pub fn repaired_anything(&self) -> bool {
        *self
            != RecoveryReport {
                was_clean: self.was_clean,
                ..Default::default()
            }
    }
}

/// A mounted file system: device, geometry and the volatile indexes.
pub struct Fs {
    dev: PmDevice,
    geo: Geometry,
    vol: VolatileState,
    last_fences: usize,
}

impl Fs {
    /// Initialize a fresh file system on the device and mount it.
    pub fn mkfs(mut dev: PmDevice) -> Result<Fs, FsError> {
        let geo = layout::mkfs(&mut dev)?;
        // the returned fs is mounted: durably dirty until unmount
        dev.store_u64(sb::CLEAN_UNMOUNT, 0)?;
        dev.flush(sb::CLEAN_UNMOUNT, 8)?;
        dev.fence();
        let vol = volatile::rebuild(&dev, &geo)?;
        Ok(Fs {
            dev,
            geo,
            vol,
            last_fences: 0,
        })
    }

    /// Mount an existing image. A dirty image is recovered first; the report
    /// says whether it was clean and what recovery repaired. The mounted
    /// image is durably marked dirty until `unmount`.
    pub fn mount(mut dev: PmDevice) -> Result<(Fs, RecoveryReport), FsError> {
        let (sbk, geo) = layout::read_superblock(&dev)?;
        let mut report = RecoveryReport {
            was_clean: sbk.clean_unmount == 1,
            ..Default::default()
        };
        if !report.was_clean {
            report = recover(&mut dev, &geo)?;
        }
        dev.mark("begin mount");
        dev.store_u64(sb::CLEAN_UNMOUNT, 0)?;
        dev.flush(sb::CLEAN_UNMOUNT, 8)?;
        dev.fence();
        dev.mark("end mount");
        let vol = volatile::rebuild(&dev, &geo)?;
        Ok((
            Fs {
                dev,
                geo,
                vol,
                last_fences: 0,
            },
            report,
        ))
    }

    /// Durably mark the image clean and hand the device back.
    pub fn unmount(mut self) -> Result<PmDevice, FsError> {
        self.dev.mark("begin unmount");
        self.dev.store_u64(sb::CLEAN_UNMOUNT, 1)?;
        self.dev.flush(sb::CLEAN_UNMOUNT, 8)?;
        self.dev.fence();
        self.dev.mark("end unmount");
        Ok(self.dev)
    }

    pub fn device(&self) -> &PmDevice {
        &self.dev
    }

    pub fn device_mut(&mut self) -> &mut PmDevice {
        &mut self.dev
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    pub fn volatile_state(&self) -> &VolatileState {
        &self.vol
    }

    /// Fences issued by the most recent operation.
    pub fn last_op_fences(&self) -> usize {
        self.last_fences
    }

    /// Deterministic tree listing (`path ino size links` per line).
    pub fn dump_tree(&self) -> String {
        self.vol.dump_tree(&self.dev, &self.geo)
    }

    // -- path resolution ----------------------------------------------------

    fn components(path: &str) -> Result<Vec<&str>, FsError> {
        if !path.starts_with('/') {
            return Err(FsError::Inval(format!("path not absolute: {path}")));
        }
        Ok(path.split('/').filter(|c| !c.is_empty()).collect())
    }

    fn read_inode(&self, ino: u64) -> Result<InodeRecord, FsError> {
        let bytes = self.dev.read(self.geo.inode_offset(ino)?, INODE_SIZE)?;
        if !layout::is_allocated(&bytes) {
            return Err(FsError::NoEnt(format!("inode {ino}")));
        }
        Ok(InodeRecord::decode(&bytes))
    }

    fn walk(&self, comps: &[&str]) -> Result<u64, FsError> {
        let mut cur = ROOT_INO;
        for (i, comp) in comps.iter().enumerate() {
            match *comp {
                "." => continue,
                ".." => {
                    cur = *self.vol.parents.get(&cur).unwrap_or(&ROOT_INO);
                    continue;
                }
                name => {
                    if self.read_inode(cur)?.kind() != Some(FileKind::Dir) {
                        return Err(FsError::NotDir(comps[..i].join("/")));
                    }
                    cur = self
                        .vol
                        .lookup_name(cur, name)
                        .ok_or_else(|| FsError::NoEnt(comps[..=i].join("/")))?
                        .ino;
                }
            }
        }
        Ok(cur)
    }

    /// Resolve a path to its inode number.
    pub fn resolve(&self, path: &str) -> Result<u64, FsError> {
        self.walk(&Self::components(path)?)
    }

    /// Resolve to the parent directory and final name.
    fn resolve_parent<'p>(&self, path: &'p str) -> Result<(u64, &'p str), FsError> {
        let comps = Self::components(path)?;
        let name = *comps.last().ok_or(FsError::Inval("path is the root".into()))?;
        let parent = self.walk(&comps[..comps.len() - 1])?;
        if self.read_inode(parent)?.kind() != Some(FileKind::Dir) {
            return Err(FsError::NotDir(path.into()));
        }
        Ok((parent, name))
    }

    // -- read-only operations ----------------------------------------------

    pub fn stat(&self, path: &str) -> Result<InodeRecord, FsError> {
        self.read_inode(self.resolve(path)?)
    }

    /// Directory listing with the synthesized `.` and `..` entries; neither
    /// is stored on media.
    pub fn readdir(&self, path: &str) -> Result<Vec<(String, u64)>, FsError> {
        let ino = self.resolve(path)?;
        if self.read_inode(ino)?.kind() != Some(FileKind::Dir) {
            return Err(FsError::NotDir(path.into()));
        }
        let mut out = vec![
            (".".to_string(), ino),
            ("..".to_string(), *self.vol.parents.get(&ino).unwrap_or(&ROOT_INO)),
        ];
        if let Some(names) = self.vol.names.get(&ino) {
            out.extend(names.iter().map(|(n, e)| (n.clone(), e.ino)));
        }
        Ok(out)
    }

    pub fn read(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        let ino = self.resolve(path)?;
        let rec = self.read_inode(ino)?;
        if rec.kind() != Some(FileKind::File) {
            return Err(FsError::IsDir(path.into()));
        }
        let end = (offset + len).min(rec.size);
        if offset >= end {
            return Ok(Vec::new());
        }
        let mut out = vec![0u8; (end - offset) as usize];
        for (file_off, page) in self.vol.pages_of(ino) {
            let lo = file_off.max(offset);
            let hi = (file_off + PAGE_SIZE).min(end);
            if lo >= hi {
                continue;
            }
            let media = self.geo.page_offset(page)? + (lo - file_off);
            let bytes = self.dev.read(media, hi - lo)?;
            out[(lo - offset) as usize..(hi - offset) as usize].copy_from_slice(&bytes);
        }
        Ok(out)
    }

    /// Durability is synchronous: every operation fences before returning, so
    /// there is never anything left to sync.
    pub fn fsync(&mut self, path: &str) -> Result<(), FsError> {
        self.resolve(path)?;
        self.last_fences = 0;
        Ok(())
    }

    // -- mutating operations ------------------------------------------------

    /// A free dentry slot exists iff some slot in the directory's pages is
    /// unused; every allocated slot corresponds to one name in the index.
    fn dir_has_free_slot(&self, dir: u64) -> bool {
        let used = self.vol.names.get(&dir).map_or(0, |m| m.len()) as u64;
        let slots = self.vol.dir_pages.get(&dir).map_or(0, |s| s.len()) as u64 * DENTRIES_PER_PAGE;
        used < slots
    }

    fn check_dentry_space(&self, dir: u64, extra_pages: u64) -> Result<(), FsError> {
        if !self.dir_has_free_slot(dir)
            && (self.vol.alloc.free_pages.len() as u64) < 1 + extra_pages
        {
            return Err(FsError::NoSpc("pages"));
        }
        Ok(())
    }

    pub fn create(&mut self, path: &str, perm: u64) -> Result<u64, FsError> {
        self.create_object(path, FileKind::File, perm)
    }

    pub fn mkdir(&mut self, path: &str, perm: u64) -> Result<u64, FsError> {
        self.create_object(path, FileKind::Dir, perm)
    }

    fn create_object(&mut self, path: &str, kind: FileKind, perm: u64) -> Result<u64, FsError> {
        let (parent_ino, name) = self.resolve_parent(path)?;
        crate::typestate::validate_name(name)?;
        if self.vol.lookup_name(parent_ino, name).is_some() {
            return Err(FsError::Exist(path.into()));
        }
        if self.vol.alloc.free_inos.is_empty() {
            return Err(FsError::NoSpc("inodes"));
        }
        self.check_dentry_space(parent_ino, 0)?;

        let label = match kind {
            FileKind::File => format!("create {path}"),
            FileKind::Dir => format!("mkdir {path}"),
        };
        let mut ctx = OpCtx::begin(&mut self.dev, self.geo, label);
        let parent = InodeHandle::open_committed(&mut ctx, parent_ino)?;
        let dentry = DentryHandle::acquire_free_dentry(&mut ctx, &parent, &mut self.vol)?;
        let inode = InodeHandle::acquire_free_inode(&mut ctx, &mut self.vol.alloc)?;
        let new_ino = inode.ino();

        let inode = inode.init_inode(&mut ctx, kind, perm)?;
        let dentry = dentry.set_name(&mut ctx, name)?;

        let (dentry, inode, parent) = match kind {
            FileKind::Dir => {
                // the new directory's `..` adds a link to the parent, made
                // durable alongside (but never after) the commit
                let parent = parent.inc_link(&mut ctx)?;
                let (i, d, p) = (
                    inode.flush(&mut ctx),
                    dentry.flush(&mut ctx),
                    parent.flush(&mut ctx),
                );
                let (i, d, p) = fence_all(&mut ctx, (i, d, p));
                let (d, i, p) = d.commit_dentry_into_dir(&mut ctx, i, p)?;
                (d, i, p)
            }
            FileKind::File => {
                let (i, d) = (inode.flush(&mut ctx), dentry.flush(&mut ctx));
                let (i, d) = fence_all(&mut ctx, (i, d));
                let (d, i) = d.commit_dentry(&mut ctx, i)?;
                (d, i, parent)
            }
        };
        let dentry = dentry.flush(&mut ctx).fence(&mut ctx);

        self.vol.insert_name(
            parent_ino,
            name,
            DentryRef {
                location: dentry.location(),
                ino: new_ino,
            },
        )?;
        self.vol.parents.insert(new_ino, parent_ino);
        inode.release(&mut ctx);
        parent.release(&mut ctx);
        dentry.release(&mut ctx);
        self.last_fences = ctx.finish();
        Ok(new_ino)
    }

    pub fn write(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let ino = self.resolve(path)?;
        let rec = self.read_inode(ino)?;
        if rec.kind() != Some(FileKind::File) {
            return Err(FsError::IsDir(path.into()));
        }
        if offset > rec.size {
            return Err(FsError::Inval(format!(
                "write at {offset} past end of {path} ({} bytes): holes are unsupported",
                rec.size
            )));
        }
        if data.is_empty() {
            self.last_fences = 0;
            return Ok(());
        }
        let end = offset + data.len() as u64;
        let cover = rec.size.next_multiple_of(PAGE_SIZE);
        let new_offsets: Vec<u64> = (cover..end).step_by(PAGE_SIZE as usize).collect();
        if new_offsets.len() > self.vol.alloc.free_pages.len() {
            return Err(FsError::NoSpc("pages"));
        }

        let mut ctx = OpCtx::begin(&mut self.dev, self.geo, format!("write {path}"));
        let inode = InodeHandle::open_committed(&mut ctx, ino)?;
        let mut inflight: Vec<PageRangeHandle<InFlight, Written>> = Vec::new();
        let mut new_map: Vec<(u64, u64)> = Vec::new();

        // overwrite part: bytes landing in already-owned pages
        let over_end = end.min(cover);
        if offset < over_end {
            let touched: Vec<(u64, u64)> = self
                .vol
                .pages_of(ino)
                .into_iter()
                .filter(|&(fo, _)| fo + PAGE_SIZE > offset && fo < over_end)
                .collect();
            let range = PageRangeHandle::open_live(&mut ctx, &inode, &touched)?;
            let range =
                range.write_pages(&mut ctx, offset, &data[..(over_end - offset) as usize])?;
            inflight.push(range.flush(&mut ctx));
        }
        // append part: fresh pages; their descriptors and contents only need
        // to be durable before the size commit, so they share one fence
        if !new_offsets.is_empty() {
            let range =
                PageRangeHandle::alloc_pages(&mut ctx, &inode, &mut self.vol.alloc, &new_offsets)?;
            new_map = range.page_map();
            let range = range.write_pages(&mut ctx, cover, &data[(cover - offset) as usize..])?;
            inflight.push(range.flush(&mut ctx));
        }
        let mut it = inflight.into_iter();
        let mut ranges: Vec<PageRangeHandle<Clean, Written>> = match (it.next(), it.next()) {
            (Some(a), Some(b)) => {
                let (a, b) = fence_all(&mut ctx, (a, b));
                vec![a, b]
            }
            (Some(a), None) => {
                let (a,) = fence_all(&mut ctx, (a,));
                vec![a]
            }
            _ => unreachable!("non-empty write produced no page range"),
        };

        let inode = if end > rec.size {
            // witness: the range holding the highest new page (or, when the
            // growth stays within the last partial page, any written range)
            ranges.sort_by_key(|r| r.page_map().iter().map(|&(o, _)| o).max().unwrap_or(0));
            let witness = ranges.last().unwrap();
            let inode = inode.set_size(&mut ctx, end, witness)?;
            inode.flush(&mut ctx).fence(&mut ctx)
        } else {
            inode
        };

        self.vol.map_pages(ino, new_map);
        inode.release(&mut ctx);
        self.last_fences = ctx.finish();
        Ok(())
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), FsError> {
        let (parent_ino, name) = self.resolve_parent(path)?;
        let entry = self
            .vol
            .lookup_name(parent_ino, name)
            .ok_or_else(|| FsError::NoEnt(path.into()))?;
        if self.read_inode(entry.ino)?.kind() != Some(FileKind::File) {
            return Err(FsError::IsDir(path.into()));
        }

        let mut ctx = OpCtx::begin(&mut self.dev, self.geo, format!("unlink {path}"));
        let dentry = DentryHandle::open_committed(&mut ctx, entry.location)?;
        let dentry = dentry.clear_ino(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);
        let inode = InodeHandle::open_committed(&mut ctx, entry.ino)?;
        let inode = inode.dec_link(&mut ctx, &dentry)?.flush(&mut ctx).fence(&mut ctx);
        let inode = inode.begin_dealloc()?;
        Self::teardown_object(&mut ctx, &mut self.vol, inode, dentry)?;

        self.vol.remove_name(parent_ino, name);
        self.last_fences = ctx.finish();
        Ok(())
    }

    pub fn rmdir(&mut self, path: &str) -> Result<(), FsError> {
        let (parent_ino, name) = self.resolve_parent(path)?;
        let entry = self
            .vol
            .lookup_name(parent_ino, name)
            .ok_or_else(|| FsError::NoEnt(path.into()))?;
        if self.read_inode(entry.ino)?.kind() != Some(FileKind::Dir) {
            return Err(FsError::NotDir(path.into()));
        }
        if self.vol.names.get(&entry.ino).is_some_and(|m| !m.is_empty()) {
            return Err(FsError::NotEmpty(path.into()));
        }

        let mut ctx = OpCtx::begin(&mut self.dev, self.geo, format!("rmdir {path}"));
        let dentry = DentryHandle::open_committed(&mut ctx, entry.location)?;
        let dentry = dentry.clear_ino(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);
        let child = InodeHandle::open_committed(&mut ctx, entry.ino)?;
        let parent = InodeHandle::open_committed(&mut ctx, parent_ino)?;
        // the removed directory's `..` link and the parent's entry go together
        let child = child.dec_link(&mut ctx, &dentry)?.flush(&mut ctx);
        let parent = parent.dec_link(&mut ctx, &dentry)?.flush(&mut ctx);
        let (child, parent) = fence_all(&mut ctx, (child, parent));
        let child = child.begin_dealloc()?; // empty dir at link count 1: only the self-link left
        Self::teardown_object(&mut ctx, &mut self.vol, child, dentry)?;
        parent.settle().release(&mut ctx);

        self.vol.remove_name(parent_ino, name);
        self.vol.names.remove(&entry.ino);
        self.last_fences = ctx.finish();
        Ok(())
    }

    /// Free a dead object: pages (backpointers first), then the inode record,
    /// then the entry slot that used to name it.
    fn teardown_object(
        ctx: &mut OpCtx,
        vol: &mut VolatileState,
        inode: InodeHandle<Clean, UnmapPages>,
        dentry: DentryHandle<Clean, crate::typestate::ClearedIno>,
    ) -> Result<(), FsError> {
        let ino = inode.ino();
        let pairs: Vec<(u64, u64)> = match inode.kind() {
            Some(FileKind::File) => vol.pages_of(ino),
            Some(FileKind::Dir) => vol
                .dir_pages
                .get(&ino)
                .map(|s| s.iter().map(|&p| (0, p)).collect())
                .unwrap_or_default(),
            None => return Err(FsError::Corruption("teardown of invalid inode".into())),
        };
        let range = if pairs.is_empty() {
            PageRangeHandle::empty(ino)
        } else {
            let range = PageRangeHandle::open_live(ctx, &inode, &pairs)?;
            let range = range.clear_backpointers(ctx)?.flush(ctx).fence(ctx);
            range.dealloc_pages(ctx)?.flush(ctx).fence(ctx)
        };
        let inode = inode.dealloc_inode(ctx, &range)?.flush(ctx).fence(ctx);
        let dentry = dentry.dealloc_dentry(ctx)?.flush(ctx).fence(ctx);

        vol.unmap_pages(ino);
        vol.dir_pages.remove(&ino);
        vol.alloc.release_pages(pairs.iter().map(|&(_, p)| p));
        vol.alloc.release_ino(ino);
        vol.parents.remove(&ino);
        inode.release(ctx);
        dentry.release(ctx);
        Ok(())
    }

    pub fn rename(&mut self, src_path: &str, dst_path: &str) -> Result<(), FsError> {
        let (sp, src_name) = self.resolve_parent(src_path)?;
        let (dp, dst_name) = self.resolve_parent(dst_path)?;
        crate::typestate::validate_name(dst_name)?;
        let src = self
            .vol
            .lookup_name(sp, src_name)
            .ok_or_else(|| FsError::NoEnt(src_path.into()))?;
        let moved_rec = self.read_inode(src.ino)?;
        let moved_is_dir = moved_rec.kind() == Some(FileKind::Dir);
        let old_dst = self.vol.lookup_name(dp, dst_name);

        if let Some(od) = old_dst {
            if od.ino == src.ino {
                // same object under both names: POSIX says do nothing
                self.last_fences = 0;
                return Ok(());
            }
            let od_rec = self.read_inode(od.ino)?;
            match (moved_is_dir, od_rec.kind() == Some(FileKind::Dir)) {
                (true, false) => return Err(FsError::NotDir(dst_path.into())),
                (false, true) => return Err(FsError::IsDir(dst_path.into())),
                (true, true) => {
                    if self.vol.names.get(&od.ino).is_some_and(|m| !m.is_empty()) {
                        return Err(FsError::NotEmpty(dst_path.into()));
                    }
                }
                (false, false) => {}
            }
        }
        if moved_is_dir {
            // a directory cannot move into its own subtree
            let mut cur = dp;
            loop {
                if cur == src.ino {
                    return Err(FsError::Inval(format!(
                        "{dst_path} is inside {src_path}"
                    )));
                }
                if cur == ROOT_INO {
                    break;
                }
                cur = *self.vol.parents.get(&cur).unwrap_or(&ROOT_INO);
            }
        }
        self.check_dentry_space(dp, 0)?;

        let same_parent = sp == dp;
        let old_dst_is_dir = old_dst.is_some() && moved_is_dir;
        // net link-count changes from the moved (and overwritten) `..` links
        let dp_delta: i64 =
            (moved_is_dir && !same_parent) as i64 - old_dst_is_dir as i64;
        let sp_delta: i64 = -((moved_is_dir && !same_parent) as i64);

        let mut ctx = OpCtx::begin(
            &mut self.dev,
            self.geo,
            format!("rename {src_path} {dst_path}"),
        );
        let dparent = InodeHandle::open_committed(&mut ctx, dp)?;
        let src_dentry = DentryHandle::open_committed(&mut ctx, src.location)?;
        let moved = InodeHandle::open_committed(&mut ctx, src.ino)?;

        // prepare the destination entry: name only, invisible until commit
        let new_dentry = DentryHandle::acquire_free_dentry(&mut ctx, &dparent, &mut self.vol)?;
        let new_dentry = new_dentry
            .set_name(&mut ctx, dst_name)?
            .flush(&mut ctx)
            .fence(&mut ctx);

        // recovery pointer, plus the destination parent's gained link if any
        let new_dentry = new_dentry.set_rename_pointer(&mut ctx, &src_dentry)?;
        let (new_dentry, dparent) = if dp_delta > 0 {
            let dparent = dparent.inc_link(&mut ctx)?;
            let (nd, p) = (new_dentry.flush(&mut ctx), dparent.flush(&mut ctx));
            let (nd, p) = fence_all(&mut ctx, (nd, p));
            (nd, p.settle())
        } else {
            (new_dentry.flush(&mut ctx).fence(&mut ctx), dparent)
        };

        // the atomic point: after this fence the new name is durable
        let new_dentry = new_dentry
            .commit_rename(&mut ctx, &moved)?
            .flush(&mut ctx)
            .fence(&mut ctx);

        // unlink the old name (and a displaced destination entry) before the
        // recovery pointer goes away, so a crash can always tell which entry
        // for this name survives
        let src_dentry = src_dentry.clear_ino(&mut ctx)?;
        let (src_dentry, old_dentry) = match old_dst {
            Some(od) => {
                let odh = DentryHandle::open_committed(&mut ctx, od.location)?;
                let odh = odh.clear_ino(&mut ctx)?;
                let (s, o) = (src_dentry.flush(&mut ctx), odh.flush(&mut ctx));
                let (s, o) = fence_all(&mut ctx, (s, o));
                (s, Some(o))
            }
            None => (src_dentry.flush(&mut ctx).fence(&mut ctx), None),
        };

        // lost `..` links, now provably disconnected
        let dparent = if dp_delta < 0 {
            let p = dparent.dec_link(&mut ctx, &src_dentry)?.flush(&mut ctx).fence(&mut ctx);
            p.settle()
        } else {
            dparent
        };
        let sparent = if sp_delta < 0 && !same_parent {
            let p = InodeHandle::open_committed(&mut ctx, sp)?;
            let p = p.dec_link(&mut ctx, &src_dentry)?.flush(&mut ctx).fence(&mut ctx);
            Some(p.settle())
        } else {
            None
        };

        let new_dentry = new_dentry
            .clear_rename_pointer(&mut ctx, &src_dentry)?
            .flush(&mut ctx)
            .fence(&mut ctx);
        let src_dentry = src_dentry.dealloc_dentry(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);

        // tear down the displaced destination object, if any
        if let Some(od) = old_dentry {
            let ino = od.cleared_target();
            let oino = InodeHandle::open_committed(&mut ctx, ino)?;
            let oino = oino.dec_link(&mut ctx, &od)?.flush(&mut ctx).fence(&mut ctx);
            let oino = oino.begin_dealloc()?;
            Self::teardown_object(&mut ctx, &mut self.vol, oino, od)?;
            self.vol.names.remove(&ino);
        }

        // indexes
        self.vol.remove_name(sp, src_name);
        if let Some(od) = old_dst {
            debug_assert_eq!(self.vol.lookup_name(dp, dst_name), Some(od));
            self.vol.remove_name(dp, dst_name);
        }
        self.vol.insert_name(
            dp,
            dst_name,
            DentryRef {
                location: new_dentry.location(),
                ino: src.ino,
            },
        )?;
        self.vol.parents.insert(src.ino, dp);

        moved.release(&mut ctx);
        dparent.release(&mut ctx);
        if let Some(p) = sparent {
            p.release(&mut ctx);
        }
        new_dentry.release(&mut ctx);
        src_dentry.release(&mut ctx);
        self.last_fences = ctx.finish();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Crash recovery

/// Repair a dirty image in place: resolve interrupted renames from their
/// recovery pointers, sweep objects a crash left half-created or
/// half-destroyed, and make every link count and size exact again.
///
/// Repairs are ordered like normal teardown — pointers are durably cleared
/// before the objects they pointed at are freed — so a crash during recovery
/// leaves another recoverable image.
pub fn recover(dev: &mut PmDevice, geo: &Geometry) -> Result<RecoveryReport, FsError> {
    let mut report = RecoveryReport::default();
    dev.mark("begin recover");

    // Phase 1: renames. A destination entry with its ino set crossed the
    // atomic point: complete the rename by clearing the source (and any
    // displaced same-name entry). Otherwise roll back by erasing the
    // prepared destination.
    let scan = volatile::scan(dev, geo)?;
    for d in &scan.rename_pointers {
        let dst_loc = d.location;
        let src_loc = d.rec.rename_ptr;
        let src_valid = geo.dentry_location(src_loc).is_some() && src_loc != dst_loc;
        if d.rec.ino != 0 && src_valid {
            report.renames_completed += 1;
            // clear the source entry if it still names the moved object
            let src_ino = dev.read_u64(src_loc + DentryRecord::FIELD_INO)?;
            if src_ino == d.rec.ino {
                dev.store_u64(src_loc + DentryRecord::FIELD_INO, 0)?;
            }
            // clear a displaced destination: same dir, same name, other slot
            for other in scan.valid_dentries() {
                if other.dir_ino == d.dir_ino
                    && other.location != dst_loc
                    && other.location != src_loc
                    && other.rec.name == d.rec.name
                {
                    dev.store_u64(other.location + DentryRecord::FIELD_INO, 0)?;
                }
            }
            dev.persist_all();
            dev.store_u64(dst_loc + DentryRecord::FIELD_RENAME_PTR, 0)?;
            dev.persist_all();
        } else {
            report.renames_rolled_back += 1;
            dev.store_u64(dst_loc + DentryRecord::FIELD_RENAME_PTR, 0)?;
            dev.persist_all();
            dev.store(dst_loc, &[0u8; DENTRY_SIZE as usize])?;
            dev.persist_all();
        }
    }

    // Phase 2: sweep. Re-scan, then clear dangling references and erase
    // half-written entries, then unreferenced descriptors, then unreachable
    // inodes — each wave fenced before the next frees its targets.
    let scan = volatile::scan(dev, geo)?;
    let valid_inode =
        |ino: u64| scan.inodes.get(&ino).is_some_and(|r| r.ino == ino && r.kind().is_some());

    let mut touched_dentries = false;
    for d in &scan.dentries {
        if d.rec.ino != 0 && !valid_inode(d.rec.ino) {
            // points at nothing coherent: unlink it (the slot itself is
            // erased by the ino==0 wave below)
            dev.store_u64(d.location + DentryRecord::FIELD_INO, 0)?;
            report.dentries_swept += 1;
            touched_dentries = true;
        }
    }
    if touched_dentries {
        dev.persist_all();
    }
    // half-allocated or half-freed slots: name bytes but no ino
    let scan = volatile::scan(dev, geo)?;
    let mut swept = false;
    for d in &scan.dentries {
        if d.rec.ino == 0 {
            dev.store(d.location, &[0u8; DENTRY_SIZE as usize])?;
            report.dentries_swept += 1;
            swept = true;
        }
    }
    if swept {
        dev.persist_all();
    }

    let scan = volatile::scan(dev, geo)?;
    let mut desc_swept = false;
    for &page in &scan.leaked_descriptors {
        dev.store(geo.desc_offset(page)? + PageDescriptor::FIELD_OWNER, &[0u8; 24])?;
        report.descriptors_swept += 1;
        desc_swept = true;
    }
    // A torn descriptor store can read back as a plausible offset (the offset
    // chunk unapplied decodes as 0) and collide with the durable page at that
    // offset. Interrupted writes promise nothing about content, so keep the
    // lowest-indexed claimant per (owner, offset) and sweep the rest.
    let mut seen_data: std::collections::BTreeSet<(u64, u64)> = Default::default();
    for (&page, desc) in &scan.descriptors {
        let owner_ok = valid_inode(desc.owner_ino) && scan.reachable.contains(&desc.owner_ino);
        let keep = owner_ok
            && match PageKind::from_u64(desc.kind) {
                Some(PageKind::Dir) => {
                    scan.inodes[&desc.owner_ino].kind() == Some(FileKind::Dir)
                }
                Some(PageKind::Data) => {
                    let rec = &scan.inodes[&desc.owner_ino];
                    rec.kind() == Some(FileKind::File)
                        && desc.offset < rec.size
                        && seen_data.insert((desc.owner_ino, desc.offset))
                }
                None => false,
            };
        if !keep {
            dev.store(geo.desc_offset(page)?, &[0u8; DESC_SIZE as usize])?;
            report.descriptors_swept += 1;
            desc_swept = true;
        }
    }
    if desc_swept {
        dev.persist_all();
    }

    // unreachable or incoherent inodes, now provably unreferenced
    let mut ino_swept = false;
    for (&ino, _) in &scan.inodes {
        if !(valid_inode(ino) && scan.reachable.contains(&ino)) {
            dev.store(geo.inode_offset(ino)?, &[0u8; INODE_SIZE as usize])?;
            report.inodes_swept += 1;
            ino_swept = true;
        }
    }
    if ino_swept {
        dev.persist_all();
    }

    // Phase 3: exact link counts and sizes for what survives.
    let scan = volatile::scan(dev, geo)?;
    let truth = scan.true_link_counts();
    let mut repaired = false;
    for (&ino, rec) in &scan.inodes {
        if let Some(&t) = truth.get(&ino) {
            if rec.link_count != t {
                dev.store_u64(geo.inode_offset(ino)? + InodeRecord::FIELD_LINK_COUNT, t)?;
                report.links_repaired += 1;
                repaired = true;
            }
        }
        if rec.kind() == Some(FileKind::File) {
            // size must be fully covered by a contiguous page prefix
            let mut offsets: Vec<u64> = scan
                .descriptors
                .iter()
                .filter(|(_, d)| {
                    d.owner_ino == ino && PageKind::from_u64(d.kind) == Some(PageKind::Data)
                })
                .map(|(_, d)| d.offset)
                .collect();
            offsets.sort_unstable();
            let mut covered = 0;
            for off in offsets {
                if off == covered {
                    covered += PAGE_SIZE;
                } else {
                    break;
                }
            }
            if rec.size > covered {
                dev.store_u64(geo.inode_offset(ino)? + InodeRecord::FIELD_SIZE, covered)?;
                report.sizes_repaired += 1;
                repaired = true;
            }
        }
    }
    if repaired {
        dev.persist_all();
    }

    dev.mark("end recover");
    Ok(report)
}

/// Scan helper shared with the checker: the report for the current durable
/// image.
pub fn scan_image(image: &[u8]) -> Result<(Geometry, ScanReport), FsError> {
    let dev = PmDevice::from_image(image.to_vec());
    let (_, geo) = layout::read_superblock(&dev)?;
    let rep = volatile::scan(&dev, &geo)?;
    Ok((geo, rep))
}

// ---------------------------------------------------------------------------
// Fault injection (test builds only)

/// Deliberately broken operation variants. Each one performs a real
/// operation's stores with one ordering rule removed — the reorderings the
/// typestate layer exists to prevent, reachable only through the `assume`
/// escape hatch or raw device access behind the `fault-injection` feature.
#[cfg(feature = "fault-injection")]
pub mod faulty {
    use super::*;
    use crate::typestate::{Alloc, ClearedIno, Committed, Dirty, Init, RenamePointerSet, Renaming};

    /// mkdir that lets the dentry commit share a fence with inode
    /// initialization: a crash may persist the entry before the inode.
    pub fn mkdir_commit_before_init_fence(fs: &mut Fs, path: &str) -> Result<u64, FsError> {
        let (parent_ino, name) = fs.resolve_parent(path)?;
        let mut ctx = OpCtx::begin(&mut fs.dev, fs.geo, format!("mkdir! {path}"));
        let parent = InodeHandle::open_committed(&mut ctx, parent_ino)?;
        let dentry = DentryHandle::acquire_free_dentry(&mut ctx, &parent, &mut fs.vol)?;
        let inode = InodeHandle::acquire_free_inode(&mut ctx, &mut fs.vol.alloc)?;
        let new_ino = inode.ino();
        let inode = inode.init_inode(&mut ctx, FileKind::Dir, 0o755)?;
        let dentry = dentry.set_name(&mut ctx, name)?;
        let parent = parent.inc_link(&mut ctx)?;
        // skip the init fence: pretend everything is already clean
        let inode = inode.flush(&mut ctx).assume::<Clean, Init>();
        let dentry = dentry.flush(&mut ctx).assume::<Clean, Alloc>();
        let parent = parent.flush(&mut ctx).assume::<Clean, crate::typestate::IncLink>();
        let (dentry, inode, parent) = dentry.commit_dentry_into_dir(&mut ctx, inode, parent)?;
        let dentry = dentry.flush(&mut ctx).fence(&mut ctx);
        fs.vol.insert_name(parent_ino, name, DentryRef { location: dentry.location(), ino: new_ino })?;
        fs.vol.parents.insert(new_ino, parent_ino);
        inode.release(&mut ctx);
        parent.release(&mut ctx);
        dentry.release(&mut ctx);
        fs.last_fences = ctx.finish();
        Ok(new_ino)
    }

    /// mkdir that never increments the parent's link count.
    pub fn mkdir_skip_parent_inc(fs: &mut Fs, path: &str) -> Result<u64, FsError> {
        let (parent_ino, name) = fs.resolve_parent(path)?;
        let mut ctx = OpCtx::begin(&mut fs.dev, fs.geo, format!("mkdir! {path}"));
        let parent = InodeHandle::open_committed(&mut ctx, parent_ino)?;
        let dentry = DentryHandle::acquire_free_dentry(&mut ctx, &parent, &mut fs.vol)?;
        let inode = InodeHandle::acquire_free_inode(&mut ctx, &mut fs.vol.alloc)?;
        let new_ino = inode.ino();
        let inode = inode.init_inode(&mut ctx, FileKind::Dir, 0o755)?;
        let dentry = dentry.set_name(&mut ctx, name)?;
        let (inode, dentry) = (inode.flush(&mut ctx), dentry.flush(&mut ctx));
        let (inode, dentry) = fence_all(&mut ctx, (inode, dentry));
        // plain commit, bypassing the parent-witness variant
        let (dentry, inode) = dentry.commit_dentry(&mut ctx, inode)?;
        let dentry = dentry.flush(&mut ctx).fence(&mut ctx);
        fs.vol.insert_name(parent_ino, name, DentryRef { location: dentry.location(), ino: new_ino })?;
        fs.vol.parents.insert(new_ino, parent_ino);
        inode.release(&mut ctx);
        parent.release(&mut ctx);
        dentry.release(&mut ctx);
        fs.last_fences = ctx.finish();
        Ok(new_ino)
    }

    /// unlink that decrements the link count before the entry is cleared.
    pub fn unlink_dec_before_clear(fs: &mut Fs, path: &str) -> Result<(), FsError> {
        let (parent_ino, name) = fs.resolve_parent(path)?;
        let entry = fs
            .vol
            .lookup_name(parent_ino, name)
            .ok_or_else(|| FsError::NoEnt(path.into()))?;
        let mut ctx = OpCtx::begin(&mut fs.dev, fs.geo, format!("unlink! {path}"));
        let dentry = DentryHandle::open_committed(&mut ctx, entry.location)?;
        // issue the clear but pretend it is already durable, so the link
        // count drops under a still-live entry
        let fake = dentry.clear_ino(&mut ctx)?.assume::<Clean, ClearedIno>();
        let inode = InodeHandle::open_committed(&mut ctx, entry.ino)?;
        let inode = inode.dec_link(&mut ctx, &fake)?.flush(&mut ctx).fence(&mut ctx);
        // only now make the clear durable
        let dentry = fake.assume::<Dirty, ClearedIno>().flush(&mut ctx).fence(&mut ctx);
        let inode = inode.begin_dealloc()?;
        Fs::teardown_object(&mut ctx, &mut fs.vol, inode, dentry)?;
        fs.vol.remove_name(parent_ino, name);
        fs.last_fences = ctx.finish();
        Ok(())
    }

    /// append that commits the new size before the pages are durable.
    pub fn write_set_size_before_page_fence(
        fs: &mut Fs,
        path: &str,
        data: &[u8],
    ) -> Result<(), FsError> {
        let ino = fs.resolve(path)?;
        let rec = fs.read_inode(ino)?;
        let offset = rec.size;
        let end = offset + data.len() as u64;
        let cover = rec.size.next_multiple_of(PAGE_SIZE);
        let new_offsets: Vec<u64> = (cover..end).step_by(PAGE_SIZE as usize).collect();
        let mut ctx = OpCtx::begin(&mut fs.dev, fs.geo, format!("write! {path}"));
        let inode = InodeHandle::open_committed(&mut ctx, ino)?;
        let range = PageRangeHandle::alloc_pages(&mut ctx, &inode, &mut fs.vol.alloc, &new_offsets)?;
        let new_map = range.page_map();
        let range = range.write_pages(&mut ctx, offset.max(cover), &data[(cover.saturating_sub(offset)) as usize..])?;
        // size first, data after: exactly backwards
        let witness = range.assume::<Clean, Written>();
        let inode = inode.set_size(&mut ctx, end, &witness)?.flush(&mut ctx).fence(&mut ctx);
        let range = witness.assume::<Dirty, Written>();
        let _range = range.flush(&mut ctx).fence(&mut ctx);
        fs.vol.map_pages(ino, new_map);
        inode.release(&mut ctx);
        fs.last_fences = ctx.finish();
        Ok(())
    }

    /// rename that unlinks the source before the destination commit.
    pub fn rename_clear_src_before_commit(
        fs: &mut Fs,
        src_path: &str,
        dst_path: &str,
    ) -> Result<(), FsError> {
        let (sp, src_name) = fs.resolve_parent(src_path)?;
        let (dp, dst_name) = fs.resolve_parent(dst_path)?;
        let src = fs
            .vol
            .lookup_name(sp, src_name)
            .ok_or_else(|| FsError::NoEnt(src_path.into()))?;
        let mut ctx = OpCtx::begin(&mut fs.dev, fs.geo, format!("rename! {src_path} {dst_path}"));
        let dparent = InodeHandle::open_committed(&mut ctx, dp)?;
        let src_dentry = DentryHandle::open_committed(&mut ctx, src.location)?;
        let moved = InodeHandle::open_committed(&mut ctx, src.ino)?;
        let new_dentry = DentryHandle::acquire_free_dentry(&mut ctx, &dparent, &mut fs.vol)?;
        let new_dentry = new_dentry.set_name(&mut ctx, dst_name)?.flush(&mut ctx).fence(&mut ctx);
        let new_dentry = new_dentry
            .set_rename_pointer(&mut ctx, &src_dentry)?
            .flush(&mut ctx)
            .fence(&mut ctx);
        // old name gone before the new one exists
        let src_dentry = src_dentry.clear_ino(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);
        let new_dentry = new_dentry.commit_rename(&mut ctx, &moved)?.flush(&mut ctx).fence(&mut ctx);
        let new_dentry = new_dentry
            .clear_rename_pointer(&mut ctx, &src_dentry)?
            .flush(&mut ctx)
            .fence(&mut ctx);
        let src_dentry = src_dentry.dealloc_dentry(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);
        fs.vol.remove_name(sp, src_name);
        fs.vol
            .insert_name(dp, dst_name, DentryRef { location: new_dentry.location(), ino: src.ino })?;
        fs.vol.parents.insert(src.ino, dp);
        moved.release(&mut ctx);
        dparent.release(&mut ctx);
        new_dentry.release(&mut ctx);
        src_dentry.release(&mut ctx);
        fs.last_fences = ctx.finish();
        Ok(())
    }

    /// rename without the recovery pointer.
    pub fn rename_skip_rename_pointer(
        fs: &mut Fs,
        src_path: &str,
        dst_path: &str,
    ) -> Result<(), FsError> {
        let (sp, src_name) = fs.resolve_parent(src_path)?;
        let (dp, dst_name) = fs.resolve_parent(dst_path)?;
        let src = fs
            .vol
            .lookup_name(sp, src_name)
            .ok_or_else(|| FsError::NoEnt(src_path.into()))?;
        let mut ctx = OpCtx::begin(&mut fs.dev, fs.geo, format!("rename! {src_path} {dst_path}"));
        let dparent = InodeHandle::open_committed(&mut ctx, dp)?;
        let src_dentry = DentryHandle::open_committed(&mut ctx, src.location)?;
        let moved = InodeHandle::open_committed(&mut ctx, src.ino)?;
        let new_dentry = DentryHandle::acquire_free_dentry(&mut ctx, &dparent, &mut fs.vol)?;
        let new_dentry = new_dentry.set_name(&mut ctx, dst_name)?.flush(&mut ctx).fence(&mut ctx);
        // claim the pointer is set without storing it
        let new_dentry = new_dentry.assume::<Clean, RenamePointerSet>();
        let new_dentry = new_dentry.commit_rename(&mut ctx, &moved)?.flush(&mut ctx).fence(&mut ctx);
        let src_dentry = src_dentry.clear_ino(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);
        // nothing to clear; skip straight past the teardown of the pointer
        let new_dentry = new_dentry.assume::<Clean, Renaming>().assume::<Clean, Committed>();
        let src_dentry = src_dentry.dealloc_dentry(&mut ctx)?.flush(&mut ctx).fence(&mut ctx);
        fs.vol.remove_name(sp, src_name);
        fs.vol
            .insert_name(dp, dst_name, DentryRef { location: new_dentry.location(), ino: src.ino })?;
        fs.vol.parents.insert(src.ino, dp);
        moved.release(&mut ctx);
        dparent.release(&mut ctx);
        new_dentry.release(&mut ctx);
        src_dentry.release(&mut ctx);
        fs.last_fences = ctx.finish();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh() -> Fs {
        Fs::mkfs(PmDevice::new(1 << 21)).unwrap()
    }

    #[test]
    fn create_write_read_roundtrip() {
        let mut fs = fresh();
        fs.create("/a.txt", 0o644).unwrap();
        fs.write("/a.txt", 0, b"hello world").unwrap();
        assert_eq!(fs.read("/a.txt", 0, 64).unwrap(), b"hello world");
        assert_eq!(fs.read("/a.txt", 6, 5).unwrap(), b"world");
        assert_eq!(fs.stat("/a.txt").unwrap().size, 11);
    }

    #[test]
    fn mkdir_nesting_and_readdir() {
        let mut fs = fresh();
        fs.mkdir("/d", 0o755).unwrap();
        fs.mkdir("/d/e", 0o755).unwrap();
        fs.create("/d/f", 0o644).unwrap();
        let names: Vec<String> = fs.readdir("/d").unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec![".", "..", "e", "f"]);
        assert_eq!(fs.stat("/d").unwrap().link_count, 3);
        assert_eq!(fs.stat("/").unwrap().link_count, 3);
        // `..` resolves through the synthesized parent link
        assert_eq!(fs.resolve("/d/e/..").unwrap(), fs.resolve("/d").unwrap());
    }

    #[test]
    fn fence_budget_per_operation() {
        let mut fs = fresh();
        fs.mkdir("/warm", 0o755).unwrap(); // pays the root's first dir page
        assert_eq!(fs.last_op_fences(), 3);
        fs.mkdir("/d2", 0o755).unwrap();
        assert_eq!(fs.last_op_fences(), 2);
        fs.create("/f", 0o644).unwrap();
        assert_eq!(fs.last_op_fences(), 2);
        fs.write("/f", 0, &[7u8; 5000]).unwrap(); // alloc + size commit
        assert_eq!(fs.last_op_fences(), 2);
        fs.write("/f", 100, &[8u8; 50]).unwrap(); // pure overwrite
        assert_eq!(fs.last_op_fences(), 1);
        fs.fsync("/f").unwrap();
        assert_eq!(fs.last_op_fences(), 0);
        fs.rename("/f", "/g").unwrap();
        assert_eq!(fs.last_op_fences(), 6);
        fs.unlink("/g").unwrap(); // 2 pages to free
        assert_eq!(fs.last_op_fences(), 6);
        fs.create("/empty", 0o644).unwrap();
        fs.unlink("/empty").unwrap(); // no pages
        assert_eq!(fs.last_op_fences(), 4);
        fs.rmdir("/d2").unwrap();
        assert_eq!(fs.last_op_fences(), 4);
    }

    #[test]
    fn every_operation_is_synchronously_durable() {
        let mut fs = fresh();
        let ops: Vec<Box<dyn Fn(&mut Fs) -> Result<(), FsError>>> = vec![
            Box::new(|f| f.mkdir("/d", 0o755).map(drop)),
            Box::new(|f| f.create("/d/x", 0o644).map(drop)),
            Box::new(|f| f.write("/d/x", 0, &[1u8; 9000])),
            Box::new(|f| f.rename("/d/x", "/d/y")),
            Box::new(|f| f.unlink("/d/y")),
            Box::new(|f| f.rmdir("/d")),
        ];
        for op in ops {
            op(&mut fs).unwrap();
            assert!(fs.device().pending_chunks().is_empty());
            // the durable image alone reproduces the volatile state
            let rebuilt = volatile::rebuild(fs.device(), &fs.geo).unwrap();
            assert_eq!(rebuilt.names, fs.vol.names);
            assert_eq!(rebuilt.alloc, fs.vol.alloc);
        }
    }

    #[test]
    fn unlink_returns_all_resources() {
        let mut fs = fresh();
        let before = fs.vol.alloc.clone();
        fs.create("/f", 0o644).unwrap();
        fs.write("/f", 0, &[1u8; 10000]).unwrap();
        fs.unlink("/f").unwrap();
        // the dir page the root gained stays; inode and data pages return
        assert_eq!(fs.vol.alloc.free_inos, before.free_inos);
        assert_eq!(
            fs.vol.alloc.free_pages.len(),
            before.free_pages.len() - 1
        );
    }

    #[test]
    fn posix_error_cases() {
        let mut fs = fresh();
        fs.mkdir("/d", 0o755).unwrap();
        fs.create("/d/f", 0o644).unwrap();
        assert!(matches!(fs.create("/d/f", 0o644), Err(FsError::Exist(_))));
        assert!(matches!(fs.mkdir("/d", 0o755), Err(FsError::Exist(_))));
        assert!(matches!(fs.unlink("/d"), Err(FsError::IsDir(_))));
        assert!(matches!(fs.rmdir("/d/f"), Err(FsError::NotDir(_))));
        assert!(matches!(fs.rmdir("/d"), Err(FsError::NotEmpty(_))));
        assert!(matches!(fs.read("/nope", 0, 1), Err(FsError::NoEnt(_))));
        assert!(matches!(fs.create("/d/f/x", 0o644), Err(FsError::NotDir(_))));
        assert!(matches!(fs.write("/d/f", 100, b"x"), Err(FsError::Inval(_))));
        assert!(matches!(fs.rename("/d", "/d/sub"), Err(FsError::Inval(_))));
        assert!(matches!(fs.rename("/d", "/d/f"), Err(FsError::NotDir(_))));
        assert!(matches!(fs.rename("/d/f", "/d"), Err(FsError::IsDir(_))));
        assert!(matches!(fs.create("/d/bad/sub", 0o644), Err(FsError::NoEnt(_))));
    }

    #[test]
    fn rename_overwrite_frees_displaced_file() {
        let mut fs = fresh();
        fs.create("/a", 0o644).unwrap();
        fs.write("/a", 0, b"aaa").unwrap();
        fs.create("/b", 0o644).unwrap();
        fs.write("/b", 0, b"bbbb").unwrap();
        let b_ino = fs.resolve("/b").unwrap();
        fs.rename("/a", "/b").unwrap();
        assert_eq!(fs.read("/b", 0, 10).unwrap(), b"aaa");
        assert!(fs.resolve("/a").is_err());
        assert!(fs.vol.alloc.free_inos.contains(&b_ino));
        // the displaced file's page came back too
        let rebuilt = volatile::rebuild(fs.device(), &fs.geo).unwrap();
        assert_eq!(rebuilt.alloc, fs.vol.alloc);
    }

    #[test]
    fn cross_directory_rename_of_directory_moves_links() {
        let mut fs = fresh();
        fs.mkdir("/a", 0o755).unwrap();
        fs.mkdir("/b", 0o755).unwrap();
        fs.mkdir("/a/sub", 0o755).unwrap();
        assert_eq!(fs.stat("/a").unwrap().link_count, 3);
        assert_eq!(fs.stat("/b").unwrap().link_count, 2);
        fs.rename("/a/sub", "/b/sub").unwrap();
        assert_eq!(fs.stat("/a").unwrap().link_count, 2);
        assert_eq!(fs.stat("/b").unwrap().link_count, 3);
        assert_eq!(fs.resolve("/b/sub/..").unwrap(), fs.resolve("/b").unwrap());
    }

    #[test]
    fn rename_onto_itself_is_noop() {
        let mut fs = fresh();
        fs.create("/x", 0o644).unwrap();
        let dump = fs.dump_tree();
        fs.rename("/x", "/x").unwrap();
        assert_eq!(fs.last_op_fences(), 0);
        assert_eq!(fs.dump_tree(), dump);
    }

    #[test]
    fn rename_overwrite_empty_directory() {
        let mut fs = fresh();
        fs.mkdir("/a", 0o755).unwrap();
        fs.mkdir("/b", 0o755).unwrap();
        fs.mkdir("/a/c", 0o755).unwrap();
        assert_eq!(fs.stat("/").unwrap().link_count, 4);
        fs.rename("/a/c", "/b").unwrap();
        // root: lost dir b, gained the moved c under its name — net zero
        assert_eq!(fs.stat("/").unwrap().link_count, 4);
        assert_eq!(fs.stat("/a").unwrap().link_count, 2);
        assert_eq!(fs.stat("/b").unwrap().link_count, 2);
        let rebuilt = volatile::rebuild(fs.device(), &fs.geo).unwrap();
        assert_eq!(rebuilt.names, fs.vol.names);
        assert_eq!(rebuilt.alloc, fs.vol.alloc);
    }

    #[test]
    fn mount_unmount_roundtrip_preserves_tree() {
        let mut fs = fresh();
        fs.mkdir("/d", 0o755).unwrap();
        fs.create("/d/f", 0o644).unwrap();
        fs.write("/d/f", 0, b"data").unwrap();
        let dump = fs.dump_tree();
        let dev = fs.unmount().unwrap();
        let (fs2, report) = Fs::mount(dev).unwrap();
        assert!(report.was_clean);
        assert!(!report.repaired_anything());
        assert_eq!(fs2.dump_tree(), dump);
    }

    #[test]
    fn mount_of_crashed_image_recovers() {
        let mut fs = fresh();
        fs.create("/f", 0o644).unwrap();
        // simulate a crash: clone the durable image mid-session (dirty flag set)
        let image = fs.device().media().to_vec();
        let (fs2, report) = Fs::mount(PmDevice::from_image(image)).unwrap();
        assert!(!report.was_clean);
        assert_eq!(fs2.dump_tree(), fs.dump_tree());
    }

    #[test]
    fn recovery_completes_interrupted_rename() {
        let mut fs = fresh();
        fs.create("/old", 0o644).unwrap();
        let ino = fs.resolve("/old").unwrap();
        let src_loc = fs.vol.lookup_name(ROOT_INO, "old").unwrap().location;
        // forge the post-commit crash state by hand: new entry committed with
        // its rename pointer still set, old entry still valid
        let geo = fs.geo;
        let dev = fs.device_mut();
        let new_loc = src_loc + DENTRY_SIZE;
        dev.store(new_loc, b"new").unwrap();
        dev.store_u64(new_loc + DentryRecord::FIELD_INO, ino).unwrap();
        dev.store_u64(new_loc + DentryRecord::FIELD_RENAME_PTR, src_loc).unwrap();
        dev.persist_all();
        let mut dev = PmDevice::from_image(fs.device().media().to_vec());
        let report = recover(&mut dev, &geo).unwrap();
        assert_eq!(report.renames_completed, 1);
        let vol = volatile::rebuild(&dev, &geo).unwrap();
        assert_eq!(vol.lookup_name(ROOT_INO, "new").unwrap().ino, ino);
        assert!(vol.lookup_name(ROOT_INO, "old").is_none());
        assert_eq!(
            dev.read_u64(new_loc + DentryRecord::FIELD_RENAME_PTR).unwrap(),
            0
        );
    }

    #[test]
    fn recovery_rolls_back_uncommitted_rename() {
        let mut fs = fresh();
        fs.create("/old", 0o644).unwrap();
        let src_loc = fs.vol.lookup_name(ROOT_INO, "old").unwrap().location;
        let geo = fs.geo;
        let dev = fs.device_mut();
        let new_loc = src_loc + DENTRY_SIZE;
        dev.store(new_loc, b"new").unwrap();
        dev.store_u64(new_loc + DentryRecord::FIELD_RENAME_PTR, src_loc).unwrap();
        dev.persist_all();
        let mut dev = PmDevice::from_image(fs.device().media().to_vec());
        let report = recover(&mut dev, &geo).unwrap();
        assert_eq!(report.renames_rolled_back, 1);
        let vol = volatile::rebuild(&dev, &geo).unwrap();
        assert!(vol.lookup_name(ROOT_INO, "old").is_some());
        assert!(vol.lookup_name(ROOT_INO, "new").is_none());
        assert!(!layout::is_allocated(&dev.read(new_loc, DENTRY_SIZE).unwrap()));
    }

    #[test]
    fn recovery_sweeps_orphan_inode_and_pages() {
        let mut fs = fresh();
        fs.create("/f", 0o644).unwrap();
        fs.write("/f", 0, &[9u8; 4096]).unwrap();
        let ino = fs.resolve("/f").unwrap();
        let loc = fs.vol.lookup_name(ROOT_INO, "f").unwrap().location;
        let geo = fs.geo;
        // orphan it: clear the dentry's ino by hand
        let dev = fs.device_mut();
        dev.store_u64(loc + DentryRecord::FIELD_INO, 0).unwrap();
        dev.persist_all();
        let mut dev = PmDevice::from_image(fs.device().media().to_vec());
        let report = recover(&mut dev, &geo).unwrap();
        assert_eq!(report.inodes_swept, 1);
        assert_eq!(report.descriptors_swept, 1);
        assert!(report.dentries_swept >= 1);
        let vol = volatile::rebuild(&dev, &geo).unwrap();
        assert!(vol.alloc.free_inos.contains(&ino));
    }

    #[test]
    fn recovery_is_idempotent() {
        let mut fs = fresh();
        fs.create("/f", 0o644).unwrap();
        let loc = fs.vol.lookup_name(ROOT_INO, "f").unwrap().location;
        let geo = fs.geo;
        let dev = fs.device_mut();
        dev.store_u64(loc + DentryRecord::FIELD_INO, 0).unwrap();
        dev.persist_all();
        let mut dev = PmDevice::from_image(fs.device().media().to_vec());
        recover(&mut dev, &geo).unwrap();
        let once = dev.media().to_vec();
        let report = recover(&mut dev, &geo).unwrap();
        assert!(!report.repaired_anything());
        assert_eq!(dev.media(), &once[..]);
    }

    #[test]
    fn deep_paths_and_long_names() {
        let mut fs = fresh();
        let long = "n".repeat(110);
        fs.mkdir(&format!("/{long}"), 0o755).unwrap();
        fs.create(&format!("/{long}/{long}"), 0o644).unwrap();
        assert!(fs.resolve(&format!("/{long}/{long}")).is_ok());
        let too_long = "n".repeat(111);
        assert!(matches!(
            fs.create(&format!("/{too_long}"), 0o644),
            Err(FsError::NameTooLong(_))
        ));
    }

    #[test]
    fn many_entries_allocate_second_dir_page() {
        let mut fs = fresh();
        for i in 0..(DENTRIES_PER_PAGE + 3) {
            fs.create(&format!("/f{i:03}"), 0o644).unwrap();
        }
        assert_eq!(fs.vol.dir_pages[&ROOT_INO].len(), 2);
        let rebuilt = volatile::rebuild(fs.device(), &fs.geo).unwrap();
        assert_eq!(rebuilt.names[&ROOT_INO].len() as u64, DENTRIES_PER_PAGE + 3);
    }

    #[test]
    fn out_of_space_is_clean() {
        // smallest legal device: fill the inode table
        let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
        let mut made = 0;
        loop {
            match fs.create(&format!("/f{made}"), 0o644) {
                Ok(_) => made += 1,
                Err(FsError::NoSpc(_)) => break,
                Err(e) => panic!("unexpected {e}"),
            }
        }
        assert!(made > 0);
        // still consistent and usable
        let rebuilt = volatile::rebuild(fs.device(), &fs.geo).unwrap();
        assert_eq!(rebuilt.names, fs.vol.names);
        fs.unlink("/f0").unwrap();
        fs.create("/again", 0o644).unwrap();
    }
}

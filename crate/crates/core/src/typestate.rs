//! Update-ordering rules encoded in the type system.
//!
//! Every durable object is manipulated through a handle carrying two
//! type-level states: a persistence state (`Dirty` after a store, `InFlight`
//! after a flush, `Clean` after a fence) and an operational state naming the
//! last durable transition. Each legal transition is a method that consumes
//! the handle and is only defined on the states where the update is safe to
//! issue, so an out-of-order update — committing a directory entry before its
//! inode is durable, freeing an inode while pages still point at it — fails
//! to compile. Transitions that must be ordered *across* objects take the
//! prerequisite handle as a witness argument.
//!
//! The soft-updates rules enforced here:
//! 1. never point at an object before it is initialized and durable,
//! 2. never reuse an object before every pointer to it is durably cleared,
//! 3. never clear the old pointer to a live object before the new one is
//!    durably set (rename keeps both plus a rename pointer for recovery).

use crate::error::FsError;
use crate::layout::{
    self, DentryRecord, FileKind, Geometry, InodeRecord, PageDescriptor, PageKind,
    DENTRIES_PER_PAGE, DENTRY_SIZE, DESC_SIZE, INODE_SIZE, NAME_MAX, PAGE_SIZE,
};
use crate::pmem::PmDevice;
use crate::volatile::{Allocators, VolatileState};
use std::collections::HashSet;
use std::marker::PhantomData;

// ---------------------------------------------------------------------------
// State markers

mod sealed {
    pub trait Sealed {}
}

/// Persistence states: where the last stores of this handle stand relative to
/// the flush/fence pipeline.
pub trait Persistence: sealed::Sealed {
    const NAME: &'static str;
}

/// Operational states an inode handle can be in.
pub trait InodeState: sealed::Sealed {
    const NAME: &'static str;
}

/// Operational states a directory-entry handle can be in.
pub trait DentryState: sealed::Sealed {
    const NAME: &'static str;
}

/// Operational states a page-range handle can be in.
pub trait PageState: sealed::Sealed {
    const NAME: &'static str;
}

macro_rules! markers {
    ($trait:ident : $($name:ident),+) => {
        $(
            impl $trait for $name { const NAME: &'static str = stringify!($name); }
        )+
    };
}
macro_rules! units {
    ($($name:ident),+) => {
        $(
            pub struct $name;
            impl sealed::Sealed for $name {}
        )+
    };
}

units!(Dirty, InFlight, Clean);
units!(
    Free, Init, Committed, IncLink, DecLink, UnmapPages, Dealloc, Alloc, RenamePointerSet,
    Renaming, ClearedIno, Written, Live, ClearedBackptrs
);

markers!(Persistence: Dirty, InFlight, Clean);
markers!(InodeState: Free, Init, Committed, IncLink, DecLink, UnmapPages, Dealloc);
markers!(DentryState: Free, Alloc, Committed, RenamePointerSet, Renaming, ClearedIno, Dealloc);
markers!(PageState: Free, Alloc, Written, Live, ClearedBackptrs, Dealloc);

/// Inode states that may own a new directory entry slot while it is filled in.
pub trait DirParent: InodeState {}
impl DirParent for Committed {}
impl DirParent for IncLink {}

/// Inode states that may receive freshly allocated pages.
pub trait PageOwner: InodeState {}
impl PageOwner for Init {}
impl PageOwner for Committed {}

/// Page-range states whose page contents may be (re)written.
pub trait Writable: PageState {}
impl Writable for Alloc {}
impl Writable for Live {}

/// Inode states whose live pages may be loaded: committed objects for
/// overwrites, dying objects for teardown.
pub trait PageHolder: InodeState {}
impl PageHolder for Committed {}
impl PageHolder for UnmapPages {}

// ---------------------------------------------------------------------------
// Operation context

/// Mutable device context for one file-system operation.
///
/// Tracks fences issued within the operation and which object locations
/// currently have a live handle, so the same slot cannot be handed out twice.
pub struct OpCtx<'d> {
    dev: &'d mut PmDevice,
    geo: Geometry,
    live: HashSet<u64>,
    fences: usize,
    label: String,
}

impl<'d> OpCtx<'d> {
    pub fn begin(dev: &'d mut PmDevice, geo: Geometry, label: impl Into<String>) -> Self {
        let label = label.into();
        dev.mark(format!("begin {label}"));
        OpCtx {
            dev,
            geo,
            live: HashSet::new(),
            fences: 0,
            label,
        }
    }

    /// Close out the operation. Every acquired handle must have been
    /// released and every store fenced: a synchronous operation leaves
    /// nothing in the cache layer.
    pub fn finish(self) -> usize {
        assert!(
            self.live.is_empty(),
            "operation {:?} finished with live handles",
            self.label
        );
        assert!(
            self.dev.pending_chunks().is_empty(),
            "operation {:?} finished with unfenced stores",
            self.label
        );
        self.dev.mark(format!("end {}", self.label));
        self.fences
    }

    /// Drop the context on an error path without the completion checks.
    pub fn abandon(self) {
        self.dev.mark(format!("end {}", self.label));
    }

    pub fn fences(&self) -> usize {
        self.fences
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    pub fn device(&self) -> &PmDevice {
        &self.dev
    }

    /// Raw device access for fault-injection builds only: lets test-only
    /// mutants issue stores outside the typestate discipline.
    #[cfg(feature = "fault-injection")]
    pub fn device_mut(&mut self) -> &mut PmDevice {
        self.dev
    }

    fn fence_device(&mut self) {
        self.dev.fence();
        self.fences += 1;
    }

    fn register(&mut self, location: u64) -> Result<(), FsError> {
        if !self.live.insert(location) {
            return Err(FsError::Corruption(format!(
                "double acquire of location {location}"
            )));
        }
        Ok(())
    }

    fn unregister(&mut self, location: u64) {
        self.live.remove(&location);
    }

    fn flush_ranges(&mut self, ranges: &[(u64, u64)]) {
        let mut lines: Vec<u64> = ranges
            .iter()
            .flat_map(|&(off, len)| PmDevice::lines_covering(off, len))
            .collect();
        lines.sort_unstable();
        lines.dedup();
        for line in lines {
            self.dev.flush_line(line);
        }
    }
}

// ---------------------------------------------------------------------------
// Inode handles

struct InodeInner {
    ino: u64,
    off: u64,
    rec: InodeRecord,
    dirty: Vec<(u64, u64)>,
}

/// Typed handle to one inode record.
pub struct InodeHandle<P: Persistence, S: InodeState> {
    inner: InodeInner,
    _s: PhantomData<(P, S)>,
}

impl<P: Persistence, S: InodeState> InodeHandle<P, S> {
    fn relabel<P2: Persistence, S2: InodeState>(self) -> InodeHandle<P2, S2> {
        InodeHandle {
            inner: self.inner,
            _s: PhantomData,
        }
    }

    pub fn ino(&self) -> u64 {
        self.inner.ino
    }

    pub fn record(&self) -> &InodeRecord {
        &self.inner.rec
    }

    pub fn kind(&self) -> Option<FileKind> {
        self.inner.rec.kind()
    }

    /// Fault-injection escape hatch: relabel without any checks.
    #[cfg(feature = "fault-injection")]
    pub fn assume<P2: Persistence, S2: InodeState>(self) -> InodeHandle<P2, S2> {
        self.relabel()
    }
}

impl InodeHandle<Clean, Free> {
    /// Take the lowest free inode slot. The slot must read back all-zero.
    pub fn acquire_free_inode(ctx: &mut OpCtx, alloc: &mut Allocators) -> Result<Self, FsError> {
        let ino = alloc.allocate_ino()?;
        let off = ctx.geo.inode_offset(ino)?;
        let bytes = ctx.dev.read(off, INODE_SIZE)?;
        if layout::is_allocated(&bytes) {
            return Err(FsError::Corruption(format!(
                "free list handed out allocated inode {ino}"
            )));
        }
        ctx.register(off)?;
        Ok(InodeHandle {
            inner: InodeInner {
                ino,
                off,
                rec: InodeRecord::default(),
                dirty: Vec::new(),
            },
            _s: PhantomData,
        })
    }

    /// Write the full record for a new file or directory. A directory starts
    /// at link count 2 (itself and its parent's entry), a file at 1.
    pub fn init_inode(
        mut self,
        ctx: &mut OpCtx,
        kind: FileKind,
        perm: u64,
    ) -> Result<InodeHandle<Dirty, Init>, FsError> {
        self.inner.rec = InodeRecord {
            ino: self.inner.ino,
            link_count: match kind {
                FileKind::Dir => 2,
                FileKind::File => 1,
            },
            size: 0,
            mode: kind.mode(perm),
            ..Default::default()
        };
        ctx.dev.store(self.inner.off, &self.inner.rec.encode())?;
        self.inner.dirty.push((self.inner.off, INODE_SIZE));
        Ok(self.relabel())
    }

    /// Return an unused acquired slot (error paths).
    pub fn release(self, ctx: &mut OpCtx) {
        ctx.unregister(self.inner.off);
    }
}

impl InodeHandle<Clean, Committed> {
    /// Load a committed inode by number.
    pub fn open_committed(ctx: &mut OpCtx, ino: u64) -> Result<Self, FsError> {
        let off = ctx.geo.inode_offset(ino)?;
        let bytes = ctx.dev.read(off, INODE_SIZE)?;
        if !layout::is_allocated(&bytes) {
            return Err(FsError::NoEnt(format!("inode {ino}")));
        }
        let rec = InodeRecord::decode(&bytes);
        if rec.ino != ino || rec.kind().is_none() {
            return Err(FsError::Corruption(format!("inode {ino} record invalid")));
        }
        ctx.register(off)?;
        Ok(InodeHandle {
            inner: InodeInner {
                ino,
                off,
                rec,
                dirty: Vec::new(),
            },
            _s: PhantomData,
        })
    }

    pub fn inc_link(mut self, ctx: &mut OpCtx) -> Result<InodeHandle<Dirty, IncLink>, FsError> {
        self.inner.rec.link_count += 1;
        let off = self.inner.off + InodeRecord::FIELD_LINK_COUNT;
        ctx.dev.store_u64(off, self.inner.rec.link_count)?;
        self.inner.dirty.push((off, 8));
        Ok(self.relabel())
    }

    /// Drop one link. Only legal once a directory entry pointing here has
    /// durably cleared its ino field — the witness proves it.
    pub fn dec_link(
        mut self,
        ctx: &mut OpCtx,
        cleared: &DentryHandle<Clean, ClearedIno>,
    ) -> Result<InodeHandle<Dirty, DecLink>, FsError> {
        if cleared.inner.cleared_target == 0 {
            return Err(FsError::Corruption("witness dentry never pointed anywhere".into()));
        }
        if self.inner.rec.link_count == 0 {
            return Err(FsError::Corruption(format!(
                "link count underflow on inode {}",
                self.inner.ino
            )));
        }
        self.inner.rec.link_count -= 1;
        let off = self.inner.off + InodeRecord::FIELD_LINK_COUNT;
        ctx.dev.store_u64(off, self.inner.rec.link_count)?;
        self.inner.dirty.push((off, 8));
        Ok(self.relabel())
    }

    /// Extend the durable size. The new bytes must already be durable: the
    /// witness is the fenced page range backing everything past the old
    /// page-aligned coverage.
    pub fn set_size(
        mut self,
        ctx: &mut OpCtx,
        new_size: u64,
        written: &PageRangeHandle<Clean, Written>,
    ) -> Result<InodeHandle<Dirty, Committed>, FsError> {
        if written.inner.owner != self.inner.ino {
            return Err(FsError::Corruption(format!(
                "size witness owned by inode {}, not {}",
                written.inner.owner, self.inner.ino
            )));
        }
        let old_cover = self.inner.rec.size.next_multiple_of(PAGE_SIZE);
        let mut need = old_cover;
        while need < new_size {
            if !written.inner.pages.iter().any(|p| p.file_offset == need) {
                return Err(FsError::Corruption(format!(
                    "size witness does not cover offset {need}"
                )));
            }
            need += PAGE_SIZE;
        }
        self.inner.rec.size = new_size;
        let off = self.inner.off + InodeRecord::FIELD_SIZE;
        ctx.dev.store_u64(off, new_size)?;
        self.inner.dirty.push((off, 8));
        Ok(self.relabel())
    }

    pub fn release(self, ctx: &mut OpCtx) {
        ctx.unregister(self.inner.off);
    }
}

impl InodeHandle<Clean, IncLink> {
    /// Relabel once the operation that needed the extra link has committed.
    pub fn settle(self) -> InodeHandle<Clean, Committed> {
        self.relabel()
    }
}

impl InodeHandle<Clean, DecLink> {
    /// The object stays live: links remain.
    pub fn settle(self) -> InodeHandle<Clean, Committed> {
        assert!(self.inner.rec.link_count >= 1);
        self.relabel()
    }

    /// The object is dead: a file with no links, or a directory down to its
    /// self-link only.
    pub fn begin_dealloc(self) -> Result<InodeHandle<Clean, UnmapPages>, FsError> {
        let dead = match self.inner.rec.kind() {
            Some(FileKind::File) => self.inner.rec.link_count == 0,
            Some(FileKind::Dir) => self.inner.rec.link_count == 1,
            None => false,
        };
        if !dead {
            return Err(FsError::Corruption(format!(
                "dealloc of inode {} with link count {}",
                self.inner.ino, self.inner.rec.link_count
            )));
        }
        Ok(self.relabel())
    }
}

impl InodeHandle<Clean, UnmapPages> {
    /// Zero the record. Only legal once every page that pointed back at this
    /// inode has been durably freed — the witness proves it.
    pub fn dealloc_inode(
        mut self,
        ctx: &mut OpCtx,
        pages: &PageRangeHandle<Clean, Dealloc>,
    ) -> Result<InodeHandle<Dirty, Dealloc>, FsError> {
        if pages.inner.owner != self.inner.ino {
            return Err(FsError::Corruption(format!(
                "page witness owned by inode {}, not {}",
                pages.inner.owner, self.inner.ino
            )));
        }
        ctx.dev.store(self.inner.off, &[0u8; INODE_SIZE as usize])?;
        self.inner.dirty.push((self.inner.off, INODE_SIZE));
        self.inner.rec = InodeRecord::default();
        Ok(self.relabel())
    }
}

impl InodeHandle<Clean, Dealloc> {
    pub fn release(self, ctx: &mut OpCtx) {
        ctx.unregister(self.inner.off);
    }
}

// ---------------------------------------------------------------------------
// Dentry handles

struct DentryInner {
    off: u64,
    parent_ino: u64,
    rec: DentryRecord,
    cleared_target: u64,
    dirty: Vec<(u64, u64)>,
}

/// Typed handle to one 128-byte directory entry slot.
pub struct DentryHandle<P: Persistence, S: DentryState> {
    inner: DentryInner,
    _s: PhantomData<(P, S)>,
}

impl<P: Persistence, S: DentryState> DentryHandle<P, S> {
    fn relabel<P2: Persistence, S2: DentryState>(self) -> DentryHandle<P2, S2> {
        DentryHandle {
            inner: self.inner,
            _s: PhantomData,
        }
    }

    pub fn location(&self) -> u64 {
        self.inner.off
    }

    pub fn parent_ino(&self) -> u64 {
        self.inner.parent_ino
    }

    pub fn target_ino(&self) -> u64 {
        self.inner.rec.ino
    }

    pub fn name(&self) -> String {
        self.inner.rec.name_str()
    }

    #[cfg(feature = "fault-injection")]
    pub fn assume<P2: Persistence, S2: DentryState>(self) -> DentryHandle<P2, S2> {
        self.relabel()
    }
}

impl DentryHandle<Clean, Free> {
    /// Find a free slot in the parent directory, allocating and fencing a
    /// fresh directory page if every existing slot is taken.
    pub fn acquire_free_dentry<PS: DirParent>(
        ctx: &mut OpCtx,
        parent: &InodeHandle<Clean, PS>,
        vol: &mut VolatileState,
    ) -> Result<Self, FsError> {
        if parent.kind() != Some(FileKind::Dir) {
            return Err(FsError::NotDir(format!("inode {}", parent.ino())));
        }
        let parent_ino = parent.ino();

        let mut found = None;
        if let Some(pages) = vol.dir_pages.get(&parent_ino) {
            'scan: for &page in pages {
                for slot in 0..DENTRIES_PER_PAGE {
                    let off = ctx.geo.dentry_offset(page, slot)?;
                    if ctx.live.contains(&off) {
                        continue;
                    }
                    if !layout::is_allocated(&ctx.dev.read(off, DENTRY_SIZE)?) {
                        found = Some(off);
                        break 'scan;
                    }
                }
            }
        }

        let off = match found {
            Some(f) => f,
            None => {
                // New directory page: scrub the free page's stale content
                // (unobservable while free), then fence the descriptor so the
                // page is durably a directory page before any entry lands in it.
                let page = vol.alloc.allocate_pages(1)?[0];
                let poff = ctx.geo.page_offset(page)?;
                ctx.dev.bulk_zero(poff, PAGE_SIZE)?;
                let desc = PageDescriptor {
                    owner_ino: parent_ino,
                    kind: PageKind::Dir.as_u64(),
                    offset: 0,
                };
                let doff = ctx.geo.desc_offset(page)?;
                ctx.dev.store(doff, &desc.encode())?;
                ctx.dev.flush(doff, DESC_SIZE)?;
                ctx.fence_device();
                vol.dir_pages.entry(parent_ino).or_default().insert(page);
                poff
            }
        };

        ctx.register(off)?;
        Ok(DentryHandle {
            inner: DentryInner {
                off,
                parent_ino,
                rec: DentryRecord {
                    name: Vec::new(),
                    ino: 0,
                    rename_ptr: 0,
                },
                cleared_target: 0,
                dirty: Vec::new(),
            },
            _s: PhantomData,
        })
    }

    /// Write the entry's name. The slot stays unallocated to every scan until
    /// its ino field is set.
    pub fn set_name(mut self, ctx: &mut OpCtx, name: &str) -> Result<DentryHandle<Dirty, Alloc>, FsError> {
        validate_name(name)?;
        self.inner.rec.name = name.as_bytes().to_vec();
        ctx.dev.store(self.inner.off, name.as_bytes())?;
        self.inner.dirty.push((self.inner.off, name.len() as u64));
        Ok(self.relabel())
    }

    pub fn release(self, ctx: &mut OpCtx) {
        ctx.unregister(self.inner.off);
    }
}

/// Reject empty names, path separators, NUL, over-long names, and the two
/// synthesized entries.
pub fn validate_name(name: &str) -> Result<(), FsError> {
    if name.is_empty() || name == "." || name == ".." {
        return Err(FsError::InvalidName(name.into()));
    }
    if name.len() > NAME_MAX {
        return Err(FsError::NameTooLong(name.len()));
    }
    if name.bytes().any(|b| b == b'/' || b == 0) {
        return Err(FsError::InvalidName(name.into()));
    }
    Ok(())
}

impl DentryHandle<Clean, Alloc> {
    /// Make a new object visible: set the entry's ino to a durably
    /// initialized inode. The inode handle is consumed and relabeled; the
    /// entry itself still needs its flush and fence.
    pub fn commit_dentry(
        mut self,
        ctx: &mut OpCtx,
        inode: InodeHandle<Clean, Init>,
    ) -> Result<(DentryHandle<Dirty, Committed>, InodeHandle<Clean, Committed>), FsError> {
        self.inner.rec.ino = inode.ino();
        ctx.dev
            .store_u64(self.inner.off + DentryRecord::FIELD_INO, inode.ino())?;
        self.inner
            .dirty
            .push((self.inner.off + DentryRecord::FIELD_INO, 8));
        Ok((self.relabel(), inode.relabel()))
    }

    /// `commit_dentry` for a new subdirectory: additionally requires the
    /// parent's durably incremented link count, relabeling it back.
    #[allow(clippy::type_complexity)]
    pub fn commit_dentry_into_dir(
        self,
        ctx: &mut OpCtx,
        inode: InodeHandle<Clean, Init>,
        parent: InodeHandle<Clean, IncLink>,
    ) -> Result<
        (
            DentryHandle<Dirty, Committed>,
            InodeHandle<Clean, Committed>,
            InodeHandle<Clean, Committed>,
        ),
        FsError,
    > {
        if inode.kind() != Some(FileKind::Dir) {
            return Err(FsError::Corruption("directory commit of a non-directory".into()));
        }
        let (d, i) = self.commit_dentry(ctx, inode)?;
        Ok((d, i, parent.relabel()))
    }

    /// Rename step one: point the prepared destination entry at the source
    /// entry so recovery can tell the two apart.
    pub fn set_rename_pointer(
        mut self,
        ctx: &mut OpCtx,
        src: &DentryHandle<Clean, Committed>,
    ) -> Result<DentryHandle<Dirty, RenamePointerSet>, FsError> {
        self.inner.rec.rename_ptr = src.inner.off;
        ctx.dev
            .store_u64(self.inner.off + DentryRecord::FIELD_RENAME_PTR, src.inner.off)?;
        self.inner
            .dirty
            .push((self.inner.off + DentryRecord::FIELD_RENAME_PTR, 8));
        Ok(self.relabel())
    }
}

impl DentryHandle<Clean, RenamePointerSet> {
    /// The atomic point of a rename: one 8-byte store of the moved inode
    /// into the destination entry.
    pub fn commit_rename(
        mut self,
        ctx: &mut OpCtx,
        moved: &InodeHandle<Clean, Committed>,
    ) -> Result<DentryHandle<Dirty, Renaming>, FsError> {
        self.inner.rec.ino = moved.ino();
        ctx.dev
            .store_u64(self.inner.off + DentryRecord::FIELD_INO, moved.ino())?;
        self.inner
            .dirty
            .push((self.inner.off + DentryRecord::FIELD_INO, 8));
        Ok(self.relabel())
    }
}

impl DentryHandle<Clean, Committed> {
    /// Load a committed entry by its byte location.
    pub fn open_committed(ctx: &mut OpCtx, location: u64) -> Result<Self, FsError> {
        let (page, _slot) = ctx
            .geo
            .dentry_location(location)
            .ok_or(FsError::Corruption(format!("bad dentry location {location}")))?;
        let desc = PageDescriptor::decode(&ctx.dev.read(ctx.geo.desc_offset(page)?, DESC_SIZE)?);
        if PageKind::from_u64(desc.kind) != Some(PageKind::Dir) || desc.owner_ino == 0 {
            return Err(FsError::Corruption(format!("dentry in non-directory page {page}")));
        }
        let rec = DentryRecord::decode(&ctx.dev.read(location, DENTRY_SIZE)?);
        if rec.ino == 0 {
            return Err(FsError::NoEnt(format!("dentry at {location}")));
        }
        ctx.register(location)?;
        Ok(DentryHandle {
            inner: DentryInner {
                off: location,
                parent_ino: desc.owner_ino,
                rec,
                cleared_target: 0,
                dirty: Vec::new(),
            },
            _s: PhantomData,
        })
    }

    /// Unlink the name from its object. The slot stays allocated (the name
    /// bytes remain) until `dealloc_dentry`.
    pub fn clear_ino(mut self, ctx: &mut OpCtx) -> Result<DentryHandle<Dirty, ClearedIno>, FsError> {
        self.inner.cleared_target = self.inner.rec.ino;
        self.inner.rec.ino = 0;
        ctx.dev.store_u64(self.inner.off + DentryRecord::FIELD_INO, 0)?;
        self.inner
            .dirty
            .push((self.inner.off + DentryRecord::FIELD_INO, 8));
        Ok(self.relabel())
    }

    pub fn release(self, ctx: &mut OpCtx) {
        ctx.unregister(self.inner.off);
    }
}

impl DentryHandle<Clean, Renaming> {
    /// Rename teardown: drop the recovery pointer. Only legal once the source
    /// entry's ino field is durably cleared, so a crash can never leave two
    /// undistinguishable links to the moved object.
    pub fn clear_rename_pointer(
        mut self,
        ctx: &mut OpCtx,
        cleared_src: &DentryHandle<Clean, ClearedIno>,
    ) -> Result<DentryHandle<Dirty, Committed>, FsError> {
        if cleared_src.inner.off != self.inner.rec.rename_ptr {
            return Err(FsError::Corruption(
                "rename pointer does not match the cleared source entry".into(),
            ));
        }
        self.inner.rec.rename_ptr = 0;
        ctx.dev
            .store_u64(self.inner.off + DentryRecord::FIELD_RENAME_PTR, 0)?;
        self.inner
            .dirty
            .push((self.inner.off + DentryRecord::FIELD_RENAME_PTR, 8));
        Ok(self.relabel())
    }
}

impl DentryHandle<Clean, ClearedIno> {
    /// The ino this entry pointed at before `clear_ino`.
    pub fn cleared_target(&self) -> u64 {
        self.inner.cleared_target
    }

    /// Zero the whole slot so it can be reused.
    pub fn dealloc_dentry(mut self, ctx: &mut OpCtx) -> Result<DentryHandle<Dirty, Dealloc>, FsError> {
        ctx.dev.store(self.inner.off, &[0u8; DENTRY_SIZE as usize])?;
        self.inner.dirty.push((self.inner.off, DENTRY_SIZE));
        self.inner.rec = DentryRecord {
            name: Vec::new(),
            ino: 0,
            rename_ptr: 0,
        };
        Ok(self.relabel())
    }
}

impl DentryHandle<Clean, Dealloc> {
    pub fn release(self, ctx: &mut OpCtx) {
        ctx.unregister(self.inner.off);
    }
}

// ---------------------------------------------------------------------------
// Page-range handles

#[derive(Debug, Clone, Copy)]
struct PageSlot {
    index: u64,
    file_offset: u64,
}

struct PageInner {
    owner: u64,
    pages: Vec<PageSlot>,
    dirty: Vec<(u64, u64)>,
}

/// Typed handle to a set of pages owned by one inode. Page-to-inode links
/// live in the page descriptors (backpointers), so allocating, writing and
/// freeing pages never touches the inode until the final size commit.
pub struct PageRangeHandle<P: Persistence, S: PageState> {
    inner: PageInner,
    _s: PhantomData<(P, S)>,
}

impl<P: Persistence, S: PageState> PageRangeHandle<P, S> {
    fn relabel<P2: Persistence, S2: PageState>(self) -> PageRangeHandle<P2, S2> {
        PageRangeHandle {
            inner: self.inner,
            _s: PhantomData,
        }
    }

    pub fn owner(&self) -> u64 {
        self.inner.owner
    }

    pub fn page_indexes(&self) -> Vec<u64> {
        self.inner.pages.iter().map(|p| p.index).collect()
    }

    /// `(file_offset, page_index)` pairs of this range.
    pub fn page_map(&self) -> Vec<(u64, u64)> {
        self.inner.pages.iter().map(|p| (p.file_offset, p.index)).collect()
    }

    #[cfg(feature = "fault-injection")]
    pub fn assume<P2: Persistence, S2: PageState>(self) -> PageRangeHandle<P2, S2> {
        self.relabel()
    }
}

impl PageRangeHandle<Dirty, Alloc> {
    /// Claim free pages for the given file offsets and write their
    /// descriptors. The descriptor stores are the allocation: once durable
    /// the pages are owned, but invisible to reads until the size commit.
    pub fn alloc_pages<OS: PageOwner>(
        ctx: &mut OpCtx,
        owner: &InodeHandle<Clean, OS>,
        alloc: &mut Allocators,
        file_offsets: &[u64],
    ) -> Result<Self, FsError> {
        if owner.kind() != Some(FileKind::File) {
            return Err(FsError::IsDir(format!("inode {}", owner.ino())));
        }
        if file_offsets.iter().any(|o| o % PAGE_SIZE != 0) {
            return Err(FsError::Inval("unaligned page offset".into()));
        }
        let idxs = alloc.allocate_pages(file_offsets.len())?;
        let mut inner = PageInner {
            owner: owner.ino(),
            pages: Vec::new(),
            dirty: Vec::new(),
        };
        for (&index, &file_offset) in idxs.iter().zip(file_offsets) {
            let desc = PageDescriptor {
                owner_ino: owner.ino(),
                kind: PageKind::Data.as_u64(),
                offset: file_offset,
            };
            let doff = ctx.geo.desc_offset(index)?;
            ctx.dev.store(doff, &desc.encode())?;
            inner.dirty.push((doff, DESC_SIZE));
            inner.pages.push(PageSlot { index, file_offset });
        }
        Ok(PageRangeHandle {
            inner,
            _s: PhantomData,
        })
    }
}

impl<P: Persistence, W: Writable> PageRangeHandle<P, W> {
    /// Store file bytes into the range. `[file_off, file_off + data.len())`
    /// must fall entirely within the pages of this range. Content stores
    /// need no ordering against the descriptor stores: both precede the size
    /// commit that makes them reachable.
    pub fn write_pages(
        mut self,
        ctx: &mut OpCtx,
        file_off: u64,
        data: &[u8],
    ) -> Result<PageRangeHandle<Dirty, Written>, FsError> {
        let mut done = 0u64;
        let len = data.len() as u64;
        let mut pages = self.inner.pages.clone();
        pages.sort_by_key(|p| p.file_offset);
        for p in &pages {
            let lo = p.file_offset.max(file_off);
            let hi = (p.file_offset + PAGE_SIZE).min(file_off + len);
            if lo >= hi {
                continue;
            }
            let media = ctx.geo.page_offset(p.index)? + (lo - p.file_offset);
            // a sub-chunk store may not straddle a chunk boundary; split there
            let mut pos = lo;
            while pos < hi {
                let off = media + (pos - lo);
                let rem = hi - pos;
                let take = if rem <= crate::pmem::CHUNK && off % crate::pmem::CHUNK != 0 {
                    rem.min(crate::pmem::CHUNK - off % crate::pmem::CHUNK)
                } else {
                    rem
                };
                let base = (pos - file_off) as usize;
                ctx.dev.store(off, &data[base..base + take as usize])?;
                pos += take;
            }
            self.inner.dirty.push((media, hi - lo));
            done += hi - lo;
        }
        if done != len {
            return Err(FsError::Inval(format!(
                "write of {len} bytes at {file_off} not covered by page range"
            )));
        }
        Ok(self.relabel())
    }
}

impl PageRangeHandle<Clean, Written> {
    /// Relabel once the size commit has made the bytes reachable.
    pub fn into_live(self) -> PageRangeHandle<Clean, Live> {
        self.relabel()
    }
}

impl PageRangeHandle<Clean, Live> {
    /// Load the durably owned pages of an inode being torn down. The page
    /// list comes from the volatile index; every descriptor is re-verified.
    pub fn open_live<OS: PageHolder>(
        ctx: &mut OpCtx,
        owner: &InodeHandle<Clean, OS>,
        pages: &[(u64, u64)],
    ) -> Result<Self, FsError> {
        let kind = match owner.kind() {
            Some(FileKind::File) => PageKind::Data,
            Some(FileKind::Dir) => PageKind::Dir,
            None => return Err(FsError::Corruption("owner kind invalid".into())),
        };
        let mut inner = PageInner {
            owner: owner.ino(),
            pages: Vec::new(),
            dirty: Vec::new(),
        };
        for &(file_offset, index) in pages {
            let desc = PageDescriptor::decode(&ctx.dev.read(ctx.geo.desc_offset(index)?, DESC_SIZE)?);
            if desc.owner_ino != owner.ino() || PageKind::from_u64(desc.kind) != Some(kind) {
                return Err(FsError::Corruption(format!(
                    "descriptor of page {index} does not match owner {}",
                    owner.ino()
                )));
            }
            inner.pages.push(PageSlot { index, file_offset });
        }
        Ok(PageRangeHandle {
            inner,
            _s: PhantomData,
        })
    }

    /// First half of freeing: durably clear every descriptor's owner field so
    /// no page points at the inode anymore. Kind and offset survive until
    /// `dealloc_pages`, keeping the pages allocated (rule 2).
    pub fn clear_backpointers(
        mut self,
        ctx: &mut OpCtx,
    ) -> Result<PageRangeHandle<Dirty, ClearedBackptrs>, FsError> {
        for i in 0..self.inner.pages.len() {
            let doff = ctx.geo.desc_offset(self.inner.pages[i].index)? + PageDescriptor::FIELD_OWNER;
            ctx.dev.store_u64(doff, 0)?;
            self.inner.dirty.push((doff, 8));
        }
        Ok(self.relabel())
    }
}

impl PageRangeHandle<Clean, ClearedBackptrs> {
    /// Second half of freeing: zero the rest of each descriptor, returning
    /// the pages to the free pool.
    pub fn dealloc_pages(mut self, ctx: &mut OpCtx) -> Result<PageRangeHandle<Dirty, Dealloc>, FsError> {
        for i in 0..self.inner.pages.len() {
            let doff = ctx.geo.desc_offset(self.inner.pages[i].index)? + PageDescriptor::FIELD_KIND;
            ctx.dev.store(doff, &[0u8; 16])?;
            self.inner.dirty.push((doff, 16));
        }
        Ok(self.relabel())
    }
}

impl PageRangeHandle<Clean, Dealloc> {
    /// Witness for tearing down an inode that owns no pages.
    pub fn empty(owner_ino: u64) -> Self {
        PageRangeHandle {
            inner: PageInner {
                owner: owner_ino,
                pages: Vec::new(),
                dirty: Vec::new(),
            },
            _s: PhantomData,
        }
    }
}

// ---------------------------------------------------------------------------
// Flush and fence

macro_rules! persistence_pipeline {
    ($handle:ident, $statetrait:ident) => {
        impl<S: $statetrait> $handle<Dirty, S> {
            /// Flush every cache line this handle has stored to.
            pub fn flush(mut self, ctx: &mut OpCtx) -> $handle<InFlight, S> {
                let ranges = std::mem::take(&mut self.inner.dirty);
                ctx.flush_ranges(&ranges);
                self.relabel()
            }
        }

        impl<S: $statetrait> $handle<InFlight, S> {
            /// Retire the flush with a dedicated store fence.
            pub fn fence(self, ctx: &mut OpCtx) -> $handle<Clean, S> {
                ctx.fence_device();
                self.relabel()
            }
        }

        impl<S: $statetrait> Fenceable for $handle<InFlight, S> {
            type Output = $handle<Clean, S>;
            fn after_fence(self) -> $handle<Clean, S> {
                self.relabel()
            }
        }
    };
}

persistence_pipeline!(InodeHandle, InodeState);
persistence_pipeline!(DentryHandle, DentryState);
persistence_pipeline!(PageRangeHandle, PageState);

/// An in-flight handle whose flush can be retired by a shared fence.
pub trait Fenceable {
    type Output;
    fn after_fence(self) -> Self::Output;
}

/// A tuple of in-flight handles retired together by one fence.
pub trait FenceSet {
    type Output;
    fn retire(self) -> Self::Output;
}

macro_rules! fence_set {
    ($($t:ident),+) => {
        impl<$($t: Fenceable),+> FenceSet for ($($t,)+) {
            type Output = ($($t::Output,)+);
            #[allow(non_snake_case)]
            fn retire(self) -> Self::Output {
                let ($($t,)+) = self;
                ($($t.after_fence(),)+)
            }
        }
    };
}

fence_set!(A);
fence_set!(A, B);
fence_set!(A, B, C);
fence_set!(A, B, C, D);

/// Retire several flushed handles with a single store fence: independent
/// updates that may become durable in any order share one ordering point.
pub fn fence_all<T: FenceSet>(ctx: &mut OpCtx, handles: T) -> T::Output {
    ctx.fence_device();
    handles.retire()
}

// ---------------------------------------------------------------------------
// Transition table

/// One edge of the operational state machines, by name. The table mirrors the
/// method set above and is what the model checker's transition labels are
/// audited against.
pub struct TransitionSpec {
    pub object: &'static str,
    pub from: &'static str,
    pub label: &'static str,
    pub to: &'static str,
}

macro_rules! edges {
    ($($obj:ident: $from:ident -$label:ident-> $to:ident;)+) => {
        &[$(TransitionSpec {
            object: stringify!($obj),
            from: stringify!($from),
            label: stringify!($label),
            to: stringify!($to),
        },)+]
    };
}

pub const TRANSITIONS: &[TransitionSpec] = edges! {
    inode: Free -init_inode-> Init;
    inode: Init -commit_dentry-> Committed;
    inode: Committed -inc_link-> IncLink;
    inode: IncLink -commit_dentry-> Committed;
    inode: IncLink -settle-> Committed;
    inode: Committed -set_size-> Committed;
    inode: Committed -dec_link-> DecLink;
    inode: DecLink -settle-> Committed;
    inode: DecLink -begin_dealloc-> UnmapPages;
    inode: UnmapPages -dealloc_inode-> Dealloc;
    dentry: Free -set_name-> Alloc;
    dentry: Alloc -commit_dentry-> Committed;
    dentry: Alloc -set_rename_pointer-> RenamePointerSet;
    dentry: RenamePointerSet -commit_rename-> Renaming;
    dentry: Renaming -clear_rename_pointer-> Committed;
    dentry: Committed -clear_ino-> ClearedIno;
    dentry: ClearedIno -dealloc_dentry-> Dealloc;
    page: Free -alloc_pages-> Alloc;
    page: Alloc -write_pages-> Written;
    page: Written -set_size-> Live;
    page: Live -write_pages-> Written;
    page: Live -clear_backpointers-> ClearedBackptrs;
    page: ClearedBackptrs -dealloc_pages-> Dealloc;
};

/// States in which a handle may be released at the end of an operation.
pub const TERMINALS: &[(&str, &str)] = &[
    ("inode", "Committed"),
    ("inode", "Dealloc"),
    ("dentry", "Committed"),
    ("dentry", "Dealloc"),
    ("page", "Live"),
    ("page", "Dealloc"),
];

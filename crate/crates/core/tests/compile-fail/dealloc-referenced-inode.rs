// An inode slot must not be freed while directory entries may still reach it:
// deallocation is only offered after the last link has durably dropped.
use ssufs::fsops::Fs;
use ssufs::layout;
use ssufs::pmem::PmDevice;
use ssufs::typestate::{InodeHandle, OpCtx, PageRangeHandle};
use ssufs::volatile;

fn main() {
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
    fs.create("/f", 0o644).unwrap();
    let ino = fs.resolve("/f").unwrap();
    let mut dev = fs.unmount().unwrap();
    let (_, geo) = layout::read_superblock(&dev).unwrap();
    let _vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let inode = InodeHandle::open_committed(&mut ctx, ino).unwrap();
    let no_pages = PageRangeHandle::empty(ino);
    let _ = inode.dealloc_inode(&mut ctx, &no_pages);
}

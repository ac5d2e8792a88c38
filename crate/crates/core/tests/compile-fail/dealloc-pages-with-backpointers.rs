// Page descriptors must be durably cleared before their pages return to the
// allocator.
use ssufs::fsops::Fs;
use ssufs::layout::{self, ROOT_INO};
use ssufs::pmem::PmDevice;
use ssufs::typestate::{InodeHandle, OpCtx, PageRangeHandle};
use ssufs::volatile;

fn main() {
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
    fs.create("/f", 0o644).unwrap();
    fs.write("/f", 0, b"hello").unwrap();
    let ino = fs.resolve("/f").unwrap();
    let pages: Vec<(u64, u64)> = fs
        .volatile_state()
        .pages_of(ino)
        .iter()
        .map(|&(off, idx)| (off, idx))
        .collect();
    let mut dev = fs.unmount().unwrap();
    let (_, geo) = layout::read_superblock(&dev).unwrap();
    let _vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let inode = InodeHandle::open_committed(&mut ctx, ino).unwrap();
    let live = PageRangeHandle::open_live(&mut ctx, &inode, &pages).unwrap();
    let _ = live.dealloc_pages(&mut ctx);
    let _ = ROOT_INO;
}

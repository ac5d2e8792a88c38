// An inode size must not grow over pages whose contents were never written.
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
    let mut vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let inode = InodeHandle::open_committed(&mut ctx, ino).unwrap();
    let pages = PageRangeHandle::alloc_pages(&mut ctx, &inode, &mut vol.alloc, &[0])
        .unwrap()
        .flush(&mut ctx)
        .fence(&mut ctx);
    let _ = inode.set_size(&mut ctx, 4096, &pages);
}

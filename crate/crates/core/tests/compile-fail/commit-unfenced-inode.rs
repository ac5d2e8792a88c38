// A directory entry must not commit an inode whose initialization has been
// flushed but not yet fenced.
use ssufs::layout::{self, FileKind, ROOT_INO};
use ssufs::pmem::PmDevice;
use ssufs::typestate::{DentryHandle, InodeHandle, OpCtx};
use ssufs::volatile;

fn main() {
    let mut dev = PmDevice::new(1 << 20);
    let geo = layout::mkfs(&mut dev).unwrap();
    let mut vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let parent = InodeHandle::open_committed(&mut ctx, ROOT_INO).unwrap();
    let dentry = DentryHandle::acquire_free_dentry(&mut ctx, &parent, &mut vol).unwrap();
    let dentry = dentry.set_name(&mut ctx, "f").unwrap().flush(&mut ctx).fence(&mut ctx);
    let inode = InodeHandle::acquire_free_inode(&mut ctx, &mut vol.alloc).unwrap();
    let inode = inode.init_inode(&mut ctx, FileKind::File, 0o644).unwrap();
    let inode = inode.flush(&mut ctx); // still in flight, no fence
    let _ = dentry.commit_dentry(&mut ctx, inode);
}

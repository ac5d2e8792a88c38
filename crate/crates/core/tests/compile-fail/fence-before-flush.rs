// A fence can only retire stores that were flushed first.
use ssufs::layout::{self, ROOT_INO};
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
    let dentry = dentry.set_name(&mut ctx, "f").unwrap();
    let _ = dentry.fence(&mut ctx);
}

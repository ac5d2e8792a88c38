// Clearing an entry consumes the handle; the stale committed view cannot be
// used again.
use ssufs::fsops::Fs;
use ssufs::layout::{self, ROOT_INO};
use ssufs::pmem::PmDevice;
use ssufs::typestate::{DentryHandle, OpCtx};
use ssufs::volatile;

fn main() {
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
    fs.create("/f", 0o644).unwrap();
    let location = fs.volatile_state().lookup_name(ROOT_INO, "f").unwrap().location;
    let mut dev = fs.unmount().unwrap();
    let (_, geo) = layout::read_superblock(&dev).unwrap();
    let _vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let dentry = DentryHandle::open_committed(&mut ctx, location).unwrap();
    let _cleared = dentry.clear_ino(&mut ctx).unwrap();
    let _again = dentry.clear_ino(&mut ctx);
}

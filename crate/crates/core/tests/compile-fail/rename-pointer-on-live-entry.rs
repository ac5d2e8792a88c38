// A rename pointer is only legal on a reserved destination slot, never on an
// entry whose inode pointer is already committed.
use ssufs::fsops::Fs;
use ssufs::layout::{self, ROOT_INO};
use ssufs::pmem::PmDevice;
use ssufs::typestate::{DentryHandle, OpCtx};
use ssufs::volatile;

fn main() {
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
    fs.create("/a", 0o644).unwrap();
    fs.create("/b", 0o644).unwrap();
    let src = fs.volatile_state().lookup_name(ROOT_INO, "a").unwrap().location;
    let dst = fs.volatile_state().lookup_name(ROOT_INO, "b").unwrap().location;
    let mut dev = fs.unmount().unwrap();
    let (_, geo) = layout::read_superblock(&dev).unwrap();
    let _vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let src = DentryHandle::open_committed(&mut ctx, src).unwrap();
    let dst = DentryHandle::open_committed(&mut ctx, dst).unwrap();
    let _ = dst.set_rename_pointer(&mut ctx, &src);
}

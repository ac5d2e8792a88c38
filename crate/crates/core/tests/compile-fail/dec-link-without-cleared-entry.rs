// A link count must not drop while a directory entry still points at the
// inode: dec_link demands a durably cleared entry as witness.
use ssufs::fsops::Fs;
use ssufs::layout::{self, ROOT_INO};
use ssufs::pmem::PmDevice;
use ssufs::typestate::{DentryHandle, InodeHandle, OpCtx};
use ssufs::volatile;

fn main() {
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
    fs.create("/f", 0o644).unwrap();
    let entry = fs.volatile_state().lookup_name(ROOT_INO, "f").unwrap();
    let (location, ino) = (entry.location, entry.ino);
    let mut dev = fs.unmount().unwrap();
    let (_, geo) = layout::read_superblock(&dev).unwrap();
    let _vol = volatile::rebuild(&dev, &geo).unwrap();
    let mut ctx = OpCtx::begin(&mut dev, geo, "demo");

    let dentry = DentryHandle::open_committed(&mut ctx, location).unwrap();
    let inode = InodeHandle::open_committed(&mut ctx, ino).unwrap();
    let _ = inode.dec_link(&mut ctx, &dentry);
}

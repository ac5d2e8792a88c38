//! Consistency checking and crash-state enumeration.
//!
//! Two checking modes share one scanner:
//!
//! * `CrashState` holds in *every* durable image the update ordering can
//!   produce, even mid-operation: no reference targets an uninitialized or
//!   freed object, freed objects reference nothing, rename pointers are
//!   acyclic and unique, sizes never run ahead of their pages, and link
//!   counts are never lower than the references that exist (transiently high
//!   is legal).
//! * `Full` holds only for quiescent or recovered images and adds exact link
//!   counts, no orphans, no leaks, and no in-flight rename state.
//!
//! The harness replays a recorded persistence trace of each operation,
//! enumerates the durable images a crash could leave at every fence, and
//! requires each one to check clean, recover clean, and land on either the
//! pre- or post-operation tree.

use crate::error::FsError;
use crate::fsops::Fs;
use crate::layout::{self, FileKind, Geometry, PageKind, NAME_MAX, PAGE_SIZE, ROOT_INO};
use crate::pmem::{PmDevice, TraceEvent};
use crate::volatile::{self, ScanReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

/// Default cap on enumerated crash states per fence point.
pub const DEFAULT_STATE_CAP: usize = 1 << 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    /// Invariants that hold in any crash state.
    CrashState,
    /// Everything, for clean or recovered images.
    Full,
}

/// Outcome of one consistency check. Violations are strings with stable
/// prefixes: `I1` exact link counts, `I2` references to dead objects,
/// `I4` rename-pointer shape, `S` structure.
#[derive(Debug, Clone, Default)]
pub struct FsckReport {
    pub violations: Vec<String>,
}

impl FsckReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a durable image.
pub fn check_image(image: &[u8], mode: CheckMode) -> Result<FsckReport, FsError> {
    let dev = PmDevice::from_image(image.to_vec());
    let (_, geo) = layout::read_superblock(&dev)?;
    check_device(&dev, &geo, mode)
}

/// Check the durable contents of a device.
pub fn check_device(dev: &PmDevice, geo: &Geometry, mode: CheckMode) -> Result<FsckReport, FsError> {
    let rep = volatile::scan(dev, geo)?;
    let mut v = Vec::new();

    let valid_inode = |ino: u64| {
        rep.inodes
            .get(&ino)
            .is_some_and(|r| r.ino == ino && r.kind().is_some())
    };

    // I2: every reference targets a live, coherent object
    for d in rep.valid_dentries() {
        if !valid_inode(d.rec.ino) {
            v.push(format!(
                "I2 dentry {:?} at {} points at dead inode {}",
                d.rec.name_str(),
                d.location,
                d.rec.ino
            ));
        }
    }
    for (&page, desc) in &rep.descriptors {
        let owner_ok = valid_inode(desc.owner_ino);
        let kind_ok = match PageKind::from_u64(desc.kind) {
            Some(PageKind::Dir) => {
                owner_ok && rep.inodes[&desc.owner_ino].kind() == Some(FileKind::Dir)
            }
            Some(PageKind::Data) => {
                owner_ok && rep.inodes[&desc.owner_ino].kind() == Some(FileKind::File)
            }
            // a descriptor store is three chunks; the kind chunk may trail
            // the owner chunk in a crash state, but never survive recovery
            None => desc.kind == 0 && mode == CheckMode::CrashState,
        };
        if !owner_ok || !kind_ok {
            v.push(format!(
                "I2 page {page} descriptor points at dead, mismatched or incoherent inode {}",
                desc.owner_ino
            ));
        }
    }

    // I4: rename pointers target distinct valid entry slots, acyclically
    let locations: HashSet<u64> = rep.dentries.iter().map(|d| d.location).collect();
    let mut targets: HashMap<u64, usize> = HashMap::new();
    let mut ptr_of: HashMap<u64, u64> = HashMap::new();
    for d in &rep.rename_pointers {
        let t = d.rec.rename_ptr;
        if geo.dentry_location(t).is_none() || t == d.location || !locations.contains(&t) {
            v.push(format!(
                "I4 rename pointer at {} targets invalid location {t}",
                d.location
            ));
            continue;
        }
        *targets.entry(t).or_insert(0) += 1;
        ptr_of.insert(d.location, t);
    }
    for (t, n) in &targets {
        if *n > 1 {
            v.push(format!("I4 {n} rename pointers target location {t}"));
        }
    }
    for (&start, _) in &ptr_of {
        let (mut cur, mut hops) = (start, 0);
        while let Some(&next) = ptr_of.get(&cur) {
            hops += 1;
            cur = next;
            if cur == start || hops > ptr_of.len() {
                v.push(format!("I4 rename pointer cycle through {start}"));
                break;
            }
        }
    }

    // sizes never run ahead of durable pages
    let mut data_pages: HashMap<u64, BTreeMap<u64, u64>> = HashMap::new();
    for (&page, desc) in &rep.descriptors {
        if PageKind::from_u64(desc.kind) == Some(PageKind::Data) {
            data_pages.entry(desc.owner_ino).or_default().insert(desc.offset, page);
        }
    }
    for (&ino, rec) in &rep.inodes {
        if rec.kind() == Some(FileKind::File) && rep.reachable.contains(&ino) {
            let pages = data_pages.get(&ino);
            let mut off = 0;
            while off < rec.size {
                if pages.is_none_or(|p| !p.contains_key(&off)) {
                    v.push(format!("S inode {ino} size {} has no page at offset {off}", rec.size));
                }
                off += PAGE_SIZE;
            }
        }
    }

    // link counts: never below the references that exist. A source entry a
    // rename pointer supersedes counts as the same reference as its
    // destination, not a second one.
    let superseded: HashSet<u64> = rep
        .rename_pointers
        .iter()
        .filter(|d| d.rec.ino != 0)
        .filter_map(|d| {
            let s = rep.dentries.iter().find(|x| x.location == d.rec.rename_ptr)?;
            (s.rec.ino == d.rec.ino).then_some(s.location)
        })
        .collect();
    let mut fan_in: HashMap<u64, u64> = HashMap::new();
    for d in rep.valid_dentries() {
        if !superseded.contains(&d.location) {
            *fan_in.entry(d.rec.ino).or_insert(0) += 1;
        }
    }
    let subdirs = |ino: u64| -> u64 {
        rep.valid_dentries()
            .filter(|d| {
                d.dir_ino == ino
                    && rep
                        .inodes
                        .get(&d.rec.ino)
                        .is_some_and(|r| r.kind() == Some(FileKind::Dir))
                    && !superseded.contains(&d.location)
            })
            .count() as u64
    };
    for (&ino, rec) in &rep.inodes {
        if !rep.reachable.contains(&ino) || !valid_inode(ino) {
            continue;
        }
        let floor = match rec.kind() {
            Some(FileKind::File) => *fan_in.get(&ino).unwrap_or(&0),
            Some(FileKind::Dir) if ino == ROOT_INO => 2 + subdirs(ino),
            Some(FileKind::Dir) => 1 + fan_in.get(&ino).unwrap_or(&0) + subdirs(ino),
            None => 0,
        };
        let tag = if mode == CheckMode::Full { "I1" } else { "S" };
        if rec.link_count < floor {
            v.push(format!(
                "{tag} inode {ino} link count {} below floor {floor}",
                rec.link_count
            ));
        }
    }

    if mode == CheckMode::Full {
        full_checks(&rep, &data_pages, &fan_in, &subdirs, &mut v);
    }

    Ok(FsckReport { violations: v })
}

fn full_checks(
    rep: &ScanReport,
    data_pages: &HashMap<u64, BTreeMap<u64, u64>>,
    fan_in: &HashMap<u64, u64>,
    subdirs: &dyn Fn(u64) -> u64,
    v: &mut Vec<String>,
) {
    // exact link counts
    for (&ino, rec) in &rep.inodes {
        if !rep.reachable.contains(&ino) {
            v.push(format!("S inode {ino} is allocated but unreachable"));
            continue;
        }
        let truth = match rec.kind() {
            Some(FileKind::File) => *fan_in.get(&ino).unwrap_or(&0),
            Some(FileKind::Dir) => 2 + subdirs(ino),
            None => {
                v.push(format!("S inode {ino} record is incoherent"));
                continue;
            }
        };
        if rec.link_count != truth {
            v.push(format!(
                "I1 inode {ino} link count {} should be {truth}",
                rec.link_count
            ));
        }
    }

    // no in-flight rename state, no half-written or leaked slots
    for d in &rep.rename_pointers {
        v.push(format!("S rename pointer survives at {}", d.location));
    }
    for d in &rep.dentries {
        if d.rec.ino == 0 {
            v.push(format!("S dentry slot at {} is allocated but unnamed", d.location));
        } else {
            let name = d.rec.name_str();
            if d.rec.name.is_empty()
                || d.rec.name.len() > NAME_MAX
                || name.contains('/')
                || name == "."
                || name == ".."
            {
                v.push(format!("S dentry at {} has invalid name", d.location));
            }
        }
    }
    for &page in &rep.leaked_descriptors {
        v.push(format!("S page {page} descriptor is allocated but unowned"));
    }

    // unique names per directory
    let mut seen: HashSet<(u64, Vec<u8>)> = HashSet::new();
    for d in rep.valid_dentries() {
        if !seen.insert((d.dir_ino, d.rec.name.clone())) {
            v.push(format!(
                "S duplicate name {:?} in directory {}",
                d.rec.name_str(),
                d.dir_ino
            ));
        }
    }

    // every directory except the root has exactly one entry
    for (&ino, rec) in &rep.inodes {
        if rec.kind() == Some(FileKind::Dir) && ino != ROOT_INO {
            let n = *fan_in.get(&ino).unwrap_or(&0);
            if n != 1 {
                v.push(format!("S directory {ino} has {n} entries naming it"));
            }
        }
    }

    // pages never extend past the size, and offsets are unique
    for (&ino, pages) in data_pages {
        if let Some(rec) = rep.inodes.get(&ino) {
            for (&off, &page) in pages {
                if off >= rec.size {
                    v.push(format!(
                        "S page {page} of inode {ino} at offset {off} is past size {}",
                        rec.size
                    ));
                }
            }
        }
    }
    let mut offsets: HashSet<(u64, u64)> = HashSet::new();
    for (&page, desc) in &rep.descriptors {
        if PageKind::from_u64(desc.kind) == Some(PageKind::Data)
            && !offsets.insert((desc.owner_ino, desc.offset))
        {
            v.push(format!(
                "S page {page} duplicates offset {} of inode {}",
                desc.offset, desc.owner_ino
            ));
        }
    }
}

// ---------------------------------------------------------------------------
// Workloads

/// One file-system operation of a crash-test workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Mkdir(String),
    Create(String),
    Write { path: String, offset: u64, len: u64 },
    Unlink(String),
    Rmdir(String),
    Rename(String, String),
    Fsync(String),
}

impl Op {
    /// Deterministic payload for a write: a function of position only.
    pub fn pattern(offset: u64, len: u64) -> Vec<u8> {
        (offset..offset + len).map(|i| (i * 31 % 251 + 1) as u8).collect()
    }

    pub fn apply(&self, fs: &mut Fs) -> Result<(), FsError> {
        match self {
            Op::Mkdir(p) => fs.mkdir(p, 0o755).map(drop),
            Op::Create(p) => fs.create(p, 0o644).map(drop),
            Op::Write { path, offset, len } => {
                fs.write(path, *offset, &Self::pattern(*offset, *len))
            }
            Op::Unlink(p) => fs.unlink(p),
            Op::Rmdir(p) => fs.rmdir(p),
            Op::Rename(a, b) => fs.rename(a, b),
            Op::Fsync(p) => fs.fsync(p),
        }
    }
}

impl std::fmt::Display for Op {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Op::Mkdir(p) => write!(f, "mkdir {p}"),
            Op::Create(p) => write!(f, "create {p}"),
            Op::Write { path, offset, len } => write!(f, "write {path} {offset} {len}"),
            Op::Unlink(p) => write!(f, "unlink {p}"),
            Op::Rmdir(p) => write!(f, "rmdir {p}"),
            Op::Rename(a, b) => write!(f, "rename {a} {b}"),
            Op::Fsync(p) => write!(f, "fsync {p}"),
        }
    }
}

/// A named sequence of operations, (de)serialized as one op per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub name: String,
    pub ops: Vec<Op>,
}

impl Workload {
    pub fn parse(name: &str, text: &str) -> Result<Workload, FsError> {
        let mut ops = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = || FsError::Inval(format!("workload line {}: {line}", lineno + 1));
            let mut w = line.split_whitespace();
            let op = w.next().unwrap();
            let mut arg = || w.next().map(str::to_string).ok_or_else(bad);
            ops.push(match op {
                "mkdir" => Op::Mkdir(arg()?),
                "create" => Op::Create(arg()?),
                "write" => Op::Write {
                    path: arg()?,
                    offset: arg()?.parse().map_err(|_| bad())?,
                    len: arg()?.parse().map_err(|_| bad())?,
                },
                "unlink" => Op::Unlink(arg()?),
                "rmdir" => Op::Rmdir(arg()?),
                "rename" => Op::Rename(arg()?, arg()?),
                "fsync" => Op::Fsync(arg()?),
                _ => return Err(bad()),
            });
            if w.next().is_some() {
                return Err(bad());
            }
        }
        Ok(Workload { name: name.to_string(), ops })
    }

    pub fn to_text(&self) -> String {
        self.ops.iter().map(|o| format!("{o}\n")).collect()
    }
}

/// Fixed workloads covering every operation, each fence pattern, and the
/// paths recovery has to take.
pub fn standard_workloads() -> Vec<Workload> {
    let mk = |name: &str, text: &str| Workload::parse(name, text).expect("builtin workload");
    vec![
        mk("mkdir-chain", "mkdir /a\nmkdir /a/b\nmkdir /a/b/c\n"),
        mk("create-files", "mkdir /d\ncreate /d/x\ncreate /d/y\ncreate /top\n"),
        mk(
            "write-grow",
            "create /f\nwrite /f 0 100\nwrite /f 100 5000\nwrite /f 5100 4096\n",
        ),
        mk("write-overwrite", "create /f\nwrite /f 0 6000\nwrite /f 1000 2000\nfsync /f\n"),
        mk("unlink-file", "mkdir /d\ncreate /d/f\nwrite /d/f 0 9000\nunlink /d/f\n"),
        mk("rmdir-tree", "mkdir /a\nmkdir /a/b\nrmdir /a/b\nrmdir /a\n"),
        mk("rename-plain", "create /old\nwrite /old 0 300\nrename /old /new\n"),
        mk(
            "rename-overwrite",
            "create /src\nwrite /src 0 100\ncreate /dst\nwrite /dst 0 5000\nrename /src /dst\n",
        ),
        mk(
            "rename-dir-across",
            "mkdir /a\nmkdir /b\nmkdir /a/sub\ncreate /a/sub/f\nrename /a/sub /b/sub\n",
        ),
        mk(
            "churn",
            "mkdir /d\ncreate /d/a\ncreate /d/b\nwrite /d/a 0 4200\nrename /d/a /d/b\nunlink /d/b\nrmdir /d\n",
        ),
    ]
}

/// A pseudo-random but always-valid workload: a shadow tree tracks what
/// exists so every emitted op succeeds against a fresh image.
pub fn random_workload(seed: u64, n_ops: usize) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<String> = vec!["/".into()];
    let mut files: BTreeMap<String, u64> = BTreeMap::new();
    let mut subdirs_of: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut next_id = 0u64;
    let mut ops = Vec::new();

    let join = |d: &str, n: &str| {
        if d == "/" {
            format!("/{n}")
        } else {
            format!("{d}/{n}")
        }
    };

    while ops.len() < n_ops {
        let roll = rng.gen_range(0u32..100);
        match roll {
            0..=19 => {
                // create
                if files.len() >= 48 {
                    continue;
                }
                let d = dirs[rng.gen_range(0..dirs.len())].clone();
                let p = join(&d, &format!("f{next_id}"));
                next_id += 1;
                files.insert(p.clone(), 0);
                ops.push(Op::Create(p));
            }
            20..=34 => {
                // mkdir, shallow tree
                if dirs.len() >= 12 {
                    continue;
                }
                let d = dirs[rng.gen_range(0..dirs.len())].clone();
                if d.matches('/').count() >= 3 {
                    continue;
                }
                let p = join(&d, &format!("d{next_id}"));
                next_id += 1;
                dirs.push(p.clone());
                subdirs_of.entry(d).or_default().insert(p.clone());
                ops.push(Op::Mkdir(p));
            }
            35..=64 => {
                // write: overwrite or bounded append
                if files.is_empty() {
                    continue;
                }
                let idx = rng.gen_range(0..files.len());
                let (p, size) = files.iter().nth(idx).map(|(p, s)| (p.clone(), *s)).unwrap();
                let append = rng.gen_bool(0.6) && size < 8192;
                let (offset, len) = if append || size == 0 {
                    (size, rng.gen_range(1..3000))
                } else {
                    let off = rng.gen_range(0..size);
                    (off, rng.gen_range(1..=(size - off)))
                };
                files.insert(p.clone(), size.max(offset + len));
                ops.push(Op::Write { path: p, offset, len });
            }
            65..=74 => {
                // unlink
                if files.is_empty() {
                    continue;
                }
                let idx = rng.gen_range(0..files.len());
                let p = files.keys().nth(idx).unwrap().clone();
                files.remove(&p);
                ops.push(Op::Unlink(p));
            }
            75..=82 => {
                // rmdir an empty leaf
                let empties: Vec<String> = dirs
                    .iter()
                    .filter(|d| d.as_str() != "/")
                    .filter(|d| {
                        subdirs_of.get(*d).is_none_or(|s| s.is_empty())
                            && !files.keys().any(|f| f.starts_with(&format!("{d}/")))
                    })
                    .cloned()
                    .collect();
                if empties.is_empty() {
                    continue;
                }
                let p = empties[rng.gen_range(0..empties.len())].clone();
                dirs.retain(|d| *d != p);
                for s in subdirs_of.values_mut() {
                    s.remove(&p);
                }
                ops.push(Op::Rmdir(p));
            }
            _ => {
                // rename a file, sometimes onto an existing one
                if files.is_empty() {
                    continue;
                }
                let idx = rng.gen_range(0..files.len());
                let (src, size) = files.iter().nth(idx).map(|(p, s)| (p.clone(), *s)).unwrap();
                let overwrite = rng.gen_bool(0.3) && files.len() > 1;
                let dst = if overwrite {
                    let others: Vec<String> =
                        files.keys().filter(|p| **p != src).cloned().collect();
                    others[rng.gen_range(0..others.len())].clone()
                } else {
                    let d = dirs[rng.gen_range(0..dirs.len())].clone();
                    let p = join(&d, &format!("r{next_id}"));
                    next_id += 1;
                    p
                };
                files.remove(&src);
                files.insert(dst.clone(), size);
                ops.push(Op::Rename(src, dst));
            }
        }
    }
    Workload {
        name: format!("random-{seed}"),
        ops,
    }
}

// ---------------------------------------------------------------------------
// Crash-test harness

/// Aggregate result of crash-testing one workload.
#[derive(Debug, Clone, Default)]
pub struct CrashTestReport {
    pub workload: String,
    pub ops_run: usize,
    pub fence_points: usize,
    pub states_checked: usize,
    pub failures: Vec<String>,
}

impl CrashTestReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Hash of every file's content, for equality up to the dump granularity.
fn content_map(fs: &Fs) -> BTreeMap<String, u64> {
    use std::hash::{Hash, Hasher};
    let mut out = BTreeMap::new();
    let mut stack = vec!["/".to_string()];
    while let Some(dir) = stack.pop() {
        for (name, _) in fs.readdir(&dir).unwrap() {
            if name == "." || name == ".." {
                continue;
            }
            let path = if dir == "/" {
                format!("/{name}")
            } else {
                format!("{dir}/{name}")
            };
            let rec = fs.stat(&path).unwrap();
            match rec.kind() {
                Some(FileKind::Dir) => stack.push(path),
                _ => {
                    let data = fs.read(&path, 0, rec.size).unwrap();
                    let mut h = std::collections::hash_map::DefaultHasher::new();
                    data.hash(&mut h);
                    out.insert(path, h.finish());
                }
            }
        }
    }
    out
}

/// Pre- and post-operation snapshots a crash state may legally land on.
struct Sides {
    pre_dump: String,
    post_dump: String,
    /// Content hashes; `None` skips the content comparison (writes make no
    /// atomicity promise about data bytes).
    pre_content: Option<BTreeMap<String, u64>>,
    post_content: Option<BTreeMap<String, u64>>,
}

/// Check one crash image: consistent now, fully consistent after recovery,
/// and equal to one side of the operation.
fn verify_state(image: &[u8], sides: &Sides) -> Result<(), String> {
    match check_image(image, CheckMode::CrashState) {
        Ok(r) if r.ok() => {}
        Ok(r) => return Err(r.violations.join("; ")),
        Err(e) => return Err(e.to_string()),
    }
    let (rfs, _) = Fs::mount(PmDevice::from_image(image.to_vec()))
        .map_err(|e| format!("mount failed: {e}"))?;
    match check_device(rfs.device(), &rfs.geometry(), CheckMode::Full) {
        Ok(r) if r.ok() => {}
        Ok(r) => return Err(format!("after recovery: {}", r.violations.join("; "))),
        Err(e) => return Err(e.to_string()),
    }
    let dump = rfs.dump_tree();
    if dump != sides.pre_dump && dump != sides.post_dump {
        return Err(format!("recovered tree matches neither side:\n{dump}"));
    }
    if sides.pre_content.is_some() {
        let content = content_map(&rfs);
        let matches_pre = dump == sides.pre_dump && Some(&content) == sides.pre_content.as_ref();
        let matches_post = dump == sides.post_dump && Some(&content) == sides.post_content.as_ref();
        if !matches_pre && !matches_post {
            return Err("recovered content matches neither side".into());
        }
    }
    Ok(())
}

/// Replay a recorded trace onto the pre-operation image, verifying every
/// crash state before each fence and after the final event.
fn replay_and_check(
    pre_image: Vec<u8>,
    trace: &crate::pmem::PersistTrace,
    sides: &Sides,
    tag: &str,
    cap: usize,
    seed: u64,
    report: &mut CrashTestReport,
) -> Result<PmDevice, FsError> {
    let mut replay = PmDevice::from_image(pre_image);
    let check_here = |dev: &PmDevice, report: &mut CrashTestReport, at: &str| {
        report.fence_points += 1;
        dev.for_each_crash_state(cap, seed, |state_idx, cs| {
            report.states_checked += 1;
            if let Err(what) = verify_state(&cs.image, sides) {
                report.failures.push(format!(
                    "{tag} {at} state {state_idx} [{}]: {what}",
                    cs.describe()
                ));
            }
        });
    };
    for ev in &trace.events {
        match ev {
            TraceEvent::Store { offset, data } => replay.store(*offset, data)?,
            TraceEvent::Flush { line } => replay.flush_line(*line),
            TraceEvent::Fence => {
                check_here(&replay, report, "pre-fence");
                replay.fence();
            }
            TraceEvent::Mark { .. } => {}
        }
    }
    check_here(&replay, report, "end");
    Ok(replay)
}

/// Run one workload under exhaustive (capped) crash-state enumeration.
///
/// For each operation: record its persistence trace, then replay the trace
/// onto the pre-operation image, enumerating every crash state at each fence
/// and after the final event. Every crash state must pass the crash-mode
/// check, recover into a full-mode-clean image, and mount as either the
/// pre- or the post-operation tree (content included, except for writes).
pub fn run_crash_test(workload: &Workload, cap: usize, seed: u64) -> Result<CrashTestReport, FsError> {
    let mut report = CrashTestReport {
        workload: workload.name.clone(),
        ..Default::default()
    };
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20))?;

    for (op_idx, op) in workload.ops.iter().enumerate() {
        assert!(fs.device().pending_chunks().is_empty());
        let pre_image = fs.device().media().to_vec();
        let pre_dump = fs.dump_tree();
        let pre_content = content_map(&fs);

        fs.device_mut().set_tracing(true);
        op.apply(&mut fs)?;
        let trace = fs.device_mut().take_trace().unwrap();
        fs.device_mut().set_tracing(false);
        report.ops_run += 1;

        let with_content = !matches!(op, Op::Write { .. });
        let sides = Sides {
            pre_dump,
            post_dump: fs.dump_tree(),
            pre_content: with_content.then_some(pre_content),
            post_content: with_content.then(|| content_map(&fs)),
        };
        let tag = format!("{}: op {op_idx} ({op})", workload.name);
        let replay = replay_and_check(pre_image, &trace, &sides, &tag, cap, seed, &mut report)?;

        // the replayed image must land exactly where the live one did
        if replay.media() != fs.device().media() {
            report.failures.push(format!("{tag}: replay diverged from live image"));
        }
    }
    Ok(report)
}

/// Crash-test a faulty operation variant: run `prefix` normally, then the
/// broken op via `inject`, checking its crash states the same way against
/// the outcome of doing `intended` correctly. A correct implementation
/// produces no failures; a broken one must produce some.
pub fn run_injected_crash_test(
    prefix: &Workload,
    inject: impl FnOnce(&mut Fs) -> Result<(), FsError>,
    intended: &Workload,
    cap: usize,
    seed: u64,
) -> Result<CrashTestReport, FsError> {
    let mut report = CrashTestReport {
        workload: format!("{}+injected", prefix.name),
        ..Default::default()
    };
    let mut fs = Fs::mkfs(PmDevice::new(1 << 20))?;
    for op in &prefix.ops {
        op.apply(&mut fs)?;
    }
    let pre_image = fs.device().media().to_vec();
    let pre_dump = fs.dump_tree();

    // intended outcome: the same logical op done correctly on a copy
    let (mut twin, _) = Fs::mount(PmDevice::from_image(pre_image.clone()))?;
    for op in &intended.ops {
        op.apply(&mut twin)?;
    }
    let sides = Sides {
        pre_dump,
        post_dump: twin.dump_tree(),
        pre_content: None,
        post_content: None,
    };

    fs.device_mut().set_tracing(true);
    inject(&mut fs)?;
    let trace = fs.device_mut().take_trace().unwrap();
    replay_and_check(pre_image, &trace, &sides, "injected", cap, seed, &mut report)?;
    Ok(report)
}

/// Convenience wrapper used by the CLI and tests: crash-test a batch.
pub fn run_all(workloads: &[Workload], cap: usize, seed: u64) -> Result<Vec<CrashTestReport>, FsError> {
    workloads.iter().map(|w| run_crash_test(w, cap, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_image_passes_full_check() {
        let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
        fs.mkdir("/d", 0o755).unwrap();
        fs.create("/d/f", 0o644).unwrap();
        fs.write("/d/f", 0, &[5u8; 5000]).unwrap();
        let r = check_device(fs.device(), &fs.geometry(), CheckMode::Full).unwrap();
        assert!(r.ok(), "{:?}", r.violations);
    }

    #[test]
    fn detects_dangling_dentry() {
        let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
        fs.create("/f", 0o644).unwrap();
        let geo = fs.geometry();
        let ino = fs.resolve("/f").unwrap();
        let dev = fs.device_mut();
        // zero the inode behind the entry's back
        dev.store(geo.inode_offset(ino).unwrap(), &[0u8; 128]).unwrap();
        dev.persist_all();
        let r = check_device(fs.device(), &geo, CheckMode::CrashState).unwrap();
        assert!(r.violations.iter().any(|v| v.starts_with("I2")), "{:?}", r.violations);
    }

    #[test]
    fn detects_low_link_count() {
        let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
        fs.mkdir("/d", 0o755).unwrap();
        let geo = fs.geometry();
        let dev = fs.device_mut();
        let off = geo.inode_offset(ROOT_INO).unwrap() + crate::layout::InodeRecord::FIELD_LINK_COUNT;
        dev.store_u64(off, 2).unwrap(); // truth is 3
        dev.persist_all();
        let r = check_device(fs.device(), &geo, CheckMode::CrashState).unwrap();
        assert!(!r.ok());
        // but a *high* count is legal mid-operation
        let dev = fs.device_mut();
        dev.store_u64(off, 9).unwrap();
        dev.persist_all();
        let r = check_device(fs.device(), &geo, CheckMode::CrashState).unwrap();
        assert!(r.ok(), "{:?}", r.violations);
        let r = check_device(fs.device(), &geo, CheckMode::Full).unwrap();
        assert!(r.violations.iter().any(|v| v.starts_with("I1")));
    }

    #[test]
    fn detects_size_past_pages() {
        let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
        fs.create("/f", 0o644).unwrap();
        fs.write("/f", 0, &[1u8; 100]).unwrap();
        let geo = fs.geometry();
        let ino = fs.resolve("/f").unwrap();
        let dev = fs.device_mut();
        dev.store_u64(
            geo.inode_offset(ino).unwrap() + crate::layout::InodeRecord::FIELD_SIZE,
            9000,
        )
        .unwrap();
        dev.persist_all();
        let r = check_device(fs.device(), &geo, CheckMode::CrashState).unwrap();
        assert!(r.violations.iter().any(|v| v.contains("has no page")), "{:?}", r.violations);
    }

    #[test]
    fn mid_rename_state_is_legal_pre_recovery_only() {
        // committed destination with its rename pointer still set, source
        // still valid: the canonical between-fences rename state
        let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
        fs.create("/old", 0o644).unwrap();
        let geo = fs.geometry();
        let ino = fs.resolve("/old").unwrap();
        let src_loc = fs.volatile_state().lookup_name(ROOT_INO, "old").unwrap().location;
        let new_loc = src_loc + crate::layout::DENTRY_SIZE;
        let dev = fs.device_mut();
        dev.store(new_loc, b"new").unwrap();
        dev.store_u64(new_loc + crate::layout::DentryRecord::FIELD_RENAME_PTR, src_loc).unwrap();
        dev.store_u64(new_loc + crate::layout::DentryRecord::FIELD_INO, ino).unwrap();
        dev.persist_all();
        let crash = check_device(fs.device(), &geo, CheckMode::CrashState).unwrap();
        assert!(crash.ok(), "{:?}", crash.violations);
        let full = check_device(fs.device(), &geo, CheckMode::Full).unwrap();
        assert!(full.violations.iter().any(|v| v.contains("rename pointer")));
    }

    #[test]
    fn workload_text_roundtrip() {
        let w = Workload::parse(
            "t",
            "# header\nmkdir /a\ncreate /a/f # trailing\nwrite /a/f 0 512\nrename /a/f /a/g\nfsync /a/g\nunlink /a/g\nrmdir /a\n",
        )
        .unwrap();
        assert_eq!(w.ops.len(), 7);
        let again = Workload::parse("t", &w.to_text()).unwrap();
        assert_eq!(w, again);
        assert!(Workload::parse("t", "chmod /a\n").is_err());
        assert!(Workload::parse("t", "write /a zero 4\n").is_err());
    }

    #[test]
    fn standard_workloads_apply_cleanly() {
        for w in standard_workloads() {
            let mut fs = Fs::mkfs(PmDevice::new(1 << 20)).unwrap();
            for op in &w.ops {
                op.apply(&mut fs).unwrap_or_else(|e| panic!("{}: {op}: {e}", w.name));
            }
            let r = check_device(fs.device(), &fs.geometry(), CheckMode::Full).unwrap();
            assert!(r.ok(), "{}: {:?}", w.name, r.violations);
        }
    }

    #[test]
    fn random_workloads_are_valid_and_deterministic() {
        for seed in 0..5 {
            let w = random_workload(seed, 40);
            assert_eq!(w, random_workload(seed, 40));
            let mut fs = Fs::mkfs(PmDevice::new(1 << 21)).unwrap();
            for op in &w.ops {
                op.apply(&mut fs).unwrap_or_else(|e| panic!("seed {seed}: {op}: {e}"));
            }
        }
    }

    #[test]
    fn crash_test_mkdir_chain_passes() {
        let w = Workload::parse("mini", "mkdir /a\nmkdir /a/b\n").unwrap();
        let r = run_crash_test(&w, DEFAULT_STATE_CAP, 7).unwrap();
        assert!(r.ok(), "{:?}", r.failures);
        assert!(r.states_checked > 10);
    }

    #[test]
    fn crash_test_rename_overwrite_passes() {
        let w = Workload::parse(
            "mini-rename",
            "create /src\ncreate /dst\nwrite /dst 0 1000\nrename /src /dst\n",
        )
        .unwrap();
        let r = run_crash_test(&w, DEFAULT_STATE_CAP, 7).unwrap();
        assert!(r.ok(), "{:?}", r.failures);
    }

    /// Every deliberately reordered operation variant must be flagged by the
    /// same harness that passes the correct implementations.
    #[cfg(feature = "fault-injection")]
    mod mutants {
        use super::*;
        use crate::fsops::faulty;

        const CAP: usize = 512;

        fn caught(
            prefix: &str,
            intended: &str,
            inject: impl FnOnce(&mut Fs) -> Result<(), FsError>,
        ) -> CrashTestReport {
            let prefix = Workload::parse("prefix", prefix).unwrap();
            let intended = Workload::parse("intended", intended).unwrap();
            let r = run_injected_crash_test(&prefix, inject, &intended, CAP, 7).unwrap();
            assert!(!r.ok(), "mutant not detected");
            r
        }

        #[test]
        fn mkdir_commit_before_init_fence() {
            caught("", "mkdir /d\n", |fs| {
                faulty::mkdir_commit_before_init_fence(fs, "/d").map(drop)
            });
        }

        #[test]
        fn mkdir_skip_parent_inc() {
            caught("", "mkdir /d\n", |fs| {
                faulty::mkdir_skip_parent_inc(fs, "/d").map(drop)
            });
        }

        #[test]
        fn unlink_dec_before_clear() {
            caught("create /f\n", "unlink /f\n", |fs| {
                faulty::unlink_dec_before_clear(fs, "/f")
            });
        }

        #[test]
        fn write_set_size_before_page_fence() {
            caught("create /f\n", "write /f 0 5000\n", |fs| {
                faulty::write_set_size_before_page_fence(fs, "/f", &Op::pattern(0, 5000))
            });
        }

        #[test]
        fn rename_clear_src_before_commit() {
            caught("create /a\n", "rename /a /b\n", |fs| {
                faulty::rename_clear_src_before_commit(fs, "/a", "/b")
            });
        }

        #[test]
        fn rename_skip_rename_pointer() {
            caught("create /a\n", "rename /a /b\n", |fs| {
                faulty::rename_skip_rename_pointer(fs, "/a", "/b")
            });
        }
    }
}

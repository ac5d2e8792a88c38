//! Explicit-state bounded model checking of the durable-update protocols.
//!
//! The model abstracts the on-media format down to what the ordering rules
//! are about: a small pool of inode records (allocated, kind, link count)
//! and directory entry slots (owning directory, name, target ino, rename
//! pointer). Each operation is compiled to the same sequence of 8-byte
//! atomic stores and fences the real implementation issues, with each store
//! labeled by the typestate transition it corresponds to.
//!
//! Exploration walks every bounded sequence of operations; at every fence it
//! enumerates every subset of the stores issued since the previous fence,
//! runs recovery on the resulting durable state, and checks that the result
//! is fully consistent and equal to the tree from either before or after the
//! interrupted operation. Exploration also continues from recovered states,
//! so crashes during later operations on a previously recovered image are
//! covered too.
//!
//! `ModelConfig::recover_renames = false` disables rename-pointer resolution
//! in the modeled recovery and yields a counterexample: a crash between the
//! destination commit and the source clear leaves the moved object visible
//! under both names, a state blind recovery cannot repair.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

/// Exploration bounds and the recovery toggle.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Operations per run; a crashed operation consumes its slot.
    pub max_ops: usize,
    /// Inode records including the root.
    pub max_inodes: u8,
    /// Directory entry slots.
    pub max_dentries: u8,
    /// Stores + fences per run.
    pub max_steps: usize,
    /// Resolve rename pointers during recovery (the correct behavior).
    pub recover_renames: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_ops: 2,
            max_inodes: 3,
            max_dentries: 5,
            max_steps: 24,
            recover_renames: true,
        }
    }
}

impl ModelConfig {
    /// Larger bounds for scheduled deep runs.
    pub fn nightly() -> Self {
        ModelConfig {
            max_ops: 3,
            max_inodes: 4,
            max_dentries: 6,
            max_steps: 36,
            recover_renames: true,
        }
    }
}

/// Inode record: `links == 0 && !alloc` is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct MInode {
    alloc: bool,
    dir: bool,
    links: u8,
}

/// Entry slot. `owner` models the directory-page backpointer and survives
/// entry reuse; `rptr` is 1-based (slot index + 1), 0 for none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct MDentry {
    owner: u8,
    name: u8,
    ino: u8,
    rptr: u8,
}

const ROOT: u8 = 1;

/// Durable state of the modeled device.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MState {
    inodes: Vec<MInode>,   // index 0 unused; 1 = root
    dentries: Vec<MDentry>,
}

impl MState {
    fn fresh(cfg: &ModelConfig) -> MState {
        let mut inodes = vec![MInode::default(); cfg.max_inodes as usize + 1];
        inodes[ROOT as usize] = MInode { alloc: true, dir: true, links: 2 };
        MState {
            inodes,
            dentries: vec![MDentry::default(); cfg.max_dentries as usize],
        }
    }

    fn ino(&self, i: u8) -> &MInode {
        &self.inodes[i as usize]
    }

    /// Valid entries: ino set and owner a live directory.
    fn entries(&self) -> impl Iterator<Item = (u8, &MDentry)> {
        self.dentries
            .iter()
            .enumerate()
            .filter(|(_, d)| d.ino != 0)
            .map(|(s, d)| (s as u8, d))
    }

    fn lowest_free_ino(&self) -> Option<u8> {
        (1..self.inodes.len() as u8).find(|&i| !self.ino(i).alloc && *self.ino(i) == MInode::default())
    }

    /// Slot to use for a new entry in `dir`: an empty slot already backing
    /// `dir` if one exists, else a fully-zero slot (which costs an extra
    /// owner store + fence, like allocating a directory page).
    fn acquire_slot(&self, dir: u8) -> Option<(u8, bool)> {
        let reuse = self
            .dentries
            .iter()
            .position(|d| d.owner == dir && d.name == 0 && d.ino == 0 && d.rptr == 0);
        if let Some(s) = reuse {
            return Some((s as u8, false));
        }
        let zero = self.dentries.iter().position(|d| *d == MDentry::default());
        zero.map(|s| (s as u8, true))
    }

    /// Inos reachable from the root through valid entries.
    fn reachable(&self) -> BTreeSet<u8> {
        let mut seen = BTreeSet::from([ROOT]);
        let mut frontier = vec![ROOT];
        while let Some(dir) = frontier.pop() {
            for (_, d) in self.entries() {
                if d.owner == dir && self.ino(d.ino).alloc && seen.insert(d.ino) {
                    if self.ino(d.ino).dir {
                        frontier.push(d.ino);
                    }
                }
            }
        }
        seen
    }

    /// Directories reachable from the root, root first.
    fn dirs(&self) -> Vec<u8> {
        self.reachable()
            .into_iter()
            .filter(|&i| self.ino(i).dir)
            .collect()
    }

    /// Deterministic tree listing: `path ino kind links` per line.
    pub fn tree(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![("/".to_string(), ROOT)];
        while let Some((path, ino)) = stack.pop() {
            let rec = self.ino(ino);
            out.push_str(&format!(
                "{path} {ino} {} {}\n",
                if rec.dir { "dir" } else { "file" },
                rec.links
            ));
            if rec.dir {
                let mut children: Vec<(u8, u8)> = self
                    .entries()
                    .filter(|(_, d)| d.owner == ino)
                    .map(|(_, d)| (d.name, d.ino))
                    .collect();
                children.sort();
                for (name, child) in children.into_iter().rev() {
                    let p = if path == "/" {
                        format!("/{}", name_char(name))
                    } else {
                        format!("{path}/{}", name_char(name))
                    };
                    stack.push((p, child));
                }
            }
        }
        out
    }
}

fn name_char(n: u8) -> char {
    (b'a' + n - 1) as char
}

/// One atomic durable write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Write {
    InitInode { ino: u8, dir: bool, links: u8 },
    FreeInode { ino: u8 },
    SetLinks { ino: u8, links: u8 },
    SetOwner { slot: u8, owner: u8 },
    SetName { slot: u8, name: u8 },
    SetIno { slot: u8, ino: u8 },
    SetRptr { slot: u8, rptr: u8 },
}

fn apply(state: &mut MState, w: Write) {
    match w {
        Write::InitInode { ino, dir, links } => {
            state.inodes[ino as usize] = MInode { alloc: true, dir, links }
        }
        Write::FreeInode { ino } => state.inodes[ino as usize] = MInode::default(),
        Write::SetLinks { ino, links } => state.inodes[ino as usize].links = links,
        Write::SetOwner { slot, owner } => state.dentries[slot as usize].owner = owner,
        Write::SetName { slot, name } => state.dentries[slot as usize].name = name,
        Write::SetIno { slot, ino } => state.dentries[slot as usize].ino = ino,
        Write::SetRptr { slot, rptr } => state.dentries[slot as usize].rptr = rptr,
    }
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Store { label: &'static str, write: Write },
    Fence,
}

/// Operations the menu can schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MOp {
    Mkdir { parent: u8, name: u8 },
    Create { parent: u8, name: u8 },
    Unlink { slot: u8 },
    Rmdir { slot: u8 },
    /// Moves the object behind `src_slot` to (`dst_parent`, `dst_name`),
    /// overwriting an existing compatible entry if one is there.
    Rename { src_slot: u8, dst_parent: u8, dst_name: u8 },
}

impl fmt::Display for MOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MOp::Mkdir { parent, name } => write!(f, "mkdir {}/{}", parent, name_char(name)),
            MOp::Create { parent, name } => write!(f, "create {}/{}", parent, name_char(name)),
            MOp::Unlink { slot } => write!(f, "unlink slot {slot}"),
            MOp::Rmdir { slot } => write!(f, "rmdir slot {slot}"),
            MOp::Rename { src_slot, dst_parent, dst_name } => {
                write!(f, "rename slot {src_slot} -> {}/{}", dst_parent, name_char(dst_name))
            }
        }
    }
}

/// Labels every compiled store can carry; audited against the typestate
/// transition table.
const STORE_LABELS: &[&str] = &[
    "alloc_pages",
    "init_inode",
    "set_name",
    "inc_link",
    "commit_dentry",
    "clear_ino",
    "dec_link",
    "clear_backpointers",
    "dealloc_inode",
    "dealloc_dentry",
    "set_rename_pointer",
    "commit_rename",
    "clear_rename_pointer",
];

fn store(label: &'static str, write: Write) -> Step {
    debug_assert!(STORE_LABELS.contains(&label));
    Step::Store { label, write }
}

/// Compile an operation against a quiescent state into its store/fence
/// sequence. Returns `None` if the operation is not applicable.
fn compile(state: &MState, op: MOp) -> Option<Vec<Step>> {
    let mut steps = Vec::new();
    match op {
        MOp::Mkdir { parent, name } | MOp::Create { parent, name } => {
            let is_dir = matches!(op, MOp::Mkdir { .. });
            let ino = state.lowest_free_ino()?;
            let (slot, fresh) = state.acquire_slot(parent)?;
            if fresh {
                steps.push(store("alloc_pages", Write::SetOwner { slot, owner: parent }));
                steps.push(Step::Fence);
            }
            steps.push(store(
                "init_inode",
                Write::InitInode { ino, dir: is_dir, links: if is_dir { 2 } else { 1 } },
            ));
            steps.push(store("set_name", Write::SetName { slot, name }));
            if is_dir {
                steps.push(store(
                    "inc_link",
                    Write::SetLinks { ino: parent, links: state.ino(parent).links + 1 },
                ));
            }
            steps.push(Step::Fence);
            steps.push(store("commit_dentry", Write::SetIno { slot, ino }));
            steps.push(Step::Fence);
        }
        MOp::Unlink { slot } => {
            let ino = state.dentries[slot as usize].ino;
            steps.push(store("clear_ino", Write::SetIno { slot, ino: 0 }));
            steps.push(Step::Fence);
            steps.push(store(
                "dec_link",
                Write::SetLinks { ino, links: state.ino(ino).links - 1 },
            ));
            steps.push(Step::Fence);
            steps.push(store("dealloc_inode", Write::FreeInode { ino }));
            steps.push(Step::Fence);
            steps.push(store("dealloc_dentry", Write::SetName { slot, name: 0 }));
            steps.push(Step::Fence);
        }
        MOp::Rmdir { slot } => {
            let dir = state.dentries[slot as usize].ino;
            let parent = state.dentries[slot as usize].owner;
            steps.push(store("clear_ino", Write::SetIno { slot, ino: 0 }));
            steps.push(Step::Fence);
            steps.push(store("dec_link", Write::SetLinks { ino: dir, links: 1 }));
            steps.push(store(
                "dec_link",
                Write::SetLinks { ino: parent, links: state.ino(parent).links - 1 },
            ));
            steps.push(Step::Fence);
            // give the removed directory's (empty) pages back first
            let owned: Vec<u8> = (0..state.dentries.len() as u8)
                .filter(|&s| state.dentries[s as usize].owner == dir)
                .collect();
            if !owned.is_empty() {
                for s in owned {
                    steps.push(store("clear_backpointers", Write::SetOwner { slot: s, owner: 0 }));
                }
                steps.push(Step::Fence);
            }
            steps.push(store("dealloc_inode", Write::FreeInode { ino: dir }));
            steps.push(Step::Fence);
            steps.push(store("dealloc_dentry", Write::SetName { slot, name: 0 }));
            steps.push(Step::Fence);
        }
        MOp::Rename { src_slot, dst_parent, dst_name } => {
            let src = state.dentries[src_slot as usize];
            let moved = src.ino;
            let src_parent = src.owner;
            let cross_dir_move = state.ino(moved).dir && src_parent != dst_parent;
            let old = state
                .entries()
                .find(|(_, d)| d.owner == dst_parent && d.name == dst_name)
                .map(|(s, d)| (s, d.ino));
            let (dst_slot, fresh) = match old {
                Some((s, _)) => (s, false),
                None => state.acquire_slot(dst_parent)?,
            };
            if fresh {
                steps.push(store("alloc_pages", Write::SetOwner { slot: dst_slot, owner: dst_parent }));
                steps.push(Step::Fence);
            }
            if old.is_none() {
                steps.push(store("set_name", Write::SetName { slot: dst_slot, name: dst_name }));
                steps.push(Step::Fence);
            }
            steps.push(store(
                "set_rename_pointer",
                Write::SetRptr { slot: dst_slot, rptr: src_slot + 1 },
            ));
            let mut dst_parent_links = state.ino(dst_parent).links;
            if cross_dir_move {
                dst_parent_links += 1;
                steps.push(store(
                    "inc_link",
                    Write::SetLinks { ino: dst_parent, links: dst_parent_links },
                ));
            }
            steps.push(Step::Fence);
            steps.push(store("commit_rename", Write::SetIno { slot: dst_slot, ino: moved }));
            steps.push(Step::Fence);
            steps.push(store("clear_ino", Write::SetIno { slot: src_slot, ino: 0 }));
            steps.push(Step::Fence);
            let mut decs = Vec::new();
            if cross_dir_move {
                decs.push(store(
                    "dec_link",
                    Write::SetLinks { ino: src_parent, links: state.ino(src_parent).links - 1 },
                ));
            }
            if let Some((_, o)) = old {
                if state.ino(o).dir {
                    // destination parent loses the overwritten subdirectory
                    dst_parent_links -= 1;
                    decs.push(store(
                        "dec_link",
                        Write::SetLinks { ino: dst_parent, links: dst_parent_links },
                    ));
                    decs.push(store("dec_link", Write::SetLinks { ino: o, links: 1 }));
                } else {
                    decs.push(store(
                        "dec_link",
                        Write::SetLinks { ino: o, links: state.ino(o).links - 1 },
                    ));
                }
            }
            if !decs.is_empty() {
                steps.extend(decs);
                steps.push(Step::Fence);
            }
            steps.push(store(
                "clear_rename_pointer",
                Write::SetRptr { slot: dst_slot, rptr: 0 },
            ));
            steps.push(Step::Fence);
            steps.push(store("dealloc_dentry", Write::SetName { slot: src_slot, name: 0 }));
            if let Some((_, o)) = old {
                steps.push(store("dealloc_inode", Write::FreeInode { ino: o }));
            }
            steps.push(Step::Fence);
        }
    }
    Some(steps)
}

/// All operations worth trying from a quiescent state, deterministic order.
fn menu(state: &MState, max_names: u8) -> Vec<MOp> {
    let mut ops = Vec::new();
    let dirs = state.dirs();
    let used_name = |dir: u8, name: u8| {
        state.entries().any(|(_, d)| d.owner == dir && d.name == name)
    };
    let fresh_name = |dir: u8| (1..=max_names).find(|&n| !used_name(dir, n));

    for &p in &dirs {
        if state.lowest_free_ino().is_some() && state.acquire_slot(p).is_some() {
            if let Some(n) = fresh_name(p) {
                ops.push(MOp::Mkdir { parent: p, name: n });
                ops.push(MOp::Create { parent: p, name: n });
            }
        }
    }
    for (s, d) in state.entries() {
        if state.ino(d.ino).dir {
            let empty = !state.entries().any(|(_, c)| c.owner == d.ino);
            if empty {
                ops.push(MOp::Rmdir { slot: s });
            }
        } else {
            ops.push(MOp::Unlink { slot: s });
        }
    }
    // renames: to a fresh name in each directory, and over each compatible
    // existing entry
    for (s, d) in state.entries() {
        let moved_dir = state.ino(d.ino).dir;
        // directories must not move under themselves
        let illegal_parent = |q: u8| {
            if !moved_dir {
                return false;
            }
            let mut cur = q;
            loop {
                if cur == d.ino {
                    return true;
                }
                if cur == ROOT {
                    return false;
                }
                match state.entries().find(|(_, e)| e.ino == cur) {
                    Some((_, e)) => cur = e.owner,
                    None => return false,
                }
            }
        };
        for &q in &dirs {
            if illegal_parent(q) {
                continue;
            }
            if let Some(n) = fresh_name(q) {
                if !(q == d.owner && n == d.name) {
                    ops.push(MOp::Rename { src_slot: s, dst_parent: q, dst_name: n });
                }
            }
            for (t, e) in state.entries() {
                if t == s || e.owner != q {
                    continue;
                }
                let old_dir = state.ino(e.ino).dir;
                let old_empty = !state.entries().any(|(_, c)| c.owner == e.ino);
                if old_dir == moved_dir && (!old_dir || old_empty) && !illegal_parent(q) {
                    ops.push(MOp::Rename { src_slot: s, dst_parent: q, dst_name: e.name });
                }
            }
        }
    }
    ops
}

/// Recovery over the abstract state, mirroring the real three phases.
fn recover(state: &MState, resolve_renames: bool) -> MState {
    let mut st = state.clone();

    // phase 1: rename pointers
    for t in 0..st.dentries.len() {
        let d = st.dentries[t];
        if d.rptr == 0 {
            continue;
        }
        if !resolve_renames {
            st.dentries[t].rptr = 0; // blind clear: the modeled bug
            continue;
        }
        let s = (d.rptr - 1) as usize;
        if d.ino != 0 {
            // crossed the atomic point (or an overwrite still pending, in
            // which case the source guard makes this a no-op rollback):
            // drop the source if it names the moved object, plus any
            // displaced same-name entry
            if st.dentries[s].ino == d.ino {
                st.dentries[s].ino = 0;
            }
            for u in 0..st.dentries.len() {
                let e = st.dentries[u];
                if u != t && u != s && e.owner == d.owner && e.name == d.name && e.ino != 0 {
                    st.dentries[u].ino = 0;
                }
            }
            st.dentries[t].rptr = 0;
        } else {
            // uncommitted: roll the destination back
            st.dentries[t].rptr = 0;
            st.dentries[t].name = 0;
        }
    }

    // phase 2: sweep to a fixpoint
    loop {
        let before = st.clone();
        let reachable = st.reachable();
        for s in 0..st.dentries.len() {
            let d = st.dentries[s];
            if d.ino != 0 && (!st.ino(d.ino).alloc || !reachable.contains(&d.owner)) {
                st.dentries[s].ino = 0;
            }
            let d = st.dentries[s];
            if d.ino == 0 && (d.name != 0 || d.rptr != 0) {
                st.dentries[s].name = 0;
                st.dentries[s].rptr = 0;
            }
            let d = st.dentries[s];
            if d.owner != 0 && (!st.ino(d.owner).alloc || !reachable.contains(&d.owner)) {
                st.dentries[s] = MDentry::default();
            }
        }
        for i in 1..st.inodes.len() as u8 {
            if st.ino(i).alloc && !reachable.contains(&i) {
                st.inodes[i as usize] = MInode::default();
            }
        }
        if st == before {
            break;
        }
    }

    // phase 3: exact link counts
    for i in 1..st.inodes.len() as u8 {
        if !st.ino(i).alloc {
            continue;
        }
        let truth = if st.ino(i).dir {
            2 + st
                .entries()
                .filter(|(_, d)| d.owner == i && st.ino(d.ino).dir)
                .count() as u8
        } else {
            st.entries().filter(|(_, d)| d.ino == i).count() as u8
        };
        st.inodes[i as usize].links = truth;
    }
    st
}

/// Invariants that must hold in any crash state.
fn check_crash(state: &MState) -> Result<(), String> {
    // entries only point at allocated objects
    for (s, d) in state.entries() {
        if !state.ino(d.ino).alloc {
            return Err(format!("slot {s} points at free inode {}", d.ino));
        }
    }
    // rename pointers: valid distinct targets, never self
    let mut targets = BTreeSet::new();
    for (s, d) in state.dentries.iter().enumerate() {
        if d.rptr != 0 {
            let t = d.rptr - 1;
            if t as usize == s || t as usize >= state.dentries.len() {
                return Err(format!("slot {s} rename pointer targets {t}"));
            }
            if !targets.insert(t) {
                return Err(format!("two rename pointers target slot {t}"));
            }
        }
    }
    // a source entry superseded by a committed rename is the same reference
    let superseded: BTreeSet<u8> = state
        .dentries
        .iter()
        .filter(|d| d.rptr != 0 && d.ino != 0)
        .filter(|d| state.dentries[(d.rptr - 1) as usize].ino == d.ino)
        .map(|d| d.rptr - 1)
        .collect();
    let mut fan_in: BTreeMap<u8, u8> = BTreeMap::new();
    for (s, d) in state.entries() {
        if !superseded.contains(&s) {
            *fan_in.entry(d.ino).or_insert(0) += 1;
        }
    }
    let reachable = state.reachable();
    for i in 1..state.inodes.len() as u8 {
        let rec = state.ino(i);
        if !rec.alloc || !reachable.contains(&i) {
            continue;
        }
        let floor = if rec.dir {
            let subdirs = state
                .entries()
                .filter(|(s, d)| d.owner == i && state.ino(d.ino).dir && !superseded.contains(s))
                .count() as u8;
            if i == ROOT { 2 + subdirs } else { 1 + fan_in.get(&i).copied().unwrap_or(0) + subdirs }
        } else {
            fan_in.get(&i).copied().unwrap_or(0)
        };
        if rec.links < floor {
            return Err(format!("inode {i} link count {} below floor {floor}", rec.links));
        }
    }
    // unique names per directory among live entries
    let mut names = BTreeSet::new();
    for (_, d) in state.entries() {
        if !names.insert((d.owner, d.name)) {
            return Err(format!("duplicate name {} in dir {}", name_char(d.name), d.owner));
        }
    }
    Ok(())
}

/// Invariants that must hold after recovery.
fn check_full(state: &MState) -> Result<(), String> {
    check_crash(state)?;
    let reachable = state.reachable();
    for (s, d) in state.dentries.iter().enumerate() {
        if d.rptr != 0 {
            return Err(format!("slot {s} still carries a rename pointer"));
        }
        if d.ino == 0 && d.name != 0 {
            return Err(format!("slot {s} is named but uncommitted"));
        }
        if d.owner != 0 && !reachable.contains(&d.owner) {
            return Err(format!("slot {s} backs an unreachable directory"));
        }
    }
    for i in 1..state.inodes.len() as u8 {
        let rec = state.ino(i);
        if rec.alloc && !reachable.contains(&i) {
            return Err(format!("inode {i} is allocated but unreachable"));
        }
        if !rec.alloc {
            continue;
        }
        let truth = if rec.dir {
            2 + state
                .entries()
                .filter(|(_, d)| d.owner == i && state.ino(d.ino).dir)
                .count() as u8
        } else {
            state.entries().filter(|(_, d)| d.ino == i).count() as u8
        };
        if rec.links != truth {
            return Err(format!("inode {i} link count {} should be {truth}", rec.links));
        }
        if rec.dir && i != ROOT && state.entries().filter(|(_, d)| d.ino == i).count() != 1 {
            return Err(format!("directory {i} does not have exactly one entry"));
        }
    }
    Ok(())
}

/// A run the checker rejected, with enough detail to replay it by hand.
#[derive(Debug, Clone)]
pub struct Counterexample {
    /// Completed operations before the failing one.
    pub history: Vec<String>,
    /// The interrupted operation.
    pub op: String,
    /// Labels of the stores issued in the current fence epoch.
    pub epoch_stores: Vec<String>,
    /// Which of those survived the crash.
    pub applied: Vec<bool>,
    pub violation: String,
    pub pre_tree: String,
    pub post_tree: String,
    pub recovered_tree: String,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "counterexample")?;
        for h in &self.history {
            writeln!(f, "  completed: {h}")?;
        }
        writeln!(f, "  interrupted: {}", self.op)?;
        for (label, applied) in self.epoch_stores.iter().zip(&self.applied) {
            writeln!(f, "    store {label}: {}", if *applied { "survived" } else { "lost" })?;
        }
        writeln!(f, "  violation: {}", self.violation)?;
        writeln!(f, "  tree before:\n{}", indent(&self.pre_tree))?;
        writeln!(f, "  tree after (intended):\n{}", indent(&self.post_tree))?;
        write!(f, "  tree recovered:\n{}", indent(&self.recovered_tree))
    }
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}\n")).collect()
}

/// Aggregate result of one bounded exploration.
#[derive(Debug, Clone, Default)]
pub struct ModelReport {
    pub states_explored: usize,
    pub ops_executed: usize,
    pub crash_states_checked: usize,
    pub counterexample: Option<Counterexample>,
}

impl ModelReport {
    pub fn ok(&self) -> bool {
        self.counterexample.is_none()
    }
}

struct Checker {
    cfg: ModelConfig,
    max_names: u8,
    report: ModelReport,
    visited: HashSet<(MState, usize)>,
}

impl Checker {
    /// Walk one compiled operation, checking every crash subset at every
    /// fence. Returns recovered states to continue from, or records the
    /// first counterexample.
    fn simulate(
        &mut self,
        start: &MState,
        op: MOp,
        steps: &[Step],
        history: &[String],
    ) -> Option<(MState, Vec<MState>)> {
        let mut post = start.clone();
        for s in steps {
            if let Step::Store { write, .. } = s {
                apply(&mut post, *write);
            }
        }
        let pre_tree = start.tree();
        let post_tree = post.tree();

        let mut durable = start.clone();
        let mut epoch: Vec<(&'static str, Write)> = Vec::new();
        let mut continuations = Vec::new();
        for step in steps {
            match step {
                Step::Store { label, write } => epoch.push((label, *write)),
                Step::Fence => {
                    for mask in 0u32..1 << epoch.len() {
                        self.report.crash_states_checked += 1;
                        let mut crashed = durable.clone();
                        let applied: Vec<bool> =
                            (0..epoch.len()).map(|i| mask >> i & 1 == 1).collect();
                        for (i, (_, w)) in epoch.iter().enumerate() {
                            if applied[i] {
                                apply(&mut crashed, *w);
                            }
                        }
                        let recovered = recover(&crashed, self.cfg.recover_renames);
                        let verdict = check_crash(&crashed)
                            .map_err(|e| format!("crash state: {e}"))
                            .and_then(|()| {
                                check_full(&recovered).map_err(|e| format!("after recovery: {e}"))
                            })
                            .and_then(|()| {
                                let t = recovered.tree();
                                if t == pre_tree || t == post_tree {
                                    Ok(())
                                } else {
                                    Err("recovered tree matches neither side".to_string())
                                }
                            });
                        if let Err(violation) = verdict {
                            self.report.counterexample = Some(Counterexample {
                                history: history.to_vec(),
                                op: op.to_string(),
                                epoch_stores: epoch.iter().map(|(l, _)| l.to_string()).collect(),
                                applied,
                                violation,
                                pre_tree,
                                post_tree,
                                recovered_tree: recovered.tree(),
                            });
                            return None;
                        }
                        continuations.push(recovered);
                    }
                    for (_, w) in epoch.drain(..) {
                        apply(&mut durable, w);
                    }
                }
            }
        }
        debug_assert!(epoch.is_empty(), "operation must end on a fence");
        debug_assert_eq!(durable, post);
        Some((post, continuations))
    }

    fn explore(&mut self, state: MState, ops_done: usize, steps_used: usize, history: Vec<String>) {
        if self.report.counterexample.is_some() || ops_done >= self.cfg.max_ops {
            return;
        }
        if !self.visited.insert((state.clone(), ops_done)) {
            return;
        }
        self.report.states_explored += 1;
        for op in menu(&state, self.max_names) {
            if self.report.counterexample.is_some() {
                return;
            }
            let Some(steps) = compile(&state, op) else { continue };
            if steps_used + steps.len() > self.cfg.max_steps {
                continue;
            }
            self.report.ops_executed += 1;
            let mut h = history.clone();
            h.push(op.to_string());
            let Some((post, continuations)) = self.simulate(&state, op, &steps, &history) else {
                return;
            };
            let next_steps = steps_used + steps.len();
            self.explore(post, ops_done + 1, next_steps, h.clone());
            let mut seen = HashSet::new();
            for recovered in continuations {
                if seen.insert(recovered.clone()) {
                    let mut hc = history.to_vec();
                    hc.push(format!("{op} (crashed, recovered)"));
                    self.explore(recovered, ops_done + 1, next_steps, hc);
                }
            }
        }
    }
}

/// Explore every bounded run and return the verdict.
pub fn check(cfg: &ModelConfig) -> ModelReport {
    let mut checker = Checker {
        max_names: cfg.max_dentries.min(3),
        cfg: cfg.clone(),
        report: ModelReport::default(),
        visited: HashSet::new(),
    };
    let init = MState::fresh(&checker.cfg);
    checker.explore(init, 0, 0, Vec::new());
    checker.report
}

//! Command-line front end: mkfs, an interactive shell, fsck with optional
//! repair, microbenchmarks, and the crash-test / model-check runners.
//!
//! Exit codes: 0 ok, 1 usage, 2 consistency failure, 3 internal error.

use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use ssufs::crashcheck::{self, CheckMode, Op, Workload, DEFAULT_STATE_CAP};
use ssufs::layout::{self, FileKind};
use ssufs::model::{self, ModelConfig};
use ssufs::pmem::PmDevice;
use ssufs::{Fs, FsError};

#[derive(Parser)]
#[command(name = "ssufs", version, about = "crash-consistent file system on a simulated persistent-memory image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a fresh file-system image.
    Mkfs {
        #[arg(long)]
        image: PathBuf,
        /// Image size in bytes.
        #[arg(long)]
        size: u64,
        /// Overwrite an existing image.
        #[arg(long)]
        force: bool,
    },
    /// Print the image header and derived geometry.
    Header {
        #[arg(long)]
        image: PathBuf,
    },
    /// Interactive shell over a mounted image (or replay a script).
    Shell {
        #[arg(long)]
        image: PathBuf,
        /// Replay commands from a file instead of stdin.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Write the image back to disk on exit.
        #[arg(long)]
        persist: bool,
    },
    /// Check image invariants; optionally run recovery and write back.
    Fsck {
        #[arg(long)]
        image: PathBuf,
        /// Recover a dirty image and persist the repaired result.
        #[arg(long)]
        repair: bool,
    },
    /// Time one operation in a loop and report latency and fence counts.
    Bench {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        op: BenchOp,
        #[arg(long, default_value_t = 100)]
        iters: u64,
    },
    /// Enumerate crash states under workloads and verify recovery.
    Crashtest {
        /// Workload files (one op per line); default is the built-in set.
        #[arg(long)]
        workload: Vec<PathBuf>,
        /// Generate workloads instead: `standard` or `random`.
        #[arg(long)]
        gen: Option<GenProfile>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Crash-state cap per fence epoch.
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        cap: usize,
        /// Number of random workloads (with `--gen random`).
        #[arg(long, default_value_t = 5)]
        count: u64,
        /// Ops per random workload.
        #[arg(long, default_value_t = 40)]
        ops: usize,
        /// Directory for reproducer files on failure.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Exhaustively check the abstract protocol model within bounds.
    Modelcheck {
        #[arg(long, default_value_t = 2)]
        ops: usize,
        /// Total object bound (inodes + directory-entry slots).
        #[arg(long, default_value_t = 8)]
        objects: u8,
        #[arg(long, default_value_t = 24)]
        steps: usize,
        /// Model recovery without completing committed renames.
        #[arg(long)]
        disable_rename_recovery: bool,
        /// Write the counterexample trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchOp {
    Create,
    Mkdir,
    Rename,
    Append1k,
    Append16k,
    Read1k,
    Read16k,
    Unlink,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenProfile {
    Standard,
    Random,
}

enum Failure {
    Usage(String),
    Consistency(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Consistency(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Consistency(m) | Failure::Internal(m) => m,
        }
    }
}

/// Image corruption is a consistency finding; everything else is internal.
fn fs_failure(e: FsError) -> Failure {
    match e {
        FsError::BadMagic | FsError::Corruption(_) | FsError::NotCleanlyUnmounted => {
            Failure::Consistency(e.to_string())
        }
        other => Failure::Internal(other.to_string()),
    }
}

fn load_device(path: &Path) -> Result<PmDevice, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(PmDevice::from_image(bytes))
}

fn save_device(path: &Path, dev: &PmDevice) -> Result<(), Failure> {
    std::fs::write(path, dev.media())
        .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version itself; real parse errors are usage
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Mkfs { image, size, force } => cmd_mkfs(&image, size, force),
        Command::Header { image } => cmd_header(&image),
        Command::Shell { image, script, persist } => cmd_shell(&image, script.as_deref(), persist),
        Command::Fsck { image, repair } => cmd_fsck(&image, repair),
        Command::Bench { image, op, iters } => cmd_bench(&image, op, iters),
        Command::Crashtest { workload, gen, seed, cap, count, ops, out } => {
            cmd_crashtest(&workload, gen, seed, cap, count, ops, &out)
        }
        Command::Modelcheck { ops, objects, steps, disable_rename_recovery, trace } => {
            cmd_modelcheck(ops, objects, steps, disable_rename_recovery, trace.as_deref())
        }
    }
}

// ---------------------------------------------------------------------------
// mkfs / header

fn cmd_mkfs(image: &Path, size: u64, force: bool) -> Result<(), Failure> {
    if image.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} exists; pass --force to overwrite",
            image.display()
        )));
    }
    let fs = Fs::mkfs(PmDevice::new(size)).map_err(fs_failure)?;
    let dev = fs.unmount().map_err(fs_failure)?;
    save_device(image, &dev)?;
    println!("mkfs: {} bytes at {}", size, image.display());
    Ok(())
}

fn cmd_header(image: &Path) -> Result<(), Failure> {
    let dev = load_device(image)?;
    let (sb, geo) = layout::read_superblock(&dev).map_err(fs_failure)?;
    println!("magic          {:#x}", sb.magic);
    println!("page_size      {}", sb.page_size);
    println!("num_inodes     {}", sb.num_inodes);
    println!("num_pages      {}", sb.num_pages);
    println!("clean_unmount  {}", sb.clean_unmount);
    println!("inode_table    {:#x}", geo.inode_table_off);
    println!("desc_table     {:#x}", geo.desc_table_off);
    println!("page_region    {:#x}", geo.page_region_off);
    Ok(())
}

// ---------------------------------------------------------------------------
// shell

fn cmd_shell(image: &Path, script: Option<&Path>, persist: bool) -> Result<(), Failure> {
    let dev = load_device(image)?;
    let (mut fs, report) = Fs::mount(dev).map_err(fs_failure)?;
    if !report.was_clean {
        println!("recovered dirty image: {report:?}");
    }

    let interactive = script.is_none() && std::io::stdin().is_terminal();
    let input: Box<dyn BufRead> = match script {
        Some(p) => Box::new(std::io::BufReader::new(std::fs::File::open(p).map_err(
            |e| Failure::Usage(format!("cannot read {}: {e}", p.display())),
        )?)),
        None => Box::new(std::io::BufReader::new(std::io::stdin())),
    };

    let mut lines = input.lines();
    loop {
        if interactive {
            print!("ssufs> ");
            let _ = std::io::stdout().flush();
        }
        let line = match lines.next() {
            Some(Ok(l)) => l,
            Some(Err(e)) => return Err(Failure::Internal(e.to_string())),
            None => break,
        };
        match shell_line(&mut fs, &line) {
            Ok(true) => break,
            Ok(false) => {}
            Err(e) => {
                // in a script any failed command aborts the replay
                if script.is_some() {
                    return Err(fs_failure(e));
                }
                println!("error: {e}");
            }
        }
    }

    let dev = fs.unmount().map_err(fs_failure)?;
    if persist {
        save_device(image, &dev)?;
    }
    Ok(())
}

fn abspath(arg: &str) -> String {
    if arg.starts_with('/') {
        arg.to_string()
    } else {
        format!("/{arg}")
    }
}

/// Execute one shell line; returns true on `quit`.
fn shell_line(fs: &mut Fs, line: &str) -> Result<bool, FsError> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let arg = |i: usize| -> Result<String, FsError> {
        words
            .get(i)
            .map(|w| abspath(w))
            .ok_or_else(|| FsError::Inval(format!("{}: missing argument", words[0])))
    };
    match words.first().copied() {
        None | Some("#") => Ok(false),
        Some("quit") | Some("exit") => Ok(true),
        Some("ls") => {
            let path = words.get(1).map(|w| abspath(w)).unwrap_or_else(|| "/".into());
            for (name, ino) in fs.readdir(&path)? {
                println!("{name}\t{ino}");
            }
            Ok(false)
        }
        Some("mkdir") => fs.mkdir(&arg(1)?, 0o755).map(|_| false),
        Some("touch") => fs.create(&arg(1)?, 0o644).map(|_| false),
        Some("write") => {
            let path = arg(1)?;
            let len: u64 = words
                .get(2)
                .and_then(|w| w.parse().ok())
                .ok_or_else(|| FsError::Inval("write: usage `write PATH LEN [OFFSET]`".into()))?;
            let offset: u64 = match words.get(3) {
                Some(w) => w
                    .parse()
                    .map_err(|_| FsError::Inval(format!("write: bad offset {w}")))?,
                None => 0,
            };
            fs.write(&path, offset, &Op::pattern(offset, len)).map(|_| false)
        }
        Some("cat") => {
            let path = arg(1)?;
            let size = fs.stat(&path)?.size;
            let bytes = fs.read(&path, 0, size)?;
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(&bytes);
            let _ = out.write_all(b"\n");
            Ok(false)
        }
        Some("rm") => fs.unlink(&arg(1)?).map(|_| false),
        Some("rmdir") => fs.rmdir(&arg(1)?).map(|_| false),
        Some("mv") => fs.rename(&arg(1)?, &arg(2)?).map(|_| false),
        Some("stat") => {
            let path = arg(1)?;
            let rec = fs.stat(&path)?;
            let kind = match rec.kind() {
                Some(FileKind::Dir) => "dir",
                Some(FileKind::File) => "file",
                None => "?",
            };
            println!(
                "{path} ino={} kind={kind} size={} links={}",
                rec.ino, rec.size, rec.link_count
            );
            Ok(false)
        }
        Some("sync") => {
            // every operation is already durable at return
            if let Some(w) = words.get(1) {
                fs.fsync(&abspath(w))?;
            }
            Ok(false)
        }
        Some("tree") => {
            print!("{}", fs.dump_tree());
            Ok(false)
        }
        Some(other) => Err(FsError::Inval(format!("unknown command: {other}"))),
    }
}

// ---------------------------------------------------------------------------
// fsck

fn cmd_fsck(image: &Path, repair: bool) -> Result<(), Failure> {
    let dev = load_device(image)?;
    let (sb, geo) = layout::read_superblock(&dev).map_err(fs_failure)?;

    if sb.clean_unmount == 1 {
        let report = crashcheck::check_device(&dev, &geo, CheckMode::Full).map_err(fs_failure)?;
        for v in &report.violations {
            println!("fsck: {v}");
        }
        if report.ok() {
            println!("fsck: clean");
            return Ok(());
        }
        return Err(Failure::Consistency(format!(
            "{} violation(s) on a clean image",
            report.violations.len()
        )));
    }

    if !repair {
        let report =
            crashcheck::check_device(&dev, &geo, CheckMode::CrashState).map_err(fs_failure)?;
        for v in &report.violations {
            println!("fsck: {v}");
        }
        println!("fsck: image dirty ({} crash-state violation(s)); rerun with --repair", report.violations.len());
        return Err(Failure::Consistency("image not cleanly unmounted".into()));
    }

    let (fs, rec) = Fs::mount(dev).map_err(fs_failure)?;
    println!(
        "fsck: recovered (renames completed {}, rolled back {}, dentries swept {}, inodes swept {}, descriptors swept {}, links repaired {}, sizes repaired {})",
        rec.renames_completed,
        rec.renames_rolled_back,
        rec.dentries_swept,
        rec.inodes_swept,
        rec.descriptors_swept,
        rec.links_repaired,
        rec.sizes_repaired
    );
    let report =
        crashcheck::check_device(fs.device(), &geo, CheckMode::Full).map_err(fs_failure)?;
    for v in &report.violations {
        println!("fsck: {v}");
    }
    if !report.ok() {
        return Err(Failure::Consistency(format!(
            "{} violation(s) after recovery",
            report.violations.len()
        )));
    }
    let dev = fs.unmount().map_err(fs_failure)?;
    save_device(image, &dev)?;
    println!("fsck: repaired image written back");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn cmd_bench(image: &Path, op: BenchOp, iters: u64) -> Result<(), Failure> {
    let dev = load_device(image)?;
    let (mut fs, _) = Fs::mount(dev).map_err(fs_failure)?;
    let res = bench_loop(&mut fs, op, iters).map_err(fs_failure)?;
    let name = match op {
        BenchOp::Create => "create",
        BenchOp::Mkdir => "mkdir",
        BenchOp::Rename => "rename",
        BenchOp::Append1k => "append1k",
        BenchOp::Append16k => "append16k",
        BenchOp::Read1k => "read1k",
        BenchOp::Read16k => "read16k",
        BenchOp::Unlink => "unlink",
    };
    println!(
        "op={name} iters={iters} mean_ns={} min_ns={} max_ns={} fences={} flushes={} stores={}",
        res.total_ns / iters as u128,
        res.min_ns,
        res.max_ns,
        res.fences,
        res.flushes,
        res.stores
    );
    fs.unmount().map_err(fs_failure)?;
    Ok(())
}

#[derive(Default)]
struct BenchResult {
    total_ns: u128,
    min_ns: u128,
    max_ns: u128,
    fences: usize,
    flushes: usize,
    stores: usize,
}

fn bench_loop(fs: &mut Fs, op: BenchOp, iters: u64) -> Result<BenchResult, FsError> {
    // untraced, untimed setup
    match op {
        BenchOp::Rename | BenchOp::Unlink => {
            for i in 0..iters {
                fs.create(&format!("/bench-{i}"), 0o644)?;
            }
        }
        BenchOp::Read1k | BenchOp::Read16k => {
            let len = if matches!(op, BenchOp::Read1k) { 1024 } else { 16384 };
            fs.create("/bench-src", 0o644)?;
            fs.write("/bench-src", 0, &Op::pattern(0, len))?;
        }
        BenchOp::Append1k | BenchOp::Append16k => {
            fs.create("/bench-src", 0o644)?;
        }
        _ => {}
    }

    let mut res = BenchResult { min_ns: u128::MAX, ..Default::default() };
    fs.device_mut().set_tracing(true);
    for i in 0..iters {
        let t0 = Instant::now();
        match op {
            BenchOp::Create => fs.create(&format!("/bench-{i}"), 0o644).map(drop)?,
            BenchOp::Mkdir => fs.mkdir(&format!("/bd-{i}"), 0o755).map(drop)?,
            BenchOp::Rename => fs.rename(&format!("/bench-{i}"), &format!("/moved-{i}"))?,
            BenchOp::Unlink => fs.unlink(&format!("/bench-{i}"))?,
            BenchOp::Append1k | BenchOp::Append16k => {
                let len = if matches!(op, BenchOp::Append1k) { 1024 } else { 16384 };
                let off = fs.stat("/bench-src")?.size;
                fs.write("/bench-src", off, &Op::pattern(off, len))?;
            }
            BenchOp::Read1k | BenchOp::Read16k => {
                let len = if matches!(op, BenchOp::Read1k) { 1024 } else { 16384 };
                let bytes = fs.read("/bench-src", 0, len)?;
                std::hint::black_box(bytes);
            }
        }
        let ns = t0.elapsed().as_nanos();
        res.total_ns += ns;
        res.min_ns = res.min_ns.min(ns);
        res.max_ns = res.max_ns.max(ns);
    }
    if let Some(trace) = fs.device_mut().take_trace() {
        res.fences = trace.fence_count();
        for ev in &trace.events {
            match ev {
                ssufs::pmem::TraceEvent::Flush { .. } => res.flushes += 1,
                ssufs::pmem::TraceEvent::Store { .. } => res.stores += 1,
                _ => {}
            }
        }
    }
    fs.device_mut().set_tracing(false);
    Ok(res)
}

// ---------------------------------------------------------------------------
// crashtest / modelcheck

fn cmd_crashtest(
    files: &[PathBuf],
    gen: Option<GenProfile>,
    seed: u64,
    cap: usize,
    count: u64,
    ops: usize,
    out: &Path,
) -> Result<(), Failure> {
    let mut workloads = Vec::new();
    if !files.is_empty() {
        for f in files {
            let text = std::fs::read_to_string(f)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", f.display())))?;
            let name = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "workload".into());
            workloads.push(Workload::parse(&name, &text).map_err(fs_failure)?);
        }
    } else {
        match gen.unwrap_or(GenProfile::Standard) {
            GenProfile::Standard => workloads = crashcheck::standard_workloads(),
            GenProfile::Random => {
                for i in 0..count {
                    workloads.push(crashcheck::random_workload(seed.wrapping_add(i), ops));
                }
            }
        }
    }

    let mut failed = 0usize;
    for w in &workloads {
        let rep = crashcheck::run_crash_test(w, cap, seed).map_err(fs_failure)?;
        println!(
            "workload={} ops={} fence_points={} states={} failures={}",
            rep.workload,
            rep.ops_run,
            rep.fence_points,
            rep.states_checked,
            rep.failures.len()
        );
        if !rep.ok() {
            failed += 1;
            let path = out.join(format!("{}.repro.txt", rep.workload));
            let mut body = String::new();
            body.push_str("# workload\n");
            body.push_str(&w.to_text());
            body.push_str("# failures\n");
            for f in &rep.failures {
                body.push_str(f);
                body.push('\n');
            }
            std::fs::write(&path, body)
                .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))?;
            println!("reproducer: {}", path.display());
        }
    }
    if failed > 0 {
        return Err(Failure::Consistency(format!("{failed} workload(s) failed")));
    }
    Ok(())
}

fn cmd_modelcheck(
    ops: usize,
    objects: u8,
    steps: usize,
    disable_rename_recovery: bool,
    trace: Option<&Path>,
) -> Result<(), Failure> {
    if objects < 4 {
        return Err(Failure::Usage("--objects must be at least 4".into()));
    }
    // split the object budget between inode slots and directory-entry slots;
    // 8 objects -> 3 inodes + 5 slots, 10 -> 4 + 6
    let max_inodes = objects / 2 - 1;
    let cfg = ModelConfig {
        max_ops: ops,
        max_inodes,
        max_dentries: objects - max_inodes,
        max_steps: steps,
        recover_renames: !disable_rename_recovery,
    };
    let report = model::check(&cfg);
    println!(
        "states={} ops={} crash_states={} verdict={}",
        report.states_explored,
        report.ops_executed,
        report.crash_states_checked,
        if report.ok() { "pass" } else { "fail" }
    );
    if let Some(cex) = &report.counterexample {
        let text = cex.to_string();
        match trace {
            Some(p) => {
                std::fs::write(p, &text)
                    .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", p.display())))?;
                println!("counterexample: {}", p.display());
            }
            None => print!("{text}"),
        }
        return Err(Failure::Consistency("model check found a counterexample".into()));
    }
    Ok(())
}

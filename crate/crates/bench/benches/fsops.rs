//! Operation latency on the in-memory device. Absolute numbers only show
//! trends; the interesting signal is the relative cost of the fence patterns.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ssufs_bench::{fresh_fs, pattern, populated_fs};

fn bench_create(c: &mut Criterion) {
    c.bench_function("create", |b| {
        b.iter_batched(
            fresh_fs,
            |mut fs| fs.create("/f", 0o644).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_mkdir(c: &mut Criterion) {
    c.bench_function("mkdir", |b| {
        b.iter_batched(
            fresh_fs,
            |mut fs| fs.mkdir("/d", 0o755).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_rename(c: &mut Criterion) {
    c.bench_function("rename", |b| {
        b.iter_batched(
            || populated_fs(1),
            |mut fs| fs.rename("/f0", "/g").unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_unlink(c: &mut Criterion) {
    c.bench_function("unlink", |b| {
        b.iter_batched(
            || populated_fs(1),
            |mut fs| fs.unlink("/f0").unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_append(c: &mut Criterion) {
    let mut g = c.benchmark_group("append");
    for len in [1024u64, 16384] {
        let data = pattern(len);
        g.bench_function(format!("{len}"), |b| {
            b.iter_batched(
                || populated_fs(1),
                |mut fs| fs.write("/f0", 0, &data).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn bench_overwrite(c: &mut Criterion) {
    let data = pattern(1024);
    c.bench_function("overwrite", |b| {
        b.iter_batched(
            || {
                let mut fs = populated_fs(1);
                fs.write("/f0", 0, &pattern(1024)).unwrap();
                fs
            },
            |mut fs| fs.write("/f0", 0, &data).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_read(c: &mut Criterion) {
    let mut g = c.benchmark_group("read");
    for len in [1024u64, 16384] {
        g.bench_function(format!("{len}"), |b| {
            let mut fs = populated_fs(1);
            fs.write("/f0", 0, &pattern(len)).unwrap();
            b.iter(|| std::hint::black_box(fs.read("/f0", 0, len).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(
    ops,
    bench_create,
    bench_mkdir,
    bench_rename,
    bench_unlink,
    bench_append,
    bench_overwrite,
    bench_read
);
criterion_main!(ops);

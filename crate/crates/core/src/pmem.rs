//! Simulated byte-addressable persistent memory with x86-style persistence
//! semantics: stores land in a volatile cache layer and only reach durable
//! media after an explicit flush of the covering cache line followed by a
//! store fence.
//!
//! Crash semantics are deliberately conservative: any subset of chunks
//! stored since the last retired fence may survive a crash, regardless of
//! whether their lines were flushed. Chunks issued before a retired fence
//! are always durable in every crash state.

use crate::error::FsError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Cache line granularity in bytes.
pub const CACHE_LINE: u64 = 64;
/// Crash-atomic store granularity in bytes.
pub const CHUNK: u64 = 8;

/// One recorded persistence event, in issue order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Store { offset: u64, data: Vec<u8> },
    Flush { line: u64 },
    Fence,
    Mark { label: String },
}

/// Ordered record of stores, flushes, fences and operation markers.
#[derive(Debug, Clone, Default)]
pub struct PersistTrace {
    pub events: Vec<TraceEvent>,
}

impl PersistTrace {
    pub fn clear(&mut self) {
        self.events.clear();
    }

    /// Number of fences in the trace.
    pub fn fence_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Fence))
            .count()
    }

    /// Fences issued between `MARK begin <label>` and `MARK end <label>`.
    pub fn fences_within(&self, label: &str) -> Option<usize> {
        let begin = format!("begin {label}");
        let end = format!("end {label}");
        let mut inside = false;
        let mut count = 0;
        let mut seen = false;
        for ev in &self.events {
            match ev {
                TraceEvent::Mark { label } if *label == begin => {
                    inside = true;
                    seen = true;
                }
                TraceEvent::Mark { label } if *label == end => inside = false,
                TraceEvent::Fence if inside => count += 1,
                _ => {}
            }
        }
        seen.then_some(count)
    }

    /// Line-oriented text dump: `STORE off len hex / FLUSH line / FENCE / MARK label`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            match ev {
                TraceEvent::Store { offset, data } => {
                    let hex: String = data.iter().map(|b| format!("{b:02x}")).collect();
                    let _ = writeln!(out, "STORE {} {} {}", offset, data.len(), hex);
                }
                TraceEvent::Flush { line } => {
                    let _ = writeln!(out, "FLUSH {line}");
                }
                TraceEvent::Fence => {
                    let _ = writeln!(out, "FENCE");
                }
                TraceEvent::Mark { label } => {
                    let _ = writeln!(out, "MARK {label}");
                }
            }
        }
        out
    }
}

/// A pending store chunk: at most 8 bytes, never straddling an 8-byte boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingChunk {
    pub offset: u64,
    pub data: Vec<u8>,
    pub epoch: u64,
    pub flushed: bool,
}

impl PendingChunk {
    pub fn line(&self) -> u64 {
        self.offset / CACHE_LINE
    }
}

/// One durable image consistent with fence ordering, plus which of the
/// current-epoch chunks were applied to produce it.
#[derive(Debug, Clone)]
pub struct CrashState {
    pub image: Vec<u8>,
    /// Bit i set iff current-epoch chunk i (in issue order) was applied.
    pub applied: Vec<bool>,
}

impl CrashState {
    pub fn describe(&self) -> String {
        self.applied
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

/// Simulated persistent-memory device.
#[derive(Debug, Clone)]
pub struct PmDevice {
    capacity: u64,
    media: Vec<u8>,
    pending: Vec<PendingChunk>,
    epoch: u64,
    trace: Option<PersistTrace>,
}

impl PmDevice {
    /// A zeroed device of the given capacity, with tracing disabled.
    pub fn new(capacity: u64) -> Self {
        PmDevice {
            capacity,
            media: vec![0u8; capacity as usize],
            pending: Vec::new(),
            epoch: 0,
            trace: None,
        }
    }

    /// A device backed by an existing durable image.
    pub fn from_image(image: Vec<u8>) -> Self {
        PmDevice {
            capacity: image.len() as u64,
            media: image,
            pending: Vec::new(),
            epoch: 0,
            trace: None,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn pending_chunks(&self) -> &[PendingChunk] {
        &self.pending
    }

    /// The durable image (does not include pending chunks).
    pub fn media(&self) -> &[u8] {
        &self.media
    }

    pub fn set_tracing(&mut self, on: bool) {
        if on {
            if self.trace.is_none() {
                self.trace = Some(PersistTrace::default());
            }
        } else {
            self.trace = None;
        }
    }

    pub fn trace(&self) -> Option<&PersistTrace> {
        self.trace.as_ref()
    }

    pub fn take_trace(&mut self) -> Option<PersistTrace> {
        self.trace.as_mut().map(std::mem::take)
    }

    pub fn mark(&mut self, label: impl Into<String>) {
        if let Some(t) = &mut self.trace {
            t.events.push(TraceEvent::Mark {
                label: label.into(),
            });
        }
    }

    fn check_bounds(&self, offset: u64, len: u64) -> Result<(), FsError> {
        if offset.checked_add(len).is_none_or(|end| end > self.capacity) {
            return Err(FsError::Address { offset, len });
        }
        Ok(())
    }

    /// Record a store. Writes of 8 bytes or fewer must not straddle an
    /// 8-byte boundary; larger writes are split into boundary-aligned chunks.
    pub fn store(&mut self, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let len = data.len() as u64;
        self.check_bounds(offset, len)?;
        if len <= CHUNK && offset / CHUNK != (offset + len - 1) / CHUNK {
            return Err(FsError::UnalignedStore { offset, len });
        }
        if let Some(t) = &mut self.trace {
            t.events.push(TraceEvent::Store {
                offset,
                data: data.to_vec(),
            });
        }
        let mut pos = 0u64;
        while pos < len {
            let off = offset + pos;
            // distance to the next 8-byte boundary
            let take = (CHUNK - off % CHUNK).min(len - pos);
            self.pending.push(PendingChunk {
                offset: off,
                data: data[pos as usize..(pos + take) as usize].to_vec(),
                epoch: self.epoch,
                flushed: false,
            });
            pos += take;
        }
        Ok(())
    }

    /// Cache-line indices covering `[offset, offset+len)`.
    pub fn lines_covering(offset: u64, len: u64) -> std::ops::RangeInclusive<u64> {
        let first = offset / CACHE_LINE;
        let last = if len == 0 {
            first
        } else {
            (offset + len - 1) / CACHE_LINE
        };
        first..=last
    }

    /// Mark all pending chunks in the covered cache lines as flushed.
    pub fn flush(&mut self, offset: u64, len: u64) -> Result<(), FsError> {
        self.check_bounds(offset, len)?;
        for line in Self::lines_covering(offset, len) {
            self.flush_line(line);
        }
        Ok(())
    }

    /// Flush a single cache line by index.
    pub fn flush_line(&mut self, line: u64) {
        if let Some(t) = &mut self.trace {
            t.events.push(TraceEvent::Flush { line });
        }
        for c in &mut self.pending {
            if c.line() == line {
                c.flushed = true;
            }
        }
    }

    /// Apply every flushed pending chunk to media and retire the epoch.
    pub fn fence(&mut self) {
        if let Some(t) = &mut self.trace {
            t.events.push(TraceEvent::Fence);
        }
        let mut rest = Vec::new();
        for c in std::mem::take(&mut self.pending) {
            if c.flushed {
                let off = c.offset as usize;
                self.media[off..off + c.data.len()].copy_from_slice(&c.data);
            } else {
                rest.push(c);
            }
        }
        self.pending = rest;
        self.epoch += 1;
    }

    /// Program-visible read: media overlaid with pending chunks, latest wins.
    pub fn read(&self, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        self.check_bounds(offset, len)?;
        let mut out = self.media[offset as usize..(offset + len) as usize].to_vec();
        for c in &self.pending {
            overlay(&mut out, offset, c);
        }
        Ok(out)
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64, FsError> {
        let b = self.read(offset, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn store_u64(&mut self, offset: u64, value: u64) -> Result<(), FsError> {
        self.store(offset, &value.to_le_bytes())
    }

    /// Durable contents only, ignoring the cache layer.
    pub fn read_durable(&self, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        self.check_bounds(offset, len)?;
        Ok(self.media[offset as usize..(offset + len) as usize].to_vec())
    }

    /// Zero a region directly on media, dropping any pending chunks that
    /// overlap it. Models bulk non-temporal initialization (mkfs only); not
    /// part of the store/flush/fence path and not traced as stores.
    pub fn bulk_zero(&mut self, offset: u64, len: u64) -> Result<(), FsError> {
        self.check_bounds(offset, len)?;
        self.media[offset as usize..(offset + len) as usize].fill(0);
        self.pending
            .retain(|c| c.offset + c.data.len() as u64 <= offset || c.offset >= offset + len);
        Ok(())
    }

    /// Flush every pending line, then fence. Test and teardown helper.
    pub fn persist_all(&mut self) {
        let mut lines: Vec<u64> = self.pending.iter().map(|c| c.line()).collect();
        lines.sort_unstable();
        lines.dedup();
        for line in lines {
            self.flush_line(line);
        }
        self.fence();
    }

    /// Durable image plus all chunks from retired epochs (always applied).
    fn crash_base(&self) -> Vec<u8> {
        let mut base = self.media.clone();
        for c in &self.pending {
            if c.epoch < self.epoch {
                let off = c.offset as usize;
                base[off..off + c.data.len()].copy_from_slice(&c.data);
            }
        }
        base
    }

    /// Chunks of the current (unretired) epoch, in issue order. Any subset
    /// of these may survive a crash.
    pub fn crash_candidates(&self) -> Vec<&PendingChunk> {
        self.pending
            .iter()
            .filter(|c| c.epoch == self.epoch)
            .collect()
    }

    /// Visit durable images reachable by crashing now, one at a time.
    ///
    /// Exhaustive up to `cap` subsets; beyond that a deterministic seeded
    /// sample of size `cap` which always contains the empty and full subsets.
    pub fn for_each_crash_state(&self, cap: usize, seed: u64, mut f: impl FnMut(usize, CrashState)) {
        let base = self.crash_base();
        let cands = self.crash_candidates();
        let n = cands.len();

        let build = |mask: &[bool]| {
            let mut image = base.clone();
            for (i, c) in cands.iter().enumerate() {
                if mask[i] {
                    let off = c.offset as usize;
                    image[off..off + c.data.len()].copy_from_slice(&c.data);
                }
            }
            CrashState {
                image,
                applied: mask.to_vec(),
            }
        };

        let total = 1usize.checked_shl(n as u32);
        match total {
            Some(t) if t <= cap.max(2) => {
                for bits in 0..t {
                    let mask: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                    f(bits, build(&mask));
                }
            }
            _ => {
                f(0, build(&vec![false; n]));
                f(1, build(&vec![true; n]));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut seen = std::collections::HashSet::new();
                let mut idx = 2;
                while idx < cap {
                    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
                    if mask.iter().all(|&b| !b) || mask.iter().all(|&b| b) {
                        continue;
                    }
                    if seen.insert(mask.clone()) {
                        f(idx, build(&mask));
                        idx += 1;
                    }
                }
            }
        }
    }

    /// All crash states at once; prefer `for_each_crash_state` when images
    /// are large.
    pub fn enumerate_crash_states(&self, cap: usize, seed: u64) -> Vec<CrashState> {
        let mut out = Vec::new();
        self.for_each_crash_state(cap, seed, |_, s| out.push(s));
        out
    }
}

fn overlay(buf: &mut [u8], buf_off: u64, c: &PendingChunk) {
    let buf_end = buf_off + buf.len() as u64;
    let c_end = c.offset + c.data.len() as u64;
    let lo = c.offset.max(buf_off);
    let hi = c_end.min(buf_end);
    if lo < hi {
        for abs in lo..hi {
            buf[(abs - buf_off) as usize] = c.data[(abs - c.offset) as usize];
        }
    }
}

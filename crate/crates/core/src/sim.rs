//! Trace-driven simulation of per-XCD L2 caches.
//!
//! Launch pid `i` runs on XCD `i mod X` and executes logical workgroup
//! `remap(i)`. Each XCD keeps `cus_per_xcd * wg_slots_per_cu` workgroups in
//! flight and interleaves their line touches round-robin, `granularity`
//! touches per turn. A finished slot immediately takes the next queued
//! launch pid. Caches are write-allocate, strict LRU, one per XCD. XCDs
//! share no state, so they are simulated independently.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{concurrent_slots_per_xcd, ArchError, ArchSpec};
use crate::patterns::{PatternError, RemapTable, SwizzlePattern};
use crate::traces::{AccessRecord, AccessTrace, Wave};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecParams {
    /// Line touches a workgroup issues per round-robin turn.
    pub interleave_granularity: u32,
    pub respect_wave_barriers: bool,
    #[serde(default)]
    pub set_indexing: SetIndexing,
}

impl Default for ExecParams {
    fn default() -> Self {
        ExecParams {
            interleave_granularity: 1,
            respect_wave_barriers: true,
            set_indexing: SetIndexing::default(),
        }
    }
}

/// How a line address selects its cache set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetIndexing {
    /// `line mod sets`. Power-of-two strides alias onto few sets.
    Modulo,
    /// A fixed bijective mix of the line address, then `mod sets`.
    #[default]
    Hashed,
}

impl SetIndexing {
    pub fn set_of(self, line: u64, sets: u64) -> u64 {
        match self {
            SetIndexing::Modulo => line % sets,
            SetIndexing::Hashed => mix(line) % sets,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XcdStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
}

impl XcdStats {
    fn new(accesses: u64, hits: u64) -> Self {
        XcdStats {
            accesses,
            hits,
            misses: accesses - hits,
            hit_rate: rate(hits, accesses),
        }
    }
}

fn rate(hits: u64, accesses: u64) -> f64 {
    if accesses == 0 {
        0.0
    } else {
        hits as f64 / accesses as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckReport {
    pub kernel: String,
    pub pattern: String,
    pub num_xcds: u32,
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub l2_hit_rate: f64,
    pub per_xcd: Vec<XcdStats>,
    pub unique_lines_touched: u64,
}

impl BottleneckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Hit rate in percentage points.
    pub fn hit_rate_pct(&self) -> f64 {
        self.l2_hit_rate * 100.0
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("remap table covers {table} pids but the trace grid has {grid}")]
    GridMismatch { table: usize, grid: u64 },
    #[error("cannot rank reports from different kernels: `{0}` and `{1}`")]
    MixedKernels(String, String),
    #[error("no reports to rank")]
    Empty,
}

/// One XCD's L2: `sets` sets of `ways` lines, strict LRU within a set.
#[derive(Debug, Clone)]
pub struct SetAssocCache {
    sets: u64,
    ways: usize,
    indexing: SetIndexing,
    /// Full line addresses; the index function need not be invertible by shift.
    tags: Vec<u64>,
    stamps: Vec<u64>,
    clock: u64,
}

const EMPTY: u64 = u64::MAX;

impl SetAssocCache {
    pub fn new(sets: u64, ways: u32, indexing: SetIndexing) -> Self {
        assert!(sets > 0 && ways > 0);
        let n = (sets * u64::from(ways)) as usize;
        SetAssocCache {
            sets,
            ways: ways as usize,
            indexing,
            tags: vec![EMPTY; n],
            stamps: vec![0; n],
            clock: 0,
        }
    }

    pub fn for_arch(arch: &ArchSpec, indexing: SetIndexing) -> Self {
        Self::new(arch.l2_sets(), arch.l2_associativity, indexing)
    }

    /// Touches a line address; returns whether it hit. Misses allocate.
    pub fn access(&mut self, line: u64) -> bool {
        self.clock += 1;
        let set = self.indexing.set_of(line, self.sets) as usize;
        let tag = line;
        let base = set * self.ways;
        let tags = &mut self.tags[base..base + self.ways];
        let stamps = &mut self.stamps[base..base + self.ways];
        if let Some(w) = tags.iter().position(|&t| t == tag) {
            stamps[w] = self.clock;
            return true;
        }
        let victim = stamps
            .iter()
            .enumerate()
            .min_by_key(|(_, &s)| s)
            .map(|(i, _)| i)
            .expect("at least one way");
        tags[victim] = tag;
        stamps[victim] = self.clock;
        false
    }
}

/// A line touch as observed by one XCD's cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineEvent {
    pub launch_pid: u64,
    pub line: u64,
    pub hit: bool,
}

struct Stream<'a> {
    launch_pid: u64,
    records: &'a [AccessRecord],
    next_record: usize,
    line: u64,
    end_line: u64,
}

impl<'a> Stream<'a> {
    fn new(launch_pid: u64, records: &'a [AccessRecord]) -> Self {
        Stream {
            launch_pid,
            records,
            next_record: 0,
            line: 1,
            end_line: 0,
        }
    }

    /// Next line touch, or `None` once the workgroup is done.
    fn next(&mut self, bases: &[u64], line_bytes: u64) -> Option<u64> {
        while self.line > self.end_line {
            let r = self.records.get(self.next_record)?;
            self.next_record += 1;
            let addr = bases[r.buffer as usize] + r.offset;
            self.line = addr / line_bytes;
            self.end_line = (addr + r.len - 1) / line_bytes;
        }
        let l = self.line;
        self.line += 1;
        Some(l)
    }
}

struct XcdRun {
    accesses: u64,
    hits: u64,
    events: Option<Vec<LineEvent>>,
}

struct Context<'a> {
    trace: &'a AccessTrace,
    table: &'a RemapTable,
    /// Per wave: logical pid → index into the wave's workgroups.
    members: Vec<Vec<u32>>,
    bases: Vec<u64>,
    line_bytes: u64,
    num_xcds: u64,
    slots: usize,
    granularity: u32,
    barriers: bool,
    indexing: SetIndexing,
}

const ABSENT: u32 = u32::MAX;

fn wave_members(wave: &Wave, total: usize) -> Vec<u32> {
    let mut idx = vec![ABSENT; total];
    for (i, wg) in wave.workgroups.iter().enumerate() {
        idx[wg.pid as usize] = i as u32;
    }
    idx
}

impl Context<'_> {
    fn run_xcd(&self, xcd: u64, arch: &ArchSpec, record: bool) -> XcdRun {
        let mut cache = SetAssocCache::for_arch(arch, self.indexing);
        let mut out = XcdRun {
            accesses: 0,
            hits: 0,
            events: record.then(Vec::new),
        };
        let total = self.table.len() as u64;
        let mut pending: Vec<Stream> = Vec::new();
        for (w, wave) in self.trace.waves.iter().enumerate() {
            let idx = &self.members[w];
            for launch in (xcd..total).step_by(self.num_xcds as usize) {
                let logical = self.table.logical(launch as usize) as usize;
                let i = idx[logical];
                if i != ABSENT {
                    pending.push(Stream::new(launch, &wave.workgroups[i as usize].records));
                }
            }
            if self.barriers {
                self.drain(&mut pending, &mut cache, &mut out);
            }
        }
        self.drain(&mut pending, &mut cache, &mut out);
        out
    }

    fn drain<'a>(&self, queue: &mut Vec<Stream<'a>>, cache: &mut SetAssocCache, out: &mut XcdRun) {
        let mut queue = std::mem::take(queue).into_iter();
        let mut slots: Vec<Option<Stream>> = (0..self.slots).map(|_| queue.next()).collect();
        let mut live = slots.iter().filter(|s| s.is_some()).count();
        while live > 0 {
            for slot in slots.iter_mut() {
                let Some(stream) = slot else { continue };
                let mut issued = 0;
                while issued < self.granularity {
                    match stream.next(&self.bases, self.line_bytes) {
                        Some(line) => {
                            let hit = cache.access(line);
                            out.accesses += 1;
                            out.hits += u64::from(hit);
                            if let Some(ev) = out.events.as_mut() {
                                ev.push(LineEvent {
                                    launch_pid: stream.launch_pid,
                                    line,
                                    hit,
                                });
                            }
                            issued += 1;
                        }
                        None => {
                            *slot = queue.next();
                            if slot.is_none() {
                                live -= 1;
                            }
                            break;
                        }
                    }
                }
            }
        }
    }
}

/// Distinct line addresses referenced anywhere in the trace.
pub fn unique_lines(trace: &AccessTrace, line_bytes: u64) -> u64 {
    let end = trace.buffers.iter().map(|b| b.base + b.len).max().unwrap_or(0);
    let mut seen = vec![0u64; (end.div_ceil(line_bytes) as usize).div_ceil(64)];
    let mut count = 0u64;
    for r in trace
        .waves
        .iter()
        .flat_map(|w| &w.workgroups)
        .flat_map(|wg| &wg.records)
    {
        let addr = trace.buffers[r.buffer as usize].base + r.offset;
        for line in addr / line_bytes..=(addr + r.len - 1) / line_bytes {
            let (word, bit) = ((line / 64) as usize, line % 64);
            if seen[word] & (1 << bit) == 0 {
                seen[word] |= 1 << bit;
                count += 1;
            }
        }
    }
    count
}

/// Simulates a trace under a pattern, validating the pattern first.
pub fn simulate(
    trace: &AccessTrace,
    pattern: &SwizzlePattern,
    arch: &ArchSpec,
    exec: &ExecParams,
) -> Result<BottleneckReport, SimError> {
    arch.validate()?;
    let table = RemapTable::build(pattern, &trace.grid, arch)?;
    simulate_table(trace, &table, &pattern.name, arch, exec)
}

/// Simulates with an explicit permutation.
pub fn simulate_table(
    trace: &AccessTrace,
    table: &RemapTable,
    pattern_name: &str,
    arch: &ArchSpec,
    exec: &ExecParams,
) -> Result<BottleneckReport, SimError> {
    Ok(run(trace, table, pattern_name, arch, exec, false)?.0)
}

/// As [`simulate_table`], also returning each XCD's ordered line touches.
pub fn simulate_with_events(
    trace: &AccessTrace,
    table: &RemapTable,
    arch: &ArchSpec,
    exec: &ExecParams,
) -> Result<(BottleneckReport, Vec<Vec<LineEvent>>), SimError> {
    run(trace, table, "table", arch, exec, true)
}

fn run(
    trace: &AccessTrace,
    table: &RemapTable,
    pattern_name: &str,
    arch: &ArchSpec,
    exec: &ExecParams,
    record: bool,
) -> Result<(BottleneckReport, Vec<Vec<LineEvent>>), SimError> {
    arch.validate()?;
    let total = trace.grid.total_blocks();
    if table.len() as u64 != total {
        return Err(SimError::GridMismatch {
            table: table.len(),
            grid: total,
        });
    }
    let ctx = Context {
        trace,
        table,
        members: trace.waves.iter().map(|w| wave_members(w, total as usize)).collect(),
        bases: trace.buffers.iter().map(|b| b.base).collect(),
        line_bytes: arch.l2_line_bytes,
        num_xcds: u64::from(arch.num_xcds),
        slots: concurrent_slots_per_xcd(arch) as usize,
        granularity: exec.interleave_granularity.max(1),
        barriers: exec.respect_wave_barriers,
        indexing: exec.set_indexing,
    };
    let runs: Vec<XcdRun> = (0..ctx.num_xcds)
        .into_par_iter()
        .map(|x| ctx.run_xcd(x, arch, record))
        .collect();
    let accesses: u64 = runs.iter().map(|r| r.accesses).sum();
    let hits: u64 = runs.iter().map(|r| r.hits).sum();
    let report = BottleneckReport {
        kernel: trace.kernel.describe(),
        pattern: pattern_name.to_string(),
        num_xcds: arch.num_xcds,
        accesses,
        hits,
        misses: accesses - hits,
        l2_hit_rate: rate(hits, accesses),
        per_xcd: runs.iter().map(|r| XcdStats::new(r.accesses, r.hits)).collect(),
        unique_lines_touched: unique_lines(trace, arch.l2_line_bytes),
    };
    let events = runs.into_iter().map(|r| r.events.unwrap_or_default()).collect();
    Ok((report, events))
}

/// Identity baseline and the swizzled run on the same trace.
pub fn simulate_pair(
    trace: &AccessTrace,
    arch: &ArchSpec,
    exec: &ExecParams,
    pattern: &SwizzlePattern,
) -> Result<(BottleneckReport, BottleneckReport), SimError> {
    let baseline = simulate(trace, &SwizzlePattern::identity(), arch, exec)?;
    let swizzled = simulate(trace, pattern, arch, exec)?;
    Ok((baseline, swizzled))
}

/// Best first: higher hit rate, then fewer unique lines, then pattern name.
pub fn report_order(a: &BottleneckReport, b: &BottleneckReport) -> Ordering {
    b.l2_hit_rate
        .total_cmp(&a.l2_hit_rate)
        .then(a.unique_lines_touched.cmp(&b.unique_lines_touched))
        .then_with(|| a.pattern.cmp(&b.pattern))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedReport {
    pub rank: usize,
    pub pattern: String,
    pub l2_hit_rate: f64,
    pub unique_lines_touched: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub kernel: String,
    pub entries: Vec<RankedReport>,
}

pub fn compare_reports(reports: &[BottleneckReport]) -> Result<Ranking, SimError> {
    let first = reports.first().ok_or(SimError::Empty)?;
    if let Some(other) = reports.iter().find(|r| r.kernel != first.kernel) {
        return Err(SimError::MixedKernels(first.kernel.clone(), other.kernel.clone()));
    }
    let mut sorted: Vec<&BottleneckReport> = reports.iter().collect();
    sorted.sort_by(|a, b| report_order(a, b));
    Ok(Ranking {
        kernel: first.kernel.clone(),
        entries: sorted
            .into_iter()
            .enumerate()
            .map(|(i, r)| RankedReport {
                rank: i + 1,
                pattern: r.pattern.clone(),
                l2_hit_rate: r.l2_hit_rate,
                unique_lines_touched: r.unique_lines_touched,
            })
            .collect(),
    })
}

//! Per-workgroup memory access traces for the benchmark kernels.
//!
//! Traces are byte ranges; line quantization happens in the simulator.
//! A trace is a list of waves. Workgroups within a wave run concurrently,
//! waves run strictly one after another. Multi-phase kernels list the same
//! logical pid in several waves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patterns::{BuiltinPattern, GridSpec};

/// Buffers start on 64 KiB boundaries, which is a multiple of any sane line.
pub const BUFFER_ALIGN: u64 = 64 * 1024;

/// Grids larger than this are refused; validation enumerates every pid.
pub const MAX_TRACE_BLOCKS: u64 = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gemm,
    FusedElementwise,
    Layernorm,
    Softmax,
    SpmvNaive,
    Transpose,
    BlackScholes,
    Fdtd2d,
    SmithWaterman,
    Stencil2d,
}

impl KernelKind {
    pub const ALL: [KernelKind; 10] = [
        KernelKind::Gemm,
        KernelKind::FusedElementwise,
        KernelKind::Layernorm,
        KernelKind::Softmax,
        KernelKind::SpmvNaive,
        KernelKind::Transpose,
        KernelKind::BlackScholes,
        KernelKind::Fdtd2d,
        KernelKind::SmithWaterman,
        KernelKind::Stencil2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Gemm => "gemm",
            KernelKind::FusedElementwise => "fused_elementwise",
            KernelKind::Layernorm => "layernorm",
            KernelKind::Softmax => "softmax",
            KernelKind::SpmvNaive => "spmv_naive",
            KernelKind::Transpose => "transpose",
            KernelKind::BlackScholes => "black_scholes",
            KernelKind::Fdtd2d => "fdtd2d",
            KernelKind::SmithWaterman => "smith_waterman",
            KernelKind::Stencil2d => "stencil2d",
        }
    }

    /// The built-in remapping suggested for this kind.
    pub fn default_pattern(self) -> BuiltinPattern {
        match self {
            KernelKind::Transpose => BuiltinPattern::TransposeBand,
            KernelKind::Softmax => BuiltinPattern::SoftmaxRowgroup,
            KernelKind::Layernorm => BuiltinPattern::LayernormRowgroup,
            KernelKind::Stencil2d => BuiltinPattern::StencilGroup,
            KernelKind::Fdtd2d => BuiltinPattern::FdtdStripe,
            _ => BuiltinPattern::GemmContiguous,
        }
    }

    fn problem_rank(self) -> usize {
        match self {
            KernelKind::Gemm => 3,
            KernelKind::SpmvNaive | KernelKind::BlackScholes | KernelKind::FusedElementwise => 1,
            _ => 2,
        }
    }

    fn known_params(self) -> &'static [&'static str] {
        match self {
            KernelKind::Gemm => &["group_m"],
            KernelKind::SpmvNaive => &["band"],
            KernelKind::Fdtd2d => &["steps"],
            _ => &[],
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "stencil" => "stencil2d",
            "fdtd" => "fdtd2d",
            "spmv" => "spmv_naive",
            "fused" => "fused_elementwise",
            other => other,
        };
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| TraceError::UnknownKernel(s.to_string()))
    }
}

/// A kernel instance: problem extents, tile extents and element size.
///
/// Dimension order per kind:
/// - gemm: `[M, N, K]` / `[BM, BN, BK]`
/// - transpose, stencil2d, fdtd2d, smith_waterman: `[rows, cols]` / `[BR, BC]`
/// - softmax, layernorm: `[rows, cols]` / `[rows per block, column chunk]`
/// - spmv_naive: `[rows]` / `[rows per block]`
/// - black_scholes, fused_elementwise: `[elements]` / `[elements per block]`
///
/// `params` holds `group_m` (gemm tile grouping, 1 = row-major), `band`
/// (spmv half-width) and `steps` (fdtd time steps).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub problem_dims: Vec<u64>,
    pub block_dims: Vec<u64>,
    pub dtype_bytes: u64,
    #[serde(default)]
    pub params: BTreeMap<String, u64>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("unsupported {kind} configuration: {reason}")]
    Unsupported { kind: KernelKind, reason: String },
    #[error("coverage violated in buffer `{buffer}`: {detail}")]
    Coverage { buffer: String, detail: String },
    #[error("access out of bounds: {0}")]
    OutOfBounds(String),
}

impl KernelSpec {
    /// The desk-scale default instance of each kernel.
    pub fn default_for(kind: KernelKind) -> Self {
        type Defaults = (Vec<u64>, Vec<u64>, u64, &'static [(&'static str, u64)]);
        let (problem, block, dtype, params): Defaults = match kind {
            KernelKind::Gemm => (vec![1024; 3], vec![64; 3], 4, &[("group_m", 8)]),
            KernelKind::Transpose => (vec![4096, 4096], vec![64, 64], 1, &[]),
            KernelKind::Softmax => (vec![4096, 4096], vec![1, 1024], 4, &[]),
            KernelKind::Layernorm => (vec![512, 8192], vec![1, 1024], 4, &[]),
            KernelKind::Stencil2d => (vec![2048, 2048], vec![64, 64], 4, &[]),
            KernelKind::Fdtd2d => (vec![1024, 1024], vec![64, 64], 4, &[("steps", 2)]),
            KernelKind::SmithWaterman => (vec![2048, 2048], vec![128, 128], 4, &[]),
            KernelKind::SpmvNaive => (vec![65536], vec![64], 4, &[("band", 16)]),
            KernelKind::BlackScholes | KernelKind::FusedElementwise => (vec![1 << 22], vec![1024], 4, &[]),
        };
        KernelSpec {
            kind,
            problem_dims: problem,
            block_dims: block,
            dtype_bytes: dtype,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// Rescales the problem for size sweeps: `size` becomes every extent of
    /// square kernels, the row count of row kernels, and the element count
    /// of 1-D kernels.
    pub fn with_size(mut self, size: u64) -> Self {
        match self.kind {
            KernelKind::Gemm => self.problem_dims = vec![size; 3],
            KernelKind::Transpose | KernelKind::Stencil2d | KernelKind::Fdtd2d | KernelKind::SmithWaterman => {
                self.problem_dims = vec![size, size]
            }
            KernelKind::Softmax | KernelKind::Layernorm => self.problem_dims[0] = size,
            KernelKind::SpmvNaive | KernelKind::BlackScholes | KernelKind::FusedElementwise => {
                self.problem_dims = vec![size]
            }
        }
        self
    }

    pub fn with_param(mut self, key: &str, value: u64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn param(&self, key: &str, default: u64) -> u64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn unsupported(&self, reason: impl Into<String>) -> TraceError {
        TraceError::Unsupported {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let rank = self.kind.problem_rank();
        if self.problem_dims.len() != rank || self.block_dims.len() != rank {
            return Err(self.unsupported(format!("expected {rank} problem and block dims")));
        }
        if self.problem_dims.iter().chain(&self.block_dims).any(|&d| d == 0) {
            return Err(self.unsupported("dims must be positive"));
        }
        if let Some((p, b)) = self.problem_dims.iter().zip(&self.block_dims).find(|(p, b)| b > p) {
            return Err(self.unsupported(format!("block {b} exceeds problem extent {p}")));
        }
        if !matches!(self.dtype_bytes, 1 | 2 | 4 | 8) {
            return Err(self.unsupported(format!("dtype of {} bytes", self.dtype_bytes)));
        }
        if let Some(k) = self
            .params
            .keys()
            .find(|k| !self.kind.known_params().contains(&k.as_str()))
        {
            return Err(self.unsupported(format!("unknown parameter `{k}`")));
        }
        if self.params.values().any(|&v| v == 0) {
            return Err(self.unsupported("parameters must be positive"));
        }
        let total = self.grid().total_blocks();
        if total > MAX_TRACE_BLOCKS {
            return Err(self.unsupported(format!("{total} blocks exceeds the limit of {MAX_TRACE_BLOCKS}")));
        }
        Ok(())
    }

    /// Launch grid. Does not validate.
    pub fn grid(&self) -> GridSpec {
        match self.kind {
            KernelKind::Gemm => GridSpec::tiled(&self.problem_dims[..2], &self.block_dims[..2]),
            _ => GridSpec::tiled(&self.problem_dims, &self.block_dims),
        }
    }

    /// One-line human description used in prompts and reports.
    pub fn describe(&self) -> String {
        let dims = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join("x");
        let mut s = format!(
            "{} problem {} block {} dtype {}B",
            self.kind,
            dims(&self.problem_dims),
            dims(&self.block_dims),
            self.dtype_bytes
        );
        for (k, v) in &self.params {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

/// Ceiling-division grid of a kernel.
pub fn total_blocks(spec: &KernelSpec) -> Result<GridSpec, TraceError> {
    spec.validate()?;
    Ok(spec.grid())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessRecord {
    pub buffer: u32,
    pub offset: u64,
    pub len: u64,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferRole {
    Input,
    /// Every byte must be written exactly `writes` times over the trace.
    Output {
        writes: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDesc {
    pub id: u32,
    pub name: String,
    pub len: u64,
    pub base: u64,
    pub role: BufferRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkgroupAccesses {
    pub pid: u64,
    pub records: Vec<AccessRecord>,
}

/// Workgroups separated from the next wave by a barrier. Sorted by pid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wave {
    pub workgroups: Vec<WorkgroupAccesses>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessTrace {
    pub kernel: KernelSpec,
    pub grid: GridSpec,
    pub buffers: Vec<BufferDesc>,
    pub waves: Vec<Wave>,
    /// Grid coordinates of each logical pid, when they are not row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_coords: Option<Vec<(u32, u32)>>,
}

impl AccessTrace {
    pub fn record_count(&self) -> usize {
        self.waves
            .iter()
            .flat_map(|w| &w.workgroups)
            .map(|wg| wg.records.len())
            .sum()
    }

    /// Grid coordinates computed by a logical pid.
    pub fn tile_of(&self, pid: u64) -> (u64, u64) {
        match &self.tile_coords {
            Some(t) => {
                let (m, n) = t[pid as usize];
                (u64::from(m), u64::from(n))
            }
            None => self.grid.coords(pid),
        }
    }

    pub fn buffer(&self, id: u32) -> &BufferDesc {
        &self.buffers[id as usize]
    }

    /// Every record lies inside its buffer.
    pub fn check_bounds(&self) -> Result<(), TraceError> {
        for (w, wave) in self.waves.iter().enumerate() {
            for wg in &wave.workgroups {
                for r in &wg.records {
                    let buf = self
                        .buffers
                        .get(r.buffer as usize)
                        .ok_or_else(|| TraceError::OutOfBounds(format!("pid {} names buffer {}", wg.pid, r.buffer)))?;
                    if r.len == 0 || r.offset + r.len > buf.len {
                        return Err(TraceError::OutOfBounds(format!(
                            "wave {w} pid {}: {}[{}..{}] outside {} bytes",
                            wg.pid,
                            buf.name,
                            r.offset,
                            r.offset + r.len,
                            buf.len
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Output buffers are written exactly their declared number of times.
    pub fn check_coverage(&self) -> Result<(), TraceError> {
        let mut writes: Vec<Vec<(u64, u64)>> = vec![Vec::new(); self.buffers.len()];
        for r in self.waves.iter().flat_map(|w| &w.workgroups).flat_map(|wg| &wg.records) {
            if r.mode == AccessMode::Write {
                writes[r.buffer as usize].push((r.offset, r.offset + r.len));
            }
        }
        for (buf, intervals) in self.buffers.iter().zip(writes) {
            let expected = match buf.role {
                BufferRole::Output { writes } => writes,
                BufferRole::Input if intervals.is_empty() => continue,
                BufferRole::Input => {
                    return Err(TraceError::Coverage {
                        buffer: buf.name.clone(),
                        detail: "input buffer is written".into(),
                    })
                }
            };
            let mut events: Vec<(u64, i64)> = Vec::with_capacity(intervals.len() * 2);
            for (s, e) in intervals {
                events.push((s, 1));
                events.push((e, -1));
            }
            events.sort_unstable();
            let mut depth = 0i64;
            let mut cursor = 0u64;
            let mut i = 0;
            while i < events.len() {
                let at = events[i].0;
                if at > cursor && depth != i64::from(expected) {
                    return Err(TraceError::Coverage {
                        buffer: buf.name.clone(),
                        detail: format!("bytes {cursor}..{at} written {depth} times, expected {expected}"),
                    });
                }
                while i < events.len() && events[i].0 == at {
                    depth += events[i].1;
                    i += 1;
                }
                cursor = at;
            }
            if cursor != buf.len {
                return Err(TraceError::Coverage {
                    buffer: buf.name.clone(),
                    detail: format!("bytes {cursor}..{} never written", buf.len),
                });
            }
        }
        Ok(())
    }

    /// Line-oriented `pid,buffer,offset,len,mode` dump, one `# wave` header per wave.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (i, wave) in self.waves.iter().enumerate() {
            writeln!(out, "# wave {i}")?;
            for wg in &wave.workgroups {
                for r in &wg.records {
                    let mode = match r.mode {
                        AccessMode::Read => "r",
                        AccessMode::Write => "w",
                    };
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        wg.pid, self.buffers[r.buffer as usize].name, r.offset, r.len, mode
                    )?;
                }
            }
        }
        Ok(())
    }
}

struct Layout {
    buffers: Vec<BufferDesc>,
    next_base: u64,
}

impl Layout {
    fn new() -> Self {
        Layout {
            buffers: Vec::new(),
            next_base: 0,
        }
    }

    fn add(&mut self, name: &str, len: u64, role: BufferRole) -> u32 {
        let id = self.buffers.len() as u32;
        self.buffers.push(BufferDesc {
            id,
            name: name.to_string(),
            len,
            base: self.next_base,
            role,
        });
        self.next_base += len.div_ceil(BUFFER_ALIGN).max(1) * BUFFER_ALIGN;
        id
    }
}

const OUT: BufferRole = BufferRole::Output { writes: 1 };

/// Record builder for one workgroup.
#[derive(Default)]
struct Recs(Vec<AccessRecord>);

impl Recs {
    fn push(&mut self, buffer: u32, offset: u64, len: u64, mode: AccessMode) {
        self.0.push(AccessRecord {
            buffer,
            offset,
            len,
            mode,
        });
    }

    fn read(&mut self, buffer: u32, offset: u64, len: u64) {
        self.push(buffer, offset, len, AccessMode::Read);
    }

    fn write(&mut self, buffer: u32, offset: u64, len: u64) {
        self.push(buffer, offset, len, AccessMode::Write);
    }

    /// One record per row of a row-major 2-D region.
    fn rect(&mut self, buffer: u32, m: &Matrix, rows: (u64, u64), cols: (u64, u64), mode: AccessMode) {
        for r in rows.0..rows.1 {
            self.push(buffer, m.at(r, cols.0), (cols.1 - cols.0) * m.dtype, mode);
        }
    }
}

/// Row-major matrix geometry.
struct Matrix {
    cols: u64,
    dtype: u64,
}

impl Matrix {
    fn at(&self, r: u64, c: u64) -> u64 {
        (r * self.cols + c) * self.dtype
    }
}

fn span(block: u64, size: u64, extent: u64) -> (u64, u64) {
    (block * size, ((block + 1) * size).min(extent))
}

/// Triton-style grouped tile order: `group_m` tile rows are walked column by column.
pub fn grouped_tile(pid: u64, num_blocks_m: u64, num_blocks_n: u64, group_m: u64) -> (u64, u64) {
    let in_group = group_m * num_blocks_n;
    let first_m = (pid / in_group) * group_m;
    let size_m = (num_blocks_m - first_m).min(group_m);
    let local = pid % in_group;
    (first_m + local % size_m, local / size_m)
}

/// Builds the trace of a kernel.
pub fn generate_trace(spec: &KernelSpec) -> Result<AccessTrace, TraceError> {
    spec.validate()?;
    let grid = spec.grid();
    let (buffers, waves, tile_coords) = match spec.kind {
        KernelKind::Gemm => gemm(spec, &grid),
        KernelKind::Transpose => with_plain(transpose(spec, &grid)),
        KernelKind::Softmax => with_plain(softmax(spec, &grid)),
        KernelKind::Layernorm => with_plain(layernorm(spec, &grid)),
        KernelKind::Stencil2d => with_plain(stencil(spec, &grid)),
        KernelKind::Fdtd2d => with_plain(fdtd(spec, &grid)),
        KernelKind::SmithWaterman => with_plain(smith_waterman(spec, &grid)),
        KernelKind::SpmvNaive => with_plain(spmv(spec, &grid)),
        KernelKind::BlackScholes => with_plain(streaming(
            spec,
            &grid,
            &["spot", "strike", "expiry", "rate", "volatility"],
            &["call", "put"],
        )),
        KernelKind::FusedElementwise => with_plain(streaming(spec, &grid, &["a", "b", "c"], &["out"])),
    };
    let trace = AccessTrace {
        kernel: spec.clone(),
        grid,
        buffers,
        waves,
        tile_coords,
    };
    debug_assert!(trace.check_bounds().is_ok());
    Ok(trace)
}

type Generated = (Vec<BufferDesc>, Vec<Wave>);
/// Buffers, waves and, when tiles are reordered, each pid's tile.
type GeneratedWithTiles = (Vec<BufferDesc>, Vec<Wave>, Option<Vec<(u32, u32)>>);

fn with_plain(g: Generated) -> GeneratedWithTiles {
    (g.0, g.1, None)
}

/// One wave holding every pid of the grid in order.
fn single_wave(grid: &GridSpec, mut f: impl FnMut(u64, &mut Recs)) -> Wave {
    wave_of(0..grid.total_blocks(), &mut f)
}

fn wave_of(pids: impl IntoIterator<Item = u64>, f: &mut impl FnMut(u64, &mut Recs)) -> Wave {
    Wave {
        workgroups: pids
            .into_iter()
            .map(|pid| {
                let mut r = Recs::default();
                f(pid, &mut r);
                WorkgroupAccesses { pid, records: r.0 }
            })
            .collect(),
    }
}

fn gemm(spec: &KernelSpec, grid: &GridSpec) -> GeneratedWithTiles {
    let (m, n, k) = (spec.problem_dims[0], spec.problem_dims[1], spec.problem_dims[2]);
    let (bm, bn, bk) = (spec.block_dims[0], spec.block_dims[1], spec.block_dims[2]);
    let d = spec.dtype_bytes;
    let group_m = spec.param("group_m", 8);
    let mut l = Layout::new();
    let a = l.add("A", m * k * d, BufferRole::Input);
    let b = l.add("B", k * n * d, BufferRole::Input);
    let c = l.add("C", m * n * d, OUT);
    let (am, bmx, cm) = (
        Matrix { cols: k, dtype: d },
        Matrix { cols: n, dtype: d },
        Matrix { cols: n, dtype: d },
    );
    let kb = k.div_ceil(bk);
    let tile = |pid| grouped_tile(pid, grid.num_blocks_m, grid.num_blocks_n, group_m);
    let wave = single_wave(grid, |pid, r| {
        let (tm, tn) = tile(pid);
        let rows = span(tm, bm, m);
        let cols = span(tn, bn, n);
        for kk in 0..kb {
            let ks = span(kk, bk, k);
            r.rect(a, &am, rows, ks, AccessMode::Read);
            r.rect(b, &bmx, ks, cols, AccessMode::Read);
        }
        r.rect(c, &cm, rows, cols, AccessMode::Write);
    });
    let coords = if group_m == 1 {
        None
    } else {
        Some(
            (0..grid.total_blocks())
                .map(|p| {
                    let (x, y) = tile(p);
                    (x as u32, y as u32)
                })
                .collect(),
        )
    };
    (l.buffers, vec![wave], coords)
}

fn transpose(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let (m, n) = (spec.problem_dims[0], spec.problem_dims[1]);
    let (bm, bn) = (spec.block_dims[0], spec.block_dims[1]);
    let d = spec.dtype_bytes;
    let mut l = Layout::new();
    let input = l.add("in", m * n * d, BufferRole::Input);
    let output = l.add("out", m * n * d, OUT);
    let (im, om) = (Matrix { cols: n, dtype: d }, Matrix { cols: m, dtype: d });
    let wave = single_wave(grid, |pid, r| {
        let (tm, tn) = grid.coords(pid);
        let rows = span(tm, bm, m);
        let cols = span(tn, bn, n);
        r.rect(input, &im, rows, cols, AccessMode::Read);
        r.rect(output, &om, cols, rows, AccessMode::Write);
    });
    (l.buffers, vec![wave])
}

fn softmax(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let (rows, cols) = (spec.problem_dims[0], spec.problem_dims[1]);
    let (br, chunk) = (spec.block_dims[0], spec.block_dims[1]);
    let d = spec.dtype_bytes;
    let chunks = grid.num_blocks_n;
    let mut l = Layout::new();
    let input = l.add("in", rows * cols * d, BufferRole::Input);
    // Partial (max, sum) per row and chunk.
    let stats = l.add("row_stats", rows * chunks * 8, OUT);
    let output = l.add("out", rows * cols * d, OUT);
    let mx = Matrix { cols, dtype: d };
    let sx = Matrix { cols: chunks, dtype: 8 };
    let reduce = single_wave(grid, |pid, r| {
        let (tr, tc) = grid.coords(pid);
        let rs = span(tr, br, rows);
        r.rect(input, &mx, rs, (0, cols), AccessMode::Read);
        r.rect(stats, &sx, rs, (tc, tc + 1), AccessMode::Write);
    });
    let normalize = single_wave(grid, |pid, r| {
        let (tr, tc) = grid.coords(pid);
        let rs = span(tr, br, rows);
        let cs = span(tc, chunk, cols);
        r.rect(stats, &sx, rs, (0, chunks), AccessMode::Read);
        r.rect(input, &mx, rs, cs, AccessMode::Read);
        r.rect(output, &mx, rs, cs, AccessMode::Write);
    });
    (l.buffers, vec![reduce, normalize])
}

fn layernorm(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let (rows, cols) = (spec.problem_dims[0], spec.problem_dims[1]);
    let (br, chunk) = (spec.block_dims[0], spec.block_dims[1]);
    let d = spec.dtype_bytes;
    let mut l = Layout::new();
    let input = l.add("in", rows * cols * d, BufferRole::Input);
    let weight = l.add("weight", cols * d, BufferRole::Input);
    let bias = l.add("bias", cols * d, BufferRole::Input);
    let output = l.add("out", rows * cols * d, OUT);
    let mx = Matrix { cols, dtype: d };
    let wave = single_wave(grid, |pid, r| {
        let (tr, tc) = grid.coords(pid);
        let rs = span(tr, br, rows);
        let cs = span(tc, chunk, cols);
        // Mean and variance over the full row, then normalize this chunk.
        r.rect(input, &mx, rs, (0, cols), AccessMode::Read);
        r.rect(input, &mx, rs, cs, AccessMode::Read);
        r.read(weight, cs.0 * d, (cs.1 - cs.0) * d);
        r.read(bias, cs.0 * d, (cs.1 - cs.0) * d);
        r.rect(output, &mx, rs, cs, AccessMode::Write);
    });
    (l.buffers, vec![wave])
}

fn stencil(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let (m, n) = (spec.problem_dims[0], spec.problem_dims[1]);
    let (bm, bn) = (spec.block_dims[0], spec.block_dims[1]);
    let d = spec.dtype_bytes;
    let mut l = Layout::new();
    let input = l.add("in", m * n * d, BufferRole::Input);
    let output = l.add("out", m * n * d, OUT);
    let mx = Matrix { cols: n, dtype: d };
    let wave = single_wave(grid, |pid, r| {
        let (tm, tn) = grid.coords(pid);
        let (r0, r1) = span(tm, bm, m);
        let (c0, c1) = span(tn, bn, n);
        if r0 > 0 {
            r.rect(input, &mx, (r0 - 1, r0), (c0, c1), AccessMode::Read);
        }
        for row in r0..r1 {
            r.rect(input, &mx, (row, row + 1), (c0, c1), AccessMode::Read);
            if c0 > 0 {
                r.read(input, mx.at(row, c0 - 1), d);
            }
            if c1 < n {
                r.read(input, mx.at(row, c1), d);
            }
        }
        if r1 < m {
            r.rect(input, &mx, (r1, r1 + 1), (c0, c1), AccessMode::Read);
        }
        r.rect(output, &mx, (r0, r1), (c0, c1), AccessMode::Write);
    });
    (l.buffers, vec![wave])
}

fn fdtd(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let (nx, ny) = (spec.problem_dims[0], spec.problem_dims[1]);
    let (bx, by) = (spec.block_dims[0], spec.block_dims[1]);
    let d = spec.dtype_bytes;
    let steps = spec.param("steps", 2);
    let role = BufferRole::Output { writes: steps as u32 };
    let mut l = Layout::new();
    let ex = l.add("ex", nx * ny * d, role);
    let ey = l.add("ey", nx * ny * d, role);
    let hz = l.add("hz", nx * ny * d, role);
    let fict = l.add("fict", steps * d, BufferRole::Input);
    let mx = Matrix { cols: ny, dtype: d };
    let mut waves = Vec::new();
    for t in 0..steps {
        // E-field update: ey needs hz from the row above, ex from the column left.
        waves.push(single_wave(grid, |pid, r| {
            let (tm, tn) = grid.coords(pid);
            let (r0, r1) = span(tm, bx, nx);
            let cs = span(tn, by, ny);
            for i in r0..r1 {
                if i == 0 {
                    r.read(fict, t * d, d);
                } else {
                    r.rect(hz, &mx, (i - 1, i), cs, AccessMode::Read);
                }
                r.rect(hz, &mx, (i, i + 1), cs, AccessMode::Read);
                r.rect(ey, &mx, (i, i + 1), cs, AccessMode::Read);
                r.rect(ey, &mx, (i, i + 1), cs, AccessMode::Write);
                if cs.0 > 0 {
                    r.read(hz, mx.at(i, cs.0 - 1), d);
                }
                r.rect(ex, &mx, (i, i + 1), cs, AccessMode::Read);
                r.rect(ex, &mx, (i, i + 1), cs, AccessMode::Write);
            }
        }));
        // H-field update: reads ex to the right and ey below.
        waves.push(single_wave(grid, |pid, r| {
            let (tm, tn) = grid.coords(pid);
            let (r0, r1) = span(tm, bx, nx);
            let cs = span(tn, by, ny);
            for i in r0..r1 {
                r.rect(ex, &mx, (i, i + 1), cs, AccessMode::Read);
                if cs.1 < ny {
                    r.read(ex, mx.at(i, cs.1), d);
                }
                r.rect(ey, &mx, (i, i + 1), cs, AccessMode::Read);
                if i + 1 < nx {
                    r.rect(ey, &mx, (i + 1, i + 2), cs, AccessMode::Read);
                }
                r.rect(hz, &mx, (i, i + 1), cs, AccessMode::Read);
                r.rect(hz, &mx, (i, i + 1), cs, AccessMode::Write);
            }
        }));
    }
    (l.buffers, waves)
}

fn smith_waterman(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let (na, nb) = (spec.problem_dims[0], spec.problem_dims[1]);
    let (ba, bb) = (spec.block_dims[0], spec.block_dims[1]);
    let d = spec.dtype_bytes;
    let mut l = Layout::new();
    let seq_a = l.add("seq_a", na, BufferRole::Input);
    let seq_b = l.add("seq_b", nb, BufferRole::Input);
    let score = l.add("H", na * nb * d, OUT);
    let mx = Matrix { cols: nb, dtype: d };
    let mut gen = |pid: u64, r: &mut Recs| {
        let (ti, tj) = grid.coords(pid);
        let (r0, r1) = span(ti, ba, na);
        let (c0, c1) = span(tj, bb, nb);
        r.read(seq_a, r0, r1 - r0);
        r.read(seq_b, c0, c1 - c0);
        if r0 > 0 {
            if c0 > 0 {
                r.read(score, mx.at(r0 - 1, c0 - 1), d);
            }
            r.rect(score, &mx, (r0 - 1, r0), (c0, c1), AccessMode::Read);
        }
        for row in r0..r1 {
            if c0 > 0 {
                r.read(score, mx.at(row, c0 - 1), d);
            }
            r.rect(score, &mx, (row, row + 1), (c0, c1), AccessMode::Write);
        }
    };
    let diagonals = grid.num_blocks_m + grid.num_blocks_n - 1;
    let waves = (0..diagonals)
        .map(|diag| {
            let members = (0..grid.total_blocks()).filter(|&p| {
                let (i, j) = grid.coords(p);
                i + j == diag
            });
            wave_of(members, &mut gen)
        })
        .collect();
    (l.buffers, waves)
}

/// Banded CSR: row `r` holds columns `r - band ..= r + band`, clipped.
fn spmv(spec: &KernelSpec, grid: &GridSpec) -> Generated {
    let n = spec.problem_dims[0];
    let per_block = spec.block_dims[0];
    let band = spec.param("band", 16);
    let d = spec.dtype_bytes;
    const IDX: u64 = 4;
    let cols_of = |r: u64| (r.saturating_sub(band), (r + band).min(n - 1));
    let mut row_ptr = Vec::with_capacity(n as usize + 1);
    row_ptr.push(0u64);
    for r in 0..n {
        let (lo, hi) = cols_of(r);
        row_ptr.push(row_ptr[r as usize] + hi - lo + 1);
    }
    let nnz = row_ptr[n as usize];
    let mut l = Layout::new();
    let ptr = l.add("row_ptr", (n + 1) * IDX, BufferRole::Input);
    let col_idx = l.add("col_idx", nnz * IDX, BufferRole::Input);
    let vals = l.add("vals", nnz * d, BufferRole::Input);
    let x = l.add("x", n * d, BufferRole::Input);
    let y = l.add("y", n * d, OUT);
    let wave = single_wave(grid, |pid, r| {
        let (r0, r1) = span(pid, per_block, n);
        for row in r0..r1 {
            let (lo, hi) = cols_of(row);
            let start = row_ptr[row as usize];
            let count = hi - lo + 1;
            r.read(ptr, row * IDX, 2 * IDX);
            r.read(col_idx, start * IDX, count * IDX);
            r.read(vals, start * d, count * d);
            for c in lo..=hi {
                r.read(x, c * d, d);
            }
            r.write(y, row * d, d);
        }
    });
    (l.buffers, vec![wave])
}

fn streaming(spec: &KernelSpec, grid: &GridSpec, inputs: &[&str], outputs: &[&str]) -> Generated {
    let n = spec.problem_dims[0];
    let per_block = spec.block_dims[0];
    let d = spec.dtype_bytes;
    let mut l = Layout::new();
    let ins: Vec<u32> = inputs
        .iter()
        .map(|name| l.add(name, n * d, BufferRole::Input))
        .collect();
    let outs: Vec<u32> = outputs.iter().map(|name| l.add(name, n * d, OUT)).collect();
    let wave = single_wave(grid, |pid, r| {
        let (s, e) = span(pid, per_block, n);
        for &b in &ins {
            r.read(b, s * d, (e - s) * d);
        }
        for &b in &outs {
            r.write(b, s * d, (e - s) * d);
        }
    });
    (l.buffers, vec![wave])
}

/// How far apart in the logical order the pids of a sharing group are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseDistance {
    /// All pids within one grid row of each other.
    Near,
    /// Spread over at most `num_xcds`-sized runs of rows; reachable by regrouping.
    Medium,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingShape {
    SameRow,
    SameColumn,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingGroup {
    pub pids: Vec<u64>,
    pub shared_bytes: u64,
    pub shape: SharingShape,
    pub distance: ReuseDistance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferLocality {
    pub buffer: String,
    pub touched_bytes: u64,
    /// Bytes touched by two or more distinct workgroups.
    pub shared_bytes: u64,
    pub group_count: usize,
    /// Largest groups first; truncated.
    pub groups: Vec<SharingGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalitySummary {
    pub kernel: String,
    pub grid: String,
    pub threshold_bytes: u64,
    pub buffers: Vec<BufferLocality>,
}

pub const DEFAULT_SHARE_THRESHOLD: u64 = 64;
pub const DEFAULT_MAX_GROUPS: usize = 8;

pub fn locality_summary(trace: &AccessTrace) -> LocalitySummary {
    locality_summary_with(trace, DEFAULT_SHARE_THRESHOLD, DEFAULT_MAX_GROUPS)
}

/// Sweeps each buffer's access intervals and groups bytes by the exact set
/// of workgroups touching them. Groups below `threshold_bytes` are dropped.
pub fn locality_summary_with(trace: &AccessTrace, threshold_bytes: u64, max_groups: usize) -> LocalitySummary {
    let mut per_buffer: Vec<Vec<(u64, u64, u64)>> = vec![Vec::new(); trace.buffers.len()];
    for wg in trace.waves.iter().flat_map(|w| &w.workgroups) {
        for r in &wg.records {
            per_buffer[r.buffer as usize].push((r.offset, r.offset + r.len, wg.pid));
        }
    }
    let buffers = trace
        .buffers
        .iter()
        .zip(per_buffer)
        .map(|(buf, intervals)| buffer_locality(trace, buf, intervals, threshold_bytes, max_groups))
        .collect();
    LocalitySummary {
        kernel: trace.kernel.describe(),
        grid: trace.grid.to_string(),
        threshold_bytes,
        buffers,
    }
}

fn buffer_locality(
    trace: &AccessTrace,
    buf: &BufferDesc,
    intervals: Vec<(u64, u64, u64)>,
    threshold: u64,
    max_groups: usize,
) -> BufferLocality {
    // Events: (position, is_start, pid). Ends sort before starts at equal positions.
    let mut events: Vec<(u64, bool, u64)> = Vec::with_capacity(intervals.len() * 2);
    for (s, e, pid) in intervals {
        events.push((s, true, pid));
        events.push((e, false, pid));
    }
    events.sort_unstable();
    let mut active: BTreeMap<u64, u32> = BTreeMap::new();
    let mut groups: HashMap<Vec<u64>, u64> = HashMap::new();
    let mut touched = 0u64;
    let mut shared = 0u64;
    let mut cursor = 0u64;
    let mut i = 0;
    while i < events.len() {
        let at = events[i].0;
        if at > cursor && !active.is_empty() {
            let len = at - cursor;
            touched += len;
            if active.len() >= 2 {
                shared += len;
                *groups.entry(active.keys().copied().collect()).or_default() += len;
            }
        }
        while i < events.len() && events[i].0 == at {
            let (_, start, pid) = events[i];
            if start {
                *active.entry(pid).or_default() += 1;
            } else if let Some(c) = active.get_mut(&pid) {
                *c -= 1;
                if *c == 0 {
                    active.remove(&pid);
                }
            }
            i += 1;
        }
        cursor = at;
    }
    let mut kept: Vec<(Vec<u64>, u64)> = groups.into_iter().filter(|(_, b)| *b >= threshold).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let group_count = kept.len();
    let groups = kept
        .into_iter()
        .take(max_groups)
        .map(|(pids, shared_bytes)| SharingGroup {
            shape: shape_of(trace, &pids),
            distance: distance_of(trace, &pids),
            pids,
            shared_bytes,
        })
        .collect();
    BufferLocality {
        buffer: buf.name.clone(),
        touched_bytes: touched,
        shared_bytes: shared,
        group_count,
        groups,
    }
}

fn shape_of(trace: &AccessTrace, pids: &[u64]) -> SharingShape {
    let tiles: BTreeSet<(u64, u64)> = pids.iter().map(|&p| trace.tile_of(p)).collect();
    let rows: BTreeSet<u64> = tiles.iter().map(|t| t.0).collect();
    let cols: BTreeSet<u64> = tiles.iter().map(|t| t.1).collect();
    if trace.grid.rank == 2 && rows.len() == 1 {
        SharingShape::SameRow
    } else if trace.grid.rank == 2 && cols.len() == 1 {
        SharingShape::SameColumn
    } else {
        SharingShape::Mixed
    }
}

fn distance_of(trace: &AccessTrace, pids: &[u64]) -> ReuseDistance {
    let spread = pids.last().unwrap_or(&0) - pids.first().unwrap_or(&0);
    let row = trace.grid.num_blocks_n;
    if spread < row.max(2) {
        ReuseDistance::Near
    } else if spread < row * 8 {
        ReuseDistance::Medium
    } else {
        ReuseDistance::Far
    }
}

impl LocalitySummary {
    /// Compact text rendering for prompts.
    pub fn render(&self) -> String {
        let mut out = format!("Kernel: {} ({})\n", self.kernel, self.grid);
        for b in &self.buffers {
            if b.shared_bytes == 0 {
                out.push_str(&format!(
                    "- {}: {} bytes touched, no bytes shared between workgroups\n",
                    b.buffer, b.touched_bytes
                ));
                continue;
            }
            out.push_str(&format!(
                "- {}: {} of {} touched bytes shared, {} sharing groups\n",
                b.buffer, b.shared_bytes, b.touched_bytes, b.group_count
            ));
            for g in &b.groups {
                out.push_str(&format!(
                    "    pids {} share {} bytes ({:?}, {:?})\n",
                    render_pids(&g.pids),
                    g.shared_bytes,
                    g.shape,
                    g.distance
                ));
            }
        }
        out
    }
}

fn render_pids(pids: &[u64]) -> String {
    const SHOWN: usize = 8;
    let head: Vec<String> = pids.iter().take(SHOWN).map(u64::to_string).collect();
    if pids.len() > SHOWN {
        format!("[{}, ... {} total]", head.join(", "), pids.len())
    } else {
        format!("[{}]", head.join(", "))
    }
}

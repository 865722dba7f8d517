//! Named swizzling patterns and their validation.
//!
//! A pattern maps a *launch* pid (the order in which the hardware hands out
//! workgroups) to a *logical* pid (the tile the workgroup computes). Under
//! round-robin dispatch the XCD a tile lands on is therefore
//! `remap⁻¹(logical) mod num_xcds`, which is what every co-location query
//! here computes from an enumerated inverse table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{default_xcd_assignment, ArchSpec};
use crate::dsl::{eval_expr, format_expr, lit, parse_expr, var, EvalEnv, EvalError, ParseError, SwizzleExpr, Var};

/// Largest grid `check_bijectivity` will enumerate unless told otherwise.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 24;

/// Stored offenders per category in a [`ValidationResult`]; counts stay exact.
const MAX_LISTED: usize = 64;

/// Launch grid of a kernel. Rank-1 grids have `num_blocks_n == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rank: u8,
    pub num_blocks_m: u64,
    pub num_blocks_n: u64,
    pub block_dims: Vec<u64>,
    pub problem_dims: Vec<u64>,
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

impl GridSpec {
    /// A 1-D grid of `blocks` unit blocks.
    pub fn linear(blocks: u64) -> Self {
        assert!(blocks > 0, "grid must have at least one block");
        GridSpec {
            rank: 1,
            num_blocks_m: blocks,
            num_blocks_n: 1,
            block_dims: vec![1],
            problem_dims: vec![blocks],
        }
    }

    /// A 2-D grid given directly in blocks.
    pub fn blocks_2d(num_blocks_m: u64, num_blocks_n: u64) -> Self {
        assert!(
            num_blocks_m > 0 && num_blocks_n > 0,
            "grid must have at least one block"
        );
        GridSpec {
            rank: 2,
            num_blocks_m,
            num_blocks_n,
            block_dims: vec![1, 1],
            problem_dims: vec![num_blocks_m, num_blocks_n],
        }
    }

    /// Ceiling-divided tile counts for a 1-D or 2-D problem.
    pub fn tiled(problem_dims: &[u64], block_dims: &[u64]) -> Self {
        assert_eq!(problem_dims.len(), block_dims.len());
        assert!(matches!(problem_dims.len(), 1 | 2));
        assert!(problem_dims.iter().chain(block_dims).all(|&d| d > 0));
        let m = ceil_div(problem_dims[0], block_dims[0]);
        let n = if problem_dims.len() == 2 {
            ceil_div(problem_dims[1], block_dims[1])
        } else {
            1
        };
        GridSpec {
            rank: problem_dims.len() as u8,
            num_blocks_m: m,
            num_blocks_n: n,
            block_dims: block_dims.to_vec(),
            problem_dims: problem_dims.to_vec(),
        }
    }

    pub fn total_blocks(&self) -> u64 {
        self.num_blocks_m * self.num_blocks_n
    }

    /// Row-major (m, n) coordinates of a linear pid.
    pub fn coords(&self, pid: u64) -> (u64, u64) {
        (pid / self.num_blocks_n, pid % self.num_blocks_n)
    }

    /// Environment for evaluating a pattern at one launch pid.
    pub fn env(&self, launch_pid: u64, num_xcds: u32) -> EvalEnv {
        let (m, n) = self.coords(launch_pid);
        EvalEnv::new()
            .with(Var::Pid, launch_pid)
            .with(Var::PidM, m)
            .with(Var::PidN, n)
            .with(Var::NumXcds, u64::from(num_xcds))
            .with(Var::NumBlocks, self.total_blocks())
            .with(Var::NumBlocksM, self.num_blocks_m)
            .with(Var::NumBlocksN, self.num_blocks_n)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rank == 1 {
            write!(f, "{} blocks", self.num_blocks_m)
        } else {
            write!(f, "{}x{} blocks", self.num_blocks_m, self.num_blocks_n)
        }
    }
}

/// Either one expression for the logical pid, or one per output coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Mapping {
    Linear(SwizzleExpr),
    Grid { m: SwizzleExpr, n: SwizzleExpr },
}

impl Mapping {
    pub fn exprs(&self) -> Vec<&SwizzleExpr> {
        match self {
            Mapping::Linear(e) => vec![e],
            Mapping::Grid { m, n } => vec![m, n],
        }
    }

    pub fn texts(&self) -> Vec<String> {
        self.exprs().into_iter().map(format_expr).collect()
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self, PatternError> {
        let parse = |s: &S| parse_expr(s.as_ref()).map_err(PatternError::Parse);
        match texts {
            [one] => Ok(Mapping::Linear(parse(one)?)),
            [m, n] => Ok(Mapping::Grid {
                m: parse(m)?,
                n: parse(n)?,
            }),
            _ => Err(PatternError::BadDocument(format!(
                "expected one or two expressions, got {}",
                texts.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Grids the pattern cannot permute are refused outright.
    RejectGrid,
    /// Launch pids outside the canonical region map to themselves.
    IdentityOnGrid,
}

/// Grids a pattern is willing to run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridConstraint {
    Any,
    /// Pair-swap of adjacent bits is only closed on `4^k` blocks.
    PowerOfFour,
}

impl GridConstraint {
    fn check(self, grid: &GridSpec) -> Result<(), String> {
        let t = grid.total_blocks();
        match self {
            GridConstraint::Any => Ok(()),
            GridConstraint::PowerOfFour => {
                if t.is_power_of_two() && t.trailing_zeros().is_multiple_of(2) && t <= 1 << 32 {
                    Ok(())
                } else {
                    Err(format!(
                        "{t} blocks is not a power of four; the bit swap would leave the grid"
                    ))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PatternDoc", into = "PatternDoc")]
pub struct SwizzlePattern {
    pub name: String,
    pub params: BTreeMap<String, u64>,
    pub mapping: Mapping,
    pub fallback: Fallback,
    pub constraint: GridConstraint,
}

/// Wire form of a pattern: name, parameters and expression text(s).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternDoc {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, u64>,
    pub exprs: Vec<String>,
    #[serde(default = "default_fallback")]
    pub fallback: Fallback,
    #[serde(default = "default_constraint")]
    pub constraint: GridConstraint,
}

fn default_fallback() -> Fallback {
    Fallback::RejectGrid
}

fn default_constraint() -> GridConstraint {
    GridConstraint::Any
}

impl TryFrom<PatternDoc> for SwizzlePattern {
    type Error = PatternError;

    fn try_from(doc: PatternDoc) -> Result<Self, Self::Error> {
        Ok(SwizzlePattern {
            mapping: Mapping::from_texts(&doc.exprs)?,
            name: doc.name,
            params: doc.params,
            fallback: doc.fallback,
            constraint: doc.constraint,
        })
    }
}

impl From<SwizzlePattern> for PatternDoc {
    fn from(p: SwizzlePattern) -> Self {
        PatternDoc {
            exprs: p.mapping.texts(),
            name: p.name,
            params: p.params,
            fallback: p.fallback,
            constraint: p.constraint,
        }
    }
}

impl SwizzlePattern {
    /// A user- or model-supplied pattern with no fallback behaviour.
    pub fn custom(name: impl Into<String>, mapping: Mapping) -> Self {
        SwizzlePattern {
            name: name.into(),
            params: BTreeMap::new(),
            mapping,
            fallback: Fallback::RejectGrid,
            constraint: GridConstraint::Any,
        }
    }

    pub fn from_expr_text(name: impl Into<String>, text: &str) -> Result<Self, PatternError> {
        Ok(Self::custom(
            name,
            Mapping::Linear(parse_expr(text).map_err(PatternError::Parse)?),
        ))
    }

    pub fn identity() -> Self {
        BuiltinPattern::Identity.build()
    }

    /// Same mapping, ignoring names and parameters.
    pub fn same_mapping(&self, other: &SwizzlePattern) -> bool {
        self.mapping == other.mapping
    }

    pub fn expression_text(&self) -> String {
        self.mapping.texts().join("\n")
    }

    pub fn accepts(&self, grid: &GridSpec) -> Result<(), PatternError> {
        self.constraint
            .check(grid)
            .map_err(|reason| PatternError::GridRejected {
                pattern: self.name.clone(),
                reason,
            })
    }

    /// Evaluates the mapping; `None` means a 2-D image fell outside the grid.
    fn image(&self, launch_pid: u64, grid: &GridSpec, num_xcds: u32) -> Result<Option<u64>, EvalError> {
        let env = grid.env(launch_pid, num_xcds);
        match &self.mapping {
            Mapping::Linear(e) => eval_expr(e, &env).map(Some),
            Mapping::Grid { m, n } => {
                let m = eval_expr(m, &env)?;
                let n = eval_expr(n, &env)?;
                if m < grid.num_blocks_m && n < grid.num_blocks_n {
                    Ok(Some(m * grid.num_blocks_n + n))
                } else {
                    Ok(None)
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("unknown pattern `{0}`")]
    UnknownPattern(String),
    #[error("pattern `{pattern}` rejects this grid: {reason}")]
    GridRejected { pattern: String, reason: String },
    #[error("launch pid {pid} is outside a grid of {total} blocks")]
    PidOutOfGrid { pid: u64, total: u64 },
    #[error("evaluating at pid {pid}: {source}")]
    Eval { pid: u64, source: EvalError },
    #[error("pid {pid} maps to {image}, outside the grid")]
    ImageOutOfRange { pid: u64, image: String },
    #[error("pattern `{pattern}` is not a bijection on this grid: {summary}")]
    NotBijective { pattern: String, summary: String },
    #[error("grid of {total} blocks exceeds the enumeration cap of {cap}")]
    TooLarge { total: u64, cap: u64 },
    #[error("not a permutation: {0}")]
    BadPermutation(String),
    #[error(transparent)]
    Parse(ParseError),
    #[error("bad pattern document: {0}")]
    BadDocument(String),
}

/// The built-in pattern library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinPattern {
    Identity,
    GemmContiguous,
    LayernormRowgroup,
    SoftmaxRowgroup,
    FdtdStripe,
    StencilGroup,
    TransposeBand,
    NaiveRowmajor,
    BitwiseLowbit,
}

impl BuiltinPattern {
    pub const ALL: [BuiltinPattern; 9] = [
        BuiltinPattern::Identity,
        BuiltinPattern::GemmContiguous,
        BuiltinPattern::LayernormRowgroup,
        BuiltinPattern::SoftmaxRowgroup,
        BuiltinPattern::FdtdStripe,
        BuiltinPattern::StencilGroup,
        BuiltinPattern::TransposeBand,
        BuiltinPattern::NaiveRowmajor,
        BuiltinPattern::BitwiseLowbit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinPattern::Identity => "identity",
            BuiltinPattern::GemmContiguous => "gemm_contiguous",
            BuiltinPattern::LayernormRowgroup => "layernorm_rowgroup",
            BuiltinPattern::SoftmaxRowgroup => "softmax_rowgroup",
            BuiltinPattern::FdtdStripe => "fdtd_stripe",
            BuiltinPattern::StencilGroup => "stencil_group",
            BuiltinPattern::TransposeBand => "transpose_band",
            BuiltinPattern::NaiveRowmajor => "naive_rowmajor",
            BuiltinPattern::BitwiseLowbit => "bitwise_lowbit",
        }
    }

    /// The pattern's canonical expressions, without checking the grid.
    pub fn build(self) -> SwizzlePattern {
        let (mapping, fallback, constraint) = match self {
            BuiltinPattern::Identity => (
                Mapping::Linear(var(Var::Pid)),
                Fallback::IdentityOnGrid,
                GridConstraint::Any,
            ),
            // Contiguous runs of logical pids per XCD. On grids divisible by
            // the XCD count this is `(pid % X) * (T / X) + pid // X`; the
            // `min` term keeps it a permutation otherwise.
            BuiltinPattern::GemmContiguous | BuiltinPattern::StencilGroup | BuiltinPattern::TransposeBand => (
                Mapping::Linear(contiguous_expr()),
                Fallback::IdentityOnGrid,
                GridConstraint::Any,
            ),
            BuiltinPattern::LayernormRowgroup | BuiltinPattern::SoftmaxRowgroup => (
                Mapping::Linear(row_group_expr()),
                Fallback::IdentityOnGrid,
                GridConstraint::Any,
            ),
            BuiltinPattern::FdtdStripe => (
                Mapping::Linear(column_stripe_expr()),
                Fallback::IdentityOnGrid,
                GridConstraint::Any,
            ),
            BuiltinPattern::NaiveRowmajor => (
                Mapping::Grid {
                    m: var(Var::Pid).floor_div(var(Var::NumBlocksN)),
                    n: var(Var::Pid) % var(Var::NumBlocksN),
                },
                Fallback::IdentityOnGrid,
                GridConstraint::Any,
            ),
            BuiltinPattern::BitwiseLowbit => {
                let mask = || lit(0x5555_5555);
                let pid = || var(Var::Pid);
                (
                    Mapping::Linear(((pid() >> lit(1)) & mask()) | ((pid() & mask()) << lit(1))),
                    Fallback::RejectGrid,
                    GridConstraint::PowerOfFour,
                )
            }
        };
        SwizzlePattern {
            name: self.name().to_string(),
            params: BTreeMap::new(),
            mapping,
            fallback,
            constraint,
        }
    }
}

impl FromStr for BuiltinPattern {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BuiltinPattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PatternError::UnknownPattern(s.to_string()))
    }
}

impl fmt::Display for BuiltinPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn contiguous_expr() -> SwizzleExpr {
    let x = || var(Var::NumXcds);
    let t = || var(Var::NumBlocks);
    let lane = || var(Var::Pid) % x();
    lane() * t().floor_div(x()) + lane().min(t() % x()) + var(Var::Pid).floor_div(x())
}

/// `ideal` below `full`, `pid` from `full` on: `ideal*(1-b) + pid*b` with
/// `b = min(1, (pid + 1) // (full + 1))`.
fn blend_with_identity(ideal: SwizzleExpr, identity: SwizzleExpr, full: SwizzleExpr) -> SwizzleExpr {
    let b = || lit(1).min((var(Var::Pid) + lit(1)).floor_div(full.clone() + lit(1)));
    ideal * (lit(1) - b()) + identity * b()
}

/// Groups of `group_len` consecutive positions dealt round-robin to XCDs, so
/// that every group lands whole on one XCD. Groups beyond the last complete
/// round of `num_xcds` groups keep their launch position.
fn dealt_groups(group_len: SwizzleExpr, groups: SwizzleExpr) -> SwizzleExpr {
    let x = || var(Var::NumXcds);
    let slot = || var(Var::Pid).floor_div(x());
    let lane = || var(Var::Pid) % x();
    let g = || group_len.clone();
    let ideal = (slot().floor_div(g()) * x() + lane()) * g() + slot() % g();
    let full = groups.floor_div(x()) * x() * g();
    blend_with_identity(ideal, var(Var::Pid), full)
}

fn row_group_expr() -> SwizzleExpr {
    dealt_groups(var(Var::NumBlocksN), var(Var::NumBlocksM))
}

fn column_stripe_expr() -> SwizzleExpr {
    // Positions are column-major; convert back to a row-major logical pid.
    let rows = || var(Var::NumBlocksM);
    let p = dealt_groups(rows(), var(Var::NumBlocksN));
    (p.clone() % rows()) * var(Var::NumBlocksN) + p.floor_div(rows())
}

/// Order in which tiles are walked before being cut into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// Row-major positions, groups of `chunk` tiles.
    Linear,
    /// Row-major positions, groups of `chunk` whole rows.
    Row,
    /// Column-major positions, groups of `chunk` tiles.
    Column,
}

impl GroupAxis {
    pub fn name(self) -> &'static str {
        match self {
            GroupAxis::Linear => "linear",
            GroupAxis::Row => "row",
            GroupAxis::Column => "column",
        }
    }
}

/// Groups of consecutive tiles along `axis`, dealt one group per XCD in
/// turn, with grid-specific constants. Tiles past the last complete round
/// of groups keep their launch position.
pub fn chunked_pattern(axis: GroupAxis, chunk: u64, grid: &GridSpec) -> SwizzlePattern {
    let total = grid.total_blocks();
    let len = match axis {
        GroupAxis::Row => chunk * grid.num_blocks_n,
        _ => chunk,
    }
    .clamp(1, total);
    let dealt = dealt_groups(lit(len), lit(total / len));
    let expr = match axis {
        GroupAxis::Column => {
            let rows = || lit(grid.num_blocks_m);
            (dealt.clone() % rows()) * lit(grid.num_blocks_n) + dealt.floor_div(rows())
        }
        _ => dealt,
    };
    let mut p = SwizzlePattern::custom(format!("{}_chunk{chunk}", axis.name()), Mapping::Linear(expr));
    p.params.insert("chunk".into(), chunk);
    p.fallback = Fallback::IdentityOnGrid;
    p
}

/// Looks up a built-in by name and applies its grid policy.
pub fn builtin_pattern(name: &str, grid: &GridSpec, _arch: &ArchSpec) -> Result<SwizzlePattern, PatternError> {
    let pattern = name.parse::<BuiltinPattern>()?.build();
    pattern.accepts(grid)?;
    Ok(pattern)
}

/// Logical pid computed by launch pid `launch_pid`.
pub fn remap(pattern: &SwizzlePattern, launch_pid: u64, grid: &GridSpec, arch: &ArchSpec) -> Result<u64, PatternError> {
    let total = grid.total_blocks();
    if launch_pid >= total {
        return Err(PatternError::PidOutOfGrid { pid: launch_pid, total });
    }
    match pattern.image(launch_pid, grid, arch.num_xcds) {
        Ok(Some(v)) if v < total => Ok(v),
        Ok(Some(v)) => Err(PatternError::ImageOutOfRange {
            pid: launch_pid,
            image: v.to_string(),
        }),
        Ok(None) => Err(PatternError::ImageOutOfRange {
            pid: launch_pid,
            image: "a coordinate outside the grid".into(),
        }),
        Err(source) => Err(PatternError::Eval {
            pid: launch_pid,
            source,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub pid_a: u64,
    pub pid_b: u64,
    pub image: u64,
}

/// Outcome of exhaustively enumerating a pattern over a grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub bijective: bool,
    pub total_blocks: u64,
    /// Launch pids whose image is outside the grid (or failed to evaluate).
    pub out_of_range: Vec<u64>,
    pub out_of_range_count: u64,
    pub collisions: Vec<Collision>,
    pub collision_count: u64,
    pub coverage_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_error: Option<String>,
}

impl ValidationResult {
    pub fn summary(&self) -> String {
        if self.bijective {
            return format!("bijective over {} blocks", self.total_blocks);
        }
        let mut parts = Vec::new();
        if self.out_of_range_count > 0 {
            parts.push(format!(
                "{} out-of-range pids (first: {:?})",
                self.out_of_range_count,
                &self.out_of_range[..self.out_of_range.len().min(8)]
            ));
        }
        if self.collision_count > 0 {
            let c = &self.collisions[0];
            parts.push(format!(
                "{} collisions (first: pids {} and {} both map to {})",
                self.collision_count, c.pid_a, c.pid_b, c.image
            ));
        }
        if !self.coverage_ok {
            parts.push("not every logical pid is covered".into());
        }
        if let Some(e) = &self.eval_error {
            parts.push(format!("evaluation error: {e}"));
        }
        parts.join("; ")
    }
}

const NO_IMAGE: u64 = u64::MAX;
const EVAL_FAILED: u64 = u64::MAX - 1;

fn enumerate_images(pattern: &SwizzlePattern, grid: &GridSpec, num_xcds: u32) -> Vec<u64> {
    (0..grid.total_blocks() as usize)
        .into_par_iter()
        .with_min_len(4096)
        .map(|pid| pid as u64)
        .map(|pid| match pattern.image(pid, grid, num_xcds) {
            Ok(Some(v)) if v < NO_IMAGE - 1 => v,
            Ok(_) => NO_IMAGE,
            Err(_) => EVAL_FAILED,
        })
        .collect()
}

pub fn check_bijectivity(
    pattern: &SwizzlePattern,
    grid: &GridSpec,
    arch: &ArchSpec,
) -> Result<ValidationResult, PatternError> {
    check_bijectivity_capped(pattern, grid, arch, DEFAULT_ENUMERATION_CAP)
}

/// Enumerates every launch pid. Grids above `cap` are an error, never sampled.
pub fn check_bijectivity_capped(
    pattern: &SwizzlePattern,
    grid: &GridSpec,
    arch: &ArchSpec,
    cap: u64,
) -> Result<ValidationResult, PatternError> {
    let total = grid.total_blocks();
    if total > cap {
        return Err(PatternError::TooLarge { total, cap });
    }
    let images = enumerate_images(pattern, grid, arch.num_xcds);
    let mut first_preimage = vec![NO_IMAGE; total as usize];
    let mut out_of_range = Vec::new();
    let mut out_of_range_count = 0u64;
    let mut collisions = Vec::new();
    let mut collision_count = 0u64;
    let mut eval_error = None;
    for (pid, &img) in images.iter().enumerate() {
        let pid = pid as u64;
        if img >= total {
            if img == EVAL_FAILED && eval_error.is_none() {
                eval_error = pattern
                    .image(pid, grid, arch.num_xcds)
                    .err()
                    .map(|e| format!("pid {pid}: {e}"));
            }
            out_of_range_count += 1;
            if out_of_range.len() < MAX_LISTED {
                out_of_range.push(pid);
            }
            continue;
        }
        let slot = &mut first_preimage[img as usize];
        if *slot == NO_IMAGE {
            *slot = pid;
        } else {
            collision_count += 1;
            if collisions.len() < MAX_LISTED {
                collisions.push(Collision {
                    pid_a: *slot,
                    pid_b: pid,
                    image: img,
                });
            }
        }
    }
    let coverage_ok = first_preimage.iter().all(|&p| p != NO_IMAGE);
    Ok(ValidationResult {
        bijective: out_of_range_count == 0 && collision_count == 0 && coverage_ok,
        total_blocks: total,
        out_of_range,
        out_of_range_count,
        collisions,
        collision_count,
        coverage_ok,
        eval_error,
    })
}

/// Materialized launch → logical permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapTable {
    logical_of_launch: Vec<u32>,
}

impl RemapTable {
    pub fn identity(total: usize) -> Self {
        RemapTable {
            logical_of_launch: (0..total as u32).collect(),
        }
    }

    /// Validates and enumerates a pattern.
    pub fn build(pattern: &SwizzlePattern, grid: &GridSpec, arch: &ArchSpec) -> Result<Self, PatternError> {
        pattern.accepts(grid)?;
        if grid.total_blocks() > u64::from(u32::MAX) {
            return Err(PatternError::TooLarge {
                total: grid.total_blocks(),
                cap: u64::from(u32::MAX),
            });
        }
        let v = check_bijectivity(pattern, grid, arch)?;
        if !v.bijective {
            return Err(PatternError::NotBijective {
                pattern: pattern.name.clone(),
                summary: v.summary(),
            });
        }
        let images = enumerate_images(pattern, grid, arch.num_xcds);
        Ok(RemapTable {
            logical_of_launch: images.into_iter().map(|v| v as u32).collect(),
        })
    }

    pub fn from_permutation(logical_of_launch: Vec<u32>) -> Result<Self, PatternError> {
        let n = logical_of_launch.len();
        let mut seen = vec![false; n];
        for (pid, &img) in logical_of_launch.iter().enumerate() {
            let img = img as usize;
            if img >= n {
                return Err(PatternError::BadPermutation(format!("pid {pid} maps to {img} >= {n}")));
            }
            if std::mem::replace(&mut seen[img], true) {
                return Err(PatternError::BadPermutation(format!("{img} is hit twice")));
            }
        }
        Ok(RemapTable { logical_of_launch })
    }

    pub fn len(&self) -> usize {
        self.logical_of_launch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logical_of_launch.is_empty()
    }

    pub fn logical(&self, launch_pid: usize) -> u32 {
        self.logical_of_launch[launch_pid]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.logical_of_launch
    }

    /// Logical → launch.
    pub fn inverse(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.len()];
        for (launch, &logical) in self.logical_of_launch.iter().enumerate() {
            inv[logical as usize] = launch as u32;
        }
        inv
    }
}

/// Which XCD ends up computing each logical tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XcdPlacement {
    pub num_xcds: u32,
    xcd_of_logical: Vec<u32>,
}

impl XcdPlacement {
    pub fn new(pattern: &SwizzlePattern, grid: &GridSpec, arch: &ArchSpec) -> Result<Self, PatternError> {
        let table = RemapTable::build(pattern, grid, arch)?;
        Ok(Self::from_table(&table, arch))
    }

    pub fn from_table(table: &RemapTable, arch: &ArchSpec) -> Self {
        XcdPlacement {
            num_xcds: arch.num_xcds,
            xcd_of_logical: table
                .inverse()
                .into_iter()
                .map(|launch| default_xcd_assignment(u64::from(launch), arch))
                .collect(),
        }
    }

    pub fn xcd(&self, logical_pid: u64) -> u32 {
        self.xcd_of_logical[logical_pid as usize]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.xcd_of_logical
    }
}

pub fn xcd_of_logical(
    pattern: &SwizzlePattern,
    logical_pid: u64,
    grid: &GridSpec,
    arch: &ArchSpec,
) -> Result<u32, PatternError> {
    let total = grid.total_blocks();
    if logical_pid >= total {
        return Err(PatternError::PidOutOfGrid {
            pid: logical_pid,
            total,
        });
    }
    Ok(XcdPlacement::new(pattern, grid, arch)?.xcd(logical_pid))
}

/// How logical tiles are grouped for co-location statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Tiles sharing a grid row.
    Rows,
    /// Tiles sharing a grid column.
    Columns,
    /// Consecutive logical pids in runs of this length.
    Runs(u64),
}

impl Grouping {
    fn group_of(self, grid: &GridSpec, logical: u64) -> u64 {
        match self {
            Grouping::Rows => logical / grid.num_blocks_n,
            Grouping::Columns => logical % grid.num_blocks_n,
            Grouping::Runs(len) => logical / len.max(1),
        }
    }

    fn group_count(self, grid: &GridSpec) -> u64 {
        match self {
            Grouping::Rows => grid.num_blocks_m,
            Grouping::Columns => grid.num_blocks_n,
            Grouping::Runs(len) => grid.total_blocks().div_ceil(len.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupColocation {
    pub group: u64,
    pub size: u64,
    pub dominant_xcd: u32,
    /// Fraction of the group's tiles on its dominant XCD.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColocationStats {
    pub per_xcd_counts: Vec<u64>,
    pub groups: Vec<GroupColocation>,
    pub mean_ratio: f64,
    pub fully_colocated_groups: u64,
}

pub fn colocation_stats(
    pattern: &SwizzlePattern,
    grid: &GridSpec,
    arch: &ArchSpec,
    grouping: Grouping,
) -> Result<ColocationStats, PatternError> {
    let placement = XcdPlacement::new(pattern, grid, arch)?;
    Ok(colocation_from_placement(&placement, grid, grouping))
}

pub fn colocation_from_placement(placement: &XcdPlacement, grid: &GridSpec, grouping: Grouping) -> ColocationStats {
    let x = placement.num_xcds as usize;
    let mut per_xcd_counts = vec![0u64; x];
    let ngroups = grouping.group_count(grid) as usize;
    let mut counts = vec![0u64; ngroups * x];
    for (logical, &xcd) in placement.as_slice().iter().enumerate() {
        per_xcd_counts[xcd as usize] += 1;
        let g = grouping.group_of(grid, logical as u64) as usize;
        counts[g * x + xcd as usize] += 1;
    }
    let groups: Vec<GroupColocation> = counts
        .chunks(x)
        .enumerate()
        .map(|(group, row)| {
            let size: u64 = row.iter().sum();
            let (dominant_xcd, best) =
                row.iter()
                    .enumerate()
                    .fold((0usize, 0u64), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
            GroupColocation {
                group: group as u64,
                size,
                dominant_xcd: dominant_xcd as u32,
                ratio: if size == 0 { 1.0 } else { best as f64 / size as f64 },
            }
        })
        .collect();
    let fully = groups.iter().filter(|g| g.ratio == 1.0).count() as u64;
    let mean_ratio = if groups.is_empty() {
        1.0
    } else {
        groups.iter().map(|g| g.ratio).sum::<f64>() / groups.len() as f64
    };
    ColocationStats {
        per_xcd_counts,
        groups,
        mean_ratio,
        fully_colocated_groups: fully,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(x: u32) -> ArchSpec {
        ArchSpec::mi300x_like().with_num_xcds(x)
    }

    fn remap_all(p: &SwizzlePattern, grid: &GridSpec, a: &ArchSpec) -> Vec<u64> {
        (0..grid.total_blocks())
            .map(|i| remap(p, i, grid, a).unwrap())
            .collect()
    }

    #[test]
    fn gemm_examples() {
        let g = GridSpec::linear(16);
        let a = arch(4);
        let p = builtin_pattern("gemm_contiguous", &g, &a).unwrap();
        assert_eq!(remap(&p, 0, &g, &a).unwrap(), 0);
        assert_eq!(remap(&p, 1, &g, &a).unwrap(), 4);
        assert_eq!(remap(&p, 6, &g, &a).unwrap(), 9);
        assert!(check_bijectivity(&p, &g, &a).unwrap().bijective);
        for t in 0..4 {
            assert_eq!(xcd_of_logical(&p, t, &g, &a).unwrap(), 0);
        }
        assert_eq!(xcd_of_logical(&p, 4, &g, &a).unwrap(), 1);
    }

    #[test]
    fn identity_everywhere() {
        for (m, n) in [(1, 1), (3, 7), (10, 1), (16, 16)] {
            let g = GridSpec::blocks_2d(m, n);
            let a = arch(8);
            let p = builtin_pattern("identity", &g, &a).unwrap();
            assert_eq!(remap_all(&p, &g, &a), (0..m * n).collect::<Vec<_>>());
            assert!(check_bijectivity(&p, &g, &a).unwrap().bijective);
        }
        let g = GridSpec::linear(64);
        assert_eq!(xcd_of_logical(&SwizzlePattern::identity(), 5, &g, &arch(8)).unwrap(), 5);
    }

    #[test]
    fn bitwise_rejects_and_fails_on_ten_blocks() {
        let g = GridSpec::linear(10);
        let a = arch(8);
        assert!(matches!(
            builtin_pattern("bitwise_lowbit", &g, &a),
            Err(PatternError::GridRejected { .. })
        ));
        let raw = BuiltinPattern::BitwiseLowbit.build();
        let v = check_bijectivity(&raw, &g, &a).unwrap();
        assert!(!v.bijective);
        assert!(v.out_of_range.contains(&5));
        assert!(!v.coverage_ok);

        let g16 = GridSpec::linear(16);
        let p = builtin_pattern("bitwise_lowbit", &g16, &a).unwrap();
        assert_eq!(remap(&p, 9, &g16, &a).unwrap(), 6);
        assert!(check_bijectivity(&p, &g16, &a).unwrap().bijective);
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(
            builtin_pattern("zigzag", &GridSpec::linear(4), &arch(8)),
            Err(PatternError::UnknownPattern(_))
        ));
    }

    #[test]
    fn remap_errors() {
        let g = GridSpec::linear(10);
        let a = arch(8);
        let p = SwizzlePattern::identity();
        assert!(matches!(remap(&p, 10, &g, &a), Err(PatternError::PidOutOfGrid { .. })));
        let bad = SwizzlePattern::from_expr_text("bad", "pid - 5").unwrap();
        assert!(matches!(remap(&bad, 2, &g, &a), Err(PatternError::Eval { pid: 2, .. })));
        let v = check_bijectivity(&bad, &g, &a).unwrap();
        assert_eq!(v.out_of_range_count, 5);
        assert!(v.eval_error.is_some());
    }

    #[test]
    fn collisions_are_reported() {
        let g = GridSpec::linear(8);
        let p = SwizzlePattern::from_expr_text("halve", "pid // 2").unwrap();
        let v = check_bijectivity(&p, &g, &arch(4)).unwrap();
        assert!(!v.bijective);
        assert_eq!(v.collision_count, 4);
        assert_eq!(
            v.collisions[0],
            Collision {
                pid_a: 0,
                pid_b: 1,
                image: 0
            }
        );
        assert!(!v.coverage_ok);
    }

    #[test]
    fn enumeration_cap_is_an_error() {
        let g = GridSpec::linear(100);
        assert!(matches!(
            check_bijectivity_capped(&SwizzlePattern::identity(), &g, &arch(8), 99),
            Err(PatternError::TooLarge { total: 100, cap: 99 })
        ));
    }

    #[test]
    fn grid_mapping_out_of_grid_coordinates() {
        // Width one short of the real grid: images wrap past the row end.
        let g = GridSpec::blocks_2d(3, 5);
        let p = SwizzlePattern::custom(
            "floor-width",
            Mapping::Grid {
                m: parse_expr("pid // 4").unwrap(),
                n: parse_expr("pid % 4").unwrap(),
            },
        );
        let v = check_bijectivity(&p, &g, &arch(8)).unwrap();
        assert!(!v.bijective);
        assert!(v.out_of_range.contains(&12));
    }

    #[test]
    fn naive_rowmajor_is_identity() {
        let g = GridSpec::blocks_2d(5, 7);
        let a = arch(8);
        let p = builtin_pattern("naive_rowmajor", &g, &a).unwrap();
        assert_eq!(remap_all(&p, &g, &a), (0..35).collect::<Vec<_>>());
    }

    #[test]
    fn colocation_examples() {
        let a = arch(4);
        let g = GridSpec::blocks_2d(4, 4);
        let id = colocation_stats(&SwizzlePattern::identity(), &g, &a, Grouping::Rows).unwrap();
        assert_eq!(id.per_xcd_counts, vec![4, 4, 4, 4]);
        assert_eq!(id.fully_colocated_groups, 0);
        let gemm = builtin_pattern("gemm_contiguous", &g, &a).unwrap();
        let s = colocation_stats(&gemm, &g, &a, Grouping::Rows).unwrap();
        assert_eq!(s.per_xcd_counts, vec![4, 4, 4, 4]);
        assert_eq!(s.fully_colocated_groups, 4);
        assert_eq!(s.mean_ratio, 1.0);

        let a8 = arch(8);
        let g = GridSpec::blocks_2d(8, 4);
        let soft = builtin_pattern("softmax_rowgroup", &g, &a8).unwrap();
        let s = colocation_stats(&soft, &g, &a8, Grouping::Rows).unwrap();
        assert!(s.groups.iter().all(|grp| grp.ratio == 1.0 && grp.size == 4));
        let xcds: std::collections::BTreeSet<u32> = s.groups.iter().map(|g| g.dominant_xcd).collect();
        assert_eq!(xcds.len(), 8);
    }

    #[test]
    fn fdtd_stripes_share_columns() {
        let a = arch(8);
        let g = GridSpec::blocks_2d(6, 16);
        let p = builtin_pattern("fdtd_stripe", &g, &a).unwrap();
        let s = colocation_stats(&p, &g, &a, Grouping::Columns).unwrap();
        assert_eq!(s.fully_colocated_groups, 16);
    }

    #[test]
    fn rowgroup_tail_rows_keep_launch_order() {
        let a = arch(8);
        let g = GridSpec::blocks_2d(10, 3);
        let p = builtin_pattern("softmax_rowgroup", &g, &a).unwrap();
        assert!(check_bijectivity(&p, &g, &a).unwrap().bijective);
        let s = colocation_stats(&p, &g, &a, Grouping::Rows).unwrap();
        assert!(s.groups[..8].iter().all(|grp| grp.ratio == 1.0));
        for pid in 24..30 {
            assert_eq!(remap(&p, pid, &g, &a).unwrap(), pid);
        }
    }

    #[test]
    fn pattern_document_round_trip() {
        let g = GridSpec::blocks_2d(4, 4);
        for b in BuiltinPattern::ALL {
            let p = b.build();
            let json = serde_json::to_string(&p).unwrap();
            let back: SwizzlePattern = serde_json::from_str(&json).unwrap();
            assert_eq!(back, p);
            if b != BuiltinPattern::BitwiseLowbit {
                assert!(back.accepts(&g).is_ok());
            }
        }
        let bad = r#"{"name":"x","exprs":["pid +"]}"#;
        assert!(serde_json::from_str::<SwizzlePattern>(bad).is_err());
    }

    #[test]
    fn chunked_patterns_are_bijective() {
        let a = arch(8);
        for (m, n) in [(1, 1), (7, 3), (16, 16), (13, 1), (5, 40)] {
            let g = GridSpec::blocks_2d(m, n);
            for axis in [GroupAxis::Linear, GroupAxis::Row, GroupAxis::Column] {
                for chunk in [1, 2, 3, 8, 64, 1000] {
                    let p = chunked_pattern(axis, chunk, &g);
                    assert!(
                        check_bijectivity(&p, &g, &a).unwrap().bijective,
                        "{axis:?} {chunk} {m}x{n}"
                    );
                }
            }
        }
        let g = GridSpec::linear(64);
        let p = chunked_pattern(GroupAxis::Linear, 8, &g);
        let gemm = builtin_pattern("gemm_contiguous", &g, &a).unwrap();
        assert_eq!(
            RemapTable::build(&p, &g, &a).unwrap(),
            RemapTable::build(&gemm, &g, &a).unwrap()
        );
    }

    #[test]
    fn permutation_table_checks() {
        assert!(RemapTable::from_permutation(vec![2, 0, 1]).is_ok());
        assert!(RemapTable::from_permutation(vec![0, 0, 1]).is_err());
        assert!(RemapTable::from_permutation(vec![0, 3, 1]).is_err());
        let t = RemapTable::from_permutation(vec![2, 0, 1]).unwrap();
        assert_eq!(t.inverse(), vec![1, 2, 0]);
    }
}

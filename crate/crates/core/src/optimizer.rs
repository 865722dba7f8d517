//! Propose, validate, simulate, record, rank.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchSpec;
use crate::client::{ClientError, CompletionClient};
use crate::context::{build_prompt, parse_proposal, DEFAULT_GOAL};
use crate::patterns::{
    check_bijectivity, chunked_pattern, GridSpec, GroupAxis, PatternError, RemapTable, SwizzlePattern, ValidationResult,
};
use crate::sim::{report_order, simulate_table, BottleneckReport, ExecParams, SimError};
use crate::traces::{generate_trace, locality_summary, KernelSpec, LocalitySummary, TraceError};

pub const DEFAULT_MAX_ITERS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// 0 is the unswizzled baseline.
    pub iteration: u32,
    /// Absent when the proposer failed.
    pub pattern: Option<SwizzlePattern>,
    pub diff_summary: String,
    pub validation: Option<ValidationResult>,
    /// Present only for valid candidates.
    pub report: Option<BottleneckReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Earlier iteration with the same expression, whose results were reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<u32>,
}

impl HistoryEntry {
    pub fn is_valid(&self) -> bool {
        self.report.is_some()
    }

    pub fn hit_rate(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.l2_hit_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub iteration: u32,
    pub current_hit_rate: Option<f64>,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best: HistoryEntry,
    pub progression: Vec<ProgressPoint>,
    /// Proposals attempted, not counting the baseline.
    pub iterations_run: u32,
    pub history: Vec<HistoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early: Option<String>,
}

/// What a proposer sees.
pub struct ProposalContext<'a> {
    pub kernel: &'a KernelSpec,
    pub grid: &'a GridSpec,
    pub locality: &'a LocalitySummary,
    pub arch: &'a ArchSpec,
    pub history: &'a [HistoryEntry],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub pattern: SwizzlePattern,
    pub critique: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposerError {
    /// No further candidates; ends the loop.
    #[error("no more candidates: {0}")]
    Exhausted(String),
    /// This round failed; recorded, and the loop continues.
    #[error("proposer failed: {0}")]
    Failed(String),
}

pub trait Proposer {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<Proposal, ProposerError>;
}

pub trait HistorySink {
    fn append(&mut self, entry: &HistoryEntry) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink(pub Vec<HistoryEntry>);

impl HistorySink for MemorySink {
    fn append(&mut self, entry: &HistoryEntry) -> io::Result<()> {
        self.0.push(entry.clone());
        Ok(())
    }
}

/// Append-only JSON Lines file, flushed after every entry.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(JsonlSink {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl HistorySink for JsonlSink {
    fn append(&mut self, entry: &HistoryEntry) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_history(path: &Path) -> io::Result<Vec<HistoryEntry>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(io::Error::from))
        .collect()
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("writing history: {0}")]
    Sink(#[source] io::Error),
    #[error("history holds no validated entry")]
    NoValidEntry,
}

/// Best validated entry; ties go to the earlier entry.
pub fn rank_history(entries: &[HistoryEntry]) -> Result<&HistoryEntry, OptimizeError> {
    entries
        .iter()
        .filter(|e| e.is_valid())
        .min_by(|a, b| report_order(a.report.as_ref().unwrap(), b.report.as_ref().unwrap()))
        .ok_or(OptimizeError::NoValidEntry)
}

fn diff_summary(best: Option<&HistoryEntry>, candidate: &SwizzlePattern) -> String {
    match best.and_then(|b| b.pattern.as_ref().map(|p| (b, p))) {
        Some((b, p)) => format!(
            "vs best (iteration {}, {}): `{}` -> `{}`",
            b.iteration,
            p.name,
            p.expression_text().replace('\n', "; "),
            candidate.expression_text().replace('\n', "; ")
        ),
        None => format!("new expression `{}`", candidate.expression_text()),
    }
}

pub fn optimize(
    spec: &KernelSpec,
    arch: &ArchSpec,
    proposer: &mut dyn Proposer,
    max_iters: u32,
    sink: &mut dyn HistorySink,
) -> Result<OptimizationResult, OptimizeError> {
    optimize_with(spec, arch, &ExecParams::default(), proposer, max_iters, sink)
}

pub fn optimize_with(
    spec: &KernelSpec,
    arch: &ArchSpec,
    exec: &ExecParams,
    proposer: &mut dyn Proposer,
    max_iters: u32,
    sink: &mut dyn HistorySink,
) -> Result<OptimizationResult, OptimizeError> {
    arch.validate().map_err(SimError::from)?;
    let trace = generate_trace(spec)?;
    trace.check_coverage()?;
    let grid = trace.grid.clone();
    let locality = locality_summary(&trace);

    let identity = SwizzlePattern::identity();
    let baseline = HistoryEntry {
        iteration: 0,
        diff_summary: "baseline, no remapping".into(),
        validation: Some(check_bijectivity(&identity, &grid, arch)?),
        report: Some(simulate_table(
            &trace,
            &RemapTable::identity(grid.total_blocks() as usize),
            &identity.name,
            arch,
            exec,
        )?),
        pattern: Some(identity),
        critique: None,
        error: None,
        duplicate_of: None,
    };
    sink.append(&baseline).map_err(OptimizeError::Sink)?;
    let mut history = vec![baseline];
    let mut stopped_early = None;

    for iteration in 1..=max_iters {
        let ctx = ProposalContext {
            kernel: spec,
            grid: &grid,
            locality: &locality,
            arch,
            history: &history,
        };
        let proposal = match proposer.propose(&ctx) {
            Ok(p) => p,
            Err(ProposerError::Exhausted(why)) => {
                stopped_early = Some(why);
                break;
            }
            Err(ProposerError::Failed(why)) => {
                let entry = HistoryEntry {
                    iteration,
                    pattern: None,
                    diff_summary: String::new(),
                    validation: None,
                    report: None,
                    critique: None,
                    error: Some(why),
                    duplicate_of: None,
                };
                sink.append(&entry).map_err(OptimizeError::Sink)?;
                history.push(entry);
                continue;
            }
        };
        let best = rank_history(&history).ok();
        let mut entry = HistoryEntry {
            iteration,
            diff_summary: diff_summary(best, &proposal.pattern),
            validation: None,
            report: None,
            critique: proposal.critique,
            error: None,
            duplicate_of: None,
            pattern: None,
        };
        if let Some(prev) = history
            .iter()
            .find(|e| e.pattern.as_ref().is_some_and(|p| p.same_mapping(&proposal.pattern)))
        {
            entry.duplicate_of = Some(prev.iteration);
            entry.validation = prev.validation.clone();
            entry.report = prev.report.clone().map(|mut r| {
                r.pattern = proposal.pattern.name.clone();
                r
            });
            entry.error = prev.error.clone();
        } else {
            evaluate(&mut entry, &proposal.pattern, &trace, arch, exec);
        }
        entry.pattern = Some(proposal.pattern);
        sink.append(&entry).map_err(OptimizeError::Sink)?;
        history.push(entry);
    }

    let mut best_so_far = f64::NEG_INFINITY;
    let progression = history
        .iter()
        .map(|e| {
            let current = e.hit_rate();
            if let Some(r) = current {
                best_so_far = best_so_far.max(r);
            }
            ProgressPoint {
                iteration: e.iteration,
                current_hit_rate: current,
                best_so_far,
            }
        })
        .collect();
    Ok(OptimizationResult {
        best: rank_history(&history)?.clone(),
        progression,
        iterations_run: history.len() as u32 - 1,
        history,
        stopped_early,
    })
}

/// Validates and, when the candidate is a permutation, simulates it.
fn evaluate(
    entry: &mut HistoryEntry,
    pattern: &SwizzlePattern,
    trace: &crate::traces::AccessTrace,
    arch: &ArchSpec,
    exec: &ExecParams,
) {
    let validation = match check_bijectivity(pattern, &trace.grid, arch) {
        Ok(v) => v,
        Err(e) => {
            entry.error = Some(e.to_string());
            return;
        }
    };
    let accepted = pattern.accepts(&trace.grid);
    let valid = validation.bijective && accepted.is_ok();
    entry.validation = Some(validation);
    if let Err(e) = accepted {
        entry.error = Some(e.to_string());
    }
    if !valid {
        return;
    }
    match RemapTable::build(pattern, &trace.grid, arch)
        .map_err(SimError::from)
        .and_then(|t| simulate_table(trace, &t, &pattern.name, arch, exec))
    {
        Ok(r) => entry.report = Some(r),
        Err(e) => entry.error = Some(e.to_string()),
    }
}

/// CSV with columns `iteration,current_hit_rate,best_so_far`; invalid rounds leave the rate empty.
pub fn write_progression_csv<W: Write>(result: &OptimizationResult, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "current_hit_rate", "best_so_far"])?;
    for p in &result.progression {
        w.write_record([
            p.iteration.to_string(),
            p.current_hit_rate.map(|r| r.to_string()).unwrap_or_default(),
            p.best_so_far.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic sweep over a family of chunked groupings.
///
/// Members are ordered by axis (linear, row, column), then chunk size
/// (`total / num_xcds` first, then powers of two, largest first), then XCD
/// stride (1, then `num_xcds`). With stride `num_xcds`, that many consecutive
/// groups land on one XCD. Members whose permutation matches an earlier
/// attempt are skipped.
#[derive(Debug, Default)]
pub struct SearchProposer;

impl SearchProposer {
    pub fn new() -> Self {
        SearchProposer
    }

    /// The whole family for a grid, before de-duplication.
    pub fn family(grid: &GridSpec, arch: &ArchSpec) -> Vec<SwizzlePattern> {
        let total = grid.total_blocks();
        let x = u64::from(arch.num_xcds);
        let per_xcd = (total / x).max(1);
        let mut chunks = vec![per_xcd];
        let mut c = if per_xcd.is_power_of_two() {
            per_xcd / 2
        } else {
            1 << per_xcd.ilog2()
        };
        while c >= 1 {
            chunks.push(c);
            c /= 2;
        }
        let mut out = Vec::new();
        for axis in [GroupAxis::Linear, GroupAxis::Row, GroupAxis::Column] {
            if axis != GroupAxis::Linear && grid.rank == 1 {
                continue;
            }
            let axis_chunks: Vec<u64> = match axis {
                GroupAxis::Row => chunks.iter().map(|&c| c.min(grid.num_blocks_m)).collect(),
                _ => chunks.clone(),
            };
            for &chunk in &axis_chunks {
                for stride in [1, x] {
                    let mut p = chunked_pattern(axis, chunk * stride, grid);
                    p.name = format!("search_{}_c{chunk}_s{stride}", axis.name());
                    p.params.insert("chunk".into(), chunk);
                    p.params.insert("stride".into(), stride);
                    out.push(p);
                }
            }
        }
        out
    }
}

impl Proposer for SearchProposer {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<Proposal, ProposerError> {
        let tried: Vec<RemapTable> = ctx
            .history
            .iter()
            .filter_map(|e| e.pattern.as_ref())
            .filter_map(|p| RemapTable::build(p, ctx.grid, ctx.arch).ok())
            .collect();
        for p in Self::family(ctx.grid, ctx.arch) {
            if ctx
                .history
                .iter()
                .any(|e| e.pattern.as_ref().is_some_and(|h| h.same_mapping(&p)))
            {
                continue;
            }
            let Ok(table) = RemapTable::build(&p, ctx.grid, ctx.arch) else {
                continue;
            };
            if tried.contains(&table) {
                continue;
            }
            return Ok(Proposal {
                pattern: p,
                critique: None,
            });
        }
        Err(ProposerError::Exhausted("search family exhausted".into()))
    }
}

/// Hands out a fixed list of patterns in order.
#[derive(Debug, Clone)]
pub struct ReplayProposer {
    patterns: Vec<SwizzlePattern>,
    next: usize,
}

impl ReplayProposer {
    pub fn new(patterns: Vec<SwizzlePattern>) -> Self {
        ReplayProposer { patterns, next: 0 }
    }

    /// One pattern document per line.
    pub fn from_jsonl(path: &Path) -> io::Result<Self> {
        let patterns = BufReader::new(File::open(path)?)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|l| serde_json::from_str(&l?).map_err(io::Error::from))
            .collect::<io::Result<Vec<SwizzlePattern>>>()?;
        Ok(Self::new(patterns))
    }
}

impl Proposer for ReplayProposer {
    fn propose(&mut self, _: &ProposalContext<'_>) -> Result<Proposal, ProposerError> {
        let p = self.patterns.get(self.next).cloned().ok_or_else(|| {
            ProposerError::Exhausted(format!("replay list of {} patterns used up", self.patterns.len()))
        })?;
        self.next += 1;
        Ok(Proposal {
            pattern: p,
            critique: None,
        })
    }
}

pub const DEFAULT_PARSE_RETRIES: u32 = 2;

/// Builds the prompt, asks the client, parses the answer.
pub struct LlmProposer<C: CompletionClient> {
    client: C,
    goal: String,
    parse_retries: u32,
    /// Complete prompts sent so far, for inspection.
    pub prompts: Vec<String>,
}

impl<C: CompletionClient> LlmProposer<C> {
    pub fn new(client: C) -> Self {
        LlmProposer {
            client,
            goal: DEFAULT_GOAL.to_string(),
            parse_retries: DEFAULT_PARSE_RETRIES,
            prompts: Vec::new(),
        }
    }

    pub fn with_goal(mut self, goal: impl Into<String>) -> Self {
        self.goal = goal.into();
        self
    }

    pub fn with_parse_retries(mut self, retries: u32) -> Self {
        self.parse_retries = retries;
        self
    }

    pub fn client(&self) -> &C {
        &self.client
    }
}

/// The prompt for the next round.
pub fn proposal_prompt(ctx: &ProposalContext<'_>, goal: &str) -> String {
    build_prompt(&ctx.kernel.describe(), ctx.locality, ctx.history, ctx.arch, goal).render()
}

/// The prompt after a response that could not be parsed.
pub fn retry_prompt(prompt: &str, error: &str) -> String {
    format!("{prompt}\n## Parse error\nYour previous answer could not be used: {error}\nReply again using the required sections.\n")
}

impl<C: CompletionClient> Proposer for LlmProposer<C> {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<Proposal, ProposerError> {
        let base = proposal_prompt(ctx, &self.goal);
        let mut prompt = base.clone();
        let mut last_error = String::new();
        for _ in 0..=self.parse_retries {
            self.prompts.push(prompt.clone());
            let text = self
                .client
                .complete(&prompt)
                .map_err(|e: ClientError| ProposerError::Failed(e.to_string()))?;
            match parse_proposal(&text) {
                Ok(record) => {
                    let mapping = record.mapping.clone().expect("parsed proposals carry a mapping");
                    let critique = (!record.critiques.is_empty()).then(|| {
                        record
                            .critiques
                            .iter()
                            .map(|(i, c)| format!("iteration {i}: {c}"))
                            .collect::<Vec<_>>()
                            .join("; ")
                    });
                    let pattern = SwizzlePattern::custom(format!("llm_iter{}", ctx.history.len()), mapping);
                    return Ok(Proposal { pattern, critique });
                }
                Err(e) => {
                    last_error = e.to_string();
                    prompt = retry_prompt(&base, &last_error);
                }
            }
        }
        Err(ProposerError::Failed(format!(
            "no parseable proposal after {} attempts: {last_error}",
            self.parse_retries + 1
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::BuiltinPattern;
    use crate::traces::KernelKind;

    fn small_gemm() -> KernelSpec {
        KernelSpec::default_for(KernelKind::Gemm).with_size(256)
    }

    fn valid_entry(iteration: u32, rate: f64, name: &str) -> HistoryEntry {
        HistoryEntry {
            iteration,
            pattern: Some(SwizzlePattern::identity()),
            diff_summary: String::new(),
            validation: None,
            report: Some(BottleneckReport {
                kernel: "k".into(),
                pattern: name.into(),
                num_xcds: 1,
                accesses: 100,
                hits: (rate * 100.0) as u64,
                misses: 100 - (rate * 100.0) as u64,
                l2_hit_rate: rate,
                per_xcd: vec![],
                unique_lines_touched: 10,
            }),
            critique: None,
            error: None,
            duplicate_of: None,
        }
    }

    #[test]
    fn rank_examples() {
        let a = valid_entry(0, 0.50, "a");
        let b = valid_entry(1, 0.65, "b");
        assert_eq!(rank_history(&[a.clone(), b.clone()]).unwrap().iteration, 1);
        let mut invalid = valid_entry(2, 0.9, "c");
        invalid.report = None;
        let low = valid_entry(3, 0.4, "d");
        assert_eq!(rank_history(&[invalid.clone(), low]).unwrap().iteration, 3);
        assert_eq!(rank_history(std::slice::from_ref(&a)).unwrap().iteration, 0);
        assert!(matches!(rank_history(&[invalid]), Err(OptimizeError::NoValidEntry)));
    }

    #[test]
    fn zero_iterations_returns_baseline() {
        let mut sink = MemorySink::default();
        let r = optimize(
            &small_gemm(),
            &ArchSpec::mi300x_like(),
            &mut SearchProposer,
            0,
            &mut sink,
        )
        .unwrap();
        assert_eq!(r.best.iteration, 0);
        assert_eq!(r.best.pattern.as_ref().unwrap().name, "identity");
        assert_eq!(sink.0.len(), 1);
        assert_eq!(r.iterations_run, 0);
    }

    #[test]
    fn search_family_order_and_exhaustion() {
        let arch = ArchSpec::mi300x_like();
        let grid = GridSpec::blocks_2d(4, 4);
        let family = SearchProposer::family(&grid, &arch);
        assert_eq!(family[0].name, "search_linear_c2_s1");
        let spec = KernelSpec::default_for(KernelKind::Gemm).with_size(256);
        let trace = generate_trace(&spec).unwrap();
        let loc = locality_summary(&trace);
        let mut history = vec![valid_entry(0, 0.1, "identity")];
        let mut seen = Vec::new();
        loop {
            let ctx = ProposalContext {
                kernel: &spec,
                grid: &grid,
                locality: &loc,
                arch: &arch,
                history: &history,
            };
            match SearchProposer.propose(&ctx) {
                Ok(p) => {
                    let mut e = valid_entry(history.len() as u32, 0.1, &p.pattern.name);
                    seen.push(p.pattern.name.clone());
                    e.pattern = Some(p.pattern);
                    history.push(e);
                }
                Err(ProposerError::Exhausted(_)) => break,
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(seen[0], "search_linear_c2_s1");
        assert!(seen.len() >= 2);
        let tables: Vec<RemapTable> = history[1..]
            .iter()
            .map(|e| RemapTable::build(e.pattern.as_ref().unwrap(), &grid, &arch).unwrap())
            .collect();
        for (i, t) in tables.iter().enumerate() {
            assert!(!tables[..i].contains(t));
            assert_ne!(t, &RemapTable::identity(16));
        }
    }

    #[test]
    fn search_improves_gemm() {
        let mut sink = MemorySink::default();
        let r = optimize(
            &small_gemm(),
            &ArchSpec::mi300x_like(),
            &mut SearchProposer,
            3,
            &mut sink,
        )
        .unwrap();
        assert_eq!(r.history.len(), 4);
        assert!(r.best.hit_rate().unwrap() >= r.history[0].hit_rate().unwrap());
        assert!(r.progression.windows(2).all(|w| w[0].best_so_far <= w[1].best_so_far));
    }

    #[test]
    fn replay_sequence_and_csv() {
        let mut proposer = ReplayProposer::new(vec![
            SwizzlePattern::identity(),
            BuiltinPattern::BitwiseLowbit.build(),
            BuiltinPattern::GemmContiguous.build(),
        ]);
        let spec = KernelSpec::default_for(KernelKind::Gemm).with_size(128);
        let mut sink = MemorySink::default();
        let r = optimize(&spec, &ArchSpec::mi300x_like(), &mut proposer, 5, &mut sink).unwrap();
        assert_eq!(r.iterations_run, 3);
        assert!(r.stopped_early.is_some());
        assert_eq!(r.history[1].duplicate_of, Some(0));
        // 2x2 grid is a power of four, so the bit swap is valid here.
        assert!(r.history[2].report.is_some());
        let mut csv = Vec::new();
        write_progression_csv(&r, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,current_hit_rate,best_so_far\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn jsonl_sink_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let mut sink = JsonlSink::create(&path).unwrap();
        let r = optimize(
            &small_gemm(),
            &ArchSpec::mi300x_like(),
            &mut SearchProposer,
            2,
            &mut sink,
        )
        .unwrap();
        assert_eq!(read_history(&path).unwrap(), r.history);
    }

    /// Answers from a list; an empty list reports exhaustion.
    struct Canned(Vec<&'static str>);

    impl CompletionClient for Canned {
        fn complete(&mut self, _: &str) -> Result<String, ClientError> {
            if self.0.is_empty() {
                return Err(ClientError::FixtureExhausted(0));
            }
            Ok(self.0.remove(0).to_string())
        }
    }

    const GOOD: &str = "REASONING: group tiles\nFINAL_EXPRESSION:\n```\n(pid % num_xcds) * (num_blocks // num_xcds) + pid // num_xcds\n```\n";
    const BAD: &str = "REASONING: oops\nFINAL_EXPRESSION:\n```\npid +* 2\n```\n";

    fn llm_context<R>(f: impl FnOnce(&ProposalContext<'_>) -> R) -> R {
        let spec = small_gemm();
        let trace = generate_trace(&spec).unwrap();
        let loc = locality_summary(&trace);
        let arch = ArchSpec::mi300x_like();
        let history = vec![valid_entry(0, 0.5, "identity")];
        f(&ProposalContext {
            kernel: &spec,
            grid: &trace.grid,
            locality: &loc,
            arch: &arch,
            history: &history,
        })
    }

    #[test]
    fn llm_proposal_parses() {
        let mut p = LlmProposer::new(Canned(vec![GOOD]));
        let got = llm_context(|ctx| p.propose(ctx)).unwrap();
        let want = SwizzlePattern::from_expr_text("w", "(pid % num_xcds) * (num_blocks // num_xcds) + pid // num_xcds")
            .unwrap();
        assert!(got.pattern.same_mapping(&want));
        assert_eq!(p.prompts.len(), 1);
    }

    #[test]
    fn llm_retries_after_parse_error() {
        let mut p = LlmProposer::new(Canned(vec![BAD, GOOD]));
        assert!(llm_context(|ctx| p.propose(ctx)).is_ok());
        assert_eq!(p.prompts.len(), 2);
        assert!(p.prompts[1].contains("## Parse error"));
        assert!(p.prompts[1].starts_with(&p.prompts[0]));
    }

    #[test]
    fn llm_failures() {
        let mut p = LlmProposer::new(Canned(vec![]));
        assert!(matches!(
            llm_context(|ctx| p.propose(ctx)),
            Err(ProposerError::Failed(_))
        ));
        let mut p = LlmProposer::new(Canned(vec![BAD, BAD, BAD])).with_parse_retries(2);
        assert!(matches!(
            llm_context(|ctx| p.propose(ctx)),
            Err(ProposerError::Failed(_))
        ));
        assert_eq!(p.prompts.len(), 3);
    }

    #[test]
    fn proposer_failure_is_recorded_and_the_loop_continues() {
        let mut p = LlmProposer::new(Canned(vec![GOOD]));
        let mut sink = MemorySink::default();
        let r = optimize(&small_gemm(), &ArchSpec::mi300x_like(), &mut p, 3, &mut sink).unwrap();
        assert_eq!(r.history.len(), 4);
        assert!(r.history[1].report.is_some());
        assert!(r.history[2].error.is_some() && r.history[2].pattern.is_none());
        assert!(r.history[3].error.is_some());
        assert!(r.stopped_early.is_none());
    }
}

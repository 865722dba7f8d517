//! Prompt assembly, proposal parsing and profiler-log ingestion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchSpec;
use crate::dsl::{parse_expr, ParseError};
use crate::optimizer::HistoryEntry;
use crate::patterns::Mapping;
use crate::sim::BottleneckReport;
use crate::traces::LocalitySummary;

/// Authored default objective; callers may supply their own.
pub const DEFAULT_GOAL: &str = "Propose a new remapping of launch pids to logical pids that raises the overall L2 hit rate. \
Tiles that read the same data should end up on the same XCD, while every XCD still receives an equal share of the grid. \
The mapping must be a bijection on the grid for every problem size, not only the one shown.";

const OUTPUT_FORMAT: &str = "Answer with these sections, each header on its own line:
REASONING: your analysis of the access pattern and the scheduling policy
CRITIQUES: a JSON object mapping each previous iteration number to why it fell short
NEW_APPROACH: the idea behind the new mapping
RATIONALE: why it should improve the L2 hit rate
FINAL_EXPRESSION: a fenced code block holding one expression for the new pid,
or two lines `pid_m = ...` and `pid_n = ...` for a 2-D mapping.
Expressions use integers, + - * // % << >> & |, min(a, b), max(a, b), parentheses and the names
pid, pid_m, pid_n, num_xcds, num_blocks, num_blocks_m, num_blocks_n.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub original: String,
    pub bottleneck: String,
    pub memory_analysis: String,
    pub history: String,
    pub arch: String,
    pub scheduling: String,
    pub goal: String,
}

impl PromptContext {
    /// The full prompt, blocks in fixed order.
    pub fn render(&self) -> String {
        let blocks = [
            ("Kernel", &self.original),
            ("Bottleneck", &self.bottleneck),
            ("Memory analysis", &self.memory_analysis),
            ("Previous attempts", &self.history),
            ("Architecture", &self.arch),
            ("Scheduling", &self.scheduling),
            ("Goal", &self.goal),
        ];
        let mut out = String::new();
        for (title, body) in blocks {
            let _ = writeln!(out, "## {title}\n{}\n", body.trim_end());
        }
        out
    }
}

fn report_digest(r: &BottleneckReport) -> String {
    let per: Vec<String> = r.per_xcd.iter().map(|x| format!("{:.2}", x.hit_rate * 100.0)).collect();
    format!(
        "L2 hit rate {:.2}% (per-XCD %: {})",
        r.l2_hit_rate * 100.0,
        per.join(", ")
    )
}

fn current_best(history: &[HistoryEntry]) -> Option<&HistoryEntry> {
    crate::optimizer::rank_history(history).ok()
}

pub fn arch_line(arch: &ArchSpec) -> String {
    format!(
        "Target GPU: {}. It has {} XCDs; each XCD has {} CUs and a {} MB L2 cache.",
        arch.name,
        arch.num_xcds,
        arch.cus_per_xcd,
        format_megabytes(arch.l2_megabytes())
    )
}

fn format_megabytes(mb: f64) -> String {
    if mb.fract() == 0.0 {
        format!("{mb:.0}")
    } else {
        format!("{mb:.2}")
    }
}

pub fn scheduling_line(arch: &ArchSpec) -> String {
    format!(
        "Workgroup dispatch policy: {} (launch pid i runs on XCD i mod {}).",
        arch.dispatch.describe(),
        arch.num_xcds
    )
}

/// Assembles the prompt. Iteration 0 of `history` is the unswizzled baseline.
pub fn build_prompt(
    kernel_summary: &str,
    locality: &LocalitySummary,
    history: &[HistoryEntry],
    arch: &ArchSpec,
    goal: &str,
) -> PromptContext {
    let bottleneck = match (history.first().and_then(|e| e.report.as_ref()), current_best(history)) {
        (Some(base), Some(best)) if best.iteration != 0 => format!(
            "Metric: L2 hit rate.\nBaseline (no remapping): {}\nBest so far (iteration {}): {}",
            report_digest(base),
            best.iteration,
            report_digest(best.report.as_ref().expect("ranked entries carry reports"))
        ),
        (Some(base), _) => format!("Metric: L2 hit rate.\nBaseline (no remapping): {}", report_digest(base)),
        (None, _) => "Metric: L2 hit rate. No measurements yet.".to_string(),
    };
    PromptContext {
        original: kernel_summary.to_string(),
        bottleneck,
        memory_analysis: locality.render(),
        history: history_block(history),
        arch: arch_line(arch),
        scheduling: scheduling_line(arch),
        goal: format!("{}\n\n{}", goal.trim_end(), OUTPUT_FORMAT),
    }
}

fn history_block(history: &[HistoryEntry]) -> String {
    let attempts: Vec<&HistoryEntry> = history.iter().filter(|e| e.iteration > 0).collect();
    if attempts.is_empty() {
        return "No prior attempts.".to_string();
    }
    let mut out = String::from("Every expression below has been tried; do not propose any of them again.\n");
    for e in attempts {
        let _ = writeln!(out, "Iteration {}:", e.iteration);
        match &e.pattern {
            Some(p) => {
                let _ = writeln!(out, "  pattern: {}", p.name);
                for line in p.mapping.texts() {
                    let _ = writeln!(out, "  expression: {line}");
                }
            }
            None => {
                let _ = writeln!(out, "  no pattern produced");
            }
        }
        if !e.diff_summary.is_empty() {
            let _ = writeln!(out, "  change: {}", e.diff_summary);
        }
        match (&e.validation, &e.report) {
            (_, Some(r)) => {
                let _ = writeln!(out, "  result: {}", report_digest(r));
            }
            (Some(v), None) => {
                let _ = writeln!(out, "  result: rejected, {}", v.summary());
            }
            (None, None) => {
                let _ = writeln!(
                    out,
                    "  result: failed, {}",
                    e.error.as_deref().unwrap_or("unknown error")
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub reasoning: String,
    pub critiques: BTreeMap<u32, String>,
    pub new_approach: String,
    pub rationale: String,
    /// Fenced block contents as written.
    pub final_expression: String,
    #[serde(skip)]
    pub mapping: Option<Mapping>,
}

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("no fenced FINAL_EXPRESSION block found")]
    MissingExpression,
    #[error("final expression `{text}` does not parse: {source}")]
    Parse { text: String, source: ParseError },
    #[error("final expression block must hold one or two lines, found {0}")]
    LineCount(usize),
}

const HEADERS: [&str; 5] = [
    "REASONING",
    "CRITIQUES",
    "NEW_APPROACH",
    "RATIONALE",
    "FINAL_EXPRESSION",
];

/// Splits `HEADER:` style sections; text before the first header is ignored.
fn sections(text: &str) -> BTreeMap<&'static str, String> {
    let mut out: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for line in text.lines() {
        let stripped = line.trim_start_matches(['#', '*', ' ']);
        let header = HEADERS.iter().find(|h| {
            stripped.starts_with(*h)
                && stripped[h.len()..]
                    .trim_start_matches('*')
                    .chars()
                    .next()
                    .is_none_or(|c| c == ':' || c.is_whitespace())
        });
        if let Some(h) = header {
            current = Some(h);
            let rest = stripped[h.len()..]
                .trim_start_matches('*')
                .trim_start_matches(':')
                .trim();
            let entry = out.entry(h).or_default();
            if !rest.is_empty() {
                entry.push_str(rest);
                entry.push('\n');
            }
        } else if let Some(h) = current {
            let entry = out.entry(h).or_default();
            entry.push_str(line);
            entry.push('\n');
        }
    }
    out
}

fn first_fence(text: &str) -> Option<Vec<&str>> {
    let mut inside = false;
    let mut lines = Vec::new();
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            if inside {
                return Some(lines);
            }
            inside = true;
        } else if inside {
            lines.push(line);
        }
    }
    None
}

/// Drops an `ident =` prefix (assignment, not comparison).
fn strip_assignment(line: &str) -> (Option<&str>, &str) {
    if let Some((lhs, rhs)) = line.split_once('=') {
        let lhs = lhs.trim();
        if !rhs.starts_with('=') && !lhs.is_empty() && lhs.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return (Some(lhs), rhs.trim());
        }
    }
    (None, line.trim())
}

fn parse_line(text: &str) -> Result<crate::dsl::SwizzleExpr, ProposalError> {
    parse_expr(text).map_err(|source| ProposalError::Parse {
        text: text.to_string(),
        source,
    })
}

fn parse_critiques(text: &str) -> BTreeMap<u32, String> {
    let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(text.trim()) else {
        return BTreeMap::new();
    };
    map.into_iter()
        .filter_map(|(k, v)| {
            let digits: String = k.chars().filter(char::is_ascii_digit).collect();
            let text = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            digits.parse().ok().map(|i| (i, text))
        })
        .collect()
}

pub fn parse_proposal(text: &str) -> Result<ProposalRecord, ProposalError> {
    let secs = sections(text);
    let get = |h: &str| secs.get(h).map(|s| s.trim().to_string()).unwrap_or_default();
    let block = secs
        .get("FINAL_EXPRESSION")
        .and_then(|s| first_fence(s))
        .ok_or(ProposalError::MissingExpression)?;
    let lines: Vec<&str> = block
        .into_iter()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let mapping = match lines.as_slice() {
        [] => return Err(ProposalError::MissingExpression),
        [one] => Mapping::Linear(parse_line(strip_assignment(one).1)?),
        [a, b] => {
            let (la, ea) = strip_assignment(a);
            let (lb, eb) = strip_assignment(b);
            let (m, n) = if la == Some("pid_n") || lb == Some("pid_m") {
                (eb, ea)
            } else {
                (ea, eb)
            };
            Mapping::Grid {
                m: parse_line(m)?,
                n: parse_line(n)?,
            }
        }
        more => return Err(ProposalError::LineCount(more.len())),
    };
    Ok(ProposalRecord {
        reasoning: get("REASONING"),
        critiques: parse_critiques(&get("CRITIQUES")),
        new_approach: get("NEW_APPROACH"),
        rationale: get("RATIONALE"),
        final_expression: lines.join("\n"),
        mapping: Some(mapping),
    })
}

/// Renders a proposal in the format `parse_proposal` reads.
pub fn render_proposal(record: &ProposalRecord) -> String {
    let critiques = serde_json::to_string(
        &record
            .critiques
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect::<BTreeMap<_, _>>(),
    )
    .expect("string map serializes");
    format!(
        "REASONING: {}\nCRITIQUES: {}\nNEW_APPROACH: {}\nRATIONALE: {}\nFINAL_EXPRESSION:\n```\n{}\n```\n",
        record.reasoning, critiques, record.new_approach, record.rationale, record.final_expression
    )
}

#[derive(Debug, Error)]
pub enum ProfilerLogError {
    #[error("malformed profiler log: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("corrupt profiler log: {0}")]
    Corrupt(String),
}

const RATE_TOLERANCE: f64 = 1e-9;

fn check_rate(what: &str, rate: f64, hits: u64, accesses: u64) -> Result<(), ProfilerLogError> {
    let expected = if accesses == 0 {
        0.0
    } else {
        hits as f64 / accesses as f64
    };
    if !(0.0..=1.0).contains(&rate) || (rate - expected).abs() > RATE_TOLERANCE {
        return Err(ProfilerLogError::Corrupt(format!(
            "{what} hit rate {rate} disagrees with {hits}/{accesses}"
        )));
    }
    Ok(())
}

/// Reads a report document and checks its arithmetic.
pub fn parse_profiler_log(document: &str) -> Result<BottleneckReport, ProfilerLogError> {
    let r: BottleneckReport = serde_json::from_str(document)?;
    let corrupt = |m: String| Err(ProfilerLogError::Corrupt(m));
    if r.hits + r.misses != r.accesses {
        return corrupt(format!(
            "hits {} + misses {} != accesses {}",
            r.hits, r.misses, r.accesses
        ));
    }
    check_rate("overall", r.l2_hit_rate, r.hits, r.accesses)?;
    if !r.per_xcd.is_empty() {
        if r.per_xcd.len() != r.num_xcds as usize {
            return corrupt(format!("{} per-XCD entries for {} XCDs", r.per_xcd.len(), r.num_xcds));
        }
        for (i, x) in r.per_xcd.iter().enumerate() {
            if x.hits + x.misses != x.accesses {
                return corrupt(format!("XCD {i}: hits + misses != accesses"));
            }
            check_rate(&format!("XCD {i}"), x.hit_rate, x.hits, x.accesses)?;
        }
        let acc: u64 = r.per_xcd.iter().map(|x| x.accesses).sum();
        let hits: u64 = r.per_xcd.iter().map(|x| x.hits).sum();
        if acc != r.accesses || hits != r.hits {
            return corrupt("per-XCD totals do not sum to the overall counts".into());
        }
    }
    if r.unique_lines_touched > r.accesses {
        return corrupt(format!(
            "{} unique lines from {} accesses",
            r.unique_lines_touched, r.accesses
        ));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{SwizzlePattern, ValidationResult};
    use crate::sim::XcdStats;
    use crate::traces::{generate_trace, locality_summary, KernelKind, KernelSpec};

    fn report(rate_hits: u64) -> BottleneckReport {
        BottleneckReport {
            kernel: "k".into(),
            pattern: "p".into(),
            num_xcds: 2,
            accesses: 100,
            hits: rate_hits,
            misses: 100 - rate_hits,
            l2_hit_rate: rate_hits as f64 / 100.0,
            per_xcd: vec![
                XcdStats {
                    accesses: 50,
                    hits: rate_hits / 2,
                    misses: 50 - rate_hits / 2,
                    hit_rate: (rate_hits / 2) as f64 / 50.0,
                },
                XcdStats {
                    accesses: 50,
                    hits: rate_hits - rate_hits / 2,
                    misses: 50 - (rate_hits - rate_hits / 2),
                    hit_rate: (rate_hits - rate_hits / 2) as f64 / 50.0,
                },
            ],
            unique_lines_touched: 40,
        }
    }

    fn entry(iteration: u32, pattern: SwizzlePattern, rep: Option<BottleneckReport>) -> HistoryEntry {
        HistoryEntry {
            iteration,
            diff_summary: String::new(),
            validation: Some(ValidationResult {
                bijective: rep.is_some(),
                total_blocks: 4,
                out_of_range: vec![],
                out_of_range_count: 0,
                collisions: vec![],
                collision_count: 0,
                coverage_ok: rep.is_some(),
                eval_error: None,
            }),
            report: rep,
            critique: None,
            error: None,
            duplicate_of: None,
            pattern: Some(pattern),
        }
    }

    fn locality() -> LocalitySummary {
        let spec = KernelSpec::default_for(KernelKind::Gemm).with_size(128);
        locality_summary(&generate_trace(&spec).unwrap())
    }

    #[test]
    fn prompt_blocks() {
        let arch = ArchSpec::mi300x_like();
        let p = build_prompt("gemm", &locality(), &[], &arch, DEFAULT_GOAL);
        assert!(p.arch.contains("8 XCDs"));
        assert!(p.arch.contains("38 CUs"));
        assert!(p.arch.contains("4 MB"));
        assert!(p.scheduling.contains("Round-robin to XCDs"));
        assert_eq!(p.history, "No prior attempts.");
        let text = p.render();
        let order = [
            "## Kernel",
            "## Bottleneck",
            "## Memory analysis",
            "## Previous attempts",
            "## Architecture",
            "## Scheduling",
            "## Goal",
        ];
        let pos: Vec<usize> = order.iter().map(|h| text.find(h).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn history_stanzas() {
        let arch = ArchSpec::mi300x_like();
        let hist = vec![
            entry(0, SwizzlePattern::identity(), Some(report(46))),
            entry(1, SwizzlePattern::from_expr_text("a", "pid % 4").unwrap(), None),
            entry(
                2,
                SwizzlePattern::from_expr_text("b", "(pid * 3) % num_blocks").unwrap(),
                Some(report(60)),
            ),
        ];
        let p = build_prompt("gemm", &locality(), &hist, &arch, DEFAULT_GOAL);
        assert!(p.history.contains("Iteration 1:"));
        assert!(p.history.contains("Iteration 2:"));
        assert!(!p.history.contains("Iteration 0:"));
        assert!(p.history.find("Iteration 1:") < p.history.find("Iteration 2:"));
        assert!(p.history.contains("rejected"));
        assert!(p.history.contains("60.00%"));
        assert!(p.bottleneck.contains("46.00%"));
        assert!(p.bottleneck.contains("iteration 2"));
        assert_eq!(p, build_prompt("gemm", &locality(), &hist, &arch, DEFAULT_GOAL));
    }

    const GOOD: &str = "Some preamble the parser ignores.
REASONING: rows of A are reused
CRITIQUES: {\"1\": \"too few XCDs used\", \"iteration 2\": \"not bijective\"}
NEW_APPROACH: contiguous chunks
RATIONALE: neighbours share A
FINAL_EXPRESSION:
```python
pid = (pid % num_xcds) * (num_blocks // num_xcds) + pid // num_xcds
```
trailing prose";

    #[test]
    fn parses_well_formed_proposal() {
        let r = parse_proposal(GOOD).unwrap();
        assert_eq!(r.reasoning, "rows of A are reused");
        assert_eq!(r.critiques.get(&1).unwrap(), "too few XCDs used");
        assert_eq!(r.critiques.get(&2).unwrap(), "not bijective");
        assert_eq!(r.new_approach, "contiguous chunks");
        assert!(matches!(r.mapping, Some(Mapping::Linear(_))));
        let again = parse_proposal(&render_proposal(&r)).unwrap();
        assert_eq!(again.mapping, r.mapping);
    }

    #[test]
    fn proposal_errors() {
        let no_fence = GOOD.replace("```python\n", "").replace("```\n", "");
        assert!(matches!(
            parse_proposal(&no_fence),
            Err(ProposalError::MissingExpression)
        ));
        let unknown = GOOD.replace("num_blocks //", "blocks_per_xcd //");
        match parse_proposal(&unknown) {
            Err(e @ ProposalError::Parse { .. }) => assert!(e.to_string().contains("blocks_per_xcd")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_line_proposals_are_grid_mappings() {
        let text = "FINAL_EXPRESSION\n```\npid_n = pid % num_blocks_n\npid_m = pid // num_blocks_n\n```\n";
        let r = parse_proposal(text).unwrap();
        match r.mapping {
            Some(Mapping::Grid { m, n }) => {
                assert_eq!(m.to_string(), "(pid // num_blocks_n)");
                assert_eq!(n.to_string(), "(pid % num_blocks_n)");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn profiler_log_checks() {
        let r = report(60);
        let back = parse_profiler_log(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.l2_hit_rate, 0.60);
        let doc = r#"{"kernel":"k","pattern":"p","num_xcds":1,"accesses":10,"hits":7,"misses":2,"l2_hit_rate":0.7,"per_xcd":[],"unique_lines_touched":3}"#;
        assert!(matches!(parse_profiler_log(doc), Err(ProfilerLogError::Corrupt(_))));
        let extra = r.to_json().replacen('{', "{\"cycles\": 5,", 1);
        assert!(matches!(parse_profiler_log(&extra), Err(ProfilerLogError::Schema(_))));
        let mut bad_rate = r.clone();
        bad_rate.l2_hit_rate = 0.5;
        assert!(parse_profiler_log(&bad_rate.to_json()).is_err());
        let mut bad_xcd = r;
        bad_xcd.per_xcd[0].accesses = 49;
        assert!(parse_profiler_log(&bad_xcd.to_json()).is_err());
    }
}

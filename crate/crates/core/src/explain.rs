//! Attribute missed instructions to control-flow causes.
//!
//! Missed instructions are grouped into runtime basic blocks (leaders
//! come from the trace, not the view — the view is the object under
//! test). A missed block whose inbound transfer instruction was itself
//! disassembled correctly is a *target error*: the tool saw the branch
//! but not where it goes. A block whose every inbound source is missing
//! too (or that is only reached by fall-through from a missed block) is
//! a *source error* — the miss propagated from upstream.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{ErrorKind, ErrorReport};
use crate::ingest::DisasmView;
use crate::model::{EdgeKind, EdgeRecord, ModuleId, NormAddr, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    SourceError,
    TargetError,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::SourceError => "SOURCE_ERROR",
            Verdict::TargetError => "TARGET_ERROR",
        })
    }
}

/// Why one runtime basic block is missing from the view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub block_leader: NormAddr,
    pub verdict: Verdict,
    /// For a target error: the inbound edge whose source was correctly
    /// disassembled (smallest source offset when several qualify).
    pub via_edge: Option<EdgeRecord>,
    /// All inbound edges that would qualify, for diagnostics.
    pub qualifying_edges: Vec<EdgeRecord>,
    /// Missed instructions inside this block only; no transitive
    /// counting into successor blocks.
    pub missed_inst_count: u64,
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("report references {0}, which is not in the trace")]
    InconsistentInputs(NormAddr),
}

/// Per-edge-kind totals of missed instructions in target-error blocks.
/// Source-error blocks are tallied separately as `unattributed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfErrorCounts {
    pub cbr: u64,
    pub direct: u64,
    pub indirect: u64,
    pub ret: u64,
    pub unattributed: u64,
}

impl CfErrorCounts {
    pub fn total(&self) -> u64 {
        self.cbr + self.direct + self.indirect + self.ret + self.unattributed
    }
}

/// Greatest traced leader at or below `loc` in the same module; the
/// location itself when no leader precedes it.
fn block_of(trace: &TraceSet, loc: NormAddr) -> NormAddr {
    trace
        .leaders()
        .range(NormAddr::new(loc.module, 0)..=loc)
        .next_back()
        .copied()
        .unwrap_or(loc)
}

/// Explain every missed basic block of `report`.
pub fn explain(
    trace: &TraceSet,
    view: &DisasmView,
    report: &ErrorReport,
) -> Result<Vec<Explanation>, ExplainError> {
    for e in &report.errors {
        if trace.get(e.loc).is_none() {
            return Err(ExplainError::InconsistentInputs(e.loc));
        }
    }
    let correct = |loc: NormAddr| match trace.get(loc) {
        Some(inst) => crate::eval::matches_view(inst, view),
        None => false,
    };

    // Group missed instructions into runtime blocks.
    let mut blocks: BTreeMap<NormAddr, u64> = BTreeMap::new();
    for e in &report.errors {
        if e.kind == ErrorKind::Missing {
            *blocks.entry(block_of(trace, e.loc)).or_insert(0) += 1;
        }
    }

    let mut out = Vec::new();
    for (leader, missed_inst_count) in blocks {
        let mut qualifying: Vec<EdgeRecord> = trace
            .edges()
            .iter()
            .filter(|e| e.dst == leader && correct(e.src))
            .copied()
            .collect();
        qualifying.sort_by_key(|e| (e.src.offset, e.kind));
        let (verdict, via_edge) = match qualifying.first() {
            Some(e) => (Verdict::TargetError, Some(*e)),
            None => (Verdict::SourceError, None),
        };
        out.push(Explanation {
            block_leader: leader,
            verdict,
            via_edge,
            qualifying_edges: qualifying,
            missed_inst_count,
        });
    }
    Ok(out)
}

/// Fold explanations into per-edge-kind counts.
pub fn categorize(explanations: &[Explanation]) -> CfErrorCounts {
    let mut c = CfErrorCounts::default();
    for x in explanations {
        match (x.verdict, x.via_edge) {
            (Verdict::TargetError, Some(e)) => match e.kind {
                EdgeKind::Cbr => c.cbr += x.missed_inst_count,
                EdgeKind::Direct => c.direct += x.missed_inst_count,
                EdgeKind::Indirect => c.indirect += x.missed_inst_count,
                EdgeKind::Return => c.ret += x.missed_inst_count,
            },
            _ => c.unattributed += x.missed_inst_count,
        }
    }
    c
}

/// Serialize explanations: header comment, column header, one row per
/// block: `leader,verdict,kind,src,dst,missed_count`.
pub fn serialize_explanations(module: ModuleId, explanations: &[Explanation]) -> String {
    let mut out = format!("# module={module}\n");
    out.push_str("leader,verdict,kind,src,dst,missed_count\n");
    for x in explanations {
        let (kind, src, dst) = match x.via_edge {
            Some(e) => (
                e.kind.name().to_string(),
                format!("{:x}", e.src.offset),
                format!("{:x}", e.dst.offset),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{:x},{},{},{},{},{}",
            x.block_leader.offset, x.verdict, kind, src, dst, x.missed_inst_count
        );
    }
    out
}

#[derive(Debug, Error)]
pub enum ExplainIoError {
    #[error("line {0}: {1}")]
    Malformed(usize, String),
}

/// Parse explanations serialized by [`serialize_explanations`].
pub fn parse_explanations(text: &str) -> Result<(ModuleId, Vec<Explanation>), ExplainIoError> {
    let bad = |lineno: usize, m: String| ExplainIoError::Malformed(lineno, m);
    let mut module = ModuleId(0);
    let mut out = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with("leader,") {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                if let Some(("module", v)) = kv.split_once('=') {
                    module = ModuleId(
                        v.parse()
                            .map_err(|_| bad(lineno, format!("bad module id '{v}'")))?,
                    );
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(lineno, format!("expected 6 columns, got {}", cols.len())));
        }
        let leader = u64::from_str_radix(cols[0], 16)
            .map_err(|_| bad(lineno, format!("bad leader '{}'", cols[0])))?;
        let verdict = match cols[1] {
            "SOURCE_ERROR" => Verdict::SourceError,
            "TARGET_ERROR" => Verdict::TargetError,
            other => return Err(bad(lineno, format!("bad verdict '{other}'"))),
        };
        let via_edge = if cols[2].is_empty() {
            None
        } else {
            let kind = match cols[2] {
                "cbr" => EdgeKind::Cbr,
                "direct" => EdgeKind::Direct,
                "indirect" => EdgeKind::Indirect,
                "return" => EdgeKind::Return,
                other => return Err(bad(lineno, format!("bad edge kind '{other}'"))),
            };
            let src = u64::from_str_radix(cols[3], 16)
                .map_err(|_| bad(lineno, format!("bad src '{}'", cols[3])))?;
            let dst = u64::from_str_radix(cols[4], 16)
                .map_err(|_| bad(lineno, format!("bad dst '{}'", cols[4])))?;
            Some(EdgeRecord::new(
                kind,
                NormAddr::new(module, src),
                NormAddr::new(module, dst),
            ))
        };
        let missed: u64 = cols[5]
            .parse()
            .map_err(|_| bad(lineno, format!("bad missed_count '{}'", cols[5])))?;
        let qualifying = via_edge.iter().copied().collect();
        out.push(Explanation {
            block_leader: NormAddr::new(module, leader),
            verdict,
            via_edge,
            qualifying_edges: qualifying,
            missed_inst_count: missed,
        });
    }
    Ok((module, out))
}

//! Turn evaluator findings into proof-of-concept trojan patches.
//!
//! A plan replaces one missed executed instruction with a halting
//! marker (ud2 or int3) padded to the same length with nops. Verifying
//! a plan needs two artifacts produced from the *patched* binary: a
//! disassembler view (is the marker visible?) and a trace (is it still
//! reached?). A marker that executes but never appears in the view is
//! exactly the "executed but not disassembled" failure, demonstrated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{ErrorKind, ErrorReport};
use crate::explain::{Explanation, Verdict as ExplainVerdict};
use crate::ingest::DisasmView;
use crate::model::{EdgeKind, NormAddr, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Marker {
    Ud2,
    Int3,
}

impl Marker {
    pub fn bytes(self) -> &'static [u8] {
        match self {
            Marker::Ud2 => &[0x0f, 0x0b],
            Marker::Int3 => &[0xcc],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Marker::Ud2 => "ud2",
            Marker::Int3 => "int3",
        }
    }
}

/// Why this site is expected to stay invisible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rationale {
    /// The block is only reached through an indirect transfer the
    /// disassembler did not resolve.
    TargetOfIndirect,
    /// The site sits in a region the disassembler decodes out of sync
    /// (or misses for some other non-indirect reason).
    DesyncRegion,
}

/// A same-length byte patch placing a halting marker at a missed site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub target_loc: NormAddr,
    pub original_bytes: Vec<u8>,
    pub patch_bytes: Vec<u8>,
    pub marker: Marker,
    pub rationale: Rationale,
    /// Missed instructions in the block this site leads, for ranking.
    pub missed_block_size: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("no missed instruction can host a marker")]
    NoViableSite,
    #[error("image bytes at {0:#x} do not match the plan (stale plan or wrong image)")]
    BytesMismatch(u64),
    #[error("patch range {0:#x}+{1} exceeds the image")]
    OutOfRange(u64, usize),
    #[error("trace collection failed: {0}")]
    TraceFailure(String),
}

/// Verdict of checking a plan against artifacts from the patched binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PocVerdict {
    /// The marker executed and the view never shows it: a working PoC.
    HiddenAndReached,
    /// The view shows an instruction at the marker site.
    Visible,
    /// Invisible, but this run never executed the site.
    Unreached,
}

/// Plan marker patches for every missed block whose leader is itself a
/// missed instruction. Target-error blocks come first (an intact,
/// correctly-disassembled transfer still reaches them), then larger
/// blocks; ties break on address.
pub fn plan(
    report: &ErrorReport,
    explanations: &[Explanation],
    image: &[u8],
    preferred: Marker,
) -> Result<Vec<PatchPlan>, PatchError> {
    let mut missing = std::collections::BTreeMap::new();
    for e in &report.errors {
        if e.kind == ErrorKind::Missing {
            missing.insert(e.loc, &e.traced);
        }
    }

    let mut ranked: Vec<&Explanation> = explanations.iter().collect();
    ranked.sort_by_key(|x| {
        (
            x.verdict != ExplainVerdict::TargetError,
            std::cmp::Reverse(x.missed_inst_count),
            x.block_leader,
        )
    });

    let mut plans = Vec::new();
    for x in ranked {
        let Some(traced) = missing.get(&x.block_leader) else {
            continue; // block leader itself was disassembled
        };
        let len = traced.bytes.len();
        let marker = if len >= preferred.bytes().len() { preferred } else { Marker::Int3 };
        if len < marker.bytes().len() {
            continue;
        }
        let off = x.block_leader.offset as usize;
        if off + len > image.len() || image[off..off + len] != traced.bytes[..] {
            return Err(PatchError::BytesMismatch(x.block_leader.offset));
        }
        let mut patch_bytes = marker.bytes().to_vec();
        patch_bytes.resize(len, 0x90);
        let rationale = match x.via_edge {
            Some(e) if e.kind == EdgeKind::Indirect => Rationale::TargetOfIndirect,
            _ => Rationale::DesyncRegion,
        };
        plans.push(PatchPlan {
            target_loc: x.block_leader,
            original_bytes: traced.bytes.clone(),
            patch_bytes,
            marker,
            rationale,
            missed_block_size: x.missed_inst_count,
        });
    }
    if plans.is_empty() {
        return Err(PatchError::NoViableSite);
    }
    Ok(plans)
}

fn splice(image: &[u8], at: u64, expect: &[u8], replace: &[u8]) -> Result<Vec<u8>, PatchError> {
    let off = at as usize;
    if off + expect.len() > image.len() {
        return Err(PatchError::OutOfRange(at, expect.len()));
    }
    if image[off..off + expect.len()] != *expect {
        return Err(PatchError::BytesMismatch(at));
    }
    let mut out = image.to_vec();
    out[off..off + replace.len()].copy_from_slice(replace);
    Ok(out)
}

/// Apply a plan to an image. Fails if the image does not carry the
/// plan's original bytes (stale plan, or already patched).
pub fn apply(image: &[u8], plan: &PatchPlan) -> Result<Vec<u8>, PatchError> {
    splice(image, plan.target_loc.offset, &plan.original_bytes, &plan.patch_bytes)
}

/// Undo a plan, restoring the original bytes.
pub fn revert(image: &[u8], plan: &PatchPlan) -> Result<Vec<u8>, PatchError> {
    splice(image, plan.target_loc.offset, &plan.patch_bytes, &plan.original_bytes)
}

/// Judge a plan against the patched binary's view and trace.
///
/// Hidden-and-reached means: no view record starting at the target
/// shows the marker there, yet the trace proves the marker executed.
/// A view record at the site with unknown bytes counts as visible — we
/// cannot claim the tool missed it.
pub fn verify(
    trace_of_patched: &TraceSet,
    view_of_patched: &DisasmView,
    plan: &PatchPlan,
) -> PocVerdict {
    let marker = plan.marker.bytes();
    let visible = match view_of_patched.get(plan.target_loc.offset) {
        None => false,
        Some(r) => match &r.bytes {
            None => true,
            Some(b) => b.len() >= marker.len() && &b[..marker.len()] == marker,
        },
    };
    if visible {
        return PocVerdict::Visible;
    }
    let reached = trace_of_patched
        .get(plan.target_loc)
        .map(|inst| inst.bytes.len() >= marker.len() && inst.bytes[..marker.len()] == *marker)
        .unwrap_or(false);
    if reached {
        PocVerdict::HiddenAndReached
    } else {
        PocVerdict::Unreached
    }
}

pub fn serialize_plans(plans: &[PatchPlan]) -> String {
    serde_json::to_string_pretty(plans).expect("plans always serialize")
}

pub fn parse_plans(text: &str) -> Result<Vec<PatchPlan>, serde_json::Error> {
    serde_json::from_str(text)
}

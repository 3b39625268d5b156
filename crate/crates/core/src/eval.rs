//! Cross-reference every traced instruction against a disassembler's
//! view and report the guaranteed errors.
//!
//! Only traced instructions can be flagged, so every reported error
//! corresponds to something that really executed: a record the view
//! lacks at that address (MISSING) or decodes with a different length
//! or bytes (MISMATCH). Nothing is ever said about view records at
//! addresses that never executed.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DisasmView;
use crate::model::{InstRecord, ModuleId, NormAddr, TraceSet};
use crate::trace_io::{hex_bytes, parse_hex_bytes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    /// No view record starts at the traced location (including locations
    /// swallowed inside another record — desynchronization).
    Missing,
    /// A view record starts at the traced location but disagrees on
    /// length or bytes.
    Mismatch,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Missing => "MISSING",
            ErrorKind::Mismatch => "MISMATCH",
        })
    }
}

/// What the view claimed at or around an erroneous location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewClaim {
    pub offset: u64,
    pub len: u64,
    pub bytes: Option<Vec<u8>>,
}

/// One guaranteed disassembly error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub loc: NormAddr,
    pub kind: ErrorKind,
    /// The executed instruction (always a member of the evaluated trace).
    pub traced: InstRecord,
    /// For MISMATCH: the disagreeing record. For MISSING: the view record
    /// covering this location, when one swallows it.
    pub view_claim: Option<ViewClaim>,
}

/// Error-count bucket, coarse severity label for summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    Z,
    A,
    B,
    C,
    D,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Z => "Z",
            Bucket::A => "A",
            Bucket::B => "B",
            Bucket::C => "C",
            Bucket::D => "D",
        })
    }
}

/// Bucket a total error count: Z for 0, A for 1–80, B for 81–410,
/// C for 411–1009, D for 1010 and up. The ranges are contiguous and
/// D has no upper bound.
pub fn bucketize(total_errors: u64) -> Bucket {
    match total_errors {
        0 => Bucket::Z,
        1..=80 => Bucket::A,
        81..=410 => Bucket::B,
        411..=1009 => Bucket::C,
        _ => Bucket::D,
    }
}

/// The evaluation result for one (trace, view) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub target: String,
    pub tool: String,
    pub module: ModuleId,
    pub errors: Vec<ErrorRecord>,
    pub missing_count: u64,
    pub mismatch_count: u64,
    /// Matches that could only compare lengths because the view carried
    /// no bytes for the record.
    pub length_only_count: u64,
    pub bucket: Bucket,
}

impl ErrorReport {
    pub fn total(&self) -> u64 {
        self.missing_count + self.mismatch_count
    }

    pub fn error_locs(&self) -> BTreeSet<NormAddr> {
        self.errors.iter().map(|e| e.loc).collect()
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(
        "trace spans {0} modules; filter to the module under evaluation before comparing"
    )]
    ModuleMismatch(usize),
    #[error("reports target different modules ({0} vs {1})")]
    TargetMismatch(ModuleId, ModuleId),
    #[error("line {0}: {1}")]
    MalformedReport(usize, String),
}

/// True if the view has a record starting exactly at the traced
/// instruction with equal length and (when both sides carry bytes)
/// equal bytes.
pub fn matches_view(traced: &InstRecord, view: &DisasmView) -> bool {
    match view.get(traced.loc.offset) {
        None => false,
        Some(r) => {
            r.len == traced.len()
                && match &r.bytes {
                    Some(b) => b == &traced.bytes,
                    None => true,
                }
        }
    }
}

/// Evaluate a rebased view against a single-module trace.
///
/// For every traced instruction: a view record starting at the same
/// offset with equal length (and equal bytes when both sides have them)
/// is correct; a record starting there that disagrees is a MISMATCH;
/// no record starting there is a MISSING, with the covering record
/// attached when the location was swallowed by desynchronization.
pub fn evaluate(
    trace: &TraceSet,
    view: &DisasmView,
    target: &str,
) -> Result<ErrorReport, EvalError> {
    let active = trace.active_modules();
    if active.len() > 1 {
        return Err(EvalError::ModuleMismatch(active.len()));
    }
    let module = active.first().copied().unwrap_or_default();

    let mut errors = Vec::new();
    let mut missing = 0u64;
    let mut mismatch = 0u64;
    let mut length_only = 0u64;

    for (loc, traced) in trace.insts() {
        match view.get(loc.offset) {
            Some(r) => {
                let len_ok = r.len == traced.len();
                let bytes_ok = match &r.bytes {
                    Some(b) => b == &traced.bytes,
                    None => {
                        if len_ok {
                            length_only += 1;
                        }
                        true
                    }
                };
                if !(len_ok && bytes_ok) {
                    mismatch += 1;
                    errors.push(ErrorRecord {
                        loc: *loc,
                        kind: ErrorKind::Mismatch,
                        traced: traced.clone(),
                        view_claim: Some(ViewClaim {
                            offset: r.offset,
                            len: r.len,
                            bytes: r.bytes.clone(),
                        }),
                    });
                }
            }
            None => {
                missing += 1;
                let claim = view.covering(loc.offset).map(|r| ViewClaim {
                    offset: r.offset,
                    len: r.len,
                    bytes: r.bytes.clone(),
                });
                errors.push(ErrorRecord {
                    loc: *loc,
                    kind: ErrorKind::Missing,
                    traced: traced.clone(),
                    view_claim: claim,
                });
            }
        }
    }

    let bucket = bucketize(missing + mismatch);
    Ok(ErrorReport {
        target: target.to_string(),
        tool: view.source_name.clone(),
        module,
        errors,
        missing_count: missing,
        mismatch_count: mismatch,
        length_only_count: length_only,
        bucket,
    })
}

/// Locations erroneous in one report, the other, or both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub only_a: BTreeSet<NormAddr>,
    pub only_b: BTreeSet<NormAddr>,
    pub both: BTreeSet<NormAddr>,
}

impl ReportDelta {
    pub fn is_identical(&self) -> bool {
        self.only_a.is_empty() && self.only_b.is_empty()
    }
}

/// Compare two reports over the same target module.
pub fn diff_reports(a: &ErrorReport, b: &ErrorReport) -> Result<ReportDelta, EvalError> {
    if a.module != b.module || a.target != b.target {
        return Err(EvalError::TargetMismatch(a.module, b.module));
    }
    let la = a.error_locs();
    let lb = b.error_locs();
    Ok(ReportDelta {
        only_a: la.difference(&lb).copied().collect(),
        only_b: lb.difference(&la).copied().collect(),
        both: la.intersection(&lb).copied().collect(),
    })
}

fn claim_str(c: &Option<ViewClaim>) -> String {
    match c {
        None => "-".into(),
        Some(c) => match &c.bytes {
            Some(b) => format!("{:x}+{}:{}", c.offset, c.len, hex_bytes(b)),
            None => format!("{:x}+{}", c.offset, c.len),
        },
    }
}

fn header_token(s: &str) -> String {
    // Header fields are whitespace-delimited key=value pairs.
    s.replace(char::is_whitespace, "_")
}

/// Serialize a report: one summary line, a column header, then one CSV
/// row per error.
pub fn serialize_report(report: &ErrorReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# target={} tool={} module={} missing={} mismatch={} total={} length_only={} bucket={}",
        header_token(&report.target),
        header_token(&report.tool),
        report.module,
        report.missing_count,
        report.mismatch_count,
        report.total(),
        report.length_only_count,
        report.bucket
    );
    out.push_str("loc,kind,traced_len,traced_bytes,view_claim\n");
    for e in &report.errors {
        let _ = writeln!(
            out,
            "{:x},{},{},{},{}",
            e.loc.offset,
            e.kind,
            e.traced.len(),
            hex_bytes(&e.traced.bytes),
            claim_str(&e.view_claim)
        );
    }
    out
}

fn parse_claim(s: &str, lineno: usize) -> Result<Option<ViewClaim>, EvalError> {
    if s == "-" {
        return Ok(None);
    }
    let bad = |m: String| EvalError::MalformedReport(lineno, m);
    let (head, bytes) = match s.split_once(':') {
        Some((h, b)) => {
            let bytes =
                parse_hex_bytes(b).ok_or_else(|| bad(format!("bad claim bytes '{b}'")))?;
            (h, Some(bytes))
        }
        None => (s, None),
    };
    let (off, len) = head
        .split_once('+')
        .ok_or_else(|| bad(format!("bad claim '{s}'")))?;
    Ok(Some(ViewClaim {
        offset: u64::from_str_radix(off, 16)
            .map_err(|_| bad(format!("bad claim offset '{off}'")))?,
        len: len.parse().map_err(|_| bad(format!("bad claim length '{len}'")))?,
        bytes,
    }))
}

/// Parse a report serialized by [`serialize_report`].
pub fn parse_report(text: &str) -> Result<ErrorReport, EvalError> {
    let bad = |lineno: usize, m: String| EvalError::MalformedReport(lineno, m);
    let mut target = String::new();
    let mut tool = String::new();
    let mut module = ModuleId(0);
    let mut length_only = 0u64;
    let mut errors = Vec::new();
    let mut header_seen = false;

    for (i, raw_line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    match k {
                        "target" => target = v.to_string(),
                        "tool" => tool = v.to_string(),
                        "module" => {
                            module = ModuleId(
                                v.parse().map_err(|_| {
                                    bad(lineno, format!("bad module id '{v}'"))
                                })?,
                            )
                        }
                        "length_only" => {
                            length_only = v.parse().map_err(|_| {
                                bad(lineno, format!("bad length_only '{v}'"))
                            })?
                        }
                        _ => {}
                    }
                }
            }
            continue;
        }
        if line.starts_with("loc,") {
            header_seen = true;
            continue;
        }
        if !header_seen {
            return Err(bad(lineno, "row before column header".into()));
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(lineno, format!("expected 5 columns, got {}", cols.len())));
        }
        let offset = u64::from_str_radix(cols[0], 16)
            .map_err(|_| bad(lineno, format!("bad loc '{}'", cols[0])))?;
        let kind = match cols[1] {
            "MISSING" => ErrorKind::Missing,
            "MISMATCH" => ErrorKind::Mismatch,
            other => return Err(bad(lineno, format!("bad kind '{other}'"))),
        };
        let len: u64 = cols[2]
            .parse()
            .map_err(|_| bad(lineno, format!("bad traced_len '{}'", cols[2])))?;
        let bytes = parse_hex_bytes(cols[3])
            .ok_or_else(|| bad(lineno, format!("bad traced_bytes '{}'", cols[3])))?;
        if bytes.len() as u64 != len {
            return Err(bad(lineno, "traced_len does not match traced_bytes".into()));
        }
        let loc = NormAddr::new(module, offset);
        errors.push(ErrorRecord {
            loc,
            kind,
            traced: InstRecord::new(loc, bytes),
            view_claim: parse_claim(cols[4], lineno)?,
        });
    }

    let missing = errors.iter().filter(|e| e.kind == ErrorKind::Missing).count() as u64;
    let mismatch = errors.len() as u64 - missing;
    Ok(ErrorReport {
        target,
        tool,
        module,
        bucket: bucketize(missing + mismatch),
        errors,
        missing_count: missing,
        mismatch_count: mismatch,
        length_only_count: length_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ViewInst;
    use crate::model::{InstRecord, ModuleId, ModuleInfo, TraceSetBuilder};

    fn trace_of(insts: &[(u64, &[u8])]) -> TraceSet {
        let mut b = TraceSetBuilder::new();
        b.add_module(ModuleInfo {
            id: ModuleId(0),
            path: "/t".into(),
            runtime_base: 0,
            text_start: 0,
            text_size: 0x100000,
        });
        for (off, bytes) in insts {
            b.add_inst(InstRecord::new(NormAddr::new(ModuleId(0), *off), bytes.to_vec()))
                .unwrap();
        }
        b.build().unwrap()
    }

    fn view_of(insts: &[(u64, &[u8])]) -> DisasmView {
        let mut v = DisasmView::new("tool", 0);
        for (off, bytes) in insts {
            v.insert(ViewInst {
                offset: *off,
                len: bytes.len() as u64,
                bytes: Some(bytes.to_vec()),
                mnemonic: None,
            });
        }
        v
    }

    #[test]
    fn identical_view_has_zero_errors() {
        let t = trace_of(&[(0, b"\x31\xf6"), (2, b"\xc3")]);
        let v = view_of(&[(0, b"\x31\xf6"), (2, b"\xc3")]);
        let r = evaluate(&t, &v, "t").unwrap();
        assert_eq!(r.total(), 0);
        assert_eq!(r.bucket, Bucket::Z);
    }

    #[test]
    fn swallowed_instruction_is_missing_with_covering_claim() {
        // Executed incl at 0x119c sits inside the view's 7-byte record
        // starting at 0x1198.
        let t = trace_of(&[(0x119c, b"\xff\x45\x08")]);
        let v = view_of(&[(0x1198, b"\x45\x08\x90\xff\x4d\x08\x90")]);
        let r = evaluate(&t, &v, "t").unwrap();
        assert_eq!(r.missing_count, 1);
        let e = &r.errors[0];
        assert_eq!(e.kind, ErrorKind::Missing);
        assert_eq!(e.view_claim.as_ref().unwrap().offset, 0x1198);
        assert_eq!(e.view_claim.as_ref().unwrap().len, 7);
    }

    #[test]
    fn shifted_view_record_is_missing_not_mismatch() {
        // Traced 4-byte instruction at 0xa20a6; view's next record starts
        // at 0xa20a8, so nothing starts at the traced location.
        let t = trace_of(&[(0xa20a6, b"\x41\x8b\x56\x68")]);
        let v = view_of(&[(0xa20a8, b"\x56")]);
        let r = evaluate(&t, &v, "t").unwrap();
        assert_eq!(r.missing_count, 1);
        assert_eq!(r.errors[0].kind, ErrorKind::Missing);
        // 0xa20a6 is not inside [0xa20a8, ...), no covering claim
        assert!(r.errors[0].view_claim.is_none());
    }

    #[test]
    fn wrong_bytes_at_right_offset_is_mismatch() {
        let t = trace_of(&[(0, b"\x31\xf6")]);
        let v = view_of(&[(0, b"\x31\xff")]);
        let r = evaluate(&t, &v, "t").unwrap();
        assert_eq!(r.mismatch_count, 1);
        assert_eq!(r.errors[0].kind, ErrorKind::Mismatch);
    }

    #[test]
    fn wrong_len_is_mismatch() {
        let t = trace_of(&[(0, b"\x31\xf6")]);
        let mut v = DisasmView::new("tool", 0);
        v.insert(ViewInst { offset: 0, len: 3, bytes: None, mnemonic: None });
        let r = evaluate(&t, &v, "t").unwrap();
        assert_eq!(r.mismatch_count, 1);
    }

    #[test]
    fn byteless_view_len_match_counts_length_only() {
        let t = trace_of(&[(0, b"\x31\xf6")]);
        let mut v = DisasmView::new("tool", 0);
        v.insert(ViewInst { offset: 0, len: 2, bytes: None, mnemonic: None });
        let r = evaluate(&t, &v, "t").unwrap();
        assert_eq!(r.total(), 0);
        assert_eq!(r.length_only_count, 1);
    }

    #[test]
    fn multi_module_trace_is_rejected() {
        let mut b = TraceSetBuilder::new();
        for id in 0..2u32 {
            b.add_module(ModuleInfo {
                id: ModuleId(id),
                path: format!("/m{id}"),
                runtime_base: 0x1000 * (id as u64 + 1) * 0x1000,
                text_start: 0,
                text_size: 0x100,
            });
            b.add_inst(InstRecord::new(NormAddr::new(ModuleId(id), 0), vec![0x90]))
                .unwrap();
        }
        let t = b.build().unwrap();
        assert!(matches!(
            evaluate(&t, &view_of(&[]), "t"),
            Err(EvalError::ModuleMismatch(2))
        ));
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucketize(0), Bucket::Z);
        assert_eq!(bucketize(1), Bucket::A);
        assert_eq!(bucketize(80), Bucket::A);
        assert_eq!(bucketize(81), Bucket::B);
        assert_eq!(bucketize(410), Bucket::B);
        assert_eq!(bucketize(411), Bucket::C);
        assert_eq!(bucketize(1009), Bucket::C);
        assert_eq!(bucketize(1010), Bucket::D);
        assert_eq!(bucketize(112351), Bucket::D);
    }

    #[test]
    fn diff_reports_set_algebra() {
        let t1 = trace_of(&[(0x10, b"\x90")]);
        let t2 = trace_of(&[(0x20, b"\x90")]);
        let empty = view_of(&[]);
        let a = evaluate(&t1, &empty, "t").unwrap();
        let b = evaluate(&t2, &empty, "t").unwrap();
        let d = diff_reports(&a, &b).unwrap();
        assert_eq!(d.only_a.len(), 1);
        assert_eq!(d.only_b.len(), 1);
        assert!(d.both.is_empty());
        let same = diff_reports(&a, &a).unwrap();
        assert!(same.is_identical());
        assert_eq!(same.both.len(), 1);
    }

    #[test]
    fn report_round_trips_through_csv() {
        let t = trace_of(&[(0x10, b"\xff\x45\x08"), (0x20, b"\x90")]);
        let v = view_of(&[(0x0e, b"\x45\x08\x90\xff\x4d\x08\x90"), (0x20, b"\xc3")]);
        let r = evaluate(&t, &v, "target-x").unwrap();
        let text = serialize_report(&r);
        let back = parse_report(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn view_additions_never_increase_errors() {
        let t = trace_of(&[(0, b"\x31\xf6"), (2, b"\xc3"), (3, b"\x90")]);
        let v1 = view_of(&[(0, b"\x31\xf6")]);
        let mut v2 = v1.clone();
        v2.insert(ViewInst { offset: 2, len: 1, bytes: Some(vec![0xc3]), mnemonic: None });
        let e1 = evaluate(&t, &v1, "t").unwrap().total();
        let e2 = evaluate(&t, &v2, "t").unwrap().total();
        assert!(e2 <= e1);
    }
}

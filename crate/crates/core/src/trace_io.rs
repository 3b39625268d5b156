//! Line-based trace file format.
//!
//! ```text
//! M <module-id-dec> <path> <base-hex> <text-start-hex> <text-size-hex>
//! I <module-id-dec> <offset-hex> <len-dec> <bytes-hex>
//! E <C|D|I|R> <mod>:<off-hex> <mod>:<off-hex>
//! B <module-id-dec> <offset-hex>
//! ```
//!
//! Hex is lowercase without `0x`. Lines may appear in any order and
//! duplicate `I` lines with identical content are legal (set semantics).
//! Lines starting with `#` are comments; a `# partial` comment marks a
//! trace cut short by a timeout. Serialization is canonical: modules by
//! id, then instructions, edges and leaders in sorted order, so equal
//! trace sets produce byte-identical files.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{
    EdgeKind, EdgeRecord, InstRecord, ModelError, ModuleId, ModuleInfo, NormAddr, TraceSet,
    TraceSetBuilder,
};

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("line {0}: {1}")]
    Malformed(usize, String),
    #[error("trace violates model invariants: {0}")]
    Model(#[from] ModelError),
}

fn bad(lineno: usize, msg: impl Into<String>) -> TraceIoError {
    TraceIoError::Malformed(lineno, msg.into())
}

fn parse_hex(s: &str, lineno: usize, what: &str) -> Result<u64, TraceIoError> {
    u64::from_str_radix(s, 16).map_err(|_| bad(lineno, format!("bad hex {what}: '{s}'")))
}

fn parse_dec(s: &str, lineno: usize, what: &str) -> Result<u64, TraceIoError> {
    s.parse::<u64>()
        .map_err(|_| bad(lineno, format!("bad decimal {what}: '{s}'")))
}

pub(crate) fn parse_hex_bytes(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 || s.is_empty() {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

pub(crate) fn hex_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn parse_norm_addr(s: &str, lineno: usize) -> Result<NormAddr, TraceIoError> {
    let (m, off) = s
        .split_once(':')
        .ok_or_else(|| bad(lineno, format!("expected <mod>:<off-hex>, got '{s}'")))?;
    let module = parse_dec(m, lineno, "module id")? as u32;
    let offset = parse_hex(off, lineno, "offset")?;
    Ok(NormAddr::new(ModuleId(module), offset))
}

/// Parse a trace file into a validated [`TraceSet`].
pub fn parse_trace(text: &str) -> Result<TraceSet, TraceIoError> {
    let mut b = TraceSetBuilder::new();
    for (i, raw_line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if comment.trim() == "partial" {
                b.mark_partial();
            }
            continue;
        }
        let mut tok = line.split_whitespace();
        let tag = tok.next().unwrap();
        let rest: Vec<&str> = tok.collect();
        match tag {
            "M" => {
                if rest.len() < 5 {
                    return Err(bad(lineno, "M needs id, path, base, text-start, text-size"));
                }
                let id = parse_dec(rest[0], lineno, "module id")? as u32;
                // Paths containing spaces re-join; the trailing three
                // fields are always base/start/size.
                let path = rest[1..rest.len() - 3].join(" ");
                let n = rest.len();
                b.add_module(ModuleInfo {
                    id: ModuleId(id),
                    path,
                    runtime_base: parse_hex(rest[n - 3], lineno, "base")?,
                    text_start: parse_hex(rest[n - 2], lineno, "text-start")?,
                    text_size: parse_hex(rest[n - 1], lineno, "text-size")?,
                });
            }
            "I" => {
                if rest.len() != 4 {
                    return Err(bad(lineno, "I needs module, offset, len, bytes"));
                }
                let module = parse_dec(rest[0], lineno, "module id")? as u32;
                let offset = parse_hex(rest[1], lineno, "offset")?;
                let len = parse_dec(rest[2], lineno, "length")?;
                let bytes = parse_hex_bytes(rest[3])
                    .ok_or_else(|| bad(lineno, format!("bad byte string '{}'", rest[3])))?;
                if bytes.len() as u64 != len {
                    return Err(bad(
                        lineno,
                        format!("length {} does not match {} bytes", len, bytes.len()),
                    ));
                }
                b.add_inst(InstRecord::new(NormAddr::new(ModuleId(module), offset), bytes))?;
            }
            "E" => {
                if rest.len() != 3 {
                    return Err(bad(lineno, "E needs kind, src, dst"));
                }
                let kind_str = rest[0];
                let kind = kind_str
                    .chars()
                    .next()
                    .filter(|_| kind_str.len() == 1)
                    .and_then(EdgeKind::from_letter)
                    .ok_or_else(|| bad(lineno, format!("bad edge kind '{kind_str}'")))?;
                let src = parse_norm_addr(rest[1], lineno)?;
                let dst = parse_norm_addr(rest[2], lineno)?;
                b.add_edge(EdgeRecord::new(kind, src, dst));
            }
            "B" => {
                if rest.len() != 2 {
                    return Err(bad(lineno, "B needs module, offset"));
                }
                let module = parse_dec(rest[0], lineno, "module id")? as u32;
                let offset = parse_hex(rest[1], lineno, "offset")?;
                b.add_leader(NormAddr::new(ModuleId(module), offset));
            }
            other => return Err(bad(lineno, format!("unknown record tag '{other}'"))),
        }
    }
    Ok(b.build()?)
}

/// Serialize a trace set in canonical order.
pub fn serialize_trace(trace: &TraceSet) -> String {
    let mut out = String::new();
    if trace.is_partial() {
        out.push_str("# partial\n");
    }
    let mut modules: Vec<&ModuleInfo> = trace.modules().iter().collect();
    modules.sort_by_key(|m| m.id);
    for m in modules {
        let _ = writeln!(
            out,
            "M {} {} {:x} {:x} {:x}",
            m.id, m.path, m.runtime_base, m.text_start, m.text_size
        );
    }
    for (loc, inst) in trace.insts() {
        let _ = writeln!(
            out,
            "I {} {:x} {} {}",
            loc.module,
            loc.offset,
            inst.len(),
            hex_bytes(&inst.bytes)
        );
    }
    for e in trace.edges() {
        let _ = writeln!(
            out,
            "E {} {}:{:x} {}:{:x}",
            e.kind.letter(),
            e.src.module,
            e.src.offset,
            e.dst.module,
            e.dst.offset
        );
    }
    for l in trace.leaders() {
        let _ = writeln!(out, "B {} {:x}", l.module, l.offset);
    }
    out
}

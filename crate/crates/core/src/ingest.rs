//! Ingestion of disassembler output into a [`DisasmView`].
//!
//! Two input formats are supported: the textual listing produced by
//! `objdump -d` (and tools imitating it), and a minimal line-based
//! interchange format that exports from other disassemblers are
//! converted to:
//!
//! ```text
//! BASE <hex>
//! <offset-hex> <len-dec> [<bytes-hex>] [# mnemonic]
//! ```
//!
//! Mnemonics are carried opaquely and never interpreted: matching
//! against the trace uses only offset, length and bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_io::{hex_bytes, parse_hex_bytes};

/// One instruction as claimed by a disassembler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewInst {
    pub offset: u64,
    pub len: u64,
    /// Raw bytes when the tool reported them; byte comparison degrades
    /// to length comparison when absent.
    pub bytes: Option<Vec<u8>>,
    pub mnemonic: Option<String>,
}

impl ViewInst {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

/// A disassembler's claimed instruction set, keyed by offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisasmView {
    pub source_name: String,
    /// Base address the tool assigned to the image; [`DisasmView::rebase`]
    /// shifts all offsets down by this so views become module-relative.
    pub declared_base: u64,
    insts: BTreeMap<u64, ViewInst>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("listing contained no instruction lines")]
    EmptyListing,
    #[error("interchange input is missing the BASE header")]
    MissingBase,
    #[error("line {0}: duplicate offset {1:#x}")]
    DuplicateOffset(usize, u64),
    #[error("offset {0:#x} is below the declared base {1:#x}")]
    UnderflowingOffset(u64, u64),
}

impl DisasmView {
    pub fn new(source_name: impl Into<String>, declared_base: u64) -> Self {
        DisasmView {
            source_name: source_name.into(),
            declared_base,
            insts: BTreeMap::new(),
        }
    }

    pub fn insts(&self) -> &BTreeMap<u64, ViewInst> {
        &self.insts
    }

    /// Insert a record, replacing any previous record at the same offset.
    pub fn insert(&mut self, inst: ViewInst) {
        self.insts.insert(inst.offset, inst);
    }

    /// Insert a record, failing on a duplicate offset.
    pub fn try_insert(&mut self, inst: ViewInst) -> Result<(), u64> {
        if self.insts.contains_key(&inst.offset) {
            return Err(inst.offset);
        }
        self.insts.insert(inst.offset, inst);
        Ok(())
    }

    pub fn get(&self, offset: u64) -> Option<&ViewInst> {
        self.insts.get(&offset)
    }

    /// Record whose byte range covers `offset`, if any. With overlapping
    /// (desynchronized) claims the nearest preceding cover is returned.
    pub fn covering(&self, offset: u64) -> Option<&ViewInst> {
        for (_, r) in self.insts.range(..=offset).rev() {
            if offset < r.end() {
                return Some(r);
            }
            // Records are claimed instructions; once we are further back
            // than any plausible claim length, stop.
            if offset - r.offset > 0x1_0000 {
                break;
            }
        }
        None
    }

    /// Pairs of records whose byte ranges overlap. Disassemblers can emit
    /// desynchronized overlapping claims; they are kept but flagged.
    pub fn overlapping(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut prev: Option<&ViewInst> = None;
        for r in self.insts.values() {
            if let Some(p) = prev {
                if p.end() > r.offset {
                    out.push((p.offset, r.offset));
                }
            }
            prev = Some(r);
        }
        out
    }

    /// Shift every offset down by the declared base, producing a
    /// module-relative view comparable with normalized trace addresses.
    pub fn rebase(&self) -> Result<DisasmView, IngestError> {
        let base = self.declared_base;
        let mut out = DisasmView::new(self.source_name.clone(), 0);
        for r in self.insts.values() {
            let offset = r
                .offset
                .checked_sub(base)
                .ok_or(IngestError::UnderflowingOffset(r.offset, base))?;
            out.insert(ViewInst { offset, ..r.clone() });
        }
        Ok(out)
    }

    /// Rebase against an explicit base, overriding the declared one.
    pub fn rebase_to(&self, base: u64) -> Result<DisasmView, IngestError> {
        DisasmView { declared_base: base, ..self.clone() }.rebase()
    }
}

/// Known tool base-address presets.
pub fn preset_base(name: &str) -> Option<u64> {
    match name {
        "ghidra" => Some(0x100000),
        "angr" => Some(0x400000),
        "none" => Some(0),
        _ => None,
    }
}

fn is_hex(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_hexdigit())
}

/// Parse an `objdump -d`-style listing.
///
/// Instruction lines look like `  1198:  45 08 90 ff 4d 08 90   or ...`;
/// the byte field may also be one concatenated hex run. A line with an
/// address and bytes but no mnemonic continues the previous instruction
/// (objdump wraps long instructions that way). Section headers, symbol
/// labels and blank lines are skipped.
pub fn parse_objdump(text: &str, source_name: &str) -> Result<DisasmView, IngestError> {
    let mut view = DisasmView::new(source_name, 0);
    let mut last_offset: Option<u64> = None;

    for (i, raw_line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() || line == "..." {
            continue;
        }
        // `a.out: file format ...`, `Disassembly of section .text:`,
        // `0000000000001193 <Label>:` headers
        if line.contains("file format") || line.starts_with("Disassembly") {
            continue;
        }
        if line.ends_with(':') && line.contains('<') {
            continue;
        }
        let first = line.split_whitespace().next().unwrap_or("");
        let addr_field = match first.strip_suffix(':') {
            Some(a) if is_hex(a) => a,
            _ => {
                return Err(IngestError::MalformedLine(
                    lineno,
                    format!("unrecognized line: '{line}'"),
                ));
            }
        };
        let offset = u64::from_str_radix(addr_field, 16)
            .map_err(|_| IngestError::MalformedLine(lineno, format!("bad address '{addr_field}'")))?;

        let rest = line[line.find(':').unwrap() + 1..].trim_start();
        // objdump separates the byte field from the mnemonic with a tab;
        // honor it when present (mnemonics like `fadd` are valid hex and
        // would otherwise be eaten as bytes). Without tabs, byte tokens
        // run until the first token that is not even-length hex.
        let (byte_field, mnemonic) = match rest.find('\t') {
            Some(at) => {
                let m = rest[at + 1..].split_whitespace().collect::<Vec<_>>().join(" ");
                (&rest[..at], if m.is_empty() { None } else { Some(m) })
            }
            None => {
                let mut split = rest.len();
                let mut pos = 0;
                for tok in rest.split_whitespace() {
                    // Tokens come in order, so searching from the running
                    // position finds this token's own start.
                    let at = rest[pos..].find(tok).unwrap() + pos;
                    if !(is_hex(tok) && tok.len() % 2 == 0) {
                        split = at;
                        break;
                    }
                    pos = at + tok.len();
                }
                let m = rest[split..].split_whitespace().collect::<Vec<_>>().join(" ");
                (&rest[..split], if m.is_empty() { None } else { Some(m) })
            }
        };
        let mut bytes: Vec<u8> = Vec::new();
        for tok in byte_field.split_whitespace() {
            match parse_hex_bytes(tok) {
                Some(mut b) => bytes.append(&mut b),
                None => {
                    return Err(IngestError::MalformedLine(
                        lineno,
                        format!("bad byte token '{tok}'"),
                    ))
                }
            }
        }
        if bytes.is_empty() {
            return Err(IngestError::MalformedLine(lineno, "no instruction bytes".into()));
        }

        match mnemonic {
            None => {
                // Continuation line: append to the previous instruction.
                let prev_off = last_offset.ok_or_else(|| {
                    IngestError::MalformedLine(lineno, "continuation line with no instruction".into())
                })?;
                let prev = view.insts.get_mut(&prev_off).unwrap();
                if prev.end() != offset {
                    return Err(IngestError::MalformedLine(
                        lineno,
                        format!(
                            "continuation at {:#x} does not extend instruction at {:#x}",
                            offset, prev_off
                        ),
                    ));
                }
                prev.len += bytes.len() as u64;
                prev.bytes.get_or_insert_with(Vec::new).append(&mut bytes);
            }
            Some(m) => {
                let len = bytes.len() as u64;
                view.insert(ViewInst {
                    offset,
                    len,
                    bytes: Some(bytes),
                    mnemonic: Some(m),
                });
                last_offset = Some(offset);
            }
        }
    }

    if view.insts.is_empty() {
        return Err(IngestError::EmptyListing);
    }
    Ok(view)
}

/// Parse the interchange format. First line `BASE <hex>`, then one
/// record per line; `#` starts the optional mnemonic field.
pub fn parse_interchange(text: &str, source_name: &str) -> Result<DisasmView, IngestError> {
    let mut lines = text.lines().enumerate();
    let base = loop {
        match lines.next() {
            None => return Err(IngestError::MissingBase),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                let l = l.trim();
                let Some(hex) = l.strip_prefix("BASE ") else {
                    return Err(IngestError::MissingBase);
                };
                break u64::from_str_radix(hex.trim(), 16).map_err(|_| {
                    IngestError::MalformedLine(i + 1, format!("bad BASE value '{hex}'"))
                })?;
            }
        }
    };

    let mut view = DisasmView::new(source_name, base);
    for (i, raw_line) in lines {
        let lineno = i + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (record, mnemonic) = match line.split_once('#') {
            Some((r, m)) => (r.trim(), Some(m.trim().to_string())),
            None => (line, None),
        };
        let toks: Vec<&str> = record.split_whitespace().collect();
        if toks.len() < 2 || toks.len() > 3 {
            return Err(IngestError::MalformedLine(
                lineno,
                format!("expected '<offset-hex> <len-dec> [<bytes-hex>]', got '{record}'"),
            ));
        }
        let offset = u64::from_str_radix(toks[0], 16)
            .map_err(|_| IngestError::MalformedLine(lineno, format!("bad offset '{}'", toks[0])))?;
        let len: u64 = toks[1]
            .parse()
            .map_err(|_| IngestError::MalformedLine(lineno, format!("bad length '{}'", toks[1])))?;
        if len == 0 {
            return Err(IngestError::MalformedLine(lineno, "zero length".into()));
        }
        let bytes = match toks.get(2) {
            None => None,
            Some(tok) => {
                let b = parse_hex_bytes(tok).ok_or_else(|| {
                    IngestError::MalformedLine(lineno, format!("bad byte string '{tok}'"))
                })?;
                if b.len() as u64 != len {
                    return Err(IngestError::MalformedLine(
                        lineno,
                        format!("length {} does not match {} bytes", len, b.len()),
                    ));
                }
                Some(b)
            }
        };
        view.try_insert(ViewInst { offset, len, bytes, mnemonic })
            .map_err(|off| IngestError::DuplicateOffset(lineno, off))?;
    }
    Ok(view)
}

/// Serialize a view in the interchange format, records sorted by offset.
pub fn serialize_interchange(view: &DisasmView) -> String {
    let mut out = format!("BASE {:x}\n", view.declared_base);
    for r in view.insts.values() {
        let _ = write!(out, "{:x} {}", r.offset, r.len);
        if let Some(b) = &r.bytes {
            let _ = write!(out, " {}", hex_bytes(b));
        }
        if let Some(m) = &r.mnemonic {
            let _ = write!(out, " # {m}");
        }
        out.push('\n');
    }
    out
}

//! Trace-set domain model: normalized addresses, instruction records,
//! control-flow edges and basic-block leaders.
//!
//! All values are immutable after construction; a [`TraceSet`] is built
//! through [`TraceSetBuilder`], which enforces the soundness invariants
//! (no duplicate or overlapping instructions, edge endpoints and leaders
//! resolve to recorded instructions) before the set can be used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Handle identifying one mapped module (executable or shared object)
/// within a trace.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct ModuleId(pub u32);

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One mapped module: where it sat in the traced process and where its
/// executable text lives relative to that base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleInfo {
    pub id: ModuleId,
    pub path: String,
    /// Load address captured at trace time. Subtracted out by
    /// [`normalize`], so traces taken under ASLR/PIC compare equal.
    pub runtime_base: u64,
    /// Start of executable text, as an offset from `runtime_base`.
    pub text_start: u64,
    /// Size of the executable text in bytes. Always nonzero.
    pub text_size: u64,
}

impl ModuleInfo {
    /// End of the address range this module covers, relative to base.
    pub fn text_end(&self) -> u64 {
        self.text_start + self.text_size
    }

    /// True if `raw` (a runtime virtual address) falls inside this
    /// module's mapped range `[runtime_base, runtime_base + text_end)`.
    pub fn contains_raw(&self, raw: u64) -> bool {
        raw >= self.runtime_base && raw - self.runtime_base < self.text_end()
    }
}

/// A module-relative code address: the normal form every component
/// compares in.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct NormAddr {
    pub module: ModuleId,
    pub offset: u64,
}

impl NormAddr {
    pub fn new(module: ModuleId, offset: u64) -> Self {
        NormAddr { module, offset }
    }
}

impl fmt::Display for NormAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:x}", self.module, self.offset)
    }
}

/// Maximum x86-64 instruction length.
pub const MAX_INST_LEN: usize = 15;

/// One executed instruction: its normalized location and the raw bytes
/// read from target memory when it first ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstRecord {
    pub loc: NormAddr,
    pub bytes: Vec<u8>,
}

impl InstRecord {
    pub fn new(loc: NormAddr, bytes: Vec<u8>) -> Self {
        InstRecord { loc, bytes }
    }

    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// First offset past this instruction.
    pub fn end(&self) -> u64 {
        self.loc.offset + self.len()
    }
}

/// Control-flow transfer category, matching the four classes reported
/// per missed target block.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum EdgeKind {
    /// Conditional branch (Jcc).
    Cbr,
    /// Direct jump or direct call.
    Direct,
    /// Indirect jump or indirect call.
    Indirect,
    /// Return.
    Return,
}

impl EdgeKind {
    pub fn letter(self) -> char {
        match self {
            EdgeKind::Cbr => 'C',
            EdgeKind::Direct => 'D',
            EdgeKind::Indirect => 'I',
            EdgeKind::Return => 'R',
        }
    }

    pub fn from_letter(c: char) -> Option<EdgeKind> {
        match c {
            'C' => Some(EdgeKind::Cbr),
            'D' => Some(EdgeKind::Direct),
            'I' => Some(EdgeKind::Indirect),
            'R' => Some(EdgeKind::Return),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Cbr => "cbr",
            EdgeKind::Direct => "direct",
            EdgeKind::Indirect => "indirect",
            EdgeKind::Return => "return",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An executed control-flow transfer: `src` is the transfer instruction,
/// `dst` the address execution actually continued at.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct EdgeRecord {
    pub kind: EdgeKind,
    pub src: NormAddr,
    pub dst: NormAddr,
}

impl EdgeRecord {
    pub fn new(kind: EdgeKind, src: NormAddr, dst: NormAddr) -> Self {
        EdgeRecord { kind, src, dst }
    }
}

/// Errors raised while constructing, normalizing or merging trace sets.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("address {0:#x} is not inside any module's mapped range")]
    NoModule(u64),
    #[error("address {0:#x} falls inside more than one module (corrupt module table)")]
    AmbiguousModule(u64),
    #[error("unknown module id {0}")]
    UnknownModule(ModuleId),
    #[error("duplicate module id {0}")]
    DuplicateModule(ModuleId),
    #[error("module {0} has empty text range")]
    EmptyModule(ModuleId),
    #[error("module {0} text range overflows the 64-bit address space")]
    ModuleRangeOverflow(ModuleId),
    #[error("instruction at {0} has invalid length {1} (expected 1..=15)")]
    BadInstLength(NormAddr, usize),
    #[error("instruction at {0} lies outside its module's text range")]
    InstOutOfRange(NormAddr),
    #[error(
        "conflicting instructions at {0}: {} vs {}",
        hex(.1), hex(.2)
    )]
    ConflictingInstruction(NormAddr, Vec<u8>, Vec<u8>),
    #[error("instructions at {0} and {1} overlap (self-modifying or overlapping code is rejected)")]
    OverlappingInstructions(NormAddr, NormAddr),
    #[error("edge endpoint {0} is not a recorded instruction")]
    DanglingEdge(NormAddr),
    #[error("leader {0} is not a recorded instruction")]
    DanglingLeader(NormAddr),
    #[error("traces disagree on module '{0}': text geometry differs")]
    ModuleGeometryMismatch(String),
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The sound proxy oracle: unique executed instructions plus the
/// control-flow edges and block leaders observed while collecting them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSet {
    modules: Vec<ModuleInfo>,
    insts: BTreeMap<NormAddr, InstRecord>,
    edges: BTreeSet<EdgeRecord>,
    leaders: BTreeSet<NormAddr>,
    /// Set when collection stopped early (timeout). The contents remain
    /// sound; only coverage is reduced.
    partial: bool,
}

impl TraceSet {
    pub fn modules(&self) -> &[ModuleInfo] {
        &self.modules
    }

    pub fn module(&self, id: ModuleId) -> Option<&ModuleInfo> {
        self.modules.iter().find(|m| m.id == id)
    }

    pub fn insts(&self) -> &BTreeMap<NormAddr, InstRecord> {
        &self.insts
    }

    pub fn edges(&self) -> &BTreeSet<EdgeRecord> {
        &self.edges
    }

    pub fn leaders(&self) -> &BTreeSet<NormAddr> {
        &self.leaders
    }

    pub fn is_partial(&self) -> bool {
        self.partial
    }

    pub fn get(&self, loc: NormAddr) -> Option<&InstRecord> {
        self.insts.get(&loc)
    }

    /// Module ids that actually have recorded instructions.
    pub fn active_modules(&self) -> BTreeSet<ModuleId> {
        self.insts.keys().map(|l| l.module).collect()
    }

    /// Restrict the trace to a single module. Edges with either endpoint
    /// outside the module are dropped along with foreign leaders.
    pub fn filter_module(&self, id: ModuleId) -> TraceSet {
        TraceSet {
            modules: self.modules.iter().filter(|m| m.id == id).cloned().collect(),
            insts: self
                .insts
                .iter()
                .filter(|(l, _)| l.module == id)
                .map(|(l, r)| (*l, r.clone()))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|e| e.src.module == id && e.dst.module == id)
                .copied()
                .collect(),
            leaders: self.leaders.iter().filter(|l| l.module == id).copied().collect(),
            partial: self.partial,
        }
    }

    /// Map a normalized address back to the runtime virtual address it
    /// was captured at. Inverse of [`normalize`] for in-range addresses.
    pub fn denormalize(&self, addr: NormAddr) -> Result<u64, ModelError> {
        let m = self.module(addr.module).ok_or(ModelError::UnknownModule(addr.module))?;
        Ok(m.runtime_base + addr.offset)
    }
}

/// Normalize a runtime virtual address to a module-relative pair.
///
/// The address must fall inside exactly one module's mapped range;
/// anything else signals JIT/unmapped code or a corrupt module table and
/// is rejected rather than guessed at.
pub fn normalize(raw_addr: u64, modules: &[ModuleInfo]) -> Result<NormAddr, ModelError> {
    let mut found: Option<&ModuleInfo> = None;
    for m in modules {
        if m.contains_raw(raw_addr) {
            if found.is_some() {
                return Err(ModelError::AmbiguousModule(raw_addr));
            }
            found = Some(m);
        }
    }
    match found {
        Some(m) => Ok(NormAddr::new(m.id, raw_addr - m.runtime_base)),
        None => Err(ModelError::NoModule(raw_addr)),
    }
}

/// Incrementally assembles a [`TraceSet`]; `build` validates every
/// invariant before handing out the immutable set.
#[derive(Debug, Default, Clone)]
pub struct TraceSetBuilder {
    modules: Vec<ModuleInfo>,
    insts: BTreeMap<NormAddr, InstRecord>,
    edges: BTreeSet<EdgeRecord>,
    leaders: BTreeSet<NormAddr>,
    partial: bool,
}

impl TraceSetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_module(&mut self, module: ModuleInfo) -> &mut Self {
        self.modules.push(module);
        self
    }

    /// Record one executed instruction. Re-recording identical content at
    /// the same location is a no-op (set semantics); different content is
    /// a conflict and fails the build.
    pub fn add_inst(&mut self, inst: InstRecord) -> Result<&mut Self, ModelError> {
        match self.insts.get(&inst.loc) {
            Some(prev) if prev.bytes != inst.bytes => {
                return Err(ModelError::ConflictingInstruction(
                    inst.loc,
                    prev.bytes.clone(),
                    inst.bytes,
                ))
            }
            Some(_) => {}
            None => {
                self.insts.insert(inst.loc, inst);
            }
        }
        Ok(self)
    }

    pub fn add_edge(&mut self, edge: EdgeRecord) -> &mut Self {
        self.edges.insert(edge);
        self
    }

    pub fn add_leader(&mut self, leader: NormAddr) -> &mut Self {
        self.leaders.insert(leader);
        self
    }

    pub fn mark_partial(&mut self) -> &mut Self {
        self.partial = true;
        self
    }

    pub fn has_inst(&self, loc: NormAddr) -> bool {
        self.insts.contains_key(&loc)
    }

    pub fn build(self) -> Result<TraceSet, ModelError> {
        let mut ids = BTreeSet::new();
        for m in &self.modules {
            if m.text_size == 0 {
                return Err(ModelError::EmptyModule(m.id));
            }
            if m.text_start.checked_add(m.text_size).is_none() {
                return Err(ModelError::ModuleRangeOverflow(m.id));
            }
            if !ids.insert(m.id) {
                return Err(ModelError::DuplicateModule(m.id));
            }
        }

        let mut prev: Option<&InstRecord> = None;
        for (loc, inst) in &self.insts {
            let n = inst.bytes.len();
            if n == 0 || n > MAX_INST_LEN {
                return Err(ModelError::BadInstLength(*loc, n));
            }
            let m = self
                .modules
                .iter()
                .find(|m| m.id == loc.module)
                .ok_or(ModelError::UnknownModule(loc.module))?;
            if inst.end() > m.text_end() {
                return Err(ModelError::InstOutOfRange(*loc));
            }
            // BTreeMap iteration is (module, offset)-sorted, so overlap
            // only needs a look at the previous record in the same module.
            if let Some(p) = prev {
                if p.loc.module == loc.module && p.end() > loc.offset {
                    return Err(ModelError::OverlappingInstructions(p.loc, *loc));
                }
            }
            prev = Some(inst);
        }

        for e in &self.edges {
            for ep in [e.src, e.dst] {
                if !self.insts.contains_key(&ep) {
                    return Err(ModelError::DanglingEdge(ep));
                }
            }
        }
        for l in &self.leaders {
            if !self.insts.contains_key(l) {
                return Err(ModelError::DanglingLeader(*l));
            }
        }

        Ok(TraceSet {
            modules: self.modules,
            insts: self.insts,
            edges: self.edges,
            leaders: self.leaders,
            partial: self.partial,
        })
    }
}

/// Merge several trace sets into one, re-keying modules by path.
///
/// Module tables must agree on (path, text_start, text_size); runtime
/// bases may differ between runs (ASLR), the first-seen base is kept.
/// Instructions, edges and leaders are set unions. Two runs reporting
/// different bytes at the same location mean the inputs came from
/// different binaries (or self-modifying code) and the merge fails hard:
/// keeping either side would forfeit soundness.
pub fn merge(traces: &[TraceSet]) -> Result<TraceSet, ModelError> {
    let mut canon: Vec<ModuleInfo> = Vec::new();
    let mut canon_by_path: BTreeMap<String, ModuleId> = BTreeMap::new();

    // Canonical module table, ids assigned in first-seen order.
    for t in traces {
        for m in t.modules() {
            match canon_by_path.get(&m.path) {
                None => {
                    let id = ModuleId(canon.len() as u32);
                    canon_by_path.insert(m.path.clone(), id);
                    canon.push(ModuleInfo { id, ..m.clone() });
                }
                Some(id) => {
                    let c = &canon[id.0 as usize];
                    if c.text_start != m.text_start || c.text_size != m.text_size {
                        return Err(ModelError::ModuleGeometryMismatch(m.path.clone()));
                    }
                }
            }
        }
    }

    let mut out = TraceSetBuilder::new();
    for m in &canon {
        out.add_module(m.clone());
    }

    for t in traces {
        let rekey: BTreeMap<ModuleId, ModuleId> = t
            .modules()
            .iter()
            .map(|m| (m.id, canon_by_path[&m.path]))
            .collect();
        let map = |a: NormAddr| -> Result<NormAddr, ModelError> {
            let id = rekey.get(&a.module).ok_or(ModelError::UnknownModule(a.module))?;
            Ok(NormAddr::new(*id, a.offset))
        };
        for (loc, inst) in t.insts() {
            out.add_inst(InstRecord::new(map(*loc)?, inst.bytes.clone()))?;
        }
        for e in t.edges() {
            out.add_edge(EdgeRecord::new(e.kind, map(e.src)?, map(e.dst)?));
        }
        for l in t.leaders() {
            out.add_leader(map(*l)?);
        }
        if t.is_partial() {
            out.mark_partial();
        }
    }
    out.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(id: u32, base: u64, size: u64) -> ModuleInfo {
        ModuleInfo {
            id: ModuleId(id),
            path: format!("/bin/m{id}"),
            runtime_base: base,
            text_start: 0,
            text_size: size,
        }
    }

    fn addr(m: u32, off: u64) -> NormAddr {
        NormAddr::new(ModuleId(m), off)
    }

    #[test]
    fn normalize_subtracts_base() {
        let mods = [module(0, 0x5555_5555_4000, 0x2000)];
        let got = normalize(0x5555_5555_4000 + 0x1193, &mods).unwrap();
        assert_eq!(got, addr(0, 0x1193));
    }

    #[test]
    fn normalize_below_any_mapping_is_no_module() {
        let mods = [module(0, 0x1000, 0x100)];
        assert_eq!(normalize(0x300, &mods), Err(ModelError::NoModule(0x300)));
    }

    #[test]
    fn normalize_rejects_overlapping_module_tables() {
        let mods = [module(0, 0x1000, 0x1000), module(1, 0x1800, 0x1000)];
        assert_eq!(
            normalize(0x1900, &mods),
            Err(ModelError::AmbiguousModule(0x1900))
        );
    }

    #[test]
    fn denormalize_round_trips() {
        let mods = [module(0, 0x400000, 0x1000)];
        let mut b = TraceSetBuilder::new();
        b.add_module(mods[0].clone());
        b.add_inst(InstRecord::new(addr(0, 0x10), vec![0x90])).unwrap();
        let t = b.build().unwrap();
        let raw = 0x400010;
        let n = normalize(raw, &mods).unwrap();
        assert_eq!(t.denormalize(n).unwrap(), raw);
    }

    #[test]
    fn build_rejects_overlap() {
        let mut b = TraceSetBuilder::new();
        b.add_module(module(0, 0, 0x100));
        b.add_inst(InstRecord::new(addr(0, 0x10), vec![0x48, 0x89, 0xe5])).unwrap();
        b.add_inst(InstRecord::new(addr(0, 0x12), vec![0x90])).unwrap();
        assert!(matches!(
            b.build(),
            Err(ModelError::OverlappingInstructions(_, _))
        ));
    }

    #[test]
    fn build_rejects_dangling_edge() {
        let mut b = TraceSetBuilder::new();
        b.add_module(module(0, 0, 0x100));
        b.add_inst(InstRecord::new(addr(0, 0), vec![0xc3])).unwrap();
        b.add_edge(EdgeRecord::new(EdgeKind::Return, addr(0, 0), addr(0, 0x50)));
        assert!(matches!(b.build(), Err(ModelError::DanglingEdge(_))));
    }

    #[test]
    fn add_inst_conflict_is_hard_error() {
        let mut b = TraceSetBuilder::new();
        b.add_module(module(0, 0, 0x100));
        b.add_inst(InstRecord::new(addr(0, 0), vec![0x90])).unwrap();
        let err = b.add_inst(InstRecord::new(addr(0, 0), vec![0xc3])).unwrap_err();
        assert!(matches!(err, ModelError::ConflictingInstruction(_, _, _)));
    }

    fn small_trace(insts: &[(u64, &[u8])]) -> TraceSet {
        let mut b = TraceSetBuilder::new();
        b.add_module(module(0, 0x400000, 0x1000));
        for (off, bytes) in insts {
            b.add_inst(InstRecord::new(addr(0, *off), bytes.to_vec())).unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn merge_single_is_identity() {
        let t = small_trace(&[(0, b"\x90"), (1, b"\xc3")]);
        assert_eq!(merge(std::slice::from_ref(&t)).unwrap(), t);
    }

    #[test]
    fn merge_is_commutative() {
        let t1 = small_trace(&[(0, b"\x90")]);
        let t2 = small_trace(&[(1, b"\xc3")]);
        assert_eq!(
            merge(&[t1.clone(), t2.clone()]).unwrap(),
            merge(&[t2, t1]).unwrap()
        );
    }

    #[test]
    fn merge_rejects_conflicting_bytes() {
        let t1 = small_trace(&[(0, b"\x90")]);
        let t2 = small_trace(&[(0, b"\xc3")]);
        assert!(matches!(
            merge(&[t1, t2]),
            Err(ModelError::ConflictingInstruction(_, _, _))
        ));
    }

    #[test]
    fn merge_rekeys_modules_by_path() {
        // Same binary traced at two different bases and with different ids.
        let mut b1 = TraceSetBuilder::new();
        b1.add_module(ModuleInfo {
            id: ModuleId(3),
            path: "/bin/app".into(),
            runtime_base: 0x400000,
            text_start: 0,
            text_size: 0x1000,
        });
        b1.add_inst(InstRecord::new(addr(3, 0x10), vec![0x90])).unwrap();
        let t1 = b1.build().unwrap();

        let mut b2 = TraceSetBuilder::new();
        b2.add_module(ModuleInfo {
            id: ModuleId(0),
            path: "/bin/app".into(),
            runtime_base: 0x7f00_0000_0000,
            text_start: 0,
            text_size: 0x1000,
        });
        b2.add_inst(InstRecord::new(addr(0, 0x20), vec![0xc3])).unwrap();
        let t2 = b2.build().unwrap();

        let m = merge(&[t1, t2]).unwrap();
        assert_eq!(m.modules().len(), 1);
        assert_eq!(m.insts().len(), 2);
        assert!(m.get(addr(0, 0x10)).is_some());
        assert!(m.get(addr(0, 0x20)).is_some());
    }
}

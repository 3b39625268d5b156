//! Deterministic ground-truthed fixture images.
//!
//! Each case is a raw x86-64 byte image hand-assembled from the subset
//! the decoder supports, together with its full instruction map, marked
//! data regions, and the exact trace (instructions, edges, leaders) a
//! run from the entry point produces. Fixtures are byte-identical across
//! runs and platforms; no assembler or compiler is involved. A minimal
//! static ELF emitter wraps any image so the live tracer can run it.
//!
//! The interesting cases reproduce classic disassembly failure shapes:
//! jump-table targets reached only indirectly (with and without CET
//! landing pads), data embedded in code that desynchronizes a linear
//! sweep, PLT-style jmp/push/jmp stubs, live code hidden behind a
//! function epilogue, and a redundant jump to the next instruction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ingest::{DisasmView, ViewInst};
use crate::model::{
    EdgeKind, EdgeRecord, InstRecord, ModuleId, ModuleInfo, NormAddr, TraceSet, TraceSetBuilder,
};
use crate::refdisasm::{decode_len, InstClass};

pub const CASE_NAMES: &[&str] = &[
    "jump_table",
    "jump_table_cet",
    "data_in_code",
    "plt_pattern",
    "epilogue_gap",
    "redundant_jump",
    "cbr_return_mix",
    "straight_line",
];

/// Default load address for emitted fixture executables.
pub const DEFAULT_ELF_BASE: u64 = 0x400000;
/// Alternate base for checking load-address independence.
pub const ALT_ELF_BASE: u64 = 0x7000_0000_0000;

const PAGE: usize = 4096;
const ELF_HEADER_SPAN: usize = PAGE;

/// One ground-truth instruction of a fixture image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthInst {
    pub offset: u64,
    pub bytes: Vec<u8>,
    pub class: InstClass,
}

impl TruthInst {
    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// A generated fixture: image, ground truth, and expected runtime trace.
#[derive(Debug, Clone)]
pub struct CorpusCase {
    pub name: &'static str,
    pub image: Vec<u8>,
    pub entry: u64,
    /// Every real instruction in the image, executed or not.
    pub ground_truth: Vec<TruthInst>,
    /// (offset, len) ranges holding data, not instructions.
    pub data_regions: Vec<(u64, u64)>,
    /// Exactly what a run from `entry` executes, with edges and leaders.
    pub expected_trace: TraceSet,
    /// Named offsets of interest (blocks, sites, data objects).
    pub labels: BTreeMap<String, u64>,
}

impl CorpusCase {
    pub fn expected_edges(&self) -> Vec<EdgeRecord> {
        self.expected_trace.edges().iter().copied().collect()
    }

    pub fn label(&self, name: &str) -> u64 {
        *self
            .labels
            .get(name)
            .unwrap_or_else(|| panic!("case {} has no label '{name}'", self.name))
    }

    /// The full ground truth as a view: what a perfect disassembler
    /// would claim for this image.
    pub fn truth_view(&self) -> DisasmView {
        let mut v = DisasmView::new(format!("truth:{}", self.name), 0);
        for t in &self.ground_truth {
            v.insert(ViewInst {
                offset: t.offset,
                len: t.len(),
                bytes: Some(t.bytes.clone()),
                mnemonic: Some(format!("{:?}", t.class).to_lowercase()),
            });
        }
        v
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("unknown corpus case '{0}'")]
    UnknownCase(String),
    #[error("image of {0} bytes exceeds the one-page budget ({PAGE})")]
    ImageTooLarge(usize),
    #[error("not a loadable fixture ELF: {0}")]
    BadElf(String),
}

/// Generate a corpus case by name.
pub fn gen(name: &str) -> Result<CorpusCase, CorpusError> {
    match name {
        "jump_table" => Ok(gen_jump_table(false)),
        "jump_table_cet" => Ok(gen_jump_table(true)),
        "data_in_code" => Ok(gen_data_in_code()),
        "plt_pattern" => Ok(gen_plt_pattern()),
        "epilogue_gap" => Ok(gen_epilogue_gap()),
        "redundant_jump" => Ok(gen_redundant_jump()),
        "cbr_return_mix" => Ok(gen_cbr_return_mix()),
        "straight_line" => Ok(gen_straight_line()),
        other => Err(CorpusError::UnknownCase(other.to_string())),
    }
}

// ---------------------------------------------------------------------
// Fixture assembler: append instructions and data, bind labels, resolve
// rel8/rel32/RIP displacements and table entries in a second pass.
// ---------------------------------------------------------------------

enum FixWidth {
    Rel8,
    Rel32,
}

struct Fixup {
    pos: usize,
    width: FixWidth,
    /// Displacement base: the end of the referencing instruction, or a
    /// label (for table entries relative to the table itself).
    base: FixBase,
    target: String,
}

enum FixBase {
    InstEnd(u64),
    Label(String),
}

#[derive(Default)]
struct Asm {
    bytes: Vec<u8>,
    // (offset, len, is_data)
    spans: Vec<(u64, usize, bool)>,
    labels: BTreeMap<String, u64>,
    fixups: Vec<Fixup>,
}

impl Asm {
    fn here(&self) -> u64 {
        self.bytes.len() as u64
    }

    fn label(&mut self, name: &str) -> u64 {
        let at = self.here();
        self.labels.insert(name.to_string(), at);
        at
    }

    fn inst(&mut self, bytes: &[u8]) {
        self.spans.push((self.here(), bytes.len(), false));
        self.bytes.extend_from_slice(bytes);
    }

    fn data(&mut self, bytes: &[u8]) {
        self.spans.push((self.here(), bytes.len(), true));
        self.bytes.extend_from_slice(bytes);
    }

    /// Instruction ending in a rel8 displacement to `target`.
    fn inst_rel8(&mut self, head: &[u8], target: &str) {
        let start = self.here();
        let len = head.len() + 1;
        self.spans.push((start, len, false));
        self.bytes.extend_from_slice(head);
        self.fixups.push(Fixup {
            pos: self.bytes.len(),
            width: FixWidth::Rel8,
            base: FixBase::InstEnd(start + len as u64),
            target: target.to_string(),
        });
        self.bytes.push(0);
    }

    /// Instruction ending in a rel32 (or RIP disp32) field to `target`.
    fn inst_rel32(&mut self, head: &[u8], target: &str) {
        let start = self.here();
        let len = head.len() + 4;
        self.spans.push((start, len, false));
        self.bytes.extend_from_slice(head);
        self.fixups.push(Fixup {
            pos: self.bytes.len(),
            width: FixWidth::Rel32,
            base: FixBase::InstEnd(start + len as u64),
            target: target.to_string(),
        });
        self.bytes.extend_from_slice(&[0; 4]);
    }

    /// One i32 table entry holding `target - base_label`.
    fn data_entry_i32(&mut self, target: &str, base_label: &str) {
        self.spans.push((self.here(), 4, true));
        self.fixups.push(Fixup {
            pos: self.bytes.len(),
            width: FixWidth::Rel32,
            base: FixBase::Label(base_label.to_string()),
            target: target.to_string(),
        });
        self.bytes.extend_from_slice(&[0; 4]);
    }

    fn finish(mut self) -> Assembled {
        for f in &self.fixups {
            let target = *self
                .labels
                .get(&f.target)
                .unwrap_or_else(|| panic!("undefined label '{}'", f.target));
            let base = match &f.base {
                FixBase::InstEnd(e) => *e,
                FixBase::Label(l) => *self
                    .labels
                    .get(l)
                    .unwrap_or_else(|| panic!("undefined label '{l}'")),
            };
            let disp = target as i64 - base as i64;
            match f.width {
                FixWidth::Rel8 => {
                    let d = i8::try_from(disp).expect("rel8 displacement out of range");
                    self.bytes[f.pos] = d as u8;
                }
                FixWidth::Rel32 => {
                    let d = i32::try_from(disp).expect("rel32 displacement out of range");
                    self.bytes[f.pos..f.pos + 4].copy_from_slice(&d.to_le_bytes());
                }
            }
        }

        let mut truth = Vec::new();
        let mut data_regions: Vec<(u64, u64)> = Vec::new();
        for (offset, len, is_data) in &self.spans {
            if *is_data {
                // coalesce adjacent data spans
                match data_regions.last_mut() {
                    Some((s, l)) if *s + *l == *offset => *l += *len as u64,
                    _ => data_regions.push((*offset, *len as u64)),
                }
            } else {
                let d = decode_len(&self.bytes, *offset)
                    .unwrap_or_else(|e| panic!("fixture bytes at {offset:#x} do not decode: {e}"));
                assert_eq!(
                    d.len() as usize,
                    *len,
                    "fixture instruction at {offset:#x} decodes to a different length"
                );
                truth.push(TruthInst {
                    offset: *offset,
                    bytes: d.bytes,
                    class: d.class,
                });
            }
        }
        Assembled {
            image: self.bytes,
            truth,
            data_regions,
            labels: self.labels,
        }
    }
}

struct Assembled {
    image: Vec<u8>,
    truth: Vec<TruthInst>,
    data_regions: Vec<(u64, u64)>,
    labels: BTreeMap<String, u64>,
}

/// Assemble the expected trace from the ground truth and hand-derived
/// control-flow facts: which instructions never execute, which edges
/// are taken, which addresses start runtime blocks.
fn expected_trace(
    name: &str,
    image_len: u64,
    truth: &[TruthInst],
    labels: &BTreeMap<String, u64>,
    unexecuted: &[&str],
    edges: &[(EdgeKind, &str, &str)],
    leaders: &[&str],
) -> TraceSet {
    let module = ModuleId(0);
    let at = |l: &str| {
        NormAddr::new(module, *labels.get(l).unwrap_or_else(|| panic!("no label '{l}'")))
    };
    let dead: Vec<u64> = unexecuted.iter().map(|l| at(l).offset).collect();

    let mut b = TraceSetBuilder::new();
    b.add_module(ModuleInfo {
        id: module,
        path: format!("corpus:{name}"),
        runtime_base: 0,
        text_start: 0,
        text_size: image_len,
    });
    for t in truth {
        if !dead.contains(&t.offset) {
            b.add_inst(InstRecord::new(NormAddr::new(module, t.offset), t.bytes.clone()))
                .expect("fixture instructions cannot conflict");
        }
    }
    for (kind, src, dst) in edges {
        b.add_edge(EdgeRecord::new(*kind, at(src), at(dst)));
    }
    for l in leaders {
        b.add_leader(at(l));
    }
    b.build().expect("fixture trace must satisfy model invariants")
}

// ---------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------

/// Indirect dispatch through an offset table, three arms executed in
/// order 2, 1, 3 (the order array is {1, 0, 2}). The arm blocks total
/// 14 instructions; with `cet` they gain endbr64 landing pads.
fn gen_jump_table(cet: bool) -> CorpusCase {
    let mut a = Asm::default();

    a.label("entry");
    a.inst(&[0x31, 0xf6]); // xor esi,esi    (idx = 0)
    a.label("loop");
    a.inst_rel32(&[0x48, 0x8d, 0x05], "order"); // lea rax,[rip+order]
    a.inst(&[0x48, 0x63, 0x0c, 0xb0]); // movslq (rax,rsi,4),rcx
    a.inst_rel32(&[0x48, 0x8d, 0x05], "table"); // lea rax,[rip+table]
    a.inst(&[0x48, 0x63, 0x0c, 0x88]); // movslq (rax,rcx,4),rcx
    a.inst(&[0x48, 0x01, 0xc1]); // add rcx,rax
    a.label("dispatch");
    a.inst(&[0x3e, 0xff, 0xe1]); // jmp *rcx
    a.label("loop_end");
    a.inst(&[0x48, 0x83, 0xc6, 0x01]); // add rsi,1
    a.inst(&[0x48, 0x83, 0xfe, 0x02]); // cmp rsi,2
    a.label("jg_site");
    a.inst_rel8(&[0x7f], "exit"); // jg exit
    a.label("back_jmp");
    a.inst_rel8(&[0xeb], "loop"); // jmp loop
    a.label("exit");
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]); // mov eax,60
    a.inst(&[0x31, 0xff]); // xor edi,edi
    a.inst(&[0x0f, 0x05]); // syscall
    a.label("guard");
    a.inst(&[0x0f, 0x0b]); // ud2 (never runs; stops descent fall-through)

    // Arm sizes 5+4+5 = 14 instructions (endbr pads extra under CET).
    for (i, (arm, pad_nops)) in [("t1", 2usize), ("t2", 1), ("t3", 2)].iter().enumerate() {
        a.label(arm);
        if cet {
            a.inst(&[0xf3, 0x0f, 0x1e, 0xfa]); // endbr64
        }
        a.inst(&[0x41, 0xb8, (i + 1) as u8, 0x00, 0x00, 0x00]); // mov r8d,arm#
        a.inst(&[0x4d, 0x01, 0xc1]); // add r9,r8
        for _ in 0..*pad_nops {
            a.inst(&[0x90]);
        }
        a.label(&format!("{arm}_jmp"));
        a.inst_rel32(&[0xe9], "loop_end"); // jmp loop_end
    }

    a.label("order");
    a.data(&1i32.to_le_bytes());
    a.data(&0i32.to_le_bytes());
    a.data(&2i32.to_le_bytes());
    a.label("table");
    a.data_entry_i32("t1", "table");
    a.data_entry_i32("t2", "table");
    a.data_entry_i32("t3", "table");

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let name: &'static str = if cet { "jump_table_cet" } else { "jump_table" };
    let trace = expected_trace(
        name,
        image.len() as u64,
        &truth,
        &labels,
        &["guard"],
        &[
            (EdgeKind::Indirect, "dispatch", "t1"),
            (EdgeKind::Indirect, "dispatch", "t2"),
            (EdgeKind::Indirect, "dispatch", "t3"),
            (EdgeKind::Direct, "t1_jmp", "loop_end"),
            (EdgeKind::Direct, "t2_jmp", "loop_end"),
            (EdgeKind::Direct, "t3_jmp", "loop_end"),
            (EdgeKind::Direct, "back_jmp", "loop"),
            (EdgeKind::Cbr, "jg_site", "exit"),
        ],
        &["entry", "loop", "loop_end", "back_jmp", "exit", "t1", "t2", "t3"],
    );

    CorpusCase {
        name,
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

/// The embedded-data desynchronization pattern: a jump into the middle
/// of a `.byte` run, so execution decodes instructions a linear sweep
/// never sees. The data bytes are exactly `e8 c5 fe ff ff`, `45 08`,
/// `90`, `ff 4d 08` with the jump landing four bytes past the label.
fn gen_data_in_code() -> CorpusCase {
    let mut a = Asm::default();

    a.label("entry");
    a.inst_rel32(&[0x48, 0x8d, 0x2d], "scratch"); // lea rbp,[rip+scratch]
    a.label("call_site");
    a.inst_rel32(&[0xe8], "seq_fn"); // call seq_fn
    a.label("cont");
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]); // mov eax,60
    a.inst(&[0x31, 0xff]); // xor edi,edi
    a.inst(&[0x0f, 0x05]); // syscall

    a.label("seq_fn");
    a.inst(&[0x55]); // push rbp
    a.label("jmp_site");
    a.inst_rel8(&[0xeb], "incl"); // jmp Label+4
    a.label("data_label");
    a.data(&[0xe8, 0xc5, 0xfe, 0xff]); // first four .byte values
    a.label("incl"); // Label+4: the fifth .byte (0xff) starts real code
    a.inst(&[0xff, 0x45, 0x08]); // incl 0x8(%rbp)
    a.label("nop");
    a.inst(&[0x90]); // nop
    a.label("decl");
    a.inst(&[0xff, 0x4d, 0x08]); // decl 0x8(%rbp)
    a.label("pad_nop");
    a.inst(&[0x90]); // trailing nop, swallowed by the desynced 7-byte or
    a.label("epilogue_pop");
    a.inst(&[0x5d]); // pop rbp
    a.label("ret");
    a.inst(&[0xc3]); // retq

    a.label("scratch");
    a.data(&[0; 16]);

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let trace = expected_trace(
        "data_in_code",
        image.len() as u64,
        &truth,
        &labels,
        &[],
        &[
            (EdgeKind::Direct, "call_site", "seq_fn"),
            (EdgeKind::Direct, "jmp_site", "incl"),
            (EdgeKind::Return, "ret", "cont"),
        ],
        &["entry", "seq_fn", "incl", "cont"],
    );
    CorpusCase {
        name: "data_in_code",
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

/// Two PLT-style stubs (jmp/push/jmp), slots bound at runtime, each
/// called once. Only the first jmp of each stub executes.
fn gen_plt_pattern() -> CorpusCase {
    let mut a = Asm::default();

    a.label("entry");
    a.inst_rel32(&[0x48, 0x8d, 0x05], "fn1"); // lea rax,[rip+fn1]
    a.inst_rel32(&[0x48, 0x8d, 0x0d], "slot1"); // lea rcx,[rip+slot1]
    a.inst(&[0x48, 0x89, 0x01]); // mov [rcx],rax
    a.inst_rel32(&[0x48, 0x8d, 0x05], "fn2");
    a.inst_rel32(&[0x48, 0x8d, 0x0d], "slot2");
    a.inst(&[0x48, 0x89, 0x01]);
    a.label("call1");
    a.inst_rel32(&[0xe8], "stub1");
    a.label("call2");
    a.inst_rel32(&[0xe8], "stub2");
    a.label("exit");
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]);
    a.inst(&[0x31, 0xff]);
    a.inst(&[0x0f, 0x05]);

    a.label("plt_common");
    a.inst(&[0x0f, 0x0b]); // resolver stand-in, never executed

    a.label("stub1");
    a.inst_rel32(&[0xff, 0x25], "slot1"); // jmp *slot1(%rip)
    a.label("stub1_push");
    a.inst(&[0x68, 0x00, 0x00, 0x00, 0x00]); // pushq $0x0
    a.label("stub1_tail");
    a.inst_rel32(&[0xe9], "plt_common"); // jmp plt_common

    a.label("stub2");
    a.inst_rel32(&[0xff, 0x25], "slot2");
    a.label("stub2_push");
    a.inst(&[0x68, 0x01, 0x00, 0x00, 0x00]);
    a.label("stub2_tail");
    a.inst_rel32(&[0xe9], "plt_common");

    a.label("fn1");
    a.inst(&[0x90]);
    a.label("fn1_ret");
    a.inst(&[0xc3]);
    a.label("fn2");
    a.inst(&[0x90]);
    a.inst(&[0x90]);
    a.label("fn2_ret");
    a.inst(&[0xc3]);

    a.label("slot1");
    a.data(&[0; 8]);
    a.label("slot2");
    a.data(&[0; 8]);

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let trace = expected_trace(
        "plt_pattern",
        image.len() as u64,
        &truth,
        &labels,
        &["plt_common", "stub1_push", "stub1_tail", "stub2_push", "stub2_tail"],
        &[
            (EdgeKind::Direct, "call1", "stub1"),
            (EdgeKind::Direct, "call2", "stub2"),
            (EdgeKind::Indirect, "stub1", "fn1"),
            (EdgeKind::Indirect, "stub2", "fn2"),
            (EdgeKind::Return, "fn1_ret", "call2"),
            (EdgeKind::Return, "fn2_ret", "exit"),
        ],
        &["entry", "stub1", "stub2", "fn1", "fn2", "call2", "exit"],
    );
    CorpusCase {
        name: "plt_pattern",
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

/// Live code placed after a pop/pop/ret epilogue, reached only through
/// an indirect call: a descent that never follows indirect targets ends
/// at the ret and misses it.
fn gen_epilogue_gap() -> CorpusCase {
    let mut a = Asm::default();

    a.label("entry");
    a.inst_rel32(&[0xe8], "helper"); // call helper
    a.label("after_call");
    a.inst_rel32(&[0x48, 0x8d, 0x05], "hidden"); // lea rax,[rip+hidden]
    a.label("icall");
    a.inst(&[0xff, 0xd0]); // call *rax
    a.label("exit");
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]);
    a.inst(&[0x31, 0xff]);
    a.inst(&[0x0f, 0x05]);

    a.label("helper");
    a.inst(&[0x55]); // push rbp
    a.inst(&[0x53]); // push rbx
    a.inst(&[0x5b]); // pop rbx
    a.inst(&[0x5d]); // pop rbp
    a.label("helper_ret");
    a.inst(&[0xc3]); // retq

    a.label("hidden");
    a.inst(&[0x41, 0xb8, 0x2a, 0x00, 0x00, 0x00]); // mov r8d,42
    a.inst(&[0x90]);
    a.label("hidden_ret");
    a.inst(&[0xc3]);

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let trace = expected_trace(
        "epilogue_gap",
        image.len() as u64,
        &truth,
        &labels,
        &[],
        &[
            (EdgeKind::Direct, "entry", "helper"),
            (EdgeKind::Return, "helper_ret", "after_call"),
            (EdgeKind::Indirect, "icall", "hidden"),
            (EdgeKind::Return, "hidden_ret", "exit"),
        ],
        &["entry", "helper", "after_call", "hidden", "exit"],
    );
    CorpusCase {
        name: "epilogue_gap",
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

/// A jmp whose target is the immediately following instruction.
fn gen_redundant_jump() -> CorpusCase {
    let mut a = Asm::default();

    a.label("entry");
    a.inst(&[0xbf, 0x30, 0x00, 0x00, 0x00]); // mov edi,0x30
    a.label("jmp_site");
    a.inst_rel32(&[0xe9], "after"); // jmpq to the next address
    a.label("after");
    a.inst(&[0x48, 0x89, 0xf9]); // mov rcx,rdi
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]);
    a.inst(&[0x31, 0xff]); // exit status 0
    a.inst(&[0x0f, 0x05]);

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let trace = expected_trace(
        "redundant_jump",
        image.len() as u64,
        &truth,
        &labels,
        &[],
        &[(EdgeKind::Direct, "jmp_site", "after")],
        &["entry", "after"],
    );
    CorpusCase {
        name: "redundant_jump",
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

/// One block reached only by a taken conditional branch (2 insts) and
/// one reached only as the continuation after a return (3 insts).
fn gen_cbr_return_mix() -> CorpusCase {
    let mut a = Asm::default();

    a.label("entry");
    a.inst(&[0x48, 0x31, 0xc0]); // xor rax,rax
    a.inst(&[0x48, 0x83, 0xf8, 0x00]); // cmp rax,0
    a.label("je_site");
    a.inst_rel8(&[0x74], "cbr_target"); // je (always taken)
    a.label("skip_jmp");
    a.inst_rel8(&[0xeb], "join"); // never executed
    a.label("cbr_target");
    a.inst(&[0x90]);
    a.label("cbr_target_jmp");
    a.inst_rel8(&[0xeb], "join");
    a.label("join");
    a.inst_rel32(&[0xe8], "fn"); // call fn
    a.label("cont");
    a.inst(&[0x90]);
    a.inst(&[0x90]);
    a.label("cont_jmp");
    a.inst_rel8(&[0xeb], "exit");
    a.label("fn");
    a.inst(&[0x90]);
    a.label("fn_ret");
    a.inst(&[0xc3]);
    a.label("exit");
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]);
    a.inst(&[0x31, 0xff]);
    a.inst(&[0x0f, 0x05]);

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let trace = expected_trace(
        "cbr_return_mix",
        image.len() as u64,
        &truth,
        &labels,
        &["skip_jmp"],
        &[
            (EdgeKind::Cbr, "je_site", "cbr_target"),
            (EdgeKind::Direct, "cbr_target_jmp", "join"),
            (EdgeKind::Direct, "join", "fn"),
            (EdgeKind::Return, "fn_ret", "cont"),
            (EdgeKind::Direct, "cont_jmp", "exit"),
        ],
        &["entry", "cbr_target", "join", "fn", "cont", "exit"],
    );
    CorpusCase {
        name: "cbr_return_mix",
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

/// Three straight-line instructions ending in the exit syscall.
fn gen_straight_line() -> CorpusCase {
    let mut a = Asm::default();
    a.label("entry");
    a.inst(&[0xb8, 0x3c, 0x00, 0x00, 0x00]);
    a.inst(&[0x31, 0xff]);
    a.inst(&[0x0f, 0x05]);

    let Assembled { image, truth, data_regions, labels } = a.finish();
    let trace = expected_trace(
        "straight_line",
        image.len() as u64,
        &truth,
        &labels,
        &[],
        &[],
        &["entry"],
    );
    CorpusCase {
        name: "straight_line",
        entry: labels["entry"],
        ground_truth: truth,
        data_regions,
        expected_trace: trace,
        labels,
        image,
    }
}

// ---------------------------------------------------------------------
// Minimal static ELF emitter / reader
// ---------------------------------------------------------------------

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Wrap a fixture image in a minimal static ELF64 executable: one RWX
/// load segment mapping the image at `base`, entry at the case entry.
pub fn emit_elf(case: &CorpusCase, base: u64) -> Result<Vec<u8>, CorpusError> {
    emit_elf_image(&case.image, case.entry, base)
}

/// [`emit_elf`] for a raw image and entry offset.
pub fn emit_elf_image(image: &[u8], entry: u64, base: u64) -> Result<Vec<u8>, CorpusError> {
    if image.len() > PAGE {
        return Err(CorpusError::ImageTooLarge(image.len()));
    }
    let mut out = Vec::with_capacity(ELF_HEADER_SPAN + image.len());

    // ELF header
    out.extend_from_slice(&[0x7f, b'E', b'L', b'F', 2, 1, 1, 0]);
    out.extend_from_slice(&[0; 8]);
    put_u16(&mut out, 2); // ET_EXEC
    put_u16(&mut out, 0x3e); // EM_X86_64
    put_u32(&mut out, 1);
    put_u64(&mut out, base + entry); // e_entry
    put_u64(&mut out, 64); // e_phoff
    put_u64(&mut out, 0); // e_shoff
    put_u32(&mut out, 0); // e_flags
    put_u16(&mut out, 64); // e_ehsize
    put_u16(&mut out, 56); // e_phentsize
    put_u16(&mut out, 1); // e_phnum
    put_u16(&mut out, 0);
    put_u16(&mut out, 0);
    put_u16(&mut out, 0);

    // PT_LOAD: image at file offset PAGE, mapped RWX at `base`
    put_u32(&mut out, 1); // p_type
    put_u32(&mut out, 7); // p_flags RWX (fixtures patch their own data)
    put_u64(&mut out, ELF_HEADER_SPAN as u64); // p_offset
    put_u64(&mut out, base); // p_vaddr
    put_u64(&mut out, base); // p_paddr
    put_u64(&mut out, image.len() as u64); // p_filesz
    put_u64(&mut out, image.len() as u64); // p_memsz
    put_u64(&mut out, PAGE as u64); // p_align

    out.resize(ELF_HEADER_SPAN, 0);
    out.extend_from_slice(image);
    Ok(out)
}

/// A fixture ELF picked back apart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedElf {
    pub base: u64,
    pub entry_offset: u64,
    /// File offset where the image bytes start.
    pub image_file_offset: u64,
    pub image: Vec<u8>,
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64, CorpusError> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CorpusError::BadElf("truncated header".into()))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, CorpusError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CorpusError::BadElf("truncated header".into()))
}

/// Parse an executable emitted by [`emit_elf`] (or anything with a
/// single executable PT_LOAD) back into its image.
pub fn read_elf_image(bytes: &[u8]) -> Result<LoadedElf, CorpusError> {
    if bytes.len() < 64 || bytes[0..4] != [0x7f, b'E', b'L', b'F'] {
        return Err(CorpusError::BadElf("bad magic".into()));
    }
    let entry = read_u64(bytes, 24)?;
    let phoff = read_u64(bytes, 32)? as usize;
    let phentsize = read_u16(bytes, 54)? as usize;
    let phnum = read_u16(bytes, 56)? as usize;
    for i in 0..phnum {
        let at = phoff + i * phentsize;
        let p_type = bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| CorpusError::BadElf("truncated program header".into()))?;
        let p_flags = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap());
        if p_type != 1 || p_flags & 1 == 0 {
            continue; // not an executable LOAD
        }
        let p_offset = read_u64(bytes, at + 8)?;
        let p_vaddr = read_u64(bytes, at + 16)?;
        let p_filesz = read_u64(bytes, at + 32)?;
        let image = bytes
            .get(p_offset as usize..(p_offset + p_filesz) as usize)
            .ok_or_else(|| CorpusError::BadElf("segment exceeds file".into()))?
            .to_vec();
        if entry < p_vaddr || entry - p_vaddr >= p_filesz {
            return Err(CorpusError::BadElf("entry outside the load segment".into()));
        }
        return Ok(LoadedElf {
            base: p_vaddr,
            entry_offset: entry - p_vaddr,
            image_file_offset: p_offset,
            image,
        });
    }
    Err(CorpusError::BadElf("no executable load segment".into()))
}

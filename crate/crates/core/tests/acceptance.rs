//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). Criterion 9 drives the live
//! ptrace tracer and skips, with a message, on hosts where tracing is
//! unsupported or denied.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracebin_core::corpus;
use tracebin_core::emulate::{emulate_image, EmuExit, HaltSignal};
use tracebin_core::eval::{bucketize, evaluate, Bucket, ErrorKind};
use tracebin_core::explain::{explain, Verdict};
use tracebin_core::ingest::{
    parse_interchange, parse_objdump, preset_base, serialize_interchange, DisasmView, ViewInst,
};
use tracebin_core::model::{
    merge, EdgeKind, EdgeRecord, InstRecord, ModuleId, ModuleInfo, NormAddr, TraceSet,
    TraceSetBuilder,
};
use tracebin_core::patch::{self, Marker, PocVerdict};
use tracebin_core::refdisasm::{linear_sweep, recursive_descent, HeuristicConfig};

fn module(text_size: u64) -> ModuleInfo {
    ModuleInfo {
        id: ModuleId(0),
        path: "/target".into(),
        runtime_base: 0,
        text_start: 0,
        text_size,
    }
}

fn addr(off: u64) -> NormAddr {
    NormAddr::new(ModuleId(0), off)
}

/// Random single-module trace of up to `max_insts` instructions.
fn random_trace(rng: &mut ChaCha8Rng, max_insts: usize) -> TraceSet {
    let n = rng.gen_range(1..=max_insts);
    let mut b = TraceSetBuilder::new();
    let mut locs = Vec::new();
    let mut off = 0u64;
    let mut insts = Vec::new();
    for _ in 0..n {
        let len = rng.gen_range(1..=15usize);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        insts.push((off, bytes));
        locs.push(off);
        off += len as u64 + rng.gen_range(0..4u64);
    }
    b.add_module(module(off + 16));
    for (o, bytes) in &insts {
        b.add_inst(InstRecord::new(addr(*o), bytes.clone())).unwrap();
    }
    for _ in 0..rng.gen_range(0..locs.len().max(1)) {
        let s = locs[rng.gen_range(0..locs.len())];
        let d = locs[rng.gen_range(0..locs.len())];
        let kind = match rng.gen_range(0..4) {
            0 => EdgeKind::Cbr,
            1 => EdgeKind::Direct,
            2 => EdgeKind::Indirect,
            _ => EdgeKind::Return,
        };
        b.add_edge(EdgeRecord::new(kind, addr(s), addr(d)));
        b.add_leader(addr(d));
    }
    b.add_leader(addr(locs[0]));
    b.build().unwrap()
}

/// Mutate a trace into a disassembler-like view: records dropped,
/// shifted, corrupted, stripped of bytes, plus junk insertions.
fn random_view(rng: &mut ChaCha8Rng, trace: &TraceSet) -> DisasmView {
    let mut v = DisasmView::new("fuzz", 0);
    for (loc, inst) in trace.insts() {
        match rng.gen_range(0..10) {
            0 => {} // dropped
            1 => {
                // corrupt one byte
                let mut bytes = inst.bytes.clone();
                let i = rng.gen_range(0..bytes.len());
                bytes[i] ^= 0x40;
                v.insert(ViewInst {
                    offset: loc.offset,
                    len: bytes.len() as u64,
                    bytes: Some(bytes),
                    mnemonic: None,
                });
            }
            2 => {
                // wrong length
                let len = rng.gen_range(1..=15u64);
                v.insert(ViewInst { offset: loc.offset, len, bytes: None, mnemonic: None });
            }
            3 => {
                // shifted start
                v.insert(ViewInst {
                    offset: loc.offset + rng.gen_range(1..3u64),
                    len: inst.len(),
                    bytes: Some(inst.bytes.clone()),
                    mnemonic: None,
                });
            }
            4 | 5 => {
                // length-only record
                v.insert(ViewInst {
                    offset: loc.offset,
                    len: inst.len(),
                    bytes: None,
                    mnemonic: None,
                });
            }
            _ => {
                v.insert(ViewInst {
                    offset: loc.offset,
                    len: inst.len(),
                    bytes: Some(inst.bytes.clone()),
                    mnemonic: None,
                });
            }
        }
    }
    for _ in 0..rng.gen_range(0..8) {
        let offset = rng.gen_range(0..2000u64);
        if v.get(offset).is_none() {
            v.insert(ViewInst {
                offset,
                len: rng.gen_range(1..=15),
                bytes: None,
                mnemonic: Some("junk".into()),
            });
        }
    }
    v
}

/// Independent O(n·m) oracle: for every traced instruction scan all
/// view records for an exact-start match and judge it.
fn brute_force_errors(trace: &TraceSet, view: &DisasmView) -> Vec<(NormAddr, ErrorKind)> {
    let mut out = Vec::new();
    for (loc, inst) in trace.insts() {
        let mut start_match: Option<&ViewInst> = None;
        for r in view.insts().values() {
            if r.offset == loc.offset {
                start_match = Some(r);
            }
        }
        match start_match {
            None => out.push((*loc, ErrorKind::Missing)),
            Some(r) => {
                let ok = r.len == inst.len()
                    && r.bytes.as_ref().map(|b| b == &inst.bytes).unwrap_or(true);
                if !ok {
                    out.push((*loc, ErrorKind::Mismatch));
                }
            }
        }
    }
    out
}

#[test]
fn criterion_1_randomized_soundness_vs_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ace_b14d);
    for case in 0..1000 {
        let trace = random_trace(&mut rng, 300);
        let view = random_view(&mut rng, &trace);
        let report = evaluate(&trace, &view, "fuzz").unwrap();

        // Soundness: every flagged loc is a traced instruction that
        // genuinely fails exact-start matching.
        for e in &report.errors {
            let traced = trace.get(e.loc).unwrap_or_else(|| {
                panic!("case {case}: error at {:?} is not in the trace", e.loc)
            });
            let exact = view.get(e.loc.offset).map(|r| {
                r.len == traced.len()
                    && r.bytes.as_ref().map(|b| b == &traced.bytes).unwrap_or(true)
            });
            assert_ne!(exact, Some(true), "case {case}: flagged a correct instruction");
        }

        // Exact agreement with the independent oracle.
        let got: Vec<(NormAddr, ErrorKind)> =
            report.errors.iter().map(|e| (e.loc, e.kind)).collect();
        let want = brute_force_errors(&trace, &view);
        assert_eq!(got, want, "case {case}: evaluator disagrees with brute force");
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 1 took {secs:.1}s, budget is 60s");
    eprintln!(
        "[acceptance] criterion 1 PASS: 1000 randomized images, evaluator \
         matches the O(n*m) oracle with 0 disagreements ({secs:.2}s)"
    );
}

#[test]
fn criterion_2_desynchronization_reproduction() {
    let started = Instant::now();
    let case = corpus::gen("data_in_code").unwrap();
    let cfg = HeuristicConfig { skip_byte_on_invalid: true, ..Default::default() };
    let view = linear_sweep(&case.image, 0, cfg);
    let report = evaluate(&case.expected_trace, &view, case.name).unwrap();

    let missing: BTreeSet<u64> = report
        .errors
        .iter()
        .filter(|e| e.kind == ErrorKind::Missing)
        .map(|e| e.loc.offset)
        .collect();
    // The sweep decodes the embedded bytes as a call plus a 7-byte or,
    // hiding the incl, the nop and the decl. The or's displacement
    // always extends one byte past the decl, so the padding nop that
    // follows is structurally swallowed with them.
    for name in ["incl", "nop", "decl"] {
        assert!(
            missing.contains(&case.label(name)),
            "{name} was not reported missing"
        );
    }
    let want: BTreeSet<u64> = ["incl", "nop", "decl", "pad_nop"]
        .iter()
        .map(|l| case.label(l))
        .collect();
    assert_eq!(missing, want, "missing set differs from the frozen expectation");
    assert_eq!(report.mismatch_count, 0);

    // The covering claims are the desynced call and or records.
    let by_loc = |l: &str| {
        report
            .errors
            .iter()
            .find(|e| e.loc.offset == case.label(l))
            .unwrap()
            .view_claim
            .as_ref()
            .unwrap()
            .clone()
    };
    assert_eq!(by_loc("incl").offset, case.label("data_label"));
    assert_eq!(by_loc("incl").len, 5);
    assert_eq!(by_loc("nop").len, 7);
    assert_eq!(
        by_loc("decl").bytes.as_deref(),
        Some(&[0x45, 0x08, 0x90, 0xff, 0x4d, 0x08, 0x90][..])
    );

    // Self-repair: the sweep finds a true instruction boundary again
    // within 16 bytes of the data region's end.
    let (data_off, data_len) = case.data_regions[0];
    let data_end = data_off + data_len;
    let truth_starts: BTreeSet<u64> = case.ground_truth.iter().map(|t| t.offset).collect();
    let resync = view
        .insts()
        .keys()
        .copied()
        .find(|o| *o >= data_end && truth_starts.contains(o))
        .expect("sweep never re-synchronized");
    assert!(
        resync - data_end <= 16,
        "resync at {resync:#x} is more than 16 bytes past the data end {data_end:#x}"
    );

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 1.0, "criterion 2 took {secs:.2}s, budget is 1s");
    eprintln!(
        "[acceptance] criterion 2 PASS: linear sweep desynchronizes on \
         data_in_code; incl, nop, decl reported MISSING, exact-set match ({secs:.3}s)"
    );
}

#[test]
fn criterion_3_cet_heuristic_reproduction() {
    let started = Instant::now();

    let case = corpus::gen("jump_table").unwrap();
    let view = recursive_descent(&case.image, &[case.entry], HeuristicConfig::default());
    let report = evaluate(&case.expected_trace, &view, case.name).unwrap();
    assert_eq!(report.missing_count, 14, "expected exactly 14 missing instructions");
    assert_eq!(report.mismatch_count, 0);

    let xs = explain(&case.expected_trace, &view, &report).unwrap();
    assert_eq!(xs.len(), 3);
    for x in &xs {
        assert_eq!(x.verdict, Verdict::TargetError);
        assert_eq!(x.via_edge.unwrap().kind, EdgeKind::Indirect);
    }
    let total: u64 = xs.iter().map(|x| x.missed_inst_count).sum();
    assert_eq!(total, 14);

    let cet = corpus::gen("jump_table_cet").unwrap();
    let cfg = HeuristicConfig { endbr_scan: true, ..Default::default() };
    let cet_view = recursive_descent(&cet.image, &[cet.entry], cfg);
    let cet_report = evaluate(&cet.expected_trace, &cet_view, cet.name).unwrap();
    assert_eq!(cet_report.total(), 0, "endbr scan must recover all targets");

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 1.0, "criterion 3 took {secs:.2}s, budget is 1s");
    eprintln!(
        "[acceptance] criterion 3 PASS: 14 missing via indirect targets without \
         the endbr heuristic, 0 with it on the CET image ({secs:.3}s)"
    );
}

#[test]
fn criterion_4_explanation_semantics() {
    // Fig-2-style chain: block1 (disassembled) jumps to block2, block2
    // jumps to block3, both missed.
    let mut b = TraceSetBuilder::new();
    b.add_module(module(0x100));
    b.add_inst(InstRecord::new(addr(0x00), vec![0x90])).unwrap();
    b.add_inst(InstRecord::new(addr(0x01), vec![0xeb, 0x10])).unwrap();
    b.add_inst(InstRecord::new(addr(0x13), vec![0x90])).unwrap();
    b.add_inst(InstRecord::new(addr(0x14), vec![0xeb, 0x20])).unwrap();
    b.add_inst(InstRecord::new(addr(0x36), vec![0x90])).unwrap();
    b.add_inst(InstRecord::new(addr(0x37), vec![0xc3])).unwrap();
    for l in [0x00, 0x13, 0x36] {
        b.add_leader(addr(l));
    }
    b.add_edge(EdgeRecord::new(EdgeKind::Direct, addr(0x01), addr(0x13)));
    b.add_edge(EdgeRecord::new(EdgeKind::Direct, addr(0x14), addr(0x36)));
    let trace = b.build().unwrap();

    let mut view = DisasmView::new("tool", 0);
    view.insert(ViewInst { offset: 0x00, len: 1, bytes: Some(vec![0x90]), mnemonic: None });
    view.insert(ViewInst {
        offset: 0x01,
        len: 2,
        bytes: Some(vec![0xeb, 0x10]),
        mnemonic: None,
    });

    let report = evaluate(&trace, &view, "chain").unwrap();
    let xs = explain(&trace, &view, &report).unwrap();
    assert_eq!(xs.len(), 2);
    assert_eq!(xs[0].block_leader, addr(0x13));
    assert_eq!(xs[0].verdict, Verdict::TargetError);
    assert_eq!(xs[0].via_edge.unwrap().src, addr(0x01));
    assert_eq!(xs[1].block_leader, addr(0x36));
    assert_eq!(xs[1].verdict, Verdict::SourceError);
    eprintln!(
        "[acceptance] criterion 4 PASS: chained misses explain as \
         block2 TARGET_ERROR, block3 SOURCE_ERROR"
    );
}

/// Random subset of a shared instruction universe, with edges and
/// leaders restricted to surviving instructions.
fn random_subtrace(rng: &mut ChaCha8Rng, universe: &TraceSet) -> TraceSet {
    let mut b = TraceSetBuilder::new();
    b.add_module(universe.modules()[0].clone());
    let mut kept = BTreeSet::new();
    for (loc, inst) in universe.insts() {
        if rng.gen_bool(0.6) {
            b.add_inst(InstRecord::new(*loc, inst.bytes.clone())).unwrap();
            kept.insert(*loc);
        }
    }
    if kept.is_empty() {
        let (loc, inst) = universe.insts().iter().next().unwrap();
        b.add_inst(InstRecord::new(*loc, inst.bytes.clone())).unwrap();
        kept.insert(*loc);
    }
    for e in universe.edges() {
        if kept.contains(&e.src) && kept.contains(&e.dst) && rng.gen_bool(0.8) {
            b.add_edge(*e);
            b.add_leader(e.dst);
        }
    }
    b.add_leader(*kept.first().unwrap());
    b.build().unwrap()
}

#[test]
fn criterion_5_merge_algebra_and_monotonicity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a15e_b7a0);
    for case in 0..500 {
        let universe = random_trace(&mut rng, 60);
        let t1 = random_subtrace(&mut rng, &universe);
        let t2 = random_subtrace(&mut rng, &universe);
        let t3 = random_subtrace(&mut rng, &universe);

        // idempotence
        assert_eq!(
            merge(std::slice::from_ref(&t1)).unwrap(),
            merge(&[t1.clone(), t1.clone()]).unwrap()
        );
        // commutativity
        let m12 = merge(&[t1.clone(), t2.clone()]).unwrap();
        assert_eq!(m12, merge(&[t2.clone(), t1.clone()]).unwrap(), "case {case}");
        // associativity
        let left = merge(&[m12.clone(), t3.clone()]).unwrap();
        let right = merge(&[t1.clone(), merge(&[t2.clone(), t3.clone()]).unwrap()]).unwrap();
        assert_eq!(left, right, "case {case}");
        // union lower bound
        assert!(m12.insts().len() >= t1.insts().len().max(t2.insts().len()));

        // evaluator monotonicity under merge
        let view = random_view(&mut rng, &universe);
        let e1 = evaluate(&t1, &view, "t").unwrap().error_locs();
        let e12 = evaluate(&m12, &view, "t").unwrap().error_locs();
        assert!(
            e1.is_subset(&e12),
            "case {case}: merged trace lost errors the sub-trace had"
        );
    }
    let secs = started.elapsed().as_secs_f64();
    eprintln!(
        "[acceptance] criterion 5 PASS: 500 random cases of merge \
         idempotence/commutativity/associativity and evaluator monotonicity ({secs:.2}s)"
    );
}

#[test]
fn criterion_6_bucket_boundaries() {
    let table = [
        (0u64, Bucket::Z),
        (1, Bucket::A),
        (80, Bucket::A),
        (81, Bucket::B),
        (410, Bucket::B),
        (411, Bucket::C),
        (1009, Bucket::C),
        (1010, Bucket::D),
    ];
    for (n, want) in table {
        assert_eq!(bucketize(n), want, "bucketize({n})");
    }
    eprintln!("[acceptance] criterion 6 PASS: bucket boundary table exact");
}

#[test]
fn criterion_7_parser_round_trips() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0121_7e57);
    for case in 0..200 {
        let mut v = DisasmView::new("idf", rng.gen_range(0..0x1000_0000u64));
        let n = rng.gen_range(1..=80);
        let mut off = rng.gen_range(0..64u64);
        for _ in 0..n {
            let len = rng.gen_range(1..=15u64);
            let bytes = if rng.gen_bool(0.7) {
                Some((0..len).map(|_| rng.gen()).collect::<Vec<u8>>())
            } else {
                None
            };
            let mnemonic = if rng.gen_bool(0.5) {
                Some(format!("op{}", rng.gen_range(0..100)))
            } else {
                None
            };
            v.insert(ViewInst { offset: off, len, bytes, mnemonic });
            off += len + rng.gen_range(0..6u64);
        }
        let text = serialize_interchange(&v);
        let back = parse_interchange(&text, "idf").unwrap();
        assert_eq!(back, v, "case {case}: interchange round trip changed the view");
    }

    // objdump golden fixtures, including a wrapped 10-byte nop.
    let listing = "\
a.out:     file format elf64-x86-64\n\
\n\
Disassembly of section .text:\n\
\n\
0000000000001193 <Label>:\n\
    1193:\te8 c5 fe ff ff       \tcallq  105d <x>\n\
    1198:\t45 08 90 ff 4d 08 90 \tor     %dl,-0x6ff7b201(%r8)\n\
    119f:\t5d                   \tpop    %rbp\n\
    11a0:\tc3                   \tretq\n\
    11a1:\t66 2e 0f 1f 84 00 00 \tnopw   %cs:0x0(%rax,%rax,1)\n\
    11a8:\t00 00 00 \n\
    11ab:\tf3 0f 1e fa          \tendbr64\n";
    let v = parse_objdump(listing, "objdump").unwrap();
    let offs: Vec<u64> = v.insts().keys().copied().collect();
    assert_eq!(offs, vec![0x1193, 0x1198, 0x119f, 0x11a0, 0x11a1, 0x11ab]);
    assert_eq!(v.get(0x1193).unwrap().len, 5);
    assert_eq!(
        v.get(0x1198).unwrap().bytes.as_deref(),
        Some(&[0x45, 0x08, 0x90, 0xff, 0x4d, 0x08, 0x90][..])
    );
    assert_eq!(v.get(0x11a1).unwrap().len, 10, "continuation line not folded in");
    assert_eq!(
        v.get(0x11a1).unwrap().bytes.as_deref(),
        Some(&[0x66, 0x2e, 0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00][..])
    );

    // Flat listings without tabs (concatenated byte runs) parse too.
    let flat = "1198: 450890ff4d0890  or %dl,0x908(%r8,%rcx,4)\n38008c: c3  retq\n";
    let v = parse_objdump(flat, "objdump").unwrap();
    assert_eq!(v.get(0x1198).unwrap().len, 7);
    assert_eq!(v.get(0x38008c).unwrap().len, 1);

    let secs = started.elapsed().as_secs_f64();
    eprintln!(
        "[acceptance] criterion 7 PASS: 200 interchange round trips and \
         objdump golden listings with continuation lines ({secs:.2}s)"
    );
}

#[test]
fn criterion_8_rebase_presets() {
    assert_eq!(preset_base("ghidra"), Some(0x100000));
    assert_eq!(preset_base("angr"), Some(0x400000));
    assert_eq!(preset_base("none"), Some(0));

    let mut ghidra = DisasmView::new("ghidra", preset_base("ghidra").unwrap());
    ghidra.insert(ViewInst { offset: 0x101193, len: 3, bytes: None, mnemonic: None });
    ghidra.insert(ViewInst { offset: 0x100000, len: 1, bytes: None, mnemonic: None });
    let r = ghidra.rebase().unwrap();
    let offs: Vec<u64> = r.insts().keys().copied().collect();
    assert_eq!(offs, vec![0x0, 0x1193]);

    let mut angr = DisasmView::new("angr", preset_base("angr").unwrap());
    angr.insert(ViewInst { offset: 0x401030, len: 6, bytes: None, mnemonic: None });
    let r = angr.rebase().unwrap();
    assert!(r.get(0x1030).is_some());
    eprintln!(
        "[acceptance] criterion 8 PASS: ghidra preset subtracts 0x100000, \
         angr preset subtracts 0x400000"
    );
}

#[test]
fn criterion_9_live_tracer_end_to_end() {
    let started = Instant::now();
    let case = corpus::gen("jump_table").unwrap();

    // Comparable shape: main-module instruction/edge/leader sets without
    // module metadata (the live module table has the file's real path
    // and base).
    type Sets = (Vec<(u64, Vec<u8>)>, Vec<(EdgeKind, u64, u64)>, Vec<u64>);
    let sets = |t: &TraceSet| -> Sets {
        let main = t.filter_module(ModuleId(0));
        (
            main.insts().iter().map(|(l, i)| (l.offset, i.bytes.clone())).collect(),
            main.edges().iter().map(|e| (e.kind, e.src.offset, e.dst.offset)).collect(),
            main.leaders().iter().map(|l| l.offset).collect(),
        )
    };
    let expected = sets(&case.expected_trace);

    for base in [corpus::DEFAULT_ELF_BASE, corpus::ALT_ELF_BASE] {
        let elf = corpus::emit_elf(&case, base).unwrap();
        let path = {
            use std::io::Write as _;
            let mut f = tempfile::NamedTempFile::new().unwrap();
            f.write_all(&elf).unwrap();
            f.flush().unwrap();
            let path = f.into_temp_path();
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                let mut perms = std::fs::metadata(&path).unwrap().permissions();
                perms.set_mode(0o755);
                std::fs::set_permissions(&path, perms).unwrap();
            }
            path
        };
        let mut spec = tracebin_tracer::RunSpec::new(&*path);
        spec.timeout_s = 10;
        let trace = match tracebin_tracer::collect(&spec) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("[acceptance] criterion 9 SKIP (platform-gated): {e}");
                return;
            }
        };
        let got = sets(&trace);
        assert_eq!(got.0, expected.0, "instructions differ at base {base:#x}");
        assert_eq!(got.1, expected.1, "edges differ at base {base:#x}");
        assert_eq!(got.2, expected.2, "leaders differ at base {base:#x}");
        assert!(!trace.is_partial());
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 9 took {secs:.1}s, budget is 10s");
    eprintln!(
        "[acceptance] criterion 9 PASS: live jump_table traces equal the expected \
         trace at load bases {:#x} and {:#x} ({secs:.2}s)",
        corpus::DEFAULT_ELF_BASE,
        corpus::ALT_ELF_BASE
    );
}

#[test]
fn criterion_10_trojan_poc_end_to_end() {
    let started = Instant::now();

    // Hidden-and-reached: plan from the evaluator's own findings on
    // jump_table, patch the top-ranked site, re-disassemble, re-run.
    let case = corpus::gen("jump_table").unwrap();
    let view = recursive_descent(&case.image, &[case.entry], HeuristicConfig::default());
    let report = evaluate(&case.expected_trace, &view, case.name).unwrap();
    let xs = explain(&case.expected_trace, &view, &report).unwrap();
    let plans = patch::plan(&report, &xs, &case.image, Marker::Ud2).unwrap();
    let top = &plans[0];
    assert_eq!(top.rationale, patch::Rationale::TargetOfIndirect);

    let patched = patch::apply(&case.image, top).unwrap();
    let patched_view =
        recursive_descent(&patched, &[case.entry], HeuristicConfig::default());
    let run = emulate_image(&patched, case.entry, "patched", 100_000).unwrap();
    assert_eq!(
        run.exit,
        EmuExit::Halted(HaltSignal::Ud2, top.target_loc.offset),
        "the marker must execute"
    );
    assert_eq!(
        patch::verify(&run.trace, &patched_view, top),
        PocVerdict::HiddenAndReached
    );

    // Visible: on the CET image, keep the endbr landing pad intact and
    // patch the instruction after it; an endbr-scanning descent then
    // covers the marker.
    let cet = corpus::gen("jump_table_cet").unwrap();
    let t1 = cet.label("t1");
    let after_endbr = t1 + 4;
    let mov = cet
        .ground_truth
        .iter()
        .find(|t| t.offset == after_endbr)
        .expect("instruction after the landing pad");
    let mut patch_bytes = Marker::Ud2.bytes().to_vec();
    patch_bytes.resize(mov.bytes.len(), 0x90);
    let visible_plan = patch::PatchPlan {
        target_loc: addr(after_endbr),
        original_bytes: mov.bytes.clone(),
        patch_bytes,
        marker: Marker::Ud2,
        rationale: patch::Rationale::TargetOfIndirect,
        missed_block_size: 6,
    };
    let patched_cet = patch::apply(&cet.image, &visible_plan).unwrap();
    let cfg = HeuristicConfig { endbr_scan: true, ..Default::default() };
    let cet_view = recursive_descent(&patched_cet, &[cet.entry], cfg);
    let cet_run = emulate_image(&patched_cet, cet.entry, "patched", 100_000).unwrap();
    assert_eq!(
        patch::verify(&cet_run.trace, &cet_view, &visible_plan),
        PocVerdict::Visible
    );

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 10 took {secs:.1}s, budget is 10s");
    eprintln!(
        "[acceptance] criterion 10 PASS: planned marker patch is \
         hidden_and_reached without endbr coverage, visible with it ({secs:.2}s)"
    );
}

/// Not a numbered criterion: the categorize counts on the hand-built
/// mixed fixture, pinned here because the corpus advertises them.
#[test]
fn cbr_return_mix_categorization() {
    let case = corpus::gen("cbr_return_mix").unwrap();
    let mut view = case.truth_view();
    // Drop the taken-branch target block (2 insts) and the post-return
    // continuation block (3 insts) from an otherwise perfect view.
    let drop: Vec<u64> = case
        .ground_truth
        .iter()
        .filter(|t| {
            (t.offset >= case.label("cbr_target") && t.offset < case.label("join"))
                || (t.offset >= case.label("cont") && t.offset < case.label("fn"))
        })
        .map(|t| t.offset)
        .collect();
    let mut pruned = DisasmView::new(view.source_name.clone(), 0);
    for (off, r) in view.insts() {
        if !drop.contains(off) {
            pruned.insert(r.clone());
        }
    }
    view = pruned;

    let report = evaluate(&case.expected_trace, &view, case.name).unwrap();
    assert_eq!(report.missing_count, 5);
    let xs = explain(&case.expected_trace, &view, &report).unwrap();
    let c = tracebin_core::explain::categorize(&xs);
    assert_eq!(c.cbr, 2);
    assert_eq!(c.ret, 3);
    assert_eq!(c.direct, 0);
    assert_eq!(c.indirect, 0);
    assert_eq!(c.unattributed, 0);
}

/// Report deltas across two disassembly modes equal plain set algebra
/// over their error locations.
#[test]
fn diff_of_two_modes_matches_set_difference() {
    let case = corpus::gen("jump_table").unwrap();
    let lin = linear_sweep(&case.image, 0, HeuristicConfig::default());
    let rec = recursive_descent(&case.image, &[case.entry], HeuristicConfig::default());
    let ra = evaluate(&case.expected_trace, &lin, case.name).unwrap();
    let rb = evaluate(&case.expected_trace, &rec, case.name).unwrap();
    let delta = tracebin_core::eval::diff_reports(&ra, &rb).unwrap();

    let la = ra.error_locs();
    let lb = rb.error_locs();
    assert_eq!(delta.only_a, la.difference(&lb).copied().collect());
    assert_eq!(delta.only_b, lb.difference(&la).copied().collect());
    assert_eq!(delta.both, la.intersection(&lb).copied().collect());
    // The sweep covers the arms the descent cannot reach.
    assert!(delta.only_b.len() >= 14);
}

/// The redundant-jump failure shape: a tool that loses the thread at a
/// jump-to-next-instruction leaves a miss attributed to a direct edge
/// whose source jump it decoded correctly. Together with the
/// jump-table (indirect) and mixed (cbr/return) fixtures this pins all
/// four control-flow categories on corpus ground truth.
#[test]
fn redundant_jump_miss_attributes_to_direct_edge() {
    let case = corpus::gen("redundant_jump").unwrap();
    let after = case.label("after");
    let mut view = DisasmView::new("tool", 0);
    for t in &case.ground_truth {
        if t.offset < after {
            view.insert(ViewInst {
                offset: t.offset,
                len: t.len(),
                bytes: Some(t.bytes.clone()),
                mnemonic: None,
            });
        }
    }
    let report = evaluate(&case.expected_trace, &view, case.name).unwrap();
    assert_eq!(report.missing_count, 4);
    let xs = explain(&case.expected_trace, &view, &report).unwrap();
    assert_eq!(xs.len(), 1);
    assert_eq!(xs[0].verdict, Verdict::TargetError);
    let e = xs[0].via_edge.unwrap();
    assert_eq!(e.kind, EdgeKind::Direct);
    assert_eq!(e.src.offset, case.label("jmp_site"));
    assert_eq!(e.dst.offset, after);
    let c = tracebin_core::explain::categorize(&xs);
    assert_eq!(c.direct, 4);
}

/// The no-return inference failure shape: a descent that assumes a
/// callee never returns drops the continuation after the call, and the
/// explanation pins the miss on the return edge whose source (the ret)
/// was disassembled fine.
#[test]
fn noreturn_inference_miss_attributes_to_return_edge() {
    use std::collections::BTreeSet as Set;
    let case = corpus::gen("cbr_return_mix").unwrap();
    let noreturn: Set<u64> = Set::from([case.label("fn")]);
    let view = tracebin_core::refdisasm::recursive_descent_with_noreturn(
        &case.image,
        &[case.entry],
        HeuristicConfig::default(),
        &noreturn,
    );
    let report = evaluate(&case.expected_trace, &view, case.name).unwrap();
    // cont (3 insts) and exit (3 insts) vanish with the continuation.
    assert_eq!(report.missing_count, 6);

    let xs = explain(&case.expected_trace, &view, &report).unwrap();
    let cont = xs.iter().find(|x| x.block_leader.offset == case.label("cont")).unwrap();
    assert_eq!(cont.verdict, Verdict::TargetError);
    assert_eq!(cont.via_edge.unwrap().kind, EdgeKind::Return);
    assert_eq!(cont.via_edge.unwrap().src.offset, case.label("fn_ret"));
    let exit = xs.iter().find(|x| x.block_leader.offset == case.label("exit")).unwrap();
    assert_eq!(exit.verdict, Verdict::SourceError);
}

/// Trace files round-trip for arbitrary well-formed trace sets, not
/// just the hand-written samples.
#[test]
fn trace_format_round_trips_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ace_f0d5);
    for _ in 0..200 {
        let t = random_trace(&mut rng, 120);
        let text = tracebin_core::trace_io::serialize_trace(&t);
        let back = tracebin_core::trace_io::parse_trace(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(tracebin_core::trace_io::serialize_trace(&back), text);
    }
}

#[test]
fn categorize_empty_is_all_zeros() {
    let c = tracebin_core::explain::categorize(&[]);
    assert_eq!(c.total(), 0);
    assert_eq!((c.cbr, c.direct, c.indirect, c.ret, c.unattributed), (0, 0, 0, 0, 0));
}

/// Set-algebra cross-check: on every fixture, the descent's errors are
/// exactly the traced instructions that static reachability (an
/// independent walk over the ground-truth map, not the decoder's
/// worklist) cannot reach from the entry.
#[test]
fn descent_errors_equal_unreachable_traced_set() {
    use tracebin_core::refdisasm::InstClass;
    for name in corpus::CASE_NAMES {
        let case = corpus::gen(name).unwrap();
        let by_off: std::collections::BTreeMap<u64, &corpus::TruthInst> =
            case.ground_truth.iter().map(|t| (t.offset, t)).collect();

        let mut reach: BTreeSet<u64> = BTreeSet::new();
        let mut work = vec![case.entry];
        while let Some(off) = work.pop() {
            if !reach.insert(off) {
                continue;
            }
            let Some(t) = by_off.get(&off) else { continue };
            let falls = !matches!(
                t.class,
                InstClass::DirectJmp | InstClass::Return | InstClass::Halting
            );
            if falls {
                work.push(t.offset + t.len());
            }
            if matches!(
                t.class,
                InstClass::Cbr | InstClass::DirectJmp | InstClass::DirectCall
            ) {
                let d = tracebin_core::refdisasm::decode_len(&case.image, t.offset).unwrap();
                work.push(d.rel_target.unwrap());
            }
        }

        let view = recursive_descent(&case.image, &[case.entry], HeuristicConfig::default());
        let report = evaluate(&case.expected_trace, &view, name).unwrap();
        let missing: BTreeSet<u64> = report
            .errors
            .iter()
            .filter(|e| e.kind == ErrorKind::Missing)
            .map(|e| e.loc.offset)
            .collect();
        let unreachable_traced: BTreeSet<u64> = case
            .expected_trace
            .insts()
            .keys()
            .map(|l| l.offset)
            .filter(|o| !reach.contains(o))
            .collect();
        assert_eq!(missing, unreachable_traced, "{name}");
        assert_eq!(report.mismatch_count, 0, "{name}");
    }
}

/// Also outside the numbered list: evaluator growth under merged traces
/// mirrors the documented multi-run coverage story.
#[test]
fn merge_grows_coverage_like_union_of_runs() {
    // Two variants of the jump table image that exercise different arm
    // subsets cannot exist (all arms always run), so split the expected
    // trace by arms to simulate two input vectors and check the merge
    // equals the union computed instruction by instruction.
    let case = corpus::gen("jump_table").unwrap();
    let t2_start = case.label("t2");
    let full = &case.expected_trace;

    let mk = |keep: Box<dyn Fn(u64) -> bool>| {
        let mut b = TraceSetBuilder::new();
        b.add_module(full.modules()[0].clone());
        for (loc, inst) in full.insts() {
            if keep(loc.offset) {
                b.add_inst(InstRecord::new(*loc, inst.bytes.clone())).unwrap();
            }
        }
        for e in full.edges() {
            if keep(e.src.offset) && keep(e.dst.offset) {
                b.add_edge(*e);
                b.add_leader(e.dst);
            }
        }
        b.add_leader(addr(0));
        b.build().unwrap()
    };
    let run1 = mk(Box::new(move |o| o < t2_start));
    let run2_start = case.label("t1");
    let run2 = mk(Box::new(move |o| o < run2_start || o >= t2_start));

    let merged = merge(&[run1.clone(), run2.clone()]).unwrap();
    let union: BTreeSet<NormAddr> = run1
        .insts()
        .keys()
        .chain(run2.insts().keys())
        .copied()
        .collect();
    assert_eq!(merged.insts().keys().copied().collect::<BTreeSet<_>>(), union);
    assert!(merged.insts().len() >= run1.insts().len().max(run2.insts().len()));
}

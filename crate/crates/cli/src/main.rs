//! `tracebin`: evaluate disassembler output against execution-trace
//! oracles collected from the binary itself.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tracebin_core::corpus;
use tracebin_core::emulate::emulate_image;
use tracebin_core::eval::{evaluate, parse_report, serialize_report, ErrorReport};
use tracebin_core::explain::{
    categorize, explain, parse_explanations, serialize_explanations, Explanation,
};
use tracebin_core::ingest::{
    parse_interchange, parse_objdump, preset_base, serialize_interchange, DisasmView,
};
use tracebin_core::model::{merge, ModuleId, TraceSet};
use tracebin_core::patch::{self, Marker, PatchPlan};
use tracebin_core::refdisasm::{
    linear_sweep, recursive_descent_with_noreturn, HeuristicConfig,
};
use tracebin_core::trace_io::{parse_trace, serialize_trace};

mod batch;

#[derive(Parser)]
#[command(
    name = "tracebin",
    version,
    about = "Find guaranteed disassembly errors using executed-instruction traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace a live run of a binary into a trace file (Linux x86-64).
    Trace(TraceArgs),
    /// Parse disassembler output into a normalized view file.
    Ingest(IngestArgs),
    /// Merge several trace files into one.
    Merge(MergeArgs),
    /// Cross-reference a trace against a view and report errors.
    Eval(EvalArgs),
    /// Attribute missed blocks to source/target control-flow causes.
    Explain(ExplainArgs),
    /// Run the reference disassembler over a raw image.
    Refdisasm(RefdisasmArgs),
    /// Generate ground-truthed fixture images.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Plan, apply and verify marker patches in missed regions.
    #[command(subcommand)]
    Patch(PatchCmd),
    /// Evaluate many (trace, view) pairs and summarize per tool.
    Batch(batch::BatchArgs),
    /// Render a report (and optional explanations) for reading.
    Report(ReportArgs),
}

#[derive(Args)]
struct TraceArgs {
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
    /// Kill the target and emit a partial trace after this many seconds.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Keep only the main module's instructions in the output.
    #[arg(long)]
    main_module_only: bool,
    /// Redirect the target's stdin from this file.
    #[arg(long)]
    stdin_file: Option<PathBuf>,
    /// Extra KEY=VALUE environment entries for the target.
    #[arg(long = "env")]
    env: Vec<String>,
    /// Target program and its arguments.
    #[arg(trailing_var_arg = true, required = true)]
    prog: Vec<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum IngestFormat {
    Objdump,
    Idf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, value_enum)]
    format: IngestFormat,
    /// Base-address preset of the producing tool.
    #[arg(long)]
    preset: Option<String>,
    /// Explicit base address (hex), overriding preset and header.
    #[arg(long, value_parser = parse_hex)]
    base: Option<u64>,
    /// Tool name recorded in the view.
    #[arg(long, default_value = "unknown")]
    tool: String,
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    view: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a JSON mirror next to the CSV report.
    #[arg(long)]
    json: bool,
    /// Module to evaluate (defaults to the main module, id 0).
    #[arg(long, default_value_t = 0)]
    module: u32,
    /// Target name recorded in the report (defaults to the trace file name).
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    view: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    module: u32,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DisasmMode {
    Linear,
    Recursive,
}

#[derive(Args)]
struct RefdisasmArgs {
    /// Raw code image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum)]
    mode: DisasmMode,
    /// Entry offsets (hex); defaults to 0.
    #[arg(long = "entry", value_parser = parse_hex)]
    entries: Vec<u64>,
    /// Scan for endbr64 landing pads after the worklist drains.
    #[arg(long)]
    endbr: bool,
    /// Accepted for compatibility; the descent already stops at returns.
    #[arg(long)]
    epilogue_stop: bool,
    /// Linear mode: stop at the first invalid opcode instead of
    /// skipping a byte.
    #[arg(long)]
    no_skip_byte: bool,
    /// Direct-call targets (hex) assumed not to return.
    #[arg(long = "noreturn", value_parser = parse_hex)]
    noreturn: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Write <name>.img, <name>.truth.idf, <name>.trace and <name>.elf.
    Gen(CorpusGenArgs),
    /// List available case names.
    List,
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Case name, or "all".
    name: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Load address for the emitted executable.
    #[arg(long, value_parser = parse_hex, default_value = "400000")]
    base: u64,
}

#[derive(Subcommand)]
enum PatchCmd {
    /// Rank marker-patch sites from a report and its explanations.
    Plan(PatchPlanArgs),
    /// Apply one plan to an image or fixture ELF.
    Apply(PatchApplyArgs),
    /// Check a plan against the patched binary's view and trace.
    Verify(PatchVerifyArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MarkerArg {
    Ud2,
    Int3,
}

#[derive(Args)]
struct PatchPlanArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long = "explain")]
    explanations: PathBuf,
    /// Raw image the report was computed over.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value = "ud2")]
    marker: MarkerArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PatchApplyArgs {
    /// Image or fixture ELF to patch.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Which plan in the file to apply.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Undo instead of apply.
    #[arg(long)]
    revert: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PatchVerifyArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// View produced by the disassembler under test on the patched binary.
    #[arg(long)]
    view: PathBuf,
    /// Trace file of the patched binary.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Patched fixture ELF to obtain a trace from.
    #[arg(long)]
    elf: Option<PathBuf>,
    /// With --elf: emulate instead of live tracing.
    #[arg(long)]
    emulate: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long = "explain")]
    explanations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
    Json,
}

fn parse_hex(s: &str) -> std::result::Result<u64, String> {
    let t = s.trim_start_matches("0x");
    u64::from_str_radix(t, 16).map_err(|e| format!("bad hex value '{s}': {e}"))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_trace(path: &Path) -> Result<TraceSet> {
    parse_trace(&read_to_string(path)?).with_context(|| format!("parsing trace {}", path.display()))
}

fn load_view(path: &Path) -> Result<DisasmView> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "view".into());
    let view = parse_interchange(&read_to_string(path)?, &name)
        .with_context(|| format!("parsing view {}", path.display()))?;
    // Normalized views carry BASE 0; rebase if the producer did not.
    if view.declared_base != 0 {
        eprintln!(
            "note: {} declares base {:#x}; rebasing to module-relative offsets",
            path.display(),
            view.declared_base
        );
    }
    Ok(view.rebase()?)
}

/// Files can be raw images or fixture ELFs; detect by magic.
fn load_image(path: &Path) -> Result<(Vec<u8>, Option<corpus::LoadedElf>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(&[0x7f, b'E', b'L', b'F']) {
        let loaded = corpus::read_elf_image(&bytes)?;
        Ok((bytes, Some(loaded)))
    } else {
        Ok((bytes, None))
    }
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    if !cfg!(all(target_os = "linux", target_arch = "x86_64")) {
        // Exit 2: a usage problem on this host, not a runtime failure.
        eprintln!("tracebin trace requires x86-64 Linux; other subcommands remain available");
        std::process::exit(2);
    }
    let mut spec = tracebin_tracer::RunSpec::new(&args.prog[0]);
    spec.args = args.prog[1..].to_vec();
    spec.env = args.env;
    spec.stdin_file = args.stdin_file;
    spec.timeout_s = args.timeout;
    let trace = tracebin_tracer::collect(&spec)?;
    let trace = if args.main_module_only {
        trace.filter_module(ModuleId(0))
    } else {
        trace
    };
    if trace.is_partial() {
        eprintln!("warning: timeout hit; the trace is partial (still sound)");
    }
    write_string(&args.out, &serialize_trace(&trace))?;
    eprintln!(
        "traced {} unique instructions, {} edges, {} leaders",
        trace.insts().len(),
        trace.edges().len(),
        trace.leaders().len()
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let text = read_to_string(&args.input)?;
    let mut view = match args.format {
        IngestFormat::Objdump => parse_objdump(&text, &args.tool)?,
        IngestFormat::Idf => parse_interchange(&text, &args.tool)?,
    };
    if let Some(name) = &args.preset {
        view.declared_base = preset_base(name)
            .ok_or_else(|| anyhow!("unknown preset '{name}' (expected ghidra|angr|none)"))?;
    }
    if let Some(base) = args.base {
        view.declared_base = base;
    }
    let rebased = view.rebase()?;
    write_string(&args.out, &serialize_interchange(&rebased))?;
    eprintln!(
        "ingested {} records (base {:#x} removed)",
        rebased.insts().len(),
        view.declared_base
    );
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let mut traces = Vec::new();
    for p in &args.traces {
        traces.push(load_trace(p)?);
    }
    let merged = merge(&traces)?;
    write_string(&args.out, &serialize_trace(&merged))?;
    eprintln!(
        "merged {} traces into {} unique instructions",
        args.traces.len(),
        merged.insts().len()
    );
    Ok(())
}

fn eval_pair(
    trace: &TraceSet,
    view: &DisasmView,
    module: u32,
    target: &str,
) -> Result<ErrorReport> {
    let filtered = trace.filter_module(ModuleId(module));
    if filtered.insts().is_empty() {
        eprintln!(
            "warning: module {module} has no traced instructions; \
             modules present: {:?}",
            trace.active_modules()
        );
    }
    Ok(evaluate(&filtered, view, target)?)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let view = load_view(&args.view)?;
    let target = args.target.unwrap_or_else(|| {
        args.trace
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "target".into())
    });
    let report = eval_pair(&trace, &view, args.module, &target)?;
    write_string(&args.out, &serialize_report(&report))?;
    if args.json {
        let json_path = args.out.with_extension("json");
        write_string(&json_path, &serde_json::to_string_pretty(&report)?)?;
    }
    eprintln!(
        "{}: {} missing + {} mismatch = {} errors (bucket {})",
        report.tool,
        report.missing_count,
        report.mismatch_count,
        report.total(),
        report.bucket
    );
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let trace = load_trace(&args.trace)?.filter_module(ModuleId(args.module));
    let view = load_view(&args.view)?;
    let report = parse_report(&read_to_string(&args.report)?)?;
    let xs = explain(&trace, &view, &report)?;
    write_string(&args.out, &serialize_explanations(ModuleId(args.module), &xs))?;
    let c = categorize(&xs);
    eprintln!(
        "{} missed blocks: cbr={} direct={} indirect={} return={} unattributed={}",
        xs.len(),
        c.cbr,
        c.direct,
        c.indirect,
        c.ret,
        c.unattributed
    );
    Ok(())
}

fn cmd_refdisasm(args: RefdisasmArgs) -> Result<()> {
    // Accept a raw image or a fixture ELF (whose entry becomes the
    // default entry point).
    let (bytes, loaded) = load_image(&args.image)?;
    let (image, default_entry) = match loaded {
        Some(l) => (l.image, l.entry_offset),
        None => (bytes, 0),
    };
    let cfg = HeuristicConfig {
        endbr_scan: args.endbr,
        epilogue_stop: args.epilogue_stop,
        skip_byte_on_invalid: !args.no_skip_byte,
    };
    let entries = if args.entries.is_empty() {
        vec![default_entry]
    } else {
        args.entries.clone()
    };
    let view = match args.mode {
        DisasmMode::Linear => linear_sweep(&image, entries[0], cfg),
        DisasmMode::Recursive => {
            let noreturn: BTreeSet<u64> = args.noreturn.iter().copied().collect();
            recursive_descent_with_noreturn(&image, &entries, cfg, &noreturn)
        }
    };
    write_string(&args.out, &serialize_interchange(&view))?;
    eprintln!("decoded {} records", view.insts().len());
    Ok(())
}

fn cmd_corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::List => {
            for name in corpus::CASE_NAMES {
                println!("{name}");
            }
            Ok(())
        }
        CorpusCmd::Gen(args) => {
            let names: Vec<&str> = if args.name == "all" {
                corpus::CASE_NAMES.to_vec()
            } else {
                vec![args.name.as_str()]
            };
            std::fs::create_dir_all(&args.out_dir)?;
            for name in names {
                let case = corpus::gen(name)?;
                let dir = &args.out_dir;
                std::fs::write(dir.join(format!("{name}.img")), &case.image)?;
                write_string(
                    &dir.join(format!("{name}.truth.idf")),
                    &serialize_interchange(&case.truth_view()),
                )?;
                write_string(
                    &dir.join(format!("{name}.trace")),
                    &serialize_trace(&case.expected_trace),
                )?;
                let elf = corpus::emit_elf(&case, args.base)?;
                let elf_path = dir.join(format!("{name}.elf"));
                std::fs::write(&elf_path, elf)?;
                #[cfg(unix)]
                {
                    use std::os::unix::fs::PermissionsExt;
                    let mut perms = std::fs::metadata(&elf_path)?.permissions();
                    perms.set_mode(0o755);
                    std::fs::set_permissions(&elf_path, perms)?;
                }
                eprintln!("{name}: {} bytes, entry {:#x}", case.image.len(), case.entry);
            }
            Ok(())
        }
    }
}

fn cmd_patch(cmd: PatchCmd) -> Result<()> {
    match cmd {
        PatchCmd::Plan(args) => {
            let report = parse_report(&read_to_string(&args.report)?)?;
            let (_, xs): (ModuleId, Vec<Explanation>) =
                parse_explanations(&read_to_string(&args.explanations)?)?;
            let (bytes, loaded) = load_image(&args.image)?;
            let image = loaded.map(|l| l.image).unwrap_or(bytes);
            let marker = match args.marker {
                MarkerArg::Ud2 => Marker::Ud2,
                MarkerArg::Int3 => Marker::Int3,
            };
            let plans = patch::plan(&report, &xs, &image, marker)?;
            write_string(&args.out, &patch::serialize_plans(&plans))?;
            for (i, p) in plans.iter().enumerate() {
                eprintln!(
                    "plan {i}: {} at {:x} ({} bytes, block of {}, {:?})",
                    p.marker.name(),
                    p.target_loc.offset,
                    p.patch_bytes.len(),
                    p.missed_block_size,
                    p.rationale
                );
            }
            Ok(())
        }
        PatchCmd::Apply(args) => {
            let plans = patch::parse_plans(&read_to_string(&args.plan)?)?;
            let plan = plans
                .get(args.index)
                .ok_or_else(|| anyhow!("plan index {} out of range", args.index))?;
            let (bytes, loaded) = load_image(&args.input)?;
            let out_bytes = match loaded {
                None => apply_plan(&bytes, plan, args.revert)?,
                Some(l) => {
                    // Patch the image region inside the ELF in place.
                    let patched = apply_plan(&l.image, plan, args.revert)?;
                    let mut whole = bytes;
                    let at = l.image_file_offset as usize;
                    whole[at..at + patched.len()].copy_from_slice(&patched);
                    whole
                }
            };
            std::fs::write(&args.out, out_bytes)?;
            #[cfg(unix)]
            if loaded_is_elf(&args.out) {
                use std::os::unix::fs::PermissionsExt;
                let mut perms = std::fs::metadata(&args.out)?.permissions();
                perms.set_mode(0o755);
                std::fs::set_permissions(&args.out, perms)?;
            }
            eprintln!(
                "{} plan {} at {:x}",
                if args.revert { "reverted" } else { "applied" },
                args.index,
                plan.target_loc.offset
            );
            Ok(())
        }
        PatchCmd::Verify(args) => {
            let plans = patch::parse_plans(&read_to_string(&args.plan)?)?;
            let plan = plans
                .get(args.index)
                .ok_or_else(|| anyhow!("plan index {} out of range", args.index))?;
            let view = load_view(&args.view)?;
            let trace = match (&args.trace, &args.elf) {
                (Some(t), None) => load_trace(t)?,
                (None, Some(elf_path)) => {
                    if args.emulate {
                        let (_, loaded) = load_image(elf_path)?;
                        let l = loaded
                            .ok_or_else(|| anyhow!("{} is not an ELF", elf_path.display()))?;
                        emulate_image(&l.image, l.entry_offset, "patched", 10_000_000)
                            .map_err(|e| anyhow!("emulation failed: {e}"))?
                            .trace
                    } else {
                        let spec = tracebin_tracer::RunSpec::new(elf_path);
                        tracebin_tracer::collect(&spec)
                            .map_err(|e| anyhow!(patch::PatchError::TraceFailure(e.to_string())))?
                            .filter_module(ModuleId(0))
                    }
                }
                _ => bail!("provide exactly one of --trace or --elf"),
            };
            let verdict = patch::verify(&trace, &view, plan);
            println!(
                "{}",
                match verdict {
                    patch::PocVerdict::HiddenAndReached => "hidden_and_reached",
                    patch::PocVerdict::Visible => "visible",
                    patch::PocVerdict::Unreached => "unreached",
                }
            );
            Ok(())
        }
    }
}

fn loaded_is_elf(path: &Path) -> bool {
    std::fs::read(path)
        .map(|b| b.starts_with(&[0x7f, b'E', b'L', b'F']))
        .unwrap_or(false)
}

fn apply_plan(image: &[u8], plan: &PatchPlan, revert: bool) -> Result<Vec<u8>> {
    Ok(if revert {
        patch::revert(image, plan)?
    } else {
        patch::apply(image, plan)?
    })
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let report = parse_report(&read_to_string(&args.report)?)?;
    match args.format {
        ReportFormat::Csv => print!("{}", serialize_report(&report)),
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        ReportFormat::Table => {
            println!(
                "target {}  tool {}  module {}",
                report.target, report.tool, report.module
            );
            println!(
                "  missing {:>6}\n  mismatch {:>5}\n  total {:>8}  bucket {}",
                report.missing_count,
                report.mismatch_count,
                report.total(),
                batch::color_bucket(report.bucket)
            );
            if report.length_only_count > 0 {
                println!("  ({} matches compared length only)", report.length_only_count);
            }
            if let Some(xp) = &args.explanations {
                let (_, xs) = parse_explanations(&read_to_string(xp)?)?;
                let c = categorize(&xs);
                println!(
                    "  control flow: cbr {} / direct {} / indirect {} / return {} / unattributed {}",
                    c.cbr, c.direct, c.indirect, c.ret, c.unattributed
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Trace(a) => cmd_trace(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Refdisasm(a) => cmd_refdisasm(a),
        Command::Corpus(c) => cmd_corpus(c),
        Command::Patch(c) => cmd_patch(c),
        Command::Batch(a) => return batch::run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

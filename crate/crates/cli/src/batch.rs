//! Batch evaluation: many (trace, view) pairs in one run, summarized
//! per tool by error-count buckets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use tracebin_core::eval::{diff_reports, serialize_report, Bucket, ErrorReport};
use tracebin_core::explain::{explain, serialize_explanations};
use tracebin_core::ingest::parse_interchange;
use tracebin_core::model::ModuleId;
use tracebin_core::trace_io::parse_trace;

#[derive(Args)]
pub struct BatchArgs {
    /// Batch specification (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    /// Override the spec's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEntry {
    pub trace_file: PathBuf,
    pub view_file: PathBuf,
    pub tool_name: String,
    pub target_name: String,
    /// Module under evaluation; main module when omitted.
    #[serde(default)]
    pub module: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BatchFormat {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSpec {
    pub entries: Vec<BatchEntry>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub format: BatchFormat,
}

#[derive(Debug, Default, Clone, Serialize)]
struct ToolSummary {
    z: usize,
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    /// Total instruction errors across all targets.
    t: u64,
}

pub fn color_bucket(b: Bucket) -> String {
    let plain = b.to_string();
    if std::env::var("TRACEBIN_COLOR").as_deref() != Ok("1") {
        return plain;
    }
    let code = match b {
        Bucket::Z => "32",
        Bucket::A => "36",
        Bucket::B => "33",
        Bucket::C => "35",
        Bucket::D => "31",
    };
    format!("\x1b[{code}m{plain}\x1b[0m")
}

fn eval_entry(entry: &BatchEntry, out_dir: &Path) -> Result<ErrorReport> {
    let trace_text = std::fs::read_to_string(&entry.trace_file)
        .with_context(|| format!("reading {}", entry.trace_file.display()))?;
    let trace = parse_trace(&trace_text)?.filter_module(ModuleId(entry.module));
    let view_text = std::fs::read_to_string(&entry.view_file)
        .with_context(|| format!("reading {}", entry.view_file.display()))?;
    let view = parse_interchange(&view_text, &entry.tool_name)?.rebase()?;

    let report = tracebin_core::eval::evaluate(&trace, &view, &entry.target_name)?;
    let stem = format!("{}__{}", entry.target_name, entry.tool_name);
    std::fs::write(out_dir.join(format!("{stem}.report.csv")), serialize_report(&report))?;
    let xs = explain(&trace, &view, &report)?;
    std::fs::write(
        out_dir.join(format!("{stem}.explain.csv")),
        serialize_explanations(ModuleId(entry.module), &xs),
    )?;
    Ok(report)
}

pub fn run(args: BatchArgs) -> ExitCode {
    match run_inner(args) {
        Ok(failed) => {
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run_inner(args: BatchArgs) -> Result<usize> {
    let spec_text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: BatchSpec = serde_json::from_str(&spec_text).context("parsing batch spec")?;
    if let Some(dir) = args.out_dir {
        spec.output_dir = dir;
    }
    if spec.entries.is_empty() {
        anyhow::bail!("batch spec has no entries");
    }
    std::fs::create_dir_all(&spec.output_dir)?;

    // Evaluate entries in parallel with a bounded worker count; results
    // keep their entry index so output order is deterministic.
    let results: Mutex<Vec<(usize, Result<ErrorReport>)>> = Mutex::new(Vec::new());
    let next: Mutex<usize> = Mutex::new(0);
    let workers = args.jobs.clamp(1, spec.entries.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= spec.entries.len() {
                    break;
                }
                let r = eval_entry(&spec.entries[i], &spec.output_dir);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);

    let mut failed = 0usize;
    let mut tools: BTreeMap<String, ToolSummary> = BTreeMap::new();
    let mut per_target: BTreeMap<String, Vec<(String, ErrorReport)>> = BTreeMap::new();
    for (i, result) in results {
        let entry = &spec.entries[i];
        match result {
            Err(e) => {
                failed += 1;
                eprintln!("entry {} ({} / {}): {e:#}", i, entry.target_name, entry.tool_name);
            }
            Ok(report) => {
                let s = tools.entry(entry.tool_name.clone()).or_default();
                match report.bucket {
                    Bucket::Z => s.z += 1,
                    Bucket::A => s.a += 1,
                    Bucket::B => s.b += 1,
                    Bucket::C => s.c += 1,
                    Bucket::D => s.d += 1,
                }
                s.t += report.total();
                per_target
                    .entry(entry.target_name.clone())
                    .or_default()
                    .push((entry.tool_name.clone(), report));
            }
        }
    }

    // Cross-tool deltas for targets evaluated by several tools.
    for (target, reports) in &per_target {
        for i in 0..reports.len() {
            for j in i + 1..reports.len() {
                let (ta, ra) = &reports[i];
                let (tb, rb) = &reports[j];
                if let Ok(delta) = diff_reports(ra, rb) {
                    let path = spec
                        .output_dir
                        .join(format!("{target}__{ta}__vs__{tb}.diff.json"));
                    std::fs::write(path, serde_json::to_string_pretty(&delta)?)?;
                }
            }
        }
    }

    let summary_rows: Vec<(String, ToolSummary)> =
        tools.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    match spec.format {
        BatchFormat::Table => {
            println!("{:<16} {:>4} {:>4} {:>4} {:>4} {:>4} {:>10}", "tool", "Z", "A", "B", "C", "D", "T");
            for (tool, s) in &summary_rows {
                println!(
                    "{tool:<16} {:>4} {:>4} {:>4} {:>4} {:>4} {:>10}",
                    s.z, s.a, s.b, s.c, s.d, s.t
                );
            }
        }
        BatchFormat::Csv => {
            println!("tool,Z,A,B,C,D,T");
            for (tool, s) in &summary_rows {
                println!("{tool},{},{},{},{},{},{}", s.z, s.a, s.b, s.c, s.d, s.t);
            }
        }
        BatchFormat::Json => {
            let map: BTreeMap<&str, &ToolSummary> =
                summary_rows.iter().map(|(k, v)| (k.as_str(), v)).collect();
            println!("{}", serde_json::to_string_pretty(&map)?);
        }
    }

    // Summary file mirrors stdout; run info goes to a sidecar so data
    // files stay byte-reproducible.
    let mut summary_csv = String::from("tool,Z,A,B,C,D,T\n");
    for (tool, s) in &summary_rows {
        summary_csv.push_str(&format!(
            "{tool},{},{},{},{},{},{}\n",
            s.z, s.a, s.b, s.c, s.d, s.t
        ));
    }
    std::fs::write(spec.output_dir.join("summary.csv"), summary_csv)?;
    let meta = format!(
        "tracebin {} batch\nentries: {}\nfailed: {}\nfinished_unix: {}\n",
        env!("CARGO_PKG_VERSION"),
        spec.entries.len(),
        failed,
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    );
    std::fs::write(spec.output_dir.join("batch_meta.txt"), meta)?;

    Ok(failed)
}

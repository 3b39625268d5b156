//! Core library for evaluating disassembler output against an
//! execution-trace oracle.
//!
//! The oracle is a *unique instruction trace*: the set of distinct
//! (address, bytes) instruction tuples observed while running the target
//! binary. Every instruction in the trace is real by construction, so any
//! traced instruction that a disassembler misses or decodes differently is
//! a guaranteed error — no source code, symbols, or compiler toolchain
//! needed. The crate provides:
//!
//! - [`model`]: trace-set domain types, address normalization, merging
//! - [`ingest`]: parsers for disassembler output (objdump listings and a
//!   line-based interchange format) plus base-address rebasing
//! - [`eval`]: the cross-referencing evaluator and error-bucket summary
//! - [`explain`]: source-error / target-error attribution for missed
//!   basic blocks, categorized by control-flow edge kind
//! - [`refdisasm`]: a strict x86-64 subset length decoder with linear
//!   sweep and recursive descent drivers, used as a device under test
//! - [`corpus`]: deterministic ground-truthed fixture images and a
//!   minimal ELF emitter so fixtures can run live
//! - [`emulate`]: a concrete subset emulator that executes fixture
//!   images and records the same trace the live tracer would
//! - [`patch`]: planning, applying and verifying marker patches inside
//!   regions a disassembler missed

pub mod corpus;
pub mod emulate;
pub mod eval;
pub mod explain;
pub mod ingest;
pub mod model;
pub mod patch;
pub mod refdisasm;
pub mod trace_io;

pub use eval::{bucketize, diff_reports, evaluate, Bucket, ErrorKind, ErrorRecord, ErrorReport};
pub use explain::{categorize, explain, CfErrorCounts, Explanation, Verdict};
pub use ingest::{parse_interchange, parse_objdump, serialize_interchange, DisasmView, ViewInst};
pub use model::{
    merge, normalize, EdgeKind, EdgeRecord, InstRecord, ModelError, ModuleId, ModuleInfo,
    NormAddr, TraceSet, TraceSetBuilder,
};
pub use refdisasm::{
    decode_len, linear_sweep, recursive_descent, DecodedInst, HeuristicConfig, InstClass,
};

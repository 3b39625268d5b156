//! Single-step execution tracer for x86-64 Linux.
//!
//! Runs a target under ptrace, single-stepping every instruction and
//! recording the unique instruction set plus control-flow edges and
//! block leaders. The result is sound by construction: every recorded
//! tuple was read out of the target's memory at the moment it was about
//! to execute. Coverage is whatever the run covers; a timeout yields a
//! partial (still sound) trace rather than an error.
//!
//! Stepping is slow compared to binary instrumentation, but it needs no
//! external dependencies and the output semantics are identical; the
//! targets this crate is pointed at are desk-scale fixtures.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use tracebin_core::model::{ModelError, NormAddr, TraceSet};

pub use tracebin_core::refdisasm::classify_transfer;

/// How to run the target binary.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub program_path: PathBuf,
    pub args: Vec<String>,
    /// Extra `KEY=VALUE` entries layered over the inherited environment.
    pub env: Vec<String>,
    pub stdin_file: Option<PathBuf>,
    pub timeout_s: u64,
}

impl RunSpec {
    pub fn new(program_path: impl Into<PathBuf>) -> Self {
        RunSpec {
            program_path: program_path.into(),
            args: Vec::new(),
            env: Vec::new(),
            stdin_file: None,
            timeout_s: 30,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_s.max(1))
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("tracing requires x86-64 Linux; this host is not supported")]
    UnsupportedPlatform,
    #[error("failed to launch target: {0}")]
    LaunchFailure(String),
    #[error("target spawned a thread or child process; multi-task targets are not supported")]
    ThreadedTarget,
    #[error("execution reached unmapped or anonymous code at {0:#x}")]
    UnmappedExecution(u64),
    #[error("instruction bytes changed at {0} (self-modifying code)")]
    SelfModifyingDetected(NormAddr),
    #[error("ptrace: {0}")]
    Sys(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Trace one run of the target, returning its unique instruction trace.
pub fn collect(spec: &RunSpec) -> Result<TraceSet, TraceError> {
    imp::collect(spec)
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod imp {
    use std::collections::BTreeMap;
    use std::ffi::CString;
    use std::mem::MaybeUninit;
    use std::time::Instant;

    use log::{debug, warn};

    use tracebin_core::model::{
        EdgeRecord, InstRecord, ModelError, ModuleId, ModuleInfo, NormAddr, TraceSetBuilder,
    };
    use tracebin_core::refdisasm::{decode_len, InstClass};

    use super::{RunSpec, TraceError};

    const MAX_STEPS: u64 = 50_000_000;

    fn sys_err(what: &str) -> TraceError {
        TraceError::Sys(format!("{what}: {}", std::io::Error::last_os_error()))
    }

    /// Kills and reaps the child unless the run finished on its own.
    struct ChildGuard {
        pid: libc::pid_t,
        alive: bool,
    }

    impl ChildGuard {
        fn kill_and_reap(&mut self) {
            if self.alive {
                unsafe {
                    libc::kill(self.pid, libc::SIGKILL);
                    libc::waitpid(self.pid, std::ptr::null_mut(), 0);
                }
                self.alive = false;
            }
        }
    }

    impl Drop for ChildGuard {
        fn drop(&mut self) {
            self.kill_and_reap();
        }
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    enum Stop {
        /// Single-step trap.
        Step,
        /// An int3 in the target retired (software breakpoint stop).
        Breakpoint,
        Exited(i32),
        Killed(i32),
        /// Stopped by some other signal (ud2's SIGILL, faults).
        Fatal(i32),
        /// clone/fork/vfork ptrace event.
        TaskEvent,
    }

    fn wait_stop(pid: libc::pid_t, deadline: Instant) -> Result<Option<Stop>, TraceError> {
        loop {
            let mut status: libc::c_int = 0;
            let r = unsafe { libc::waitpid(pid, &mut status, libc::WNOHANG) };
            if r < 0 {
                return Err(sys_err("waitpid"));
            }
            if r == 0 {
                if Instant::now() >= deadline {
                    return Ok(None); // timed out while the child runs or blocks
                }
                std::thread::yield_now();
                continue;
            }
            if libc::WIFEXITED(status) {
                return Ok(Some(Stop::Exited(libc::WEXITSTATUS(status))));
            }
            if libc::WIFSIGNALED(status) {
                return Ok(Some(Stop::Killed(libc::WTERMSIG(status))));
            }
            if libc::WIFSTOPPED(status) {
                let sig = libc::WSTOPSIG(status);
                if status >> 16 != 0 {
                    return Ok(Some(Stop::TaskEvent));
                }
                if sig == libc::SIGTRAP {
                    let mut si = MaybeUninit::<libc::siginfo_t>::uninit();
                    let r = unsafe {
                        libc::ptrace(libc::PTRACE_GETSIGINFO, pid, 0, si.as_mut_ptr())
                    };
                    if r < 0 {
                        return Err(sys_err("ptrace(GETSIGINFO)"));
                    }
                    // TRAP_TRACE (2) is the step trap; TRAP_BRKPT (1) or
                    // SI_KERNEL (0x80) mean an int3 in the target retired.
                    return Ok(Some(match unsafe { si.assume_init() }.si_code {
                        2 => Stop::Step,
                        _ => Stop::Breakpoint,
                    }));
                }
                return Ok(Some(Stop::Fatal(sig)));
            }
        }
    }

    fn getregs(pid: libc::pid_t) -> Result<libc::user_regs_struct, TraceError> {
        let mut regs = MaybeUninit::<libc::user_regs_struct>::uninit();
        let r = unsafe { libc::ptrace(libc::PTRACE_GETREGS, pid, 0, regs.as_mut_ptr()) };
        if r < 0 {
            return Err(sys_err("ptrace(GETREGS)"));
        }
        Ok(unsafe { regs.assume_init() })
    }

    fn read_mem(pid: libc::pid_t, addr: u64, buf: &mut [u8]) -> Result<usize, TraceError> {
        if buf.is_empty() {
            return Ok(0);
        }
        let local = libc::iovec {
            iov_base: buf.as_mut_ptr() as *mut libc::c_void,
            iov_len: buf.len(),
        };
        let remote = libc::iovec {
            iov_base: addr as *mut libc::c_void,
            iov_len: buf.len(),
        };
        let n = unsafe { libc::process_vm_readv(pid, &local, 1, &remote, 1, 0) };
        if n >= 0 {
            return Ok(n as usize);
        }
        // Fall back to word-at-a-time peeks.
        let mut read = 0;
        while read < buf.len() {
            unsafe { *libc::__errno_location() = 0 };
            let word = unsafe {
                libc::ptrace(
                    libc::PTRACE_PEEKDATA,
                    pid,
                    (addr + read as u64) as *mut libc::c_void,
                    0,
                )
            };
            if word == -1 && unsafe { *libc::__errno_location() } != 0 {
                break;
            }
            let bytes = word.to_le_bytes();
            let take = (buf.len() - read).min(8);
            buf[read..read + take].copy_from_slice(&bytes[..take]);
            read += take;
        }
        if read == 0 {
            return Err(sys_err("process_vm_readv/PEEKDATA"));
        }
        Ok(read)
    }

    /// Executable mappings of the traced process. Module ids are stable
    /// across refreshes: new mappings only append.
    struct ModuleTable {
        mods: Vec<ModuleInfo>,
        main_path: String,
    }

    impl ModuleTable {
        fn new(main_path: String) -> Self {
            ModuleTable { mods: Vec::new(), main_path }
        }

        fn refresh(&mut self, pid: libc::pid_t) -> Result<(), TraceError> {
            let maps = std::fs::read_to_string(format!("/proc/{pid}/maps"))
                .map_err(|e| TraceError::Sys(format!("read maps: {e}")))?;
            let mut found: Vec<(u64, u64, String)> = Vec::new();
            for line in maps.lines() {
                let mut tok = line.split_whitespace();
                let (Some(range), Some(perms)) = (tok.next(), tok.next()) else { continue };
                if !perms.contains('x') {
                    continue;
                }
                let _ = (tok.next(), tok.next(), tok.next()); // offset dev inode
                let path: String = tok.collect::<Vec<_>>().join(" ");
                let Some((lo, hi)) = range.split_once('-') else { continue };
                let (Ok(lo), Ok(hi)) = (u64::from_str_radix(lo, 16), u64::from_str_radix(hi, 16))
                else {
                    continue;
                };
                let path = if path.is_empty() { "[anon]".to_string() } else { path };
                found.push((lo, hi, path));
            }
            // Main executable first so it gets module id 0 on the first
            // refresh; later refreshes only append new mappings.
            found.sort_by_key(|(lo, _, path)| (*path != self.main_path, *lo));
            for (lo, hi, path) in found {
                let known = self
                    .mods
                    .iter()
                    .any(|m| m.runtime_base == lo && m.path == path);
                if !known {
                    self.mods.push(ModuleInfo {
                        id: ModuleId(self.mods.len() as u32),
                        path,
                        runtime_base: lo,
                        text_start: 0,
                        text_size: hi - lo,
                    });
                }
            }
            Ok(())
        }

        fn find(&self, addr: u64) -> Option<&ModuleInfo> {
            self.mods
                .iter()
                .find(|m| addr >= m.runtime_base && addr < m.runtime_base + m.text_size)
        }
    }

    pub fn collect(spec: &RunSpec) -> Result<tracebin_core::model::TraceSet, TraceError> {
        let canon = std::fs::canonicalize(&spec.program_path).map_err(|e| {
            TraceError::LaunchFailure(format!("{}: {e}", spec.program_path.display()))
        })?;
        let main_path = canon.to_string_lossy().into_owned();

        // Everything the child needs after fork is allocated up front:
        // the test harness may run us on several threads, and malloc in
        // a forked child of a threaded process can deadlock.
        let prog = CString::new(canon.as_os_str().as_encoded_bytes())
            .map_err(|_| TraceError::LaunchFailure("path contains NUL".into()))?;
        let mut argv_owned: Vec<CString> = vec![prog.clone()];
        for a in &spec.args {
            argv_owned.push(
                CString::new(a.as_bytes())
                    .map_err(|_| TraceError::LaunchFailure("argument contains NUL".into()))?,
            );
        }
        let mut envs: BTreeMap<String, String> = std::env::vars().collect();
        for kv in &spec.env {
            match kv.split_once('=') {
                Some((k, v)) => {
                    envs.insert(k.to_string(), v.to_string());
                }
                None => {
                    return Err(TraceError::LaunchFailure(format!(
                        "environment entry '{kv}' is not KEY=VALUE"
                    )))
                }
            }
        }
        let env_owned: Vec<CString> = envs
            .iter()
            .map(|(k, v)| CString::new(format!("{k}={v}")).unwrap())
            .collect();
        let mut argv: Vec<*const libc::c_char> = argv_owned.iter().map(|c| c.as_ptr()).collect();
        argv.push(std::ptr::null());
        let mut envp: Vec<*const libc::c_char> = env_owned.iter().map(|c| c.as_ptr()).collect();
        envp.push(std::ptr::null());

        let stdin_fd = match &spec.stdin_file {
            None => -1,
            Some(f) => {
                let c = CString::new(f.as_os_str().as_encoded_bytes())
                    .map_err(|_| TraceError::LaunchFailure("stdin path contains NUL".into()))?;
                let fd = unsafe { libc::open(c.as_ptr(), libc::O_RDONLY) };
                if fd < 0 {
                    return Err(TraceError::LaunchFailure(format!(
                        "cannot open stdin file {}",
                        f.display()
                    )));
                }
                fd
            }
        };

        let pid = unsafe { libc::fork() };
        if pid < 0 {
            return Err(sys_err("fork"));
        }
        if pid == 0 {
            unsafe {
                if stdin_fd >= 0 {
                    libc::dup2(stdin_fd, 0);
                    libc::close(stdin_fd);
                }
                if libc::ptrace(libc::PTRACE_TRACEME, 0, 0, 0) < 0 {
                    libc::_exit(126);
                }
                libc::execve(prog.as_ptr(), argv.as_ptr(), envp.as_ptr());
                libc::_exit(127);
            }
        }
        if stdin_fd >= 0 {
            unsafe { libc::close(stdin_fd) };
        }

        let mut guard = ChildGuard { pid, alive: true };
        let deadline = Instant::now() + spec.timeout();

        // First stop: the post-execve trap.
        match wait_stop(pid, deadline)? {
            Some(Stop::Step) | Some(Stop::Breakpoint) => {}
            Some(Stop::Exited(code)) => {
                return Err(TraceError::LaunchFailure(format!(
                    "target exited with status {code} before tracing began"
                )))
            }
            other => {
                return Err(TraceError::LaunchFailure(format!(
                    "unexpected initial stop: {other:?}"
                )))
            }
        }

        // Abort on thread/process creation instead of mis-tracing it.
        let opts: libc::c_ulong = (libc::PTRACE_O_TRACECLONE
            | libc::PTRACE_O_TRACEFORK
            | libc::PTRACE_O_TRACEVFORK
            | libc::PTRACE_O_EXITKILL) as libc::c_ulong;
        if unsafe { libc::ptrace(libc::PTRACE_SETOPTIONS, pid, 0, opts) } < 0 {
            return Err(sys_err("ptrace(SETOPTIONS)"));
        }

        let mut modules = ModuleTable::new(main_path);
        modules.refresh(pid)?;

        let mut builder = TraceSetBuilder::new();
        let mut partial = false;
        let mut steps: u64 = 0;
        let mut entry_seen = false;
        let mut skipped_undecodable: u64 = 0;
        // The previous step's transfer instruction, when it was one:
        // (location, class, raw fall-through address).
        let mut pending: Option<(NormAddr, InstClass, u64)> = None;

        'trace: loop {
            let regs = getregs(pid)?;
            let rip = regs.rip;

            let module = match modules.find(rip) {
                Some(m) => m.clone(),
                None => {
                    // The dynamic loader may have mapped more since the
                    // last refresh.
                    modules.refresh(pid)?;
                    match modules.find(rip) {
                        Some(m) => m.clone(),
                        None => return Err(TraceError::UnmappedExecution(rip)),
                    }
                }
            };
            let loc = NormAddr::new(module.id, rip - module.runtime_base);

            let span = ((module.runtime_base + module.text_size).saturating_sub(rip)).min(15);
            let mut buf = [0u8; 15];
            let got = read_mem(pid, rip, &mut buf[..span as usize])?;
            let mut decoded: Option<(InstClass, u64)> = None;
            match decode_len(&buf[..got], 0) {
                Ok(d) => {
                    let end_raw = rip + d.len();
                    match builder.add_inst(InstRecord::new(loc, d.bytes)) {
                        Ok(_) => {}
                        Err(ModelError::ConflictingInstruction(l, _, _)) => {
                            return Err(TraceError::SelfModifyingDetected(l))
                        }
                        Err(other) => return Err(other.into()),
                    }
                    decoded = Some((d.class, end_raw));
                }
                Err(e) => {
                    // Outside the decodable subset: recording a guessed
                    // length would be unsound, so skip it and keep going.
                    skipped_undecodable += 1;
                    debug!("skipping undecodable instruction at {rip:#x}: {e}");
                }
            }

            if decoded.is_some() && !entry_seen {
                builder.add_leader(loc);
                entry_seen = true;
            }
            if let Some((src, class, fall_raw)) = pending.take() {
                if decoded.is_some() {
                    if class == InstClass::Cbr && rip == fall_raw {
                        builder.add_leader(loc); // branch not taken
                    } else if let Some(kind) = class.edge_kind() {
                        builder.add_edge(EdgeRecord::new(kind, src, loc));
                        builder.add_leader(loc);
                    }
                }
            }
            if let Some((class, end_raw)) = decoded {
                if class.edge_kind().is_some() {
                    pending = Some((loc, class, end_raw));
                }
            }

            steps += 1;
            if steps >= MAX_STEPS || Instant::now() >= deadline {
                partial = true;
                guard.kill_and_reap();
                break 'trace;
            }

            if unsafe { libc::ptrace(libc::PTRACE_SINGLESTEP, pid, 0, 0) } < 0 {
                return Err(sys_err("ptrace(SINGLESTEP)"));
            }
            match wait_stop(pid, deadline)? {
                None => {
                    partial = true;
                    guard.kill_and_reap();
                    break 'trace;
                }
                Some(Stop::Step) => continue,
                Some(Stop::Breakpoint) => {
                    // An int3 retired; it was recorded before the step.
                    guard.kill_and_reap();
                    break 'trace;
                }
                Some(Stop::Fatal(sig)) => {
                    // The instruction recorded above faulted (ud2 is the
                    // expected case). The trace stays sound.
                    debug!("target stopped by signal {sig}; ending trace");
                    guard.kill_and_reap();
                    break 'trace;
                }
                Some(Stop::Exited(_)) | Some(Stop::Killed(_)) => {
                    guard.alive = false;
                    break 'trace;
                }
                Some(Stop::TaskEvent) => {
                    guard.kill_and_reap();
                    return Err(TraceError::ThreadedTarget);
                }
            }
        }

        if skipped_undecodable > 0 {
            warn!(
                "{skipped_undecodable} executed instruction(s) were outside the decodable \
                 subset and were not recorded"
            );
        }

        for m in modules.mods {
            builder.add_module(m);
        }
        if partial {
            builder.mark_partial();
        }
        Ok(builder.build()?)
    }
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
mod imp {
    use super::{RunSpec, TraceError};

    pub fn collect(_spec: &RunSpec) -> Result<tracebin_core::model::TraceSet, TraceError> {
        Err(TraceError::UnsupportedPlatform)
    }
}

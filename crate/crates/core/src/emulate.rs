//! Concrete emulator for the decoder's x86-64 subset.
//!
//! Executes a raw code image from its entry offset with real register,
//! flag and memory semantics (image bytes are addressable at their
//! offsets; a synthetic stack lives far above the image). While running
//! it records exactly what the live tracer records: unique instruction
//! tuples, control-flow edges with their categories, and block leaders.
//! That makes it both an independent consistency oracle for the corpus
//! fixtures and a portable trace source on hosts without ptrace.

use thiserror::Error;

use crate::model::{
    EdgeRecord, InstRecord, ModelError, ModuleId, ModuleInfo, NormAddr, TraceSet, TraceSetBuilder,
};
use crate::refdisasm::{decode_len, DecodeError, DecodedInst, InstClass};

const STACK_TOP: u64 = 0x7fff_ffff_e000;
const STACK_SPAN: u64 = 0x10_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltSignal {
    /// ud2 executed (illegal-instruction stop).
    Ud2,
    /// int3 executed (breakpoint stop).
    Int3,
}

/// How the emulated program stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmuExit {
    /// Exit syscall with this status.
    Exited(u8),
    /// Halting marker executed at this image offset.
    Halted(HaltSignal, u64),
}

#[derive(Debug)]
pub struct EmuRun {
    pub trace: TraceSet,
    pub exit: EmuExit,
    pub steps: u64,
}

#[derive(Debug, Error)]
pub enum EmuError {
    #[error("decode failed: {0}")]
    Decode(#[from] DecodeError),
    #[error("instruction at {0:#x} decodes but is not executable by the emulator: {1}")]
    UnsupportedExec(u64, String),
    #[error("execution left the image at {0:#x}")]
    RipOutOfImage(u64),
    #[error("memory access at {0:#x} outside image and stack")]
    BadAccess(u64),
    #[error("unsupported syscall {0}")]
    BadSyscall(u64),
    #[error("step limit {0} exceeded")]
    StepLimit(u64),
    #[error("instruction bytes changed under execution at {0}")]
    SelfModifying(NormAddr),
    #[error(transparent)]
    Model(ModelError),
}

struct Machine {
    mem: Vec<u8>, // image, mutable (fixtures patch data slots)
    stack: Vec<u8>,
    regs: [u64; 16],
    rip: u64,
    zf: bool,
    sf: bool,
    of: bool,
    cf: bool,
}

#[derive(Debug, Clone, Copy)]
enum Rm {
    Reg(usize),
    Mem(u64),
}

struct Operands {
    reg: usize,
    rm: Rm,
    /// Immediate trailing the ModRM field, sign-extended.
    imm: i64,
}

enum Outcome {
    Next(u64),
    Exit(u8),
    Halt(HaltSignal),
}

impl Machine {
    fn new(image: &[u8], entry: u64) -> Self {
        let mut m = Machine {
            mem: image.to_vec(),
            stack: vec![0; STACK_SPAN as usize],
            regs: [0; 16],
            rip: entry,
            zf: false,
            sf: false,
            of: false,
            cf: false,
        };
        m.regs[4] = STACK_TOP; // rsp
        m
    }

    fn read(&self, addr: u64, n: usize) -> Result<u64, EmuError> {
        let mut v: u64 = 0;
        for i in 0..n {
            let a = addr + i as u64;
            let b = if (a as usize) < self.mem.len() {
                self.mem[a as usize]
            } else if (STACK_TOP - STACK_SPAN..STACK_TOP).contains(&a) {
                self.stack[(a - (STACK_TOP - STACK_SPAN)) as usize]
            } else {
                return Err(EmuError::BadAccess(a));
            };
            v |= (b as u64) << (8 * i);
        }
        Ok(v)
    }

    fn write(&mut self, addr: u64, v: u64, n: usize) -> Result<(), EmuError> {
        for i in 0..n {
            let a = addr + i as u64;
            let b = (v >> (8 * i)) as u8;
            if (a as usize) < self.mem.len() {
                self.mem[a as usize] = b;
            } else if (STACK_TOP - STACK_SPAN..STACK_TOP).contains(&a) {
                self.stack[(a - (STACK_TOP - STACK_SPAN)) as usize] = b;
            } else {
                return Err(EmuError::BadAccess(a));
            }
        }
        Ok(())
    }

    fn push(&mut self, v: u64) -> Result<(), EmuError> {
        self.regs[4] = self.regs[4].wrapping_sub(8);
        self.write(self.regs[4], v, 8)
    }

    fn pop(&mut self) -> Result<u64, EmuError> {
        let v = self.read(self.regs[4], 8)?;
        self.regs[4] = self.regs[4].wrapping_add(8);
        Ok(v)
    }

    fn get(&self, r: usize, w: usize) -> u64 {
        let v = self.regs[r];
        if w == 8 {
            v
        } else {
            v & 0xffff_ffff
        }
    }

    fn set(&mut self, r: usize, v: u64, w: usize) {
        // 32-bit destinations zero-extend
        self.regs[r] = if w == 8 { v } else { v & 0xffff_ffff };
    }

    fn rm_read(&self, rm: Rm, w: usize) -> Result<u64, EmuError> {
        match rm {
            Rm::Reg(r) => Ok(self.get(r, w)),
            Rm::Mem(a) => self.read(a, w),
        }
    }

    fn rm_write(&mut self, rm: Rm, v: u64, w: usize) -> Result<(), EmuError> {
        match rm {
            Rm::Reg(r) => {
                self.set(r, v, w);
                Ok(())
            }
            Rm::Mem(a) => self.write(a, v, w),
        }
    }

    fn flags_logic(&mut self, r: u64, w: usize) {
        let sign = 1u64 << (w * 8 - 1);
        self.zf = mask(r, w) == 0;
        self.sf = r & sign != 0;
        self.of = false;
        self.cf = false;
    }

    fn add(&mut self, a: u64, b: u64, w: usize, keep_cf: bool) -> u64 {
        let sign = 1u64 << (w * 8 - 1);
        let r = mask(a.wrapping_add(b), w);
        if !keep_cf {
            self.cf = (mask(a, w) as u128 + mask(b, w) as u128) > mask(u64::MAX, w) as u128;
        }
        self.of = (a ^ r) & (b ^ r) & sign != 0;
        self.zf = r == 0;
        self.sf = r & sign != 0;
        r
    }

    fn sub(&mut self, a: u64, b: u64, w: usize, keep_cf: bool) -> u64 {
        let sign = 1u64 << (w * 8 - 1);
        let r = mask(a.wrapping_sub(b), w);
        if !keep_cf {
            self.cf = mask(a, w) < mask(b, w);
        }
        self.of = (a ^ b) & (a ^ r) & sign != 0;
        self.zf = r == 0;
        self.sf = r & sign != 0;
        r
    }

    fn cond(&self, cc: u8, offset: u64) -> Result<bool, EmuError> {
        Ok(match cc {
            0x0 => self.of,
            0x1 => !self.of,
            0x2 => self.cf,
            0x3 => !self.cf,
            0x4 => self.zf,
            0x5 => !self.zf,
            0x6 => self.cf || self.zf,
            0x7 => !self.cf && !self.zf,
            0x8 => self.sf,
            0x9 => !self.sf,
            0xc => self.sf != self.of,
            0xd => self.sf == self.of,
            0xe => self.zf || (self.sf != self.of),
            0xf => !self.zf && (self.sf == self.of),
            _ => {
                return Err(EmuError::UnsupportedExec(
                    offset,
                    format!("condition code {cc:#x} (parity)"),
                ))
            }
        })
    }

    /// Parse ModRM (+SIB, displacement, trailing immediate) for the
    /// instruction at `d`, resolving the memory effective address with
    /// current register values. `imm_size` is the immediate width in
    /// bytes after the addressing bytes.
    fn operands(
        &self,
        d: &DecodedInst,
        modrm_at: usize,
        rex: u8,
        imm_size: usize,
    ) -> Result<Operands, EmuError> {
        let b = &d.bytes;
        let unsupported =
            |m: String| EmuError::UnsupportedExec(d.offset, m);
        let modrm = b[modrm_at];
        let mode = modrm >> 6;
        let reg = (((rex >> 2) & 1) << 3 | (modrm >> 3) & 7) as usize;
        let rm_code = modrm & 7;
        let mut pos = modrm_at + 1;

        let rm = if mode == 0b11 {
            Rm::Reg((((rex) & 1) << 3 | rm_code) as usize)
        } else {
            let mut base: u64;
            if rm_code == 0b100 {
                let sib = b[pos];
                pos += 1;
                let scale = 1u64 << (sib >> 6);
                let idx_code = ((rex >> 1) & 1) << 3 | (sib >> 3) & 7;
                let base_code = ((rex & 1) << 3 | sib & 7) as usize;
                base = if (sib & 7) == 0b101 && mode == 0b00 {
                    0 // disp32-only base
                } else {
                    self.regs[base_code]
                };
                if idx_code != 0b100 {
                    base = base.wrapping_add(self.regs[idx_code as usize].wrapping_mul(scale));
                }
            } else if rm_code == 0b101 && mode == 0b00 {
                base = d.end(); // RIP-relative
            } else {
                base = self.regs[((rex & 1) << 3 | rm_code) as usize];
            }
            let disp: i64 = match mode {
                0b00 => {
                    if rm_code == 0b101 || (rm_code == 0b100 && (b[pos - 1] & 7) == 0b101) {
                        let v = i32::from_le_bytes(b[pos..pos + 4].try_into().unwrap()) as i64;
                        pos += 4;
                        v
                    } else {
                        0
                    }
                }
                0b01 => {
                    let v = b[pos] as i8 as i64;
                    pos += 1;
                    v
                }
                0b10 => {
                    let v = i32::from_le_bytes(b[pos..pos + 4].try_into().unwrap()) as i64;
                    pos += 4;
                    v
                }
                _ => unreachable!(),
            };
            Rm::Mem(base.wrapping_add(disp as u64))
        };

        let imm = match imm_size {
            0 => 0,
            1 => b[pos] as i8 as i64,
            4 => i32::from_le_bytes(b[pos..pos + 4].try_into().unwrap()) as i64,
            n => return Err(unsupported(format!("immediate width {n}"))),
        };
        Ok(Operands { reg, rm, imm })
    }

    fn exec(&mut self, d: &DecodedInst) -> Result<Outcome, EmuError> {
        let b = &d.bytes;
        let off = d.offset;
        let unsupported = |m: &str| EmuError::UnsupportedExec(off, m.to_string());

        // Re-scan prefixes the way the decoder accepted them.
        let mut i = 0;
        let mut rex: u8 = 0;
        let mut f3 = false;
        loop {
            match b[i] {
                0x66 => return Err(unsupported("16-bit operand execution")),
                0x3e => {}
                0xf3 => f3 = true,
                0x40..=0x4f => rex = b[i] & 0x0f,
                _ => break,
            }
            i += 1;
        }
        let w: usize = if rex & 0x8 != 0 { 8 } else { 4 };
        let opcode = b[i];
        let next = Outcome::Next(d.end());

        match opcode {
            0x01 | 0x29 | 0x31 | 0x39 | 0x85 => {
                // op rm, reg
                let o = self.operands(d, i + 1, rex, 0)?;
                let a = self.rm_read(o.rm, w)?;
                let r = self.get(o.reg, w);
                match opcode {
                    0x01 => {
                        let v = self.add(a, r, w, false);
                        self.rm_write(o.rm, v, w)?;
                    }
                    0x29 => {
                        let v = self.sub(a, r, w, false);
                        self.rm_write(o.rm, v, w)?;
                    }
                    0x31 => {
                        let v = mask(a ^ r, w);
                        self.flags_logic(v, w);
                        self.rm_write(o.rm, v, w)?;
                    }
                    0x39 => {
                        self.sub(a, r, w, false);
                    }
                    _ => {
                        self.flags_logic(mask(a & r, w), w);
                    }
                }
                Ok(next)
            }
            0x03 | 0x2b | 0x33 | 0x3b => {
                // op reg, rm
                let o = self.operands(d, i + 1, rex, 0)?;
                let a = self.get(o.reg, w);
                let m = self.rm_read(o.rm, w)?;
                match opcode {
                    0x03 => {
                        let v = self.add(a, m, w, false);
                        self.set(o.reg, v, w);
                    }
                    0x2b => {
                        let v = self.sub(a, m, w, false);
                        self.set(o.reg, v, w);
                    }
                    0x33 => {
                        let v = mask(a ^ m, w);
                        self.flags_logic(v, w);
                        self.set(o.reg, v, w);
                    }
                    _ => {
                        self.sub(a, m, w, false);
                    }
                }
                Ok(next)
            }
            0x08 => Err(unsupported("8-bit or")),
            0x63 => {
                let o = self.operands(d, i + 1, rex, 0)?;
                let v = self.rm_read(o.rm, 4)? as u32 as i32 as i64 as u64;
                self.set(o.reg, v, w);
                Ok(next)
            }
            0x50..=0x57 => {
                let r = ((rex & 1) << 3 | (opcode - 0x50)) as usize;
                self.push(self.regs[r])?;
                Ok(next)
            }
            0x58..=0x5f => {
                let r = ((rex & 1) << 3 | (opcode - 0x58)) as usize;
                let v = self.pop()?;
                self.regs[r] = v;
                Ok(next)
            }
            0x68 => {
                let v = i32::from_le_bytes(b[i + 1..i + 5].try_into().unwrap()) as i64 as u64;
                self.push(v)?;
                Ok(next)
            }
            0x70..=0x7f => {
                let taken = self.cond(opcode & 0xf, off)?;
                Ok(Outcome::Next(if taken { d.rel_target.unwrap() } else { d.end() }))
            }
            0x83 => {
                let o = self.operands(d, i + 1, rex, 1)?;
                let a = self.rm_read(o.rm, w)?;
                let imm = o.imm as u64;
                match (b[i + 1] >> 3) & 7 {
                    0 => {
                        let v = self.add(a, imm, w, false);
                        self.rm_write(o.rm, v, w)?;
                    }
                    5 => {
                        let v = self.sub(a, imm, w, false);
                        self.rm_write(o.rm, v, w)?;
                    }
                    7 => {
                        self.sub(a, imm, w, false);
                    }
                    _ => return Err(unsupported("0x83 digit")),
                }
                Ok(next)
            }
            0x89 => {
                let o = self.operands(d, i + 1, rex, 0)?;
                let v = self.get(o.reg, w);
                self.rm_write(o.rm, v, w)?;
                Ok(next)
            }
            0x8b => {
                let o = self.operands(d, i + 1, rex, 0)?;
                let v = self.rm_read(o.rm, w)?;
                self.set(o.reg, v, w);
                Ok(next)
            }
            0x8d => {
                let o = self.operands(d, i + 1, rex, 0)?;
                match o.rm {
                    Rm::Mem(a) => self.set(o.reg, a, w),
                    Rm::Reg(_) => return Err(unsupported("lea with register operand")),
                }
                Ok(next)
            }
            0x90 => {
                if rex != 0 {
                    return Err(unsupported("xchg (REX-prefixed 0x90)"));
                }
                Ok(next)
            }
            0xb8..=0xbf => {
                let r = ((rex & 1) << 3 | (opcode - 0xb8)) as usize;
                let v = if w == 8 {
                    u64::from_le_bytes(b[i + 1..i + 9].try_into().unwrap())
                } else {
                    u32::from_le_bytes(b[i + 1..i + 5].try_into().unwrap()) as u64
                };
                self.set(r, v, w);
                Ok(next)
            }
            0xc2 => {
                let n = u16::from_le_bytes(b[i + 1..i + 3].try_into().unwrap()) as u64;
                let ret = self.pop()?;
                self.regs[4] = self.regs[4].wrapping_add(n);
                Ok(Outcome::Next(ret))
            }
            0xc3 => {
                let ret = self.pop()?;
                Ok(Outcome::Next(ret))
            }
            0xc7 => {
                let o = self.operands(d, i + 1, rex, 4)?;
                self.rm_write(o.rm, o.imm as u64, w)?;
                Ok(next)
            }
            0xcc => Ok(Outcome::Halt(HaltSignal::Int3)),
            0xe8 => {
                self.push(d.end())?;
                Ok(Outcome::Next(d.rel_target.unwrap()))
            }
            0xe9 | 0xeb => Ok(Outcome::Next(d.rel_target.unwrap())),
            0xf7 => {
                let o = self.operands(d, i + 1, rex, 4)?;
                let a = self.rm_read(o.rm, w)?;
                self.flags_logic(mask(a & o.imm as u64, w), w);
                Ok(next)
            }
            0xff => {
                let o = self.operands(d, i + 1, rex, 0)?;
                match (b[i + 1] >> 3) & 7 {
                    0 => {
                        let a = self.rm_read(o.rm, w)?;
                        let v = self.add(a, 1, w, true);
                        self.rm_write(o.rm, v, w)?;
                        Ok(next)
                    }
                    1 => {
                        let a = self.rm_read(o.rm, w)?;
                        let v = self.sub(a, 1, w, true);
                        self.rm_write(o.rm, v, w)?;
                        Ok(next)
                    }
                    2 => {
                        let target = self.rm_read(o.rm, 8)?;
                        self.push(d.end())?;
                        Ok(Outcome::Next(target))
                    }
                    4 => Ok(Outcome::Next(self.rm_read(o.rm, 8)?)),
                    _ => Err(unsupported("0xff digit")),
                }
            }
            0x0f => match b[i + 1] {
                0x05 => {
                    match self.regs[0] {
                        60 | 231 => Ok(Outcome::Exit(self.regs[7] as u8)),
                        n => Err(EmuError::BadSyscall(n)),
                    }
                }
                0x0b => Ok(Outcome::Halt(HaltSignal::Ud2)),
                0x1e if f3 => Ok(next), // endbr64
                0x1f => Ok(next),
                0x80..=0x8f => {
                    let taken = self.cond(b[i + 1] & 0xf, off)?;
                    Ok(Outcome::Next(if taken { d.rel_target.unwrap() } else { d.end() }))
                }
                _ => Err(unsupported("0x0f opcode")),
            },
            _ => Err(unsupported("opcode")),
        }
    }
}

fn mask(v: u64, w: usize) -> u64 {
    if w == 8 {
        v
    } else {
        v & 0xffff_ffff
    }
}

/// Execute `image` from `entry`, recording a trace over a single module
/// (`module_path`, base 0) until the program exits, halts on a marker,
/// or exceeds `max_steps`.
pub fn emulate_image(
    image: &[u8],
    entry: u64,
    module_path: &str,
    max_steps: u64,
) -> Result<EmuRun, EmuError> {
    let module = ModuleId(0);
    let mut b = TraceSetBuilder::new();
    b.add_module(ModuleInfo {
        id: module,
        path: module_path.to_string(),
        runtime_base: 0,
        text_start: 0,
        text_size: image.len() as u64,
    });
    b.add_leader(NormAddr::new(module, entry));

    let mut m = Machine::new(image, entry);
    let mut steps = 0u64;
    let exit;
    loop {
        steps += 1;
        if steps > max_steps {
            return Err(EmuError::StepLimit(max_steps));
        }
        if m.rip as usize >= m.mem.len() {
            return Err(EmuError::RipOutOfImage(m.rip));
        }
        let d = decode_len(&m.mem, m.rip)?;
        let loc = NormAddr::new(module, m.rip);
        b.add_inst(InstRecord::new(loc, d.bytes.clone())).map_err(|e| match e {
            ModelError::ConflictingInstruction(l, _, _) => EmuError::SelfModifying(l),
            other => EmuError::Model(other),
        })?;

        match m.exec(&d)? {
            Outcome::Next(next) => {
                if let Some(kind) = d.class.edge_kind() {
                    let dst = NormAddr::new(module, next);
                    if d.class == InstClass::Cbr && next == d.end() {
                        b.add_leader(dst); // branch not taken: block split
                    } else {
                        b.add_edge(EdgeRecord::new(kind, loc, dst));
                        b.add_leader(dst);
                    }
                }
                m.rip = next;
            }
            Outcome::Exit(code) => {
                exit = EmuExit::Exited(code);
                break;
            }
            Outcome::Halt(sig) => {
                exit = EmuExit::Halted(sig, m.rip);
                break;
            }
        }
    }

    let trace = b.build().map_err(EmuError::Model)?;
    Ok(EmuRun { trace, exit, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EdgeKind;

    #[test]
    fn straight_line_exit() {
        // mov eax,60; xor edi,edi; syscall
        let image = [0xb8, 0x3c, 0, 0, 0, 0x31, 0xff, 0x0f, 0x05];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Exited(0));
        assert_eq!(run.trace.insts().len(), 3);
        assert!(run.trace.edges().is_empty());
        assert_eq!(run.steps, 3);
    }

    #[test]
    fn loop_dedupes_instructions() {
        // mov ecx,3 ; L: sub ecx,1(83 /5); jne L(75 fb); mov eax,60; xor edi,edi; syscall
        let image = [
            0xb9, 0x03, 0x00, 0x00, 0x00, // mov ecx,3
            0x83, 0xe9, 0x01, // sub ecx,1
            0x75, 0xfb, // jne -5
            0xb8, 0x3c, 0x00, 0x00, 0x00, // mov eax,60
            0x31, 0xff, // xor edi,edi
            0x0f, 0x05, // syscall
        ];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Exited(0));
        // 3 iterations executed but the set has each instruction once
        assert_eq!(run.trace.insts().len(), 6);
        assert!(run.steps > 6);
        // taken back-edge recorded once
        let cbr_edges: Vec<_> = run
            .trace
            .edges()
            .iter()
            .filter(|e| e.kind == EdgeKind::Cbr)
            .collect();
        assert_eq!(cbr_edges.len(), 1);
        assert_eq!(cbr_edges[0].src.offset, 8);
        assert_eq!(cbr_edges[0].dst.offset, 5);
        // not-taken fall-through leader at 10
        assert!(run.trace.leaders().iter().any(|l| l.offset == 10));
    }

    #[test]
    fn call_ret_records_return_edge() {
        // 0: call 10; 5: mov eax,60; a: xor edi,edi; c: syscall; 10: nop; 11: ret
        let image = [
            0xe8, 0x0b, 0x00, 0x00, 0x00, // call +0x0b -> 0x10
            0xb8, 0x3c, 0x00, 0x00, 0x00, 0x31, 0xff, 0x0f, 0x05, 0x90, 0x90, // pad to 0x10
            0x90, 0xc3,
        ];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Exited(0));
        let kinds: Vec<EdgeKind> = run.trace.edges().iter().map(|e| e.kind).collect();
        assert!(kinds.contains(&EdgeKind::Direct));
        assert!(kinds.contains(&EdgeKind::Return));
        let ret_edge = run.trace.edges().iter().find(|e| e.kind == EdgeKind::Return).unwrap();
        assert_eq!(ret_edge.src.offset, 0x11);
        assert_eq!(ret_edge.dst.offset, 0x5);
    }

    #[test]
    fn indirect_jump_through_register() {
        // lea rax,[rip+3] -> 0xa; jmp *rax; (skipped: ud2); a: mov eax,60...
        let image = [
            0x48, 0x8d, 0x05, 0x03, 0x00, 0x00, 0x00, // 0: lea rax,[rip+3] = 0xa
            0xff, 0xe0, // 7: jmp *rax
            0x0f, // 9: (dead byte)
            0xb8, 0x3c, 0x00, 0x00, 0x00, 0x31, 0xff, 0x0f, 0x05, // a: exit
        ];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Exited(0));
        let e = run.trace.edges().iter().find(|e| e.kind == EdgeKind::Indirect).unwrap();
        assert_eq!(e.src.offset, 7);
        assert_eq!(e.dst.offset, 0xa);
        assert!(!run.trace.insts().contains_key(&NormAddr::new(ModuleId(0), 9)));
    }

    #[test]
    fn ud2_halts_and_is_recorded() {
        let image = [0x90, 0x0f, 0x0b, 0x90];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Halted(HaltSignal::Ud2, 1));
        assert!(run.trace.insts().contains_key(&NormAddr::new(ModuleId(0), 1)));
        assert!(!run.trace.insts().contains_key(&NormAddr::new(ModuleId(0), 3)));
    }

    #[test]
    fn int3_halts() {
        let image = [0xcc];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Halted(HaltSignal::Int3, 0));
    }

    #[test]
    fn memory_inc_dec_through_rbp() {
        // lea rbp,[rip+d] (data at end); incl 0x8(%rbp); decl 0x8(%rbp); exit
        let image = [
            0x48, 0x8d, 0x2d, 0x12, 0x00, 0x00, 0x00, // 0: lea rbp,[rip+0x12] = 0x19
            0xff, 0x45, 0x08, // 7: incl 0x8(%rbp)
            0xff, 0x4d, 0x08, // a: decl 0x8(%rbp)
            0xb8, 0x3c, 0x00, 0x00, 0x00, 0x31, 0xff, 0x0f, 0x05, // d: exit
            0x00, 0x00, 0x00, 0x00, // 0x15 pad
            0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, // 0x19: scratch
        ];
        let run = emulate_image(&image, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Exited(0));
        assert_eq!(run.trace.insts().len(), 6);
    }

    #[test]
    fn step_limit_enforced() {
        // jmp self
        let image = [0xeb, 0xfe];
        assert!(matches!(
            emulate_image(&image, 0, "t", 50),
            Err(EmuError::StepLimit(50))
        ));
    }

    #[test]
    fn store_to_image_data_slot() {
        // Bind a pointer slot at runtime, then jump through it: the
        // pattern the PLT fixture relies on.
        let mut img = Vec::new();
        img.extend_from_slice(&[0x48, 0x8d, 0x05, 0, 0, 0, 0]); // 0: lea rax,[rip+d1]
        img.extend_from_slice(&[0x48, 0x8d, 0x0d, 0, 0, 0, 0]); // 7: lea rcx,[rip+d2]
        img.extend_from_slice(&[0x48, 0x89, 0x01]); // 14: mov [rcx],rax
        img.extend_from_slice(&[0xff, 0x25, 0, 0, 0, 0]); // 17: jmp *[rip+d3]
        img.push(0xcc); // 23: dead
        let fn_off = img.len() as u64; // 24: exit
        img.extend_from_slice(&[0xb8, 0x3c, 0, 0, 0, 0x31, 0xff, 0x0f, 0x05]);
        let slot_off = img.len() as u64; // 33: slot
        img.extend_from_slice(&[0; 8]);
        let d1 = (fn_off as i64 - 7) as i32;
        img[3..7].copy_from_slice(&d1.to_le_bytes());
        let d2 = (slot_off as i64 - 14) as i32;
        img[10..14].copy_from_slice(&d2.to_le_bytes());
        let d3 = (slot_off as i64 - 23) as i32;
        img[19..23].copy_from_slice(&d3.to_le_bytes());

        let run = emulate_image(&img, 0, "t", 100).unwrap();
        assert_eq!(run.exit, EmuExit::Exited(0));
        let e = run.trace.edges().iter().find(|e| e.kind == EdgeKind::Indirect).unwrap();
        assert_eq!(e.dst.offset, fn_off);
    }
}

//! Reference disassembler over a strict x86-64 subset.
//!
//! The decoder covers exactly the encodings the fixture corpus is built
//! from and rejects everything else: a wrong length would silently
//! corrupt every downstream comparison, so unknown opcodes are errors,
//! never guesses. On top of the length decoder sit two drivers — a
//! linear sweep with optional skip-a-byte recovery, and a recursive
//! descent that follows static control flow with toggleable discovery
//! heuristics (`endbr64` scanning, no-return call cutting).

use std::collections::BTreeSet;

use thiserror::Error;

use crate::ingest::{DisasmView, ViewInst};
use crate::model::EdgeKind;

/// Coarse instruction class, enough to drive control-flow recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstClass {
    None,
    /// Conditional branch (Jcc rel8/rel32).
    Cbr,
    DirectJmp,
    DirectCall,
    /// Indirect call or jump (FF /2, FF /4).
    Indirect,
    Return,
    /// ud2 / int3: execution cannot continue past these.
    Halting,
}

impl InstClass {
    /// Edge category this class produces when it transfers control.
    pub fn edge_kind(self) -> Option<EdgeKind> {
        match self {
            InstClass::Cbr => Some(EdgeKind::Cbr),
            InstClass::DirectJmp | InstClass::DirectCall => Some(EdgeKind::Direct),
            InstClass::Indirect => Some(EdgeKind::Indirect),
            InstClass::Return => Some(EdgeKind::Return),
            InstClass::None | InstClass::Halting => None,
        }
    }

    /// True if execution can continue at the next sequential address.
    pub fn falls_through(self) -> bool {
        !matches!(self, InstClass::DirectJmp | InstClass::Return | InstClass::Halting)
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedInst {
    pub offset: u64,
    pub bytes: Vec<u8>,
    pub class: InstClass,
    /// Resolved branch target for CBR / direct jmp / direct call.
    pub rel_target: Option<u64>,
}

impl DecodedInst {
    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn end(&self) -> u64 {
        self.offset + self.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid or unsupported opcode at offset {0:#x}")]
    InvalidOpcode(u64),
    #[error("instruction at offset {0:#x} is truncated by the image end")]
    Truncated(u64),
}

/// Discovery heuristics for the sweep and descent drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeuristicConfig {
    /// After the descent worklist drains, scan the image for `endbr64`
    /// and treat every hit as a new entry point.
    pub endbr_scan: bool,
    /// Accepted for interface compatibility. Fall-through is always cut
    /// at returns, and no gap scanning exists for this flag to suppress,
    /// so it has no observable effect on either driver.
    pub epilogue_stop: bool,
    /// Linear sweep: on an undecodable byte, advance one byte and keep
    /// going instead of stopping.
    pub skip_byte_on_invalid: bool,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            endbr_scan: false,
            epilogue_stop: false,
            skip_byte_on_invalid: true,
        }
    }
}

struct Cursor<'a> {
    image: &'a [u8],
    start: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .image
            .get(self.pos)
            .ok_or(DecodeError::Truncated(self.start as u64))?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Option<u8> {
        self.image.get(self.pos).copied()
    }

    fn skip(&mut self, n: usize) -> Result<(), DecodeError> {
        if self.pos + n > self.image.len() {
            return Err(DecodeError::Truncated(self.start as u64));
        }
        self.pos += n;
        Ok(())
    }

    fn take_i8(&mut self) -> Result<i64, DecodeError> {
        Ok(self.next()? as i8 as i64)
    }

    fn take_i32(&mut self) -> Result<i64, DecodeError> {
        let mut v: u32 = 0;
        for i in 0..4 {
            v |= (self.next()? as u32) << (8 * i);
        }
        Ok(v as i32 as i64)
    }
}

/// Consume a ModRM byte plus any SIB and displacement.
fn skip_modrm(c: &mut Cursor) -> Result<u8, DecodeError> {
    let modrm = c.next()?;
    let mode = modrm >> 6;
    let rm = modrm & 0x07;
    if mode == 0b11 {
        return Ok(modrm);
    }
    let mut disp: usize = match mode {
        0b00 => {
            if rm == 0b101 {
                4 // RIP-relative in 64-bit mode
            } else {
                0
            }
        }
        0b01 => 1,
        _ => 4,
    };
    if rm == 0b100 {
        let sib = c.next()?;
        if mode == 0b00 && (sib & 0x07) == 0b101 {
            disp = 4;
        }
    }
    c.skip(disp)?;
    Ok(modrm)
}

fn reg_digit(modrm: u8) -> u8 {
    (modrm >> 3) & 0x07
}

/// Decode the instruction starting at `offset`, returning its length,
/// class and (for direct branches) resolved target offset.
pub fn decode_len(image: &[u8], offset: u64) -> Result<DecodedInst, DecodeError> {
    let start = offset as usize;
    if start >= image.len() {
        return Err(DecodeError::Truncated(offset));
    }
    let mut c = Cursor { image, start, pos: start };

    let mut opsize16 = false;
    let mut rep_f3 = false;
    let mut rex: Option<u8> = None;
    let opcode;
    loop {
        let b = c.next()?;
        match b {
            0x66 => {
                if rex.is_some() {
                    return Err(DecodeError::InvalidOpcode((c.pos - 1) as u64));
                }
                opsize16 = true;
            }
            0x3e => {
                if rex.is_some() {
                    return Err(DecodeError::InvalidOpcode((c.pos - 1) as u64));
                }
            }
            0xf3 => {
                if rex.is_some() {
                    return Err(DecodeError::InvalidOpcode((c.pos - 1) as u64));
                }
                rep_f3 = true;
            }
            0x40..=0x4f => {
                if rex.is_some() {
                    // Two REX prefixes never appear in compiler output.
                    return Err(DecodeError::InvalidOpcode((c.pos - 1) as u64));
                }
                rex = Some(b);
            }
            _ => {
                opcode = b;
                break;
            }
        }
        if c.pos - start > crate::model::MAX_INST_LEN {
            return Err(DecodeError::InvalidOpcode(offset));
        }
    }
    let opcode_pos = (c.pos - 1) as u64;
    let rex_w = rex.map(|r| r & 0x08 != 0).unwrap_or(false);

    let mut class = InstClass::None;
    let mut disp: Option<i64> = None;

    // F3 is only legal here as the start of endbr64.
    if rep_f3 && !(opcode == 0x0f && c.peek() == Some(0x1e)) {
        return Err(DecodeError::InvalidOpcode(opcode_pos));
    }

    match opcode {
        // add/or/sub/xor/cmp/mov r/m,r and r,r/m forms, test, movslq, lea
        0x01 | 0x03 | 0x08 | 0x29 | 0x2b | 0x31 | 0x33 | 0x39 | 0x3b | 0x63 | 0x85 | 0x89
        | 0x8b => {
            skip_modrm(&mut c)?;
        }
        0x8d => {
            let modrm = skip_modrm(&mut c)?;
            if modrm >> 6 == 0b11 {
                // lea with a register operand does not exist
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
        }
        0x50..=0x5f => {}
        0x68 => {
            c.skip(if opsize16 { 2 } else { 4 })?;
        }
        0x70..=0x7f => {
            if opsize16 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            class = InstClass::Cbr;
            disp = Some(c.take_i8()?);
        }
        0x83 => {
            let modrm = skip_modrm(&mut c)?;
            if !matches!(reg_digit(modrm), 0 | 5 | 7) {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            c.skip(1)?;
        }
        0x90 => {}
        0xb8..=0xbf => {
            let imm = if rex_w {
                8
            } else if opsize16 {
                2
            } else {
                4
            };
            c.skip(imm)?;
        }
        0xc2 => {
            if opsize16 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            class = InstClass::Return;
            c.skip(2)?;
        }
        0xc3 => {
            if opsize16 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            class = InstClass::Return;
        }
        0xc7 => {
            let modrm = skip_modrm(&mut c)?;
            if reg_digit(modrm) != 0 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            c.skip(if opsize16 { 2 } else { 4 })?;
        }
        0xcc => {
            class = InstClass::Halting;
        }
        0xe8 => {
            if opsize16 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            class = InstClass::DirectCall;
            disp = Some(c.take_i32()?);
        }
        0xe9 => {
            if opsize16 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            class = InstClass::DirectJmp;
            disp = Some(c.take_i32()?);
        }
        0xeb => {
            if opsize16 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            class = InstClass::DirectJmp;
            disp = Some(c.take_i8()?);
        }
        0xf7 => {
            let modrm = skip_modrm(&mut c)?;
            if reg_digit(modrm) != 0 {
                return Err(DecodeError::InvalidOpcode(opcode_pos));
            }
            c.skip(if opsize16 { 2 } else { 4 })?;
        }
        0xff => {
            let modrm = skip_modrm(&mut c)?;
            match reg_digit(modrm) {
                0 | 1 => {}
                2 | 4 => class = InstClass::Indirect,
                _ => return Err(DecodeError::InvalidOpcode(opcode_pos)),
            }
        }
        0x0f => {
            let b2 = c.next()?;
            match b2 {
                0x05 => {}
                0x0b => class = InstClass::Halting,
                0x1e => {
                    if !rep_f3 || c.next()? != 0xfa {
                        return Err(DecodeError::InvalidOpcode(opcode_pos));
                    }
                    // endbr64
                }
                0x1f => {
                    let modrm = skip_modrm(&mut c)?;
                    if reg_digit(modrm) != 0 {
                        return Err(DecodeError::InvalidOpcode(opcode_pos));
                    }
                }
                0x80..=0x8f => {
                    if opsize16 {
                        return Err(DecodeError::InvalidOpcode(opcode_pos));
                    }
                    class = InstClass::Cbr;
                    disp = Some(c.take_i32()?);
                }
                _ => return Err(DecodeError::InvalidOpcode(opcode_pos)),
            }
        }
        _ => return Err(DecodeError::InvalidOpcode(opcode_pos)),
    }

    let len = c.pos - start;
    if len > crate::model::MAX_INST_LEN {
        return Err(DecodeError::InvalidOpcode(offset));
    }
    let end = offset + len as u64;
    let rel_target = disp.map(|d| end.wrapping_add(d as u64));
    Ok(DecodedInst {
        offset,
        bytes: image[start..c.pos].to_vec(),
        class,
        rel_target,
    })
}

/// Edge category of a complete instruction, `None` for non-transfers.
pub fn classify_transfer(inst_bytes: &[u8]) -> Result<Option<EdgeKind>, DecodeError> {
    let d = decode_len(inst_bytes, 0)?;
    if d.len() as usize != inst_bytes.len() {
        return Err(DecodeError::InvalidOpcode(d.len()));
    }
    Ok(d.class.edge_kind())
}

fn view_inst(d: &DecodedInst) -> ViewInst {
    ViewInst {
        offset: d.offset,
        len: d.len(),
        bytes: Some(d.bytes.clone()),
        mnemonic: None,
    }
}

/// Decode sequentially from `start`. Undecodable bytes either stop the
/// sweep or, with `skip_byte_on_invalid`, shift it forward one byte —
/// the desynchronize-and-resync behavior of listing-style tools.
pub fn linear_sweep(image: &[u8], start: u64, cfg: HeuristicConfig) -> DisasmView {
    let mut view = DisasmView::new("refdisasm-linear", 0);
    let mut pos = start;
    while (pos as usize) < image.len() {
        match decode_len(image, pos) {
            Ok(d) => {
                pos = d.end();
                view.insert(view_inst(&d));
            }
            Err(_) => {
                if cfg.skip_byte_on_invalid {
                    pos += 1;
                } else {
                    break;
                }
            }
        }
    }
    view
}

/// Recursive descent from the given entry offsets.
pub fn recursive_descent(image: &[u8], entries: &[u64], cfg: HeuristicConfig) -> DisasmView {
    recursive_descent_with_noreturn(image, entries, cfg, &BTreeSet::new())
}

/// Recursive descent with a set of call targets assumed not to return:
/// fall-through after a direct call to one of them is not explored.
/// Models the over-eager no-return inference seen in some tools.
pub fn recursive_descent_with_noreturn(
    image: &[u8],
    entries: &[u64],
    cfg: HeuristicConfig,
    noreturn_targets: &BTreeSet<u64>,
) -> DisasmView {
    let mut view = DisasmView::new("refdisasm-recursive", 0);
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    let mut work: Vec<u64> = entries.to_vec();

    let drain = |work: &mut Vec<u64>, seen: &mut BTreeSet<u64>, view: &mut DisasmView| {
        while let Some(off) = work.pop() {
            if !seen.insert(off) || off as usize >= image.len() {
                continue;
            }
            let d = match decode_len(image, off) {
                Ok(d) => d,
                // No recovery along a speculative path.
                Err(_) => continue,
            };
            if let Some(t) = d.rel_target {
                if (t as usize) < image.len() {
                    work.push(t);
                }
            }
            let mut follow_fall = d.class.falls_through();
            if d.class == InstClass::DirectCall {
                if let Some(t) = d.rel_target {
                    if noreturn_targets.contains(&t) {
                        follow_fall = false;
                    }
                }
            }
            if follow_fall {
                work.push(d.end());
            }
            view.insert(view_inst(&d));
        }
    };

    drain(&mut work, &mut seen, &mut view);

    if cfg.endbr_scan {
        const ENDBR64: [u8; 4] = [0xf3, 0x0f, 0x1e, 0xfa];
        for i in 0..image.len().saturating_sub(3) {
            if image[i..i + 4] == ENDBR64 {
                work.push(i as u64);
            }
        }
        drain(&mut work, &mut seen, &mut view);
    }

    view
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dec(bytes: &[u8]) -> DecodedInst {
        decode_len(bytes, 0).unwrap()
    }

    #[test]
    fn call_rel32_resolves_backward_target() {
        // callq at 0x1193 whose rel32 0xfffffec5 lands on 0x105d
        let image = [0xe8, 0xc5, 0xfe, 0xff, 0xff];
        let mut padded = vec![0x90u8; 0x1193];
        padded.extend_from_slice(&image);
        let d = decode_len(&padded, 0x1193).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.class, InstClass::DirectCall);
        assert_eq!(d.rel_target, Some(0x105d));
    }

    #[test]
    fn endbr64_is_len_4_non_transfer() {
        let d = dec(&[0xf3, 0x0f, 0x1e, 0xfa]);
        assert_eq!(d.len(), 4);
        assert_eq!(d.class, InstClass::None);
        assert_eq!(d.rel_target, None);
    }

    #[test]
    fn indirect_jump_with_ds_override() {
        let d = dec(&[0x3e, 0xff, 0xe0]);
        assert_eq!(d.len(), 3);
        assert_eq!(d.class, InstClass::Indirect);
    }

    #[test]
    fn returns() {
        assert_eq!(dec(&[0xc3]).class, InstClass::Return);
        let d = dec(&[0xc2, 0x08, 0x00]);
        assert_eq!(d.class, InstClass::Return);
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn jcc_rel8_and_rel32() {
        let d = dec(&[0x7f, 0x26]);
        assert_eq!(d.class, InstClass::Cbr);
        assert_eq!(d.rel_target, Some(0x28));
        // je with rel32 0x91a: 0xa20a0 + 6 + 0x91a = 0xa29c0
        let mut img = vec![0x90u8; 0xa20a0];
        img.extend_from_slice(&[0x0f, 0x84, 0x1a, 0x09, 0x00, 0x00]);
        let d = decode_len(&img, 0xa20a0).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.rel_target, Some(0xa29c0));
    }

    #[test]
    fn modrm_memory_forms() {
        assert_eq!(dec(&[0x41, 0x8b, 0x56, 0x68]).len(), 4); // mov 0x68(%r14),%edx
        assert_eq!(dec(&[0x48, 0x8d, 0x1d, 0x9f, 0x19, 0x01, 0x00]).len(), 7); // lea rip-rel
        assert_eq!(dec(&[0x48, 0x63, 0x0c, 0x8b]).len(), 4); // movslq (%rbx,%rcx,4),%rcx
        assert_eq!(dec(&[0x48, 0x01, 0xd9]).len(), 3); // add %rbx,%rcx
        let inc = dec(&[0xff, 0x45, 0x08]);
        assert_eq!(inc.len(), 3);
        assert_eq!(inc.class, InstClass::None);
        assert_eq!(dec(&[0xff, 0x4d, 0x08]).len(), 3); // decl 0x8(%rbp)
    }

    #[test]
    fn desync_or_swallows_seven_bytes() {
        let d = dec(&[0x45, 0x08, 0x90, 0xff, 0x4d, 0x08, 0x90]);
        assert_eq!(d.len(), 7);
        assert_eq!(d.class, InstClass::None);
    }

    #[test]
    fn multibyte_nops() {
        assert_eq!(dec(&[0x66, 0x0f, 0x1f, 0x44, 0x00, 0x00]).len(), 6);
        assert_eq!(dec(&[0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00]).len(), 8);
        assert_eq!(dec(&[0x0f, 0x1f, 0x00]).len(), 3);
    }

    #[test]
    fn mov_imm_widths() {
        assert_eq!(dec(&[0xb8, 0x3c, 0x00, 0x00, 0x00]).len(), 5);
        assert_eq!(dec(&[0x48, 0xb8, 1, 2, 3, 4, 5, 6, 7, 8]).len(), 10);
        assert_eq!(dec(&[0x66, 0xb8, 0x34, 0x12]).len(), 4);
        assert_eq!(dec(&[0x41, 0xb8, 0x01, 0x00, 0x00, 0x00]).len(), 6);
    }

    #[test]
    fn push_pop_and_push_imm() {
        assert_eq!(dec(&[0x55]).len(), 1);
        assert_eq!(dec(&[0x5d]).len(), 1);
        assert_eq!(dec(&[0x68, 0, 0, 0, 0]).len(), 5);
    }

    #[test]
    fn indirect_call_reg() {
        let d = dec(&[0xff, 0xd0]); // call *%rax
        assert_eq!(d.class, InstClass::Indirect);
        assert_eq!(d.len(), 2);
        let d = dec(&[0xff, 0x25, 0xe2, 0x2f, 0x00, 0x00]); // jmp *disp(%rip)
        assert_eq!(d.class, InstClass::Indirect);
        assert_eq!(d.len(), 6);
    }

    #[test]
    fn halting_and_syscall() {
        assert_eq!(dec(&[0x0f, 0x0b]).class, InstClass::Halting);
        assert_eq!(dec(&[0xcc]).class, InstClass::Halting);
        let d = dec(&[0x0f, 0x05]);
        assert_eq!(d.class, InstClass::None);
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn invalid_opcode_reports_position() {
        assert_eq!(decode_len(&[0x06], 0), Err(DecodeError::InvalidOpcode(0)));
        // REX consumed, failure lands on the unknown opcode byte
        assert_eq!(
            decode_len(&[0x48, 0x0f, 0xae, 0x00], 0),
            Err(DecodeError::InvalidOpcode(1))
        );
    }

    #[test]
    fn truncated_at_image_end() {
        assert_eq!(
            decode_len(&[0xe8, 0xc5, 0xfe], 0),
            Err(DecodeError::Truncated(0))
        );
    }

    #[test]
    fn classify_known_transfer_encodings() {
        assert_eq!(classify_transfer(&[0x3e, 0xff, 0xe0]).unwrap(), Some(EdgeKind::Indirect));
        assert_eq!(classify_transfer(&[0xc3]).unwrap(), Some(EdgeKind::Return));
        assert_eq!(classify_transfer(&[0x7f, 0x26]).unwrap(), Some(EdgeKind::Cbr));
        assert_eq!(classify_transfer(&[0x90]).unwrap(), None);
        assert_eq!(
            classify_transfer(&[0xe8, 0, 0, 0, 0]).unwrap(),
            Some(EdgeKind::Direct)
        );
        // FF /2 and /4 keep their class under 66/3E/REX prefixes
        assert_eq!(classify_transfer(&[0x66, 0xff, 0xe0]).unwrap(), Some(EdgeKind::Indirect));
        assert_eq!(classify_transfer(&[0x48, 0xff, 0xd0]).unwrap(), Some(EdgeKind::Indirect));
        assert_eq!(
            classify_transfer(&[0x3e, 0x41, 0xff, 0xe1]).unwrap(),
            Some(EdgeKind::Indirect)
        );
        // trailing garbage after a complete instruction is rejected
        assert!(classify_transfer(&[0xc3, 0x90]).is_err());
    }

    #[test]
    fn sweep_partitions_clean_code() {
        let image = [0x55, 0x48, 0x89, 0xe5, 0x90, 0x5d, 0xc3];
        let view = linear_sweep(&image, 0, HeuristicConfig::default());
        let offs: Vec<u64> = view.insts().keys().copied().collect();
        assert_eq!(offs, vec![0, 1, 4, 5, 6]);
        let total: u64 = view.insts().values().map(|r| r.len).sum();
        assert_eq!(total, image.len() as u64);
    }

    #[test]
    fn sweep_skip_byte_resyncs() {
        // 0x06 is invalid; with skip-byte the sweep recovers on the nop
        let image = [0x06, 0x90, 0xc3];
        let view = linear_sweep(&image, 0, HeuristicConfig::default());
        let offs: Vec<u64> = view.insts().keys().copied().collect();
        assert_eq!(offs, vec![1, 2]);

        let stop = HeuristicConfig { skip_byte_on_invalid: false, ..Default::default() };
        let view = linear_sweep(&image, 0, stop);
        assert!(view.insts().is_empty());
    }

    #[test]
    fn descent_stops_at_direct_jmp_and_follows_targets() {
        // 0: jmp 4; 2: nop (unreachable); 3: nop (unreachable); 4: ret
        let image = [0xeb, 0x02, 0x90, 0x90, 0xc3];
        let view = recursive_descent(&image, &[0], HeuristicConfig::default());
        let offs: Vec<u64> = view.insts().keys().copied().collect();
        assert_eq!(offs, vec![0, 4]);
    }

    #[test]
    fn descent_output_is_a_fixpoint() {
        let image = [0xeb, 0x02, 0x90, 0x90, 0x74, 0xfa, 0xc3];
        let cfg = HeuristicConfig::default();
        let view = recursive_descent(&image, &[0], cfg);
        let entries: Vec<u64> = view.insts().keys().copied().collect();
        let again = recursive_descent(&image, &entries, cfg);
        assert_eq!(view.insts(), again.insts());
    }

    #[test]
    fn descent_endbr_scan_discovers_island() {
        // 0: ret; island at 1: endbr64; nop; ret
        let image = [0xc3, 0xf3, 0x0f, 0x1e, 0xfa, 0x90, 0xc3];
        let plain = recursive_descent(&image, &[0], HeuristicConfig::default());
        assert_eq!(plain.insts().len(), 1);
        let cfg = HeuristicConfig { endbr_scan: true, ..Default::default() };
        let scanned = recursive_descent(&image, &[0], cfg);
        let offs: Vec<u64> = scanned.insts().keys().copied().collect();
        assert_eq!(offs, vec![0, 1, 5, 6]);
    }

    #[test]
    fn descent_noreturn_cuts_fall_through() {
        // 0: call 7; 5: nop; 6: ret; 7: ret
        let image = [0xe8, 0x02, 0x00, 0x00, 0x00, 0x90, 0xc3, 0xc3];
        let cfg = HeuristicConfig::default();
        let full = recursive_descent(&image, &[0], cfg);
        assert!(full.insts().contains_key(&5));
        let cut = recursive_descent_with_noreturn(
            &image,
            &[0],
            cfg,
            &BTreeSet::from([7u64]),
        );
        assert!(!cut.insts().contains_key(&5));
        assert!(cut.insts().contains_key(&7));
    }
}

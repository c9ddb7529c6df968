//! Byte-to-AST decoder, the inverse of [`encode_instruction`].
//!
//! Returns `None` ("undecodable") for anything outside the subset; during
//! gadget scanning that is a skip signal, not an error. Besides the canonical
//! encodings the decoder accepts the common alias forms (imm8 variants,
//! RM-direction ALU/mov, short jumps, eax-specific immediates, `C7 /0` to a
//! register, `D1` shift-by-one) and normalizes them to the same AST, so
//! re-encoding an alias yields the canonical bytes. Re-encoding a canonical
//! encoding yields it unchanged.

use super::{ins, Cc, Instruction, MemRef, Mnemonic, Operand, Reg8, Register, Width};

/// Decode one instruction at `bytes[at..]`. `None` means undecodable here.
pub fn decode_instruction(bytes: &[u8], at: usize) -> Option<(Instruction, usize)> {
    let mut r = Rd {
        b: bytes.get(at..)?,
        pos: 0,
    };
    let instr = decode_at(&mut r)?;
    Some((instr, r.pos))
}

struct Rd<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Rd<'_> {
    fn u8(&mut self) -> Option<u8> {
        let v = *self.b.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }
    fn i8(&mut self) -> Option<i8> {
        self.u8().map(|v| v as i8)
    }
    fn u32(&mut self) -> Option<u32> {
        let s = self.b.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn i32(&mut self) -> Option<i32> {
        self.u32().map(|v| v as i32)
    }
}

/// Split a ModRM byte into (mod, reg, rm).
fn split_modrm(b: u8) -> (u8, u8, u8) {
    (b >> 6, (b >> 3) & 7, b & 7)
}

/// Register-or-memory right side of a ModRM.
enum Rm {
    Reg(Register),
    Mem(MemRef),
}

/// Parse ModRM (+SIB +disp) into (reg_field, rm).
fn modrm_rm(r: &mut Rd) -> Option<(u8, Rm)> {
    let (mod_, reg, rm) = split_modrm(r.u8()?);
    if mod_ == 3 {
        return Some((reg, Rm::Reg(Register::from_number(rm)?)));
    }
    let mut mem = MemRef {
        base: None,
        index: None,
        scale: 1,
        disp: 0,
        width: Width::Dword,
    };
    if rm == 4 {
        let sib = r.u8()?;
        let (ss, ix, base) = split_modrm(sib);
        if ix != 4 {
            mem.index = Some(Register::from_number(ix)?);
            mem.scale = 1 << ss;
        }
        if base == 5 && mod_ == 0 {
            mem.disp = r.i32()?;
        } else {
            mem.base = Some(Register::from_number(base)?);
        }
    } else if rm == 5 && mod_ == 0 {
        mem.disp = r.i32()?;
        return Some((reg, Rm::Mem(mem)));
    } else {
        mem.base = Some(Register::from_number(rm)?);
    }
    match mod_ {
        0 => {}
        1 => mem.disp = r.i8()? as i32,
        2 => mem.disp = r.i32()?,
        _ => unreachable!(),
    }
    Some((reg, Rm::Mem(mem)))
}

fn reg8(n: u8) -> Option<Reg8> {
    Reg8::from_number(n)
}

fn alu_by_mr(op: u8) -> Option<Mnemonic> {
    Some(match op {
        0x01 => Mnemonic::Add,
        0x09 => Mnemonic::Or,
        0x21 => Mnemonic::And,
        0x29 => Mnemonic::Sub,
        0x31 => Mnemonic::Xor,
        0x39 => Mnemonic::Cmp,
        _ => return None,
    })
}

fn alu_by_ext(ext: u8) -> Option<Mnemonic> {
    Some(match ext {
        0 => Mnemonic::Add,
        1 => Mnemonic::Or,
        4 => Mnemonic::And,
        5 => Mnemonic::Sub,
        6 => Mnemonic::Xor,
        7 => Mnemonic::Cmp,
        _ => return None,
    })
}

fn decode_at(r: &mut Rd) -> Option<Instruction> {
    let op = r.u8()?;
    let i = match op {
        // 8-bit ALU, MR form; register operands only in the subset.
        0x00 | 0x08 | 0x20 | 0x28 | 0x30 | 0x38 => {
            let m = alu_by_mr(op + 1)?;
            let (reg, rm) = modrm_rm(r)?;
            match rm {
                Rm::Reg(d) => ins::alu8_rr(m, d.low8()?, reg8(reg)?),
                Rm::Mem(_) => return None,
            }
        }
        // 32-bit ALU, MR form.
        0x01 | 0x09 | 0x21 | 0x29 | 0x31 | 0x39 => {
            let m = alu_by_mr(op)?;
            let (reg, rm) = modrm_rm(r)?;
            let src = Register::from_number(reg)?;
            match rm {
                Rm::Reg(d) => ins::alu_rr(m, d, src),
                Rm::Mem(mem) => ins::alu_mr(m, mem, src),
            }
        }
        // 32-bit ALU, RM alias direction.
        0x03 | 0x0b | 0x23 | 0x2b | 0x33 | 0x3b => {
            let m = alu_by_mr(op - 2)?;
            let (reg, rm) = modrm_rm(r)?;
            let dst = Register::from_number(reg)?;
            match rm {
                Rm::Reg(s) => ins::alu_rr(m, dst, s),
                Rm::Mem(mem) => ins::alu_rm(m, dst, mem),
            }
        }
        // ALU eax, imm32 short forms.
        0x05 | 0x0d | 0x25 | 0x2d | 0x35 | 0x3d => {
            let m = alu_by_mr(op - 4)?;
            ins::alu_ri(m, Register::Eax, r.u32()?)
        }
        0x0f => return decode_0f(r),
        0x40..=0x47 => ins::inc_r(Register::from_number(op - 0x40)?),
        0x48..=0x4f => ins::dec_r(Register::from_number(op - 0x48)?),
        0x50..=0x57 => ins::push_r(Register::from_number(op - 0x50)?),
        0x58..=0x5f => ins::pop_r(Register::from_number(op - 0x58)?),
        0x68 => ins::push_imm(r.u32()?),
        0x6a => ins::push_imm(r.i8()? as i32 as u32),
        // Short conditional jumps.
        0x70..=0x7f => {
            let cc = Cc::from_number(op - 0x70)?;
            let rel = r.i8()? as i32;
            Instruction::new(Mnemonic::Jcc(cc), vec![Operand::Imm(rel)])
        }
        // Group-1 immediates.
        0x80 => {
            let (ext, rm) = modrm_rm(r)?;
            let m = alu_by_ext(ext)?;
            match rm {
                Rm::Reg(d) => ins::alu8_ri(m, d.low8()?, r.u8()?),
                Rm::Mem(_) => return None,
            }
        }
        0x81 | 0x83 => {
            let (ext, rm) = modrm_rm(r)?;
            let m = alu_by_ext(ext)?;
            let imm = if op == 0x81 {
                r.u32()?
            } else {
                r.i8()? as i32 as u32
            };
            match rm {
                Rm::Reg(d) => ins::alu_ri(m, d, imm),
                Rm::Mem(mem) => ins::alu_mi(m, mem, imm),
            }
        }
        0x85 => {
            let (reg, rm) = modrm_rm(r)?;
            match rm {
                Rm::Reg(a) => ins::alu_rr(Mnemonic::Test, a, Register::from_number(reg)?),
                Rm::Mem(_) => return None,
            }
        }
        0x87 => {
            let (reg, rm) = modrm_rm(r)?;
            let b = Register::from_number(reg)?;
            match rm {
                Rm::Reg(a) => ins::xchg_rr(a, b),
                Rm::Mem(mem) => ins::xchg_mr(mem, b),
            }
        }
        // 8-bit mov, register-to-register only; 0x8a is the RM alias.
        0x88 | 0x8a => {
            let (reg, rm) = modrm_rm(r)?;
            let reg = reg8(reg)?;
            match rm {
                Rm::Reg(x) => {
                    let x = x.low8()?;
                    if op == 0x88 {
                        ins::mov8_rr(x, reg)
                    } else {
                        ins::mov8_rr(reg, x)
                    }
                }
                Rm::Mem(_) => return None,
            }
        }
        0x89 => {
            let (reg, rm) = modrm_rm(r)?;
            let s = Register::from_number(reg)?;
            match rm {
                Rm::Reg(d) => ins::mov_rr(d, s),
                Rm::Mem(mem) => ins::mov_mr(mem, s),
            }
        }
        0x8b => {
            let (reg, rm) = modrm_rm(r)?;
            let d = Register::from_number(reg)?;
            match rm {
                Rm::Reg(s) => ins::mov_rr(d, s),
                Rm::Mem(mem) => ins::mov_rm(d, mem),
            }
        }
        0x8d => {
            let (reg, rm) = modrm_rm(r)?;
            match rm {
                Rm::Mem(mem) => ins::lea(Register::from_number(reg)?, mem),
                Rm::Reg(_) => return None,
            }
        }
        0x90 => ins::xchg_rr(Register::Eax, Register::Eax),
        0x91..=0x97 => ins::xchg_rr(Register::from_number(op - 0x90)?, Register::Eax),
        0x9c => ins::pushf(),
        0x9d => ins::popf(),
        0xa9 => Instruction::new(
            Mnemonic::Test,
            vec![Operand::Reg(Register::Eax), Operand::Imm(r.i32()?)],
        ),
        0xb0..=0xb3 => ins::mov8_ri(reg8(op - 0xb0)?, r.u8()?),
        0xb8..=0xbf => ins::mov_ri(Register::from_number(op - 0xb8)?, r.u32()?),
        0xc1 | 0xd1 => {
            let (ext, rm) = modrm_rm(r)?;
            let reg = match rm {
                Rm::Reg(x) => x,
                Rm::Mem(_) => return None,
            };
            let k = if op == 0xc1 { r.u8()? } else { 1 };
            if k > 31 {
                return None;
            }
            match ext {
                4 => ins::shl_ri(reg, k),
                5 => ins::shr_ri(reg, k),
                _ => return None,
            }
        }
        0xc3 => ins::ret(),
        0xc7 => {
            let (ext, rm) = modrm_rm(r)?;
            if ext != 0 {
                return None;
            }
            match rm {
                Rm::Reg(d) => ins::mov_ri(d, r.u32()?),
                Rm::Mem(mem) => ins::mov_mi(mem, r.u32()?),
            }
        }
        0xe8 => Instruction::new(Mnemonic::Call, vec![Operand::Imm(r.i32()?)]),
        0xe9 => Instruction::new(Mnemonic::Jmp, vec![Operand::Imm(r.i32()?)]),
        0xeb => Instruction::new(Mnemonic::Jmp, vec![Operand::Imm(r.i8()? as i32)]),
        0xf7 => {
            let (ext, rm) = modrm_rm(r)?;
            let reg = match rm {
                Rm::Reg(x) => x,
                Rm::Mem(_) => return None,
            };
            match ext {
                0 => Instruction::new(
                    Mnemonic::Test,
                    vec![Operand::Reg(reg), Operand::Imm(r.i32()?)],
                ),
                2 => ins::not_r(reg),
                3 => ins::neg_r(reg),
                4 => ins::mul_r(reg),
                _ => return None,
            }
        }
        _ => return None,
    };
    Some(i)
}

fn decode_0f(r: &mut Rd) -> Option<Instruction> {
    let op = r.u8()?;
    let i = match op {
        0x40..=0x4f => {
            let cc = Cc::from_number(op - 0x40)?;
            let (reg, rm) = modrm_rm(r)?;
            match rm {
                Rm::Reg(s) => ins::cmov(cc, Register::from_number(reg)?, s),
                Rm::Mem(_) => return None,
            }
        }
        0x80..=0x8f => {
            let cc = Cc::from_number(op - 0x80)?;
            let rel = r.i32()?;
            Instruction::new(Mnemonic::Jcc(cc), vec![Operand::Imm(rel)])
        }
        0x90..=0x9f => {
            let cc = Cc::from_number(op - 0x90)?;
            let (_, rm) = modrm_rm(r)?;
            match rm {
                Rm::Reg(d) => ins::setcc(cc, d.low8()?),
                Rm::Mem(_) => return None,
            }
        }
        0xb6 | 0xbe => {
            let m = if op == 0xb6 { Mnemonic::Movzx } else { Mnemonic::Movsx };
            let (reg, rm) = modrm_rm(r)?;
            let d = Register::from_number(reg)?;
            match rm {
                Rm::Reg(s) => Instruction::new(m, vec![Operand::Reg(d), Operand::Reg8(s.low8()?)]),
                Rm::Mem(mem) => Instruction::new(
                    m,
                    vec![Operand::Reg(d), Operand::Mem(mem.with_width(Width::Byte))],
                ),
            }
        }
        0xb7 | 0xbf => {
            let m = if op == 0xb7 { Mnemonic::Movzx } else { Mnemonic::Movsx };
            let (reg, rm) = modrm_rm(r)?;
            let d = Register::from_number(reg)?;
            match rm {
                // 16-bit registers are outside the subset.
                Rm::Reg(_) => return None,
                Rm::Mem(mem) => Instruction::new(
                    m,
                    vec![Operand::Reg(d), Operand::Mem(mem.with_width(Width::Word))],
                ),
            }
        }
        _ => return None,
    };
    Some(i)
}

#[cfg(test)]
mod tests {
    use super::super::encode::{encode_instruction, oracle_table};
    use super::super::{ins, Cc, Mnemonic, Operand, Register};
    use super::*;

    #[test]
    fn canonical_bytes_decode_to_table_instructions() {
        for (bytes, instr) in oracle_table() {
            let (got, len) = decode_instruction(&bytes, 0)
                .unwrap_or_else(|| panic!("undecodable: {} ({instr})", hexstr(&bytes)));
            assert_eq!(len, bytes.len(), "length mismatch for {instr}");
            assert_eq!(got, instr, "decode mismatch for {}", hexstr(&bytes));
        }
    }

    #[test]
    fn decode_ignores_bytes_before_at() {
        let bytes = [0xff, 0x59, 0xc3];
        let (i, len) = decode_instruction(&bytes, 1).unwrap();
        assert_eq!(i, ins::pop_r(Register::Ecx));
        assert_eq!(len, 1);
        let (i, _) = decode_instruction(&bytes, 2).unwrap();
        assert_eq!(i, ins::ret());
    }

    #[test]
    fn aliases_normalize_to_canonical_ast() {
        let cases: Vec<(Vec<u8>, Instruction)> = vec![
            (vec![0x8b, 0xc2], ins::mov_rr(Register::Eax, Register::Edx)),
            (vec![0x6a, 0x7b], ins::push_imm(123)),
            (vec![0x6a, 0xfc], ins::push_imm(0xffff_fffc)),
            (vec![0x83, 0xc0, 0xfc], ins::alu_ri(Mnemonic::Add, Register::Eax, 0xffff_fffc)),
            (vec![0x05, 0x01, 0, 0, 0], ins::alu_ri(Mnemonic::Add, Register::Eax, 1)),
            (vec![0x03, 0xc1], ins::alu_rr(Mnemonic::Add, Register::Eax, Register::Ecx)),
            (vec![0xeb, 0x05], Instruction::new(Mnemonic::Jmp, vec![Operand::Imm(5)])),
            (
                vec![0x74, 0xfe],
                Instruction::new(Mnemonic::Jcc(Cc::E), vec![Operand::Imm(-2)]),
            ),
            (vec![0xd1, 0xe1], ins::shl_ri(Register::Ecx, 1)),
            (
                vec![0xa9, 0x01, 0, 0, 0],
                Instruction::new(Mnemonic::Test, vec![Operand::Reg(Register::Eax), Operand::Imm(1)]),
            ),
            (vec![0xc7, 0xc1, 0x07, 0, 0, 0], ins::mov_ri(Register::Ecx, 7)),
        ];
        for (bytes, want) in cases {
            let (got, len) = decode_instruction(&bytes, 0)
                .unwrap_or_else(|| panic!("undecodable alias {}", hexstr(&bytes)));
            assert_eq!(len, bytes.len());
            assert_eq!(got, want, "alias {}", hexstr(&bytes));
        }
    }

    #[test]
    fn undecodable_bytes() {
        for bytes in [
            &[0x0f, 0xff][..],
            &[0x66, 0x90],       // operand-size prefix
            &[0xf4],             // hlt
            &[0xff, 0xd0],       // call eax (indirect control flow is out)
            &[0xb8, 0x01, 0x02], // truncated imm32
            &[0x0f],
            &[],
            &[0x0f, 0x98, 0xc0], // sets: condition outside subset
            &[0xb4, 0x01],       // mov ah, imm8: high byte regs are out
            &[0xf7, 0xf1],       // div
        ] {
            assert!(
                decode_instruction(bytes, 0).is_none(),
                "expected undecodable: {}",
                hexstr(bytes)
            );
        }
    }

    #[test]
    fn reencoding_canonical_bytes_is_identity() {
        for (bytes, _) in oracle_table() {
            let (i, len) = decode_instruction(&bytes, 0).unwrap();
            assert_eq!(len, bytes.len());
            assert_eq!(encode_instruction(&i).unwrap(), bytes);
        }
    }

    fn hexstr(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }
}

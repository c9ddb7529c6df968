//! Canonical byte encodings for the subset.
//!
//! Every encodable form has exactly one output encoding, so size metrics and
//! synthetic-library layouts are deterministic. The table was frozen against
//! GNU objdump (binary mode, i386, Intel syntax) before anything downstream
//! was built on it; `tests` carries the full verified table, which the
//! decoder's tests reuse for round-trips.
//!
//! Branch operands must already be resolved to displacements (an `Imm`
//! holding the offset relative to the next instruction). `Label` and
//! symbol+offset operands are not encodable; the assembler substitutes them
//! first. [`encoded_len`] sizes an instruction without resolution, since all
//! label-bearing forms occupy fixed imm32/rel32 slots.

use super::{AsmError, Instruction, MemRef, Mnemonic, Operand, Register, Width};

pub fn encode_instruction(i: &Instruction) -> Result<Vec<u8>, AsmError> {
    use Mnemonic as M;
    use Operand as O;

    let err = |what: &str| {
        Err(AsmError::NotEncodable(format!(
            "{what}: {}",
            super::print_instruction(i)
        )))
    };

    let out: Vec<u8> = match (&i.mnemonic, i.operands.as_slice()) {
        // --- mov family ---
        (M::Mov, [O::Reg(d), O::Reg(s)]) => vec![0x89, modrm(3, s.number(), d.number())],
        (M::Mov, [O::Reg(d), O::Imm(v)]) => cat(vec![0xb8 + d.number()], imm32(*v)),
        (M::Mov, [O::Reg(d), O::Mem(m)]) if m.width == Width::Dword => {
            cat(vec![0x8b], mem_bytes(d.number(), m)?)
        }
        (M::Mov, [O::Mem(m), O::Reg(s)]) if m.width == Width::Dword => {
            cat(vec![0x89], mem_bytes(s.number(), m)?)
        }
        (M::Mov, [O::Mem(m), O::Imm(v)]) if m.width == Width::Dword => {
            cat(cat(vec![0xc7], mem_bytes(0, m)?), imm32(*v))
        }
        (M::Mov, [O::Reg8(d), O::Reg8(s)]) => vec![0x88, modrm(3, s.number(), d.number())],
        (M::Mov, [O::Reg8(d), O::Imm(v)]) => vec![0xb0 + d.number(), imm8(*v)?],

        // --- movzx / movsx ---
        (M::Movzx, [O::Reg(d), O::Reg8(s)]) => vec![0x0f, 0xb6, modrm(3, d.number(), s.number())],
        (M::Movzx, [O::Reg(d), O::Mem(m)]) if m.width == Width::Byte => {
            cat(vec![0x0f, 0xb6], mem_bytes(d.number(), m)?)
        }
        (M::Movzx, [O::Reg(d), O::Mem(m)]) if m.width == Width::Word => {
            cat(vec![0x0f, 0xb7], mem_bytes(d.number(), m)?)
        }
        (M::Movsx, [O::Reg(d), O::Reg8(s)]) => vec![0x0f, 0xbe, modrm(3, d.number(), s.number())],
        (M::Movsx, [O::Reg(d), O::Mem(m)]) if m.width == Width::Byte => {
            cat(vec![0x0f, 0xbe], mem_bytes(d.number(), m)?)
        }
        (M::Movsx, [O::Reg(d), O::Mem(m)]) if m.width == Width::Word => {
            cat(vec![0x0f, 0xbf], mem_bytes(d.number(), m)?)
        }

        // --- lea / xchg ---
        (M::Lea, [O::Reg(d), O::Mem(m)]) => cat(vec![0x8d], mem_bytes(d.number(), m)?),
        (M::Xchg, [O::Reg(a), O::Reg(b)]) => match (a, b) {
            (Register::Eax, r) | (r, Register::Eax) => vec![0x90 + r.number()],
            _ => vec![0x87, modrm(3, b.number(), a.number())],
        },
        (M::Xchg, [O::Mem(m), O::Reg(r)]) | (M::Xchg, [O::Reg(r), O::Mem(m)])
            if m.width == Width::Dword =>
        {
            cat(vec![0x87], mem_bytes(r.number(), m)?)
        }

        // --- two-operand ALU ---
        (m @ (M::Add | M::Or | M::And | M::Sub | M::Xor | M::Cmp), ops) => {
            let (mr, ext) = alu_codes(*m);
            match ops {
                [O::Reg(d), O::Reg(s)] => vec![mr, modrm(3, s.number(), d.number())],
                [O::Reg(d), O::Imm(v)] => {
                    cat(vec![0x81, modrm(3, ext, d.number())], imm32(*v))
                }
                [O::Reg(d), O::Mem(mem)] if mem.width == Width::Dword => {
                    cat(vec![mr + 2], mem_bytes(d.number(), mem)?)
                }
                [O::Mem(mem), O::Reg(s)] if mem.width == Width::Dword => {
                    cat(vec![mr], mem_bytes(s.number(), mem)?)
                }
                [O::Mem(mem), O::Imm(v)] if mem.width == Width::Dword => {
                    cat(cat(vec![0x81], mem_bytes(ext, mem)?), imm32(*v))
                }
                [O::Reg8(d), O::Reg8(s)] => vec![mr - 1, modrm(3, s.number(), d.number())],
                [O::Reg8(d), O::Imm(v)] => vec![0x80, modrm(3, ext, d.number()), imm8(*v)?],
                _ => return err("bad ALU operands"),
            }
        }

        // --- test / unary group ---
        (M::Test, [O::Reg(a), O::Reg(b)]) => vec![0x85, modrm(3, b.number(), a.number())],
        (M::Test, [O::Reg(a), O::Imm(v)]) => {
            cat(vec![0xf7, modrm(3, 0, a.number())], imm32(*v))
        }
        (M::Not, [O::Reg(r)]) => vec![0xf7, modrm(3, 2, r.number())],
        (M::Neg, [O::Reg(r)]) => vec![0xf7, modrm(3, 3, r.number())],
        (M::Mul, [O::Reg(r)]) => vec![0xf7, modrm(3, 4, r.number())],
        (M::Inc, [O::Reg(r)]) => vec![0x40 + r.number()],
        (M::Dec, [O::Reg(r)]) => vec![0x48 + r.number()],

        // --- shifts ---
        (M::Shl, [O::Reg(r), O::Imm(k)]) if (0..32).contains(k) => {
            vec![0xc1, modrm(3, 4, r.number()), *k as u8]
        }
        (M::Shr, [O::Reg(r), O::Imm(k)]) if (0..32).contains(k) => {
            vec![0xc1, modrm(3, 5, r.number()), *k as u8]
        }

        // --- stack ---
        (M::Push, [O::Reg(r)]) => vec![0x50 + r.number()],
        (M::Push, [O::Imm(v)]) => cat(vec![0x68], imm32(*v)),
        (M::Pop, [O::Reg(r)]) => vec![0x58 + r.number()],
        (M::Pushf, []) => vec![0x9c],
        (M::Popf, []) => vec![0x9d],

        // --- control flow ---
        (M::Ret, []) => vec![0xc3],
        (M::Jmp, [O::Imm(rel)]) => cat(vec![0xe9], imm32(*rel)),
        (M::Call, [O::Imm(rel)]) => cat(vec![0xe8], imm32(*rel)),
        (M::Jcc(cc), [O::Imm(rel)]) => cat(vec![0x0f, 0x80 + cc.number()], imm32(*rel)),
        (M::Setcc(cc), [O::Reg8(r)]) => {
            vec![0x0f, 0x90 + cc.number(), modrm(3, 0, r.number())]
        }
        (M::Cmovcc(cc), [O::Reg(d), O::Reg(s)]) => {
            vec![0x0f, 0x40 + cc.number(), modrm(3, d.number(), s.number())]
        }

        (_, ops) if ops.iter().any(|o| matches!(o, O::Label(_) | O::SymOff { .. })) => {
            return err("unresolved label or symbol")
        }
        _ => return err("no encoding for form"),
    };
    Ok(out)
}

/// Size of `i` once assembled. Label and symbol operands sit in imm32/rel32
/// slots, so the size is known before resolution.
pub fn encoded_len(i: &Instruction) -> Result<usize, AsmError> {
    let needs_sub = i
        .operands
        .iter()
        .any(|o| matches!(o, Operand::Label(_) | Operand::SymOff { .. }));
    if !needs_sub {
        return Ok(encode_instruction(i)?.len());
    }
    let mut sub = i.clone();
    for op in &mut sub.operands {
        if matches!(op, Operand::Label(_) | Operand::SymOff { .. }) {
            *op = Operand::Imm(0x0100_0000);
        }
    }
    Ok(encode_instruction(&sub)?.len())
}

fn alu_codes(m: Mnemonic) -> (u8, u8) {
    match m {
        Mnemonic::Add => (0x01, 0),
        Mnemonic::Or => (0x09, 1),
        Mnemonic::And => (0x21, 4),
        Mnemonic::Sub => (0x29, 5),
        Mnemonic::Xor => (0x31, 6),
        Mnemonic::Cmp => (0x39, 7),
        _ => unreachable!("not an ALU mnemonic"),
    }
}

fn modrm(mod_: u8, reg: u8, rm: u8) -> u8 {
    (mod_ << 6) | (reg << 3) | rm
}

fn imm32(v: i32) -> Vec<u8> {
    (v as u32).to_le_bytes().to_vec()
}

fn imm8(v: i32) -> Result<u8, AsmError> {
    if (-128..=255).contains(&v) {
        Ok(v as u8)
    } else {
        Err(AsmError::NotEncodable(format!("imm8 out of range: {v}")))
    }
}

fn cat(mut a: Vec<u8>, b: Vec<u8>) -> Vec<u8> {
    a.extend(b);
    a
}

/// ModRM + optional SIB + displacement for a memory operand, with `reg_field`
/// in the reg slot. Picks disp8 when it fits; esp as base forces a SIB byte,
/// ebp as base forces a displacement.
fn mem_bytes(reg_field: u8, m: &MemRef) -> Result<Vec<u8>, AsmError> {
    const SIB_NO_INDEX: u8 = 4;
    const RM_SIB: u8 = 4;
    const RM_DISP32: u8 = 5;

    if m.index == Some(Register::Esp) {
        return Err(AsmError::NotEncodable("esp cannot be an index".into()));
    }
    let scale_bits = match m.scale {
        1 => 0u8,
        2 => 1,
        4 => 2,
        8 => 3,
        s => return Err(AsmError::NotEncodable(format!("bad scale {s}"))),
    };

    let mut out = Vec::with_capacity(6);
    match (m.base, m.index) {
        (None, None) => {
            out.push(modrm(0, reg_field, RM_DISP32));
            out.extend(imm32(m.disp));
        }
        (None, Some(ix)) => {
            // Index without base: SIB with base=101 under mod=00, disp32.
            out.push(modrm(0, reg_field, RM_SIB));
            out.push((scale_bits << 6) | (ix.number() << 3) | 5);
            out.extend(imm32(m.disp));
        }
        (Some(base), index) => {
            let needs_sib = base == Register::Esp || index.is_some();
            let (mod_, disp): (u8, Vec<u8>) =
                if m.disp == 0 && base != Register::Ebp {
                    (0, vec![])
                } else if let Ok(d8) = i8::try_from(m.disp) {
                    (1, vec![d8 as u8])
                } else {
                    (2, imm32(m.disp))
                };
            if needs_sib {
                out.push(modrm(mod_, reg_field, RM_SIB));
                let ix_bits = index.map_or(SIB_NO_INDEX, |r| r.number());
                out.push((scale_bits << 6) | (ix_bits << 3) | base.number());
            } else {
                out.push(modrm(mod_, reg_field, base.number()));
            }
            out.extend(disp);
        }
    }
    Ok(out)
}

// --- frozen oracle table ---------------------------------------------------

/// Canonical (bytes, instruction) pairs verified against objdump. Shared with
/// the decoder tests for the inverse direction.
#[cfg(test)]
pub(crate) fn oracle_table() -> Vec<(Vec<u8>, Instruction)> {
    use super::ins;
    use super::{Cc, Mnemonic as M, Operand as O, Reg8, Register as R};

    let hex = |s: &str| -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|k| u8::from_str_radix(&s[k..k + 2], 16).unwrap())
            .collect()
    };
    let mut t: Vec<(Vec<u8>, Instruction)> = Vec::new();
    let mut put = |h: &str, i: Instruction| t.push((hex(h), i));

    // Stack ops.
    for r in R::ALL {
        put(&format!("{:02x}", 0x58 + r.number()), ins::pop_r(r));
        put(&format!("{:02x}", 0x50 + r.number()), ins::push_r(r));
    }
    put("687b000000", ins::push_imm(123));
    put("680d1f0000", ins::push_imm(0x1f0d));
    put("c3", ins::ret());
    put("9c", ins::pushf());
    put("9d", ins::popf());

    // mov r, imm32.
    for r in R::ALL {
        put(&format!("{:02x}41000000", 0xb8 + r.number()), ins::mov_ri(r, 0x41));
    }

    // mov r, r and memory forms.
    put("89d0", ins::mov_rr(R::Eax, R::Edx));
    put("89c2", ins::mov_rr(R::Edx, R::Eax));
    put("8b01", ins::mov_rm(R::Eax, MemRef::base(R::Ecx)));
    put("8b442408", ins::mov_rm(R::Eax, MemRef::base_disp(R::Esp, 8)));
    put("8b4604", ins::mov_rm(R::Eax, MemRef::base_disp(R::Esi, 4)));
    put("8b5dfc", ins::mov_rm(R::Ebx, MemRef::base_disp(R::Ebp, -4)));
    put("895424f0", ins::mov_mr(MemRef::base_disp(R::Esp, -16), R::Edx));
    put("890b", ins::mov_mr(MemRef::base(R::Ebx), R::Ecx));
    put("c74424e0c8010000", ins::mov_mi(MemRef::base_disp(R::Esp, -32), 456));

    // movsx / movzx.
    put("0fbe06", ins::movsx_m(R::Eax, MemRef::base(R::Esi).byte()));
    put("0fbec3", Instruction::new(M::Movsx, vec![O::Reg(R::Eax), O::Reg8(Reg8::Bl)]));
    put("0fbf5102", ins::movsx_m(R::Edx, MemRef::base_disp(R::Ecx, 2).word()));
    put("0fb64601", ins::movzx_m(R::Eax, MemRef::base_disp(R::Esi, 1).byte()));
    put("0fb6ca", ins::movzx_r8(R::Ecx, Reg8::Dl));
    put("0fb703", ins::movzx_m(R::Eax, MemRef::base(R::Ebx).word()));

    // lea.
    put("8d6424e8", ins::lea(R::Esp, MemRef::base_disp(R::Esp, -0x18)));
    put("8d64241c", ins::lea(R::Esp, MemRef::base_disp(R::Esp, 0x1c)));
    put("8d4605", ins::lea(R::Eax, MemRef::base_disp(R::Esi, 5)));
    put(
        "8d448b08",
        ins::lea(
            R::Eax,
            MemRef {
                base: Some(R::Ebx),
                index: Some(R::Ecx),
                scale: 4,
                disp: 8,
                width: Width::Dword,
            },
        ),
    );

    // ALU register and immediate forms.
    let alu = [
        (M::Add, 0x01u8, 0u8),
        (M::Or, 0x09, 1),
        (M::And, 0x21, 4),
        (M::Sub, 0x29, 5),
        (M::Xor, 0x31, 6),
        (M::Cmp, 0x39, 7),
    ];
    for (m, mr, ext) in alu {
        put(&format!("{mr:02x}c8"), ins::alu_rr(m, R::Eax, R::Ecx));
        put(&format!("{mr:02x}c2"), ins::alu_rr(m, R::Edx, R::Eax));
        put(
            &format!("81{:02x}41000000", 0xc0 + (ext << 3) + 2),
            ins::alu_ri(m, R::Edx, 0x41),
        );
        put(
            &format!("81{:02x}118259da", 0xc0 + (ext << 3)),
            ins::alu_ri(m, R::Eax, 0xda598211),
        );
    }
    put("034424f8", ins::alu_rm(M::Add, R::Eax, MemRef::base_disp(R::Esp, -8)));
    put("2b4424f4", ins::alu_rm(M::Sub, R::Eax, MemRef::base_disp(R::Esp, -12)));
    put("3316", ins::alu_rm(M::Xor, R::Edx, MemRef::base(R::Esi)));
    put("0b4c24fc", ins::alu_rm(M::Or, R::Ecx, MemRef::base_disp(R::Esp, -4)));
    put("23442410", ins::alu_rm(M::And, R::Eax, MemRef::base_disp(R::Esp, 16)));
    put("3b06", ins::alu_rm(M::Cmp, R::Eax, MemRef::base(R::Esi)));
    put(
        "814424e07f1b9f74",
        ins::alu_mi(M::Add, MemRef::base_disp(R::Esp, -0x20), 0x749f1b7f),
    );
    put("010a", ins::alu_mr(M::Add, MemRef::base(R::Edx), R::Ecx));

    // 8-bit ALU forms.
    for (m, mr, _) in alu {
        put(&format!("{:02x}c1", mr - 1), ins::alu8_rr(m, Reg8::Cl, Reg8::Al));
    }
    put("08d0", ins::alu8_rr(M::Or, Reg8::Al, Reg8::Dl));
    put("20d0", ins::alu8_rr(M::And, Reg8::Al, Reg8::Dl));

    // 8-bit mov and immediate forms.
    put("88d0", ins::mov8_rr(Reg8::Al, Reg8::Dl));
    put("88c2", ins::mov8_rr(Reg8::Dl, Reg8::Al));
    put("b007", ins::mov8_ri(Reg8::Al, 7));
    put("b230", ins::mov8_ri(Reg8::Dl, 0x30));
    put("80f201", ins::alu8_ri(M::Xor, Reg8::Dl, 1));
    put("80c005", ins::alu8_ri(M::Add, Reg8::Al, 5));
    put("80f941", ins::alu8_ri(M::Cmp, Reg8::Cl, 0x41));

    // test / not / neg / mul.
    put("85c8", ins::alu_rr(M::Test, R::Eax, R::Ecx));
    put(
        "f7c201000000",
        Instruction::new(M::Test, vec![O::Reg(R::Edx), O::Imm(1)]),
    );
    put("f7d0", ins::not_r(R::Eax));
    put("f7d9", ins::neg_r(R::Ecx));
    for r in R::ALLOCATABLE {
        put(&format!("f7{:02x}", 0xe0 + r.number()), ins::mul_r(r));
    }

    // inc/dec.
    for r in R::ALL {
        put(&format!("{:02x}", 0x40 + r.number()), ins::inc_r(r));
        put(&format!("{:02x}", 0x48 + r.number()), ins::dec_r(r));
    }

    // Shifts.
    put("c1e00d", ins::shl_ri(R::Eax, 13));
    put("c1e101", ins::shl_ri(R::Ecx, 1));
    put("c1e813", ins::shr_ri(R::Eax, 0x13));

    // xchg: eax short forms then general.
    for r in R::ALL.into_iter().skip(1) {
        put(&format!("{:02x}", 0x90 + r.number()), ins::xchg_rr(r, R::Eax));
    }
    put("87cb", ins::xchg_rr(R::Ebx, R::Ecx));
    put("874424f0", ins::xchg_mr(MemRef::base_disp(R::Esp, -0x10), R::Eax));
    put("90", ins::xchg_rr(R::Eax, R::Eax));

    // Control flow: displacement operands.
    put(
        "e910000000",
        Instruction::new(M::Jmp, vec![O::Imm(0x10)]),
    );
    put("e8fbffffff", Instruction::new(M::Call, vec![O::Imm(-5)]));
    for cc in Cc::ALL {
        put(
            &format!("0f{:02x}00000000", 0x80 + cc.number()),
            Instruction::new(M::Jcc(cc), vec![O::Imm(0)]),
        );
        put(
            &format!("0f{:02x}c0", 0x90 + cc.number()),
            ins::setcc(cc, Reg8::Al),
        );
        put(
            &format!("0f{:02x}c1", 0x40 + cc.number()),
            ins::cmov(cc, R::Eax, R::Ecx),
        );
    }
    put("0f94c2", ins::setcc(Cc::E, Reg8::Dl));

    t
}

#[cfg(test)]
mod tests {
    use super::super::{ins, Operand, Register};
    use super::*;

    #[test]
    fn matches_frozen_oracle_table() {
        for (bytes, instr) in oracle_table() {
            let got = encode_instruction(&instr)
                .unwrap_or_else(|e| panic!("{instr}: {e}"));
            assert_eq!(got, bytes, "encoding mismatch for '{instr}'");
        }
    }

    #[test]
    fn xchg_operand_order_is_byte_equal() {
        let a = encode_instruction(&ins::xchg_rr(Register::Eax, Register::Edx)).unwrap();
        let b = encode_instruction(&ins::xchg_rr(Register::Edx, Register::Eax)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0x92]);
    }

    #[test]
    fn labels_are_not_encodable_but_have_lengths() {
        let p = ins::push_label(".Lchain0");
        assert!(encode_instruction(&p).is_err());
        assert_eq!(encoded_len(&p).unwrap(), 5);
        assert_eq!(encoded_len(&ins::push_symoff("atoi", 0x500)).unwrap(), 5);
        assert_eq!(encoded_len(&ins::jmp("x")).unwrap(), 5);
        assert_eq!(encoded_len(&ins::call("x")).unwrap(), 5);
        assert_eq!(encoded_len(&ins::jcc(super::super::Cc::E, "x")).unwrap(), 6);
        assert_eq!(encoded_len(&ins::mov_r_label(Register::Esi, "msg")).unwrap(), 5);
    }

    #[test]
    fn imm8_range_is_enforced() {
        assert!(encode_instruction(&Instruction::new(
            Mnemonic::Mov,
            vec![Operand::Reg8(super::super::Reg8::Al), Operand::Imm(300)],
        ))
        .is_err());
    }

    #[test]
    fn shift_count_range_is_enforced() {
        assert!(encode_instruction(&ins::shl_ri(Register::Eax, 32)).is_err());
    }
}

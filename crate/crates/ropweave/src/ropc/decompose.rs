//! Instruction decomposition into gadget-shaped micro-operations.
//!
//! Every rewrite preserves the source's register/memory effect exactly and
//! its flag effect either exactly (cmp/test/neg and the plain ALU forms) or
//! not at all, in which case the rewrite is only legal when flags are dead
//! after the instruction and the caller must pass `flags_dead_after`.
//! Scratch registers are drawn uniformly from the free set minus the
//! instruction's own operands; the caller retries with fresh draws when
//! planning fails downstream.

use thiserror::Error;

use crate::asm::{
    footprint, Instruction, MemRef, Mnemonic, Operand, RegSet, Register, Width,
};
use crate::gadgets::{BinOp, GadgetClass, ShiftOp};
use crate::rng::Rng;

use super::MicroOp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecomposeError {
    /// A scratch register was required and none was free.
    #[error("no free register for a scratch")]
    NoFreeRegister,
    /// The instruction shape never decomposes (reported reason).
    #[error("not decomposable: {0}")]
    Unsupported(String),
}

fn unsupported(msg: impl Into<String>) -> DecomposeError {
    DecomposeError::Unsupported(msg.into())
}

/// Tracks which registers remain claimable while building one rewrite.
struct Scratches {
    avail: RegSet,
}

impl Scratches {
    fn new(i: &Instruction, free: RegSet) -> Scratches {
        let fp = footprint(i);
        Scratches {
            avail: free.minus(fp.regs_read).minus(fp.regs_written),
        }
    }

    fn draw(&mut self, rng: &mut Rng) -> Result<Register, DecomposeError> {
        let candidates: Vec<Register> = self.avail.iter().collect();
        if candidates.is_empty() {
            return Err(DecomposeError::NoFreeRegister);
        }
        let r = *rng.pick(&candidates);
        self.avail.remove(r);
        Ok(r)
    }
}

fn bin(op: BinOp, dst: Register, src: Register) -> MicroOp {
    MicroOp::Op(GadgetClass::BinRR { op, dst, src })
}

fn load_imm(r: Register, v: u32) -> MicroOp {
    MicroOp::LoadImm(r, v)
}

/// Materializes a memory operand's address. Plain `[base]` costs nothing;
/// anything else sums disp, base, and scaled index in a scratch.
fn address_of(
    m: &MemRef,
    s: &mut Scratches,
    rng: &mut Rng,
    out: &mut Vec<MicroOp>,
) -> Result<Register, DecomposeError> {
    for r in [m.base, m.index].into_iter().flatten() {
        if r == Register::Esp || r == Register::Ebp {
            return Err(unsupported("esp/ebp-relative memory operand"));
        }
    }
    if let (Some(b), None, 0) = (m.base, m.index, m.disp) {
        return Ok(b);
    }
    let a = s.draw(rng)?;
    out.push(load_imm(a, m.disp as u32));
    if let Some(b) = m.base {
        out.push(bin(BinOp::Add, a, b));
    }
    if let Some(ix) = m.index {
        let shift = match m.scale {
            1 => 0,
            2 => 1,
            4 => 2,
            8 => 3,
            _ => return Err(unsupported("bad scale")),
        };
        let t = s.draw(rng)?;
        out.push(MicroOp::Op(GadgetClass::MovRR { dst: t, src: ix }));
        if shift > 0 {
            out.push(MicroOp::Op(GadgetClass::ShiftImm {
                op: ShiftOp::Shl,
                reg: t,
                k: shift,
            }));
        }
        out.push(bin(BinOp::Add, a, t));
    }
    Ok(a)
}

/// Loads the dword at `m` into a register: the operand's address register
/// when `m` is `[base]`, a scratch otherwise.
fn load_from(
    m: &MemRef,
    s: &mut Scratches,
    rng: &mut Rng,
    out: &mut Vec<MicroOp>,
) -> Result<Register, DecomposeError> {
    let a = address_of(m, s, rng, out)?;
    let t = s.draw(rng)?;
    out.push(MicroOp::Op(GadgetClass::Load { dst: t, src: a }));
    Ok(t)
}

/// Appends the mask/xor/sub sequence that narrows `r` (holding a dword
/// loaded from memory) to the given width, zero- or sign-extended.
fn narrow(
    r: Register,
    w: Width,
    signed: bool,
    s: &mut Scratches,
    rng: &mut Rng,
    out: &mut Vec<MicroOp>,
) -> Result<(), DecomposeError> {
    let (mask, sign_bit) = match w {
        Width::Byte => (0xffu32, 0x80u32),
        Width::Word => (0xffffu32, 0x8000u32),
        Width::Dword => return Ok(()),
    };
    let m = s.draw(rng)?;
    out.push(load_imm(m, mask));
    out.push(bin(BinOp::And, r, m));
    if signed {
        out.push(load_imm(m, sign_bit));
        out.push(bin(BinOp::Xor, r, m));
        out.push(bin(BinOp::Sub, r, m));
    }
    Ok(())
}

/// Requires the flag-clobber license for a rewrite whose flag effect
/// differs from the source's.
fn need_flags_dead(dead: bool, what: &str) -> Result<(), DecomposeError> {
    if dead {
        Ok(())
    } else {
        Err(unsupported(format!("{what} needs dead flags")))
    }
}

/// Rewrites one non-terminator subset instruction into micro-operations
/// whose sequential execution matches it. `free` comes from liveness;
/// `flags_dead_after` licenses rewrites that introduce flag writes.
pub fn decompose(
    i: &Instruction,
    free: RegSet,
    flags_dead_after: bool,
    rng: &mut Rng,
) -> Result<Vec<MicroOp>, DecomposeError> {
    use Mnemonic as M;
    use Operand as O;

    let mut s = Scratches::new(i, free);
    let mut out = Vec::new();
    let ops = i.operands.as_slice();

    match (&i.mnemonic, ops) {
        (M::Mov, [O::Reg(d), O::Reg(src)]) => {
            if d != src {
                out.push(MicroOp::Op(GadgetClass::MovRR { dst: *d, src: *src }));
            }
        }
        (M::Mov, [O::Reg(d), O::Imm(v)]) => out.push(load_imm(*d, *v as u32)),
        (M::Mov, [O::Reg(d), O::Label(l)]) => out.push(MicroOp::LoadLabel(*d, l.clone())),
        (M::Mov, [O::Reg(d), O::Mem(m)]) => {
            if m.width != Width::Dword {
                return Err(unsupported("sub-dword mov load"));
            }
            let a = address_of(m, &mut s, rng, &mut out)?;
            out.push(MicroOp::Op(GadgetClass::Load { dst: *d, src: a }));
        }
        (M::Mov, [O::Mem(m), O::Reg(src)]) => {
            if m.width != Width::Dword {
                return Err(unsupported("sub-dword mov store"));
            }
            let a = address_of(m, &mut s, rng, &mut out)?;
            out.push(MicroOp::Op(GadgetClass::Store { dst: a, src: *src }));
        }
        (M::Mov, [O::Mem(m), O::Imm(v)]) => {
            if m.width != Width::Dword {
                return Err(unsupported("sub-dword mov store"));
            }
            let a = address_of(m, &mut s, rng, &mut out)?;
            let t = s.draw(rng)?;
            out.push(load_imm(t, *v as u32));
            out.push(MicroOp::Op(GadgetClass::Store { dst: a, src: t }));
        }
        (M::Mov, [O::Reg8(d), O::Imm(v)]) => {
            need_flags_dead(flags_dead_after, "partial-register mov")?;
            let p = d.parent();
            let m = s.draw(rng)?;
            out.push(load_imm(m, 0xffff_ff00));
            out.push(bin(BinOp::And, p, m));
            out.push(load_imm(m, (*v as u32) & 0xff));
            out.push(bin(BinOp::Or, p, m));
        }
        (M::Mov, [O::Reg8(d), O::Reg8(src)]) => {
            if d == src {
                return Ok(out);
            }
            need_flags_dead(flags_dead_after, "partial-register mov")?;
            let (p, q) = (d.parent(), src.parent());
            let t = s.draw(rng)?;
            let m = s.draw(rng)?;
            out.push(MicroOp::Op(GadgetClass::MovRR { dst: t, src: q }));
            out.push(load_imm(m, 0xff));
            out.push(bin(BinOp::And, t, m));
            out.push(load_imm(m, 0xffff_ff00));
            out.push(bin(BinOp::And, p, m));
            out.push(bin(BinOp::Or, p, t));
        }

        (M::Movzx | M::Movsx, [O::Reg(d), rest]) => {
            let signed = i.mnemonic == M::Movsx;
            need_flags_dead(flags_dead_after, "extension rewrite")?;
            match rest {
                O::Mem(m) => {
                    let a = address_of(m, &mut s, rng, &mut out)?;
                    out.push(MicroOp::Op(GadgetClass::Load { dst: *d, src: a }));
                    narrow(*d, m.width, signed, &mut s, rng, &mut out)?;
                }
                O::Reg8(r8) => {
                    if r8.parent() != *d {
                        out.push(MicroOp::Op(GadgetClass::MovRR {
                            dst: *d,
                            src: r8.parent(),
                        }));
                    }
                    narrow(*d, Width::Byte, signed, &mut s, rng, &mut out)?;
                }
                _ => return Err(unsupported("operand form")),
            }
        }

        (M::Lea, [O::Reg(d), O::Mem(m)]) => {
            need_flags_dead(flags_dead_after, "lea rewrite")?;
            let mut tmp = Vec::new();
            let a = address_of(m, &mut s, rng, &mut tmp)?;
            out.extend(tmp);
            if a != *d {
                out.push(MicroOp::Op(GadgetClass::MovRR { dst: *d, src: a }));
            }
        }

        (M::Xchg, [O::Reg(a), O::Reg(b)]) => {
            if a != b {
                out.push(MicroOp::Op(GadgetClass::Xchg(*a, *b)));
            }
        }
        (M::Xchg, [O::Mem(m), O::Reg(r)]) | (M::Xchg, [O::Reg(r), O::Mem(m)]) => {
            if m.width != Width::Dword {
                return Err(unsupported("sub-dword xchg"));
            }
            let a = address_of(m, &mut s, rng, &mut out)?;
            let t = s.draw(rng)?;
            out.push(MicroOp::Op(GadgetClass::Load { dst: t, src: a }));
            out.push(MicroOp::Op(GadgetClass::Store { dst: a, src: *r }));
            out.push(MicroOp::Op(GadgetClass::MovRR { dst: *r, src: t }));
        }

        (M::Add | M::Sub | M::And | M::Or | M::Xor, [dst, src]) => {
            let op = BinOp::from_mnemonic(i.mnemonic).unwrap();
            match (dst, src) {
                (O::Reg(d), O::Reg(r)) => out.push(bin(op, *d, *r)),
                (O::Reg(d), O::Imm(v)) => {
                    let t = s.draw(rng)?;
                    out.push(load_imm(t, *v as u32));
                    out.push(bin(op, *d, t));
                }
                (O::Reg(d), O::Mem(m)) => {
                    if m.width != Width::Dword {
                        return Err(unsupported("sub-dword alu"));
                    }
                    let t = load_from(m, &mut s, rng, &mut out)?;
                    out.push(bin(op, *d, t));
                }
                (O::Mem(m), O::Reg(r)) => {
                    if m.width != Width::Dword {
                        return Err(unsupported("sub-dword alu"));
                    }
                    let a = address_of(m, &mut s, rng, &mut out)?;
                    let t = s.draw(rng)?;
                    out.push(MicroOp::Op(GadgetClass::Load { dst: t, src: a }));
                    out.push(bin(op, t, *r));
                    out.push(MicroOp::Op(GadgetClass::Store { dst: a, src: t }));
                }
                (O::Mem(m), O::Imm(v)) => {
                    if m.width != Width::Dword {
                        return Err(unsupported("sub-dword alu"));
                    }
                    let a = address_of(m, &mut s, rng, &mut out)?;
                    let t = s.draw(rng)?;
                    let u = s.draw(rng)?;
                    out.push(MicroOp::Op(GadgetClass::Load { dst: t, src: a }));
                    out.push(load_imm(u, *v as u32));
                    out.push(bin(op, t, u));
                    out.push(MicroOp::Op(GadgetClass::Store { dst: a, src: t }));
                }
                (O::Reg8(d), src8) => {
                    // Flag semantics differ at 8 bits; only legal when dead.
                    need_flags_dead(flags_dead_after, "8-bit alu")?;
                    let p = d.parent();
                    let value = match src8 {
                        O::Imm(v) => Some((*v as u32) & 0xff),
                        _ => None,
                    };
                    let Some(v) = value else {
                        return Err(unsupported("8-bit alu with register source"));
                    };
                    match op {
                        // and/or/xor with a byte imm touch only the low
                        // byte, so the dword form with a zero-extended
                        // (resp. 0xffffff-prefixed and) imm matches.
                        BinOp::Xor | BinOp::Or => {
                            let t = s.draw(rng)?;
                            out.push(load_imm(t, v));
                            out.push(bin(op, p, t));
                        }
                        BinOp::And => {
                            let t = s.draw(rng)?;
                            out.push(load_imm(t, 0xffff_ff00 | v));
                            out.push(bin(op, p, t));
                        }
                        // add/sub carries across bit 7; not expressible as
                        // a dword op on the parent.
                        BinOp::Add | BinOp::Sub => {
                            return Err(unsupported("8-bit add/sub"));
                        }
                    }
                }
                _ => return Err(unsupported("operand form")),
            }
        }

        (M::Cmp | M::Test, [a, b]) => {
            let op = if i.mnemonic == M::Cmp {
                BinOp::Sub
            } else {
                BinOp::And
            };
            // Imm source loads first, mirroring the natural chain order.
            let rhs = match b {
                O::Imm(v) => {
                    let t = s.draw(rng)?;
                    out.push(load_imm(t, *v as u32));
                    t
                }
                O::Reg(r) => *r,
                O::Mem(m) => {
                    if m.width != Width::Dword {
                        return Err(unsupported("sub-dword compare"));
                    }
                    load_from(m, &mut s, rng, &mut out)?
                }
                _ => return Err(unsupported("operand form")),
            };
            let lhs = match a {
                O::Reg(r) => {
                    let c = s.draw(rng)?;
                    out.push(MicroOp::Op(GadgetClass::MovRR { dst: c, src: *r }));
                    c
                }
                O::Mem(m) => {
                    if m.width != Width::Dword {
                        return Err(unsupported("sub-dword compare"));
                    }
                    load_from(m, &mut s, rng, &mut out)?
                }
                _ => return Err(unsupported("operand form")),
            };
            out.push(bin(op, lhs, rhs));
        }

        (M::Not, [O::Reg(r)]) => {
            // not writes no flags but xor does.
            need_flags_dead(flags_dead_after, "not rewrite")?;
            let t = s.draw(rng)?;
            out.push(load_imm(t, 0xffff_ffff));
            out.push(bin(BinOp::Xor, *r, t));
        }
        (M::Neg, [O::Reg(r)]) => {
            // sub(0, r) reproduces neg's flags exactly; the trailing copy
            // writes none, so no license needed.
            let t = s.draw(rng)?;
            out.push(load_imm(t, 0));
            out.push(bin(BinOp::Sub, t, *r));
            out.push(MicroOp::Op(GadgetClass::MovRR { dst: *r, src: t }));
        }
        (M::Inc | M::Dec, [O::Reg(r)]) => {
            // inc/dec preserve CF; add/sub rewrite it.
            need_flags_dead(flags_dead_after, "inc/dec rewrite")?;
            let t = s.draw(rng)?;
            out.push(load_imm(t, 1));
            let op = if i.mnemonic == M::Inc {
                BinOp::Add
            } else {
                BinOp::Sub
            };
            out.push(bin(op, *r, t));
        }

        (M::Mul, [O::Reg(r)]) => out.push(MicroOp::Op(GadgetClass::Mul(*r))),
        (M::Mul, [O::Mem(m)]) => {
            if m.width != Width::Dword {
                return Err(unsupported("sub-dword mul"));
            }
            let t = load_from(m, &mut s, rng, &mut out)?;
            out.push(MicroOp::Op(GadgetClass::Mul(t)));
        }

        (M::Shl | M::Shr, [O::Reg(r), O::Imm(k)]) => {
            let k = (*k as u32) & 31;
            if k != 0 {
                let op = if i.mnemonic == M::Shl {
                    ShiftOp::Shl
                } else {
                    ShiftOp::Shr
                };
                out.push(MicroOp::Op(GadgetClass::ShiftImm {
                    op,
                    reg: *r,
                    k: k as u8,
                }));
            }
        }

        (M::Setcc(cc), [O::Reg8(d)]) => {
            need_flags_dead(flags_dead_after, "setcc rewrite")?;
            let p = d.parent();
            let t = s.draw(rng)?;
            let one = s.draw(rng)?;
            let m = s.draw(rng)?;
            out.push(load_imm(t, 0));
            out.push(load_imm(one, 1));
            out.push(MicroOp::Op(GadgetClass::CMov {
                cc: *cc,
                dst: t,
                src: one,
            }));
            out.push(load_imm(m, 0xffff_ff00));
            out.push(bin(BinOp::And, p, m));
            out.push(bin(BinOp::Or, p, t));
        }
        (M::Cmovcc(cc), [O::Reg(d), O::Reg(r)]) => {
            out.push(MicroOp::Op(GadgetClass::CMov {
                cc: *cc,
                dst: *d,
                src: *r,
            }));
        }
        (M::Cmovcc(cc), [O::Reg(d), O::Mem(m)]) => {
            // x86 loads the source unconditionally; so does this rewrite.
            if m.width != Width::Dword {
                return Err(unsupported("sub-dword cmov"));
            }
            let t = load_from(m, &mut s, rng, &mut out)?;
            out.push(MicroOp::Op(GadgetClass::CMov {
                cc: *cc,
                dst: *d,
                src: t,
            }));
        }

        (M::Push | M::Pop | M::Pushf | M::Popf, _) => {
            return Err(unsupported("stack-pointer instruction"));
        }

        _ => return Err(unsupported("operand form")),
    }

    Ok(out)
}

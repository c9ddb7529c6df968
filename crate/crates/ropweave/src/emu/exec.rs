//! Single-instruction execution over [`MachineState`].

use crate::asm::{Cc, Flags, Instruction, MemRef, Mnemonic, Operand, Register, Width};

use super::MachineState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultReason {
    UndecodablePc(u32),
    Unmapped(u32),
    BadStore(u32),
    EspOutOfRange(u32),
    RunawayString(u32),
    BadOperands(&'static str),
}

impl std::fmt::Display for FaultReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FaultReason::UndecodablePc(a) => write!(f, "undecodable instruction at {a:#x}"),
            FaultReason::Unmapped(a) => write!(f, "read from unmapped address {a:#x}"),
            FaultReason::BadStore(a) => write!(f, "write to unmapped or protected address {a:#x}"),
            FaultReason::EspOutOfRange(e) => write!(f, "esp left the stack region: {e:#x}"),
            FaultReason::RunawayString(a) => write!(f, "unterminated string at {a:#x}"),
            FaultReason::BadOperands(m) => write!(f, "malformed operands for {m}"),
        }
    }
}

pub fn cc_holds(f: Flags, cc: Cc) -> bool {
    let zf = f.has(Flags::ZF);
    let sf = f.has(Flags::SF);
    let cf = f.has(Flags::CF);
    let of = f.has(Flags::OF);
    match cc {
        Cc::B => cf,
        Cc::Ae => !cf,
        Cc::E => zf,
        Cc::Ne => !zf,
        Cc::Be => cf || zf,
        Cc::A => !cf && !zf,
        Cc::L => sf != of,
        Cc::Ge => sf == of,
        Cc::Le => zf || sf != of,
        Cc::G => !zf && sf == of,
    }
}

/// EFLAGS image used by pushf/popf: CF:0, reserved-1:1, PF:2, ZF:6, SF:7,
/// OF:11.
pub fn eflags_word(f: Flags) -> u32 {
    let mut v = 0x2;
    for (flag, bit) in FLAG_BITS {
        if f.has(flag) {
            v |= 1 << bit;
        }
    }
    v
}

pub fn flags_from_word(v: u32) -> Flags {
    let mut f = Flags::EMPTY;
    for (flag, bit) in FLAG_BITS {
        f = f.with(flag, v >> bit & 1 != 0);
    }
    f
}

const FLAG_BITS: [(Flags, u32); 5] = [
    (Flags::CF, 0),
    (Flags::PF, 2),
    (Flags::ZF, 6),
    (Flags::SF, 7),
    (Flags::OF, 11),
];

fn ea(st: &MachineState, m: &MemRef) -> u32 {
    let mut a = m.disp as u32;
    if let Some(b) = m.base {
        a = a.wrapping_add(st.reg(b));
    }
    if let Some(ix) = m.index {
        a = a.wrapping_add(st.reg(ix).wrapping_mul(m.scale as u32));
    }
    a
}

fn load32(st: &MachineState, addr: u32) -> Result<u32, FaultReason> {
    st.mem.read_u32(addr).ok_or(FaultReason::Unmapped(addr))
}

fn store32(st: &mut MachineState, addr: u32, v: u32) -> Result<(), FaultReason> {
    if st.mem.write_u32(addr, v) {
        Ok(())
    } else {
        Err(FaultReason::BadStore(addr))
    }
}

fn push(st: &mut MachineState, v: u32) -> Result<(), FaultReason> {
    let esp = st.reg(Register::Esp).wrapping_sub(4);
    st.set_reg(Register::Esp, esp);
    store32(st, esp, v)
}

pub(super) fn pop(st: &mut MachineState) -> Result<u32, FaultReason> {
    let esp = st.reg(Register::Esp);
    let v = load32(st, esp)?;
    st.set_reg(Register::Esp, esp.wrapping_add(4));
    Ok(v)
}

/// Value of a 32-bit source operand.
fn read_src(st: &MachineState, op: &Operand) -> Result<u32, FaultReason> {
    match op {
        Operand::Reg(r) => Ok(st.reg(*r)),
        Operand::Imm(v) => Ok(*v as u32),
        Operand::Mem(m) => load32(st, ea(st, m)),
        _ => Err(FaultReason::BadOperands("source operand")),
    }
}

// --- flag recipes -----------------------------------------------------------

fn set_zsp(st: &mut MachineState, r: u32) {
    st.flags = st
        .flags
        .with(Flags::ZF, r == 0)
        .with(Flags::SF, r >> 31 != 0)
        .with(Flags::PF, (r as u8).count_ones() % 2 == 0);
}

fn set_zsp8(st: &mut MachineState, r: u8) {
    st.flags = st
        .flags
        .with(Flags::ZF, r == 0)
        .with(Flags::SF, r >> 7 != 0)
        .with(Flags::PF, r.count_ones() % 2 == 0);
}

fn add32(st: &mut MachineState, a: u32, b: u32) -> u32 {
    let r = a.wrapping_add(b);
    st.flags = st
        .flags
        .with(Flags::CF, (a as u64 + b as u64) >> 32 != 0)
        .with(Flags::OF, (!(a ^ b) & (a ^ r)) >> 31 != 0);
    set_zsp(st, r);
    r
}

fn sub32(st: &mut MachineState, a: u32, b: u32) -> u32 {
    let r = a.wrapping_sub(b);
    st.flags = st
        .flags
        .with(Flags::CF, a < b)
        .with(Flags::OF, ((a ^ b) & (a ^ r)) >> 31 != 0);
    set_zsp(st, r);
    r
}

fn logic32(st: &mut MachineState, r: u32) -> u32 {
    st.flags = st.flags.with(Flags::CF, false).with(Flags::OF, false);
    set_zsp(st, r);
    r
}

fn add8(st: &mut MachineState, a: u8, b: u8) -> u8 {
    let r = a.wrapping_add(b);
    st.flags = st
        .flags
        .with(Flags::CF, (a as u16 + b as u16) >> 8 != 0)
        .with(Flags::OF, (!(a ^ b) & (a ^ r)) >> 7 != 0);
    set_zsp8(st, r);
    r
}

fn sub8(st: &mut MachineState, a: u8, b: u8) -> u8 {
    let r = a.wrapping_sub(b);
    st.flags = st
        .flags
        .with(Flags::CF, a < b)
        .with(Flags::OF, ((a ^ b) & (a ^ r)) >> 7 != 0);
    set_zsp8(st, r);
    r
}

fn logic8(st: &mut MachineState, r: u8) -> u8 {
    st.flags = st.flags.with(Flags::CF, false).with(Flags::OF, false);
    set_zsp8(st, r);
    r
}

// --- the interpreter --------------------------------------------------------

/// Execute one decoded instruction. `len` is its encoded length; `st.pc`
/// still points at the instruction on entry and at the successor (or branch
/// target) on exit. Returns the value popped from the stack, if any, for the
/// trace.
pub fn exec_instruction(
    st: &mut MachineState,
    i: &Instruction,
    len: u32,
) -> Result<Option<u32>, FaultReason> {
    use Mnemonic as M;
    let pc_next = st.pc.wrapping_add(len);
    st.pc = pc_next;
    let ops = i.operands.as_slice();

    match (i.mnemonic, ops) {
        (M::Mov, [Operand::Reg(d), src]) => {
            let v = read_src(st, src)?;
            st.set_reg(*d, v);
        }
        (M::Mov, [Operand::Mem(m), src]) => {
            let v = read_src(st, src)?;
            store32(st, ea(st, m), v)?;
        }
        (M::Mov, [Operand::Reg8(d), Operand::Reg8(s)]) => {
            let v = st.reg8(*s);
            st.set_reg8(*d, v);
        }
        (M::Mov, [Operand::Reg8(d), Operand::Imm(v)]) => st.set_reg8(*d, *v as u8),

        (M::Movzx, [Operand::Reg(d), Operand::Reg8(s)]) => {
            let v = st.reg8(*s);
            st.set_reg(*d, v as u32);
        }
        (M::Movzx, [Operand::Reg(d), Operand::Mem(m)]) => {
            let a = ea(st, m);
            let v = match m.width {
                Width::Byte => st.mem.read_u8(a).ok_or(FaultReason::Unmapped(a))? as u32,
                Width::Word => st.mem.read_u16(a).ok_or(FaultReason::Unmapped(a))? as u32,
                Width::Dword => return Err(FaultReason::BadOperands("movzx")),
            };
            st.set_reg(*d, v);
        }
        (M::Movsx, [Operand::Reg(d), Operand::Reg8(s)]) => {
            let v = st.reg8(*s) as i8;
            st.set_reg(*d, v as i32 as u32);
        }
        (M::Movsx, [Operand::Reg(d), Operand::Mem(m)]) => {
            let a = ea(st, m);
            let v = match m.width {
                Width::Byte => st.mem.read_u8(a).ok_or(FaultReason::Unmapped(a))? as i8 as i32,
                Width::Word => st.mem.read_u16(a).ok_or(FaultReason::Unmapped(a))? as i16 as i32,
                Width::Dword => return Err(FaultReason::BadOperands("movsx")),
            };
            st.set_reg(*d, v as u32);
        }

        (M::Lea, [Operand::Reg(d), Operand::Mem(m)]) => {
            let a = ea(st, m);
            st.set_reg(*d, a);
        }

        (M::Xchg, [Operand::Reg(a), Operand::Reg(b)]) => {
            let (va, vb) = (st.reg(*a), st.reg(*b));
            st.set_reg(*a, vb);
            st.set_reg(*b, va);
        }
        (M::Xchg, [Operand::Mem(m), Operand::Reg(r)])
        | (M::Xchg, [Operand::Reg(r), Operand::Mem(m)]) => {
            let a = ea(st, m);
            let vm = load32(st, a)?;
            let vr = st.reg(*r);
            store32(st, a, vr)?;
            st.set_reg(*r, vm);
        }

        (M::Add | M::Sub | M::And | M::Or | M::Xor | M::Cmp, [Operand::Reg8(d), src]) => {
            let a = st.reg8(*d);
            let b = match src {
                Operand::Reg8(s) => st.reg8(*s),
                Operand::Imm(v) => *v as u8,
                _ => return Err(FaultReason::BadOperands("8-bit alu")),
            };
            let r = match i.mnemonic {
                M::Add => add8(st, a, b),
                M::Sub | M::Cmp => sub8(st, a, b),
                M::And => logic8(st, a & b),
                M::Or => logic8(st, a | b),
                M::Xor => logic8(st, a ^ b),
                _ => unreachable!(),
            };
            if i.mnemonic != M::Cmp {
                st.set_reg8(*d, r);
            }
        }
        (M::Add | M::Sub | M::And | M::Or | M::Xor | M::Cmp, [dst, src]) => {
            let a = read_src(st, dst)?;
            let b = read_src(st, src)?;
            let r = match i.mnemonic {
                M::Add => add32(st, a, b),
                M::Sub | M::Cmp => sub32(st, a, b),
                M::And => logic32(st, a & b),
                M::Or => logic32(st, a | b),
                M::Xor => logic32(st, a ^ b),
                _ => unreachable!(),
            };
            if i.mnemonic != M::Cmp {
                match dst {
                    Operand::Reg(d) => st.set_reg(*d, r),
                    Operand::Mem(m) => store32(st, ea(st, m), r)?,
                    _ => return Err(FaultReason::BadOperands("alu destination")),
                }
            }
        }

        (M::Test, [a, b]) => {
            let va = read_src(st, a)?;
            let vb = read_src(st, b)?;
            logic32(st, va & vb);
        }

        (M::Not, [Operand::Reg(r)]) => {
            let v = st.reg(*r);
            st.set_reg(*r, !v);
        }
        (M::Neg, [Operand::Reg(r)]) => {
            let v = st.reg(*r);
            let res = 0u32.wrapping_sub(v);
            st.flags = st
                .flags
                .with(Flags::CF, v != 0)
                .with(Flags::OF, v == 0x8000_0000);
            set_zsp(st, res);
            st.set_reg(*r, res);
        }
        (M::Inc, [Operand::Reg(r)]) => {
            let v = st.reg(*r);
            let res = v.wrapping_add(1);
            st.flags = st.flags.with(Flags::OF, v == 0x7fff_ffff); // CF preserved
            set_zsp(st, res);
            st.set_reg(*r, res);
        }
        (M::Dec, [Operand::Reg(r)]) => {
            let v = st.reg(*r);
            let res = v.wrapping_sub(1);
            st.flags = st.flags.with(Flags::OF, v == 0x8000_0000);
            set_zsp(st, res);
            st.set_reg(*r, res);
        }

        (M::Mul, [Operand::Reg(s)]) => {
            let p = st.reg(Register::Eax) as u64 * st.reg(*s) as u64;
            st.set_reg(Register::Eax, p as u32);
            st.set_reg(Register::Edx, (p >> 32) as u32);
            // Architecturally undefined result flags pinned to zero.
            let hi = (p >> 32) as u32 != 0;
            st.flags = Flags::EMPTY.with(Flags::CF, hi).with(Flags::OF, hi);
        }

        (M::Shl | M::Shr, [Operand::Reg(r), Operand::Imm(k)]) => {
            let k = *k as u32 & 31;
            if k > 0 {
                let v = st.reg(*r);
                let (res, cf) = if i.mnemonic == M::Shl {
                    (v << k, v >> (32 - k) & 1 != 0)
                } else {
                    (v >> k, v >> (k - 1) & 1 != 0)
                };
                // OF defined only for 1-bit shifts; wider counts pin it to 0.
                let of = match (i.mnemonic, k) {
                    (M::Shl, 1) => (res >> 31 != 0) != cf,
                    (M::Shr, 1) => v >> 31 != 0,
                    _ => false,
                };
                st.flags = st.flags.with(Flags::CF, cf).with(Flags::OF, of);
                set_zsp(st, res);
                st.set_reg(*r, res);
            }
        }

        (M::Push, [src]) => {
            let v = read_src(st, src)?;
            push(st, v)?;
        }
        (M::Pop, [Operand::Reg(r)]) => {
            let v = pop(st)?;
            st.set_reg(*r, v);
            return Ok(Some(v));
        }
        (M::Pushf, []) => push(st, eflags_word(st.flags))?,
        (M::Popf, []) => {
            let v = pop(st)?;
            st.flags = flags_from_word(v);
        }

        (M::Ret, []) => {
            let v = pop(st)?;
            st.pc = v;
            return Ok(Some(v));
        }
        (M::Jmp, [Operand::Imm(rel)]) => st.pc = pc_next.wrapping_add(*rel as u32),
        (M::Call, [Operand::Imm(rel)]) => {
            push(st, pc_next)?;
            st.pc = pc_next.wrapping_add(*rel as u32);
        }
        (M::Jcc(cc), [Operand::Imm(rel)]) => {
            if cc_holds(st.flags, cc) {
                st.pc = pc_next.wrapping_add(*rel as u32);
            }
        }
        (M::Setcc(cc), [Operand::Reg8(d)]) => {
            let v = cc_holds(st.flags, cc) as u8;
            st.set_reg8(*d, v);
        }
        (M::Cmovcc(cc), [Operand::Reg(d), src]) => {
            let v = read_src(st, src)?;
            if cc_holds(st.flags, cc) {
                st.set_reg(*d, v);
            }
        }

        _ => return Err(FaultReason::BadOperands("instruction form")),
    }
    Ok(None)
}

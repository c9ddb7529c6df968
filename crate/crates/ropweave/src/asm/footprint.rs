//! Register, flag, and memory footprints per instruction.
//!
//! These drive liveness analysis and conflict checks, so they are
//! conservative in exactly one direction: architecturally undefined flag
//! results count as written (mul, shifts), and writes to an 8-bit alias
//! count as a read and a write of the 32-bit parent (the other 24 bits flow
//! through). esp appears explicitly in the footprints of stack instructions.

use super::{Flags, Instruction, MemRef, Mnemonic, Operand, RegSet, Register};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Footprint {
    pub regs_read: RegSet,
    pub regs_written: RegSet,
    pub flags_read: Flags,
    pub flags_written: Flags,
    pub mem_read: bool,
    pub mem_written: bool,
}

/// All five flags except CF; what inc and dec write.
const FLAGS_NO_CF: Flags = Flags(Flags::ALL.0 & !Flags::CF.0);

pub fn footprint(i: &Instruction) -> Footprint {
    use Mnemonic as M;
    use Operand as O;

    let mut fp = Footprint::default();
    let ops = i.operands.as_slice();

    // Address registers of any memory operand are reads.
    for op in ops {
        if let O::Mem(m) = op {
            fp.regs_read = fp.regs_read.union(mem_regs(m));
        }
    }

    match (&i.mnemonic, ops) {
        (M::Mov, [dst, src]) => {
            read_value(&mut fp, src);
            write_value(&mut fp, dst);
        }
        (M::Movsx | M::Movzx, [O::Reg(d), src]) => {
            read_value(&mut fp, src);
            fp.regs_written.insert(*d);
        }
        (M::Lea, [O::Reg(d), O::Mem(_)]) => {
            // Address registers were already added; lea touches no memory.
            fp.regs_written.insert(*d);
        }
        (M::Xchg, [a, b]) => {
            read_value(&mut fp, a);
            read_value(&mut fp, b);
            write_value(&mut fp, a);
            write_value(&mut fp, b);
        }
        (M::Add | M::Sub | M::And | M::Or | M::Xor, [dst, src]) => {
            read_value(&mut fp, src);
            read_value(&mut fp, dst);
            write_value(&mut fp, dst);
            fp.flags_written = Flags::ALL;
        }
        (M::Cmp | M::Test, [a, b]) => {
            read_value(&mut fp, a);
            read_value(&mut fp, b);
            fp.flags_written = Flags::ALL;
        }
        (M::Not, [dst]) => {
            read_value(&mut fp, dst);
            write_value(&mut fp, dst);
        }
        (M::Neg, [dst]) => {
            read_value(&mut fp, dst);
            write_value(&mut fp, dst);
            fp.flags_written = Flags::ALL;
        }
        (M::Inc | M::Dec, [dst]) => {
            read_value(&mut fp, dst);
            write_value(&mut fp, dst);
            fp.flags_written = FLAGS_NO_CF;
        }
        (M::Mul, [src]) => {
            read_value(&mut fp, src);
            fp.regs_read.insert(Register::Eax);
            fp.regs_written.insert(Register::Eax);
            fp.regs_written.insert(Register::Edx);
            fp.flags_written = Flags::ALL;
        }
        (M::Shl | M::Shr, [dst, O::Imm(k)]) => {
            read_value(&mut fp, dst);
            write_value(&mut fp, dst);
            if *k != 0 {
                fp.flags_written = Flags::ALL;
            }
        }
        (M::Push, [src]) => {
            read_value(&mut fp, src);
            fp.regs_read.insert(Register::Esp);
            fp.regs_written.insert(Register::Esp);
            fp.mem_written = true;
        }
        (M::Pop, [dst]) => {
            write_value(&mut fp, dst);
            fp.regs_read.insert(Register::Esp);
            fp.regs_written.insert(Register::Esp);
            fp.mem_read = true;
        }
        (M::Pushf, []) => {
            fp.flags_read = Flags::ALL;
            fp.regs_read.insert(Register::Esp);
            fp.regs_written.insert(Register::Esp);
            fp.mem_written = true;
        }
        (M::Popf, []) => {
            fp.flags_written = Flags::ALL;
            fp.regs_read.insert(Register::Esp);
            fp.regs_written.insert(Register::Esp);
            fp.mem_read = true;
        }
        (M::Ret, []) => {
            fp.regs_read.insert(Register::Esp);
            fp.regs_written.insert(Register::Esp);
            fp.mem_read = true;
        }
        (M::Jmp, [_]) => {}
        (M::Call, [_]) => {
            fp.regs_read.insert(Register::Esp);
            fp.regs_written.insert(Register::Esp);
            fp.mem_written = true;
        }
        (M::Jcc(cc), [_]) => {
            fp.flags_read = cc.flags_read();
        }
        (M::Setcc(cc), [dst]) => {
            fp.flags_read = cc.flags_read();
            // Partial write: the parent's upper bits survive.
            read_value(&mut fp, dst);
            write_value(&mut fp, dst);
        }
        (M::Cmovcc(cc), [O::Reg(d), src]) => {
            fp.flags_read = cc.flags_read();
            read_value(&mut fp, src);
            // The move is conditional, so the old value may survive.
            fp.regs_read.insert(*d);
            fp.regs_written.insert(*d);
        }
        // Malformed operand lists get an empty footprint; parsing and
        // encoding reject them before any analysis runs.
        _ => {}
    }
    fp
}

fn mem_regs(m: &MemRef) -> RegSet {
    let mut s = RegSet::EMPTY;
    if let Some(b) = m.base {
        s.insert(b);
    }
    if let Some(ix) = m.index {
        s.insert(ix);
    }
    s
}

fn read_value(fp: &mut Footprint, op: &Operand) {
    match op {
        Operand::Reg(r) => fp.regs_read.insert(*r),
        Operand::Reg8(r) => fp.regs_read.insert(r.parent()),
        Operand::Mem(_) => fp.mem_read = true,
        Operand::Imm(_) | Operand::Label(_) | Operand::SymOff { .. } => {}
    }
}

fn write_value(fp: &mut Footprint, op: &Operand) {
    match op {
        Operand::Reg(r) => {
            fp.regs_written.insert(*r);
        }
        Operand::Reg8(r) => {
            // Byte writes preserve the upper 24 bits of the parent.
            fp.regs_read.insert(r.parent());
            fp.regs_written.insert(r.parent());
        }
        Operand::Mem(_) => fp.mem_written = true,
        Operand::Imm(_) | Operand::Label(_) | Operand::SymOff { .. } => {}
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ins, Cc, MemRef, Mnemonic, Reg8, Register};
    use super::*;

    fn regs(rs: &[Register]) -> RegSet {
        RegSet::of(rs)
    }

    #[test]
    fn add_reads_both_writes_dst_and_all_flags() {
        let fp = footprint(&ins::alu_rr(Mnemonic::Add, Register::Edx, Register::Ecx));
        assert_eq!(fp.regs_read, regs(&[Register::Ecx, Register::Edx]));
        assert_eq!(fp.regs_written, regs(&[Register::Edx]));
        assert_eq!(fp.flags_written, Flags::ALL);
        assert_eq!(fp.flags_read, Flags::EMPTY);
    }

    #[test]
    fn lea_reads_address_regs_and_no_memory() {
        let fp = footprint(&ins::lea(Register::Eax, MemRef::base_disp(Register::Ebx, 4)));
        assert_eq!(fp.regs_read, regs(&[Register::Ebx]));
        assert_eq!(fp.regs_written, regs(&[Register::Eax]));
        assert!(!fp.mem_read && !fp.mem_written);
        assert_eq!(fp.flags_written, Flags::EMPTY);
    }

    #[test]
    fn mul_writes_eax_edx_and_all_flags() {
        let fp = footprint(&ins::mul_r(Register::Edx));
        assert_eq!(fp.regs_read, regs(&[Register::Eax, Register::Edx]));
        assert_eq!(fp.regs_written, regs(&[Register::Eax, Register::Edx]));
        assert_eq!(fp.flags_written, Flags::ALL);
    }

    #[test]
    fn cmp_writes_no_registers() {
        let fp = footprint(&ins::alu_ri(Mnemonic::Cmp, Register::Eax, 0x41));
        assert_eq!(fp.regs_read, regs(&[Register::Eax]));
        assert_eq!(fp.regs_written, RegSet::EMPTY);
        assert_eq!(fp.flags_written, Flags::ALL);
    }

    #[test]
    fn inc_preserves_cf() {
        let fp = footprint(&ins::inc_r(Register::Esi));
        assert!(!fp.flags_written.intersects(Flags::CF));
        assert!(fp.flags_written.intersects(Flags::ZF));
    }

    #[test]
    fn not_writes_no_flags() {
        let fp = footprint(&ins::not_r(Register::Eax));
        assert_eq!(fp.flags_written, Flags::EMPTY);
    }

    #[test]
    fn zero_shift_writes_no_flags() {
        assert_eq!(footprint(&ins::shl_ri(Register::Eax, 0)).flags_written, Flags::EMPTY);
        assert_eq!(footprint(&ins::shl_ri(Register::Eax, 3)).flags_written, Flags::ALL);
    }

    #[test]
    fn stack_ops_touch_esp_and_memory() {
        let push = footprint(&ins::push_r(Register::Eax));
        assert!(push.regs_read.contains(Register::Esp));
        assert!(push.regs_written.contains(Register::Esp));
        assert!(push.mem_written && !push.mem_read);

        let pop = footprint(&ins::pop_r(Register::Ecx));
        assert!(pop.regs_written.contains(Register::Ecx));
        assert!(pop.mem_read && !pop.mem_written);

        let ret = footprint(&ins::ret());
        assert!(ret.mem_read);
    }

    #[test]
    fn setcc_reads_condition_flags_and_parent() {
        let fp = footprint(&ins::setcc(Cc::E, Reg8::Al));
        assert_eq!(fp.flags_read, Flags::ZF);
        assert!(fp.regs_read.contains(Register::Eax));
        assert!(fp.regs_written.contains(Register::Eax));
    }

    #[test]
    fn cmov_reads_destination() {
        let fp = footprint(&ins::cmov(Cc::Le, Register::Eax, Register::Ecx));
        assert_eq!(fp.regs_read, regs(&[Register::Eax, Register::Ecx]));
        assert_eq!(fp.regs_written, regs(&[Register::Eax]));
        assert_eq!(fp.flags_read, Flags::ZF.union(Flags::SF).union(Flags::OF));
    }

    #[test]
    fn jcc_reads_only_its_flags() {
        let fp = footprint(&ins::jcc(Cc::B, "x"));
        assert_eq!(fp.flags_read, Flags::CF);
        assert_eq!(fp.regs_read, RegSet::EMPTY);
    }

    #[test]
    fn mem_operand_base_and_index_are_read() {
        let m = MemRef {
            base: Some(Register::Ebx),
            index: Some(Register::Ecx),
            scale: 4,
            disp: 8,
            width: super::super::Width::Dword,
        };
        let fp = footprint(&ins::mov_rm(Register::Eax, m));
        assert_eq!(fp.regs_read, regs(&[Register::Ecx, Register::Ebx]));
        assert!(fp.mem_read);
    }
}

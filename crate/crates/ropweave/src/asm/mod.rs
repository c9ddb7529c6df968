//! The x86-32 assembly subset: AST types, text syntax, byte encodings,
//! instruction footprints, and basic-block CFGs.
//!
//! Everything downstream (obfuscation, emulation, the attack harness) works in
//! terms of these types. The subset covers the 32-bit general-purpose
//! registers plus the `al`/`bl`/`cl`/`dl` aliases, five arithmetic flags
//! (AF is deliberately out of scope), and the mnemonics listed in
//! [`Mnemonic`]. Each encodable form has exactly one canonical encoding so
//! size metrics are deterministic; the decoder additionally accepts the
//! common alias encodings (imm8 forms, RM-direction aliases, short jumps)
//! and normalizes them to the same AST.

mod cfg;
mod decode;
mod encode;
mod footprint;
mod layout;
mod parse;
mod print;

pub use cfg::{build_cfg, BlockEdges};
pub use decode::decode_instruction;
pub use encode::{encode_instruction, encoded_len};
pub use footprint::{footprint, Footprint};
pub use layout::{assemble, ProgramImage, ResolvedInstr};
pub use parse::parse_program;
pub use print::{print_instruction, print_program};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsmError {
    #[error("line {line}: {reason}")]
    Syntax { line: u32, reason: String },
    #[error("line {line}: unsupported mnemonic '{name}'")]
    UnsupportedMnemonic { line: u32, name: String },
    #[error("unresolved label '{0}'")]
    UnresolvedLabel(String),
    #[error("not encodable: {0}")]
    NotEncodable(String),
}

/// Reserved call targets the runtime provides: `print_str` writes the
/// NUL-terminated string at esi, `print_int` the decimal value of eax.
pub const INTRINSIC_NAMES: [&str; 2] = ["print_str", "print_int"];

// --- registers ---------------------------------------------------------

/// 32-bit general-purpose register, in hardware encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Register {
    Eax,
    Ecx,
    Edx,
    Ebx,
    Esp,
    Ebp,
    Esi,
    Edi,
}

impl Register {
    pub const ALL: [Register; 8] = [
        Register::Eax,
        Register::Ecx,
        Register::Edx,
        Register::Ebx,
        Register::Esp,
        Register::Ebp,
        Register::Esi,
        Register::Edi,
    ];

    /// The six registers passes may allocate; esp and ebp are never free.
    pub const ALLOCATABLE: [Register; 6] = [
        Register::Eax,
        Register::Ecx,
        Register::Edx,
        Register::Ebx,
        Register::Esi,
        Register::Edi,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Register> {
        Register::ALL.get(n as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Register::Eax => "eax",
            Register::Ecx => "ecx",
            Register::Edx => "edx",
            Register::Ebx => "ebx",
            Register::Esp => "esp",
            Register::Ebp => "ebp",
            Register::Esi => "esi",
            Register::Edi => "edi",
        }
    }

    pub fn from_name(s: &str) -> Option<Register> {
        Register::ALL.iter().copied().find(|r| r.name() == s)
    }

    /// Low byte alias, where one exists.
    pub fn low8(self) -> Option<Reg8> {
        match self {
            Register::Eax => Some(Reg8::Al),
            Register::Ecx => Some(Reg8::Cl),
            Register::Edx => Some(Reg8::Dl),
            Register::Ebx => Some(Reg8::Bl),
            _ => None,
        }
    }
}

impl std::fmt::Display for Register {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// 8-bit register alias. Only the low bytes of eax..ebx are in the subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reg8 {
    Al,
    Cl,
    Dl,
    Bl,
}

impl Reg8 {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Reg8> {
        [Reg8::Al, Reg8::Cl, Reg8::Dl, Reg8::Bl].get(n as usize).copied()
    }

    /// The 32-bit register this alias lives in.
    pub fn parent(self) -> Register {
        match self {
            Reg8::Al => Register::Eax,
            Reg8::Cl => Register::Ecx,
            Reg8::Dl => Register::Edx,
            Reg8::Bl => Register::Ebx,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg8::Al => "al",
            Reg8::Cl => "cl",
            Reg8::Dl => "dl",
            Reg8::Bl => "bl",
        }
    }

    pub fn from_name(s: &str) -> Option<Reg8> {
        [Reg8::Al, Reg8::Cl, Reg8::Dl, Reg8::Bl]
            .iter()
            .copied()
            .find(|r| r.name() == s)
    }
}

impl std::fmt::Display for Reg8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of 32-bit registers, as a bitmask over hardware numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegSet(pub u8);

impl RegSet {
    pub const EMPTY: RegSet = RegSet(0);

    pub fn of(regs: &[Register]) -> RegSet {
        let mut s = RegSet::EMPTY;
        for &r in regs {
            s.insert(r);
        }
        s
    }

    pub fn insert(&mut self, r: Register) {
        self.0 |= 1 << r.number();
    }

    pub fn remove(&mut self, r: Register) {
        self.0 &= !(1 << r.number());
    }

    pub fn contains(self, r: Register) -> bool {
        self.0 & (1 << r.number()) != 0
    }

    pub fn union(self, other: RegSet) -> RegSet {
        RegSet(self.0 | other.0)
    }

    pub fn minus(self, other: RegSet) -> RegSet {
        RegSet(self.0 & !other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Register> {
        Register::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

// --- flags --------------------------------------------------------------

/// Set of the five modeled arithmetic flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags(pub u8);

impl Flags {
    pub const EMPTY: Flags = Flags(0);
    pub const ZF: Flags = Flags(1);
    pub const SF: Flags = Flags(2);
    pub const CF: Flags = Flags(4);
    pub const OF: Flags = Flags(8);
    pub const PF: Flags = Flags(16);
    /// All five modeled flags.
    pub const ALL: Flags = Flags(31);

    pub fn union(self, other: Flags) -> Flags {
        Flags(self.0 | other.0)
    }

    pub fn minus(self, other: Flags) -> Flags {
        Flags(self.0 & !other.0)
    }

    pub fn intersects(self, other: Flags) -> bool {
        self.0 & other.0 != 0
    }

    pub fn has(self, f: Flags) -> bool {
        self.intersects(f)
    }

    pub fn with(self, f: Flags, on: bool) -> Flags {
        if on {
            self.union(f)
        } else {
            self.minus(f)
        }
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

// --- condition codes ----------------------------------------------------

/// Condition codes in the subset (unsigned and signed comparisons plus
/// equality; parity/sign/overflow-only codes are not used).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cc {
    B,
    Ae,
    E,
    Ne,
    Be,
    A,
    L,
    Ge,
    Le,
    G,
}

impl Cc {
    pub const ALL: [Cc; 10] = [
        Cc::B,
        Cc::Ae,
        Cc::E,
        Cc::Ne,
        Cc::Be,
        Cc::A,
        Cc::L,
        Cc::Ge,
        Cc::Le,
        Cc::G,
    ];

    /// Hardware condition-code number (low nibble of the 0F-prefixed opcodes).
    pub fn number(self) -> u8 {
        match self {
            Cc::B => 0x2,
            Cc::Ae => 0x3,
            Cc::E => 0x4,
            Cc::Ne => 0x5,
            Cc::Be => 0x6,
            Cc::A => 0x7,
            Cc::L => 0xc,
            Cc::Ge => 0xd,
            Cc::Le => 0xe,
            Cc::G => 0xf,
        }
    }

    pub fn from_number(n: u8) -> Option<Cc> {
        Cc::ALL.iter().copied().find(|c| c.number() == n)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Cc::B => "b",
            Cc::Ae => "ae",
            Cc::E => "e",
            Cc::Ne => "ne",
            Cc::Be => "be",
            Cc::A => "a",
            Cc::L => "l",
            Cc::Ge => "ge",
            Cc::Le => "le",
            Cc::G => "g",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Cc> {
        Cc::ALL.iter().copied().find(|c| c.suffix() == s)
    }

    pub fn negate(self) -> Cc {
        match self {
            Cc::B => Cc::Ae,
            Cc::Ae => Cc::B,
            Cc::E => Cc::Ne,
            Cc::Ne => Cc::E,
            Cc::Be => Cc::A,
            Cc::A => Cc::Be,
            Cc::L => Cc::Ge,
            Cc::Ge => Cc::L,
            Cc::Le => Cc::G,
            Cc::G => Cc::Le,
        }
    }

    /// Flags this condition inspects.
    pub fn flags_read(self) -> Flags {
        match self {
            Cc::B | Cc::Ae => Flags::CF,
            Cc::E | Cc::Ne => Flags::ZF,
            Cc::Be | Cc::A => Flags::CF.union(Flags::ZF),
            Cc::L | Cc::Ge => Flags::SF.union(Flags::OF),
            Cc::Le | Cc::G => Flags::ZF.union(Flags::SF).union(Flags::OF),
        }
    }
}

// --- operands -----------------------------------------------------------

/// Memory operand access width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    Byte,
    Word,
    Dword,
}

/// `[base + index*scale + disp]` with an access width. At least one of
/// base, index, or disp must be present.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemRef {
    pub base: Option<Register>,
    pub index: Option<Register>,
    pub scale: u8,
    pub disp: i32,
    pub width: Width,
}

impl MemRef {
    pub fn base(reg: Register) -> MemRef {
        MemRef {
            base: Some(reg),
            index: None,
            scale: 1,
            disp: 0,
            width: Width::Dword,
        }
    }

    pub fn base_disp(reg: Register, disp: i32) -> MemRef {
        MemRef {
            disp,
            ..MemRef::base(reg)
        }
    }

    pub fn abs(addr: u32) -> MemRef {
        MemRef {
            base: None,
            index: None,
            scale: 1,
            disp: addr as i32,
            width: Width::Dword,
        }
    }

    pub fn with_width(mut self, w: Width) -> MemRef {
        self.width = w;
        self
    }

    pub fn byte(self) -> MemRef {
        self.with_width(Width::Byte)
    }

    pub fn word(self) -> MemRef {
        self.with_width(Width::Word)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Register),
    Reg8(Reg8),
    /// Immediate, stored as the 32-bit bit pattern.
    Imm(i32),
    Mem(MemRef),
    /// Program label: branch target, or an address constant in push/mov.
    Label(String),
    /// Library symbol plus byte offset, e.g. `atoi+0x500`.
    SymOff { symbol: String, offset: i32 },
}

impl Operand {
    pub fn imm_u32(v: u32) -> Operand {
        Operand::Imm(v as i32)
    }
}

// --- instructions -------------------------------------------------------

/// Instruction mnemonic. Condition-code families carry their condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mnemonic {
    Mov,
    Movsx,
    Movzx,
    Lea,
    Xchg,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Cmp,
    Test,
    Not,
    Neg,
    Inc,
    Dec,
    Mul,
    Shl,
    Shr,
    Push,
    Pop,
    Pushf,
    Popf,
    Ret,
    Jmp,
    Call,
    Jcc(Cc),
    Setcc(Cc),
    Cmovcc(Cc),
}

impl Mnemonic {
    /// Text form, e.g. `Jcc(E)` -> "je".
    pub fn name(self) -> String {
        match self {
            Mnemonic::Mov => "mov".into(),
            Mnemonic::Movsx => "movsx".into(),
            Mnemonic::Movzx => "movzx".into(),
            Mnemonic::Lea => "lea".into(),
            Mnemonic::Xchg => "xchg".into(),
            Mnemonic::Add => "add".into(),
            Mnemonic::Sub => "sub".into(),
            Mnemonic::And => "and".into(),
            Mnemonic::Or => "or".into(),
            Mnemonic::Xor => "xor".into(),
            Mnemonic::Cmp => "cmp".into(),
            Mnemonic::Test => "test".into(),
            Mnemonic::Not => "not".into(),
            Mnemonic::Neg => "neg".into(),
            Mnemonic::Inc => "inc".into(),
            Mnemonic::Dec => "dec".into(),
            Mnemonic::Mul => "mul".into(),
            Mnemonic::Shl => "shl".into(),
            Mnemonic::Shr => "shr".into(),
            Mnemonic::Push => "push".into(),
            Mnemonic::Pop => "pop".into(),
            Mnemonic::Pushf => "pushf".into(),
            Mnemonic::Popf => "popf".into(),
            Mnemonic::Ret => "ret".into(),
            Mnemonic::Jmp => "jmp".into(),
            Mnemonic::Call => "call".into(),
            Mnemonic::Jcc(cc) => format!("j{}", cc.suffix()),
            Mnemonic::Setcc(cc) => format!("set{}", cc.suffix()),
            Mnemonic::Cmovcc(cc) => format!("cmov{}", cc.suffix()),
        }
    }

    /// True for ret/jmp/jcc/call, the four block terminators.
    pub fn is_terminator(self) -> bool {
        matches!(
            self,
            Mnemonic::Ret | Mnemonic::Jmp | Mnemonic::Call | Mnemonic::Jcc(_)
        )
    }
}

/// One instruction: mnemonic plus operands in Intel order (destination
/// first). Equality ignores `source_loc`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    pub source_loc: Option<u32>,
}

impl Instruction {
    pub fn new(mnemonic: Mnemonic, operands: Vec<Operand>) -> Instruction {
        Instruction {
            mnemonic,
            operands,
            source_loc: None,
        }
    }

    pub fn op(&self, i: usize) -> &Operand {
        &self.operands[i]
    }
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.mnemonic == other.mnemonic && self.operands == other.operands
    }
}

impl Eq for Instruction {}

impl std::fmt::Display for Instruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&print_instruction(self))
    }
}

// --- instruction constructors -------------------------------------------

/// Short constructors for the forms the passes emit. Having these in one
/// place keeps operand order mistakes out of the transformation code.
pub mod ins {
    use super::*;

    fn i(m: Mnemonic, ops: Vec<Operand>) -> Instruction {
        Instruction::new(m, ops)
    }

    pub fn mov_rr(dst: Register, src: Register) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Reg(dst), Operand::Reg(src)])
    }
    pub fn mov_ri(dst: Register, imm: u32) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Reg(dst), Operand::imm_u32(imm)])
    }
    pub fn mov_r_label(dst: Register, label: &str) -> Instruction {
        i(
            Mnemonic::Mov,
            vec![Operand::Reg(dst), Operand::Label(label.into())],
        )
    }
    pub fn mov_rm(dst: Register, src: MemRef) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Reg(dst), Operand::Mem(src)])
    }
    pub fn mov_mr(dst: MemRef, src: Register) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Mem(dst), Operand::Reg(src)])
    }
    pub fn mov_mi(dst: MemRef, imm: u32) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Mem(dst), Operand::imm_u32(imm)])
    }
    pub fn mov8_rr(dst: Reg8, src: Reg8) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Reg8(dst), Operand::Reg8(src)])
    }
    pub fn mov8_ri(dst: Reg8, imm: u8) -> Instruction {
        i(Mnemonic::Mov, vec![Operand::Reg8(dst), Operand::Imm(imm as i32)])
    }
    pub fn movzx_r8(dst: Register, src: Reg8) -> Instruction {
        i(Mnemonic::Movzx, vec![Operand::Reg(dst), Operand::Reg8(src)])
    }
    pub fn movzx_m(dst: Register, src: MemRef) -> Instruction {
        i(Mnemonic::Movzx, vec![Operand::Reg(dst), Operand::Mem(src)])
    }
    pub fn movsx_m(dst: Register, src: MemRef) -> Instruction {
        i(Mnemonic::Movsx, vec![Operand::Reg(dst), Operand::Mem(src)])
    }
    pub fn lea(dst: Register, addr: MemRef) -> Instruction {
        i(Mnemonic::Lea, vec![Operand::Reg(dst), Operand::Mem(addr)])
    }
    pub fn xchg_rr(a: Register, b: Register) -> Instruction {
        i(Mnemonic::Xchg, vec![Operand::Reg(a), Operand::Reg(b)])
    }
    pub fn xchg_mr(mem: MemRef, reg: Register) -> Instruction {
        i(Mnemonic::Xchg, vec![Operand::Mem(mem), Operand::Reg(reg)])
    }

    pub fn alu_rr(m: Mnemonic, dst: Register, src: Register) -> Instruction {
        i(m, vec![Operand::Reg(dst), Operand::Reg(src)])
    }
    pub fn alu_ri(m: Mnemonic, dst: Register, imm: u32) -> Instruction {
        i(m, vec![Operand::Reg(dst), Operand::imm_u32(imm)])
    }
    pub fn alu_rm(m: Mnemonic, dst: Register, src: MemRef) -> Instruction {
        i(m, vec![Operand::Reg(dst), Operand::Mem(src)])
    }
    pub fn alu_mr(m: Mnemonic, dst: MemRef, src: Register) -> Instruction {
        i(m, vec![Operand::Mem(dst), Operand::Reg(src)])
    }
    pub fn alu_mi(m: Mnemonic, dst: MemRef, imm: u32) -> Instruction {
        i(m, vec![Operand::Mem(dst), Operand::imm_u32(imm)])
    }
    pub fn alu8_rr(m: Mnemonic, dst: Reg8, src: Reg8) -> Instruction {
        i(m, vec![Operand::Reg8(dst), Operand::Reg8(src)])
    }
    pub fn alu8_ri(m: Mnemonic, dst: Reg8, imm: u8) -> Instruction {
        i(m, vec![Operand::Reg8(dst), Operand::Imm(imm as i32)])
    }

    pub fn not_r(r: Register) -> Instruction {
        i(Mnemonic::Not, vec![Operand::Reg(r)])
    }
    pub fn neg_r(r: Register) -> Instruction {
        i(Mnemonic::Neg, vec![Operand::Reg(r)])
    }
    pub fn inc_r(r: Register) -> Instruction {
        i(Mnemonic::Inc, vec![Operand::Reg(r)])
    }
    pub fn dec_r(r: Register) -> Instruction {
        i(Mnemonic::Dec, vec![Operand::Reg(r)])
    }
    pub fn mul_r(r: Register) -> Instruction {
        i(Mnemonic::Mul, vec![Operand::Reg(r)])
    }
    pub fn shl_ri(r: Register, k: u8) -> Instruction {
        i(Mnemonic::Shl, vec![Operand::Reg(r), Operand::Imm(k as i32)])
    }
    pub fn shr_ri(r: Register, k: u8) -> Instruction {
        i(Mnemonic::Shr, vec![Operand::Reg(r), Operand::Imm(k as i32)])
    }

    pub fn push_r(r: Register) -> Instruction {
        i(Mnemonic::Push, vec![Operand::Reg(r)])
    }
    pub fn push_imm(v: u32) -> Instruction {
        i(Mnemonic::Push, vec![Operand::imm_u32(v)])
    }
    pub fn push_label(l: &str) -> Instruction {
        i(Mnemonic::Push, vec![Operand::Label(l.into())])
    }
    pub fn push_symoff(symbol: &str, offset: i32) -> Instruction {
        i(
            Mnemonic::Push,
            vec![Operand::SymOff {
                symbol: symbol.into(),
                offset,
            }],
        )
    }
    pub fn pop_r(r: Register) -> Instruction {
        i(Mnemonic::Pop, vec![Operand::Reg(r)])
    }
    pub fn pushf() -> Instruction {
        i(Mnemonic::Pushf, vec![])
    }
    pub fn popf() -> Instruction {
        i(Mnemonic::Popf, vec![])
    }
    pub fn ret() -> Instruction {
        i(Mnemonic::Ret, vec![])
    }
    pub fn jmp(label: &str) -> Instruction {
        i(Mnemonic::Jmp, vec![Operand::Label(label.into())])
    }
    pub fn jcc(cc: Cc, label: &str) -> Instruction {
        i(Mnemonic::Jcc(cc), vec![Operand::Label(label.into())])
    }
    pub fn call(label: &str) -> Instruction {
        i(Mnemonic::Call, vec![Operand::Label(label.into())])
    }
    pub fn setcc(cc: Cc, dst: Reg8) -> Instruction {
        i(Mnemonic::Setcc(cc), vec![Operand::Reg8(dst)])
    }
    pub fn cmov(cc: Cc, dst: Register, src: Register) -> Instruction {
        i(
            Mnemonic::Cmovcc(cc),
            vec![Operand::Reg(dst), Operand::Reg(src)],
        )
    }
}

// --- program structure ----------------------------------------------------

/// Straight-line code ending in exactly one terminator; no internal labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub label: String,
    pub instructions: Vec<Instruction>,
    pub terminator: Instruction,
}

impl BasicBlock {
    /// Body instructions followed by the terminator.
    pub fn all_instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.instructions.iter().chain(std::iter::once(&self.terminator))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub blocks: Vec<BasicBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDef {
    pub label: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    pub functions: Vec<Function>,
    pub data: Vec<DataDef>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_numbers_match_hardware_encoding() {
        let expect = [
            (Register::Eax, 0),
            (Register::Ecx, 1),
            (Register::Edx, 2),
            (Register::Ebx, 3),
            (Register::Esp, 4),
            (Register::Ebp, 5),
            (Register::Esi, 6),
            (Register::Edi, 7),
        ];
        for (r, n) in expect {
            assert_eq!(r.number(), n);
            assert_eq!(Register::from_number(n), Some(r));
        }
    }

    #[test]
    fn cc_numbers_match_hardware_encoding() {
        let expect = [
            (Cc::B, 0x2),
            (Cc::Ae, 0x3),
            (Cc::E, 0x4),
            (Cc::Ne, 0x5),
            (Cc::Be, 0x6),
            (Cc::A, 0x7),
            (Cc::L, 0xc),
            (Cc::Ge, 0xd),
            (Cc::Le, 0xe),
            (Cc::G, 0xf),
        ];
        for (c, n) in expect {
            assert_eq!(c.number(), n);
            assert_eq!(Cc::from_number(n), Some(c));
        }
    }

    #[test]
    fn cc_negation_is_involutive_and_flips_number_lsb() {
        for cc in Cc::ALL {
            assert_eq!(cc.negate().negate(), cc);
            assert_eq!(cc.negate().number(), cc.number() ^ 1);
        }
    }

    #[test]
    fn reg8_parents() {
        assert_eq!(Reg8::Al.parent(), Register::Eax);
        assert_eq!(Reg8::Cl.parent(), Register::Ecx);
        assert_eq!(Reg8::Dl.parent(), Register::Edx);
        assert_eq!(Reg8::Bl.parent(), Register::Ebx);
    }

    #[test]
    fn instruction_equality_ignores_source_loc() {
        let mut a = ins::mov_ri(Register::Ecx, 123);
        let b = ins::mov_ri(Register::Ecx, 123);
        a.source_loc = Some(7);
        assert_eq!(a, b);
    }

    #[test]
    fn regset_ops() {
        let mut s = RegSet::of(&[Register::Eax, Register::Edx]);
        assert!(s.contains(Register::Eax));
        assert!(!s.contains(Register::Ecx));
        s.insert(Register::Ecx);
        s.remove(Register::Eax);
        let v: Vec<_> = s.iter().collect();
        assert_eq!(v, vec![Register::Ecx, Register::Edx]);
    }
}

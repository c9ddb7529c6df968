//! Gadget libraries: ELF32 loading, synthetic library construction,
//! microgadget extraction, and ASLR-safe anchoring.
//!
//! A microgadget is a single subset instruction followed by `ret`. The scan
//! walks backward from every `C3` byte in an executable segment, keeping any
//! start offset (aligned or not) that decodes to exactly one classifiable
//! instruction ending at the ret. Gadget addresses are never emitted as
//! absolute values; [`GadgetLibrary::anchor`] expresses them as a random
//! exported symbol plus offset, which survives relocation of the whole image.

mod elf;
mod extract;
mod synth;

pub use elf::load_elf32;
pub use extract::extract_gadgets;
pub use synth::{
    build_synthetic_library, fig3_library, standard_classes, LibraryPlan, PlannedGadget,
    PlannedSymbol,
};

/// Parses an ELF image and extracts its gadget library in one step.
pub fn load_library(bytes: &[u8]) -> Result<GadgetLibrary, GadgetError> {
    Ok(extract_gadgets(load_elf32(bytes)?))
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{Cc, Instruction, Mnemonic, Operand, Register};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum GadgetError {
    #[error("not an ELF file")]
    BadMagic,
    #[error("unsupported ELF variant (need 32-bit little-endian)")]
    UnsupportedClass,
    #[error("truncated ELF: {0}")]
    Truncated(&'static str),
    #[error("library exports no symbols usable as anchors")]
    NoSymbols,
}

// --- library image --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExecSegment {
    pub vaddr: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibSymbol {
    pub name: String,
    pub vaddr: u32,
}

/// Executable contents and exported symbols of one shared library.
#[derive(Debug, Clone)]
pub struct LibraryImage {
    pub exec_segments: Vec<ExecSegment>,
    pub symbols: Vec<LibSymbol>,
}

// --- gadget classification --------------------------------------------------

/// Binary operations available as gadget classes. cmp and test are absent:
/// flag-only results are synthesized from sub/and during decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Xor,
    And,
    Or,
}

impl BinOp {
    pub const ALL: [BinOp; 5] = [BinOp::Add, BinOp::Sub, BinOp::Xor, BinOp::And, BinOp::Or];

    pub fn mnemonic(self) -> Mnemonic {
        match self {
            BinOp::Add => Mnemonic::Add,
            BinOp::Sub => Mnemonic::Sub,
            BinOp::Xor => Mnemonic::Xor,
            BinOp::And => Mnemonic::And,
            BinOp::Or => Mnemonic::Or,
        }
    }

    pub fn from_mnemonic(m: Mnemonic) -> Option<BinOp> {
        Some(match m {
            Mnemonic::Add => BinOp::Add,
            Mnemonic::Sub => BinOp::Sub,
            Mnemonic::Xor => BinOp::Xor,
            Mnemonic::And => BinOp::And,
            Mnemonic::Or => BinOp::Or,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftOp {
    Shl,
    Shr,
}

/// Semantic class of a microgadget. `Xchg` is stored with the lower-numbered
/// register first, since the operation is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GadgetClass {
    Pop(Register),
    PushReg(Register),
    MovRR { dst: Register, src: Register },
    Xchg(Register, Register),
    BinRR { op: BinOp, dst: Register, src: Register },
    /// `mov dst, [src]`
    Load { dst: Register, src: Register },
    /// `mov [dst], src`
    Store { dst: Register, src: Register },
    CMov { cc: Cc, dst: Register, src: Register },
    Mul(Register),
    ShiftImm { op: ShiftOp, reg: Register, k: u8 },
}

impl GadgetClass {
    /// Canonical key form (orders Xchg operands).
    pub fn normalize(self) -> GadgetClass {
        match self {
            GadgetClass::Xchg(a, b) if a.number() > b.number() => GadgetClass::Xchg(b, a),
            other => other,
        }
    }

    /// The instruction this class executes (the gadget body without the ret).
    pub fn instruction(&self) -> Instruction {
        use crate::asm::{ins, MemRef};
        match *self {
            GadgetClass::Pop(r) => ins::pop_r(r),
            GadgetClass::PushReg(r) => ins::push_r(r),
            GadgetClass::MovRR { dst, src } => ins::mov_rr(dst, src),
            GadgetClass::Xchg(a, b) => ins::xchg_rr(a, b),
            GadgetClass::BinRR { op, dst, src } => ins::alu_rr(op.mnemonic(), dst, src),
            GadgetClass::Load { dst, src } => ins::mov_rm(dst, MemRef::base(src)),
            GadgetClass::Store { dst, src } => ins::mov_mr(MemRef::base(dst), src),
            GadgetClass::CMov { cc, dst, src } => ins::cmov(cc, dst, src),
            GadgetClass::Mul(r) => ins::mul_r(r),
            GadgetClass::ShiftImm { op, reg, k } => match op {
                ShiftOp::Shl => ins::shl_ri(reg, k),
                ShiftOp::Shr => ins::shr_ri(reg, k),
            },
        }
    }
}

impl std::fmt::Display for GadgetClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.instruction())
    }
}

/// Classify a decoded instruction as a gadget body. Instructions that touch
/// esp or ebp through explicit operands are rejected: executed mid-chain they
/// would corrupt the chain itself.
pub fn classify(i: &Instruction) -> Option<GadgetClass> {
    use Operand as O;

    let forbidden = |r: Register| r == Register::Esp || r == Register::Ebp;
    for op in &i.operands {
        match op {
            O::Reg(r) if forbidden(*r) => return None,
            O::Mem(m) => {
                if m.base.is_some_and(forbidden) || m.index.is_some_and(forbidden) {
                    return None;
                }
            }
            _ => {}
        }
    }

    let class = match (&i.mnemonic, i.operands.as_slice()) {
        (Mnemonic::Pop, [O::Reg(r)]) => GadgetClass::Pop(*r),
        (Mnemonic::Push, [O::Reg(r)]) => GadgetClass::PushReg(*r),
        (Mnemonic::Mov, [O::Reg(d), O::Reg(s)]) => GadgetClass::MovRR { dst: *d, src: *s },
        (Mnemonic::Xchg, [O::Reg(a), O::Reg(b)]) if a != b => {
            GadgetClass::Xchg(*a, *b).normalize()
        }
        (m, [O::Reg(d), O::Reg(s)]) if BinOp::from_mnemonic(*m).is_some() => GadgetClass::BinRR {
            op: BinOp::from_mnemonic(*m).unwrap(),
            dst: *d,
            src: *s,
        },
        (Mnemonic::Mov, [O::Reg(d), O::Mem(m)])
            if m.base.is_some() && m.index.is_none() && m.disp == 0 =>
        {
            GadgetClass::Load {
                dst: *d,
                src: m.base.unwrap(),
            }
        }
        (Mnemonic::Mov, [O::Mem(m), O::Reg(s)])
            if m.base.is_some() && m.index.is_none() && m.disp == 0 =>
        {
            GadgetClass::Store {
                dst: m.base.unwrap(),
                src: *s,
            }
        }
        (Mnemonic::Cmovcc(cc), [O::Reg(d), O::Reg(s)]) => GadgetClass::CMov {
            cc: *cc,
            dst: *d,
            src: *s,
        },
        (Mnemonic::Mul, [O::Reg(r)]) => GadgetClass::Mul(*r),
        (Mnemonic::Shl, [O::Reg(r), O::Imm(k)]) if (1..32).contains(k) => GadgetClass::ShiftImm {
            op: ShiftOp::Shl,
            reg: *r,
            k: *k as u8,
        },
        (Mnemonic::Shr, [O::Reg(r), O::Imm(k)]) if (1..32).contains(k) => GadgetClass::ShiftImm {
            op: ShiftOp::Shr,
            reg: *r,
            k: *k as u8,
        },
        _ => return None,
    };
    Some(class)
}

// --- gadgets and the library index -----------------------------------------

#[derive(Debug, Clone)]
pub struct Gadget {
    pub vaddr: u32,
    pub class: GadgetClass,
    /// Instruction bytes including the trailing C3.
    pub raw: Vec<u8>,
}

/// `symbol + offset` form of a gadget address; stable under image relocation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolOffset {
    pub symbol: String,
    pub offset: i32,
}

#[derive(Debug, Clone)]
pub struct GadgetLibrary {
    pub image: LibraryImage,
    by_class: HashMap<GadgetClass, Vec<Gadget>>,
    /// Exported symbols eligible as anchors: unique names, sorted by name.
    anchor_pool: Vec<LibSymbol>,
}

impl GadgetLibrary {
    pub(crate) fn new(image: LibraryImage, mut gadgets: Vec<Gadget>) -> GadgetLibrary {
        gadgets.sort_by_key(|g| g.vaddr);
        let mut by_class: HashMap<GadgetClass, Vec<Gadget>> = HashMap::new();
        for g in gadgets {
            by_class.entry(g.class.normalize()).or_default().push(g);
        }

        // Duplicate-named exports are ambiguous as anchors; drop every copy.
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &image.symbols {
            *counts.entry(s.name.as_str()).or_default() += 1;
        }
        let mut anchor_pool: Vec<LibSymbol> = image
            .symbols
            .iter()
            .filter(|s| counts[s.name.as_str()] == 1)
            .cloned()
            .collect();
        anchor_pool.sort_by(|a, b| a.name.cmp(&b.name));

        GadgetLibrary {
            image,
            by_class,
            anchor_pool,
        }
    }

    /// All gadgets of a class, in vaddr order.
    pub fn find(&self, class: GadgetClass) -> &[Gadget] {
        self.by_class
            .get(&class.normalize())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn has(&self, class: GadgetClass) -> bool {
        !self.find(class).is_empty()
    }

    /// The gadget starting at an image vaddr, if any (attacker-side lookup).
    pub fn class_at(&self, vaddr: u32) -> Option<GadgetClass> {
        self.by_class
            .values()
            .flatten()
            .find(|g| g.vaddr == vaddr)
            .map(|g| g.class)
    }

    pub fn classes(&self) -> impl Iterator<Item = GadgetClass> + '_ {
        self.by_class.keys().copied()
    }

    pub fn gadget_count(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    /// Register pairs connected by an xchg gadget (normalized order).
    pub fn xchg_pairs(&self) -> Vec<(Register, Register)> {
        let mut pairs: Vec<(Register, Register)> = self
            .by_class
            .keys()
            .filter_map(|c| match c {
                GadgetClass::Xchg(a, b) => Some((*a, *b)),
                _ => None,
            })
            .collect();
        pairs.sort_by_key(|(a, b)| (a.number(), b.number()));
        pairs
    }

    pub fn anchor_symbols(&self) -> &[LibSymbol] {
        &self.anchor_pool
    }

    /// Express a gadget address as a uniformly drawn exported symbol plus
    /// offset. Different draws for the same gadget may name different symbols.
    pub fn anchor(&self, gadget_vaddr: u32, rng: &mut Rng) -> Result<SymbolOffset, GadgetError> {
        if self.anchor_pool.is_empty() {
            return Err(GadgetError::NoSymbols);
        }
        let sym = &self.anchor_pool[rng.below(self.anchor_pool.len() as u64) as usize];
        Ok(SymbolOffset {
            symbol: sym.name.clone(),
            offset: gadget_vaddr.wrapping_sub(sym.vaddr) as i32,
        })
    }

    /// Absolute address of a symbol, if exported.
    pub fn symbol_vaddr(&self, name: &str) -> Option<u32> {
        self.image
            .symbols
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.vaddr)
    }
}

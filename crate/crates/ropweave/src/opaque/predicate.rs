//! Opaque predicate generation.
//!
//! Every predicate body ends by appending one known bit into the low end of
//! the accumulator register (`shl ecx, 1` / `or cl, al`). The factorization
//! family compares a 64-bit product `x*y` against a constant; the three-sat
//! family evaluates a provably unsatisfiable CNF over an input word. Bodies
//! clobber only eax, edx, flags, and the ecx accumulator, plus stack scratch
//! below esp, so the caller can save exactly that set.

use serde::{Deserialize, Serialize};

use crate::asm::{ins, Cc, Instruction, MemRef, Mnemonic, Reg8, Register};
use crate::rng::Rng;

use super::prime::random_prime;
use super::sat::{unsat_cnf, Clause};
use super::PredicateAlgorithm;

/// Whether instances may draw their inputs from runtime register values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredicateMode {
    Basic,
    Dse,
}

/// Truth shape: Invariant instances yield the same bit for every input;
/// Contextual instances are true exactly on their designed inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredicateKind {
    Invariant,
    Contextual,
}

/// Where the body's inputs come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputSource {
    /// Inputs drawn uniformly at generation time and baked in as immediates.
    RandomConst(u32, u32),
    /// Inputs constructed to hit or miss the predicate's precondition.
    ChosenConst(u32, u32),
    /// First input mixed from live register values at run time; the second
    /// stays an immediate.
    RuntimeRegs { regs: [Register; 3], y: u32 },
}

/// Comparison polarity of a factorization body: `Eq` accumulates whether
/// x*y equals the constant, `Ne` whether it differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Eq,
    Ne,
}

/// Algorithm payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredicateParams {
    Factorization { c: u64, polarity: Polarity },
    ThreeSat { clauses: Vec<Clause>, n_factor: u32 },
}

/// One generated predicate: a code body plus everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateInstance {
    pub algorithm: PredicateAlgorithm,
    pub kind: PredicateKind,
    pub input_source: InputSource,
    pub params: PredicateParams,
    pub output_bit: u8,
    pub body: Vec<Instruction>,
    /// Indices into `body` where foreign code may be spliced. Spliced code
    /// must leave eax, ecx, edx, and esp untouched (stack scratch below the
    /// save region and flags are fair game).
    pub insertion_points: Vec<usize>,
}

/// Generation settings: mode plus the algorithm selection threaded in from
/// the obfuscation config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredicateConfig {
    pub mode: PredicateMode,
    pub algorithm: PredicateAlgorithm,
    pub sat_factor: u32,
}

pub const DEFAULT_SAT_FACTOR: u32 = 6;

impl PredicateConfig {
    pub fn new(mode: PredicateMode, algorithm: PredicateAlgorithm) -> PredicateConfig {
        PredicateConfig {
            mode,
            algorithm,
            sat_factor: DEFAULT_SAT_FACTOR,
        }
    }
}

/// Registers whose runtime values feed Dse inputs. They are outside the
/// set clobbered by generators and predicate bodies, so reading them is
/// always safe and their values are arbitrary from the body's viewpoint.
const DSE_POOL: [Register; 3] = [Register::Ebx, Register::Esi, Register::Edi];

/// Stack slot (relative to esp) holding the three-sat input word. Emitted
/// bodies use this fixed displacement; embedding contexts that push chain
/// cells rewrite it so the slot stays below their save region.
pub(crate) const SAT_SLOT_DISP: i32 = -0x44;

/// Generates one predicate that accumulates `bit`.
pub fn gen_predicate(bit: u8, cfg: &PredicateConfig, rng: &mut Rng) -> PredicateInstance {
    debug_assert!(bit <= 1);
    let (kind, input) = draw_shape(cfg, rng);
    match cfg.algorithm {
        PredicateAlgorithm::Factorization => match kind {
            PredicateKind::Invariant => {
                let c = random_prime(rng, 1 << 62, 1 << 63);
                let polarity = if bit == 1 { Polarity::Ne } else { Polarity::Eq };
                fact_instance(PredicateKind::Invariant, input, c, polarity, bit)
            }
            PredicateKind::Contextual => {
                let p = random_prime(rng, 1 << 8, 1 << 16);
                let q = random_prime(rng, 1 << 8, 1 << 16);
                let c = p * q;
                let input = if bit == 1 {
                    InputSource::ChosenConst(p as u32, q as u32)
                } else {
                    loop {
                        let (x, y) = (rng.next_u32(), rng.next_u32());
                        if x as u64 * y as u64 != c {
                            break InputSource::ChosenConst(x, y);
                        }
                    }
                };
                fact_instance(PredicateKind::Contextual, input, c, Polarity::Eq, bit)
            }
        },
        PredicateAlgorithm::ThreeSat => {
            let clauses = unsat_cnf(rng, cfg.sat_factor);
            sat_instance(input, clauses, cfg.sat_factor, bit, rng)
        }
    }
}

/// Draws the kind/input combination for this instance. Dse mode includes
/// runtime-register inputs with probability 1/2; otherwise both modes pick
/// uniformly between invariant and contextual constant-input shapes.
fn draw_shape(cfg: &PredicateConfig, rng: &mut Rng) -> (PredicateKind, InputSource) {
    if cfg.mode == PredicateMode::Dse && rng.chance(1, 2) {
        let mut pool = DSE_POOL;
        rng.shuffle(&mut pool);
        let y = rng.next_u32() | 2;
        return (
            PredicateKind::Invariant,
            InputSource::RuntimeRegs { regs: pool, y },
        );
    }
    if rng.chance(1, 2) {
        (
            PredicateKind::Invariant,
            InputSource::RandomConst(rng.next_u32(), rng.next_u32()),
        )
    } else {
        // Placeholder; the contextual arm rebuilds it from the factor pair.
        (PredicateKind::Contextual, InputSource::ChosenConst(0, 0))
    }
}

/// Emits instructions leaving `eax = x` (and `edx = y` when `with_y`).
fn input_setup(input: &InputSource, with_y: bool) -> Vec<Instruction> {
    match input {
        InputSource::RandomConst(x, y) | InputSource::ChosenConst(x, y) => {
            let mut out = vec![ins::mov_ri(Register::Eax, *x)];
            if with_y {
                out.push(ins::mov_ri(Register::Edx, *y));
            }
            out
        }
        InputSource::RuntimeRegs { regs: [r1, r2, r3], y } => {
            let mut out = vec![
                // eax = rotl(r2, 13)
                ins::mov_rr(Register::Eax, *r2),
                ins::mov_rr(Register::Edx, Register::Eax),
                ins::shl_ri(Register::Eax, 13),
                ins::shr_ri(Register::Edx, 19),
                ins::alu_rr(Mnemonic::Or, Register::Eax, Register::Edx),
                // eax = (r1 + rotl(r2, 13)) ^ r3
                ins::alu_rr(Mnemonic::Add, Register::Eax, *r1),
                ins::alu_rr(Mnemonic::Xor, Register::Eax, *r3),
            ];
            if with_y {
                out.push(ins::mov_ri(Register::Edx, *y));
            }
            out
        }
    }
}

/// Builds a factorization instance comparing `x*y` against `c`.
pub(crate) fn fact_instance(
    kind: PredicateKind,
    input: InputSource,
    c: u64,
    polarity: Polarity,
    output_bit: u8,
) -> PredicateInstance {
    let (set_cc, merge) = match polarity {
        Polarity::Eq => (Cc::E, Mnemonic::And),
        Polarity::Ne => (Cc::Ne, Mnemonic::Or),
    };
    let mut body = input_setup(&input, true);
    body.push(ins::mul_r(Register::Edx));
    let mut points = vec![body.len()];
    body.push(ins::alu_ri(Mnemonic::Cmp, Register::Eax, c as u32));
    body.push(ins::setcc(set_cc, Reg8::Al));
    points.push(body.len());
    body.push(ins::alu_ri(Mnemonic::Cmp, Register::Edx, (c >> 32) as u32));
    body.push(ins::setcc(set_cc, Reg8::Dl));
    body.push(ins::alu8_rr(merge, Reg8::Al, Reg8::Dl));
    points.push(body.len());
    body.push(ins::shl_ri(Register::Ecx, 1));
    body.push(ins::alu8_rr(Mnemonic::Or, Reg8::Cl, Reg8::Al));
    PredicateInstance {
        algorithm: PredicateAlgorithm::Factorization,
        kind,
        input_source: input,
        params: PredicateParams::Factorization { c, polarity },
        output_bit,
        body,
        insertion_points: points,
    }
}

/// Builds a three-sat instance: the body evaluates the (unsatisfiable) CNF
/// over the input word, so the conjunction is always 0 and the appended bit
/// is `output_bit` after the tail's optional negation.
fn sat_instance(
    input: InputSource,
    clauses: Vec<Clause>,
    n_factor: u32,
    output_bit: u8,
    rng: &mut Rng,
) -> PredicateInstance {
    // The word-only input: reuse the shape drawn for the instance, zeroing
    // the unused second component.
    let input = match input {
        InputSource::RandomConst(x, _) => InputSource::RandomConst(x, 0),
        InputSource::ChosenConst(x, _) => InputSource::ChosenConst(x, 0),
        InputSource::RuntimeRegs { regs, .. } => InputSource::RuntimeRegs { regs, y: 0 },
    };
    let slot = MemRef::base_disp(Register::Esp, SAT_SLOT_DISP);
    let mut body = input_setup(&input, false);
    body.push(ins::mov_mr(slot.clone(), Register::Eax));
    body.push(ins::mov_ri(Register::Edx, 1));
    let prefix = body.len();
    for c in &clauses {
        let (mask, expect) = c.mask_expect();
        body.push(ins::mov_rm(Register::Eax, slot.clone()));
        body.push(ins::alu_ri(Mnemonic::And, Register::Eax, mask));
        body.push(ins::alu_ri(Mnemonic::Cmp, Register::Eax, expect));
        body.push(ins::setcc(Cc::Ne, Reg8::Al));
        body.push(ins::alu8_rr(Mnemonic::And, Reg8::Dl, Reg8::Al));
    }
    body.push(ins::mov8_rr(Reg8::Al, Reg8::Dl));
    if output_bit == 1 {
        body.push(ins::alu8_ri(Mnemonic::Xor, Reg8::Al, 1));
    }
    body.push(ins::shl_ri(Register::Ecx, 1));
    body.push(ins::alu8_rr(Mnemonic::Or, Reg8::Cl, Reg8::Al));

    // Three distinct clause boundaries, in body order.
    let mut ks: Vec<usize> = Vec::new();
    while ks.len() < 3 {
        let k = 1 + rng.below(clauses.len() as u64 - 1) as usize;
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    ks.sort_unstable();
    let points = ks.into_iter().map(|k| prefix + 5 * k).collect();

    PredicateInstance {
        algorithm: PredicateAlgorithm::ThreeSat,
        kind: PredicateKind::Invariant,
        input_source: input,
        params: PredicateParams::ThreeSat { clauses, n_factor },
        output_bit,
        body,
        insertion_points: points,
    }
}

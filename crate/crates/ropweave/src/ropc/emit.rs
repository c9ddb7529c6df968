//! Generator emission: turn a chain plan into the code that pushes the
//! chain cells in reverse order and launches it with a ret.
//!
//! Flag preservation layout (when requested): EFLAGS is parked four bytes
//! below where the chain's lowest cell will sit. The prologue reserves the
//! cell span, pushes the flag word, and snaps esp back; the epilogue
//! (running after all cells are pushed, esp at the lowest cell) steps down
//! one slot, pops the flags, and leaves esp back on the first cell so the
//! final ret launches the chain.

use crate::asm::{ins, Instruction, MemRef, Register};
use crate::gadgets::GadgetLibrary;
use crate::rng::Rng;

use super::{ChainElement, ChainPlan, PlanStep, RopChain, RopcError};

/// Whether a generator must leave EFLAGS as it found them: required when
/// any flag is live into the chain (the chain's own pops and the launch
/// machinery would otherwise see clobbered flags as acceptable, but the
/// code after the chain would not).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagsPolicy {
    Preserve,
    Clobber,
}

/// Resolves plan steps to concrete chain elements, drawing a fresh anchor
/// symbol for every gadget reference, in execution order.
pub fn chain_elements(
    plan: &ChainPlan,
    lib: &GadgetLibrary,
    rng: &mut Rng,
) -> Result<RopChain, RopcError> {
    let mut elements = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        elements.push(match step {
            PlanStep::Gadget { vaddr, .. } => ChainElement::GadgetRef(lib.anchor(*vaddr, rng)?),
            PlanStep::ImmCell {
                value, protectable, ..
            } => ChainElement::Immediate {
                value: *value,
                protectable: *protectable,
            },
            PlanStep::LabelCell { label, .. } => ChainElement::ChainLabel(label.clone()),
        });
    }
    Ok(RopChain {
        elements,
        clobbers_flags: plan.clobbers_flags(),
    })
}

pub(crate) fn lea_esp(disp: i32) -> Instruction {
    ins::lea(Register::Esp, MemRef::base_disp(Register::Esp, disp))
}

/// One push per chain element, last element first.
pub(crate) fn push_of(e: &ChainElement) -> Instruction {
    match e {
        ChainElement::GadgetRef(s) => ins::push_symoff(&s.symbol, s.offset),
        ChainElement::Immediate { value, .. } => ins::push_imm(*value),
        ChainElement::ChainLabel(l) => ins::push_label(l),
    }
}

/// Emits the generator for a planned chain: optional flag save, the cell
/// pushes in reverse order, optional flag restore, and the launching ret.
pub fn emit_generator(
    plan: &ChainPlan,
    lib: &GadgetLibrary,
    rng: &mut Rng,
    flags: FlagsPolicy,
) -> Result<Vec<Instruction>, RopcError> {
    let chain = chain_elements(plan, lib, rng)?;
    Ok(assemble_generator(&chain, flags))
}

/// Pure layout step shared with the opaque-constant rewriter.
pub(crate) fn assemble_generator(chain: &RopChain, flags: FlagsPolicy) -> Vec<Instruction> {
    let n = chain.elements.len() as i32;
    let mut out = Vec::new();
    if flags == FlagsPolicy::Preserve {
        out.push(lea_esp(-4 * n));
        out.push(ins::pushf());
        out.push(lea_esp(4 * n + 4));
    }
    for e in chain.elements.iter().rev() {
        out.push(push_of(e));
    }
    if flags == FlagsPolicy::Preserve {
        out.push(lea_esp(-4));
        out.push(ins::popf());
    }
    out.push(ins::ret());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::print_instruction;
    use crate::gadgets::{fig3_library, load_library};

    fn fig3() -> GadgetLibrary {
        load_library(&fig3_library()).unwrap()
    }
    use crate::ropc::{Micro, MicroOp, plan_chain};
    use crate::asm::Register::*;
    use crate::gadgets::{BinOp, GadgetClass};

    /// Seed whose anchor draws reproduce the documented worked example:
    /// atoi for the pop and add, puts for the first xchg, atoi again for
    /// the second (found by search, frozen here).
    pub(crate) const WORKED_EXAMPLE_SEED: u64 = 13;

    fn fig3_plan() -> ChainPlan {
        let lib = fig3();
        let ops = vec![
            Micro {
                op: MicroOp::LoadImm(Ecx, 123),
                origin: 0,
            },
            Micro {
                op: MicroOp::Op(GadgetClass::BinRR {
                    op: BinOp::Add,
                    dst: Edx,
                    src: Ecx,
                }),
                origin: 0,
            },
        ];
        let steps = plan_chain(&ops, &lib, &mut Rng::seeded(1)).unwrap();
        ChainPlan::new(steps, ops)
    }

    #[test]
    fn worked_example_generator_matches_the_documented_listing() {
        let lib = fig3();
        let mut rng = Rng::seeded(WORKED_EXAMPLE_SEED);
        let got = emit_generator(&fig3_plan(), &lib, &mut rng, FlagsPolicy::Clobber).unwrap();
        let text: Vec<String> = got.iter().map(print_instruction).collect();
        assert_eq!(
            text,
            vec![
                "push atoi+0x500",
                "push atoi+0x7ab",
                "push puts-0x300",
                "push 123",
                "push atoi+0x145",
                "ret",
            ]
        );
    }

    #[test]
    fn anchored_addresses_always_resolve_to_the_gadget() {
        let lib = fig3();
        for seed in 0..64 {
            let mut rng = Rng::seeded(seed);
            let chain = chain_elements(&fig3_plan(), &lib, &mut rng).unwrap();
            let resolved: Vec<u32> = chain
                .elements
                .iter()
                .filter_map(|e| match e {
                    ChainElement::GadgetRef(s) => Some(
                        (lib.symbol_vaddr(&s.symbol).unwrap() as i64 + s.offset as i64) as u32,
                    ),
                    _ => None,
                })
                .collect();
            assert_eq!(resolved, vec![0x10345, 0x10700, 0x109ab, 0x10700]);
        }
    }

    #[test]
    fn flag_preserving_wrap_reproduces_the_documented_arithmetic() {
        // Chain of 6 cells: prologue lea -0x18 / pushf / lea +0x1c and
        // epilogue lea -4 / popf / ret.
        let lib = fig3();
        let ops: Vec<Micro> = (0..3)
            .map(|k| Micro {
                op: MicroOp::LoadImm(Ecx, k),
                origin: k as usize,
            })
            .collect();
        let steps = plan_chain(&ops, &lib, &mut Rng::seeded(2)).unwrap();
        let plan = ChainPlan::new(steps, ops);
        assert_eq!(plan.steps.len(), 6);
        let got = emit_generator(&plan, &lib, &mut Rng::seeded(3), FlagsPolicy::Preserve).unwrap();
        let text: Vec<String> = got.iter().map(print_instruction).collect();
        assert_eq!(text[0], "lea esp, DWORD PTR [esp-0x18]");
        assert_eq!(text[1], "pushf");
        assert_eq!(text[2], "lea esp, DWORD PTR [esp+0x1c]");
        assert_eq!(text[text.len() - 3], "lea esp, DWORD PTR [esp-0x4]");
        assert_eq!(text[text.len() - 2], "popf");
        assert_eq!(text[text.len() - 1], "ret");
        assert_eq!(got.len(), 6 + 6);
    }

    #[test]
    fn empty_plan_is_a_bare_ret() {
        let lib = fig3();
        let plan = ChainPlan::new(Vec::new(), Vec::new());
        let got = emit_generator(&plan, &lib, &mut Rng::seeded(1), FlagsPolicy::Clobber).unwrap();
        assert_eq!(got, vec![ins::ret()]);
    }
}


//! Instruction hiding inside opaque-predicate bodies.
//!
//! At the highest protection level, part of the decomposed computation is
//! pulled out of the ROP chain entirely: the chain cells realizing a hidden
//! micro-op are dropped, and the original instruction executes instead at one
//! of the insertion points inside the generator's opaque-constant bodies.
//! Every insertion point that does not receive a hidden instruction is filled
//! with dummy code, so hidden work is indistinguishable from filler.
//!
//! A hidden op runs at generator time, before the chain it was lifted from.
//! Writes to the generator's saved registers (eax/ecx/edx) are routed through
//! their save slots, so every hidden effect materializes exactly at chain
//! entry. That makes hiding sound iff the op commutes with the chain prefix
//! that originally ran before it: no earlier chain step may touch any
//! register the op reads or writes. Selection enforces that corridor, limits
//! itself to flag-free register-only ops realized without exchange
//! relocation, and stays within half of the plan's micro-ops.

use crate::asm::{footprint, Instruction, RegSet, Register};
use crate::gadgets::GadgetClass;
use crate::opaque::{PointFill, POINTS_PER_CONSTANT};
use crate::rng::Rng;
use crate::ropc::{ChainPlan, MicroOp, PlanStep};
use std::collections::BTreeSet;

/// One micro-op scheduled to run inside a predicate body instead of its
/// chain, as produced by [`select_hidden`].
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenOp {
    /// Index into the plan's micro-op list.
    pub op_index: usize,
    /// The instruction embedded at the insertion point.
    pub instr: Instruction,
    /// Indices of the plan steps removed from the chain.
    pub steps: Vec<usize>,
    /// Insertion point assigned to the op, counted over all points of the
    /// emitted generator (point / [`POINTS_PER_CONSTANT`] gives the opaque
    /// constant, the remainder the predicate point within it).
    pub point: usize,
}

/// Hiding decisions for one generator's chain: hidden ops in chain order
/// with strictly increasing points, plus the point total. Points not claimed
/// by a hidden op receive dummy fills at emission, so every insertion point
/// ends up occupied.
#[derive(Debug, Clone, Default)]
pub struct GeneratorHiding {
    pub hidden: Vec<HiddenOp>,
    pub total_points: usize,
}

/// Whole-function hiding plan: one entry per generator, in emission order.
#[derive(Debug, Clone, Default)]
pub struct HidingPlan {
    pub generators: Vec<GeneratorHiding>,
    /// Decomposed micro-ops across all generators (the ratio denominator).
    pub total_ops: usize,
}

impl HidingPlan {
    pub fn hidden_count(&self) -> usize {
        self.generators.iter().map(|g| g.hidden.len()).sum()
    }

    /// Hidden micro-ops over decomposed micro-ops; bounded by 0.5.
    pub fn hidden_ratio(&self) -> f64 {
        if self.total_ops == 0 {
            0.0
        } else {
            self.hidden_count() as f64 / self.total_ops as f64
        }
    }
}

/// Selects hidden ops for every generator plan of a function.
pub fn select_hidden(plans: &[&ChainPlan], rng: &mut Rng) -> HidingPlan {
    HidingPlan {
        generators: plans.iter().map(|p| select_for_plan(p, rng)).collect(),
        total_ops: plans.iter().map(|p| p.ops.len()).sum(),
    }
}

/// Per-plan selection: random among eligible candidates, at most half of
/// the plan's micro-ops. Chain order of the selected ops is preserved by
/// assigning sorted insertion points.
pub fn select_for_plan(plan: &ChainPlan, rng: &mut Rng) -> GeneratorHiding {
    let budget = plan.ops.len() / 2;
    let mut candidates: Vec<HiddenOp> = (0..plan.ops.len())
        .filter_map(|i| candidate(plan, i))
        .collect();
    rng.shuffle(&mut candidates);

    let mut selected: Vec<HiddenOp> = candidates.into_iter().take(budget).collect();
    selected.sort_by_key(|h| h.steps[0]);

    let removed: BTreeSet<usize> = selected.iter().flat_map(|h| h.steps.clone()).collect();
    let remaining_protectable = plan
        .steps
        .iter()
        .enumerate()
        .filter(|(i, s)| !removed.contains(i) && !matches!(s, PlanStep::LabelCell { .. }))
        .count();
    // Every unselected micro-op keeps at least one gadget cell, and budget
    // stays below the op count, so hiding can never exhaust the points.
    assert!(selected.is_empty() || remaining_protectable > 0);

    let total_points = remaining_protectable * POINTS_PER_CONSTANT;
    let mut points = BTreeSet::new();
    while points.len() < selected.len() {
        points.insert(rng.below(total_points as u64) as usize);
    }
    for (h, p) in selected.iter_mut().zip(points) {
        h.point = p;
    }
    GeneratorHiding {
        hidden: selected,
        total_points,
    }
}

/// The plan with the hidden ops' steps removed. The micro list is kept
/// intact so the remaining steps' op indices stay valid.
pub fn filtered_plan(plan: &ChainPlan, hidden: &[HiddenOp]) -> ChainPlan {
    let removed: BTreeSet<usize> = hidden.iter().flat_map(|h| h.steps.clone()).collect();
    ChainPlan {
        steps: plan
            .steps
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, s)| s.clone())
            .collect(),
        ops: plan.ops.clone(),
    }
}

/// One fill per insertion point: the hidden instructions at their assigned
/// points, dummies everywhere else.
pub(crate) fn fills_for(gh: &GeneratorHiding) -> Vec<PointFill> {
    let mut fills = vec![PointFill::Dummy; gh.total_points];
    for h in &gh.hidden {
        fills[h.point] = PointFill::Hidden(h.instr.clone());
    }
    fills
}

/// Checks eligibility of one micro-op and builds its hidden form. The op
/// must be a flag-free register move realized directly (no exchange
/// relocation changed its registers), and no chain step before it may touch
/// any register it reads or writes.
fn candidate(plan: &ChainPlan, op_index: usize) -> Option<HiddenOp> {
    let steps = direct_steps(plan, op_index)?;
    let instr = plan.ops[op_index].op.instruction();
    let fp = footprint(&instr);
    let regs = fp.regs_read.union(fp.regs_written);
    if regs.contains(Register::Esp) || regs.contains(Register::Ebp) {
        return None;
    }
    for step in &plan.steps[..steps[0]] {
        let touched = match step {
            PlanStep::Gadget { class, .. } => {
                let sfp = footprint(&class.instruction());
                sfp.regs_read.union(sfp.regs_written)
            }
            _ => RegSet::EMPTY,
        };
        if touched.iter().any(|r| regs.contains(r)) {
            return None;
        }
    }
    Some(HiddenOp {
        op_index,
        instr,
        steps,
        point: 0,
    })
}

/// The op's step indices iff its realization is the direct one for its
/// class: a relocated op acts on permuted physical registers, while the
/// embedded instruction uses the virtual ones, so those never hide.
fn direct_steps(plan: &ChainPlan, op_index: usize) -> Option<Vec<usize>> {
    let owned: Vec<usize> = plan
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let op = match s {
                PlanStep::Gadget { op, .. } => op,
                PlanStep::ImmCell { op, .. } => op,
                PlanStep::LabelCell { op, .. } => op,
            };
            *op == Some(op_index)
        })
        .map(|(i, _)| i)
        .collect();
    let gadget_class = |i: usize| match &plan.steps[i] {
        PlanStep::Gadget { class, .. } => Some(*class),
        _ => None,
    };
    match (&plan.ops[op_index].op, owned.as_slice()) {
        (MicroOp::LoadImm(r, v), [g, c]) => {
            let pop = gadget_class(*g) == Some(GadgetClass::Pop(*r));
            let imm = matches!(plan.steps[*c], PlanStep::ImmCell { value, .. } if value == *v);
            (pop && imm).then(|| owned.clone())
        }
        (MicroOp::LoadLabel(r, l), [g, c]) => {
            let pop = gadget_class(*g) == Some(GadgetClass::Pop(*r));
            let lab = matches!(&plan.steps[*c], PlanStep::LabelCell { label, .. } if label == l);
            (pop && lab).then(|| owned.clone())
        }
        (MicroOp::Op(c @ GadgetClass::MovRR { .. }), [g])
        | (MicroOp::Op(c @ GadgetClass::Xchg(..)), [g]) => {
            (gadget_class(*g) == Some(c.normalize())).then(|| owned.clone())
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::ins;
    use crate::asm::Register::*;
    use crate::gadgets::{build_synthetic_library, load_library, standard_classes, BinOp};
    use crate::ropc::{plan_chain, Micro};

    fn lib() -> crate::gadgets::GadgetLibrary {
        load_library(&build_synthetic_library(&standard_classes(), &mut Rng::seeded(2))).unwrap()
    }

    fn planned(ops: Vec<MicroOp>) -> ChainPlan {
        let micros: Vec<Micro> = ops
            .into_iter()
            .enumerate()
            .map(|(origin, op)| Micro { op, origin })
            .collect();
        let steps = plan_chain(&micros, &lib(), &mut Rng::seeded(5)).unwrap();
        ChainPlan::new(steps, micros)
    }

    #[test]
    fn leading_load_hides_and_the_dependent_add_stays() {
        let plan = planned(vec![
            MicroOp::LoadImm(Ecx, 123),
            MicroOp::Op(GadgetClass::BinRR {
                op: BinOp::Add,
                dst: Edx,
                src: Ecx,
            }),
        ]);
        let gh = select_for_plan(&plan, &mut Rng::seeded(1));
        assert_eq!(gh.hidden.len(), 1);
        let h = &gh.hidden[0];
        assert_eq!(h.instr, ins::mov_ri(Ecx, 123));
        assert_eq!(h.steps, vec![0, 1], "the pop gadget and its operand cell");
        let filtered = filtered_plan(&plan, &gh.hidden);
        assert_eq!(filtered.steps.len(), plan.steps.len() - 2);
        assert!(h.point < gh.total_points);
    }

    #[test]
    fn corridor_interference_blocks_a_late_load() {
        // The add touches ecx before the load's chain position, so pulling
        // the load to generator time would reorder it past a reader.
        let plan = planned(vec![
            MicroOp::Op(GadgetClass::BinRR {
                op: BinOp::Add,
                dst: Edx,
                src: Ecx,
            }),
            MicroOp::LoadImm(Ecx, 5),
        ]);
        let gh = select_for_plan(&plan, &mut Rng::seeded(1));
        assert!(gh.hidden.is_empty());
    }

    #[test]
    fn budget_is_half_the_micro_ops() {
        let plan = planned(vec![
            MicroOp::LoadImm(Ecx, 1),
            MicroOp::LoadImm(Ebx, 2),
            MicroOp::LoadImm(Esi, 3),
            MicroOp::LoadImm(Edi, 4),
        ]);
        for seed in 0..20 {
            let gh = select_for_plan(&plan, &mut Rng::seeded(seed));
            assert_eq!(gh.hidden.len(), 2, "4 candidates, budget 2");
            let points: Vec<usize> = gh.hidden.iter().map(|h| h.point).collect();
            let firsts: Vec<usize> = gh.hidden.iter().map(|h| h.steps[0]).collect();
            assert!(points.windows(2).all(|w| w[0] < w[1]));
            assert!(firsts.windows(2).all(|w| w[0] < w[1]), "chain order kept");
        }
    }

    #[test]
    fn single_op_plans_never_hide() {
        let plan = planned(vec![MicroOp::LoadImm(Ecx, 9)]);
        let gh = select_for_plan(&plan, &mut Rng::seeded(3));
        assert!(gh.hidden.is_empty(), "budget is half of one op");
    }

    #[test]
    fn flag_writing_ops_are_not_candidates() {
        let plan = planned(vec![
            MicroOp::Op(GadgetClass::BinRR {
                op: BinOp::Xor,
                dst: Ebx,
                src: Esi,
            }),
            MicroOp::Op(GadgetClass::Mul(Ebx)),
        ]);
        let gh = select_for_plan(&plan, &mut Rng::seeded(1));
        assert!(gh.hidden.is_empty(), "alu and mul write flags");
    }

    #[test]
    fn label_loads_hide_with_their_label_cell() {
        let plan = planned(vec![
            MicroOp::LoadLabel(Esi, "table".into()),
            MicroOp::LoadImm(Edi, 8),
        ]);
        let gh = select_for_plan(&plan, &mut Rng::seeded(2));
        assert_eq!(gh.hidden.len(), 1);
        let h = &gh.hidden[0];
        let filtered = filtered_plan(&plan, &gh.hidden);
        assert_eq!(filtered.steps.len(), plan.steps.len() - 2);
        match &h.instr.operands[..] {
            [crate::asm::Operand::Reg(_), crate::asm::Operand::Label(l)] => {
                assert_eq!(l, "table")
            }
            [crate::asm::Operand::Reg(_), crate::asm::Operand::Imm(8)] => {}
            other => panic!("unexpected hidden operands {other:?}"),
        }
    }

    #[test]
    fn fills_cover_every_point_exactly_once() {
        let plan = planned(vec![
            MicroOp::LoadImm(Ecx, 1),
            MicroOp::LoadImm(Ebx, 2),
            MicroOp::LoadImm(Esi, 3),
            MicroOp::LoadImm(Edi, 4),
        ]);
        let gh = select_for_plan(&plan, &mut Rng::seeded(7));
        let fills = fills_for(&gh);
        assert_eq!(fills.len(), gh.total_points);
        let hidden = fills
            .iter()
            .filter(|f| matches!(f, PointFill::Hidden(_)))
            .count();
        assert_eq!(hidden, gh.hidden.len());
    }
}

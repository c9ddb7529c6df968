//! Lazy exchange planning: realize micro-operations against the gadgets a
//! library actually has by permuting values across registers with xchg
//! gadgets, deferring every restore until the end of the chain.
//!
//! The planner tracks a virtual-to-physical register map. When an op's
//! gadget is missing for the current mapping, a breadth-first search over
//! the library's xchg pairs finds the nearest mapping under which it
//! exists; the traversed exchanges become chain steps and stay in effect
//! so later ops profit from them. After the last op the mapping is walked
//! back to the identity the same way.

use crate::asm::{Cc, Instruction, Mnemonic, Operand, Register};
use crate::gadgets::{GadgetClass, GadgetLibrary};
use crate::rng::Rng;

use super::{Micro, MicroOp, PlanStep, RopcError};

/// Exchange search depth bound per op. Four swaps reach any placement of
/// two operands in a six-register file over a connected xchg graph.
const MAX_EXCHANGES: usize = 4;

/// Virtual-to-physical register permutation. `map[v]` is the physical home
/// of virtual register number `v`; esp/ebp always map to themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Perm {
    map: [u8; 8],
}

impl Perm {
    fn identity() -> Perm {
        Perm {
            map: [0, 1, 2, 3, 4, 5, 6, 7],
        }
    }

    fn get(&self, v: Register) -> Register {
        Register::from_number(self.map[v.number() as usize]).unwrap()
    }

    fn is_identity(&self) -> bool {
        self.map == [0, 1, 2, 3, 4, 5, 6, 7]
    }

    /// Effect of executing `xchg a, b` on physical registers: the two
    /// virtual registers currently homed at a and b trade homes.
    fn apply_xchg(&mut self, a: Register, b: Register) {
        let (an, bn) = (a.number(), b.number());
        let va = self.map.iter().position(|&p| p == an).unwrap();
        let vb = self.map.iter().position(|&p| p == bn).unwrap();
        self.map.swap(va, vb);
    }
}

/// The physical gadget class realizing `class` when values live at `p`.
fn remap(class: GadgetClass, p: &Perm) -> GadgetClass {
    match class {
        GadgetClass::Pop(r) => GadgetClass::Pop(p.get(r)),
        GadgetClass::PushReg(r) => GadgetClass::PushReg(p.get(r)),
        GadgetClass::MovRR { dst, src } => GadgetClass::MovRR {
            dst: p.get(dst),
            src: p.get(src),
        },
        GadgetClass::Xchg(a, b) => GadgetClass::Xchg(p.get(a), p.get(b)).normalize(),
        GadgetClass::BinRR { op, dst, src } => GadgetClass::BinRR {
            op,
            dst: p.get(dst),
            src: p.get(src),
        },
        GadgetClass::Load { dst, src } => GadgetClass::Load {
            dst: p.get(dst),
            src: p.get(src),
        },
        GadgetClass::Store { dst, src } => GadgetClass::Store {
            dst: p.get(dst),
            src: p.get(src),
        },
        GadgetClass::CMov { cc, dst, src } => GadgetClass::CMov {
            cc,
            dst: p.get(dst),
            src: p.get(src),
        },
        GadgetClass::Mul(r) => GadgetClass::Mul(p.get(r)),
        GadgetClass::ShiftImm { op, reg, k } => GadgetClass::ShiftImm {
            op,
            reg: p.get(reg),
            k,
        },
    }
}

/// The physical class needed for `op` under `p`, if the library has it.
fn realization(op: &MicroOp, p: &Perm, lib: &GadgetLibrary) -> Option<GadgetClass> {
    let class = match op {
        MicroOp::LoadImm(r, _) | MicroOp::LoadLabel(r, _) => GadgetClass::Pop(p.get(*r)),
        MicroOp::Op(GadgetClass::Mul(src)) => {
            // mul addresses physical eax/edx by name; the virtual pair
            // must be home or the product lands on the wrong values.
            if p.get(Register::Eax) != Register::Eax || p.get(Register::Edx) != Register::Edx {
                return None;
            }
            GadgetClass::Mul(p.get(*src))
        }
        MicroOp::Op(c) => remap(*c, p),
    };
    lib.has(class).then_some(class)
}

/// Shortest xchg sequence from `from` to a state satisfying `goal`.
/// Deterministic: pairs expand in the library's sorted order.
fn search<F: Fn(&Perm) -> bool>(
    from: &Perm,
    pairs: &[(Register, Register)],
    goal: F,
    max_depth: usize,
) -> Option<Vec<(Register, Register)>> {
    if goal(from) {
        return Some(Vec::new());
    }
    let mut visited = std::collections::HashSet::new();
    visited.insert(*from);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((*from, Vec::new()));
    while let Some((perm, path)) = queue.pop_front() {
        if path.len() == max_depth {
            continue;
        }
        for &(a, b) in pairs {
            let mut next = perm;
            next.apply_xchg(a, b);
            if !visited.insert(next) {
                continue;
            }
            let mut next_path = path.clone();
            next_path.push((a, b));
            if goal(&next) {
                return Some(next_path);
            }
            queue.push_back((next, next_path));
        }
    }
    None
}

/// Uniformly draws one gadget instance of a class.
fn pick_gadget(lib: &GadgetLibrary, class: GadgetClass, rng: &mut Rng) -> Result<u32, RopcError> {
    let instances = lib.find(class);
    if instances.is_empty() {
        return Err(RopcError::NoGadget(format!("{class:?}")));
    }
    Ok(rng.pick(instances).vaddr)
}

/// Plans a chain realizing `ops` in order. Steps list gadget addresses and
/// data cells in execution order; exchange steps carry `exchange: true`
/// and no op index.
pub fn plan_chain(
    ops: &[Micro],
    lib: &GadgetLibrary,
    rng: &mut Rng,
) -> Result<Vec<PlanStep>, RopcError> {
    let pairs = lib.xchg_pairs();
    let mut perm = Perm::identity();
    let mut steps = Vec::new();

    let emit_exchanges =
        |path: Vec<(Register, Register)>,
         perm: &mut Perm,
         steps: &mut Vec<PlanStep>,
         rng: &mut Rng|
         -> Result<(), RopcError> {
            for (a, b) in path {
                let class = GadgetClass::Xchg(a, b).normalize();
                steps.push(PlanStep::Gadget {
                    class,
                    vaddr: pick_gadget(lib, class, rng)?,
                    op: None,
                    exchange: true,
                });
                perm.apply_xchg(a, b);
            }
            Ok(())
        };

    for (idx, micro) in ops.iter().enumerate() {
        if realization(&micro.op, &perm, lib).is_none() {
            let path = search(
                &perm,
                &pairs,
                |p| realization(&micro.op, p, lib).is_some(),
                MAX_EXCHANGES,
            )
            .ok_or_else(|| RopcError::NoGadget(format!("{:?}", micro.op)))?;
            emit_exchanges(path, &mut perm, &mut steps, rng)?;
        }
        let class = realization(&micro.op, &perm, lib).unwrap();
        steps.push(PlanStep::Gadget {
            class,
            vaddr: pick_gadget(lib, class, rng)?,
            op: Some(idx),
            exchange: false,
        });
        match &micro.op {
            MicroOp::LoadImm(_, v) => steps.push(PlanStep::ImmCell {
                value: *v,
                protectable: true,
                op: Some(idx),
            }),
            MicroOp::LoadLabel(_, l) => steps.push(PlanStep::LabelCell {
                label: l.clone(),
                op: Some(idx),
            }),
            MicroOp::Op(_) => {}
        }
    }

    if !perm.is_identity() {
        // Walking back is always possible (reverse the history), so a
        // bounded search over at most 6!-many states cannot fail.
        let path = search(&perm, &pairs, Perm::is_identity, 32)
            .expect("identity is reachable by reversing applied exchanges");
        emit_exchanges(path, &mut perm, &mut steps, rng)?;
    }

    Ok(steps)
}

/// Labels a conditional terminator jumps to: `taken` is the jcc target,
/// `fall` the layout successor (also the continuation label for call).
#[derive(Debug, Clone, Default)]
pub struct BranchTargets {
    pub taken: Option<String>,
    pub fall: Option<String>,
}

/// Lowers a terminator to trailing chain steps. ret ends the chain bare
/// (the final gadget's own ret pops the caller's address); jmp and call
/// append label cells; jcc appends the cmov selection pattern. The caller
/// is responsible for register liveness at the jcc (eax and ecx are
/// clobbered) and for flag preservation policy.
pub fn lower_branch(
    t: &Instruction,
    lib: &GadgetLibrary,
    targets: &BranchTargets,
    rng: &mut Rng,
) -> Result<Vec<PlanStep>, RopcError> {
    let label_cell = |l: &String| PlanStep::LabelCell {
        label: l.clone(),
        op: None,
    };
    match t.mnemonic {
        Mnemonic::Ret => Ok(Vec::new()),
        Mnemonic::Jmp => {
            let target = match t.operands.first() {
                Some(Operand::Label(l)) => l,
                _ => return Err(RopcError::NoGadget("jmp without label".into())),
            };
            Ok(vec![label_cell(target)])
        }
        Mnemonic::Call => {
            let callee = match t.operands.first() {
                Some(Operand::Label(l)) => l,
                _ => return Err(RopcError::NoGadget("call without label".into())),
            };
            let Some(cont) = &targets.fall else {
                return Err(RopcError::NoGadget("call without continuation".into()));
            };
            // The callee's own ret consumes the next cell, so the
            // continuation label rides directly above the callee cell.
            Ok(vec![label_cell(callee), label_cell(cont)])
        }
        Mnemonic::Jcc(cc) => {
            let (Some(taken), Some(fall)) = (&targets.taken, &targets.fall) else {
                return Err(RopcError::NoGadget("jcc without both targets".into()));
            };
            lower_jcc(cc, taken, fall, lib, rng)
        }
        _ => Err(RopcError::NoGadget("not a terminator".into())),
    }
}

fn lower_jcc(
    cc: Cc,
    taken: &str,
    fall: &str,
    lib: &GadgetLibrary,
    rng: &mut Rng,
) -> Result<Vec<PlanStep>, RopcError> {
    let (d, s) = (Register::Eax, Register::Ecx);
    let pop_d = GadgetClass::Pop(d);
    let pop_s = GadgetClass::Pop(s);
    let push_d = GadgetClass::PushReg(d);
    if !(lib.has(pop_d) && lib.has(pop_s) && lib.has(push_d)) {
        return Err(RopcError::NoGadget("branch pattern pops/push".into()));
    }

    // Either polarity works: cmov on cc picks the taken label out of ecx,
    // cmov on the negation picks the fallthrough out of ecx with the
    // labels swapped. Use whichever cmov the library has; coin-flip ties.
    let direct = GadgetClass::CMov { cc, dst: d, src: s };
    let negated = GadgetClass::CMov {
        cc: cc.negate(),
        dst: d,
        src: s,
    };
    let use_direct = match (lib.has(direct), lib.has(negated)) {
        (true, true) => rng.chance(1, 2),
        (true, false) => true,
        (false, true) => false,
        (false, false) => return Err(RopcError::NoGadget("branch pattern cmov".into())),
    };
    let (cmov, into_s, into_d) = if use_direct {
        (direct, taken, fall)
    } else {
        (negated, fall, taken)
    };

    let gadget = |class: GadgetClass, rng: &mut Rng| -> Result<PlanStep, RopcError> {
        Ok(PlanStep::Gadget {
            class,
            vaddr: pick_gadget(lib, class, rng)?,
            op: None,
            exchange: false,
        })
    };
    Ok(vec![
        gadget(pop_s, rng)?,
        PlanStep::LabelCell {
            label: into_s.into(),
            op: None,
        },
        gadget(pop_d, rng)?,
        PlanStep::LabelCell {
            label: into_d.into(),
            op: None,
        },
        gadget(cmov, rng)?,
        gadget(push_d, rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::ins;
    use crate::gadgets::{
        build_synthetic_library, fig3_library, load_library, standard_classes, BinOp,
    };

    fn lib_of(bytes: Vec<u8>) -> GadgetLibrary {
        load_library(&bytes).unwrap()
    }

    fn fig3_ops() -> Vec<Micro> {
        vec![
            Micro {
                op: MicroOp::LoadImm(Register::Ecx, 123),
                origin: 0,
            },
            Micro {
                op: MicroOp::Op(GadgetClass::BinRR {
                    op: BinOp::Add,
                    dst: Register::Edx,
                    src: Register::Ecx,
                }),
                origin: 0,
            },
        ]
    }

    #[test]
    fn missing_add_edx_relocates_through_xchg_and_restores() {
        let lib = lib_of(fig3_library());
        let mut rng = Rng::seeded(5);
        let steps = plan_chain(&fig3_ops(), &lib, &mut rng).unwrap();
        let classes: Vec<Option<GadgetClass>> = steps
            .iter()
            .map(|s| match s {
                PlanStep::Gadget { class, .. } => Some(*class),
                _ => None,
            })
            .collect();
        assert_eq!(
            classes,
            vec![
                Some(GadgetClass::Pop(Register::Ecx)),
                None, // the 123 cell
                Some(GadgetClass::Xchg(Register::Eax, Register::Edx)),
                Some(GadgetClass::BinRR {
                    op: BinOp::Add,
                    dst: Register::Eax,
                    src: Register::Ecx
                }),
                Some(GadgetClass::Xchg(Register::Eax, Register::Edx)),
            ]
        );
        assert!(matches!(
            steps[1],
            PlanStep::ImmCell {
                value: 123,
                protectable: true,
                ..
            }
        ));
        // Flanking exchanges carry no op; the add realizes op index 1.
        assert!(matches!(steps[2], PlanStep::Gadget { exchange: true, op: None, .. }));
        assert!(matches!(steps[3], PlanStep::Gadget { exchange: false, op: Some(1), .. }));
    }

    #[test]
    fn direct_gadget_needs_no_exchanges() {
        let lib = lib_of(build_synthetic_library(&standard_classes(), &mut Rng::seeded(2)));
        let ops = vec![Micro {
            op: MicroOp::Op(GadgetClass::MovRR {
                dst: Register::Eax,
                src: Register::Ebx,
            }),
            origin: 0,
        }];
        let mut rng = Rng::seeded(1);
        let steps = plan_chain(&ops, &lib, &mut rng).unwrap();
        assert_eq!(steps.len(), 1);
        assert!(matches!(
            steps[0],
            PlanStep::Gadget {
                class: GadgetClass::MovRR { .. },
                exchange: false,
                ..
            }
        ));
    }

    #[test]
    fn no_add_gadget_at_all_reports_no_gadget() {
        let classes: Vec<GadgetClass> = standard_classes()
            .into_iter()
            .filter(|c| !matches!(c, GadgetClass::BinRR { op: BinOp::Add, .. }))
            .collect();
        let lib = lib_of(build_synthetic_library(&classes, &mut Rng::seeded(2)));
        let mut rng = Rng::seeded(1);
        assert!(matches!(
            plan_chain(&fig3_ops(), &lib, &mut rng),
            Err(RopcError::NoGadget(_))
        ));
    }

    #[test]
    fn mul_pins_its_implicit_registers() {
        // Library whose mul exists but whose add-into-eax forces a swap
        // displacing eax; a following mul must swap back first.
        let lib = lib_of(build_synthetic_library(&standard_classes(), &mut Rng::seeded(2)));
        let ops = vec![
            Micro {
                op: MicroOp::Op(GadgetClass::BinRR {
                    op: BinOp::Add,
                    dst: Register::Ebx,
                    src: Register::Ecx,
                }),
                origin: 0,
            },
            Micro {
                op: MicroOp::Op(GadgetClass::Mul(Register::Ebx)),
                origin: 1,
            },
        ];
        let mut rng = Rng::seeded(3);
        let steps = plan_chain(&ops, &lib, &mut rng).unwrap();
        // Wherever the add relocated ebx, the mul step itself must run
        // with eax and edx home: its class reads the permuted source.
        let mut perm = Perm::identity();
        for s in &steps {
            if let PlanStep::Gadget { class, exchange, .. } = s {
                if *exchange {
                    let GadgetClass::Xchg(a, b) = class else { panic!() };
                    perm.apply_xchg(*a, *b);
                } else if let GadgetClass::Mul(_) = class {
                    assert_eq!(perm.get(Register::Eax), Register::Eax);
                    assert_eq!(perm.get(Register::Edx), Register::Edx);
                }
            }
        }
        assert!(perm.is_identity(), "chain must restore the binding");
    }

    #[test]
    fn every_plan_restores_identity() {
        let lib = lib_of(build_synthetic_library(&standard_classes(), &mut Rng::seeded(2)));
        let mut rng = Rng::seeded(11);
        for seed in 0..50u64 {
            let mut op_rng = Rng::seeded(seed);
            let regs = [
                Register::Eax,
                Register::Ecx,
                Register::Edx,
                Register::Ebx,
                Register::Esi,
                Register::Edi,
            ];
            let ops: Vec<Micro> = (0..(1 + op_rng.below(6) as usize))
                .map(|k| {
                    let dst = *op_rng.pick(&regs);
                    let src = *op_rng.pick(&regs);
                    let op = match op_rng.below(3) {
                        0 => MicroOp::LoadImm(dst, op_rng.next_u32()),
                        1 => MicroOp::Op(GadgetClass::MovRR { dst, src }),
                        _ => MicroOp::Op(GadgetClass::BinRR {
                            op: BinOp::Add,
                            dst,
                            src,
                        }),
                    };
                    Micro { op, origin: k }
                })
                .collect();
            let Ok(steps) = plan_chain(&ops, &lib, &mut rng) else {
                continue;
            };
            let mut perm = Perm::identity();
            for s in &steps {
                if let PlanStep::Gadget {
                    class: GadgetClass::Xchg(a, b),
                    exchange: true,
                    ..
                } = s
                {
                    perm.apply_xchg(*a, *b);
                }
            }
            assert!(perm.is_identity());
        }
    }

    #[test]
    fn jcc_lowering_emits_the_cmov_selection_pattern() {
        let lib = lib_of(build_synthetic_library(&standard_classes(), &mut Rng::seeded(2)));
        let mut rng = Rng::seeded(4);
        let t = ins::jcc(Cc::E, "L3");
        let targets = BranchTargets {
            taken: Some("L3".into()),
            fall: Some("L2".into()),
        };
        let steps = lower_branch(&t, &lib, &targets, &mut rng).unwrap();
        assert_eq!(steps.len(), 6);
        let PlanStep::Gadget { class: GadgetClass::Pop(Register::Ecx), .. } = steps[0] else {
            panic!("expected pop ecx first, got {:?}", steps[0]);
        };
        let PlanStep::LabelCell { label: ref into_ecx, .. } = steps[1] else { panic!() };
        let PlanStep::Gadget { class: GadgetClass::Pop(Register::Eax), .. } = steps[2] else {
            panic!("expected pop eax, got {:?}", steps[2]);
        };
        let PlanStep::LabelCell { label: ref into_eax, .. } = steps[3] else { panic!() };
        let PlanStep::Gadget { class: GadgetClass::CMov { cc, dst: Register::Eax, src: Register::Ecx }, .. } = steps[4] else {
            panic!("expected cmov, got {:?}", steps[4]);
        };
        assert!(matches!(
            steps[5],
            PlanStep::Gadget {
                class: GadgetClass::PushReg(Register::Eax),
                ..
            }
        ));
        // Polarity and labels agree: on cc=E ecx holds the taken target,
        // on the negation the labels swap.
        match cc {
            Cc::E => {
                assert_eq!(into_ecx, "L3");
                assert_eq!(into_eax, "L2");
            }
            Cc::Ne => {
                assert_eq!(into_ecx, "L2");
                assert_eq!(into_eax, "L3");
            }
            other => panic!("unexpected polarity {other:?}"),
        }
    }

    #[test]
    fn call_appends_callee_then_continuation() {
        let lib = lib_of(fig3_library());
        let mut rng = Rng::seeded(1);
        let t = ins::call("puts");
        let targets = BranchTargets {
            taken: None,
            fall: Some(".Lmain.1".into()),
        };
        let steps = lower_branch(&t, &lib, &targets, &mut rng).unwrap();
        assert_eq!(
            steps,
            vec![
                PlanStep::LabelCell {
                    label: "puts".into(),
                    op: None
                },
                PlanStep::LabelCell {
                    label: ".Lmain.1".into(),
                    op: None
                },
            ]
        );
    }
}

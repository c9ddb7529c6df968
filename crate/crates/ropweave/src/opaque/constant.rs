//! Opaque constants and generator protection.
//!
//! An opaque constant computes a 32-bit value by concatenating the output
//! bits of 32 predicates (MSB first) into ecx and XOR-ing a fixed mask. A
//! protected generator replaces every literal push of a gadget address or a
//! protectable immediate with such a computation, saving eax/ecx/edx (and
//! optionally flags) in stack slots parked below the chain's lowest cell.

use crate::asm::{ins, Instruction, MemRef, Mnemonic, Operand, Register};
use crate::rng::Rng;

use super::predicate::{gen_predicate, PredicateConfig, PredicateInstance, SAT_SLOT_DISP};

/// 32 predicates plus a mask computing `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpaqueConstant {
    pub target: u32,
    /// Exactly 32 instances; predicates[0] contributes the MSB.
    pub predicates: Vec<PredicateInstance>,
    pub xor_mask: u32,
    pub accumulator: Register,
}

impl OpaqueConstant {
    /// The value the predicate bits reconstruct before the mask: must equal
    /// `target ^ xor_mask` by construction.
    pub fn accumulated_bits(&self) -> u32 {
        self.predicates
            .iter()
            .fold(0u32, |acc, p| acc << 1 | p.output_bit as u32)
    }
}

/// Draws a mask and 32 predicates whose bits reconstruct `target`.
pub fn build_opaque_constant(
    target: u32,
    cfg: &PredicateConfig,
    rng: &mut Rng,
) -> OpaqueConstant {
    let xor_mask = rng.next_u32();
    let desired = target ^ xor_mask;
    let predicates = (0..32)
        .map(|i| gen_predicate((desired >> (31 - i) & 1) as u8, cfg, rng))
        .collect();
    OpaqueConstant {
        target,
        predicates,
        xor_mask,
        accumulator: Register::Ecx,
    }
}

/// Geometry of a protected generator's save region: `n` chain cells occupy
/// `[entry-4n, entry)`, the saves sit in push order (flags first when
/// present, then eax/ecx/edx) directly below, and transient scratch slots
/// (three-sat input word, dummy targets) sit below the saves.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SlotCtx {
    pub n: usize,
    pub save_flags: bool,
}

impl SlotCtx {
    pub fn save_count(self) -> usize {
        3 + self.save_flags as usize
    }

    /// esp-relative displacement of `r`'s save slot once `j` cells are pushed.
    pub fn reg_slot_disp(self, r: Register, j: usize) -> i32 {
        let rank = match r {
            Register::Eax => 0,
            Register::Ecx => 1,
            Register::Edx => 2,
            _ => unreachable!("only eax/ecx/edx are saved"),
        };
        let i = rank + self.save_flags as usize;
        -(4 * (self.n - j) as i32 + 4 * (i as i32 + 1))
    }

    /// esp-relative displacement of scratch slot `m >= 1` below the saves.
    pub fn scratch_disp(self, j: usize, m: usize) -> i32 {
        -(4 * (self.n - j) as i32 + 4 * self.save_count() as i32 + 4 * m as i32)
    }
}

/// What goes into one predicate insertion point of a protected generator.
#[derive(Debug, Clone)]
pub(crate) enum PointFill {
    /// A hidden chain instruction, embedded verbatim except that operands in
    /// {eax, ecx, edx} are swapped through their save slots so the effect
    /// lands in the restored registers, not the predicate's live ones.
    Hidden(Instruction),
    /// Flag-safe filler: `add dword [esp-K], imm` against dead scratch.
    Dummy,
}

/// One push cell of a ROP-chain generator, in push order.
#[derive(Debug, Clone, PartialEq, Eq)]
enum PushCell {
    Sym { symbol: String, offset: i32 },
    Imm(u32),
    Label(String),
}

/// Parses an unprotected generator (optional flag wrap, pushes, ret) into
/// its cells. All immediate cells in emitted chains are pop-gadget operands
/// and therefore protectable.
fn parse_generator(gen: &[Instruction]) -> (Vec<PushCell>, bool) {
    let mut cells = Vec::new();
    let mut save_flags = false;
    for i in gen {
        match i.mnemonic {
            Mnemonic::Pushf => save_flags = true,
            Mnemonic::Push => cells.push(match &i.operands[0] {
                Operand::SymOff { symbol, offset } => PushCell::Sym {
                    symbol: symbol.clone(),
                    offset: *offset,
                },
                Operand::Imm(v) => PushCell::Imm(*v as u32),
                Operand::Label(l) => PushCell::Label(l.clone()),
                other => unreachable!("generators never push {other:?}"),
            }),
            _ => {}
        }
    }
    (cells, save_flags)
}

/// Insertion points per protected cell: 32 predicates, 3 points apiece.
pub(crate) const POINTS_PER_CONSTANT: usize = 32 * 3;

/// Rewrites a generator so every gadget-address and immediate push is
/// computed by an opaque constant. Label pushes stay literal; a generator
/// with nothing to protect is returned unchanged.
pub fn protect_generator(
    gen: &[Instruction],
    cfg: &PredicateConfig,
    rng: &mut Rng,
) -> Vec<Instruction> {
    protect_generator_filled(gen, cfg, rng, None)
}

/// Protection core. `fills`, when present, must hold one entry per
/// insertion point (protectable cells times `POINTS_PER_CONSTANT`); when
/// absent the points are left empty.
pub(crate) fn protect_generator_filled(
    gen: &[Instruction],
    cfg: &PredicateConfig,
    rng: &mut Rng,
    fills: Option<&[PointFill]>,
) -> Vec<Instruction> {
    let (cells, save_flags) = parse_generator(gen);
    let protectable = cells
        .iter()
        .filter(|c| !matches!(c, PushCell::Label(_)))
        .count();
    if protectable == 0 {
        return gen.to_vec();
    }
    if let Some(f) = fills {
        assert_eq!(f.len(), protectable * POINTS_PER_CONSTANT, "one fill per point");
    }

    let n = cells.len();
    let ctx = SlotCtx { n, save_flags };
    let s = ctx.save_count() as i32;
    let esp = Register::Esp;
    let mut out = Vec::new();

    out.push(ins::lea(esp, MemRef::base_disp(esp, -(4 * n as i32))));
    if save_flags {
        out.push(ins::pushf());
    }
    for r in [Register::Eax, Register::Ecx, Register::Edx] {
        out.push(ins::push_r(r));
    }
    out.push(ins::lea(esp, MemRef::base_disp(esp, 4 * n as i32 + 4 * s)));

    let mut next_point = 0usize;
    for (j, cell) in cells.iter().enumerate() {
        let (target, anchor) = match cell {
            PushCell::Label(l) => {
                out.push(ins::push_label(l));
                continue;
            }
            PushCell::Sym { symbol, offset } => (*offset as u32, Some(symbol.as_str())),
            PushCell::Imm(v) => (*v, None),
        };
        let oc = build_opaque_constant(target, cfg, rng);
        append_constant(
            &mut out,
            &oc,
            anchor,
            Some((ctx, j)),
            fills,
            &mut next_point,
            rng,
        );
        out.push(ins::push_r(Register::Eax));
    }

    out.push(ins::lea(esp, MemRef::base_disp(esp, -4 * s)));
    for r in [Register::Edx, Register::Ecx, Register::Eax] {
        out.push(ins::pop_r(r));
    }
    if save_flags {
        out.push(ins::popf());
    }
    out.push(ins::ret());
    out
}

/// Emits a self-contained opaque-constant sequence whose net effect is to
/// push the computed value: registers and flags are saved around the bodies
/// and the final `xchg eax, [esp]` swaps the value into the pushed slot.
pub fn emit_opaque_constant(oc: &OpaqueConstant, anchor_symbol: Option<&str>) -> Vec<Instruction> {
    let mut out = Vec::new();
    for r in [Register::Eax, Register::Ecx, Register::Edx] {
        out.push(ins::push_r(r));
    }
    out.push(ins::pushf());
    let mut next_point = 0usize;
    append_constant(&mut out, oc, anchor_symbol, None, None, &mut next_point, &mut Rng::seeded(0));
    out.push(ins::popf());
    out.push(ins::pop_r(Register::Edx));
    out.push(ins::pop_r(Register::Ecx));
    out.push(ins::xchg_mr(
        MemRef::base(Register::Esp),
        Register::Eax,
    ));
    out
}

/// Appends the 32 predicate bodies and masking tail of `oc`; the computed
/// value is left in eax. In-generator contexts pass `(SlotCtx, j)` so
/// three-sat scratch displacements track the current push depth, and
/// `fills` to occupy the insertion points.
fn append_constant(
    out: &mut Vec<Instruction>,
    oc: &OpaqueConstant,
    anchor: Option<&str>,
    slot_ctx: Option<(SlotCtx, usize)>,
    fills: Option<&[PointFill]>,
    next_point: &mut usize,
    rng: &mut Rng,
) {
    for p in &oc.predicates {
        let mut points = p.insertion_points.iter().peekable();
        for (idx, instr) in p.body.iter().enumerate() {
            while points.peek() == Some(&&idx) {
                points.next();
                fill_point(out, slot_ctx, fills, next_point, rng);
            }
            out.push(rewrite_sat_slot(instr, slot_ctx));
        }
        for _ in points {
            fill_point(out, slot_ctx, fills, next_point, rng);
        }
    }
    out.push(ins::mov_rr(Register::Eax, Register::Ecx));
    out.push(ins::alu_ri(Mnemonic::Xor, Register::Eax, oc.xor_mask));
    if let Some(sym) = anchor {
        out.push(Instruction::new(
            Mnemonic::Add,
            vec![
                Operand::Reg(Register::Eax),
                Operand::SymOff {
                    symbol: sym.to_string(),
                    offset: 0,
                },
            ],
        ));
    }
}

/// Moves the fixed three-sat scratch slot below the generator's save region.
fn rewrite_sat_slot(instr: &Instruction, slot_ctx: Option<(SlotCtx, usize)>) -> Instruction {
    let Some((ctx, j)) = slot_ctx else {
        return instr.clone();
    };
    let mut i = instr.clone();
    for op in &mut i.operands {
        if let Operand::Mem(m) = op {
            if m.base == Some(Register::Esp) && m.disp == SAT_SLOT_DISP {
                m.disp = ctx.scratch_disp(j, 1);
            }
        }
    }
    i
}

fn fill_point(
    out: &mut Vec<Instruction>,
    slot_ctx: Option<(SlotCtx, usize)>,
    fills: Option<&[PointFill]>,
    next_point: &mut usize,
    rng: &mut Rng,
) {
    let Some(fills) = fills else {
        *next_point += 1;
        return;
    };
    let fill = fills[*next_point].clone();
    *next_point += 1;
    let (ctx, j) = slot_ctx.expect("fills require generator slot context");
    match fill {
        PointFill::Dummy => {
            let m = 3 + rng.below(6) as usize;
            let slot = MemRef::base_disp(Register::Esp, ctx.scratch_disp(j, m));
            out.push(ins::alu_mi(Mnemonic::Add, slot, rng.next_u32()));
        }
        PointFill::Hidden(instr) => {
            let mut swapped: Vec<Register> = Vec::new();
            for op in &instr.operands {
                if let Operand::Reg(r) = op {
                    if matches!(r, Register::Eax | Register::Ecx | Register::Edx)
                        && !swapped.contains(r)
                    {
                        swapped.push(*r);
                    }
                }
            }
            for &r in &swapped {
                out.push(ins::xchg_mr(
                    MemRef::base_disp(Register::Esp, ctx.reg_slot_disp(r, j)),
                    r,
                ));
            }
            out.push(instr);
            for &r in swapped.iter().rev() {
                out.push(ins::xchg_mr(
                    MemRef::base_disp(Register::Esp, ctx.reg_slot_disp(r, j)),
                    r,
                ));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::predicate::{InputSource, PredicateMode};
    use super::super::testutil::{run_generator, run_oc_value, standard_test_lib};
    use super::super::PredicateAlgorithm;
    use super::*;
    use crate::asm::Register as R;

    fn fact_cfg(mode: PredicateMode) -> PredicateConfig {
        PredicateConfig::new(mode, PredicateAlgorithm::Factorization)
    }

    #[test]
    fn constant_bits_reconstruct_the_target() {
        let mut rng = Rng::seeded(21);
        for _ in 0..50 {
            let target = rng.next_u32();
            let oc = build_opaque_constant(target, &fact_cfg(PredicateMode::Basic), &mut rng);
            assert_eq!(oc.predicates.len(), 32);
            assert_eq!(oc.accumulated_bits() ^ oc.xor_mask, target);
        }
    }

    #[test]
    fn emitted_constants_evaluate_to_their_target() {
        let mut rng = Rng::seeded(22);
        for &target in &[0x7abu32, 0, u32::MAX, 0x8000_0001] {
            let oc = build_opaque_constant(target, &fact_cfg(PredicateMode::Basic), &mut rng);
            let seq = emit_opaque_constant(&oc, None);
            let (value, transparent) = run_oc_value(&seq, &mut rng);
            assert_eq!(value, target);
            assert!(transparent, "registers or flags leaked from the sequence");
        }
        for _ in 0..30 {
            let target = rng.next_u32();
            let oc = build_opaque_constant(target, &fact_cfg(PredicateMode::Dse), &mut rng);
            let (value, transparent) = run_oc_value(&emit_opaque_constant(&oc, None), &mut rng);
            assert_eq!(value, target);
            assert!(transparent);
        }
    }

    #[test]
    fn three_sat_constants_evaluate_standalone() {
        let mut rng = Rng::seeded(23);
        let cfg = PredicateConfig::new(PredicateMode::Basic, PredicateAlgorithm::ThreeSat);
        let target = 0xc0de_f00d;
        let oc = build_opaque_constant(target, &cfg, &mut rng);
        let (value, transparent) = run_oc_value(&emit_opaque_constant(&oc, None), &mut rng);
        assert_eq!(value, target);
        assert!(transparent);
    }

    #[test]
    fn anchored_constant_resolves_against_the_library_symbol() {
        let mut rng = Rng::seeded(24);
        let oc = build_opaque_constant(0x500, &fact_cfg(PredicateMode::Basic), &mut rng);
        let seq = emit_opaque_constant(&oc, Some("atoi"));
        let tail: Vec<String> = seq
            .iter()
            .map(crate::asm::print_instruction)
            .filter(|t| t.starts_with("add eax"))
            .collect();
        assert_eq!(tail, ["add eax, atoi+0x0"]);
        let (value, lib_atoi) = super::super::testutil::run_oc_anchored(&seq, &mut rng);
        assert_eq!(value, lib_atoi.wrapping_add(0x500));
    }

    #[test]
    fn dse_constants_mix_in_runtime_inputs_and_basic_never_does() {
        for seed in 0..100 {
            let mut rng = Rng::seeded(seed);
            let oc = build_opaque_constant(seed as u32, &fact_cfg(PredicateMode::Dse), &mut rng);
            assert!(
                oc.predicates
                    .iter()
                    .any(|p| matches!(p.input_source, InputSource::RuntimeRegs { .. })),
                "seed {seed}: no runtime-input instance"
            );
            let mut rng = Rng::seeded(seed);
            let oc = build_opaque_constant(seed as u32, &fact_cfg(PredicateMode::Basic), &mut rng);
            assert!(!oc
                .predicates
                .iter()
                .any(|p| matches!(p.input_source, InputSource::RuntimeRegs { .. })));
        }
    }

    /// The documented worked-example generator: chain cells in push order.
    fn roponly_generator() -> Vec<Instruction> {
        vec![
            ins::push_symoff("atoi", 0x500),
            ins::push_symoff("atoi", 0x7ab),
            ins::push_symoff("puts", -0x300),
            ins::push_imm(123),
            ins::push_symoff("atoi", 0x145),
            ins::ret(),
        ]
    }

    #[test]
    fn protection_rewrites_every_protectable_push() {
        let mut rng = Rng::seeded(25);
        let gen = roponly_generator();
        let out = protect_generator(&gen, &fact_cfg(PredicateMode::Basic), &mut rng);
        let text: Vec<String> = out.iter().map(crate::asm::print_instruction).collect();
        // No literal gadget address or immediate survives.
        assert!(!text.iter().any(|t| t.starts_with("push atoi")
            || t.starts_with("push puts")
            || *t == "push 123"));
        // One value push per original cell plus the prologue save.
        assert_eq!(text.iter().filter(|t| *t == "push eax").count(), 6);
        // Saves: no flag wrap in the input, so eax/ecx/edx only.
        assert_eq!(text[0], "lea esp, DWORD PTR [esp-0x14]");
        assert_eq!(text[1], "push eax");
        assert_eq!(text[4], "lea esp, DWORD PTR [esp+0x20]");
        assert_eq!(text[text.len() - 5], "lea esp, DWORD PTR [esp-0xc]");
        assert_eq!(text[text.len() - 1], "ret");
    }

    #[test]
    fn label_only_generators_are_left_alone() {
        let mut rng = Rng::seeded(26);
        let gen = vec![
            ins::push_label(".Lmain.g1"),
            ins::push_label("helper"),
            ins::ret(),
        ];
        let out = protect_generator(&gen, &fact_cfg(PredicateMode::Basic), &mut rng);
        assert_eq!(out, gen);
        let bare = vec![ins::ret()];
        assert_eq!(
            protect_generator(&bare, &fact_cfg(PredicateMode::Basic), &mut rng),
            bare
        );
    }

    #[test]
    fn protected_worked_example_chain_runs_identically() {
        let mut rng = Rng::seeded(27);
        let lib = standard_test_lib();
        let gen = roponly_generator();
        let baseline = run_generator(&gen, &lib, 5);
        let protected = protect_generator(&gen, &fact_cfg(PredicateMode::Dse), &mut rng);
        let states = run_generator(&protected, &lib, 5);
        assert_eq!(baseline.reg(R::Edx), 5 + 123);
        for r in [R::Eax, R::Ecx, R::Edx, R::Ebx, R::Esi, R::Edi] {
            assert_eq!(baseline.reg(r), states.reg(r), "{r:?} diverged");
        }
    }

    fn count_protectable(gen: &[Instruction]) -> usize {
        gen.iter()
            .filter(|i| {
                i.mnemonic == Mnemonic::Push && !matches!(i.operands[0], Operand::Label(_))
            })
            .count()
    }

    #[test]
    fn hidden_fills_swap_through_save_slots_and_dummies_fill_the_rest() {
        let mut rng = Rng::seeded(28);
        let lib = standard_test_lib();
        let gen = roponly_generator();
        let total = count_protectable(&gen) * POINTS_PER_CONSTANT;
        assert_eq!(total, 480);
        let mut fills = vec![PointFill::Dummy; total];
        fills[100] = PointFill::Hidden(ins::mov_ri(R::Eax, 0xdead_0001));
        let out = protect_generator_filled(
            &gen,
            &fact_cfg(PredicateMode::Basic),
            &mut rng,
            Some(&fills),
        );
        let text: Vec<String> = out.iter().map(crate::asm::print_instruction).collect();
        let mov_at = text
            .iter()
            .position(|t| t == "mov eax, 0xdead0001")
            .expect("hidden instruction embedded");
        assert!(text[mov_at - 1].starts_with("xchg DWORD PTR [esp-"));
        assert_eq!(text[mov_at - 1], text[mov_at + 1]);
        assert_eq!(
            text.iter()
                .filter(|t| t.starts_with("add DWORD PTR [esp-"))
                .count(),
            total - 1
        );
        // The swapped slot materializes at restore time: eax enters the
        // chain holding the hidden value, and the chain preserves it.
        let st = run_generator(&out, &lib, 5);
        assert_eq!(st.reg(R::Eax), 0xdead_0001);
        assert_eq!(st.reg(R::Edx), 5 + 123);
    }

    #[test]
    fn sat_scratch_slots_move_below_the_save_region() {
        let mut rng = Rng::seeded(29);
        let cfg = PredicateConfig::new(PredicateMode::Basic, PredicateAlgorithm::ThreeSat);
        let gen = vec![ins::push_imm(7), ins::ret()];
        let out = protect_generator(&gen, &cfg, &mut rng);
        // n = 1 cell, no flags: saves at [esp-0x8..esp-0x10] before the
        // push, sat slot m=1 at -(4*1 + 12 + 4) = -0x14.
        assert!(out.iter().any(|i| {
            i.operands.iter().any(|o| matches!(
                o,
                Operand::Mem(m) if m.base == Some(R::Esp) && m.disp == -0x14
            ))
        }));
        assert!(!out.iter().any(|i| {
            i.operands.iter().any(|o| matches!(
                o,
                Operand::Mem(m) if m.disp == SAT_SLOT_DISP
            ))
        }));
    }
}

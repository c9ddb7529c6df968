//! Trace-based chain recovery: replay a recorded execution and treat every
//! `ret` that lands in the gadget library as the dispatch of one chain
//! cell. Pop-gadget operands are read off the traced stack, branch-select
//! plumbing is recognized and dropped, and calls into extern entry points
//! are re-emitted so the listing reassembles into a straight-line program
//! equivalent to the traced run. Generator and predicate instructions
//! execute in program text, never through a library ret, so they are
//! invisible here; that blindness is exactly what instruction hiding
//! exploits, and it makes the recovered set of a hidden build fall short
//! of the plain build by precisely the hidden micro-ops.

use std::collections::BTreeMap;

use super::{Provenance, RecoveredInstruction, RecoveredListing};
use crate::asm::{ins, BasicBlock, Function, Instruction, Mnemonic, Register};
use crate::emu::{Layout, TraceEvent};
use crate::gadgets::{GadgetClass, GadgetLibrary};

/// One `ret` into mapped library code (a gadget about to run) or into an
/// extern entry point (a call leaving the traced program).
struct Dispatch {
    kind: Kind,
    /// For pop gadgets, the operand value the traced pop consumed.
    value: Option<u32>,
}

enum Kind {
    Gadget(GadgetClass, u32),
    Extern(String),
    /// Library address that is not a gadget start; nothing to decode.
    Opaque,
}

/// Recovers the chain instructions a traced run dispatched. The listing's
/// `function` is the run re-linearized: branches are already decided by
/// the trace, callee chains appear inline, and extern calls become real
/// call terminators, so running it on the traced input reproduces the
/// traced behavior whenever the build left no instruction out of chains.
pub fn dynamic_rop_recover(
    trace: &[TraceEvent],
    lib: &GadgetLibrary,
    layout: &Layout,
) -> RecoveredListing {
    let dispatches = collect_dispatches(trace, lib, layout);
    let mut out = RecoveredListing::default();
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut label = "main".to_string();
    let mut body: Vec<Instruction> = Vec::new();
    let mut fresh = 0usize;

    let mut j = 0;
    while j < dispatches.len() {
        if is_branch_select(&dispatches[j..], layout) {
            // Four dispatch cells plus the two target cells the pops ate,
            // all of it control plumbing the trace already resolved.
            out.total_cells += 6;
            out.resolved_cells += 6;
            j += 4;
            continue;
        }
        let d = &dispatches[j];
        out.total_cells += 1;
        match &d.kind {
            Kind::Gadget(GadgetClass::Pop(r), _) => {
                out.total_cells += 1;
                match d.value {
                    Some(v) => {
                        out.resolved_cells += 2;
                        let instr = pop_operand(*r, v, layout);
                        body.push(instr.clone());
                        out.instructions.push(RecoveredInstruction {
                            instr,
                            provenance: Provenance::FromImmediate,
                        });
                    }
                    // Truncated trace: the dispatch is visible but the
                    // operand never got popped.
                    None => mark_unknown(&mut out, j),
                }
            }
            Kind::Gadget(class, vaddr) => {
                out.resolved_cells += 1;
                let instr = class.instruction();
                body.push(instr.clone());
                out.instructions.push(RecoveredInstruction {
                    instr,
                    provenance: Provenance::FromGadget(*vaddr),
                });
            }
            Kind::Extern(name) => {
                // The callee cell plus the continuation cell its return
                // consumed.
                out.total_cells += 1;
                out.resolved_cells += 2;
                blocks.push(BasicBlock {
                    label: std::mem::replace(&mut label, format!(".Ldyn.{fresh}")),
                    instructions: std::mem::take(&mut body),
                    terminator: ins::call(name),
                });
                fresh += 1;
            }
            Kind::Opaque => mark_unknown(&mut out, j),
        }
        j += 1;
    }

    blocks.push(BasicBlock {
        label,
        instructions: body,
        terminator: ins::ret(),
    });
    out.function = Some(Function {
        name: "main".into(),
        blocks,
    });
    out
}

fn collect_dispatches(
    trace: &[TraceEvent],
    lib: &GadgetLibrary,
    layout: &Layout,
) -> Vec<Dispatch> {
    let extern_names: BTreeMap<u32, &str> = layout
        .externs
        .iter()
        .map(|(name, &addr)| (addr, name.as_str()))
        .collect();
    let mut out = Vec::new();
    for (i, e) in trace.iter().enumerate() {
        if e.instruction.mnemonic != Mnemonic::Ret {
            continue;
        }
        let Some(t) = e.value_popped else { continue };
        if layout.in_library(t) {
            let nominal = t.wrapping_sub(layout.lib_delta);
            match lib.class_at(nominal) {
                Some(class) => {
                    let value = matches!(class, GadgetClass::Pop(_))
                        .then(|| {
                            trace[i + 1..]
                                .iter()
                                .find(|f| f.pc == t)
                                .and_then(|f| f.value_popped)
                        })
                        .flatten();
                    out.push(Dispatch {
                        kind: Kind::Gadget(class, nominal),
                        value,
                    });
                }
                None => out.push(Dispatch {
                    kind: Kind::Opaque,
                    value: None,
                }),
            }
        } else if let Some(name) = extern_names.get(&t) {
            out.push(Dispatch {
                kind: Kind::Extern((*name).to_string()),
                value: None,
            });
        }
    }
    out
}

/// The conditional-branch tail: two pops that load code addresses, the
/// cmov that selects between them, and the push feeding the selected
/// address back to a ret. Requiring the full shape keeps data-flow cmovs
/// (and any pop of an ordinary constant) out of it.
fn is_branch_select(ds: &[Dispatch], layout: &Layout) -> bool {
    let text_value = |d: &Dispatch| {
        d.value
            .is_some_and(|v| v >= layout.program_base && v < layout.data_base)
    };
    let [a, b, c, d] = match ds {
        [a, b, c, d, ..] => [a, b, c, d],
        _ => return false,
    };
    let (Kind::Gadget(GadgetClass::Pop(sel_src), _), Kind::Gadget(GadgetClass::Pop(sel_dst), _)) =
        (&a.kind, &b.kind)
    else {
        return false;
    };
    if !(text_value(a) && text_value(b)) {
        return false;
    }
    let cmov_matches = matches!(
        &c.kind,
        Kind::Gadget(GadgetClass::CMov { dst, src, .. }, _) if dst == sel_dst && src == sel_src
    );
    cmov_matches
        && matches!(&d.kind, Kind::Gadget(GadgetClass::PushReg(r), _) if r == sel_dst)
}

/// A popped operand reads back as the load it realized. Data addresses
/// turn back into their symbol so the text matches what the plan hid.
fn pop_operand(r: Register, v: u32, layout: &Layout) -> Instruction {
    if v >= layout.data_base {
        if let Some((name, _)) = layout.symbols.iter().find(|(_, &a)| a == v) {
            return ins::mov_r_label(r, name);
        }
    }
    ins::mov_ri(r, v)
}

fn mark_unknown(out: &mut RecoveredListing, at: usize) {
    match out.unknown_regions.last_mut() {
        Some((_, e)) if *e == at => *e = at + 1,
        _ => out.unknown_regions.push((at, at + 1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;
    use crate::emu::{differential_run, load_process, run};
    use crate::gadgets::{build_synthetic_library, load_library, standard_classes};
    use crate::ropc::{obfuscate_program, Level, ObfuscationConfig};
    use crate::rng::Rng;
    use std::collections::BTreeSet;

    fn standard_lib() -> GadgetLibrary {
        load_library(&build_synthetic_library(&standard_classes(), &mut Rng::seeded(2))).unwrap()
    }

    fn toy_layout(lib: &GadgetLibrary) -> Layout {
        let lo = lib
            .image
            .exec_segments
            .iter()
            .map(|s| s.vaddr)
            .min()
            .unwrap();
        let hi = lib
            .image
            .exec_segments
            .iter()
            .map(|s| s.vaddr + s.bytes.len() as u32)
            .max()
            .unwrap();
        Layout {
            program_base: 0x0804_8000,
            data_base: 0x0810_0000,
            library_base: lo,
            lib_delta: 0,
            lib_ranges: vec![(lo, hi)],
            stack_top: 0xbfff_0000,
            stack_low: 0xbfe0_0000,
            input_buffer: 0xb000_0000,
            entry: 0x0804_8000,
            symbols: BTreeMap::new(),
            externs: BTreeMap::new(),
        }
    }

    fn ev(pc: u32, instruction: Instruction, value_popped: Option<u32>) -> TraceEvent {
        TraceEvent {
            step: 0,
            pc,
            instruction,
            esp_before: 0,
            value_popped,
        }
    }

    /// A compare rung dispatched gadget by gadget reads back as the
    /// exchange-wrapped compare it implements.
    #[test]
    fn compare_rung_dispatches_read_back_in_order() {
        use crate::gadgets::BinOp;
        let lib = standard_lib();
        let layout = toy_layout(&lib);
        let at = |class: GadgetClass| lib.find(class)[0].vaddr;

        let pop_ecx = at(GadgetClass::Pop(Register::Ecx));
        let xchg = at(GadgetClass::Xchg(Register::Eax, Register::Edx));
        let mov = at(GadgetClass::MovRR {
            dst: Register::Eax,
            src: Register::Edx,
        });
        let sub = at(GadgetClass::BinRR {
            op: BinOp::Sub,
            dst: Register::Eax,
            src: Register::Ecx,
        });

        let text_pc = layout.program_base + 0x40;
        let mut trace = vec![
            ev(text_pc, ins::ret(), Some(pop_ecx)),
            ev(pop_ecx, ins::pop_r(Register::Ecx), Some(0x48)),
        ];
        for g in [xchg, mov, sub, xchg] {
            let from = trace.last().unwrap().pc + 1;
            trace.push(ev(from, ins::ret(), Some(g)));
        }
        trace.push(ev(xchg + 2, ins::ret(), Some(text_pc)));

        let got = dynamic_rop_recover(&trace, &lib, &layout);
        assert_eq!(
            got.texts(),
            vec![
                "mov ecx, 72",
                "xchg eax, edx",
                "mov eax, edx",
                "sub eax, ecx",
                "xchg eax, edx",
            ]
        );
        assert_eq!(got.instructions[0].provenance, Provenance::FromImmediate);
        assert_eq!(got.instructions[1].provenance, Provenance::FromGadget(xchg));
        assert!(got.unknown_regions.is_empty());
        assert_eq!(got.resolved_cells, got.total_cells);
    }

    #[test]
    fn baseline_trace_recovers_nothing() {
        let src = "\
.func main
main:
  mov eax, 5
  mov ecx, 3
  add eax, ecx
  ret
";
        let p = parse_program(src).unwrap();
        let lib = standard_lib();
        let mut st = load_process(&p, &lib, 5).unwrap();
        let r = run(&mut st, 100_000, true);
        let got = dynamic_rop_recover(&r.trace.unwrap(), &lib, &st.layout);
        assert!(got.instructions.is_empty());
        assert_eq!(got.total_cells, 0);
        let f = got.function.unwrap();
        assert_eq!(f.blocks.len(), 1);
        assert!(f.blocks[0].instructions.is_empty());
    }

    /// Full pipeline: a protected build's trace re-linearizes into a
    /// program that behaves like the original, extern calls included.
    #[test]
    fn protected_build_trace_relinearizes_to_equivalent_code() {
        let src = "\
.func main
main:
  mov eax, 5
  mov ecx, 3
  add eax, ecx
  mov esi, msg
  call print_str
after:
  sub eax, 2
  ret

.data
msg: db \"done\", 0
";
        let p = parse_program(src).unwrap();
        let lib = standard_lib();
        let cfg = ObfuscationConfig {
            level: Level::RopOpDse,
            seed: 14,
            ..ObfuscationConfig::default()
        };
        let obf = obfuscate_program(&p, &lib, &cfg).unwrap();
        let mut st = load_process(&obf.program, &lib, 3).unwrap();
        st.set_input(b"");
        let r = run(&mut st, 5_000_000, true);
        let got = dynamic_rop_recover(&r.trace.unwrap(), &lib, &st.layout);

        assert!(got.unknown_regions.is_empty(), "{:?}", got.unknown_regions);
        assert!(
            got.texts().iter().any(|t| t == "mov esi, msg"),
            "data symbol reads back by name: {:?}",
            got.texts()
        );
        let replay = crate::asm::Program {
            functions: vec![got.function.unwrap()],
            data: p.data.clone(),
        };
        assert!(replay.functions[0].blocks.len() >= 2, "split at the call");
        let diff = differential_run(&p, &replay, &lib, &[String::new()], 3).unwrap();
        assert!(diff.clean(), "{:?}", diff.entries);
    }

    /// Branch plumbing (pops of code addresses, the cmov selector, the
    /// push) stays out of the listing while real work is kept; the
    /// re-linearized straight line still matches the original's behavior
    /// on the traced input.
    #[test]
    fn branch_plumbing_is_dropped_from_the_listing() {
        let src = "\
.func main
main:
  mov eax, 0xb0000000
  movzx eax, byte [eax]
  cmp eax, 65
  je yes
no:
  mov eax, 7
  ret
yes:
  mov eax, 9
  ret
";
        let p = parse_program(src).unwrap();
        let lib = standard_lib();
        let cfg = ObfuscationConfig {
            level: Level::RopOnly,
            seed: 6,
            ..ObfuscationConfig::default()
        };
        let obf = obfuscate_program(&p, &lib, &cfg).unwrap();
        for input in ["A", "B"] {
            let mut st = load_process(&obf.program, &lib, 9).unwrap();
            st.set_input(input.as_bytes());
            let r = run(&mut st, 1_000_000, true);
            let got = dynamic_rop_recover(&r.trace.unwrap(), &lib, &st.layout);
            assert!(got.texts().iter().all(|t| !t.starts_with("push")));
            for t in got.texts() {
                assert!(
                    !t.contains("0x804") && !t.contains("0x805"),
                    "code address leaked into {t}"
                );
            }
            let replay = crate::asm::Program {
                functions: vec![got.function.unwrap()],
                data: Vec::new(),
            };
            let diff = differential_run(&p, &replay, &lib, &[input.to_string()], 9).unwrap();
            assert!(diff.clean(), "{input}: {:?}", diff.entries);
        }
    }

    /// Hiding removes exactly the planned micro-ops from what the trace
    /// shows, nothing more.
    #[test]
    fn hidden_build_recovery_misses_exactly_the_hidden_ops() {
        let src = "\
.func main
main:
  mov ecx, 123
  add edx, ecx
  mov ebx, 7
  add edx, ebx
  mov eax, edx
  ret
";
        let p = parse_program(src).unwrap();
        let lib = standard_lib();
        let recover = |level: Level| {
            let cfg = ObfuscationConfig {
                level,
                seed: 11,
                ..ObfuscationConfig::default()
            };
            let obf = obfuscate_program(&p, &lib, &cfg).unwrap();
            let mut st = load_process(&obf.program, &lib, 4).unwrap();
            st.set_input(b"");
            let r = run(&mut st, 5_000_000, true);
            let texts: BTreeSet<String> = dynamic_rop_recover(&r.trace.unwrap(), &lib, &st.layout)
                .texts()
                .into_iter()
                .collect();
            (texts, obf)
        };
        let (full, _) = recover(Level::RopOpDse);
        let (partial, obf) = recover(Level::RopOpDseHiding);
        let hidden: BTreeSet<String> = obf.functions[0]
            .generators
            .iter()
            .flat_map(|g| &g.hidden)
            .map(|h| crate::asm::print_instruction(&h.instr))
            .collect();
        assert!(!hidden.is_empty(), "hiding selected nothing");
        let deficit: BTreeSet<String> = full.difference(&partial).cloned().collect();
        assert_eq!(deficit, hidden);
        assert!(partial.is_subset(&full));
    }
}

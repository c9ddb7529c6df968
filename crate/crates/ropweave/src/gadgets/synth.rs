//! Synthetic gadget library writer.
//!
//! Emits a minimal valid ELF32 shared object whose executable segment
//! contains exactly the requested gadgets (instruction + ret) separated by
//! random-length runs of poison bytes, plus an exported-symbol table of decoy
//! names for anchoring. Poison bytes are chosen from single-byte encodings
//! the subset decoder always rejects, so padding can never form an accidental
//! gadget: scanning the output finds the planted classes and nothing else
//! (modulo misaligned suffixes of the planted instructions themselves, which
//! cannot include ret bytes in operand positions for any classifiable form).
//!
//! Gadgets and symbols may be pinned at fixed offsets from the image base,
//! which is how the worked-example library used in the golden test places
//! `pop ecx; ret` at base+0x345 with `atoi` exported at base+0x200.

use crate::asm::encode_instruction;
use crate::rng::Rng;

use super::GadgetClass;

/// Bytes the subset decoder rejects as a first opcode byte. Any scan start
/// inside padding hits one of these immediately and fails.
const POISON: [u8; 4] = [0xcc, 0xf4, 0x66, 0xd6];

/// Exported decoy names, libc-flavored. Plans that do not pin symbols get
/// these spread across the image.
pub const DECOY_NAMES: [&str; 12] = [
    "atoi", "puts", "strcpy", "memset", "fwrite", "malloc", "free", "getenv", "strlen", "printf",
    "fopen", "exit",
];

#[derive(Debug, Clone)]
pub struct PlannedGadget {
    pub class: GadgetClass,
    /// Fixed offset from the image base, or None to float.
    pub offset: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct PlannedSymbol {
    pub name: String,
    pub offset: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct LibraryPlan {
    pub base: u32,
    pub gadgets: Vec<PlannedGadget>,
    pub symbols: Vec<PlannedSymbol>,
    /// Pad the text to at least this many bytes.
    pub min_text: u32,
}

impl LibraryPlan {
    /// All-floating plan over `classes` with the standard decoy symbols.
    pub fn floating(classes: &[GadgetClass]) -> LibraryPlan {
        LibraryPlan {
            base: 0x10000,
            gadgets: classes
                .iter()
                .map(|&class| PlannedGadget {
                    class,
                    offset: None,
                })
                .collect(),
            symbols: DECOY_NAMES
                .iter()
                .map(|n| PlannedSymbol {
                    name: n.to_string(),
                    offset: None,
                })
                .collect(),
            min_text: 0,
        }
    }
}

/// Build a library containing at least one gadget per requested class.
pub fn build_synthetic_library(classes: &[GadgetClass], rng: &mut Rng) -> Vec<u8> {
    build_with_plan(&LibraryPlan::floating(classes), rng)
}

/// The worked-example library: three gadgets and two exported symbols at the
/// exact offsets the golden chain test expects.
pub fn fig3_library() -> Vec<u8> {
    use crate::asm::Register::{Eax, Ecx, Edx};
    let plan = LibraryPlan {
        base: 0x10000,
        gadgets: vec![
            PlannedGadget {
                class: GadgetClass::Pop(Ecx),
                offset: Some(0x345),
            },
            PlannedGadget {
                class: GadgetClass::Xchg(Eax, Edx),
                offset: Some(0x700),
            },
            PlannedGadget {
                class: GadgetClass::BinRR {
                    op: super::BinOp::Add,
                    dst: Eax,
                    src: Ecx,
                },
                offset: Some(0x9ab),
            },
        ],
        symbols: vec![
            PlannedSymbol {
                name: "atoi".into(),
                offset: Some(0x200),
            },
            PlannedSymbol {
                name: "puts".into(),
                offset: Some(0xa00),
            },
        ],
        min_text: 0xa01,
    };
    build_with_plan(&plan, &mut Rng::seeded(0x10f3))
}

/// Default gadget profile for test libraries: untyped data flows through eax,
/// with exchanges connecting the other registers. One pop per register, but
/// every binary operation, load, store, conditional move, and shift runs
/// through eax, so chain planning exercises the exchange search.
pub fn standard_classes() -> Vec<GadgetClass> {
    use crate::asm::Register::{self, Eax, Ecx};
    use crate::asm::{Cc, Register::*};
    use GadgetClass as G;

    let others = || Register::ALLOCATABLE.into_iter().filter(|&r| r != Eax);
    let mut v: Vec<G> = Vec::new();
    v.extend(Register::ALLOCATABLE.map(G::Pop));
    v.push(G::PushReg(Eax));
    v.extend(others().map(|src| G::MovRR { dst: Eax, src }));
    v.extend(others().map(|r| G::Xchg(Eax, r)));
    for op in super::BinOp::ALL {
        v.extend(others().map(move |src| G::BinRR { op, dst: Eax, src }));
    }
    v.extend([Eax, Ecx, Ebx, Esi, Edi].map(|src| G::Load { dst: Eax, src }));
    v.extend(others().map(|dst| G::Store { dst, src: Eax }));
    v.extend(Cc::ALL.map(|cc| G::CMov {
        cc,
        dst: Eax,
        src: Ecx,
    }));
    v.extend(Register::ALLOCATABLE.map(G::Mul));
    for k in 1..32 {
        v.push(G::ShiftImm {
            op: super::ShiftOp::Shl,
            reg: Eax,
            k,
        });
        v.push(G::ShiftImm {
            op: super::ShiftOp::Shr,
            reg: Eax,
            k,
        });
    }
    v
}

pub fn build_with_plan(plan: &LibraryPlan, rng: &mut Rng) -> Vec<u8> {
    let text = build_text(plan, rng);
    let symbols = place_symbols(plan, text.len() as u32, rng);
    write_elf(plan.base, &text, &symbols)
}

fn gadget_bytes(class: GadgetClass) -> Vec<u8> {
    let mut b = encode_instruction(&class.instruction())
        .expect("gadget classes are always encodable");
    b.push(0xc3);
    b
}

fn pad(text: &mut Vec<u8>, n: usize, rng: &mut Rng) {
    for _ in 0..n {
        text.push(*rng.pick(&POISON));
    }
}

fn build_text(plan: &LibraryPlan, rng: &mut Rng) -> Vec<u8> {
    let mut fixed: Vec<(u32, Vec<u8>)> = Vec::new();
    let mut floating: Vec<Vec<u8>> = Vec::new();
    for g in &plan.gadgets {
        let bytes = gadget_bytes(g.class);
        match g.offset {
            Some(off) => fixed.push((off, bytes)),
            None => floating.push(bytes),
        }
    }
    fixed.sort_by_key(|(off, _)| *off);
    for w in fixed.windows(2) {
        assert!(
            w[0].0 as usize + w[0].1.len() <= w[1].0 as usize,
            "fixed gadgets overlap at {:#x}",
            w[1].0
        );
    }

    let mut text: Vec<u8> = Vec::new();
    let mut floats = floating.into_iter().peekable();
    for (off, bytes) in fixed {
        // Fill the gap ahead of this pinned gadget with floating gadgets
        // while they fit, each preceded by a short poison run.
        loop {
            let Some(next) = floats.peek() else { break };
            let gap_pad = 2 + rng.below(8) as usize;
            if text.len() + gap_pad + next.len() > off as usize {
                break;
            }
            pad(&mut text, gap_pad, rng);
            text.extend(floats.next().unwrap());
        }
        let gap = off as usize - text.len();
        pad(&mut text, gap, rng);
        text.extend(bytes);
    }
    for bytes in floats {
        pad(&mut text, 2 + rng.below(8) as usize, rng);
        text.extend(bytes);
    }
    if text.len() < plan.min_text as usize {
        let tail = plan.min_text as usize - text.len();
        pad(&mut text, tail, rng);
    }
    text
}

fn place_symbols(plan: &LibraryPlan, text_len: u32, rng: &mut Rng) -> Vec<(String, u32)> {
    plan.symbols
        .iter()
        .map(|s| {
            let off = s
                .offset
                .unwrap_or_else(|| rng.below(text_len.max(1) as u64) as u32);
            assert!(off < text_len, "symbol '{}' lies outside the text", s.name);
            (s.name.clone(), plan.base + off)
        })
        .collect()
}

// --- ELF32 writer -----------------------------------------------------------

fn u16le(v: u16) -> [u8; 2] {
    v.to_le_bytes()
}

fn u32le(v: u32) -> [u8; 4] {
    v.to_le_bytes()
}

/// Section header as (name_off, type, flags, addr, offset, size, link, info,
/// align, entsize).
type Shdr = (u32, u32, u32, u32, u32, u32, u32, u32, u32, u32);

fn write_elf(base: u32, text: &[u8], symbols: &[(String, u32)]) -> Vec<u8> {
    const EHSIZE: u32 = 52;
    const PHENT: u32 = 32;
    const SHENT: u32 = 40;

    let text_off = EHSIZE + PHENT;

    // .dynstr: \0 then names.
    let mut dynstr = vec![0u8];
    let name_offsets: Vec<u32> = symbols
        .iter()
        .map(|(name, _)| {
            let off = dynstr.len() as u32;
            dynstr.extend_from_slice(name.as_bytes());
            dynstr.push(0);
            off
        })
        .collect();

    // .dynsym: null entry then one GLOBAL FUNC per symbol.
    let mut dynsym = vec![0u8; 16];
    for ((_, vaddr), name_off) in symbols.iter().zip(&name_offsets) {
        dynsym.extend(u32le(*name_off));
        dynsym.extend(u32le(*vaddr));
        dynsym.extend(u32le(0)); // st_size
        dynsym.push(0x12); // GLOBAL, FUNC
        dynsym.push(0); // st_other
        dynsym.extend(u16le(1)); // st_shndx: defined
    }

    let shstrtab = b"\0.dynsym\0.dynstr\0.shstrtab\0".to_vec();

    let dynsym_off = text_off + text.len() as u32;
    let dynstr_off = dynsym_off + dynsym.len() as u32;
    let shstr_off = dynstr_off + dynstr.len() as u32;
    let shoff = shstr_off + shstrtab.len() as u32;

    let mut out = Vec::new();
    // ELF header.
    out.extend_from_slice(b"\x7fELF");
    out.extend_from_slice(&[1, 1, 1, 0]); // 32-bit, LE, version, SysV
    out.extend_from_slice(&[0; 8]);
    out.extend(u16le(3)); // ET_DYN
    out.extend(u16le(3)); // EM_386
    out.extend(u32le(1)); // e_version
    out.extend(u32le(0)); // e_entry
    out.extend(u32le(EHSIZE)); // e_phoff
    out.extend(u32le(shoff)); // e_shoff
    out.extend(u32le(0)); // e_flags
    out.extend(u16le(EHSIZE as u16));
    out.extend(u16le(PHENT as u16));
    out.extend(u16le(1)); // e_phnum
    out.extend(u16le(SHENT as u16));
    out.extend(u16le(4)); // e_shnum
    out.extend(u16le(3)); // e_shstrndx
    debug_assert_eq!(out.len() as u32, EHSIZE);

    // One PT_LOAD R+X segment holding the text.
    out.extend(u32le(1)); // PT_LOAD
    out.extend(u32le(text_off));
    out.extend(u32le(base)); // p_vaddr
    out.extend(u32le(base)); // p_paddr
    out.extend(u32le(text.len() as u32));
    out.extend(u32le(text.len() as u32));
    out.extend(u32le(5)); // R+X
    out.extend(u32le(0x1000));

    out.extend_from_slice(text);
    out.extend_from_slice(&dynsym);
    out.extend_from_slice(&dynstr);
    out.extend_from_slice(&shstrtab);

    let shdrs: [Shdr; 4] = [
        (0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
        // .dynsym: link = .dynstr section index, info = first global index.
        (1, 11, 2, 0, dynsym_off, dynsym.len() as u32, 2, 1, 4, 16),
        (9, 3, 2, 0, dynstr_off, dynstr.len() as u32, 0, 0, 1, 0),
        (17, 3, 0, 0, shstr_off, shstrtab.len() as u32, 0, 0, 1, 0),
    ];
    for (name, typ, flags, addr, off, size, link, info, align, entsize) in shdrs {
        for v in [name, typ, flags, addr, off, size, link, info, align, entsize] {
            out.extend(u32le(v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{extract_gadgets, load_elf32, GadgetClass};
    use super::*;
    use crate::asm::Register::{self, *};

    #[test]
    fn round_trips_through_the_elf_reader() {
        let mut rng = Rng::seeded(7);
        let bytes = build_synthetic_library(&standard_classes(), &mut rng);
        let img = load_elf32(&bytes).unwrap();
        assert_eq!(img.exec_segments.len(), 1);
        assert_eq!(img.symbols.len(), DECOY_NAMES.len());
        assert!(img.symbols.iter().any(|s| s.name == "atoi"));
    }

    #[test]
    fn every_planted_class_is_extracted() {
        let classes = standard_classes();
        let mut rng = Rng::seeded(991);
        let lib = extract_gadgets(load_elf32(&build_synthetic_library(&classes, &mut rng)).unwrap());
        for c in &classes {
            assert!(lib.has(*c), "missing planted gadget class: {c}");
        }
    }

    #[test]
    fn excluded_class_stays_absent() {
        let classes: Vec<GadgetClass> = standard_classes()
            .into_iter()
            .filter(|c| !matches!(c, GadgetClass::Xchg(_, Edx) | GadgetClass::Xchg(Edx, _)))
            .collect();
        let mut rng = Rng::seeded(5);
        let lib = extract_gadgets(load_elf32(&build_synthetic_library(&classes, &mut rng)).unwrap());
        for r in Register::ALL {
            assert!(!lib.has(GadgetClass::Xchg(r, Edx)), "found xchg {r}, edx");
        }
        // Other exchanges are still there.
        assert!(lib.has(GadgetClass::Xchg(Eax, Ecx)));
    }

    #[test]
    fn fig3_layout_is_exact() {
        let lib = extract_gadgets(load_elf32(&fig3_library()).unwrap());
        assert_eq!(lib.gadget_count(), 3);

        let pop = lib.find(GadgetClass::Pop(Ecx));
        assert_eq!(pop.len(), 1);
        assert_eq!(pop[0].vaddr, 0x10345);
        assert_eq!(pop[0].raw, vec![0x59, 0xc3]);

        let xchg = lib.find(GadgetClass::Xchg(Eax, Edx));
        assert_eq!(xchg[0].vaddr, 0x10700);
        assert_eq!(xchg[0].raw, vec![0x92, 0xc3]);

        let add = lib.find(GadgetClass::BinRR {
            op: super::super::BinOp::Add,
            dst: Eax,
            src: Ecx,
        });
        assert_eq!(add[0].vaddr, 0x109ab);
        assert_eq!(add[0].raw, vec![0x01, 0xc8, 0xc3]);

        assert_eq!(lib.symbol_vaddr("atoi"), Some(0x10200));
        assert_eq!(lib.symbol_vaddr("puts"), Some(0x10a00));
        assert_eq!(lib.anchor_symbols().len(), 2);
    }

    #[test]
    fn anchor_identity_holds_for_every_draw() {
        let lib = extract_gadgets(load_elf32(&fig3_library()).unwrap());
        let g = &lib.find(GadgetClass::Pop(Ecx))[0];
        let mut rng = Rng::seeded(3);
        for _ in 0..32 {
            let so = lib.anchor(g.vaddr, &mut rng).unwrap();
            let sym = lib.symbol_vaddr(&so.symbol).unwrap();
            assert_eq!(sym.wrapping_add(so.offset as u32), g.vaddr);
        }
    }

    #[test]
    fn anchor_draws_cover_the_pool() {
        let lib = extract_gadgets(load_elf32(&fig3_library()).unwrap());
        let g = &lib.find(GadgetClass::Pop(Ecx))[0];
        let mut rng = Rng::seeded(11);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..64 {
            seen.insert(lib.anchor(g.vaddr, &mut rng).unwrap().symbol);
        }
        assert_eq!(seen.len(), 2, "both symbols should appear across draws");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = build_synthetic_library(&standard_classes(), &mut Rng::seeded(42));
        let b = build_synthetic_library(&standard_classes(), &mut Rng::seeded(42));
        assert_eq!(a, b);
    }
}

//! Static ROP-chain recovery: simulate stack-manipulating instructions
//! symbolically, then read each launched chain back as gadget instructions.
//!
//! The simulator understands push (symbol, immediate, label), pop, pushf,
//! popf, esp-relative lea, and ret. Anything else ends the pending region:
//! unconsumed cells move to `unknown_regions` and the instruction passes
//! through verbatim. Protected generators push opaque-constant outputs from
//! a register and interleave predicate bodies between pushes, so almost no
//! cell survives to its ret; bare generators resolve completely, and the
//! reassembled function is faithful whenever `unknown_regions` stays empty.

use super::{Provenance, RecoveredInstruction, RecoveredListing};
use crate::asm::{ins, BasicBlock, Function, Instruction, Mnemonic, Operand, Register};
use crate::gadgets::{GadgetClass, GadgetLibrary};
use std::collections::BTreeMap;

/// One symbolically pushed stack cell.
#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Sym(String, i32),
    Imm(u32),
    Label(String),
    Flags,
    /// Pushed from a register or memory: value unknown statically.
    Unknown,
}

/// Reads every chain a function launches back into instructions. Output
/// order is execution order; the reassembled function replaces each decoded
/// chain block with its recovered body and control transfer.
pub fn static_rop_recover(f: &Function, lib: &GadgetLibrary) -> RecoveredListing {
    let mut r = Recovery {
        lib,
        out: RecoveredListing::default(),
        func: f.name.clone(),
        blocks: Vec::new(),
        fresh: 0,
        label: String::new(),
        body: Vec::new(),
        stack: BTreeMap::new(),
        bias: 0,
        cursor: 0,
    };
    for b in &f.blocks {
        r.label = b.label.clone();
        r.stack.clear();
        r.bias = 0;
        for i in &b.instructions {
            r.step(i, false);
            r.cursor += 1;
        }
        r.step(&b.terminator, true);
        r.cursor += 1;
    }
    r.out.function = Some(Function {
        name: f.name.clone(),
        blocks: r.blocks,
    });
    r.out
}

struct Recovery<'a> {
    lib: &'a GadgetLibrary,
    out: RecoveredListing,
    func: String,
    blocks: Vec<BasicBlock>,
    fresh: usize,
    /// Label of the block under reassembly; empty once flushed.
    label: String,
    body: Vec<Instruction>,
    /// Cell address relative to esp at block entry.
    stack: BTreeMap<i64, Cell>,
    bias: i64,
    /// Index of the current instruction in the flattened input.
    cursor: usize,
}

impl Recovery<'_> {
    fn step(&mut self, i: &Instruction, terminator: bool) {
        match (&i.mnemonic, i.operands.as_slice()) {
            (Mnemonic::Push, [op]) => {
                self.bias -= 4;
                let cell = match op {
                    Operand::SymOff { symbol, offset } => Cell::Sym(symbol.clone(), *offset),
                    Operand::Imm(v) => Cell::Imm(*v as u32),
                    Operand::Label(l) => Cell::Label(l.clone()),
                    _ => Cell::Unknown,
                };
                self.stack.insert(self.bias, cell);
            }
            (Mnemonic::Pushf, []) => {
                self.bias -= 4;
                self.stack.insert(self.bias, Cell::Flags);
            }
            (Mnemonic::Pop, [Operand::Reg(r)]) => {
                let cell = self.stack.remove(&self.bias);
                self.bias += 4;
                match cell {
                    Some(Cell::Imm(v)) => {
                        self.out.total_cells += 1;
                        self.out.resolved_cells += 1;
                        self.emit(ins::mov_ri(*r, v), Provenance::FromImmediate);
                    }
                    Some(Cell::Label(l)) => {
                        self.out.total_cells += 1;
                        self.out.resolved_cells += 1;
                        self.emit(ins::mov_r_label(*r, &l), Provenance::FromImmediate);
                    }
                    Some(Cell::Sym(symbol, offset)) => {
                        self.out.total_cells += 1;
                        self.out.resolved_cells += 1;
                        self.emit(mov_r_symoff(*r, symbol, offset), Provenance::FromImmediate);
                    }
                    Some(_) => {
                        self.out.total_cells += 1;
                        self.mark_unknown();
                        self.emit(i.clone(), Provenance::Passthrough);
                    }
                    None => self.emit(i.clone(), Provenance::Passthrough),
                }
            }
            (Mnemonic::Popf, []) => {
                self.stack.remove(&self.bias);
                self.bias += 4;
            }
            (Mnemonic::Lea, [Operand::Reg(Register::Esp), Operand::Mem(m)])
                if m.base == Some(Register::Esp) && m.index.is_none() =>
            {
                self.bias += i64::from(m.disp);
            }
            (Mnemonic::Ret, []) => self.decode_chain(),
            _ => {
                // Not a stack-shape instruction: pending cells are beyond
                // static tracking from here on.
                self.abort_region();
                if terminator {
                    self.emit_term(i.clone(), Provenance::Passthrough);
                    self.flush_block(i.clone());
                } else {
                    self.emit(i.clone(), Provenance::Passthrough);
                }
            }
        }
    }

    /// Records a recovered instruction into the block body and the listing.
    fn emit(&mut self, instr: Instruction, provenance: Provenance) {
        self.body.push(instr.clone());
        self.out
            .instructions
            .push(RecoveredInstruction { instr, provenance });
    }

    /// Records a block terminator into the listing only.
    fn emit_term(&mut self, instr: Instruction, provenance: Provenance) {
        self.out
            .instructions
            .push(RecoveredInstruction { instr, provenance });
    }

    fn mark_unknown(&mut self) {
        let r = (self.cursor, self.cursor + 1);
        if self.out.unknown_regions.last() != Some(&r) {
            self.out.unknown_regions.push(r);
        }
    }

    /// Gives up on `n` cells at the current instruction.
    fn discard(&mut self, n: usize) {
        if n > 0 {
            self.out.total_cells += n;
            self.mark_unknown();
        }
    }

    fn abort_region(&mut self) {
        let n = self.stack.len();
        self.stack.clear();
        self.discard(n);
    }

    /// Closes the block under reassembly with `term`.
    fn flush_block(&mut self, term: Instruction) {
        let label = if self.label.is_empty() {
            self.fresh += 1;
            format!(".Lrec.{}.{}", self.func, self.fresh)
        } else {
            std::mem::take(&mut self.label)
        };
        self.blocks.push(BasicBlock {
            label,
            instructions: std::mem::take(&mut self.body),
            terminator: term,
        });
    }

    /// Interprets the cells at and above the simulated esp as a chain.
    fn decode_chain(&mut self) {
        let mut cells = Vec::new();
        let mut addr = self.bias;
        while let Some(c) = self.stack.remove(&addr) {
            cells.push(c);
            addr += 4;
        }
        self.out.total_cells += cells.len();
        // Cells outside the contiguous run are stranded.
        self.abort_region();

        let mut term = ins::ret();
        // Label a synthetic follow-up block jumps to (call continuation or
        // conditional fallthrough).
        let mut fall: Option<String> = None;
        let mut lost = 0usize;
        let mut it = cells.into_iter().peekable();
        while let Some(cell) = it.next() {
            match cell {
                Cell::Sym(sym, off) => match self.gadget_of(&sym, off) {
                    Some((_, GadgetClass::Pop(r))) => {
                        self.out.resolved_cells += 1;
                        match it.next() {
                            Some(Cell::Imm(v)) => {
                                self.out.resolved_cells += 1;
                                self.emit(ins::mov_ri(r, v), Provenance::FromImmediate);
                            }
                            Some(Cell::Label(l)) => {
                                self.out.resolved_cells += 1;
                                self.emit(ins::mov_r_label(r, &l), Provenance::FromImmediate);
                            }
                            Some(Cell::Sym(s2, o2)) => {
                                self.out.resolved_cells += 1;
                                self.emit(mov_r_symoff(r, s2, o2), Provenance::FromImmediate);
                            }
                            Some(_) => lost += 1,
                            None => {}
                        }
                    }
                    Some((vaddr, class)) => {
                        self.out.resolved_cells += 1;
                        self.emit(class.instruction(), Provenance::FromGadget(vaddr));
                    }
                    None => lost += 1,
                },
                Cell::Label(first) => {
                    self.out.resolved_cells += 1;
                    if let Some(Cell::Label(cont)) = it.peek() {
                        // Callee cell with the continuation riding above it:
                        // the callee's final ret consumes the second label.
                        let cont = cont.clone();
                        it.next();
                        self.out.resolved_cells += 1;
                        term = ins::call(&first);
                        fall = Some(cont);
                    } else {
                        term = ins::jmp(&first);
                    }
                    break;
                }
                Cell::Imm(_) | Cell::Flags | Cell::Unknown => lost += 1,
            }
        }
        lost += it.count();
        if lost > 0 {
            self.mark_unknown();
        }

        if term == ins::ret() {
            if let Some((cc, taken, through)) = self.take_branch_tail() {
                term = ins::jcc(cc, &taken);
                fall = Some(through);
            }
        }
        let prov = if term == ins::ret() {
            Provenance::Passthrough
        } else {
            Provenance::FromImmediate
        };
        self.emit_term(term.clone(), prov);
        self.flush_block(term);
        if let Some(l) = fall {
            let jmp = ins::jmp(&l);
            self.emit_term(jmp.clone(), Provenance::FromImmediate);
            self.flush_block(jmp);
        }
    }

    fn gadget_of(&self, sym: &str, off: i32) -> Option<(u32, GadgetClass)> {
        let base = self.lib.symbol_vaddr(sym)?;
        let vaddr = base.wrapping_add(off as u32);
        Some((vaddr, self.lib.class_at(vaddr)?))
    }

    /// Detects the conditional-dispatch idiom closing a decoded chain: two
    /// label loads, a cmov selecting between them, and a push of the result
    /// mean "jcc to the first, fall through to the second". Removes the four
    /// instructions and returns (cc, taken, fallthrough).
    fn take_branch_tail(&mut self) -> Option<(crate::asm::Cc, String, String)> {
        let n = self.body.len();
        if n < 4 {
            return None;
        }
        let tail = &self.body[n - 4..];
        let (r1, taken) = label_load(&tail[0])?;
        let (r2, through) = label_load(&tail[1])?;
        let Mnemonic::Cmovcc(cc) = tail[2].mnemonic else {
            return None;
        };
        if tail[2].operands != vec![Operand::Reg(r2), Operand::Reg(r1)]
            || tail[3] != ins::push_r(r2)
        {
            return None;
        }
        self.body.truncate(n - 4);
        let k = self.out.instructions.len();
        self.out.instructions.truncate(k - 4);
        Some((cc, taken, through))
    }
}

fn label_load(i: &Instruction) -> Option<(Register, String)> {
    match (&i.mnemonic, i.operands.as_slice()) {
        (Mnemonic::Mov, [Operand::Reg(r), Operand::Label(l)]) => Some((*r, l.clone())),
        _ => None,
    }
}

fn mov_r_symoff(r: Register, symbol: String, offset: i32) -> Instruction {
    Instruction::new(
        Mnemonic::Mov,
        vec![Operand::Reg(r), Operand::SymOff { symbol, offset }],
    )
}

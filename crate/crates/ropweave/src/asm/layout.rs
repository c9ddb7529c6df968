//! Two-pass assembler: lay out a program at fixed bases, resolve labels and
//! library symbols, and produce both the byte image and the per-instruction
//! address map the emulator executes from.
//!
//! Functions are packed in declaration order at `text_base`; data definitions
//! at `data_base`. Label operands resolve block-locally first, then to
//! function entries, then to data labels. Symbol+offset operands resolve
//! through `externs` (the loaded gadget library's symbol addresses). Branch
//! targets become displacements relative to the next instruction.

use std::collections::BTreeMap;

use super::{
    encode_instruction, encoded_len, AsmError, Instruction, Mnemonic, Operand, Program,
};

/// An instruction pinned at its final address with fully numeric operands.
#[derive(Debug, Clone)]
pub struct ResolvedInstr {
    pub addr: u32,
    pub len: u32,
    pub instr: Instruction,
}

#[derive(Debug, Clone)]
pub struct ProgramImage {
    pub text_base: u32,
    pub data_base: u32,
    pub text: Vec<u8>,
    pub data: Vec<u8>,
    /// Function entries and data labels.
    pub symbols: BTreeMap<String, u32>,
    /// Every block label, keyed (function name, label).
    pub block_addrs: BTreeMap<(String, String), u32>,
    /// All instructions in address order.
    pub instrs: Vec<ResolvedInstr>,
    /// (name, start, end) per function, in layout order.
    pub fn_ranges: Vec<(String, u32, u32)>,
}

impl ProgramImage {
    pub fn text_size(&self) -> usize {
        self.text.len()
    }

    /// The function containing `addr`, if any.
    pub fn function_at(&self, addr: u32) -> Option<&str> {
        self.fn_ranges
            .iter()
            .find(|(_, s, e)| (*s..*e).contains(&addr))
            .map(|(n, _, _)| n.as_str())
    }
}

pub fn assemble(
    p: &Program,
    text_base: u32,
    data_base: u32,
    externs: &BTreeMap<String, u32>,
) -> Result<ProgramImage, AsmError> {
    // Pass 1: addresses.
    let mut symbols = BTreeMap::new();
    let mut block_addrs = BTreeMap::new();
    let mut fn_ranges = Vec::new();
    let mut addr = text_base;
    for f in &p.functions {
        let start = addr;
        if symbols.insert(f.name.clone(), addr).is_some() {
            return Err(AsmError::NotEncodable(format!(
                "duplicate symbol '{}'",
                f.name
            )));
        }
        for b in &f.blocks {
            block_addrs.insert((f.name.clone(), b.label.clone()), addr);
            for i in b.all_instructions() {
                addr += encoded_len(i)? as u32;
            }
        }
        fn_ranges.push((f.name.clone(), start, addr));
    }
    let mut data = Vec::new();
    for d in &p.data {
        let daddr = data_base + data.len() as u32;
        if symbols.insert(d.label.clone(), daddr).is_some() {
            return Err(AsmError::NotEncodable(format!(
                "duplicate symbol '{}'",
                d.label
            )));
        }
        data.extend_from_slice(&d.bytes);
    }

    // Pass 2: resolve and encode.
    let mut text = Vec::with_capacity((addr - text_base) as usize);
    let mut instrs = Vec::new();
    let mut at = text_base;
    for f in &p.functions {
        let resolve_label = |l: &str| -> Result<u32, AsmError> {
            block_addrs
                .get(&(f.name.clone(), l.to_string()))
                .or_else(|| symbols.get(l))
                .or_else(|| externs.get(l))
                .copied()
                .ok_or_else(|| AsmError::UnresolvedLabel(l.to_string()))
        };
        for b in &f.blocks {
            for i in b.all_instructions() {
                let len = encoded_len(i)? as u32;
                let mut ri = i.clone();
                let is_branch = matches!(
                    ri.mnemonic,
                    Mnemonic::Jmp | Mnemonic::Call | Mnemonic::Jcc(_)
                );
                for op in &mut ri.operands {
                    match op {
                        Operand::Label(l) => {
                            let target = resolve_label(l)?;
                            *op = if is_branch {
                                Operand::Imm(target.wrapping_sub(at + len) as i32)
                            } else {
                                Operand::Imm(target as i32)
                            };
                        }
                        Operand::SymOff { symbol, offset } => {
                            let base = externs
                                .get(symbol.as_str())
                                .copied()
                                .ok_or_else(|| AsmError::UnresolvedLabel(symbol.clone()))?;
                            *op = Operand::Imm(base.wrapping_add(*offset as u32) as i32);
                        }
                        _ => {}
                    }
                }
                let bytes = encode_instruction(&ri)?;
                debug_assert_eq!(bytes.len() as u32, len);
                text.extend_from_slice(&bytes);
                instrs.push(ResolvedInstr {
                    addr: at,
                    len,
                    instr: ri,
                });
                at += len;
            }
        }
    }

    Ok(ProgramImage {
        text_base,
        data_base,
        text,
        data,
        symbols,
        block_addrs,
        instrs,
        fn_ranges,
    })
}

//! Control-flow graph over a function's basic blocks.

use std::collections::HashMap;

use super::{Function, Mnemonic, Operand};

/// Successor block indices for one block, taken edge first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockEdges {
    pub successors: Vec<usize>,
}

/// Successor edges per block, in block order. Branch targets outside the
/// function (tail jumps, calls) contribute no intra-function edge beyond the
/// fall-through; jcc and call fall through to the next block in layout order.
pub fn build_cfg(f: &Function) -> Vec<BlockEdges> {
    let index: HashMap<&str, usize> = f
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.label.as_str(), i))
        .collect();

    f.blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut successors = Vec::new();
            let target = || match b.terminator.operands.first() {
                Some(Operand::Label(l)) => index.get(l.as_str()).copied(),
                _ => None,
            };
            match b.terminator.mnemonic {
                Mnemonic::Ret => {}
                Mnemonic::Jmp => successors.extend(target()),
                Mnemonic::Jcc(_) => {
                    successors.extend(target());
                    if i + 1 < f.blocks.len() {
                        successors.push(i + 1);
                    }
                }
                Mnemonic::Call => {
                    if i + 1 < f.blocks.len() {
                        successors.push(i + 1);
                    }
                }
                // Parsing guarantees the terminator is one of the above.
                _ => {}
            }
            BlockEdges { successors }
        })
        .collect()
}

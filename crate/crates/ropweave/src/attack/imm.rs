//! Periodic immediate extraction: chains embed data constants as push
//! operands at regular intervals, so scanning the push-immediate stream at
//! small strides reassembles byte strings the original code compared
//! character by character. Protected builds compute those cells through
//! opaque constants, leaving nothing to scan.

use crate::asm::{Function, Mnemonic, Operand};
use std::collections::BTreeSet;

/// Smallest stride worth scanning; a chain never dedicates every cell to
/// one string's bytes, so stride 1 only produces noise.
const MIN_STRIDE: usize = 2;
const MAX_STRIDE: usize = 16;
const MIN_RUN: usize = 4;

/// Scans the function's push-immediate cells at every stride in
/// `[2, 16]` and returns the printable byte runs (length >= 4) found, as
/// strings, longest first.
pub fn extract_immediates(f: &Function) -> Vec<String> {
    let imms: Vec<u8> = f
        .blocks
        .iter()
        .flat_map(|b| b.all_instructions())
        .filter_map(|i| match (&i.mnemonic, i.operands.as_slice()) {
            (Mnemonic::Push, [Operand::Imm(v)]) => Some(*v as u8),
            _ => None,
        })
        .collect();

    let mut found = BTreeSet::new();
    for stride in MIN_STRIDE..=MAX_STRIDE {
        for phase in 0..stride {
            let series: Vec<u8> = imms.iter().skip(phase).step_by(stride).copied().collect();
            for run in printable_runs(&series) {
                found.insert(run);
            }
        }
    }
    let mut out: Vec<String> = found.into_iter().collect();
    out.sort_by_key(|s| std::cmp::Reverse(s.len()));
    out
}

fn printable(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

/// Maximal printable runs of at least `MIN_RUN` bytes.
fn printable_runs(series: &[u8]) -> Vec<String> {
    series
        .split(|b| !printable(*b))
        .filter(|run| run.len() >= MIN_RUN)
        .map(|run| run.iter().map(|&b| char::from(b)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{ins, BasicBlock, Instruction};

    fn push_imm_function(values: &[u32]) -> Function {
        let instructions: Vec<Instruction> = values.iter().map(|&v| ins::push_imm(v)).collect();
        Function {
            name: "main".into(),
            blocks: vec![BasicBlock {
                label: ".Lmain.g0".into(),
                instructions,
                terminator: ins::ret(),
            }],
        }
    }

    #[test]
    fn stride_two_interleaving_recovers_the_string() {
        // Character compares interleaved with a counter constant, the way a
        // chain lays out two immediates per rung.
        let mut cells = Vec::new();
        for &c in b"Hello, world" {
            cells.push(c as u32);
            cells.push(1);
        }
        let got = extract_immediates(&push_imm_function(&cells));
        assert!(got.iter().any(|s| s == "Hello, world"), "{got:?}");
    }

    #[test]
    fn non_printable_noise_is_rejected() {
        let cells: Vec<u32> = (0u32..40).map(|i| 0x90000000 | (i & 3)).collect();
        let got = extract_immediates(&push_imm_function(&cells));
        assert!(got.is_empty(), "{got:?}");
    }

    #[test]
    fn no_push_immediates_means_no_candidates() {
        let f = Function {
            name: "f".into(),
            blocks: vec![BasicBlock {
                label: "f".into(),
                instructions: vec![ins::mov_ri(crate::asm::Register::Eax, 0x41414141)],
                terminator: ins::ret(),
            }],
        };
        assert!(extract_immediates(&f).is_empty());
    }

    #[test]
    fn short_printable_runs_are_ignored() {
        // Three 'A's at stride 2 is below the length threshold.
        let cells = [0x41, 1, 0x41, 1, 0x41, 1].map(|v| v as u32);
        let got = extract_immediates(&push_imm_function(&cells));
        assert!(got.is_empty(), "{got:?}");
    }
}

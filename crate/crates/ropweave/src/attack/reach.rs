//! Recursive-traversal coverage: how much of a function a disassembler
//! following only fallthrough and direct branch targets gets to see.
//!
//! Generator blocks end in `ret`, and chain continuations exist only as
//! pushed label operands, so traversal of obfuscated code stalls on the
//! first generator while the original control flow graph is fully walkable.

use crate::asm::{build_cfg, Function};
use serde::Serialize;
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    /// Traversal exhausted its frontier at `ret` boundaries early.
    RetBoundary,
    /// Every block was reached.
    FullCoverage,
    /// Nothing to traverse.
    Empty,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReachReport {
    pub reachable: usize,
    pub total: usize,
    pub stop: StopReason,
}

impl ReachReport {
    /// Reachable fraction; 0 for an empty function.
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.reachable as f64 / self.total as f64
        }
    }
}

/// Walks direct successors (fallthrough, jmp/jcc targets, call returns)
/// from the entry block; indirect transfers (`ret`) end a path.
pub fn recursive_reach(f: &Function) -> ReachReport {
    if f.blocks.is_empty() {
        return ReachReport {
            reachable: 0,
            total: 0,
            stop: StopReason::Empty,
        };
    }
    let cfg = build_cfg(f);
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut work = vec![0usize];
    while let Some(b) = work.pop() {
        if !seen.insert(b) {
            continue;
        }
        for &s in &cfg[b].successors {
            work.push(s);
        }
    }
    let stop = if seen.len() == f.blocks.len() {
        StopReason::FullCoverage
    } else {
        StopReason::RetBoundary
    };
    ReachReport {
        reachable: seen.len(),
        total: f.blocks.len(),
        stop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    #[test]
    fn original_branchy_function_is_fully_reachable() {
        let src = "\
.func check
check:
  cmp eax, 0x41
  je yes
no:
  mov eax, 0
  ret
yes:
  mov eax, 1
  ret
";
        let f = &parse_program(src).unwrap().functions[0];
        let r = recursive_reach(f);
        assert_eq!((r.reachable, r.total), (3, 3));
        assert_eq!(r.stop, StopReason::FullCoverage);
    }

    #[test]
    fn generator_blocks_hide_everything_past_the_first_ret() {
        // Shaped like obfuscated output: continuations only ever appear as
        // push operands, never as branch targets.
        let src = "\
.func check
check:
  push .Lcheck.g0
  push 0x41
  ret
.Lcheck.g0:
  mov eax, 1
  ret
";
        let f = &parse_program(src).unwrap().functions[0];
        let r = recursive_reach(f);
        assert_eq!((r.reachable, r.total), (1, 2));
        assert_eq!(r.stop, StopReason::RetBoundary);
    }
}

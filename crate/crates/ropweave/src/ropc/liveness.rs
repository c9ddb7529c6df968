//! Backward liveness over registers and flags, per block and per function.
//!
//! Two boundary models coexist. `analyze_liveness` is the conservative
//! single-block form: every allocatable register is live at block exit and
//! flags are live only into a flag-reading terminator. `analyze_function`
//! runs a live-in fixpoint over the control-flow graph so registers that
//! every successor rewrites become usable as scratches; its boundary facts
//! are the corpus calling convention: a `ret` block's live-out is `{eax}`,
//! and a `call` reads every allocatable register (callees take arguments in
//! registers) while defining none.

use crate::asm::{build_cfg, footprint, BasicBlock, Flags, Function, Mnemonic, RegSet, Register};

/// Registers a chain may claim as scratch space. esp anchors the chain
/// itself and ebp-touching gadgets were discarded at extraction.
pub const ALLOCATABLE: [Register; 6] = [
    Register::Eax,
    Register::Ecx,
    Register::Edx,
    Register::Ebx,
    Register::Esi,
    Register::Edi,
];

fn allocatable_set() -> RegSet {
    RegSet::of(&ALLOCATABLE)
}

/// Per-index liveness facts for one block. Index `i` describes instruction
/// `i` of the block body; the final index describes the terminator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessInfo {
    /// Registers not live into the instruction: safe to clobber while
    /// realizing it, provided its own operands are also excluded.
    pub free_regs: Vec<RegSet>,
    /// Whether any flag is consumed after the instruction completes.
    pub flags_live_after: Vec<bool>,
}

/// `analyze_function` output: `LivenessInfo` per block plus the flag
/// liveness *into* each index, which decides generator flag wraps.
#[derive(Debug, Clone)]
pub struct FnLiveness {
    pub blocks: Vec<LivenessInfo>,
    pub flags_live_in: Vec<Vec<bool>>,
}

/// Register uses/defs of one instruction as the chain planner must see
/// them: a call consumes every allocatable register and defines none, so
/// values never appear free across one in either direction.
fn reg_transfer(i: &crate::asm::Instruction) -> (RegSet, RegSet) {
    if i.mnemonic == Mnemonic::Call {
        return (allocatable_set(), RegSet::EMPTY);
    }
    let fp = footprint(i);
    (fp.regs_read, fp.regs_written)
}

/// Backward pass over one block from the given exit facts. Returns the
/// per-index info plus flag-live-in and the block's register/flag live-in.
fn backward_block(
    b: &BasicBlock,
    exit_regs: RegSet,
    exit_flags: Flags,
) -> (LivenessInfo, Vec<bool>, RegSet, Flags) {
    let count = b.instructions.len() + 1;
    let mut free_regs = vec![RegSet::EMPTY; count];
    let mut flags_live_after = vec![false; count];
    let mut flags_live_in = vec![false; count];

    let mut live = exit_regs;
    let mut flags = exit_flags;
    let alloc = allocatable_set();

    for (idx, ins) in b.all_instructions().enumerate().collect::<Vec<_>>().into_iter().rev() {
        flags_live_after[idx] = !flags.is_empty();
        let (uses, defs) = reg_transfer(ins);
        let fp = footprint(ins);
        live = live.minus(defs).union(uses);
        flags = flags.minus(fp.flags_written).union(fp.flags_read);
        free_regs[idx] = alloc.minus(live);
        flags_live_in[idx] = !flags.is_empty();
    }

    (
        LivenessInfo {
            free_regs,
            flags_live_after,
        },
        flags_live_in,
        live,
        flags,
    )
}

/// Single-block liveness with the conservative boundary: all allocatable
/// registers live at exit, flags dead past the terminator (a flag-reading
/// terminator still makes them live at every earlier index).
pub fn analyze_liveness(b: &BasicBlock) -> LivenessInfo {
    backward_block(b, allocatable_set(), Flags::EMPTY).0
}

/// Function-wide liveness fixpoint over the CFG.
pub fn analyze_function(f: &Function) -> FnLiveness {
    let cfg = build_cfg(f);
    let n = f.blocks.len();
    let mut live_in_regs = vec![RegSet::EMPTY; n];
    let mut live_in_flags = vec![Flags::EMPTY; n];

    // Exit facts for blocks without intra-function successors.
    let boundary = |b: &BasicBlock| -> (RegSet, Flags) {
        match b.terminator.mnemonic {
            // Return value convention: callers read eax, nothing else.
            Mnemonic::Ret => (RegSet::of(&[Register::Eax]), Flags::EMPTY),
            // Tail jump out of the function, or a trailing call: assume
            // everything matters on the far side.
            _ => (allocatable_set(), Flags::EMPTY),
        }
    };

    let mut changed = true;
    while changed {
        changed = false;
        for bi in (0..n).rev() {
            let b = &f.blocks[bi];
            let (mut exit_regs, mut exit_flags) = if cfg[bi].successors.is_empty() {
                boundary(b)
            } else {
                (RegSet::EMPTY, Flags::EMPTY)
            };
            for &s in &cfg[bi].successors {
                exit_regs = exit_regs.union(live_in_regs[s]);
                exit_flags = exit_flags.union(live_in_flags[s]);
            }
            let (_, _, in_regs, in_flags) = backward_block(b, exit_regs, exit_flags);
            if in_regs != live_in_regs[bi] || in_flags != live_in_flags[bi] {
                live_in_regs[bi] = in_regs;
                live_in_flags[bi] = in_flags;
                changed = true;
            }
        }
    }

    let mut blocks = Vec::with_capacity(n);
    let mut flags_live_in = Vec::with_capacity(n);
    for bi in 0..n {
        let b = &f.blocks[bi];
        let (mut exit_regs, mut exit_flags) = if cfg[bi].successors.is_empty() {
            boundary(b)
        } else {
            (RegSet::EMPTY, Flags::EMPTY)
        };
        for &s in &cfg[bi].successors {
            exit_regs = exit_regs.union(live_in_regs[s]);
            exit_flags = exit_flags.union(live_in_flags[s]);
        }
        let (info, fli, _, _) = backward_block(b, exit_regs, exit_flags);
        blocks.push(info);
        flags_live_in.push(fli);
    }

    FnLiveness {
        blocks,
        flags_live_in,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    fn block_of(src: &str) -> BasicBlock {
        parse_program(src).unwrap().functions[0].blocks[0].clone()
    }

    #[test]
    fn killed_register_is_free_before_its_definition() {
        let b = block_of(".func main\nmain:\n  mov ecx, 123\n  add edx, ecx\n  ret\n");
        let info = analyze_liveness(&b);
        assert!(info.free_regs[0].contains(Register::Ecx));
        // After index 0 the value is consumed at index 1, so no longer free.
        assert!(!info.free_regs[1].contains(Register::Ecx));
        // All-live boundary keeps edx pinned everywhere (read at index 1).
        assert!(!info.free_regs[0].contains(Register::Edx));
    }

    #[test]
    fn flags_live_between_cmp_and_flag_reading_terminator() {
        let b = block_of(".func main\nmain:\n  mov eax, 1\n  cmp eax, 0x41\n  je main\n");
        let info = analyze_liveness(&b);
        assert!(!info.flags_live_after[0], "cmp rewrites all flags");
        assert!(info.flags_live_after[1], "je consumes cmp's flags");
    }

    #[test]
    fn function_fixpoint_frees_registers_every_successor_rewrites() {
        let src = ".func main\nmain:\n  cmp eax, 5\n  je other\nnext:\n  mov eax, 1\n  mov ecx, 2\n  ret\nother:\n  mov eax, 3\n  mov ecx, 4\n  ret\n";
        let f = &parse_program(src).unwrap().functions[0];
        let fl = analyze_function(f);
        // Both targets rewrite eax and ecx before reading, so both are free
        // at the branch in block 0 (terminator index 1 there).
        let term = f.blocks[0].instructions.len();
        assert!(fl.blocks[0].free_regs[term].contains(Register::Eax));
        assert!(fl.blocks[0].free_regs[term].contains(Register::Ecx));
        assert!(fl.flags_live_in[0][term], "je still needs the flags");
    }

    #[test]
    fn ret_boundary_keeps_only_eax_live() {
        let src = ".func main\nmain:\n  mov eax, 7\n  ret\n";
        let f = &parse_program(src).unwrap().functions[0];
        let fl = analyze_function(f);
        // Before the mov nothing is needed except what it defines.
        assert!(fl.blocks[0].free_regs[0].contains(Register::Eax));
        assert!(fl.blocks[0].free_regs[0].contains(Register::Edi));
        // After the mov, eax carries the return value: not free at ret.
        assert!(!fl.blocks[0].free_regs[1].contains(Register::Eax));
    }

    #[test]
    fn call_blocks_liveness_in_both_directions() {
        let src = ".func main\nmain:\n  mov ebx, 9\n  call helper\nafter:\n  mov eax, ebx\n  ret\n.func helper\nhelper:\n  mov eax, 0\n  ret\n";
        let f = &parse_program(src).unwrap().functions[0];
        let fl = analyze_function(f);
        // The call consumes every register, so nothing is free right
        // before it, including registers the callee never touches.
        let term = f.blocks[0].instructions.len();
        assert_eq!(fl.blocks[0].free_regs[term], RegSet::EMPTY);
        // ebx carries a value across the call into the next block, where
        // `mov eax, ebx` still needs it.
        assert!(!fl.blocks[1].free_regs[0].contains(Register::Ebx));
        // The mov kills ebx, so before it the register is free.
        assert!(fl.blocks[0].free_regs[0].contains(Register::Ebx));
    }
}

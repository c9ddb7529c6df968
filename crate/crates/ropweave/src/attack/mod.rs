//! Attack harness: the analyses an adversary would run against obfuscated
//! output, implemented as oracles over this crate's own artifacts.
//!
//! The threat model is maximally generous to the attacker: every analysis
//! gets the true gadget library, the load layout, and full knowledge of the
//! scheme. What it must not need is the obfuscation seed.
//!
//! * [`recursive_reach`] - disassembler-style recursive traversal coverage
//! * [`static_rop_recover`] - symbolic stack simulation of generator code,
//!   mapping resolved cells back to gadget instructions
//! * [`extract_immediates`] - periodic immediate scanning for string residue
//! * [`dynamic_rop_recover`] - gadget-instruction recovery from an execution
//!   trace
//! * [`export_constraints`] / [`brute_force_probe`] - opaque-constant
//!   hardness artifacts: SMT-LIB export and bounded input search

mod dynrec;
mod imm;
mod probe;
mod reach;
mod smt;
mod staticrec;

pub use dynrec::dynamic_rop_recover;
pub use imm::extract_immediates;
pub use probe::{brute_force_probe, HardnessReport};
pub use reach::{recursive_reach, ReachReport, StopReason};
pub use smt::export_constraints;
pub use staticrec::static_rop_recover;

use crate::asm::{Function, Instruction};
use serde::Serialize;

/// Where a recovered instruction came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Provenance {
    /// Mapped from a gadget at this library vaddr.
    FromGadget(u32),
    /// Synthesized from a data cell (immediate or label operand).
    FromImmediate,
    /// Copied verbatim from the analyzed code.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredInstruction {
    pub instr: Instruction,
    pub provenance: Provenance,
}

/// What an analysis got back out of obfuscated code.
#[derive(Debug, Clone, Default)]
pub struct RecoveredListing {
    /// Recovered instructions in execution order.
    pub instructions: Vec<RecoveredInstruction>,
    /// Instruction-index ranges of the analyzed code the analysis gave up
    /// on (half-open, over the flattened input listing).
    pub unknown_regions: Vec<(usize, usize)>,
    /// Chain cells mapped to gadgets, consumed immediates, or labels.
    pub resolved_cells: usize,
    /// All pushed cells, including ones discarded on analysis aborts.
    pub total_cells: usize,
    /// Static recovery only: the listing reassembled into a runnable
    /// control-structured function.
    pub function: Option<Function>,
}

impl RecoveredListing {
    pub fn resolved_ratio(&self) -> f64 {
        if self.total_cells == 0 {
            0.0
        } else {
            self.resolved_cells as f64 / self.total_cells as f64
        }
    }

    /// The recovered instruction texts, for set comparisons across builds.
    pub fn texts(&self) -> Vec<String> {
        self.instructions
            .iter()
            .map(|r| crate::asm::print_instruction(&r.instr))
            .collect()
    }
}

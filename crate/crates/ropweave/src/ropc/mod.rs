//! Instruction-to-ROP-chain obfuscation.
//!
//! Each basic block is walked instruction by instruction: liveness supplies
//! scratch registers, decomposition rewrites the instruction into
//! gadget-shaped micro-operations, exchange planning realizes those against
//! the bound library, and emission replaces maximal runs of rewritten
//! instructions with a generator that pushes the chain in reverse order and
//! launches it with `ret`. Instructions that cannot be rewritten stay in
//! place verbatim and split the chain; conditional branches and calls get
//! their own generator, unconditional jumps and returns ride on the end of
//! the preceding chain.

mod decompose;
mod emit;
mod liveness;
mod plan;

pub use decompose::{decompose, DecomposeError};
pub use emit::{chain_elements, emit_generator, FlagsPolicy};
pub use liveness::{analyze_function, analyze_liveness, FnLiveness, LivenessInfo, ALLOCATABLE};
pub use plan::{lower_branch, plan_chain, BranchTargets};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{
    print_instruction, BasicBlock, Function, Instruction, Mnemonic, Operand, Program, Register,
};
use crate::gadgets::{GadgetClass, GadgetError, GadgetLibrary, SymbolOffset};
use crate::hiding::{fills_for, filtered_plan, select_for_plan, GeneratorHiding};
use crate::opaque::{
    protect_generator, protect_generator_filled, PredicateAlgorithm, PredicateConfig,
    PredicateMode,
};
use crate::rng::Rng;

/// How far a function is transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "roponly")]
    RopOnly,
    #[serde(rename = "rop-op-basic")]
    RopOpBasic,
    #[serde(rename = "rop-op-dse")]
    RopOpDse,
    #[serde(rename = "rop-op-dse-hiding")]
    RopOpDseHiding,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::Baseline,
        Level::RopOnly,
        Level::RopOpBasic,
        Level::RopOpDse,
        Level::RopOpDseHiding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Level::Baseline => "baseline",
            Level::RopOnly => "roponly",
            Level::RopOpBasic => "rop-op-basic",
            Level::RopOpDse => "rop-op-dse",
            Level::RopOpDseHiding => "rop-op-dse-hiding",
        }
    }

    /// Chains are emitted at all levels past baseline.
    pub fn chains(self) -> bool {
        self > Level::Baseline
    }

    /// Gadget addresses and immediates become opaque constants.
    pub fn protects_constants(self) -> bool {
        self >= Level::RopOpBasic
    }

    /// Predicate inputs come from runtime register state.
    pub fn dynamic_entropy(self) -> bool {
        self >= Level::RopOpDse
    }

    /// Decomposed instructions may hide inside predicate bodies.
    pub fn hides_instructions(self) -> bool {
        self >= Level::RopOpDseHiding
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Level, String> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown level '{s}'"))
    }
}

/// Whole-pipeline tuning knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObfuscationConfig {
    pub level: Level,
    pub seed: u64,
    #[serde(default)]
    pub predicate_algorithm: PredicateAlgorithm,
    /// 3-SAT clauses per variable (clause count = 32 * factor).
    #[serde(default = "default_sat_clause_factor")]
    pub sat_clause_factor: u32,
    /// Per-function level overrides by function name.
    #[serde(default)]
    pub per_function: BTreeMap<String, Level>,
}

fn default_sat_clause_factor() -> u32 {
    6
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        ObfuscationConfig {
            level: Level::RopOpDse,
            seed: 0,
            predicate_algorithm: PredicateAlgorithm::Factorization,
            sat_clause_factor: default_sat_clause_factor(),
            per_function: BTreeMap::new(),
        }
    }
}

impl ObfuscationConfig {
    pub fn level_for(&self, function: &str) -> Level {
        self.per_function
            .get(function)
            .copied()
            .unwrap_or(self.level)
    }
}

#[derive(Debug, Error)]
pub enum RopcError {
    #[error("no gadget realizes {0}")]
    NoGadget(String),
    #[error(transparent)]
    Gadget(#[from] GadgetError),
}

/// A gadget-shaped unit of work, plus where immediates/labels feed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MicroOp {
    LoadImm(Register, u32),
    LoadLabel(Register, String),
    Op(GadgetClass),
}

impl MicroOp {
    /// The instruction this micro-op performs, for hiding and recovery.
    pub fn instruction(&self) -> Instruction {
        use crate::asm::ins;
        match self {
            MicroOp::LoadImm(r, v) => ins::mov_ri(*r, *v),
            MicroOp::LoadLabel(r, l) => ins::mov_r_label(*r, l),
            MicroOp::Op(c) => c.instruction(),
        }
    }
}

/// Micro-op tagged with the source instruction (block index) it realizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Micro {
    pub op: MicroOp,
    pub origin: usize,
}

/// One chain element at the planning stage: a chosen gadget instance or a
/// data cell. `op` indexes the plan's micro list; exchange steps and
/// branch-pattern steps carry none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanStep {
    Gadget {
        class: GadgetClass,
        vaddr: u32,
        op: Option<usize>,
        exchange: bool,
    },
    ImmCell {
        value: u32,
        protectable: bool,
        op: Option<usize>,
    },
    LabelCell {
        label: String,
        op: Option<usize>,
    },
}

/// A fully planned chain: steps in execution order plus the micro-ops they
/// realize (for coverage accounting and hiding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainPlan {
    pub steps: Vec<PlanStep>,
    pub ops: Vec<Micro>,
}

fn class_writes_flags(c: GadgetClass) -> bool {
    matches!(
        c,
        GadgetClass::BinRR { .. } | GadgetClass::Mul(_) | GadgetClass::ShiftImm { .. }
    )
}

impl ChainPlan {
    pub fn new(steps: Vec<PlanStep>, ops: Vec<Micro>) -> ChainPlan {
        ChainPlan { steps, ops }
    }

    /// Every step occupies exactly one stack cell.
    pub fn cell_count(&self) -> usize {
        self.steps.len()
    }

    pub fn clobbers_flags(&self) -> bool {
        self.steps.iter().any(|s| match s {
            PlanStep::Gadget { class, .. } => class_writes_flags(*class),
            _ => false,
        })
    }
}

/// A resolved chain element as the generator will push it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainElement {
    GadgetRef(SymbolOffset),
    Immediate { value: u32, protectable: bool },
    ChainLabel(String),
}

/// Resolved chain, first-executed element first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RopChain {
    pub elements: Vec<ChainElement>,
    pub clobbers_flags: bool,
}

/// Outcome of attempting one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObfStatus {
    Obfuscated,
    NoGadgetOrReg,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrStatus {
    pub block: String,
    pub index: usize,
    pub text: String,
    pub terminator: bool,
    pub status: ObfStatus,
}

/// Per-instruction obfuscation statuses for one function.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub statuses: Vec<InstrStatus>,
}

impl CoverageRecord {
    pub fn obfuscated(&self) -> usize {
        self.statuses
            .iter()
            .filter(|s| s.status == ObfStatus::Obfuscated)
            .count()
    }

    pub fn total(&self) -> usize {
        self.statuses.len()
    }

    /// Fraction of all instructions obfuscated; 1.0 when empty.
    pub fn ratio(&self) -> f64 {
        if self.statuses.is_empty() {
            1.0
        } else {
            self.obfuscated() as f64 / self.total() as f64
        }
    }

    /// Fraction over non-terminator instructions only; 1.0 when none.
    pub fn non_terminator_ratio(&self) -> f64 {
        let body: Vec<_> = self.statuses.iter().filter(|s| !s.terminator).collect();
        if body.is_empty() {
            1.0
        } else {
            body.iter()
                .filter(|s| s.status == ObfStatus::Obfuscated)
                .count() as f64
                / body.len() as f64
        }
    }
}

/// One emitted generator: the block label holding it, the full plan, and
/// the micro-ops lifted out of the chain into predicate insertion points
/// (empty below the hiding level).
#[derive(Debug, Clone)]
pub struct GeneratorRecord {
    pub label: String,
    pub plan: ChainPlan,
    pub preserve_flags: bool,
    pub hidden: Vec<crate::hiding::HiddenOp>,
}

/// Obfuscation result for one function.
#[derive(Debug, Clone)]
pub struct ObfuscatedFunction {
    pub func: Function,
    pub generators: Vec<GeneratorRecord>,
    pub coverage: CoverageRecord,
}

/// Obfuscation result for a whole program.
#[derive(Debug, Clone)]
pub struct ObfuscatedProgram {
    pub program: Program,
    pub functions: Vec<FunctionReport>,
}

#[derive(Debug, Clone)]
pub struct FunctionReport {
    pub name: String,
    pub level: Level,
    pub coverage: CoverageRecord,
    pub generators: Vec<GeneratorRecord>,
}

const PLAN_ATTEMPTS: usize = 8;

/// Tries to extend the open run with one instruction: decompose with fresh
/// scratch draws, then re-plan the whole run, retrying a few times since a
/// different scratch can unlock a plan.
fn try_instruction(
    i: &Instruction,
    free: crate::asm::RegSet,
    flags_dead_after: bool,
    run_ops: &[Micro],
    origin: usize,
    lib: &GadgetLibrary,
    rng: &mut Rng,
) -> Result<(Vec<Micro>, Vec<PlanStep>), ObfStatus> {
    let mut last = ObfStatus::NoGadgetOrReg;
    for _ in 0..PLAN_ATTEMPTS {
        match decompose(i, free, flags_dead_after, rng) {
            Ok(micros) => {
                let mut candidate = run_ops.to_vec();
                candidate.extend(micros.into_iter().map(|op| Micro { op, origin }));
                match plan_chain(&candidate, lib, rng) {
                    Ok(steps) => return Ok((candidate, steps)),
                    Err(_) => {
                        last = ObfStatus::NoGadgetOrReg;
                    }
                }
            }
            Err(DecomposeError::NoFreeRegister) => return Err(ObfStatus::NoGadgetOrReg),
            Err(DecomposeError::Unsupported(reason)) => return Err(ObfStatus::Other(reason)),
        }
    }
    Err(last)
}

struct FunctionBuilder<'a> {
    lib: &'a GadgetLibrary,
    rng: &'a mut Rng,
    /// When set, every emitted generator gets its constants rebuilt as
    /// opaque-predicate accumulations.
    protect: Option<PredicateConfig>,
    /// Lift eligible micro-ops into predicate bodies and dummy-fill the rest.
    hide: bool,
    out_blocks: Vec<BasicBlock>,
    generators: Vec<GeneratorRecord>,
    statuses: Vec<InstrStatus>,
    used_labels: HashSet<String>,
    fresh_counter: usize,
    fn_name: String,
    // Open output block.
    cur_label: String,
    cur_instrs: Vec<Instruction>,
}

impl FunctionBuilder<'_> {
    fn fresh_label(&mut self) -> String {
        loop {
            let l = format!(".L{}.g{}", self.fn_name, self.fresh_counter);
            self.fresh_counter += 1;
            if self.used_labels.insert(l.clone()) {
                return l;
            }
        }
    }

    /// Closes the open block with a generator for `plan`. The generator's
    /// trailing ret terminates the block; `cont` names the next one.
    ///
    /// All emission randomness comes from a forked sub-stream so the main
    /// stream advances by exactly one draw per generator regardless of
    /// level. Planning draws therefore line up across levels of the same
    /// seed, and a hiding build's plans equal the plain-protected build's
    /// plans, which is what makes trace-recovery deficits attributable to
    /// hiding alone.
    fn flush_generator(
        &mut self,
        plan: ChainPlan,
        preserve_flags: bool,
        cont: Option<String>,
    ) -> Result<(), RopcError> {
        let policy = if preserve_flags {
            FlagsPolicy::Preserve
        } else {
            FlagsPolicy::Clobber
        };
        let rng = &mut self.rng.fork("flush");
        let gh = if self.hide {
            select_for_plan(&plan, rng)
        } else {
            GeneratorHiding::default()
        };
        let code = if self.hide {
            let filtered = filtered_plan(&plan, &gh.hidden);
            emit_generator(&filtered, self.lib, rng, policy)?
        } else {
            emit_generator(&plan, self.lib, rng, policy)?
        };
        let code = match &self.protect {
            // At the hiding level every insertion point gets occupied, by a
            // hidden op or a dummy.
            Some(pc) if self.hide => {
                let fills = fills_for(&gh);
                protect_generator_filled(&code, pc, rng, Some(&fills))
            }
            Some(pc) => protect_generator(&code, pc, rng),
            None => code,
        };
        let (term, body) = code.split_last().expect("generator always ends in ret");
        let mut instrs = std::mem::take(&mut self.cur_instrs);
        instrs.extend_from_slice(body);
        self.out_blocks.push(BasicBlock {
            label: self.cur_label.clone(),
            instructions: instrs,
            terminator: term.clone(),
        });
        self.generators.push(GeneratorRecord {
            label: self.cur_label.clone(),
            plan,
            preserve_flags,
            hidden: gh.hidden,
        });
        if let Some(c) = cont {
            self.cur_label = c;
        }
        Ok(())
    }

    fn record(&mut self, block: &str, index: usize, i: &Instruction, status: ObfStatus) {
        self.statuses.push(InstrStatus {
            block: block.to_string(),
            index,
            text: print_instruction(i),
            terminator: i.mnemonic.is_terminator(),
            status,
        });
    }
}

/// Obfuscates one function at the level `cfg` assigns it. The rng must be
/// this function's own stream for deterministic parallel builds.
pub fn obfuscate_function(
    f: &Function,
    lib: &GadgetLibrary,
    cfg: &ObfuscationConfig,
    rng: &mut Rng,
) -> Result<ObfuscatedFunction, RopcError> {
    let level = cfg.level_for(&f.name);
    if !level.chains() {
        return Ok(ObfuscatedFunction {
            func: f.clone(),
            generators: Vec::new(),
            coverage: CoverageRecord::default(),
        });
    }

    let fl = analyze_function(f);
    let protect = level.protects_constants().then(|| PredicateConfig {
        mode: if level.dynamic_entropy() {
            PredicateMode::Dse
        } else {
            PredicateMode::Basic
        },
        algorithm: cfg.predicate_algorithm,
        sat_factor: cfg.sat_clause_factor,
    });
    let mut b = FunctionBuilder {
        lib,
        rng,
        protect,
        hide: level.hides_instructions(),
        out_blocks: Vec::new(),
        generators: Vec::new(),
        statuses: Vec::new(),
        used_labels: f.blocks.iter().map(|x| x.label.clone()).collect(),
        fresh_counter: 0,
        fn_name: f.name.clone(),
        cur_label: String::new(),
        cur_instrs: Vec::new(),
    };

    for (bi, block) in f.blocks.iter().enumerate() {
        b.cur_label = block.label.clone();
        b.cur_instrs = Vec::new();
        let mut run_ops: Vec<Micro> = Vec::new();
        let mut run_steps: Vec<PlanStep> = Vec::new();
        let mut run_wrap = false;

        for (i, instr) in block.instructions.iter().enumerate() {
            let free = fl.blocks[bi].free_regs[i];
            let dead = !fl.blocks[bi].flags_live_after[i];
            match try_instruction(instr, free, dead, &run_ops, i, lib, b.rng) {
                Ok((ops, steps)) => {
                    if run_ops.is_empty() {
                        run_wrap = fl.flags_live_in[bi][i];
                    }
                    run_ops = ops;
                    run_steps = steps;
                    b.record(&block.label, i, instr, ObfStatus::Obfuscated);
                }
                Err(status) => {
                    if !run_ops.is_empty() {
                        let cont = b.fresh_label();
                        let mut steps = std::mem::take(&mut run_steps);
                        steps.push(PlanStep::LabelCell {
                            label: cont.clone(),
                            op: None,
                        });
                        let plan = ChainPlan::new(steps, std::mem::take(&mut run_ops));
                        b.flush_generator(plan, run_wrap, Some(cont))?;
                    }
                    b.cur_instrs.push(instr.clone());
                    b.record(&block.label, i, instr, status);
                }
            }
        }

        // Terminator. jmp and ret ride on the open run; jcc and call get
        // their own generator (the run, if open, chains into it).
        let term_idx = block.instructions.len();
        let term = &block.terminator;
        let fall = f.blocks.get(bi + 1).map(|nb| nb.label.clone());
        let targets = BranchTargets {
            taken: match term.operands.first() {
                Some(Operand::Label(l)) => Some(l.clone()),
                _ => None,
            },
            fall,
        };
        let term_wrap = fl.flags_live_in[bi][term_idx];

        let own_generator = matches!(term.mnemonic, Mnemonic::Jcc(_) | Mnemonic::Call);
        let lowered: Result<Vec<PlanStep>, ObfStatus> = match term.mnemonic {
            Mnemonic::Jcc(_) => {
                let free = fl.blocks[bi].free_regs[term_idx];
                if free.contains(Register::Eax) && free.contains(Register::Ecx) {
                    lower_branch(term, lib, &targets, b.rng)
                        .map_err(|_| ObfStatus::NoGadgetOrReg)
                } else {
                    Err(ObfStatus::NoGadgetOrReg)
                }
            }
            _ => lower_branch(term, lib, &targets, b.rng).map_err(|e| match e {
                RopcError::NoGadget(r) => ObfStatus::Other(r),
                other => ObfStatus::Other(other.to_string()),
            }),
        };

        match lowered {
            Ok(term_steps) if own_generator => {
                if !run_ops.is_empty() {
                    let cont = b.fresh_label();
                    let mut steps = std::mem::take(&mut run_steps);
                    steps.push(PlanStep::LabelCell {
                        label: cont.clone(),
                        op: None,
                    });
                    let plan = ChainPlan::new(steps, std::mem::take(&mut run_ops));
                    b.flush_generator(plan, run_wrap, Some(cont))?;
                }
                let plan = ChainPlan::new(term_steps, Vec::new());
                b.flush_generator(plan, term_wrap, None)?;
                b.record(&block.label, term_idx, term, ObfStatus::Obfuscated);
            }
            Ok(term_steps) => {
                let wrap = if run_ops.is_empty() {
                    term_wrap
                } else {
                    run_wrap
                };
                let mut steps = std::mem::take(&mut run_steps);
                steps.extend(term_steps);
                let plan = ChainPlan::new(steps, std::mem::take(&mut run_ops));
                b.flush_generator(plan, wrap, None)?;
                b.record(&block.label, term_idx, term, ObfStatus::Obfuscated);
            }
            Err(status) => {
                if !run_ops.is_empty() {
                    let cont = b.fresh_label();
                    let mut steps = std::mem::take(&mut run_steps);
                    steps.push(PlanStep::LabelCell {
                        label: cont.clone(),
                        op: None,
                    });
                    let plan = ChainPlan::new(steps, std::mem::take(&mut run_ops));
                    b.flush_generator(plan, run_wrap, Some(cont))?;
                }
                let instrs = std::mem::take(&mut b.cur_instrs);
                b.out_blocks.push(BasicBlock {
                    label: b.cur_label.clone(),
                    instructions: instrs,
                    terminator: term.clone(),
                });
                b.record(&block.label, term_idx, term, status);
            }
        }
    }

    Ok(ObfuscatedFunction {
        func: Function {
            name: f.name.clone(),
            blocks: b.out_blocks,
        },
        generators: b.generators,
        coverage: CoverageRecord {
            statuses: b.statuses,
        },
    })
}

/// Obfuscates every function independently on its own rng stream derived
/// from (seed, name), keeping output byte-stable under any scheduling.
pub fn obfuscate_program(
    p: &Program,
    lib: &GadgetLibrary,
    cfg: &ObfuscationConfig,
) -> Result<ObfuscatedProgram, RopcError> {
    let mut functions = Vec::new();
    let mut out = Vec::new();
    for f in &p.functions {
        let mut rng = Rng::for_function(cfg.seed, &f.name);
        let obf = obfuscate_function(f, lib, cfg, &mut rng)?;
        functions.push(FunctionReport {
            name: f.name.clone(),
            level: cfg.level_for(&f.name),
            coverage: obf.coverage,
            generators: obf.generators,
        });
        out.push(obf.func);
    }
    Ok(ObfuscatedProgram {
        program: Program {
            functions: out,
            data: p.data.clone(),
        },
        functions,
    })
}

//! Brute-force hardness probes for opaque predicates.
//!
//! A probe models both predicate inputs as free 32-bit words (the baked
//! input is known to the attacker and excluded) and searches, within an
//! attempt budget, for an input whose accumulated bit differs from the
//! declared one. Factorization predicates flip only on a factor pair of
//! the constant, so the search is trial division: effortless while the
//! constant fits in the input range, hopeless once it is a prime beyond
//! it. Three-sat predicates flip only on a satisfying assignment of a
//! formula chosen to have none.

use crate::opaque::{Clause, InputSource, Polarity, PredicateInstance, PredicateParams};

/// Probe outcome. `solved` implies `witness` is attached and has been
/// re-verified to flip the declared bit by direct evaluation.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct HardnessReport {
    /// Which predicate was probed, in human terms.
    pub predicate: String,
    /// Size of the modeled input space.
    pub search_space: u128,
    /// Candidates examined.
    pub attempts: u64,
    /// A verified flipping input was found.
    pub solved: bool,
    pub witness: Option<(u32, u32)>,
    /// The search never exceeded its attempt budget.
    pub budget_honored: bool,
}

/// Searches for an input on which `pred` yields the opposite of its
/// declared output bit, examining at most `budget` candidates.
pub fn brute_force_probe(pred: &PredicateInstance, budget: u64) -> HardnessReport {
    let baked = match pred.input_source {
        InputSource::RandomConst(x, y) | InputSource::ChosenConst(x, y) => Some((x, y)),
        InputSource::RuntimeRegs { .. } => None,
    };
    let (search_space, attempts, witness) = match &pred.params {
        PredicateParams::Factorization { c, polarity } => {
            let flips_on_product = matches!(
                (polarity, pred.output_bit),
                (Polarity::Eq, 0) | (Polarity::Ne, 1)
            );
            let (attempts, witness) = if flips_on_product {
                factor_search(*c, baked, budget)
            } else {
                mismatch_search(*c, baked, budget)
            };
            (1u128 << 64, attempts, witness)
        }
        PredicateParams::ThreeSat { clauses, .. } => {
            let (attempts, witness) = assignment_search(clauses, budget);
            (1u128 << 32, attempts, witness)
        }
    };
    let solved = witness.is_some_and(|w| flips(pred, w));
    HardnessReport {
        predicate: describe(pred),
        search_space,
        attempts,
        solved,
        witness: solved.then(|| witness.unwrap()),
        budget_honored: attempts <= budget,
    }
}

/// Direct evaluation of the predicate's accumulated bit on an input pair.
pub fn predicate_bit(pred: &PredicateInstance, input: (u32, u32)) -> u8 {
    match &pred.params {
        PredicateParams::Factorization { c, polarity } => {
            let hit = input.0 as u64 * input.1 as u64 == *c;
            match polarity {
                Polarity::Eq => hit as u8,
                Polarity::Ne => !hit as u8,
            }
        }
        PredicateParams::ThreeSat { clauses, .. } => {
            let satisfied = clauses.iter().all(|cl| cl.eval(input.0));
            // The body accumulates the conjunction, negated when the
            // declared bit is 1.
            (satisfied as u8) ^ pred.output_bit
        }
    }
}

fn flips(pred: &PredicateInstance, input: (u32, u32)) -> bool {
    predicate_bit(pred, input) != pred.output_bit
}

/// Trial division: the flip set is exactly the in-range factor pairs of
/// `c`, minus the baked pair the attacker already observed.
fn factor_search(c: u64, baked: Option<(u32, u32)>, budget: u64) -> (u64, Option<(u32, u32)>) {
    let mut attempts = 0u64;
    let mut d = 1u64;
    while attempts < budget && d.saturating_mul(d) <= c {
        attempts += 1;
        if c % d == 0 {
            let e = c / d;
            for (x, y) in [(d, e), (e, d)] {
                if x <= u32::MAX as u64 && y <= u32::MAX as u64 {
                    let cand = (x as u32, y as u32);
                    if Some(cand) != baked {
                        return (attempts, Some(cand));
                    }
                }
            }
        }
        d += 1;
    }
    (attempts, None)
}

/// The flip set is every pair whose product differs from `c`; a small
/// grid always contains one.
fn mismatch_search(c: u64, baked: Option<(u32, u32)>, budget: u64) -> (u64, Option<(u32, u32)>) {
    let mut attempts = 0u64;
    for x in 0..=15u32 {
        for y in 0..=15u32 {
            if attempts >= budget {
                return (attempts, None);
            }
            attempts += 1;
            if Some((x, y)) != baked && x as u64 * y as u64 != c {
                return (attempts, Some((x, y)));
            }
        }
    }
    (attempts, None)
}

/// The flip set is the satisfying assignments; the builder only ships
/// formulas proved to have none.
fn assignment_search(clauses: &[Clause], budget: u64) -> (u64, Option<(u32, u32)>) {
    let limit = budget.min(1 << 32);
    for w in 0..limit {
        if clauses.iter().all(|cl| cl.eval(w as u32)) {
            return (w + 1, Some((w as u32, 0)));
        }
    }
    (limit, None)
}

fn describe(pred: &PredicateInstance) -> String {
    let kind = format!("{:?}", pred.kind).to_lowercase();
    match &pred.params {
        PredicateParams::Factorization { c, polarity } => {
            let rel = match polarity {
                Polarity::Eq => "==",
                Polarity::Ne => "!=",
            };
            format!("factorization {kind}: x*y {rel} {c:#x} -> {}", pred.output_bit)
        }
        PredicateParams::ThreeSat { clauses, .. } => format!(
            "3sat {kind}: {} clauses -> {}",
            clauses.len(),
            pred.output_bit
        ),
    }
}

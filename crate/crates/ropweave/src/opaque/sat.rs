//! Random 3-SAT instances and the UNSAT decision procedure behind the
//! three-sat predicate family.
//!
//! A predicate body evaluates a random CNF over the 32 bits of an input
//! word. The formula is kept only if a complete DPLL search proves it
//! unsatisfiable, which makes the negated formula a constant-true predicate
//! no matter what the input word is.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub const SAT_VARS: u8 = 32;

/// One literal: variable index 0..32, optionally negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lit {
    pub var: u8,
    pub neg: bool,
}

/// Three literals over distinct variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause(pub [Lit; 3]);

impl Clause {
    /// Evaluates the clause over an assignment packed into a word
    /// (bit `var` of `w` is the variable's value).
    pub fn eval(&self, w: u32) -> bool {
        self.0
            .iter()
            .any(|l| ((w >> l.var) & 1 == 1) != l.neg)
    }

    /// Mask/expect pair: the clause is FALSE exactly when
    /// `(w & mask) == expect` (all three literals falsified).
    pub fn mask_expect(&self) -> (u32, u32) {
        let mut mask = 0u32;
        let mut expect = 0u32;
        for l in self.0 {
            mask |= 1 << l.var;
            if l.neg {
                expect |= 1 << l.var;
            }
        }
        (mask, expect)
    }
}

/// Outcome of the UNSAT check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SatOutcome {
    Unsat,
    /// Satisfying assignment packed into a word, bit i = variable i.
    SatWitness(u32),
    /// Conflict budget exhausted before the search completed.
    Budget,
}

const CONFLICT_BUDGET: u64 = 1_000_000;

/// Complete DPLL search with unit propagation and a conflict budget.
pub fn verify_3sat_unsat(clauses: &[Clause]) -> SatOutcome {
    let mut assign: Vec<Option<bool>> = vec![None; SAT_VARS as usize];
    let mut conflicts = 0u64;
    match dpll(clauses, &mut assign, &mut conflicts) {
        Err(()) => SatOutcome::Budget,
        Ok(Some(w)) => SatOutcome::SatWitness(w),
        Ok(None) => SatOutcome::Unsat,
    }
}

/// Ok(Some(witness)) = satisfiable, Ok(None) = exhausted without a model,
/// Err(()) = budget blown.
fn dpll(
    clauses: &[Clause],
    assign: &mut Vec<Option<bool>>,
    conflicts: &mut u64,
) -> Result<Option<u32>, ()> {
    // Unit propagation; `trail` remembers forced assignments for undo.
    let mut trail: Vec<u8> = Vec::new();
    let undo = |assign: &mut Vec<Option<bool>>, trail: &[u8]| {
        for &v in trail {
            assign[v as usize] = None;
        }
    };
    loop {
        let mut forced = None;
        let mut all_satisfied = true;
        for c in clauses {
            let mut unassigned = None;
            let mut satisfied = false;
            let mut free = 0;
            for l in c.0 {
                match assign[l.var as usize] {
                    Some(v) if v != l.neg => {
                        satisfied = true;
                        break;
                    }
                    Some(_) => {}
                    None => {
                        free += 1;
                        unassigned = Some(l);
                    }
                }
            }
            if satisfied {
                continue;
            }
            all_satisfied = false;
            match (free, unassigned) {
                (0, _) => {
                    // Conflict: every literal false.
                    *conflicts += 1;
                    if *conflicts > CONFLICT_BUDGET {
                        undo(assign, &trail);
                        return Err(());
                    }
                    undo(assign, &trail);
                    return Ok(None);
                }
                (1, Some(l)) => {
                    forced = Some(l);
                    break;
                }
                _ => {}
            }
        }
        if all_satisfied {
            let w = witness(assign);
            undo(assign, &trail);
            return Ok(Some(w));
        }
        match forced {
            Some(l) => {
                assign[l.var as usize] = Some(!l.neg);
                trail.push(l.var);
            }
            None => break,
        }
    }

    let var = assign.iter().position(|a| a.is_none()).expect("unassigned var exists");
    for value in [true, false] {
        assign[var] = Some(value);
        let r = dpll(clauses, assign, conflicts);
        assign[var] = None;
        match r {
            Ok(None) => {}
            other => {
                undo(assign, &trail);
                return other;
            }
        }
    }
    undo(assign, &trail);
    Ok(None)
}

fn witness(assign: &[Option<bool>]) -> u32 {
    let mut w = 0u32;
    for (i, a) in assign.iter().enumerate() {
        if *a == Some(true) {
            w |= 1 << i;
        }
    }
    w
}

/// Draws a random 3-CNF with `32 * n_factor` clauses over the 32 variables;
/// each clause uses three distinct variables with random polarity.
pub fn random_cnf(rng: &mut Rng, n_factor: u32) -> Vec<Clause> {
    let n_clauses = 32 * n_factor as usize;
    let mut out = Vec::with_capacity(n_clauses);
    for _ in 0..n_clauses {
        let mut vars = [0u8; 3];
        for i in 0..3 {
            loop {
                let v = rng.below(SAT_VARS as u64) as u8;
                if !vars[..i].contains(&v) {
                    vars[i] = v;
                    break;
                }
            }
        }
        let lits = vars.map(|var| Lit {
            var,
            neg: rng.chance(1, 2),
        });
        out.push(Clause(lits));
    }
    out
}

/// Draws random CNFs until one verifies unsatisfiable.
pub(crate) fn unsat_cnf(rng: &mut Rng, n_factor: u32) -> Vec<Clause> {
    for _ in 0..1000 {
        let clauses = random_cnf(rng, n_factor);
        if verify_3sat_unsat(&clauses) == SatOutcome::Unsat {
            return clauses;
        }
    }
    panic!("could not draw an unsatisfiable CNF at clause factor {n_factor}");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(var: u8, neg: bool) -> Lit {
        Lit { var, neg }
    }

    #[test]
    fn contradiction_padded_to_three_literals_is_unsat() {
        let clauses = [
            Clause([lit(0, false), lit(0, false), lit(0, false)]),
            Clause([lit(0, true), lit(0, true), lit(0, true)]),
        ];
        assert_eq!(verify_3sat_unsat(&clauses), SatOutcome::Unsat);
    }

    #[test]
    fn single_clause_yields_a_witness() {
        let clauses = [Clause([lit(0, false), lit(1, false), lit(2, false)])];
        match verify_3sat_unsat(&clauses) {
            SatOutcome::SatWitness(w) => assert!(clauses[0].eval(w)),
            other => panic!("expected witness, got {other:?}"),
        }
    }

    #[test]
    fn witnesses_satisfy_every_clause() {
        let mut rng = Rng::seeded(11);
        // Sparse instances are satisfiable nearly always; check the model.
        for _ in 0..20 {
            let clauses = random_cnf(&mut rng, 1);
            if let SatOutcome::SatWitness(w) = verify_3sat_unsat(&clauses) {
                assert!(clauses.iter().all(|c| c.eval(w)));
            }
        }
    }

    #[test]
    fn dense_random_instances_are_unsat_with_high_probability() {
        let mut rng = Rng::seeded(3);
        let mut unsat = 0;
        for _ in 0..100 {
            if verify_3sat_unsat(&random_cnf(&mut rng, 6)) == SatOutcome::Unsat {
                unsat += 1;
            }
        }
        // Clause/variable ratio 6 sits far above the satisfiability
        // threshold; allow a little slack for unlucky draws.
        assert!(unsat >= 95, "only {unsat}/100 instances were UNSAT");
    }

    #[test]
    fn mask_expect_agrees_with_eval() {
        let mut rng = Rng::seeded(5);
        for _ in 0..200 {
            let c = random_cnf(&mut rng, 1)[0];
            let w = rng.next_u32();
            let (mask, expect) = c.mask_expect();
            assert_eq!(c.eval(w), (w & mask) != expect);
        }
    }
}

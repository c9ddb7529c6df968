//! SMT-LIB export of an opaque constant's defining constraints.
//!
//! The script models the 32 predicate bodies over bitvectors, accumulates
//! their bits, applies the XOR mask, and asserts that the result differs
//! from the recorded target. A solver reporting unsat certifies that the
//! computation produces the target on every reachable input; a model is a
//! diverging input. Baked inputs appear as concrete words; runtime-derived
//! inputs are unconstrained, which matches the body because the register
//! mixing step is a bijection in its first operand.

use std::fmt::Write;

use crate::opaque::{InputSource, OpaqueConstant, Polarity, PredicateParams};

/// Renders `oc` as a self-contained SMT-LIB 2 script in QF_BV.
pub fn export_constraints(oc: &OpaqueConstant) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "(set-logic QF_BV)");
    let _ = writeln!(
        s,
        "; opaque constant: 32 predicate bits, msb first, xor {:#010x}",
        oc.xor_mask
    );
    for (i, pred) in oc.predicates.iter().enumerate() {
        let (x, y) = match pred.input_source {
            InputSource::RandomConst(x, y) | InputSource::ChosenConst(x, y) => {
                (word(x), word(y))
            }
            InputSource::RuntimeRegs { y, .. } => {
                let _ = writeln!(s, "(declare-const in{i} (_ BitVec 32))");
                (format!("in{i}"), word(y))
            }
        };
        let bit = match &pred.params {
            PredicateParams::Factorization { c, polarity } => {
                let rel = match polarity {
                    Polarity::Eq => "=",
                    Polarity::Ne => "distinct",
                };
                format!(
                    "(ite ({rel} (bvmul ((_ zero_extend 32) {x}) ((_ zero_extend 32) {y})) \
                     #x{c:016x}) #b1 #b0)"
                )
            }
            PredicateParams::ThreeSat { clauses, .. } => {
                // A clause over word w is satisfied iff (w & mask) != expect.
                let conj: Vec<String> = clauses
                    .iter()
                    .map(|cl| {
                        let (mask, expect) = cl.mask_expect();
                        format!("(distinct (bvand {x} {}) {})", word(mask), word(expect))
                    })
                    .collect();
                let conj = format!("(and {})", conj.join(" "));
                // Declared-one instances accumulate the negated conjunction.
                if pred.output_bit == 1 {
                    format!("(ite {conj} #b0 #b1)")
                } else {
                    format!("(ite {conj} #b1 #b0)")
                }
            }
        };
        let _ = writeln!(s, "(define-fun bit{i} () (_ BitVec 1) {bit})");
        let prev = if i == 0 {
            "#x00000000".to_string()
        } else {
            format!("acc{}", i - 1)
        };
        let _ = writeln!(
            s,
            "(define-fun acc{i} () (_ BitVec 32) \
             (bvor (bvshl {prev} #x00000001) ((_ zero_extend 31) bit{i})))"
        );
    }
    let _ = writeln!(
        s,
        "(define-fun value () (_ BitVec 32) (bvxor acc31 {}))",
        word(oc.xor_mask)
    );
    let _ = writeln!(s, "(assert (distinct value {}))", word(oc.target));
    let _ = writeln!(s, "(check-sat)");
    s
}

fn word(v: u32) -> String {
    format!("#x{v:08x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opaque::{
        build_opaque_constant, PredicateAlgorithm, PredicateConfig, PredicateMode,
    };
    use crate::rng::Rng;

    fn build(mode: PredicateMode, algorithm: PredicateAlgorithm, seed: u64) -> OpaqueConstant {
        let mut rng = Rng::seeded(seed);
        build_opaque_constant(0xdead_beef, &PredicateConfig::new(mode, algorithm), &mut rng)
    }

    fn check_shape(script: &str) {
        assert!(script.starts_with("(set-logic QF_BV)"));
        assert!(script.trim_end().ends_with("(check-sat)"));
        for i in 0..32 {
            assert!(script.contains(&format!("(define-fun bit{i} ")));
            assert!(script.contains(&format!("(define-fun acc{i} ")));
        }
        assert!(script.contains("(assert (distinct value #xdeadbeef))"));
        let open = script.matches('(').count();
        let close = script.matches(')').count();
        assert_eq!(open, close, "unbalanced parens");
    }

    #[test]
    fn baked_input_constants_export_with_no_free_variables() {
        let script = export_constraints(&build(
            PredicateMode::Basic,
            PredicateAlgorithm::Factorization,
            41,
        ));
        check_shape(&script);
        assert!(!script.contains("declare-const"));
        assert!(script.contains("bvmul"));
    }

    #[test]
    fn runtime_inputs_become_unconstrained_words() {
        let script = export_constraints(&build(
            PredicateMode::Dse,
            PredicateAlgorithm::Factorization,
            43,
        ));
        check_shape(&script);
        let frees = script.matches("(declare-const in").count();
        assert!(frees >= 1, "a dse constant draws runtime inputs");
        assert!(frees < 32, "baked inputs stay concrete");
    }

    #[test]
    fn three_sat_bodies_export_clause_constraints() {
        let script = export_constraints(&build(
            PredicateMode::Basic,
            PredicateAlgorithm::ThreeSat,
            47,
        ));
        check_shape(&script);
        assert!(script.contains("(distinct (bvand "));
        assert!(!script.contains("bvmul"));
    }

    #[test]
    fn accumulator_mirrors_the_recorded_bits() {
        // The script's bit/acc chain encodes accumulated_bits(); spot-check
        // that declared bits drive the ite arms in the right direction.
        let oc = build(PredicateMode::Basic, PredicateAlgorithm::ThreeSat, 53);
        let script = export_constraints(&oc);
        for (i, p) in oc.predicates.iter().enumerate() {
            let line = script
                .lines()
                .find(|l| l.contains(&format!("(define-fun bit{i} ")))
                .unwrap();
            // Shipped formulas are unsat, so the conjunction is false and
            // the else arm is the bit that must match the declaration.
            assert!(line.trim_end().ends_with(&format!("#b{}))", p.output_bit)));
        }
    }
}

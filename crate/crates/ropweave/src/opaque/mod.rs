//! Opaque predicates and opaque constants.
//!
//! Predicates are short instruction sequences whose output bit is known at
//! generation time but hard to recover statically; 32 of them plus an XOR
//! mask form an opaque constant. Generators produced by the chain emitter
//! can be rewritten so that every gadget address and protectable immediate
//! is computed by such a constant instead of being pushed literally.

use serde::{Deserialize, Serialize};

mod constant;
mod predicate;
pub mod prime;
pub mod sat;

pub use constant::{
    build_opaque_constant, emit_opaque_constant, protect_generator, OpaqueConstant,
};
pub(crate) use constant::{protect_generator_filled, PointFill, POINTS_PER_CONSTANT};
pub use predicate::{
    gen_predicate, InputSource, Polarity, PredicateConfig, PredicateInstance, PredicateKind,
    PredicateMode, PredicateParams, DEFAULT_SAT_FACTOR,
};
pub use sat::{random_cnf, verify_3sat_unsat, Clause, Lit, SatOutcome};

/// Which predicate family backs opaque constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PredicateAlgorithm {
    #[default]
    Factorization,
    ThreeSat,
}

//! ROP-chain obfuscation toolchain for a 32-bit x86 assembly subset.
//!
//! The pipeline rewrites each obfuscatable instruction of a source program into
//! a chain of single-instruction "microgadgets" (one instruction followed by
//! `ret`) harvested from a shared library image. A generator sequence pushes
//! the chain onto the stack in reverse order and launches it with `ret`, so
//! static disassembly of the rewritten function sees only pushes of opaque
//! library offsets. On top of the chains, two hardening layers are available:
//!
//! * **Opaque constants** replace every pushed gadget address and protectable
//!   immediate with a sequence of 32 one-bit opaque predicates whose outputs
//!   are accumulated into the value at run time.
//! * **Instruction hiding** moves part of the decomposed computation into the
//!   predicate bodies themselves, filling the remaining slots with dummy code,
//!   so even a perfect dynamic chain recovery misses the hidden operations.
//!
//! The crate also ships the measurement side: a deterministic emulator for the
//! subset (used for differential testing), a gadget extractor and synthetic
//! ELF32 library builder, and implementations of the four analysis attacks the
//! scheme is evaluated against (recursive traversal, static chain recovery,
//! immediate extraction, dynamic trace recovery, plus an SMT/probe proxy for
//! symbolic execution).
//!
//! Module map:
//!
//! * [`asm`] - instruction set: parser, printer, encoder/decoder, footprints, CFG
//! * [`gadgets`] - ELF32 images, Galileo-style extraction, gadget library, anchoring
//! * [`ropc`] - liveness, decomposition, exchange-aware chain planning, generator emission
//! * [`opaque`] - opaque predicates (factorization / 3-SAT) and opaque constants
//! * [`hiding`] - instruction hiding inside predicate bodies
//! * [`emu`] - flat 32-bit emulator, process loading, tracing, differential runs
//! * [`attack`] - the attack harness
//! * [`cli`] - configuration, metrics, and the `ropweave` subcommands

pub mod asm;
pub mod attack;
pub mod cli;
pub mod emu;
pub mod gadgets;
pub mod hiding;
pub mod opaque;
pub mod ropc;
pub mod rng;

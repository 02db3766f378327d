//! Desk-scale mixture-of-experts layer whose expert weights are split into a
//! shared low-rank component and per-expert complements, plus the subspace
//! metrics needed to watch what the experts actually learn.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`] — dense row-major `f64` matrices with a deterministic
//!   one-sided Jacobi SVD, Householder QR, and projector helpers.
//! * [`metrics`] — principal-subspace similarity, spectral energy profiles,
//!   activation and gate-alignment diagnostics.
//! * [`decoupled`] — the decoupled linear weight: a rank-`k` common factor
//!   `U_k Σ_k V_kᵀ` plus per-expert unique matrices living in the double
//!   orthogonal complement, with gradient splitting and periodic re-anchoring.
//! * [`moe`] — a SwiGLU mixture-of-experts layer (softmax routing, top-`n`
//!   selection, exact manual backward, load-balance loss, gradient checker).
//! * [`harness`] — planted-subspace synthetic tasks and a seeded training
//!   loop with similarity/orthogonality bookkeeping.
//! * [`checkpoint`], [`runconfig`], [`report`] — binary checkpoints, the flat
//!   `key = value` run-config format, and deterministic CSV/JSON reports.
//!
//! Everything is plain safe Rust over `Vec<f64>`; given equal seeds and
//! inputs, every public operation produces bit-identical output.

pub mod checkpoint;
pub mod decoupled;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod moe;
pub mod optim;
pub mod report;
pub mod runconfig;

pub(crate) mod util;

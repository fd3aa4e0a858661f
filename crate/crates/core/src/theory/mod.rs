//! Executable versions of the theoretical claims: stationary-point transfer
//! checks, the PAC-Bayes bound and its radius sweep, and convergence-rate
//! diagnostics.

mod bound;
mod convergence;
mod lemma;

pub use bound::{
    bound_alpha_sweep, log_grid, pac_bound, pac_bound_with, sqrt_term, BoundForm, BoundInputs, ExistenceCheck, SweepInputs,
    SweepReport, SweepRow, DETAILED_CONSTANT,
};
pub use convergence::{convergence_diagnostic, ConvergenceTrace, Diagnostic, TracePoint, MIN_TRACE_LEN};
pub use lemma::{lemma1_check, LemmaConfig, LemmaReport, ProbeReport, ProbeStatus};

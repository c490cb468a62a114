//! Trapdoor honeypot defense toolkit.
//!
//! Trains classifiers with intentionally embedded "trapdoor" perturbations
//! (backdoor-style data poisoning, one honeypot per defended label), records
//! each trapdoor's neuron-activation signature, and flags inputs whose
//! activations are suspiciously similar to a signature — which is exactly
//! what gradient and optimization attacks targeting a defended label end up
//! producing. Ships with a small tensor/autodiff core, a suite of targeted
//! attacks (FGSM, PGD, CW-L2, Elastic Net, SPSA, BPDA plus two
//! signature-aware adaptive attacks), detector calibration at a target false
//! positive rate, and an evaluation harness with CSV/JSON reporting.

pub mod model;
pub mod optim;
pub mod tensor;

pub mod io;
pub mod attack;
pub mod cli;
pub mod detect;
pub mod eval;
pub mod metrics;
pub mod trapdoor;

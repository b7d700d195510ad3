//! Deterministic simulator for quantum key distribution feeding an
//! 802.11i-style pairwise key handshake.
//!
//! Two parties — a base station and an access point — agree on secret keys
//! over a simulated polarization-encoded photon channel, then use them to
//! secure a link-layer association. The crate models the whole distillation
//! chain and the handshakes on top of it:
//!
//! - [`quantum`]: photon pulses, polarization bases, measurement, and
//!   photon sources (ideal single-photon and Poissonian weak laser).
//! - [`channel`]: the quantum channel (noise, loss, eavesdroppers) and the
//!   authenticated classical channel whose transcript records every public
//!   message for leakage accounting and eavesdropper analysis.
//! - [`protocol`]: the BB84 and SARG04 exchange and sifting rules.
//! - [`postprocess`]: error estimation, information reconciliation (Cascade
//!   and Winnow), and privacy amplification via Toeplitz hashing.
//! - [`handshake`]: the standard 4-way pairwise key handshake and its
//!   quantum variant, where the session key comes from distillation and is
//!   confirmed with a PMK-masked quantum MIC instead of nonce-based MICs.
//! - [`lab`]: declarative scenarios, seeded batch runs, sweeps, and
//!   machine-readable CSV/JSON reports.
//!
//! Every random choice flows from a caller-supplied seeded generator, so
//! any run — including its full transcript and reports — reproduces
//! byte-for-byte.

pub mod bits;
pub mod channel;
pub mod handshake;
pub mod lab;
pub mod postprocess;
pub mod protocol;
pub mod quantum;

pub use channel::{
    ChannelConfig, ClassicalChannel, EveKnowledge, EveStrategy, PartyId, Transcript,
};
pub use handshake::{
    run_quantum_handshake, run_standard_handshake, AbortReason, HandshakeConfig, HandshakePhase,
    KeyHierarchy, KeyMode, QkdParams,
};
pub use lab::{
    parse_scenario, run_scenario, run_scenario_with_transcripts, sweep, RunReport, Scenario,
    ScenarioError, SweepReport,
};
pub use postprocess::{PostprocessParams, Reconciliation, Verdict};
pub use protocol::{exchange, sift, Protocol, SiftedKey};
pub use quantum::{Basis, MeasurementOutcome, PhotonPulse, Polarization, SourceModel};

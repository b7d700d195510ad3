//! The two key distribution protocols: pulse exchange and sifting.
//!
//! Both protocols share the same physical flow — the base station prepares
//! one polarized pulse per key bit, the access point measures each arriving
//! pulse in a random basis — and differ in what is announced afterwards and
//! therefore in what an eavesdropper can learn.
//!
//! In the basis-announcing protocol the receiver publishes its measurement
//! basis per detected pulse and the sender keeps the positions where bases
//! matched: about half the detected pulses, each decoded perfectly on a
//! clean channel.
//!
//! In the pair-announcing protocol the key bit is the sender's *basis
//! choice*, and the state within that basis is picked at random. Nobody ever
//! announces a basis; instead the sender publishes, per detected pulse, an
//! unordered pair of non-orthogonal candidates — the state actually sent and
//! a decoy from the other basis. The receiver keeps a position only when its
//! outcome is orthogonal to one candidate, which excludes that candidate and
//! pins the other as sent. On a clean channel this is conclusive for a
//! quarter of the pulses and never wrong, and because the announcement never
//! narrows a pulse to a single state, a photon-number-splitting attacker is
//! left discriminating two non-orthogonal states instead of reading the bit
//! off a basis announcement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    transmit, ChannelConfig, ClassicalChannel, EveKnowledge, EveStrategy, MessagePayload, PartyId,
};
use crate::quantum::{emit_pulse, encode, measure, Basis, MeasurementOutcome, Polarization};

/// Which key distribution protocol a session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Four states, basis announcement, bit = state within the basis.
    Bb84,
    /// Four states, candidate-pair announcement, bit = basis choice.
    Sarg04,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Bb84 => write!(f, "bb84"),
            Protocol::Sarg04 => write!(f, "sarg04"),
        }
    }
}

/// Everything both endpoints privately know after the pulse exchange, before
/// any classical announcement.
///
/// All vectors have one entry per pulse. Sender fields live at the base
/// station, receiver fields at the access point; the struct holds both sides
/// because the simulator plays both parties.
#[derive(Debug, Clone, PartialEq)]
pub struct RawKeyRecord {
    /// The protocol that produced this record.
    pub protocol: Protocol,
    /// The sender's key bit per pulse.
    pub sender_bits: Vec<bool>,
    /// The sender's basis choice per pulse.
    pub sender_bases: Vec<Basis>,
    /// The exact polarization prepared per pulse.
    pub sent_states: Vec<Polarization>,
    /// The receiver's measurement basis per pulse.
    pub receiver_bases: Vec<Basis>,
    /// The receiver's measurement outcome per pulse.
    pub outcomes: Vec<MeasurementOutcome>,
}

impl RawKeyRecord {
    /// Number of pulses exchanged.
    pub fn len(&self) -> usize {
        self.sender_bits.len()
    }

    /// Whether the record holds no pulses.
    pub fn is_empty(&self) -> bool {
        self.sender_bits.is_empty()
    }

    fn with_capacity(protocol: Protocol, n: usize) -> RawKeyRecord {
        RawKeyRecord {
            protocol,
            sender_bits: Vec::with_capacity(n),
            sender_bases: Vec::with_capacity(n),
            sent_states: Vec::with_capacity(n),
            receiver_bases: Vec::with_capacity(n),
            outcomes: Vec::with_capacity(n),
        }
    }
}

/// The agreed positions after sifting, with both parties' bits and the
/// running leakage ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftedKey {
    /// Pulse indices that survived sifting, ascending.
    pub kept_indices: Vec<usize>,
    /// The sender's key bits at the kept positions.
    pub sender_bits: Vec<bool>,
    /// The receiver's key bits at the kept positions.
    pub receiver_bits: Vec<bool>,
    /// Bits of key-relevant information disclosed on the classical channel
    /// so far. Sifting itself discloses none; reconciliation adds to it.
    pub leaked_bits: usize,
}

impl SiftedKey {
    /// Number of sifted key bits.
    pub fn len(&self) -> usize {
        self.sender_bits.len()
    }

    /// Whether sifting kept nothing.
    pub fn is_empty(&self) -> bool {
        self.sender_bits.is_empty()
    }

    /// Fraction of positions at which the two parties' sifted bits disagree.
    pub fn true_error_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        crate::bits::hamming_distance(&self.sender_bits, &self.receiver_bits) as f64
            / self.len() as f64
    }
}

/// Runs the pulse exchange for `protocol`.
pub fn exchange<R: Rng>(
    protocol: Protocol,
    n_pulses: usize,
    config: &ChannelConfig,
    eve: &EveStrategy,
    knowledge: &mut EveKnowledge,
    rng: &mut R,
) -> RawKeyRecord {
    match protocol {
        Protocol::Bb84 => bb84_exchange(n_pulses, config, eve, knowledge, rng),
        Protocol::Sarg04 => sarg04_exchange(n_pulses, config, eve, knowledge, rng),
    }
}

/// Runs the sifting conversation for the protocol recorded in `record`.
pub fn sift<R: Rng>(
    record: &RawKeyRecord,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> SiftedKey {
    match record.protocol {
        Protocol::Bb84 => bb84_sift(record, channel),
        Protocol::Sarg04 => sarg04_sift(record, channel, rng),
    }
}

/// Exchanges `n_pulses` pulses with random bits and bases.
pub fn bb84_exchange<R: Rng>(
    n_pulses: usize,
    config: &ChannelConfig,
    eve: &EveStrategy,
    knowledge: &mut EveKnowledge,
    rng: &mut R,
) -> RawKeyRecord {
    let mut record = RawKeyRecord::with_capacity(Protocol::Bb84, n_pulses);
    for index in 0..n_pulses {
        let bit = rng.random::<bool>();
        let basis = Basis::random(rng);
        let pulse = emit_pulse(config.source, bit, basis, rng);
        let mut pulse = transmit(pulse, index, config, eve, knowledge, rng);
        let receiver_basis = Basis::random(rng);
        let outcome = measure(&mut pulse, receiver_basis, rng);
        record.sender_bits.push(bit);
        record.sender_bases.push(basis);
        record.sent_states.push(encode(bit, basis));
        record.receiver_bases.push(receiver_basis);
        record.outcomes.push(outcome);
    }
    record
}

/// Exchanges `n_pulses` pulses where the key bit selects the basis
/// (rectilinear encodes 0, diagonal encodes 1) and the state within the
/// basis is uniform.
pub fn sarg04_exchange<R: Rng>(
    n_pulses: usize,
    config: &ChannelConfig,
    eve: &EveStrategy,
    knowledge: &mut EveKnowledge,
    rng: &mut R,
) -> RawKeyRecord {
    let mut record = RawKeyRecord::with_capacity(Protocol::Sarg04, n_pulses);
    for index in 0..n_pulses {
        let bit = rng.random::<bool>();
        let basis = if bit {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        };
        let state_bit = rng.random::<bool>();
        let pulse = emit_pulse(config.source, state_bit, basis, rng);
        let mut pulse = transmit(pulse, index, config, eve, knowledge, rng);
        let receiver_basis = Basis::random(rng);
        let outcome = measure(&mut pulse, receiver_basis, rng);
        record.sender_bits.push(bit);
        record.sender_bases.push(basis);
        record.sent_states.push(encode(state_bit, basis));
        record.receiver_bases.push(receiver_basis);
        record.outcomes.push(outcome);
    }
    record
}

/// Sifts by basis comparison: the receiver announces its basis per detected
/// pulse, the sender keeps the positions where bases matched.
pub fn bb84_sift(record: &RawKeyRecord, channel: &mut ClassicalChannel) -> SiftedKey {
    debug_assert_eq!(record.protocol, Protocol::Bb84);
    let bases: Vec<Option<Basis>> = record
        .outcomes
        .iter()
        .zip(&record.receiver_bases)
        .map(|(outcome, &basis)| outcome.bit().map(|_| basis))
        .collect();
    channel.send(
        PartyId::Ap,
        MessagePayload::DetectedBases {
            bases: bases.clone(),
        },
    );

    let keep: Vec<bool> = bases
        .iter()
        .zip(&record.sender_bases)
        .map(|(announced, &sender_basis)| *announced == Some(sender_basis))
        .collect();
    channel.send(
        PartyId::Bs,
        MessagePayload::SiftDecision { keep: keep.clone() },
    );

    let mut sifted = SiftedKey {
        kept_indices: Vec::new(),
        sender_bits: Vec::new(),
        receiver_bits: Vec::new(),
        leaked_bits: 0,
    };
    for (index, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        let receiver_bit = record.outcomes[index]
            .bit()
            .expect("kept positions are detected by construction");
        sifted.kept_indices.push(index);
        sifted.sender_bits.push(record.sender_bits[index]);
        sifted.receiver_bits.push(receiver_bit);
    }
    sifted
}

/// Sifts by candidate-pair exclusion: the sender announces `{sent state,
/// decoy from the other basis}` per detected pulse and the receiver keeps a
/// position only when its outcome is orthogonal to exactly one candidate,
/// inferring the other as sent and taking that candidate's basis as the bit.
pub fn sarg04_sift<R: Rng>(
    record: &RawKeyRecord,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> SiftedKey {
    debug_assert_eq!(record.protocol, Protocol::Sarg04);
    let detected: Vec<bool> = record.outcomes.iter().map(|o| o.bit().is_some()).collect();
    channel.send(
        PartyId::Ap,
        MessagePayload::DetectionReport {
            detected: detected.clone(),
        },
    );

    // The pair is presented in a canonical order so the announcement carries
    // exactly the unordered set and nothing more.
    let pairs: Vec<Option<(Polarization, Polarization)>> = detected
        .iter()
        .enumerate()
        .map(|(index, &was_detected)| {
            if !was_detected {
                return None;
            }
            let sent = record.sent_states[index];
            let decoy = encode(rng.random::<bool>(), sent.basis().other());
            Some((sent.min(decoy), sent.max(decoy)))
        })
        .collect();
    channel.send(
        PartyId::Bs,
        MessagePayload::CandidatePairs {
            pairs: pairs.clone(),
        },
    );

    let mut keep = vec![false; record.len()];
    let mut sifted = SiftedKey {
        kept_indices: Vec::new(),
        sender_bits: Vec::new(),
        receiver_bits: Vec::new(),
        leaked_bits: 0,
    };
    for (index, pair) in pairs.iter().enumerate() {
        let Some((c1, c2)) = pair else { continue };
        let Some(outcome_bit) = record.outcomes[index].bit() else {
            continue;
        };
        let outcome = encode(outcome_bit, record.receiver_bases[index]);
        let inferred = match (outcome.is_orthogonal_to(*c1), outcome.is_orthogonal_to(*c2)) {
            (true, false) => *c2,
            (false, true) => *c1,
            // Compatible with both candidates: inconclusive, discard.
            _ => continue,
        };
        keep[index] = true;
        sifted.kept_indices.push(index);
        sifted.sender_bits.push(record.sender_bits[index]);
        sifted
            .receiver_bits
            .push(inferred.basis() == Basis::Diagonal);
    }
    channel.send(PartyId::Ap, MessagePayload::ConclusiveReport { keep });
    sifted
}

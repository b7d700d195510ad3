//! The two channels linking the parties, and the adversary sitting on them.
//!
//! The quantum channel carries photon pulses from the base station (`bs`) to
//! the access point (`ap`) and applies, in order: the eavesdropper's action,
//! photon loss, and polarization flip noise. The classical channel is
//! authenticated but public: messages arrive unmodified and in order, and the
//! eavesdropper reads every one of them. All classical traffic, along with
//! protocol decisions and summary statistics, is recorded in a [`Transcript`]
//! that can be rendered to a log and replayed by tests.
//!
//! Two attacks are modeled. *Intercept-resend* measures a fraction of pulses
//! in a random basis and retransmits the collapsed state, which buys key bits
//! at the cost of detectable disturbance. *Photon-number splitting* silently
//! steals one photon from every multi-photon pulse and stores it, then
//! resolves the stored photons after the bases (or candidate pairs) are
//! announced — disturbance-free, which is what makes multi-photon emissions
//! from attenuated lasers dangerous.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::format_bits;
use crate::handshake::HandshakeMsg;
use crate::quantum::{measure, Basis, PhotonPulse, Polarization, SourceModel};

/// Identifies a party on the link: the access point or the base station.
///
/// The base station is the quantum sender and 802.11i supplicant; the access
/// point is the quantum receiver and authenticator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartyId {
    /// Access point: quantum receiver, handshake authenticator.
    Ap,
    /// Base station: quantum sender, handshake supplicant.
    Bs,
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Ap => write!(f, "ap"),
            PartyId::Bs => write!(f, "bs"),
        }
    }
}

/// A parameter rejected by [`ChannelConfig::new`].
#[derive(Debug, Clone, Error, PartialEq)]
#[error("invalid channel parameter {name}: {message}")]
pub struct InvalidChannelParameter {
    /// Which parameter was out of range.
    pub name: &'static str,
    /// Human-readable description of the violation.
    pub message: String,
}

/// Physical parameters of the quantum channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Probability that a surviving pulse is rotated to the orthogonal state
    /// within its own basis. Must lie in `[0, 0.5]`.
    pub flip_probability: f64,
    /// Probability that a pulse is absorbed in transit. Must lie in `[0, 1)`.
    pub loss_probability: f64,
    /// The photon source feeding the channel.
    pub source: SourceModel,
}

impl ChannelConfig {
    /// Builds a channel configuration, validating every parameter range.
    pub fn new(
        flip_probability: f64,
        loss_probability: f64,
        source: SourceModel,
    ) -> Result<ChannelConfig, InvalidChannelParameter> {
        if !(0.0..=0.5).contains(&flip_probability) {
            return Err(InvalidChannelParameter {
                name: "flip_probability",
                message: format!("must lie in [0, 0.5], got {flip_probability}"),
            });
        }
        if !(0.0..1.0).contains(&loss_probability) {
            return Err(InvalidChannelParameter {
                name: "loss_probability",
                message: format!("must lie in [0, 1), got {loss_probability}"),
            });
        }
        if let SourceModel::WeakLaser { mean_photon_number } = source {
            SourceModel::weak_laser(mean_photon_number).map_err(|message| {
                InvalidChannelParameter {
                    name: "mean_photon_number",
                    message,
                }
            })?;
        }
        Ok(ChannelConfig {
            flip_probability,
            loss_probability,
            source,
        })
    }

    /// A noiseless, lossless channel fed by an ideal single-photon source.
    pub fn ideal() -> ChannelConfig {
        ChannelConfig {
            flip_probability: 0.0,
            loss_probability: 0.0,
            source: SourceModel::SinglePhoton,
        }
    }
}

/// What the eavesdropper does to pulses in transit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EveStrategy {
    /// No eavesdropper on the line.
    None,
    /// Measure a fraction of non-empty pulses in a random basis and resend
    /// the collapsed state.
    InterceptResend {
        /// Fraction of pulses attacked, in `[0, 1]`.
        fraction: f64,
    },
    /// Split one photon off every multi-photon pulse and store it, leaving
    /// single-photon pulses untouched.
    PhotonNumberSplitting,
}

/// Everything the eavesdropper has accumulated during one QKD session.
///
/// Maps are keyed by pulse index so that the post-sifting resolution step can
/// line her records up with the public announcements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EveKnowledge {
    /// Pulses she measured in flight: the basis she chose and the bit she saw.
    pub intercepted: BTreeMap<usize, (Basis, bool)>,
    /// Photons split off multi-photon pulses, still unmeasured.
    pub stored_photons: BTreeMap<usize, Polarization>,
    /// Key bits she has pinned down with certainty.
    pub resolved_bits: BTreeMap<usize, bool>,
}

impl EveKnowledge {
    /// Fresh, empty knowledge.
    pub fn new() -> EveKnowledge {
        EveKnowledge::default()
    }
}

/// Sends one pulse through the channel: eavesdropper first, then loss, then
/// flip noise.
///
/// The ordering matters. The eavesdropper taps the line at the sender's end,
/// so she acts on the pulse before loss or noise can touch it; a stored
/// photon from a photon-number-splitting attack is therefore a pristine copy
/// of the prepared state.
pub fn transmit<R: Rng>(
    mut pulse: PhotonPulse,
    index: usize,
    config: &ChannelConfig,
    eve: &EveStrategy,
    knowledge: &mut EveKnowledge,
    rng: &mut R,
) -> PhotonPulse {
    match *eve {
        EveStrategy::None => {}
        EveStrategy::InterceptResend { fraction } => {
            if !pulse.is_vacuum() && fraction > 0.0 && rng.random::<f64>() < fraction {
                let eve_basis = Basis::random(rng);
                if let Some(bit) = measure(&mut pulse, eve_basis, rng).bit() {
                    knowledge.intercepted.insert(index, (eve_basis, bit));
                }
            }
        }
        EveStrategy::PhotonNumberSplitting => {
            if pulse.photon_count >= 2 {
                pulse.photon_count -= 1;
                knowledge.stored_photons.insert(index, pulse.polarization);
            }
        }
    }
    if !pulse.is_vacuum()
        && config.loss_probability > 0.0
        && rng.random::<f64>() < config.loss_probability
    {
        pulse.photon_count = 0;
    }
    if !pulse.is_vacuum()
        && config.flip_probability > 0.0
        && rng.random::<f64>() < config.flip_probability
    {
        pulse.polarization = pulse.polarization.orthogonal();
    }
    pulse
}

/// Payload of one classical message.
///
/// The vectors inside sifting payloads are index-aligned with the pulse
/// stream of the session they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MessagePayload {
    /// Receiver announces, per pulse, the basis it measured in — or nothing
    /// when its detector did not fire.
    DetectedBases { bases: Vec<Option<Basis>> },
    /// Sender announces which pulses had matching bases and survive sifting.
    SiftDecision { keep: Vec<bool> },
    /// Receiver reports which pulses were detected at all.
    DetectionReport { detected: Vec<bool> },
    /// Sender announces, per detected pulse, an unordered pair of candidate
    /// states: the one actually sent plus a decoy from the other basis.
    CandidatePairs {
        pairs: Vec<Option<(Polarization, Polarization)>>,
    },
    /// Receiver announces which pulses it could conclusively decode.
    ConclusiveReport { keep: Vec<bool> },
    /// Receiver picks the sifted-key positions to sacrifice for error
    /// estimation.
    SampleIndices { indices: Vec<usize> },
    /// Sender discloses its bits at the sampled positions. These bits are
    /// removed from both keys afterwards, so they are spent, not leaked.
    SampleBits { bits: Vec<bool> },
    /// Receiver announces the measured error rate and whether to proceed.
    SampleVerdict {
        mismatches: usize,
        qber: f64,
        proceed: bool,
    },
    /// Sender fixes the block permutation for one reconciliation pass.
    PermutationSeed { pass: u8, seed: u64 },
    /// Sender discloses the parity of permuted positions `lo..hi` in `pass`.
    ParityQuery {
        pass: u8,
        lo: u32,
        hi: u32,
        parity: bool,
    },
    /// Receiver answers whether its own parity over the same range matches.
    ParityReply { matches: bool },
    /// Sender discloses the parity of every 8-bit block in one message.
    BlockParities { parities: Vec<bool> },
    /// Receiver lists the blocks whose parity disagreed.
    MismatchedBlocks { blocks: Vec<u32> },
    /// Sender discloses a 3-bit Hamming syndrome for each mismatched block.
    HammingSyndromes { syndromes: Vec<(u32, u8)> },
    /// Sender publishes the random bits defining the Toeplitz hash.
    ToeplitzSeed { bits: Vec<bool> },
    /// An 802.11i handshake message.
    Handshake(HandshakeMsg),
}

impl MessagePayload {
    /// A short stable tag naming the payload kind in transcript lines.
    pub fn tag(&self) -> &'static str {
        match self {
            MessagePayload::DetectedBases { .. } => "detected-bases",
            MessagePayload::SiftDecision { .. } => "sift-decision",
            MessagePayload::DetectionReport { .. } => "detection-report",
            MessagePayload::CandidatePairs { .. } => "candidate-pairs",
            MessagePayload::ConclusiveReport { .. } => "conclusive-report",
            MessagePayload::SampleIndices { .. } => "sample-indices",
            MessagePayload::SampleBits { .. } => "sample-bits",
            MessagePayload::SampleVerdict { .. } => "sample-verdict",
            MessagePayload::PermutationSeed { .. } => "permutation-seed",
            MessagePayload::ParityQuery { .. } => "parity-query",
            MessagePayload::ParityReply { .. } => "parity-reply",
            MessagePayload::BlockParities { .. } => "block-parities",
            MessagePayload::MismatchedBlocks { .. } => "mismatched-blocks",
            MessagePayload::HammingSyndromes { .. } => "hamming-syndromes",
            MessagePayload::ToeplitzSeed { .. } => "toeplitz-seed",
            MessagePayload::Handshake(msg) => msg.tag(),
        }
    }

    /// How many bits of this payload count against the secrecy of the
    /// retained key.
    ///
    /// Only parity material disclosed about bits that stay in the working key
    /// is charged: reconciliation parities and Hamming syndromes. Sampled
    /// bits are destroyed rather than kept, steering replies reveal nothing
    /// the parities did not, and permutation seeds and the Toeplitz seed are
    /// public randomness independent of the key.
    pub fn key_leakage_bits(&self) -> usize {
        match self {
            MessagePayload::ParityQuery { .. } => 1,
            MessagePayload::BlockParities { parities } => parities.len(),
            MessagePayload::HammingSyndromes { syndromes } => 3 * syndromes.len(),
            _ => 0,
        }
    }

    fn render(&self) -> String {
        match self {
            MessagePayload::DetectedBases { bases } => {
                let s: String = bases
                    .iter()
                    .map(|b| match b {
                        Some(Basis::Rectilinear) => 'R',
                        Some(Basis::Diagonal) => 'D',
                        None => '-',
                    })
                    .collect();
                format!("bases={s}")
            }
            MessagePayload::SiftDecision { keep } | MessagePayload::ConclusiveReport { keep } => {
                format!("keep={}", format_bits(keep))
            }
            MessagePayload::DetectionReport { detected } => {
                format!("detected={}", format_bits(detected))
            }
            MessagePayload::CandidatePairs { pairs } => {
                let s: Vec<String> = pairs
                    .iter()
                    .map(|p| match p {
                        Some((a, b)) => format!("{}{}", state_char(*a), state_char(*b)),
                        None => "--".to_string(),
                    })
                    .collect();
                format!("pairs={}", s.join(","))
            }
            MessagePayload::SampleIndices { indices } => format!(
                "count={} indices={}",
                indices.len(),
                indices
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            MessagePayload::SampleBits { bits } => format!("bits={}", format_bits(bits)),
            MessagePayload::SampleVerdict {
                mismatches,
                qber,
                proceed,
            } => {
                format!("mismatches={mismatches} qber={qber:.6} proceed={proceed}")
            }
            MessagePayload::PermutationSeed { pass, seed } => format!("pass={pass} seed={seed}"),
            MessagePayload::ParityQuery {
                pass,
                lo,
                hi,
                parity,
            } => {
                format!("pass={pass} range={lo}..{hi} parity={}", u8::from(*parity))
            }
            MessagePayload::ParityReply { matches } => format!("matches={matches}"),
            MessagePayload::BlockParities { parities } => {
                format!("parities={}", format_bits(parities))
            }
            MessagePayload::MismatchedBlocks { blocks } => format!(
                "blocks={}",
                blocks
                    .iter()
                    .map(|b| b.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            MessagePayload::HammingSyndromes { syndromes } => format!(
                "syndromes={}",
                syndromes
                    .iter()
                    .map(|(b, s)| format!("{b}:{s:03b}"))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            MessagePayload::ToeplitzSeed { bits } => {
                format!("len={} bits={}", bits.len(), format_bits(bits))
            }
            MessagePayload::Handshake(msg) => msg.render(),
        }
    }
}

fn state_char(state: Polarization) -> char {
    match state {
        Polarization::Horizontal => 'H',
        Polarization::Vertical => 'V',
        Polarization::Diagonal => 'D',
        Polarization::AntiDiagonal => 'A',
    }
}

/// One classical message: who sent it and what it carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalMessage {
    /// The party that sent the message.
    pub sender: PartyId,
    /// The message body.
    pub payload: MessagePayload,
}

/// One entry in the session record.
#[derive(Debug, Clone, PartialEq)]
pub enum TranscriptEvent {
    /// A classical message crossing the public channel.
    Message(ClassicalMessage),
    /// A local protocol decision worth recording (verdicts, aborts, phase
    /// changes).
    Decision {
        /// The deciding party.
        party: PartyId,
        /// Description of the decision.
        text: String,
    },
    /// A named summary statistic.
    Stat {
        /// Statistic name.
        name: String,
        /// Statistic value.
        value: f64,
    },
}

/// An ordered record of everything observable about one session: classical
/// messages, decisions, and statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    /// Events in the order they occurred.
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    /// Iterates over the classical messages, in transmission order.
    pub fn messages(&self) -> impl Iterator<Item = &ClassicalMessage> {
        self.events.iter().filter_map(|e| match e {
            TranscriptEvent::Message(m) => Some(m),
            _ => None,
        })
    }

    /// Re-derives the total key leakage by summing over every recorded
    /// message. Tests use this to audit the leakage ledger kept by the
    /// postprocessing pipeline.
    pub fn recount_key_leakage(&self) -> usize {
        self.messages().map(|m| m.payload.key_leakage_bits()).sum()
    }

    /// Renders the transcript as a line-oriented log.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut seq = 0usize;
        for event in &self.events {
            match event {
                TranscriptEvent::Message(m) => {
                    out.push_str(&format!(
                        "msg {seq:05} {} {} {}\n",
                        m.sender,
                        m.payload.tag(),
                        m.payload.render()
                    ));
                    seq += 1;
                }
                TranscriptEvent::Decision { party, text } => {
                    out.push_str(&format!("decision {party} {text}\n"));
                }
                TranscriptEvent::Stat { name, value } => {
                    out.push_str(&format!("stat {name}={value:.6}\n"));
                }
            }
        }
        out
    }
}

/// The authenticated public channel.
///
/// Delivery is reliable, ordered, and unmodified; authentication is assumed,
/// so the eavesdropper cannot inject or alter messages, but she receives a
/// read-only copy of each one (tests hand her the [`Transcript`]).
#[derive(Debug, Default)]
pub struct ClassicalChannel {
    transcript: Transcript,
}

impl ClassicalChannel {
    /// A fresh channel with an empty transcript.
    pub fn new() -> ClassicalChannel {
        ClassicalChannel::default()
    }

    /// Sends a message; it is recorded and delivered verbatim.
    pub fn send(&mut self, sender: PartyId, payload: MessagePayload) {
        self.transcript
            .events
            .push(TranscriptEvent::Message(ClassicalMessage {
                sender,
                payload,
            }));
    }

    /// Records a local decision.
    pub fn decision(&mut self, party: PartyId, text: impl Into<String>) {
        self.transcript.events.push(TranscriptEvent::Decision {
            party,
            text: text.into(),
        });
    }

    /// Records a summary statistic.
    pub fn stat(&mut self, name: impl Into<String>, value: f64) {
        self.transcript.events.push(TranscriptEvent::Stat {
            name: name.into(),
            value,
        });
    }

    /// The transcript accumulated so far.
    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Consumes the channel, yielding the full transcript.
    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

/// Resolves the eavesdropper's stored material against the public sifting
/// announcements, filling in [`EveKnowledge::resolved_bits`].
///
/// For a basis-announcing protocol she measures each stored photon from a
/// kept pulse in the announced basis; since the stored photon is a pristine
/// copy, this recovers the sent bit with certainty. Interceptions resolve
/// when her random basis happened to equal the announced one.
///
/// For a pair-announcing protocol the announcement narrows each kept pulse to
/// two non-orthogonal candidates. A stored photon then resolves via optimal
/// unambiguous state discrimination, which succeeds with probability
/// `1 - 1/sqrt(2)`; an interception resolves only when her measured outcome
/// was orthogonal to one candidate, excluding it.
pub fn resolve_from_transcript<R: Rng>(
    knowledge: &mut EveKnowledge,
    transcript: &Transcript,
    rng: &mut R,
) {
    let mut announced_bases: Option<&[Option<Basis>]> = None;
    let mut announced_pairs: Option<&[Option<(Polarization, Polarization)>]> = None;
    let mut kept: Option<&[bool]> = None;
    for message in transcript.messages() {
        match &message.payload {
            MessagePayload::DetectedBases { bases } => announced_bases = Some(bases),
            MessagePayload::CandidatePairs { pairs } => announced_pairs = Some(pairs),
            MessagePayload::SiftDecision { keep } | MessagePayload::ConclusiveReport { keep } => {
                kept = Some(keep)
            }
            _ => {}
        }
    }
    let Some(kept) = kept else { return };

    if let Some(bases) = announced_bases {
        for (&index, &polarization) in &knowledge.stored_photons {
            if !kept.get(index).copied().unwrap_or(false) {
                continue;
            }
            let Some(Some(basis)) = bases.get(index) else {
                continue;
            };
            // Delayed measurement of the pristine copy in the now-public
            // basis; for kept pulses this is the preparation basis, so the
            // outcome is deterministic.
            let mut stored = PhotonPulse::single(polarization);
            if let Some(bit) = measure(&mut stored, *basis, rng).bit() {
                knowledge.resolved_bits.insert(index, bit);
            }
        }
        for (&index, &(eve_basis, eve_bit)) in &knowledge.intercepted {
            if !kept.get(index).copied().unwrap_or(false) {
                continue;
            }
            let Some(Some(basis)) = bases.get(index) else {
                continue;
            };
            if eve_basis == *basis {
                knowledge.resolved_bits.insert(index, eve_bit);
            }
        }
    } else if let Some(pairs) = announced_pairs {
        let ud_success = 1.0 - 1.0 / f64::sqrt(2.0);
        for (&index, &polarization) in &knowledge.stored_photons {
            if !kept.get(index).copied().unwrap_or(false) {
                continue;
            }
            let Some(Some((c1, c2))) = pairs.get(index) else {
                continue;
            };
            if rng.random::<f64>() < ud_success {
                // Unambiguous discrimination succeeded: she now knows which
                // candidate her pristine copy is, and the bit is its basis.
                let sent = if polarization == *c1 { *c1 } else { *c2 };
                knowledge
                    .resolved_bits
                    .insert(index, sent.basis() == crate::quantum::Basis::Diagonal);
            }
        }
        for (&index, &(eve_basis, eve_bit)) in &knowledge.intercepted {
            if !kept.get(index).copied().unwrap_or(false) {
                continue;
            }
            let Some(Some((c1, c2))) = pairs.get(index) else {
                continue;
            };
            let outcome = crate::quantum::encode(eve_bit, eve_basis);
            // Her measurement outcome can never be orthogonal to the state
            // that was actually sent, so orthogonality excludes a candidate.
            let excludes_c1 = outcome.is_orthogonal_to(*c1);
            let excludes_c2 = outcome.is_orthogonal_to(*c2);
            let sent = match (excludes_c1, excludes_c2) {
                (true, false) => Some(*c2),
                (false, true) => Some(*c1),
                _ => None,
            };
            if let Some(sent) = sent {
                knowledge
                    .resolved_bits
                    .insert(index, sent.basis() == crate::quantum::Basis::Diagonal);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::encode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ideal() -> ChannelConfig {
        ChannelConfig::ideal()
    }

    #[test]
    fn test_config_validation_rejects_out_of_range_parameters() {
        assert!(ChannelConfig::new(0.6, 0.0, SourceModel::SinglePhoton).is_err());
        assert!(ChannelConfig::new(-0.1, 0.0, SourceModel::SinglePhoton).is_err());
        assert!(ChannelConfig::new(0.0, 1.0, SourceModel::SinglePhoton).is_err());
        assert!(ChannelConfig::new(0.0, -0.1, SourceModel::SinglePhoton).is_err());
        let bad_laser = SourceModel::WeakLaser {
            mean_photon_number: 3.0,
        };
        assert!(ChannelConfig::new(0.0, 0.0, bad_laser).is_err());
        assert!(ChannelConfig::new(0.5, 0.99, SourceModel::SinglePhoton).is_ok());
    }

    #[test]
    fn test_ideal_channel_without_eve_is_the_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut knowledge = EveKnowledge::new();
        for state in Polarization::ALL {
            for count in [0u32, 1, 2, 5] {
                let pulse = PhotonPulse {
                    photon_count: count,
                    polarization: state,
                };
                let out = transmit(
                    pulse,
                    0,
                    &ideal(),
                    &EveStrategy::None,
                    &mut knowledge,
                    &mut rng,
                );
                assert_eq!(out, pulse);
            }
        }
        assert_eq!(knowledge, EveKnowledge::new());
    }

    #[test]
    fn test_full_loss_absorbs_every_pulse() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let config = ChannelConfig::new(0.0, 0.999_999, SourceModel::SinglePhoton).unwrap();
        let mut knowledge = EveKnowledge::new();
        let mut survivors = 0;
        for i in 0..10_000 {
            let pulse = PhotonPulse::single(Polarization::Horizontal);
            let out = transmit(
                pulse,
                i,
                &config,
                &EveStrategy::None,
                &mut knowledge,
                &mut rng,
            );
            if !out.is_vacuum() {
                survivors += 1;
            }
        }
        assert!(
            survivors <= 1,
            "{survivors} pulses survived a near-certain-loss channel"
        );
    }

    #[test]
    fn test_flip_noise_rotates_within_the_basis() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let config = ChannelConfig::new(0.5, 0.0, SourceModel::SinglePhoton).unwrap();
        let mut knowledge = EveKnowledge::new();
        let mut flips = 0usize;
        let n = 100_000usize;
        for i in 0..n {
            let pulse = PhotonPulse::single(Polarization::Diagonal);
            let out = transmit(
                pulse,
                i,
                &config,
                &EveStrategy::None,
                &mut knowledge,
                &mut rng,
            );
            match out.polarization {
                Polarization::AntiDiagonal => flips += 1,
                Polarization::Diagonal => {}
                other => panic!("flip left the preparation basis: {other:?}"),
            }
        }
        let fraction = flips as f64 / n as f64;
        assert!((fraction - 0.5).abs() < 0.01, "flip fraction {fraction}");
    }

    #[test]
    fn test_intercept_resend_error_rate_matches_enumeration() {
        // Enumerate the attack exactly: Eve picks the matching basis with
        // probability 1/2 (re-sending the true state), otherwise her resend
        // collapses in the wrong basis and the receiver's matched measurement
        // errs with probability 1/2. Error rate = 1/2 * 1/2 = 1/4.
        let mut exact = 0.0f64;
        for eve_matches in [true, false] {
            let p_branch = 0.5;
            let p_error = if eve_matches { 0.0 } else { 0.5 };
            exact += p_branch * p_error;
        }
        assert_eq!(exact, 0.25);

        // Monte Carlo over the real pipeline: prepare, attack, and measure in
        // the preparation basis.
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let strategy = EveStrategy::InterceptResend { fraction: 1.0 };
        let mut knowledge = EveKnowledge::new();
        let n = 100_000usize;
        let mut errors = 0usize;
        for i in 0..n {
            let bit = rng.random::<bool>();
            let basis = Basis::random(&mut rng);
            let pulse = PhotonPulse::single(encode(bit, basis));
            let mut out = transmit(pulse, i, &ideal(), &strategy, &mut knowledge, &mut rng);
            let outcome = measure(&mut out, basis, &mut rng).bit().unwrap();
            if outcome != bit {
                errors += 1;
            }
        }
        let rate = errors as f64 / n as f64;
        assert!(
            (rate - exact).abs() < 0.01,
            "intercept-resend error rate {rate}"
        );
        assert_eq!(
            knowledge.intercepted.len(),
            n,
            "fraction 1.0 must attack every pulse"
        );
    }

    #[test]
    fn test_intercept_resend_fraction_scales_the_attack() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let strategy = EveStrategy::InterceptResend { fraction: 0.25 };
        let mut knowledge = EveKnowledge::new();
        let n = 100_000usize;
        for i in 0..n {
            let pulse = PhotonPulse::single(Polarization::Horizontal);
            transmit(pulse, i, &ideal(), &strategy, &mut knowledge, &mut rng);
        }
        let fraction = knowledge.intercepted.len() as f64 / n as f64;
        assert!(
            (fraction - 0.25).abs() < 0.01,
            "attacked fraction {fraction}"
        );
    }

    #[test]
    fn test_photon_number_splitting_takes_one_photon_and_only_from_multis() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut knowledge = EveKnowledge::new();
        let single = PhotonPulse::single(Polarization::Vertical);
        let out = transmit(
            single,
            0,
            &ideal(),
            &EveStrategy::PhotonNumberSplitting,
            &mut knowledge,
            &mut rng,
        );
        assert_eq!(out, single, "single-photon pulses must pass untouched");
        assert!(knowledge.stored_photons.is_empty());

        let double = PhotonPulse {
            photon_count: 2,
            polarization: Polarization::AntiDiagonal,
        };
        let out = transmit(
            double,
            1,
            &ideal(),
            &EveStrategy::PhotonNumberSplitting,
            &mut knowledge,
            &mut rng,
        );
        assert_eq!(out.photon_count, 1);
        assert_eq!(out.polarization, Polarization::AntiDiagonal);
        assert_eq!(
            knowledge.stored_photons.get(&1),
            Some(&Polarization::AntiDiagonal)
        );
    }

    #[test]
    fn test_classical_channel_preserves_order_and_content() {
        let mut channel = ClassicalChannel::new();
        let payloads = vec![
            MessagePayload::DetectionReport {
                detected: vec![true, false, true],
            },
            MessagePayload::ParityQuery {
                pass: 1,
                lo: 0,
                hi: 4,
                parity: true,
            },
            MessagePayload::ParityReply { matches: false },
        ];
        channel.send(PartyId::Ap, payloads[0].clone());
        channel.send(PartyId::Bs, payloads[1].clone());
        channel.send(PartyId::Ap, payloads[2].clone());
        let seen: Vec<_> = channel.transcript().messages().collect();
        assert_eq!(seen.len(), 3);
        for (message, payload) in seen.iter().zip(&payloads) {
            assert_eq!(&message.payload, payload);
        }
        assert_eq!(seen[0].sender, PartyId::Ap);
        assert_eq!(seen[1].sender, PartyId::Bs);
    }

    #[test]
    fn test_leakage_recount_charges_only_parity_material() {
        let mut channel = ClassicalChannel::new();
        channel.send(
            PartyId::Bs,
            MessagePayload::ParityQuery {
                pass: 1,
                lo: 0,
                hi: 8,
                parity: false,
            },
        );
        channel.send(PartyId::Ap, MessagePayload::ParityReply { matches: true });
        channel.send(
            PartyId::Bs,
            MessagePayload::BlockParities {
                parities: vec![true; 5],
            },
        );
        channel.send(
            PartyId::Bs,
            MessagePayload::HammingSyndromes {
                syndromes: vec![(0, 3), (4, 6)],
            },
        );
        channel.send(
            PartyId::Bs,
            MessagePayload::ToeplitzSeed {
                bits: vec![true; 64],
            },
        );
        channel.send(
            PartyId::Ap,
            MessagePayload::SampleBits {
                bits: vec![true; 10],
            },
        );
        assert_eq!(channel.transcript().recount_key_leakage(), 1 + 5 + 6);
    }

    #[test]
    fn test_transcript_render_is_line_oriented_and_ordered() {
        let mut channel = ClassicalChannel::new();
        channel.send(PartyId::Ap, MessagePayload::ParityReply { matches: true });
        channel.decision(PartyId::Bs, "verdict: proceed");
        channel.stat("qber", 0.125);
        let text = channel.transcript().render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("msg 00000 ap parity-reply"));
        assert_eq!(lines[1], "decision bs verdict: proceed");
        assert_eq!(lines[2], "stat qber=0.125000");
    }
}

//! The 4-way pairwise key handshake, in its standard form and in a variant
//! that derives the pairwise key from quantum key distribution.
//!
//! In the standard exchange both parties hold a pre-shared pairwise master
//! key (PMK). The authenticator sends a fresh nonce, the supplicant answers
//! with its own nonce plus a message integrity code, and both expand
//! `PRF-384(PMK, addresses, nonces)` into a 384-bit pairwise transient key
//! (PTK) split as KCK || KEK || TK. The MICs, keyed by the KCK, prove to
//! each side that the other holds the PMK and saw the same nonces.
//!
//! In the quantum variant the nonce/PRF derivation disappears: the parties
//! first distill a fresh 384-bit key over the quantum link, take its first
//! 256 bits as the PTK (KEK || TK, no KCK), and confirm agreement by
//! exchanging a *quantum MIC*: the last 128 bits of the distilled key XORed
//! with the first 128 bits of the PMK. Matching quantum MICs prove both that
//! the quantum keys agree and that the peer holds the PMK, without ever
//! putting raw key bits on the air. There are no nonces to replay and no
//! derivation inputs for an attacker to forge; every session key is fresh
//! randomness from the quantum channel rather than an expansion of a static
//! secret.
//!
//! Both variants run as explicit state machines with timeouts, driven here
//! by deterministic simulation drivers that can drop or tamper with chosen
//! messages.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bits::{to_bytes, to_hex};
use crate::channel::{
    resolve_from_transcript, ChannelConfig, ClassicalChannel, EveKnowledge, EveStrategy,
    MessagePayload, PartyId,
};
use crate::postprocess::{
    run_pipeline, PipelineOutcome, PostprocessError, PostprocessParams, Verdict,
};
use crate::protocol::{exchange, sift, Protocol};

/// Pairwise master key size in bytes (256 bits).
pub const PMK_BYTES: usize = 32;
/// Message integrity code size in bytes (128 bits).
pub const MIC_BYTES: usize = 16;
/// Standard PTK size: KCK || KEK || TK, 128 bits each.
pub const PTK_STANDARD_BYTES: usize = 48;
/// Quantum-mode PTK size: KEK || TK, 128 bits each.
pub const PTK_QUANTUM_BYTES: usize = 32;
/// Size of the distilled quantum key consumed per handshake (384 bits).
pub const QUANTUM_KEY_BYTES: usize = 48;
/// The same, in bits.
pub const QUANTUM_KEY_BITS: usize = QUANTUM_KEY_BYTES * 8;

/// HMAC-SHA256 (RFC 2104 over SHA-256, verified against RFC 4231 vectors).
pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    const BLOCK: usize = 64;
    let mut key_block = [0u8; BLOCK];
    if key.len() > BLOCK {
        key_block[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        key_block[..key.len()].copy_from_slice(key);
    }
    let mut ipad = [0x36u8; BLOCK];
    let mut opad = [0x5cu8; BLOCK];
    for i in 0..BLOCK {
        ipad[i] ^= key_block[i];
        opad[i] ^= key_block[i];
    }
    let mut inner = Sha256::new();
    inner.update(ipad);
    inner.update(data);
    let inner = inner.finalize();
    let mut outer = Sha256::new();
    outer.update(opad);
    outer.update(inner);
    outer
        .finalize()
        .as_slice()
        .try_into()
        .expect("SHA-256 output is 32 bytes")
}

/// The pluggable pseudorandom function used for key expansion: maps a key,
/// a label, and context data to `out_bits` of output.
pub type PrfFn = fn(key: &[u8], label: &str, data: &[u8], out_bits: usize) -> Vec<u8>;

/// Name of the default PRF, recorded in transcripts.
pub const DEFAULT_PRF_NAME: &str = "hmac-sha256-ctr";

/// Counter-mode expansion of HMAC-SHA256: block `i` is
/// `HMAC(key, label || 0x00 || data || i)`.
///
/// # Panics
///
/// Panics if `out_bits` is zero or not a multiple of 8.
pub fn prf_hmac_sha256(key: &[u8], label: &str, data: &[u8], out_bits: usize) -> Vec<u8> {
    assert!(
        out_bits > 0 && out_bits.is_multiple_of(8),
        "output must be a positive whole number of bytes"
    );
    let mut out = Vec::with_capacity(out_bits / 8 + 32);
    let mut counter = 0u8;
    while out.len() * 8 < out_bits {
        let mut message = Vec::with_capacity(label.len() + data.len() + 2);
        message.extend_from_slice(label.as_bytes());
        message.push(0);
        message.extend_from_slice(data);
        message.push(counter);
        out.extend_from_slice(&hmac_sha256(key, &message));
        counter += 1;
    }
    out.truncate(out_bits / 8);
    out
}

/// 128-bit message integrity code: truncated HMAC-SHA256.
pub fn mic128(kck: &[u8], body: &[u8]) -> [u8; MIC_BYTES] {
    hmac_sha256(kck, body)[..MIC_BYTES]
        .try_into()
        .expect("truncation of 32 bytes")
}

/// A key-material length error.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("bad {what} length: expected {expected} bytes, got {got}")]
pub struct BadKeyLength {
    /// Which input had the wrong size.
    pub what: &'static str,
    /// Expected size in bytes.
    pub expected: usize,
    /// Actual size in bytes.
    pub got: usize,
}

/// How the pairwise transient key was derived, which also fixes its layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyMode {
    /// 384-bit PTK from PRF expansion: KCK || KEK || TK.
    Standard,
    /// 256-bit PTK from the quantum key: KEK || TK, no KCK.
    Quantum,
}

/// The split pairwise transient key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyHierarchy {
    /// How the PTK was derived.
    pub mode: KeyMode,
    /// Key confirmation key (empty in quantum mode, where the quantum MIC
    /// construction authenticates the exchange instead).
    pub kck: Vec<u8>,
    /// Key encryption key, for wrapping group keys.
    pub kek: Vec<u8>,
    /// Temporal key, for frame protection.
    pub tk: Vec<u8>,
}

impl KeyHierarchy {
    /// The PTK as one contiguous byte string.
    pub fn ptk(&self) -> Vec<u8> {
        let mut out = self.kck.clone();
        out.extend_from_slice(&self.kek);
        out.extend_from_slice(&self.tk);
        out
    }
}

/// Splits a PTK into its component keys according to the mode's layout.
pub fn split_ptk(ptk: &[u8], mode: KeyMode) -> Result<KeyHierarchy, BadKeyLength> {
    match mode {
        KeyMode::Standard => {
            if ptk.len() != PTK_STANDARD_BYTES {
                return Err(BadKeyLength {
                    what: "standard PTK",
                    expected: PTK_STANDARD_BYTES,
                    got: ptk.len(),
                });
            }
            Ok(KeyHierarchy {
                mode,
                kck: ptk[..16].to_vec(),
                kek: ptk[16..32].to_vec(),
                tk: ptk[32..48].to_vec(),
            })
        }
        KeyMode::Quantum => {
            if ptk.len() != PTK_QUANTUM_BYTES {
                return Err(BadKeyLength {
                    what: "quantum PTK",
                    expected: PTK_QUANTUM_BYTES,
                    got: ptk.len(),
                });
            }
            Ok(KeyHierarchy {
                mode,
                kck: Vec::new(),
                kek: ptk[..16].to_vec(),
                tk: ptk[16..32].to_vec(),
            })
        }
    }
}

/// Expands the PMK into a standard 384-bit PTK.
///
/// The context data is `min(addrs) || max(addrs) || min(nonces) ||
/// max(nonces)`, so both parties derive the same key regardless of argument
/// order.
pub fn derive_ptk_standard(
    prf: PrfFn,
    pmk: &[u8; PMK_BYTES],
    addr_a: [u8; 6],
    addr_b: [u8; 6],
    nonce_a: [u8; 32],
    nonce_b: [u8; 32],
) -> [u8; PTK_STANDARD_BYTES] {
    let mut data = Vec::with_capacity(6 * 2 + 32 * 2);
    data.extend_from_slice(&addr_a.min(addr_b));
    data.extend_from_slice(&addr_a.max(addr_b));
    data.extend_from_slice(&nonce_a.min(nonce_b));
    data.extend_from_slice(&nonce_a.max(nonce_b));
    prf(pmk, "pairwise key expansion", &data, PTK_STANDARD_BYTES * 8)
        .try_into()
        .expect("PRF outputs the requested length")
}

/// The quantum MIC: the last 128 bits of the distilled quantum key XORed
/// with the first 128 bits of the PMK.
///
/// Note that these quantum-key bits lie beyond the 256 bits used as the PTK,
/// so the value discloses nothing about the session keys, and recovering the
/// mask requires the PMK.
pub fn compute_qmic(quantum_key: &[u8], pmk: &[u8]) -> Result<[u8; MIC_BYTES], BadKeyLength> {
    if quantum_key.len() != QUANTUM_KEY_BYTES {
        return Err(BadKeyLength {
            what: "quantum key",
            expected: QUANTUM_KEY_BYTES,
            got: quantum_key.len(),
        });
    }
    if pmk.len() != PMK_BYTES {
        return Err(BadKeyLength {
            what: "PMK",
            expected: PMK_BYTES,
            got: pmk.len(),
        });
    }
    let mut out = [0u8; MIC_BYTES];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = quantum_key[PTK_QUANTUM_BYTES + i] ^ pmk[i];
    }
    Ok(out)
}

/// A handshake message on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandshakeMsg {
    /// Authenticator's nonce.
    Msg1 {
        /// The authenticator nonce.
        anonce: [u8; 32],
    },
    /// Supplicant's nonce, proving PMK possession via the MIC.
    Msg2 {
        /// The supplicant nonce.
        snonce: [u8; 32],
        /// MIC over the message body, keyed by the KCK.
        mic: [u8; MIC_BYTES],
    },
    /// Authenticator's install order.
    Msg3 {
        /// Whether the supplicant should install the PTK.
        install: bool,
        /// MIC over the message body, keyed by the KCK.
        mic: [u8; MIC_BYTES],
    },
    /// Supplicant's final confirmation.
    Msg4 {
        /// MIC over the message body, keyed by the KCK.
        mic: [u8; MIC_BYTES],
    },
    /// Authenticator's quantum MIC (quantum mode key confirmation).
    QuantumMicOffer {
        /// The masked key-confirmation value.
        qmic: [u8; MIC_BYTES],
    },
    /// Supplicant's echoed quantum MIC.
    QuantumMicConfirm {
        /// The masked key-confirmation value.
        qmic: [u8; MIC_BYTES],
    },
}

impl HandshakeMsg {
    /// Builds message 2 with a valid MIC.
    pub fn msg2(kck: &[u8], snonce: [u8; 32]) -> HandshakeMsg {
        let mut msg = HandshakeMsg::Msg2 {
            snonce,
            mic: [0; MIC_BYTES],
        };
        let mic = mic128(kck, &msg.mic_scope().expect("message 2 carries a MIC"));
        if let HandshakeMsg::Msg2 { mic: slot, .. } = &mut msg {
            *slot = mic;
        }
        msg
    }

    /// Builds message 3 with a valid MIC.
    pub fn msg3(kck: &[u8], install: bool) -> HandshakeMsg {
        let mut msg = HandshakeMsg::Msg3 {
            install,
            mic: [0; MIC_BYTES],
        };
        let mic = mic128(kck, &msg.mic_scope().expect("message 3 carries a MIC"));
        if let HandshakeMsg::Msg3 { mic: slot, .. } = &mut msg {
            *slot = mic;
        }
        msg
    }

    /// Builds message 4 with a valid MIC.
    pub fn msg4(kck: &[u8]) -> HandshakeMsg {
        let mut msg = HandshakeMsg::Msg4 {
            mic: [0; MIC_BYTES],
        };
        let mic = mic128(kck, &msg.mic_scope().expect("message 4 carries a MIC"));
        if let HandshakeMsg::Msg4 { mic: slot, .. } = &mut msg {
            *slot = mic;
        }
        msg
    }

    /// A short stable tag naming the message kind.
    pub fn tag(&self) -> &'static str {
        match self {
            HandshakeMsg::Msg1 { .. } => "eapol-1",
            HandshakeMsg::Msg2 { .. } => "eapol-2",
            HandshakeMsg::Msg3 { .. } => "eapol-3",
            HandshakeMsg::Msg4 { .. } => "eapol-4",
            HandshakeMsg::QuantumMicOffer { .. } => "quantum-mic-offer",
            HandshakeMsg::QuantumMicConfirm { .. } => "quantum-mic-confirm",
        }
    }

    /// Renders every field for the transcript; nothing is elided, so
    /// transcript scans see exactly what crossed the channel.
    pub fn render(&self) -> String {
        match self {
            HandshakeMsg::Msg1 { anonce } => format!("anonce={}", to_hex(anonce)),
            HandshakeMsg::Msg2 { snonce, mic } => {
                format!("snonce={} mic={}", to_hex(snonce), to_hex(mic))
            }
            HandshakeMsg::Msg3 { install, mic } => {
                format!("install={install} mic={}", to_hex(mic))
            }
            HandshakeMsg::Msg4 { mic } => format!("mic={}", to_hex(mic)),
            HandshakeMsg::QuantumMicOffer { qmic } | HandshakeMsg::QuantumMicConfirm { qmic } => {
                format!("qmic={}", to_hex(qmic))
            }
        }
    }

    /// The bytes the MIC covers: a type byte plus every non-MIC field.
    /// `None` for messages that carry no MIC.
    pub fn mic_scope(&self) -> Option<Vec<u8>> {
        match self {
            HandshakeMsg::Msg1 { .. } => None,
            HandshakeMsg::Msg2 { snonce, .. } => {
                let mut scope = vec![2u8];
                scope.extend_from_slice(snonce);
                Some(scope)
            }
            HandshakeMsg::Msg3 { install, .. } => Some(vec![3u8, u8::from(*install)]),
            HandshakeMsg::Msg4 { .. } => Some(vec![4u8]),
            HandshakeMsg::QuantumMicOffer { .. } | HandshakeMsg::QuantumMicConfirm { .. } => None,
        }
    }

    /// The carried MIC, if any.
    pub fn mic(&self) -> Option<[u8; MIC_BYTES]> {
        match self {
            HandshakeMsg::Msg2 { mic, .. }
            | HandshakeMsg::Msg3 { mic, .. }
            | HandshakeMsg::Msg4 { mic } => Some(*mic),
            _ => None,
        }
    }

    /// Verifies the carried MIC against the message body under `kck`.
    pub fn verify_mic(&self, kck: &[u8]) -> bool {
        match (self.mic_scope(), self.mic()) {
            (Some(scope), Some(mic)) => mic128(kck, &scope) == mic,
            _ => false,
        }
    }

    /// Number of mutable wire bits in the message (the install flag counts
    /// as a single bit).
    pub fn wire_bits(&self) -> usize {
        match self {
            HandshakeMsg::Msg1 { .. } => 256,
            HandshakeMsg::Msg2 { .. } => 256 + 128,
            HandshakeMsg::Msg3 { .. } => 1 + 128,
            HandshakeMsg::Msg4 { .. } => 128,
            HandshakeMsg::QuantumMicOffer { .. } | HandshakeMsg::QuantumMicConfirm { .. } => 128,
        }
    }

    /// Returns the message with one wire bit flipped, for tamper testing.
    ///
    /// # Panics
    ///
    /// Panics if `bit >= self.wire_bits()`.
    pub fn with_flipped_bit(&self, bit: usize) -> HandshakeMsg {
        assert!(bit < self.wire_bits(), "bit {bit} out of range");
        fn flip(bytes: &mut [u8], bit: usize) {
            bytes[bit / 8] ^= 0x80 >> (bit % 8);
        }
        let mut msg = *self;
        match &mut msg {
            HandshakeMsg::Msg1 { anonce } => flip(anonce, bit),
            HandshakeMsg::Msg2 { snonce, mic } => {
                if bit < 256 {
                    flip(snonce, bit);
                } else {
                    flip(mic, bit - 256);
                }
            }
            HandshakeMsg::Msg3 { install, mic } => {
                if bit == 0 {
                    *install = !*install;
                } else {
                    flip(mic, bit - 1);
                }
            }
            HandshakeMsg::Msg4 { mic } => flip(mic, bit),
            HandshakeMsg::QuantumMicOffer { qmic } | HandshakeMsg::QuantumMicConfirm { qmic } => {
                flip(qmic, bit)
            }
        }
        msg
    }
}

/// Why a handshake tore down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    /// A message integrity code failed to verify.
    MicMismatch,
    /// An expected message never arrived.
    Timeout,
    /// A message arrived in a phase that cannot accept it.
    ProtocolViolation,
    /// The quantum error rate pointed at an eavesdropper.
    QberThresholdExceeded,
    /// The quantum MIC values disagreed.
    QuantumMicMismatch,
    /// Quantum key distillation failed in every permitted round.
    RetriesExhausted,
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AbortReason::MicMismatch => "mic_mismatch",
            AbortReason::Timeout => "timeout",
            AbortReason::ProtocolViolation => "protocol_violation",
            AbortReason::QberThresholdExceeded => "qber_threshold_exceeded",
            AbortReason::QuantumMicMismatch => "quantum_mic_mismatch",
            AbortReason::RetriesExhausted => "retries_exhausted",
        };
        write!(f, "{name}")
    }
}

/// Where a peer stands in the exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakePhase {
    /// Nothing has happened yet; a standard supplicant accepts message 1
    /// here.
    Idle,
    /// Authenticator sent message 1 and awaits message 2.
    AwaitMsg2,
    /// Supplicant sent message 2 and awaits message 3.
    AwaitMsg3,
    /// Authenticator sent message 3 and awaits message 4.
    AwaitMsg4,
    /// Quantum mode: waiting for key distillation to finish.
    QkdInProgress,
    /// Quantum supplicant: key installed, awaiting the quantum MIC offer.
    AwaitQuantumOffer,
    /// Quantum authenticator: offer sent, awaiting the confirmation.
    AwaitQuantumConfirm,
    /// Keys agreed and installed.
    Established,
    /// Torn down.
    Aborted(AbortReason),
}

/// A peer's role in the exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeRole {
    /// The access point side: initiates and confirms.
    Authenticator,
    /// The station side: responds.
    Supplicant,
}

/// Which handshake variant is being run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeMode {
    /// Nonce exchange and PRF-based PTK derivation.
    Standard,
    /// QKD-derived PTK with quantum MIC confirmation.
    Quantum,
}

/// Peer-local configuration.
#[derive(Debug, Clone, Copy)]
pub struct HandshakeConfig {
    /// Ticks a peer waits for the next expected message before aborting.
    pub timeout_ticks: u64,
    /// The PRF used for standard PTK expansion.
    pub prf: PrfFn,
    /// Name of the PRF, recorded in transcripts.
    pub prf_name: &'static str,
}

impl Default for HandshakeConfig {
    fn default() -> HandshakeConfig {
        HandshakeConfig {
            timeout_ticks: 16,
            prf: prf_hmac_sha256,
            prf_name: DEFAULT_PRF_NAME,
        }
    }
}

/// One endpoint's handshake state machine.
///
/// The machine is total: every `(phase, message)` pair either advances the
/// exchange or aborts it, so no delivery order can reach
/// [`HandshakePhase::Established`] without the full verified sequence.
#[derive(Debug)]
pub struct HandshakePeer {
    role: HandshakeRole,
    mode: HandshakeMode,
    pmk: [u8; PMK_BYTES],
    addr: [u8; 6],
    peer_addr: [u8; 6],
    config: HandshakeConfig,
    phase: HandshakePhase,
    anonce: Option<[u8; 32]>,
    quantum_key: Option<[u8; QUANTUM_KEY_BYTES]>,
    hierarchy: Option<KeyHierarchy>,
    deadline: Option<u64>,
}

impl HandshakePeer {
    /// Creates a peer in [`HandshakePhase::Idle`].
    pub fn new(
        role: HandshakeRole,
        mode: HandshakeMode,
        pmk: [u8; PMK_BYTES],
        addr: [u8; 6],
        peer_addr: [u8; 6],
        config: HandshakeConfig,
    ) -> HandshakePeer {
        HandshakePeer {
            role,
            mode,
            pmk,
            addr,
            peer_addr,
            config,
            phase: HandshakePhase::Idle,
            anonce: None,
            quantum_key: None,
            hierarchy: None,
            deadline: None,
        }
    }

    /// The current phase.
    pub fn phase(&self) -> HandshakePhase {
        self.phase
    }

    /// This peer's role.
    pub fn role(&self) -> HandshakeRole {
        self.role
    }

    /// The installed key hierarchy, present only on the path to or in
    /// [`HandshakePhase::Established`].
    pub fn hierarchy(&self) -> Option<&KeyHierarchy> {
        self.hierarchy.as_ref()
    }

    /// The abort reason, if the peer tore down.
    pub fn abort_reason(&self) -> Option<AbortReason> {
        match self.phase {
            HandshakePhase::Aborted(reason) => Some(reason),
            _ => None,
        }
    }

    /// Whether the peer is in a final phase.
    pub fn is_terminal(&self) -> bool {
        matches!(
            self.phase,
            HandshakePhase::Established | HandshakePhase::Aborted(_)
        )
    }

    /// The channel identity of this peer.
    pub fn party_id(&self) -> PartyId {
        match self.role {
            HandshakeRole::Authenticator => PartyId::Ap,
            HandshakeRole::Supplicant => PartyId::Bs,
        }
    }

    fn arm(&mut self, now: u64) {
        self.deadline = Some(now + self.config.timeout_ticks);
    }

    /// Tears the peer down, discarding any derived key material.
    pub fn abort(&mut self, reason: AbortReason) {
        self.phase = HandshakePhase::Aborted(reason);
        self.hierarchy = None;
        self.quantum_key = None;
        self.deadline = None;
    }

    /// Aborts with [`AbortReason::Timeout`] if the peer is waiting and its
    /// deadline has passed.
    pub fn poll_timeout(&mut self, now: u64) {
        if self.is_terminal() {
            return;
        }
        if let Some(deadline) = self.deadline {
            if now >= deadline {
                self.abort(AbortReason::Timeout);
            }
        }
    }

    /// Kicks off the exchange. The standard authenticator emits message 1;
    /// quantum peers move to [`HandshakePhase::QkdInProgress`] and wait for
    /// the distilled key.
    pub fn start<R: Rng>(&mut self, now: u64, rng: &mut R) -> Option<HandshakeMsg> {
        match (self.mode, self.role) {
            (HandshakeMode::Standard, HandshakeRole::Authenticator) => {
                let anonce: [u8; 32] = rng.random();
                self.anonce = Some(anonce);
                self.phase = HandshakePhase::AwaitMsg2;
                self.arm(now);
                Some(HandshakeMsg::Msg1 { anonce })
            }
            (HandshakeMode::Standard, HandshakeRole::Supplicant) => None,
            (HandshakeMode::Quantum, _) => {
                self.phase = HandshakePhase::QkdInProgress;
                None
            }
        }
    }

    /// Installs the distilled quantum key. The authenticator responds with
    /// the quantum MIC offer; the supplicant arms its timeout and waits for
    /// it.
    pub fn install_quantum_key(
        &mut self,
        key: [u8; QUANTUM_KEY_BYTES],
        now: u64,
    ) -> Option<HandshakeMsg> {
        if self.is_terminal() {
            return None;
        }
        if self.phase != HandshakePhase::QkdInProgress {
            self.abort(AbortReason::ProtocolViolation);
            return None;
        }
        let hierarchy = split_ptk(&key[..PTK_QUANTUM_BYTES], KeyMode::Quantum)
            .expect("quantum PTK slice has a fixed length");
        self.hierarchy = Some(hierarchy);
        self.quantum_key = Some(key);
        match self.role {
            HandshakeRole::Authenticator => {
                let qmic = compute_qmic(&key, &self.pmk).expect("fixed key lengths");
                self.phase = HandshakePhase::AwaitQuantumConfirm;
                self.arm(now);
                Some(HandshakeMsg::QuantumMicOffer { qmic })
            }
            HandshakeRole::Supplicant => {
                self.phase = HandshakePhase::AwaitQuantumOffer;
                self.arm(now);
                None
            }
        }
    }

    /// Handles one delivered message, possibly producing a reply.
    ///
    /// Messages arriving in a terminal phase are ignored; messages arriving
    /// in any other unexpected phase abort with
    /// [`AbortReason::ProtocolViolation`].
    pub fn on_message<R: Rng>(
        &mut self,
        msg: &HandshakeMsg,
        now: u64,
        rng: &mut R,
    ) -> Option<HandshakeMsg> {
        if self.is_terminal() {
            return None;
        }
        match (self.role, self.mode, self.phase, msg) {
            (
                HandshakeRole::Supplicant,
                HandshakeMode::Standard,
                HandshakePhase::Idle,
                HandshakeMsg::Msg1 { anonce },
            ) => {
                let snonce: [u8; 32] = rng.random();
                self.anonce = Some(*anonce);
                let ptk = derive_ptk_standard(
                    self.config.prf,
                    &self.pmk,
                    self.addr,
                    self.peer_addr,
                    *anonce,
                    snonce,
                );
                let hierarchy =
                    split_ptk(&ptk, KeyMode::Standard).expect("derived PTK has a fixed length");
                let reply = HandshakeMsg::msg2(&hierarchy.kck, snonce);
                self.hierarchy = Some(hierarchy);
                self.phase = HandshakePhase::AwaitMsg3;
                self.arm(now);
                Some(reply)
            }
            (
                HandshakeRole::Authenticator,
                HandshakeMode::Standard,
                HandshakePhase::AwaitMsg2,
                HandshakeMsg::Msg2 { snonce, .. },
            ) => {
                let anonce = self.anonce.expect("authenticator set its nonce at start");
                let ptk = derive_ptk_standard(
                    self.config.prf,
                    &self.pmk,
                    self.addr,
                    self.peer_addr,
                    anonce,
                    *snonce,
                );
                let hierarchy =
                    split_ptk(&ptk, KeyMode::Standard).expect("derived PTK has a fixed length");
                if !msg.verify_mic(&hierarchy.kck) {
                    self.abort(AbortReason::MicMismatch);
                    return None;
                }
                let reply = HandshakeMsg::msg3(&hierarchy.kck, true);
                self.hierarchy = Some(hierarchy);
                self.phase = HandshakePhase::AwaitMsg4;
                self.arm(now);
                Some(reply)
            }
            (
                HandshakeRole::Supplicant,
                HandshakeMode::Standard,
                HandshakePhase::AwaitMsg3,
                HandshakeMsg::Msg3 { .. },
            ) => {
                let kck = self
                    .hierarchy
                    .as_ref()
                    .expect("derived on message 1")
                    .kck
                    .clone();
                if !msg.verify_mic(&kck) {
                    self.abort(AbortReason::MicMismatch);
                    return None;
                }
                self.phase = HandshakePhase::Established;
                self.deadline = None;
                Some(HandshakeMsg::msg4(&kck))
            }
            (
                HandshakeRole::Authenticator,
                HandshakeMode::Standard,
                HandshakePhase::AwaitMsg4,
                HandshakeMsg::Msg4 { .. },
            ) => {
                let kck = &self.hierarchy.as_ref().expect("derived on message 2").kck;
                if !msg.verify_mic(kck) {
                    self.abort(AbortReason::MicMismatch);
                    return None;
                }
                self.phase = HandshakePhase::Established;
                self.deadline = None;
                None
            }
            (
                HandshakeRole::Supplicant,
                HandshakeMode::Quantum,
                HandshakePhase::AwaitQuantumOffer,
                HandshakeMsg::QuantumMicOffer { qmic },
            ) => {
                let key = self.quantum_key.expect("installed before the offer phase");
                let expected = compute_qmic(&key, &self.pmk).expect("fixed key lengths");
                if *qmic != expected {
                    self.abort(AbortReason::QuantumMicMismatch);
                    return None;
                }
                self.phase = HandshakePhase::Established;
                self.deadline = None;
                Some(HandshakeMsg::QuantumMicConfirm { qmic: expected })
            }
            (
                HandshakeRole::Authenticator,
                HandshakeMode::Quantum,
                HandshakePhase::AwaitQuantumConfirm,
                HandshakeMsg::QuantumMicConfirm { qmic },
            ) => {
                let key = self
                    .quantum_key
                    .expect("installed before the confirm phase");
                let expected = compute_qmic(&key, &self.pmk).expect("fixed key lengths");
                if *qmic != expected {
                    self.abort(AbortReason::QuantumMicMismatch);
                    return None;
                }
                self.phase = HandshakePhase::Established;
                self.deadline = None;
                None
            }
            _ => {
                self.abort(AbortReason::ProtocolViolation);
                None
            }
        }
    }
}

/// Deterministic fault injection for the simulation drivers: at most one
/// dropped message and one single-bit tamper, addressed by the message's
/// sequence number within the handshake.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultPlan {
    /// Drop the message with this sequence number.
    pub drop_at: Option<usize>,
    /// Flip the given wire bit of the message with this sequence number.
    pub flip_at: Option<(usize, usize)>,
}

impl FaultPlan {
    /// No faults.
    pub fn none() -> FaultPlan {
        FaultPlan::default()
    }

    /// Drops the `seq`-th handshake message.
    pub fn drop_message(seq: usize) -> FaultPlan {
        FaultPlan {
            drop_at: Some(seq),
            flip_at: None,
        }
    }

    /// Flips wire bit `bit` of the `seq`-th handshake message.
    pub fn flip_bit(seq: usize, bit: usize) -> FaultPlan {
        FaultPlan {
            drop_at: None,
            flip_at: Some((seq, bit)),
        }
    }

    fn apply(&self, seq: usize, msg: &HandshakeMsg) -> Option<HandshakeMsg> {
        if self.drop_at == Some(seq) {
            return None;
        }
        match self.flip_at {
            Some((at, bit)) if at == seq => Some(msg.with_flipped_bit(bit)),
            _ => Some(*msg),
        }
    }
}

/// Delivers messages between the two peers until both terminate, applying
/// faults, advancing the tick clock, and recording traffic. Returns the
/// first abort reason, or `None` when both sides established.
fn drive<R: Rng>(
    auth: &mut HandshakePeer,
    supp: &mut HandshakePeer,
    first: Option<(PartyId, HandshakeMsg)>,
    faults: &FaultPlan,
    channel: &mut ClassicalChannel,
    now: &mut u64,
    rng: &mut R,
) -> Option<AbortReason> {
    let mut pending = first;
    let mut seq = 0usize;
    loop {
        if let Some(reason) = auth.abort_reason().or_else(|| supp.abort_reason()) {
            return Some(reason);
        }
        if auth.phase == HandshakePhase::Established && supp.phase == HandshakePhase::Established {
            return None;
        }
        if let Some((from, msg)) = pending.take() {
            let delivered = faults.apply(seq, &msg);
            seq += 1;
            match delivered {
                None => {
                    channel.decision(from, format!("{} lost in transit", msg.tag()));
                }
                Some(msg) => {
                    channel.send(from, MessagePayload::Handshake(msg));
                    *now += 1;
                    let receiver = if from == PartyId::Ap {
                        &mut *supp
                    } else {
                        &mut *auth
                    };
                    receiver.poll_timeout(*now);
                    if !receiver.is_terminal() {
                        if let Some(reply) = receiver.on_message(&msg, *now, rng) {
                            pending = Some((receiver.party_id(), reply));
                        }
                    }
                }
            }
        } else {
            // The line is silent: advance time until a timeout fires.
            *now += 1;
            auth.poll_timeout(*now);
            supp.poll_timeout(*now);
            debug_assert!(*now < 1_000_000, "handshake drive loop failed to terminate");
        }
    }
}

/// The record of one standard handshake run.
#[derive(Debug)]
pub struct HandshakeRun {
    /// `Ok(())` when both sides established; otherwise the first abort.
    pub result: Result<(), AbortReason>,
    /// The authenticator's final state.
    pub authenticator: HandshakePeer,
    /// The supplicant's final state.
    pub supplicant: HandshakePeer,
}

/// Demo link-layer addresses used by the simulation drivers.
pub const AP_ADDR: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x01];
/// Demo link-layer address of the base station.
pub const BS_ADDR: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x02];

/// Runs a complete standard 4-way handshake between two fresh peers.
pub fn run_standard_handshake<R: Rng>(
    authenticator_pmk: [u8; PMK_BYTES],
    supplicant_pmk: [u8; PMK_BYTES],
    config: HandshakeConfig,
    faults: FaultPlan,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> HandshakeRun {
    let mut auth = HandshakePeer::new(
        HandshakeRole::Authenticator,
        HandshakeMode::Standard,
        authenticator_pmk,
        AP_ADDR,
        BS_ADDR,
        config,
    );
    let mut supp = HandshakePeer::new(
        HandshakeRole::Supplicant,
        HandshakeMode::Standard,
        supplicant_pmk,
        BS_ADDR,
        AP_ADDR,
        config,
    );
    channel.decision(
        PartyId::Ap,
        format!("handshake start: standard mode, prf={}", config.prf_name),
    );
    let mut now = 0u64;
    let first = auth.start(now, rng).map(|m| (PartyId::Ap, m));
    let abort = drive(&mut auth, &mut supp, first, &faults, channel, &mut now, rng);
    let result = match abort {
        Some(reason) => {
            channel.decision(PartyId::Ap, format!("handshake aborted: {reason}"));
            Err(reason)
        }
        None => {
            channel.decision(PartyId::Ap, "handshake established".to_string());
            Ok(())
        }
    };
    HandshakeRun {
        result,
        authenticator: auth,
        supplicant: supp,
    }
}

/// Parameters of the quantum key distillation feeding the handshake.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QkdParams {
    /// Which protocol distills the key.
    pub protocol: Protocol,
    /// Pulses exchanged per round.
    pub n_pulses: usize,
    /// Quantum channel model.
    pub channel_config: ChannelConfig,
    /// Eavesdropper on the quantum channel.
    pub eve: EveStrategy,
    /// Classical postprocessing knobs.
    pub postprocess: PostprocessParams,
    /// Rounds of fresh pulses permitted before giving up.
    pub max_rounds: u32,
}

impl Default for QkdParams {
    fn default() -> QkdParams {
        QkdParams {
            protocol: Protocol::Sarg04,
            n_pulses: 20_000,
            channel_config: ChannelConfig::ideal(),
            eve: EveStrategy::None,
            postprocess: PostprocessParams::default(),
            max_rounds: 3,
        }
    }
}

/// Summary of one quantum distillation round.
#[derive(Debug, Clone, PartialEq)]
pub struct QkdRoundReport {
    /// Round number, starting at 1.
    pub round: u32,
    /// Pulses exchanged this round.
    pub pulses: usize,
    /// Sifted bits kept this round.
    pub sifted_bits: usize,
    /// Sifted bits over pulses.
    pub sift_fraction: f64,
    /// Measured error rate, when estimation ran.
    pub qber: Option<f64>,
    /// The estimation verdict, when estimation ran.
    pub verdict: Option<Verdict>,
    /// Total key leakage charged this round.
    pub leaked_bits: usize,
    /// Final key length this round (0 when the round produced none).
    pub final_key_bits: usize,
}

/// The record of one quantum handshake run.
#[derive(Debug)]
pub struct QuantumHandshakeRun {
    /// `Ok(())` when both sides established; otherwise the first abort.
    pub result: Result<(), AbortReason>,
    /// The authenticator's final state.
    pub authenticator: HandshakePeer,
    /// The supplicant's final state.
    pub supplicant: HandshakePeer,
    /// Per-round distillation summaries, in order.
    pub rounds: Vec<QkdRoundReport>,
    /// Key bits the eavesdropper resolved with certainty, across rounds.
    pub eve_resolved_bits: usize,
    /// Total pulses sent across rounds.
    pub pulses_sent: usize,
}

/// Runs the quantum variant: distill a 384-bit key (retrying with fresh
/// pulses up to `max_rounds` times), install its first 256 bits as the PTK,
/// and confirm via the quantum MIC exchange.
pub fn run_quantum_handshake<R: Rng>(
    authenticator_pmk: [u8; PMK_BYTES],
    supplicant_pmk: [u8; PMK_BYTES],
    params: &QkdParams,
    config: HandshakeConfig,
    faults: FaultPlan,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> QuantumHandshakeRun {
    let mut auth = HandshakePeer::new(
        HandshakeRole::Authenticator,
        HandshakeMode::Quantum,
        authenticator_pmk,
        AP_ADDR,
        BS_ADDR,
        config,
    );
    let mut supp = HandshakePeer::new(
        HandshakeRole::Supplicant,
        HandshakeMode::Quantum,
        supplicant_pmk,
        BS_ADDR,
        AP_ADDR,
        config,
    );
    channel.decision(
        PartyId::Ap,
        format!(
            "handshake start: quantum mode, protocol={}, prf={}",
            params.protocol, config.prf_name
        ),
    );
    let mut now = 0u64;
    auth.start(now, rng);
    supp.start(now, rng);

    let mut rounds: Vec<QkdRoundReport> = Vec::new();
    let mut eve_resolved_bits = 0usize;
    let mut pulses_sent = 0usize;

    let finish = |result: Result<(), AbortReason>,
                  auth: HandshakePeer,
                  supp: HandshakePeer,
                  rounds: Vec<QkdRoundReport>,
                  eve_resolved_bits: usize,
                  pulses_sent: usize,
                  channel: &mut ClassicalChannel| {
        match &result {
            Ok(()) => channel.decision(PartyId::Ap, "handshake established".to_string()),
            Err(reason) => channel.decision(PartyId::Ap, format!("handshake aborted: {reason}")),
        }
        QuantumHandshakeRun {
            result,
            authenticator: auth,
            supplicant: supp,
            rounds,
            eve_resolved_bits,
            pulses_sent,
        }
    };

    for round in 1..=params.max_rounds {
        channel.decision(
            PartyId::Bs,
            format!(
                "distillation round {round}: exchanging {} pulses",
                params.n_pulses
            ),
        );
        let mut knowledge = EveKnowledge::new();
        let record = exchange(
            params.protocol,
            params.n_pulses,
            &params.channel_config,
            &params.eve,
            &mut knowledge,
            rng,
        );
        pulses_sent += record.len();
        let sifted = sift(&record, channel, rng);
        let sift_fraction = sifted.len() as f64 / record.len().max(1) as f64;
        channel.stat("sift_fraction", sift_fraction);
        resolve_from_transcript(&mut knowledge, channel.transcript(), rng);
        eve_resolved_bits += knowledge.resolved_bits.len();

        let mut report = QkdRoundReport {
            round,
            pulses: record.len(),
            sifted_bits: sifted.len(),
            sift_fraction,
            qber: None,
            verdict: None,
            leaked_bits: 0,
            final_key_bits: 0,
        };
        let run = match run_pipeline(&sifted, &params.postprocess, channel, rng) {
            Ok(run) => run,
            Err(PostprocessError::KeyTooShort { len, min }) => {
                channel.decision(
                    PartyId::Ap,
                    format!("round {round} failed: {len} sifted bits, need {min}; retrying"),
                );
                rounds.push(report);
                continue;
            }
            Err(other) => unreachable!("postprocessing invariant violated: {other}"),
        };
        report.qber = Some(run.estimate.qber);
        report.verdict = Some(run.estimate.verdict);
        report.leaked_bits = run.total_leakage;

        match run.outcome {
            PipelineOutcome::AbortedAtEstimation => {
                rounds.push(report);
                auth.abort(AbortReason::QberThresholdExceeded);
                supp.abort(AbortReason::QberThresholdExceeded);
                return finish(
                    Err(AbortReason::QberThresholdExceeded),
                    auth,
                    supp,
                    rounds,
                    eve_resolved_bits,
                    pulses_sent,
                    channel,
                );
            }
            PipelineOutcome::KeyExhausted => {
                channel.decision(
                    PartyId::Bs,
                    format!("round {round} exhausted the key; retrying"),
                );
                rounds.push(report);
                continue;
            }
            PipelineOutcome::Completed {
                sender_key,
                receiver_key,
            } => {
                if sender_key.len() < QUANTUM_KEY_BITS {
                    channel.decision(
                        PartyId::Bs,
                        format!(
                            "round {round} produced {} bits, need {QUANTUM_KEY_BITS}; retrying",
                            sender_key.len()
                        ),
                    );
                    rounds.push(report);
                    continue;
                }
                report.final_key_bits = sender_key.len();
                rounds.push(report);
                channel.decision(
                    PartyId::Ap,
                    format!("quantum key ready after round {round}: truncating to {QUANTUM_KEY_BITS} bits"),
                );
                // The supplicant is the quantum sender, the authenticator the
                // receiver; each installs its own (hopefully equal) key.
                let supp_key: [u8; QUANTUM_KEY_BYTES] =
                    to_bytes(&sender_key.bits[..QUANTUM_KEY_BITS])
                        .try_into()
                        .expect("384 bits");
                let auth_key: [u8; QUANTUM_KEY_BYTES] =
                    to_bytes(&receiver_key.bits[..QUANTUM_KEY_BITS])
                        .try_into()
                        .expect("384 bits");
                supp.install_quantum_key(supp_key, now);
                let first = auth
                    .install_quantum_key(auth_key, now)
                    .map(|offer| (PartyId::Ap, offer));
                let abort = drive(&mut auth, &mut supp, first, &faults, channel, &mut now, rng);
                return finish(
                    abort.map_or(Ok(()), Err),
                    auth,
                    supp,
                    rounds,
                    eve_resolved_bits,
                    pulses_sent,
                    channel,
                );
            }
        }
    }

    auth.abort(AbortReason::RetriesExhausted);
    supp.abort(AbortReason::RetriesExhausted);
    finish(
        Err(AbortReason::RetriesExhausted),
        auth,
        supp,
        rounds,
        eve_resolved_bits,
        pulses_sent,
        channel,
    )
}

fn xor_keystream(key: &[u8], label: &[u8], counter: u64, data: &[u8]) -> Vec<u8> {
    let mut out = data.to_vec();
    for (block, chunk) in out.chunks_mut(32).enumerate() {
        let mut message = label.to_vec();
        message.extend_from_slice(&counter.to_be_bytes());
        message.extend_from_slice(&(block as u32).to_be_bytes());
        let keystream = hmac_sha256(key, &message);
        for (byte, k) in chunk.iter_mut().zip(keystream) {
            *byte ^= k;
        }
    }
    out
}

/// Demo frame protection under the temporal key: XOR with an HMAC-derived
/// keystream bound to the frame counter. Applying it twice with the same
/// counter decrypts.
pub fn encrypt_demo_frame(tk: &[u8], counter: u64, payload: &[u8]) -> Vec<u8> {
    xor_keystream(tk, b"frame", counter, payload)
}

/// Wraps a group key under the KEK (demo construction, inverse of
/// [`unwrap_group_key`]).
pub fn wrap_group_key(kek: &[u8], group_key: &[u8]) -> Vec<u8> {
    xor_keystream(kek, b"group key wrap", 0, group_key)
}

/// Unwraps a group key wrapped with [`wrap_group_key`].
pub fn unwrap_group_key(kek: &[u8], wrapped: &[u8]) -> Vec<u8> {
    xor_keystream(kek, b"group key wrap", 0, wrapped)
}

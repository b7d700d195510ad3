//! Classical postprocessing: error estimation, information reconciliation,
//! and privacy amplification.
//!
//! After sifting the parties hold keys that should agree but may not, and an
//! eavesdropper may hold partial information. Postprocessing burns key
//! material to fix both problems, and keeps honest books while doing so:
//! every parity disclosed about bits that stay in the key is counted in a
//! leakage ledger, and privacy amplification shrinks the key by exactly the
//! ledger total plus a security margin.
//!
//! Error estimation sacrifices a random sample of positions to measure the
//! error rate; the sampled bits are removed from the working key, so they
//! are spent rather than leaked. A rate above the configured threshold is
//! treated as evidence of eavesdropping and aborts the session.
//!
//! Two reconciliation schemes are provided. The cascading parity scheme runs
//! four passes of doubling block size over permuted positions, locating each
//! error by parity bisection and re-checking previously processed blocks
//! whenever a correction lands inside them. The syndrome scheme makes a
//! single pass over 8-bit blocks: block parities are compared wholesale, and
//! each mismatched block is repaired with a 3-bit Hamming syndrome plus one
//! discarded bit. A block holding two errors has matching parity and slips
//! through — the price of the scheme's single round, caught later by key
//! confirmation.
//!
//! Privacy amplification compresses the reconciled key with a random binary
//! Toeplitz matrix published on the classical channel, yielding a final key
//! of length `n - leakage - s` about which the disclosed parities carry no
//! usable information.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{parity, random_bits};
use crate::channel::{ClassicalChannel, MessagePayload, PartyId};
use crate::protocol::SiftedKey;

/// Minimum sifted-key length required to run error estimation.
pub const MIN_ESTIMATION_BITS: usize = 16;
/// Minimum key length required by the reconciliation schemes.
pub const MIN_RECONCILIATION_BITS: usize = 8;

/// The outcome of error estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// The measured error rate is at or below the threshold.
    Proceed,
    /// The measured error rate exceeds the threshold: assume eavesdropping.
    Abort,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Proceed => write!(f, "proceed"),
            Verdict::Abort => write!(f, "abort"),
        }
    }
}

/// Which reconciliation scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reconciliation {
    /// Multi-pass parity bisection with back-checking.
    Cascade,
    /// Single-pass 8-bit blocks with Hamming syndromes.
    Winnow,
}

impl std::fmt::Display for Reconciliation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reconciliation::Cascade => write!(f, "cascade"),
            Reconciliation::Winnow => write!(f, "winnow"),
        }
    }
}

/// A structural failure of the postprocessing pipeline (as opposed to an
/// eavesdropping verdict, which is a regular outcome).
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PostprocessError {
    /// The key is too short for the requested stage.
    #[error("key of {len} bits is shorter than the required {min}")]
    KeyTooShort {
        /// Actual key length in bits.
        len: usize,
        /// Minimum length the stage requires.
        min: usize,
    },
    /// The two parties' keys differ in length, which sifting should have
    /// made impossible.
    #[error("key length mismatch: sender {sender}, receiver {receiver}")]
    LengthMismatch {
        /// Sender-side key length.
        sender: usize,
        /// Receiver-side key length.
        receiver: usize,
    },
    /// Leakage plus the security margin consumed the whole key.
    #[error(
        "key exhausted: {len} bits cannot absorb {leakage} leaked and {security_parameter} margin"
    )]
    KeyExhausted {
        /// Reconciled key length in bits.
        len: usize,
        /// Leakage charged against the key.
        leakage: usize,
        /// Security margin requested.
        security_parameter: usize,
    },
}

/// The result of sampling the sifted key for errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEstimate {
    /// Sifted-key positions that were disclosed and removed, ascending.
    pub sampled_indices: Vec<usize>,
    /// Number of sampled positions at which the parties disagreed.
    pub mismatches: usize,
    /// Measured error rate over the sample.
    pub qber: f64,
    /// The configured abort threshold.
    pub threshold: f64,
    /// Whether the session proceeds. Abort exactly when `qber > threshold`.
    pub verdict: Verdict,
}

/// Samples `ceil(sample_fraction * n)` positions of the sifted key, compares
/// them in public, and removes them from the working key.
///
/// Returns the estimate together with the reduced key. The verdict is
/// [`Verdict::Abort`] exactly when the measured rate strictly exceeds the
/// threshold.
pub fn estimate_error<R: Rng>(
    sifted: &SiftedKey,
    sample_fraction: f64,
    threshold: f64,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> Result<(ErrorEstimate, SiftedKey), PostprocessError> {
    let n = sifted.len();
    if n < MIN_ESTIMATION_BITS {
        return Err(PostprocessError::KeyTooShort {
            len: n,
            min: MIN_ESTIMATION_BITS,
        });
    }
    debug_assert!(sample_fraction > 0.0 && sample_fraction < 1.0);
    let sample_size = ((sample_fraction * n as f64).ceil() as usize).max(1);
    let mut indices = rand::seq::index::sample(rng, n, sample_size.min(n)).into_vec();
    indices.sort_unstable();
    channel.send(
        PartyId::Ap,
        MessagePayload::SampleIndices {
            indices: indices.clone(),
        },
    );

    let disclosed: Vec<bool> = indices.iter().map(|&i| sifted.sender_bits[i]).collect();
    channel.send(
        PartyId::Bs,
        MessagePayload::SampleBits {
            bits: disclosed.clone(),
        },
    );

    let mismatches = indices
        .iter()
        .zip(&disclosed)
        .filter(|(&i, &bit)| sifted.receiver_bits[i] != bit)
        .count();
    let qber = mismatches as f64 / indices.len() as f64;
    let verdict = if qber > threshold {
        Verdict::Abort
    } else {
        Verdict::Proceed
    };
    channel.send(
        PartyId::Ap,
        MessagePayload::SampleVerdict {
            mismatches,
            qber,
            proceed: verdict == Verdict::Proceed,
        },
    );
    channel.stat("estimated_qber", qber);

    // Both parties drop the disclosed positions: spent, not leaked.
    let mut sampled = vec![false; n];
    for &i in &indices {
        sampled[i] = true;
    }
    let keep = |bits: &[bool]| -> Vec<bool> {
        bits.iter()
            .enumerate()
            .filter(|(i, _)| !sampled[*i])
            .map(|(_, &b)| b)
            .collect()
    };
    let reduced = SiftedKey {
        kept_indices: sifted
            .kept_indices
            .iter()
            .enumerate()
            .filter(|(i, _)| !sampled[*i])
            .map(|(_, &idx)| idx)
            .collect(),
        sender_bits: keep(&sifted.sender_bits),
        receiver_bits: keep(&sifted.receiver_bits),
        leaked_bits: sifted.leaked_bits,
    };
    let estimate = ErrorEstimate {
        sampled_indices: indices,
        mismatches,
        qber,
        threshold,
        verdict,
    };
    Ok((estimate, reduced))
}

/// What reconciliation produced: both parties' working keys (the receiver's
/// corrected in place, and both shortened identically if the scheme discards
/// positions) plus the parity ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconciliationResult {
    /// The sender's working key after reconciliation.
    pub sender_key: Vec<bool>,
    /// The receiver's corrected working key.
    pub receiver_key: Vec<bool>,
    /// Parity bits disclosed on the channel, each charged against the key.
    pub parity_bits_leaked: usize,
    /// Number of passes the scheme ran.
    pub passes: u32,
    /// Which scheme ran.
    pub strategy: Reconciliation,
}

struct CascadePass {
    block_len: usize,
    /// Position order for this pass; blocks are consecutive runs of it.
    permutation: Vec<usize>,
    /// Inverse mapping: `slot_of[pos]` is the slot of `pos` in `permutation`.
    slot_of: Vec<usize>,
}

impl CascadePass {
    fn block_of(&self, pos: usize) -> usize {
        self.slot_of[pos] / self.block_len
    }

    fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        let lo = block * self.block_len;
        (lo)..(lo + self.block_len).min(self.permutation.len())
    }

    fn block_count(&self) -> usize {
        self.permutation.len().div_ceil(self.block_len)
    }
}

/// Compares the sender's parity over `positions` with the receiver's,
/// over the public channel. Costs one bit of leakage, charged by the
/// caller.
fn compare_parity(
    sender_key: &[bool],
    receiver_key: &[bool],
    pass: u8,
    lo: usize,
    hi: usize,
    positions: &[usize],
    channel: &mut ClassicalChannel,
) -> bool {
    let sender_parity = parity(&positions.iter().map(|&p| sender_key[p]).collect::<Vec<_>>());
    channel.send(
        PartyId::Bs,
        MessagePayload::ParityQuery {
            pass,
            lo: lo as u32,
            hi: hi as u32,
            parity: sender_parity,
        },
    );
    let receiver_parity = parity(
        &positions
            .iter()
            .map(|&p| receiver_key[p])
            .collect::<Vec<_>>(),
    );
    let matches = receiver_parity == sender_parity;
    channel.send(PartyId::Ap, MessagePayload::ParityReply { matches });
    matches
}

/// Bisects a parity-mismatched range of one pass down to the erroneous
/// position and corrects it in the receiver's key. Returns the position.
fn bisect_and_correct(
    sender_key: &[bool],
    receiver_key: &mut [bool],
    pass_index: usize,
    pass: &CascadePass,
    block: usize,
    channel: &mut ClassicalChannel,
    leaked: &mut usize,
) -> usize {
    let range = pass.block_range(block);
    let (mut lo, mut hi) = (range.start, range.end);
    // Invariant: permutation[lo..hi] holds an odd number of errors.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let first_half: Vec<usize> = pass.permutation[lo..mid].to_vec();
        let matches = compare_parity(
            sender_key,
            receiver_key,
            pass_index as u8 + 1,
            lo,
            mid,
            &first_half,
            channel,
        );
        *leaked += 1;
        if matches {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pos = pass.permutation[lo];
    receiver_key[pos] = !receiver_key[pos];
    pos
}

/// Reconciles the receiver's key against the sender's by cascading parity
/// bisection.
///
/// Runs four passes. The initial block length is `clamp(ceil(0.73 /
/// max(estimated_qber, 1/n)), 2, n)` and doubles each pass; passes after the
/// first work on a freshly agreed random permutation of positions. Every
/// parity comparison discloses one bit and is charged to the ledger. When a
/// correction lands inside a block of an earlier pass, that block's parity
/// is re-compared and re-bisected, which is what lets later passes clean up
/// even numbers of errors left behind by earlier ones.
pub fn cascade_reconcile<R: Rng>(
    sender_key: &[bool],
    receiver_key: &[bool],
    estimated_qber: f64,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> Result<ReconciliationResult, PostprocessError> {
    let n = sender_key.len();
    if n != receiver_key.len() {
        return Err(PostprocessError::LengthMismatch {
            sender: n,
            receiver: receiver_key.len(),
        });
    }
    if n < MIN_RECONCILIATION_BITS {
        return Err(PostprocessError::KeyTooShort {
            len: n,
            min: MIN_RECONCILIATION_BITS,
        });
    }

    let effective_qber = estimated_qber.max(1.0 / n as f64);
    let first_block_len = ((0.73 / effective_qber).ceil() as usize).clamp(2, n);

    let sender_key = sender_key.to_vec();
    let mut receiver_key = receiver_key.to_vec();
    let mut leaked = 0usize;
    let mut passes: Vec<CascadePass> = Vec::with_capacity(4);
    // Parity re-checks queued by corrections: (pass index, block index).
    let mut rechecks: VecDeque<(usize, usize)> = VecDeque::new();

    for pass_number in 0..4u32 {
        let block_len = (first_block_len << pass_number).min(n);
        let permutation: Vec<usize> = if pass_number == 0 {
            (0..n).collect()
        } else {
            let seed = rng.random::<u64>();
            channel.send(
                PartyId::Bs,
                MessagePayload::PermutationSeed {
                    pass: pass_number as u8 + 1,
                    seed,
                },
            );
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
            perm
        };
        let mut slot_of = vec![0usize; n];
        for (slot, &pos) in permutation.iter().enumerate() {
            slot_of[pos] = slot;
        }
        passes.push(CascadePass {
            block_len,
            permutation,
            slot_of,
        });
        let pass_index = passes.len() - 1;

        for block in 0..passes[pass_index].block_count() {
            rechecks.push_back((pass_index, block));
            while let Some((q, b)) = rechecks.pop_front() {
                let range = passes[q].block_range(b);
                let positions: Vec<usize> = passes[q].permutation[range.clone()].to_vec();
                let matches = compare_parity(
                    &sender_key,
                    &receiver_key,
                    q as u8 + 1,
                    range.start,
                    range.end,
                    &positions,
                    channel,
                );
                leaked += 1;
                if matches {
                    continue;
                }
                let pos = bisect_and_correct(
                    &sender_key,
                    &mut receiver_key,
                    q,
                    &passes[q],
                    b,
                    channel,
                    &mut leaked,
                );
                // The corrected position flips the parity of its block in
                // every other processed pass; re-check each of them.
                for (r, pass) in passes.iter().enumerate() {
                    if r == q {
                        continue;
                    }
                    let affected = (r, pass.block_of(pos));
                    if !rechecks.contains(&affected) {
                        rechecks.push_back(affected);
                    }
                }
            }
        }
    }

    Ok(ReconciliationResult {
        sender_key,
        receiver_key,
        parity_bits_leaked: leaked,
        passes: 4,
        strategy: Reconciliation::Cascade,
    })
}

/// 3-bit Hamming syndrome over the first seven bits of an 8-bit block.
///
/// Bit positions are numbered 1..=7 as in the classic (7,4) code; syndrome
/// bit `j` is the parity of the positions whose binary expansion has bit `j`
/// set. Equal blocks give equal syndromes, and a single flipped bit at
/// position `p` makes the syndromes differ by exactly `p`.
fn hamming_syndrome(block: &[bool]) -> u8 {
    let mut syndrome = 0u8;
    for (i, &bit) in block.iter().take(7).enumerate() {
        if bit {
            syndrome ^= (i + 1) as u8;
        }
    }
    syndrome
}

/// Reconciles in a single pass over 8-bit blocks.
///
/// The sender discloses every block parity (one bit each). For each
/// mismatched full block it additionally discloses a 3-bit Hamming syndrome;
/// the receiver XORs it with its own syndrome to locate and flip the
/// erroneous bit, falling back to the eighth bit when the syndromes agree
/// but the parity does not. Both parties then discard the last bit of every
/// treated block. A mismatched trailing partial block cannot be
/// syndrome-corrected and is discarded whole. Blocks holding two errors
/// pass the parity check and are left untouched: the scheme's documented
/// residual, caught by downstream key confirmation.
pub fn winnow_reconcile(
    sender_key: &[bool],
    receiver_key: &[bool],
    channel: &mut ClassicalChannel,
) -> Result<ReconciliationResult, PostprocessError> {
    let n = sender_key.len();
    if n != receiver_key.len() {
        return Err(PostprocessError::LengthMismatch {
            sender: n,
            receiver: receiver_key.len(),
        });
    }
    if n < MIN_RECONCILIATION_BITS {
        return Err(PostprocessError::KeyTooShort {
            len: n,
            min: MIN_RECONCILIATION_BITS,
        });
    }

    let block_count = n.div_ceil(8);
    let sender_parities: Vec<bool> = (0..block_count)
        .map(|b| parity(&sender_key[b * 8..(b * 8 + 8).min(n)]))
        .collect();
    channel.send(
        PartyId::Bs,
        MessagePayload::BlockParities {
            parities: sender_parities.clone(),
        },
    );
    let mut leaked = sender_parities.len();

    let mismatched: Vec<u32> = (0..block_count)
        .filter(|&b| parity(&receiver_key[b * 8..(b * 8 + 8).min(n)]) != sender_parities[b])
        .map(|b| b as u32)
        .collect();
    channel.send(
        PartyId::Ap,
        MessagePayload::MismatchedBlocks {
            blocks: mismatched.clone(),
        },
    );

    let mut receiver_key = receiver_key.to_vec();
    let mut discard = vec![false; n];
    let mut syndromes: Vec<(u32, u8)> = Vec::new();
    for &b in &mismatched {
        let lo = b as usize * 8;
        if lo + 8 > n {
            // Trailing partial block: no room for a syndrome, discard whole.
            for flag in discard.iter_mut().take(n).skip(lo) {
                *flag = true;
            }
            continue;
        }
        syndromes.push((b, hamming_syndrome(&sender_key[lo..lo + 8])));
    }
    channel.send(
        PartyId::Bs,
        MessagePayload::HammingSyndromes {
            syndromes: syndromes.clone(),
        },
    );
    leaked += 3 * syndromes.len();

    for &(b, sender_syndrome) in &syndromes {
        let lo = b as usize * 8;
        let delta = sender_syndrome ^ hamming_syndrome(&receiver_key[lo..lo + 8]);
        let flip = if delta == 0 {
            lo + 7
        } else {
            lo + delta as usize - 1
        };
        receiver_key[flip] = !receiver_key[flip];
        // One bit of privacy spent per treated block.
        discard[lo + 7] = true;
    }

    let filter = |key: &[bool]| -> Vec<bool> {
        key.iter()
            .enumerate()
            .filter(|(i, _)| !discard[*i])
            .map(|(_, &bit)| bit)
            .collect()
    };
    Ok(ReconciliationResult {
        sender_key: filter(sender_key),
        receiver_key: filter(&receiver_key),
        parity_bits_leaked: leaked,
        passes: 1,
        strategy: Reconciliation::Winnow,
    })
}

/// Dispatches to the selected reconciliation scheme.
pub fn reconcile<R: Rng>(
    strategy: Reconciliation,
    sender_key: &[bool],
    receiver_key: &[bool],
    estimated_qber: f64,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> Result<ReconciliationResult, PostprocessError> {
    match strategy {
        Reconciliation::Cascade => {
            cascade_reconcile(sender_key, receiver_key, estimated_qber, channel, rng)
        }
        Reconciliation::Winnow => winnow_reconcile(sender_key, receiver_key, channel),
    }
}

/// Multiplies the binary Toeplitz matrix defined by `diagonals` with `key`
/// over GF(2).
///
/// For an `m x n` matrix the seed holds `n + m - 1` bits and entry `(i, j)`
/// is `diagonals[i - j + n - 1]`, constant along every diagonal. Output bit
/// `i` is the parity of the AND between the key and one reversed sliding
/// window of the seed; the loop works on packed 64-bit words.
///
/// # Panics
///
/// Panics if `m == 0` or the seed length is not `key.len() + m - 1`.
pub fn toeplitz_hash(diagonals: &[bool], key: &[bool], m: usize) -> Vec<bool> {
    let n = key.len();
    assert!(m >= 1, "output length must be positive");
    assert_eq!(diagonals.len(), n + m - 1, "seed must hold n + m - 1 bits");

    let key_words = n.div_ceil(64).max(1);
    let mut reversed_key = vec![0u64; key_words];
    for j in 0..n {
        if key[n - 1 - j] {
            reversed_key[j / 64] |= 1 << (j % 64);
        }
    }
    let mut seed = vec![0u64; (n + m - 1).div_ceil(64) + key_words + 1];
    for (idx, &bit) in diagonals.iter().enumerate() {
        if bit {
            seed[idx / 64] |= 1 << (idx % 64);
        }
    }

    (0..m)
        .map(|i| {
            // Row i of the matrix is diagonals[i .. i + n] reversed, so the
            // row-key product is a windowed AND against the reversed key.
            let word = i / 64;
            let offset = i % 64;
            let mut acc = 0u64;
            for w in 0..key_words {
                let chunk = if offset == 0 {
                    seed[word + w]
                } else {
                    (seed[word + w] >> offset) | (seed[word + w + 1] << (64 - offset))
                };
                acc ^= chunk & reversed_key[w];
            }
            acc.count_ones() % 2 == 1
        })
        .collect()
}

/// A privacy-amplified final key.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalKey {
    /// The key bits.
    pub bits: Vec<bool>,
    /// The security margin that was subtracted to produce it.
    pub security_parameter: usize,
}

impl FinalKey {
    /// Key length in bits.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    /// Whether the key is empty.
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The key packed into bytes, MSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        crate::bits::to_bytes(&self.bits)
    }
}

/// Compresses both parties' reconciled keys to `n - total_leakage -
/// security_parameter` bits with one shared random Toeplitz matrix.
///
/// The sender draws the matrix seed and publishes it; the matrix is public
/// by design, since its output reveals nothing useful to an observer who is
/// missing more bits of the input than the output discards.
pub fn privacy_amplify<R: Rng>(
    sender_key: &[bool],
    receiver_key: &[bool],
    total_leakage: usize,
    security_parameter: usize,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> Result<(FinalKey, FinalKey), PostprocessError> {
    let n = sender_key.len();
    if n != receiver_key.len() {
        return Err(PostprocessError::LengthMismatch {
            sender: n,
            receiver: receiver_key.len(),
        });
    }
    if n <= total_leakage + security_parameter {
        return Err(PostprocessError::KeyExhausted {
            len: n,
            leakage: total_leakage,
            security_parameter,
        });
    }
    let m = n - total_leakage - security_parameter;
    let seed = random_bits(rng, n + m - 1);
    channel.send(
        PartyId::Bs,
        MessagePayload::ToeplitzSeed { bits: seed.clone() },
    );
    let make = |key: &[bool]| FinalKey {
        bits: toeplitz_hash(&seed, key, m),
        security_parameter,
    };
    Ok((make(sender_key), make(receiver_key)))
}

/// Knobs of the postprocessing pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    /// Fraction of the sifted key sacrificed to error estimation, in (0, 1).
    pub sample_fraction: f64,
    /// Error rate above which the session aborts.
    pub qber_threshold: f64,
    /// Which reconciliation scheme to run.
    pub reconciliation: Reconciliation,
    /// Extra bits subtracted during privacy amplification.
    pub security_parameter: usize,
}

impl Default for PostprocessParams {
    fn default() -> PostprocessParams {
        PostprocessParams {
            sample_fraction: 0.25,
            qber_threshold: 0.11,
            reconciliation: Reconciliation::Cascade,
            security_parameter: 32,
        }
    }
}

/// How a pipeline run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineOutcome {
    /// Both parties hold a final key.
    Completed {
        /// The sender's final key.
        sender_key: FinalKey,
        /// The receiver's final key (equal to the sender's unless
        /// reconciliation left residual errors).
        receiver_key: FinalKey,
    },
    /// The measured error rate exceeded the threshold; no key material
    /// survives.
    AbortedAtEstimation,
    /// Leakage and the security margin consumed the whole key; the session
    /// can retry with fresh pulses.
    KeyExhausted,
}

/// The full record of one postprocessing run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    /// The error estimate, always produced.
    pub estimate: ErrorEstimate,
    /// Reconciliation bookkeeping, when that stage ran.
    pub reconciliation: Option<ReconciliationResult>,
    /// Total leakage charged: the sifted key's ledger plus reconciliation
    /// parities.
    pub total_leakage: usize,
    /// The final outcome.
    pub outcome: PipelineOutcome,
}

/// Runs estimation, reconciliation, and privacy amplification in sequence.
pub fn run_pipeline<R: Rng>(
    sifted: &SiftedKey,
    params: &PostprocessParams,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> Result<PipelineRun, PostprocessError> {
    let (estimate, reduced) = estimate_error(
        sifted,
        params.sample_fraction,
        params.qber_threshold,
        channel,
        rng,
    )?;
    if estimate.verdict == Verdict::Abort {
        channel.decision(
            PartyId::Ap,
            format!(
                "abort: estimated qber {:.6} exceeds threshold {:.6}",
                estimate.qber, estimate.threshold
            ),
        );
        return Ok(PipelineRun {
            estimate,
            reconciliation: None,
            total_leakage: sifted.leaked_bits,
            outcome: PipelineOutcome::AbortedAtEstimation,
        });
    }

    let reconciliation = reconcile(
        params.reconciliation,
        &reduced.sender_bits,
        &reduced.receiver_bits,
        estimate.qber,
        channel,
        rng,
    )?;
    let total_leakage = reduced.leaked_bits + reconciliation.parity_bits_leaked;
    channel.stat("leaked_bits", total_leakage as f64);

    match privacy_amplify(
        &reconciliation.sender_key,
        &reconciliation.receiver_key,
        total_leakage,
        params.security_parameter,
        channel,
        rng,
    ) {
        Ok((sender_key, receiver_key)) => {
            channel.stat("final_key_length", sender_key.len() as f64);
            Ok(PipelineRun {
                estimate,
                reconciliation: Some(reconciliation),
                total_leakage,
                outcome: PipelineOutcome::Completed {
                    sender_key,
                    receiver_key,
                },
            })
        }
        Err(PostprocessError::KeyExhausted {
            len,
            leakage,
            security_parameter,
        }) => {
            channel.decision(
                PartyId::Bs,
                format!(
                    "key exhausted: {len} bits cannot absorb {leakage} leaked and {security_parameter} margin"
                ),
            );
            Ok(PipelineRun {
                estimate,
                reconciliation: Some(reconciliation),
                total_leakage,
                outcome: PipelineOutcome::KeyExhausted,
            })
        }
        Err(other) => Err(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::hamming_distance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sifted_from(sender: Vec<bool>, receiver: Vec<bool>) -> SiftedKey {
        let n = sender.len();
        SiftedKey {
            kept_indices: (0..n).collect(),
            sender_bits: sender,
            receiver_bits: receiver,
            leaked_bits: 0,
        }
    }

    #[test]
    fn test_estimation_on_identical_keys_proceeds_with_zero_qber() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut channel = ClassicalChannel::new();
        let bits = crate::bits::random_bits(&mut rng, 400);
        let sifted = sifted_from(bits.clone(), bits);
        let (estimate, reduced) =
            estimate_error(&sifted, 0.25, 0.11, &mut channel, &mut rng).unwrap();
        assert_eq!(estimate.qber, 0.0);
        assert_eq!(estimate.verdict, Verdict::Proceed);
        assert_eq!(estimate.sampled_indices.len(), 100);
        assert_eq!(reduced.len(), 300);
    }

    #[test]
    fn test_estimation_aborts_only_strictly_above_the_threshold() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sender = vec![false; 64];
        let receiver = vec![true; 64]; // every sampled bit mismatches
        let mut channel = ClassicalChannel::new();
        let (estimate, _) = estimate_error(
            &sifted_from(sender.clone(), receiver.clone()),
            0.25,
            0.11,
            &mut channel,
            &mut rng,
        )
        .unwrap();
        assert_eq!(estimate.qber, 1.0);
        assert_eq!(estimate.verdict, Verdict::Abort);

        // qber == threshold exactly: must proceed.
        let mut channel = ClassicalChannel::new();
        let (estimate, _) = estimate_error(
            &sifted_from(sender, receiver),
            0.25,
            1.0,
            &mut channel,
            &mut rng,
        )
        .unwrap();
        assert_eq!(estimate.qber, 1.0);
        assert_eq!(estimate.verdict, Verdict::Proceed);
    }

    #[test]
    fn test_estimation_rejects_keys_below_sixteen_bits() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut channel = ClassicalChannel::new();
        let sifted = sifted_from(vec![true; 15], vec![true; 15]);
        let err = estimate_error(&sifted, 0.25, 0.11, &mut channel, &mut rng).unwrap_err();
        assert_eq!(err, PostprocessError::KeyTooShort { len: 15, min: 16 });
    }

    #[test]
    fn test_estimation_removes_exactly_the_sampled_positions() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut channel = ClassicalChannel::new();
        let sender = crate::bits::random_bits(&mut rng, 200);
        let sifted = sifted_from(sender.clone(), sender.clone());
        let (estimate, reduced) =
            estimate_error(&sifted, 0.3, 0.11, &mut channel, &mut rng).unwrap();
        assert_eq!(reduced.len() + estimate.sampled_indices.len(), 200);
        // Reduced key must be the original with sampled positions deleted.
        let mut expected = sender;
        for &i in estimate.sampled_indices.iter().rev() {
            expected.remove(i);
        }
        assert_eq!(reduced.sender_bits, expected);
        // The disclosed bits crossed the channel but are charged zero.
        assert_eq!(channel.transcript().recount_key_leakage(), 0);
    }

    fn plant_errors(key: &[bool], qber: f64, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        key.iter()
            .map(|&b| if rng.random::<f64>() < qber { !b } else { b })
            .collect()
    }

    #[test]
    fn test_cascade_fixes_planted_errors_and_counts_leakage() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sender = crate::bits::random_bits(&mut rng, 1024);
        let receiver = plant_errors(&sender, 0.03, 99);
        assert_ne!(sender, receiver);
        let mut channel = ClassicalChannel::new();
        let result = cascade_reconcile(&sender, &receiver, 0.03, &mut channel, &mut rng).unwrap();
        assert_eq!(
            result.receiver_key, sender,
            "all planted errors must be corrected"
        );
        assert_eq!(result.sender_key, sender);
        assert_eq!(result.passes, 4);
        assert_eq!(
            result.parity_bits_leaked,
            channel.transcript().recount_key_leakage(),
            "ledger must equal a recount over the transcript"
        );
    }

    #[test]
    fn test_cascade_corrects_a_single_error_in_a_small_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let sender = vec![true, false, true, true, false, false, true, true];
        let mut receiver = sender.clone();
        receiver[3] = !receiver[3];
        let mut channel = ClassicalChannel::new();
        let result = cascade_reconcile(&sender, &receiver, 0.125, &mut channel, &mut rng).unwrap();
        assert_eq!(result.receiver_key, sender);
    }

    #[test]
    fn test_cascade_on_equal_keys_discloses_only_block_parities() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let key = crate::bits::random_bits(&mut rng, 256);
        let mut channel = ClassicalChannel::new();
        let result = cascade_reconcile(&key, &key, 0.05, &mut channel, &mut rng).unwrap();
        assert_eq!(result.receiver_key, key);
        // No mismatches means no bisection: leakage is one parity per block
        // per pass.
        let k1 = (0.73f64 / 0.05).ceil() as usize; // 15
        let expected: usize = (0..4).map(|p| 256usize.div_ceil((k1 << p).min(256))).sum();
        assert_eq!(result.parity_bits_leaked, expected);
        assert_eq!(channel.transcript().recount_key_leakage(), expected);
    }

    #[test]
    fn test_cascade_rejects_mismatched_lengths() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut channel = ClassicalChannel::new();
        let err =
            cascade_reconcile(&[true; 16], &[true; 17], 0.1, &mut channel, &mut rng).unwrap_err();
        assert_eq!(
            err,
            PostprocessError::LengthMismatch {
                sender: 16,
                receiver: 17
            }
        );
    }

    #[test]
    fn test_cascade_monte_carlo_equality_rate() {
        // 40 trials at 1e3 bits, 5% planted errors: every trial should end
        // with equal keys; tolerate none failing because back-checking plus
        // four passes is exhaustive at this density.
        let mut failures = 0;
        for seed in 0..40u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sender = crate::bits::random_bits(&mut rng, 1000);
            let receiver = plant_errors(&sender, 0.05, seed.wrapping_add(7_000));
            let mut channel = ClassicalChannel::new();
            let result =
                cascade_reconcile(&sender, &receiver, 0.05, &mut channel, &mut rng).unwrap();
            if result.receiver_key != sender {
                failures += 1;
            }
        }
        assert_eq!(
            failures, 0,
            "{failures}/40 cascade trials left residual errors"
        );
    }

    #[test]
    fn test_winnow_corrects_any_single_flip_in_a_block() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let sender = crate::bits::random_bits(&mut rng, 8);
        for flip in 0..8 {
            let mut receiver = sender.clone();
            receiver[flip] = !receiver[flip];
            let mut channel = ClassicalChannel::new();
            let result = winnow_reconcile(&sender, &receiver, &mut channel).unwrap();
            assert_eq!(
                result.receiver_key, result.sender_key,
                "flip at {flip} must be corrected"
            );
            assert_eq!(result.sender_key.len(), 7, "one privacy bit is discarded");
            assert_eq!(result.parity_bits_leaked, 1 + 3);
            assert_eq!(channel.transcript().recount_key_leakage(), 4);
        }
    }

    #[test]
    fn test_winnow_leaves_double_flips_untouched() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let sender = crate::bits::random_bits(&mut rng, 16);
        let mut receiver = sender.clone();
        receiver[2] = !receiver[2];
        receiver[5] = !receiver[5];
        let mut channel = ClassicalChannel::new();
        let result = winnow_reconcile(&sender, &receiver, &mut channel).unwrap();
        // Block parity matches, so the block is not treated and the two
        // errors survive: the scheme's documented residual.
        assert_eq!(result.parity_bits_leaked, 2);
        assert_eq!(result.sender_key.len(), 16);
        assert_eq!(
            hamming_distance(&result.sender_key, &result.receiver_key),
            2
        );
        let has_syndromes = channel
            .transcript()
            .messages()
            .any(|m| matches!(&m.payload, MessagePayload::HammingSyndromes { syndromes } if !syndromes.is_empty()));
        assert!(!has_syndromes);
    }

    #[test]
    fn test_winnow_discards_a_mismatched_partial_block() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let sender = crate::bits::random_bits(&mut rng, 12);
        let mut receiver = sender.clone();
        receiver[10] = !receiver[10]; // error in the 4-bit tail
        let mut channel = ClassicalChannel::new();
        let result = winnow_reconcile(&sender, &receiver, &mut channel).unwrap();
        assert_eq!(result.sender_key, sender[..8].to_vec());
        assert_eq!(result.receiver_key, result.sender_key);
        assert_eq!(result.parity_bits_leaked, 2); // two block parities, no syndrome
    }

    #[test]
    fn test_winnow_on_equal_keys_keeps_everything() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let key = crate::bits::random_bits(&mut rng, 64);
        let mut channel = ClassicalChannel::new();
        let result = winnow_reconcile(&key, &key, &mut channel).unwrap();
        assert_eq!(result.sender_key, key);
        assert_eq!(result.receiver_key, key);
        assert_eq!(result.parity_bits_leaked, 8);
        assert_eq!(result.passes, 1);
    }

    #[test]
    fn test_winnow_corrects_scattered_single_errors() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let sender = crate::bits::random_bits(&mut rng, 80);
        let mut receiver = sender.clone();
        // One error in each of three distinct blocks.
        for &pos in &[3usize, 17, 46] {
            receiver[pos] = !receiver[pos];
        }
        let mut channel = ClassicalChannel::new();
        let result = winnow_reconcile(&sender, &receiver, &mut channel).unwrap();
        assert_eq!(result.receiver_key, result.sender_key);
        assert_eq!(result.sender_key.len(), 80 - 3);
        assert_eq!(result.parity_bits_leaked, 10 + 9);
    }

    #[test]
    fn test_toeplitz_identity_seed_reproduces_the_key() {
        // Seed with a single one at position n-1 puts ones exactly on the
        // main diagonal.
        let key = vec![true, false, true, true];
        let mut seed = vec![false; 7];
        seed[3] = true;
        assert_eq!(toeplitz_hash(&seed, &key, 4), key);
    }

    #[test]
    fn test_toeplitz_of_the_zero_key_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for _ in 0..10 {
            let seed = crate::bits::random_bits(&mut rng, 100 + 49);
            let out = toeplitz_hash(&seed, &[false; 100], 50);
            assert!(out.iter().all(|&b| !b));
        }
    }

    #[test]
    fn test_toeplitz_matches_naive_matrix_multiplication() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        for _ in 0..25 {
            let n = 1 + (rng.random::<u32>() % 90) as usize;
            let m = 1 + (rng.random::<u32>() % 90) as usize;
            let key = crate::bits::random_bits(&mut rng, n);
            let seed = crate::bits::random_bits(&mut rng, n + m - 1);
            let fast = toeplitz_hash(&seed, &key, m);
            let naive: Vec<bool> = (0..m)
                .map(|i| {
                    let mut acc = false;
                    for (j, &bit) in key.iter().enumerate() {
                        acc ^= seed[i + n - 1 - j] & bit;
                    }
                    acc
                })
                .collect();
            assert_eq!(fast, naive, "n={n} m={m}");
        }
    }

    #[test]
    fn test_privacy_amplification_length_law_and_agreement() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let key = crate::bits::random_bits(&mut rng, 500);
        let mut channel = ClassicalChannel::new();
        let (a, b) = privacy_amplify(&key, &key, 120, 32, &mut channel, &mut rng).unwrap();
        assert_eq!(a.len(), 500 - 120 - 32);
        assert_eq!(a, b);
        assert_eq!(a.security_parameter, 32);
    }

    #[test]
    fn test_privacy_amplification_exhausts_when_nothing_remains() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let key = vec![true; 64];
        let mut channel = ClassicalChannel::new();
        let err = privacy_amplify(&key, &key, 40, 24, &mut channel, &mut rng).unwrap_err();
        assert_eq!(
            err,
            PostprocessError::KeyExhausted {
                len: 64,
                leakage: 40,
                security_parameter: 24
            }
        );
        let err = privacy_amplify(&key, &key, 70, 0, &mut channel, &mut rng).unwrap_err();
        assert!(matches!(err, PostprocessError::KeyExhausted { .. }));
    }

    #[test]
    fn test_pipeline_completes_on_clean_keys_for_both_schemes() {
        for reconciliation in [Reconciliation::Cascade, Reconciliation::Winnow] {
            let mut rng = ChaCha20Rng::seed_from_u64(18);
            let bits = crate::bits::random_bits(&mut rng, 4096);
            let sifted = sifted_from(bits.clone(), bits);
            let params = PostprocessParams {
                reconciliation,
                ..PostprocessParams::default()
            };
            let mut channel = ClassicalChannel::new();
            let run = run_pipeline(&sifted, &params, &mut channel, &mut rng).unwrap();
            let PipelineOutcome::Completed {
                sender_key,
                receiver_key,
            } = &run.outcome
            else {
                panic!("pipeline must complete, got {:?}", run.outcome);
            };
            assert_eq!(sender_key, receiver_key);
            let reconciled_len = run.reconciliation.as_ref().unwrap().sender_key.len();
            assert_eq!(
                sender_key.len(),
                reconciled_len - run.total_leakage - params.security_parameter
            );
            assert_eq!(
                run.total_leakage,
                channel.transcript().recount_key_leakage(),
                "{reconciliation} ledger must match the transcript recount"
            );
        }
    }

    #[test]
    fn test_pipeline_aborts_on_heavy_disagreement() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let sender = crate::bits::random_bits(&mut rng, 1024);
        let receiver = plant_errors(&sender, 0.5, 20);
        let sifted = sifted_from(sender, receiver);
        let params = PostprocessParams::default();
        let mut channel = ClassicalChannel::new();
        let run = run_pipeline(&sifted, &params, &mut channel, &mut rng).unwrap();
        assert_eq!(run.outcome, PipelineOutcome::AbortedAtEstimation);
        assert_eq!(run.estimate.verdict, Verdict::Abort);
        assert!(
            run.reconciliation.is_none(),
            "no parities may leak after an abort"
        );
        assert_eq!(channel.transcript().recount_key_leakage(), 0);
    }

    #[test]
    fn test_pipeline_reports_exhaustion_as_an_outcome() {
        // 16 clean bits: estimation removes 4, cascade leaks at least one
        // parity per pass, and the margin of 32 dwarfs what is left.
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let bits = crate::bits::random_bits(&mut rng, 16);
        let sifted = sifted_from(bits.clone(), bits);
        let params = PostprocessParams::default();
        let mut channel = ClassicalChannel::new();
        let run = run_pipeline(&sifted, &params, &mut channel, &mut rng).unwrap();
        assert_eq!(run.outcome, PipelineOutcome::KeyExhausted);
    }

    proptest! {
        #[test]
        fn prop_toeplitz_is_linear(
            n in 1usize..80,
            m in 1usize..80,
            seed_a in any::<u64>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed_a);
            let seed = crate::bits::random_bits(&mut rng, n + m - 1);
            let k1 = crate::bits::random_bits(&mut rng, n);
            let k2 = crate::bits::random_bits(&mut rng, n);
            let sum = crate::bits::xor(&k1, &k2);
            let lhs = toeplitz_hash(&seed, &sum, m);
            let rhs = crate::bits::xor(
                &toeplitz_hash(&seed, &k1, m),
                &toeplitz_hash(&seed, &k2, m),
            );
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn prop_winnow_never_lengthens_and_never_leaks_less_than_parities(
            n in 8usize..200,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sender = crate::bits::random_bits(&mut rng, n);
            let receiver = plant_errors(&sender, 0.05, seed ^ 0xABCD);
            let mut channel = ClassicalChannel::new();
            let result = winnow_reconcile(&sender, &receiver, &mut channel).unwrap();
            prop_assert!(result.sender_key.len() <= n);
            prop_assert_eq!(result.sender_key.len(), result.receiver_key.len());
            prop_assert!(result.parity_bits_leaked >= n.div_ceil(8));
            prop_assert_eq!(result.parity_bits_leaked, channel.transcript().recount_key_leakage());
        }
    }
}

//! Helpers for working with keys represented as `Vec<bool>` bit strings.
//!
//! Keys in this crate stay in bit form until they cross into the 802.11i
//! layer, which thinks in bytes. Bits map to bytes MSB-first: bit 0 of a
//! string becomes the most significant bit of byte 0.

use rand::Rng;

/// Draws `n` uniformly random bits.
pub fn random_bits<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Even/odd parity of a bit slice: `true` when the number of ones is odd.
pub fn parity(bits: &[bool]) -> bool {
    bits.iter().filter(|&&b| b).count() % 2 == 1
}

/// Bitwise XOR of two equal-length slices.
///
/// # Panics
///
/// Panics if the slices differ in length.
pub fn xor(a: &[bool], b: &[bool]) -> Vec<bool> {
    assert_eq!(a.len(), b.len(), "xor operands must have equal length");
    a.iter().zip(b).map(|(&x, &y)| x ^ y).collect()
}

/// Number of positions at which two equal-length bit strings differ.
///
/// # Panics
///
/// Panics if the slices differ in length.
pub fn hamming_distance(a: &[bool], b: &[bool]) -> usize {
    assert_eq!(a.len(), b.len(), "operands must have equal length");
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Packs bits into bytes, MSB-first. A trailing partial byte is zero-padded.
pub fn to_bytes(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &bit) in bits.iter().enumerate() {
        if bit {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Unpacks bytes into bits, MSB-first (inverse of [`to_bytes`] for full bytes).
pub fn from_bytes(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&byte| (0..8).map(move |i| byte & (0x80 >> i) != 0))
        .collect()
}

/// Renders bits as a `01` string for logs and transcripts.
pub fn format_bits(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Renders bytes as lowercase hex for logs and transcripts.
pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

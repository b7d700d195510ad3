//! Idealized polarization qubits: preparation, measurement, and photon
//! sources.
//!
//! A key bit is encoded as the polarization of a photon in one of two
//! conjugate bases. The rectilinear basis uses horizontal (0) and vertical
//! (1) polarization; the diagonal basis uses 45 degrees (0) and 135 degrees
//! (1). Measuring in the preparation basis reproduces the encoded bit with
//! certainty; measuring in the other basis yields a uniformly random bit and
//! re-polarizes the photon along the measured axis, which is the disturbance
//! that makes eavesdropping on such a stream detectable.
//!
//! Photon-number effects are modeled by [`PhotonPulse::photon_count`]: an
//! ideal source emits exactly one photon per pulse, while an attenuated
//! laser emits a Poisson-distributed number, occasionally zero (an empty
//! pulse) or two and more (the opening a photon-number-splitting attacker
//! needs).

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// A measurement basis for polarization qubits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Basis {
    /// Horizontal/vertical polarization (0 and 90 degrees).
    Rectilinear,
    /// Diagonal/anti-diagonal polarization (45 and 135 degrees).
    Diagonal,
}

impl Basis {
    /// The conjugate basis.
    pub fn other(self) -> Basis {
        match self {
            Basis::Rectilinear => Basis::Diagonal,
            Basis::Diagonal => Basis::Rectilinear,
        }
    }

    /// Draws a uniformly random basis.
    pub fn random<R: Rng>(rng: &mut R) -> Basis {
        if rng.random::<bool>() {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }
}

/// One of the four polarization states used by the protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarization {
    /// Horizontal (0 degrees): bit 0 in the rectilinear basis.
    Horizontal,
    /// Vertical (90 degrees): bit 1 in the rectilinear basis.
    Vertical,
    /// Diagonal (45 degrees): bit 0 in the diagonal basis.
    Diagonal,
    /// Anti-diagonal (135 degrees): bit 1 in the diagonal basis.
    AntiDiagonal,
}

impl Polarization {
    /// All four states, in a fixed canonical order.
    pub const ALL: [Polarization; 4] = [
        Polarization::Horizontal,
        Polarization::Vertical,
        Polarization::Diagonal,
        Polarization::AntiDiagonal,
    ];

    /// The basis this state belongs to.
    pub fn basis(self) -> Basis {
        match self {
            Polarization::Horizontal | Polarization::Vertical => Basis::Rectilinear,
            Polarization::Diagonal | Polarization::AntiDiagonal => Basis::Diagonal,
        }
    }

    /// The bit value this state encodes within its own basis.
    pub fn bit(self) -> bool {
        match self {
            Polarization::Horizontal | Polarization::Diagonal => false,
            Polarization::Vertical | Polarization::AntiDiagonal => true,
        }
    }

    /// The orthogonal state in the same basis.
    pub fn orthogonal(self) -> Polarization {
        encode(!self.bit(), self.basis())
    }

    /// Whether two states are orthogonal (same basis, opposite bit).
    pub fn is_orthogonal_to(self, other: Polarization) -> bool {
        self.basis() == other.basis() && self.bit() != other.bit()
    }
}

/// Maps a key bit and a basis choice to the polarization state that encodes
/// it.
pub fn encode(bit: bool, basis: Basis) -> Polarization {
    match (bit, basis) {
        (false, Basis::Rectilinear) => Polarization::Horizontal,
        (true, Basis::Rectilinear) => Polarization::Vertical,
        (false, Basis::Diagonal) => Polarization::Diagonal,
        (true, Basis::Diagonal) => Polarization::AntiDiagonal,
    }
}

/// A light pulse in flight: how many photons it carries and their common
/// polarization.
///
/// All photons of a multi-photon pulse share one polarization, which is what
/// a photon-number-splitting attacker exploits. A pulse with
/// `photon_count == 0` is vacuum; its polarization field is physically
/// meaningless and detectors report nothing for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhotonPulse {
    /// Number of photons in the pulse.
    pub photon_count: u32,
    /// Shared polarization of every photon in the pulse.
    pub polarization: Polarization,
}

impl PhotonPulse {
    /// A single photon with the given polarization.
    pub fn single(polarization: Polarization) -> PhotonPulse {
        PhotonPulse {
            photon_count: 1,
            polarization,
        }
    }

    /// An empty pulse (no photons).
    pub fn vacuum() -> PhotonPulse {
        PhotonPulse {
            photon_count: 0,
            polarization: Polarization::Horizontal,
        }
    }

    /// Whether the pulse carries no photons.
    pub fn is_vacuum(&self) -> bool {
        self.photon_count == 0
    }
}

/// The result of pointing a detector at a pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementOutcome {
    /// A click, decoded to a bit in the measurement basis.
    Bit(bool),
    /// No click: the pulse was empty when it arrived.
    NoDetection,
}

impl MeasurementOutcome {
    /// The detected bit, if there was a detection.
    pub fn bit(self) -> Option<bool> {
        match self {
            MeasurementOutcome::Bit(b) => Some(b),
            MeasurementOutcome::NoDetection => None,
        }
    }
}

/// The photon source driving a transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceModel {
    /// An ideal source: exactly one photon per pulse.
    SinglePhoton,
    /// An attenuated laser whose photon number per pulse is Poisson
    /// distributed with the given mean.
    WeakLaser {
        /// Mean photon number per pulse; must lie in `(0, 2]`.
        mean_photon_number: f64,
    },
}

impl SourceModel {
    /// Builds a weak-laser source, rejecting means outside `(0, 2]`.
    pub fn weak_laser(mean_photon_number: f64) -> Result<SourceModel, String> {
        if mean_photon_number > 0.0 && mean_photon_number <= 2.0 {
            Ok(SourceModel::WeakLaser { mean_photon_number })
        } else {
            Err(format!(
                "mean photon number must lie in (0, 2], got {mean_photon_number}"
            ))
        }
    }
}

/// Measures a pulse in the given basis, consuming or collapsing it.
///
/// An empty pulse yields [`MeasurementOutcome::NoDetection`]. A pulse whose
/// polarization lies in the measurement basis yields its encoded bit with
/// certainty. Otherwise the outcome is a uniformly random bit, and the pulse
/// collapses: its polarization is replaced by the state that encodes the
/// observed bit in the measurement basis, so any surviving photons carry no
/// memory of the original preparation.
pub fn measure<R: Rng>(pulse: &mut PhotonPulse, basis: Basis, rng: &mut R) -> MeasurementOutcome {
    if pulse.is_vacuum() {
        return MeasurementOutcome::NoDetection;
    }
    let bit = if pulse.polarization.basis() == basis {
        pulse.polarization.bit()
    } else {
        rng.random::<bool>()
    };
    pulse.polarization = encode(bit, basis);
    MeasurementOutcome::Bit(bit)
}

/// Emits one pulse encoding `bit` in `basis` from the given source.
pub fn emit_pulse<R: Rng>(
    source: SourceModel,
    bit: bool,
    basis: Basis,
    rng: &mut R,
) -> PhotonPulse {
    let photon_count = match source {
        SourceModel::SinglePhoton => 1,
        SourceModel::WeakLaser { mean_photon_number } => {
            let poisson = Poisson::new(mean_photon_number)
                .expect("mean photon number is validated to be positive");
            poisson.sample(rng) as u32
        }
    };
    PhotonPulse {
        photon_count,
        polarization: encode(bit, basis),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn test_encode_covers_all_four_states() {
        assert_eq!(encode(false, Basis::Rectilinear), Polarization::Horizontal);
        assert_eq!(encode(true, Basis::Rectilinear), Polarization::Vertical);
        assert_eq!(encode(false, Basis::Diagonal), Polarization::Diagonal);
        assert_eq!(encode(true, Basis::Diagonal), Polarization::AntiDiagonal);
    }

    #[test]
    fn test_encode_and_decode_are_inverse() {
        for state in Polarization::ALL {
            assert_eq!(encode(state.bit(), state.basis()), state);
        }
    }

    #[test]
    fn test_orthogonality_within_and_across_bases() {
        assert!(Polarization::Horizontal.is_orthogonal_to(Polarization::Vertical));
        assert!(Polarization::Diagonal.is_orthogonal_to(Polarization::AntiDiagonal));
        assert!(!Polarization::Horizontal.is_orthogonal_to(Polarization::Diagonal));
        assert!(!Polarization::Horizontal.is_orthogonal_to(Polarization::Horizontal));
        for state in Polarization::ALL {
            assert_eq!(state.orthogonal().orthogonal(), state);
        }
    }

    #[test]
    fn test_measure_matching_basis_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for state in Polarization::ALL {
            for _ in 0..32 {
                let mut pulse = PhotonPulse::single(state);
                let outcome = measure(&mut pulse, state.basis(), &mut rng);
                assert_eq!(outcome, MeasurementOutcome::Bit(state.bit()));
                assert_eq!(
                    pulse.polarization, state,
                    "matched measurement must not disturb"
                );
            }
        }
    }

    #[test]
    fn test_measure_vacuum_yields_no_detection() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut pulse = PhotonPulse::vacuum();
        assert_eq!(
            measure(&mut pulse, Basis::Rectilinear, &mut rng),
            MeasurementOutcome::NoDetection
        );
        assert_eq!(
            measure(&mut pulse, Basis::Diagonal, &mut rng),
            MeasurementOutcome::NoDetection
        );
    }

    #[test]
    fn test_measure_mismatched_basis_is_uniform() {
        // With 1e5 samples the one-fraction stays within +-0.01 of 1/2 unless
        // the generator is broken; also run a 1-dof chi-squared test against
        // the 0.001 critical value.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 100_000usize;
        let mut ones = 0usize;
        for _ in 0..n {
            let mut pulse = PhotonPulse::single(Polarization::Horizontal);
            if measure(&mut pulse, Basis::Diagonal, &mut rng) == MeasurementOutcome::Bit(true) {
                ones += 1;
            }
        }
        let fraction = ones as f64 / n as f64;
        assert!(
            (fraction - 0.5).abs() < 0.01,
            "one-fraction {fraction} too far from 1/2"
        );
        let expected = n as f64 / 2.0;
        let chi2 = (ones as f64 - expected).powi(2) / expected
            + ((n - ones) as f64 - expected).powi(2) / expected;
        assert!(
            chi2 < 10.828,
            "chi-squared {chi2} exceeds the 0.001 critical value"
        );
    }

    #[test]
    fn test_mismatched_measurement_collapses_the_state() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..1_000 {
            let mut pulse = PhotonPulse::single(Polarization::Horizontal);
            let first = measure(&mut pulse, Basis::Diagonal, &mut rng);
            // After the diagonal measurement the photon is diagonal-basis
            // polarized: re-measuring diagonally must repeat the outcome.
            let second = measure(&mut pulse, Basis::Diagonal, &mut rng);
            let third = measure(&mut pulse, Basis::Diagonal, &mut rng);
            assert_eq!(first, second);
            assert_eq!(second, third);
        }
    }

    #[test]
    fn test_measure_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(99);
            (0..256)
                .map(|_| {
                    let mut pulse = PhotonPulse::single(Polarization::Diagonal);
                    measure(&mut pulse, Basis::Rectilinear, &mut rng)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn test_single_photon_source_always_emits_one_photon() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..100 {
            let pulse = emit_pulse(SourceModel::SinglePhoton, true, Basis::Diagonal, &mut rng);
            assert_eq!(pulse.photon_count, 1);
            assert_eq!(pulse.polarization, Polarization::AntiDiagonal);
        }
    }

    #[test]
    fn test_weak_laser_photon_number_matches_poisson_tails() {
        // For a Poisson(0.5) photon number: P(0) = e^-0.5 ~ 0.6065 and
        // P(>=2) = 1 - e^-0.5 * 1.5 ~ 0.0902. Check both empirical fractions
        // against bands centered on the analytic values.
        let mu = 0.5f64;
        let p_zero = (-mu).exp();
        let p_multi = 1.0 - (-mu).exp() * (1.0 + mu);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let source = SourceModel::weak_laser(mu).unwrap();
        let n = 100_000usize;
        let mut zeros = 0usize;
        let mut multis = 0usize;
        for _ in 0..n {
            let pulse = emit_pulse(source, false, Basis::Rectilinear, &mut rng);
            match pulse.photon_count {
                0 => zeros += 1,
                1 => {}
                _ => multis += 1,
            }
        }
        let zero_fraction = zeros as f64 / n as f64;
        let multi_fraction = multis as f64 / n as f64;
        assert!(
            (zero_fraction - p_zero).abs() < 0.005,
            "vacuum fraction {zero_fraction}"
        );
        assert!(
            (multi_fraction - p_multi).abs() < 0.005,
            "multiphoton fraction {multi_fraction}"
        );
        assert!(
            (0.60..=0.61).contains(&zero_fraction),
            "vacuum fraction {zero_fraction}"
        );
        assert!(
            (0.085..=0.096).contains(&multi_fraction),
            "multiphoton fraction {multi_fraction}"
        );
    }

    #[test]
    fn test_weak_laser_rejects_out_of_range_means() {
        assert!(SourceModel::weak_laser(0.0).is_err());
        assert!(SourceModel::weak_laser(-1.0).is_err());
        assert!(SourceModel::weak_laser(2.1).is_err());
        assert!(SourceModel::weak_laser(2.0).is_ok());
        assert!(SourceModel::weak_laser(0.1).is_ok());
    }
}

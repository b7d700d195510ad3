//! The experiment lab: declarative scenarios, seeded batch execution, and
//! machine-readable reports.
//!
//! A [`Scenario`] fixes every knob of a session — protocol, channel,
//! eavesdropper, postprocessing, handshake mode — plus a base seed and a
//! trial count. [`run_scenario`] executes the trials with seeds `seed`,
//! `seed + 1`, … (independently, possibly in parallel) and returns a
//! [`RunReport`] whose CSV and JSON renderings are byte-identical across
//! reruns: all randomness is seeded and even the reported wall time is
//! simulated rather than measured. [`sweep`] reruns a base scenario across a
//! list of values for one field and emits a combined summary table.
//!
//! Scenario files are flat `key = value` text with dotted keys for the
//! nested source and eavesdropper settings, e.g.:
//!
//! ```text
//! protocol = bb84
//! n_pulses = 50000
//! source.kind = weak_laser
//! source.mu = 0.5
//! eve.kind = intercept_resend
//! eve.fraction = 0.25
//! trials = 20
//! seed = 7
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    resolve_from_transcript, ChannelConfig, ClassicalChannel, EveKnowledge, EveStrategy,
};
use crate::handshake::{run_quantum_handshake, FaultPlan, HandshakeConfig, QkdParams, PMK_BYTES};
use crate::postprocess::{
    run_pipeline, PipelineOutcome, PostprocessError, PostprocessParams, Reconciliation, Verdict,
};
use crate::protocol::{exchange, sift, Protocol};
use crate::quantum::SourceModel;

/// The fixed CSV header; one row per trial follows it.
pub const CSV_HEADER: &str = "seed,sift_fraction,qber,verdict,leaked_bits,final_key_length,\
eve_resolved_bits,handshake_outcome,wall_time_ms";

/// Pre-shared pairwise master key used by lab handshake runs. Provisioning
/// is out of scope for the simulator, so both parties hold this constant.
pub const DEMO_PMK: [u8; PMK_BYTES] = [0x42; PMK_BYTES];

/// A scenario configuration error.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScenarioError {
    /// A key named no scenario field.
    #[error("unknown scenario field `{name}`")]
    UnknownField {
        /// The offending key.
        name: String,
    },
    /// A field value failed to parse or fell outside its documented range.
    #[error("invalid value for `{field}`: {message}")]
    InvalidValue {
        /// The field the value was destined for.
        field: String,
        /// What went wrong.
        message: String,
    },
    /// A loaded report failed its internal consistency checks.
    #[error("report integrity check failed: {message}")]
    ReportIntegrity {
        /// What went wrong.
        message: String,
    },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidValue {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Photon source selector, paired with its mean photon number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Exactly one photon per pulse.
    SinglePhoton,
    /// Attenuated laser with Poisson-distributed photon counts.
    WeakLaser,
}

/// The `source.*` scenario fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Which source model to use.
    #[serde(default = "defaults::source_kind")]
    pub kind: SourceKind,
    /// Mean photon number, used only by the weak laser.
    #[serde(default = "defaults::source_mu")]
    pub mu: f64,
}

/// Eavesdropper selector, paired with its intercept fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EveKind {
    /// No eavesdropper.
    None,
    /// Measure-and-resend on a fraction of pulses.
    InterceptResend,
    /// Photon number splitting on multi-photon pulses.
    PhotonNumberSplitting,
}

/// The `eve.*` scenario fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EveSpec {
    /// Which attack to mount.
    #[serde(default = "defaults::eve_kind")]
    pub kind: EveKind,
    /// Fraction of pulses intercepted, used only by intercept-resend.
    #[serde(default = "defaults::eve_fraction")]
    pub fraction: f64,
}

/// Whether a trial stops after key distillation or runs the full handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Exchange, sift, estimate, reconcile, amplify — then stop.
    QkdOnly,
    /// Feed the distilled key into the quantum 4-way handshake.
    FullHandshake,
}

mod defaults {
    use super::*;

    pub fn protocol() -> Protocol {
        Protocol::Sarg04
    }
    pub fn n_pulses() -> usize {
        20_000
    }
    pub fn source() -> SourceSpec {
        SourceSpec {
            kind: source_kind(),
            mu: source_mu(),
        }
    }
    pub fn source_kind() -> SourceKind {
        SourceKind::SinglePhoton
    }
    pub fn source_mu() -> f64 {
        0.5
    }
    pub fn eve() -> EveSpec {
        EveSpec {
            kind: eve_kind(),
            fraction: eve_fraction(),
        }
    }
    pub fn eve_kind() -> EveKind {
        EveKind::None
    }
    pub fn eve_fraction() -> f64 {
        1.0
    }
    pub fn zero() -> f64 {
        0.0
    }
    pub fn sample_fraction() -> f64 {
        0.25
    }
    pub fn qber_threshold() -> f64 {
        0.11
    }
    pub fn reconciliation() -> Reconciliation {
        Reconciliation::Cascade
    }
    pub fn security_parameter() -> usize {
        32
    }
    pub fn mode() -> RunMode {
        RunMode::FullHandshake
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn trials() -> usize {
        1
    }
}

/// A complete experiment configuration.
///
/// Every field has a default (SARG04 over an ideal single-photon channel,
/// full handshake, one trial), so scenario files and JSON bodies may be
/// partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Which key distribution protocol to run.
    #[serde(default = "defaults::protocol")]
    pub protocol: Protocol,
    /// Pulses exchanged per session (per distillation round in handshake
    /// mode).
    #[serde(default = "defaults::n_pulses")]
    pub n_pulses: usize,
    /// Photon source settings (`source.kind`, `source.mu`).
    #[serde(default = "defaults::source")]
    pub source: SourceSpec,
    /// Probability a surviving photon's bit flips within its basis.
    #[serde(default = "defaults::zero")]
    pub flip_probability: f64,
    /// Probability a pulse is absorbed in transit.
    #[serde(default = "defaults::zero")]
    pub loss_probability: f64,
    /// Eavesdropper settings (`eve.kind`, `eve.fraction`).
    #[serde(default = "defaults::eve")]
    pub eve: EveSpec,
    /// Fraction of the sifted key sacrificed to error estimation.
    #[serde(default = "defaults::sample_fraction")]
    pub sample_fraction: f64,
    /// Estimated error rate above which the session aborts.
    #[serde(default = "defaults::qber_threshold")]
    pub qber_threshold: f64,
    /// Information reconciliation scheme.
    #[serde(default = "defaults::reconciliation")]
    pub reconciliation: Reconciliation,
    /// Bits of extra compression during privacy amplification.
    #[serde(default = "defaults::security_parameter")]
    pub security_parameter: usize,
    /// Whether trials stop after distillation or run the handshake.
    #[serde(default = "defaults::mode")]
    pub mode: RunMode,
    /// Base seed; trial `i` uses `seed + i`.
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Number of independent trials.
    #[serde(default = "defaults::trials")]
    pub trials: usize,
}

impl Default for Scenario {
    fn default() -> Scenario {
        Scenario {
            protocol: defaults::protocol(),
            n_pulses: defaults::n_pulses(),
            source: defaults::source(),
            flip_probability: defaults::zero(),
            loss_probability: defaults::zero(),
            eve: defaults::eve(),
            sample_fraction: defaults::sample_fraction(),
            qber_threshold: defaults::qber_threshold(),
            reconciliation: defaults::reconciliation(),
            security_parameter: defaults::security_parameter(),
            mode: defaults::mode(),
            seed: defaults::seed(),
            trials: defaults::trials(),
        }
    }
}

fn parse_f64(field: &str, value: &str) -> Result<f64, ScenarioError> {
    value
        .parse()
        .map_err(|_| invalid(field, format!("`{value}` is not a number")))
}

fn parse_usize(field: &str, value: &str) -> Result<usize, ScenarioError> {
    value
        .parse()
        .map_err(|_| invalid(field, format!("`{value}` is not a non-negative integer")))
}

fn parse_u64(field: &str, value: &str) -> Result<u64, ScenarioError> {
    value
        .parse()
        .map_err(|_| invalid(field, format!("`{value}` is not a non-negative integer")))
}

impl Scenario {
    /// Sets one field from its textual form, using the same dotted keys as
    /// scenario files (`protocol`, `n_pulses`, `source.kind`, `source.mu`,
    /// `flip_probability`, `loss_probability`, `eve.kind`, `eve.fraction`,
    /// `sample_fraction`, `qber_threshold`, `reconciliation`,
    /// `security_parameter`, `mode`, `seed`, `trials`).
    ///
    /// Range validation is deferred to [`Scenario::validate`] so fields may
    /// be set in any order.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        match key {
            "protocol" => {
                self.protocol = match value {
                    "bb84" => Protocol::Bb84,
                    "sarg04" => Protocol::Sarg04,
                    _ => return Err(invalid(key, format!("`{value}`; expected bb84 or sarg04"))),
                }
            }
            "n_pulses" => self.n_pulses = parse_usize(key, value)?,
            "source.kind" => {
                self.source.kind = match value {
                    "single_photon" => SourceKind::SinglePhoton,
                    "weak_laser" => SourceKind::WeakLaser,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("`{value}`; expected single_photon or weak_laser"),
                        ))
                    }
                }
            }
            "source.mu" => self.source.mu = parse_f64(key, value)?,
            "flip_probability" => self.flip_probability = parse_f64(key, value)?,
            "loss_probability" => self.loss_probability = parse_f64(key, value)?,
            "eve.kind" => {
                self.eve.kind = match value {
                    "none" => EveKind::None,
                    "intercept" | "intercept_resend" => EveKind::InterceptResend,
                    "pns" | "photon_number_splitting" => EveKind::PhotonNumberSplitting,
                    _ => {
                        return Err(invalid(
                            key,
                            format!(
                                "`{value}`; expected none, intercept_resend, or \
                                 photon_number_splitting"
                            ),
                        ))
                    }
                }
            }
            "eve.fraction" => self.eve.fraction = parse_f64(key, value)?,
            "sample_fraction" => self.sample_fraction = parse_f64(key, value)?,
            "qber_threshold" => self.qber_threshold = parse_f64(key, value)?,
            "reconciliation" => {
                self.reconciliation = match value {
                    "cascade" => Reconciliation::Cascade,
                    "winnow" => Reconciliation::Winnow,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("`{value}`; expected cascade or winnow"),
                        ))
                    }
                }
            }
            "security_parameter" => self.security_parameter = parse_usize(key, value)?,
            "mode" => {
                self.mode = match value {
                    "qkd_only" => RunMode::QkdOnly,
                    "full_handshake" => RunMode::FullHandshake,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("`{value}`; expected qkd_only or full_handshake"),
                        ))
                    }
                }
            }
            "seed" => self.seed = parse_u64(key, value)?,
            "trials" => self.trials = parse_usize(key, value)?,
            _ => {
                return Err(ScenarioError::UnknownField {
                    name: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Renders the scenario in the flat `key = value` file format;
    /// [`parse_scenario`] inverts this exactly.
    pub fn to_kv(&self) -> String {
        let protocol = match self.protocol {
            Protocol::Bb84 => "bb84",
            Protocol::Sarg04 => "sarg04",
        };
        let source_kind = match self.source.kind {
            SourceKind::SinglePhoton => "single_photon",
            SourceKind::WeakLaser => "weak_laser",
        };
        let eve_kind = match self.eve.kind {
            EveKind::None => "none",
            EveKind::InterceptResend => "intercept_resend",
            EveKind::PhotonNumberSplitting => "photon_number_splitting",
        };
        let reconciliation = match self.reconciliation {
            Reconciliation::Cascade => "cascade",
            Reconciliation::Winnow => "winnow",
        };
        let mode = match self.mode {
            RunMode::QkdOnly => "qkd_only",
            RunMode::FullHandshake => "full_handshake",
        };
        format!(
            "protocol = {protocol}\n\
             n_pulses = {}\n\
             source.kind = {source_kind}\n\
             source.mu = {}\n\
             flip_probability = {}\n\
             loss_probability = {}\n\
             eve.kind = {eve_kind}\n\
             eve.fraction = {}\n\
             sample_fraction = {}\n\
             qber_threshold = {}\n\
             reconciliation = {reconciliation}\n\
             security_parameter = {}\n\
             mode = {mode}\n\
             seed = {}\n\
             trials = {}\n",
            self.n_pulses,
            self.source.mu,
            self.flip_probability,
            self.loss_probability,
            self.eve.fraction,
            self.sample_fraction,
            self.qber_threshold,
            self.security_parameter,
            self.seed,
            self.trials,
        )
    }

    /// The source model, with its parameter validated.
    pub fn source_model(&self) -> Result<SourceModel, ScenarioError> {
        match self.source.kind {
            SourceKind::SinglePhoton => Ok(SourceModel::SinglePhoton),
            SourceKind::WeakLaser => SourceModel::weak_laser(self.source.mu)
                .map_err(|message| invalid("source.mu", message)),
        }
    }

    /// The quantum channel configuration, with its parameters validated.
    pub fn channel_config(&self) -> Result<ChannelConfig, ScenarioError> {
        let source = self.source_model()?;
        ChannelConfig::new(self.flip_probability, self.loss_probability, source).map_err(|e| {
            let field = if e.name == "mean_photon_number" {
                "source.mu"
            } else {
                e.name
            };
            invalid(field, e.message)
        })
    }

    /// The eavesdropper strategy.
    pub fn eve_strategy(&self) -> EveStrategy {
        match self.eve.kind {
            EveKind::None => EveStrategy::None,
            EveKind::InterceptResend => EveStrategy::InterceptResend {
                fraction: self.eve.fraction,
            },
            EveKind::PhotonNumberSplitting => EveStrategy::PhotonNumberSplitting,
        }
    }

    /// The postprocessing parameters.
    pub fn postprocess_params(&self) -> PostprocessParams {
        PostprocessParams {
            sample_fraction: self.sample_fraction,
            qber_threshold: self.qber_threshold,
            reconciliation: self.reconciliation,
            security_parameter: self.security_parameter,
        }
    }

    /// The quantum-handshake distillation parameters.
    pub fn qkd_params(&self) -> Result<QkdParams, ScenarioError> {
        Ok(QkdParams {
            protocol: self.protocol,
            n_pulses: self.n_pulses,
            channel_config: self.channel_config()?,
            eve: self.eve_strategy(),
            postprocess: self.postprocess_params(),
            ..QkdParams::default()
        })
    }

    /// Checks every field against its documented range, reporting the first
    /// violation with its field name.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n_pulses == 0 {
            return Err(invalid("n_pulses", "must be at least 1"));
        }
        self.channel_config()?;
        if !(self.eve.fraction >= 0.0 && self.eve.fraction <= 1.0) {
            return Err(invalid(
                "eve.fraction",
                format!("{} is outside [0, 1]", self.eve.fraction),
            ));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return Err(invalid(
                "sample_fraction",
                format!("{} is outside (0, 1)", self.sample_fraction),
            ));
        }
        if !(self.qber_threshold >= 0.0 && self.qber_threshold <= 0.5) {
            return Err(invalid(
                "qber_threshold",
                format!("{} is outside [0, 0.5]", self.qber_threshold),
            ));
        }
        if self.security_parameter == 0 {
            return Err(invalid("security_parameter", "must be at least 1"));
        }
        Ok(())
    }
}

/// Parses the flat `key = value` scenario format. Unset keys keep their
/// defaults; blank lines and `#` comments are ignored.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut scenario = Scenario::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(invalid(
                &format!("line {}", idx + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        scenario.set_field(key.trim(), value.trim())?;
    }
    Ok(scenario)
}

/// One trial's measurements — one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    /// The trial's seed.
    pub seed: u64,
    /// Sifted bits over pulses sent (across rounds, in handshake mode).
    pub sift_fraction: f64,
    /// Measured error rate; absent when too few bits survived sifting.
    pub qber: Option<f64>,
    /// Estimation verdict: `proceed`, `abort`, or `short` when estimation
    /// never ran.
    pub verdict: String,
    /// Key-correlated bits disclosed during reconciliation.
    pub leaked_bits: usize,
    /// Final distilled key length in bits (0 when no key was produced).
    pub final_key_length: usize,
    /// Key bits the eavesdropper resolved with certainty.
    pub eve_resolved_bits: usize,
    /// `established` or `aborted:<reason>`; empty in distillation-only mode.
    pub handshake_outcome: String,
    /// Simulated wall time: 1 µs per pulse plus 100 µs per classical
    /// message, reported in whole milliseconds.
    pub wall_time_ms: u64,
}

impl TrialRow {
    fn to_csv(&self) -> String {
        let qber = self.qber.map(|q| format!("{q:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{},{},{},{},{},{}",
            self.seed,
            self.sift_fraction,
            qber,
            self.verdict,
            self.leaked_bits,
            self.final_key_length,
            self.eve_resolved_bits,
            self.handshake_outcome,
            self.wall_time_ms,
        )
    }
}

/// Mean and population standard deviation of one report column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    /// Arithmetic mean (0 when no values).
    pub mean: f64,
    /// Population standard deviation (0 when no values).
    pub std_dev: f64,
    /// Number of values aggregated.
    pub count: usize,
}

impl ColumnStats {
    fn from_values(values: &[f64]) -> ColumnStats {
        if values.is_empty() {
            return ColumnStats {
                mean: 0.0,
                std_dev: 0.0,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        ColumnStats {
            mean,
            std_dev: variance.sqrt(),
            count: values.len(),
        }
    }

    fn close_to(&self, other: &ColumnStats) -> bool {
        fn near(a: f64, b: f64) -> bool {
            (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
        }
        self.count == other.count
            && near(self.mean, other.mean)
            && near(self.std_dev, other.std_dev)
    }
}

/// Aggregate statistics over a report's numeric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Stats over `sift_fraction`.
    pub sift_fraction: ColumnStats,
    /// Stats over the trials whose `qber` was measured.
    pub qber: ColumnStats,
    /// Stats over `leaked_bits`.
    pub leaked_bits: ColumnStats,
    /// Stats over `final_key_length`.
    pub final_key_length: ColumnStats,
    /// Stats over `eve_resolved_bits`.
    pub eve_resolved_bits: ColumnStats,
    /// Stats over `wall_time_ms`.
    pub wall_time_ms: ColumnStats,
}

impl Aggregates {
    fn from_rows(rows: &[TrialRow]) -> Option<Aggregates> {
        if rows.is_empty() {
            return None;
        }
        let column = |f: fn(&TrialRow) -> f64| {
            ColumnStats::from_values(&rows.iter().map(f).collect::<Vec<f64>>())
        };
        Some(Aggregates {
            sift_fraction: column(|r| r.sift_fraction),
            qber: ColumnStats::from_values(
                &rows.iter().filter_map(|r| r.qber).collect::<Vec<f64>>(),
            ),
            leaked_bits: column(|r| r.leaked_bits as f64),
            final_key_length: column(|r| r.final_key_length as f64),
            eve_resolved_bits: column(|r| r.eve_resolved_bits as f64),
            wall_time_ms: column(|r| r.wall_time_ms as f64),
        })
    }

    fn close_to(&self, other: &Aggregates) -> bool {
        self.sift_fraction.close_to(&other.sift_fraction)
            && self.qber.close_to(&other.qber)
            && self.leaked_bits.close_to(&other.leaked_bits)
            && self.final_key_length.close_to(&other.final_key_length)
            && self.eve_resolved_bits.close_to(&other.eve_resolved_bits)
            && self.wall_time_ms.close_to(&other.wall_time_ms)
    }
}

/// The full result of a scenario run: the configuration, one row per trial
/// (ordered by seed), and aggregates recomputable from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// The scenario that produced this report.
    pub scenario: Scenario,
    /// Per-trial rows, ordered by seed.
    pub rows: Vec<TrialRow>,
    /// Aggregate statistics; absent when there are no trials.
    pub aggregates: Option<Aggregates>,
}

impl RunReport {
    /// Renders the report as CSV: the fixed header plus one row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// Renders the report as a JSON document equivalent to the CSV plus
    /// scenario and aggregates.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        out.push('\n');
        out
    }

    /// Loads a report from JSON and verifies its integrity: the row count
    /// matches the scenario's trial count and the aggregates equal a
    /// recomputation from the rows.
    pub fn from_json(text: &str) -> Result<RunReport, ScenarioError> {
        let report: RunReport =
            serde_json::from_str(text).map_err(|e| ScenarioError::ReportIntegrity {
                message: e.to_string(),
            })?;
        if report.rows.len() != report.scenario.trials {
            return Err(ScenarioError::ReportIntegrity {
                message: format!(
                    "{} rows for {} trials",
                    report.rows.len(),
                    report.scenario.trials
                ),
            });
        }
        let recomputed = Aggregates::from_rows(&report.rows);
        let consistent = match (&report.aggregates, &recomputed) {
            (None, None) => true,
            (Some(a), Some(b)) => a.close_to(b),
            _ => false,
        };
        if !consistent {
            return Err(ScenarioError::ReportIntegrity {
                message: "aggregates do not match a recomputation from the rows".to_string(),
            });
        }
        Ok(report)
    }
}

/// Simulated wall time: 1 µs per quantum pulse plus 100 µs per classical
/// message, floored to whole milliseconds. Using modeled rather than
/// measured time keeps reports byte-identical across reruns and machines.
pub fn simulated_wall_time_ms(pulses: usize, classical_messages: usize) -> u64 {
    (pulses as u64 + 100 * classical_messages as u64) / 1000
}

fn verdict_name(verdict: Verdict) -> &'static str {
    match verdict {
        Verdict::Proceed => "proceed",
        Verdict::Abort => "abort",
    }
}

/// Runs a single trial, returning its row and the session transcript.
pub fn run_trial(scenario: &Scenario, trial_seed: u64) -> (TrialRow, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(trial_seed);
    let mut channel = ClassicalChannel::new();
    let config = scenario
        .channel_config()
        .expect("scenario validated before running");
    let eve = scenario.eve_strategy();

    let row = match scenario.mode {
        RunMode::QkdOnly => {
            let mut knowledge = EveKnowledge::new();
            let record = exchange(
                scenario.protocol,
                scenario.n_pulses,
                &config,
                &eve,
                &mut knowledge,
                &mut rng,
            );
            let sifted = sift(&record, &mut channel, &mut rng);
            let sift_fraction = sifted.len() as f64 / record.len().max(1) as f64;
            channel.stat("sift_fraction", sift_fraction);
            resolve_from_transcript(&mut knowledge, channel.transcript(), &mut rng);
            let (qber, verdict, leaked_bits, final_key_length) = match run_pipeline(
                &sifted,
                &scenario.postprocess_params(),
                &mut channel,
                &mut rng,
            ) {
                Ok(run) => {
                    let final_len = match &run.outcome {
                        PipelineOutcome::Completed { sender_key, .. } => sender_key.len(),
                        _ => 0,
                    };
                    (
                        Some(run.estimate.qber),
                        verdict_name(run.estimate.verdict),
                        run.total_leakage,
                        final_len,
                    )
                }
                Err(PostprocessError::KeyTooShort { .. }) => (None, "short", 0, 0),
                Err(other) => unreachable!("postprocessing invariant violated: {other}"),
            };
            let messages = channel.transcript().messages().count();
            TrialRow {
                seed: trial_seed,
                sift_fraction,
                qber,
                verdict: verdict.to_string(),
                leaked_bits,
                final_key_length,
                eve_resolved_bits: knowledge.resolved_bits.len(),
                handshake_outcome: String::new(),
                wall_time_ms: simulated_wall_time_ms(record.len(), messages),
            }
        }
        RunMode::FullHandshake => {
            let params = scenario
                .qkd_params()
                .expect("scenario validated before running");
            let run = run_quantum_handshake(
                DEMO_PMK,
                DEMO_PMK,
                &params,
                HandshakeConfig::default(),
                FaultPlan::none(),
                &mut channel,
                &mut rng,
            );
            let total_sifted: usize = run.rounds.iter().map(|r| r.sifted_bits).sum();
            let sift_fraction = total_sifted as f64 / run.pulses_sent.max(1) as f64;
            let last = run
                .rounds
                .last()
                .expect("at least one distillation round always runs");
            let handshake_outcome = match &run.result {
                Ok(()) => "established".to_string(),
                Err(reason) => format!("aborted:{reason}"),
            };
            let messages = channel.transcript().messages().count();
            TrialRow {
                seed: trial_seed,
                sift_fraction,
                qber: last.qber,
                verdict: last
                    .verdict
                    .map(verdict_name)
                    .unwrap_or("short")
                    .to_string(),
                leaked_bits: run.rounds.iter().map(|r| r.leaked_bits).sum(),
                final_key_length: last.final_key_bits,
                eve_resolved_bits: run.eve_resolved_bits,
                handshake_outcome,
                wall_time_ms: simulated_wall_time_ms(run.pulses_sent, messages),
            }
        }
    };
    (row, channel.into_transcript().render())
}

fn run_rows(scenario: &Scenario) -> Result<Vec<(TrialRow, String)>, ScenarioError> {
    scenario.validate()?;
    Ok((0..scenario.trials)
        .into_par_iter()
        .map(|i| run_trial(scenario, scenario.seed.wrapping_add(i as u64)))
        .collect())
}

/// Executes every trial of a scenario. Trials run independently (possibly
/// in parallel) with seeds `seed`, `seed + 1`, …; rows are ordered by seed.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let rows: Vec<TrialRow> = run_rows(scenario)?
        .into_iter()
        .map(|(row, _)| row)
        .collect();
    let aggregates = Aggregates::from_rows(&rows);
    Ok(RunReport {
        scenario: scenario.clone(),
        rows,
        aggregates,
    })
}

/// Like [`run_scenario`], but also returns each trial's rendered
/// transcript, in row order.
pub fn run_scenario_with_transcripts(
    scenario: &Scenario,
) -> Result<(RunReport, Vec<String>), ScenarioError> {
    let (rows, transcripts): (Vec<TrialRow>, Vec<String>) = run_rows(scenario)?.into_iter().unzip();
    let aggregates = Aggregates::from_rows(&rows);
    Ok((
        RunReport {
            scenario: scenario.clone(),
            rows,
            aggregates,
        },
        transcripts,
    ))
}

/// The result of sweeping one scenario field across several values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// The swept field.
    pub parameter: String,
    /// The values, in input order.
    pub values: Vec<String>,
    /// One full report per value, sharing the base scenario and seed.
    pub reports: Vec<RunReport>,
}

impl SweepReport {
    /// Renders the combined table: one line of aggregate means per swept
    /// value.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "value,trials,mean_sift_fraction,mean_qber,mean_leaked_bits,\
             mean_final_key_length,mean_eve_resolved_bits,established_count\n",
        );
        for (value, report) in self.values.iter().zip(&self.reports) {
            let established = report
                .rows
                .iter()
                .filter(|r| r.handshake_outcome == "established")
                .count();
            match &report.aggregates {
                Some(a) => {
                    let qber = if a.qber.count > 0 {
                        format!("{:.6}", a.qber.mean)
                    } else {
                        String::new()
                    };
                    out.push_str(&format!(
                        "{value},{},{:.6},{qber},{:.6},{:.6},{:.6},{established}\n",
                        report.rows.len(),
                        a.sift_fraction.mean,
                        a.leaked_bits.mean,
                        a.final_key_length.mean,
                        a.eve_resolved_bits.mean,
                    ));
                }
                None => out.push_str(&format!("{value},0,,,,,,0\n")),
            }
        }
        out
    }

    /// Renders the sweep as a JSON document.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        out.push('\n');
        out
    }
}

/// Reruns `base` once per value of `parameter` (any [`Scenario::set_field`]
/// key), sharing the base seed, and returns one report per value.
pub fn sweep(
    base: &Scenario,
    parameter: &str,
    values: &[String],
) -> Result<SweepReport, ScenarioError> {
    let mut reports = Vec::with_capacity(values.len());
    for value in values {
        let mut scenario = base.clone();
        scenario.set_field(parameter, value)?;
        reports.push(run_scenario(&scenario)?);
    }
    Ok(SweepReport {
        parameter: parameter.to_string(),
        values: values.to_vec(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_default_scenario_is_the_documented_baseline() {
        let s = Scenario::default();
        assert_eq!(s.protocol, Protocol::Sarg04);
        assert_eq!(s.n_pulses, 20_000);
        assert_eq!(s.source.kind, SourceKind::SinglePhoton);
        assert_eq!(s.flip_probability, 0.0);
        assert_eq!(s.loss_probability, 0.0);
        assert_eq!(s.eve.kind, EveKind::None);
        assert_eq!(s.sample_fraction, 0.25);
        assert_eq!(s.qber_threshold, 0.11);
        assert_eq!(s.reconciliation, Reconciliation::Cascade);
        assert_eq!(s.security_parameter, 32);
        assert_eq!(s.mode, RunMode::FullHandshake);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn test_scenario_file_parsing_with_comments_and_dotted_keys() {
        let text = "\n# a comment\nprotocol = bb84\n n_pulses = 500 \n\
                    eve.kind = intercept\neve.fraction = 0.5\nsource.kind = weak_laser\n\
                    source.mu = 0.7\nmode = qkd_only\ntrials = 3\nseed = 9\n";
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.protocol, Protocol::Bb84);
        assert_eq!(s.n_pulses, 500);
        assert_eq!(s.eve.kind, EveKind::InterceptResend);
        assert_eq!(s.eve.fraction, 0.5);
        assert_eq!(s.source.kind, SourceKind::WeakLaser);
        assert_eq!(s.source.mu, 0.7);
        assert_eq!(s.mode, RunMode::QkdOnly);
        assert_eq!(s.trials, 3);
        assert_eq!(s.seed, 9);
        // Unset fields keep defaults.
        assert_eq!(s.qber_threshold, 0.11);
    }

    #[test]
    fn test_scenario_parse_errors_name_the_field() {
        let err = parse_scenario("bogus_key = 1\n").unwrap_err();
        assert_eq!(
            err,
            ScenarioError::UnknownField {
                name: "bogus_key".to_string()
            }
        );
        let err = parse_scenario("protocol = b92\n").unwrap_err();
        assert!(
            matches!(err, ScenarioError::InvalidValue { ref field, .. } if field == "protocol")
        );
        let err = parse_scenario("no equals sign\n").unwrap_err();
        assert!(matches!(err, ScenarioError::InvalidValue { ref field, .. } if field == "line 1"));
        let err = parse_scenario("n_pulses = many\n").unwrap_err();
        assert!(
            matches!(err, ScenarioError::InvalidValue { ref field, .. } if field == "n_pulses")
        );
    }

    #[test]
    fn test_validation_rejects_out_of_range_fields() {
        let cases = [
            ("flip_probability", "0.7"),
            ("loss_probability", "1.0"),
            ("eve.fraction", "1.5"),
            ("sample_fraction", "0"),
            ("sample_fraction", "1"),
            ("qber_threshold", "0.6"),
            ("security_parameter", "0"),
            ("n_pulses", "0"),
        ];
        for (field, value) in cases {
            let mut s = Scenario::default();
            s.set_field(field, value).unwrap();
            let err = s.validate().unwrap_err();
            assert!(
                matches!(err, ScenarioError::InvalidValue { field: ref f, .. } if f == field),
                "{field}={value} must fail validation on that field, got {err:?}"
            );
        }
        // Weak-laser mu is validated only when the weak laser is selected.
        let mut s = Scenario::default();
        s.set_field("source.mu", "3.0").unwrap();
        assert!(s.validate().is_ok());
        s.set_field("source.kind", "weak_laser").unwrap();
        let err = s.validate().unwrap_err();
        assert!(
            matches!(err, ScenarioError::InvalidValue { ref field, .. } if field == "source.mu")
        );
    }

    #[test]
    fn test_kv_rendering_round_trips() {
        let mut s = Scenario::default();
        s.set_field("protocol", "bb84").unwrap();
        s.set_field("eve.kind", "pns").unwrap();
        s.set_field("source.kind", "weak_laser").unwrap();
        s.set_field("source.mu", "0.5").unwrap();
        s.set_field("flip_probability", "0.03").unwrap();
        s.set_field("trials", "7").unwrap();
        assert_eq!(parse_scenario(&s.to_kv()).unwrap(), s);
    }

    #[test]
    fn test_zero_trials_yield_an_empty_report_without_aggregates() {
        let s = Scenario {
            trials: 0,
            ..Scenario::default()
        };
        let report = run_scenario(&s).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.aggregates.is_none());
        assert_eq!(report.to_csv(), format!("{CSV_HEADER}\n"));
        RunReport::from_json(&report.to_json()).unwrap();
    }

    fn small_qkd_scenario() -> Scenario {
        let mut s = Scenario::default();
        s.set_field("mode", "qkd_only").unwrap();
        s.set_field("protocol", "bb84").unwrap();
        s.set_field("n_pulses", "2000").unwrap();
        s.set_field("trials", "5").unwrap();
        s.set_field("seed", "11").unwrap();
        s
    }

    #[test]
    fn test_qkd_only_rows_report_distillation_results() {
        let report = run_scenario(&small_qkd_scenario()).unwrap();
        assert_eq!(report.rows.len(), 5);
        for (i, row) in report.rows.iter().enumerate() {
            assert_eq!(row.seed, 11 + i as u64);
            assert!(
                (0.40..=0.60).contains(&row.sift_fraction),
                "sift {}",
                row.sift_fraction
            );
            assert_eq!(row.verdict, "proceed");
            assert_eq!(row.qber, Some(0.0));
            assert!(row.final_key_length > 0);
            assert!(row.handshake_outcome.is_empty());
            assert_eq!(row.eve_resolved_bits, 0);
            assert!(row.wall_time_ms > 0);
        }
        let aggregates = report.aggregates.unwrap();
        assert_eq!(aggregates.sift_fraction.count, 5);
        assert_eq!(aggregates.qber.count, 5);
    }

    #[test]
    fn test_full_handshake_rows_report_the_outcome() {
        let mut s = Scenario::default();
        s.set_field("n_pulses", "8000").unwrap();
        s.set_field("trials", "2").unwrap();
        let report = run_scenario(&s).unwrap();
        for row in &report.rows {
            assert_eq!(row.handshake_outcome, "established");
            assert!(row.final_key_length >= 384);
            assert_eq!(row.verdict, "proceed");
        }
    }

    #[test]
    fn test_full_intercept_aborts_the_handshake() {
        let mut s = Scenario::default();
        s.set_field("n_pulses", "8000").unwrap();
        s.set_field("eve.kind", "intercept_resend").unwrap();
        s.set_field("eve.fraction", "1.0").unwrap();
        s.set_field("trials", "3").unwrap();
        let report = run_scenario(&s).unwrap();
        for row in &report.rows {
            assert_eq!(row.verdict, "abort");
            assert_eq!(row.handshake_outcome, "aborted:qber_threshold_exceeded");
            assert_eq!(row.final_key_length, 0);
            assert_eq!(row.leaked_bits, 0);
            assert!(row.qber.unwrap() > 0.11);
        }
    }

    #[test]
    fn test_reports_are_byte_identical_across_reruns() {
        let s = small_qkd_scenario();
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_json(), b.to_json());
        let (c, transcripts_a) = run_scenario_with_transcripts(&s).unwrap();
        let (_, transcripts_b) = run_scenario_with_transcripts(&s).unwrap();
        assert_eq!(a.to_csv(), c.to_csv());
        assert_eq!(transcripts_a, transcripts_b);
        assert_eq!(transcripts_a.len(), 5);
    }

    #[test]
    fn test_csv_has_the_fixed_header_and_one_row_per_trial() {
        let report = run_scenario(&small_qkd_scenario()).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "seed,sift_fraction,qber,verdict,leaked_bits,final_key_length,eve_resolved_bits,\
             handshake_outcome,wall_time_ms"
        );
        assert_eq!(lines.len(), 6);
        for line in &lines[1..] {
            assert_eq!(line.matches(',').count(), 8, "row has 9 columns: {line}");
        }
    }

    #[test]
    fn test_report_json_round_trips_and_detects_tampering() {
        let report = run_scenario(&small_qkd_scenario()).unwrap();
        let loaded = RunReport::from_json(&report.to_json()).unwrap();
        assert_eq!(loaded, report);

        let mut tampered = report.clone();
        tampered.aggregates.as_mut().unwrap().sift_fraction.mean += 0.25;
        let err = RunReport::from_json(&tampered.to_json()).unwrap_err();
        assert!(matches!(err, ScenarioError::ReportIntegrity { .. }));

        let mut truncated = report.clone();
        truncated.rows.pop();
        let err = RunReport::from_json(&truncated.to_json()).unwrap_err();
        assert!(matches!(err, ScenarioError::ReportIntegrity { .. }));
    }

    #[test]
    fn test_sweep_over_the_intercept_fraction_tracks_the_error_rate() {
        let mut base = small_qkd_scenario();
        base.set_field("n_pulses", "4000").unwrap();
        base.set_field("trials", "3").unwrap();
        base.set_field("eve.kind", "intercept_resend").unwrap();
        base.set_field("qber_threshold", "0.5").unwrap();
        let values: Vec<String> = ["0", "0.5", "1.0"].iter().map(|s| s.to_string()).collect();
        let swept = sweep(&base, "eve.fraction", &values).unwrap();
        assert_eq!(swept.reports.len(), 3);
        let means: Vec<f64> = swept
            .reports
            .iter()
            .map(|r| r.aggregates.as_ref().unwrap().qber.mean)
            .collect();
        assert!(means[0] < 0.02, "no eavesdropper, mean qber {}", means[0]);
        assert!(
            (means[1] - 0.125).abs() < 0.04,
            "half intercept, mean qber {}",
            means[1]
        );
        assert!(
            (means[2] - 0.25).abs() < 0.04,
            "full intercept, mean qber {}",
            means[2]
        );
        let summary = swept.summary_csv();
        assert!(summary.starts_with("value,trials,mean_sift_fraction,mean_qber,"));
        assert_eq!(summary.lines().count(), 4);
    }

    #[test]
    fn test_protocol_sweep_under_photon_splitting_shows_the_sarg04_advantage() {
        let mut base = Scenario::default();
        base.set_field("mode", "qkd_only").unwrap();
        base.set_field("n_pulses", "20000").unwrap();
        base.set_field("trials", "5").unwrap();
        base.set_field("seed", "31").unwrap();
        base.set_field("source.kind", "weak_laser").unwrap();
        base.set_field("source.mu", "0.5").unwrap();
        base.set_field("eve.kind", "photon_number_splitting")
            .unwrap();
        let values: Vec<String> = ["bb84", "sarg04"].iter().map(|s| s.to_string()).collect();
        let swept = sweep(&base, "protocol", &values).unwrap();
        for (bb84, sarg04) in swept.reports[0].rows.iter().zip(&swept.reports[1].rows) {
            assert!(
                sarg04.eve_resolved_bits < bb84.eve_resolved_bits,
                "splitting attack must resolve fewer bits against SARG04 in every trial \
                 ({} vs {})",
                sarg04.eve_resolved_bits,
                bb84.eve_resolved_bits
            );
        }
    }

    #[test]
    fn test_sweep_rejects_unknown_parameters_and_accepts_empty_values() {
        let base = Scenario::default();
        let err = sweep(&base, "warp_factor", &["9".to_string()]).unwrap_err();
        assert_eq!(
            err,
            ScenarioError::UnknownField {
                name: "warp_factor".to_string()
            }
        );
        let swept = sweep(&base, "eve.fraction", &[]).unwrap();
        assert!(swept.reports.is_empty());
        assert_eq!(swept.summary_csv().lines().count(), 1);
    }

    #[test]
    fn test_simulated_wall_time_formula() {
        assert_eq!(simulated_wall_time_ms(0, 0), 0);
        assert_eq!(simulated_wall_time_ms(20_000, 30), 23);
        assert_eq!(simulated_wall_time_ms(999, 0), 0);
        assert_eq!(simulated_wall_time_ms(1000, 0), 1);
    }
}

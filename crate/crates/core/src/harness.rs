//! Measurement drivers: latency-cluster threshold calibration, framed
//! sessions with per-frame retransmission, parameter sweeps with CSV output,
//! and throughput summaries.
//!
//! A *session* transfers one payload, split into frames no longer than
//! [`SessionConfig::round_payload_bits`]; each frame is retried up to the
//! configured cap and a frame that exhausts its retries flags the whole
//! session's stats as invalid. A *sweep* measures a list of values for one
//! timing parameter, several repetitions per value, and renders the results
//! as CSV with one summary line per value. Error rates always cover payload
//! bits of accepted frames only; throughput always covers full frame airtime
//! including sync prefixes and failed attempts.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{
    bits_from_symbols, symbols_from_bits, throughput_kbps, Bitstream, ChannelStats,
    DecisionThresholds,
};
use crate::primitives::noise::NoiseModel;
use crate::primitives::{BackendDescriptor, BackendKind, MechanismClass, Micros};
use crate::protocol::{
    run_sim_round, ProtocolError, SessionConfig, TimingConfig, TransferLog,
    DEFAULT_ROUND_PAYLOAD_BITS,
};

/// Exact header of every sweep CSV file.
pub const CSV_HEADER: &str =
    "backend,mechanism,k,t_t1_us,t_t0_us,t_w0_us,t_i_us,bits,ber,tr_kbps,elapsed_us,accepted,seed";

/// Calibration patterns visit every symbol this many times.
pub const CALIBRATION_PASSES: usize = 32;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(
        "calibration needs at least {needed} training bits to visit each of \
         the {symbols} symbols twice, got {got}"
    )]
    TooLittleTraining {
        got: usize,
        needed: usize,
        symbols: usize,
    },
    #[error(
        "symbol latency clusters overlap: symbols {lower} and {upper} have means \
         {lower_mean:.1} and {upper_mean:.1} us but dispersions {lower_spread:.1} and \
         {upper_spread:.1} us; widen the duration gap (larger t_i, or t_t1 for lock channels)"
    )]
    ClustersOverlap {
        lower: usize,
        upper: usize,
        lower_mean: f64,
        upper_mean: f64,
        lower_spread: f64,
        upper_spread: f64,
    },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("throughput report needs at least one session")]
    EmptyReport,
    #[error("line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
    #[error("live backends are only available on unix hosts")]
    LiveUnsupported,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for one (stream, step) pair so repetitions,
/// frames and retransmission attempts all see fresh but reproducible draws.
fn mix_seed(base: u64, stream: u64, step: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ step)
}

/// Reproducible coin-flip payload for measurement runs.
pub fn deterministic_payload(bits: usize, seed: u64) -> Bitstream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Bitstream::new((0..bits).map(|_| rng.gen_bool(0.5)).collect())
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Latency clusters measured from a known training pattern, and the decision
/// thresholds derived from them.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    /// Mean measured latency per symbol, strictly increasing.
    pub means_us: Vec<f64>,
    /// Spread of each symbol's central latency mass: the standard deviation
    /// after discarding the slowest twentieth of the cluster, so that rare
    /// preemption spikes cannot mask an otherwise clean separation.
    pub dispersion_us: Vec<f64>,
    /// Midpoints of adjacent cluster means; each lies strictly between them.
    pub thresholds: DecisionThresholds,
    /// Latency samples the clusters were built from.
    pub samples: usize,
}

impl fmt::Display for CalibrationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} samples across {} symbols", self.samples, self.means_us.len())?;
        for (s, (mean, disp)) in self.means_us.iter().zip(&self.dispersion_us).enumerate() {
            writeln!(f, "  symbol {s}: mean {mean:.1} us, dispersion {disp:.1} us")?;
        }
        let cuts: Vec<String> = self
            .thresholds
            .cutpoints_us()
            .iter()
            .map(|c| format!("{c:.1}"))
            .collect();
        write!(f, "  thresholds: [{}]", cuts.join(", "))
    }
}

/// Measures decision thresholds by transferring a known pattern that cycles
/// through the whole alphabet and clustering the observed latencies by their
/// ground truth. Fails with a diagnostic when adjacent clusters overlap —
/// the timing gap is then too small to decode reliably.
pub fn calibrate(
    cfg: &SessionConfig,
    training_bits: usize,
) -> Result<CalibrationResult, HarnessError> {
    let k = cfg.timing.bits_per_symbol() as usize;
    let symbol_count = cfg.timing.alphabet.symbol_count();
    let training_symbols = training_bits / k;
    if training_symbols < 2 * symbol_count {
        return Err(HarnessError::TooLittleTraining {
            got: training_bits,
            needed: 2 * symbol_count * k,
            symbols: symbol_count,
        });
    }
    let pattern: Vec<usize> = (0..training_symbols).map(|i| i % symbol_count).collect();
    let mut session = cfg.clone();
    session.payload = bits_from_symbols(&pattern, k as u32, training_symbols * k);
    let log = if cfg.backend.kind.is_sim() {
        run_sim_round(&session)?
    } else {
        live_receive(&session)?
    };
    // Every frame bit has known ground truth, so the sync prefix trains too.
    let truth = symbols_from_bits(&log.sent, k as u32);
    cluster_latencies(symbol_count, &log, &truth)
}

fn cluster_latencies(
    symbol_count: usize,
    log: &TransferLog,
    truth: &[usize],
) -> Result<CalibrationResult, HarnessError> {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); symbol_count];
    for (sample, &symbol) in log.samples.iter().zip(truth) {
        groups[symbol].push(sample.latency_us as f64);
    }
    let mut means = Vec::with_capacity(symbol_count);
    let mut spreads = Vec::with_capacity(symbol_count);
    for group in &groups {
        let n = group.len() as f64;
        let mean = group.iter().sum::<f64>() / n;
        means.push(mean);
        // Latency distributions are heavy-tailed: a handful of preemption
        // spikes would swamp a raw standard deviation and veto thresholds
        // that decode fine. Judge separability on the central mass instead,
        // dropping the slowest twentieth of each cluster.
        let mut sorted = group.clone();
        sorted.sort_by(f64::total_cmp);
        let core = &sorted[..sorted.len() - sorted.len() / 20];
        let cn = core.len() as f64;
        let core_mean = core.iter().sum::<f64>() / cn;
        let var = if core.len() > 1 {
            core.iter().map(|x| (x - core_mean) * (x - core_mean)).sum::<f64>() / (cn - 1.0)
        } else {
            0.0
        };
        spreads.push(var.sqrt());
    }
    for s in 0..symbol_count - 1 {
        let gap = means[s + 1] - means[s];
        if gap <= 0.0 || gap < spreads[s] + spreads[s + 1] {
            return Err(HarnessError::ClustersOverlap {
                lower: s,
                upper: s + 1,
                lower_mean: means[s],
                upper_mean: means[s + 1],
                lower_spread: spreads[s],
                upper_spread: spreads[s + 1],
            });
        }
    }
    let cutpoints = means.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    Ok(CalibrationResult {
        means_us: means,
        dispersion_us: spreads,
        thresholds: DecisionThresholds::new(cutpoints),
        samples: log.samples.len(),
    })
}

#[cfg(unix)]
fn live_receive(cfg: &SessionConfig) -> Result<TransferLog, HarnessError> {
    Ok(crate::protocol::receive_frame(cfg)?)
}

#[cfg(not(unix))]
fn live_receive(_cfg: &SessionConfig) -> Result<TransferLog, HarnessError> {
    Err(HarnessError::LiveUnsupported)
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

/// Everything a measurement session produced.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    /// One log per frame: the accepted attempt, or the final attempt of a
    /// frame that exhausted its retries.
    pub logs: Vec<TransferLog>,
    /// Payload error rate over accepted frames; throughput over the whole
    /// session including retransmitted airtime. `valid` is cleared when any
    /// frame stayed unaccepted after its retries.
    pub stats: ChannelStats,
    /// Frames put on the air, retransmissions included.
    pub frames_sent: u32,
    pub frames_accepted: u32,
    pub retransmissions: u32,
    /// Concatenated decoded payload in payload order (failed frames
    /// contribute their final attempt's decode).
    pub received: Bitstream,
}

/// Transfers `cfg.payload`, framing it into rounds of at most
/// `cfg.round_payload_bits` bits. Simulated backends run both endpoints in
/// process and retransmit rejected frames up to `cfg.retries` times with
/// freshly derived noise seeds; live backends attach as the receiving role,
/// taking each frame in one pass (there is no reverse channel to request
/// another) so that a disturbance stays confined to the frame it hit.
pub fn run_session(cfg: &SessionConfig) -> Result<SessionOutcome, HarnessError> {
    cfg.validate()?;
    if cfg.backend.kind.is_sim() {
        run_sim_session(cfg)
    } else {
        run_live_session(cfg)
    }
}

fn run_sim_session(cfg: &SessionConfig) -> Result<SessionOutcome, HarnessError> {
    let base_seed = cfg.noise.seed;
    let sync_len = cfg.sync.len();
    let mut logs = Vec::new();
    let mut received: Vec<bool> = Vec::with_capacity(cfg.payload.len());
    let (mut compared, mut errors) = (0usize, 0usize);
    let (mut elapsed, mut delivered_frame_bits) = (0u64, 0usize);
    let (mut frames_sent, mut frames_accepted, mut retransmissions) = (0u32, 0u32, 0u32);
    let mut all_delivered = true;

    let chunks: Vec<Bitstream> = chunk_bits(&cfg.payload, cfg.round_payload_bits);
    for (index, chunk) in chunks.iter().enumerate() {
        let mut round = cfg.clone();
        round.payload = chunk.clone();
        let mut last: Option<TransferLog> = None;
        for attempt in 0..=cfg.retries {
            round.noise = cfg
                .noise
                .clone()
                .with_seed(mix_seed(base_seed, index as u64, attempt as u64));
            frames_sent += 1;
            if attempt > 0 {
                retransmissions += 1;
            }
            match run_sim_round(&round) {
                Ok(log) => {
                    elapsed += log.stats.elapsed_us;
                    let accepted = log.accepted;
                    last = Some(log);
                    if accepted {
                        break;
                    }
                }
                // An exhausted token pool (or similar deadlock) burns the
                // attempt; the next one reseeds and may get through.
                Err(ProtocolError::Stalled { .. }) => last = None,
                Err(other) => return Err(other.into()),
            }
        }
        match last {
            Some(log) => {
                let payload_part = log.received.slice(sync_len..log.received.len());
                received.extend_from_slice(payload_part.bits());
                if log.accepted {
                    frames_accepted += 1;
                    compared += log.stats.bits_compared;
                    errors += log.stats.bit_errors;
                    delivered_frame_bits += log.sent.len();
                } else {
                    all_delivered = false;
                }
                logs.push(log);
            }
            None => {
                // Every attempt stalled: nothing was decoded for this chunk.
                all_delivered = false;
                received.extend(std::iter::repeat(false).take(chunk.len()));
            }
        }
    }

    let elapsed = elapsed.max(1);
    let ber = if compared > 0 {
        errors as f64 / compared as f64
    } else {
        0.0
    };
    Ok(SessionOutcome {
        logs,
        stats: ChannelStats {
            bits_compared: compared,
            bit_errors: errors,
            ber,
            elapsed_us: elapsed,
            tr_kbps: throughput_kbps(delivered_frame_bits, elapsed),
            valid: all_delivered && compared > 0,
        },
        frames_sent,
        frames_accepted,
        retransmissions,
        received: Bitstream::new(received),
    })
}

fn run_live_session(cfg: &SessionConfig) -> Result<SessionOutcome, HarnessError> {
    let sync_len = cfg.sync.len();
    let mut logs = Vec::new();
    let mut received: Vec<bool> = Vec::with_capacity(cfg.payload.len());
    let (mut compared, mut errors) = (0usize, 0usize);
    let (mut elapsed, mut delivered_frame_bits) = (0u64, 0usize);
    let (mut frames_sent, mut frames_accepted) = (0u32, 0u32);
    let mut all_delivered = true;

    for (index, chunk) in chunk_bits(&cfg.payload, cfg.round_payload_bits)
        .into_iter()
        .enumerate()
    {
        let mut round = cfg.clone();
        // After the first frame the sender is at most one frame plus one
        // inter-frame gap ahead, so a lost anchor should surface as a dead
        // frame quickly instead of waiting out the full listen window.
        if index > 0 {
            let frame_bits = (chunk.len() + sync_len) as Micros;
            round.listen_timeout_us = 2
                * (frame_bits * cfg.timing.bit_period_us() + cfg.timing.end_of_round_delay_us);
        }
        round.payload = chunk.clone();
        frames_sent += 1;
        match live_receive(&round) {
            Ok(log) => {
                elapsed += log.stats.elapsed_us;
                let payload_part = log.received.slice(sync_len..log.received.len());
                received.extend_from_slice(payload_part.bits());
                if log.accepted {
                    frames_accepted += 1;
                    compared += log.stats.bits_compared;
                    errors += log.stats.bit_errors;
                    delivered_frame_bits += log.sent.len();
                } else {
                    all_delivered = false;
                }
                logs.push(log);
            }
            // A frame that never latched: record it as lost and keep
            // listening for the next one.
            Err(HarnessError::Protocol(ProtocolError::ListenTimeout { .. })) => {
                all_delivered = false;
                received.extend(std::iter::repeat(false).take(chunk.len()));
            }
            Err(other) => return Err(other),
        }
    }

    let elapsed = elapsed.max(1);
    let ber = if compared > 0 {
        errors as f64 / compared as f64
    } else {
        0.0
    };
    Ok(SessionOutcome {
        logs,
        stats: ChannelStats {
            bits_compared: compared,
            bit_errors: errors,
            ber,
            elapsed_us: elapsed,
            tr_kbps: throughput_kbps(delivered_frame_bits, elapsed),
            valid: all_delivered && compared > 0,
        },
        frames_sent,
        frames_accepted,
        retransmissions: 0,
        received: Bitstream::new(received),
    })
}

fn chunk_bits(payload: &Bitstream, max_bits: usize) -> Vec<Bitstream> {
    let bits = payload.bits();
    bits.chunks(max_bits.max(1))
        .map(|c| Bitstream::new(c.to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Which timing parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweptParameter {
    /// Lock hold duration for a `1` (contention).
    HoldDuration,
    /// Base wait of the symbol alphabet (cooperation).
    BaseWait,
    /// Wait increment per symbol value (cooperation).
    WaitStep,
}

impl SweptParameter {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweptParameter::HoldDuration => "t_t1",
            SweptParameter::BaseWait => "t_w0",
            SweptParameter::WaitStep => "t_i",
        }
    }

    pub fn parse(s: &str) -> Option<SweptParameter> {
        match s {
            "t_t1" => Some(SweptParameter::HoldDuration),
            "t_w0" => Some(SweptParameter::BaseWait),
            "t_i" => Some(SweptParameter::WaitStep),
            _ => None,
        }
    }

    fn mechanism(&self) -> MechanismClass {
        match self {
            SweptParameter::HoldDuration => MechanismClass::Contention,
            SweptParameter::BaseWait | SweptParameter::WaitStep => MechanismClass::Cooperation,
        }
    }
}

impl fmt::Display for SweptParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A measurement plan: one varied timing parameter, everything else fixed.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub backend: BackendDescriptor,
    pub swept: SweptParameter,
    /// Values of the swept parameter, strictly increasing.
    pub values: Vec<Micros>,
    /// Supplies the non-swept timing parameters.
    pub fixed: TimingConfig,
    /// Payload bits each repetition transfers (framed internally).
    pub bits_per_point: usize,
    /// Sessions measured per value.
    pub repetitions: u32,
    /// Disturbance model for simulated backends; `None` on live ones.
    pub noise: Option<NoiseModel>,
    /// Base seed; every repetition, frame and attempt derives its own.
    pub seed: u64,
    /// Retransmissions allowed per frame.
    pub retries: u32,
    /// Frame size sessions use.
    pub round_payload_bits: usize,
    /// Calibrate thresholds at each point before measuring (the wake-up-delay
    /// channels' procedure: their decision gap scales with the swept step).
    /// Lock channels keep the standing midpoint rule instead — the thin
    /// decode margin at small hold durations is a property under study, not
    /// a nuisance to calibrate away.
    pub calibrate_each_point: bool,
}

impl SweepSpec {
    pub fn new(
        backend: BackendDescriptor,
        fixed: TimingConfig,
        swept: SweptParameter,
        values: Vec<Micros>,
    ) -> SweepSpec {
        let calibrate_each_point = fixed.mechanism_class == MechanismClass::Cooperation;
        let noise = backend
            .kind
            .is_sim()
            .then(|| NoiseModel::standard(0));
        SweepSpec {
            backend,
            swept,
            values,
            fixed,
            bits_per_point: 1000,
            repetitions: 3,
            noise,
            seed: 0,
            retries: 3,
            round_payload_bits: DEFAULT_ROUND_PAYLOAD_BITS,
            calibrate_each_point,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.values.is_empty() {
            return Err(HarnessError::InvalidSweep("no values to sweep".into()));
        }
        if !self.values.windows(2).all(|w| w[0] < w[1]) {
            return Err(HarnessError::InvalidSweep(
                "swept values must be strictly increasing".into(),
            ));
        }
        if self.bits_per_point < 100 {
            return Err(HarnessError::InvalidSweep(format!(
                "bits_per_point {} is below the 100-bit floor for a meaningful error rate",
                self.bits_per_point
            )));
        }
        if self.repetitions == 0 {
            return Err(HarnessError::InvalidSweep(
                "a sweep needs at least one repetition per value".into(),
            ));
        }
        if self.swept.mechanism() != self.fixed.mechanism_class {
            return Err(HarnessError::InvalidSweep(format!(
                "{} is a {} parameter but the timing template works by {}",
                self.swept,
                self.swept.mechanism(),
                self.fixed.mechanism_class
            )));
        }
        if self.backend.mechanism_class != self.fixed.mechanism_class {
            return Err(HarnessError::InvalidSweep(format!(
                "backend works by {} but the timing template by {}",
                self.backend.mechanism_class, self.fixed.mechanism_class
            )));
        }
        match (&self.noise, self.backend.kind.is_sim()) {
            (None, true) => Err(HarnessError::InvalidSweep(
                "simulated sweeps need a noise model".into(),
            )),
            (Some(_), false) => Err(HarnessError::InvalidSweep(
                "live sweeps measure real disturbances; drop the noise model".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The full timing for one swept value (alphabet and default thresholds
    /// regenerated to match).
    fn point_timing(&self, value: Micros) -> Result<TimingConfig, ProtocolError> {
        let k = self.fixed.bits_per_symbol();
        match self.swept {
            SweptParameter::HoldDuration => TimingConfig::contention(value, self.fixed.t_t0_us),
            SweptParameter::BaseWait => TimingConfig::cooperation(k, value, self.fixed.t_i_us),
            SweptParameter::WaitStep => TimingConfig::cooperation(k, self.fixed.t_w0_us, value),
        }
    }
}

/// One measured session within a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub backend: BackendKind,
    pub mechanism: MechanismClass,
    pub k: u32,
    pub t_t1_us: Option<Micros>,
    pub t_t0_us: Option<Micros>,
    pub t_w0_us: Option<Micros>,
    pub t_i_us: Option<Micros>,
    /// Payload bits actually compared (delivered frames only).
    pub bits: u64,
    pub ber: f64,
    pub tr_kbps: f64,
    pub elapsed_us: u64,
    pub accepted: bool,
    /// Derived noise seed of this session; empty on live rows.
    pub seed: Option<u64>,
}

/// Aggregate over one swept value's repetitions: pooled error rate over all
/// compared bits, mean throughput over rows that delivered anything, total
/// airtime, and the fraction of repetitions accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub backend: BackendKind,
    pub mechanism: MechanismClass,
    pub k: u32,
    pub t_t1_us: Option<Micros>,
    pub t_t0_us: Option<Micros>,
    pub t_w0_us: Option<Micros>,
    pub t_i_us: Option<Micros>,
    pub bits: u64,
    pub ber: f64,
    pub tr_kbps: f64,
    pub elapsed_us: u64,
    pub accepted_fraction: f64,
}

/// Rows and summary for one swept value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

impl SweepPoint {
    /// Builds a point from its measured rows, computing the standard summary:
    /// pooled error rate over all compared bits, mean throughput over rows
    /// that delivered anything, total airtime, accepted fraction.
    ///
    /// Panics on an empty row list — a point without measurements has no
    /// summary to write.
    pub fn from_rows(rows: Vec<SweepRow>) -> SweepPoint {
        assert!(!rows.is_empty(), "a sweep point needs at least one row");
        let mut pooled_errors = 0u64;
        let mut pooled_bits = 0u64;
        let mut tr_sum = 0.0;
        let mut tr_rows = 0u64;
        let mut elapsed_total = 0u64;
        let mut accepted_rows = 0u64;
        for row in &rows {
            pooled_errors += (row.ber * row.bits as f64).round() as u64;
            pooled_bits += row.bits;
            if row.bits > 0 {
                tr_sum += row.tr_kbps;
                tr_rows += 1;
            }
            elapsed_total += row.elapsed_us;
            accepted_rows += row.accepted as u64;
        }
        let first = &rows[0];
        let summary = SweepSummary {
            backend: first.backend,
            mechanism: first.mechanism,
            k: first.k,
            t_t1_us: first.t_t1_us,
            t_t0_us: first.t_t0_us,
            t_w0_us: first.t_w0_us,
            t_i_us: first.t_i_us,
            bits: pooled_bits,
            ber: round6(if pooled_bits > 0 {
                pooled_errors as f64 / pooled_bits as f64
            } else {
                0.0
            }),
            tr_kbps: round6(if tr_rows > 0 { tr_sum / tr_rows as f64 } else { 0.0 }),
            elapsed_us: elapsed_total,
            accepted_fraction: round6(accepted_rows as f64 / rows.len() as f64),
        };
        SweepPoint { rows, summary }
    }
}

/// A complete sweep, in swept-value order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

/// Rounds to microdecimal precision so CSV emission is lossless: a value
/// `n / 10^6` prints as exactly `n` digits and parses back to the same f64.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Runs every (value, repetition) session of the plan sequentially — timing
/// experiments must not contend with each other. A value whose configuration
/// cannot run is recorded as rejected rows and the sweep continues.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult, HarnessError> {
    spec.validate()?;
    let mut points = Vec::with_capacity(spec.values.len());
    for (pi, &value) in spec.values.iter().enumerate() {
        points.push(sweep_point(spec, pi, value));
    }
    Ok(SweepResult { points })
}

fn sweep_point(spec: &SweepSpec, pi: usize, value: Micros) -> SweepPoint {
    let k = spec.fixed.bits_per_symbol();
    let (t_t1, t_t0, t_w0, t_i) = match spec.fixed.mechanism_class {
        MechanismClass::Contention => {
            let t1 = if spec.swept == SweptParameter::HoldDuration {
                value
            } else {
                spec.fixed.t_t1_us
            };
            (Some(t1), Some(spec.fixed.t_t0_us), None, None)
        }
        MechanismClass::Cooperation => {
            let w0 = if spec.swept == SweptParameter::BaseWait {
                value
            } else {
                spec.fixed.t_w0_us
            };
            let ti = if spec.swept == SweptParameter::WaitStep {
                value
            } else {
                spec.fixed.t_i_us
            };
            (None, None, Some(w0), Some(ti))
        }
    };
    let mut rows = Vec::with_capacity(spec.repetitions as usize);
    let timing = prepare_point(spec, pi, value);
    for rep in 0..spec.repetitions {
        let rep_seed = mix_seed(spec.seed, pi as u64, rep as u64);
        let row = match &timing {
            Ok(timing) => measure_repetition(spec, timing, rep_seed),
            Err(_) => Err(()),
        };
        rows.push(row.unwrap_or(SweepRow {
            backend: spec.backend.kind,
            mechanism: spec.fixed.mechanism_class,
            k,
            t_t1_us: t_t1,
            t_t0_us: t_t0,
            t_w0_us: t_w0,
            t_i_us: t_i,
            bits: 0,
            ber: 0.0,
            tr_kbps: 0.0,
            elapsed_us: 0,
            accepted: false,
            seed: spec.backend.kind.is_sim().then_some(rep_seed),
        }));
    }
    SweepPoint::from_rows(rows)
}

/// Builds the point's timing, calibrating its thresholds first when the plan
/// says so.
fn prepare_point(
    spec: &SweepSpec,
    pi: usize,
    value: Micros,
) -> Result<TimingConfig, HarnessError> {
    let timing = spec.point_timing(value)?;
    if !spec.calibrate_each_point {
        return Ok(timing);
    }
    let cal_seed = mix_seed(spec.seed, pi as u64, u64::MAX);
    let mut cal_cfg = SessionConfig::new(
        spec.backend.clone(),
        timing.clone(),
        Bitstream::new(vec![false]),
    );
    if let Some(model) = &spec.noise {
        cal_cfg.noise = model.clone().with_seed(cal_seed);
    }
    let k = timing.bits_per_symbol() as usize;
    let training_bits = CALIBRATION_PASSES * timing.alphabet.symbol_count() * k;
    let cal = calibrate(&cal_cfg, training_bits)?;
    Ok(timing.with_thresholds(cal.thresholds)?)
}

fn measure_repetition(
    spec: &SweepSpec,
    timing: &TimingConfig,
    rep_seed: u64,
) -> Result<SweepRow, ()> {
    let payload = deterministic_payload(spec.bits_per_point, splitmix64(rep_seed));
    let mut cfg = SessionConfig::new(spec.backend.clone(), timing.clone(), payload);
    cfg.retries = spec.retries;
    cfg.round_payload_bits = spec.round_payload_bits;
    if let Some(model) = &spec.noise {
        cfg.noise = model.clone().with_seed(rep_seed);
    }
    let outcome = run_session(&cfg).map_err(|_| ())?;
    let (t_t1, t_t0, t_w0, t_i) = match timing.mechanism_class {
        MechanismClass::Contention => {
            (Some(timing.t_t1_us), Some(timing.t_t0_us), None, None)
        }
        MechanismClass::Cooperation => {
            (None, None, Some(timing.t_w0_us), Some(timing.t_i_us))
        }
    };
    Ok(SweepRow {
        backend: spec.backend.kind,
        mechanism: timing.mechanism_class,
        k: timing.bits_per_symbol(),
        t_t1_us: t_t1,
        t_t0_us: t_t0,
        t_w0_us: t_w0,
        t_i_us: t_i,
        bits: outcome.stats.bits_compared as u64,
        ber: round6(outcome.stats.ber),
        tr_kbps: round6(outcome.stats.tr_kbps),
        elapsed_us: outcome.stats.elapsed_us,
        accepted: outcome.stats.valid,
        seed: spec.backend.kind.is_sim().then_some(rep_seed),
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn opt_field(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{},{},{}",
            self.backend,
            self.mechanism,
            self.k,
            opt_field(self.t_t1_us),
            opt_field(self.t_t0_us),
            opt_field(self.t_w0_us),
            opt_field(self.t_i_us),
            self.bits,
            self.ber,
            self.tr_kbps,
            self.elapsed_us,
            self.accepted,
            opt_field(self.seed),
        )
    }
}

impl SweepSummary {
    /// Summary lines reuse the schema with the accepted column carrying the
    /// accepted fraction instead of a flag, and no seed.
    fn to_csv_line(&self) -> String {
        format!(
            "#mean,{},{},{},{},{},{},{},{},{:.6},{:.6},{},{:.6},",
            self.backend,
            self.mechanism,
            self.k,
            opt_field(self.t_t1_us),
            opt_field(self.t_t0_us),
            opt_field(self.t_w0_us),
            opt_field(self.t_i_us),
            self.bits,
            self.ber,
            self.tr_kbps,
            self.elapsed_us,
            self.accepted_fraction,
        )
    }
}

impl SweepResult {
    /// Renders the sweep: header, then per value its rows followed by one
    /// `#mean,`-prefixed summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for point in &self.points {
            for row in &point.rows {
                out.push_str(&row.to_csv_line());
                out.push('\n');
            }
            out.push_str(&point.summary.to_csv_line());
            out.push('\n');
        }
        out
    }
}

/// Parses a sweep CSV back into the structure [`SweepResult::to_csv`] wrote.
pub fn parse_csv(text: &str) -> Result<SweepResult, HarnessError> {
    let malformed = |line: usize, reason: &str| HarnessError::MalformedCsv {
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        _ => return Err(malformed(1, "missing or wrong header")),
    }
    let mut points = Vec::new();
    let mut rows: Vec<SweepRow> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("#mean,") {
            let f = split_fields(rest, lineno)?;
            let summary = SweepSummary {
                backend: parse_backend(f[0], lineno)?,
                mechanism: parse_mechanism(f[1], lineno)?,
                k: parse_num(f[2], lineno, "k")?,
                t_t1_us: parse_opt(f[3], lineno, "t_t1_us")?,
                t_t0_us: parse_opt(f[4], lineno, "t_t0_us")?,
                t_w0_us: parse_opt(f[5], lineno, "t_w0_us")?,
                t_i_us: parse_opt(f[6], lineno, "t_i_us")?,
                bits: parse_num(f[7], lineno, "bits")?,
                ber: parse_float(f[8], lineno, "ber")?,
                tr_kbps: parse_float(f[9], lineno, "tr_kbps")?,
                elapsed_us: parse_num(f[10], lineno, "elapsed_us")?,
                accepted_fraction: parse_float(f[11], lineno, "accepted")?,
            };
            if !f[12].is_empty() {
                return Err(malformed(lineno, "summary lines carry no seed"));
            }
            if rows.is_empty() {
                return Err(malformed(lineno, "summary without measurement rows"));
            }
            points.push(SweepPoint {
                rows: std::mem::take(&mut rows),
                summary,
            });
        } else {
            let f = split_fields(line, lineno)?;
            rows.push(SweepRow {
                backend: parse_backend(f[0], lineno)?,
                mechanism: parse_mechanism(f[1], lineno)?,
                k: parse_num(f[2], lineno, "k")?,
                t_t1_us: parse_opt(f[3], lineno, "t_t1_us")?,
                t_t0_us: parse_opt(f[4], lineno, "t_t0_us")?,
                t_w0_us: parse_opt(f[5], lineno, "t_w0_us")?,
                t_i_us: parse_opt(f[6], lineno, "t_i_us")?,
                bits: parse_num(f[7], lineno, "bits")?,
                ber: parse_float(f[8], lineno, "ber")?,
                tr_kbps: parse_float(f[9], lineno, "tr_kbps")?,
                elapsed_us: parse_num(f[10], lineno, "elapsed_us")?,
                accepted: match f[11] {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(malformed(
                            lineno,
                            &format!("accepted must be true or false, got {other:?}"),
                        ))
                    }
                },
                seed: parse_opt(f[12], lineno, "seed")?,
            });
        }
    }
    if !rows.is_empty() {
        return Err(malformed(0, "sweep ends without a summary line"));
    }
    Ok(SweepResult { points })
}

fn split_fields(line: &str, lineno: usize) -> Result<Vec<&str>, HarnessError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 13 {
        return Err(HarnessError::MalformedCsv {
            line: lineno,
            reason: format!("expected 13 fields, got {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_backend(s: &str, line: usize) -> Result<BackendKind, HarnessError> {
    BackendKind::parse(s).ok_or_else(|| HarnessError::MalformedCsv {
        line,
        reason: format!("unknown backend {s:?}"),
    })
}

fn parse_mechanism(s: &str, line: usize) -> Result<MechanismClass, HarnessError> {
    MechanismClass::parse(s).ok_or_else(|| HarnessError::MalformedCsv {
        line,
        reason: format!("unknown mechanism {s:?}"),
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, field: &str) -> Result<T, HarnessError> {
    s.parse().map_err(|_| HarnessError::MalformedCsv {
        line,
        reason: format!("{field} is not a number: {s:?}"),
    })
}

fn parse_opt(s: &str, line: usize, field: &str) -> Result<Option<u64>, HarnessError> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_num(s, line, field).map(Some)
    }
}

fn parse_float(s: &str, line: usize, field: &str) -> Result<f64, HarnessError> {
    parse_num(s, line, field)
}

// ---------------------------------------------------------------------------
// Throughput reports
// ---------------------------------------------------------------------------

/// One session's contribution to a throughput report.
#[derive(Debug, Clone)]
pub struct ThroughputEntry {
    pub bits_per_symbol: u32,
    pub stats: ChannelStats,
}

impl ThroughputEntry {
    pub fn new(bits_per_symbol: u32, stats: ChannelStats) -> Self {
        ThroughputEntry {
            bits_per_symbol,
            stats,
        }
    }
}

/// Per-symbol-width aggregate within a [`ThroughputReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolWidthSummary {
    pub bits_per_symbol: u32,
    pub sessions: usize,
    pub mean_tr_kbps: f64,
    pub mean_ber: f64,
}

/// Mean and peak throughput with a comparison across symbol widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub sessions: usize,
    pub mean_tr_kbps: f64,
    pub peak_tr_kbps: f64,
    pub mean_ber: f64,
    pub per_width: Vec<SymbolWidthSummary>,
}

/// Summarizes session stats: overall mean/peak throughput and mean error
/// rate, plus the same means grouped by symbol width.
pub fn throughput_report(entries: &[ThroughputEntry]) -> Result<ThroughputReport, HarnessError> {
    if entries.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let n = entries.len() as f64;
    let mean_tr = entries.iter().map(|e| e.stats.tr_kbps).sum::<f64>() / n;
    let peak_tr = entries
        .iter()
        .map(|e| e.stats.tr_kbps)
        .fold(f64::MIN, f64::max);
    let mean_ber = entries.iter().map(|e| e.stats.ber).sum::<f64>() / n;

    let mut widths: Vec<u32> = entries.iter().map(|e| e.bits_per_symbol).collect();
    widths.sort_unstable();
    widths.dedup();
    let per_width = widths
        .into_iter()
        .map(|k| {
            let group: Vec<&ThroughputEntry> = entries
                .iter()
                .filter(|e| e.bits_per_symbol == k)
                .collect();
            let gn = group.len() as f64;
            SymbolWidthSummary {
                bits_per_symbol: k,
                sessions: group.len(),
                mean_tr_kbps: group.iter().map(|e| e.stats.tr_kbps).sum::<f64>() / gn,
                mean_ber: group.iter().map(|e| e.stats.ber).sum::<f64>() / gn,
            }
        })
        .collect();

    Ok(ThroughputReport {
        sessions: entries.len(),
        mean_tr_kbps: mean_tr,
        peak_tr_kbps: peak_tr,
        mean_ber,
        per_width,
    })
}

impl fmt::Display for ThroughputReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} sessions: mean {:.3} kb/s, peak {:.3} kb/s, mean ber {:.4}%",
            self.sessions,
            self.mean_tr_kbps,
            self.peak_tr_kbps,
            self.mean_ber * 100.0
        )?;
        for w in &self.per_width {
            writeln!(
                f,
                "  {}-bit symbols: {} sessions, mean {:.3} kb/s, mean ber {:.4}%",
                w.bits_per_symbol,
                w.sessions,
                w.mean_tr_kbps,
                w.mean_ber * 100.0
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::BackendDescriptor;

    fn sim_event_cfg(t_w0: Micros, t_i: Micros) -> SessionConfig {
        let timing = TimingConfig::cooperation(1, t_w0, t_i).unwrap();
        SessionConfig::new(
            BackendDescriptor::new(BackendKind::SimEvent, "cal"),
            timing,
            Bitstream::new(vec![false]),
        )
    }

    #[test]
    fn calibration_recovers_the_exact_alphabet_without_noise() {
        let cfg = sim_event_cfg(15, 65);
        let cal = calibrate(&cfg, 64).unwrap();
        assert_eq!(cal.means_us, vec![15.0, 80.0]);
        assert_eq!(cal.dispersion_us, vec![0.0, 0.0]);
        assert_eq!(cal.thresholds.cutpoints_us(), &[47.5]);
        // Sync prefix bits train too: 8 sync + 64 payload samples.
        assert_eq!(cal.samples, 72);
    }

    #[test]
    fn calibrated_cutpoint_stays_inside_the_jitter_support() {
        for seed in 0..5 {
            let mut cfg = sim_event_cfg(15, 65);
            cfg.noise = NoiseModel {
                jitter_half_width_us: 5,
                ..NoiseModel::zero()
            }
            .with_seed(seed);
            let cal = calibrate(&cfg, 200).unwrap();
            let cut = cal.thresholds.cutpoints_us()[0];
            assert!((42.5..=52.5).contains(&cut), "cutpoint {cut}");
            let gap = cal.means_us[1] - cal.means_us[0];
            assert!(gap > cal.dispersion_us[0] + cal.dispersion_us[1]);
        }
    }

    #[test]
    fn indistinguishable_durations_fail_calibration_with_advice() {
        let mut cfg = sim_event_cfg(15, 2);
        cfg.noise = NoiseModel {
            jitter_half_width_us: 5,
            ..NoiseModel::zero()
        }
        .with_seed(3);
        let err = calibrate(&cfg, 200).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("overlap"), "got: {text}");
        assert!(text.contains("larger t_i"), "got: {text}");
    }

    #[test]
    fn calibration_needs_two_visits_per_symbol() {
        let cfg = sim_event_cfg(15, 65);
        let err = calibrate(&cfg, 3).unwrap_err();
        assert!(matches!(err, HarnessError::TooLittleTraining { needed: 4, .. }));
    }

    #[test]
    fn contention_calibration_measures_hold_and_free_latencies() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let cfg = SessionConfig::new(
            BackendDescriptor::new(BackendKind::SimLock, "cal-lock"),
            timing,
            Bitstream::new(vec![false]),
        );
        let cal = calibrate(&cfg, 64).unwrap();
        assert_eq!(cal.means_us, vec![0.0, 160.0]);
        assert_eq!(cal.thresholds.cutpoints_us(), &[80.0]);
    }

    #[test]
    fn session_round_trips_a_multi_frame_payload() {
        let payload = deterministic_payload(1000, 99);
        let timing = TimingConfig::contention(160, 60).unwrap();
        let cfg = SessionConfig::new(
            BackendDescriptor::new(BackendKind::SimLock, "sess"),
            timing,
            payload.clone(),
        );
        let outcome = run_session(&cfg).unwrap();
        assert_eq!(outcome.frames_accepted, 8, "1000 bits over 125-bit frames");
        assert_eq!(outcome.retransmissions, 0);
        assert_eq!(outcome.stats.bit_errors, 0);
        assert_eq!(outcome.stats.bits_compared, 1000);
        assert!(outcome.stats.valid);
        assert_eq!(outcome.received, payload);
        assert!(outcome.stats.tr_kbps > 0.0);
    }

    #[test]
    fn undecodable_channel_exhausts_retries_and_flags_the_session() {
        // A 1 us step under +/-10 us jitter decodes everything high: the sync
        // prefix can essentially never survive, so every frame burns all its
        // attempts.
        let timing = TimingConfig::cooperation(1, 15, 1).unwrap();
        let mut cfg = SessionConfig::new(
            BackendDescriptor::new(BackendKind::SimEvent, "hopeless"),
            timing,
            deterministic_payload(100, 7),
        );
        cfg.noise = NoiseModel {
            jitter_half_width_us: 10,
            ..NoiseModel::zero()
        }
        .with_seed(11);
        cfg.retries = 2;
        let outcome = run_session(&cfg).unwrap();
        assert!(!outcome.stats.valid);
        assert_eq!(outcome.frames_accepted, 0);
        assert_eq!(outcome.frames_sent, 3, "initial attempt plus two retries");
        assert_eq!(outcome.retransmissions, 2);
        assert_eq!(outcome.stats.bits_compared, 0);
        assert_eq!(outcome.received.len(), 100);
    }

    fn lock_sweep_spec(values: Vec<Micros>) -> SweepSpec {
        let fixed = TimingConfig::contention(160, 60).unwrap();
        let mut spec = SweepSpec::new(
            BackendDescriptor::new(BackendKind::SimLock, "sweep"),
            fixed,
            SweptParameter::HoldDuration,
            values,
        );
        spec.noise = Some(NoiseModel::zero());
        spec.bits_per_point = 100;
        spec.repetitions = 2;
        spec
    }

    #[test]
    fn sweep_specs_reject_unusable_plans() {
        let mut spec = lock_sweep_spec(vec![]);
        assert!(spec.validate().is_err(), "no values");
        spec = lock_sweep_spec(vec![180, 100]);
        assert!(spec.validate().is_err(), "values must increase");
        spec = lock_sweep_spec(vec![100, 180]);
        spec.bits_per_point = 99;
        assert!(spec.validate().is_err(), "too few bits per point");
        spec = lock_sweep_spec(vec![100, 180]);
        spec.swept = SweptParameter::WaitStep;
        assert!(spec.validate().is_err(), "t_i is not a contention parameter");
        spec = lock_sweep_spec(vec![100, 180]);
        spec.noise = None;
        assert!(spec.validate().is_err(), "sim sweeps need a noise model");
    }

    #[test]
    fn noiseless_sweep_is_errorless_and_deterministic() {
        let spec = lock_sweep_spec(vec![100, 180]);
        let result = sweep(&spec).unwrap();
        assert_eq!(result.points.len(), 2);
        for point in &result.points {
            assert_eq!(point.rows.len(), 2);
            for row in &point.rows {
                assert!(row.accepted);
                assert_eq!(row.ber, 0.0);
                assert_eq!(row.bits, 100);
            }
            assert_eq!(point.summary.accepted_fraction, 1.0);
            assert_eq!(point.summary.bits, 200);
        }
        assert_eq!(result.points[0].rows[0].t_t1_us, Some(100));
        assert_eq!(result.points[1].rows[0].t_t1_us, Some(180));
        // Same plan, same bytes.
        let again = sweep(&spec).unwrap();
        assert_eq!(result.to_csv(), again.to_csv());
    }

    #[test]
    fn sweep_csv_round_trips_exactly() {
        let spec = lock_sweep_spec(vec![100, 180]);
        let result = sweep(&spec).unwrap();
        let csv = result.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.matches("#mean,").count(), 2);
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed, result);
        assert_eq!(parsed.to_csv(), csv);
    }

    #[test]
    fn sweep_records_a_broken_point_and_carries_on() {
        // 50 us cannot exceed the 60 us pause, so the first point cannot run.
        let spec = lock_sweep_spec(vec![50, 100]);
        let result = sweep(&spec).unwrap();
        assert_eq!(result.points.len(), 2);
        for row in &result.points[0].rows {
            assert!(!row.accepted);
            assert_eq!(row.bits, 0);
        }
        assert_eq!(result.points[0].summary.accepted_fraction, 0.0);
        for row in &result.points[1].rows {
            assert!(row.accepted);
        }
    }

    #[test]
    fn longer_wait_steps_trade_throughput_for_margin() {
        let fixed = TimingConfig::cooperation(1, 15, 50).unwrap();
        let mut spec = SweepSpec::new(
            BackendDescriptor::new(BackendKind::SimEvent, "steps"),
            fixed,
            SweptParameter::WaitStep,
            vec![30, 50, 70],
        );
        spec.noise = Some(NoiseModel::zero());
        spec.bits_per_point = 200;
        spec.repetitions = 1;
        let result = sweep(&spec).unwrap();
        let trs: Vec<f64> = result.points.iter().map(|p| p.summary.tr_kbps).collect();
        assert!(trs[0] > trs[1] && trs[1] > trs[2], "rates {trs:?}");
        for point in &result.points {
            assert_eq!(point.summary.ber, 0.0);
        }
    }

    #[test]
    fn csv_parser_rejects_malformed_input() {
        assert!(matches!(
            parse_csv("nonsense\n"),
            Err(HarnessError::MalformedCsv { line: 1, .. })
        ));
        let bad_fields = format!("{CSV_HEADER}\nsim-lock,contention,1\n");
        assert!(parse_csv(&bad_fields).is_err());
        let bad_bool = format!(
            "{CSV_HEADER}\nsim-lock,contention,1,100,60,,,100,0.000000,1.000000,1000,maybe,7\n"
        );
        assert!(parse_csv(&bad_bool).is_err());
        let no_summary = format!(
            "{CSV_HEADER}\nsim-lock,contention,1,100,60,,,100,0.000000,1.000000,1000,true,7\n"
        );
        assert!(parse_csv(&no_summary).is_err());
    }

    #[test]
    fn throughput_report_of_one_session_is_that_session() {
        let stats = ChannelStats {
            bits_compared: 1000,
            bit_errors: 5,
            ber: 0.005,
            elapsed_us: 62_000,
            tr_kbps: 16.25,
            valid: true,
        };
        let report = throughput_report(&[ThroughputEntry::new(1, stats.clone())]).unwrap();
        assert_eq!(report.sessions, 1);
        assert_eq!(report.mean_tr_kbps, stats.tr_kbps);
        assert_eq!(report.peak_tr_kbps, stats.tr_kbps);
        assert_eq!(report.mean_ber, stats.ber);
        assert_eq!(report.per_width.len(), 1);
        assert!(throughput_report(&[]).is_err());
    }

    #[test]
    fn throughput_report_groups_by_symbol_width() {
        let mk = |tr: f64, ber: f64| ChannelStats {
            bits_compared: 100,
            bit_errors: 0,
            ber,
            elapsed_us: 1000,
            tr_kbps: tr,
            valid: true,
        };
        let entries = vec![
            ThroughputEntry::new(1, mk(10.0, 0.01)),
            ThroughputEntry::new(1, mk(14.0, 0.03)),
            ThroughputEntry::new(2, mk(20.0, 0.02)),
        ];
        let report = throughput_report(&entries).unwrap();
        assert_eq!(report.sessions, 3);
        assert_eq!(report.peak_tr_kbps, 20.0);
        assert_eq!(report.per_width.len(), 2);
        assert_eq!(report.per_width[0].bits_per_symbol, 1);
        assert_eq!(report.per_width[0].mean_tr_kbps, 12.0);
        assert_eq!(report.per_width[0].mean_ber, 0.02);
        assert_eq!(report.per_width[1].sessions, 1);
        let text = report.to_string();
        assert!(text.contains("peak 20.000 kb/s"), "got: {text}");
    }
}

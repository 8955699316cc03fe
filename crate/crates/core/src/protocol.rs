//! Sender and receiver engines.
//!
//! This module turns a framed bitstream into a timed program of operations on
//! a shared synchronization object, and measured wake-up latencies back into
//! bits. Three modulation schemes are supported, selected by the backend's
//! mechanism class and kind:
//!
//! * **Lock contention** — the sender encodes a `1` by holding an exclusive
//!   lock for `t_t1` and a `0` by leaving it free; the receiver probes the
//!   lock once per bit and times how long the acquisition blocks.
//! * **Event cooperation** — the sender delays an explicit wake-up signal by
//!   one of `2^k` agreed durations; the receiver times its wait and maps the
//!   latency back to a `k`-bit symbol.
//! * **Counting semaphore** — the sender produces a token per `1` bit and
//!   stays silent per `0` bit; the receiver consumes one token per bit from a
//!   pre-provisioned pool, so every `0` costs one banked token.
//!
//! Simulated backends run both endpoints in one deterministic virtual-time
//! world; live backends run one role per process against a real kernel
//! object.

use std::fmt;

use thiserror::Error;

use crate::codec::{
    bits_from_symbols, build_alphabet, compute_stats, decode_latency, make_frame, parse_frame,
    symbols_from_bits, throughput_kbps, Bitstream, ChannelStats, CodecError, DecisionThresholds,
    Frame, SymbolAlphabet,
};
use crate::primitives::noise::NoiseModel;
use crate::primitives::sim::{
    Op, Program, SimOutcome, SimReport, SimWorld, StallReport, TraceWhat, RECEIVER, SENDER,
};
use crate::primitives::{
    BackendDescriptor, BackendKind, LatencySample, MechanismClass, Micros, PrimitiveError,
};

/// Multiplier applied to the end-of-round delay to get the sender's give-up
/// timeout while it waits for the receiver to fall silent.
pub const END_ROUND_TIMEOUT_FACTOR: Micros = 10;

/// Live receivers abort a wait after this many nominal symbol durations.
pub const WATCHDOG_FACTOR: Micros = 100;

/// How long a live receiver listens for the start of a transmission before
/// giving up on the round. The two roles are separate processes with no
/// shared launch barrier, so the receiver must tolerate coming up early.
pub const LIVE_LISTEN_TIMEOUT_US: Micros = 10_000_000;

/// Default cap on payload bits per frame (see
/// [`SessionConfig::round_payload_bits`]).
pub const DEFAULT_ROUND_PAYLOAD_BITS: usize = 125;

#[derive(Debug, Error)]
pub enum ProtocolError {
    /// A timing parameter combination that cannot carry the code.
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    /// A session description that is internally inconsistent.
    #[error("invalid session: {0}")]
    InvalidSession(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    /// The transfer deadlocked before both endpoints finished; for the
    /// semaphore scheme this is the signature of an exhausted token pool.
    #[error(
        "transfer stalled at {} us ({} sender / {} receiver consuming ops done)",
        .report.at_us, .report.consumed[0], .report.consumed[1]
    )]
    Stalled { report: StallReport },
    /// A live receiver found the channel quiet for the whole listen window.
    #[error("no transmission detected within {waited_us} us; is the sending role running?")]
    ListenTimeout { waited_us: Micros },
}

// ---------------------------------------------------------------------------
// Timing configuration
// ---------------------------------------------------------------------------

/// All timing parameters of one channel configuration.
///
/// Contention-class configs modulate `t_t1` (hold duration for a `1`) against
/// the inter-bit pause `t_t0`; cooperation-class configs modulate a wait from
/// the symbol alphabet `t_w0 + s * t_i`. The decision thresholds default to
/// the arithmetic midpoints of the expected latency bands and can be replaced
/// by calibrated ones.
#[derive(Debug, Clone)]
pub struct TimingConfig {
    pub mechanism_class: MechanismClass,
    /// Hold duration signalling a `1` (contention only).
    pub t_t1_us: Micros,
    /// Pause between bit slots (contention only).
    pub t_t0_us: Micros,
    /// Base wait of the symbol alphabet (cooperation only).
    pub t_w0_us: Micros,
    /// Wait increment per symbol value (cooperation only).
    pub t_i_us: Micros,
    pub alphabet: SymbolAlphabet,
    pub thresholds: DecisionThresholds,
    /// Quiet period that marks the end of a round.
    pub end_of_round_delay_us: Micros,
}

impl TimingConfig {
    /// Timing for the lock-contention and semaphore schemes. The receiver
    /// distinguishes a blocked probe (latency near `t_t1`) from an unblocked
    /// one, so the default threshold sits midway between `t_t0` and `t_t1`.
    pub fn contention(t_t1_us: Micros, t_t0_us: Micros) -> Result<TimingConfig, ProtocolError> {
        if t_t0_us == 0 || t_t1_us <= t_t0_us {
            return Err(ProtocolError::InvalidTiming(format!(
                "contention timing needs t_t1 > t_t0 > 0, got t_t1={t_t1_us} t_t0={t_t0_us}"
            )));
        }
        let alphabet = SymbolAlphabet::new(1, vec![t_t0_us, t_t1_us])?;
        let thresholds = crate::codec::thresholds_from_alphabet(&alphabet);
        Ok(TimingConfig {
            mechanism_class: MechanismClass::Contention,
            t_t1_us,
            t_t0_us,
            t_w0_us: 0,
            t_i_us: 0,
            alphabet,
            thresholds,
            end_of_round_delay_us: END_ROUND_TIMEOUT_FACTOR * t_t1_us,
        })
    }

    /// Timing for the cooperation scheme: `2^k` wait durations spaced `t_i`
    /// apart starting at `t_w0`.
    pub fn cooperation(
        bits_per_symbol: u32,
        t_w0_us: Micros,
        t_i_us: Micros,
    ) -> Result<TimingConfig, ProtocolError> {
        let alphabet = build_alphabet(bits_per_symbol, t_w0_us, t_i_us)?;
        let thresholds = crate::codec::thresholds_from_alphabet(&alphabet);
        let end_of_round_delay_us = END_ROUND_TIMEOUT_FACTOR * alphabet.max_duration_us();
        Ok(TimingConfig {
            mechanism_class: MechanismClass::Cooperation,
            t_t1_us: 0,
            t_t0_us: 0,
            t_w0_us,
            t_i_us,
            alphabet,
            thresholds,
            end_of_round_delay_us,
        })
    }

    /// Replaces the default thresholds with calibrated ones.
    pub fn with_thresholds(
        mut self,
        thresholds: DecisionThresholds,
    ) -> Result<TimingConfig, ProtocolError> {
        if thresholds.cutpoints_us().len() != self.alphabet.symbol_count() - 1 {
            return Err(ProtocolError::InvalidTiming(format!(
                "{} cutpoints cannot separate {} symbols",
                thresholds.cutpoints_us().len(),
                self.alphabet.symbol_count()
            )));
        }
        self.thresholds = thresholds;
        Ok(self)
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.alphabet.bits_per_symbol()
    }

    /// Nominal duration of one bit slot in the contention schemes.
    pub fn bit_period_us(&self) -> Micros {
        self.t_t1_us + self.t_t0_us
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.thresholds.cutpoints_us().len() != self.alphabet.symbol_count() - 1 {
            return Err(ProtocolError::InvalidTiming(format!(
                "{} cutpoints cannot separate {} symbols",
                self.thresholds.cutpoints_us().len(),
                self.alphabet.symbol_count()
            )));
        }
        match self.mechanism_class {
            MechanismClass::Contention => {
                if self.t_t0_us == 0 || self.t_t1_us <= self.t_t0_us {
                    return Err(ProtocolError::InvalidTiming(format!(
                        "contention timing needs t_t1 > t_t0 > 0, got t_t1={} t_t0={}",
                        self.t_t1_us, self.t_t0_us
                    )));
                }
                if self.alphabet.bits_per_symbol() != 1 {
                    return Err(ProtocolError::InvalidTiming(
                        "multi-bit symbols need a cooperation backend".into(),
                    ));
                }
            }
            MechanismClass::Cooperation => {
                let expected = build_alphabet(
                    self.alphabet.bits_per_symbol(),
                    self.t_w0_us,
                    self.t_i_us,
                )?;
                if expected.durations_us() != self.alphabet.durations_us() {
                    return Err(ProtocolError::InvalidTiming(format!(
                        "alphabet does not match t_w0={} t_i={}",
                        self.t_w0_us, self.t_i_us
                    )));
                }
            }
        }
        let floor = self.alphabet.max_duration_us().max(self.t_t1_us);
        if self.end_of_round_delay_us <= floor {
            return Err(ProtocolError::InvalidTiming(format!(
                "end-of-round delay {} must exceed the longest modulated duration {}",
                self.end_of_round_delay_us, floor
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Session configuration
// ---------------------------------------------------------------------------

/// Everything needed to run one transfer: where, with what timing, and what
/// to say.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub backend: BackendDescriptor,
    pub timing: TimingConfig,
    /// Agreed preamble; the receiver rejects frames whose prefix differs.
    pub sync: Bitstream,
    pub payload: Bitstream,
    /// Token pool for the semaphore scheme. `None` provisions exactly one
    /// token per `0` in the framed bitstream.
    pub initial_semaphore_count: Option<u64>,
    pub rounds: u32,
    /// Re-transmissions allowed per round before the round counts as failed.
    pub retries: u32,
    /// Longest payload carried by a single frame. Payloads beyond this are
    /// split into several framed rounds: a read that falls out of step can
    /// then corrupt at most the rest of one frame before the next sync
    /// prefix realigns the transfer.
    pub round_payload_bits: usize,
    /// Disturbance model applied to simulated runs.
    pub noise: NoiseModel,
    /// Keep the full event log of simulated runs (memory-heavy).
    pub record_trace: bool,
    /// How long a live receiving role listens for the start of this frame.
    /// Session drivers shorten it for frames after the first, where the
    /// sender is known to be at most one frame ahead.
    pub listen_timeout_us: Micros,
}

impl SessionConfig {
    pub fn new(
        backend: BackendDescriptor,
        timing: TimingConfig,
        payload: Bitstream,
    ) -> SessionConfig {
        SessionConfig {
            backend,
            timing,
            sync: Bitstream::from_bit_text(crate::codec::DEFAULT_SYNC)
                .expect("default sync pattern is well-formed"),
            payload,
            initial_semaphore_count: None,
            rounds: 1,
            retries: 3,
            round_payload_bits: DEFAULT_ROUND_PAYLOAD_BITS,
            noise: NoiseModel::zero(),
            record_trace: false,
            listen_timeout_us: LIVE_LISTEN_TIMEOUT_US,
        }
    }

    /// The frame this session transmits.
    pub fn frame(&self) -> Result<Frame, ProtocolError> {
        Ok(make_frame(&self.sync, &self.payload)?)
    }

    pub fn payload_bits(&self) -> usize {
        self.payload.len()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        self.backend.validate()?;
        self.timing.validate()?;
        if let Err(msg) = self.noise.validate() {
            return Err(ProtocolError::InvalidSession(msg));
        }
        if self.timing.mechanism_class != self.backend.mechanism_class {
            return Err(ProtocolError::InvalidSession(format!(
                "backend works by {} but the timing was built for {}",
                self.backend.mechanism_class, self.timing.mechanism_class
            )));
        }
        if self.rounds == 0 {
            return Err(ProtocolError::InvalidSession(
                "a session needs at least one round".into(),
            ));
        }
        if self.round_payload_bits == 0 {
            return Err(ProtocolError::InvalidSession(
                "frames cannot carry zero payload bits".into(),
            ));
        }
        let frame = self.frame()?;
        let is_semaphore = matches!(
            self.backend.kind,
            BackendKind::SimSemaphore | BackendKind::NamedSemaphore
        );
        if let Some(count) = self.initial_semaphore_count {
            if !is_semaphore {
                return Err(ProtocolError::InvalidSession(format!(
                    "initial semaphore count is meaningless on a {} backend",
                    self.backend.kind
                )));
            }
            let needed = required_semaphore_tokens(&frame.to_bitstream());
            if self.backend.mechanism_class == MechanismClass::Contention && count < needed {
                return Err(ProtocolError::InvalidSession(format!(
                    "{count} tokens cannot cover the {needed} zero bits of the frame"
                )));
            }
        }
        Ok(())
    }
}

/// Tokens the semaphore scheme consumes: one per `0` in the framed stream.
pub fn required_semaphore_tokens(frame_bits: &Bitstream) -> u64 {
    frame_bits.count_zeros() as u64
}

// ---------------------------------------------------------------------------
// Program builders (simulated backends)
// ---------------------------------------------------------------------------

fn push_busy(program: &mut Program, overhead_us: Micros) {
    if overhead_us > 0 {
        program.push(Op::Busy(overhead_us));
    }
}

/// Sender side of the lock-contention scheme: hold for a `1`, stay away for
/// a `0`, pause `t_t0` between bits.
pub fn contention_sender_program(
    bits: &Bitstream,
    timing: &TimingConfig,
    overhead_us: Micros,
) -> Program {
    let mut program = Program::new();
    for &bit in bits.bits() {
        if bit {
            program.push(Op::Acquire { record: false });
            program.push(Op::PreciseWait(timing.t_t1_us));
            program.push(Op::Release);
        }
        push_busy(&mut program, overhead_us);
        program.push(Op::Sleep(timing.t_t0_us));
    }
    program
}

/// Receiver side of the lock-contention scheme: probe, release immediately,
/// pause `t_t0`. A probe that lands inside the sender's hold stretches to the
/// end of the hold, which is what keeps both endpoints bit-aligned.
pub fn contention_receiver_program(
    nbits: usize,
    timing: &TimingConfig,
    overhead_us: Micros,
) -> Program {
    let mut program = Program::new();
    for _ in 0..nbits {
        program.push(Op::Acquire { record: true });
        program.push(Op::Release);
        push_busy(&mut program, overhead_us);
        program.push(Op::Sleep(timing.t_t0_us));
    }
    program
}

/// Sender side of the cooperation scheme: delay each signal by the symbol's
/// agreed duration.
pub fn cooperation_sender_program(
    symbols: &[usize],
    timing: &TimingConfig,
    overhead_us: Micros,
) -> Program {
    let durations = timing.alphabet.durations_us();
    let mut program = Program::new();
    for &sym in symbols {
        program.push(Op::PreciseWait(durations[sym]));
        program.push(Op::Signal);
        push_busy(&mut program, overhead_us);
    }
    program
}

/// Receiver side of the cooperation scheme: time every wait, re-arm at once.
pub fn cooperation_receiver_program(
    n_symbols: usize,
    _timing: &TimingConfig,
    overhead_us: Micros,
) -> Program {
    let mut program = Program::new();
    for _ in 0..n_symbols {
        program.push(Op::WaitSignal { record: true });
        push_busy(&mut program, overhead_us);
    }
    program
}

/// Sender side of the semaphore scheme: produce a token after `t_t1` for a
/// `1`, produce nothing for a `0`, and finish every bit slot on the common
/// `i * (t_t1 + t_t0)` grid so the receiver's token demand never outruns it.
pub fn semaphore_sender_program(
    bits: &Bitstream,
    timing: &TimingConfig,
    overhead_us: Micros,
) -> Program {
    let period = timing.bit_period_us();
    let mut program = Program::new();
    for (i, &bit) in bits.bits().iter().enumerate() {
        let slot_end = (i as Micros + 1) * period;
        if bit {
            program.push(Op::PreciseWait(timing.t_t1_us));
            program.push(Op::SemPost);
            push_busy(&mut program, overhead_us);
            program.push(Op::PreciseWaitUntil(slot_end));
        } else {
            push_busy(&mut program, overhead_us);
            program.push(Op::SleepUntil(slot_end));
        }
    }
    program
}

/// Receiver side of the semaphore scheme: consume one token per bit slot. A
/// `1` arrives as a fresh token after `t_t1`; a `0` drains the pre-provisioned
/// pool immediately. Bit slots are paced on the same grid as the sender's.
pub fn semaphore_receiver_program(
    nbits: usize,
    timing: &TimingConfig,
    overhead_us: Micros,
) -> Program {
    let period = timing.bit_period_us();
    let mut program = Program::new();
    for i in 0..nbits {
        let slot_end = (i as Micros + 1) * period;
        program.push(Op::SemPend { record: true });
        push_busy(&mut program, overhead_us);
        program.push(Op::PreciseWaitUntil(slot_end));
    }
    program
}

/// Appends the sender's end-of-round check: wait until the receiver has made
/// all its reads and then stayed off the primitive for the agreed delay.
pub fn append_end_of_round(
    sender: &mut Program,
    expected_receiver_reads: u64,
    timing: &TimingConfig,
) {
    sender.push(Op::AwaitPeerGap {
        expected_peer_consumes: expected_receiver_reads,
        gap_us: timing.end_of_round_delay_us,
        timeout_us: END_ROUND_TIMEOUT_FACTOR * timing.end_of_round_delay_us,
    });
}

/// Builds the matched sender/receiver program pair for one frame.
pub fn build_programs(
    bits: &Bitstream,
    cfg: &SessionConfig,
) -> Result<[Program; 2], ProtocolError> {
    let timing = &cfg.timing;
    let tx_cost = cfg.noise.sender_overhead_us;
    let rx_cost = cfg.noise.receiver_overhead_us;
    let (mut sender, receiver, reads) = match cfg.backend.kind {
        BackendKind::SimLock => {
            let reads = bits.len();
            (
                contention_sender_program(bits, timing, tx_cost),
                contention_receiver_program(reads, timing, rx_cost),
                reads,
            )
        }
        BackendKind::SimEvent => {
            let symbols = symbols_from_bits(bits, timing.bits_per_symbol());
            let reads = symbols.len();
            (
                cooperation_sender_program(&symbols, timing, tx_cost),
                cooperation_receiver_program(reads, timing, rx_cost),
                reads,
            )
        }
        BackendKind::SimSemaphore => {
            let reads = bits.len();
            (
                semaphore_sender_program(bits, timing, tx_cost),
                semaphore_receiver_program(reads, timing, rx_cost),
                reads,
            )
        }
        other => {
            return Err(ProtocolError::InvalidSession(format!(
                "{other} is a live backend; simulated programs cannot drive it"
            )))
        }
    };
    append_end_of_round(&mut sender, reads as u64, timing);
    Ok([sender, receiver])
}

// ---------------------------------------------------------------------------
// Simulated rounds
// ---------------------------------------------------------------------------

/// Everything observed during one transfer round.
#[derive(Debug, Clone)]
pub struct TransferLog {
    /// Framed bits as sent.
    pub sent: Bitstream,
    /// The receiver's latency samples with decoded symbols filled in.
    pub samples: Vec<LatencySample>,
    /// Framed bits as decoded.
    pub received: Bitstream,
    /// Whether the decoded frame parsed cleanly (length and sync prefix).
    pub accepted: bool,
    /// Payload error rate and full-frame throughput. `valid` is cleared when
    /// the frame was not accepted.
    pub stats: ChannelStats,
    /// Whether the sender saw the receiver go quiet at the end of the round.
    pub gap_acknowledged: Option<bool>,
    /// Tokens left in a semaphore backend after the round.
    pub final_semaphore_count: Option<u64>,
    /// Rendered event log, when tracing was requested.
    pub trace: Option<String>,
}

impl fmt::Display for TransferLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} bits, {} errors, ber {:.4}%, {:.2} kb/s, {}",
            self.stats.bits_compared,
            self.stats.bit_errors,
            self.stats.ber * 100.0,
            self.stats.tr_kbps,
            if self.accepted { "accepted" } else { "rejected" }
        )
    }
}

/// Decodes receiver samples into a bitstream of `total_bits` bits, filling
/// each sample's decoded symbol along the way.
pub fn decode_samples(
    samples: &mut [LatencySample],
    timing: &TimingConfig,
    total_bits: usize,
) -> Bitstream {
    let mut symbols = Vec::with_capacity(samples.len());
    for sample in samples.iter_mut() {
        let symbol = decode_latency(sample.latency_us as f64, &timing.thresholds);
        sample.decoded_symbol = Some(symbol);
        symbols.push(symbol);
    }
    bits_from_symbols(&symbols, timing.bits_per_symbol(), total_bits)
}

/// Runs one frame through a simulated backend and decodes the result.
///
/// Each call builds a fresh world, so rounds are independent and a run is a
/// pure function of the session config (including the noise seed).
pub fn run_sim_round(cfg: &SessionConfig) -> Result<TransferLog, ProtocolError> {
    cfg.validate()?;
    let frame = cfg.frame()?;
    let bits = frame.to_bitstream();
    let mut world = SimWorld::new();
    let handle = world.open(&cfg.backend)?;
    if cfg.backend.kind == BackendKind::SimSemaphore {
        let count = cfg
            .initial_semaphore_count
            .unwrap_or_else(|| required_semaphore_tokens(&bits));
        world.set_semaphore_count(handle, count)?;
    }
    let programs = build_programs(&bits, cfg)?;
    let report = world.run(handle, programs, &cfg.noise, cfg.record_trace)?;
    conclude_round(cfg, &frame, report)
}

fn conclude_round(
    cfg: &SessionConfig,
    frame: &Frame,
    report: SimReport,
) -> Result<TransferLog, ProtocolError> {
    let report = match report.outcome {
        SimOutcome::Stalled(ref stall) => {
            return Err(ProtocolError::Stalled {
                report: stall.clone(),
            })
        }
        SimOutcome::Completed => report,
    };
    let sent = frame.to_bitstream();
    let total_bits = sent.len();
    let mut samples = report.samples[RECEIVER].clone();
    let received = decode_samples(&mut samples, &cfg.timing, total_bits);
    let accepted = parse_frame(&received, frame.sync(), frame.payload().len()).is_ok();
    // Airtime ends when the last bit lands at the receiver.
    let elapsed_us = samples
        .last()
        .map(|s| s.end_us)
        .filter(|&e| e > 0)
        .unwrap_or(report.elapsed_us.max(1));
    let received_payload = received.slice(frame.sync().len()..received.len());
    let mut stats = compute_stats(frame.payload(), &received_payload, elapsed_us)?;
    stats.tr_kbps = throughput_kbps(total_bits, elapsed_us);
    stats.valid = accepted;
    Ok(TransferLog {
        sent,
        samples,
        received,
        accepted,
        stats,
        gap_acknowledged: report.gap_results[SENDER].first().map(|g| g.acknowledged),
        final_semaphore_count: report.final_sem_count,
        trace: if cfg.record_trace {
            Some(report.trace_text())
        } else {
            None
        },
    })
}

// ---------------------------------------------------------------------------
// Semaphore pattern studies
// ---------------------------------------------------------------------------

/// Outcome of driving a raw bit pattern through the semaphore scheme,
/// including the token-pool level after every bit slot. Used to study
/// provisioning: the pool must start with one token per `0` or the receiver
/// starves mid-frame.
#[derive(Debug, Clone)]
pub struct PatternRun {
    pub completed: bool,
    /// Present when the run deadlocked: where and with how many reads done.
    pub stall: Option<StallReport>,
    pub samples: Vec<LatencySample>,
    /// Remaining tokens after each bit slot, up to the stall if any.
    pub resources: Vec<u64>,
    pub final_count: Option<u64>,
    pub trace: String,
}

/// Runs `bits` through a simulated semaphore with an explicit starting token
/// count, without end-of-round handling. Deliberately allows under-provisioned
/// pools so starvation behaviour can be observed.
pub fn run_semaphore_pattern(
    bits: &Bitstream,
    timing: &TimingConfig,
    initial_tokens: u64,
    noise: &NoiseModel,
) -> Result<PatternRun, ProtocolError> {
    timing.validate()?;
    if timing.mechanism_class != MechanismClass::Contention {
        return Err(ProtocolError::InvalidTiming(
            "the semaphore scheme uses contention timing".into(),
        ));
    }
    let mut world = SimWorld::new();
    let desc = BackendDescriptor::new(BackendKind::SimSemaphore, "pattern");
    let handle = world.open(&desc)?;
    world.set_semaphore_count(handle, initial_tokens)?;
    let sender = semaphore_sender_program(bits, timing, noise.sender_overhead_us);
    let receiver = semaphore_receiver_program(bits.len(), timing, noise.receiver_overhead_us);
    let report = world.run(handle, [sender, receiver], noise, true)?;
    let resources = semaphore_resources(&report, bits.len(), timing.bit_period_us(), initial_tokens);
    let (completed, stall) = match report.outcome {
        SimOutcome::Completed => (true, None),
        SimOutcome::Stalled(ref s) => (false, Some(s.clone())),
    };
    Ok(PatternRun {
        completed,
        stall,
        samples: report.samples[RECEIVER].clone(),
        resources,
        final_count: report.final_sem_count,
        trace: report.trace_text(),
    })
}

/// Token-pool level after each bit slot: the count left by the last semaphore
/// operation strictly before the slot boundary `(i + 1) * period`.
fn semaphore_resources(
    report: &SimReport,
    nbits: usize,
    period_us: Micros,
    initial_tokens: u64,
) -> Vec<u64> {
    let mut ops: Vec<(Micros, u64)> = report
        .trace
        .iter()
        .filter_map(|ev| match ev.what {
            TraceWhat::Posted { count_after } => Some((ev.at_us, count_after)),
            TraceWhat::Pended { count_after, .. } => Some((ev.at_us, count_after)),
            _ => None,
        })
        .collect();
    ops.sort_by_key(|&(at, _)| at);
    let horizon = match &report.outcome {
        SimOutcome::Completed => nbits,
        // Slots from the stall onwards never finished.
        SimOutcome::Stalled(stall) => (stall.at_us / period_us) as usize,
    };
    let mut resources = Vec::with_capacity(horizon);
    let mut level = initial_tokens;
    let mut next = 0;
    for slot in 0..horizon {
        let boundary = (slot as Micros + 1) * period_us;
        while next < ops.len() && ops[next].0 < boundary {
            level = ops[next].1;
            next += 1;
        }
        resources.push(level);
    }
    resources
}

// ---------------------------------------------------------------------------
// Live backends
// ---------------------------------------------------------------------------

#[cfg(unix)]
pub use live::{receive_frame, send_frame, send_session, SendReport};

#[cfg(unix)]
mod live {
    use super::*;
    use crate::primitives::clock::{self, DEFAULT_SLEEP_GUARD_US};
    use crate::primitives::file_lock::FileLockBackend;
    use crate::primitives::named_sem::NamedSemaphore;
    use std::thread;
    use std::time::Duration;

    /// What the sending role reports after a live round.
    #[derive(Debug, Clone)]
    pub struct SendReport {
        pub bits_sent: usize,
        pub elapsed_us: Micros,
    }

    fn sleep_us(us: Micros) {
        if us > 0 {
            thread::sleep(Duration::from_micros(us));
        }
    }

    /// Plays the sending role of one frame on a live backend. Blocks until
    /// the frame is on the air plus one end-of-round delay of silence.
    pub fn send_frame(cfg: &SessionConfig) -> Result<SendReport, ProtocolError> {
        cfg.validate()?;
        let bits = cfg.frame()?.to_bitstream();
        let started = clock::now_us();
        match (cfg.backend.kind, cfg.backend.mechanism_class) {
            (BackendKind::FileLock, _) => send_lock_style(cfg, &bits)?,
            (BackendKind::NamedSemaphore, MechanismClass::Contention) => {
                send_sem_lock_style(cfg, &bits)?
            }
            (BackendKind::NamedSemaphore, MechanismClass::Cooperation) => {
                send_sem_event_style(cfg, &bits)?
            }
            (kind, _) => {
                return Err(ProtocolError::InvalidSession(format!(
                    "{kind} runs in-process; live roles need a kernel-backed object"
                )))
            }
        }
        sleep_us(cfg.timing.end_of_round_delay_us);
        Ok(SendReport {
            bits_sent: bits.len(),
            elapsed_us: clock::now_us().saturating_sub(started),
        })
    }

    /// Plays the sending role for a whole session, framing the payload into
    /// rounds of at most `cfg.round_payload_bits` bits exactly as the
    /// receiving side expects them. Each frame's trailing silence lets the
    /// receiver re-anchor on the next frame's opening bit.
    pub fn send_session(cfg: &SessionConfig) -> Result<SendReport, ProtocolError> {
        cfg.validate()?;
        let started = clock::now_us();
        let mut bits_sent = 0;
        for chunk in cfg.payload.bits().chunks(cfg.round_payload_bits.max(1)) {
            let mut round = cfg.clone();
            round.payload = Bitstream::new(chunk.to_vec());
            bits_sent += send_frame(&round)?.bits_sent;
        }
        Ok(SendReport {
            bits_sent,
            elapsed_us: clock::now_us().saturating_sub(started),
        })
    }

    /// Plays the receiving role of one frame on a live backend.
    pub fn receive_frame(cfg: &SessionConfig) -> Result<TransferLog, ProtocolError> {
        cfg.validate()?;
        let frame = cfg.frame()?;
        let total_bits = frame.total_bits();
        let mut samples = match (cfg.backend.kind, cfg.backend.mechanism_class) {
            (BackendKind::FileLock, _) => recv_lock_style(cfg, total_bits)?,
            (BackendKind::NamedSemaphore, MechanismClass::Contention) => {
                recv_sem_lock_style(cfg, total_bits)?
            }
            (BackendKind::NamedSemaphore, MechanismClass::Cooperation) => {
                recv_sem_event_style(cfg, total_bits)?
            }
            (kind, _) => {
                return Err(ProtocolError::InvalidSession(format!(
                    "{kind} runs in-process; live roles need a kernel-backed object"
                )))
            }
        };
        let received = decode_samples(&mut samples, &cfg.timing, total_bits);
        let accepted = parse_frame(&received, frame.sync(), frame.payload().len()).is_ok();
        let elapsed_us = match (samples.first(), samples.last()) {
            (Some(first), Some(last)) => last.end_us.saturating_sub(first.start_us).max(1),
            _ => 1,
        };
        let received_payload = received.slice(frame.sync().len()..received.len());
        let mut stats = compute_stats(frame.payload(), &received_payload, elapsed_us)?;
        stats.tr_kbps = throughput_kbps(total_bits, elapsed_us);
        stats.valid = accepted;
        Ok(TransferLog {
            sent: frame.to_bitstream(),
            samples,
            received,
            accepted,
            stats,
            gap_acknowledged: None,
            final_semaphore_count: None,
            trace: None,
        })
    }

    /// Inter-bit pauses use the precise wait: OS sleeps overshoot by more
    /// than half the pause on mainstream hosts, which is enough to walk the
    /// two roles out of each other's bit slots between re-anchoring holds.
    fn pace_us(us: Micros) {
        clock::precise_wait(us, DEFAULT_SLEEP_GUARD_US);
    }

    fn send_lock_style(cfg: &SessionConfig, bits: &Bitstream) -> Result<(), ProtocolError> {
        let lock = FileLockBackend::open(&cfg.backend.resource_name)?;
        for &bit in bits.bits() {
            if bit {
                lock.acquire_blocking()?;
                clock::precise_wait(cfg.timing.t_t1_us, DEFAULT_SLEEP_GUARD_US);
                lock.release()?;
            }
            pace_us(cfg.timing.t_t0_us);
        }
        Ok(())
    }

    /// Pause between probes while listening for the opening hold: kept small
    /// against the hold/pause decision gap so that the first probe to block
    /// catches most of the hold rather than its tail.
    fn listen_poll_us(t: &TimingConfig) -> Micros {
        (t.t_t1_us.saturating_sub(t.t_t0_us) / 4).clamp(5, 100)
    }

    /// Receives lock-contention bits. The channel idles until the sender's
    /// opening hold (every sync prefix starts with a `1`), so the receiver
    /// first probes quickly without pacing bit slots -- quiet probes return
    /// at once and are discarded -- and the first probe that actually blocks
    /// after enough observed silence becomes bit 0 of the frame. Requiring
    /// the silence first stops a late-joining receiver from latching onto a
    /// hold in the middle of a frame already on the air: mid-frame quiet
    /// spells are at most a zero-run long, well under the inter-frame gap.
    /// After a probe that blocked, the receiver backs off an extra half
    /// pause, so it re-probes safely behind the sender's next acquisition
    /// instead of racing it.
    fn recv_lock_style(
        cfg: &SessionConfig,
        total_bits: usize,
    ) -> Result<Vec<LatencySample>, ProtocolError> {
        let lock = FileLockBackend::open(&cfg.backend.resource_name)?;
        let t = &cfg.timing;
        let poll = listen_poll_us(t);
        let arm_gap = t.end_of_round_delay_us / 2;
        let listen_start = clock::now_us();
        let mut quiet_since = listen_start;
        let opening = loop {
            let sample = lock.acquire_blocking()?;
            lock.release()?;
            let armed = sample.start_us.saturating_sub(quiet_since) >= arm_gap;
            if decode_latency(sample.latency_us as f64, &t.thresholds) > 0 {
                if armed {
                    break sample;
                }
                quiet_since = clock::now_us();
            } else if sample.latency_us * 4 >= t.t_t0_us {
                // Partial contact with a hold: activity, but not an opener.
                quiet_since = clock::now_us();
            }
            let waited_us = clock::now_us().saturating_sub(listen_start);
            if waited_us > cfg.listen_timeout_us {
                return Err(ProtocolError::ListenTimeout { waited_us });
            }
            pace_us(poll);
        };
        // Each probe is scheduled off the previous sample's end, so the
        // probe's own syscall cost cannot accumulate into slot drift across
        // a long run of free (zero) probes.
        let mut next_at = opening.end_us + t.t_t0_us + t.t_t0_us / 2;
        let mut samples = Vec::with_capacity(total_bits);
        samples.push(opening);
        for _ in 1..total_bits {
            clock::precise_wait_until(next_at, DEFAULT_SLEEP_GUARD_US);
            let sample = lock.acquire_blocking()?;
            lock.release()?;
            let blocked = decode_latency(sample.latency_us as f64, &t.thresholds) > 0;
            next_at = sample.end_us + t.t_t0_us + if blocked { t.t_t0_us / 2 } else { 0 };
            samples.push(sample);
        }
        Ok(samples)
    }

    fn send_sem_lock_style(cfg: &SessionConfig, bits: &Bitstream) -> Result<(), ProtocolError> {
        // Initial count 1: the semaphore serves as a lock (down = acquire).
        let sem = NamedSemaphore::create(&cfg.backend.resource_name, 1)?;
        for &bit in bits.bits() {
            if bit {
                sem.wait()?;
                clock::precise_wait(cfg.timing.t_t1_us, DEFAULT_SLEEP_GUARD_US);
                sem.post()?;
            }
            pace_us(cfg.timing.t_t0_us);
        }
        Ok(())
    }

    /// Same structure as the lock receiver: listen for the opening down of
    /// the semaphore-as-lock behind enough silence, then pace the remaining
    /// bit slots.
    fn recv_sem_lock_style(
        cfg: &SessionConfig,
        total_bits: usize,
    ) -> Result<Vec<LatencySample>, ProtocolError> {
        let sem = NamedSemaphore::create(&cfg.backend.resource_name, 1)?;
        let t = &cfg.timing;
        let watchdog = WATCHDOG_FACTOR * t.bit_period_us();
        let poll = listen_poll_us(t);
        let arm_gap = t.end_of_round_delay_us / 2;
        let listen_start = clock::now_us();
        let mut quiet_since = listen_start;
        let opening = loop {
            let sample = sem
                .timed_wait(watchdog)?
                .ok_or(PrimitiveError::WatchdogExpired(watchdog))?;
            sem.post()?;
            let armed = sample.start_us.saturating_sub(quiet_since) >= arm_gap;
            if decode_latency(sample.latency_us as f64, &t.thresholds) > 0 {
                if armed {
                    break sample;
                }
                quiet_since = clock::now_us();
            } else if sample.latency_us * 4 >= t.t_t0_us {
                // Partial contact with a hold: activity, but not an opener.
                quiet_since = clock::now_us();
            }
            let waited_us = clock::now_us().saturating_sub(listen_start);
            if waited_us > cfg.listen_timeout_us {
                return Err(ProtocolError::ListenTimeout { waited_us });
            }
            pace_us(poll);
        };
        let mut next_at = opening.end_us + t.t_t0_us + t.t_t0_us / 2;
        let mut samples = Vec::with_capacity(total_bits);
        samples.push(opening);
        for _ in 1..total_bits {
            clock::precise_wait_until(next_at, DEFAULT_SLEEP_GUARD_US);
            let sample = sem
                .timed_wait(watchdog)?
                .ok_or(PrimitiveError::WatchdogExpired(watchdog))?;
            sem.post()?;
            let blocked = decode_latency(sample.latency_us as f64, &t.thresholds) > 0;
            next_at = sample.end_us + t.t_t0_us + if blocked { t.t_t0_us / 2 } else { 0 };
            samples.push(sample);
        }
        Ok(samples)
    }

    fn send_sem_event_style(cfg: &SessionConfig, bits: &Bitstream) -> Result<(), ProtocolError> {
        let sem = NamedSemaphore::create(&cfg.backend.resource_name, 0)?;
        let symbols = symbols_from_bits(bits, cfg.timing.bits_per_symbol());
        let durations = cfg.timing.alphabet.durations_us();
        // Start barrier: one token the receiver discards, then a fixed run-up
        // so the first modulated wait starts from a known point.
        sem.post()?;
        sleep_us(cfg.timing.end_of_round_delay_us);
        for &sym in &symbols {
            clock::precise_wait(durations[sym], DEFAULT_SLEEP_GUARD_US);
            sem.post()?;
        }
        Ok(())
    }

    fn recv_sem_event_style(
        cfg: &SessionConfig,
        total_bits: usize,
    ) -> Result<Vec<LatencySample>, ProtocolError> {
        let sem = NamedSemaphore::create(&cfg.backend.resource_name, 0)?;
        let t = &cfg.timing;
        let n_symbols = total_bits.div_ceil(t.bits_per_symbol() as usize);
        let watchdog = WATCHDOG_FACTOR * t.alphabet.max_duration_us();
        // Consume the start token; the run-up begins when it arrives. The
        // sending role may come up much later, so listen generously.
        sem.timed_wait(cfg.listen_timeout_us)?
            .ok_or(ProtocolError::ListenTimeout {
                waited_us: cfg.listen_timeout_us,
            })?;
        let mut samples = Vec::with_capacity(n_symbols);
        for _ in 0..n_symbols {
            let sample = sem
                .timed_wait(watchdog)?
                .ok_or(PrimitiveError::WatchdogExpired(watchdog))?;
            samples.push(sample);
        }
        Ok(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::noise::NoiseEngine;

    fn bs(text: &str) -> Bitstream {
        Bitstream::from_bit_text(text).unwrap()
    }

    fn sim_cfg(kind: BackendKind, timing: TimingConfig, payload: &str) -> SessionConfig {
        SessionConfig::new(BackendDescriptor::new(kind, "chan"), timing, bs(payload))
    }

    #[test]
    fn contention_round_trip_is_exact_without_noise() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let cfg = sim_cfg(BackendKind::SimLock, timing, "1011001110");
        let log = run_sim_round(&cfg).unwrap();
        assert!(log.accepted);
        assert_eq!(log.received, log.sent);
        assert_eq!(log.stats.bit_errors, 0);
        assert_eq!(log.stats.bits_compared, 10);
        assert!(log.stats.valid);
        assert_eq!(log.gap_acknowledged, Some(true));
        assert_eq!(log.samples.len(), 18);
    }

    #[test]
    fn contention_latencies_split_into_hold_and_free_bands() {
        // First two framed bits are "10": a blocked probe that stretches to
        // the hold plus the pause, then a free probe with zero latency.
        let timing = TimingConfig::contention(160, 60).unwrap();
        let cfg = sim_cfg(BackendKind::SimLock, timing, "11");
        let log = run_sim_round(&cfg).unwrap();
        assert_eq!(log.samples[0].latency_us, 160);
        assert_eq!(log.samples[1].latency_us, 0);
        assert_eq!(log.samples[0].decoded_symbol, Some(1));
        assert_eq!(log.samples[1].decoded_symbol, Some(0));
    }

    #[test]
    fn cooperation_latencies_follow_the_symbol_durations() {
        let timing = TimingConfig::cooperation(2, 15, 50).unwrap();
        let cfg = sim_cfg(BackendKind::SimEvent, timing, "11011000");
        let log = run_sim_round(&cfg).unwrap();
        assert!(log.accepted);
        assert_eq!(log.received, log.sent);
        // Frame = sync 10101010 + payload 11011000, in 2-bit symbols.
        let expected: Vec<Micros> = [2usize, 2, 2, 2, 3, 1, 2, 0]
            .iter()
            .map(|&s| 15 + s as Micros * 50)
            .collect();
        let got: Vec<Micros> = log.samples.iter().map(|s| s.latency_us).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn semaphore_banked_tokens_complete_the_round_but_mask_the_latencies() {
        // A fully provisioned pool satisfies every probe instantly, so the
        // transfer completes and conserves tokens exactly -- yet the decoded
        // frame carries no information: the scheme signals through token
        // consumption, not through observable wait times.
        let timing = TimingConfig::contention(160, 60).unwrap();
        let cfg = sim_cfg(BackendKind::SimSemaphore, timing, "1011001110");
        let log = run_sim_round(&cfg).unwrap();
        assert_eq!(log.final_semaphore_count, Some(0));
        assert_eq!(log.gap_acknowledged, Some(true));
        assert_eq!(log.samples.len(), 18);
        assert!(log.samples.iter().all(|s| s.latency_us == 0));
        assert!(!log.accepted);
        assert_eq!(log.received.count_ones(), 0);
    }

    #[test]
    fn banked_tokens_drain_in_lockstep_with_the_zero_bits() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let bits = bs("110110100011");
        let run = run_semaphore_pattern(&bits, &timing, 5, &NoiseModel::zero()).unwrap();
        assert!(run.completed);
        assert_eq!(run.resources, vec![5, 5, 4, 4, 4, 3, 3, 2, 1, 0, 0, 0]);
        assert_eq!(run.final_count, Some(0));
        assert_eq!(run.samples.len(), 12);
    }

    #[test]
    fn empty_pool_stalls_at_the_first_zero_bit() {
        // With no banked tokens the first two ones survive (each produces the
        // token it consumes) and the first zero starves the receiver.
        let timing = TimingConfig::contention(160, 60).unwrap();
        let bits = bs("110110100011");
        let run = run_semaphore_pattern(&bits, &timing, 0, &NoiseModel::zero()).unwrap();
        assert!(!run.completed);
        let stall = run.stall.unwrap();
        assert_eq!(stall.at_us, 2 * 220);
        assert_eq!(stall.consumed, [0, 2]);
        assert_eq!(run.resources, vec![0, 0]);
    }

    #[test]
    fn one_token_short_stalls_on_the_last_zero() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let bits = bs("10100");
        let needed = required_semaphore_tokens(&bits);
        assert_eq!(needed, 3);
        let run = run_semaphore_pattern(&bits, &timing, needed - 1, &NoiseModel::zero()).unwrap();
        assert!(!run.completed);
        assert_eq!(run.stall.unwrap().consumed[1], 4);
    }

    #[test]
    fn all_ones_need_no_banked_tokens() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let run =
            run_semaphore_pattern(&bs("11111"), &timing, 0, &NoiseModel::zero()).unwrap();
        assert!(run.completed);
        assert_eq!(run.final_count, Some(0));
        assert_eq!(run.resources, vec![0; 5]);
    }

    #[test]
    fn pattern_zeros_map_one_to_one_onto_consumed_tokens() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let bits = bs("0101100100");
        let spare = 2;
        let run = run_semaphore_pattern(
            &bits,
            &timing,
            required_semaphore_tokens(&bits) + spare,
            &NoiseModel::zero(),
        )
        .unwrap();
        assert!(run.completed);
        assert_eq!(run.final_count, Some(spare));
    }

    #[test]
    fn semaphore_endpoints_share_one_bit_grid() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let bits = bs("1010");
        let run = run_semaphore_pattern(&bits, &timing, 5, &NoiseModel::zero()).unwrap();
        // Every slot ends on the common grid, so each sample's probe starts
        // exactly at its slot boundary.
        for (i, sample) in run.samples.iter().enumerate() {
            assert_eq!(sample.start_us, i as Micros * 220);
        }
    }

    #[test]
    fn a_disturbance_on_one_bit_leaves_other_bits_untouched() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let bits = bs("110111");
        let run_with = |forced: Vec<(usize, u64)>| {
            let mut world = SimWorld::new();
            let desc = BackendDescriptor::new(BackendKind::SimLock, "chan");
            let handle = world.open(&desc).unwrap();
            let sender = contention_sender_program(&bits, &timing, 0);
            let receiver = contention_receiver_program(bits.len(), &timing, 0);
            let disturbance = NoiseModel {
                block_extra_us: 200,
                ..NoiseModel::zero()
            };
            let engine = NoiseEngine::new(disturbance).with_forced_wait_spikes(forced);
            world
                .run_with_engine(handle, [sender, receiver], engine, false)
                .unwrap()
        };
        let clean = run_with(vec![]);
        let bumped = run_with(vec![(SENDER, 2)]);
        let clean_lat: Vec<Micros> = clean.samples[RECEIVER].iter().map(|s| s.latency_us).collect();
        let bumped_lat: Vec<Micros> =
            bumped.samples[RECEIVER].iter().map(|s| s.latency_us).collect();
        let differing = clean_lat
            .iter()
            .zip(&bumped_lat)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(differing, 1, "{clean_lat:?} vs {bumped_lat:?}");
        // The stretched hold still reads as a one.
        let idx = clean_lat.iter().zip(&bumped_lat).position(|(a, b)| a != b);
        assert_eq!(bumped_lat[idx.unwrap()], clean_lat[idx.unwrap()] + 200);
    }

    #[test]
    fn undecodable_frame_is_reported_not_accepted() {
        let timing = TimingConfig::contention(160, 60)
            .unwrap()
            .with_thresholds(DecisionThresholds::new(vec![1_000_000.0]))
            .unwrap();
        let cfg = sim_cfg(BackendKind::SimLock, timing, "1111");
        let log = run_sim_round(&cfg).unwrap();
        assert!(!log.accepted);
        assert!(!log.stats.valid);
        assert_eq!(log.received.count_ones(), 0);
        assert_eq!(log.received.len(), log.sent.len());
    }

    #[test]
    fn contention_timing_rejects_an_inverted_pair() {
        assert!(matches!(
            TimingConfig::contention(60, 160),
            Err(ProtocolError::InvalidTiming(_))
        ));
        assert!(matches!(
            TimingConfig::contention(160, 0),
            Err(ProtocolError::InvalidTiming(_))
        ));
    }

    #[test]
    fn timing_validation_spots_a_doctored_alphabet() {
        let mut timing = TimingConfig::cooperation(2, 15, 50).unwrap();
        timing.t_i_us = 60;
        assert!(matches!(
            timing.validate(),
            Err(ProtocolError::InvalidTiming(_))
        ));
    }

    #[test]
    fn end_of_round_delay_must_dominate_the_longest_hold() {
        let mut timing = TimingConfig::contention(160, 60).unwrap();
        timing.end_of_round_delay_us = 100;
        assert!(matches!(
            timing.validate(),
            Err(ProtocolError::InvalidTiming(_))
        ));
    }

    #[test]
    fn session_rejects_a_backend_timing_class_mismatch() {
        let timing = TimingConfig::cooperation(1, 15, 65).unwrap();
        let cfg = sim_cfg(BackendKind::SimLock, timing, "1010");
        assert!(matches!(
            cfg.validate(),
            Err(ProtocolError::InvalidSession(_))
        ));
    }

    #[test]
    fn session_rejects_tokens_on_a_lock_backend() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let mut cfg = sim_cfg(BackendKind::SimLock, timing, "1010");
        cfg.initial_semaphore_count = Some(4);
        assert!(matches!(
            cfg.validate(),
            Err(ProtocolError::InvalidSession(_))
        ));
    }

    #[test]
    fn session_rejects_an_underfilled_token_pool() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let mut cfg = sim_cfg(BackendKind::SimSemaphore, timing, "0000");
        cfg.initial_semaphore_count = Some(2);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("zero bits"), "{err}");
    }

    #[test]
    fn mismatched_threshold_count_is_rejected() {
        let timing = TimingConfig::cooperation(2, 15, 50).unwrap();
        assert!(timing
            .with_thresholds(DecisionThresholds::new(vec![40.0]))
            .is_err());
    }

    #[test]
    fn stalled_transfer_surfaces_as_an_error() {
        let timing = TimingConfig::contention(160, 60).unwrap();
        let mut cfg = sim_cfg(BackendKind::SimSemaphore, timing, "0110");
        // Bypass validation to model an operator forcing a bad pool size.
        cfg.initial_semaphore_count = Some(1);
        let frame_bits = cfg.frame().unwrap().to_bitstream();
        assert!(required_semaphore_tokens(&frame_bits) > 1);
        let err = run_sim_round_unchecked(&cfg).unwrap_err();
        assert!(matches!(err, ProtocolError::Stalled { .. }));
    }

    /// Test-only twin of [`run_sim_round`] without config validation.
    fn run_sim_round_unchecked(cfg: &SessionConfig) -> Result<TransferLog, ProtocolError> {
        let frame = cfg.frame()?;
        let bits = frame.to_bitstream();
        let mut world = SimWorld::new();
        let handle = world.open(&cfg.backend)?;
        if cfg.backend.kind == BackendKind::SimSemaphore {
            let count = cfg
                .initial_semaphore_count
                .unwrap_or_else(|| required_semaphore_tokens(&bits));
            world.set_semaphore_count(handle, count)?;
        }
        let programs = build_programs(&bits, cfg)?;
        let report = world.run(handle, programs, &cfg.noise, cfg.record_trace)?;
        conclude_round(cfg, &frame, report)
    }

    /// Jitter and wake-up floor only; preemption spikes are statistical and
    /// belong in the measured error-rate runs, not in an exactness test.
    fn spike_free(seed: u64) -> NoiseModel {
        NoiseModel {
            block_probability: 0.0,
            ..NoiseModel::standard(seed)
        }
    }

    #[test]
    fn noisy_contention_round_still_decodes_cleanly_at_wide_margins() {
        let timing = TimingConfig::contention(200, 70).unwrap();
        let mut cfg = sim_cfg(BackendKind::SimLock, timing, "1011001110010110");
        cfg.noise = spike_free(7);
        let log = run_sim_round(&cfg).unwrap();
        assert!(log.accepted, "frame rejected: {log}");
        assert_eq!(log.stats.bit_errors, 0, "{log}");
    }

    #[test]
    fn noisy_cooperation_round_still_decodes_cleanly_at_wide_margins() {
        let timing = TimingConfig::cooperation(1, 40, 160).unwrap();
        let mut cfg = sim_cfg(BackendKind::SimEvent, timing, "1011001110010110");
        cfg.noise = spike_free(11);
        let log = run_sim_round(&cfg).unwrap();
        assert!(log.accepted, "frame rejected: {log}");
        assert_eq!(log.stats.bit_errors, 0, "{log}");
    }

    #[test]
    fn identical_configs_yield_identical_logs() {
        let timing = TimingConfig::cooperation(2, 15, 50).unwrap();
        let mut cfg = sim_cfg(BackendKind::SimEvent, timing, "1100101001110001");
        cfg.noise = NoiseModel::standard(42);
        let a = run_sim_round(&cfg).unwrap();
        let b = run_sim_round(&cfg).unwrap();
        let lat_a: Vec<Micros> = a.samples.iter().map(|s| s.latency_us).collect();
        let lat_b: Vec<Micros> = b.samples.iter().map(|s| s.latency_us).collect();
        assert_eq!(lat_a, lat_b);
        assert_eq!(a.received, b.received);
    }
}

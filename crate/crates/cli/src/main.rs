//! `mesch` — drive timing channels built on OS mutual-exclusion and
//! synchronization primitives.
//!
//! Subcommands: `send` and `recv` play one role each against a kernel-backed
//! object (advisory file lock or named semaphore); `bench` measures a full
//! transfer (in-process for simulated backends, two child processes for real
//! ones); `sweep` measures a range of one timing parameter and emits CSV;
//! `calibrate` reports symbol latency clusters and decision thresholds;
//! `selftest` runs the built-in simulated checks.
//!
//! Exit codes: 0 on success, 1 when the channel fails (frames left
//! unaccepted, clusters that cannot be separated), 2 for configuration
//! problems.

mod config;

use std::fmt::Write as _;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, PayloadSource, RawSettings, Settings, CONFIG_ENV};
use mes_channel::codec::{Bitstream, ChannelStats};
use mes_channel::harness::{
    calibrate, deterministic_payload, run_session, sweep, throughput_report, SweepPoint, SweepRow,
    SweepSpec, SweepResult, SweptParameter, ThroughputEntry,
};
use mes_channel::primitives::noise::NoiseModel;
use mes_channel::primitives::{BackendDescriptor, MechanismClass};
use mes_channel::protocol::{run_semaphore_pattern, SessionConfig, TimingConfig};

#[derive(Parser)]
#[command(
    name = "mesch",
    version,
    about = "Timing channels over OS mutual-exclusion and synchronization primitives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transmit a payload (sending role, kernel-backed backends only)
    Send(CommonArgs),
    /// Listen for one payload and print the decoded bits
    Recv(CommonArgs),
    /// Run a full transfer and print channel stats
    Bench(CommonArgs),
    /// Measure a list of values for one timing parameter and emit CSV
    Sweep(CommonArgs),
    /// Measure symbol latency clusters and print decision thresholds
    Calibrate(CommonArgs),
    /// Run the built-in simulated checks
    Selftest(CommonArgs),
}

/// Raw flags shared by every subcommand. Values stay strings here so flag
/// and config-file input go through identical validation.
#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Backend: file-lock, named-semaphore, sim-lock, sim-event, sim-semaphore
    #[arg(long)]
    backend: Option<String>,
    /// Shared object name: a path for file locks, a `/name` for semaphores
    #[arg(long)]
    resource: Option<String>,
    /// Signalling class, contention or cooperation (default: the backend's natural class)
    #[arg(long)]
    mechanism: Option<String>,
    /// Bits per symbol (cooperation channels)
    #[arg(long)]
    k: Option<String>,
    /// Hold duration for a 1 bit, µs; a comma list selects the sweep axis
    #[arg(long = "t-t1", value_name = "US")]
    t_t1: Option<String>,
    /// Pause between bits, µs
    #[arg(long = "t-t0", value_name = "US")]
    t_t0: Option<String>,
    /// Base wait of the symbol alphabet, µs; a comma list selects the sweep axis
    #[arg(long = "t-w0", value_name = "US")]
    t_w0: Option<String>,
    /// Wait increment per symbol value, µs; a comma list selects the sweep axis
    #[arg(long = "t-i", value_name = "US")]
    t_i: Option<String>,
    /// Frame sync prefix as a bit string
    #[arg(long)]
    sync: Option<String>,
    /// Payload length in bits, generated from --seed (sweep: bits per point,
    /// calibrate: training bits)
    #[arg(long)]
    bits: Option<String>,
    /// Inline payload as a bit string
    #[arg(long)]
    payload: Option<String>,
    /// Payload file: bit text or raw bytes
    #[arg(long = "payload-file", value_name = "PATH")]
    payload_file: Option<String>,
    /// Write CSV here instead of stdout
    #[arg(long, value_name = "PATH")]
    out: Option<String>,
    /// Seed for generated payloads and the simulated disturbance model
    #[arg(long)]
    seed: Option<String>,
    /// Sessions for bench, repetitions per value for sweep, frame repeats for send
    #[arg(long)]
    rounds: Option<String>,
    /// Retransmission attempts per frame
    #[arg(long)]
    retries: Option<String>,
    /// Read defaults from a key = value file (or set MES_CHANNEL_CONFIG)
    #[arg(long, value_name = "PATH")]
    config: Option<String>,
}

/// A failed run, carrying its exit code: configuration problems exit 2,
/// channel failures exit 1.
enum Failure {
    Config(String),
    Channel(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

fn channel(e: impl std::fmt::Display) -> Failure {
    Failure::Channel(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, fn(&Settings) -> Result<(), Failure>) = match &cli.command {
        Command::Send(a) => (a, cmd_send),
        Command::Recv(a) => (a, cmd_recv),
        Command::Bench(a) => (a, cmd_bench),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Calibrate(a) => (a, cmd_calibrate),
        Command::Selftest(a) => (a, cmd_selftest),
    };
    let outcome = collect_settings(args).map_err(Failure::from).and_then(|s| run(&s));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Channel(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Merges flags over config-file entries and validates the result.
fn collect_settings(args: &CommonArgs) -> Result<Settings, ConfigError> {
    let mut raw = RawSettings::default();
    let mut put = |key: &'static str, value: &Option<String>| {
        if let Some(v) = value {
            raw.flags.insert(key, v.clone());
        }
    };
    put("backend", &args.backend);
    put("resource", &args.resource);
    put("mechanism", &args.mechanism);
    put("k", &args.k);
    put("t_t1", &args.t_t1);
    put("t_t0", &args.t_t0);
    put("t_w0", &args.t_w0);
    put("t_i", &args.t_i);
    put("sync", &args.sync);
    put("bits", &args.bits);
    put("payload", &args.payload);
    put("payload_file", &args.payload_file);
    put("out", &args.out);
    put("seed", &args.seed);
    put("rounds", &args.rounds);
    put("retries", &args.retries);
    if let Some(path) = &args.config {
        raw.file = config::load_config_file(path)?;
    } else if let Ok(path) = std::env::var(CONFIG_ENV) {
        if !path.is_empty() {
            raw.file = config::load_config_file(&path)?;
        }
    }
    Settings::resolve(&raw)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-round seed from the user-facing base seed.
fn round_seed(base: u64, round: u32) -> u64 {
    splitmix64(splitmix64(base) ^ round as u64)
}

/// Timing for this run from the resolved single values.
fn build_timing(s: &Settings, class: MechanismClass) -> Result<TimingConfig, Failure> {
    let timing = match class {
        MechanismClass::Contention => {
            TimingConfig::contention(s.single("t_t1")?, s.single("t_t0")?)
        }
        MechanismClass::Cooperation => {
            TimingConfig::cooperation(s.k, s.single("t_w0")?, s.single("t_i")?)
        }
    };
    timing.map_err(|e| Failure::Config(e.to_string()))
}

fn build_session(
    desc: BackendDescriptor,
    s: &Settings,
    payload: Bitstream,
) -> Result<SessionConfig, Failure> {
    let timing = build_timing(s, desc.mechanism_class)?;
    let mut cfg = SessionConfig::new(desc, timing, payload);
    cfg.sync = s.sync.clone();
    cfg.retries = s.retries;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

/// Materializes the payload bits from the configured source.
fn realize_payload(src: &PayloadSource, seed: u64) -> Result<Bitstream, Failure> {
    match src {
        PayloadSource::Inline(bits) => Ok(bits.clone()),
        PayloadSource::File(path) => {
            let data = std::fs::read(path).map_err(|e| {
                Failure::Config(format!("cannot read payload file {}: {e}", path.display()))
            })?;
            Bitstream::from_payload_bytes(&data)
                .map_err(|e| Failure::Config(format!("payload file {}: {e}", path.display())))
        }
        PayloadSource::Random(bits) => Ok(deterministic_payload(*bits, seed)),
    }
}

fn stats_line(stats: &ChannelStats, ber_known: bool) -> String {
    let ber = if ber_known {
        format!("{:.6}", stats.ber)
    } else {
        "n/a".to_string()
    };
    format!(
        "stats: ber={ber} tr_kbps={:.3} elapsed_us={} bits={} accepted={}",
        stats.tr_kbps, stats.elapsed_us, stats.bits_compared, stats.valid
    )
}

fn require_live(desc: &BackendDescriptor, verb: &str) -> Result<(), Failure> {
    if desc.kind.is_sim() {
        return Err(Failure::Config(format!(
            "{} runs both endpoints in one process; use bench instead of {verb}",
            desc.kind
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// send / recv (live roles)
// ---------------------------------------------------------------------------

#[cfg(unix)]
fn cmd_send(s: &Settings) -> Result<(), Failure> {
    let desc = s.descriptor()?;
    require_live(&desc, "send")?;
    let payload = realize_payload(&s.payload_source()?, s.seed)?;
    let cfg = build_session(desc, s, payload)?;
    // A one-way channel has no retransmission requests; repeating the whole
    // session is the sender-side remedy when the far end reports losses.
    for _ in 0..s.rounds.unwrap_or(1) {
        let report = mes_channel::protocol::send_session(&cfg).map_err(channel)?;
        println!(
            "sent {} frame bits in {} us",
            report.bits_sent, report.elapsed_us
        );
    }
    Ok(())
}

#[cfg(unix)]
fn cmd_recv(s: &Settings) -> Result<(), Failure> {
    let desc = s.descriptor()?;
    require_live(&desc, "recv")?;
    // With a known payload the run is a measurement and reports its error
    // rate; with only --bits the decode is blind and ber is meaningless.
    let (payload, ber_known) = match s.payload_source()? {
        PayloadSource::Random(bits) => (Bitstream::new(vec![false; bits]), false),
        src => (realize_payload(&src, s.seed)?, true),
    };
    let cfg = build_session(desc, s, payload)?;
    let outcome = run_session(&cfg).map_err(channel)?;
    println!("payload: {}", outcome.received);
    if let Some(bytes) = outcome.received.to_bytes() {
        let mut hex = String::with_capacity(bytes.len() * 2);
        for b in &bytes {
            let _ = write!(hex, "{b:02x}");
        }
        println!("hex: {hex}");
    }
    println!("{}", stats_line(&outcome.stats, ber_known));
    if !outcome.stats.valid {
        return Err(channel(format!(
            "{} of {} frames rejected (sync prefix mismatch)",
            outcome.frames_sent - outcome.frames_accepted,
            outcome.frames_sent
        )));
    }
    Ok(())
}

#[cfg(not(unix))]
fn cmd_send(_s: &Settings) -> Result<(), Failure> {
    Err(Failure::Channel("live roles need a unix host".into()))
}

#[cfg(not(unix))]
fn cmd_recv(_s: &Settings) -> Result<(), Failure> {
    Err(Failure::Channel("live roles need a unix host".into()))
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(s: &Settings) -> Result<(), Failure> {
    let desc = s.descriptor()?;
    let src = s.payload_source()?;
    if desc.kind.is_sim() {
        bench_sim(s, desc, &src)
    } else {
        bench_live(s, &desc, &src)
    }
}

/// In-process measurement: both endpoints on the simulated clock under the
/// standard disturbance model, fully determined by the seed.
fn bench_sim(s: &Settings, desc: BackendDescriptor, src: &PayloadSource) -> Result<(), Failure> {
    let rounds = s.rounds.unwrap_or(1);
    let timing = build_timing(s, desc.mechanism_class)?;
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let mut failed = 0u32;
    for round in 0..rounds {
        let seed = round_seed(s.seed, round);
        let payload = realize_payload(src, seed)?;
        let mut cfg = SessionConfig::new(desc.clone(), timing.clone(), payload);
        cfg.sync = s.sync.clone();
        cfg.retries = s.retries;
        cfg.noise = NoiseModel::standard(seed);
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        let outcome = run_session(&cfg).map_err(channel)?;
        if rounds > 1 {
            println!("round {round}: {}", stats_line(&outcome.stats, true));
        } else {
            println!("{}", stats_line(&outcome.stats, true));
        }
        if !outcome.stats.valid {
            failed += 1;
        }
        entries.push(ThroughputEntry::new(
            timing.bits_per_symbol(),
            outcome.stats.clone(),
        ));
        rows.push(session_row(&desc, &timing, &outcome.stats, Some(seed)));
    }
    if rounds > 1 {
        print!("{}", throughput_report(&entries).map_err(channel)?);
    }
    if let Some(path) = &s.out {
        let csv = SweepResult {
            points: vec![SweepPoint::from_rows(rows)],
        }
        .to_csv();
        std::fs::write(path, csv)
            .map_err(|e| channel(format!("cannot write {}: {e}", path.display())))?;
    }
    if failed > 0 {
        return Err(channel(format!(
            "{failed} of {rounds} rounds left frames unaccepted"
        )));
    }
    Ok(())
}

/// One CSV row in the sweep schema for a finished session.
fn session_row(
    desc: &BackendDescriptor,
    timing: &TimingConfig,
    stats: &ChannelStats,
    seed: Option<u64>,
) -> SweepRow {
    let (t_t1, t_t0, t_w0, t_i) = match timing.mechanism_class {
        MechanismClass::Contention => (Some(timing.t_t1_us), Some(timing.t_t0_us), None, None),
        MechanismClass::Cooperation => (None, None, Some(timing.t_w0_us), Some(timing.t_i_us)),
    };
    SweepRow {
        backend: desc.kind,
        mechanism: timing.mechanism_class,
        k: timing.bits_per_symbol(),
        t_t1_us: t_t1,
        t_t0_us: t_t0,
        t_w0_us: t_w0,
        t_i_us: t_i,
        bits: stats.bits_compared as u64,
        ber: stats.ber,
        tr_kbps: stats.tr_kbps,
        elapsed_us: stats.elapsed_us,
        accepted: stats.valid,
        seed,
    }
}

/// Real-backend measurement: fork this binary once per role on the same
/// host, receiver first, and relay the receiver's report.
#[cfg(unix)]
fn bench_live(s: &Settings, desc: &BackendDescriptor, src: &PayloadSource) -> Result<(), Failure> {
    use std::process::{Command as Proc, Stdio};

    let exe = std::env::current_exe().map_err(channel)?;
    let mut role_args: Vec<String> = vec![
        "--backend".into(),
        desc.kind.to_string(),
        "--resource".into(),
        desc.resource_name.clone(),
        "--mechanism".into(),
        desc.mechanism_class.to_string(),
        "--sync".into(),
        s.sync.to_string(),
        "--retries".into(),
        s.retries.to_string(),
        "--seed".into(),
        s.seed.to_string(),
    ];
    match desc.mechanism_class {
        MechanismClass::Contention => {
            role_args.extend([
                "--t-t1".into(),
                s.single("t_t1")?.to_string(),
                "--t-t0".into(),
                s.single("t_t0")?.to_string(),
            ]);
        }
        MechanismClass::Cooperation => {
            role_args.extend([
                "--k".into(),
                s.k.to_string(),
                "--t-w0".into(),
                s.single("t_w0")?.to_string(),
                "--t-i".into(),
                s.single("t_i")?.to_string(),
            ]);
        }
    }
    match src {
        PayloadSource::File(path) => {
            role_args.extend(["--payload-file".into(), path.display().to_string()])
        }
        // Materialize generated payloads here and pass the bits inline, so
        // the receiving role measures a real error rate instead of decoding
        // blind.
        src => {
            let payload = realize_payload(src, s.seed)?;
            role_args.extend(["--payload".into(), payload.to_string()]);
        }
    }

    // Named semaphores persist until unlinked, and a crashed earlier run can
    // leave the count pinned at the wrong value (a sender killed mid-hold
    // never posts its token back). bench owns both roles, so it is safe to
    // reset the object before either one opens it.
    if desc.kind == mes_channel::primitives::BackendKind::NamedSemaphore {
        mes_channel::primitives::named_sem::NamedSemaphore::unlink(&desc.resource_name)
            .map_err(|e| channel(format!("cannot reset semaphore: {e}")))?;
    }

    let receiver = Proc::new(&exe)
        .arg("recv")
        .args(&role_args)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| channel(format!("cannot spawn receiving role: {e}")))?;
    // Give the receiver time to open the backend and start listening.
    std::thread::sleep(std::time::Duration::from_millis(200));
    let sender = Proc::new(&exe)
        .arg("send")
        .args(&role_args)
        .stdout(Stdio::null())
        .stderr(Stdio::inherit())
        .status()
        .map_err(|e| channel(format!("cannot spawn sending role: {e}")))?;
    let received = receiver
        .wait_with_output()
        .map_err(|e| channel(format!("receiving role lost: {e}")))?;
    if desc.kind == mes_channel::primitives::BackendKind::NamedSemaphore {
        let _ = mes_channel::primitives::named_sem::NamedSemaphore::unlink(&desc.resource_name);
    }
    print!("{}", String::from_utf8_lossy(&received.stdout));
    if !sender.success() {
        return Err(channel("sending role failed"));
    }
    if !received.status.success() {
        return Err(channel("receiving role failed; see its stats above"));
    }
    Ok(())
}

#[cfg(not(unix))]
fn bench_live(_s: &Settings, _d: &BackendDescriptor, _src: &PayloadSource) -> Result<(), Failure> {
    Err(Failure::Channel("live backends need a unix host".into()))
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(s: &Settings) -> Result<(), Failure> {
    let desc = s.descriptor()?;
    let axes = [
        ("t_t1", &s.t_t1),
        ("t_t0", &s.t_t0),
        ("t_w0", &s.t_w0),
        ("t_i", &s.t_i),
    ];
    let lists: Vec<_> = axes.iter().filter(|(_, v)| v.len() > 1).collect();
    let (key, values) = match lists.as_slice() {
        [] => {
            return Err(Failure::Config(
                "sweep needs one timing flag with a comma-separated value list \
                 (for example --t-t1 100,140,180)"
                    .into(),
            ))
        }
        [one] => **one,
        many => {
            return Err(Failure::Config(format!(
                "sweep varies one parameter at a time; {} lists given",
                many.len()
            )))
        }
    };
    let Some(swept) = SweptParameter::parse(key) else {
        return Err(Failure::Config(format!(
            "{key} cannot be swept; vary t_t1, t_w0 or t_i"
        )));
    };
    let template = *values.last().expect("validated non-empty");
    let fixed = match swept {
        SweptParameter::HoldDuration => TimingConfig::contention(template, s.single("t_t0")?),
        SweptParameter::BaseWait => TimingConfig::cooperation(s.k, template, s.single("t_i")?),
        SweptParameter::WaitStep => TimingConfig::cooperation(s.k, s.single("t_w0")?, template),
    }
    .map_err(|e| Failure::Config(e.to_string()))?;
    let mut spec = SweepSpec::new(desc, fixed, swept, values.clone());
    spec.bits_per_point = s.bits.unwrap_or(1000);
    spec.repetitions = s.rounds.unwrap_or(3);
    spec.seed = s.seed;
    spec.retries = s.retries;
    if let Some(model) = &mut spec.noise {
        model.seed = s.seed;
    }
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let result = sweep(&spec).map_err(channel)?;
    let csv = result.to_csv();
    match &s.out {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| channel(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn cmd_calibrate(s: &Settings) -> Result<(), Failure> {
    let desc = s.descriptor()?;
    let timing = build_timing(s, desc.mechanism_class)?;
    let k = timing.bits_per_symbol() as usize;
    let symbols = timing.alphabet.symbol_count();
    let training = s.bits.unwrap_or((32 * symbols * k).max(200));
    if training / k < 2 * symbols {
        return Err(Failure::Config(format!(
            "calibration needs at least {} training bits to visit each of the \
             {symbols} symbols twice, got {training}",
            2 * symbols * k
        )));
    }
    let mut cfg = SessionConfig::new(desc, timing, Bitstream::new(vec![false]));
    cfg.sync = s.sync.clone();
    if cfg.backend.kind.is_sim() {
        cfg.noise = NoiseModel::standard(s.seed);
    }
    let result = calibrate(&cfg, training).map_err(channel)?;
    println!("{result}");
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Deterministic simulated checks covering each channel scheme, the noise
/// model, calibration, and CSV plumbing.
fn cmd_selftest(_s: &Settings) -> Result<(), Failure> {
    let mut failures = 0u32;
    let mut check = |name: &str, outcome: Result<String, String>| match outcome {
        Ok(detail) => println!("ok   {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL {name}: {detail}");
        }
    };

    check("lock round trip", selftest_round_trip("sim-lock"));
    check("event round trip", selftest_round_trip("sim-event"));
    check("semaphore masking", selftest_semaphore_masking());
    check("noisy operating point", selftest_noisy_op_point());
    check("token ledger", selftest_token_ledger());
    check("starved token pool", selftest_starved_pool());
    check("threshold calibration", selftest_calibration());
    check("sweep csv round trip", selftest_csv());

    if failures > 0 {
        Err(channel(format!("{failures} selftest checks failed")))
    } else {
        Ok(())
    }
}

fn selftest_timing(kind: mes_channel::primitives::BackendKind) -> TimingConfig {
    match kind.natural_class() {
        MechanismClass::Contention => TimingConfig::contention(160, 60).expect("valid"),
        MechanismClass::Cooperation => TimingConfig::cooperation(1, 15, 65).expect("valid"),
    }
}

fn selftest_round_trip(backend: &str) -> Result<String, String> {
    let kind = mes_channel::primitives::BackendKind::parse(backend).expect("known backend");
    let timing = selftest_timing(kind);
    let payload = deterministic_payload(1000, 5);
    let cfg = SessionConfig::new(BackendDescriptor::new(kind, "selftest"), timing, payload);
    let outcome = run_session(&cfg).map_err(|e| e.to_string())?;
    if outcome.stats.valid && outcome.stats.bit_errors == 0 {
        Ok(format!(
            "1000 bits noiseless, ber 0, tr {:.3} kb/s",
            outcome.stats.tr_kbps
        ))
    } else {
        Err(format!(
            "expected a perfect noiseless transfer, got {} errors (valid={})",
            outcome.stats.bit_errors, outcome.stats.valid
        ))
    }
}

/// A banked token pool keeps the round alive but satisfies every probe
/// instantly: the transfer completes, conserves tokens exactly, and decodes
/// to nothing. The information lives in the consumption ledger instead.
fn selftest_semaphore_masking() -> Result<String, String> {
    let timing = TimingConfig::contention(160, 60).expect("valid");
    let payload = Bitstream::from_bit_text("1011001110").expect("valid");
    let cfg = SessionConfig::new(
        BackendDescriptor::new(
            mes_channel::primitives::BackendKind::SimSemaphore,
            "selftest",
        ),
        timing,
        payload,
    );
    let log = mes_channel::protocol::run_sim_round(&cfg).map_err(|e| e.to_string())?;
    let masked = log.samples.iter().all(|s| s.latency_us == 0);
    if log.final_semaphore_count == Some(0) && masked && log.received.count_ones() == 0 {
        Ok("banked pool drains to 0 and hides every wait time".into())
    } else {
        Err(format!(
            "expected a drained pool with all-zero latencies, got final={:?} masked={masked}",
            log.final_semaphore_count
        ))
    }
}

fn selftest_noisy_op_point() -> Result<String, String> {
    let timing = TimingConfig::cooperation(1, 15, 65).expect("valid");
    let mut cfg = SessionConfig::new(
        BackendDescriptor::new(mes_channel::primitives::BackendKind::SimEvent, "selftest"),
        timing,
        deterministic_payload(2000, 6),
    );
    cfg.noise = NoiseModel::standard(6);
    let outcome = run_session(&cfg).map_err(|e| e.to_string())?;
    if outcome.stats.valid && outcome.stats.ber < 0.02 {
        Ok(format!(
            "2000 bits under standard noise, ber {:.4}%, tr {:.3} kb/s",
            outcome.stats.ber * 100.0,
            outcome.stats.tr_kbps
        ))
    } else {
        Err(format!(
            "expected ber < 2% and a valid session, got {:.4}% (valid={})",
            outcome.stats.ber * 100.0,
            outcome.stats.valid
        ))
    }
}

/// A worked provisioning example: one token per zero, pool drained exactly.
fn selftest_token_ledger() -> Result<String, String> {
    let bits = Bitstream::from_bit_text("110110100011").expect("valid");
    let timing = TimingConfig::contention(160, 60).expect("valid");
    let run = run_semaphore_pattern(&bits, &timing, 5, &NoiseModel::zero())
        .map_err(|e| e.to_string())?;
    let expected = [5u64, 5, 4, 4, 4, 3, 3, 2, 1, 0, 0, 0];
    if run.completed && run.resources == expected {
        Ok(format!("pool level per slot {:?}", run.resources))
    } else {
        Err(format!(
            "expected completion with pool trace {expected:?}, got completed={} trace {:?}",
            run.completed, run.resources
        ))
    }
}

fn selftest_starved_pool() -> Result<String, String> {
    let bits = Bitstream::from_bit_text("110110100011").expect("valid");
    let timing = TimingConfig::contention(160, 60).expect("valid");
    let run = run_semaphore_pattern(&bits, &timing, 0, &NoiseModel::zero())
        .map_err(|e| e.to_string())?;
    if !run.completed && run.stall.is_some() {
        Ok("empty pool starves the reader as expected".into())
    } else {
        Err("an empty pool should have stalled the pattern".into())
    }
}

fn selftest_calibration() -> Result<String, String> {
    let timing = TimingConfig::cooperation(1, 15, 65).expect("valid");
    let cfg = SessionConfig::new(
        BackendDescriptor::new(mes_channel::primitives::BackendKind::SimEvent, "selftest"),
        timing,
        Bitstream::new(vec![false]),
    );
    let cal = calibrate(&cfg, 64).map_err(|e| e.to_string())?;
    let cut = cal.thresholds.cutpoints_us()[0];
    if cal.means_us == vec![15.0, 80.0] && cut == 47.5 {
        Ok(format!("noiseless clusters [15, 80], cutpoint {cut}"))
    } else {
        Err(format!(
            "expected clusters [15, 80] with cutpoint 47.5, got {:?} / {cut}",
            cal.means_us
        ))
    }
}

fn selftest_csv() -> Result<String, String> {
    let fixed = TimingConfig::contention(160, 60).expect("valid");
    let mut spec = SweepSpec::new(
        BackendDescriptor::new(mes_channel::primitives::BackendKind::SimLock, "selftest"),
        fixed,
        SweptParameter::HoldDuration,
        vec![100, 160],
    );
    spec.noise = Some(NoiseModel::zero());
    spec.bits_per_point = 100;
    spec.repetitions = 1;
    let result = sweep(&spec).map_err(|e| e.to_string())?;
    let csv = result.to_csv();
    let parsed = mes_channel::harness::parse_csv(&csv).map_err(|e| e.to_string())?;
    if parsed.to_csv() == csv {
        Ok(format!("{} bytes survive a parse and re-render", csv.len()))
    } else {
        Err("CSV did not round-trip byte-for-byte".into())
    }
}

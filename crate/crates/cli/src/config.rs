//! Configuration resolution: `key = value` files, flag/file precedence, and
//! the shared parsing that turns raw strings into validated channel settings.
//!
//! Flags and file entries feed the same parsers, so a value is rejected with
//! the same diagnostic no matter where it came from. Precedence is flags over
//! file over built-in defaults; the file comes from `--config` or, failing
//! that, the `MES_CHANNEL_CONFIG` environment variable.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use mes_channel::codec::{Bitstream, DEFAULT_SYNC};
use mes_channel::primitives::{BackendDescriptor, BackendKind, MechanismClass, Micros};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "MES_CHANNEL_CONFIG";

/// Every key a config file may set; one per flag, `-` swapped for `_`.
pub const KNOWN_KEYS: &[&str] = &[
    "backend",
    "resource",
    "mechanism",
    "k",
    "t_t1",
    "t_t0",
    "t_w0",
    "t_i",
    "sync",
    "bits",
    "payload",
    "payload_file",
    "out",
    "seed",
    "rounds",
    "retries",
];

/// A configuration problem; always exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Parses a `key = value` file: one pair per line, `#` starts a comment,
/// blank lines ignored. Unknown and duplicate keys are rejected by name and
/// line number.
pub fn parse_config_text(text: &str) -> Result<HashMap<String, String>, ConfigError> {
    let mut pairs = HashMap::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(format!(
                "line {lineno}: expected `key = value`, got {line:?}"
            ));
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return err(format!("line {lineno}: unknown key `{key}`"));
        }
        if let Some(prev) = first_line.get(key) {
            return err(format!(
                "line {lineno}: duplicate key `{key}` (first set on line {prev})"
            ));
        }
        if value.is_empty() {
            return err(format!("line {lineno}: key `{key}` has no value"));
        }
        first_line.insert(key.to_string(), lineno);
        pairs.insert(key.to_string(), value.to_string());
    }
    Ok(pairs)
}

/// Loads and parses the file at `path`.
pub fn load_config_file(path: &str) -> Result<HashMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config file {path}: {e}")))?;
    parse_config_text(&text).map_err(|e| ConfigError(format!("{path}: {e}")))
}

/// Raw option strings in flag-over-file precedence, before validation.
#[derive(Debug, Default, Clone)]
pub struct RawSettings {
    pub flags: HashMap<&'static str, String>,
    pub file: HashMap<String, String>,
}

impl RawSettings {
    fn get(&self, key: &str) -> Option<&str> {
        self.flags
            .get(key)
            .or_else(|| self.file.get(key))
            .map(String::as_str)
    }
}

/// Where the payload bits come from.
#[derive(Debug, Clone)]
pub enum PayloadSource {
    /// `--payload`: inline bit string.
    Inline(Bitstream),
    /// `--payload-file`: bit text or raw bytes on disk.
    File(PathBuf),
    /// `--bits`: that many seeded coin flips.
    Random(usize),
}

/// Fully validated settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Settings {
    pub backend: Option<BackendKind>,
    pub resource: Option<String>,
    pub mechanism: Option<MechanismClass>,
    pub k: u32,
    /// Timing values; more than one entry is only meaningful to `sweep`.
    pub t_t1: Vec<Micros>,
    pub t_t0: Vec<Micros>,
    pub t_w0: Vec<Micros>,
    pub t_i: Vec<Micros>,
    pub sync: Bitstream,
    pub bits: Option<usize>,
    pub payload: Option<Bitstream>,
    pub payload_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub rounds: Option<u32>,
    pub retries: u32,
}

/// Built-in timing defaults: the lock channel's recommended 160/60 µs and
/// the event channel's 15/65 µs operating point.
pub const DEFAULT_T_T1: Micros = 160;
pub const DEFAULT_T_T0: Micros = 60;
pub const DEFAULT_T_W0: Micros = 15;
pub const DEFAULT_T_I: Micros = 65;

fn parse_u64(key: &str, s: &str) -> Result<u64, ConfigError> {
    match s.parse::<u64>() {
        Ok(v) => Ok(v),
        Err(_) => err(format!("{key} must be a non-negative integer, got {s:?}")),
    }
}

fn parse_micros_list(key: &str, s: &str) -> Result<Vec<Micros>, ConfigError> {
    let mut values = Vec::new();
    for part in s.split(',') {
        let v = parse_u64(key, part.trim())?;
        if v == 0 {
            return err(format!("{key} must be positive microseconds, got 0"));
        }
        values.push(v);
    }
    Ok(values)
}

impl Settings {
    /// Validates the merged raw strings. Identical rules apply whether a
    /// value arrived as a flag or a file entry.
    pub fn resolve(raw: &RawSettings) -> Result<Settings, ConfigError> {
        let backend = match raw.get("backend") {
            Some(s) => match BackendKind::parse(s) {
                Some(kind) => Some(kind),
                None => {
                    let names: Vec<&str> = BackendKind::ALL.iter().map(|b| b.as_str()).collect();
                    return err(format!(
                        "unknown backend {s:?}; expected one of {}",
                        names.join(", ")
                    ));
                }
            },
            None => None,
        };
        let mechanism = match raw.get("mechanism") {
            Some(s) => match MechanismClass::parse(s) {
                Some(m) => Some(m),
                None => {
                    return err(format!(
                        "unknown mechanism {s:?}; expected contention or cooperation"
                    ))
                }
            },
            None => None,
        };
        let k = match raw.get("k") {
            Some(s) => {
                let v = parse_u64("k", s)?;
                if v == 0 || v > 8 {
                    return err(format!("k must be between 1 and 8 bits per symbol, got {v}"));
                }
                v as u32
            }
            None => 1,
        };
        let timing = |key: &str, default: Micros| -> Result<Vec<Micros>, ConfigError> {
            match raw.get(key) {
                Some(s) => parse_micros_list(key, s),
                None => Ok(vec![default]),
            }
        };
        let sync = match raw.get("sync") {
            Some(s) => Bitstream::from_bit_text(s)
                .map_err(|e| ConfigError(format!("sync must be a bit string: {e}")))?,
            None => Bitstream::from_bit_text(DEFAULT_SYNC).expect("default sync is valid"),
        };
        let bits = match raw.get("bits") {
            Some(s) => {
                let v = parse_u64("bits", s)?;
                if v == 0 {
                    return err("bits must be positive");
                }
                Some(v as usize)
            }
            None => None,
        };
        let payload = match raw.get("payload") {
            Some(s) => Some(
                Bitstream::from_bit_text(s)
                    .map_err(|e| ConfigError(format!("payload must be a bit string: {e}")))?,
            ),
            None => None,
        };
        let rounds = match raw.get("rounds") {
            Some(s) => {
                let v = parse_u64("rounds", s)?;
                if v == 0 {
                    return err("rounds must be positive");
                }
                Some(v as u32)
            }
            None => None,
        };
        Ok(Settings {
            backend,
            resource: raw.get("resource").map(str::to_string),
            mechanism,
            k,
            t_t1: timing("t_t1", DEFAULT_T_T1)?,
            t_t0: timing("t_t0", DEFAULT_T_T0)?,
            t_w0: timing("t_w0", DEFAULT_T_W0)?,
            t_i: timing("t_i", DEFAULT_T_I)?,
            sync,
            bits,
            payload,
            payload_file: raw.get("payload_file").map(PathBuf::from),
            out: raw.get("out").map(PathBuf::from),
            seed: match raw.get("seed") {
                Some(s) => parse_u64("seed", s)?,
                None => 0,
            },
            rounds,
            retries: match raw.get("retries") {
                Some(s) => parse_u64("retries", s)? as u32,
                None => 3,
            },
        })
    }

    /// The backend, required for every command but `selftest`.
    pub fn require_backend(&self) -> Result<BackendKind, ConfigError> {
        self.backend
            .ok_or_else(|| ConfigError("--backend is required for this command".into()))
    }

    /// Builds the validated backend descriptor. Kernel-backed backends need
    /// an explicit resource name; simulated ones default to `mesch0`.
    pub fn descriptor(&self) -> Result<BackendDescriptor, ConfigError> {
        let kind = self.require_backend()?;
        let resource = match (&self.resource, kind.is_sim()) {
            (Some(name), _) => name.clone(),
            (None, true) => "mesch0".to_string(),
            (None, false) => {
                return err(format!(
                    "--resource must name the shared file or semaphore for {kind}"
                ))
            }
        };
        let mut desc = BackendDescriptor::new(kind, resource);
        if let Some(m) = self.mechanism {
            desc.mechanism_class = m;
        }
        desc.validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(desc)
    }

    /// The single value of a timing parameter; comma lists are sweep-only.
    pub fn single(&self, key: &str) -> Result<Micros, ConfigError> {
        let values = match key {
            "t_t1" => &self.t_t1,
            "t_t0" => &self.t_t0,
            "t_w0" => &self.t_w0,
            "t_i" => &self.t_i,
            _ => unreachable!("not a timing key: {key}"),
        };
        if values.len() != 1 {
            return err(format!(
                "{key} takes a single value here; comma lists only sweep"
            ));
        }
        Ok(values[0])
    }

    /// The payload source, exactly one of `--payload`, `--payload-file`,
    /// `--bits`.
    pub fn payload_source(&self) -> Result<PayloadSource, ConfigError> {
        let given = [
            self.payload.is_some(),
            self.payload_file.is_some(),
            self.bits.is_some(),
        ]
        .iter()
        .filter(|g| **g)
        .count();
        if given != 1 {
            return err(
                "exactly one payload source is required: --payload <bits>, \
                 --payload-file <path>, or --bits <n> for a seeded random payload",
            );
        }
        if let Some(p) = &self.payload {
            Ok(PayloadSource::Inline(p.clone()))
        } else if let Some(f) = &self.payload_file {
            Ok(PayloadSource::File(f.clone()))
        } else {
            Ok(PayloadSource::Random(self.bits.unwrap()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_flags(pairs: &[(&'static str, &str)]) -> Result<Settings, ConfigError> {
        let mut raw = RawSettings::default();
        for (k, v) in pairs {
            raw.flags.insert(k, v.to_string());
        }
        Settings::resolve(&raw)
    }

    #[test]
    fn defaults_cover_both_operating_points() {
        let s = resolve_flags(&[]).unwrap();
        assert_eq!(s.t_t1, vec![160]);
        assert_eq!(s.t_t0, vec![60]);
        assert_eq!(s.t_w0, vec![15]);
        assert_eq!(s.t_i, vec![65]);
        assert_eq!(s.k, 1);
        assert_eq!(s.retries, 3);
        assert_eq!(s.sync.to_string(), "10101010");
    }

    #[test]
    fn file_values_yield_to_flags() {
        let mut raw = RawSettings {
            file: parse_config_text("t_t1 = 160\nt_t0 = 70\n").unwrap(),
            ..Default::default()
        };
        raw.flags.insert("t_t1", "170".to_string());
        let s = Settings::resolve(&raw).unwrap();
        assert_eq!(s.t_t1, vec![170], "flag wins");
        assert_eq!(s.t_t0, vec![70], "file fills the rest");
    }

    #[test]
    fn cross_host_lock_parameters_parse_from_a_file() {
        let pairs = parse_config_text(
            "# lock channel, long holds\nbackend = file-lock\nt_t1 = 200\nt_t0 = 70\n",
        )
        .unwrap();
        let raw = RawSettings {
            file: pairs,
            ..Default::default()
        };
        let s = Settings::resolve(&raw).unwrap();
        assert_eq!(s.backend, Some(BackendKind::FileLock));
        assert_eq!(s.t_t1, vec![200]);
        assert_eq!(s.t_t0, vec![70]);
    }

    #[test]
    fn duplicate_keys_name_the_key_and_both_lines() {
        let e = parse_config_text("t_t1 = 100\n\nt_t1 = 200\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("duplicate key `t_t1`"), "got: {msg}");
        assert!(msg.contains("line 3"), "got: {msg}");
        assert!(msg.contains("line 1"), "got: {msg}");
    }

    #[test]
    fn unknown_keys_are_rejected_by_line() {
        let e = parse_config_text("t_tt1 = 100\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("unknown key `t_tt1`"), "got: {msg}");
        assert!(msg.contains("line 1"), "got: {msg}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let pairs = parse_config_text("# full line\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(pairs.get("seed").map(String::as_str), Some("7"));
    }

    #[test]
    fn timing_lists_parse_and_validate_each_entry() {
        let s = resolve_flags(&[("t_t1", "100,140,180")]).unwrap();
        assert_eq!(s.t_t1, vec![100, 140, 180]);
        assert!(resolve_flags(&[("t_t1", "100,x")]).is_err());
        assert!(resolve_flags(&[("t_t1", "100,0")]).is_err());
        let s = resolve_flags(&[("t_t1", "100,140")]).unwrap();
        let msg = s.single("t_t1").unwrap_err().to_string();
        assert!(msg.contains("single value"), "got: {msg}");
    }

    #[test]
    fn real_backends_need_an_explicit_resource() {
        let s = resolve_flags(&[("backend", "file-lock")]).unwrap();
        let msg = s.descriptor().unwrap_err().to_string();
        assert!(msg.contains("--resource"), "got: {msg}");
        let s = resolve_flags(&[("backend", "sim-lock")]).unwrap();
        assert_eq!(s.descriptor().unwrap().resource_name, "mesch0");
    }

    #[test]
    fn payload_sources_are_mutually_exclusive() {
        let s = resolve_flags(&[("payload", "1100"), ("bits", "4")]).unwrap();
        assert!(s.payload_source().is_err());
        let s = resolve_flags(&[]).unwrap();
        assert!(s.payload_source().is_err());
        let s = resolve_flags(&[("payload", "1100")]).unwrap();
        assert!(matches!(s.payload_source().unwrap(), PayloadSource::Inline(_)));
    }

    #[test]
    fn bad_values_name_the_key() {
        for (key, value) in [("k", "0"), ("k", "9"), ("bits", "0"), ("seed", "-1")] {
            let msg = resolve_flags(&[(key, value)]).unwrap_err().to_string();
            assert!(msg.contains(key), "{key}={value} got: {msg}");
        }
    }
}

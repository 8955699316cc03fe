//! Bit-level coding for latency channels: symbol alphabets, decision
//! thresholds, framing and error statistics.
//!
//! A transmitter maps groups of `k` bits onto one of `2^k` wait durations;
//! the receiver measures a latency per symbol and decodes it by comparing
//! against `2^k - 1` cutpoints. Frames prefix the payload with a short sync
//! sequence so the receiver can reject torn or misaligned transfers.

use std::fmt;

use thiserror::Error;

/// Default sync prefix placed in front of every frame.
pub const DEFAULT_SYNC: &str = "10101010";

/// Widest supported symbol in bits. Eight bits already means 256 distinct
/// wait durations, far beyond what a timing channel can keep separable.
pub const MAX_BITS_PER_SYMBOL: u32 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bits per symbol must be in 1..={MAX_BITS_PER_SYMBOL}, got {0}")]
    BadSymbolWidth(u32),
    #[error("symbol durations must be positive, got {0} us")]
    NonPositiveDuration(i64),
    #[error("symbol durations must be strictly increasing ({prev} us then {next} us)")]
    NonMonotonicDurations { prev: u64, next: u64 },
    #[error("alphabet needs {expected} durations for {k}-bit symbols, got {got}")]
    WrongAlphabetSize { k: u32, expected: usize, got: usize },
    #[error("expected a frame of {expected} bits, received {got}")]
    MalformedFrame { expected: usize, got: usize },
    #[error("sync prefix mismatch: frame does not start with the agreed pattern")]
    SyncMismatch,
    #[error("bitstream lengths differ ({sent} sent vs {received} received)")]
    LengthMismatch { sent: usize, received: usize },
    #[error("invalid bit character {0:?} (expected '0' or '1')")]
    BadBitChar(char),
    #[error("bitstream is empty")]
    Empty,
    #[error("elapsed time must be positive")]
    ZeroElapsed,
}

/// A sequence of bits, most significant bit first when packed into bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Bitstream {
    bits: Vec<bool>,
}

impl Bitstream {
    pub fn new(bits: Vec<bool>) -> Self {
        Bitstream { bits }
    }

    /// Parses ASCII `'0'`/`'1'` text; whitespace is ignored.
    pub fn from_bit_text(text: &str) -> Result<Self, CodecError> {
        let mut bits = Vec::with_capacity(text.len());
        for ch in text.chars() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                c if c.is_whitespace() => {}
                c => return Err(CodecError::BadBitChar(c)),
            }
        }
        if bits.is_empty() {
            return Err(CodecError::Empty);
        }
        Ok(Bitstream { bits })
    }

    /// Unpacks raw bytes MSB-first.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut bits = Vec::with_capacity(bytes.len() * 8);
        for byte in bytes {
            for shift in (0..8).rev() {
                bits.push(byte >> shift & 1 == 1);
            }
        }
        Bitstream { bits }
    }

    /// Interprets file contents as either bit text or raw bytes.
    ///
    /// Content made of `'0'`/`'1'` and whitespace only is treated as text;
    /// anything else is unpacked MSB-first.
    pub fn from_payload_bytes(data: &[u8]) -> Result<Self, CodecError> {
        let looks_textual = !data.is_empty()
            && data
                .iter()
                .all(|b| matches!(b, b'0' | b'1' | b' ' | b'\t' | b'\r' | b'\n'))
            && data.iter().any(|b| matches!(b, b'0' | b'1'));
        if looks_textual {
            Self::from_bit_text(std::str::from_utf8(data).expect("ascii subset"))
        } else if data.is_empty() {
            Err(CodecError::Empty)
        } else {
            Ok(Self::from_bytes(data))
        }
    }

    /// Packs back into bytes when the length is a whole number of octets.
    pub fn to_bytes(&self) -> Option<Vec<u8>> {
        if self.bits.is_empty() || self.bits.len() % 8 != 0 {
            return None;
        }
        let mut out = Vec::with_capacity(self.bits.len() / 8);
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for &bit in chunk {
                byte = byte << 1 | bit as u8;
            }
            out.push(byte);
        }
        Some(out)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn push(&mut self, bit: bool) {
        self.bits.push(bit);
    }

    pub fn extend(&mut self, other: &Bitstream) {
        self.bits.extend_from_slice(&other.bits);
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Bitstream {
        Bitstream {
            bits: self.bits[range].to_vec(),
        }
    }

    /// Number of positions where two equal-length streams disagree.
    pub fn hamming(&self, other: &Bitstream) -> Result<usize, CodecError> {
        if self.len() != other.len() {
            return Err(CodecError::LengthMismatch {
                sent: self.len(),
                received: other.len(),
            });
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }

    pub fn count_zeros(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

impl fmt::Display for Bitstream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &bit in &self.bits {
            f.write_str(if bit { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Wait durations for each of the `2^k` symbols, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolAlphabet {
    bits_per_symbol: u32,
    durations_us: Vec<u64>,
}

impl SymbolAlphabet {
    /// Builds an alphabet from explicit durations; the length must be `2^k`.
    pub fn new(bits_per_symbol: u32, durations_us: Vec<u64>) -> Result<Self, CodecError> {
        if bits_per_symbol == 0 || bits_per_symbol > MAX_BITS_PER_SYMBOL {
            return Err(CodecError::BadSymbolWidth(bits_per_symbol));
        }
        let expected = 1usize << bits_per_symbol;
        if durations_us.len() != expected {
            return Err(CodecError::WrongAlphabetSize {
                k: bits_per_symbol,
                expected,
                got: durations_us.len(),
            });
        }
        for pair in durations_us.windows(2) {
            if pair[1] <= pair[0] {
                return Err(CodecError::NonMonotonicDurations {
                    prev: pair[0],
                    next: pair[1],
                });
            }
        }
        if durations_us[0] == 0 {
            return Err(CodecError::NonPositiveDuration(0));
        }
        Ok(SymbolAlphabet {
            bits_per_symbol,
            durations_us,
        })
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.bits_per_symbol
    }

    pub fn durations_us(&self) -> &[u64] {
        &self.durations_us
    }

    pub fn symbol_count(&self) -> usize {
        self.durations_us.len()
    }

    pub fn max_duration_us(&self) -> u64 {
        *self.durations_us.last().expect("non-empty by construction")
    }
}

/// Linear alphabet: symbol `s` waits `t_w0 + s * t_i` microseconds.
pub fn build_alphabet(
    bits_per_symbol: u32,
    t_w0_us: u64,
    t_i_us: u64,
) -> Result<SymbolAlphabet, CodecError> {
    if bits_per_symbol == 0 || bits_per_symbol > MAX_BITS_PER_SYMBOL {
        return Err(CodecError::BadSymbolWidth(bits_per_symbol));
    }
    if t_w0_us == 0 {
        return Err(CodecError::NonPositiveDuration(0));
    }
    if t_i_us == 0 {
        // Zero step collapses all symbols onto one duration.
        return Err(CodecError::NonMonotonicDurations {
            prev: t_w0_us,
            next: t_w0_us,
        });
    }
    let count = 1u64 << bits_per_symbol;
    let durations = (0..count).map(|s| t_w0_us + s * t_i_us).collect();
    SymbolAlphabet::new(bits_per_symbol, durations)
}

/// Decision cutpoints between adjacent symbols, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionThresholds {
    cutpoints_us: Vec<f64>,
}

impl DecisionThresholds {
    pub fn new(cutpoints_us: Vec<f64>) -> Self {
        debug_assert!(cutpoints_us.windows(2).all(|w| w[0] < w[1]));
        DecisionThresholds { cutpoints_us }
    }

    pub fn cutpoints_us(&self) -> &[f64] {
        &self.cutpoints_us
    }
}

/// Arithmetic midpoints between adjacent alphabet durations.
pub fn thresholds_from_alphabet(alphabet: &SymbolAlphabet) -> DecisionThresholds {
    let cutpoints = alphabet
        .durations_us()
        .windows(2)
        .map(|pair| (pair[0] + pair[1]) as f64 / 2.0)
        .collect();
    DecisionThresholds::new(cutpoints)
}

/// Maps a measured latency to a symbol: the count of cutpoints at or below
/// the latency. A latency exactly on a cutpoint decodes to the higher symbol.
pub fn decode_latency(latency_us: f64, thresholds: &DecisionThresholds) -> usize {
    thresholds
        .cutpoints_us
        .iter()
        .filter(|cut| **cut <= latency_us)
        .count()
}

/// Groups a bitstream into `k`-bit symbols, MSB first. A trailing partial
/// symbol is padded with zeros on the right; callers track the true bit
/// length separately.
pub fn symbols_from_bits(bits: &Bitstream, bits_per_symbol: u32) -> Vec<usize> {
    let k = bits_per_symbol as usize;
    bits.bits()
        .chunks(k)
        .map(|chunk| {
            let mut sym = 0usize;
            for i in 0..k {
                sym <<= 1;
                if *chunk.get(i).unwrap_or(&false) {
                    sym |= 1;
                }
            }
            sym
        })
        .collect()
}

/// Expands decoded symbols back into a bitstream of `total_bits` bits,
/// dropping the zero padding added by [`symbols_from_bits`].
pub fn bits_from_symbols(symbols: &[usize], bits_per_symbol: u32, total_bits: usize) -> Bitstream {
    let k = bits_per_symbol as usize;
    let mut bits = Vec::with_capacity(symbols.len() * k);
    for &sym in symbols {
        for shift in (0..k).rev() {
            bits.push(sym >> shift & 1 == 1);
        }
    }
    bits.truncate(total_bits);
    Bitstream::new(bits)
}

/// A sync prefix plus payload, ready for transmission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    sync: Bitstream,
    payload: Bitstream,
}

impl Frame {
    pub fn sync(&self) -> &Bitstream {
        &self.sync
    }

    pub fn payload(&self) -> &Bitstream {
        &self.payload
    }

    pub fn total_bits(&self) -> usize {
        self.sync.len() + self.payload.len()
    }

    /// Concatenated on-air bit sequence.
    pub fn to_bitstream(&self) -> Bitstream {
        let mut out = self.sync.clone();
        out.extend(&self.payload);
        out
    }
}

/// Prefixes the payload with the sync sequence.
pub fn make_frame(sync: &Bitstream, payload: &Bitstream) -> Result<Frame, CodecError> {
    if sync.is_empty() || payload.is_empty() {
        return Err(CodecError::Empty);
    }
    Ok(Frame {
        sync: sync.clone(),
        payload: payload.clone(),
    })
}

/// Splits a received bit sequence back into a frame.
///
/// The total length must be exactly `sync + payload_bits` (anything else is a
/// malformed frame, reported separately from a clean sync mismatch) and the
/// prefix must match the agreed sync pattern bit for bit.
pub fn parse_frame(
    received: &Bitstream,
    sync: &Bitstream,
    payload_bits: usize,
) -> Result<Frame, CodecError> {
    let expected = sync.len() + payload_bits;
    if received.len() != expected {
        return Err(CodecError::MalformedFrame {
            expected,
            got: received.len(),
        });
    }
    let got_sync = received.slice(0..sync.len());
    if &got_sync != sync {
        return Err(CodecError::SyncMismatch);
    }
    Ok(Frame {
        sync: got_sync,
        payload: received.slice(sync.len()..received.len()),
    })
}

/// Error and throughput summary for one transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    /// Bits compared for the error rate.
    pub bits_compared: usize,
    pub bit_errors: usize,
    /// Bit error rate in [0, 1].
    pub ber: f64,
    pub elapsed_us: u64,
    /// Throughput in kilobits (1000 bits) per second.
    pub tr_kbps: f64,
    /// Cleared when the transfer never produced an accepted frame.
    pub valid: bool,
}

/// Compares sent and received streams of equal length over `elapsed_us`.
pub fn compute_stats(
    sent: &Bitstream,
    received: &Bitstream,
    elapsed_us: u64,
) -> Result<ChannelStats, CodecError> {
    if elapsed_us == 0 {
        return Err(CodecError::ZeroElapsed);
    }
    let bit_errors = sent.hamming(received)?;
    let bits = sent.len();
    Ok(ChannelStats {
        bits_compared: bits,
        bit_errors,
        ber: bit_errors as f64 / bits as f64,
        elapsed_us,
        tr_kbps: throughput_kbps(bits, elapsed_us),
        valid: true,
    })
}

/// Throughput of `bits` over `elapsed_us`, in kilobits (1000 bits) per second.
pub fn throughput_kbps(bits: usize, elapsed_us: u64) -> f64 {
    bits as f64 / elapsed_us as f64 * 1000.0
}

//! Synchronization-primitive backends: descriptors shared by every backend,
//! the noise model for simulated runs, a deterministic two-endpoint
//! simulator, and real OS-backed primitives (advisory file locks, POSIX
//! named semaphores).

pub mod clock;
pub mod noise;
pub mod sim;

#[cfg(unix)]
pub mod file_lock;
#[cfg(unix)]
pub mod named_sem;

use std::fmt;

use thiserror::Error;

/// Microseconds. All channel timing is carried in integer microseconds.
pub type Micros = u64;

#[derive(Debug, Error)]
pub enum PrimitiveError {
    #[error("resource name must not be empty")]
    EmptyResourceName,
    #[error("backend kind {kind} does not support mechanism class {class}")]
    ClassMismatch { kind: BackendKind, class: MechanismClass },
    #[error("fair queueing is only available on simulated backends, not {0}")]
    FairQueueingUnsupported(BackendKind),
    #[error("simulated resource {name:?} already exists as {existing}, requested {requested}")]
    NameCollision {
        name: String,
        existing: BackendKind,
        requested: BackendKind,
    },
    #[error("release without holding the lock {0:?} (protocol misuse)")]
    ReleaseWithoutHold(String),
    #[error("semaphore {name:?} would exceed its maximum count {max}")]
    SemaphoreOverflow { name: String, max: u64 },
    #[error("operation {op} is not supported by backend kind {kind}")]
    WrongOperation { kind: BackendKind, op: &'static str },
    #[error("receiver watchdog expired after {0} us without a signal")]
    WatchdogExpired(Micros),
    #[error("{op} failed on {name:?}: {source}")]
    Os {
        op: &'static str,
        name: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which OS object (or simulated stand-in) carries the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    /// Advisory exclusive lock on a shared file (flock).
    FileLock,
    /// POSIX named counting semaphore.
    NamedSemaphore,
    /// Simulated exclusive lock.
    SimLock,
    /// Simulated auto-reset event (latch saturates at one).
    SimEvent,
    /// Simulated counting semaphore.
    SimSemaphore,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::FileLock,
        BackendKind::NamedSemaphore,
        BackendKind::SimLock,
        BackendKind::SimEvent,
        BackendKind::SimSemaphore,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::FileLock => "file-lock",
            BackendKind::NamedSemaphore => "named-semaphore",
            BackendKind::SimLock => "sim-lock",
            BackendKind::SimEvent => "sim-event",
            BackendKind::SimSemaphore => "sim-semaphore",
        }
    }

    pub fn parse(s: &str) -> Option<BackendKind> {
        BackendKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    pub fn is_sim(&self) -> bool {
        matches!(
            self,
            BackendKind::SimLock | BackendKind::SimEvent | BackendKind::SimSemaphore
        )
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the channel modulates time through the primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MechanismClass {
    /// Receiver times how long the primitive stays occupied by the sender.
    Contention,
    /// Sender delays an explicit wake-up; receiver times its wait.
    Cooperation,
}

impl MechanismClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            MechanismClass::Contention => "contention",
            MechanismClass::Cooperation => "cooperation",
        }
    }

    pub fn parse(s: &str) -> Option<MechanismClass> {
        match s {
            "contention" => Some(MechanismClass::Contention),
            "cooperation" => Some(MechanismClass::Cooperation),
            _ => None,
        }
    }
}

impl fmt::Display for MechanismClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one channel endpoint's resource and semantics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Lock-file path, semaphore name, or simulated registry key.
    pub resource_name: String,
    pub mechanism_class: MechanismClass,
    /// FIFO hand-off of lock waiters; only meaningful in simulation.
    pub fair_queueing: bool,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, resource_name: impl Into<String>) -> Self {
        BackendDescriptor {
            kind,
            resource_name: resource_name.into(),
            mechanism_class: kind.natural_class(),
            fair_queueing: kind.is_sim(),
        }
    }

    /// Checks the structural rules before a backend is opened.
    pub fn validate(&self) -> Result<(), PrimitiveError> {
        if self.resource_name.is_empty() {
            return Err(PrimitiveError::EmptyResourceName);
        }
        if self.fair_queueing && !self.kind.is_sim() {
            return Err(PrimitiveError::FairQueueingUnsupported(self.kind));
        }
        let class_ok = match self.kind {
            // The event is the only purely cooperative object; a named
            // semaphore can serve either as a counting lock (contention) or
            // as an event stand-in (cooperation).
            BackendKind::SimEvent => self.mechanism_class == MechanismClass::Cooperation,
            BackendKind::NamedSemaphore => true,
            BackendKind::FileLock | BackendKind::SimLock | BackendKind::SimSemaphore => {
                self.mechanism_class == MechanismClass::Contention
            }
        };
        if !class_ok {
            return Err(PrimitiveError::ClassMismatch {
                kind: self.kind,
                class: self.mechanism_class,
            });
        }
        Ok(())
    }
}

impl BackendKind {
    /// The mechanism class this kind carries unless overridden.
    pub fn natural_class(&self) -> MechanismClass {
        match self {
            BackendKind::SimEvent => MechanismClass::Cooperation,
            _ => MechanismClass::Contention,
        }
    }
}

/// One timed observation of the primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencySample {
    pub start_us: Micros,
    pub end_us: Micros,
    /// Always `end_us - start_us`.
    pub latency_us: Micros,
    pub decoded_symbol: Option<usize>,
}

impl LatencySample {
    pub fn new(start_us: Micros, end_us: Micros) -> Self {
        LatencySample {
            start_us,
            end_us,
            latency_us: end_us - start_us,
            decoded_symbol: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for kind in BackendKind::ALL {
            assert_eq!(BackendKind::parse(kind.as_str()), Some(kind));
        }
        assert_eq!(BackendKind::parse("spinlock"), None);
    }

    #[test]
    fn descriptor_rejects_empty_name() {
        let desc = BackendDescriptor::new(BackendKind::SimLock, "");
        assert!(matches!(
            desc.validate(),
            Err(PrimitiveError::EmptyResourceName)
        ));
    }

    #[test]
    fn class_rules() {
        // A simulated event is cooperation-only.
        let mut desc = BackendDescriptor::new(BackendKind::SimEvent, "e1");
        assert_eq!(desc.mechanism_class, MechanismClass::Cooperation);
        desc.mechanism_class = MechanismClass::Contention;
        assert!(desc.validate().is_err());

        // Locks are contention-only.
        let mut desc = BackendDescriptor::new(BackendKind::SimLock, "l1");
        assert!(desc.validate().is_ok());
        desc.mechanism_class = MechanismClass::Cooperation;
        assert!(desc.validate().is_err());

        // A named semaphore may act as an event stand-in.
        let mut desc = BackendDescriptor::new(BackendKind::NamedSemaphore, "/s1");
        desc.fair_queueing = false;
        assert!(desc.validate().is_ok());
        desc.mechanism_class = MechanismClass::Cooperation;
        assert!(desc.validate().is_ok());
    }

    #[test]
    fn fair_queueing_is_sim_only() {
        let mut desc = BackendDescriptor::new(BackendKind::FileLock, "/tmp/x");
        assert!(!desc.fair_queueing, "real backends default to unfair");
        desc.fair_queueing = true;
        assert!(matches!(
            desc.validate(),
            Err(PrimitiveError::FairQueueingUnsupported(BackendKind::FileLock))
        ));
    }

    #[test]
    fn sample_latency_is_end_minus_start() {
        let s = LatencySample::new(100, 260);
        assert_eq!(s.latency_us, 160);
        assert_eq!(s.decoded_symbol, None);
    }
}

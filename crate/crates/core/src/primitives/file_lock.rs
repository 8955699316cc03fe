//! Advisory file-lock backend (`flock`).
//!
//! Each handle owns its own open file description, so two handles on the
//! same path contend even inside one process — which is what makes the
//! loopback tests below possible without forking.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::io::AsRawFd;
use std::path::Path;

use super::clock;
use super::{LatencySample, PrimitiveError};

/// One endpoint's handle on a shared advisory-locked file.
#[derive(Debug)]
pub struct FileLockBackend {
    file: File,
    path: String,
}

impl FileLockBackend {
    /// Opens (creating if absent) the lock file at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PrimitiveError> {
        let path = path.as_ref();
        let name = path.display().to_string();
        if name.is_empty() {
            return Err(PrimitiveError::EmptyResourceName);
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|source| PrimitiveError::Os {
                op: "open lock file",
                name: name.clone(),
                source,
            })?;
        Ok(FileLockBackend { file, path: name })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    fn flock(&self, operation: i32, op_name: &'static str) -> Result<(), PrimitiveError> {
        loop {
            let rc = unsafe { libc::flock(self.file.as_raw_fd(), operation) };
            if rc == 0 {
                return Ok(());
            }
            let err = io::Error::last_os_error();
            if err.raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return Err(PrimitiveError::Os {
                op: op_name,
                name: self.path.clone(),
                source: err,
            });
        }
    }

    /// Takes the exclusive lock, blocking until granted, and reports how
    /// long the wait was.
    pub fn acquire_blocking(&self) -> Result<LatencySample, PrimitiveError> {
        let start = clock::now_us();
        self.flock(libc::LOCK_EX, "acquire lock")?;
        let end = clock::now_us();
        Ok(LatencySample::new(start, end))
    }

    /// Attempts the exclusive lock without blocking; `Ok(false)` means the
    /// lock is currently held elsewhere.
    pub fn try_acquire(&self) -> Result<bool, PrimitiveError> {
        let rc = unsafe { libc::flock(self.file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc == 0 {
            return Ok(true);
        }
        let err = io::Error::last_os_error();
        match err.raw_os_error() {
            Some(libc::EWOULDBLOCK) => Ok(false),
            Some(libc::EINTR) => self.try_acquire(),
            _ => Err(PrimitiveError::Os {
                op: "try-acquire lock",
                name: self.path.clone(),
                source: err,
            }),
        }
    }

    pub fn release(&self) -> Result<(), PrimitiveError> {
        self.flock(libc::LOCK_UN, "release lock")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn two_handles_on_one_path_contend() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chan.lock");
        let a = FileLockBackend::open(&path).unwrap();
        let b = FileLockBackend::open(&path).unwrap();

        a.acquire_blocking().unwrap();
        assert!(!b.try_acquire().unwrap(), "held lock must refuse try-acquire");

        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            let sample = b.acquire_blocking().unwrap();
            b.release().unwrap();
            tx.send(sample).unwrap();
        });
        let hold = Duration::from_millis(30);
        thread::sleep(hold);
        a.release().unwrap();
        let sample = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        handle.join().unwrap();
        // The blocked acquire waited out most of the hold (scheduling slop
        // allowed, but it cannot have returned immediately).
        assert!(
            sample.latency_us >= 20_000,
            "blocked acquire returned after only {} us",
            sample.latency_us
        );
    }

    #[test]
    fn uncontended_acquire_is_fast_and_releases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("solo.lock");
        let lock = FileLockBackend::open(&path).unwrap();
        let sample = lock.acquire_blocking().unwrap();
        assert!(
            sample.latency_us < 100_000,
            "uncontended acquire took {} us",
            sample.latency_us
        );
        lock.release().unwrap();
        // Released lock is immediately available again.
        assert!(lock.try_acquire().unwrap());
        lock.release().unwrap();
    }

    #[test]
    fn empty_path_is_rejected() {
        assert!(matches!(
            FileLockBackend::open(""),
            Err(PrimitiveError::EmptyResourceName)
        ));
    }
}

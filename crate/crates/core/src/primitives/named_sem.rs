//! POSIX named-semaphore backend (`sem_open` family).
//!
//! A named semaphore reaches across processes through its slash-prefixed
//! name. Depending on how the channel drives it, it acts either as a
//! counting lock (contention) or as an event stand-in (cooperation).

use std::ffi::CString;
use std::io;

use super::clock;
use super::{LatencySample, Micros, PrimitiveError};

/// One endpoint's handle on a named counting semaphore.
#[derive(Debug)]
pub struct NamedSemaphore {
    sem: *mut libc::sem_t,
    name: String,
}

// The POSIX semaphore operations used here are async-signal- and
// thread-safe; the raw pointer is only ever handed to them.
unsafe impl Send for NamedSemaphore {}

fn sem_name(name: &str) -> Result<CString, PrimitiveError> {
    if name.is_empty() {
        return Err(PrimitiveError::EmptyResourceName);
    }
    let invalid = |msg: &str| PrimitiveError::Os {
        op: "validate semaphore name",
        name: name.to_string(),
        source: io::Error::new(io::ErrorKind::InvalidInput, msg.to_string()),
    };
    if !name.starts_with('/') || name.len() < 2 {
        return Err(invalid("name must be \"/\" followed by at least one character"));
    }
    if name[1..].contains('/') {
        return Err(invalid("name must not contain '/' after the first character"));
    }
    CString::new(name).map_err(|_| invalid("name must not contain NUL"))
}

impl NamedSemaphore {
    /// Opens the semaphore, creating it with `initial` tokens if it does not
    /// exist yet.
    pub fn create(name: &str, initial: u32) -> Result<Self, PrimitiveError> {
        let c_name = sem_name(name)?;
        let sem = unsafe {
            libc::sem_open(
                c_name.as_ptr(),
                libc::O_CREAT,
                libc::S_IRUSR | libc::S_IWUSR,
                initial,
            )
        };
        if sem == libc::SEM_FAILED {
            return Err(PrimitiveError::Os {
                op: "open semaphore",
                name: name.to_string(),
                source: io::Error::last_os_error(),
            });
        }
        Ok(NamedSemaphore {
            sem,
            name: name.to_string(),
        })
    }

    /// Opens an existing semaphore; fails if it has not been created.
    pub fn open(name: &str) -> Result<Self, PrimitiveError> {
        let c_name = sem_name(name)?;
        let sem = unsafe { libc::sem_open(c_name.as_ptr(), 0) };
        if sem == libc::SEM_FAILED {
            return Err(PrimitiveError::Os {
                op: "open semaphore",
                name: name.to_string(),
                source: io::Error::last_os_error(),
            });
        }
        Ok(NamedSemaphore {
            sem,
            name: name.to_string(),
        })
    }

    /// Removes the name from the system. Existing handles stay usable.
    pub fn unlink(name: &str) -> Result<(), PrimitiveError> {
        let c_name = sem_name(name)?;
        let rc = unsafe { libc::sem_unlink(c_name.as_ptr()) };
        if rc != 0 {
            let err = io::Error::last_os_error();
            if err.raw_os_error() != Some(libc::ENOENT) {
                return Err(PrimitiveError::Os {
                    op: "unlink semaphore",
                    name: name.to_string(),
                    source: err,
                });
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn os_err(&self, op: &'static str) -> PrimitiveError {
        PrimitiveError::Os {
            op,
            name: self.name.clone(),
            source: io::Error::last_os_error(),
        }
    }

    pub fn post(&self) -> Result<(), PrimitiveError> {
        let rc = unsafe { libc::sem_post(self.sem) };
        if rc != 0 {
            return Err(self.os_err("post semaphore"));
        }
        Ok(())
    }

    /// Decrements, blocking until a token is available; reports the wait.
    pub fn wait(&self) -> Result<LatencySample, PrimitiveError> {
        let start = clock::now_us();
        loop {
            let rc = unsafe { libc::sem_wait(self.sem) };
            if rc == 0 {
                return Ok(LatencySample::new(start, clock::now_us()));
            }
            let err = io::Error::last_os_error();
            if err.raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return Err(self.os_err("wait on semaphore"));
        }
    }

    /// Decrements without blocking; `Ok(None)` means no token was available.
    pub fn try_wait(&self) -> Result<Option<LatencySample>, PrimitiveError> {
        let start = clock::now_us();
        loop {
            let rc = unsafe { libc::sem_trywait(self.sem) };
            if rc == 0 {
                return Ok(Some(LatencySample::new(start, clock::now_us())));
            }
            let err = io::Error::last_os_error();
            match err.raw_os_error() {
                Some(libc::EAGAIN) => return Ok(None),
                Some(libc::EINTR) => continue,
                _ => return Err(self.os_err("try-wait on semaphore")),
            }
        }
    }

    /// Decrements, blocking for at most `timeout_us`; `Ok(None)` on timeout.
    pub fn timed_wait(&self, timeout_us: Micros) -> Result<Option<LatencySample>, PrimitiveError> {
        let start = clock::now_us();
        let mut deadline = libc::timespec {
            tv_sec: 0,
            tv_nsec: 0,
        };
        let rc = unsafe { libc::clock_gettime(libc::CLOCK_REALTIME, &mut deadline) };
        if rc != 0 {
            return Err(self.os_err("read realtime clock"));
        }
        deadline.tv_sec += (timeout_us / 1_000_000) as libc::time_t;
        deadline.tv_nsec += ((timeout_us % 1_000_000) * 1_000) as libc::c_long;
        if deadline.tv_nsec >= 1_000_000_000 {
            deadline.tv_sec += 1;
            deadline.tv_nsec -= 1_000_000_000;
        }
        loop {
            let rc = unsafe { libc::sem_timedwait(self.sem, &deadline) };
            if rc == 0 {
                return Ok(Some(LatencySample::new(start, clock::now_us())));
            }
            let err = io::Error::last_os_error();
            match err.raw_os_error() {
                Some(libc::ETIMEDOUT) => return Ok(None),
                Some(libc::EINTR) => continue,
                _ => return Err(self.os_err("timed wait on semaphore")),
            }
        }
    }

    /// Current token count (clamped at zero on platforms that report
    /// negative values for queued waiters).
    pub fn value(&self) -> Result<u64, PrimitiveError> {
        let mut v: libc::c_int = 0;
        let rc = unsafe { libc::sem_getvalue(self.sem, &mut v) };
        if rc != 0 {
            return Err(self.os_err("read semaphore value"));
        }
        Ok(v.max(0) as u64)
    }
}

impl Drop for NamedSemaphore {
    fn drop(&mut self) {
        unsafe {
            libc::sem_close(self.sem);
        }
    }
}

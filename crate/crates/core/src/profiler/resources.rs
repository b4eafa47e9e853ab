use std::fs;

use serde::{Deserialize, Serialize};

/// Process CPU time and I/O byte counters; `None` where the host has no accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    pub cpu_seconds: Option<f64>,
    pub bytes_read: Option<u64>,
    pub bytes_written: Option<u64>,
}

impl ResourceSnapshot {
    /// Non-negative change since `earlier`.
    pub fn since(&self, earlier: &ResourceSnapshot) -> ResourceSnapshot {
        ResourceSnapshot {
            cpu_seconds: self
                .cpu_seconds
                .zip(earlier.cpu_seconds)
                .map(|(a, b)| (a - b).max(0.0)),
            bytes_read: self.bytes_read.zip(earlier.bytes_read).map(|(a, b)| a.saturating_sub(b)),
            bytes_written: self
                .bytes_written
                .zip(earlier.bytes_written)
                .map(|(a, b)| a.saturating_sub(b)),
        }
    }
}

pub fn resource_snapshot() -> ResourceSnapshot {
    let (bytes_read, bytes_written) = io_counters();
    ResourceSnapshot {
        cpu_seconds: cpu_seconds(),
        bytes_read,
        bytes_written,
    }
}

fn cpu_seconds() -> Option<f64> {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage fills the struct it is given; RUSAGE_SELF is always valid.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        log::warn!("getrusage failed; CPU time unavailable");
        return None;
    }
    // SAFETY: rc == 0 means the struct was initialized.
    let u = unsafe { usage.assume_init() };
    let secs = |tv: libc::timeval| tv.tv_sec as f64 + tv.tv_usec as f64 * 1e-6;
    Some(secs(u.ru_utime) + secs(u.ru_stime))
}

/// `rchar`/`wchar` from `/proc/self/io`: bytes passed through read/write calls.
fn io_counters() -> (Option<u64>, Option<u64>) {
    let Ok(text) = fs::read_to_string("/proc/self/io") else {
        return (None, None);
    };
    let field = |name: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(name))
            .and_then(|v| v.trim().parse().ok())
    };
    (field("rchar:"), field("wchar:"))
}

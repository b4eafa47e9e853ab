//! Step and epoch indicators: time, FLOPs, memory, power and energy, CPU
//! time and disk traffic.

mod metrics;
mod power;
mod resources;
#[cfg(test)]
mod tests;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use metrics::{EpochMetrics, StepMetrics};
pub use power::{
    counter_delta, parse_trace, AffinePower, ConstantPower, PlatformPower, PowerConfig, PowerSource, TracePower,
    Unavailable, DEFAULT_COUNTER_MODULUS_UJ, DEFAULT_COUNTER_PATH, FALLBACK_WATTS,
};
pub use resources::{resource_snapshot, ResourceSnapshot};

use crate::error::{Error, Result};

/// Default sampling period of the background power sampler.
pub const DEFAULT_SAMPLE_PERIOD: Duration = Duration::from_millis(100);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since the run started.
    pub t: f64,
    pub watts: f64,
}

/// Run-relative time source.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(Mutex<f64>);

impl ManualClock {
    pub fn new(t: f64) -> Self {
        Self(Mutex::new(t))
    }

    pub fn set(&self, t: f64) {
        *self.0.lock().expect("clock lock") = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.0.lock().expect("clock lock") += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().expect("clock lock")
    }
}

/// Trapezoidal integral of power over time, in joules.
pub fn energy_integrate(samples: &[PowerSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Profiler(format!("need at least 2 power samples, got {}", samples.len())));
    }
    let mut joules = 0.0;
    for w in samples.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.watts < 0.0 || b.watts < 0.0 || !a.watts.is_finite() || !b.watts.is_finite() {
            return Err(Error::Profiler("power samples must be finite and non-negative".into()));
        }
        if b.t <= a.t {
            return Err(Error::Profiler(format!("sample times must increase: {} then {}", a.t, b.t)));
        }
        joules += 0.5 * (a.watts + b.watts) * (b.t - a.t);
    }
    Ok(joules)
}

struct Shared {
    source: Mutex<Box<dyn PowerSource>>,
    clock: Arc<dyn Clock>,
    log: Mutex<Vec<PowerSample>>,
    unavailable: AtomicBool,
}

impl Shared {
    fn sample(&self) -> f64 {
        let mut source = self.source.lock().expect("power source lock");
        let t = self.clock.now();
        match source.read(t) {
            Some(w) if w.is_finite() && w >= 0.0 => {
                let mut log = self.log.lock().expect("sample log lock");
                if log.last().map_or(true, |last| t > last.t) {
                    log.push(PowerSample { t, watts: w });
                }
            }
            _ => self.unavailable.store(true, Ordering::Relaxed),
        }
        t
    }
}

/// Owns a power source, an append-only sample log and the sampler thread.
pub struct PowerMonitor {
    shared: Arc<Shared>,
    description: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    /// Cumulative FLOPs of the run, read by FLOP-driven power models.
    pub flops: Arc<AtomicU64>,
}

impl PowerMonitor {
    pub fn new(config: &PowerConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let flops = Arc::new(AtomicU64::new(0));
        let source = config.build(flops.clone())?;
        Ok(Self::with_source(source, clock, flops))
    }

    pub fn with_source(mut source: Box<dyn PowerSource>, clock: Arc<dyn Clock>, flops: Arc<AtomicU64>) -> Self {
        source.prime(clock.now());
        let description = source.describe();
        Self {
            shared: Arc::new(Shared {
                source: Mutex::new(source),
                clock,
                log: Mutex::new(Vec::new()),
                unavailable: AtomicBool::new(false),
            }),
            description,
            stop: Arc::new(AtomicBool::new(false)),
            handle: None,
            flops,
        }
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn now(&self) -> f64 {
        self.shared.clock.now()
    }

    /// Starts background sampling every `period`.
    pub fn start(&mut self, period: Duration) {
        if self.handle.is_some() {
            return;
        }
        self.stop.store(false, Ordering::Relaxed);
        let (shared, stop) = (self.shared.clone(), self.stop.clone());
        self.handle = Some(std::thread::spawn(move || {
            let tick = Duration::from_millis(5).min(period);
            let mut next = Instant::now() + period;
            while !stop.load(Ordering::Relaxed) {
                std::thread::sleep(tick);
                if Instant::now() >= next {
                    shared.sample();
                    next += period;
                }
            }
        }));
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    /// Takes one sample synchronously and returns its timestamp.
    pub fn sample_now(&self) -> f64 {
        self.shared.sample()
    }

    pub fn available(&self) -> bool {
        !self.shared.unavailable.load(Ordering::Relaxed)
    }

    pub fn samples(&self) -> Vec<PowerSample> {
        self.shared.log.lock().expect("sample log lock").clone()
    }

    /// Joules over `[t0, t1]`, both of which must be sample times.
    /// `None` when the source failed at any point.
    pub fn energy_between(&self, t0: f64, t1: f64) -> Option<f64> {
        if !self.available() {
            return None;
        }
        let window: Vec<PowerSample> = self
            .samples()
            .into_iter()
            .filter(|s| s.t >= t0 && s.t <= t1)
            .collect();
        energy_integrate(&window).ok()
    }
}

impl Drop for PowerMonitor {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Ratio of the fastest timed `workload` run with the sampler active to the
/// fastest without it. Values near 1 mean negligible overhead.
pub fn sampler_overhead<F: FnMut()>(mut workload: F, reps: usize, period: Duration) -> f64 {
    let mut best = |monitor: Option<&mut PowerMonitor>| {
        if let Some(m) = monitor {
            m.start(period);
        }
        (0..reps.max(1))
            .map(|_| {
                let t = Instant::now();
                workload();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let plain = best(None);
    let mut monitor = PowerMonitor::with_source(
        Box::new(ConstantPower(FALLBACK_WATTS)),
        Arc::new(MonotonicClock::new()),
        Arc::new(AtomicU64::new(0)),
    );
    let sampled = best(Some(&mut monitor));
    monitor.stop();
    sampled / plain
}

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PowerSample;
use crate::error::{Error, Result};

/// Default platform counter (Linux powercap, package domain).
pub const DEFAULT_COUNTER_PATH: &str = "/sys/class/powercap/intel-rapl:0/energy_uj";
/// Wraparound modulus used when the counter directory has no `max_energy_range_uj`.
pub const DEFAULT_COUNTER_MODULUS_UJ: u64 = 1 << 32;
/// Watts of the synthetic fallback used by `auto`.
pub const FALLBACK_WATTS: f64 = 250.0;

/// Anything that can report instantaneous watts at a run-relative time.
pub trait PowerSource: Send {
    /// `None` when the source cannot produce a reading.
    fn read(&mut self, t: f64) -> Option<f64>;

    /// Establishes a baseline before the first sample.
    fn prime(&mut self, _t: f64) {}

    fn describe(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PowerConfig {
    Constant { watts: f64 },
    Affine { a: f64, b: f64 },
    File { path: PathBuf },
    Platform { path: Option<PathBuf> },
    /// Platform counter, then the trace file if given, then constant 250 W.
    Auto { file: Option<PathBuf> },
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig::Constant { watts: FALLBACK_WATTS }
    }
}

impl FromStr for PowerConfig {
    type Err = Error;

    /// `constant:W`, `affine:a,b`, `file:PATH`, `platform[:PATH]`, `auto[:PATH]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |v: &str| -> Result<f64> {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid number {v:?} in power spec {s:?}")))?;
            if x.is_finite() && x >= 0.0 {
                Ok(x)
            } else {
                Err(Error::Config(format!("power parameters must be non-negative, got {v}")))
            }
        };
        match (kind, arg) {
            ("constant", Some(w)) => Ok(PowerConfig::Constant { watts: num(w)? }),
            ("affine", Some(ab)) => {
                let (a, b) = ab
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("affine power needs a,b: {s:?}")))?;
                Ok(PowerConfig::Affine { a: num(a)?, b: num(b)? })
            }
            ("file", Some(p)) if !p.is_empty() => Ok(PowerConfig::File { path: p.into() }),
            ("platform", p) => Ok(PowerConfig::Platform {
                path: p.filter(|p| !p.is_empty()).map(PathBuf::from),
            }),
            ("auto", p) => Ok(PowerConfig::Auto {
                file: p.filter(|p| !p.is_empty()).map(PathBuf::from),
            }),
            _ => Err(Error::Config(format!(
                "unknown power source {s:?}; expected platform[:PATH], file:PATH, constant:W, affine:a,b or auto[:PATH]"
            ))),
        }
    }
}

impl fmt::Display for PowerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PowerConfig::Constant { watts } => write!(f, "constant:{watts}"),
            PowerConfig::Affine { a, b } => write!(f, "affine:{a},{b}"),
            PowerConfig::File { path } => write!(f, "file:{}", path.display()),
            PowerConfig::Platform { path: None } => f.write_str("platform"),
            PowerConfig::Platform { path: Some(p) } => write!(f, "platform:{}", p.display()),
            PowerConfig::Auto { file: None } => f.write_str("auto"),
            PowerConfig::Auto { file: Some(p) } => write!(f, "auto:{}", p.display()),
        }
    }
}

impl PowerConfig {
    /// Builds the source. `flops` is the run's cumulative FLOP counter, read
    /// by the affine model.
    pub fn build(&self, flops: Arc<AtomicU64>) -> Result<Box<dyn PowerSource>> {
        Ok(match self {
            PowerConfig::Constant { watts } => Box::new(ConstantPower(*watts)),
            PowerConfig::Affine { a, b } => Box::new(AffinePower::new(*a, *b, flops)),
            PowerConfig::File { path } => Box::new(TracePower::from_file(path)?),
            PowerConfig::Platform { path } => {
                let path = path.clone().unwrap_or_else(|| DEFAULT_COUNTER_PATH.into());
                match PlatformPower::open(&path) {
                    Ok(p) => Box::new(p),
                    Err(e) => {
                        log::warn!("power counter {} unavailable ({e}); energy will be reported as null", path.display());
                        Box::new(Unavailable(path.display().to_string()))
                    }
                }
            }
            PowerConfig::Auto { file } => {
                if let Ok(p) = PlatformPower::open(Path::new(DEFAULT_COUNTER_PATH)) {
                    return Ok(Box::new(p));
                }
                if let Some(path) = file {
                    match TracePower::from_file(path) {
                        Ok(t) => return Ok(Box::new(t)),
                        Err(e) => log::warn!("power trace {} unusable ({e})", path.display()),
                    }
                }
                log::warn!("no platform power counter; using synthetic constant {FALLBACK_WATTS} W");
                Box::new(ConstantPower(FALLBACK_WATTS))
            }
        })
    }
}

pub struct ConstantPower(pub f64);

impl PowerSource for ConstantPower {
    fn read(&mut self, _t: f64) -> Option<f64> {
        Some(self.0)
    }

    fn describe(&self) -> String {
        format!("constant:{}", self.0)
    }
}

/// `a + b · FLOP/s`, the rate taken over the interval since the previous read.
pub struct AffinePower {
    a: f64,
    b: f64,
    flops: Arc<AtomicU64>,
    last: Option<(f64, u64)>,
    rate: f64,
}

impl AffinePower {
    pub fn new(a: f64, b: f64, flops: Arc<AtomicU64>) -> Self {
        Self {
            a,
            b,
            flops,
            last: None,
            rate: 0.0,
        }
    }
}

impl PowerSource for AffinePower {
    fn read(&mut self, t: f64) -> Option<f64> {
        let now = self.flops.load(Ordering::Relaxed);
        if let Some((t0, f0)) = self.last {
            if t > t0 {
                self.rate = now.saturating_sub(f0) as f64 / (t - t0);
            }
        }
        self.last = Some((t, now));
        Some(self.a + self.b * self.rate)
    }

    fn prime(&mut self, t: f64) {
        self.last = Some((t, self.flops.load(Ordering::Relaxed)));
    }

    fn describe(&self) -> String {
        format!("affine:{},{}", self.a, self.b)
    }
}

/// Replays a `t_seconds,watts` trace, interpolating linearly and holding the
/// end values outside it.
pub struct TracePower {
    label: String,
    samples: Vec<PowerSample>,
}

impl TracePower {
    pub fn new(samples: Vec<PowerSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Profiler("power trace has no samples".into()));
        }
        Ok(Self {
            label: "trace".into(),
            samples,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let samples = parse_trace(&text, path)?;
        Ok(Self {
            label: format!("file:{}", path.display()),
            samples,
        })
    }

    pub fn at(&self, t: f64) -> f64 {
        let s = &self.samples;
        let i = s.partition_point(|p| p.t <= t);
        if i == 0 {
            return s[0].watts;
        }
        if i == s.len() {
            return s[s.len() - 1].watts;
        }
        let (a, b) = (s[i - 1], s[i]);
        a.watts + (b.watts - a.watts) * (t - a.t) / (b.t - a.t)
    }
}

impl PowerSource for TracePower {
    fn read(&mut self, t: f64) -> Option<f64> {
        Some(self.at(t))
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Parses a trace CSV with a `t_seconds,watts` header.
pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<PowerSample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "t_seconds" || &headers[1] != "watts" {
        return Err(err(1, format!("expected header t_seconds,watts, found {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut samples: Vec<PowerSample> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(err(line, format!("expected 2 fields, found {}", record.len())));
        }
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("invalid number {:?}", &record[i])))
        };
        let (t, watts) = (parse(0)?, parse(1)?);
        if watts < 0.0 {
            return Err(err(line, format!("negative watts {watts}")));
        }
        if let Some(prev) = samples.last() {
            if t <= prev.t {
                return Err(err(line, format!("time {t} does not increase past {}", prev.t)));
            }
        }
        samples.push(PowerSample { t, watts });
    }
    if samples.is_empty() {
        return Err(err(1, "no samples after the header".into()));
    }
    Ok(samples)
}

/// Cumulative-microjoule counter; watts come from successive differences.
pub struct PlatformPower {
    path: PathBuf,
    modulus: u64,
    last: Option<(f64, u64)>,
    watts: f64,
}

impl PlatformPower {
    /// Opens the counter; the modulus comes from a sibling
    /// `max_energy_range_uj` file when present.
    pub fn open(path: &Path) -> Result<Self> {
        read_counter(path)?;
        let modulus = path
            .parent()
            .map(|d| d.join("max_energy_range_uj"))
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|s| s.trim().parse::<u64>().ok())
            .map(|m| m.saturating_add(1))
            .unwrap_or(DEFAULT_COUNTER_MODULUS_UJ);
        Ok(Self::with_modulus(path, modulus))
    }

    pub fn with_modulus(path: &Path, modulus: u64) -> Self {
        Self {
            path: path.to_path_buf(),
            modulus,
            last: None,
            watts: 0.0,
        }
    }
}

/// Energy in µJ between two readings of a counter that wraps at `modulus`.
pub fn counter_delta(prev: u64, now: u64, modulus: u64) -> u64 {
    if now >= prev {
        now - prev
    } else {
        modulus - prev + now
    }
}

fn read_counter(path: &Path) -> Result<u64> {
    let s = fs::read_to_string(path)?;
    s.trim()
        .parse()
        .map_err(|_| Error::Profiler(format!("{}: not a microjoule counter: {s:?}", path.display())))
}

impl PowerSource for PlatformPower {
    fn read(&mut self, t: f64) -> Option<f64> {
        let now = match read_counter(&self.path) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("power counter read failed: {e}");
                return None;
            }
        };
        if let Some((t0, prev)) = self.last {
            if t > t0 {
                self.watts = counter_delta(prev, now, self.modulus) as f64 / 1e6 / (t - t0);
            }
        }
        self.last = Some((t, now));
        Some(self.watts)
    }

    fn prime(&mut self, t: f64) {
        if let Ok(now) = read_counter(&self.path) {
            self.last = Some((t, now));
        }
    }

    fn describe(&self) -> String {
        format!("platform:{}", self.path.display())
    }
}

/// Placeholder for a counter that could not be opened.
pub struct Unavailable(pub String);

impl PowerSource for Unavailable {
    fn read(&mut self, _t: f64) -> Option<f64> {
        None
    }

    fn describe(&self) -> String {
        format!("unavailable:{}", self.0)
    }
}

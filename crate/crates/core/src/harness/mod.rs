//! Experiment driver: trains every requested variant under one schedule,
//! collects the profiler indicators and writes the report tables.

mod config;
mod report;
mod verify;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::apply_config_file;
pub use report::{
    emit_figure_tables, load_report, rank_variants, render_summary, save_report, write_outputs, RankKey, Ranked,
    FIGURE_FILES,
};
pub use verify::{verify_invariants, Check};

use crate::attention::Variant;
use crate::data::{load_documents, Batcher, CorpusStats, DataSource, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{init_model, AdamW, AdamWConfig, ModelConfig, ModelState};
use crate::profiler::{resource_snapshot, EpochMetrics, MonotonicClock, PowerConfig, PowerMonitor, DEFAULT_SAMPLE_PERIOD};

/// Everything that defines one benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Architecture shared by all variants; its variant field is replaced per run.
    pub model: ModelConfig,
    pub variants: Vec<Variant>,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub data: DataSource,
    pub power: PowerConfig,
    pub sample_period_ms: u64,
    /// Timed gradient-free forward passes per variant after training.
    pub inference_reps: usize,
    pub out_dir: Option<PathBuf>,
}

impl RunSpec {
    /// 2 layers, width 128, 5 epochs of 40 batches of 16 × 128 tokens.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(Variant::Baseline),
            variants: Variant::ALL.to_vec(),
            epochs: 5,
            batches_per_epoch: 40,
            batch_size: 16,
            seq_len: 128,
            seed: 0,
            data: DataSource::Synth,
            power: PowerConfig::default(),
            sample_period_ms: DEFAULT_SAMPLE_PERIOD.as_millis() as u64,
            inference_reps: 10,
            out_dir: None,
        }
    }

    /// GPT-2 small, 20 epochs of 400 batches of 16 × 512 tokens.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(Variant::Baseline),
            epochs: 20,
            batches_per_epoch: 400,
            seq_len: 512,
            ..Self::desk()
        }
    }

    /// Sets the sequence length and the positional table size together.
    pub fn set_seq_len(&mut self, n: usize) {
        self.seq_len = n;
        self.model.max_seq_len = n;
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let mut c = self.model.with_variant(variant);
        c.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batches", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("inference_reps", self.inference_reps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.sample_period_ms == 0 {
            return Err(Error::Config("sample_period_ms must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if self.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, self.model.max_seq_len
            )));
        }
        for &v in &self.variants {
            self.model_config(v).validate()?;
        }
        Ok(())
    }
}

/// Median of ten-or-so timed inference calls with spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub samples: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    /// Median absolute deviation from the median.
    pub mad_seconds: f64,
    pub peak_bytes: u64,
    pub flops: u64,
}

impl InferenceTiming {
    pub fn from_samples(times: &[f64], peak_bytes: u64, flops: u64) -> Self {
        let median = median(times);
        let dev: Vec<f64> = times.iter().map(|t| (t - median).abs()).collect();
        Self {
            samples: times.len(),
            mean_seconds: times.iter().sum::<f64>() / times.len().max(1) as f64,
            median_seconds: median,
            mad_seconds: median_of(dev),
            peak_bytes,
            flops,
        }
    }
}

fn median(xs: &[f64]) -> f64 {
    median_of(xs.to_vec())
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub failed: bool,
    pub error: Option<String>,
    pub config: ModelConfig,
    pub epochs: Vec<EpochMetrics>,
    /// Loss of every optimizer step in order.
    pub loss_curve: Vec<f64>,
    pub total_energy_joules: Option<f64>,
    pub mean_watts: Option<f64>,
    pub total_wall_seconds: f64,
    pub total_cpu_seconds: Option<f64>,
    pub total_disk_bytes_read: Option<u64>,
    pub total_disk_bytes_written: Option<u64>,
    pub param_count: u64,
    pub model_size_bytes: u64,
    pub kv_cache_bytes_per_token: u64,
    pub total_flops: u64,
    pub forward_flops_per_step: f64,
    pub backward_flops_per_step: f64,
    pub attention_flops_per_step: f64,
    /// Highest per-step tape high-water mark.
    pub peak_bytes: u64,
    pub optimizer_state_bytes: u64,
    pub inference: Option<InferenceTiming>,
    /// SHA-256 of every training batch this variant consumed.
    pub batch_stream_sha256: String,
}

impl VariantReport {
    fn empty(variant: Variant, config: ModelConfig) -> Self {
        Self {
            variant,
            failed: false,
            error: None,
            param_count: config.param_count() as u64,
            model_size_bytes: config.size_bytes() as u64,
            kv_cache_bytes_per_token: config.attention.kv_cache_bytes_per_token() as u64,
            config,
            epochs: Vec::new(),
            loss_curve: Vec::new(),
            total_energy_joules: None,
            mean_watts: None,
            total_wall_seconds: 0.0,
            total_cpu_seconds: None,
            total_disk_bytes_read: None,
            total_disk_bytes_written: None,
            total_flops: 0,
            forward_flops_per_step: 0.0,
            backward_flops_per_step: 0.0,
            attention_flops_per_step: 0.0,
            peak_bytes: 0,
            optimizer_state_bytes: 0,
            inference: None,
            batch_stream_sha256: String::new(),
        }
    }

    /// Recomputes the run totals from the epoch series.
    fn finish_totals(&mut self) {
        let e = &self.epochs;
        self.total_wall_seconds = e.iter().map(|m| m.wall_seconds).sum();
        self.total_flops = e.iter().map(|m| m.flops).sum();
        self.peak_bytes = e.iter().map(|m| m.peak_bytes).max().unwrap_or(0);
        self.total_energy_joules = e.iter().map(|m| m.energy_joules).sum();
        self.total_cpu_seconds = e.iter().map(|m| m.cpu_process_seconds).sum();
        self.total_disk_bytes_read = e.iter().map(|m| m.disk_bytes_read).sum();
        self.total_disk_bytes_written = e.iter().map(|m| m.disk_bytes_written).sum();
        self.mean_watts = self
            .total_energy_joules
            .filter(|_| self.total_wall_seconds > 0.0)
            .map(|j| j / self.total_wall_seconds);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub host: String,
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    /// Smallest observable step of the monotonic clock.
    pub clock_resolution_seconds: f64,
    pub power_source: String,
    pub power_available: bool,
    pub seed: u64,
    pub version: String,
}

impl Environment {
    fn probe(power_source: String, power_available: bool, seed: u64) -> Self {
        let host = std::fs::read_to_string("/proc/sys/kernel/hostname")
            .map(|s| s.trim().to_string())
            .ok()
            .or_else(|| std::env::var("HOSTNAME").ok())
            .unwrap_or_else(|| "unknown".into());
        Self {
            host,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            clock_resolution_seconds: clock_resolution(),
            power_source,
            power_available,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

fn clock_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64());
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: u32,
    pub spec: RunSpec,
    pub environment: Environment,
    pub corpus: CorpusStats,
    pub variants: Vec<VariantReport>,
}

pub const REPORT_FORMAT: u32 = 1;

impl RunReport {
    pub fn any_failed(&self) -> bool {
        self.variants.iter().any(|v| v.failed)
    }

    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn hash_batch(h: &mut Sha256, b: &TokenBatch) {
    h.update((b.batch_size as u64).to_le_bytes());
    h.update((b.seq_len as u64).to_le_bytes());
    for &id in &b.ids {
        h.update((id as u32).to_le_bytes());
    }
}

/// Runs every variant of `spec` in order, one at a time. A failing variant is
/// recorded and the run moves on. Outputs are written when `spec.out_dir` is set.
pub fn run_benchmark(spec: &RunSpec) -> Result<RunReport> {
    spec.validate()?;
    let mut corpus = CorpusStats::default();
    let docs = load_documents(&spec.data, spec.seed, &mut corpus)?;
    let batcher = Batcher::new(&docs, spec.batch_size, spec.seq_len, spec.seed)?;
    drop(docs);

    let mut monitor = PowerMonitor::new(&spec.power, Arc::new(MonotonicClock::new()))?;
    monitor.sample_now();
    monitor.start(Duration::from_millis(spec.sample_period_ms));

    let mut variants = Vec::with_capacity(spec.variants.len());
    for &variant in &spec.variants {
        log::info!("training {variant}");
        let config = spec.model_config(variant);
        let mut report = VariantReport::empty(variant, config.clone());
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            run_variant(spec, &config, batcher.clone(), &monitor, &mut report)
        }));
        let error = match outcome {
            Ok(Ok(())) => None,
            Ok(Err(e)) => Some(e.to_string()),
            Err(panic) => Some(
                panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        if let Some(e) = error {
            log::error!("{variant} failed: {e}");
            report.failed = true;
            report.error = Some(e);
        }
        report.finish_totals();
        variants.push(report);
    }
    monitor.stop();
    corpus.tokens = variants
        .iter()
        .flat_map(|v| &v.epochs)
        .map(|e| e.tokens)
        .sum();

    let report = RunReport {
        format: REPORT_FORMAT,
        spec: spec.clone(),
        environment: Environment::probe(monitor.description().to_string(), monitor.available(), spec.seed),
        corpus,
        variants,
    };
    if let Some(dir) = &spec.out_dir {
        write_outputs(&report, dir)?;
    }
    Ok(report)
}

fn run_variant(
    spec: &RunSpec,
    config: &ModelConfig,
    mut batcher: Batcher,
    monitor: &PowerMonitor,
    report: &mut VariantReport,
) -> Result<()> {
    let mut state: ModelState<f32> = init_model(config)?;
    let mut opt = AdamW::new(AdamWConfig::default(), state.params().into_iter().map(|(_, t)| t));
    report.optimizer_state_bytes = opt.state_bytes() as u64;
    let mut hasher = Sha256::new();
    let mut eval_batch = None;
    let (mut fwd, mut bwd, mut attn, mut steps) = (0u64, 0u64, 0u64, 0u64);

    for epoch in 1..=spec.epochs {
        let res0 = resource_snapshot();
        let t0 = monitor.sample_now();
        let mut m = EpochMetrics {
            epoch,
            ..Default::default()
        };
        let mut loss_sum = 0.0;
        for _ in 0..spec.batches_per_epoch {
            let batch = batcher.next_batch();
            hash_batch(&mut hasher, &batch);
            let s = state.train_step(&mut opt, &batch.ids, batch.batch_size)?;
            if !s.loss.is_finite() {
                return Err(Error::NonFinite { op: "train_step" });
            }
            monitor.flops.fetch_add(s.flops(), Ordering::Relaxed);
            report.loss_curve.push(s.loss);
            loss_sum += s.loss;
            m.steps += 1;
            m.flops += s.flops();
            m.tokens += s.tokens;
            m.peak_bytes = m.peak_bytes.max(s.peak_bytes);
            fwd += s.forward_flops;
            bwd += s.backward_flops;
            attn += s.attention_flops;
            steps += 1;
            eval_batch.get_or_insert(batch);
        }
        let t1 = monitor.sample_now();
        let res = resource_snapshot().since(&res0);
        m.wall_seconds = t1 - t0;
        m.mean_loss = loss_sum / m.steps as f64;
        m.energy_joules = monitor.energy_between(t0, t1);
        m.mean_watts = m.energy_joules.filter(|_| m.wall_seconds > 0.0).map(|j| j / m.wall_seconds);
        m.cpu_process_seconds = res.cpu_seconds;
        m.disk_bytes_read = res.bytes_read;
        m.disk_bytes_written = res.bytes_written;
        log::info!("{} epoch {epoch}: loss {:.4} in {:.2}s", config.variant(), m.mean_loss, m.wall_seconds);
        report.epochs.push(m);
    }
    let n = steps.max(1) as f64;
    report.forward_flops_per_step = fwd as f64 / n;
    report.backward_flops_per_step = bwd as f64 / n;
    report.attention_flops_per_step = attn as f64 / n;
    report.batch_stream_sha256 = hex(&hasher.finalize());

    let batch = eval_batch.ok_or_else(|| Error::Data("no batches consumed".into()))?;
    let mut times = Vec::with_capacity(spec.inference_reps);
    let (mut peak, mut flops) = (0, 0);
    for _ in 0..spec.inference_reps {
        let inf = state.inference_forward(&batch.ids, batch.batch_size)?;
        times.push(inf.wall_seconds);
        peak = inf.peak_bytes;
        flops = inf.flops;
    }
    report.inference = Some(InferenceTiming::from_samples(&times, peak, flops));
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

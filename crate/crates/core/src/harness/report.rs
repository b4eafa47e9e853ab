//! Report persistence, figure tables and rankings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{RunReport, VariantReport, REPORT_FORMAT};
use crate::attention::Variant;
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.md";

pub const FIGURE_FILES: [&str; 8] = [
    "fig1_epoch_time.csv",
    "fig2_power.csv",
    "fig3_total_energy.csv",
    "fig4_loss.csv",
    "fig5_model_size.csv",
    "fig6_flops.csv",
    "fig7_memory.csv",
    "fig8_inference.csv",
];

pub fn save_report(report: &RunReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let report: RunReport = serde_json::from_str(&fs::read_to_string(path)?)?;
    if report.format != REPORT_FORMAT {
        return Err(Error::Config(format!(
            "report format {} is not supported (expected {REPORT_FORMAT})",
            report.format
        )));
    }
    Ok(report)
}

/// Writes `report.json`, the eight figure tables and `summary.md` into `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_report(report, &dir.join(REPORT_FILE))?;
    emit_figure_tables(report, dir)?;
    fs::write(dir.join(SUMMARY_FILE), render_summary(report))?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn table(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn per_epoch<F>(report: &RunReport, f: F) -> Vec<Vec<String>>
where
    F: Fn(&VariantReport, &crate::profiler::EpochMetrics) -> Vec<String>,
{
    report
        .variants
        .iter()
        .flat_map(|v| v.epochs.iter().map(move |e| (v, e)))
        .map(|(v, e)| {
            let mut row = vec![v.variant.to_string(), e.epoch.to_string()];
            row.extend(f(v, e));
            row
        })
        .collect()
}

fn per_variant<F>(report: &RunReport, f: F) -> Vec<Vec<String>>
where
    F: Fn(&VariantReport) -> Vec<String>,
{
    report
        .variants
        .iter()
        .map(|v| {
            let mut row = vec![v.variant.to_string()];
            row.extend(f(v));
            row
        })
        .collect()
}

/// The eight figure tables. A pure function of `report`; missing values are empty fields.
pub fn emit_figure_tables(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [f1, f2, f3, f4, f5, f6, f7, f8] = FIGURE_FILES;
    table(
        dir,
        f1,
        &["variant", "epoch", "wall_seconds", "cpu_process_seconds"],
        per_epoch(report, |_, e| vec![e.wall_seconds.to_string(), opt(e.cpu_process_seconds)]),
    )?;
    table(
        dir,
        f2,
        &["variant", "epoch", "mean_watts", "energy_joules"],
        per_epoch(report, |_, e| vec![opt(e.mean_watts), opt(e.energy_joules)]),
    )?;
    table(
        dir,
        f3,
        &["variant", "total_energy_joules", "total_wall_seconds", "mean_watts"],
        per_variant(report, |v| {
            vec![opt(v.total_energy_joules), v.total_wall_seconds.to_string(), opt(v.mean_watts)]
        }),
    )?;
    table(
        dir,
        f4,
        &["variant", "epoch", "mean_loss"],
        per_epoch(report, |_, e| vec![e.mean_loss.to_string()]),
    )?;
    table(
        dir,
        f5,
        &["variant", "param_count", "model_size_bytes", "model_size_mb"],
        per_variant(report, |v| {
            vec![
                v.param_count.to_string(),
                v.model_size_bytes.to_string(),
                (v.model_size_bytes as f64 / 1e6).to_string(),
            ]
        }),
    )?;
    table(
        dir,
        f6,
        &[
            "variant",
            "forward_flops_per_step",
            "backward_flops_per_step",
            "flops_per_step",
            "attention_flops_per_step",
            "total_flops",
        ],
        per_variant(report, |v| {
            vec![
                v.forward_flops_per_step.to_string(),
                v.backward_flops_per_step.to_string(),
                (v.forward_flops_per_step + v.backward_flops_per_step).to_string(),
                v.attention_flops_per_step.to_string(),
                v.total_flops.to_string(),
            ]
        }),
    )?;
    table(
        dir,
        f7,
        &[
            "variant",
            "train_peak_bytes",
            "inference_peak_bytes",
            "optimizer_state_bytes",
            "kv_cache_bytes_per_token",
        ],
        per_variant(report, |v| {
            vec![
                v.peak_bytes.to_string(),
                opt(v.inference.as_ref().map(|i| i.peak_bytes)),
                v.optimizer_state_bytes.to_string(),
                v.kv_cache_bytes_per_token.to_string(),
            ]
        }),
    )?;
    table(
        dir,
        f8,
        &["variant", "samples", "mean_seconds", "median_seconds", "mad_seconds"],
        per_variant(report, |v| match &v.inference {
            Some(i) => vec![
                i.samples.to_string(),
                i.mean_seconds.to_string(),
                i.median_seconds.to_string(),
                i.mad_seconds.to_string(),
            ],
            None => vec![String::new(); 4],
        }),
    )?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    TotalEnergy,
    WallTime,
    PeakBytes,
    Flops,
    InferenceTime,
}

impl RankKey {
    pub const ALL: [RankKey; 5] = [
        RankKey::TotalEnergy,
        RankKey::WallTime,
        RankKey::PeakBytes,
        RankKey::Flops,
        RankKey::InferenceTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RankKey::TotalEnergy => "total_energy",
            RankKey::WallTime => "wall_time",
            RankKey::PeakBytes => "peak_bytes",
            RankKey::Flops => "flops",
            RankKey::InferenceTime => "inference_time",
        }
    }

    /// `None` when the variant failed or the indicator was unavailable.
    pub fn value(self, v: &VariantReport) -> Option<f64> {
        if v.failed {
            return None;
        }
        match self {
            RankKey::TotalEnergy => v.total_energy_joules,
            RankKey::WallTime => Some(v.total_wall_seconds),
            RankKey::PeakBytes => Some(v.peak_bytes as f64),
            RankKey::Flops => Some(v.forward_flops_per_step + v.backward_flops_per_step),
            RankKey::InferenceTime => v.inference.as_ref().map(|i| i.median_seconds),
        }
    }
}

impl FromStr for RankKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ranking key `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub variant: Variant,
    pub value: Option<f64>,
    /// Set when `value` is missing; such entries come last.
    pub unavailable: bool,
}

/// Ascending by `key`, ties by variant name, unavailable entries last.
pub fn rank_variants(report: &RunReport, key: RankKey) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = report
        .variants
        .iter()
        .map(|v| {
            let value = key.value(v).filter(|x| x.is_finite());
            Ranked {
                variant: v.variant,
                value,
                unavailable: value.is_none(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.unavailable
            .cmp(&b.unavailable)
            .then_with(|| match (a.value, b.value) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                _ => std::cmp::Ordering::Equal,
            })
            .then_with(|| a.variant.name().cmp(b.variant.name()))
    });
    out
}

/// Markdown digest: per-variant totals and every ranking.
pub fn render_summary(report: &RunReport) -> String {
    let mut s = String::new();
    let env = &report.environment;
    let _ = writeln!(s, "# Attention benchmark summary\n");
    let _ = writeln!(
        s,
        "{} epochs × {} batches of {} × {} tokens, seed {}. Host `{}` ({} {}), power source: {}.\n",
        report.spec.epochs,
        report.spec.batches_per_epoch,
        report.spec.batch_size,
        report.spec.seq_len,
        report.spec.seed,
        env.host,
        env.os,
        env.arch,
        env.power_source
    );
    let _ = writeln!(
        s,
        "| variant | status | final loss | wall s | energy J | params | peak bytes | FLOPs/step | inference s |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for v in &report.variants {
        let last = v.epochs.last().map(|e| format!("{:.4}", e.mean_loss)).unwrap_or_default();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} | {} | {} | {} | {:.4e} | {} |",
            v.variant,
            if v.failed { "failed" } else { "ok" },
            last,
            v.total_wall_seconds,
            v.total_energy_joules.map(|j| format!("{j:.1}")).unwrap_or_else(|| "n/a".into()),
            v.param_count,
            v.peak_bytes,
            v.forward_flops_per_step + v.backward_flops_per_step,
            v.inference
                .as_ref()
                .map(|i| format!("{:.4} ± {:.4}", i.median_seconds, i.mad_seconds))
                .unwrap_or_else(|| "n/a".into()),
        );
    }
    let _ = writeln!(s, "\n## Rankings (lowest first)\n");
    for key in RankKey::ALL {
        let names: Vec<String> = rank_variants(report, key)
            .into_iter()
            .map(|r| if r.unavailable { format!("{} (n/a)", r.variant) } else { r.variant.to_string() })
            .collect();
        let _ = writeln!(s, "- {}: {}", key.name(), names.join(", "));
    }
    let _ = writeln!(
        s,
        "\nUnder a constant power source energy is watts × wall time, so the energy and \
         wall-time rankings coincide. With measured power they can diverge: a variant \
         that trains longer at lower draw may use less energy than a faster one.\n"
    );
    let _ = writeln!(s, "Device utilization is not measured on CPU hosts and is reported as null.");
    s
}

impl std::fmt::Display for RankKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

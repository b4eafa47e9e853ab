use std::path::PathBuf;
use std::process::ExitCode;

use attnbench::attention::{parse_variant_list, Variant};
use attnbench::data::DataSource;
use attnbench::harness::{
    apply_config_file, emit_figure_tables, load_report, render_summary, run_benchmark, verify_invariants, RunSpec,
};
use attnbench::profiler::PowerConfig;
use attnbench::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const USAGE: u8 = 2;
const FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "attnbench", version, about = "Benchmark attention variants inside a small GPT-2 decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and profile every selected variant, then write the report and figure tables.
    Run(RunArgs),
    /// Like `run` for exactly one variant.
    Single {
        #[arg(long, value_parser = parse_one_variant)]
        variant: Variant,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check the tensor and attention invariants; exit 0 only if all pass.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild the figure tables and summary from a saved report.
    Report {
        /// Path of a `report.json` written by `run`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated variant names.
    #[arg(long, value_parser = parse_variants)]
    variants: Option<VariantList>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    /// Batches per epoch.
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `synth` or a path to a messages JSONL file.
    #[arg(long, value_parser = parse_data)]
    data: Option<DataSource>,
    /// constant:W, affine:A,B, file:PATH, platform[:PATH] or auto[:PATH].
    #[arg(long, value_parser = parse_power)]
    power: Option<PowerConfig>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// `key = value` or JSON file applied on top of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone)]
struct VariantList(Vec<Variant>);

fn parse_variants(s: &str) -> Result<VariantList, String> {
    parse_variant_list(s).map(VariantList).map_err(|e| e.to_string())
}

fn parse_one_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn parse_data(s: &str) -> Result<DataSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_power(s: &str) -> Result<PowerConfig, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn build_spec(variants: Option<Vec<Variant>>, c: CommonArgs) -> attnbench::Result<RunSpec> {
    let mut spec = match c.profile {
        Profile::Desk => RunSpec::desk(),
        Profile::Paper => RunSpec::paper(),
    };
    if let Some(v) = variants {
        spec.variants = v;
    }
    if let Some(x) = c.epochs {
        spec.epochs = x;
    }
    if let Some(x) = c.batches {
        spec.batches_per_epoch = x;
    }
    if let Some(x) = c.batch_size {
        spec.batch_size = x;
    }
    if let Some(x) = c.seq_len {
        spec.set_seq_len(x);
    }
    if let Some(x) = c.seed {
        spec.seed = x;
    }
    if let Some(x) = c.data {
        spec.data = x;
    }
    if let Some(x) = c.power {
        spec.power = x;
    }
    spec.out_dir = Some(c.out);
    if let Some(path) = &c.config {
        apply_config_file(&mut spec, path)?;
    }
    spec.validate()?;
    Ok(spec)
}

/// Spec errors (bad values, unreadable config) are usage errors.
fn benchmark(spec: attnbench::Result<RunSpec>) -> ExitCode {
    let spec = match spec {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    match run_benchmark(&spec) {
        Ok(report) => {
            let dir = spec.out_dir.as_deref().unwrap_or(std::path::Path::new("."));
            println!("{}", render_summary(&report));
            println!("wrote {}", dir.display());
            if report.any_failed() {
                for v in report.variants.iter().filter(|v| v.failed) {
                    eprintln!("{} failed: {}", v.variant, v.error.as_deref().unwrap_or("unknown error"));
                }
                ExitCode::from(FAILURE)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(FAILURE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => benchmark(build_spec(args.variants.map(|v| v.0), args.common)),
        Command::Single { variant, common } => benchmark(build_spec(Some(vec![variant]), common)),
        Command::Verify { seed } => {
            let checks = verify_invariants(seed);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(FAILURE)
            }
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.parent().map(PathBuf::from).unwrap_or_default());
            let result = load_report(&input).and_then(|r| {
                emit_figure_tables(&r, &out)?;
                std::fs::write(out.join("summary.md"), render_summary(&r))?;
                Ok(())
            });
            match result {
                Ok(()) => {
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(FAILURE)
                }
            }
        }
    }
}

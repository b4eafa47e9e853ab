use std::io::Write;
use std::path::Path;

use proptest::prelude::*;

use super::*;

fn s(t: f64, watts: f64) -> PowerSample {
    PowerSample { t, watts }
}

#[test]
fn trapezoid_examples() {
    assert_eq!(energy_integrate(&[s(0.0, 250.0), s(100.0, 250.0)]).unwrap(), 25_000.0);
    assert_eq!(energy_integrate(&[s(0.0, 100.0), s(10.0, 300.0)]).unwrap(), 2_000.0);
    // Ramp 0→10 W over 2 s then flat 10 W for 3 s.
    let ramp = [s(0.0, 0.0), s(2.0, 10.0), s(5.0, 10.0)];
    assert_eq!(energy_integrate(&ramp).unwrap(), 10.0 + 30.0);
    assert!(energy_integrate(&[s(0.0, 1.0)]).is_err());
    assert!(energy_integrate(&[s(0.0, -1.0), s(1.0, 1.0)]).is_err());
    assert!(energy_integrate(&[s(1.0, 1.0), s(1.0, 1.0)]).is_err());
}

proptest! {
    #[test]
    fn integration_is_additive(ws in prop::collection::vec(0.0f64..500.0, 3..12), split in 1usize..10) {
        let samples: Vec<PowerSample> = ws.iter().enumerate().map(|(i, &w)| s(i as f64 * 0.5, w)).collect();
        let k = split.min(samples.len() - 2);
        let whole = energy_integrate(&samples).unwrap();
        let parts = energy_integrate(&samples[..=k]).unwrap() + energy_integrate(&samples[k..]).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
    }
}

#[test]
fn power_config_parses() {
    assert_eq!("constant:250".parse::<PowerConfig>().unwrap(), PowerConfig::Constant { watts: 250.0 });
    assert_eq!("affine:10,1e-9".parse::<PowerConfig>().unwrap(), PowerConfig::Affine { a: 10.0, b: 1e-9 });
    assert_eq!("platform".parse::<PowerConfig>().unwrap(), PowerConfig::Platform { path: None });
    assert_eq!(
        "file:trace.csv".parse::<PowerConfig>().unwrap(),
        PowerConfig::File { path: "trace.csv".into() }
    );
    assert_eq!("auto".parse::<PowerConfig>().unwrap(), PowerConfig::Auto { file: None });
    for bad in ["constant:-1", "affine:1", "file:", "gpu", "constant:x"] {
        assert!(bad.parse::<PowerConfig>().is_err(), "{bad}");
    }
    for text in ["constant:250", "affine:1,2", "platform:/x/energy_uj", "file:a.csv", "auto"] {
        assert_eq!(text.parse::<PowerConfig>().unwrap().to_string(), text);
    }
}

#[test]
fn constant_sampled_at_one_hertz() {
    let clock = Arc::new(ManualClock::new(0.0));
    let monitor = PowerMonitor::new(&PowerConfig::Constant { watts: 250.0 }, clock.clone()).unwrap();
    for i in 0..5 {
        clock.set(i as f64);
        monitor.sample_now();
    }
    let samples = monitor.samples();
    assert_eq!(samples.len(), 5);
    assert!(samples.iter().all(|p| p.watts == 250.0));
    assert_eq!(monitor.energy_between(0.0, 4.0), Some(1000.0));
}

#[test]
fn affine_tracks_flop_rate() {
    let run = |flops_per_second: u64| {
        let clock = Arc::new(ManualClock::new(0.0));
        let monitor = PowerMonitor::new(&PowerConfig::Affine { a: 50.0, b: 1e-9 }, clock.clone()).unwrap();
        monitor.sample_now();
        for i in 1..=10 {
            clock.set(i as f64 * 0.1);
            monitor.flops.fetch_add(flops_per_second / 10, Ordering::Relaxed);
            monitor.sample_now();
        }
        monitor.energy_between(0.0, 1.0).unwrap()
    };
    assert!(run(2_000_000_000) > run(1_000_000_000));

    let flops = Arc::new(AtomicU64::new(0));
    let mut zero_b = AffinePower::new(120.0, 0.0, flops.clone());
    flops.store(1 << 40, Ordering::Relaxed);
    assert_eq!(zero_b.read(1.0), Some(120.0));
    assert_eq!(zero_b.read(2.0), ConstantPower(120.0).read(2.0));
}

fn trace_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn trace_file_mocked_ten_second_run() {
    let f = trace_file("t_seconds,watts\n0,100\n10,300\n");
    let energy = || {
        let clock = Arc::new(ManualClock::new(0.0));
        let monitor = PowerMonitor::new(&PowerConfig::File { path: f.path().into() }, clock.clone()).unwrap();
        let t0 = monitor.sample_now();
        clock.set(10.0);
        let t1 = monitor.sample_now();
        monitor.energy_between(t0, t1).unwrap()
    };
    assert_eq!(energy(), 2000.0);
    assert_eq!(energy(), energy());

    let trace = TracePower::from_file(f.path()).unwrap();
    assert_eq!(trace.at(5.0), 200.0);
    assert_eq!(trace.at(-1.0), 100.0);
    assert_eq!(trace.at(20.0), 300.0);
}

#[test]
fn trace_errors_carry_line_numbers() {
    let p = Path::new("trace.csv");
    let line_of = |text: &str| match parse_trace(text, p) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected parse error, got {other:?}"),
    };
    assert_eq!(line_of("t_seconds,watts\n"), 1);
    assert_eq!(line_of("0,100\n1,200\n"), 1);
    assert_eq!(line_of("t_seconds,watts\n0,100\n2,1\n1,5\n"), 4);
    assert_eq!(line_of("t_seconds,watts\n0,abc\n"), 2);
    assert_eq!(line_of("t_seconds,watts\n0,-3\n"), 2);
}

#[test]
fn platform_counter_conversion_and_wrap() {
    let dir = tempfile::tempdir().unwrap();
    let counter = dir.path().join("energy_uj");
    std::fs::write(&counter, "5000000\n").unwrap();
    std::fs::write(dir.path().join("max_energy_range_uj"), "9999999\n").unwrap();
    let mut p = PlatformPower::open(&counter).unwrap();
    p.prime(0.0);
    std::fs::write(&counter, "6000000\n").unwrap();
    assert_eq!(p.read(1.0), Some(1.0));
    // Wraps at 10_000_000 µJ: 9_500_000 → 500_000 is 1 J.
    std::fs::write(&counter, "9500000\n").unwrap();
    p.read(2.0);
    std::fs::write(&counter, "500000\n").unwrap();
    assert_eq!(p.read(3.0), Some(1.0));
    assert_eq!(counter_delta(u64::from(u32::MAX) - 9, 10, DEFAULT_COUNTER_MODULUS_UJ), 20);
}

#[test]
fn missing_platform_counter_yields_null_energy() {
    let clock = Arc::new(ManualClock::new(0.0));
    let cfg = PowerConfig::Platform {
        path: Some("/nonexistent/energy_uj".into()),
    };
    let monitor = PowerMonitor::new(&cfg, clock.clone()).unwrap();
    monitor.sample_now();
    clock.set(1.0);
    monitor.sample_now();
    assert!(!monitor.available());
    assert_eq!(monitor.energy_between(0.0, 1.0), None);
}

#[test]
fn auto_falls_back_to_trace_then_constant() {
    let f = trace_file("t_seconds,watts\n0,7\n");
    let flops = Arc::new(AtomicU64::new(0));
    let cfg = PowerConfig::Auto {
        file: Some(f.path().into()),
    };
    let mut src = cfg.build(flops.clone()).unwrap();
    if !Path::new(DEFAULT_COUNTER_PATH).exists() {
        assert_eq!(src.read(3.0), Some(7.0));
        let mut fallback = PowerConfig::Auto { file: None }.build(flops).unwrap();
        assert_eq!(fallback.read(0.0), Some(FALLBACK_WATTS));
    }
}

#[test]
fn background_sampler_collects_samples() {
    let mut monitor = PowerMonitor::new(&PowerConfig::default(), Arc::new(MonotonicClock::new())).unwrap();
    let t0 = monitor.sample_now();
    monitor.start(Duration::from_millis(10));
    std::thread::sleep(Duration::from_millis(80));
    monitor.stop();
    let t1 = monitor.sample_now();
    let samples = monitor.samples();
    assert!(samples.len() >= 4);
    assert!(samples.windows(2).all(|w| w[1].t > w[0].t));
    let e = monitor.energy_between(t0, t1).unwrap();
    assert!((e - 250.0 * (t1 - t0)).abs() <= 1e-9 * e);
}

#[test]
fn cpu_and_disk_snapshots() {
    let before = resource_snapshot();
    let start = Instant::now();
    let mut x = 0u64;
    while start.elapsed() < Duration::from_millis(200) {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
    }
    std::hint::black_box(x);
    let busy = resource_snapshot().since(&before);
    assert!(busy.cpu_seconds.unwrap() >= 0.15);

    let f = trace_file(&"x".repeat(1 << 20));
    let before = resource_snapshot();
    let data = std::fs::read(f.path()).unwrap();
    assert_eq!(data.len(), 1 << 20);
    let read = resource_snapshot().since(&before);
    if let Some(bytes) = read.bytes_read {
        assert!(bytes >= 1 << 20);
    }
    let idle = resource_snapshot().since(&resource_snapshot());
    assert!(idle.cpu_seconds.unwrap_or(0.0) >= 0.0);
}

#[test]
fn sampler_overhead_is_small() {
    let ratio = sampler_overhead(
        || {
            let mut acc = 0.0f64;
            for i in 0..400_000 {
                acc += (i as f64).sqrt();
            }
            std::hint::black_box(acc);
        },
        7,
        DEFAULT_SAMPLE_PERIOD,
    );
    assert!(ratio < 1.05, "overhead ratio {ratio}");
}

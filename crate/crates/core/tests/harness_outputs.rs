mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use common::config;
use robust_mlmc::harness::{emit_plots, mid_cross_section, run_experiment, write_bundle, Method, RunConfig};

fn small(seed: u64) -> RunConfig {
    config("problem1-desk", |c| {
        c.problem.max_level = 2;
        c.optimizer.tau = 1e-2;
        c.optimizer.timings = false;
        c.post_eps = 5e-2;
        c.method = Method::Both;
        c.seed = seed;
    })
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn write_all(c: &RunConfig, dir: &Path) {
    let b = run_experiment(c).unwrap();
    write_bundle(&b, dir).unwrap();
    emit_plots(&b, dir).unwrap();
}

#[test]
fn same_seed_gives_identical_bytes_for_any_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small(11);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| write_all(&c, &a));
    rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| write_all(&c, &b));
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() >= 12, "{:?}", fa.keys());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }
    let other = tmp.path().join("c");
    write_all(&small(12), &other);
    assert_ne!(fa["trace_ncg.csv"], files(&other)["trace_ncg.csv"]);
}

#[test]
fn cross_section_columns_telescope_and_level0_is_smooth() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small(5);
    let b = run_experiment(&c).unwrap();
    emit_plots(&b, tmp.path()).unwrap();
    for m in ["ncg", "newton"] {
        let mut r = csv::Reader::from_path(tmp.path().join(format!("plot_cross_section_{m}.csv"))).unwrap();
        let header = r.headers().unwrap().clone();
        assert_eq!(header.iter().collect::<Vec<_>>(), ["x", "level0", "level1", "level2", "deterministic", "total"]);
        for rec in r.records() {
            let v: Vec<f64> = rec.unwrap().iter().map(|s| s.parse().unwrap()).collect();
            let sum: f64 = v[1..5].iter().sum();
            let scale = v[1..].iter().fold(1e-30_f64, |a, x| a.max(x.abs()));
            assert!((sum - v[5]).abs() <= 1e-12 * scale, "{v:?}");
        }
    }
    let h = b.hierarchy().unwrap();
    let g = &b.runs[0].final_gradient;
    let high = |f: &robust_mlmc::grid::GridFunction| {
        let y: Vec<f64> = mid_cross_section(&h, f).into_iter().map(|p| p.1).collect();
        let n = y.len();
        let power: Vec<f64> = (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in y.iter().enumerate() {
                    let t = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += v * t.cos();
                    im -= v * t.sin();
                }
                re * re + im * im
            })
            .collect();
        let nyquist = h.m0 / 2;
        power[nyquist + 1..].iter().sum::<f64>() / power.iter().sum::<f64>()
    };
    let coarse = high(&g.contributions[0]);
    assert!(coarse < 1e-2, "level-0 energy above its Nyquist index: {coarse}");
    let noise = common::random_fn(&h, g.total.level, &mut common::rng(9));
    assert!(high(&noise) > 0.3, "control signal should be rough");
}

#[test]
fn empty_traces_still_write_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config("problem1-desk", |c| {
        c.problem.max_level = 1;
        c.optimizer.tau = 5e-2;
        c.post_eps = 0.0;
    });
    let mut b = run_experiment(&c).unwrap();
    for r in &mut b.runs {
        r.trace.clear();
        r.refreshes.clear();
        r.variances.clear();
    }
    write_bundle(&b, tmp.path()).unwrap();
    emit_plots(&b, tmp.path()).unwrap();
    for name in ["trace_ncg.csv", "tables_ncg.csv", "plot_convergence_ncg.csv", "plot_variances_ncg.csv"] {
        let text = fs::read_to_string(tmp.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), 1, "{name}: {text}");
    }
    assert!(!tmp.path().join("mean_state_ncg.csv").exists());
}

fn cli(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mlmc-opt"))
        .args(args)
        .env("MLMC_OUT_DIR", out)
        .output()
        .unwrap()
}

#[test]
fn command_line_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "preset = \"problem1-desk\"\nname = \"tiny\"\npost_eps = 5e-2\n\
         [problem]\nmax_level = 2\n[optimizer]\ntau = 1e-2\ntimings = false\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = cli(tmp.path(), &["optimize", "--config", cfg, "--seed", "4", "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("tiny-seed4");
    let trace = fs::read_to_string(run.join("trace_ncg.csv")).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "k_or_i,phase,grad_or_res_norm,epsilon,refreshed,n0,n1,n2,wall_s"
    );
    assert!(run.join("control_ncg.csv").exists() && run.join("bundle.json").exists());

    fs::remove_file(run.join("plot_convergence_ncg.csv")).unwrap();
    let o = cli(tmp.path(), &["plots", "--config", cfg, "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("plot_convergence_ncg.csv").exists());

    let control = run.join("control_ncg.csv");
    let o = cli(
        tmp.path(),
        &["estimate", "--config", cfg, "--seed", "4", "--eps", "5e-2", "--control", control.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["estimate.csv", "gradient.csv", "frozen.txt", "levels.csv"] {
        assert!(run.join("estimate").join(f).exists(), "{f}");
    }

    let o = cli(tmp.path(), &["calibrate", "--config", cfg, "--samples", "2", "--out", tmp.path().join("cal").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("cal/tiny-seed1/calibrate/calibrate.csv").exists());
}

#[test]
fn command_line_rejects_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[optimizer]\ntua = 1e-3\n").unwrap();
    let o = cli(tmp.path(), &["optimize", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("tua"));

    let o = cli(tmp.path(), &["optimize", "--preset", "problem2"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--full-scale"));

    let o = cli(tmp.path(), &["optimize", "--preset", "problem9-desk"]);
    assert!(!o.status.success());
}

use std::path::Path;
use std::process::{Command, Output};

use eomshape_cli::config::{ConfigError, Scenario};
use eomshape_cli::plot::{emit_plots, overlay_plot, render, PlotError};
use eomshape_cli::presets;

const BIN: &str = env!("CARGO_BIN_EXE_eomshape");

fn eomshape(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("EOMSHAPE_OUT")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
name = "small"
seed = 3

[[modulation]]
shape = "none"

[[modulation]]
shape = "gaussian"
v_peak_V = 4.0
optical_fwhm_ns = 0.52
delay_ns = [0.0, 1.2]

[timing]
n_pulses = 200_000
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_writes_outputs_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = eomshape(&out, &["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "report.json",
        "hist_unmodulated.csv",
        "expected_unmodulated.csv",
        "fit_unmodulated.txt",
        "hist_gauss520ps_d1.20ns.csv",
        "envelope_gauss520ps_d1.20ns.csv",
        "hist_unmodulated.svg",
        "overlay.svg",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let svg = std::fs::read_to_string(out.join("hist_unmodulated.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cases"].as_array().unwrap().len(), 3);
}

#[test]
fn seed_override_changes_histograms_and_repeats_reproduce_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = eomshape(&out, &["--no-plots", "--seed", seed, "run", cfg.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out.join("hist_gauss520ps_d0.00ns.csv")).unwrap()
    };
    let a = run("a", "11");
    assert_eq!(a, run("b", "11"));
    assert_ne!(a, run("c", "12"));
}

#[test]
fn config_errors_exit_with_code_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace("optical_fwhm_ns = 0.52", "optical_fwhm_ns = -0.52");
    let cfg = write_config(dir.path(), &bad);
    let o = eomshape(&dir.path().join("out"), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("modulation[1].optical_fwhm_ns"), "{err}");

    let o = eomshape(
        &dir.path().join("out"),
        &["run", dir.path().join("missing.toml").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));

    let o = eomshape(&dir.path().join("out"), &["preset", "fig9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fig9"));
}

#[test]
fn unknown_keys_are_rejected() {
    let err = Scenario::from_toml(&format!("{SMALL}\n[detector]\njiter_fwhm_ns = 0.2\n")).unwrap_err();
    assert!(
        matches!(err, ConfigError::Parse(ref m) if m.contains("jiter_fwhm_ns")),
        "{err}"
    );
}

#[test]
fn runtime_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "bin_start_ns,count\n0,0\n0.05,0\n0.1,0\n0.15,0\n0.2,0\n0.25,0\n").unwrap();
    let o = eomshape(&dir.path().join("out"), &["fit", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_subcommand_recovers_a_written_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("bin_start_ns,count\n");
    for j in 0..400 {
        let t = j as f64 * 0.05;
        let mu = 5000.0 * (-(t + 0.025) / 1.4f64).exp();
        csv += &format!("{t},{}\n", mu.round());
    }
    let path = dir.path().join("hist_decay.csv");
    std::fs::write(&path, csv).unwrap();
    let out = dir.path().join("out");
    let o = eomshape(&out, &["fit", path.to_str().unwrap(), "--model", "exponential"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("fit_decay.txt")).unwrap();
    let fit = eomshape::analyze::FitResult::read_text(&text).unwrap();
    assert!((fit.value("tau") - 1.4).abs() < 0.01, "{}", fit.value("tau"));
}

#[test]
fn preset_list_and_print() {
    let dir = tempfile::tempdir().unwrap();
    let o = eomshape(dir.path(), &["preset"]);
    let listed = String::from_utf8_lossy(&o.stdout);
    for n in presets::names() {
        assert!(listed.lines().any(|l| l == n), "{n} not listed");
    }
    let o = eomshape(dir.path(), &["preset", "fig3b", "--print"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout), presets::source("fig3b").unwrap());
}

#[test]
fn sweep_forces_tradeoff_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}\n[tradeoff]\ntau_mod_ns = [0.3, inf]\nrep_rate_hz = 5e7\n"),
    );
    let out = dir.path().join("out");
    let o = eomshape(&out, &["sweep", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("tradeoff.svg").exists());
}

#[test]
fn header_only_csv_gives_an_empty_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mut written = Vec::new();
    for (name, header) in [
        ("hist_empty.csv", "bin_start_ns,count"),
        (
            "tradeoff.csv",
            "tau_mod_ns,delay_ns,indist_exact,indist_simple,fraction,rate_hz",
        ),
        ("envelope_x.csv", "t_ns,transmission"),
        ("timestamps_x.csv", "cycle_index,t_ns"),
    ] {
        let p = dir.path().join(name);
        std::fs::write(&p, format!("{header}\n")).unwrap();
        written.push(p);
    }
    let svgs = emit_plots(&written, &dir.path().join("svg")).unwrap();
    assert_eq!(svgs.len(), written.len());
    for s in svgs {
        let text = std::fs::read_to_string(s).unwrap();
        assert!(text.contains("</svg>") && !text.contains("NaN"));
    }
    overlay_plot(&written[..1], &dir.path().join("o.svg"), "empty").unwrap();
}

#[test]
fn malformed_csv_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("hist_bad.csv");
    std::fs::write(&p, "bin_start_ns,count\n0,1\n0.05,x\n").unwrap();
    match render(&p) {
        Err(PlotError::Malformed { path, line, .. }) => {
            assert!(path.ends_with("hist_bad.csv"));
            assert_eq!(line, 3);
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&p, "bin_start_ns,count\n0,1,2\n").unwrap();
    let err = render(&p).unwrap_err().to_string();
    assert!(err.contains("hist_bad.csv") && err.contains("line 2"), "{err}");

    let o = eomshape(&dir.path().join("out"), &["plot", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn unknown_csv_format_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("other.csv");
    std::fs::write(&p, "a,b\n1,2\n").unwrap();
    assert!(matches!(render(&p), Err(PlotError::UnknownFormat { .. })));
}

#[test]
fn histogram_plot_overlays_fit_and_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert!(eomshape(&out, &["--no-plots", "run", cfg.to_str().unwrap()])
        .status
        .success());
    let svg = render(&out.join("hist_unmodulated.csv")).unwrap();
    assert!(svg.contains("exponential fit"));
    assert!(svg.contains("expected"));
}

#[test]
fn every_preset_parses_and_validates() {
    for n in presets::names() {
        let plan = presets::load(n).unwrap().validate().unwrap();
        assert_eq!(plan.scenario.name, n);
    }
}

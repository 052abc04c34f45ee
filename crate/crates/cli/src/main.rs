use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use eomshape::analyze::{fit_exponential, fit_gaussian, FitOptions};
use eomshape::detect::Histogram;
use eomshape_cli::config::{ConfigError, Mode, Scenario};
use eomshape_cli::pipeline::{run_plan, RunError};
use eomshape_cli::report::RunReport;
use eomshape_cli::{plot, presets};

#[derive(Parser)]
#[command(
    name = "eomshape",
    version,
    about = "Electro-optic shaping of single-photon wavepackets"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "EOMSHAPE_OUT", default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of laser pulses.
    #[arg(long, global = true)]
    pulses: Option<u64>,
    /// Skip SVG rendering after a run.
    #[arg(long, global = true)]
    no_plots: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run { config: PathBuf },
    /// Run a bundled scenario; lists them when no name is given.
    Preset {
        name: Option<String>,
        /// Print the scenario TOML instead of running it.
        #[arg(long)]
        print: bool,
    },
    /// Fit a histogram CSV (`bin_start_ns,count`).
    Fit {
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "exponential")]
        model: ModelArg,
        /// Detector jitter FWHM in ns, convolved into the exponential model.
        #[arg(long)]
        jitter: Option<f64>,
        /// Restrict the fit to `start,end` in ns.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        range: Option<Vec<f64>>,
    },
    /// Run the window-width sweep of a scenario file.
    Sweep { config: PathBuf },
    /// Render CSV exports as SVG.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Also draw all histograms on one set of axes.
        #[arg(long)]
        overlay: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Exponential,
    Gaussian,
    Notch,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let is_config = e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<RunError>(), Some(RunError::Config(_)))
    });
    if is_config {
        1
    } else {
        2
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let s = Scenario::load(config)?;
            execute(cli, s)
        }
        Command::Sweep { config } => {
            let mut s = Scenario::load(config)?;
            s.mode = Mode::Tradeoff;
            execute(cli, s)
        }
        Command::Preset { name: None, .. } => {
            for n in presets::names() {
                println!("{n}");
            }
            Ok(())
        }
        Command::Preset {
            name: Some(name),
            print,
        } => {
            if *print {
                print!("{}", presets::source(name)?);
                return Ok(());
            }
            let s = presets::load(name)?;
            execute(cli, s)
        }
        Command::Fit {
            csv,
            model,
            jitter,
            range,
        } => fit(cli, csv, *model, *jitter, range.as_deref()),
        Command::Plot { csv, overlay } => {
            let dir = &cli.out;
            for p in plot::emit_plots(csv, dir)? {
                println!("{}", p.display());
            }
            if *overlay {
                let p = plot::overlay_plot(csv, &dir.join("overlay.svg"), "histograms")?;
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn execute(cli: &Cli, s: Scenario) -> Result<()> {
    let plan = s.with_overrides(cli.seed, cli.pulses).validate()?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    let report = run_plan(&plan, &cli.out)?;
    if !cli.no_plots {
        render_run(&report, &cli.out)?;
    }
    summarize(&report, &cli.out);
    Ok(())
}

fn render_run(report: &RunReport, dir: &Path) -> Result<()> {
    let pick = |prefix: &str| -> Vec<PathBuf> {
        report
            .outputs
            .iter()
            .filter(|o| o.starts_with(prefix) && o.ends_with(".csv"))
            .map(|o| dir.join(o))
            .collect()
    };
    let hists = pick("hist_");
    let mut csvs = hists.clone();
    csvs.extend(pick("tradeoff"));
    csvs.extend(pick("envelope_"));
    plot::emit_plots(&csvs, dir).context("rendering plots")?;
    if hists.len() > 1 {
        plot::overlay_plot(&hists, &dir.join("overlay.svg"), &report.name).context("rendering overlay")?;
    }
    Ok(())
}

fn summarize(r: &RunReport, dir: &Path) {
    println!("{} ({:.1} s) -> {}", r.name, r.duration_s, dir.display());
    for c in &r.cases {
        let mut line = format!("  {:<24} detected {:>9}", c.label, c.detected);
        if let Some(f) = &c.fit {
            for (name, v, ci) in &f.params {
                if name == "tau" || name == "fwhm" {
                    line += &format!("  {name} = {v:.4} +/- {ci:.4} ns");
                }
            }
        }
        if let Some(db) = c.on_off_db {
            line += &format!("  on/off {db:.1} dB");
        }
        println!("{line}");
    }
    if let Some(t) = &r.tradeoff {
        println!("  chain product {:.4e}", t.chain_product);
        for row in &t.rows {
            println!(
                "  tau_mod {:>8} ns  I = {:.4}  fraction {:.4}  rate {:.3e} /s",
                row.tau_mod, row.indist_exact, row.transmitted_fraction, row.rate
            );
        }
    }
}

fn fit(cli: &Cli, csv: &Path, model: ModelArg, jitter: Option<f64>, range: Option<&[f64]>) -> Result<()> {
    let file = std::fs::File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let h = Histogram::read_csv(file).with_context(|| format!("reading {}", csv.display()))?;
    let range = match range {
        Some([a, b]) => Some((*a, *b)),
        Some(_) => bail!("--range takes two values"),
        None => None,
    };
    let opts = FitOptions {
        jitter_fwhm: jitter,
        range,
    };
    let result = match model {
        ModelArg::Exponential => fit_exponential(&h, &opts),
        ModelArg::Gaussian => fit_gaussian(&h, false, &opts),
        ModelArg::Notch => fit_gaussian(&h, true, &opts),
    }
    .context("fit failed")?;
    let mut text = Vec::new();
    result.write_text(&mut text)?;
    print!("{}", String::from_utf8_lossy(&text));
    std::fs::create_dir_all(&cli.out)?;
    let stem = csv
        .file_stem()
        .map_or_else(|| "fit".into(), |s| s.to_string_lossy().into_owned());
    let out = cli.out.join(format!("fit_{}.txt", stem.trim_start_matches("hist_")));
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

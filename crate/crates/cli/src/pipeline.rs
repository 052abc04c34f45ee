//! generate -> modulate -> detect -> histogram -> fit, and the trade-off sweep.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use eomshape::analyze::{
    fit_exponential, fit_gaussian, indistinguishability_exact, tradeoff_sweep, transmitted_fraction, EfficiencyChain,
    FitOptions, FitResult, SweepSettings,
};
use eomshape::detect::{analytic_histogram, detect_mc, histogram, schedule_events, ExpectedHistogram, Histogram};
use eomshape::emitter::{exponential_wavepacket, trajectory_seed};
use eomshape::eomod::{apply_modulation, mz_transmission, snap_delay, Modulation, TransmissionEnvelope};
use eomshape::sigcore::{TimeGrid, Wavepacket};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{Case, Mode, Plan, Source};
use crate::report::{CaseSummary, FitSummary, RunReport, TradeoffSummary};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{context}")]
    Core {
        context: String,
        #[source]
        source: eomshape::Error,
    },
    #[error("cannot write {path}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Half-width of the cw fit window in units of the jittered FWHM.
const CW_FIT_HALF_WIDTHS: f64 = 4.0;

fn core(context: impl Into<String>) -> impl FnOnce(eomshape::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Core { context, source }
}

/// Everything computed for one case, before anything is written.
struct CaseOutput {
    summary: CaseSummary,
    histogram: Histogram,
    expected: ExpectedHistogram,
    envelope: Option<TransmissionEnvelope>,
    fit: Option<FitResult>,
    timestamps: Option<eomshape::detect::TimestampStream>,
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| RunError::Write {
            path: path.display().to_string(),
            source,
        })
}

fn write_with(
    out_dir: &Path,
    name: &str,
    written: &mut Vec<String>,
    f: impl FnOnce(BufWriter<File>) -> eomshape::Result<()>,
) -> Result<(), RunError> {
    let path = out_dir.join(name);
    f(create(&path)?).map_err(|e| match e {
        eomshape::Error::Io(source) => RunError::Write {
            path: path.display().to_string(),
            source,
        },
        other => RunError::Core {
            context: format!("writing {}", path.display()),
            source: other,
        },
    })?;
    written.push(name.to_string());
    Ok(())
}

/// Runs a validated plan and writes its outputs into `out_dir`.
pub fn run_plan(plan: &Plan, out_dir: &Path) -> Result<RunReport, RunError> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Write {
        path: out_dir.display().to_string(),
        source,
    })?;
    let s = &plan.scenario;
    let mut report = RunReport::new(s, plan.warnings.clone());
    match s.mode {
        Mode::Measure => run_measure(plan, out_dir, &mut report)?,
        Mode::Tradeoff => run_tradeoff(plan, out_dir, &mut report)?,
    }
    report.duration_s = started.elapsed().as_secs_f64();
    let path = out_dir.join("report.json");
    let w = create(&path)?;
    serde_json::to_writer_pretty(w, &report).map_err(|e| RunError::Write {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    Ok(report)
}

/// Loads, validates and runs a scenario file.
pub fn run_scenario(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    pulses: Option<u64>,
) -> Result<RunReport, RunError> {
    let scenario = crate::config::Scenario::load(config_path)?.with_overrides(seed, pulses);
    let plan = scenario.validate()?;
    run_plan(&plan, out_dir)
}

fn run_measure(plan: &Plan, out_dir: &Path, report: &mut RunReport) -> Result<(), RunError> {
    let s = &plan.scenario;
    let grid = TimeGrid::new(0.0, plan.timing.t_gate, s.analysis.dt_ns).map_err(core("gate grid"))?;
    if grid.was_snapped() {
        report.warnings.push(format!(
            "gate grid end snapped to {} ns (dt = {} ns does not divide the gate)",
            grid.t_end(),
            grid.dt()
        ));
    }
    let emit = plan.timing.emission_in_gate();
    let source = match s.source {
        Source::QuantumDot => exponential_wavepacket(&plan.emitter, &grid, emit).map_err(core("emitter"))?,
        Source::CwLaser => {
            let a = (s.analysis.cw_gate_probability / plan.timing.t_gate).sqrt();
            Wavepacket::new(grid, vec![Complex64::new(a, 0.0); grid.len()]).map_err(core("cw source"))?
        }
    };

    let outputs: Vec<(CaseOutput, Vec<String>)> = plan
        .cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| run_case(plan, &grid, &source, i, case))
        .collect::<Result<_, _>>()?;

    // Written in case order, whatever order the cases finished in.
    for (out, notes) in outputs {
        report.warnings.extend(notes);
        let label = &out.summary.label;
        let written = &mut report.outputs;
        write_with(out_dir, &format!("hist_{label}.csv"), written, |w| {
            out.histogram.write_csv(w)
        })?;
        write_with(out_dir, &format!("expected_{label}.csv"), written, |w| {
            out.expected.write_csv(w)
        })?;
        if let Some(env) = &out.envelope {
            write_with(out_dir, &format!("envelope_{label}.csv"), written, |w| env.write_csv(w))?;
        }
        if let Some(fit) = &out.fit {
            write_with(out_dir, &format!("fit_{label}.txt"), written, |w| fit.write_text(w))?;
        }
        if let Some(ts) = &out.timestamps {
            write_with(out_dir, &format!("timestamps_{label}.csv"), written, |w| {
                ts.write_csv(w)
            })?;
        }
        report.cases.push(out.summary);
    }
    Ok(())
}

fn run_case(
    plan: &Plan,
    grid: &TimeGrid,
    source: &Wavepacket,
    index: usize,
    case: &Case,
) -> Result<(CaseOutput, Vec<String>), RunError> {
    let s = &plan.scenario;
    let ctx = |what: &str| format!("case {}: {what}", case.label);
    let mut notes = Vec::new();
    let emit = plan.timing.emission_in_gate();
    let (delay, snapped) = snap_delay(case.delay, grid.dt());
    if snapped {
        notes.push(format!(
            "case {}: delay {} ns snapped to {delay} ns on the {} ns grid",
            case.label,
            case.delay,
            grid.dt()
        ));
    }

    let (psi, envelope) = match &case.drive {
        None => (source.clone(), None),
        Some(drive) => {
            // Window center on the gate axis: emission time plus EOM delay.
            let env = mz_transmission(&drive.delayed(emit + delay), &plan.eom, grid);
            let psi = apply_modulation(source, &env, 0.0).map_err(core(ctx("modulation")))?;
            (psi, Some(env))
        }
    };

    let mut timing = plan.timing;
    timing.delta_t_mod = delay;
    let eff = plan.detector.efficiency;
    let jitter = plan.detector.jitter_fwhm;
    let center = emit + delay;
    let fit_half = |w: f64| {
        let width = (w * w + jitter * jitter).sqrt();
        // Upright photon peaks are skewed by the decay; fit their core.
        let k = if s.source == Source::QuantumDot {
            1.5
        } else {
            CW_FIT_HALF_WIDTHS
        };
        k * width
    };
    if let (Source::CwLaser, Some(target)) = (s.source, s.timing.target_counts) {
        // The target counts the analysis window of a shaped case, the whole
        // gate otherwise.
        let window = case.optical_fwhm.map(|w| (center - fit_half(w), center + fit_half(w)));
        let per_gate = eff * windowed_norm(&psi, window);
        if !(per_gate > 0.0) {
            return Err(RunError::Core {
                context: ctx("cw calibration"),
                source: eomshape::Error::FullyExtinguished,
            });
        }
        timing.n_pulses = (target as f64 / per_gate).ceil() as u64 * timing.gate_divider;
    }
    let sched = schedule_events(&timing).map_err(core(ctx("schedule")))?;
    let seed = trajectory_seed(s.seed, index as u64);
    let stream = detect_mc(std::slice::from_ref(&psi), &plan.detector, &sched, seed).map_err(core(ctx("detection")))?;
    let bw = s.analysis.bin_width_ns;
    let span = timing.t_gate;
    let hist = histogram(&stream, bw, span).map_err(core(ctx("histogram")))?;
    let expected =
        analytic_histogram(&psi, &plan.detector, sched.n_gated(), bw, span).map_err(core(ctx("expectation")))?;

    let inverted = case.drive.as_ref().is_some_and(|d| d.is_inverted());
    let fit = match (&case.drive, s.source, case.optical_fwhm) {
        (None, Source::QuantumDot, _) => Some(fit_exponential(
            &hist,
            &FitOptions {
                jitter_fwhm: Some(jitter),
                range: None,
            },
        )),
        (Some(d), _, Some(w))
            if matches!(
                d.shape,
                eomshape::eomod::DriveShape::Gaussian | eomshape::eomod::DriveShape::InvertedGaussian
            ) && !(inverted && s.source == Source::QuantumDot) =>
        {
            let half = fit_half(w);
            Some(fit_gaussian(
                &hist,
                inverted,
                &FitOptions {
                    jitter_fwhm: Some(jitter),
                    range: Some((center - half, center + half)),
                },
            ))
        }
        _ => None,
    };
    let fit = match fit.transpose() {
        Ok(f) => f,
        Err(e) => {
            notes.push(format!("case {}: fit failed: {e}", case.label));
            None
        }
    };

    // Emitter-frame figures of merit for photons.
    let (fraction, indist) = if s.source == Source::QuantumDot {
        let g = plan
            .emitter
            .default_grid(s.analysis.dt_ns)
            .map_err(core(ctx("emitter grid")))?;
        match &case.drive {
            None => {
                let un = eomshape::eomod::Unmodulated;
                (
                    Some(transmitted_fraction(&plan.emitter, &un, 0.0, &g).map_err(core(ctx("fraction")))?),
                    indistinguishability_exact(&plan.emitter, &un, 0.0, &g).ok(),
                )
            }
            Some(d) => {
                let m = Modulation::new(d.clone(), plan.eom);
                (
                    Some(transmitted_fraction(&plan.emitter, &m, delay, &g).map_err(core(ctx("fraction")))?),
                    indistinguishability_exact(&plan.emitter, &m, delay, &g).ok(),
                )
            }
        }
    } else {
        (None, None)
    };

    let contour_peak = psi.intensity().peak().1;
    let (peak_bin, peak_counts) = hist
        .counts
        .iter()
        .enumerate()
        .fold((0, 0), |b, (j, &c)| if c > b.1 { (j, c) } else { b });
    let dip = if inverted {
        Some(dip_position(&hist, center, case.optical_fwhm.unwrap_or(1.0)))
    } else {
        None
    };
    let summary = CaseSummary {
        label: case.label.clone(),
        delay_ns: delay,
        optical_fwhm_ns: case.optical_fwhm,
        inverted,
        gated_cycles: sched.n_gated(),
        detected: hist.total_detected(),
        outside_span: hist.underflow + hist.overflow,
        expected_peak: expected.peak().1,
        observed_peak: peak_counts,
        observed_peak_t_ns: hist.bin_center(peak_bin),
        contour_peak,
        transmitted_fraction: fraction,
        indist_exact: indist,
        envelope_min: envelope
            .as_ref()
            .map(|e| e.transmission.iter().copied().fold(f64::INFINITY, f64::min)),
        envelope_floor: envelope.as_ref().map(|e| e.floor),
        on_off_db: envelope.as_ref().map(|e| e.on_off_ratio_db()),
        dip_t_ns: dip,
        fit: fit.as_ref().map(FitSummary::from),
    };
    let timestamps = s.analysis.export_timestamps.then_some(stream);
    Ok((
        CaseOutput {
            summary,
            histogram: hist,
            expected,
            envelope,
            fit,
            timestamps,
        },
        notes,
    ))
}

/// `int |psi|^2 dt` over `window`, or over the whole grid.
fn windowed_norm(psi: &Wavepacket, window: Option<(f64, f64)>) -> f64 {
    let Some((a, b)) = window else {
        return psi.norm();
    };
    let g = psi.grid();
    g.integrate(
        g.times()
            .zip(psi.amplitude())
            .map(|(t, z)| if (a..=b).contains(&t) { z.norm_sqr() } else { 0.0 }),
    )
}

/// Center of the lowest bin within one notch width of the nominal notch
/// position.
fn dip_position(h: &Histogram, center: f64, width: f64) -> f64 {
    let mut best = (center, u64::MAX);
    for j in 0..h.n_bins() {
        let t = h.bin_center(j);
        if (t - center).abs() <= width && h.counts[j] < best.1 {
            best = (t, h.counts[j]);
        }
    }
    best.0
}

fn run_tradeoff(plan: &Plan, out_dir: &Path, report: &mut RunReport) -> Result<(), RunError> {
    let s = &plan.scenario;
    let tr = &s.tradeoff;
    let settings = SweepSettings {
        eom: plan.eom,
        objective: tr.objective,
        delay_range: plan.delay_range,
        dt: s.analysis.dt_ns,
    };
    let mut chain = plan.chain.clone();
    let mut derivation = None;
    if let Some(target) = tr.target_rate_hz {
        let probe = tradeoff_sweep(
            &plan.emitter,
            &[tr.calibrate_tau_ns],
            tr.rep_rate_hz,
            &EfficiencyChain::unit(),
            &settings,
        )
        .map_err(core("calibration sweep"))?;
        let fraction = probe.rows[0].transmitted_fraction;
        let (c, text) =
            EfficiencyChain::calibrated(target, tr.rep_rate_hz, fraction).map_err(core("efficiency calibration"))?;
        let collection_only = tr.rep_rate_hz * 1e-3 * fraction;
        derivation = Some(format!(
            "{text}; transmitted fraction at tau_mod = {} ns is {fraction:.6} (optimal delay {:.4} ns); \
             a 0.1% collection efficiency alone would give {collection_only:.4e} counts/s",
            tr.calibrate_tau_ns, probe.rows[0].delay_opt
        ));
        chain = c;
    }
    let table = tradeoff_sweep(&plan.emitter, &tr.tau_mod_ns, tr.rep_rate_hz, &chain, &settings)
        .map_err(core("tradeoff sweep"))?;
    write_with(out_dir, "tradeoff.csv", &mut report.outputs, |w| table.write_csv(w))?;
    report.tradeoff = Some(TradeoffSummary::new(&table, &chain, derivation));
    Ok(())
}

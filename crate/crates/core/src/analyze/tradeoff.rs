//! Post-selection trade-off: window width vs. indistinguishability vs. rate.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::indist::{optimal_delay, DelayObjective, DelayRange, EmissionWeights};
use crate::emitter::EmitterModel;
use crate::eomod::{gaussian_drive, EomParams, Modulation, TransmissionProfile, Unmodulated};
use crate::error::{invalid, Result};
use crate::sigcore::{TimeGrid, DEFAULT_DT};

/// Named multiplicative efficiency factors (collection, filtering, ...).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyChain {
    pub factors: Vec<(String, f64)>,
}

impl EfficiencyChain {
    pub fn new(factors: Vec<(String, f64)>) -> Result<Self> {
        for (name, v) in &factors {
            if !(0.0..=1.0).contains(v) {
                return Err(invalid(
                    "efficiency_chain",
                    format!("factor `{name}` = {v} is outside [0, 1]"),
                ));
            }
        }
        Ok(Self { factors })
    }

    pub fn unit() -> Self {
        Self { factors: Vec::new() }
    }

    pub fn product(&self) -> f64 {
        self.factors.iter().map(|(_, v)| v).product()
    }

    /// Single-factor chain that makes `rep_rate * product * fraction` equal
    /// `target_rate`, plus a human-readable derivation.
    pub fn calibrated(target_rate: f64, rep_rate: f64, fraction: f64) -> Result<(Self, String)> {
        if !(target_rate >= 0.0) || !(rep_rate > 0.0) || !(fraction > 0.0) {
            return Err(invalid(
                "efficiency_chain",
                "calibration needs positive rates and fraction",
            ));
        }
        let product = target_rate / (rep_rate * fraction);
        let chain = Self::new(vec![("calibrated".into(), product)])?;
        let mut text = String::new();
        let _ = write!(
            text,
            "chain product = target_rate / (rep_rate * fraction) = {target_rate:.4e} / ({rep_rate:.4e} * {fraction:.6}) = {product:.4e}"
        );
        Ok((chain, text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub tau_mod: f64,
    pub delay_opt: f64,
    pub indist_exact: f64,
    pub indist_simple: f64,
    pub transmitted_fraction: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffTable {
    pub rep_rate: f64,
    pub chain_product: f64,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffTable {
    pub fn row_for(&self, tau_mod: f64) -> Option<&TradeoffRow> {
        self.rows
            .iter()
            .find(|r| (r.tau_mod - tau_mod).abs() <= 1e-12 * tau_mod.abs().max(1.0))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "tau_mod_ns",
            "delay_ns",
            "indist_exact",
            "indist_simple",
            "fraction",
            "rate_hz",
        ])?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.tau_mod),
                format!("{:.9}", r.delay_opt),
                format!("{:.9}", r.indist_exact),
                format!("{:.9}", r.indist_simple),
                format!("{:.9}", r.transmitted_fraction),
                format!("{:.6}", r.rate),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Back-of-envelope estimate `min(1, T2 / (2 min(tau_mod, T1)))`: the
/// window cannot be longer than the photon itself.
pub fn indist_simple(model: &EmitterModel, tau_mod: f64) -> f64 {
    (model.tau_coh / (2.0 * tau_mod.min(model.tau_sp))).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepSettings {
    pub eom: EomParams,
    pub objective: DelayObjective,
    pub delay_range: DelayRange,
    pub dt: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            eom: EomParams {
                v_pi: 4.0,
                extinction_db: f64::INFINITY,
                t_max: 1.0,
                bias_phase: 0.0,
            },
            objective: DelayObjective::Fraction,
            delay_range: DelayRange::default(),
            dt: DEFAULT_DT,
        }
    }
}

/// One row per Gaussian window FWHM `tau_mod`; an infinite width means the
/// modulator is removed. Rows are evaluated in parallel.
pub fn tradeoff_sweep(
    model: &EmitterModel,
    tau_range: &[f64],
    rep_rate: f64,
    chain: &EfficiencyChain,
    settings: &SweepSettings,
) -> Result<TradeoffTable> {
    if tau_range.is_empty() {
        return Err(invalid("tau_range", "must not be empty"));
    }
    if !(rep_rate > 0.0) {
        return Err(invalid("rep_rate", "must be positive"));
    }
    let grid = model.default_grid(settings.dt)?;
    let weights = EmissionWeights::new(model, &grid)?;
    let product = chain.product();
    let rows = tau_range
        .par_iter()
        .map(|&tau| sweep_row(model, &grid, &weights, tau, rep_rate, product, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffTable {
        rep_rate,
        chain_product: product,
        rows,
    })
}

fn sweep_row(
    model: &EmitterModel,
    grid: &TimeGrid,
    weights: &EmissionWeights,
    tau: f64,
    rep_rate: f64,
    product: f64,
    settings: &SweepSettings,
) -> Result<TradeoffRow> {
    if !(tau > 0.0) {
        return Err(invalid(
            "tau_range",
            format!("window widths must be positive, got {tau}"),
        ));
    }
    let (delay, env): (f64, Box<dyn TransmissionProfile>) = if tau.is_infinite() {
        (0.0, Box::new(Unmodulated))
    } else {
        let drive = gaussian_drive(&settings.eom, settings.eom.v_pi, tau, 0.0, false)?;
        let env = Modulation::new(drive, settings.eom);
        let opt = optimal_delay(model, &env, settings.objective, settings.delay_range, grid)?;
        (opt.delay, Box::new(env))
    };
    let fraction = weights.fraction(env.as_ref(), delay);
    let exact = weights.indistinguishability(model, env.as_ref(), delay)?;
    Ok(TradeoffRow {
        tau_mod: tau,
        delay_opt: delay,
        indist_exact: exact,
        indist_simple: indist_simple(model, tau),
        transmitted_fraction: fraction,
        rate: rep_rate * product * fraction,
    })
}

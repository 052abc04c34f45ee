//! Scenario files (TOML) and their validation into runnable plans.

use std::path::Path;

use eomshape::analyze::{DelayObjective, DelayRange, EfficiencyChain};
use eomshape::detect::{DetectorModel, TimingConfig};
use eomshape::emitter::{coherence_params, EmitterModel};
use eomshape::eomod::{gaussian_drive, DriveWaveform, EomParams};
use eomshape::sigcore::DEFAULT_DT;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown preset `{0}` (available: fig2, fig3a, fig3b, tradeoff, laser-cal)")]
    UnknownPreset(String),
}

fn bad(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Rewrites a core error as a config error on `key`.
fn at(key: &str) -> impl Fn(eomshape::Error) -> ConfigError + '_ {
    move |e| match e {
        eomshape::Error::InvalidParameter { reason, .. } => bad(key, reason),
        other => bad(key, other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Measure,
    Tradeoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    QuantumDot,
    CwLaser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    None,
    Gaussian,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterBlock {
    pub tau_sp_ns: f64,
    pub tau_coh_ns: f64,
    #[serde(default)]
    pub wavelength_nm: Option<f64>,
}

impl Default for EmitterBlock {
    fn default() -> Self {
        Self {
            tau_sp_ns: 1.4,
            tau_coh_ns: 0.28,
            wavelength_nm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EomBlock {
    #[serde(rename = "v_pi_V")]
    pub v_pi: f64,
    /// dB; `inf` for an ideal modulator.
    pub extinction_db: f64,
    pub t_max: f64,
    /// Extra bias phase (rad) on top of the shape's nominal bias.
    pub bias: f64,
}

impl Default for EomBlock {
    fn default() -> Self {
        Self {
            v_pi: 4.0,
            extinction_db: 20.0,
            t_max: 1.0,
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationBlock {
    pub shape: Shape,
    #[serde(default, rename = "v_peak_V")]
    pub v_peak: Option<f64>,
    #[serde(default)]
    pub optical_fwhm_ns: Option<f64>,
    #[serde(default)]
    pub delay_ns: Vec<f64>,
    #[serde(default)]
    pub inverted: bool,
    #[serde(default)]
    pub allow_sub_minimum_width: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingBlock {
    pub t_rep_ns: f64,
    pub gate_divider: u64,
    pub t_gate_ns: f64,
    pub gate_offset_ns: f64,
    pub n_pulses: u64,
    /// cw source only: detections to aim for per case.
    pub target_counts: Option<u64>,
}

impl Default for TimingBlock {
    fn default() -> Self {
        let r = TimingConfig::reference(1_000_000);
        Self {
            t_rep_ns: r.t_rep,
            gate_divider: r.gate_divider,
            t_gate_ns: r.t_gate,
            gate_offset_ns: r.gate_offset,
            n_pulses: r.n_pulses,
            target_counts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorBlock {
    pub jitter_fwhm_ns: f64,
    pub efficiency: f64,
    pub dark_rate_hz: f64,
}

impl Default for DetectorBlock {
    fn default() -> Self {
        Self {
            jitter_fwhm_ns: 0.25,
            efficiency: 1.0,
            dark_rate_hz: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    pub bin_width_ns: f64,
    pub dt_ns: f64,
    pub export_timestamps: bool,
    /// cw source only: probability that a gate registers a photon.
    pub cw_gate_probability: f64,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        Self {
            bin_width_ns: 0.05,
            dt_ns: DEFAULT_DT,
            export_timestamps: false,
            cw_gate_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorBlock {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradeoffBlock {
    /// Gaussian window FWHMs; `inf` removes the modulator.
    pub tau_mod_ns: Vec<f64>,
    pub rep_rate_hz: f64,
    pub objective: DelayObjective,
    pub delay_min_ns: f64,
    pub delay_max_ns: f64,
    pub efficiency: Vec<FactorBlock>,
    /// Replace the chain by the single factor that gives this rate at
    /// `calibrate_tau_ns`.
    pub target_rate_hz: Option<f64>,
    pub calibrate_tau_ns: f64,
}

impl Default for TradeoffBlock {
    fn default() -> Self {
        let r = DelayRange::default();
        Self {
            tau_mod_ns: vec![0.14, 0.3, 0.52, 0.72, 1.4, f64::INFINITY],
            rep_rate_hz: 5e7,
            objective: DelayObjective::Fraction,
            delay_min_ns: r.start,
            delay_max_ns: r.end,
            efficiency: Vec::new(),
            target_rate_hz: None,
            calibrate_tau_ns: 0.14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub emitter: EmitterBlock,
    #[serde(default)]
    pub eom: EomBlock,
    #[serde(default)]
    pub modulation: Vec<ModulationBlock>,
    #[serde(default)]
    pub timing: TimingBlock,
    #[serde(default)]
    pub detector: DetectorBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub tradeoff: TradeoffBlock,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Command-line overrides: seed and total excitation pulses.
    pub fn with_overrides(mut self, seed: Option<u64>, pulses: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(n) = pulses {
            self.timing.n_pulses = n;
        }
        self
    }
}

/// One histogram to simulate: a modulation setting at one delay.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub label: String,
    /// `None` for the unmodulated trace.
    pub drive: Option<DriveWaveform>,
    pub delay: f64,
    pub optical_fwhm: Option<f64>,
}

/// A scenario whose every block has been checked and converted.
#[derive(Debug, Clone)]
pub struct Plan {
    pub scenario: Scenario,
    pub emitter: EmitterModel,
    pub eom: EomParams,
    pub timing: TimingConfig,
    pub detector: DetectorModel,
    pub cases: Vec<Case>,
    pub chain: EfficiencyChain,
    pub delay_range: DelayRange,
    pub warnings: Vec<String>,
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

fn case_label(m: &ModulationBlock, fwhm: Option<f64>, delay: f64) -> String {
    let kind = match (m.shape, m.inverted) {
        (Shape::Gaussian, false) => "gauss",
        (Shape::Gaussian, true) => "notch",
        (Shape::Square, false) => "square",
        (Shape::Square, true) => "square-inv",
        (Shape::None, _) => "unmodulated",
    };
    match fwhm {
        Some(w) => format!("{kind}{:.0}ps_d{:.2}ns", w * 1e3, delay),
        None => kind.to_string(),
    }
}

impl Scenario {
    /// Checks every block before any computation starts.
    pub fn validate(&self) -> Result<Plan, ConfigError> {
        if self.name.trim().is_empty() {
            return Err(bad("name", "must not be empty"));
        }
        if self.name.contains(['/', '\\']) {
            return Err(bad("name", "must not contain path separators"));
        }
        let e = &self.emitter;
        positive("emitter.tau_sp_ns", e.tau_sp_ns)?;
        positive("emitter.tau_coh_ns", e.tau_coh_ns)?;
        let mut emitter = coherence_params(e.tau_sp_ns, e.tau_coh_ns).map_err(at("emitter.tau_coh_ns"))?;
        if let Some(nm) = e.wavelength_nm {
            positive("emitter.wavelength_nm", nm)?;
            emitter = emitter.with_wavelength(nm);
        }

        positive("eom.v_pi_V", self.eom.v_pi)?;
        if !(self.eom.extinction_db > 0.0) {
            return Err(bad(
                "eom.extinction_db",
                "must be positive (use inf for an ideal modulator)",
            ));
        }
        if !(self.eom.t_max > 0.0 && self.eom.t_max <= 1.0) {
            return Err(bad("eom.t_max", "must lie in (0, 1]"));
        }
        if !self.eom.bias.is_finite() {
            return Err(bad("eom.bias", "must be finite"));
        }
        let eom =
            EomParams::new(self.eom.v_pi, self.eom.extinction_db, self.eom.t_max, self.eom.bias).map_err(at("eom"))?;

        let t = &self.timing;
        positive("timing.t_rep_ns", t.t_rep_ns)?;
        positive("timing.t_gate_ns", t.t_gate_ns)?;
        if t.gate_divider < 1 {
            return Err(bad("timing.gate_divider", "must be at least 1"));
        }
        if !t.gate_offset_ns.is_finite() {
            return Err(bad("timing.gate_offset_ns", "must be finite"));
        }
        if t.n_pulses < 1 {
            return Err(bad("timing.n_pulses", "must be at least 1"));
        }
        let timing = TimingConfig {
            t_rep: t.t_rep_ns,
            gate_divider: t.gate_divider,
            t_gate: t.t_gate_ns,
            gate_offset: t.gate_offset_ns,
            delta_t_mod: 0.0,
            n_pulses: t.n_pulses,
        };
        let emit = timing.emission_in_gate();
        if self.mode == Mode::Measure && self.source == Source::QuantumDot && !(0.0..t.t_gate_ns).contains(&emit) {
            return Err(bad(
                "timing.gate_offset_ns",
                format!(
                    "emission at {emit} ns on the gate axis falls outside the {} ns gate",
                    t.t_gate_ns
                ),
            ));
        }
        match (self.source, t.target_counts) {
            (Source::QuantumDot, Some(_)) => {
                return Err(bad("timing.target_counts", "only applies to source = \"cw_laser\""))
            }
            (Source::CwLaser, Some(0)) => return Err(bad("timing.target_counts", "must be at least 1")),
            _ => {}
        }

        let d = &self.detector;
        let detector = DetectorModel::new(d.jitter_fwhm_ns, d.efficiency, d.dark_rate_hz * 1e-9).map_err(|err| {
            let key = match &err {
                eomshape::Error::InvalidParameter {
                    name: "jitter_fwhm", ..
                } => "detector.jitter_fwhm_ns",
                eomshape::Error::InvalidParameter { name: "efficiency", .. } => "detector.efficiency",
                _ => "detector.dark_rate_hz",
            };
            at(key)(err)
        })?;

        let a = &self.analysis;
        positive("analysis.bin_width_ns", a.bin_width_ns)?;
        positive("analysis.dt_ns", a.dt_ns)?;
        if a.dt_ns > a.bin_width_ns {
            return Err(bad("analysis.dt_ns", "must not exceed analysis.bin_width_ns"));
        }
        if a.bin_width_ns >= t.t_gate_ns {
            return Err(bad("analysis.bin_width_ns", "must be shorter than the gate"));
        }
        if !(a.cw_gate_probability > 0.0 && a.cw_gate_probability <= 1.0) {
            return Err(bad("analysis.cw_gate_probability", "must lie in (0, 1]"));
        }

        let mut warnings = Vec::new();
        let mut cases = Vec::new();
        if self.mode == Mode::Measure {
            if self.modulation.is_empty() {
                return Err(bad(
                    "modulation",
                    "measure mode needs at least one [[modulation]] block",
                ));
            }
            for (i, m) in self.modulation.iter().enumerate() {
                let key = |f: &str| format!("modulation[{i}].{f}");
                if m.shape == Shape::None {
                    if m.v_peak.is_some() || m.optical_fwhm_ns.is_some() || m.inverted || !m.delay_ns.is_empty() {
                        return Err(bad(key("shape"), "shape = \"none\" takes no drive parameters"));
                    }
                    cases.push(Case {
                        label: case_label(m, None, 0.0),
                        drive: None,
                        delay: 0.0,
                        optical_fwhm: None,
                    });
                    continue;
                }
                let v_peak = m.v_peak.ok_or_else(|| bad(key("v_peak_V"), "required for a drive"))?;
                let fwhm = m
                    .optical_fwhm_ns
                    .ok_or_else(|| bad(key("optical_fwhm_ns"), "required for a drive"))?;
                positive(&key("optical_fwhm_ns"), fwhm)?;
                if m.delay_ns.is_empty() {
                    return Err(bad(key("delay_ns"), "list at least one delay"));
                }
                if let Some(bad_delay) = m.delay_ns.iter().find(|d| !d.is_finite()) {
                    return Err(bad(key("delay_ns"), format!("delays must be finite, got {bad_delay}")));
                }
                // The window is anchored at the emission time; EOM delays move it.
                let drive = match m.shape {
                    Shape::Gaussian => {
                        gaussian_drive(&eom, v_peak, fwhm, 0.0, m.inverted).map_err(at(&key("v_peak_V")))?
                    }
                    Shape::Square => {
                        if m.inverted {
                            return Err(bad(key("inverted"), "square drives cannot be inverted"));
                        }
                        DriveWaveform::square(v_peak, fwhm, 0.0).map_err(at(&key("optical_fwhm_ns")))?
                    }
                    Shape::None => unreachable!(),
                };
                let notes = drive.check_width(m.allow_sub_minimum_width).map_err(|e| {
                    bad(
                        key("optical_fwhm_ns"),
                        format!("{e}; set allow_sub_minimum_width to override"),
                    )
                })?;
                warnings.extend(
                    notes
                        .into_iter()
                        .map(|n| format!("{}: {n} (override)", key("optical_fwhm_ns"))),
                );
                for &delay in &m.delay_ns {
                    cases.push(Case {
                        label: case_label(m, Some(fwhm), delay),
                        drive: Some(drive.clone()),
                        delay,
                        optical_fwhm: Some(fwhm),
                    });
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for c in &cases {
                if !seen.insert(c.label.clone()) {
                    return Err(bad("modulation", format!("duplicate case `{}`", c.label)));
                }
            }
        }

        let tr = &self.tradeoff;
        let mut chain = EfficiencyChain::unit();
        let delay_range = DelayRange {
            start: tr.delay_min_ns,
            end: tr.delay_max_ns,
        };
        if self.mode == Mode::Tradeoff {
            if tr.tau_mod_ns.is_empty() {
                return Err(bad("tradeoff.tau_mod_ns", "must not be empty"));
            }
            if let Some(v) = tr.tau_mod_ns.iter().find(|v| !(**v > 0.0)) {
                return Err(bad("tradeoff.tau_mod_ns", format!("widths must be positive, got {v}")));
            }
            positive("tradeoff.rep_rate_hz", tr.rep_rate_hz)?;
            if !(delay_range.start.is_finite() && delay_range.end.is_finite() && delay_range.end > delay_range.start) {
                return Err(bad(
                    "tradeoff.delay_max_ns",
                    "delay range must be finite with max > min",
                ));
            }
            chain = EfficiencyChain::new(tr.efficiency.iter().map(|f| (f.name.clone(), f.value)).collect())
                .map_err(at("tradeoff.efficiency"))?;
            if let Some(r) = tr.target_rate_hz {
                positive("tradeoff.target_rate_hz", r)?;
                positive("tradeoff.calibrate_tau_ns", tr.calibrate_tau_ns)?;
                if !tr.efficiency.is_empty() {
                    return Err(bad(
                        "tradeoff.target_rate_hz",
                        "give either explicit efficiency factors or a target rate, not both",
                    ));
                }
            }
        }

        Ok(Plan {
            scenario: self.clone(),
            emitter,
            eom,
            timing,
            detector,
            cases,
            chain,
            delay_range,
            warnings,
        })
    }
}

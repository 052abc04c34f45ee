//! Machine-readable run summary (`report.json`).

use eomshape::analyze::{EfficiencyChain, FitResult, TradeoffRow, TradeoffTable};
use serde::Serialize;

use crate::config::{Mode, Scenario, Source};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub model: String,
    /// `(name, value, ci95)` triples.
    pub params: Vec<(String, f64, f64)>,
    pub reduced_chi2: f64,
    pub range_ns: (f64, f64),
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        Self {
            model: f.model.to_string(),
            params: f.params.iter().map(|p| (p.name.clone(), p.value, p.ci95)).collect(),
            reduced_chi2: f.residual_norm,
            range_ns: f.range,
        }
    }
}

impl FitSummary {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.0 == name).map(|p| p.1)
    }

    pub fn ci95(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.0 == name).map(|p| p.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseSummary {
    pub label: String,
    pub delay_ns: f64,
    pub optical_fwhm_ns: Option<f64>,
    pub inverted: bool,
    pub gated_cycles: u64,
    pub detected: u64,
    pub outside_span: u64,
    /// Largest bin of the analytic (jittered) expectation.
    pub expected_peak: f64,
    pub observed_peak: u64,
    pub observed_peak_t_ns: f64,
    /// Peak of the jitter-free modulated intensity (per ns).
    pub contour_peak: f64,
    pub transmitted_fraction: Option<f64>,
    pub indist_exact: Option<f64>,
    pub envelope_min: Option<f64>,
    pub envelope_floor: Option<f64>,
    pub on_off_db: Option<f64>,
    pub dip_t_ns: Option<f64>,
    pub fit: Option<FitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffSummary {
    pub rep_rate_hz: f64,
    pub chain: Vec<(String, f64)>,
    pub chain_product: f64,
    pub derivation: Option<String>,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffSummary {
    pub fn new(table: &TradeoffTable, chain: &EfficiencyChain, derivation: Option<String>) -> Self {
        Self {
            rep_rate_hz: table.rep_rate,
            chain: chain.factors.clone(),
            chain_product: table.chain_product,
            derivation,
            rows: table.rows.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub mode: Mode,
    pub source: Source,
    pub seed: u64,
    pub n_pulses: u64,
    /// Files written, relative to the output directory, in write order.
    pub outputs: Vec<String>,
    pub cases: Vec<CaseSummary>,
    pub tradeoff: Option<TradeoffSummary>,
    pub warnings: Vec<String>,
    pub duration_s: f64,
}

impl RunReport {
    pub fn new(s: &Scenario, warnings: Vec<String>) -> Self {
        Self {
            name: s.name.clone(),
            mode: s.mode,
            source: s.source,
            seed: s.seed,
            n_pulses: s.timing.n_pulses,
            outputs: Vec::new(),
            cases: Vec::new(),
            tradeoff: None,
            warnings,
            duration_s: 0.0,
        }
    }

    pub fn case(&self, label: &str) -> Option<&CaseSummary> {
        self.cases.iter().find(|c| c.label == label)
    }
}

//! Master-clock scheduling, gated single-photon detection and TCSPC
//! histogramming.
//!
//! Wavepackets handed to the detector live on the gate time axis: `t = 0`
//! is the opening of the SPAD gate of their cycle, so detection times are
//! directly the TCSPC timestamps.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erf;

use crate::eomod::FWHM_PER_SIGMA;
use crate::error::{invalid, Error, Result};
use crate::sigcore::{fmt_time, Wavepacket};

/// Gated cycles simulated per RNG stream.
const CHUNK: u64 = 16_384;
/// Relative slack when assigning a time to a bin, so lattice times that
/// land on an edge up to rounding go to the bin that starts there.
const EDGE_SLACK: f64 = 1e-9;
/// Jitter kernel support in standard deviations.
const KERNEL_SIGMAS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingConfig {
    /// Laser repetition period (ns).
    pub t_rep: f64,
    /// One gate every `gate_divider` laser pulses.
    pub gate_divider: u64,
    /// Gate width (ns).
    pub t_gate: f64,
    /// Gate opening relative to its excitation pulse (ns).
    pub gate_offset: f64,
    /// EOM trigger delay after each excitation pulse (ns).
    pub delta_t_mod: f64,
    /// Excitation pulses in the run.
    pub n_pulses: u64,
}

impl TimingConfig {
    /// 50 MHz laser, 5 MHz gate, 50 ns window opening 2 ns before the pulse.
    pub fn reference(n_pulses: u64) -> Self {
        Self {
            t_rep: 20.0,
            gate_divider: 10,
            t_gate: 50.0,
            gate_offset: -2.0,
            delta_t_mod: 0.0,
            n_pulses,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_rep > 0.0) || !self.t_rep.is_finite() {
            return Err(invalid("t_rep", format!("must be positive, got {}", self.t_rep)));
        }
        if self.gate_divider < 1 {
            return Err(invalid("gate_divider", "must be at least 1"));
        }
        if !(self.t_gate > 0.0) || !self.t_gate.is_finite() {
            return Err(invalid("t_gate", format!("must be positive, got {}", self.t_gate)));
        }
        if !self.gate_offset.is_finite() || !self.delta_t_mod.is_finite() {
            return Err(invalid("gate_offset", "offsets must be finite"));
        }
        if self.n_pulses < 1 {
            return Err(invalid("n_pulses", "must be at least 1"));
        }
        Ok(())
    }

    pub fn gate_rate_hz(&self) -> f64 {
        1e9 / (self.t_rep * self.gate_divider as f64)
    }

    /// Emission time on the gate axis.
    pub fn emission_in_gate(&self) -> f64 {
        -self.gate_offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleRecord {
    pub index: u64,
    pub excitation: f64,
    pub eom_trigger: f64,
    pub gate_open: f64,
    pub gate_close: f64,
    pub gated: bool,
}

/// Deterministic per-cycle timing generated from a [`TimingConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct EventSchedule {
    cfg: TimingConfig,
}

pub fn schedule_events(cfg: &TimingConfig) -> Result<EventSchedule> {
    cfg.validate()?;
    Ok(EventSchedule { cfg: *cfg })
}

impl EventSchedule {
    pub fn config(&self) -> &TimingConfig {
        &self.cfg
    }

    pub fn len(&self) -> u64 {
        self.cfg.n_pulses
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.n_pulses == 0
    }

    pub fn cycle(&self, k: u64) -> CycleRecord {
        let c = &self.cfg;
        let excitation = k as f64 * c.t_rep;
        let gate_open = excitation + c.gate_offset;
        CycleRecord {
            index: k,
            excitation,
            eom_trigger: excitation + c.delta_t_mod,
            gate_open,
            gate_close: gate_open + c.t_gate,
            gated: k.is_multiple_of(c.gate_divider),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = CycleRecord> + '_ {
        (0..self.cfg.n_pulses).map(move |k| self.cycle(k))
    }

    pub fn n_gated(&self) -> u64 {
        self.cfg.n_pulses.div_ceil(self.cfg.gate_divider)
    }

    /// Cycle index of the `j`-th gated cycle.
    pub fn gated_cycle(&self, j: u64) -> u64 {
        j * self.cfg.gate_divider
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectorModel {
    /// Gaussian timing jitter, FWHM (ns).
    pub jitter_fwhm: f64,
    pub efficiency: f64,
    /// Dark counts per ns while the gate is open.
    pub dark_rate: f64,
}

impl DetectorModel {
    pub fn new(jitter_fwhm: f64, efficiency: f64, dark_rate: f64) -> Result<Self> {
        if !(jitter_fwhm >= 0.0) || !jitter_fwhm.is_finite() {
            return Err(invalid(
                "jitter_fwhm",
                format!("must be non-negative, got {jitter_fwhm}"),
            ));
        }
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(invalid("efficiency", format!("must lie in [0, 1], got {efficiency}")));
        }
        if !(dark_rate >= 0.0) || !dark_rate.is_finite() {
            return Err(invalid("dark_rate", format!("must be non-negative, got {dark_rate}")));
        }
        Ok(Self {
            jitter_fwhm,
            efficiency,
            dark_rate,
        })
    }

    pub fn ideal() -> Self {
        Self {
            jitter_fwhm: 0.0,
            efficiency: 1.0,
            dark_rate: 0.0,
        }
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.jitter_fwhm / FWHM_PER_SIGMA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub cycle: u64,
    pub t: f64,
}

/// Detection events of a run plus the number of gates that were armed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimestampStream {
    pub events: Vec<Detection>,
    pub gated_cycles: u64,
}

impl TimestampStream {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().map(|d| d.t)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cycle_index", "t_ns"])?;
        for d in &self.events {
            w.write_record([d.cycle.to_string(), fmt_time(d.t)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Inverse-CDF sampler over the in-gate samples of one wavepacket.
struct ArrivalSampler {
    times: Vec<f64>,
    cumulative: Vec<f64>,
    probability: f64,
}

impl ArrivalSampler {
    fn new(psi: &Wavepacket, t_gate: f64) -> Self {
        let g = psi.grid();
        let mut times = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (k, a) in psi.amplitude().iter().enumerate() {
            let t = g.time(k);
            let w = g.trapezoid_weight(k) * a.norm_sqr() * g.dt();
            if w > 0.0 && (0.0..t_gate).contains(&t) {
                acc += w;
                times.push(t);
                cumulative.push(acc);
            }
        }
        Self {
            times,
            cumulative,
            probability: acc.min(1.0),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let total = *self.cumulative.last().expect("sampled only when non-empty");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.times.len() - 1);
        self.times[i]
    }
}

/// Monte Carlo gated detection.
///
/// Gated cycle `j` sees wavepacket `stream[j % stream.len()]`. A photon is
/// registered with probability `efficiency * (in-gate norm)` at a time drawn
/// from the sample-weighted intensity; dark counts arrive uniformly in the
/// gate; the earliest event of a gate is kept and then jittered.
pub fn detect_mc(
    stream: &[Wavepacket],
    det: &DetectorModel,
    sched: &EventSchedule,
    seed: u64,
) -> Result<TimestampStream> {
    if stream.is_empty() {
        return Err(invalid("stream", "at least one wavepacket is required"));
    }
    let t_gate = sched.config().t_gate;
    let samplers: Vec<ArrivalSampler> = stream.iter().map(|psi| ArrivalSampler::new(psi, t_gate)).collect();
    let n_gated = sched.n_gated();
    let dark_mean = det.dark_rate * t_gate;
    let dark = if dark_mean > 0.0 {
        Some(Poisson::new(dark_mean).map_err(|e| invalid("dark_rate", e.to_string()))?)
    } else {
        None
    };
    let sigma = det.jitter_sigma();
    let jitter = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).expect("finite sigma"))
    } else {
        None
    };

    let n_chunks = n_gated.div_ceil(CHUNK);
    let chunks: Vec<Vec<Detection>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let mut out = Vec::new();
            let end = ((c + 1) * CHUNK).min(n_gated);
            for j in c * CHUNK..end {
                let sampler = &samplers[(j % samplers.len() as u64) as usize];
                let mut arrival = None;
                if rng.random::<f64>() < det.efficiency * sampler.probability {
                    arrival = Some(sampler.sample(&mut rng));
                }
                if let Some(d) = &dark {
                    let n: f64 = d.sample(&mut rng);
                    for _ in 0..n as u64 {
                        let t = rng.random::<f64>() * t_gate;
                        arrival = Some(arrival.map_or(t, |a: f64| a.min(t)));
                    }
                }
                if let Some(mut t) = arrival {
                    if let Some(jit) = &jitter {
                        t += jit.sample(&mut rng);
                    }
                    out.push(Detection {
                        cycle: sched.gated_cycle(j),
                        t,
                    });
                }
            }
            out
        })
        .collect();

    Ok(TimestampStream {
        events: chunks.into_iter().flatten().collect(),
        gated_cycles: n_gated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Events before t = 0.
    pub underflow: u64,
    /// Events at or after the end of the last bin.
    pub overflow: u64,
    /// Gated cycles (trials) behind the counts.
    pub total_pulses: u64,
}

fn bin_count(bin_width: f64, span: f64) -> Result<usize> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(invalid("bin_width", format!("must be positive, got {bin_width}")));
    }
    if !(span > 0.0) || !span.is_finite() {
        return Err(invalid("span", format!("must be positive, got {span}")));
    }
    Ok(((span / bin_width) - EDGE_SLACK).ceil().max(1.0) as usize)
}

#[inline]
fn bin_index(t: f64, bin_width: f64) -> Option<usize> {
    if t < 0.0 {
        return None;
    }
    Some((t / bin_width + EDGE_SLACK).floor() as usize)
}

impl Histogram {
    pub fn empty(bin_width: f64, span: f64, total_pulses: u64) -> Result<Self> {
        Ok(Self {
            bin_width,
            counts: vec![0; bin_count(bin_width, span)?],
            underflow: 0,
            overflow: 0,
            total_pulses,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn span(&self) -> f64 {
        self.counts.len() as f64 * self.bin_width
    }

    pub fn bin_start(&self, j: usize) -> f64 {
        j as f64 * self.bin_width
    }

    pub fn bin_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.bin_width
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|j| self.bin_start(j)).collect()
    }

    pub fn total_detected(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, t: f64) {
        match bin_index(t, self.bin_width) {
            None => self.underflow += 1,
            Some(j) if j >= self.counts.len() => self.overflow += 1,
            Some(j) => self.counts[j] += 1,
        }
    }

    /// Adds another histogram with identical binning.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if other.counts.len() != self.counts.len() || other.bin_width != self.bin_width {
            return Err(Error::GridMismatch("histograms have different binning".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self.total_pulses += other.total_pulses;
        Ok(())
    }

    /// A copy with every count multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        Self {
            counts: self.counts.iter().map(|c| c * k).collect(),
            underflow: self.underflow * k,
            overflow: self.overflow * k,
            total_pulses: self.total_pulses * k,
            ..self.clone()
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_start_ns", "count"])?;
        for (j, c) in self.counts.iter().enumerate() {
            w.write_record([fmt_time(self.bin_start(j)), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `bin_start_ns,count` rows. Bins must be contiguous from 0.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["bin_start_ns", "count"] {
            return Err(invalid(
                "csv",
                format!("expected header bin_start_ns,count, got {headers:?}"),
            ));
        }
        let mut starts = Vec::new();
        let mut counts = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let parse_err = |what: &str| invalid("csv", format!("line {line}: cannot parse {what}"));
            let start: f64 = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err("bin_start_ns"))?;
            let count: u64 = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err("count"))?;
            starts.push(start);
            counts.push(count);
        }
        let bin_width = match starts.as_slice() {
            [] => return Err(invalid("csv", "histogram has no bins")),
            [_] => return Err(invalid("csv", "cannot infer bin width from a single bin")),
            [a, b, ..] => b - a,
        };
        if !(bin_width > 0.0) {
            return Err(invalid("csv", "bin starts must increase"));
        }
        let total = counts.iter().sum();
        Ok(Self {
            bin_width,
            counts,
            underflow: 0,
            overflow: 0,
            total_pulses: total,
        })
    }
}

/// TCSPC histogram of a detection stream over `[0, span]`.
pub fn histogram(stream: &TimestampStream, bin_width: f64, span: f64) -> Result<Histogram> {
    let mut h = Histogram::empty(bin_width, span, stream.gated_cycles)?;
    for t in stream.times() {
        h.add(t);
    }
    Ok(h)
}

/// Histogram of bare timestamps; `total_pulses` is the number of timestamps.
pub fn histogram_times(times: &[f64], bin_width: f64, span: f64) -> Result<Histogram> {
    let mut h = Histogram::empty(bin_width, span, times.len() as u64)?;
    for &t in times {
        h.add(t);
    }
    Ok(h)
}

/// Noise-free expected counts per bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectedHistogram {
    pub bin_width: f64,
    pub expected: Vec<f64>,
}

impl ExpectedHistogram {
    pub fn bin_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.bin_width
    }

    pub fn total(&self) -> f64 {
        self.expected.iter().sum()
    }

    /// Largest expected bin content and its index.
    pub fn peak(&self) -> (usize, f64) {
        self.expected
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, v)| if v > b.1 { (j, v) } else { b })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_start_ns", "expected"])?;
        for (j, e) in self.expected.iter().enumerate() {
            w.write_record([fmt_time(j as f64 * self.bin_width), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Expected histogram of `n_gated` trials: the sample-weighted intensity of
/// `psi` smeared by the Gaussian jitter kernel and integrated over each bin,
/// scaled by `n_gated * efficiency`, plus uniform dark counts at first order.
pub fn analytic_histogram(
    psi: &Wavepacket,
    det: &DetectorModel,
    n_gated: u64,
    bin_width: f64,
    span: f64,
) -> Result<ExpectedHistogram> {
    let n_bins = bin_count(bin_width, span)?;
    let mut expected = vec![0.0; n_bins];
    let g = psi.grid();
    let scale = n_gated as f64 * det.efficiency;
    let sigma = det.jitter_sigma();

    for (k, a) in psi.amplitude().iter().enumerate() {
        let p = g.trapezoid_weight(k) * a.norm_sqr() * g.dt() * scale;
        if p == 0.0 {
            continue;
        }
        let t = g.time(k);
        if sigma == 0.0 {
            if let Some(j) = bin_index(t, bin_width) {
                if j < n_bins {
                    expected[j] += p;
                }
            }
            continue;
        }
        let lo = ((t - KERNEL_SIGMAS * sigma) / bin_width).floor().max(0.0) as usize;
        let hi = (((t + KERNEL_SIGMAS * sigma) / bin_width).floor() + 1.0).min(n_bins as f64);
        if hi <= 0.0 {
            continue;
        }
        let hi = hi as usize;
        let mut prev = normal_cdf((lo as f64 * bin_width - t) / sigma);
        for (j, slot) in expected.iter_mut().enumerate().take(hi).skip(lo) {
            let next = normal_cdf(((j + 1) as f64 * bin_width - t) / sigma);
            *slot += p * (next - prev);
            prev = next;
        }
    }

    if det.dark_rate > 0.0 {
        let per_bin = n_gated as f64 * det.dark_rate * bin_width;
        for slot in &mut expected {
            *slot += per_bin;
        }
    }

    Ok(ExpectedHistogram { bin_width, expected })
}

/// Fraction of bins whose count lies within `k_sigma` Poisson standard
/// deviations of the expectation.
pub fn poisson_band_fraction(h: &Histogram, e: &ExpectedHistogram, k_sigma: f64) -> Result<f64> {
    if h.counts.len() != e.expected.len() {
        return Err(Error::GridMismatch("histogram and expectation differ in length".into()));
    }
    let inside = h
        .counts
        .iter()
        .zip(&e.expected)
        .filter(|(&c, &mu)| (c as f64 - mu).abs() <= k_sigma * mu.sqrt())
        .count();
    Ok(inside as f64 / h.counts.len() as f64)
}

/// Pearson chi-square over bins with expectation at least `min_expected`;
/// returns `(chi2, bins used)`.
pub fn pearson_chi2(h: &Histogram, e: &ExpectedHistogram, min_expected: f64) -> Result<(f64, usize)> {
    if h.counts.len() != e.expected.len() {
        return Err(Error::GridMismatch("histogram and expectation differ in length".into()));
    }
    let mut chi2 = 0.0;
    let mut used = 0;
    for (&c, &mu) in h.counts.iter().zip(&e.expected) {
        if mu >= min_expected {
            chi2 += (c as f64 - mu).powi(2) / mu;
            used += 1;
        }
    }
    Ok((chi2, used))
}

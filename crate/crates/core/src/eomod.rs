//! Pulse generator and Mach-Zehnder intensity modulator.
//!
//! Transfer law: `T = floor + (t_max - floor) sin^2(pi V / (2 V_pi) + bias)`
//! with `floor = t_max 10^(-extinction_db / 10)`. Gaussian drives are
//! synthesized so that the OPTICAL intensity envelope above the floor is an
//! exact Gaussian of the requested FWHM; the voltage waveform itself is the
//! arcsine pre-distortion of that Gaussian through the sin^2 transfer.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::sigcore::{fmt_time, TimeGrid, Wavepacket};

/// FWHM to standard deviation for a Gaussian: `2 sqrt(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Shortest pulse of the pulse generator (ns).
pub const GENERATOR_MIN_FWHM: f64 = 0.3;
/// Approximate shortest window of a 10 GHz modulator (ns).
pub const MODULATOR_MIN_FWHM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EomParams {
    pub v_pi: f64,
    /// On/off ratio in dB; `f64::INFINITY` gives an ideal zero floor.
    pub extinction_db: f64,
    pub t_max: f64,
    /// Trim of the DC operating point (rad), added to the shape's nominal
    /// bias (null for upright pulses, maximum for notches).
    pub bias_phase: f64,
}

impl EomParams {
    pub fn new(v_pi: f64, extinction_db: f64, t_max: f64, bias_phase: f64) -> Result<Self> {
        if !(v_pi > 0.0) || !v_pi.is_finite() {
            return Err(invalid("v_pi", format!("must be positive, got {v_pi}")));
        }
        if !(extinction_db > 0.0) {
            return Err(invalid(
                "extinction_db",
                format!("must be positive, got {extinction_db}"),
            ));
        }
        if !(t_max > 0.0 && t_max <= 1.0) {
            return Err(invalid("t_max", format!("must lie in (0, 1], got {t_max}")));
        }
        if !bias_phase.is_finite() {
            return Err(invalid("bias_phase", "must be finite"));
        }
        Ok(Self {
            v_pi,
            extinction_db,
            t_max,
            bias_phase,
        })
    }

    /// V_pi = 4 V, 20 dB extinction, lossless.
    pub fn reference() -> Self {
        Self::new(4.0, 20.0, 1.0, 0.0).expect("valid constants")
    }

    /// Infinite extinction (zero floor).
    pub fn ideal(v_pi: f64) -> Result<Self> {
        Self::new(v_pi, f64::INFINITY, 1.0, 0.0)
    }

    pub fn floor(&self) -> f64 {
        self.t_max * 10f64.powf(-self.extinction_db / 10.0)
    }

    /// Intensity transmission for drive voltage `v` at total bias `bias`.
    #[inline]
    pub fn transfer(&self, v: f64, bias: f64) -> f64 {
        let floor = self.floor();
        let s = (PI * v / (2.0 * self.v_pi) + bias).sin();
        (floor + (self.t_max - floor) * s * s).clamp(floor, self.t_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveShape {
    Gaussian,
    InvertedGaussian,
    Square,
    /// `(t, V)` breakpoints relative to the drive delay, linearly interpolated.
    Piecewise(Vec<(f64, f64)>),
}

impl DriveShape {
    /// Nominal operating point: transmission null, or maximum for notches.
    pub fn nominal_bias(&self) -> f64 {
        match self {
            DriveShape::InvertedGaussian => FRAC_PI_2,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriveWaveform {
    pub shape: DriveShape,
    pub v_peak: f64,
    /// Electrical FWHM of the voltage pulse (ns).
    pub fwhm: f64,
    /// Target optical-intensity FWHM for synthesized Gaussian drives (ns).
    pub optical_fwhm: Option<f64>,
    /// Pulse center relative to the trigger (ns).
    pub delay: f64,
    pub baseline: f64,
    /// V_pi and bias trim the Gaussian pre-distortion was computed for.
    design_v_pi: f64,
    design_bias: f64,
}

/// Synthesizes the drive whose optical envelope (above the floor) is a
/// Gaussian of FWHM `fwhm_optical` peaking at `sin^2(pi v_peak / 2 V_pi)` of
/// the full swing. `inverted` turns it into a notch from `t_max` down.
pub fn gaussian_drive(
    params: &EomParams,
    v_peak: f64,
    fwhm_optical: f64,
    delay: f64,
    inverted: bool,
) -> Result<DriveWaveform> {
    if !(fwhm_optical > 0.0) || !fwhm_optical.is_finite() {
        return Err(invalid("optical_fwhm", format!("must be positive, got {fwhm_optical}")));
    }
    if !delay.is_finite() {
        return Err(invalid("delay", "must be finite"));
    }
    if !(v_peak > 0.0) {
        return Err(Error::TransferSaturation(format!(
            "peak drive {v_peak} V produces no optical pulse"
        )));
    }
    if v_peak > params.v_pi * (1.0 + 1e-12) {
        return Err(Error::TransferSaturation(format!(
            "peak drive {v_peak} V exceeds V_pi = {} V; the sin^2 transfer folds over and the \
             optical pulse is no longer single-peaked",
            params.v_pi
        )));
    }
    let theta = (FRAC_PI_2 * v_peak / params.v_pi).min(FRAC_PI_2);
    // Voltage falls to v_peak/2 where the optical Gaussian equals this level.
    let g_half = ((0.5 * theta).sin() / theta.sin()).powi(2);
    let sigma = fwhm_optical / FWHM_PER_SIGMA;
    let fwhm = 2.0 * sigma * (-2.0 * g_half.ln()).sqrt();
    Ok(DriveWaveform {
        shape: if inverted {
            DriveShape::InvertedGaussian
        } else {
            DriveShape::Gaussian
        },
        v_peak,
        fwhm,
        optical_fwhm: Some(fwhm_optical),
        delay,
        baseline: 0.0,
        design_v_pi: params.v_pi,
        design_bias: params.bias_phase,
    })
}

impl DriveWaveform {
    pub fn square(v_peak: f64, width: f64, delay: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(invalid("fwhm", format!("must be positive, got {width}")));
        }
        Ok(Self {
            shape: DriveShape::Square,
            v_peak,
            fwhm: width,
            optical_fwhm: None,
            delay,
            baseline: 0.0,
            design_v_pi: f64::NAN,
            design_bias: 0.0,
        })
    }

    pub fn piecewise(points: Vec<(f64, f64)>, delay: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("piecewise", "needs at least two breakpoints"));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(invalid("piecewise", "breakpoint times must increase"));
        }
        let v_peak = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let span = points.last().unwrap().0 - points[0].0;
        Ok(Self {
            shape: DriveShape::Piecewise(points),
            v_peak,
            fwhm: span,
            optical_fwhm: None,
            delay,
            baseline: 0.0,
            design_v_pi: f64::NAN,
            design_bias: 0.0,
        })
    }

    pub fn is_inverted(&self) -> bool {
        matches!(self.shape, DriveShape::InvertedGaussian)
    }

    /// The same waveform moved to a new trigger delay.
    pub fn delayed(&self, delay: f64) -> Self {
        Self { delay, ..self.clone() }
    }

    /// Drive voltage at time `t` (trigger frame).
    pub fn voltage_at(&self, t: f64) -> f64 {
        let x = t - self.delay;
        match &self.shape {
            DriveShape::Gaussian | DriveShape::InvertedGaussian => {
                self.baseline + self.precompensated(self.optical_shape(x))
            }
            DriveShape::Square => {
                if x.abs() <= 0.5 * self.fwhm {
                    self.v_peak
                } else {
                    self.baseline
                }
            }
            DriveShape::Piecewise(points) => {
                let first = points[0];
                let last = points[points.len() - 1];
                if x < first.0 || x > last.0 {
                    return self.baseline;
                }
                let i = points.partition_point(|p| p.0 <= x).clamp(1, points.len() - 1);
                let (a, b) = (points[i - 1], points[i]);
                a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
            }
        }
    }

    /// Normalized optical Gaussian `g(x)` of the synthesized drive.
    fn optical_shape(&self, x: f64) -> f64 {
        let sigma = self.optical_fwhm.unwrap_or(self.fwhm) / FWHM_PER_SIGMA;
        (-x * x / (2.0 * sigma * sigma)).exp()
    }

    fn precompensated(&self, g: f64) -> f64 {
        let theta = FRAC_PI_2 * self.v_peak / self.design_v_pi;
        let phase = (theta.sin() * g.sqrt()).clamp(-1.0, 1.0).asin();
        (phase - self.design_bias) * 2.0 * self.design_v_pi / PI
    }

    /// Bandwidth-limit notices (pulse generator, modulator).
    pub fn bandwidth_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.fwhm < GENERATOR_MIN_FWHM {
            out.push(format!(
                "electrical FWHM {:.0} ps is below the {:.0} ps pulse-generator minimum",
                self.fwhm * 1e3,
                GENERATOR_MIN_FWHM * 1e3
            ));
        }
        let optical = self.optical_fwhm.unwrap_or(self.fwhm);
        if optical < MODULATOR_MIN_FWHM {
            out.push(format!(
                "optical FWHM {:.0} ps is beyond the ~{:.0} ps reach of a 10 GHz modulator",
                optical * 1e3,
                MODULATOR_MIN_FWHM * 1e3
            ));
        }
        out
    }

    /// Enforces the minimum pulse width unless `allow_override` is set, in
    /// which case the violations come back as warnings.
    pub fn check_width(&self, allow_override: bool) -> Result<Vec<String>> {
        let warnings = self.bandwidth_warnings();
        if !warnings.is_empty() && !allow_override {
            return Err(invalid("fwhm", warnings.join("; ")));
        }
        Ok(warnings)
    }
}

/// Anything that can report an intensity transmission at an arbitrary time.
pub trait TransmissionProfile: Sync {
    fn transmission_at(&self, t: f64) -> f64;
}

/// Unit transmission everywhere (modulator removed, bias at maximum).
#[derive(Debug, Clone, Copy, Default)]
pub struct Unmodulated;

impl TransmissionProfile for Unmodulated {
    fn transmission_at(&self, _t: f64) -> f64 {
        1.0
    }
}

/// A drive waveform paired with the modulator it drives.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub drive: DriveWaveform,
    pub eom: EomParams,
}

impl Modulation {
    pub fn new(drive: DriveWaveform, eom: EomParams) -> Self {
        Self { drive, eom }
    }

    pub fn bias(&self) -> f64 {
        self.drive.shape.nominal_bias() + self.eom.bias_phase
    }

    pub fn envelope(&self, grid: &TimeGrid) -> TransmissionEnvelope {
        mz_transmission(&self.drive, &self.eom, grid)
    }
}

impl TransmissionProfile for Modulation {
    #[inline]
    fn transmission_at(&self, t: f64) -> f64 {
        self.eom.transfer(self.drive.voltage_at(t), self.bias())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionEnvelope {
    pub grid: TimeGrid,
    pub transmission: Vec<f64>,
    pub floor: f64,
    pub t_max: f64,
}

impl TransmissionEnvelope {
    /// Constant transmission, e.g. the unity envelope.
    pub fn constant(grid: TimeGrid, value: f64) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(invalid("transmission", format!("must lie in (0, 1], got {value}")));
        }
        Ok(Self {
            grid,
            transmission: vec![value; grid.len()],
            floor: value,
            t_max: value,
        })
    }

    /// Max over min transmission, in dB.
    pub fn on_off_ratio_db(&self) -> f64 {
        let max = self.transmission.iter().copied().fold(f64::MIN, f64::max);
        let min = self.transmission.iter().copied().fold(f64::MAX, f64::min);
        10.0 * (max / min).log10()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ns", "transmission"])?;
        for (t, v) in self.grid.times().zip(&self.transmission) {
            w.write_record([fmt_time(t), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl TransmissionProfile for TransmissionEnvelope {
    /// Linear interpolation, holding the edge values outside the grid.
    fn transmission_at(&self, t: f64) -> f64 {
        let p = self.grid.position(t);
        let last = self.transmission.len() - 1;
        if p <= 0.0 {
            return self.transmission[0];
        }
        if p >= last as f64 {
            return self.transmission[last];
        }
        let i = p.floor() as usize;
        let f = p - i as f64;
        self.transmission[i] * (1.0 - f) + self.transmission[(i + 1).min(last)] * f
    }
}

/// Samples the modulator transmission for `drive` on `grid`.
pub fn mz_transmission(drive: &DriveWaveform, params: &EomParams, grid: &TimeGrid) -> TransmissionEnvelope {
    let bias = drive.shape.nominal_bias() + params.bias_phase;
    TransmissionEnvelope {
        grid: *grid,
        transmission: grid
            .times()
            .map(|t| params.transfer(drive.voltage_at(t), bias))
            .collect(),
        floor: params.floor(),
        t_max: params.t_max,
    }
}

/// Rounds a delay to the nearest whole step; the flag reports a change.
pub fn snap_delay(delay: f64, dt: f64) -> (f64, bool) {
    let snapped = (delay / dt).round() * dt;
    (snapped, (snapped - delay).abs() > 1e-9 * dt)
}

/// `psi'(t) = sqrt(T(t - delta_t_mod)) psi(t)`.
///
/// The envelope grid must share the wavepacket's step and sample lattice;
/// the delay is rounded to a whole number of steps and the envelope's edge
/// values are held outside its span.
pub fn apply_modulation(psi: &Wavepacket, env: &TransmissionEnvelope, delta_t_mod: f64) -> Result<Wavepacket> {
    let g = psi.grid();
    if !g.is_aligned_with(&env.grid) {
        return Err(Error::GridMismatch(format!(
            "envelope grid (start {}, dt {}) is not aligned with the wavepacket grid (start {}, dt {})",
            env.grid.t_start(),
            env.grid.dt(),
            g.t_start(),
            g.dt()
        )));
    }
    if !delta_t_mod.is_finite() {
        return Err(invalid("delta_t_mod", "must be finite"));
    }
    let offset = ((g.t_start() - env.grid.t_start()) / g.dt()).round() as i64;
    let shift = (delta_t_mod / g.dt()).round() as i64;
    let last = env.transmission.len() as i64 - 1;
    let amplitude: Vec<Complex64> = psi
        .amplitude()
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let j = (k as i64 + offset - shift).clamp(0, last) as usize;
            let t = env.transmission[j];
            if t == 1.0 {
                *a
            } else {
                a * t.sqrt()
            }
        })
        .collect();
    Wavepacket::new(*g, amplitude)
}

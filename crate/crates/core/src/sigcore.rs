//! Uniform time grids and the sampled signals that live on them.
//!
//! All times are in nanoseconds. Wavepacket amplitudes are in ns^(-1/2), so
//! that `|psi|^2` is a detection-time probability density in ns^-1.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sampling step (1 ps).
pub const DEFAULT_DT: f64 = 1e-3;

const STEP_TOLERANCE: f64 = 1e-9;

/// Uniformly sampled time axis `t_k = t_start + k*dt`, `k = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    dt: f64,
    n: usize,
    /// Set when the requested end was not a whole number of steps away and
    /// was snapped down to the last full step.
    snapped: bool,
}

impl TimeGrid {
    /// Builds the grid covering `[t_start, t_end]`.
    ///
    /// If `(t_end - t_start) / dt` is not an integer the end is snapped down
    /// to the last full step and [`TimeGrid::was_snapped`] reports it.
    pub fn new(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidGrid("bounds must be finite".into()));
        }
        if !(t_end > t_start) {
            return Err(Error::InvalidGrid(format!(
                "t_end ({t_end}) must be greater than t_start ({t_start})"
            )));
        }
        let ratio = (t_end - t_start) / dt;
        let nearest = ratio.round();
        let (steps, snapped) = if (ratio - nearest).abs() <= STEP_TOLERANCE * ratio.max(1.0) {
            (nearest, false)
        } else {
            (ratio.floor(), true)
        };
        if steps < 1.0 {
            return Err(Error::InvalidGrid(format!(
                "span {} ns holds no full step of {dt} ns",
                t_end - t_start
            )));
        }
        Ok(Self {
            t_start,
            dt,
            n: steps as usize + 1,
            snapped,
        })
    }

    /// Grid with an explicit sample count.
    pub fn with_samples(t_start: f64, dt: f64, n: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t_start.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if n < 2 {
            return Err(Error::InvalidGrid("a grid needs at least two samples".into()));
        }
        Ok(Self {
            t_start,
            dt,
            n,
            snapped: false,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n - 1)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn was_snapped(&self) -> bool {
        self.snapped
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |k| self.time(k))
    }

    /// Trapezoid weight of sample `k` in units of `dt`.
    #[inline]
    pub fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k + 1 == self.n {
            0.5
        } else {
            1.0
        }
    }

    /// Fractional sample position of time `t`.
    pub fn position(&self, t: f64) -> f64 {
        (t - self.t_start) / self.dt
    }

    /// Index of the sample nearest to `t`, if `t` lies on the grid span.
    pub fn nearest_index(&self, t: f64) -> Option<usize> {
        let p = self.position(t).round();
        if p < 0.0 || p >= self.n as f64 {
            None
        } else {
            Some(p as usize)
        }
    }

    /// Whether two grids share the step and their sample lattices coincide.
    pub fn is_aligned_with(&self, other: &TimeGrid) -> bool {
        if (self.dt - other.dt).abs() > STEP_TOLERANCE * self.dt {
            return false;
        }
        let offset = (other.t_start - self.t_start) / self.dt;
        (offset - offset.round()).abs() <= 1e-6
    }

    /// Trapezoid-rule integral of samples on this grid.
    pub fn integrate(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        let mut sum = 0.0;
        for (k, v) in values.into_iter().enumerate() {
            sum += self.trapezoid_weight(k) * v;
        }
        sum * self.dt
    }
}

/// Complex single-photon amplitude sampled on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Wavepacket {
    grid: TimeGrid,
    amplitude: Vec<Complex64>,
}

impl Wavepacket {
    pub fn new(grid: TimeGrid, amplitude: Vec<Complex64>) -> Result<Self> {
        if amplitude.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} amplitudes for a grid of {} samples",
                amplitude.len(),
                grid.len()
            )));
        }
        if amplitude.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "amplitude",
                reason: "non-finite sample".into(),
            });
        }
        Ok(Self { grid, amplitude })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            amplitude: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn amplitude(&self) -> &[Complex64] {
        &self.amplitude
    }

    pub fn into_amplitude(self) -> Vec<Complex64> {
        self.amplitude
    }

    /// `|psi(t_k)|^2` per sample.
    pub fn intensity(&self) -> IntensityTrace {
        IntensityTrace {
            grid: self.grid,
            value: self.amplitude.iter().map(|a| a.norm_sqr()).collect(),
        }
    }

    /// Total detection probability, trapezoid rule.
    pub fn norm(&self) -> f64 {
        norm(self)
    }

    /// Multiplies every sample by `e^{i phase_k}`.
    pub fn with_phase(&self, phase: &[f64]) -> Result<Self> {
        if phase.len() != self.amplitude.len() {
            return Err(Error::GridMismatch(format!(
                "phase has {} samples, wavepacket {}",
                phase.len(),
                self.amplitude.len()
            )));
        }
        let amplitude = self
            .amplitude
            .iter()
            .zip(phase)
            .map(|(a, &p)| a * Complex64::from_polar(1.0, p))
            .collect();
        Ok(Self {
            grid: self.grid,
            amplitude,
        })
    }

    /// Writes `t_ns,re,im` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ns", "re", "im"])?;
        for (t, a) in self.grid.times().zip(&self.amplitude) {
            w.write_record([fmt_time(t), a.re.to_string(), a.im.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `sum_k w_k |psi_k|^2 dt` with trapezoid weights.
pub fn norm(psi: &Wavepacket) -> f64 {
    psi.grid.integrate(psi.amplitude.iter().map(|a| a.norm_sqr()))
}

/// Non-negative real samples (counts or rates) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    grid: TimeGrid,
    value: Vec<f64>,
}

impl IntensityTrace {
    pub fn new(grid: TimeGrid, value: Vec<f64>) -> Result<Self> {
        if value.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} samples",
                value.len(),
                grid.len()
            )));
        }
        if let Some(bad) = value.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "value",
                reason: format!("trace samples must be finite and non-negative, got {bad}"),
            });
        }
        Ok(Self { grid, value })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let value = grid.times().map(f).collect();
        Self::new(grid, value)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    pub fn integral(&self) -> f64 {
        self.grid.integrate(self.value.iter().copied())
    }

    /// Sample index and value of the first global maximum.
    pub fn peak(&self) -> (usize, f64) {
        self.value.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (k, v)| if v > best.1 { (k, v) } else { best },
        )
    }

    pub fn fwhm(&self) -> Result<f64> {
        fwhm(self)
    }

    /// Writes `t_ns,<column>` rows.
    pub fn write_csv<W: Write>(&self, out: W, column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ns", column])?;
        for (t, v) in self.grid.times().zip(&self.value) {
            w.write_record([fmt_time(t), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Full width at half maximum with linear interpolation between samples.
///
/// Uses the outermost half-maximum crossings on either side of the global
/// peak. A side with no crossing (the peak sits on, or the trace stays above
/// half maximum up to, the grid boundary) measures from the boundary sample;
/// a trace with no crossing on either side is rejected.
pub fn fwhm(trace: &IntensityTrace) -> Result<f64> {
    let v = &trace.value;
    let (_, max) = trace.peak();
    if !(max > 0.0) {
        return Err(Error::NoHalfMaxCrossings("trace has no positive maximum".into()));
    }
    let half = 0.5 * max;
    let grid = &trace.grid;

    let first = v.iter().position(|&x| x >= half).expect("peak is above half");
    let last = v.iter().rposition(|&x| x >= half).expect("peak is above half");

    let left_crossed = first > 0;
    let right_crossed = last + 1 < v.len();
    if !left_crossed && !right_crossed {
        return Err(Error::NoHalfMaxCrossings("trace never falls below half maximum".into()));
    }

    let left = if left_crossed {
        let (a, b) = (v[first - 1], v[first]);
        grid.time(first - 1) + (half - a) / (b - a) * grid.dt()
    } else {
        grid.t_start()
    };
    let right = if right_crossed {
        let (a, b) = (v[last], v[last + 1]);
        grid.time(last) + (a - half) / (a - b) * grid.dt()
    } else {
        grid.t_end()
    };
    Ok(right - left)
}

pub(crate) fn fmt_time(t: f64) -> String {
    format!("{t:.9}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(grid: TimeGrid, center: f64, sigma: f64) -> IntensityTrace {
        IntensityTrace::from_fn(grid, |t| (-(t - center).powi(2) / (2.0 * sigma * sigma)).exp()).unwrap()
    }

    #[test]
    fn grid_sample_counts() {
        let g = TimeGrid::new(0.0, 20.0, 0.001).unwrap();
        assert_eq!(g.len(), 20001);
        assert!(!g.was_snapped());
        assert!((g.t_end() - 20.0).abs() < 1e-9);

        let g = TimeGrid::new(0.0, 50.0, 0.05).unwrap();
        assert_eq!(g.len(), 1001);

        let g = TimeGrid::new(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.was_snapped());
        assert!((g.t_end() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(TimeGrid::new(0.0, 1.0, 0.0), Err(Error::InvalidGrid(_))));
        assert!(matches!(TimeGrid::new(0.0, 1.0, -0.1), Err(Error::InvalidGrid(_))));
        assert!(matches!(TimeGrid::new(1.0, 0.0, 0.1), Err(Error::InvalidGrid(_))));
        assert!(matches!(TimeGrid::new(1.0, 1.0, 0.1), Err(Error::InvalidGrid(_))));
        assert!(matches!(TimeGrid::new(0.0, 0.05, 0.1), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn sample_times_strictly_increase() {
        let g = TimeGrid::new(-3.0, 7.0, 0.013).unwrap();
        let t: Vec<f64> = g.times().collect();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn norm_of_zero_and_truncated_exponential() {
        let g = TimeGrid::new(0.0, 7.0, 0.001).unwrap();
        assert_eq!(Wavepacket::zeros(g).norm(), 0.0);

        let gamma = 1.0 / 1.4;
        let g = TimeGrid::new(0.0, 5.0 * 1.4, 0.001).unwrap();
        let amp = g
            .times()
            .map(|t| Complex64::new((gamma * (-gamma * t).exp()).sqrt(), 0.0))
            .collect();
        let psi = Wavepacket::new(g, amp).unwrap();
        // 1 - e^-5
        assert!((psi.norm() - (1.0 - (-5.0f64).exp())).abs() < 1e-6);
        assert!((psi.norm() - 0.99326).abs() < 1e-5);
    }

    #[test]
    fn fwhm_of_gaussian_triangle_and_exponential() {
        let g = TimeGrid::new(-3.0, 3.0, 0.001).unwrap();
        let w = gaussian(g, 0.0, 0.3058).fwhm().unwrap();
        assert!((w - 0.720).abs() < 0.001, "{w}");

        let tri = IntensityTrace::from_fn(g, |t| (1.0 - t.abs()).max(0.0)).unwrap();
        assert!((tri.fwhm().unwrap() - 1.0).abs() < 1e-9);

        let g = TimeGrid::new(0.0, 10.0, 0.001).unwrap();
        let exp = IntensityTrace::from_fn(g, |t| (-t / 1.4).exp()).unwrap();
        let expected = 1.4 * std::f64::consts::LN_2;
        assert!((exp.fwhm().unwrap() - expected).abs() < 1e-6);
        assert!((expected - 0.9704).abs() < 1e-4);
    }

    #[test]
    fn fwhm_rejects_flat_trace() {
        let g = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let flat = IntensityTrace::from_fn(g, |_| 2.0).unwrap();
        assert!(matches!(flat.fwhm(), Err(Error::NoHalfMaxCrossings(_))));
        let zero = IntensityTrace::from_fn(g, |_| 0.0).unwrap();
        assert!(matches!(zero.fwhm(), Err(Error::NoHalfMaxCrossings(_))));
    }

    #[test]
    fn fwhm_converges_for_fine_grids() {
        let sigma = 0.2;
        let exact = 2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * sigma;
        for dt in [sigma / 10.0, sigma / 37.0, sigma / 200.0] {
            let g = TimeGrid::new(-2.0, 2.0 + 0.5 * dt, dt).unwrap();
            let w = gaussian(g, 0.0123, sigma).fwhm().unwrap();
            assert!((w - exact).abs() <= 2.0 * dt, "dt {dt}: {w} vs {exact}");
        }
    }

    #[test]
    fn trace_rejects_negative_values() {
        let g = TimeGrid::new(0.0, 1.0, 0.5).unwrap();
        assert!(IntensityTrace::new(g, vec![0.0, -1.0, 0.0]).is_err());
    }

    #[test]
    fn csv_headers() {
        let g = TimeGrid::new(0.0, 0.002, 0.001).unwrap();
        let psi = Wavepacket::new(g, vec![Complex64::new(1.0, -0.5); 3]).unwrap();
        let mut buf = Vec::new();
        psi.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_ns,re,im\n0.000000000,1,-0.5\n"));

        let mut buf = Vec::new();
        psi.intensity().write_csv(&mut buf, "value").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t_ns,value"));
        assert_eq!(text.lines().count(), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn norm_is_phase_invariant(phi in -10.0f64..10.0, seed in 0u64..1000) {
                let g = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
                let amp: Vec<Complex64> = (0..g.len())
                    .map(|k| Complex64::new(((k as u64 * 7 + seed) % 13) as f64 * 0.1, 0.0))
                    .collect();
                let psi = Wavepacket::new(g, amp).unwrap();
                let rotated = psi.with_phase(&vec![phi; g.len()]).unwrap();
                // |e^{i phi} a|^2 may differ from |a|^2 by rounding in the rotation
                prop_assert!((rotated.norm() - psi.norm()).abs() <= 1e-14 * psi.norm().max(1.0));
            }

            #[test]
            fn norm_is_additive_over_split_grids(split in 1usize..199, scale in 0.1f64..5.0) {
                let g = TimeGrid::with_samples(0.0, 0.01, 200).unwrap();
                let f = |t: f64| scale * (-(t - 0.8).powi(2)).exp();
                let amp: Vec<Complex64> = g.times().map(|t| Complex64::new(f(t).sqrt(), 0.0)).collect();
                let whole = Wavepacket::new(g, amp.clone()).unwrap().norm();
                let left_g = TimeGrid::with_samples(0.0, 0.01, split + 1).unwrap();
                let right_g = TimeGrid::with_samples(g.time(split), 0.01, 200 - split).unwrap();
                let left = Wavepacket::new(left_g, amp[..=split].to_vec()).unwrap().norm();
                let right = Wavepacket::new(right_g, amp[split..].to_vec()).unwrap().norm();
                prop_assert!(((left + right) - whole).abs() <= 1e-12 * whole);
            }
        }
    }
}

//! Pulsed two-level emitter: exponential wavepackets and Markovian
//! phase diffusion.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::sigcore::{TimeGrid, Wavepacket};

/// Default wavepacket horizon in lifetimes (residual norm e^-10).
pub const TRUNCATION_LIFETIMES: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmitterModel {
    /// Radiative lifetime T1 (ns).
    pub tau_sp: f64,
    /// Photon coherence time T2 (ns).
    pub tau_coh: f64,
    /// Decay rate 1/T1 (ns^-1).
    pub gamma: f64,
    /// Pure-dephasing rate 1/T2 - 1/(2 T1) (ns^-1).
    pub gamma_star: f64,
    /// Emission wavelength, carried as metadata only.
    pub wavelength_nm: Option<f64>,
}

/// Builds an emitter from its lifetime and coherence time.
pub fn coherence_params(tau_sp: f64, tau_coh: f64) -> Result<EmitterModel> {
    if !(tau_sp > 0.0) || !tau_sp.is_finite() {
        return Err(invalid("tau_sp", format!("must be positive, got {tau_sp}")));
    }
    if !(tau_coh > 0.0) || !tau_coh.is_finite() {
        return Err(invalid("tau_coh", format!("must be positive, got {tau_coh}")));
    }
    let limit = 2.0 * tau_sp;
    if tau_coh > limit {
        return Err(Error::AboveTransformLimit { tau_coh, limit });
    }
    let gamma = 1.0 / tau_sp;
    // T2 == 2 T1 must give exactly zero, not a rounding residue.
    let gamma_star = if tau_coh == limit {
        0.0
    } else {
        (1.0 / tau_coh - 0.5 * gamma).max(0.0)
    };
    Ok(EmitterModel {
        tau_sp,
        tau_coh,
        gamma,
        gamma_star,
        wavelength_nm: None,
    })
}

impl EmitterModel {
    pub fn new(tau_sp: f64, tau_coh: f64) -> Result<Self> {
        coherence_params(tau_sp, tau_coh)
    }

    pub fn with_wavelength(mut self, nm: f64) -> Self {
        self.wavelength_nm = Some(nm);
        self
    }

    /// Closed-form indistinguishability of the unmodulated photon,
    /// `Gamma / (Gamma + 2 gamma*) = T2 / (2 T1)`.
    pub fn unmodulated_indistinguishability(&self) -> f64 {
        self.gamma / (self.gamma + 2.0 * self.gamma_star)
    }

    /// Emitter-frame grid `[0, 10 T1]` at step `dt`.
    pub fn default_grid(&self, dt: f64) -> Result<TimeGrid> {
        TimeGrid::new(0.0, TRUNCATION_LIFETIMES * self.tau_sp, dt)
    }

    /// Detection density `Gamma e^{-Gamma (t - t_emit)}` for `t >= t_emit`.
    #[inline]
    pub fn intensity_at(&self, t: f64, t_emit: f64) -> f64 {
        if t < t_emit {
            0.0
        } else {
            self.gamma * (-self.gamma * (t - t_emit)).exp()
        }
    }
}

/// Real, non-negative amplitude `sqrt(Gamma) e^{-Gamma (t - t_emit)/2}`.
///
/// When `t_emit` falls on an interior sample that sample carries the
/// midpoint of the jump (`Gamma/2` in intensity), so the trapezoid norm
/// integrates from the emission time.
pub fn exponential_wavepacket(model: &EmitterModel, grid: &TimeGrid, t_emit: f64) -> Result<Wavepacket> {
    if !t_emit.is_finite() {
        return Err(invalid("t_emit", "must be finite"));
    }
    if grid.t_end() < t_emit {
        return Err(Error::EmissionOutsideGrid {
            t_emit,
            grid_end: grid.t_end(),
        });
    }
    let tol = 1e-6 * grid.dt();
    let amplitude = grid
        .times()
        .enumerate()
        .map(|(k, t)| {
            let i = if (t - t_emit).abs() <= tol {
                if k == 0 {
                    model.gamma
                } else {
                    0.5 * model.gamma
                }
            } else {
                model.intensity_at(t, t_emit)
            };
            Complex64::new(i.sqrt(), 0.0)
        })
        .collect();
    Wavepacket::new(*grid, amplitude)
}

/// Sampled Wiener phase `phi(t_k)` with `phi(t_0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrajectory {
    pub grid: TimeGrid,
    pub phase: Vec<f64>,
    pub seed: u64,
}

impl PhaseTrajectory {
    /// Applies `e^{i phi}` to a wavepacket on the same grid.
    pub fn apply(&self, psi: &Wavepacket) -> Result<Wavepacket> {
        if psi.grid() != &self.grid {
            return Err(Error::GridMismatch(
                "phase trajectory and wavepacket grids differ".into(),
            ));
        }
        psi.with_phase(&self.phase)
    }
}

/// Per-trajectory seed for ensemble member `index`.
pub fn trajectory_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index)
}

/// Phase diffusion with independent Gaussian increments of variance
/// `2 gamma* dt`, giving first-order coherence `e^{-gamma* |tau|}`.
pub fn sample_phase_trajectory(model: &EmitterModel, grid: &TimeGrid, seed: u64) -> PhaseTrajectory {
    let mut phase = vec![0.0; grid.len()];
    if model.gamma_star > 0.0 {
        let step =
            Normal::new(0.0, (2.0 * model.gamma_star * grid.dt()).sqrt()).expect("finite positive standard deviation");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        for p in phase.iter_mut().skip(1) {
            acc += step.sample(&mut rng);
            *p = acc;
        }
    }
    PhaseTrajectory {
        grid: *grid,
        phase,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coherence_parameters() {
        let m = coherence_params(1.4, 0.28).unwrap();
        assert!((m.gamma - 0.7143).abs() < 1e-4);
        assert!((m.gamma_star - 3.2143).abs() < 1e-4);
        assert!((m.unmodulated_indistinguishability() - 0.100).abs() < 1e-12);

        let m = coherence_params(1.4, 2.8).unwrap();
        assert_eq!(m.gamma_star, 0.0);
        assert_eq!(m.unmodulated_indistinguishability(), 1.0);

        // 1/0.58 - 1/2.8
        let m = coherence_params(1.4, 0.58).unwrap();
        assert!((m.gamma_star - 1.3670).abs() < 1e-4);
    }

    #[test]
    fn implied_indistinguishability_is_t2_over_2t1() {
        for (t1, t2) in [(1.4, 0.28), (1.4, 0.58), (0.7, 1.1), (2.0, 0.01)] {
            let m = coherence_params(t1, t2).unwrap();
            let implied = m.gamma / (m.gamma + 2.0 * m.gamma_star);
            assert!((implied - t2 / (2.0 * t1)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_above_transform_limit() {
        assert!(matches!(
            coherence_params(1.4, 2.81),
            Err(Error::AboveTransformLimit { .. })
        ));
        assert!(coherence_params(0.0, 0.1).is_err());
        assert!(coherence_params(1.0, -0.1).is_err());
    }

    #[test]
    fn exponential_wavepacket_shape() {
        let m = coherence_params(1.4, 0.28).unwrap();
        let g = TimeGrid::new(0.0, 20.0 * 1.4, 0.001).unwrap();
        let psi = exponential_wavepacket(&m, &g, 0.0).unwrap();
        let i = psi.intensity();
        assert!((i.values()[0] - 1.0 / 1.4).abs() < 1e-12);
        assert!((i.values()[0] - 0.7143).abs() < 1e-4);
        let k = g.nearest_index(1.4).unwrap();
        assert!((i.values()[k] / i.values()[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!(psi.amplitude().iter().all(|a| a.im == 0.0 && a.re >= 0.0));
        assert!((psi.norm() - (1.0 - (-20.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn interior_emission_integrates_from_emission_time() {
        let m = coherence_params(1.4, 0.28).unwrap();
        let g = TimeGrid::new(-2.0, 20.0, 0.001).unwrap();
        let psi = exponential_wavepacket(&m, &g, 0.0).unwrap();
        assert!((psi.norm() - (1.0 - (-20.0f64 / 1.4).exp())).abs() < 1e-6);
        let k = g.nearest_index(-0.5).unwrap();
        assert_eq!(psi.amplitude()[k].re, 0.0);
    }

    #[test]
    fn emission_after_grid_is_an_error() {
        let m = coherence_params(1.4, 0.28).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 0.001).unwrap();
        assert!(matches!(
            exponential_wavepacket(&m, &g, 1.5),
            Err(Error::EmissionOutsideGrid { .. })
        ));
    }

    #[test]
    fn translation_covariance() {
        let m = coherence_params(1.4, 0.28).unwrap();
        let g = TimeGrid::new(0.0, 12.0, 0.001).unwrap();
        let a = exponential_wavepacket(&m, &g, 1.0).unwrap().intensity();
        let shift = 250;
        let b = exponential_wavepacket(&m, &g, 1.0 + shift as f64 * 0.001)
            .unwrap()
            .intensity();
        for k in 0..(g.len() - shift) {
            let (x, y) = (a.values()[k], b.values()[k + shift]);
            assert!((x - y).abs() <= 1e-12 * x.max(1e-300), "sample {k}");
        }
    }

    #[test]
    fn zero_dephasing_gives_zero_phase() {
        let m = coherence_params(1.4, 2.8).unwrap();
        let g = TimeGrid::new(0.0, 2.0, 0.001).unwrap();
        for seed in [0, 1, 99] {
            assert!(sample_phase_trajectory(&m, &g, seed).phase.iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn trajectories_are_reproducible() {
        let m = coherence_params(1.4, 0.28).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 0.001).unwrap();
        let a = sample_phase_trajectory(&m, &g, 7);
        let b = sample_phase_trajectory(&m, &g, 7);
        let c = sample_phase_trajectory(&m, &g, 8);
        assert_eq!(a, b);
        assert_ne!(a.phase, c.phase);
        assert_eq!(a.phase[0], 0.0);
    }

    #[test]
    fn dephasing_leaves_intensity_bit_identical() {
        let m = coherence_params(1.4, 0.28).unwrap();
        let g = TimeGrid::new(0.0, 14.0, 0.001).unwrap();
        let psi = exponential_wavepacket(&m, &g, 0.0).unwrap();
        let phi = sample_phase_trajectory(&m, &g, 3);
        let dephased = phi.apply(&psi).unwrap();
        // The amplitudes are real, so |a e^{i phi}|^2 is a^2 (cos^2 + sin^2) and
        // may round differently; compare the per-sample magnitudes instead.
        for (a, b) in psi.amplitude().iter().zip(dephased.amplitude()) {
            assert!((a.norm_sqr() - b.norm_sqr()).abs() <= 4.0 * f64::EPSILON * a.norm_sqr());
        }
    }
}

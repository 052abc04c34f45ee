//! Post-selection by a time-dependent transmission: transmitted fraction,
//! two-photon indistinguishability and the best modulation delay.
//!
//! Everything here works in the emitter frame (emission at `t = 0`). A
//! profile evaluated at `t - delay` is the modulator window delayed by
//! `delay` with respect to the photon.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitter::{exponential_wavepacket, sample_phase_trajectory, trajectory_seed, EmitterModel};
use crate::eomod::TransmissionProfile;
use crate::error::{Error, Result};
use crate::sigcore::{TimeGrid, Wavepacket};

/// Per-sample emission probabilities `w_k |psi_k|^2 dt` on a grid.
#[derive(Debug, Clone)]
pub struct EmissionWeights {
    pub grid: TimeGrid,
    pub weights: Vec<f64>,
}

impl EmissionWeights {
    pub fn new(model: &EmitterModel, grid: &TimeGrid) -> Result<Self> {
        let psi = exponential_wavepacket(model, grid, 0.0)?;
        let weights = psi
            .amplitude()
            .iter()
            .enumerate()
            .map(|(k, a)| grid.trapezoid_weight(k) * a.norm_sqr() * grid.dt())
            .collect();
        Ok(Self { grid: *grid, weights })
    }

    /// `w_k T(t_k - delay)`.
    pub fn transmitted(&self, env: &dyn TransmissionProfile, delay: f64) -> Vec<f64> {
        self.grid
            .times()
            .zip(&self.weights)
            .map(|(t, &w)| {
                if w == 0.0 {
                    0.0
                } else {
                    w * env.transmission_at(t - delay)
                }
            })
            .collect()
    }

    pub fn fraction(&self, env: &dyn TransmissionProfile, delay: f64) -> f64 {
        self.grid
            .times()
            .zip(&self.weights)
            .map(|(t, &w)| {
                if w == 0.0 {
                    0.0
                } else {
                    w * env.transmission_at(t - delay)
                }
            })
            .sum()
    }

    pub fn indistinguishability(&self, model: &EmitterModel, env: &dyn TransmissionProfile, delay: f64) -> Result<f64> {
        overlap_from_weights(&self.transmitted(env, delay), model.gamma_star, self.grid.dt())
    }
}

/// `sum_ij u_i u_j e^{-2 gamma* |t_i - t_j|} / (sum u)^2` in O(n) via the
/// running sum `A_j = sum_{i<j} u_i rho^{j-i}`, `rho = e^{-2 gamma* dt}`.
pub(crate) fn overlap_from_weights(u: &[f64], gamma_star: f64, dt: f64) -> Result<f64> {
    let total: f64 = u.iter().sum();
    if !(total > 0.0) {
        return Err(Error::FullyExtinguished);
    }
    if gamma_star == 0.0 {
        return Ok(1.0);
    }
    let rho = (-2.0 * gamma_star * dt).exp();
    let mut running = 0.0;
    let mut double = 0.0;
    for &x in u {
        running *= rho;
        double += x * (x + 2.0 * running);
        running += x;
    }
    Ok((double / (total * total)).clamp(0.0, 1.0))
}

/// Probability that the photon passes the modulator:
/// `integral T(t - delay) Gamma e^{-Gamma t} dt` (trapezoid on `grid`).
pub fn transmitted_fraction(
    model: &EmitterModel,
    env: &dyn TransmissionProfile,
    delay: f64,
    grid: &TimeGrid,
) -> Result<f64> {
    Ok(EmissionWeights::new(model, grid)?.fraction(env, delay))
}

/// Mean-square overlap of two independently dephased photons after the
/// modulator, normalized to the transmitted photons:
/// `I = int int w(t1) w(t2) e^{-2 gamma* |t1 - t2|} / (int w)^2` with
/// `w(t) = T(t - delay) Gamma e^{-Gamma t}`.
pub fn indistinguishability_exact(
    model: &EmitterModel,
    env: &dyn TransmissionProfile,
    delay: f64,
    grid: &TimeGrid,
) -> Result<f64> {
    EmissionWeights::new(model, grid)?.indistinguishability(model, env, delay)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Monte Carlo pair-overlap estimate for the (modulated) wavepacket `psi`:
/// each pair gets two independent phase trajectories and contributes
/// `|<psi1|psi2>|^2 / (<psi|psi>)^2`. Pair `p` uses trajectory seeds
/// `seed + 2p` and `seed + 2p + 1`.
pub fn indistinguishability_mc(
    model: &EmitterModel,
    psi: &Wavepacket,
    n_pairs: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_pairs < 2 {
        return Err(crate::error::invalid("n_pairs", "need at least two pairs"));
    }
    let g = psi.grid();
    let weighted: Vec<f64> = psi
        .amplitude()
        .iter()
        .enumerate()
        .map(|(k, a)| g.trapezoid_weight(k) * a.norm_sqr() * g.dt())
        .collect();
    let norm: f64 = weighted.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::FullyExtinguished);
    }
    // Only phase differences inside the support matter.
    let peak = weighted.iter().copied().fold(0.0, f64::max);
    let first = weighted.iter().position(|&w| w > 1e-18 * peak).unwrap_or(0);
    let last = weighted.iter().rposition(|&w| w > 1e-18 * peak).unwrap_or(0);
    let sub = TimeGrid::with_samples(g.time(first), g.dt(), (last - first + 1).max(2))?;
    let support = &weighted[first..first + sub.len().min(weighted.len() - first)];

    let values: Vec<f64> = (0..n_pairs)
        .into_par_iter()
        .map(|p| {
            let a = sample_phase_trajectory(model, &sub, trajectory_seed(seed, 2 * p as u64));
            let b = sample_phase_trajectory(model, &sub, trajectory_seed(seed, 2 * p as u64 + 1));
            let overlap: Complex64 = support
                .iter()
                .zip(a.phase.iter().zip(&b.phase))
                .map(|(&w, (&pa, &pb))| Complex64::from_polar(w, pb - pa))
                .sum();
            overlap.norm_sqr() / (norm * norm)
        })
        .collect();

    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        samples: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayObjective {
    Fraction,
    Indistinguishability,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayRange {
    pub start: f64,
    pub end: f64,
}

impl Default for DelayRange {
    fn default() -> Self {
        Self { start: -1.0, end: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayOptimum {
    pub delay: f64,
    pub value: f64,
    /// Best delay of the grid scan before refinement.
    pub scan_delay: f64,
}

fn objective_value(
    weights: &EmissionWeights,
    model: &EmitterModel,
    env: &dyn TransmissionProfile,
    objective: DelayObjective,
    delay: f64,
) -> f64 {
    match objective {
        DelayObjective::Fraction => weights.fraction(env, delay),
        DelayObjective::Indistinguishability => weights.indistinguishability(model, env, delay).unwrap_or(0.0),
        DelayObjective::Product => {
            scan_objective(&weights.transmitted(env, delay), model, weights.grid.dt(), objective)
        }
    }
}

fn scan_objective(u: &[f64], model: &EmitterModel, dt: f64, objective: DelayObjective) -> f64 {
    let f: f64 = u.iter().sum();
    match objective {
        DelayObjective::Fraction => f,
        DelayObjective::Indistinguishability => overlap_from_weights(u, model.gamma_star, dt).unwrap_or(0.0),
        DelayObjective::Product => f * overlap_from_weights(u, model.gamma_star, dt).unwrap_or(0.0),
    }
}

/// Best delay: scan at the grid step (first maximum wins, so ties go to the
/// smallest delay), then golden-section refinement within one step of it.
pub fn optimal_delay(
    model: &EmitterModel,
    env: &dyn TransmissionProfile,
    objective: DelayObjective,
    range: DelayRange,
    grid: &TimeGrid,
) -> Result<DelayOptimum> {
    if !(range.end >= range.start) || !range.start.is_finite() || !range.end.is_finite() {
        return Err(crate::error::invalid("delay_range", "end must not precede start"));
    }
    let weights = EmissionWeights::new(model, grid)?;
    let dt = grid.dt();
    let steps = ((range.end - range.start) / dt + 1e-9).floor() as usize;
    // Scan delays are whole steps, so one sampled table of the profile
    // serves every shift: T(t_k - start - i dt) = table[k + steps - i].
    let t0 = grid.t_start() - range.start - steps as f64 * dt;
    let table: Vec<f64> = (0..grid.len() + steps)
        .map(|m| env.transmission_at(t0 + m as f64 * dt))
        .collect();
    let values: Vec<f64> = (0..=steps)
        .into_par_iter()
        .map(|i| {
            let u: Vec<f64> = weights
                .weights
                .iter()
                .enumerate()
                .map(|(k, &w)| w * table[k + steps - i])
                .collect();
            scan_objective(&u, model, dt, objective)
        })
        .collect();
    let (best_i, best) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let scan_delay = range.start + best_i as f64 * dt;

    let f = |d: f64| objective_value(&weights, model, env, objective, d);
    let (mut lo, mut hi) = ((scan_delay - dt).max(range.start), (scan_delay + dt).min(range.end));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if hi - lo < 1e-9 * dt {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    let (refined, refined_value) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    Ok(if refined_value > best {
        DelayOptimum {
            delay: refined,
            value: refined_value,
            scan_delay,
        }
    } else {
        DelayOptimum {
            delay: scan_delay,
            value: best,
            scan_delay,
        }
    })
}

//! Weighted nonlinear least squares for TCSPC histograms.
//!
//! Levenberg-damped Gauss-Newton. A first pass uses Poisson weights from the
//! data, `1 / max(count, 1)`; the weights are then re-estimated from the
//! fitted model until the parameters stop moving, which removes the low-count
//! bias of data-derived weights. Confidence intervals are `1.96 sigma` from
//! the linearized covariance `(J^T W J)^-1` scaled by the reduced residual.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::detect::Histogram;
use crate::eomod::FWHM_PER_SIGMA;
use crate::error::{invalid, Error, Result};

pub const Z95: f64 = 1.959_963_984_540_054;
pub const MAX_ITERATIONS: usize = 200;
pub const PARAM_TOLERANCE: f64 = 1e-8;
const MAX_REWEIGHTS: usize = 50;
const MAX_PARAMS: usize = 4;
const POLISH_STEPS: usize = 6;
/// Predicted chi^2 decrease below which a Newton step is trusted unchecked.
const POLISH_DECREMENT: f64 = 1e-3;
/// Model variances are floored at this fraction of the peak count, so empty
/// tail bins where the model crosses zero cannot dominate the weights.
const WEIGHT_FLOOR: f64 = 1e-3;
const REWEIGHT_TOLERANCE: f64 = 1e-12;
/// Jitter standard deviations skipped after the peak before fitting a decay.
const TAIL_SKIP_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    Exponential,
    Gaussian,
    Notch,
}

impl fmt::Display for FitModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitModel::Exponential => "exponential",
            FitModel::Gaussian => "gaussian",
            FitModel::Notch => "notch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub model: FitModel,
    pub params: Vec<FitParam>,
    /// Reduced chi-square at the optimum.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Time range of the bins that entered the fit (bin centers, ns).
    pub range: (f64, f64),
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<&FitParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |p| p.value)
    }

    pub fn ci95(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |p| p.ci95)
    }

    /// Model value at time `t`.
    pub fn evaluate(&self, t: f64) -> f64 {
        match self.model {
            FitModel::Exponential => {
                let t0 = self.range.0;
                self.value("amplitude") * (-(t - t0) / self.value("tau")).exp() + self.value("baseline")
            }
            FitModel::Gaussian | FitModel::Notch => {
                let sign = if self.model == FitModel::Notch { -1.0 } else { 1.0 };
                let s = self.value("sigma");
                let x = t - self.value("center");
                self.value("baseline") + sign * self.value("amplitude") * (-x * x / (2.0 * s * s)).exp()
            }
        }
    }

    /// `param,value,ci95` lines.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# model: {}", self.model)?;
        writeln!(out, "# reduced_chi2: {}", self.residual_norm)?;
        writeln!(out, "# iterations: {}", self.iterations)?;
        writeln!(out, "# range_ns: {} {}", self.range.0, self.range.1)?;
        writeln!(out, "param,value,ci95")?;
        for p in &self.params {
            writeln!(out, "{},{},{}", p.name, p.value, p.ci95)?;
        }
        Ok(())
    }

    /// Parses the output of [`FitResult::write_text`].
    pub fn read_text(text: &str) -> Result<Self> {
        let mut model = None;
        let mut residual_norm = f64::NAN;
        let mut iterations = 0;
        let mut range = (f64::NAN, f64::NAN);
        let mut params = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let err = |what: &str| invalid("fit", format!("line {}: {what}", i + 1));
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest.split_once(':').ok_or_else(|| err("expected `# key: value`"))?;
                let value = value.trim();
                match key.trim() {
                    "model" => {
                        model = Some(match value {
                            "exponential" => FitModel::Exponential,
                            "gaussian" => FitModel::Gaussian,
                            "notch" => FitModel::Notch,
                            _ => return Err(err("unknown model")),
                        })
                    }
                    "reduced_chi2" => residual_norm = value.parse().map_err(|_| err("bad reduced_chi2"))?,
                    "iterations" => iterations = value.parse().map_err(|_| err("bad iterations"))?,
                    "range_ns" => {
                        let mut it = value.split_whitespace().map(str::parse::<f64>);
                        match (it.next(), it.next()) {
                            (Some(Ok(a)), Some(Ok(b))) => range = (a, b),
                            _ => return Err(err("bad range_ns")),
                        }
                    }
                    _ => {}
                }
            } else if line.is_empty() || line == "param,value,ci95" {
                continue;
            } else {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 {
                    return Err(err("expected param,value,ci95"));
                }
                params.push(FitParam {
                    name: f[0].to_string(),
                    value: f[1].parse().map_err(|_| err("bad value"))?,
                    ci95: f[2].parse().map_err(|_| err("bad ci95"))?,
                });
            }
        }
        Ok(Self {
            model: model.ok_or_else(|| invalid("fit", "missing `# model:` line"))?,
            params,
            residual_norm,
            iterations,
            range,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    /// Known detector jitter (FWHM, ns). Decay fits start this many
    /// standard deviations after the peak; Gaussian fits additionally
    /// report the deconvolved width.
    pub jitter_fwhm: Option<f64>,
    /// Restrict the fit to bin centers inside `[start, end]`.
    pub range: Option<(f64, f64)>,
}

/// Binned data to fit: bin centers and (possibly non-integer) contents.
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub bin_width: f64,
    /// Counts are integrals over `[t - w/2, t + w/2]` rather than samples.
    pub binned: bool,
}

impl FitData {
    pub fn from_histogram(h: &Histogram) -> Self {
        Self {
            t: (0..h.n_bins()).map(|j| h.bin_center(j)).collect(),
            y: h.counts.iter().map(|&c| c as f64).collect(),
            bin_width: h.bin_width,
            binned: true,
        }
    }

    fn restricted(&self, range: Option<(f64, f64)>) -> Self {
        match range {
            None => self.clone(),
            Some((a, b)) => {
                let (t, y) = self
                    .t
                    .iter()
                    .zip(&self.y)
                    .filter(|(t, _)| (a..=b).contains(*t))
                    .map(|(t, y)| (*t, *y))
                    .unzip();
                Self {
                    t,
                    y,
                    bin_width: self.bin_width,
                    binned: self.binned,
                }
            }
        }
    }
}

/// Model: value and gradient with respect to the parameters at `t`.
type ModelFn<'a> = &'a dyn Fn(&[f64], f64, &mut [f64]) -> f64;
/// Returns false for parameter vectors outside the model's domain.
type DomainFn<'a> = &'a dyn Fn(&[f64]) -> bool;

struct LmOutcome {
    params: Vec<f64>,
    normal: DMatrix<f64>,
    chi2: f64,
    iterations: usize,
}

fn weighted_system(t: &[f64], y: &[f64], w: &[f64], p: &[f64], model: ModelFn) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = p.len();
    let mut a = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut grad = vec![0.0; n];
    let mut chi2 = 0.0;
    for ((&ti, &yi), &wi) in t.iter().zip(y).zip(w) {
        let m = model(p, ti, &mut grad);
        let r = yi - m;
        chi2 += wi * r * r;
        for i in 0..n {
            g[i] += wi * grad[i] * r;
            for j in 0..=i {
                a[(i, j)] += wi * grad[i] * grad[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    (a, g, chi2)
}

fn chi2_at(t: &[f64], y: &[f64], w: &[f64], p: &[f64], model: ModelFn) -> f64 {
    let mut grad = vec![0.0; p.len()];
    t.iter()
        .zip(y)
        .zip(w)
        .map(|((&ti, &yi), &wi)| {
            let r = yi - model(p, ti, &mut grad);
            wi * r * r
        })
        .sum()
}

fn levenberg_marquardt(
    t: &[f64],
    y: &[f64],
    w: &[f64],
    p0: &[f64],
    model: ModelFn,
    domain: DomainFn,
) -> Result<LmOutcome> {
    let mut p = p0.to_vec();
    let mut lambda = 1e-3;
    let (mut a, mut g, mut chi2) = weighted_system(t, y, w, &p, model);
    for iteration in 1..=MAX_ITERATIONS {
        let mut damped = a.clone();
        for i in 0..p.len() {
            damped[(i, i)] += lambda * a[(i, i)].max(f64::MIN_POSITIVE);
        }
        let step = damped
            .clone()
            .cholesky()
            .map(|c| c.solve(&g))
            .or_else(|| damped.lu().solve(&g));
        let Some(step) = step else {
            lambda *= 10.0;
            continue;
        };
        let candidate: Vec<f64> = p.iter().zip(step.iter()).map(|(p, d)| p + d).collect();
        if domain(&candidate) && candidate.iter().all(|v| v.is_finite()) {
            let new_chi2 = chi2_at(t, y, w, &candidate, model);
            if new_chi2 <= chi2 {
                // A parameter near zero is judged against its statistical
                // scale instead of its value.
                let scale = statistical_scale(&a);
                let converged = p
                    .iter()
                    .zip(&candidate)
                    .zip(&scale)
                    .all(|((old, new), s)| (new - old).abs() <= PARAM_TOLERANCE * old.abs().max(*s).max(1e-12));
                p = candidate;
                (a, g, chi2) = weighted_system(t, y, w, &p, model);
                lambda = (lambda * 0.1).max(1e-12);
                if converged {
                    return Ok(polish(t, y, w, p, model, domain, iteration));
                }
                continue;
            }
        }
        lambda *= 10.0;
        if lambda > 1e16 {
            // No downhill step exists at machine precision: this is the minimum.
            return Ok(polish(t, y, w, p, model, domain, iteration));
        }
    }
    Err(Error::FitNotConverged {
        iterations: MAX_ITERATIONS,
        best: p,
    })
}

/// `sqrt(diag((J^T W J)^-1))`, zeros when the matrix is singular.
fn statistical_scale(normal: &DMatrix<f64>) -> Vec<f64> {
    match normal.clone().try_inverse() {
        Some(c) => (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect(),
        None => vec![0.0; normal.nrows()],
    }
}

/// Undamped Gauss-Newton steps from a converged Levenberg-Marquardt iterate.
/// Convergence is quadratic here, so the result is settled to rounding and no
/// longer depends on where the damped iteration happened to stop.
fn polish(
    t: &[f64],
    y: &[f64],
    w: &[f64],
    mut p: Vec<f64>,
    model: ModelFn,
    domain: DomainFn,
    iterations: usize,
) -> LmOutcome {
    let (mut a, mut g, mut chi2) = weighted_system(t, y, w, &p, model);
    for _ in 0..POLISH_STEPS {
        let Some(step) = a.clone().cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        let candidate: Vec<f64> = p.iter().zip(step.iter()).map(|(p, d)| p + d).collect();
        if !domain(&candidate) || candidate.iter().any(|v| !v.is_finite()) {
            break;
        }
        // Near the optimum chi^2 is flat to rounding, so steps whose predicted
        // chi^2 decrease is tiny are taken on the strength of the Newton model.
        let small = g.dot(&step) <= POLISH_DECREMENT;
        if !small && chi2_at(t, y, w, &candidate, model) > chi2 {
            break;
        }
        let tiny = p
            .iter()
            .zip(&candidate)
            .all(|(old, new)| (new - old).abs() <= 4.0 * f64::EPSILON * old.abs());
        p = candidate;
        (a, g, chi2) = weighted_system(t, y, w, &p, model);
        if tiny {
            break;
        }
    }
    LmOutcome {
        params: p,
        normal: a,
        chi2,
        iterations,
    }
}

/// Data-weighted pass followed by model-weighted refits.
fn poisson_fit(data: &FitData, p0: &[f64], model: ModelFn, domain: DomainFn) -> Result<LmOutcome> {
    let half = 0.5 * data.bin_width;
    // Simpson average over the bin; its error is O(w^4) in the model's
    // fourth derivative, far below the counting noise.
    let averaged = move |p: &[f64], ti: f64, grad: &mut [f64]| {
        let mut g = [0.0; MAX_PARAMS];
        let mut v = 0.0;
        grad.iter_mut().for_each(|x| *x = 0.0);
        for (dt, w) in [(-half, 1.0 / 6.0), (0.0, 4.0 / 6.0), (half, 1.0 / 6.0)] {
            v += w * model(p, ti + dt, &mut g[..grad.len()]);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += w * b;
            }
        }
        v
    };
    let model: ModelFn = if data.binned { &averaged } else { model };
    let (t, y) = (&data.t, &data.y);
    let w: Vec<f64> = y.iter().map(|&c| 1.0 / c.max(1.0)).collect();
    let mut out = levenberg_marquardt(t, y, &w, p0, model, domain)?;
    let scale = y.iter().copied().fold(0.0, f64::max);
    let floor = WEIGHT_FLOOR * scale;
    let mut grad = vec![0.0; p0.len()];
    let mut total_iterations = out.iterations;
    for _ in 0..MAX_REWEIGHTS {
        let w: Vec<f64> = t
            .iter()
            .map(|&ti| 1.0 / model(&out.params, ti, &mut grad).max(floor))
            .collect();
        let next = levenberg_marquardt(t, y, &w, &out.params, model, domain)?;
        total_iterations += next.iterations;
        let settled = out
            .params
            .iter()
            .zip(&next.params)
            .all(|(a, b)| (a - b).abs() <= REWEIGHT_TOLERANCE * a.abs().max(1e-12));
        out = next;
        if settled {
            break;
        }
    }
    out.iterations = total_iterations;
    Ok(out)
}

fn confidence(out: &LmOutcome, n_points: usize, counts: bool) -> Result<Vec<f64>> {
    let dof = n_points.saturating_sub(out.params.len()).max(1);
    let mut reduced = out.chi2 / dof as f64;
    if counts {
        // Poisson weights are absolute variances; only overdispersion widens
        // the intervals. Sparse tails would otherwise shrink them.
        reduced = reduced.max(1.0);
    }
    let cov = out
        .normal
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateFit("singular normal matrix at the optimum".into()))?;
    Ok((0..out.params.len())
        .map(|i| Z95 * (cov[(i, i)].max(0.0) * reduced).sqrt())
        .collect())
}

fn param(name: &str, value: f64, ci95: f64) -> FitParam {
    FitParam {
        name: name.to_string(),
        value,
        ci95,
    }
}

/// Fits `a e^{-(t - t0)/tau} + b` from the peak bin onward; `t0` is the
/// first fitted bin center. With known jitter the fit starts
/// `3 sigma_jitter` after the peak, where the instrument response no
/// longer distorts the decay.
pub fn fit_exponential(h: &Histogram, opts: &FitOptions) -> Result<FitResult> {
    fit_exponential_data(&FitData::from_histogram(h), opts)
}

pub fn fit_exponential_data(data: &FitData, opts: &FitOptions) -> Result<FitResult> {
    let data = data.restricted(opts.range);
    if data.y.iter().all(|&y| y == 0.0) {
        return Err(Error::DegenerateFit("histogram is empty".into()));
    }
    let peak = data
        .y
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
        .0;
    let skip = opts.jitter_fwhm.map_or(0, |j| {
        (TAIL_SKIP_SIGMAS * j / FWHM_PER_SIGMA / data.bin_width).ceil() as usize
    });
    let start = (peak + skip).min(data.y.len());
    let t = data.t[start..].to_vec();
    let y = data.y[start..].to_vec();
    let nonempty = y.iter().filter(|&&v| v > 0.0).count();
    if nonempty < 10 {
        return Err(Error::DegenerateFit(format!(
            "need at least 10 non-empty bins after the peak, found {nonempty}"
        )));
    }
    let t0 = t[0];

    let tail = (y.len() / 10).max(1);
    let b0 = y[y.len() - tail..].iter().sum::<f64>() / tail as f64;
    let excess: Vec<f64> = y.iter().map(|v| (v - b0).max(0.0)).collect();
    let mass: f64 = excess.iter().sum();
    let tau0 = if mass > 0.0 {
        excess.iter().zip(&t).map(|(e, ti)| e * (ti - t0)).sum::<f64>() / mass
    } else {
        data.bin_width
    }
    .max(data.bin_width);
    let a0 = (y[0] - b0).max(1.0);

    let model = move |p: &[f64], ti: f64, grad: &mut [f64]| {
        let e = (-(ti - t0) / p[1]).exp();
        grad[0] = e;
        grad[1] = p[0] * e * (ti - t0) / (p[1] * p[1]);
        grad[2] = 1.0;
        p[0] * e + p[2]
    };
    let domain = |p: &[f64]| p[1] > 0.0;
    let sub = FitData {
        t: t.clone(),
        y: y.clone(),
        bin_width: data.bin_width,
        binned: data.binned,
    };
    let out = poisson_fit(&sub, &[a0, tau0, b0], &model, &domain)?;
    let ci = confidence(&out, t.len(), data.binned)?;
    let dof = t.len().saturating_sub(3).max(1) as f64;
    Ok(FitResult {
        model: FitModel::Exponential,
        params: vec![
            param("amplitude", out.params[0], ci[0]),
            param("tau", out.params[1], ci[1]),
            param("baseline", out.params[2], ci[2]),
        ],
        residual_norm: out.chi2 / dof,
        iterations: out.iterations,
        range: (t0, *t.last().unwrap()),
    })
}

/// Fits `b +/- a exp(-(t - t0)^2 / (2 sigma^2))` (minus for a notch) and
/// reports `fwhm = 2 sqrt(2 ln 2) sigma`; with known jitter also
/// `fwhm_deconvolved = sqrt(fwhm^2 - jitter^2)`.
pub fn fit_gaussian(h: &Histogram, inverted: bool, opts: &FitOptions) -> Result<FitResult> {
    fit_gaussian_data(&FitData::from_histogram(h), inverted, opts)
}

pub fn fit_gaussian_data(data: &FitData, inverted: bool, opts: &FitOptions) -> Result<FitResult> {
    let data = data.restricted(opts.range);
    let n = data.y.len();
    if n < 5 || data.y.iter().all(|&y| y == 0.0) {
        return Err(Error::DegenerateFit("histogram is empty".into()));
    }
    let sign = if inverted { -1.0 } else { 1.0 };

    let mut sorted = data.y.clone();
    sorted.sort_by(f64::total_cmp);
    let b0 = sorted[n / 2];
    let signal: Vec<f64> = data.y.iter().map(|&y| sign * (y - b0)).collect();
    let (peak, a0) = signal
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (j, v)| if v > b.1 { (j, v) } else { b });
    if !(a0 > 0.0) {
        return Err(Error::DegenerateFit(format!(
            "no {} above the median level",
            if inverted { "dip" } else { "peak" }
        )));
    }
    let mut lo = peak;
    while lo > 0 && signal[lo - 1] >= 0.5 * a0 {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < n && signal[hi + 1] >= 0.5 * a0 {
        hi += 1;
    }
    let width = (hi - lo + 1) as f64 * data.bin_width;
    let sigma0 = (width / FWHM_PER_SIGMA).max(0.5 * data.bin_width);
    let (mut num, mut den) = (0.0, 0.0);
    for (s, t) in signal[lo..=hi].iter().zip(&data.t[lo..=hi]) {
        num += s * t;
        den += s;
    }
    let center0 = num / den;

    let model = move |p: &[f64], ti: f64, grad: &mut [f64]| {
        let x = ti - p[1];
        let s2 = p[2] * p[2];
        let e = (-x * x / (2.0 * s2)).exp();
        grad[0] = sign * e;
        grad[1] = sign * p[0] * e * x / s2;
        grad[2] = sign * p[0] * e * x * x / (s2 * p[2]);
        grad[3] = 1.0;
        p[3] + sign * p[0] * e
    };
    let domain = |p: &[f64]| p[2] > 0.0;
    let out = poisson_fit(&data, &[a0, center0, sigma0, b0], &model, &domain)?;
    let ci = confidence(&out, n, data.binned)?;
    let fwhm = FWHM_PER_SIGMA * out.params[2];
    let fwhm_ci = FWHM_PER_SIGMA * ci[2];
    let mut params = vec![
        param("amplitude", out.params[0], ci[0]),
        param("center", out.params[1], ci[1]),
        param("sigma", out.params[2], ci[2]),
        param("baseline", out.params[3], ci[3]),
        param("fwhm", fwhm, fwhm_ci),
    ];
    if let Some(j) = opts.jitter_fwhm {
        if fwhm > j {
            let d = (fwhm * fwhm - j * j).sqrt();
            params.push(param("fwhm_deconvolved", d, fwhm / d * fwhm_ci));
        }
    }
    let dof = n.saturating_sub(4).max(1) as f64;
    Ok(FitResult {
        model: if inverted { FitModel::Notch } else { FitModel::Gaussian },
        params,
        residual_norm: out.chi2 / dof,
        iterations: out.iterations,
        range: (data.t[0], data.t[n - 1]),
    })
}

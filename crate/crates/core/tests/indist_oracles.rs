use eomshape::analyze::{
    indist_simple, indistinguishability_exact, indistinguishability_mc, optimal_delay, tradeoff_sweep,
    transmitted_fraction, DelayObjective, DelayRange, EfficiencyChain, SweepSettings,
};
use eomshape::emitter::{coherence_params, exponential_wavepacket, EmitterModel};
use eomshape::eomod::{
    apply_modulation, gaussian_drive, mz_transmission, EomParams, Modulation, TransmissionProfile, Unmodulated,
    FWHM_PER_SIGMA,
};
use eomshape::sigcore::TimeGrid;
use proptest::prelude::*;
use statrs::function::erf::erfc;

fn reference_emitter() -> EmitterModel {
    coherence_params(1.4, 0.28).unwrap()
}

fn gaussian_window(fwhm: f64) -> Modulation {
    let eom = EomParams::ideal(4.0).unwrap();
    Modulation::new(gaussian_drive(&eom, 4.0, fwhm, 0.0, false).unwrap(), eom)
}

/// Closed form of `int_0^inf exp(-(t-d)^2 / 2 s^2) G exp(-G t) dt`.
fn gaussian_fraction_closed_form(gamma: f64, fwhm: f64, d: f64) -> f64 {
    let s = fwhm / FWHM_PER_SIGMA;
    let z = (gamma * s * s - d) / (s * std::f64::consts::SQRT_2);
    gamma * s * (std::f64::consts::PI / 2.0).sqrt() * (-gamma * d + 0.5 * gamma * gamma * s * s).exp() * erfc(z)
}

/// Plain double sum over a coarse grid, no recursion.
fn double_sum_oracle(m: &EmitterModel, env: &dyn TransmissionProfile, delay: f64, dt: f64, t_end: f64) -> f64 {
    let n = (t_end / dt).round() as usize + 1;
    let w: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let edge = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            edge * dt * m.gamma * (-m.gamma * t).exp() * env.transmission_at(t - delay)
        })
        .collect();
    let mut num = 0.0;
    for i in 0..n {
        for j in 0..n {
            num += w[i] * w[j] * (-2.0 * m.gamma_star * (i as f64 - j as f64).abs() * dt).exp();
        }
    }
    let s: f64 = w.iter().sum();
    num / (s * s)
}

#[test]
fn unit_transmission_matches_closed_form_on_fine_grid() {
    let m = reference_emitter();
    // 30 lifetimes keeps truncation far below 1e-6; 0.1 ps keeps the
    // discretization below it too.
    let g = TimeGrid::new(0.0, 30.0 * m.tau_sp, 1e-4).unwrap();
    let i = indistinguishability_exact(&m, &Unmodulated, 0.0, &g).unwrap();
    let closed = m.gamma / (m.gamma + 2.0 * m.gamma_star);
    assert!((i - closed).abs() < 1e-6, "{i} vs {closed}");
}

#[test]
fn recursion_matches_double_sum_for_windows() {
    let m = reference_emitter();
    let dt = 0.004;
    let g = TimeGrid::new(0.0, 8.0, dt).unwrap();
    for (fwhm, delay) in [(0.14, 0.1), (0.3, 0.5), (0.72, 0.0), (0.72, 2.4)] {
        let env = gaussian_window(fwhm);
        let fast = indistinguishability_exact(&m, &env, delay, &g).unwrap();
        let slow = double_sum_oracle(&m, &env, delay, dt, 8.0);
        assert!((fast - slow).abs() < 1e-10, "fwhm {fwhm}: {fast} vs {slow}");
    }
}

#[test]
fn fraction_of_720ps_window_at_zero_delay() {
    let m = reference_emitter();
    let g = m.default_grid(0.001).unwrap();
    let f = transmitted_fraction(&m, &gaussian_window(0.72), 0.0, &g).unwrap();
    let oracle = gaussian_fraction_closed_form(m.gamma, 0.72, 0.0);
    assert!((f - oracle).abs() < 1e-4 * oracle, "{f} vs {oracle}");
    assert!((f - 0.23).abs() < 0.01);
}

#[test]
fn fraction_of_140ps_window_at_optimal_delay() {
    let m = reference_emitter();
    let g = m.default_grid(0.001).unwrap();
    let env = gaussian_window(0.14);
    let opt = optimal_delay(&m, &env, DelayObjective::Fraction, DelayRange::default(), &g).unwrap();
    // Brute-force maximum of the closed form on a 0.01 ps lattice.
    let (d_star, f_star) = (0..=100_000)
        .map(|i| -0.5 + i as f64 * 1e-5)
        .map(|d| (d, gaussian_fraction_closed_form(m.gamma, 0.14, d)))
        .fold((0.0, 0.0), |b, x| if x.1 > b.1 { x } else { b });
    assert!((opt.delay - d_star).abs() <= g.dt(), "{} vs {d_star}", opt.delay);
    assert!((opt.value - f_star).abs() < 1e-4 * f_star, "{} vs {f_star}", opt.value);
    assert!(opt.value > 0.09 && opt.value < 0.12);
    // Scan and refinement agree within one step.
    assert!((opt.delay - opt.scan_delay).abs() <= g.dt());
    // Front-loaded exponential: best window sits just after emission.
    assert!(opt.delay > 0.0 && opt.delay < 0.3);
}

#[test]
fn wide_window_prefers_small_positive_delay() {
    let m = reference_emitter();
    let g = m.default_grid(0.002).unwrap();
    let opt = optimal_delay(
        &m,
        &gaussian_window(0.72),
        DelayObjective::Fraction,
        DelayRange::default(),
        &g,
    )
    .unwrap();
    assert!(opt.delay > 0.0 && opt.delay < 1.0, "{}", opt.delay);
}

#[test]
fn exact_and_monte_carlo_agree_across_window_widths() {
    let m = reference_emitter();
    let g = m.default_grid(0.002).unwrap();
    let psi = exponential_wavepacket(&m, &g, 0.0).unwrap();
    for (i, fwhm) in [0.14, 0.3, 0.72, 2.0, f64::INFINITY].into_iter().enumerate() {
        let (exact, modulated) = if fwhm.is_infinite() {
            (
                indistinguishability_exact(&m, &Unmodulated, 0.0, &g).unwrap(),
                psi.clone(),
            )
        } else {
            let eom = EomParams::ideal(4.0).unwrap();
            let drive = gaussian_drive(&eom, 4.0, fwhm, 0.0, false).unwrap();
            let env = mz_transmission(&drive, &eom, &g);
            let delay = 0.1;
            let exact = indistinguishability_exact(&m, &env, delay, &g).unwrap();
            (exact, apply_modulation(&psi, &env, delay).unwrap())
        };
        let mc = indistinguishability_mc(&m, &modulated, 10_000, 1000 * i as u64).unwrap();
        assert!(
            (mc.mean - exact).abs() <= 3.0 * mc.std_err,
            "fwhm {fwhm}: mc {} +- {} vs exact {exact}",
            mc.mean,
            mc.std_err
        );
    }
}

#[test]
fn post_selection_raises_indistinguishability() {
    let m = reference_emitter();
    let g = m.default_grid(0.002).unwrap();
    let mut last = 0.0;
    for fwhm in [2.0, 0.72, 0.3, 0.14, 0.05] {
        let env = gaussian_window(fwhm);
        let opt = optimal_delay(
            &m,
            &env,
            DelayObjective::Indistinguishability,
            DelayRange { start: -0.5, end: 2.0 },
            &g,
        )
        .unwrap();
        assert!(opt.value >= last - 1e-12, "{fwhm}: {} < {last}", opt.value);
        last = opt.value;
    }
}

#[test]
fn fraction_grows_with_window_width() {
    let m = reference_emitter();
    let g = m.default_grid(0.002).unwrap();
    let mut last = 0.0;
    for fwhm in [0.05, 0.14, 0.3, 0.52, 0.72, 1.5, 4.0] {
        let opt = optimal_delay(
            &m,
            &gaussian_window(fwhm),
            DelayObjective::Fraction,
            DelayRange::default(),
            &g,
        )
        .unwrap();
        assert!(opt.value >= last, "{fwhm}");
        last = opt.value;
    }
}

#[test]
fn tradeoff_rows_are_consistent() {
    let m = reference_emitter();
    let chain = EfficiencyChain::new(vec![("collection".into(), 1e-3), ("other".into(), 0.5)]).unwrap();
    let settings = SweepSettings {
        dt: 0.002,
        ..SweepSettings::default()
    };
    let taus = [0.14, 0.3, 0.72, 20.0, f64::INFINITY];
    let t = tradeoff_sweep(&m, &taus, 5e7, &chain, &settings).unwrap();
    assert_eq!(t.rows.len(), taus.len());
    for (r, tau) in t.rows.iter().zip(taus) {
        assert_eq!(r.tau_mod, tau);
        assert!((0.0..=1.0).contains(&r.indist_exact));
        assert!((0.0..=1.0).contains(&r.transmitted_fraction));
        assert_eq!(r.indist_simple, indist_simple(&m, tau));
        assert!((r.rate - 5e7 * 5e-4 * r.transmitted_fraction).abs() < 1e-9 * r.rate.max(1.0));
    }
    assert!(t
        .rows
        .windows(2)
        .all(|w| w[1].transmitted_fraction >= w[0].transmitted_fraction));
    let wide = t.rows.last().unwrap();
    assert!((wide.indist_exact - 0.1).abs() < 1e-3);
    assert!((wide.rate - 5e7 * 5e-4).abs() < 1e-3 * 5e7 * 5e-4);
    assert!((t.rows[3].indist_exact - 0.1).abs() < 0.01);
    assert_eq!(t.row_for(0.14).unwrap().indist_simple, 1.0);
}

#[test]
fn calibration_inverts_the_rate() {
    let m = reference_emitter();
    let settings = SweepSettings {
        dt: 0.002,
        ..SweepSettings::default()
    };
    let probe = tradeoff_sweep(&m, &[0.14], 5e7, &EfficiencyChain::unit(), &settings).unwrap();
    let f = probe.rows[0].transmitted_fraction;
    let (chain, _) = EfficiencyChain::calibrated(6.8e4, 5e7, f).unwrap();
    assert!((chain.product() - 1.4e-2).abs() < 0.15e-2);
    let t = tradeoff_sweep(&m, &[0.14], 5e7, &chain, &settings).unwrap();
    assert!((t.rows[0].rate - 6.8e4).abs() < 1e-6 * 6.8e4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_value_is_a_probability(fwhm in 0.05f64..3.0, delay in -0.5f64..3.0, t2 in 0.02f64..2.8) {
        let m = coherence_params(1.4, t2).unwrap();
        let g = TimeGrid::new(0.0, 14.0, 0.005).unwrap();
        let eom = EomParams::reference();
        let env = Modulation::new(gaussian_drive(&eom, 4.0, fwhm, 0.0, false).unwrap(), eom);
        let i = indistinguishability_exact(&m, &env, delay, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
    }

    #[test]
    fn more_dephasing_never_helps(fwhm in 0.05f64..3.0, delay in -0.3f64..2.0, a in 0.05f64..2.8, b in 0.05f64..2.8) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        // Lower coherence time means larger gamma*.
        let noisy = coherence_params(1.4, lo).unwrap();
        let clean = coherence_params(1.4, hi).unwrap();
        let g = TimeGrid::new(0.0, 14.0, 0.005).unwrap();
        let env = gaussian_window(fwhm);
        let i_noisy = indistinguishability_exact(&noisy, &env, delay, &g).unwrap();
        let i_clean = indistinguishability_exact(&clean, &env, delay, &g).unwrap();
        prop_assert!(i_noisy <= i_clean + 1e-12);
    }
}

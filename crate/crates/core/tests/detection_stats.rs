use eomshape::detect::{
    analytic_histogram, detect_mc, histogram, histogram_times, pearson_chi2, poisson_band_fraction, schedule_events,
    DetectorModel, Histogram, TimingConfig,
};
use eomshape::emitter::{coherence_params, exponential_wavepacket, sample_phase_trajectory};
use eomshape::eomod::{apply_modulation, gaussian_drive, mz_transmission, EomParams};
use eomshape::sigcore::{TimeGrid, Wavepacket};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

const T_GATE: f64 = 50.0;

fn gate_grid() -> TimeGrid {
    TimeGrid::new(0.0, T_GATE, 0.001).unwrap()
}

fn emitted_in_gate(t2: f64) -> Wavepacket {
    let m = coherence_params(1.4, t2).unwrap();
    exponential_wavepacket(&m, &gate_grid(), 2.0).unwrap()
}

fn timing(gated: u64) -> TimingConfig {
    TimingConfig {
        gate_divider: 1,
        ..TimingConfig::reference(gated)
    }
}

#[test]
fn detected_count_is_binomial() {
    let g = gate_grid();
    let psi = emitted_in_gate(0.28);
    let eom = EomParams::reference();
    let env = mz_transmission(&gaussian_drive(&eom, 4.0, 0.72, 0.0, false).unwrap(), &eom, &g);
    let modulated = apply_modulation(&psi, &env, 2.8).unwrap();
    let f = modulated.norm();
    let eta = 0.3;
    let det = DetectorModel::new(0.25, eta, 0.0).unwrap();
    let n = 1_000_000u64;
    let stream = detect_mc(&[modulated], &det, &schedule_events(&timing(n)).unwrap(), 3).unwrap();
    let mean = n as f64 * eta * f;
    let got = stream.events.len() as f64;
    assert!((got - mean).abs() <= 3.0 * mean.sqrt(), "{got} vs {mean}");
}

fn unjittered_exponential_run(seed: u64) -> (Histogram, eomshape::detect::ExpectedHistogram) {
    let psi = emitted_in_gate(0.28);
    let det = DetectorModel::ideal();
    let n = 1_000_000u64;
    let stream = detect_mc(
        std::slice::from_ref(&psi),
        &det,
        &schedule_events(&timing(n)).unwrap(),
        seed,
    )
    .unwrap();
    let h = histogram(&stream, 0.05, 20.0).unwrap();
    let e = analytic_histogram(&psi, &det, n, 0.05, 20.0).unwrap();
    (h, e)
}

#[test]
fn exponential_stream_lies_in_poisson_bands() {
    let (h, e) = unjittered_exponential_run(21);
    // Independent expectation: closed-form integral of G exp(-G (t - 2)) per bin.
    let gamma = 1.0 / 1.4;
    let n = h.total_pulses as f64;
    let inside = (0..h.n_bins())
        .filter(|&j| {
            let (a, b) = (h.bin_start(j).max(2.0), h.bin_start(j + 1).max(2.0));
            let mu = n * ((-gamma * (a - 2.0)).exp() - (-gamma * (b - 2.0)).exp());
            (h.counts[j] as f64 - mu).abs() <= 4.0 * mu.sqrt()
        })
        .count();
    assert!(inside as f64 >= 0.99 * h.n_bins() as f64, "{inside}/{}", h.n_bins());
    assert!(poisson_band_fraction(&h, &e, 4.0).unwrap() >= 0.99);
}

#[test]
fn jittered_stream_passes_chi_square() {
    let psi = emitted_in_gate(0.28);
    let det = DetectorModel::new(0.25, 1.0, 0.0).unwrap();
    let n = 1_000_000u64;
    let stream = detect_mc(
        std::slice::from_ref(&psi),
        &det,
        &schedule_events(&timing(n)).unwrap(),
        8,
    )
    .unwrap();
    let h = histogram(&stream, 0.05, 20.0).unwrap();
    let e = analytic_histogram(&psi, &det, n, 0.05, 20.0).unwrap();
    let (chi2, used) = pearson_chi2(&h, &e, 5.0).unwrap();
    let limit = ChiSquared::new(used as f64).unwrap().inverse_cdf(0.95);
    assert!(chi2 <= limit, "chi2 {chi2} over {used} bins, 95% limit {limit}");
    assert!(poisson_band_fraction(&h, &e, 4.0).unwrap() >= 0.99);
}

#[test]
fn jittered_exponential_peak_matches_closed_form() {
    // Exponentially modified Gaussian: CDF has a closed form in Phi.
    let (lambda, sigma, t0) = (1.0 / 1.4, 0.25 / 2.354_820_045_030_949_3, 2.0);
    let std = Normal::new(0.0, 1.0).unwrap();
    let cdf = |x: f64| {
        let u = (x - t0) / sigma;
        std.cdf(u) - (-lambda * (x - t0) + 0.5 * lambda * lambda * sigma * sigma).exp() * std.cdf(u - lambda * sigma)
    };
    let g = TimeGrid::new(0.0, T_GATE, 1e-4).unwrap();
    let psi = exponential_wavepacket(&coherence_params(1.4, 0.28).unwrap(), &g, t0).unwrap();
    let det = DetectorModel::new(0.25, 1.0, 0.0).unwrap();
    let bw = 0.005;
    let e = analytic_histogram(&psi, &det, 1, bw, 10.0).unwrap();
    let (j, peak) = e.peak();
    let oracle = cdf((j + 1) as f64 * bw) - cdf(j as f64 * bw);
    assert!((peak / oracle - 1.0).abs() < 1e-4, "{peak} vs {oracle}");
    // Shifted later than emission and lower than the bare exponential.
    assert!(e.bin_center(j) > t0);
    assert!(peak < lambda * bw);
}

#[test]
fn jitter_preserves_area() {
    for jitter in [0.0, 0.05, 0.25, 0.6] {
        let psi = emitted_in_gate(0.28);
        let det = DetectorModel::new(jitter, 0.7, 0.0).unwrap();
        let e = analytic_histogram(&psi, &det, 12_345, 0.05, T_GATE).unwrap();
        let expected = 12_345.0 * 0.7 * psi.norm();
        assert!((e.total() / expected - 1.0).abs() < 1e-6, "jitter {jitter}");
    }
}

#[test]
fn detection_times_ignore_dephasing() {
    let clean = emitted_in_gate(2.8);
    let g = gate_grid();
    let m = coherence_params(1.4, 0.28).unwrap();
    let noisy = sample_phase_trajectory(&m, &g, 99)
        .apply(&emitted_in_gate(0.28))
        .unwrap();
    let det = DetectorModel::new(0.25, 0.5, 0.0).unwrap();
    let sched = schedule_events(&timing(200_000)).unwrap();
    let a = histogram(&detect_mc(&[clean], &det, &sched, 4).unwrap(), 0.05, T_GATE).unwrap();
    let b = histogram(&detect_mc(&[noisy], &det, &sched, 4).unwrap(), 0.05, T_GATE).unwrap();
    assert_eq!(a, b);
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let psi = emitted_in_gate(0.28);
    let det = DetectorModel::new(0.25, 0.5, 1e-4).unwrap();
    let sched = schedule_events(&TimingConfig::reference(300_000)).unwrap();
    let a = detect_mc(std::slice::from_ref(&psi), &det, &sched, 10).unwrap();
    let b = detect_mc(std::slice::from_ref(&psi), &det, &sched, 10).unwrap();
    let c = detect_mc(std::slice::from_ref(&psi), &det, &sched, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.gated_cycles, 30_000);
    assert!(a.events.iter().all(|d| d.cycle % 10 == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn binning_conserves_events(times in proptest::collection::vec(-5.0f64..60.0, 0..400), bw in 0.01f64..2.0) {
        let h = histogram_times(&times, bw, T_GATE).unwrap();
        prop_assert_eq!(h.total_detected() + h.underflow + h.overflow, times.len() as u64);
    }

    #[test]
    fn merging_is_associative(
        a in proptest::collection::vec(0.0f64..10.0, 0..100),
        b in proptest::collection::vec(0.0f64..10.0, 0..100),
        c in proptest::collection::vec(0.0f64..10.0, 0..100),
    ) {
        let h = |v: &Vec<f64>| histogram_times(v, 0.1, 10.0).unwrap();
        let mut left = h(&a);
        left.merge(&h(&b)).unwrap();
        left.merge(&h(&c)).unwrap();
        let mut bc = h(&b);
        bc.merge(&h(&c)).unwrap();
        let mut right = h(&a);
        right.merge(&bc).unwrap();
        prop_assert_eq!(&left, &right);
        let all: Vec<f64> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(left.counts, h(&all).counts);
    }
}

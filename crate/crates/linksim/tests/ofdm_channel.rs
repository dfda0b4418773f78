//! Waveform-domain oracles: OFDM round trips, the per-RE channel model
//! emerging from true convolution when the CP covers the delay spread,
//! PAPR against a directly-coded DFT, and fading statistics against the
//! analytic Jakes autocorrelation.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use linksim::channel::{awgn, ebno_to_n0, gen_channel, ChannelProfile, ChannelRealization};
use linksim::phy::{clip_waveform, data_re_count, Frontend, PilotLayout};

const FS: f64 = 2.16e6;

fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect()
}

#[test]
fn modulate_demodulate_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cp in [0usize, 6] {
        let fe = Frontend::new(14, 72, cp);
        let grid = random_grid(&mut rng, fe.n_re());
        let wave = fe.modulate(&grid);
        assert_eq!(wave.len(), 14 * (72 + cp));
        let back = fe.demodulate(&wave);
        let err = grid
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-12, "cp={cp} roundtrip err {err}");
    }
}

#[test]
fn modulation_is_unitary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fe = Frontend::new(4, 72, 0);
    let grid = random_grid(&mut rng, fe.n_re());
    let wave = fe.modulate(&grid);
    let pg: f64 = grid.iter().map(|x| x.norm_sqr()).sum();
    let pw: f64 = wave.iter().map(|x| x.norm_sqr()).sum();
    assert!((pg - pw).abs() < 1e-9 * pg);
}

#[test]
fn oversampled_waveform_interpolates_the_critically_sampled_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fe = Frontend::new(2, 72, 0);
    let grid = random_grid(&mut rng, fe.n_re());
    let wave = fe.modulate(&grid);
    let over = fe.oversampled_waveform(&grid);
    for s in 0..2 {
        for m in 0..72 {
            let a = wave[s * 72 + m];
            let b = over[s][4 * m];
            assert!((a - b).norm() < 1e-10, "symbol {s} sample {m}");
        }
    }
}

/// PAPR must match an independently written direct-DFT evaluation.
#[test]
fn papr_matches_direct_dft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, l) = (72usize, 4usize);
    let fe = Frontend::new(3, n, 0);
    let grid = random_grid(&mut rng, fe.n_re());
    let fast = fe.papr_db(&grid);
    for s in 0..3 {
        let row = &grid[s * n..(s + 1) * n];
        // direct sum, center zero padding spelled out
        let mut padded = vec![Complex64::new(0.0, 0.0); l * n];
        for k in 0..n {
            let kp = if k < n / 2 { k } else { k + (l - 1) * n };
            padded[kp] = row[k];
        }
        let total = l * n;
        let mut peak = 0.0f64;
        let mut mean = 0.0f64;
        for t in 0..total {
            let mut acc = Complex64::new(0.0, 0.0);
            for (kp, v) in padded.iter().enumerate() {
                let ang = 2.0 * std::f64::consts::PI * (t as f64) * (kp as f64) / total as f64;
                acc += v * Complex64::new(ang.cos(), ang.sin());
            }
            let p = (acc / (n as f64).sqrt()).norm_sqr();
            peak = peak.max(p);
            mean += p;
        }
        mean /= total as f64;
        let oracle = 10.0 * (peak / mean).log10();
        assert!(
            (fast[s] - oracle).abs() < 1e-9,
            "symbol {s}: {} vs oracle {}",
            fast[s],
            oracle
        );
    }
}

#[test]
fn single_subcarrier_has_zero_papr() {
    let n = 72;
    let fe = Frontend::new(1, n, 0);
    let mut grid = vec![Complex64::new(0.0, 0.0); n];
    grid[5] = Complex64::new(1.0, 0.3);
    let papr = fe.papr_db(&grid);
    assert!(papr[0].abs() < 1e-9, "constant envelope ⇒ 0 dB, got {}", papr[0]);
}

#[test]
fn papr_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fe = Frontend::new(1, 72, 0);
    let grid = random_grid(&mut rng, 72);
    let scaled: Vec<Complex64> = grid.iter().map(|x| x * 7.3).collect();
    assert!((fe.papr_db(&grid)[0] - fe.papr_db(&scaled)[0]).abs() < 1e-9);
}

/// With CP ≥ max delay and a static channel, true convolution must reduce to
/// per-RE multiplication by the frequency response.
#[test]
fn per_re_channel_model_emerges_under_cp() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n_sym, n_sc, cp) = (14usize, 72usize, 6usize);
    let fe = Frontend::new(n_sym, n_sc, cp);
    let profile = ChannelProfile::by_name("cdlc-like", 0.0, 3.5e9, FS, 100e-9).unwrap();
    profile.validate(n_sc);
    assert!(profile.max_delay() <= cp, "profile must fit the CP for this oracle");
    let grid = random_grid(&mut rng, fe.n_re());
    let wave = fe.modulate(&grid);
    let ch = gen_channel(&profile, wave.len(), 2, 1.0 / FS, 77);
    let rx = ch.apply(&wave).unwrap();
    let h = ch.freq_response(n_sym, n_sc, cp);
    for a in 0..2 {
        let got = fe.demodulate(&rx[a]);
        for s in 0..n_sym {
            for k in 0..n_sc {
                let want = h[(a * n_sym + s) * n_sc + k] * grid[s * n_sc + k];
                let err = (got[s * n_sc + k] - want).norm();
                assert!(err < 1e-9, "ant {a} sym {s} sc {k}: err {err}");
            }
        }
    }
}

#[test]
fn identity_and_rotation_channels() {
    let n = 100;
    let tx: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect();
    let ones = vec![Complex64::new(1.0, 0.0); n];
    let ch = ChannelRealization::from_taps(1, n, vec![0], ones, 1.0 / FS);
    assert_eq!(ch.apply(&tx).unwrap()[0], tx);
    let js = vec![Complex64::new(0.0, 1.0); n];
    let ch = ChannelRealization::from_taps(1, n, vec![0], js, 1.0 / FS);
    let rot = ch.apply(&tx).unwrap();
    for (y, x) in rot[0].iter().zip(&tx) {
        assert!((y - Complex64::new(0.0, 1.0) * x).norm() < 1e-12);
    }
}

#[test]
fn freq_response_phase_ramp_and_nulls() {
    let n = 64;
    let num = 4 * n;
    // one tap at delay 3: flat magnitude, linear phase
    let taps = vec![Complex64::new(1.0, 0.0); num];
    let ch = ChannelRealization::from_taps(1, num, vec![3], taps, 1.0 / FS);
    let h = ch.freq_response(1, n, 0);
    for k in 0..n {
        assert!((h[k].norm() - 1.0).abs() < 1e-12);
        let want = -2.0 * std::f64::consts::PI * (k as f64) * 3.0 / n as f64;
        let diff = (h[k].arg() - want).rem_euclid(2.0 * std::f64::consts::PI);
        assert!(diff < 1e-9 || (2.0 * std::f64::consts::PI - diff) < 1e-9);
    }
    // two equal taps at 0 and d: |H[k]| = |1 + e^{-j2πkd/n}|
    let d = 4usize;
    let two: Vec<Complex64> = (0..num * 2)
        .map(|i| Complex64::new(if i % 2 == 0 { 1.0 } else { 1.0 }, 0.0))
        .collect();
    let ch = ChannelRealization::from_taps(1, num, vec![0, d], two, 1.0 / FS);
    let h = ch.freq_response(1, n, 0);
    for k in 0..n {
        let ang = -2.0 * std::f64::consts::PI * (k as f64) * (d as f64) / n as f64;
        let want = (Complex64::new(1.0, 0.0) + Complex64::new(ang.cos(), ang.sin())).norm();
        assert!((h[k].norm() - want).abs() < 1e-9, "k={k}");
    }
}

/// Bessel J0 by its power series — the analytic Jakes autocorrelation.
fn bessel_j0(x: f64) -> f64 {
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..40 {
        term *= -(x * x) / (4.0 * (k * k) as f64);
        sum += term;
    }
    sum
}

#[test]
fn jakes_fading_statistics() {
    let profile = ChannelProfile::flat(120.0, 3.5e9);
    let fd = profile.max_doppler_hz();
    assert!((fd - 388.888888888889).abs() < 1e-6, "f_D = {fd}");

    let ts = 1.0 / FS;
    let lag = 600usize; // 2πf_D·τ ≈ 0.679 at this lag
    let trials = 4000usize;
    let mut power = 0.0f64;
    let mut corr = Complex64::new(0.0, 0.0);
    for trial in 0..trials {
        let ch = gen_channel(&profile, lag + 1, 1, ts, 9000 + trial as u64);
        let h0 = ch.tap(0, 0, 0);
        power += h0.norm_sqr();
        corr += h0 * ch.tap(0, lag, 0).conj();
    }
    power /= trials as f64;
    corr /= trials as f64;
    assert!((power - 1.0).abs() < 0.05, "E|h|² = {power}");
    let want = bessel_j0(2.0 * std::f64::consts::PI * fd * lag as f64 * ts);
    assert!(
        (corr.re - want).abs() < 0.05 && corr.im.abs() < 0.05,
        "autocorr {corr} vs J0 {want}"
    );
}

#[test]
fn zero_speed_means_static_taps() {
    let profile = ChannelProfile::flat(0.0, 3.5e9);
    let ch = gen_channel(&profile, 500, 2, 1.0 / FS, 3);
    for a in 0..2 {
        let h0 = ch.tap(a, 0, 0);
        for s in 1..500 {
            assert!((ch.tap(a, s, 0) - h0).norm() < 1e-12);
        }
    }
}

#[test]
fn channel_is_deterministic_per_seed() {
    let profile = ChannelProfile::by_name("cdla-like", 60.0, 3.5e9, FS, 100e-9).unwrap();
    let a = gen_channel(&profile, 256, 2, 1.0 / FS, 42);
    let b = gen_channel(&profile, 256, 2, 1.0 / FS, 42);
    for ant in 0..2 {
        for s in 0..256 {
            for l in 0..profile.delays.len() {
                assert_eq!(a.tap(ant, s, l), b.tap(ant, s, l));
            }
        }
    }
}

#[test]
fn profile_construction_invariants() {
    for name in ["flat", "cdla-like", "cdlb-like", "cdlc-like", "cdld-like", "cdle-like"] {
        let p = ChannelProfile::by_name(name, 30.0, 3.5e9, FS, 100e-9).unwrap();
        p.validate(72);
    }
    assert!(ChannelProfile::by_name("urban-canyon", 30.0, 3.5e9, FS, 100e-9).is_err());
}

#[test]
fn ebno_conversion_examples() {
    assert!((ebno_to_n0(0.0, 0.5, 2, 1.0) - 1.0).abs() < 1e-12);
    let half = ebno_to_n0(3.010299956639812, 0.5, 2, 1.0);
    assert!((half - 0.5).abs() < 1e-12);
    let scaled = ebno_to_n0(0.0, 0.5, 2, 1.3);
    assert!((scaled - 1.3).abs() < 1e-12);
}

#[test]
fn awgn_variance_and_zero_noise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut sig = vec![Complex64::new(0.0, 0.0); 200_000];
    awgn(&mut sig, 0.7, &mut rng);
    let var: f64 = sig.iter().map(|x| x.norm_sqr()).sum::<f64>() / sig.len() as f64;
    assert!((var - 0.7).abs() < 0.02);
    let orig = vec![Complex64::new(1.0, 2.0); 8];
    let mut same = orig.clone();
    awgn(&mut same, 0.0, &mut rng);
    assert_eq!(same, orig);
}

#[test]
fn clipping_caps_amplitude_and_preserves_phase() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut wave = random_grid(&mut rng, 4096);
    let orig = wave.clone();
    let rms = (orig.iter().map(|x| x.norm_sqr()).sum::<f64>() / orig.len() as f64).sqrt();
    clip_waveform(&mut wave, 1.0);
    for (y, x) in wave.iter().zip(&orig) {
        assert!(y.norm() <= rms * (1.0 + 1e-12));
        if x.norm() > 1e-9 {
            let cross = (y * x.conj()).im.abs() / (y.norm() * x.norm()).max(1e-30);
            assert!(cross < 1e-9, "phase changed");
        }
    }
}

#[test]
fn data_utilization_ladder() {
    let no_cp = Frontend::new(14, 72, 0);
    let with_cp = Frontend::new(14, 72, 6);
    assert!((no_cp.data_utilization(PilotLayout::None) - 1.0).abs() < 1e-15);
    assert!((no_cp.data_utilization(PilotLayout::TwoSymbol) - 6.0 / 7.0).abs() < 1e-15);
    assert!((with_cp.data_utilization(PilotLayout::None) - 12.0 / 13.0).abs() < 1e-15);
    assert!((with_cp.data_utilization(PilotLayout::TwoSymbol) - 72.0 / 91.0).abs() < 1e-15);
    assert_eq!(data_re_count(14, 72, PilotLayout::TwoSymbol), 12 * 72);
}

use linksim::autodiff::fdcheck::{check_graph, REL_TOL};
use linksim::autodiff::{ParamSet, Partition, Tape, Tensor};
use linksim::constellation::{
    bits_to_index, full_index, index_bits, normalize_on_tape, normalize_points, qam_points,
    Constellation, ConstellationError,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn cloud_stats(pts: &[Complex64]) -> (Complex64, f64) {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Complex64>() / n;
    let power = pts.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
    (mean, power)
}

#[test]
fn qpsk_matches_closed_form() {
    let pts = qam_points(2).unwrap();
    let s = 1.0 / 2.0_f64.sqrt();
    // MSB -> I sign, LSB -> Q sign; label 0 maps to the most negative level.
    let want = [
        Complex64::new(-s, -s),
        Complex64::new(-s, s),
        Complex64::new(s, -s),
        Complex64::new(s, s),
    ];
    for (p, w) in pts.iter().zip(&want) {
        assert!((p - w).norm() < 1e-15);
    }
}

#[test]
fn qam_init_is_unit_power_zero_mean() {
    for m in 1..=8 {
        let pts = qam_points(m).unwrap();
        let (mean, power) = cloud_stats(&pts);
        assert!(mean.norm() < 1e-12, "m={m} mean {mean}");
        assert!((power - 1.0).abs() < 1e-12, "m={m} power {power}");
    }
}

#[test]
fn sixteen_qam_scaling_and_gray_adjacency() {
    let pts = qam_points(4).unwrap();
    // All coordinates are odd multiples of 1/sqrt(10).
    let s = 1.0 / 10.0_f64.sqrt();
    for p in &pts {
        for v in [p.re, p.im] {
            let m = (v / s).round();
            assert!(((v / s) - m).abs() < 1e-12);
            assert!(m.abs() == 1.0 || m.abs() == 3.0);
        }
    }
    // Geometric neighbors differ in exactly one label bit.
    let step = 2.0 * s;
    for (i, a) in pts.iter().enumerate() {
        for (j, b) in pts.iter().enumerate() {
            if i < j && (a - b).norm() < step * 1.001 {
                assert_eq!(
                    (i ^ j).count_ones(),
                    1,
                    "neighbors {i:04b} and {j:04b} differ in more than one bit"
                );
            }
        }
    }
}

#[test]
fn normalization_statistics_over_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x434C4F5544);
    for trial in 0..1000 {
        let n = 1usize << rng.random_range(1..=8);
        let pts: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
                    + Complex64::new(rng.random_range(-5.0..5.0), 0.0)
            })
            .collect();
        let Ok(out) = normalize_points(&pts) else { continue };
        let (mean, power) = cloud_stats(&out);
        assert!(mean.norm() <= 1e-9, "trial {trial}: mean {mean}");
        assert!((power - 1.0).abs() <= 1e-9, "trial {trial}: power {power}");
    }
}

#[test]
fn normalization_is_idempotent_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let pts: Vec<Complex64> = (0..16)
            .map(|_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let once = normalize_points(&pts).unwrap();
        let twice = normalize_points(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).norm() < 1e-12);
        }
        let d = Complex64::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let shifted: Vec<Complex64> = pts.iter().map(|c| c + d).collect();
        let from_shifted = normalize_points(&shifted).unwrap();
        for (a, b) in once.iter().zip(&from_shifted) {
            assert!((a - b).norm() < 1e-12, "shift by {d} changed the output");
        }
    }
}

#[test]
fn qpsk_is_a_fixed_point_of_normalization() {
    let pts = qam_points(2).unwrap();
    let out = normalize_points(&pts).unwrap();
    for (a, b) in pts.iter().zip(&out) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn degenerate_clouds_are_rejected() {
    let one = vec![Complex64::new(1.0, 1.0)];
    assert!(matches!(normalize_points(&one), Err(ConstellationError::DegenerateCloud)));
    let same = vec![Complex64::new(0.3, -0.2); 8];
    assert!(matches!(normalize_points(&same), Err(ConstellationError::DegenerateCloud)));
}

#[test]
fn subsets_nest_and_use_the_stated_index_sets() {
    // Perturb the QAM start so the test is not about lattice symmetry.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut c = Constellation::qam(8).unwrap();
    for v in c.re.iter_mut().chain(c.im.iter_mut()) {
        *v += rng.random_range(-0.05..0.05);
    }

    for m in 1..=8usize {
        let sub = c.subset(m).unwrap();
        assert_eq!(sub.points.len(), 1 << m);
        let want: Vec<usize> = (0..(1usize << m)).map(|i| i << (8 - m)).collect();
        assert_eq!(sub.indices, want, "order {m} index set");
    }

    let full = c.normalized().unwrap();
    for m in 1..8usize {
        let lo = c.subset(m).unwrap();
        let hi = c.subset(m + 1).unwrap();
        for (i, p) in lo.indices.iter().zip(&lo.points) {
            assert!(hi.indices.contains(i), "index {i} of C_{m} missing from C_{}", m + 1);
            let q = full[*i];
            assert!((p - q).norm() < 1e-15);
        }
    }

    let top = c.subset(8).unwrap();
    assert!((top.power - 1.0).abs() < 1e-9, "full-set power {}", top.power);
    assert_eq!(top.points.len(), full.len());
}

#[test]
fn qpsk_subset_of_sixteen_qam_sits_on_the_corners() {
    let c = Constellation::qam(4).unwrap();
    let sub = c.subset(2).unwrap();
    assert_eq!(sub.indices, vec![0, 4, 8, 12]);
    let corner = 3.0 / 10.0_f64.sqrt();
    for p in &sub.points {
        assert!((p.re.abs() - corner).abs() < 1e-12);
        assert!((p.im.abs() - corner).abs() < 1e-12);
    }
    // Mean corner power 2*9/10; this is what the noise gets scaled by at M=2.
    assert!((sub.power - 1.8).abs() < 1e-12);
}

#[test]
fn bit_group_indexing_is_msb_first_with_low_zero_padding() {
    assert_eq!(bits_to_index(&[1, 0, 1, 1]), 0b1011);
    assert_eq!(index_bits(0b1011, 4), vec![1, 0, 1, 1]);
    for i in 0..64 {
        assert_eq!(bits_to_index(&index_bits(i, 6)), i);
    }
    // Two data bits inside an order-6 table: bits (b0, b1, 0, 0, 0, 0).
    assert_eq!(full_index(0b11, 2, 6), 0b110000);
    assert_eq!(full_index(1, 2, 6), 16);
}

#[test]
fn tape_normalization_matches_numeric_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let n = 16usize;
    let re: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let im: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pts: Vec<Complex64> =
        re.iter().zip(&im).map(|(&r, &i)| Complex64::new(r + 0.7, i - 0.3)).collect();

    let mut params = ParamSet::new();
    let c = Constellation::from_points(4, &pts);
    c.register(&mut params);

    let mut tape = Tape::new(&params);
    let cloud = Constellation::on_tape(&mut tape).unwrap();
    let got_re = tape.value(cloud.re).data().to_vec();
    let got_im = tape.value(cloud.im).data().to_vec();

    let want = normalize_points(&pts).unwrap();
    for i in 0..n {
        assert!((got_re[i] - want[i].re).abs() < 1e-12);
        assert!((got_im[i] - want[i].im).abs() < 1e-12);
    }
}

#[test]
fn gradients_flow_through_the_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let n = 8usize;
    let mut params = ParamSet::new();
    let re = Tensor::new(&[n], (0..n).map(|_| rng.random_range(-1.5..1.5)).collect());
    let im = Tensor::new(&[n], (0..n).map(|_| rng.random_range(-1.5..1.5)).collect());
    params.add("constellation.re", Partition::Constellation, re);
    params.add("constellation.im", Partition::Constellation, im);
    let w: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let w2 = w.clone();
    let check = check_graph("constellation-normalize", &mut params, &|tape: &mut Tape| {
        let re = tape.param(tape.params().id("constellation.re")?)?;
        let im = tape.param(tape.params().id("constellation.im")?)?;
        let cloud = normalize_on_tape(tape, re, im)?;
        // Arbitrary linear readout keeps every output element in the loss.
        let wr = tape.constant(Tensor::new(&[n], w2[..n].to_vec()))?;
        let wi = tape.constant(Tensor::new(&[n], w2[n..].to_vec()))?;
        let a = tape.mul(cloud.re, wr)?;
        let b = tape.mul(cloud.im, wi)?;
        let s = tape.add(a, b)?;
        tape.sum_all(s)
    })
    .unwrap();
    assert!(
        check.pass,
        "normalization gradient check failed: rel err {} > {}",
        check.max_rel_err, REL_TOL
    );
}

#[test]
fn export_table_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut c = Constellation::qam(4).unwrap();
    for v in c.re.iter_mut().chain(c.im.iter_mut()) {
        *v += rng.random_range(-0.1..0.1);
    }
    let text = c.export_table().unwrap();
    let back = Constellation::parse_table(&text).unwrap();
    assert_eq!(back.m_max, 4);
    let want = c.normalized().unwrap();
    let got = back.raw_points();
    for (a, b) in want.iter().zip(&got) {
        assert!((a - b).norm() < 1e-15);
    }
    // The parsed table is already normalized, so normalizing again is a no-op.
    let renorm = back.normalized().unwrap();
    for (a, b) in got.iter().zip(&renorm) {
        assert!((a - b).norm() < 1e-12);
    }

    assert!(Constellation::parse_table("0 00 1.0").is_err());
    assert!(Constellation::parse_table("garbage here now ok").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_normalize_always_unit_stats(
        seed in any::<u64>(),
        log_n in 1usize..7,
        spread in 0.01f64..10.0,
        dc in -20.0f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1usize << log_n;
        let pts: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(
                dc + spread * rng.random_range(-1.0..1.0),
                spread * rng.random_range(-1.0..1.0),
            ))
            .collect();
        if let Ok(out) = normalize_points(&pts) {
            let (mean, power) = cloud_stats(&out);
            prop_assert!(mean.norm() <= 1e-9);
            prop_assert!((power - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn prop_index_roundtrip(i in 0usize..4096, m in 12usize..16) {
        prop_assert_eq!(bits_to_index(&index_bits(i, m)), i);
    }

    #[test]
    fn prop_subset_power_matches_direct_mean(seed in any::<u64>(), m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Constellation::qam(6).unwrap();
        for v in c.re.iter_mut().chain(c.im.iter_mut()) {
            *v += rng.random_range(-0.2..0.2);
        }
        let sub = c.subset(m).unwrap();
        let direct = sub.points.iter().map(|p| p.norm_sqr()).sum::<f64>()
            / sub.points.len() as f64;
        prop_assert!((sub.power - direct).abs() < 1e-12);
    }
}

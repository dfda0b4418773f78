use linksim::coding::{CodingError, LdpcCode, DECODE_MAX_ITERS};
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// BPSK over AWGN: LLR for bit b with x = 1-2b is log P(1)/P(0) = -2y/sigma^2.
fn bpsk_llrs(cw: &[u8], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma).unwrap();
    cw.iter()
        .map(|&b| {
            let y = 1.0 - 2.0 * b as f64 + noise.sample(rng);
            -2.0 * y / (sigma * sigma)
        })
        .collect()
}

#[test]
fn toy_code_corrects_every_single_bit_error_exhaustively() {
    let code = LdpcCode::new(16, 2).unwrap();
    assert_eq!(code.k(), 8);
    let strong = 8.0;
    let mut decodes = 0usize;
    for word in 0u16..256 {
        let info: Vec<u8> = (0..8).map(|b| ((word >> b) & 1) as u8).collect();
        let cw = code.encode(&info).unwrap();
        assert!(code.parity_ok(&cw), "encode must satisfy parity (word {word})");
        for flip in 0..16usize {
            let mut llr: Vec<f64> =
                cw.iter().map(|&b| if b == 1 { strong } else { -strong }).collect();
            llr[flip] = -llr[flip];
            let res = code.decode(&llr, DECODE_MAX_ITERS).unwrap();
            assert!(res.converged, "word {word} flip {flip} did not converge");
            assert_eq!(res.info_bits, info, "word {word} flip {flip} miscorrected");
            assert_eq!(res.codeword, cw);
            decodes += 1;
        }
    }
    assert_eq!(decodes, 256 * 16);
}

#[test]
fn all_zero_info_maps_to_all_zero_codeword() {
    for n in [16usize, 64, 1008] {
        let code = LdpcCode::new(n, 17).unwrap();
        let cw = code.encode(&vec![0u8; code.k()]).unwrap();
        assert!(cw.iter().all(|&b| b == 0), "n={n}");
    }
}

#[test]
fn generator_annihilates_parity_checks() {
    // Row space check: every basis codeword satisfies H c = 0.
    let code = LdpcCode::new(128, 11).unwrap();
    for j in 0..code.k() {
        let mut info = vec![0u8; code.k()];
        info[j] = 1;
        let cw = code.encode(&info).unwrap();
        assert!(code.parity_ok(&cw), "basis vector {j}");
        // Systematic: the info bit shows up untouched at its column.
        assert_eq!(cw[code.info_positions()[j]], 1);
    }
}

#[test]
fn random_encodes_always_satisfy_parity() {
    let code = LdpcCode::new(1008, 17).unwrap();
    assert_eq!(code.k(), 504);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..25 {
        let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&info).unwrap();
        assert!(code.parity_ok(&cw));
        for (j, &col) in code.info_positions().iter().enumerate() {
            assert_eq!(cw[col], info[j]);
        }
    }
}

#[test]
fn saturated_correct_llrs_converge_in_one_iteration() {
    let code = LdpcCode::new(1008, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
    let cw = code.encode(&info).unwrap();
    let llr: Vec<f64> = cw.iter().map(|&b| if b == 1 { 40.0 } else { -40.0 }).collect();
    let res = code.decode(&llr, DECODE_MAX_ITERS).unwrap();
    assert!(res.converged);
    assert_eq!(res.iterations, 1);
    assert_eq!(res.info_bits, info);
}

#[test]
fn zero_llrs_never_converge() {
    let code = LdpcCode::new(64, 5).unwrap();
    let res = code.decode(&vec![0.0; 64], DECODE_MAX_ITERS).unwrap();
    assert!(!res.converged);
    assert_eq!(res.iterations, DECODE_MAX_ITERS);
}

#[test]
fn decoding_beats_hard_decision_at_moderate_snr() {
    let code = LdpcCode::new(1008, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Eb/N0 = 3 dB at rate 1/2 BPSK: sigma^2 = 1/(2 r Eb/N0).
    let ebno = 10f64.powf(0.3);
    let sigma = (1.0 / (2.0 * 0.5 * ebno)).sqrt();
    let (mut raw_errs, mut dec_errs, mut total) = (0usize, 0usize, 0usize);
    for _ in 0..20 {
        let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&info).unwrap();
        let llr = bpsk_llrs(&cw, sigma, &mut rng);
        for (c, l) in cw.iter().zip(&llr) {
            raw_errs += ((l > &0.0) as u8 != *c) as usize;
        }
        let res = code.decode(&llr, DECODE_MAX_ITERS).unwrap();
        for (a, b) in res.codeword.iter().zip(&cw) {
            dec_errs += (a != b) as usize;
        }
        total += code.n();
    }
    assert!(raw_errs > 0, "test needs a noisy operating point");
    assert!(
        dec_errs * 4 < raw_errs,
        "decoder gained too little: raw {raw_errs}/{total}, decoded {dec_errs}/{total}"
    );
}

#[test]
fn converged_flag_implies_parity() {
    let code = LdpcCode::new(256, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // Across a noise ramp, every converged output must satisfy parity.
    for round in 0..30 {
        let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&info).unwrap();
        let sigma = 0.5 + 0.05 * round as f64;
        let llr = bpsk_llrs(&cw, sigma, &mut rng);
        let res = code.decode(&llr, DECODE_MAX_ITERS).unwrap();
        if res.converged {
            assert!(code.parity_ok(&res.codeword));
        }
    }
}

#[test]
fn construction_is_deterministic_and_seed_sensitive() {
    let a = LdpcCode::new(256, 21).unwrap();
    let b = LdpcCode::new(256, 21).unwrap();
    let c = LdpcCode::new(256, 22).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_ne!(a.to_text(), c.to_text());
}

#[test]
fn cache_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let a = LdpcCode::cached(128, 33, dir.path()).unwrap();
    let path = dir.path().join("ldpc_n128_seed33.txt");
    assert!(path.exists());
    let first = std::fs::read_to_string(&path).unwrap();
    let b = LdpcCode::cached(128, 33, dir.path()).unwrap();
    assert_eq!(first, std::fs::read_to_string(&path).unwrap());
    assert_eq!(a.to_text(), b.to_text());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let info: Vec<u8> = (0..a.k()).map(|_| rng.random_range(0..2u8)).collect();
    assert_eq!(a.encode(&info).unwrap(), b.encode(&info).unwrap());

    assert!(LdpcCode::from_text("nonsense").is_err());
    assert!(matches!(LdpcCode::new(15, 0), Err(CodingError::BadLength(15))));
}

#[test]
fn shortened_code_pins_trailing_info_bits() {
    let code = LdpcCode::new(1008, 17).unwrap();
    let short = code.shorten(104).unwrap();
    assert_eq!(short.k(), 400);
    assert_eq!(short.transmitted_len(), 904);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let info: Vec<u8> = (0..short.k()).map(|_| rng.random_range(0..2u8)).collect();
    let tx = short.encode(&info).unwrap();
    assert_eq!(tx.len(), 904);

    // Noisy decode still recovers: pinned bits act as perfect side information.
    let sigma = (1.0 / (2.0 * 0.5 * 10f64.powf(0.4))).sqrt();
    let llr = bpsk_llrs(&tx, sigma, &mut rng);
    let res = short.decode(&llr, DECODE_MAX_ITERS).unwrap();
    assert_eq!(res.info_bits.len(), short.k());
    assert_eq!(res.info_bits, info);

    assert!(code.shorten(504).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_parity_holds_for_any_info_word(word in any::<u64>()) {
        let code = LdpcCode::new(16, 2).unwrap();
        let info: Vec<u8> = (0..8).map(|b| ((word >> b) & 1) as u8).collect();
        let cw = code.encode(&info).unwrap();
        prop_assert!(code.parity_ok(&cw));
    }

    #[test]
    fn prop_noiseless_roundtrip(seed in any::<u64>()) {
        let code = LdpcCode::new(64, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&info).unwrap();
        let llr: Vec<f64> = cw.iter().map(|&b| if b == 1 { 12.0 } else { -12.0 }).collect();
        let res = code.decode(&llr, DECODE_MAX_ITERS).unwrap();
        prop_assert!(res.converged);
        prop_assert_eq!(res.info_bits, info);
    }
}

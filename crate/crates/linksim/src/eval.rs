//! Monte-Carlo scoring of complete coded links. Every receiver — learned or
//! conventional — sees the same transmit path, channel draws and noise, so a
//! BER difference between two sweeps is attributable to the receiver alone.
//!
//! A slot is scored end to end: random information bits → LDPC codewords →
//! constellation symbols on the data REs (pilots inserted if the layout has
//! any) → OFDM waveform → fading channel plus AWGN → one of the receivers →
//! soft LLRs → decoder → error counts. Rates are reported with normal-
//! approximation confidence half-widths so a sweep can be read without
//! re-deriving how many errors backed each point.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, ParamSet};
use crate::baseline::{self, BaselineError, ChannelEstimate};
use crate::channel::{ebno_to_n0, gen_channel, ChannelError, ChannelProfile};
use crate::coding::{CodingError, LdpcCode, DECODE_MAX_ITERS};
use crate::constellation::{bits_to_index, Constellation, ConstellationError};
use crate::phy::{
    clip_waveform, data_mask, insert_pilots, papr_db_of, Frontend, PilotLayout, FS,
};
use crate::receiver::{forward_grids, per_re_llrs, RxShape};

/// Slot rate assumed by the throughput figure (slots per second).
pub const SLOTS_PER_SECOND: f64 = 2000.0;

/// 95% two-sided normal quantile, for the confidence half-widths.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Constellation(#[from] ConstellationError),
    #[error("invalid evaluation setup: {0}")]
    Invalid(String),
}

/// Which receiver demodulates the slot. The transmit side is identical for
/// all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RxKind {
    /// Trained CNN receiver on the raw grids, no pilots consumed.
    Neural,
    /// LS at the pilot symbols, linear interpolation in time, LMMSE
    /// combining, exact Gaussian demapper.
    Lmmse,
    /// Same equalizer chain but fed the true channel (genie bound).
    PerfectCsi,
}

impl RxKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RxKind::Neural => "neural",
            RxKind::Lmmse => "lmmse",
            RxKind::PerfectCsi => "perfect-csi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "neural" => Some(RxKind::Neural),
            "lmmse" => Some(RxKind::Lmmse),
            "perfect-csi" => Some(RxKind::PerfectCsi),
            _ => None,
        }
    }
}

/// Everything a sweep shares: geometry, code, channel family and the
/// transmit constellation. `neural` is only needed for [`RxKind::Neural`].
pub struct LinkSetup<'a> {
    pub constellation: &'a Constellation,
    pub code: &'a LdpcCode,
    pub profile: &'a ChannelProfile,
    pub layout: PilotLayout,
    pub n_r: usize,
    pub n_sym: usize,
    pub n_sc: usize,
    pub cp_len: usize,
    /// dB offset applied to the noise power the *receiver* is told about;
    /// the channel itself always uses the true value.
    pub noise_mismatch_db: f64,
    pub neural: Option<(&'a ParamSet, &'a RxShape)>,
}

impl LinkSetup<'_> {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.cp_len >= self.n_sc {
            return Err(EvalError::Invalid(format!(
                "cp_len {} must be below n_sc {}",
                self.cp_len, self.n_sc
            )));
        }
        if let Some((_, shape)) = self.neural {
            if (shape.n_r, shape.n_sym, shape.n_sc) != (self.n_r, self.n_sym, self.n_sc) {
                return Err(EvalError::Invalid(format!(
                    "receiver was built for {}x{}x{} (n_r x n_sym x n_sc), link is {}x{}x{}",
                    shape.n_r, shape.n_sym, shape.n_sc, self.n_r, self.n_sym, self.n_sc
                )));
            }
        }
        Ok(())
    }

    pub fn frontend(&self) -> Frontend {
        Frontend::new(self.n_sym, self.n_sc, self.cp_len)
    }

    /// Fraction of the slot's time-frequency resource carrying data, after
    /// pilot symbols and the cyclic prefix.
    pub fn utilization(&self) -> f64 {
        self.frontend().data_utilization(self.layout)
    }
}

/// Splits a slot's data bits into LDPC codewords. Whole codewords where the
/// bits divide evenly; otherwise the load is spread so every codeword is
/// shortened by the same amount (±1 bit) and none loses its entire payload.
pub fn plan_codewords(n_bits: usize, code: &LdpcCode) -> Result<Vec<usize>, EvalError> {
    if n_bits == 0 {
        return Err(EvalError::Invalid("slot carries no data bits".into()));
    }
    let n = code.n();
    let ncw = n_bits.div_ceil(n);
    let base = n_bits / ncw;
    let extra = n_bits % ncw;
    // Shortening drops info bits, so a codeword must keep at least one:
    // transmitted length > parity count.
    let min_tx = n - code.k() + 1;
    if base < min_tx {
        return Err(EvalError::Invalid(format!(
            "codewords of {base} bits would drop the whole payload of the ({n}, {}) code",
            code.k()
        )));
    }
    Ok((0..ncw).map(|i| base + usize::from(i < extra)).collect())
}

/// Error counts from one or more decoded slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotOutcome {
    pub info_bits: u64,
    pub bit_errors: u64,
    pub codewords: u64,
    pub block_errors: u64,
}

impl SlotOutcome {
    pub fn absorb(&mut self, other: SlotOutcome) {
        self.info_bits += other.info_bits;
        self.bit_errors += other.bit_errors;
        self.codewords += other.codewords;
        self.block_errors += other.block_errors;
    }
}

/// Transmits and scores one slot. Consumes the RNG for information bits, the
/// channel seed and the noise, in that order.
pub fn run_slot(
    setup: &LinkSetup<'_>,
    rx: RxKind,
    m: usize,
    ebno_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SlotOutcome, EvalError> {
    setup.validate()?;
    let sub = setup.constellation.subset(m)?;
    let n0 = ebno_to_n0(ebno_db, setup.code.rate(), m, sub.power);
    let mask = data_mask(setup.n_sym, setup.n_sc, setup.layout);
    let n_data = mask.iter().filter(|&&b| b).count();
    let chunks = plan_codewords(n_data * m, setup.code)?;

    // Encode: random payloads, concatenated onto the data REs in grid order.
    let mut infos = Vec::with_capacity(chunks.len());
    let mut tx_bits = Vec::with_capacity(n_data * m);
    for &tx_len in &chunks {
        if tx_len == setup.code.n() {
            let info: Vec<u8> =
                (0..setup.code.k()).map(|_| rng.random::<bool>() as u8).collect();
            tx_bits.extend(setup.code.encode(&info)?);
            infos.push(info);
        } else {
            let short = setup.code.shorten(setup.code.n() - tx_len)?;
            let info: Vec<u8> = (0..short.k()).map(|_| rng.random::<bool>() as u8).collect();
            tx_bits.extend(short.encode(&info)?);
            infos.push(info);
        }
    }

    // Map onto the grid, MSB first per RE.
    let n_re = setup.n_sym * setup.n_sc;
    let mut grid = vec![Complex64::default(); n_re];
    let mut off = 0;
    for re in 0..n_re {
        if mask[re] {
            let idx = bits_to_index(&tx_bits[off..off + m]);
            grid[re] = sub.points[idx];
            off += m;
        }
    }
    insert_pilots(&mut grid, setup.n_sym, setup.n_sc, setup.layout);

    // Air interface.
    let fe = setup.frontend();
    let tx = fe.modulate(&grid);
    let ch = gen_channel(setup.profile, tx.len(), setup.n_r, 1.0 / FS, rng.random::<u64>());
    let mut y = ch.apply(&tx)?;
    let sigma = (n0 / 2.0).sqrt();
    for ant in &mut y {
        for v in ant.iter_mut() {
            v.re += sigma * rng.sample::<f64, _>(StandardNormal);
            v.im += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }

    // Receive. The receiver is told a possibly mismatched noise power.
    let n0_rx = n0 * 10f64.powf(setup.noise_mismatch_db / 10.0);
    let grids: Vec<Vec<Complex64>> = y.iter().map(|ant| fe.demodulate(ant)).collect();
    let llrs: Vec<f64> = match rx {
        RxKind::Neural => {
            let (params, shape) = setup
                .neural
                .ok_or_else(|| EvalError::Invalid("no trained receiver loaded".into()))?;
            let out = forward_grids(params, shape, &grids, n0_rx, m)?;
            per_re_llrs(&out, m, Some(&mask))
        }
        RxKind::Lmmse => {
            let est = baseline::ls_interp(&grids, setup.n_sym, setup.n_sc, setup.layout)?;
            let eq = baseline::lmmse_equalize(&grids, &est, n0_rx, sub.power)?;
            baseline::demap_grid(&eq, &sub.points, m, Some(&mask))
        }
        RxKind::PerfectCsi => {
            let h = ch.freq_response(setup.n_sym, setup.n_sc, setup.cp_len);
            let est = ChannelEstimate::perfect(&h, setup.n_r, setup.n_sym, setup.n_sc);
            let eq = baseline::lmmse_equalize(&grids, &est, n0_rx, sub.power)?;
            baseline::demap_grid(&eq, &sub.points, m, Some(&mask))
        }
    };
    debug_assert_eq!(llrs.len(), n_data * m);

    // Decode each codeword and count.
    let mut out = SlotOutcome::default();
    let mut off = 0;
    for (&tx_len, info) in chunks.iter().zip(&infos) {
        let chunk = &llrs[off..off + tx_len];
        off += tx_len;
        let decoded = if tx_len == setup.code.n() {
            setup.code.decode(chunk, DECODE_MAX_ITERS)?.info_bits
        } else {
            setup
                .code
                .shorten(setup.code.n() - tx_len)?
                .decode(chunk, DECODE_MAX_ITERS)?
                .info_bits
        };
        let errs = info.iter().zip(&decoded).filter(|(a, b)| a != b).count() as u64;
        out.info_bits += info.len() as u64;
        out.bit_errors += errs;
        out.codewords += 1;
        out.block_errors += u64::from(errs > 0);
    }
    Ok(out)
}

/// Monte-Carlo stopping rule: run until `min_errors` bit errors have been
/// seen or `max_slots` slots are spent, whichever comes first.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub max_slots: usize,
    pub min_errors: u64,
}

/// One row of a sweep: counts, rates, confidence half-widths and the
/// throughput the operating point would sustain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkPoint {
    pub receiver: String,
    pub ebno_db: f64,
    pub order: usize,
    pub slots: usize,
    pub info_bits: u64,
    pub bit_errors: u64,
    pub ber: f64,
    pub ber_ci95: f64,
    pub codewords: u64,
    pub block_errors: u64,
    pub bler: f64,
    pub bler_ci95: f64,
    pub throughput_bps: f64,
}

fn rate_ci(errors: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 0.0);
    }
    let p = errors as f64 / trials as f64;
    (p, Z95 * (p * (1.0 - p) / trials as f64).sqrt())
}

/// Goodput of the operating point: slot rate × grid REs × code rate ×
/// pilot/CP utilization × bits per symbol × block success rate.
pub fn throughput_bps(setup: &LinkSetup<'_>, m: usize, bler: f64) -> f64 {
    SLOTS_PER_SECOND
        * (setup.n_sym * setup.n_sc) as f64
        * setup.code.rate()
        * setup.utilization()
        * m as f64
        * (1.0 - bler)
}

pub fn evaluate_point(
    setup: &LinkSetup<'_>,
    rx: RxKind,
    m: usize,
    ebno_db: f64,
    budget: Budget,
    rng: &mut ChaCha8Rng,
) -> Result<LinkPoint, EvalError> {
    setup.validate()?;
    let mut acc = SlotOutcome::default();
    let mut slots = 0;
    while slots < budget.max_slots {
        acc.absorb(run_slot(setup, rx, m, ebno_db, rng)?);
        slots += 1;
        if acc.bit_errors >= budget.min_errors {
            break;
        }
    }
    let (ber, ber_ci95) = rate_ci(acc.bit_errors, acc.info_bits);
    let (bler, bler_ci95) = rate_ci(acc.block_errors, acc.codewords);
    Ok(LinkPoint {
        receiver: rx.as_str().to_string(),
        ebno_db,
        order: m,
        slots,
        info_bits: acc.info_bits,
        bit_errors: acc.bit_errors,
        ber,
        ber_ci95,
        codewords: acc.codewords,
        block_errors: acc.block_errors,
        bler,
        bler_ci95,
        throughput_bps: throughput_bps(setup, m, bler),
    })
}

/// Sweeps one receiver over an Eb/N0 grid at a fixed order. One sequential
/// RNG stream drives the whole sweep, so a given seed fixes every draw.
pub fn sweep(
    setup: &LinkSetup<'_>,
    rx: RxKind,
    m: usize,
    ebno_grid: &[f64],
    budget: Budget,
    seed: u64,
) -> Result<Vec<LinkPoint>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ebno_grid
        .iter()
        .map(|&e| evaluate_point(setup, rx, m, e, budget, &mut rng))
        .collect()
}

/// Adaptation verdict for one Eb/N0: the order picked and why.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptPoint {
    pub ebno_db: f64,
    pub order: usize,
    pub bler: f64,
    /// False when no order met the target and the lowest-BLER one was
    /// reported instead.
    pub met_target: bool,
    pub throughput_bps: f64,
}

/// Measures every (Eb/N0, order) cell, then picks per Eb/N0 the highest
/// order whose BLER meets `target`; if none qualifies, the lowest-BLER order
/// is reported with `met_target = false`. Returns the picks and the full
/// table they were read from.
pub fn link_adapt(
    setup: &LinkSetup<'_>,
    rx: RxKind,
    orders: &[usize],
    ebno_grid: &[f64],
    target: f64,
    budget: Budget,
    seed: u64,
) -> Result<(Vec<AdaptPoint>, Vec<LinkPoint>), EvalError> {
    if orders.is_empty() {
        return Err(EvalError::Invalid("no modulation orders to adapt over".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Vec::with_capacity(orders.len() * ebno_grid.len());
    for &e in ebno_grid {
        for &m in orders {
            table.push(evaluate_point(setup, rx, m, e, budget, &mut rng)?);
        }
    }
    let picks = ebno_grid
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let rows = &table[i * orders.len()..(i + 1) * orders.len()];
            let best = rows
                .iter()
                .filter(|r| r.bler <= target)
                .max_by_key(|r| r.order)
                .map(|r| (r, true))
                .unwrap_or_else(|| {
                    let fallback = rows
                        .iter()
                        .min_by(|a, b| a.bler.total_cmp(&b.bler))
                        .expect("orders is non-empty");
                    (fallback, false)
                });
            AdaptPoint {
                ebno_db: e,
                order: best.0.order,
                bler: best.0.bler,
                met_target: best.1,
                throughput_bps: best.0.throughput_bps,
            }
        })
        .collect();
    Ok((picks, table))
}

/// Per-symbol PAPR samples (dB) of random slots, optionally after amplitude
/// clipping at `clip_rate` × RMS. The cyclic prefix never enters the
/// statistic, so the measurement is the same with or without one.
pub fn papr_samples(
    constellation: &Constellation,
    m: usize,
    n_sym: usize,
    n_sc: usize,
    slots: usize,
    clip_rate: Option<f64>,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    let sub = constellation.subset(m)?;
    let fe = Frontend::new(n_sym, n_sc, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(slots * n_sym);
    for _ in 0..slots {
        let grid: Vec<Complex64> = (0..n_sym * n_sc)
            .map(|_| sub.points[rng.random_range(0..sub.points.len())])
            .collect();
        match clip_rate {
            None => out.extend(fe.papr_db(&grid)),
            Some(rate) => {
                for mut sym in fe.oversampled_waveform(&grid) {
                    clip_waveform(&mut sym, rate);
                    out.push(papr_db_of(&sym));
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of samples strictly above each threshold. Non-increasing in the
/// threshold by construction.
pub fn ccdf_of(samples: &[f64], thresholds_db: &[f64]) -> Vec<f64> {
    thresholds_db
        .iter()
        .map(|&t| {
            let above = samples.iter().filter(|&&s| s > t).count();
            above as f64 / samples.len().max(1) as f64
        })
        .collect()
}

/// 0 dB to 12 dB in quarter-dB steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=48).map(|i| i as f64 * 0.25).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaprCcdf {
    pub order: usize,
    pub clip_rate: Option<f64>,
    pub samples: usize,
    pub thresholds_db: Vec<f64>,
    pub ccdf: Vec<f64>,
}

pub fn papr_ccdf(
    constellation: &Constellation,
    m: usize,
    n_sym: usize,
    n_sc: usize,
    slots: usize,
    clip_rate: Option<f64>,
    seed: u64,
) -> Result<PaprCcdf, EvalError> {
    let samples = papr_samples(constellation, m, n_sym, n_sc, slots, clip_rate, seed)?;
    let thresholds_db = default_thresholds();
    let ccdf = ccdf_of(&samples, &thresholds_db);
    Ok(PaprCcdf { order: m, clip_rate, samples: samples.len(), thresholds_db, ccdf })
}

// ---- stable text outputs ----------------------------------------------------
//
// The CSV schemas are part of the tool's interface: columns are never
// reordered, only appended.

pub const SWEEP_CSV_HEADER: &str = "receiver,ebno_db,order,slots,info_bits,bit_errors,ber,\
                                    ber_ci95,codewords,block_errors,bler,bler_ci95,throughput_bps";

pub fn sweep_csv(points: &[LinkPoint]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.receiver,
            p.ebno_db,
            p.order,
            p.slots,
            p.info_bits,
            p.bit_errors,
            p.ber,
            p.ber_ci95,
            p.codewords,
            p.block_errors,
            p.bler,
            p.bler_ci95,
            p.throughput_bps
        ));
    }
    out
}

pub const PAPR_CSV_HEADER: &str = "threshold_db,ccdf";

pub fn papr_csv(c: &PaprCcdf) -> String {
    let mut out = String::from(PAPR_CSV_HEADER);
    out.push('\n');
    for (t, p) in c.thresholds_db.iter().zip(&c.ccdf) {
        out.push_str(&format!("{t},{p}\n"));
    }
    out
}

pub const ADAPT_CSV_HEADER: &str = "ebno_db,order,bler,met_target,throughput_bps";

pub fn adapt_csv(rows: &[AdaptPoint]) -> String {
    let mut out = String::from(ADAPT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.ebno_db, r.order, r.bler, r.met_target, r.throughput_bps
        ));
    }
    out
}

//! Time-varying multipath SIMO channel with Doppler, AWGN, and Eb/N0
//! bookkeeping.
//!
//! Channels act on the transmitted waveform by time-varying linear
//! convolution, with no awareness of OFDM symbol boundaries — when the cyclic
//! prefix is shorter than the delay spread the resulting ISI/ICI is real, not
//! modeled. The per-grid frequency response is derived separately for the
//! baselines and invariance checks.
//!
//! Multipath profiles are tapped-delay-line approximations of the 3GPP
//! clustered models ("cdla-like" … "cdle-like"): a power-delay profile is
//! rescaled to the target RMS delay spread, quantized to the waveform sample
//! grid (taps landing on the same sample merge), and renormalized to unit
//! power. Spatial correlation across receive antennas is not modeled. Each
//! tap fades as a Gaussian-weighted sum of sinusoids whose frequencies
//! `f_D·cos(α_n)` reproduce the Jakes spectrum; `f_D = v·f_c/c` with
//! `c = 3.0e8` m/s.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Tensor;

pub const SPEED_OF_LIGHT: f64 = 3.0e8;
/// Oscillators per tap in the sum-of-sinusoids fading process.
pub const JAKES_OSCILLATORS: usize = 64;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("unknown channel profile {0:?}")]
    UnknownProfile(String),
    #[error("channel covers {have} samples, signal needs {need}")]
    DurationMismatch { have: usize, need: usize },
}

/// Rician line-of-sight component of the first tap.
#[derive(Clone, Copy, Debug)]
pub struct LosSpec {
    pub k_db: f64,
    /// Angle between travel direction and the LOS ray; sets the LOS Doppler.
    pub angle_rad: f64,
}

/// A quantized tapped-delay-line profile plus mobility parameters.
#[derive(Clone, Debug)]
pub struct ChannelProfile {
    pub name: String,
    /// Tap delays in waveform samples, sorted, unique.
    pub delays: Vec<usize>,
    /// Linear tap powers, sum 1.
    pub powers: Vec<f64>,
    pub los: Option<LosSpec>,
    pub speed_kmh: f64,
    pub carrier_hz: f64,
}

/// `(delay, power_db)` rows in unit-free delay; rescaled to the target RMS
/// delay spread before quantization.
type Pdp = &'static [(f64, f64)];

const PDP_CDLA: Pdp = &[(0.0, 0.0), (1.0, -4.3), (2.0, -8.7), (3.0, -13.0), (5.0, -21.7), (8.0, -34.7)];
const PDP_CDLB: Pdp = &[(0.0, 0.0), (1.0, -1.0), (2.5, -2.5), (4.0, -5.0), (6.0, -9.0)];
const PDP_CDLC: Pdp = &[(0.0, -2.0), (0.7, 0.0), (2.0, -3.0), (3.5, -6.0), (6.0, -10.0), (9.0, -16.0)];
const PDP_CDLD: Pdp = &[(0.0, 0.0), (1.5, -8.0), (3.5, -14.0)];
const PDP_CDLE: Pdp = &[(0.0, 0.0), (2.0, -12.0), (5.0, -18.0)];

impl ChannelProfile {
    /// Single Rayleigh tap at delay zero.
    pub fn flat(speed_kmh: f64, carrier_hz: f64) -> Self {
        Self {
            name: "flat".into(),
            delays: vec![0],
            powers: vec![1.0],
            los: None,
            speed_kmh,
            carrier_hz,
        }
    }

    /// Builds a named profile quantized to `sample_rate_hz` with the given
    /// RMS delay spread. Known names: `flat`, `cdla-like` … `cdle-like`.
    pub fn by_name(
        name: &str,
        speed_kmh: f64,
        carrier_hz: f64,
        sample_rate_hz: f64,
        delay_spread_s: f64,
    ) -> Result<Self, ChannelError> {
        let (pdp, los): (Pdp, Option<LosSpec>) = match name {
            "flat" => return Ok(Self::flat(speed_kmh, carrier_hz)),
            "cdla-like" => (PDP_CDLA, None),
            "cdlb-like" => (PDP_CDLB, None),
            "cdlc-like" => (PDP_CDLC, None),
            "cdld-like" => (
                PDP_CDLD,
                Some(LosSpec { k_db: 13.3, angle_rad: std::f64::consts::FRAC_PI_4 }),
            ),
            "cdle-like" => (
                PDP_CDLE,
                Some(LosSpec { k_db: 22.0, angle_rad: std::f64::consts::FRAC_PI_4 }),
            ),
            other => return Err(ChannelError::UnknownProfile(other.to_string())),
        };
        let powers_lin: Vec<f64> = pdp.iter().map(|&(_, db)| 10f64.powf(db / 10.0)).collect();
        let total: f64 = powers_lin.iter().sum();
        let p: Vec<f64> = powers_lin.iter().map(|v| v / total).collect();
        // rescale delays so the RMS spread hits the target exactly
        let mean: f64 = pdp.iter().zip(&p).map(|(&(d, _), &w)| d * w).sum();
        let second: f64 = pdp.iter().zip(&p).map(|(&(d, _), &w)| d * d * w).sum();
        let rms = (second - mean * mean).sqrt();
        let scale = delay_spread_s / rms;
        let ts = 1.0 / sample_rate_hz;
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (&(d, _), &w) in pdp.iter().zip(&p) {
            let samples = (d * scale / ts).round() as usize;
            match merged.iter_mut().find(|(s, _)| *s == samples) {
                Some((_, acc)) => *acc += w,
                None => merged.push((samples, w)),
            }
        }
        merged.sort_by_key(|&(s, _)| s);
        Ok(Self {
            name: name.to_string(),
            delays: merged.iter().map(|&(s, _)| s).collect(),
            powers: merged.iter().map(|&(_, w)| w).collect(),
            los,
            speed_kmh,
            carrier_hz,
        })
    }

    pub fn max_delay(&self) -> usize {
        *self.delays.last().unwrap()
    }

    /// Maximum Doppler shift `v·f_c/c` in Hz.
    pub fn max_doppler_hz(&self) -> f64 {
        self.speed_kmh / 3.6 * self.carrier_hz / SPEED_OF_LIGHT
    }

    pub fn validate(&self, n_sc: usize) {
        assert!(!self.delays.is_empty());
        let sum: f64 = self.powers.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "tap powers sum to {sum}");
        assert!(self.powers.iter().all(|&p| p >= 0.0));
        assert!(self.max_delay() < n_sc, "delay spread exceeds a symbol");
    }
}

/// One drawn channel: per-antenna, per-sample complex gains for each tap.
pub struct ChannelRealization {
    pub n_r: usize,
    pub num_samples: usize,
    pub delays: Vec<usize>,
    /// `[n_r][num_samples][n_taps]`, flattened row-major.
    taps: Vec<Complex64>,
    pub ts: f64,
}

impl ChannelRealization {
    /// Assembles a realization from explicit per-sample taps
    /// (`taps[a][n][tap]` flattened); mainly for deterministic tests.
    pub fn from_taps(n_r: usize, num_samples: usize, delays: Vec<usize>, taps: Vec<Complex64>, ts: f64) -> Self {
        assert_eq!(taps.len(), n_r * num_samples * delays.len());
        Self { n_r, num_samples, delays, taps, ts }
    }

    pub fn tap(&self, ant: usize, sample: usize, tap: usize) -> Complex64 {
        self.taps[(ant * self.num_samples + sample) * self.delays.len() + tap]
    }

    /// Convolves the transmit waveform with the fading taps, per antenna.
    /// Output length equals input length; the tail that would spill past the
    /// end is dropped (the next slot is a separate simulation).
    pub fn apply(&self, tx: &[Complex64]) -> Result<Vec<Vec<Complex64>>, ChannelError> {
        if tx.len() > self.num_samples {
            return Err(ChannelError::DurationMismatch { have: self.num_samples, need: tx.len() });
        }
        let mut out = Vec::with_capacity(self.n_r);
        for a in 0..self.n_r {
            let mut y = vec![Complex64::new(0.0, 0.0); tx.len()];
            for (li, &d) in self.delays.iter().enumerate() {
                for n in d..tx.len() {
                    y[n] += self.tap(a, n, li) * tx[n - d];
                }
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Per-RE channel `H[a, s, k]`, taps sampled at the midpoint of each OFDM
    /// symbol's useful (post-CP) span: `H = Σ_l h_l e^{-j2πk d_l / n_sc}`.
    pub fn freq_response(&self, n_sym: usize, n_sc: usize, cp_len: usize) -> Vec<Complex64> {
        let sym_len = n_sc + cp_len;
        let mut h = vec![Complex64::new(0.0, 0.0); self.n_r * n_sym * n_sc];
        for a in 0..self.n_r {
            for s in 0..n_sym {
                let mid = (s * sym_len + cp_len + n_sc / 2).min(self.num_samples - 1);
                for k in 0..n_sc {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (li, &d) in self.delays.iter().enumerate() {
                        let ang = -2.0 * std::f64::consts::PI * (k as f64) * (d as f64) / n_sc as f64;
                        acc += self.tap(a, mid, li) * Complex64::new(ang.cos(), ang.sin());
                    }
                    h[(a * n_sym + s) * n_sc + k] = acc;
                }
            }
        }
        h
    }

    /// Dense `[num_samples, max_delay+1]` tap tables for one antenna, zeros
    /// at delays with no tap — the layout `tv_conv` expects.
    pub fn dense_taps(&self, ant: usize) -> (Tensor, Tensor) {
        let l = self.delays.last().unwrap() + 1;
        let n = self.num_samples;
        let mut re = vec![0.0; n * l];
        let mut im = vec![0.0; n * l];
        for (li, &d) in self.delays.iter().enumerate() {
            for s in 0..n {
                let v = self.tap(ant, s, li);
                re[s * l + d] = v.re;
                im[s * l + d] = v.im;
            }
        }
        (Tensor::new(&[n, l], re), Tensor::new(&[n, l], im))
    }
}

/// Draws a channel realization. Deterministic in `seed`; oscillator
/// parameters are drawn per (antenna, tap) in a fixed order.
pub fn gen_channel(
    profile: &ChannelProfile,
    num_samples: usize,
    n_r: usize,
    ts: f64,
    seed: u64,
) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fd = profile.max_doppler_hz();
    let n_taps = profile.delays.len();
    let mut taps = vec![Complex64::new(0.0, 0.0); n_r * num_samples * n_taps];
    // LOS power split for the first tap, if any
    let (los_amp, diffuse_scale0, los_doppler) = match profile.los {
        Some(los) => {
            let k = 10f64.powf(los.k_db / 10.0);
            (
                (k / (k + 1.0)).sqrt(),
                (1.0 / (k + 1.0)).sqrt(),
                fd * los.angle_rad.cos(),
            )
        }
        None => (0.0, 1.0, 0.0),
    };
    for a in 0..n_r {
        for li in 0..n_taps {
            let tap_amp = profile.powers[li].sqrt();
            let diffuse = if li == 0 { tap_amp * diffuse_scale0 } else { tap_amp };
            // Gaussian-weighted sum of sinusoids with Jakes frequencies
            let mut osc: Vec<(f64, Complex64)> = Vec::with_capacity(JAKES_OSCILLATORS);
            let amp_scale = diffuse / (JAKES_OSCILLATORS as f64).sqrt();
            for _ in 0..JAKES_OSCILLATORS {
                let alpha: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                let g_re: f64 = rng.sample(StandardNormal);
                let g_im: f64 = rng.sample(StandardNormal);
                let weight = Complex64::new(g_re, g_im) * std::f64::consts::FRAC_1_SQRT_2 * amp_scale;
                osc.push((fd * alpha.cos(), weight));
            }
            let los_phase0: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            for s in 0..num_samples {
                let t = s as f64 * ts;
                let mut h = Complex64::new(0.0, 0.0);
                for &(f, w) in &osc {
                    let ang = 2.0 * std::f64::consts::PI * f * t;
                    h += w * Complex64::new(ang.cos(), ang.sin());
                }
                if li == 0 && los_amp > 0.0 {
                    let ang = 2.0 * std::f64::consts::PI * los_doppler * t + los_phase0;
                    h += tap_amp * los_amp * Complex64::new(ang.cos(), ang.sin());
                }
                taps[(a * num_samples + s) * n_taps + li] = h;
            }
        }
    }
    ChannelRealization {
        n_r,
        num_samples,
        delays: profile.delays.clone(),
        taps,
        ts,
    }
}

/// `N0 = P0 / (r · M · 10^{EbN0/10})` under unit symbol energy. `P0` is the
/// mean power of the active constellation subset (1 at full order).
pub fn ebno_to_n0(ebno_db: f64, code_rate: f64, bits_per_symbol: usize, subset_power: f64) -> f64 {
    assert!(code_rate > 0.0 && code_rate <= 1.0, "code rate {code_rate}");
    assert!(bits_per_symbol >= 1);
    assert!(subset_power > 0.0);
    subset_power / (code_rate * bits_per_symbol as f64 * 10f64.powf(ebno_db / 10.0))
}

/// Adds circularly-symmetric complex Gaussian noise of variance `n0`
/// (`n0/2` per real dimension) in place.
pub fn awgn(signal: &mut [Complex64], n0: f64, rng: &mut ChaCha8Rng) {
    assert!(n0 >= 0.0);
    if n0 == 0.0 {
        return;
    }
    let sigma = (n0 / 2.0).sqrt();
    for x in signal.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *x += Complex64::new(re * sigma, im * sigma);
    }
}

//! OFDM front end: slot geometry, (de)modulation, cyclic prefix, PAPR,
//! clipping, and pilot bookkeeping.
//!
//! A slot is `n_sym` OFDM symbols by `n_sc` subcarriers. The waveform-domain
//! sample rate carries one sample per subcarrier per symbol plus `cp_len`
//! prefix samples when the cyclic prefix is enabled. Removing pilots and the
//! CP is the whole point of the learned transceiver, so every routine here
//! treats both as optional.
//!
//! Data utilization ρ folds both overheads together:
//! `ρ = (data symbols / n_sym) · (n_sc / (n_sc + cp_len))`, giving the
//! familiar ladder 1, 6/7, 12/13, 72/91 for the 14×72 grid with a 6-sample CP
//! and a two-symbol pilot layout.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dft::{apply_cx, ofdm_basis, oversampled_idft, OfdmBasis, OversampledBasis};

/// Which OFDM symbols carry demodulation reference signals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PilotLayout {
    /// Pilot-free: every resource element carries data.
    None,
    /// Two full pilot symbols (indices 2 and 11 in a 14-symbol slot).
    TwoSymbol,
}

impl PilotLayout {
    pub fn pilot_symbols(self, n_sym: usize) -> Vec<usize> {
        match self {
            PilotLayout::None => Vec::new(),
            PilotLayout::TwoSymbol => {
                assert!(n_sym >= 12, "two-symbol layout expects a full slot");
                vec![2, 11]
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PilotLayout::None => "none",
            PilotLayout::TwoSymbol => "2sym",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PilotLayout::None),
            "2sym" => Some(PilotLayout::TwoSymbol),
            _ => None,
        }
    }
}

/// Slot geometry plus the shared transform tables.
pub struct Frontend {
    pub n_sym: usize,
    pub n_sc: usize,
    pub cp_len: usize,
    pub basis: OfdmBasis,
    pub oversampled: OversampledBasis,
}

/// Oversampling factor for PAPR evaluation.
pub const PAPR_OVERSAMPLING: usize = 4;

/// Baseband sample rate: 72 subcarriers at 30 kHz spacing.
pub const FS: f64 = 2.16e6;

impl Frontend {
    pub fn new(n_sym: usize, n_sc: usize, cp_len: usize) -> Self {
        Self {
            n_sym,
            n_sc,
            cp_len,
            basis: ofdm_basis(n_sc),
            oversampled: oversampled_idft(n_sc, PAPR_OVERSAMPLING),
        }
    }

    /// Samples per OFDM symbol in the transmitted waveform.
    pub fn sym_len(&self) -> usize {
        self.n_sc + self.cp_len
    }

    /// Samples per slot.
    pub fn slot_len(&self) -> usize {
        self.n_sym * self.sym_len()
    }

    pub fn n_re(&self) -> usize {
        self.n_sym * self.n_sc
    }

    /// Fraction of the slot's time-frequency resource that carries data.
    pub fn data_utilization(&self, layout: PilotLayout) -> f64 {
        let data_syms = self.n_sym - layout.pilot_symbols(self.n_sym).len();
        (data_syms as f64 / self.n_sym as f64) * (self.n_sc as f64 / self.sym_len() as f64)
    }

    /// Frequency grid `[n_sym × n_sc]` → time waveform, one IDFT per symbol,
    /// optionally prefixing each symbol with its own tail.
    pub fn modulate(&self, grid: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(grid.len(), self.n_re());
        let mut out = Vec::with_capacity(self.slot_len());
        for s in 0..self.n_sym {
            let row = &grid[s * self.n_sc..(s + 1) * self.n_sc];
            let time = apply_cx(&self.basis.idft_re, &self.basis.idft_im, row);
            out.extend_from_slice(&time[self.n_sc - self.cp_len..]);
            out.extend_from_slice(&time);
        }
        out
    }

    /// Time waveform → frequency grid; drops each symbol's prefix samples.
    pub fn demodulate(&self, waveform: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(waveform.len(), self.slot_len());
        let mut out = Vec::with_capacity(self.n_re());
        for s in 0..self.n_sym {
            let start = s * self.sym_len() + self.cp_len;
            let row = &waveform[start..start + self.n_sc];
            out.extend(apply_cx(&self.basis.dft_re, &self.basis.dft_im, row));
        }
        out
    }

    /// Oversampled (×4, center-padded) time waveform per symbol, used for
    /// PAPR evaluation; CP samples are not included — they repeat existing
    /// peaks and would bias the per-symbol statistic.
    pub fn oversampled_waveform(&self, grid: &[Complex64]) -> Vec<Vec<Complex64>> {
        assert_eq!(grid.len(), self.n_re());
        (0..self.n_sym)
            .map(|s| {
                let row = &grid[s * self.n_sc..(s + 1) * self.n_sc];
                apply_cx(&self.oversampled.mat_re, &self.oversampled.mat_im, row)
            })
            .collect()
    }

    /// Per-symbol PAPR in dB of the oversampled waveform.
    pub fn papr_db(&self, grid: &[Complex64]) -> Vec<f64> {
        self.oversampled_waveform(grid)
            .iter()
            .map(|sym| papr_db_of(sym))
            .collect()
    }
}

/// Peak-to-average power ratio of one symbol's samples, in dB.
pub fn papr_db_of(samples: &[Complex64]) -> f64 {
    let mut peak = 0.0f64;
    let mut sum = 0.0f64;
    for x in samples {
        let p = x.norm_sqr();
        peak = peak.max(p);
        sum += p;
    }
    let mean = sum / samples.len() as f64;
    10.0 * (peak / mean).log10()
}

/// Amplitude clipping with phase preservation. The threshold is
/// `clip_rate · RMS` of the input; `clip_rate` of 1.0 clips to the RMS level.
pub fn clip_waveform(waveform: &mut [Complex64], clip_rate: f64) {
    assert!(clip_rate > 0.0);
    let rms = (waveform.iter().map(|x| x.norm_sqr()).sum::<f64>() / waveform.len() as f64).sqrt();
    let a = clip_rate * rms;
    for x in waveform.iter_mut() {
        let mag = x.norm();
        if mag > a {
            *x *= a / mag;
        }
    }
}

/// Boolean data mask over the grid: `true` where a resource element carries
/// data bits (row-major `[n_sym × n_sc]`).
pub fn data_mask(n_sym: usize, n_sc: usize, layout: PilotLayout) -> Vec<bool> {
    let pilots = layout.pilot_symbols(n_sym);
    let mut mask = vec![true; n_sym * n_sc];
    for s in pilots {
        for m in mask[s * n_sc..(s + 1) * n_sc].iter_mut() {
            *m = false;
        }
    }
    mask
}

/// Number of data resource elements under a layout.
pub fn data_re_count(n_sym: usize, n_sc: usize, layout: PilotLayout) -> usize {
    data_mask(n_sym, n_sc, layout).iter().filter(|&&d| d).count()
}

/// Deterministic unit-power QPSK pilot sequence, fixed for the lifetime of
/// the system (both ends know it).
pub fn pilot_values(n_sym: usize, n_sc: usize, layout: PilotLayout) -> Vec<(usize, Complex64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x50494C4F54); // "PILOT"
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::new();
    for s in layout.pilot_symbols(n_sym) {
        for k in 0..n_sc {
            let re = if rng.random::<bool>() { inv_sqrt2 } else { -inv_sqrt2 };
            let im = if rng.random::<bool>() { inv_sqrt2 } else { -inv_sqrt2 };
            out.push((s * n_sc + k, Complex64::new(re, im)));
        }
    }
    out
}

/// Writes pilot values into a grid (data elements untouched).
pub fn insert_pilots(grid: &mut [Complex64], n_sym: usize, n_sc: usize, layout: PilotLayout) {
    for (idx, v) in pilot_values(n_sym, n_sc, layout) {
        grid[idx] = v;
    }
}

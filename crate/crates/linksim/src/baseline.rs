//! Conventional pilot-aided receive chain: least-squares channel estimation at
//! pilot symbols, linear time interpolation, per-RE LMMSE combining, and an
//! exact max-log-free Gaussian soft demapper. A perfect-CSI variant serves as
//! the upper baseline.

use crate::phy::{pilot_values, PilotLayout};
use num_complex::Complex64;
use thiserror::Error;

/// Demapper clip; also the "certain bit" magnitude handed to the decoder.
pub const LLR_CLIP: f64 = 40.0;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("pilot symbol at grid index {0} is (near) zero; LS division undefined")]
    ZeroPilot(usize),
    #[error("layout has no pilot symbols; nothing to estimate from")]
    NoPilots,
    #[error("grid shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateSource {
    LsInterp,
    Perfect,
}

/// Full-grid channel estimate, one grid (`n_sym * n_sc`) per antenna.
#[derive(Debug, Clone)]
pub struct ChannelEstimate {
    pub source: EstimateSource,
    pub n_sym: usize,
    pub n_sc: usize,
    pub h: Vec<Vec<Complex64>>,
}

impl ChannelEstimate {
    pub fn n_r(&self) -> usize {
        self.h.len()
    }

    /// Wraps a true per-RE response (flat `[n_r * n_sym * n_sc]`) as an
    /// estimate with source `Perfect`.
    pub fn perfect(h_flat: &[Complex64], n_r: usize, n_sym: usize, n_sc: usize) -> Self {
        assert_eq!(h_flat.len(), n_r * n_sym * n_sc);
        let h = (0..n_r)
            .map(|a| h_flat[a * n_sym * n_sc..(a + 1) * n_sym * n_sc].to_vec())
            .collect();
        ChannelEstimate { source: EstimateSource::Perfect, n_sym, n_sc, h }
    }
}

/// Per-pilot-symbol LS estimates `y/x`, shaped `[ant][pilot_sym][k]`.
pub fn ls_estimate(
    y: &[Vec<Complex64>],
    n_sym: usize,
    n_sc: usize,
    layout: PilotLayout,
) -> Result<Vec<Vec<Vec<Complex64>>>, BaselineError> {
    let pilot_syms = layout.pilot_symbols(n_sym);
    if pilot_syms.is_empty() {
        return Err(BaselineError::NoPilots);
    }
    let pilots = pilot_values(n_sym, n_sc, layout);
    let mut out = Vec::with_capacity(y.len());
    for ant in y {
        if ant.len() != n_sym * n_sc {
            return Err(BaselineError::ShapeMismatch { expected: n_sym * n_sc, got: ant.len() });
        }
        let mut per_sym = vec![vec![Complex64::default(); n_sc]; pilot_syms.len()];
        for (idx, x) in &pilots {
            if x.norm_sqr() < 1e-24 {
                return Err(BaselineError::ZeroPilot(*idx));
            }
            let s = idx / n_sc;
            let p = pilot_syms.iter().position(|&ps| ps == s).expect("pilot index off-layout");
            per_sym[p][idx % n_sc] = ant[*idx] / x;
        }
        out.push(per_sym);
    }
    Ok(out)
}

/// Linear interpolation along the symbol axis between pilot symbols,
/// nearest-neighbor extrapolation outside; frequency is fully covered since
/// pilot symbols span the whole band.
pub fn interpolate_time(
    pilot_syms: &[usize],
    ests: &[Vec<Vec<Complex64>>],
    n_sym: usize,
    n_sc: usize,
) -> Result<ChannelEstimate, BaselineError> {
    if pilot_syms.is_empty() {
        return Err(BaselineError::NoPilots);
    }
    let mut h = Vec::with_capacity(ests.len());
    for ant in ests {
        let mut grid = vec![Complex64::default(); n_sym * n_sc];
        for s in 0..n_sym {
            // Bracketing pilot symbols; clamps outside the pilot span.
            let (lo, hi) = bracket(pilot_syms, s);
            for k in 0..n_sc {
                let v = if lo == hi {
                    ant[lo][k]
                } else {
                    let (s0, s1) = (pilot_syms[lo] as f64, pilot_syms[hi] as f64);
                    let t = (s as f64 - s0) / (s1 - s0);
                    ant[lo][k] * (1.0 - t) + ant[hi][k] * t
                };
                grid[s * n_sc + k] = v;
            }
        }
        h.push(grid);
    }
    Ok(ChannelEstimate { source: EstimateSource::LsInterp, n_sym, n_sc, h })
}

fn bracket(pilot_syms: &[usize], s: usize) -> (usize, usize) {
    if s <= pilot_syms[0] {
        return (0, 0);
    }
    if s >= *pilot_syms.last().unwrap() {
        return (pilot_syms.len() - 1, pilot_syms.len() - 1);
    }
    let hi = pilot_syms.iter().position(|&p| p >= s).unwrap();
    (hi - 1, hi)
}

/// LS + interpolation in one call.
pub fn ls_interp(
    y: &[Vec<Complex64>],
    n_sym: usize,
    n_sc: usize,
    layout: PilotLayout,
) -> Result<ChannelEstimate, BaselineError> {
    let ests = ls_estimate(y, n_sym, n_sc, layout)?;
    interpolate_time(&layout.pilot_symbols(n_sym), &ests, n_sym, n_sc)
}

/// LMMSE output with the per-RE Gaussian model the demapper needs:
/// `x_hat ≈ gain · x + CN(0, nu)`.
#[derive(Debug, Clone)]
pub struct Equalized {
    pub x_hat: Vec<Complex64>,
    pub gain: Vec<f64>,
    pub nu: Vec<f64>,
}

/// Per-RE LMMSE combining: `x̂ = ĥᴴy / (ĥᴴĥ + σ²/Es)`. The same filter
/// algebra yields the effective gain `g = ‖ĥ‖²/D` and post-equalization
/// noise variance `ν = σ²‖ĥ‖²/D²`.
pub fn lmmse_equalize(
    y: &[Vec<Complex64>],
    est: &ChannelEstimate,
    n0: f64,
    es: f64,
) -> Result<Equalized, BaselineError> {
    let n_re = est.n_sym * est.n_sc;
    if y.len() != est.n_r() {
        return Err(BaselineError::ShapeMismatch { expected: est.n_r(), got: y.len() });
    }
    for ant in y {
        if ant.len() != n_re {
            return Err(BaselineError::ShapeMismatch { expected: n_re, got: ant.len() });
        }
    }
    let mut x_hat = vec![Complex64::default(); n_re];
    let mut gain = vec![0.0; n_re];
    let mut nu = vec![0.0; n_re];
    for re in 0..n_re {
        let mut hh = 0.0;
        let mut hy = Complex64::default();
        for (ant, hg) in y.iter().zip(&est.h) {
            hh += hg[re].norm_sqr();
            hy += hg[re].conj() * ant[re];
        }
        let d = hh + n0 / es;
        if d < 1e-300 {
            // No channel and no noise floor: the RE carries nothing.
            (x_hat[re], gain[re], nu[re]) = (Complex64::default(), 0.0, 1e30);
            continue;
        }
        x_hat[re] = hy / d;
        gain[re] = hh / d;
        nu[re] = n0 * hh / (d * d);
    }
    Ok(Equalized { x_hat, gain, nu })
}

/// Posterior probability of each constellation point given `x_hat ≈ g·x + CN(0, ν)`.
pub fn point_posteriors(x_hat: Complex64, g: f64, nu: f64, points: &[Complex64]) -> Vec<f64> {
    let nu = nu.max(1e-30);
    let d: Vec<f64> = points.iter().map(|c| -(x_hat - c * g).norm_sqr() / nu).collect();
    let dmax = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = d.iter().map(|&v| (v - dmax).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Exact per-bit LLRs `log P(b=1)/P(b=0)` by log-sum-exp over the point set.
/// `points[i]` carries the MSB-first label of `i` over `m` bits. Clipped to
/// ±[`LLR_CLIP`].
pub fn gaussian_llr(
    x_hat: Complex64,
    g: f64,
    nu: f64,
    points: &[Complex64],
    m: usize,
) -> Vec<f64> {
    debug_assert_eq!(points.len(), 1 << m);
    let nu = nu.max(1e-30);
    let d: Vec<f64> = points.iter().map(|c| -(x_hat - c * g).norm_sqr() / nu).collect();
    let dmax = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(m);
    for bit in 0..m {
        let mut s1 = 0.0;
        let mut s0 = 0.0;
        for (i, &di) in d.iter().enumerate() {
            let e = (di - dmax).exp();
            if (i >> (m - 1 - bit)) & 1 == 1 {
                s1 += e;
            } else {
                s0 += e;
            }
        }
        out.push((s1.ln() - s0.ln()).clamp(-LLR_CLIP, LLR_CLIP));
    }
    out
}

/// Demaps every RE selected by `mask` (all REs if `None`), emitting `m` LLRs
/// per RE in grid order.
pub fn demap_grid(
    eq: &Equalized,
    points: &[Complex64],
    m: usize,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let mut out = Vec::new();
    for re in 0..eq.x_hat.len() {
        if let Some(mask) = mask {
            if !mask[re] {
                continue;
            }
        }
        out.extend(gaussian_llr(eq.x_hat[re], eq.gain[re], eq.nu[re], points, m));
    }
    out
}

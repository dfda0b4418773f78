//! Precomputed unitary DFT matrices.
//!
//! One set of cosine/sine tables serves both worlds: as constant matrices for
//! the tape's `mat_rows` op (the differentiable transmit/receive path) and as
//! plain numeric transforms for the baselines and channel frequency
//! responses. Keeping a single source of truth means the learned and
//! conventional chains can never disagree about transform conventions.
//!
//! Conventions (all unitary, `1/√N` both ways):
//!   demodulation  X[k] = (1/√N) Σ_n x[n] e^{-j2πkn/N}
//!   modulation    x[n] = (1/√N) Σ_k X[k] e^{+j2πkn/N}
//!
//! The oversampled modulation matrix pads the spectrum at its center
//! (`k' = k` for `k < N/2`, else `k + (L-1)N`), so the length-`LN` output
//! interpolates the length-`N` waveform exactly: `x̃[Lm] = x[m]`.

use std::rc::Rc;

use num_complex::Complex64;

use crate::autodiff::Tensor;

/// Forward (demodulation) and inverse (modulation) unitary DFT of size `n`,
/// split into real and imaginary parts for tape use.
pub struct OfdmBasis {
    pub n: usize,
    pub dft_re: Rc<Tensor>,
    pub dft_im: Rc<Tensor>,
    pub idft_re: Rc<Tensor>,
    pub idft_im: Rc<Tensor>,
}

pub fn ofdm_basis(n: usize) -> OfdmBasis {
    let scale = 1.0 / (n as f64).sqrt();
    let mut fwd_re = vec![0.0; n * n];
    let mut fwd_im = vec![0.0; n * n];
    let mut inv_re = vec![0.0; n * n];
    let mut inv_im = vec![0.0; n * n];
    for k in 0..n {
        for m in 0..n {
            let ang = 2.0 * std::f64::consts::PI * (k as f64) * (m as f64) / n as f64;
            fwd_re[k * n + m] = ang.cos() * scale;
            fwd_im[k * n + m] = -ang.sin() * scale;
            inv_re[k * n + m] = ang.cos() * scale;
            inv_im[k * n + m] = ang.sin() * scale;
        }
    }
    OfdmBasis {
        n,
        dft_re: Rc::new(Tensor::new(&[n, n], fwd_re)),
        dft_im: Rc::new(Tensor::new(&[n, n], fwd_im)),
        idft_re: Rc::new(Tensor::new(&[n, n], inv_re)),
        idft_im: Rc::new(Tensor::new(&[n, n], inv_im)),
    }
}

/// `[l·n, n]` modulation matrix with center zero padding; rows are the
/// oversampled time samples, columns the subcarriers.
pub struct OversampledBasis {
    pub n: usize,
    pub l: usize,
    pub mat_re: Rc<Tensor>,
    pub mat_im: Rc<Tensor>,
}

pub fn oversampled_idft(n: usize, l: usize) -> OversampledBasis {
    assert!(l >= 1 && n % 2 == 0);
    let total = l * n;
    let scale = 1.0 / (n as f64).sqrt();
    let mut re = vec![0.0; total * n];
    let mut im = vec![0.0; total * n];
    for t in 0..total {
        for k in 0..n {
            let k_pad = if k < n / 2 { k } else { k + (l - 1) * n };
            let ang = 2.0 * std::f64::consts::PI * (t as f64) * (k_pad as f64) / total as f64;
            re[t * n + k] = ang.cos() * scale;
            im[t * n + k] = ang.sin() * scale;
        }
    }
    OversampledBasis {
        n,
        l,
        mat_re: Rc::new(Tensor::new(&[total, n], re)),
        mat_im: Rc::new(Tensor::new(&[total, n], im)),
    }
}

/// Numeric application of a split complex matrix to a complex vector.
pub fn apply_cx(mat_re: &Tensor, mat_im: &Tensor, x: &[Complex64]) -> Vec<Complex64> {
    let shape = mat_re.shape();
    let (m, n) = (shape[0], shape[1]);
    assert_eq!(x.len(), n);
    let (dre, dim) = (mat_re.data(), mat_im.data());
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..m {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..n {
            acc += Complex64::new(dre[k * n + j], dim[k * n + j]) * x[j];
        }
        out[k] = acc;
    }
    out
}

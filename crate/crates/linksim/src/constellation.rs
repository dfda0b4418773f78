//! Trainable geometric constellation.
//!
//! The mapper owns two real vectors (`re`, `im`) of length `2^m_max` that are
//! learned directly. Before every use the cloud is centered and scaled to unit
//! average power; the scaling is part of the training graph, so gradients see
//! it. Lower modulation orders index a nested subset of the full set by
//! zero-padding their bit groups at the least-significant end.

use crate::autodiff::ops::{self, Cx};
use crate::autodiff::{AdError, NodeId, ParamId, ParamSet, Partition, Tape, Tensor};
use num_complex::Complex64;
use thiserror::Error;

pub const PARAM_RE: &str = "constellation.re";
pub const PARAM_IM: &str = "constellation.im";

/// A cloud flatter than this is treated as a single point and rejected.
const VARIANCE_FLOOR: f64 = 1e-24;

#[derive(Debug, Error)]
pub enum ConstellationError {
    #[error("unsupported modulation order {0} (need 1..=16)")]
    UnsupportedOrder(usize),
    #[error("constellation cloud has (near-)zero variance; cannot normalize")]
    DegenerateCloud,
    #[error("subset order {m} exceeds constellation order {m_max}")]
    OrderTooLarge { m: usize, m_max: usize },
    #[error("bad constellation table: {0}")]
    BadTable(String),
}

/// Binary-reflected Gray code of `i`.
pub fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

/// Inverse of [`gray`]: prefix-XOR of the bits, folded by doubling.
pub fn gray_inverse(g: usize) -> usize {
    let mut out = g;
    let mut s = 1;
    while s < usize::BITS as usize {
        out ^= out >> s;
        s <<= 1;
    }
    debug_assert_eq!(gray(out), g);
    out
}

/// Index of an MSB-first bit group: `b[0]` is the most significant bit.
pub fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | (b as usize & 1))
}

/// MSB-first bit expansion of `i` into `m` bits.
pub fn index_bits(i: usize, m: usize) -> Vec<u8> {
    (0..m).map(|p| ((i >> (m - 1 - p)) & 1) as u8).collect()
}

/// Position of an order-`m` data index inside the order-`m_max` table: the
/// missing low bits are zero, so the index is shifted up.
pub fn full_index(data_index: usize, m: usize, m_max: usize) -> usize {
    data_index << (m_max - m)
}

/// Gray-labeled QAM with unit average power.
///
/// Even bit positions (MSB first) select the in-phase level, odd positions the
/// quadrature level, each axis Gray-coded over amplitudes −(K−1), …, K−1. With
/// this interleaving, dropping low-order bits keeps a product grid: every
/// nested subset of the initial constellation is itself a rectangular QAM.
pub fn qam_points(m: usize) -> Result<Vec<Complex64>, ConstellationError> {
    if m == 0 || m > 16 {
        return Err(ConstellationError::UnsupportedOrder(m));
    }
    let bits_i = m.div_ceil(2);
    let bits_q = m / 2;
    let k_i = 1usize << bits_i;
    let k_q = 1usize << bits_q;
    // E[A^2] of the odd-integer PAM {±1, ±3, …, ±(K−1)} is (K²−1)/3.
    let energy = ((k_i * k_i - 1) as f64 + (k_q * k_q - 1) as f64) / 3.0;
    let scale = 1.0 / energy.sqrt();
    let pam = |label: usize, k: usize| -> f64 {
        let level = gray_inverse(label);
        (2.0 * level as f64 - (k as f64 - 1.0)) * scale
    };
    let mut out = Vec::with_capacity(1 << m);
    for idx in 0..(1usize << m) {
        let bits = index_bits(idx, m);
        let li = bits_to_index(&bits.iter().copied().step_by(2).collect::<Vec<_>>());
        let lq = bits_to_index(&bits.iter().copied().skip(1).step_by(2).collect::<Vec<_>>());
        out.push(Complex64::new(pam(li, k_i), pam(lq, k_q)));
    }
    Ok(out)
}

/// Center the cloud and scale it to unit average power:
/// `(c − mean) / sqrt(mean|c|² − |mean|²)`.
pub fn normalize_points(points: &[Complex64]) -> Result<Vec<Complex64>, ConstellationError> {
    if points.len() < 2 {
        return Err(ConstellationError::DegenerateCloud);
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Complex64>() / n;
    let var = points.iter().map(|c| (c - mean).norm_sqr()).sum::<f64>() / n;
    if var < VARIANCE_FLOOR {
        return Err(ConstellationError::DegenerateCloud);
    }
    let s = var.sqrt();
    Ok(points.iter().map(|c| (c - mean) / s).collect())
}

/// Same centering/scaling as [`normalize_points`] but built on the tape, so the
/// statistics are differentiated through.
pub fn normalize_on_tape(tape: &mut Tape, re: NodeId, im: NodeId) -> Result<Cx, AdError> {
    let mean_re = tape.mean_all(re)?;
    let mean_im = tape.mean_all(im)?;
    let cre = tape.sub_scalar_node(re, mean_re)?;
    let cim = tape.sub_scalar_node(im, mean_im)?;
    let re2 = tape.mul(cre, cre)?;
    let im2 = tape.mul(cim, cim)?;
    let p = tape.add(re2, im2)?;
    let var = tape.mean_all(p)?;
    let s = tape.sqrt(var)?;
    Ok(Cx::new(tape.div_scalar_node(cre, s)?, tape.div_scalar_node(cim, s)?))
}

/// The `2^M` points reachable at order `M`, living at stride `2^(m_max−M)`
/// inside the full table.
#[derive(Debug, Clone)]
pub struct SubsetView {
    pub order: usize,
    pub indices: Vec<usize>,
    pub points: Vec<Complex64>,
    /// Mean |c|² over the subset. 1 at `M = m_max`; used to rescale noise at
    /// lower orders so Eb/N0 stays comparable.
    pub power: f64,
}

#[derive(Debug, Clone)]
pub struct Constellation {
    pub m_max: usize,
    /// Unnormalized trainable coordinates; normalization happens at use time.
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Constellation {
    /// Standard QAM start; a fixed point of the normalization.
    pub fn qam(m_max: usize) -> Result<Self, ConstellationError> {
        let pts = qam_points(m_max)?;
        Ok(Self::from_points(m_max, &pts))
    }

    pub fn from_points(m_max: usize, pts: &[Complex64]) -> Self {
        assert_eq!(pts.len(), 1 << m_max);
        Constellation {
            m_max,
            re: pts.iter().map(|c| c.re).collect(),
            im: pts.iter().map(|c| c.im).collect(),
        }
    }

    pub fn size(&self) -> usize {
        1 << self.m_max
    }

    pub fn raw_points(&self) -> Vec<Complex64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }

    pub fn normalized(&self) -> Result<Vec<Complex64>, ConstellationError> {
        normalize_points(&self.raw_points())
    }

    pub fn subset(&self, m: usize) -> Result<SubsetView, ConstellationError> {
        if m == 0 || m > self.m_max {
            return Err(ConstellationError::OrderTooLarge { m, m_max: self.m_max });
        }
        let all = self.normalized()?;
        let stride = 1usize << (self.m_max - m);
        let indices: Vec<usize> = (0..(1usize << m)).map(|i| i * stride).collect();
        let points: Vec<Complex64> = indices.iter().map(|&i| all[i]).collect();
        let power = points.iter().map(|c| c.norm_sqr()).sum::<f64>() / points.len() as f64;
        Ok(SubsetView { order: m, indices, points, power })
    }

    /// Registers the coordinates as trainable parameters.
    pub fn register(&self, params: &mut ParamSet) -> (ParamId, ParamId) {
        let n = self.size();
        let re = params.add(
            PARAM_RE,
            Partition::Constellation,
            Tensor::new(&[n], self.re.clone()),
        );
        let im = params.add(
            PARAM_IM,
            Partition::Constellation,
            Tensor::new(&[n], self.im.clone()),
        );
        (re, im)
    }

    /// Reads the (possibly updated) coordinates back out of a parameter set.
    pub fn from_params(params: &ParamSet) -> Result<Self, AdError> {
        let re = params.value(params.id(PARAM_RE)?).data().to_vec();
        let im = params.value(params.id(PARAM_IM)?).data().to_vec();
        let m_max = re.len().trailing_zeros() as usize;
        assert_eq!(1usize << m_max, re.len());
        Ok(Constellation { m_max, re, im })
    }

    /// Builds the normalized cloud on a tape from registered parameters.
    pub fn on_tape(tape: &mut Tape) -> Result<Cx, AdError> {
        let re_id = tape.params().id(PARAM_RE)?;
        let im_id = tape.params().id(PARAM_IM)?;
        let re = tape.param(re_id)?;
        let im = tape.param(im_id)?;
        normalize_on_tape(tape, re, im)
    }

    /// Plain-text table of the normalized points: index, label bits, re, im.
    pub fn export_table(&self) -> Result<String, ConstellationError> {
        let pts = self.normalized()?;
        let mut out = String::new();
        out.push_str(&format!("# constellation m_max={}\n", self.m_max));
        out.push_str("# index\tbits\tre\tim\n");
        for (i, c) in pts.iter().enumerate() {
            let bits: String =
                index_bits(i, self.m_max).iter().map(|b| char::from(b'0' + b)).collect();
            out.push_str(&format!("{i}\t{bits}\t{:.17e}\t{:.17e}\n", c.re, c.im));
        }
        Ok(out)
    }

    /// Parses a table produced by [`Constellation::export_table`].
    pub fn parse_table(text: &str) -> Result<Self, ConstellationError> {
        let mut rows: Vec<(usize, Complex64)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(ConstellationError::BadTable(format!(
                    "expected 4 columns, got {}",
                    f.len()
                )));
            }
            let idx: usize = f[0]
                .parse()
                .map_err(|_| ConstellationError::BadTable(format!("bad index {:?}", f[0])))?;
            let re: f64 = f[2]
                .parse()
                .map_err(|_| ConstellationError::BadTable(format!("bad re {:?}", f[2])))?;
            let im: f64 = f[3]
                .parse()
                .map_err(|_| ConstellationError::BadTable(format!("bad im {:?}", f[3])))?;
            rows.push((idx, Complex64::new(re, im)));
        }
        let n = rows.len();
        if n < 2 || n & (n - 1) != 0 {
            return Err(ConstellationError::BadTable(format!(
                "want a power-of-two point count >= 2, got {n}"
            )));
        }
        let m_max = n.trailing_zeros() as usize;
        let mut pts = vec![None; n];
        for (idx, c) in rows {
            if idx >= n || pts[idx].is_some() {
                return Err(ConstellationError::BadTable(format!("bad or repeated index {idx}")));
            }
            pts[idx] = Some(c);
        }
        let pts: Vec<Complex64> = pts.into_iter().map(Option::unwrap).collect();
        Ok(Self::from_points(m_max, &pts))
    }

    /// Maps an MSB-first bit tensor `[M * count]` (flattened groups) to resource
    /// elements by gathering from the normalized on-tape cloud.
    pub fn map_indices_on_tape(
        tape: &mut Tape,
        cloud: Cx,
        indices: &[usize],
        out_shape: &[usize],
    ) -> Result<Cx, AdError> {
        ops::cx_gather(tape, cloud, std::rc::Rc::new(indices.to_vec()), out_shape)
    }
}

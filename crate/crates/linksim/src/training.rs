//! Constrained end-to-end training of the learned transceiver.
//!
//! One update runs a batch of slots through the whole differentiable chain —
//! trainable constellation, per-symbol IDFT, convolutional fading channel,
//! additive noise, demodulation, neural receiver — and descends the augmented
//! Lagrangian
//!
//! ```text
//!   L = CE + λ·L_P + (μ/2)·L_P²
//! ```
//!
//! where `CE` is the bit-wise cross entropy in logits form and `L_P` the
//! hinged peak-to-average power excess of the oversampled transmit waveform.
//! The dual variable λ ratchets up after every inner phase on a fresh batch,
//! and μ follows a fixed geometric schedule `μ_k = μ_0·τ^k`, so PAPR pressure
//! only ever grows. With an unset PAPR target the penalty is identically zero
//! and the loop degenerates to plain cross-entropy training.
//!
//! Everything random in a step (bits, noise, channel taps, modulation order,
//! Eb/N0) is drawn up front from one seeded stream, so a config and a seed
//! reproduce a run bit-for-bit.

use std::io::Write;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ops::{self, Cx};
use crate::autodiff::tape::Grads;
use crate::autodiff::{AdError, NodeId, ParamSet, Tape, Tensor};
use crate::channel::{self, ChannelError, ChannelProfile};
use crate::constellation::{self, Constellation, ConstellationError};
use crate::dft;
use crate::phy::{FS, PAPR_OVERSAMPLING};
use crate::receiver::{self, RxShape, TuneMode};

/// Gradients are rescaled whenever their global norm exceeds this.
pub const GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Constellation(#[from] ConstellationError),
    #[error("training diverged: non-finite {what} at update {step}")]
    Diverged { what: &'static str, step: usize },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// losses

/// Binary cross entropy from logits, averaged over every element:
/// `mean(softplus(L) − b·L)` with `b ∈ {0,1}`. At `L = 0` each term is ln 2.
pub fn ce_loss(tape: &mut Tape, llrs: NodeId, bits: &Tensor) -> Result<NodeId, AdError> {
    if tape.value(llrs).shape() != bits.shape() {
        return Err(AdError::ShapeMismatch {
            op: "ce_loss",
            lhs: tape.value(llrs).shape().to_vec(),
            rhs: bits.shape().to_vec(),
        });
    }
    let b = tape.constant(bits.clone())?;
    let sp = tape.softplus(llrs)?;
    let bl = tape.mul(llrs, b)?;
    let e = tape.sub(sp, bl)?;
    tape.mean_all(e)
}

/// Monte-Carlo PAPR penalty. `power_rows` holds per-symbol instantaneous
/// powers `|x̃[n]|²` of the oversampled waveform, one OFDM symbol per row.
/// Each sample is normalized by its own symbol's mean power, shifted by the
/// linear PAPR target and hinged; the result is averaged over all samples.
/// A constant-modulus waveform with a target ≥ 1 scores exactly zero.
pub fn papr_penalty(
    tape: &mut Tape,
    power_rows: NodeId,
    eps_p_linear: f64,
) -> Result<NodeId, AdError> {
    let mean = tape.row_mean(power_rows)?;
    let ratio = tape.div_rows(power_rows, mean)?;
    let shifted = tape.add_scalar(ratio, -eps_p_linear)?;
    let hinge = tape.relu(shifted)?;
    tape.mean_all(hinge)
}

/// `ce + λ·lp + (μ/2)·lp²`. The gradient through this node is
/// `∂ce + (λ + μ·lp)·∂lp`, which is what the λ-update assumes.
pub fn aug_lagrangian(
    tape: &mut Tape,
    ce: NodeId,
    lp: NodeId,
    lambda: f64,
    mu: f64,
) -> Result<NodeId, AdError> {
    let lin = tape.scale(lp, lambda)?;
    let sq = tape.mul(lp, lp)?;
    let sq = tape.scale(sq, 0.5 * mu)?;
    let t = tape.add(ce, lin)?;
    tape.add(t, sq)
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with bias correction. Moments live here, keyed by parameter, so a
/// training run can be checkpointed and resumed without losing curvature
/// history. Frozen parameters and parameters without gradients are skipped
/// entirely — their moments neither update nor decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Completed update count (drives bias correction).
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn set_t(&mut self, t: usize) {
        self.t = t;
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. A zero gradient leaves its parameter bit-identical.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let idx = id.0;
            if self.m.len() <= idx {
                self.m.resize_with(idx + 1, || None);
                self.v.resize_with(idx + 1, || None);
            }
            let gd = g.data();
            let m = self.m[idx]
                .get_or_insert_with(|| Tensor::zeros(g.shape()))
                .data_mut();
            let v = self.v[idx]
                .get_or_insert_with(|| Tensor::zeros(g.shape()))
                .data_mut();
            let value = params.value_mut(id).data_mut();
            for i in 0..gd.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
                v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// First/second moment of one parameter, if it has ever been updated.
    pub fn moments(&self, id: crate::autodiff::ParamId) -> Option<(&Tensor, &Tensor)> {
        match (self.m.get(id.0), self.v.get(id.0)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub fn restore(&mut self, id: crate::autodiff::ParamId, m: Tensor, v: Tensor) {
        let idx = id.0;
        if self.m.len() <= idx {
            self.m.resize_with(idx + 1, || None);
            self.v.resize_with(idx + 1, || None);
        }
        self.m[idx] = Some(m);
        self.v[idx] = Some(v);
    }
}

// ---------------------------------------------------------------------------
// run configuration and state

/// Dual / schedule state of a run. `outer` counts completed outer iterations
/// (λ updates), `step` completed gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub lambda: f64,
    pub mu: f64,
    pub outer: usize,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Self {
        TrainState { lambda: cfg.lambda0, mu: cfg.mu0, outer: 0, step: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Slots per gradient step.
    pub batch: usize,
    /// Outer (dual-update) iterations.
    pub outer: usize,
    /// Gradient steps per outer iteration.
    pub inner: usize,
    pub lr: f64,
    /// Per-slot Eb/N0 draw range, dB.
    pub ebno_db: (f64, f64),
    /// Modulation orders drawn uniformly, one per step.
    pub orders: Vec<usize>,
    /// Code rate assumed by the Eb/N0 → N0 conversion.
    pub code_rate: f64,
    pub cp_len: usize,
    /// PAPR target in dB; `None` disables the constraint.
    pub eps_p_db: Option<f64>,
    pub lambda0: f64,
    pub mu0: f64,
    pub tau: f64,
    /// Channel profiles drawn uniformly, one per slot.
    pub profiles: Vec<String>,
    pub speed_kmh: f64,
    pub carrier_hz: f64,
    pub delay_spread_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch: 32,
            outer: 2500,
            inner: 12,
            lr: 1e-3,
            ebno_db: (-10.0, 5.0),
            orders: vec![2, 4, 6, 8],
            code_rate: 0.5,
            cp_len: 0,
            // Unconstrained unless a target is configured; the CLI logs a
            // notice when this default is in effect.
            eps_p_db: None,
            lambda0: 0.0,
            mu0: 0.1,
            tau: 1.004,
            profiles: vec!["cdlb-like".into()],
            speed_kmh: 3.0,
            carrier_hz: 3.5e9,
            delay_spread_s: 100e-9,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning keeps the architecture but shrinks the schedule: a quarter
    /// of the update budget at half the learning rate.
    pub fn finetune_from(pretrain: &TrainConfig) -> TrainConfig {
        let mut cfg = pretrain.clone();
        cfg.lr = 5e-4;
        cfg.outer = (pretrain.outer / 4).max(1);
        cfg
    }

    pub fn resolve_profiles(&self) -> Result<Vec<ChannelProfile>, TrainError> {
        if self.profiles.is_empty() {
            return Err(TrainError::BadConfig("no channel profiles".into()));
        }
        self.profiles
            .iter()
            .map(|name| {
                ChannelProfile::by_name(
                    name,
                    self.speed_kmh,
                    self.carrier_hz,
                    FS,
                    self.delay_spread_s,
                )
                .map_err(TrainError::from)
            })
            .collect()
    }

    fn validate(&self, shape: &RxShape) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be positive".into()));
        }
        if self.orders.is_empty() {
            return Err(TrainError::BadConfig("no modulation orders".into()));
        }
        for &m in &self.orders {
            if m == 0 || m > shape.m_max {
                return Err(TrainError::BadConfig(format!(
                    "order {m} outside 1..={}",
                    shape.m_max
                )));
            }
        }
        if !(self.tau >= 1.0) {
            return Err(TrainError::BadConfig(format!("tau {} < 1", self.tau)));
        }
        if self.ebno_db.1 < self.ebno_db.0 {
            return Err(TrainError::BadConfig("empty Eb/N0 range".into()));
        }
        Ok(())
    }
}

/// One line of the training log, serialized as line-delimited JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: usize,
    pub outer: usize,
    pub ce: f64,
    pub lp: f64,
    pub lambda: f64,
    pub mu: f64,
    pub grad_norm: f64,
}

// ---------------------------------------------------------------------------
// the differentiable slot chain

/// Everything random a single slot needs, drawn up front so the tape sees
/// only constants besides the parameters.
pub struct SlotSample {
    pub m: usize,
    /// Data bits as a `[m, N_s, N_c]` 0/1 tensor, plane 0 the MSB.
    pub bits: Tensor,
    /// Per-RE index into the full 2^{M_max} cloud (grid order).
    pub indices: Vec<usize>,
    pub n0: f64,
    /// Additive noise per antenna, already at its final scale.
    pub noise: Vec<(Tensor, Tensor)>,
    /// Dense time-varying channel taps per antenna, `[slot_len, L]`.
    pub taps: Vec<(Rc<Tensor>, Rc<Tensor>)>,
}

pub fn sample_slot(
    rng: &mut ChaCha8Rng,
    shape: &RxShape,
    cp_len: usize,
    m: usize,
    ebno_db: f64,
    code_rate: f64,
    subset_power: f64,
    profile: &ChannelProfile,
) -> SlotSample {
    let (h, w) = (shape.n_sym, shape.n_sc);
    let n_re = h * w;
    let raw: Vec<u8> = (0..m * n_re).map(|_| rng.random::<bool>() as u8).collect();
    let bits = Tensor::new(&[m, h, w], raw.iter().map(|&b| b as f64).collect());
    let indices: Vec<usize> = (0..n_re)
        .map(|re| {
            let mut data = 0usize;
            for plane in 0..m {
                data = (data << 1) | raw[plane * n_re + re] as usize;
            }
            constellation::full_index(data, m, shape.m_max)
        })
        .collect();
    let n0 = channel::ebno_to_n0(ebno_db, code_rate, m, subset_power);
    let slot_len = h * (w + cp_len);
    let ch = channel::gen_channel(profile, slot_len, shape.n_r, 1.0 / FS, rng.random::<u64>());
    let sigma = (n0 / 2.0).sqrt();
    let noise = (0..shape.n_r)
        .map(|_| {
            let re: Vec<f64> =
                (0..slot_len).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma).collect();
            let im: Vec<f64> =
                (0..slot_len).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma).collect();
            (Tensor::new(&[slot_len], re), Tensor::new(&[slot_len], im))
        })
        .collect();
    let taps = (0..shape.n_r)
        .map(|a| {
            let (re, im) = ch.dense_taps(a);
            (Rc::new(re), Rc::new(im))
        })
        .collect();
    SlotSample { m, bits, indices, n0, noise, taps }
}

/// Transform matrices and CP index maps shared by every slot of a run.
pub struct SlotBases {
    basis: dft::OfdmBasis,
    over: dft::OversampledBasis,
    /// `[N_s·(N_c+cp)]` gather over the flattened `[N_s·N_c]` time grid.
    add_cp: Option<Rc<Vec<usize>>>,
    /// `[N_s·N_c]` gather over the slot waveform, dropping each prefix.
    strip_cp: Option<Rc<Vec<usize>>>,
}

impl SlotBases {
    pub fn new(n_sym: usize, n_sc: usize, cp_len: usize) -> Self {
        let (h, w) = (n_sym, n_sc);
        let (add_cp, strip_cp) = if cp_len == 0 {
            (None, None)
        } else {
            let mut add = Vec::with_capacity(h * (w + cp_len));
            let mut strip = Vec::with_capacity(h * w);
            for s in 0..h {
                for t in 0..w + cp_len {
                    add.push(s * w + (t + w - cp_len) % w);
                }
                for t in 0..w {
                    strip.push(s * (w + cp_len) + cp_len + t);
                }
            }
            (Some(Rc::new(add)), Some(Rc::new(strip)))
        };
        SlotBases {
            basis: dft::ofdm_basis(n_sc),
            over: dft::oversampled_idft(n_sc, PAPR_OVERSAMPLING),
            add_cp,
            strip_cp,
        }
    }
}

/// CE and PAPR pieces of one slot's chain, left unreduced enough to batch.
pub struct SlotGraph {
    /// `[m, N_s, N_c]` masked LLRs.
    pub llrs: NodeId,
    /// Scalar CE, averaged over this slot's bits.
    pub ce: NodeId,
    /// `[N_s, L·N_c]` oversampled instantaneous transmit powers.
    pub power_rows: NodeId,
}

/// Builds one slot end to end: gather from the normalized cloud, per-symbol
/// IDFT (plus cyclic prefix when configured), time-varying convolution per
/// antenna, additive noise, per-symbol DFT, neural receiver, cross entropy.
/// The PAPR rows tap the oversampled waveform before the channel and never
/// include the prefix.
pub fn build_slot_graph(
    tape: &mut Tape,
    shape: &RxShape,
    cp_len: usize,
    cloud: Cx,
    bases: &SlotBases,
    sample: &SlotSample,
) -> Result<SlotGraph, AdError> {
    let (h, w) = (shape.n_sym, shape.n_sc);
    let x_grid = Constellation::map_indices_on_tape(tape, cloud, &sample.indices, &[h, w])?;

    let x_over = ops::cx_mat_rows(
        tape,
        x_grid,
        Rc::clone(&bases.over.mat_re),
        Rc::clone(&bases.over.mat_im),
    )?;
    let power_rows = ops::cx_abs2(tape, x_over)?;

    let x_time = ops::cx_mat_rows(
        tape,
        x_grid,
        Rc::clone(&bases.basis.idft_re),
        Rc::clone(&bases.basis.idft_im),
    )?;
    let flat = ops::cx_reshape(tape, x_time, &[h * w])?;
    let tx = match &bases.add_cp {
        Some(idx) => ops::cx_gather(tape, flat, Rc::clone(idx), &[h * (w + cp_len)])?,
        None => flat,
    };

    let mut planes = Vec::with_capacity(2 * shape.n_r);
    for a in 0..shape.n_r {
        let (t_re, t_im) = &sample.taps[a];
        let y = ops::cx_tv_conv(tape, tx, Rc::clone(t_re), Rc::clone(t_im))?;
        let nz = ops::cx_constant(tape, sample.noise[a].0.clone(), sample.noise[a].1.clone())?;
        let y = ops::cx_add(tape, y, nz)?;
        let useful = match &bases.strip_cp {
            Some(idx) => ops::cx_gather(tape, y, Rc::clone(idx), &[h, w])?,
            None => ops::cx_reshape(tape, y, &[h, w])?,
        };
        let y_grid = ops::cx_mat_rows(
            tape,
            useful,
            Rc::clone(&bases.basis.dft_re),
            Rc::clone(&bases.basis.dft_im),
        )?;
        planes.push(y_grid.re);
        planes.push(y_grid.im);
    }

    let input = receiver::assemble_input(tape, shape, &planes, sample.n0)?;
    let llrs = receiver::forward(tape, shape, input, sample.n0, sample.m)?;
    let ce = ce_loss(tape, llrs, &sample.bits)?;
    Ok(SlotGraph { llrs, ce, power_rows })
}

pub struct BatchGraph {
    pub loss: NodeId,
    pub ce: NodeId,
    pub lp: NodeId,
}

/// Whole-batch objective. Every slot in a batch carries the same modulation
/// order, so averaging the per-slot CE means equals the global bit average.
pub fn build_batch_graph(
    tape: &mut Tape,
    shape: &RxShape,
    cp_len: usize,
    bases: &SlotBases,
    samples: &[SlotSample],
    eps_p_db: Option<f64>,
    lambda: f64,
    mu: f64,
) -> Result<BatchGraph, AdError> {
    let cloud = Constellation::on_tape(tape)?;
    let mut ce_acc: Option<NodeId> = None;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let g = build_slot_graph(tape, shape, cp_len, cloud, bases, s)?;
        ce_acc = Some(match ce_acc {
            Some(a) => tape.add(a, g.ce)?,
            None => g.ce,
        });
        rows.push(g.power_rows);
    }
    let ce = tape.scale(
        ce_acc.ok_or(AdError::Invalid { op: "build_batch_graph", msg: "empty batch".into() })?,
        1.0 / samples.len() as f64,
    )?;
    let lp = match eps_p_db {
        Some(db) => {
            let all = tape.concat0(&rows)?;
            papr_penalty(tape, all, 10f64.powf(db / 10.0))?
        }
        None => tape.constant_scalar(0.0)?,
    };
    let loss = aug_lagrangian(tape, ce, lp, lambda, mu)?;
    Ok(BatchGraph { loss, ce, lp })
}

/// Constellation-only PAPR penalty on a fresh batch of random symbol grids —
/// the measurement the λ update ratchets against. No channel, no receiver.
pub fn fresh_papr(
    params: &ParamSet,
    shape: &RxShape,
    bases: &SlotBases,
    rng: &mut ChaCha8Rng,
    batch: usize,
    m: usize,
    eps_p_db: f64,
) -> Result<f64, AdError> {
    let (h, w) = (shape.n_sym, shape.n_sc);
    let n_re = h * w;
    let mut tape = Tape::new(params);
    let cloud = Constellation::on_tape(&mut tape)?;
    let mut rows = Vec::with_capacity(batch);
    for _ in 0..batch {
        let indices: Vec<usize> = (0..n_re)
            .map(|_| {
                constellation::full_index(rng.random_range(0..1usize << m), m, shape.m_max)
            })
            .collect();
        let x_grid = Constellation::map_indices_on_tape(&mut tape, cloud, &indices, &[h, w])?;
        let x_over = ops::cx_mat_rows(
            &mut tape,
            x_grid,
            Rc::clone(&bases.over.mat_re),
            Rc::clone(&bases.over.mat_im),
        )?;
        rows.push(ops::cx_abs2(&mut tape, x_over)?);
    }
    let all = tape.concat0(&rows)?;
    let lp = papr_penalty(&mut tape, all, 10f64.powf(eps_p_db / 10.0))?;
    Ok(tape.value(lp).data()[0])
}

// ---------------------------------------------------------------------------
// the loop

/// Rescales the gradient set so its global norm is at most [`GRAD_CLIP`];
/// returns the pre-clip norm.
pub fn clip_grads(grads: &mut Grads) -> f64 {
    let norm = grads.global_norm();
    if norm.is_finite() && norm > GRAD_CLIP {
        grads.scale_all(GRAD_CLIP / norm);
    }
    norm
}

pub struct TrainRun {
    pub state: TrainState,
    pub adam: Adam,
    /// CE of the last gradient step, if any step ran.
    pub final_ce: Option<f64>,
    /// Last fresh-batch PAPR penalty, if the constraint is active.
    pub final_lp: Option<f64>,
}

/// Runs `outer × inner` updates of the augmented-Lagrangian loop over the
/// parameters already registered in `params` (receiver + constellation).
/// After each inner phase, λ is advanced against a *fresh* batch — measuring
/// the constraint at the post-update parameters rather than reusing a stale
/// in-step value — and μ is scaled by τ. Emits one JSON log line per update.
pub fn train(
    params: &mut ParamSet,
    shape: &RxShape,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRun, TrainError> {
    cfg.validate(shape)?;
    let profiles = cfg.resolve_profiles()?;
    let bases = SlotBases::new(shape.n_sym, shape.n_sc, cfg.cp_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut state = TrainState::fresh(cfg);
    let mut final_ce = None;
    let mut final_lp = None;

    for _ in 0..cfg.outer {
        for _ in 0..cfg.inner {
            let m = cfg.orders[rng.random_range(0..cfg.orders.len())];
            // A blown-up run can collapse or overflow the constellation before
            // any tape op sees a non-finite number; classify that as
            // divergence too, not a config error.
            let subset_power = match Constellation::from_params(params)?.subset(m) {
                Ok(s) if s.power.is_finite() && s.power > 0.0 => s.power,
                Ok(_) | Err(ConstellationError::DegenerateCloud) => {
                    return Err(TrainError::Diverged {
                        what: "constellation",
                        step: state.step + 1,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let samples: Vec<SlotSample> = (0..cfg.batch)
                .map(|_| {
                    let ebno = rng.random_range(cfg.ebno_db.0..=cfg.ebno_db.1);
                    let profile = &profiles[rng.random_range(0..profiles.len())];
                    sample_slot(
                        &mut rng,
                        shape,
                        cfg.cp_len,
                        m,
                        ebno,
                        cfg.code_rate,
                        subset_power,
                        profile,
                    )
                })
                .collect();

            let step = state.step + 1;
            let nonfinite = |e: AdError| match e {
                AdError::NonFinite { op } => TrainError::Diverged { what: op, step },
                other => TrainError::Autodiff(other),
            };
            let mut tape = Tape::new(params);
            let graph = build_batch_graph(
                &mut tape,
                shape,
                cfg.cp_len,
                &bases,
                &samples,
                cfg.eps_p_db,
                state.lambda,
                state.mu,
            )
            .map_err(nonfinite)?;
            let ce = tape.value(graph.ce).data()[0];
            let lp = tape.value(graph.lp).data()[0];
            let mut grads = tape.backward(graph.loss).map_err(nonfinite)?;
            drop(tape);
            let norm = clip_grads(&mut grads);
            if !norm.is_finite() {
                return Err(TrainError::Diverged { what: "gradient", step });
            }
            adam.step(params, &grads, cfg.lr);
            state.step = step;
            if let Some(w) = log.as_deref_mut() {
                let line = TrainLogLine {
                    step: state.step,
                    outer: state.outer,
                    ce,
                    lp,
                    lambda: state.lambda,
                    mu: state.mu,
                    grad_norm: norm,
                };
                let text = serde_json::to_string(&line)
                    .map_err(|e| TrainError::BadConfig(format!("log serialization: {e}")))?;
                writeln!(w, "{text}")?;
            }
            final_ce = Some(ce);
        }

        if let Some(eps) = cfg.eps_p_db {
            let m = cfg.orders[rng.random_range(0..cfg.orders.len())];
            let lp = fresh_papr(params, shape, &bases, &mut rng, cfg.batch, m, eps)?;
            if !lp.is_finite() {
                return Err(TrainError::Diverged { what: "papr", step: state.step });
            }
            state.lambda += state.mu * lp;
            final_lp = Some(lp);
        }
        state.outer += 1;
        // Closed form rather than a running product: μ_k must equal
        // μ0·τ^k exactly, independent of how the loop got to k.
        state.mu = cfg.mu0 * cfg.tau.powi(state.outer as i32);
    }

    Ok(TrainRun { state, adam, final_ce, final_lp })
}

/// Adaptation entry point: freezes parameters per `mode`, then runs the same
/// loop (callers pass an already-reduced budget, e.g. via
/// [`TrainConfig::finetune_from`]). Dual state restarts — the constraint is
/// re-enforced on the new channel from scratch.
pub fn finetune(
    params: &mut ParamSet,
    shape: &RxShape,
    cfg: &TrainConfig,
    mode: TuneMode,
    log: Option<&mut dyn Write>,
) -> Result<TrainRun, TrainError> {
    receiver::apply_mode(params, mode);
    train(params, shape, cfg, log)
}

/// Registers every trainable part of the learned link — receiver and
/// constellation — the way `train` expects to find them.
pub fn init_params(shape: &RxShape, seed: u64) -> Result<ParamSet, TrainError> {
    let mut params = ParamSet::new();
    receiver::register_params(shape, seed, &mut params);
    Constellation::qam(shape.m_max)?.register(&mut params);
    Ok(params)
}

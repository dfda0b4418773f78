//! Residual-CNN receiver with per-block channel adapters and a learnable
//! multi-order LLR mask.
//!
//! The whole forward pass is built on the autodiff tape, so the same code
//! serves training (with gradients) and evaluation (params frozen). Layout of
//! every feature tensor is `[C, N_s, N_c]`.

use crate::autodiff::{AdError, NodeId, ParamSet, Partition, Tape, Tensor};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Kernel and dilation of one residual block (both convs share them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
}

/// The published five-block schedule; shorter networks truncate it.
pub const BLOCK_SCHEDULE: [BlockSpec; 5] = [
    BlockSpec { kernel: (7, 7), dilation: (7, 2) },
    BlockSpec { kernel: (7, 5), dilation: (7, 1) },
    BlockSpec { kernel: (5, 3), dilation: (1, 2) },
    BlockSpec { kernel: (3, 3), dilation: (1, 1) },
    BlockSpec { kernel: (3, 3), dilation: (1, 1) },
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RxShape {
    pub n_r: usize,
    pub n_sym: usize,
    pub n_sc: usize,
    pub m_max: usize,
    /// Feature channels C.
    pub channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Adapter bottleneck ratio γ; C must be divisible by it.
    pub reduction: usize,
    /// Adapter depthwise kernel size.
    pub adapter_kernel: usize,
    /// Attention bottleneck width.
    pub af_hidden: usize,
}

impl RxShape {
    /// Full-size shape from the published layer table.
    pub fn paper(n_r: usize) -> Self {
        RxShape {
            n_r,
            n_sym: 14,
            n_sc: 72,
            m_max: 8,
            channels: 128,
            blocks: BLOCK_SCHEDULE.to_vec(),
            reduction: 4,
            adapter_kernel: 3,
            af_hidden: 16,
        }
    }

    /// Default desk-scale shape: small enough to train on one CPU core.
    pub fn desk() -> Self {
        RxShape {
            n_r: 2,
            n_sym: 14,
            n_sc: 72,
            m_max: 8,
            channels: 32,
            blocks: BLOCK_SCHEDULE[..2].to_vec(),
            reduction: 4,
            adapter_kernel: 3,
            af_hidden: 16,
        }
    }

    pub fn n_l(&self) -> usize {
        self.blocks.len()
    }

    fn bottleneck(&self) -> usize {
        assert_eq!(self.channels % self.reduction, 0, "C must divide by γ");
        self.channels / self.reduction
    }
}

pub const MASK_NAME: &str = "rx.mask";
/// Mask logits start near-transparent: sigmoid(4) ≈ 0.982.
pub const MASK_INIT: f64 = 4.0;
pub const LN_EPS: f64 = 1e-5;

fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, cpg: usize, kh: usize, kw: usize) -> Tensor {
    let fan_in = (cpg * kh * kw) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    Tensor::new(&[c_out, cpg, kh, kw], (0..c_out * cpg * kh * kw).map(|_| dist.sample(rng)).collect())
}

fn dense_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / cols as f64).sqrt()).unwrap();
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Registers every receiver parameter (backbone, adapters, mask) in a fixed
/// order. Adapter up-projections start at zero, which makes each adapter an
/// exact identity at insertion.
pub fn register_params(shape: &RxShape, seed: u64, params: &mut ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = shape.channels;
    let cb = shape.bottleneck();
    let k = shape.adapter_kernel;
    let in_ch = 2 * shape.n_r + 1;

    params.add("rx.in.w", Partition::Backbone, conv_init(&mut rng, c, in_ch, 3, 3));
    params.add("rx.in.b", Partition::Backbone, Tensor::zeros(&[c]));
    for (i, spec) in shape.blocks.iter().enumerate() {
        let (kh, kw) = spec.kernel;
        for half in 1..=2 {
            params.add(&format!("rx.blk{i}.ln{half}.g"), Partition::Backbone, Tensor::full(&[c], 1.0));
            params.add(&format!("rx.blk{i}.ln{half}.b"), Partition::Backbone, Tensor::zeros(&[c]));
            params.add(
                &format!("rx.blk{i}.conv{half}.w"),
                Partition::Backbone,
                conv_init(&mut rng, c, c, kh, kw),
            );
            params.add(&format!("rx.blk{i}.conv{half}.b"), Partition::Backbone, Tensor::zeros(&[c]));
        }
        params.add(
            &format!("rx.ada{i}.down.w"),
            Partition::Adapter,
            conv_init(&mut rng, cb, shape.reduction, k, k),
        );
        params.add(&format!("rx.ada{i}.down.b"), Partition::Adapter, Tensor::zeros(&[cb]));
        params.add(&format!("rx.ada{i}.up.w"), Partition::Adapter, Tensor::zeros(&[c, cb, 1, 1]));
        params.add(&format!("rx.ada{i}.up.b"), Partition::Adapter, Tensor::zeros(&[c]));
        params.add(&format!("rx.ada{i}.af1.w"), Partition::Adapter, dense_init(&mut rng, shape.af_hidden, c + 1));
        params.add(&format!("rx.ada{i}.af1.b"), Partition::Adapter, Tensor::zeros(&[shape.af_hidden]));
        params.add(&format!("rx.ada{i}.af2.w"), Partition::Adapter, dense_init(&mut rng, c, shape.af_hidden));
        params.add(&format!("rx.ada{i}.af2.b"), Partition::Adapter, Tensor::zeros(&[c]));
    }
    params.add("rx.out.w", Partition::Backbone, conv_init(&mut rng, shape.m_max, c, 1, 1));
    params.add("rx.out.b", Partition::Backbone, Tensor::zeros(&[shape.m_max]));
    params.add(
        MASK_NAME,
        Partition::Mask,
        Tensor::full(&[shape.m_max, shape.n_sym, shape.n_sc], MASK_INIT),
    );
}

/// Stacks per-antenna re/im planes (`[N_s, N_c]` nodes, re before im) with the
/// broadcast log-noise plane into the `(2N_r+1, N_s, N_c)` network input.
pub fn assemble_input(
    tape: &mut Tape,
    shape: &RxShape,
    planes: &[NodeId],
    n0: f64,
) -> Result<NodeId, AdError> {
    if planes.len() != 2 * shape.n_r {
        return Err(AdError::Invalid {
            op: "assemble_input",
            msg: format!("expected {} planes, got {}", 2 * shape.n_r, planes.len()),
        });
    }
    if n0 <= 0.0 {
        return Err(AdError::Invalid { op: "assemble_input", msg: format!("n0 = {n0}") });
    }
    let (h, w) = (shape.n_sym, shape.n_sc);
    let mut parts = Vec::with_capacity(planes.len() + 1);
    for &p in planes {
        parts.push(tape.reshape(p, &[1, h, w])?);
    }
    let noise = tape.constant(Tensor::full(&[1, h, w], n0.ln()))?;
    parts.push(noise);
    tape.concat0(&parts)
}

fn p(tape: &Tape, name: &str) -> Result<crate::autodiff::ParamId, AdError> {
    tape.params().id(name)
}

/// Pre-activation residual block `i`: z + Conv(ReLU(LN(Conv(ReLU(LN(z)))))).
pub fn residual_block(
    tape: &mut Tape,
    shape: &RxShape,
    i: usize,
    z: NodeId,
) -> Result<NodeId, AdError> {
    let spec = shape.blocks[i];
    let mut t = z;
    for half in 1..=2 {
        let g = p(tape, &format!("rx.blk{i}.ln{half}.g"))?;
        let b = p(tape, &format!("rx.blk{i}.ln{half}.b"))?;
        let (g, b) = (tape.param(g)?, tape.param(b)?);
        t = tape.layer_norm(t, g, b, LN_EPS)?;
        t = tape.relu(t)?;
        let w = p(tape, &format!("rx.blk{i}.conv{half}.w"))?;
        let bias = p(tape, &format!("rx.blk{i}.conv{half}.b"))?;
        let (w, bias) = (tape.param(w)?, tape.param(bias)?);
        t = tape.conv2d(t, w, Some(bias), 1, spec.dilation)?;
    }
    tape.add(z, t)
}

/// Noise-aware channel attention: GAP over the grid, append ln N0, two dense
/// layers, sigmoid. Returns α ∈ (0,1)^C.
pub fn attention_factor(
    tape: &mut Tape,
    shape: &RxShape,
    i: usize,
    features: NodeId,
    n0: f64,
) -> Result<NodeId, AdError> {
    let (c, h, w) = (shape.channels, shape.n_sym, shape.n_sc);
    let flat = tape.reshape(features, &[c, h * w])?;
    let gap = tape.row_mean(flat)?;
    let noise = tape.constant(Tensor::new(&[1], vec![n0.ln()]))?;
    let cat = tape.concat0(&[gap, noise])?;
    let w1 = tape.param(p(tape, &format!("rx.ada{i}.af1.w"))?)?;
    let b1 = tape.param(p(tape, &format!("rx.ada{i}.af1.b"))?)?;
    let hmid = tape.dense(cat, w1, b1)?;
    let hmid = tape.relu(hmid)?;
    let w2 = tape.param(p(tape, &format!("rx.ada{i}.af2.w"))?)?;
    let b2 = tape.param(p(tape, &format!("rx.ada{i}.af2.b"))?)?;
    let out = tape.dense(hmid, w2, b2)?;
    tape.sigmoid(out)
}

/// Bottleneck adapter `i`: depthwise down-conv, ReLU, pointwise up-conv,
/// α-gated residual merge.
pub fn channel_adapter(
    tape: &mut Tape,
    shape: &RxShape,
    i: usize,
    z: NodeId,
    n0: f64,
) -> Result<NodeId, AdError> {
    let (c, h, w) = (shape.channels, shape.n_sym, shape.n_sc);
    let groups = shape.bottleneck();
    let dw = tape.param(p(tape, &format!("rx.ada{i}.down.w"))?)?;
    let db = tape.param(p(tape, &format!("rx.ada{i}.down.b"))?)?;
    let zhat = tape.conv2d(z, dw, Some(db), groups, (1, 1))?;
    let zhat = tape.relu(zhat)?;
    let uw = tape.param(p(tape, &format!("rx.ada{i}.up.w"))?)?;
    let ub = tape.param(p(tape, &format!("rx.ada{i}.up.b"))?)?;
    let ztil = tape.conv2d(zhat, uw, Some(ub), 1, (1, 1))?;
    let alpha = attention_factor(tape, shape, i, ztil, n0)?;
    let flat = tape.reshape(ztil, &[c, h * w])?;
    let gated = tape.mul_rows(flat, alpha)?;
    let gated = tape.reshape(gated, &[c, h, w])?;
    tape.add(gated, z)
}

/// Raw bit-logit tensor `Z ∈ R^{M_max × N_s × N_c}` before masking.
pub fn forward_raw(
    tape: &mut Tape,
    shape: &RxShape,
    input: NodeId,
    n0: f64,
) -> Result<NodeId, AdError> {
    let w = tape.param(p(tape, "rx.in.w")?)?;
    let b = tape.param(p(tape, "rx.in.b")?)?;
    let mut z = tape.conv2d(input, w, Some(b), 1, (1, 1))?;
    for i in 0..shape.n_l() {
        z = residual_block(tape, shape, i, z)?;
        z = channel_adapter(tape, shape, i, z, n0)?;
    }
    let w = tape.param(p(tape, "rx.out.w")?)?;
    let b = tape.param(p(tape, "rx.out.b")?)?;
    tape.conv2d(z, w, Some(b), 1, (1, 1))
}

/// Full forward pass: backbone+adapters, sigmoid mask, first `m` bit planes.
/// Output is `[m, N_s, N_c]` of LLRs (`log P(b=1)/P(b=0)`).
pub fn forward(
    tape: &mut Tape,
    shape: &RxShape,
    input: NodeId,
    n0: f64,
    m: usize,
) -> Result<NodeId, AdError> {
    if m == 0 || m > shape.m_max {
        return Err(AdError::Invalid {
            op: "forward",
            msg: format!("modulation order {m} outside 1..={}", shape.m_max),
        });
    }
    let z = forward_raw(tape, shape, input, n0)?;
    let mask = tape.param(p(tape, MASK_NAME)?)?;
    let soft = tape.sigmoid(mask)?;
    let masked = tape.mul(z, soft)?;
    tape.slice0(masked, 0, m)
}

/// Evaluation entry point: demodulated per-antenna grids in, masked LLR tensor
/// out, all on a throwaway tape.
pub fn forward_grids(
    params: &ParamSet,
    shape: &RxShape,
    y: &[Vec<Complex64>],
    n0: f64,
    m: usize,
) -> Result<Tensor, AdError> {
    if y.len() != shape.n_r {
        return Err(AdError::Invalid {
            op: "forward_grids",
            msg: format!("expected {} antennas, got {}", shape.n_r, y.len()),
        });
    }
    let (h, w) = (shape.n_sym, shape.n_sc);
    let mut tape = Tape::new(params);
    let mut planes = Vec::with_capacity(2 * shape.n_r);
    for grid in y {
        if grid.len() != h * w {
            return Err(AdError::Invalid {
                op: "forward_grids",
                msg: format!("grid has {} REs, want {}", grid.len(), h * w),
            });
        }
        let re = Tensor::new(&[h, w], grid.iter().map(|v| v.re).collect());
        let im = Tensor::new(&[h, w], grid.iter().map(|v| v.im).collect());
        planes.push(tape.constant(re)?);
        planes.push(tape.constant(im)?);
    }
    let input = assemble_input(&mut tape, shape, &planes, n0)?;
    let out = forward(&mut tape, shape, input, n0, m)?;
    Ok(tape.value(out).clone())
}

/// Reorders a `[m, N_s, N_c]` LLR tensor into per-RE groups (grid order, MSB
/// first), keeping only REs where `mask` is true.
pub fn per_re_llrs(llr: &Tensor, m: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let shape = llr.shape();
    assert_eq!(shape[0], m);
    let n_re = shape[1] * shape[2];
    let data = llr.data();
    let mut out = Vec::with_capacity(m * n_re);
    for re in 0..n_re {
        if let Some(mask) = mask {
            if !mask[re] {
                continue;
            }
        }
        for bit in 0..m {
            out.push(data[bit * n_re + re]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    Full,
    AdapterOnly,
}

impl TuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TuneMode::Full => "full",
            TuneMode::AdapterOnly => "adapter-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(TuneMode::Full),
            "adapter-only" | "adapter_only" | "adapter" => Some(TuneMode::AdapterOnly),
            _ => None,
        }
    }
}

/// Applies a fine-tuning mode to the parameter partitions: `full` trains
/// everything; `adapter-only` freezes the backbone and trains adapters, mask,
/// and constellation.
pub fn apply_mode(params: &mut ParamSet, mode: TuneMode) {
    match mode {
        TuneMode::Full => params.set_all_trainable(),
        TuneMode::AdapterOnly => params.set_trainable_partitions(&[
            Partition::Adapter,
            Partition::Mask,
            Partition::Constellation,
        ]),
    }
}

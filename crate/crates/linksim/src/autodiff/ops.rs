//! Composite graph builders: complex arithmetic over `(re, im)` tensor pairs.
//!
//! A complex signal on the tape is just two real nodes. The helpers here keep
//! the four-real-multiply bookkeeping in one place so the signal-path code
//! reads like the algebra it implements.

use std::rc::Rc;

use super::tape::{NodeId, Tape};
use super::{AdError, Tensor};

/// A complex-valued node: two real tensors of identical shape.
#[derive(Clone, Copy, Debug)]
pub struct Cx {
    pub re: NodeId,
    pub im: NodeId,
}

impl Cx {
    pub fn new(re: NodeId, im: NodeId) -> Self {
        Self { re, im }
    }
}

pub fn cx_constant(tape: &mut Tape, re: Tensor, im: Tensor) -> Result<Cx, AdError> {
    Ok(Cx::new(tape.constant(re)?, tape.constant(im)?))
}

pub fn cx_add(tape: &mut Tape, a: Cx, b: Cx) -> Result<Cx, AdError> {
    Ok(Cx::new(tape.add(a.re, b.re)?, tape.add(a.im, b.im)?))
}

pub fn cx_sub(tape: &mut Tape, a: Cx, b: Cx) -> Result<Cx, AdError> {
    Ok(Cx::new(tape.sub(a.re, b.re)?, tape.sub(a.im, b.im)?))
}

/// Elementwise complex product `(a.re + j a.im)(b.re + j b.im)`.
pub fn cx_mul(tape: &mut Tape, a: Cx, b: Cx) -> Result<Cx, AdError> {
    let rr = tape.mul(a.re, b.re)?;
    let ii = tape.mul(a.im, b.im)?;
    let ri = tape.mul(a.re, b.im)?;
    let ir = tape.mul(a.im, b.re)?;
    Ok(Cx::new(tape.sub(rr, ii)?, tape.add(ri, ir)?))
}

pub fn cx_scale(tape: &mut Tape, a: Cx, k: f64) -> Result<Cx, AdError> {
    Ok(Cx::new(tape.scale(a.re, k)?, tape.scale(a.im, k)?))
}

/// Squared magnitude `re² + im²` (a real node).
pub fn cx_abs2(tape: &mut Tape, a: Cx) -> Result<NodeId, AdError> {
    let r2 = tape.mul(a.re, a.re)?;
    let i2 = tape.mul(a.im, a.im)?;
    tape.add(r2, i2)
}

/// Applies a constant complex matrix `(m_re + j m_im)` to every complex row.
pub fn cx_mat_rows(tape: &mut Tape, a: Cx, m_re: Rc<Tensor>, m_im: Rc<Tensor>) -> Result<Cx, AdError> {
    let ar = tape.mat_rows(a.re, Rc::clone(&m_re))?;
    let ai = tape.mat_rows(a.im, Rc::clone(&m_re))?;
    let br = tape.mat_rows(a.re, Rc::clone(&m_im))?;
    let bi = tape.mat_rows(a.im, m_im)?;
    Ok(Cx::new(tape.sub(ar, bi)?, tape.add(ai, br)?))
}

/// Complex causal time-varying convolution with constant complex taps.
pub fn cx_tv_conv(tape: &mut Tape, x: Cx, t_re: Rc<Tensor>, t_im: Rc<Tensor>) -> Result<Cx, AdError> {
    let rr = tape.tv_conv(x.re, Rc::clone(&t_re))?;
    let ri = tape.tv_conv(x.im, t_re)?;
    let ir = tape.tv_conv(x.re, Rc::clone(&t_im))?;
    let ii = tape.tv_conv(x.im, t_im)?;
    Ok(Cx::new(tape.sub(rr, ii)?, tape.add(ri, ir)?))
}

/// Gathers the same index list from both components.
pub fn cx_gather(tape: &mut Tape, a: Cx, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Cx, AdError> {
    let re = tape.gather(a.re, Rc::clone(&idx), out_shape)?;
    let im = tape.gather(a.im, idx, out_shape)?;
    Ok(Cx::new(re, im))
}

pub fn cx_reshape(tape: &mut Tape, a: Cx, shape: &[usize]) -> Result<Cx, AdError> {
    Ok(Cx::new(tape.reshape(a.re, shape)?, tape.reshape(a.im, shape)?))
}

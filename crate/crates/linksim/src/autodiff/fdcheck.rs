//! Central-finite-difference gradient verification.
//!
//! Every primitive op carries a hand-written backward rule; this module is
//! the independent referee. [`run_op_suite`] builds a tiny graph per op,
//! computes tape gradients, recomputes them by symmetric differencing of the
//! scalar loss, and reports the worst disagreement. The same machinery is
//! reused by the integration tests against the full end-to-end training loss.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ops::{self, Cx};
use super::tape::{NodeId, ParamId, ParamSet, Partition, Tape};
use super::{AdError, Tensor};

/// Symmetric difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance on each gradient element.
pub const REL_TOL: f64 = 1e-4;
/// Elements whose difference is below this are accepted outright.
pub const ABS_TOL: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Worst relative error over all checked gradient elements.
    pub max_rel_err: f64,
    pub checked_elements: usize,
    pub pass: bool,
}

/// Gradient of `loss` w.r.t. one parameter tensor by central differences.
pub fn fd_gradient(
    params: &mut ParamSet,
    id: ParamId,
    loss: &mut dyn FnMut(&ParamSet) -> Result<f64, AdError>,
) -> Result<Tensor, AdError> {
    let n = params.value(id).len();
    let shape = params.value(id).shape().to_vec();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let orig = params.value(id).data()[i];
        params.value_mut(id).data_mut()[i] = orig + FD_STEP;
        let up = loss(params)?;
        params.value_mut(id).data_mut()[i] = orig - FD_STEP;
        let down = loss(params)?;
        params.value_mut(id).data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * FD_STEP);
    }
    Ok(Tensor::new(&shape, out))
}

/// Worst relative error between analytic and numeric gradients, ignoring
/// elements that agree within [`ABS_TOL`].
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &f) in analytic.data().iter().zip(numeric.data()) {
        let diff = (a - f).abs();
        if diff <= ABS_TOL {
            continue;
        }
        worst = worst.max(diff / a.abs().max(f.abs()).max(1e-12));
    }
    worst
}

/// Checks every trainable parameter of a scalar-loss graph against central
/// differences. `build` must be a pure function of the parameter set.
pub fn check_graph(
    name: &str,
    params: &mut ParamSet,
    build: &dyn Fn(&mut Tape) -> Result<NodeId, AdError>,
) -> Result<GradCheck, AdError> {
    let (analytic, ids): (Vec<Option<Tensor>>, Vec<ParamId>) = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        let grads = tape.backward(loss)?;
        let ids: Vec<ParamId> = params.ids().filter(|&i| params.is_trainable(i)).collect();
        (ids.iter().map(|&i| grads.get(i).cloned()).collect(), ids)
    };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (slot, &id) in analytic.iter().zip(&ids) {
        let numeric = fd_gradient(params, id, &mut |p| {
            let mut tape = Tape::new(p);
            let loss = build(&mut tape)?;
            Ok(tape.value(loss).item())
        })?;
        let zero = Tensor::zeros(numeric.shape());
        let a = slot.as_ref().unwrap_or(&zero);
        worst = worst.max(max_rel_err(a, &numeric));
        checked += numeric.len();
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        checked_elements: checked,
        pass: worst <= REL_TOL,
    })
}

fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Random fixed weights so the loss is sensitive to every output element.
fn weighted_sum(tape: &mut Tape, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId, AdError> {
    let w = randn_tensor(rng, tape.value(out).shape());
    let wc = tape.constant(w)?;
    let prod = tape.mul(out, wc)?;
    tape.sum_all(prod)
}

struct Case {
    name: &'static str,
    params: Vec<(&'static str, Vec<usize>, Xform)>,
    build: Box<dyn Fn(&mut Tape, &[ParamId], &mut ChaCha8Rng) -> Result<NodeId, AdError>>,
}

#[derive(Clone, Copy)]
enum Xform {
    Raw,
    /// keep values away from the relu kink / sqrt and division singularities
    Positive,
}

/// Finite-difference checks for every primitive op plus the complex
/// composites. Deterministic in `seed`.
pub fn run_op_suite(seed: u64) -> Result<Vec<GradCheck>, AdError> {
    let mut results = Vec::new();
    for (case_idx, case) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((case_idx as u64) << 32));
        let mut params = ParamSet::new();
        let ids: Vec<ParamId> = case
            .params
            .iter()
            .map(|(pname, shape, xform)| {
                let mut t = randn_tensor(&mut rng, shape);
                if let Xform::Positive = xform {
                    for v in t.data_mut() {
                        *v = v.abs() + 0.5;
                    }
                }
                params.add(pname, Partition::Backbone, t)
            })
            .collect();
        // the builder's own randomness (weights, const matrices) must be
        // identical across FD re-evaluations
        let build_rng_seed = rng.random::<u64>();
        let build = case.build;
        let check = check_graph(case.name, &mut params, &|tape| {
            let mut r = ChaCha8Rng::seed_from_u64(build_rng_seed);
            build(tape, &ids, &mut r)
        })?;
        results.push(check);
    }
    Ok(results)
}

fn op_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let p = |name: &'static str, shape: &[usize]| (name, shape.to_vec(), Xform::Raw);
    let pp = |name: &'static str, shape: &[usize]| (name, shape.to_vec(), Xform::Positive);

    cases.push(Case {
        name: "add",
        params: vec![p("a", &[3, 4]), p("b", &[3, 4])],
        build: Box::new(|t, ids, r| {
            let (a, b) = (t.param(ids[0])?, t.param(ids[1])?);
            let o = t.add(a, b)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "sub",
        params: vec![p("a", &[3, 4]), p("b", &[3, 4])],
        build: Box::new(|t, ids, r| {
            let (a, b) = (t.param(ids[0])?, t.param(ids[1])?);
            let o = t.sub(a, b)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "mul",
        params: vec![p("a", &[3, 4]), p("b", &[3, 4])],
        build: Box::new(|t, ids, r| {
            let (a, b) = (t.param(ids[0])?, t.param(ids[1])?);
            let o = t.mul(a, b)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "scale_add_scalar",
        params: vec![p("a", &[5])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let s = t.scale(a, -1.7)?;
            let o = t.add_scalar(s, 0.3)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "relu",
        params: vec![p("a", &[4, 5])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let o = t.relu(a)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "sigmoid",
        params: vec![p("a", &[4, 5])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let o = t.sigmoid(a)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "softplus",
        params: vec![p("a", &[4, 5])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let o = t.softplus(a)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "sqrt",
        params: vec![pp("a", &[4, 3])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let o = t.sqrt(a)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "sum_mean_all",
        params: vec![p("a", &[3, 7])],
        build: Box::new(|t, ids, _| {
            let a = t.param(ids[0])?;
            let s = t.sum_all(a)?;
            let m = t.mean_all(a)?;
            t.add(s, m)
        }),
    });
    cases.push(Case {
        name: "row_mean",
        params: vec![p("a", &[4, 6])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let o = t.row_mean(a)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "scalar_broadcasts",
        params: vec![p("a", &[3, 4]), pp("s", &[1])],
        build: Box::new(|t, ids, r| {
            let (a, s) = (t.param(ids[0])?, t.param(ids[1])?);
            let d = t.sub_scalar_node(a, s)?;
            let m = t.mul_scalar_node(d, s)?;
            let o = t.div_scalar_node(m, s)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "mul_div_rows",
        params: vec![p("a", &[4, 5]), pp("m", &[4]), pp("d", &[4])],
        build: Box::new(|t, ids, r| {
            let (a, m, d) = (t.param(ids[0])?, t.param(ids[1])?, t.param(ids[2])?);
            let x = t.mul_rows(a, m)?;
            let o = t.div_rows(x, d)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "mat_rows",
        params: vec![p("a", &[3, 5])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            let m = Rc::new(randn_tensor(r, &[4, 5]));
            let o = t.mat_rows(a, m)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "tv_conv",
        params: vec![p("x", &[9])],
        build: Box::new(|t, ids, r| {
            let x = t.param(ids[0])?;
            let taps = Rc::new(randn_tensor(r, &[9, 3]));
            let o = t.tv_conv(x, taps)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "gather",
        params: vec![p("a", &[6])],
        build: Box::new(|t, ids, r| {
            let a = t.param(ids[0])?;
            // repeats on purpose: backward must scatter-add
            let idx = Rc::new(vec![0usize, 3, 3, 5, 1, 0, 2, 4]);
            let o = t.gather(a, idx, &[2, 4])?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "concat_slice_reshape",
        params: vec![p("a", &[2, 3, 4]), p("b", &[1, 3, 4])],
        build: Box::new(|t, ids, r| {
            let (a, b) = (t.param(ids[0])?, t.param(ids[1])?);
            let c = t.concat0(&[a, b, a])?;
            let s = t.slice0(c, 1, 3)?;
            let o = t.reshape(s, &[9, 4])?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "conv2d_basic",
        params: vec![p("x", &[3, 5, 6]), p("w", &[4, 3, 3, 3]), p("b", &[4])],
        build: Box::new(|t, ids, r| {
            let (x, w, b) = (t.param(ids[0])?, t.param(ids[1])?, t.param(ids[2])?);
            let o = t.conv2d(x, w, Some(b), 1, (1, 1))?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "conv2d_dilated",
        params: vec![p("x", &[2, 6, 7]), p("w", &[3, 2, 3, 5])],
        build: Box::new(|t, ids, r| {
            let (x, w) = (t.param(ids[0])?, t.param(ids[1])?);
            let o = t.conv2d(x, w, None, 1, (2, 3))?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "conv2d_grouped",
        params: vec![p("x", &[4, 5, 5]), p("w", &[2, 2, 3, 3]), p("b", &[2])],
        build: Box::new(|t, ids, r| {
            let (x, w, b) = (t.param(ids[0])?, t.param(ids[1])?, t.param(ids[2])?);
            let o = t.conv2d(x, w, Some(b), 2, (1, 1))?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "dense",
        params: vec![p("x", &[6]), p("w", &[4, 6]), p("b", &[4])],
        build: Box::new(|t, ids, r| {
            let (x, w, b) = (t.param(ids[0])?, t.param(ids[1])?, t.param(ids[2])?);
            let o = t.dense(x, w, b)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "layer_norm",
        params: vec![p("x", &[3, 4, 5]), p("gamma", &[3]), p("beta", &[3])],
        build: Box::new(|t, ids, r| {
            let (x, gm, bt) = (t.param(ids[0])?, t.param(ids[1])?, t.param(ids[2])?);
            let o = t.layer_norm(x, gm, bt, 1e-6)?;
            weighted_sum(t, o, r)
        }),
    });
    cases.push(Case {
        name: "complex_chain",
        params: vec![p("ar", &[2, 4]), p("ai", &[2, 4]), p("br", &[2, 4]), p("bi", &[2, 4])],
        build: Box::new(|t, ids, r| {
            let a = Cx::new(t.param(ids[0])?, t.param(ids[1])?);
            let b = Cx::new(t.param(ids[2])?, t.param(ids[3])?);
            let prod = ops::cx_mul(t, a, b)?;
            let m_re = Rc::new(randn_tensor(r, &[3, 4]));
            let m_im = Rc::new(randn_tensor(r, &[3, 4]));
            let y = ops::cx_mat_rows(t, prod, m_re, m_im)?;
            let p = ops::cx_abs2(t, y)?;
            weighted_sum(t, p, r)
        }),
    });
    cases
}

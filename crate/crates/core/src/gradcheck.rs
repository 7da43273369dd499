//! Central finite-difference gradient checks in `f64`.
//!
//! Each check reduces the checked graph to a scalar with a fixed random
//! projection of its output, compares the tape gradient with
//! `(f(x + eps) - f(x - eps)) / 2eps` on a subset of input coordinates and
//! reports `max |a - n| / max(1, |a|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mrn::{mrn_forward, Mrn, MrnConfig};
use crate::ops::PoolAxes;
use crate::pipeline::render_on_tape;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::loss::CHARBONNIER_EPS;
use crate::warp::FlowField;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares `analytic[i]` with the central difference of `f` at `x` for
/// every `i` in `coords`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    if x.len() != analytic.len() {
        return Err(Error::Shape("gradient length differs from input".into()));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn pick_coords(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..max).map(|_| rng.gen_range(0..len)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Checks the gradient of `build` w.r.t. each of `inputs`.
pub fn check_graph(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    max_coords: usize,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let proj = Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0..1.0));
    let grads = tape.backward_with(out, proj.clone())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let coords = pick_coords(&mut rng, input.len(), max_coords);
        checked += coords.len();
        let err = grad_check(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec())?;
                let (t, _, o) = eval(&vals)?;
                t.value(o).dot(&proj)
            },
            input.data(),
            analytic.data(),
            &coords,
            DEFAULT_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(GradReport {
        name: name.into(),
        max_rel_error: worst,
        checked,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `[lo, hi]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Flow whose sample positions stay off integer grid lines.
fn fractional_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, max: i64) -> Tensor<f64> {
    Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-max..max) as f64 + rng.gen_range(0.2..0.8))
}

/// Every differentiable primitive plus the composed splat-fuse path.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let n = 48;

    let x = uniform(r, &[3, 6, 7], -1.0, 1.0);
    let w = uniform(r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(r, &[4], -0.5, 0.5);
    for (stride, pad) in [(1, 1), (2, 1)] {
        out.push(check_graph(
            &format!("conv2d_s{stride}"),
            &[x.clone(), w.clone(), b.clone()],
            |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
            n,
            seed + 1,
        )?);
    }
    let wt = uniform(r, &[3, 2, 4, 4], -0.5, 0.5);
    let bt = uniform(r, &[2], -0.5, 0.5);
    out.push(check_graph(
        "conv_transpose2d",
        &[x.clone(), wt, bt],
        |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1),
        n,
        seed + 2,
    )?);

    let xa = away_from_zero(r, &[3, 5, 5], 1.0, 0.05);
    let slope = uniform(r, &[3], 0.05, 0.5);
    out.push(check_graph("prelu", &[xa.clone(), slope], |t, v| t.prelu(v[0], v[1]), n, seed + 3)?);
    out.push(check_graph("sigmoid", &[x.clone()], |t, v| Ok(t.sigmoid(v[0])), n, seed + 4)?);
    for axes in [PoolAxes::Spatial, PoolAxes::ChannelWidth, PoolAxes::ChannelHeight] {
        out.push(check_graph(
            &format!("pool_{axes:?}"),
            &[x.clone()],
            |t, v| t.pool(v[0], axes.axes()),
            n,
            seed + 5,
        )?);
    }
    let (u, vv, ww) = (uniform(r, &[3, 4], 0.0, 1.0), uniform(r, &[3, 5], 0.0, 1.0), uniform(r, &[3, 6], 0.0, 1.0));
    out.push(check_graph("kronecker_mean", &[u, vv, ww], |t, v| t.kronecker_mean(v[0], v[1], v[2]), n, seed + 6)?);
    let y = uniform(r, &[3, 6, 7], -1.0, 1.0);
    out.push(check_graph("mul", &[x.clone(), y.clone()], |t, v| t.mul(v[0], v[1]), n, seed + 7)?);
    out.push(check_graph(
        "concat_slice_reshape",
        &[x.clone(), y.clone()],
        |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let s = t.slice(c, 1, 4)?;
            let s = t.scale(s, 1.5);
            let s = t.reshape(s, &[4, 42])?;
            let p = t.reshape(s, &[4, 6, 7])?;
            let q = t.slice(c, 2, 4)?;
            t.add(p, q)
        },
        n,
        seed + 8,
    )?);

    let img = uniform(r, &[3, 8, 9], 0.0, 1.0);
    let flow = fractional_flow(r, 8, 9, 2);
    out.push(check_graph(
        "backward_warp",
        &[img.clone(), flow.clone()],
        |t, v| t.backward_warp(v[0], v[1]),
        n,
        seed + 9,
    )?);
    let flows = uniform(r, &[6, 4, 5], -2.0, 2.0);
    out.push(check_graph("flow_mean", &[flows], |t, v| t.flow_mean(v[0]), n, seed + 10)?);
    let a = uniform(r, &[3, 5, 5], 0.0, 1.0);
    let d = away_from_zero(r, &[3, 5, 5], 0.5, 0.02);
    let bb = a.zip_map(&d, |p, q| p + q)?;
    out.push(check_graph("neg_l1", &[a, bb], |t, v| t.neg_l1(v[0], v[1]), n, seed + 11)?);

    let bneg = uniform(r, &[1, 5, 5], -2.0, 0.0);
    let s = uniform(r, &[1, 5, 5], -2.0, 2.0);
    let alpha = Tensor::new(vec![1], vec![0.8])?;
    out.push(check_graph(
        "fusion_weight",
        &[bneg, s, alpha],
        |t, v| t.fusion_weight(v[0], v[1], v[2], 0.3),
        n,
        seed + 12,
    )?);

    let wts = uniform(r, &[8, 9], 0.1, 2.0);
    out.push(check_graph(
        "splat",
        &[img.clone(), wts.clone(), flow.clone()],
        |t, v| t.splat(v[0], v[1], v[2]),
        n,
        seed + 13,
    )?);
    let sums = {
        let mut s = uniform(r, &[4, 5, 5], 0.0, 1.0);
        for v in s.channel_mut(3) {
            *v += 0.5;
        }
        s
    };
    out.push(check_graph("fuse", &[sums], |t, v| Ok(t.fuse(v[0])?.0), n, seed + 14)?);

    let pred = uniform(r, &[3, 6, 6], 0.0, 1.0);
    let gt = uniform(r, &[3, 6, 6], 0.0, 1.0);
    out.push(check_graph(
        "charbonnier",
        &[pred.clone(), gt.clone()],
        |t, v| t.charbonnier(v[0], v[1], CHARBONNIER_EPS),
        n,
        seed + 15,
    )?);
    out.push(check_graph("census", &[pred, gt], |t, v| t.census(v[0], v[1]), n, seed + 16)?);

    // Two frames splatted with fractional flows into one accumulator and
    // normalized; holes are avoided by large positive weights everywhere.
    let img1 = uniform(r, &[3, 8, 9], 0.0, 1.0);
    let flow1 = fractional_flow(r, 8, 9, 1);
    let wts1 = uniform(r, &[8, 9], 0.1, 2.0);
    out.push(check_graph(
        "splat_fuse",
        &[img, wts, flow, img1, wts1, flow1],
        |t, v| {
            let a = t.splat(v[0], v[1], v[2])?;
            let b = t.splat(v[3], v[4], v[5])?;
            let s = t.add(a, b)?;
            let (y, _) = t.fuse(s)?;
            Ok(y)
        },
        n,
        seed + 17,
    )?);
    Ok(out)
}

/// Tiny network used by the composed checks.
pub fn tiny_config() -> MrnConfig {
    MrnConfig {
        levels: 2,
        channels: vec![4, 8],
        rank: 2,
        n_flows: 2,
        flow_downscale: 4,
    }
}

struct TinyProblem {
    model: Mrn<f64>,
    i0: Tensor<f64>,
    i1: Tensor<f64>,
    gt: Tensor<f64>,
    f01: FlowField<f64>,
    f10: FlowField<f64>,
}

fn tiny_problem(seed: u64) -> Result<TinyProblem> {
    let cfg = tiny_config();
    let mut model = Mrn::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    // Larger head weights so every path contributes a visible gradient.
    for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
        if name.starts_with("head.") {
            *t = uniform(&mut rng, t.shape(), -0.1, 0.1);
        }
    }
    let (h, w) = (16, 16);
    let i0 = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
    let i1 = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
    let gt = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
    let f01 = FlowField::new(uniform(&mut rng, &[2, h / 4, w / 4], -0.7, 0.7))?;
    let f10 = FlowField::new(uniform(&mut rng, &[2, h / 4, w / 4], -0.7, 0.7))?;
    Ok(TinyProblem { model, i0, i1, gt, f01, f10 })
}

/// Checks the network outputs or the full loss w.r.t. a random subset of
/// every parameter tensor.
fn check_model(name: &str, seed: u64, with_render: bool, per_param: usize) -> Result<GradReport> {
    let p = tiny_problem(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let names = p.model.params.names().to_vec();
    let run = |params: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut model = p.model.clone();
        model.params.tensors_mut().clone_from_slice(params);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let vars = bound.vars().to_vec();
        let i0 = tape.leaf(p.i0.clone());
        let i1 = tape.leaf(p.i1.clone());
        let out = mrn_forward(&mut tape, &model.config, &bound, i0, i1, &p.f01, &p.f10)?;
        let root = if with_render {
            let alpha = bound.var("fusion.alpha")?;
            let (pred, _) = render_on_tape(&mut tape, i0, i1, out, alpha, 0.5)?;
            let gt = tape.leaf(p.gt.clone());
            let lc = tape.charbonnier(pred, gt, CHARBONNIER_EPS)?;
            let ln = tape.census(pred, gt)?;
            tape.add(lc, ln)?
        } else {
            tape.concat(&[out.flows01, out.flows10, out.s0, out.s1])?
        };
        Ok((tape, vars, root))
    };
    let base: Vec<Tensor<f64>> = p.model.params.tensors().to_vec();
    let (tape, vars, root) = run(&base)?;
    let proj = Tensor::from_fn(tape.value(root).shape(), |_| rng.gen_range(-1.0..1.0));
    let grads = tape.backward_with(root, proj.clone())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, t) in base.iter().enumerate() {
        if !with_render && names[k] == "fusion.alpha" {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[k], t.shape());
        let coords = pick_coords(&mut rng, t.len(), per_param);
        checked += coords.len();
        let err = grad_check(
            |x| {
                let mut params = base.clone();
                params[k] = Tensor::new(t.shape().to_vec(), x.to_vec())?;
                let (tp, _, r) = run(&params)?;
                tp.value(r).dot(&proj)
            },
            t.data(),
            analytic.data(),
            &coords,
            DEFAULT_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(GradReport {
        name: name.into(),
        max_rel_error: worst,
        checked,
    })
}

/// Network outputs w.r.t. its weights.
pub fn mrn_check(seed: u64) -> Result<GradReport> {
    check_model("mrn_forward", seed, false, 2)
}

/// Loss of the interpolated frame w.r.t. network weights and `alpha`.
pub fn pipeline_check(seed: u64) -> Result<GradReport> {
    check_model("pipeline_loss", seed, true, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 1e-6), 1e-6);
        assert!((rel_error(10.0, 11.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn catches_wrong_gradient() {
        let x = [1.0, 2.0];
        let err = grad_check(|v| Ok(v[0] * v[0] + 3.0 * v[1]), &x, &[2.0, 3.0], &[0, 1], 1e-5).unwrap();
        assert!(err < 1e-8);
        let err = grad_check(|v| Ok(v[0] * v[0] + 3.0 * v[1]), &x, &[2.0, 2.0], &[0, 1], 1e-5).unwrap();
        assert!(err > 0.3);
    }
}

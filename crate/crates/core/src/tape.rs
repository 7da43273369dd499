//! A recording tape over the fixed kernel set.
//!
//! Every call appends one node holding its output value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in exact reverse recording order
//! and dispatches to the hand-written backward kernels.

use crate::error::{shape_err, Result};
use crate::fusion;
use crate::ops;
use crate::tensor::{Scalar, Tensor};
use crate::train::loss;
use crate::warp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Prelu { x: Var, slope: Var },
    Sigmoid { x: Var },
    Pool { x: Var, axes: Vec<usize> },
    KronMean { u: Var, v: Var, w: Var },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Concat { xs: Vec<Var> },
    Slice { x: Var, start: usize, len: usize },
    Reshape { x: Var },
    Scale { x: Var, k: T },
    Warp { x: Var, flow: Var },
    FlowMean { x: Var, n: usize },
    NegL1 { a: Var, b: Var },
    FusionWeight { b: Var, s: Var, alpha: Var },
    Splat { colors: Var, weights: Var, flow: Var },
    Fuse { sums: Var },
    Charbonnier { pred: Var, gt: Var, eps: T },
    Census { pred: Var, gt: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

/// Gradients indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations counted by the convolution kernels
    /// (two per multiply-accumulate).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_raw(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let ws = self.value(w).shape();
        self.flops += 2 * ops::conv_macs(y.shape(), ws[1], ws[2]);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv_transpose2d_raw(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let ws = self.value(w).shape();
        self.flops += 2 * ops::conv_macs(self.value(x).shape(), ws[1], ws[2]);
        Ok(self.push(y, Op::ConvT2d { x, w, b, stride, pad }))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let y = ops::prelu(self.value(x), self.value(slope))?;
        Ok(self.push(y, Op::Prelu { x, slope }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x), axes)?;
        Ok(self.push(y, Op::Pool { x, axes: axes.to_vec() }))
    }

    pub fn kronecker_mean(&mut self, u: Var, v: Var, w: Var) -> Result<Var> {
        let y = ops::kronecker_mean(self.value(u), self.value(v), self.value(w))?;
        Ok(self.push(y, Op::KronMean { u, v, w }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).scale(k);
        self.push(y, Op::Scale { x, k })
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| crate::Error::Shape("empty concat".into()))?);
        let rest = first.shape()[1..].to_vec();
        let mut c = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != rest[..] {
                return shape_err(format!(
                    "concat: trailing shapes {:?} and {:?} differ",
                    t.shape(),
                    first.shape()
                ));
            }
            c += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&rest);
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }))
    }

    /// Channels `start..start+len` of a channel-first tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.shape()[0];
        if start + len > c || len == 0 {
            return shape_err(format!("slice {start}..{} of {c} channels", start + len));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let y = Tensor::new(shape, t.data()[start * inner..(start + len) * inner].to_vec())?;
        Ok(self.push(y, Op::Slice { x, start, len }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    pub fn backward_warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let y = warp::backward_warp(self.value(x), self.value(flow))?;
        Ok(self.push(y, Op::Warp { x, flow }))
    }

    pub fn flow_mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).shape()[0] / 2;
        let y = warp::flow_mean(self.value(x))?;
        Ok(self.push(y, Op::FlowMean { x, n }))
    }

    pub fn neg_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = fusion::neg_l1(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::NegL1 { a, b }))
    }

    /// `exp(min(b*s*alpha, cap)) * r`; `alpha` is a `[1]` tensor.
    pub fn fusion_weight(&mut self, b: Var, s: Var, alpha: Var, r: T) -> Result<Var> {
        let a = self.value(alpha).data()[0];
        let y = fusion::fusion_weights(self.value(b), self.value(s), a, r)?;
        Ok(self.push(y, Op::FusionWeight { b, s, alpha }))
    }

    pub fn splat(&mut self, colors: Var, weights: Var, flow: Var) -> Result<Var> {
        let y = warp::splat_sums(self.value(colors), self.value(weights), self.value(flow))?;
        Ok(self.push(y, Op::Splat { colors, weights, flow }))
    }

    /// Normalizes splat sums; holes come out as zero.
    pub fn fuse(&mut self, sums: Var) -> Result<(Var, Vec<bool>)> {
        let (y, holes) = fusion::fuse_sums(self.value(sums))?;
        Ok((self.push(y, Op::Fuse { sums }), holes))
    }

    pub fn charbonnier(&mut self, pred: Var, gt: Var, eps: T) -> Result<Var> {
        let y = loss::charbonnier(self.value(pred), self.value(gt), eps)?;
        Ok(self.push(Tensor::scalar(y), Op::Charbonnier { pred, gt, eps }))
    }

    pub fn census(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let y = loss::census(self.value(pred), self.value(gt))?;
        Ok(self.push(Tensor::scalar(y), Op::Census { pred, gt }))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.backward_with(root, seed)
    }

    /// Reverse pass from `root` seeded with `seed` (same shape as `root`).
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        self.value(root).expect_same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);

        fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        ops::conv_transpose2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Prelu { x, slope } => {
                    let (gx, gs) = ops::prelu_backward(self.value(*x), self.value(*slope), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *slope, gs)?;
                }
                Op::Sigmoid { x } => {
                    let gx = ops::sigmoid_backward(&node.value, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Pool { x, axes } => {
                    let gx = ops::global_avg_pool_backward(self.value(*x).shape(), axes, &g)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::KronMean { u, v, w } => {
                    let (gu, gv, gw) =
                        ops::kronecker_mean_backward(self.value(*u), self.value(*v), self.value(*w), &g)?;
                    accumulate(&mut grads, *u, gu)?;
                    accumulate(&mut grads, *v, gv)?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(self.value(*b), |g, y| g * y)?;
                    let gb = g.zip_map(self.value(*a), |g, x| g * x)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale { x, k } => {
                    accumulate(&mut grads, *x, g.scale(*k))?;
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for &v in xs {
                        let shape = self.value(v).shape().to_vec();
                        let n: usize = shape.iter().product();
                        let part = Tensor::new(shape, g.data()[off..off + n].to_vec())?;
                        off += n;
                        accumulate(&mut grads, v, part)?;
                    }
                }
                Op::Slice { x, start, len } => {
                    let xs = self.value(*x).shape();
                    let inner: usize = xs[1..].iter().product();
                    let mut gx = Tensor::zeros(xs);
                    gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Warp { x, flow } => {
                    let (gx, gf) = warp::backward_warp_backward(self.value(*x), self.value(*flow), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *flow, gf)?;
                }
                Op::FlowMean { x, n } => {
                    accumulate(&mut grads, *x, warp::flow_mean_backward(*n, &g)?)?;
                }
                Op::NegL1 { a, b } => {
                    let (ga, gb) = fusion::neg_l1_backward(self.value(*a), self.value(*b), &g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::FusionWeight { b, s, alpha, .. } => {
                    let a = self.value(*alpha).data()[0];
                    let (gb, gs, ga) =
                        fusion::fusion_weights_backward(self.value(*b), self.value(*s), a, &node.value, &g)?;
                    accumulate(&mut grads, *b, gb)?;
                    accumulate(&mut grads, *s, gs)?;
                    accumulate(&mut grads, *alpha, Tensor::scalar(ga))?;
                }
                Op::Splat { colors, weights, flow } => {
                    let (gc, gw, gf) =
                        warp::splat_backward(self.value(*colors), self.value(*weights), self.value(*flow), &g)?;
                    accumulate(&mut grads, *colors, gc)?;
                    accumulate(&mut grads, *weights, gw)?;
                    accumulate(&mut grads, *flow, gf)?;
                }
                Op::Fuse { sums } => {
                    let gs = fusion::fuse_sums_backward(self.value(*sums), &g)?;
                    accumulate(&mut grads, *sums, gs)?;
                }
                Op::Charbonnier { pred, gt, eps } => {
                    let gp = loss::charbonnier_backward(self.value(*pred), self.value(*gt), *eps)?.scale(g.data()[0]);
                    let gg = gp.scale(-T::one());
                    accumulate(&mut grads, *pred, gp)?;
                    accumulate(&mut grads, *gt, gg)?;
                }
                Op::Census { pred, gt } => {
                    let (gp, gg) = loss::census_backward(self.value(*pred), self.value(*gt))?;
                    let k = g.data()[0];
                    accumulate(&mut grads, *pred, gp.scale(k))?;
                    accumulate(&mut grads, *gt, gg.scale(k))?;
                }
            }
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 2], |i| i as f64));
        let y = tape.scale(x, 3.0);
        let z = tape.add(y, x).unwrap();
        let g = tape.backward_with(z, Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn slice_concat_round_trip_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[2, 1, 3], 1.0));
        let b = tape.leaf(Tensor::full(&[1, 1, 3], 2.0));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 1, 3]);
        let s = tape.slice(c, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let g = tape.backward_with(s, Tensor::full(&[2, 1, 3], 1.0)).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv_flops_counted() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 16 * 18);
    }
}

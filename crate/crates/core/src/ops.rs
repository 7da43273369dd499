//! Convolution, activation, pooling and rank-1 product kernels, each paired
//! with its hand-derived backward pass.
//!
//! Convolutions are cross-correlations with zero padding. Transposed
//! convolution weights use the `[C_in, C_out, k, k]` layout, i.e. the same
//! tensor as the forward convolution whose adjoint they compute.

use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `[C_out, C_in, k, k]` for [`conv2d`], `[C_in, C_out, k, k]` for
    /// [`conv_transpose2d`].
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] {
            return shape_err(format!("conv weights must be [A,B,k,k], got {s:?}"));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }
}

/// Spatial output extent of a strided convolution.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Spatial output extent of a transposed convolution.
pub fn conv_transpose_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input - 1) * stride + k).checked_sub(2 * pad)
}

/// Range of `o` with `0 <= o*stride + offset < limit`, intersected with
/// `0..count`.
#[inline]
fn valid_range(offset: isize, stride: usize, limit: usize, count: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = limit as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(count as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    transposed: bool,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (cin, h, wd) = x.chw()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return shape_err(format!("conv weights must be [A,B,k,k], got {ws:?}"));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let k = ws[2];
    let (w_in, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if w_in != cin {
        return shape_err(format!(
            "input has {cin} channels but weights {ws:?} expect {w_in}"
        ));
    }
    if b.shape() != [cout] {
        return shape_err(format!("bias must be [{cout}], got {:?}", b.shape()));
    }
    let (ho, wo) = if transposed {
        (
            conv_transpose_out_len(h, k, stride, pad),
            conv_transpose_out_len(wd, k, stride, pad),
        )
    } else {
        (
            conv_out_len(h, k, stride, pad),
            conv_out_len(wd, k, stride, pad),
        )
    };
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((cin, h, wd, cout, k, ho, wo)),
        _ => shape_err(format!(
            "input {h}x{wd} too small for kernel {k} stride {stride} padding {pad}"
        )),
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &layer.weights, &layer.bias, layer.stride, layer.padding)
}

pub fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, wd, cout, k, ho, wo) = conv_dims(x, w, b, stride, pad, false)?;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    par::for_each_chunk_mut(out.data_mut(), ho * wo, |co, plane| {
        plane.fill(bd[co]);
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky as isize - pad as isize, stride, h, ho);
                for kx in 0..k {
                    let wv = wdta[((co * cin + ci) * k + ky) * k + kx];
                    let xoff = kx as isize - pad as isize;
                    let (ox0, ox1) = valid_range(xoff, stride, wd, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let ix0 = (ox0 as isize + xoff) as usize;
                            for (o, &v) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox * stride) as isize + xoff;
                                orow[ox] += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_raw`] w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cout = w.shape()[0];
    let b = Tensor::zeros(&[cout]);
    let (cin, h, wd, cout, k, ho, wo) = conv_dims(x, w, &b, stride, pad, false)?;
    if grad.shape() != [cout, ho, wo] {
        return shape_err(format!(
            "conv2d grad must be [{cout},{ho},{wo}], got {:?}",
            grad.shape()
        ));
    }
    let gd = grad.data();
    let wdta = w.data();
    let xd = x.data();

    let mut gx = Tensor::zeros(&[cin, h, wd]);
    par::for_each_chunk_mut(gx.data_mut(), h * wd, |ci, plane| {
        for co in 0..cout {
            let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky as isize - pad as isize, stride, h, ho);
                for kx in 0..k {
                    let wv = wdta[((co * cin + ci) * k + ky) * k + kx];
                    let xoff = kx as isize - pad as isize;
                    let (ox0, ox1) = valid_range(xoff, stride, wd, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let irow = &mut plane[iy * wd..(iy + 1) * wd];
                        if stride == 1 {
                            let ix0 = (ox0 as isize + xoff) as usize;
                            for (i, &g) in irow[ix0..].iter_mut().zip(&grow[ox0..ox1]) {
                                *i += wv * g;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * stride) as isize + xoff) as usize;
                                irow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut gw = Tensor::zeros(w.shape());
    par::for_each_chunk_mut(gw.data_mut(), cin * k * k, |co, wchunk| {
        let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky as isize - pad as isize, stride, h, ho);
                for kx in 0..k {
                    let xoff = kx as isize - pad as isize;
                    let (ox0, ox1) = valid_range(xoff, stride, wd, wo);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        if stride == 1 {
                            let ix0 = (ox0 as isize + xoff) as usize;
                            for (&g, &v) in grow[ox0..ox1].iter().zip(&row[ix0..]) {
                                acc += g * v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * stride) as isize + xoff) as usize;
                                acc += grow[ox] * row[ix];
                            }
                        }
                    }
                    wchunk[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let gb = Tensor::from_fn(&[cout], |co| gd[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum());
    Ok((gx, gw, gb))
}

pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    conv_transpose2d_raw(x, &layer.weights, &layer.bias, layer.stride, layer.padding)
}

pub fn conv_transpose2d_raw<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, wd, cout, k, ho, wo) = conv_dims(x, w, b, stride, pad, true)?;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    par::for_each_chunk_mut(out.data_mut(), ho * wo, |co, plane| {
        plane.fill(bd[co]);
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(ky as isize - pad as isize, stride, ho, h);
                for kx in 0..k {
                    let wv = wdta[((ci * cout + co) * k + ky) * k + kx];
                    let xoff = kx as isize - pad as isize;
                    let (ix0, ix1) = valid_range(xoff, stride, wo, wd);
                    for iy in iy0..iy1 {
                        let oy = iy * stride + ky - pad;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for ix in ix0..ix1 {
                            let ox = ((ix * stride) as isize + xoff) as usize;
                            orow[ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv_transpose2d_raw`] w.r.t. input, weights and bias.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cout = w.shape()[1];
    let b = Tensor::zeros(&[cout]);
    let (cin, h, wd, cout, k, ho, wo) = conv_dims(x, w, &b, stride, pad, true)?;
    if grad.shape() != [cout, ho, wo] {
        return shape_err(format!(
            "conv_transpose2d grad must be [{cout},{ho},{wo}], got {:?}",
            grad.shape()
        ));
    }
    let gd = grad.data();
    let wdta = w.data();
    let xd = x.data();

    let mut gx = Tensor::zeros(&[cin, h, wd]);
    par::for_each_chunk_mut(gx.data_mut(), h * wd, |ci, plane| {
        for co in 0..cout {
            let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(ky as isize - pad as isize, stride, ho, h);
                for kx in 0..k {
                    let wv = wdta[((ci * cout + co) * k + ky) * k + kx];
                    let xoff = kx as isize - pad as isize;
                    let (ix0, ix1) = valid_range(xoff, stride, wo, wd);
                    for iy in iy0..iy1 {
                        let oy = iy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let irow = &mut plane[iy * wd..(iy + 1) * wd];
                        for ix in ix0..ix1 {
                            let ox = ((ix * stride) as isize + xoff) as usize;
                            irow[ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });

    let mut gw = Tensor::zeros(w.shape());
    par::for_each_chunk_mut(gw.data_mut(), cout * k * k, |ci, wchunk| {
        let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..cout {
            let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(ky as isize - pad as isize, stride, ho, h);
                for kx in 0..k {
                    let xoff = kx as isize - pad as isize;
                    let (ix0, ix1) = valid_range(xoff, stride, wo, wd);
                    let mut acc = T::zero();
                    for iy in iy0..iy1 {
                        let oy = iy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        for ix in ix0..ix1 {
                            let ox = ((ix * stride) as isize + xoff) as usize;
                            acc += row[ix] * grow[ox];
                        }
                    }
                    wchunk[(co * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let gb = Tensor::from_fn(&[cout], |co| gd[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum());
    Ok((gx, gw, gb))
}

/// Multiply-accumulate count of a convolution producing `out_shape`.
pub fn conv_macs(out_shape: &[usize], cin: usize, k: usize) -> u64 {
    out_shape.iter().product::<usize>() as u64 * (cin * k * k) as u64
}

fn check_slope<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<(usize, usize)> {
    let c = x.shape().first().copied().unwrap_or(0);
    if slope.shape() != [c] {
        return shape_err(format!(
            "prelu slope must be [{c}], got {:?}",
            slope.shape()
        ));
    }
    Ok((c, x.len() / c.max(1)))
}

/// `y = x` where `x >= 0`, `slope[c] * x` otherwise; channel is the leading
/// axis.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, plane) = check_slope(x, slope)?;
    let mut out = x.clone();
    let sd = slope.data();
    par::for_each_chunk_mut(out.data_mut(), plane, |c, p| {
        let a = sd[c];
        for v in p {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
    });
    Ok(out)
}

/// Gradients of [`prelu`] w.r.t. input and slope.
pub fn prelu_backward<T: Scalar>(
    x: &Tensor<T>,
    slope: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, plane) = check_slope(x, slope)?;
    x.expect_same_shape(grad, "prelu backward")?;
    let mut gx = grad.clone();
    let mut gs = Tensor::zeros(&[c]);
    let sd = slope.data();
    for ch in 0..c {
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let gxs = &mut gx.data_mut()[ch * plane..(ch + 1) * plane];
        let mut acc = T::zero();
        for (g, &xv) in gxs.iter_mut().zip(xs) {
            if xv < T::zero() {
                acc += *g * xv;
                *g = *g * sd[ch];
            }
        }
        gs.data_mut()[ch] = acc;
    }
    Ok((gx, gs))
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(grad, |y, g| g * y * (T::one() - y))
}

/// Axes collapsed by [`global_avg_pool`]; the retained axis keeps its extent
/// and the collapsed ones become 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxes {
    /// `[C,H,W] -> [C,1,1]`
    Spatial,
    /// `[C,H,W] -> [1,H,1]`
    ChannelWidth,
    /// `[C,H,W] -> [1,1,W]`
    ChannelHeight,
}

impl PoolAxes {
    pub fn axes(self) -> &'static [usize] {
        match self {
            PoolAxes::Spatial => &[1, 2],
            PoolAxes::ChannelWidth => &[0, 2],
            PoolAxes::ChannelHeight => &[0, 1],
        }
    }
}

fn pool_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument("pooling needs at least one axis".into()));
    }
    let mut out = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return shape_err(format!("pool axis {a} out of range for {shape:?}"));
        }
        out[a] = 1;
    }
    let count = shape.iter().product::<usize>() / out.iter().product::<usize>().max(1);
    Ok((out, count))
}

/// Maps a flat input index to the flat index of its pooled output cell.
fn pooled_index(mut i: usize, shape: &[usize], out: &[usize]) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        let coord = i % shape[d];
        i /= shape[d];
        if out[d] != 1 {
            idx += coord * stride;
        }
        stride *= out[d];
    }
    idx
}

/// Arithmetic mean over `axes`, keeping collapsed axes as extent 1.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (out_shape, count) = pool_plan(x.shape(), axes)?;
    let mut out = Tensor::zeros(&out_shape);
    for (i, &v) in x.data().iter().enumerate() {
        let j = pooled_index(i, x.shape(), &out_shape);
        out.data_mut()[j] += v;
    }
    let inv = T::one() / T::of(count as f64);
    Ok(out.map(|v| v * inv))
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    axes: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (out_shape, count) = pool_plan(input_shape, axes)?;
    if grad.shape() != out_shape.as_slice() {
        return shape_err("pool grad shape mismatch");
    }
    let inv = T::one() / T::of(count as f64);
    Ok(Tensor::from_fn(input_shape, |i| {
        grad.data()[pooled_index(i, input_shape, &out_shape)] * inv
    }))
}

/// `T[c,h,w] = u[c] * v[h] * w[w]`.
pub fn kronecker_rank1<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if u.rank() != 1 || v.rank() != 1 || w.rank() != 1 || u.is_empty() || v.is_empty() || w.is_empty() {
        return shape_err("kronecker_rank1 needs three non-empty vectors");
    }
    let (c, h, wd) = (u.len(), v.len(), w.len());
    let mut out = Tensor::zeros(&[c, h, wd]);
    let od = out.data_mut();
    for (ci, &uc) in u.data().iter().enumerate() {
        for (hi, &vh) in v.data().iter().enumerate() {
            let uv = uc * vh;
            let row = &mut od[(ci * h + hi) * wd..(ci * h + hi + 1) * wd];
            for (o, &ww) in row.iter_mut().zip(w.data()) {
                *o = uv * ww;
            }
        }
    }
    Ok(out)
}

fn kron_dims<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match (u.shape(), v.shape(), w.shape()) {
        ([m1, c], [m2, h], [m3, wd]) if m1 == m2 && m2 == m3 && *m1 > 0 => Ok((*m1, *c, *h, *wd)),
        _ => shape_err(format!(
            "kronecker_mean needs [M,C],[M,H],[M,W], got {:?} {:?} {:?}",
            u.shape(),
            v.shape(),
            w.shape()
        )),
    }
}

/// Pointwise mean of the `M` rank-1 tensors `u[m] ⊗ v[m] ⊗ w[m]`.
pub fn kronecker_mean<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, c, h, wd) = kron_dims(u, v, w)?;
    let inv = T::one() / T::of(m as f64);
    let (ud, vd, wdd) = (u.data(), v.data(), w.data());
    let mut out = Tensor::zeros(&[c, h, wd]);
    par::for_each_chunk_mut(out.data_mut(), h * wd, |ci, plane| {
        for mi in 0..m {
            let uc = ud[mi * c + ci] * inv;
            for hi in 0..h {
                let uv = uc * vd[mi * h + hi];
                let row = &mut plane[hi * wd..(hi + 1) * wd];
                for (o, &ww) in row.iter_mut().zip(&wdd[mi * wd..(mi + 1) * wd]) {
                    *o += uv * ww;
                }
            }
        }
    });
    Ok(out)
}

pub fn kronecker_mean_backward<T: Scalar>(
    u: &Tensor<T>,
    v: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, c, h, wd) = kron_dims(u, v, w)?;
    if grad.shape() != [c, h, wd] {
        return shape_err("kronecker_mean grad shape mismatch");
    }
    let inv = T::one() / T::of(m as f64);
    let (ud, vd, wdd, gd) = (u.data(), v.data(), w.data(), grad.data());
    let mut gu = Tensor::zeros(u.shape());
    let mut gv = Tensor::zeros(v.shape());
    let mut gw = Tensor::zeros(w.shape());
    for mi in 0..m {
        let vm = &vd[mi * h..(mi + 1) * h];
        let wm = &wdd[mi * wd..(mi + 1) * wd];
        for ci in 0..c {
            let uc = ud[mi * c + ci];
            let mut su = T::zero();
            for hi in 0..h {
                let row = &gd[(ci * h + hi) * wd..(ci * h + hi + 1) * wd];
                let mut sv = T::zero();
                for (wi, (&g, &ww)) in row.iter().zip(wm).enumerate() {
                    sv += g * ww;
                    gw.data_mut()[mi * wd + wi] += g * uc * vm[hi] * inv;
                }
                su += sv * vm[hi];
                gv.data_mut()[mi * h + hi] += sv * uc * inv;
            }
            gu.data_mut()[mi * c + ci] = su * inv;
        }
    }
    Ok((gu, gv, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation, independent of the kernel above.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (cin, h, wd) = x.chw().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.at3(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set3(co, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_scaling_and_identity() {
        let x = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let layer = ConvLayer::new(Tensor::full(&[1, 1, 1, 1], 2.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(conv2d(&x, &layer).unwrap().data(), &[2.0f32; 9]);

        let x = Tensor::<f32>::from_fn(&[1, 4, 5], |i| i as f32 * 0.3 - 1.0);
        let id = ConvLayer::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(conv2d(&x, &id).unwrap(), x);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[2, 8, 8], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let y = conv2d_raw(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        let oracle = conv_oracle(&x, &w, &b, 2, 1);
        for (a, o) in y.data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12);
        }
        for (s, p, k) in [(1, 0, 3), (1, 1, 3), (2, 0, 2), (1, 2, 5), (2, 1, 4)] {
            let w = rand_t(&[2, 2, k, k], &mut rng);
            let b = rand_t(&[2], &mut rng);
            let y = conv2d_raw(&x, &w, &b, s, p).unwrap();
            let o = conv_oracle(&x, &w, &b, s, p);
            assert_eq!(y.shape(), o.shape());
            for (a, o) in y.data().iter().zip(o.data()) {
                assert!((a - o).abs() < 1e-12, "s={s} p={p} k={k}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_raw(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn transpose_spreads_single_pixel() {
        let x = Tensor::<f32>::full(&[1, 1, 1], 1.5);
        let y = conv_transpose2d_raw(&x, &Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::zeros(&[1]), 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.5; 4]);
        let z = conv_transpose2d_raw(&Tensor::zeros(&[1, 3, 3]), &Tensor::full(&[1, 2, 4, 4], 0.7), &Tensor::from_fn(&[2], |i| i as f32 + 1.0), 2, 1).unwrap();
        assert_eq!(z.shape(), &[2, 6, 6]);
        assert!(z.channel(0).iter().all(|&v| v == 1.0));
        assert!(z.channel(1).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn transpose_equals_conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (s, p, k) in [(2, 1, 4), (1, 1, 3), (2, 0, 2), (2, 1, 3)] {
            let x = rand_t(&[2, 8, 8], &mut rng);
            let w = rand_t(&[3, 2, k, k], &mut rng);
            let y = conv2d_raw(&x, &w, &Tensor::zeros(&[3]), s, p).unwrap();
            let g = rand_t(y.shape(), &mut rng);
            let (gx, _, _) = conv2d_backward(&x, &w, s, p, &g).unwrap();
            let t = conv_transpose2d_raw(&g, &w, &Tensor::zeros(&[2]), s, p).unwrap();
            // Transposed output can be smaller than x when (H + 2p - k) % s != 0.
            let (_, th, tw) = t.chw().unwrap();
            for c in 0..2 {
                for yy in 0..th {
                    for xx in 0..tw {
                        assert!((t.at3(c, yy, xx) - gx.at3(c, yy, xx)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn prelu_values() {
        let x = Tensor::<f32>::new(vec![1, 1, 2], vec![2.0, -2.0]).unwrap();
        let y = prelu(&x, &Tensor::full(&[1], 0.25)).unwrap();
        assert_eq!(y.data(), &[2.0, -0.5]);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let x = Tensor::<f32>::new(vec![4], vec![0.0, 1e4, -1e4, f32::MAX]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!(y.all_finite());
        assert!(y.data()[1] <= 1.0 && y.data()[2] >= 0.0);
    }

    #[test]
    fn pooling_means() {
        let x = Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = global_avg_pool(&x, PoolAxes::Spatial.axes()).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1]);
        assert_eq!(p.data(), &[2.5]);
        let c = Tensor::<f32>::full(&[3, 4, 5], 0.7);
        for axes in [PoolAxes::Spatial, PoolAxes::ChannelWidth, PoolAxes::ChannelHeight] {
            let p = global_avg_pool(&c, axes.axes()).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
        assert_eq!(global_avg_pool(&c, PoolAxes::ChannelWidth.axes()).unwrap().shape(), &[1, 4, 1]);
        assert_eq!(global_avg_pool(&c, PoolAxes::ChannelHeight.axes()).unwrap().shape(), &[1, 1, 5]);
        assert!(global_avg_pool(&c, &[]).is_err());
    }

    #[test]
    fn pooled_broadcast_preserves_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[2, 3, 4], &mut rng);
        let p = global_avg_pool(&x, PoolAxes::Spatial.axes()).unwrap();
        for c in 0..2 {
            let s: f64 = x.channel(c).iter().sum();
            assert!((p.data()[c] * 12.0 - s).abs() < 1e-12);
        }
    }

    #[test]
    fn kronecker_direct_product() {
        let u = Tensor::<f32>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let v = Tensor::<f32>::new(vec![1], vec![3.0]).unwrap();
        let w = Tensor::<f32>::new(vec![2], vec![4.0, 5.0]).unwrap();
        let t = kronecker_rank1(&u, &v, &w).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2]);
        assert_eq!(t.data(), &[12.0, 15.0, 24.0, 30.0]);
        let ones = kronecker_rank1(&Tensor::<f32>::full(&[3], 1.0), &Tensor::full(&[2], 1.0), &Tensor::full(&[4], 1.0)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kronecker_mean_of_one_equals_rank1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, v, w) = (rand_t(&[4], &mut rng), rand_t(&[3], &mut rng), rand_t(&[5], &mut rng));
        let a = kronecker_rank1(&u, &v, &w).unwrap();
        let b = kronecker_mean(&u.reshape(&[1, 4]).unwrap(), &v.reshape(&[1, 3]).unwrap(), &w.reshape(&[1, 5]).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

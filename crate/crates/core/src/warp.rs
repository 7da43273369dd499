//! Flow fields, backward warping (bilinear gather) and forward splatting
//! (bilinear scatter).
//!
//! A flow `F_{a->b}` stores `(u, v) = (dx, dy)` in pixel units as a `[2,H,W]`
//! tensor: pixel `(x, y)` of frame `a` lands at `(x + u, y + v)` in frame `b`.

use crate::error::{shape_err, Error, Result};
use crate::fusion::SplatAccumulator;
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Source rows per splat tile. Partial accumulators are merged in tile order,
/// so results do not depend on the number of worker threads.
pub const SPLAT_TILE_ROWS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    data: Tensor<T>,
}

impl<T: Scalar> FlowField<T> {
    /// Wraps a `[2,H,W]` tensor, rejecting non-finite values and magnitudes
    /// beyond `4 * max(H, W)`.
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let f = Self::from_tensor_unchecked(data)?;
        f.validate()?;
        Ok(f)
    }

    /// Wraps a `[2,H,W]` tensor checking only its shape.
    pub fn from_tensor_unchecked(data: Tensor<T>) -> Result<Self> {
        match data.shape() {
            [2, h, w] if *h > 0 && *w > 0 => Ok(Self { data }),
            s => shape_err(format!("flow must be [2,H,W], got {s:?}")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.data.all_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        let bound = 4.0 * self.height().max(self.width()) as f64;
        if self.data.max_abs().f64() > bound {
            return Err(Error::InvalidArgument(format!(
                "flow magnitude {} exceeds sanity bound {bound}",
                self.data.max_abs().f64()
            )));
        }
        Ok(())
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn constant(h: usize, w: usize, u: T, v: T) -> Self {
        Self {
            data: Tensor::from_fn(&[2, h, w], |i| if i < h * w { u } else { v }),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> (T, T)) -> Self {
        let mut data = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = f(y, x);
                data.set3(0, y, x, u);
                data.set3(1, y, x, v);
            }
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn u(&self) -> &[T] {
        self.data.channel(0)
    }

    pub fn v(&self) -> &[T] {
        self.data.channel(1)
    }

    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        (self.data.at3(0, y, x), self.data.at3(1, y, x))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            data: self.data.scale(k),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            data: self.data.cast(),
        }
    }

    /// Bilinear resize to `h x w` (half-pixel centers) with `u` scaled by the
    /// width ratio and `v` by the height ratio.
    pub fn resize(&self, h: usize, w: usize) -> Self {
        let resized = resize_bilinear(&self.data, h, w);
        let su = T::of(w as f64 / self.width() as f64);
        let sv = T::of(h as f64 / self.height() as f64);
        let mut data = resized;
        data.channel_mut(0).iter_mut().for_each(|x| *x *= su);
        data.channel_mut(1).iter_mut().for_each(|x| *x *= sv);
        Self { data }
    }

    /// Box-average down by an integer factor, dividing magnitudes by it.
    pub fn downsample_area(&self, factor: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} flow not divisible by {factor}"
            )));
        }
        let (ho, wo) = (h / factor, w / factor);
        let norm = T::of(1.0 / (factor * factor * factor) as f64);
        let mut out = Tensor::zeros(&[2, ho, wo]);
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let v = self.data.at3(c, y, x);
                    let o = out.at3(c, y / factor, x / factor);
                    out.set3(c, y / factor, x / factor, o + v);
                }
            }
        }
        Ok(Self {
            data: out.map(|v| v * norm),
        })
    }
}

/// `N` flow fields of equal size stored as a `[2N,H,W]` tensor; field `n`
/// occupies channels `2n` (u) and `2n+1` (v).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFlowField<T> {
    data: Tensor<T>,
}

impl<T: Scalar> MultiFlowField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        match data.shape() {
            [c, h, w] if *c >= 2 && c % 2 == 0 && *h > 0 && *w > 0 => Ok(Self { data }),
            s => shape_err(format!("multi-flow must be [2N,H,W] with N >= 1, got {s:?}")),
        }
    }

    pub fn from_fields(fields: &[FlowField<T>]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidArgument("need at least one flow field".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(fields.len() * 2 * h * w);
        for f in fields {
            if f.height() != h || f.width() != w {
                return shape_err("all flow fields must share dimensions");
            }
            data.extend_from_slice(f.tensor().data());
        }
        Self::new(Tensor::new(vec![2 * fields.len(), h, w], data)?)
    }

    pub fn n_flows(&self) -> usize {
        self.data.shape()[0] / 2
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn field(&self, n: usize) -> FlowField<T> {
        let plane = self.height() * self.width();
        let d = self.data.data()[2 * n * plane..2 * (n + 1) * plane].to_vec();
        FlowField {
            data: Tensor::new(vec![2, self.height(), self.width()], d).expect("plane size"),
        }
    }

    /// Keeps the first `n` fields.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_flows() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} flows",
                self.n_flows()
            )));
        }
        let plane = self.height() * self.width();
        Self::new(Tensor::new(
            vec![2 * n, self.height(), self.width()],
            self.data.data()[..2 * n * plane].to_vec(),
        )?)
    }

    /// Per-pixel mean of the `N` vectors.
    pub fn mean(&self) -> FlowField<T> {
        FlowField {
            data: flow_mean(&self.data).expect("validated multi-flow"),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }
}

/// Which input frame a flow originates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFrame {
    First,
    Second,
}

/// Time factor applied to the flows of `source`: `t` for the first frame,
/// `1 - t` for the second.
pub fn time_factor(t: f64, source: SourceFrame) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0,1]")));
    }
    Ok(match source {
        SourceFrame::First => t,
        SourceFrame::Second => 1.0 - t,
    })
}

/// Scales every sub-motion vector toward time `t`.
pub fn scale_flow<T: Scalar>(f: &MultiFlowField<T>, t: f64, source: SourceFrame) -> Result<MultiFlowField<T>> {
    let k = T::of(time_factor(t, source)?);
    MultiFlowField::new(f.data.scale(k))
}

/// Per-pixel mean over the `N` vectors of a `[2N,H,W]` tensor.
pub fn flow_mean<T: Scalar>(flows: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = flows.chw()?;
    if c < 2 || c % 2 != 0 {
        return shape_err(format!("expected [2N,H,W], got {:?}", flows.shape()));
    }
    let n = c / 2;
    let inv = T::one() / T::of(n as f64);
    let plane = h * w;
    let mut out = Tensor::zeros(&[2, h, w]);
    for k in 0..n {
        for comp in 0..2 {
            let src = &flows.data()[(2 * k + comp) * plane..(2 * k + comp + 1) * plane];
            for (o, &s) in out.channel_mut(comp).iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    Ok(out.map(|v| v * inv))
}

pub fn flow_mean_backward<T: Scalar>(n: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = grad.chw()?;
    let inv = T::one() / T::of(n as f64);
    let mut out = Tensor::zeros(&[2 * n, h, w]);
    for k in 0..n {
        for comp in 0..2 {
            for (o, &g) in out.channel_mut(2 * k + comp).iter_mut().zip(grad.channel(comp)) {
                *o = g * inv;
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of every channel of a `[C,H,W]` tensor (values only).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (c, h, w) = x.chw().expect("resize needs [C,H,W]");
    let sy = h as f64 / ho as f64;
    let sx = w as f64 / wo as f64;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for oy in 0..ho {
        let py = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, y1, fy) = corners(py, h);
        for ox in 0..wo {
            let px = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, x1, fx) = corners(px, w);
            let (fx, fy) = (T::of(fx), T::of(fy));
            for ch in 0..c {
                let v = (T::one() - fy) * ((T::one() - fx) * x.at3(ch, y0, x0) + fx * x.at3(ch, y0, x1))
                    + fy * ((T::one() - fx) * x.at3(ch, y1, x0) + fx * x.at3(ch, y1, x1));
                out.set3(ch, oy, ox, v);
            }
        }
    }
    out
}

/// Integer corners and fraction of a coordinate already clamped to
/// `[0, len-1]`.
#[inline]
fn corners(p: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (p.floor() as usize).min(len - 2);
    (i0, i0 + 1, p - i0 as f64)
}

#[inline]
fn corners_t<T: Scalar>(p: T, len: usize) -> (usize, usize, T) {
    if len == 1 {
        return (0, 0, T::zero());
    }
    let i0 = (p.floor().to_usize().unwrap_or(0)).min(len - 2);
    (i0, i0 + 1, p - T::of(i0 as f64))
}

fn check_flow_for<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if flow.shape() != [2, h, w] {
        return shape_err(format!(
            "flow {:?} does not match input {:?}",
            flow.shape(),
            x.shape()
        ));
    }
    Ok((c, h, w))
}

/// `out(c, y, x) = x(c, y + v, x + u)`, bilinearly sampled with the sample
/// position clamped to the frame.
pub fn backward_warp<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_flow_for(x, flow)?;
    let (u, v) = (flow.channel(0), flow.channel(1));
    let xmax = T::of((w - 1) as f64);
    let ymax = T::of((h - 1) as f64);
    let mut out = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    par::for_each_chunk_mut(out.data_mut(), h * w, |ch, plane| {
        let src = &xd[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xi in 0..w {
                let i = y * w + xi;
                let px = (T::of(xi as f64) + u[i]).max(T::zero()).min(xmax);
                let py = (T::of(y as f64) + v[i]).max(T::zero()).min(ymax);
                let (x0, x1, fx) = corners_t(px, w);
                let (y0, y1, fy) = corners_t(py, h);
                let one = T::one();
                plane[i] = (one - fy) * ((one - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((one - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
    });
    Ok(out)
}

/// Gradients of [`backward_warp`] w.r.t. the sampled tensor and the flow.
/// Clamped coordinates get zero flow gradient along the clamped axis.
pub fn backward_warp_backward<T: Scalar>(
    x: &Tensor<T>,
    flow: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = check_flow_for(x, flow)?;
    x.expect_same_shape(grad, "backward_warp grad")?;
    let (u, v) = (flow.channel(0), flow.channel(1));
    let xmax = T::of((w - 1) as f64);
    let ymax = T::of((h - 1) as f64);
    let one = T::one();

    struct Sample<T> {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        fx: T,
        fy: T,
        dx: bool,
        dy: bool,
    }
    let samples: Vec<Sample<T>> = (0..h * w)
        .map(|i| {
            let (y, xi) = (i / w, i % w);
            let rx = T::of(xi as f64) + u[i];
            let ry = T::of(y as f64) + v[i];
            let px = rx.max(T::zero()).min(xmax);
            let py = ry.max(T::zero()).min(ymax);
            let (x0, x1, fx) = corners_t(px, w);
            let (y0, y1, fy) = corners_t(py, h);
            Sample {
                x0,
                x1,
                y0,
                y1,
                fx,
                fy,
                dx: rx > T::zero() && rx < xmax,
                dy: ry > T::zero() && ry < ymax,
            }
        })
        .collect();

    let mut gx = Tensor::zeros(&[c, h, w]);
    let gd = grad.data();
    par::for_each_chunk_mut(gx.data_mut(), h * w, |ch, plane| {
        let g = &gd[ch * h * w..(ch + 1) * h * w];
        for (i, s) in samples.iter().enumerate() {
            let gi = g[i];
            plane[s.y0 * w + s.x0] += gi * (one - s.fx) * (one - s.fy);
            plane[s.y0 * w + s.x1] += gi * s.fx * (one - s.fy);
            plane[s.y1 * w + s.x0] += gi * (one - s.fx) * s.fy;
            plane[s.y1 * w + s.x1] += gi * s.fx * s.fy;
        }
    });

    let mut gf = Tensor::zeros(&[2, h, w]);
    let xd = x.data();
    for (i, s) in samples.iter().enumerate() {
        let (mut gu, mut gv) = (T::zero(), T::zero());
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let g = gd[ch * h * w + i];
            let (a, b) = (src[s.y0 * w + s.x0], src[s.y0 * w + s.x1]);
            let (cc, d) = (src[s.y1 * w + s.x0], src[s.y1 * w + s.x1]);
            if s.dx {
                gu += g * ((one - s.fy) * (b - a) + s.fy * (d - cc));
            }
            if s.dy {
                gv += g * ((one - s.fx) * (cc - a) + s.fx * (d - b));
            }
        }
        gf.data_mut()[i] = gu;
        gf.data_mut()[h * w + i] = gv;
    }
    Ok((gx, gf))
}

/// Bilinear scatter targets of one source pixel: the four integer corners and
/// their coefficients, which sum to one before border clipping.
#[inline]
pub fn scatter_coefficients<T: Scalar>(px: T, py: T) -> ([(i64, i64); 4], [T; 4]) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let one = T::one();
    let (xi, yi) = (x0.to_i64().unwrap_or(i64::MIN / 2), y0.to_i64().unwrap_or(i64::MIN / 2));
    (
        [(xi, yi), (xi + 1, yi), (xi, yi + 1), (xi + 1, yi + 1)],
        [
            (one - fx) * (one - fy),
            fx * (one - fy),
            (one - fx) * fy,
            fx * fy,
        ],
    )
}

fn check_splat_inputs<T: Scalar>(
    colors: &Tensor<T>,
    weights: &Tensor<T>,
    flow: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = check_flow_for(colors, flow)?;
    if weights.len() != h * w || !(weights.rank() == 2 || weights.rank() == 3) {
        return shape_err(format!(
            "splat weights {:?} do not match {h}x{w}",
            weights.shape()
        ));
    }
    Ok((c, h, w))
}

/// One tile's contribution: target rows `row0..row0+rows` of a
/// `[C+1, rows, W]` buffer plus per-pixel maximum weight.
struct Partial<T> {
    row0: usize,
    rows: usize,
    sums: Vec<T>,
    max_w: Vec<T>,
}

/// Forward-splats `colors` with per-pixel `weights` along `flow` and returns
/// a `[C+1,H,W]` tensor: weighted color sums followed by the weight sum.
/// Contributions landing outside the frame are dropped.
pub fn splat_sums<T: Scalar>(colors: &Tensor<T>, weights: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_splat_inputs(colors, weights, flow)?;
    let mut out = Tensor::zeros(&[c + 1, h, w]);
    let mut max_w = vec![T::zero(); h * w];
    splat_into(colors, weights, flow, out.data_mut(), &mut max_w, c, h, w);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn splat_into<T: Scalar>(
    colors: &Tensor<T>,
    weights: &Tensor<T>,
    flow: &Tensor<T>,
    sums: &mut [T],
    max_w: &mut [T],
    c: usize,
    h: usize,
    w: usize,
) {
    let (u, v) = (flow.channel(0), flow.channel(1));
    let wd = weights.data();
    let cd = colors.data();
    let plane = h * w;
    let tiles = h.div_ceil(SPLAT_TILE_ROWS);
    let partials: Vec<Option<Partial<T>>> = par::map_range(tiles, |t| {
        let r0 = t * SPLAT_TILE_ROWS;
        let r1 = (r0 + SPLAT_TILE_ROWS).min(h);
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for y in r0..r1 {
            for x in 0..w {
                let py = (T::of(y as f64) + v[y * w + x]).floor().to_i64().unwrap_or(0);
                lo = lo.min(py);
                hi = hi.max(py + 1);
            }
        }
        let lo = lo.max(0);
        let hi = hi.min(h as i64 - 1);
        if lo > hi {
            return None;
        }
        let (row0, rows) = (lo as usize, (hi - lo + 1) as usize);
        let mut p = Partial {
            row0,
            rows,
            sums: vec![T::zero(); (c + 1) * rows * w],
            max_w: vec![T::zero(); rows * w],
        };
        let pplane = rows * w;
        for y in r0..r1 {
            for x in 0..w {
                let i = y * w + x;
                let wt = wd[i];
                let (targets, coef) = scatter_coefficients(T::of(x as f64) + u[i], T::of(y as f64) + v[i]);
                for (&(tx, ty), &a) in targets.iter().zip(&coef) {
                    if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 || a == T::zero() {
                        continue;
                    }
                    let j = (ty as usize - row0) * w + tx as usize;
                    let aw = a * wt;
                    for ch in 0..c {
                        p.sums[ch * pplane + j] += aw * cd[ch * plane + i];
                    }
                    p.sums[c * pplane + j] += aw;
                    if aw > p.max_w[j] {
                        p.max_w[j] = aw;
                    }
                }
            }
        }
        Some(p)
    });
    for p in partials.into_iter().flatten() {
        let pplane = p.rows * w;
        let off = p.row0 * w;
        for ch in 0..=c {
            let dst = &mut sums[ch * plane + off..ch * plane + off + pplane];
            for (d, &s) in dst.iter_mut().zip(&p.sums[ch * pplane..(ch + 1) * pplane]) {
                *d += s;
            }
        }
        for (d, &s) in max_w[off..off + pplane].iter_mut().zip(&p.max_w) {
            if s > *d {
                *d = s;
            }
        }
    }
}

/// Splats into an existing accumulator after validating weights and flow.
pub fn splat_forward<T: Scalar>(
    colors: &Tensor<T>,
    weights: &Tensor<T>,
    flow: &FlowField<T>,
    acc: &mut SplatAccumulator<T>,
) -> Result<()> {
    let (c, h, w) = check_splat_inputs(colors, weights, flow.tensor())?;
    if acc.channels() != c || acc.height() != h || acc.width() != w {
        return shape_err("accumulator does not match splat input");
    }
    if !flow.tensor().all_finite() {
        return Err(Error::NonFinite("splat flow".into()));
    }
    if weights.data().iter().any(|&x| !x.is_finite()) {
        return Err(Error::NonFinite("splat weights".into()));
    }
    if weights.data().iter().any(|&x| x < T::zero()) {
        return Err(Error::InvalidArgument("splat weights must be non-negative".into()));
    }
    let (sums, max_w) = acc.buffers_mut();
    splat_into(colors, weights, flow.tensor(), sums, max_w, c, h, w);
    Ok(())
}

/// Gradients of [`splat_sums`] w.r.t. colors, weights and flow, given the
/// gradient of its `[C+1,H,W]` output.
pub fn splat_backward<T: Scalar>(
    colors: &Tensor<T>,
    weights: &Tensor<T>,
    flow: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = check_splat_inputs(colors, weights, flow)?;
    if grad.shape() != [c + 1, h, w] {
        return shape_err("splat grad shape mismatch");
    }
    let plane = h * w;
    let (u, v) = (flow.channel(0), flow.channel(1));
    let (cd, wd, gd) = (colors.data(), weights.data(), grad.data());
    let one = T::one();

    // Per source pixel: C color grads, weight grad, (gu, gv).
    let stride = c + 3;
    let mut rows = vec![T::zero(); plane * stride];
    par::for_each_chunk_mut(&mut rows, w * stride, |y, out| {
        for x in 0..w {
            let i = y * w + x;
            let px = T::of(x as f64) + u[i];
            let py = T::of(y as f64) + v[i];
            let fx = px - px.floor();
            let fy = py - py.floor();
            let (targets, coef) = scatter_coefficients(px, py);
            let dfx = [-(one - fy), one - fy, -fy, fy];
            let dfy = [-(one - fx), -fx, one - fx, fx];
            let o = &mut out[x * stride..(x + 1) * stride];
            let wt = wd[i];
            for k in 0..4 {
                let (tx, ty) = targets[k];
                if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                    continue;
                }
                let j = ty as usize * w + tx as usize;
                // g_a = d loss / d coefficient, divided by the weight.
                let mut s = gd[c * plane + j];
                for ch in 0..c {
                    let gn = gd[ch * plane + j];
                    o[ch] += coef[k] * wt * gn;
                    s += cd[ch * plane + i] * gn;
                }
                o[c] += coef[k] * s;
                o[c + 1] += wt * s * dfx[k];
                o[c + 2] += wt * s * dfy[k];
            }
        }
    });
    let mut gc = Tensor::zeros(&[c, h, w]);
    let mut gw = Tensor::zeros(weights.shape());
    let mut gf = Tensor::zeros(&[2, h, w]);
    for i in 0..plane {
        let o = &rows[i * stride..(i + 1) * stride];
        for ch in 0..c {
            gc.data_mut()[ch * plane + i] = o[ch];
        }
        gw.data_mut()[i] = o[c];
        gf.data_mut()[i] = o[c + 1];
        gf.data_mut()[plane + i] = o[c + 2];
    }
    Ok((gc, gw, gf))
}

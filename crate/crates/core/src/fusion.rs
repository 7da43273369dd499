//! Fusion of splatted pixels.
//!
//! Each source pixel `i` carries the weight `exp(b_i * s_i * alpha) * r_i`
//! where `r` is the temporal relevance of its frame, `b <= 0` the brightness
//! consistency and `s` the learned reliability. The output at a location is
//! the weighted mean of everything that landed there; locations that received
//! no weight are holes.

use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{self, FlowField};

/// Denominator threshold at or below which an output pixel is a hole.
pub const HOLE_EPS: f64 = 1e-8;

/// Upper bound on the fusion exponent `b * s * alpha`. It only matters for
/// pathological reliability scores and keeps the sums finite in `f32`.
pub const MAX_EXPONENT: f64 = 40.0;

/// Hole marker color used when hole filling is disabled.
pub const HOLE_SENTINEL: [f32; 3] = [1.0, 0.0, 1.0];

/// Learned per-pixel reliability score `[1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityMap<T>(Tensor<T>);

impl<T: Scalar> ReliabilityMap<T> {
    pub fn new(scores: Tensor<T>) -> Result<Self> {
        match scores.shape() {
            [1, _, _] => {}
            s => return shape_err(format!("reliability map must be [1,H,W], got {s:?}")),
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite("reliability map".into()));
        }
        Ok(Self(scores))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub alpha: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Numerator and denominator of the fusion sum before division.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatAccumulator<T> {
    channels: usize,
    height: usize,
    width: usize,
    /// `[C+1, H, W]`: weighted color sums, then the weight sum.
    sums: Vec<T>,
    max_weight: Vec<T>,
}

impl<T: Scalar> SplatAccumulator<T> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            sums: vec![T::zero(); (channels + 1) * height * width],
            max_weight: vec![T::zero(); height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn numerator(&self) -> &[T] {
        &self.sums[..self.channels * self.height * self.width]
    }

    pub fn denominator(&self) -> &[T] {
        &self.sums[self.channels * self.height * self.width..]
    }

    /// Largest single contribution that landed on each pixel.
    pub fn max_weight(&self) -> &[T] {
        &self.max_weight
    }

    /// The `[C+1,H,W]` sum tensor.
    pub fn sums(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels + 1, self.height, self.width],
            self.sums.clone(),
        )
        .expect("accumulator layout")
    }

    pub(crate) fn buffers_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.sums, &mut self.max_weight)
    }
}

/// `(r0, r1) = (1 - t, t)`.
pub fn temporal_relevance(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::InvalidArgument(format!("time {t} outside [0,1]")));
    }
    Ok((1.0 - t, t))
}

/// `-sum_c |a - b|` per pixel, as a `[1,H,W]` tensor.
pub fn neg_l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_shape(b, "neg_l1")?;
    let (c, h, w) = a.chw()?;
    let mut out = Tensor::zeros(&[1, h, w]);
    for ch in 0..c {
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.channel(ch)).zip(b.channel(ch)) {
            *o -= (x - y).abs();
        }
    }
    Ok(out)
}

pub fn neg_l1_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = a.chw()?;
    if grad.shape() != [1, h, w] {
        return shape_err("neg_l1 grad shape mismatch");
    }
    let mut ga = Tensor::zeros(a.shape());
    for ch in 0..c {
        for (i, (&x, &y)) in a.channel(ch).iter().zip(b.channel(ch)).enumerate() {
            let d = x - y;
            let sgn = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            ga.data_mut()[ch * h * w + i] = -sgn * grad.data()[i];
        }
    }
    let gb = ga.map(|v| -v);
    Ok((ga, gb))
}

/// Brightness consistency of both frames: `b0 = -|I0 - warp(I1, F01)|_1` and
/// `b1 = -|I1 - warp(I0, F10)|_1`, summed over color channels.
pub fn brightness_consistency<T: Scalar>(
    i0: &Tensor<T>,
    i1: &Tensor<T>,
    f01: &FlowField<T>,
    f10: &FlowField<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    i0.expect_same_shape(i1, "brightness_consistency")?;
    let b0 = neg_l1(i0, &warp::backward_warp(i1, f01.tensor())?)?;
    let b1 = neg_l1(i1, &warp::backward_warp(i0, f10.tensor())?)?;
    Ok((b0, b1))
}

/// `exp(min(b * s * alpha, MAX_EXPONENT)) * r` per pixel.
pub fn fusion_weights<T: Scalar>(b: &Tensor<T>, s: &Tensor<T>, alpha: T, r: T) -> Result<Tensor<T>> {
    let cap = T::of(MAX_EXPONENT);
    b.zip_map(s, |b, s| (b * s * alpha).min(cap).exp() * r)
}

/// Gradients of [`fusion_weights`] w.r.t. `b`, `s` and `alpha`, given its
/// output `w`.
pub fn fusion_weights_backward<T: Scalar>(
    b: &Tensor<T>,
    s: &Tensor<T>,
    alpha: T,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let cap = T::of(MAX_EXPONENT);
    let mut gb = Tensor::zeros(b.shape());
    let mut gs = Tensor::zeros(s.shape());
    let mut ga = T::zero();
    for i in 0..b.len() {
        let (bv, sv) = (b.data()[i], s.data()[i]);
        if bv * sv * alpha >= cap {
            continue;
        }
        let gz = grad.data()[i] * w.data()[i];
        gb.data_mut()[i] = gz * sv * alpha;
        gs.data_mut()[i] = gz * bv * alpha;
        ga += gz * bv * sv;
    }
    Ok((gb, gs, ga))
}

/// Divides color sums by weight sums. Returns the `[C,H,W]` image (zero at
/// holes) and the hole mask.
pub fn fuse_sums<T: Scalar>(sums: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    let (c1, h, w) = sums.chw()?;
    if c1 < 2 {
        return shape_err("fuse needs at least one color channel plus weights");
    }
    let c = c1 - 1;
    let eps = T::of(HOLE_EPS);
    let den = sums.channel(c);
    let holes: Vec<bool> = den.iter().map(|&d| d <= eps).collect();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let num = sums.channel(ch);
        for (i, o) in out.channel_mut(ch).iter_mut().enumerate() {
            if !holes[i] {
                *o = num[i] / den[i];
            }
        }
    }
    Ok((out, holes))
}

pub fn fuse_sums_backward<T: Scalar>(sums: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (c1, h, w) = sums.chw()?;
    let c = c1 - 1;
    if grad.shape() != [c, h, w] {
        return shape_err("fuse grad shape mismatch");
    }
    let eps = T::of(HOLE_EPS);
    let plane = h * w;
    let den = sums.channel(c);
    let mut g = Tensor::zeros(sums.shape());
    for i in 0..plane {
        let d = den[i];
        if d <= eps {
            continue;
        }
        let mut gd = T::zero();
        for ch in 0..c {
            let go = grad.data()[ch * plane + i];
            g.data_mut()[ch * plane + i] = go / d;
            gd -= go * sums.data()[ch * plane + i] / (d * d);
        }
        g.data_mut()[c * plane + i] = gd;
    }
    Ok(g)
}

/// Fuses an accumulator into an image and its hole mask.
pub fn fuse<T: Scalar>(acc: &SplatAccumulator<T>) -> (Tensor<T>, Vec<bool>) {
    fuse_sums(&acc.sums()).expect("accumulator layout")
}

pub fn count_holes(holes: &[bool]) -> usize {
    holes.iter().filter(|&&h| h).count()
}

/// Mean hole count over a set of masks.
pub fn mean_holes(masks: &[Vec<bool>]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks.iter().map(|m| count_holes(m) as f64).sum::<f64>() / masks.len() as f64
}

/// Replaces every invalid pixel of a `[C,H,W]` tensor by the value of the
/// nearest valid pixel (4-connected breadth-first order from valid pixels in
/// raster order). Returns `None` if no pixel is valid.
pub fn nearest_valid<T: Scalar>(values: &Tensor<T>, valid: &[bool]) -> Option<Tensor<T>> {
    let (c, h, w) = values.chw().ok()?;
    let mut source: Vec<Option<usize>> = valid.iter().enumerate().map(|(i, &v)| v.then_some(i)).collect();
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| valid[i]).collect();
    if queue.is_empty() {
        return None;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if source[j].is_none() {
                source[j] = source[i];
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    let mut out = values.clone();
    for ch in 0..c {
        let src = values.channel(ch).to_vec();
        for (i, o) in out.channel_mut(ch).iter_mut().enumerate() {
            *o = src[source[i].expect("all pixels reached")];
        }
    }
    Some(out)
}

/// Fills holes of an interpolated frame.
///
/// The 0->1 motion at time `t` is estimated by splatting `F01` from frame 0
/// and `-F10` from frame 1 (weights `1-t` and `t`); holes take the motion of
/// the nearest covered pixel `m` and receive
/// `(1-t) * I0(j - t*m) + t * I1(j + (1-t)*m)` via backward warping.
pub fn fill_holes<T: Scalar>(
    it: &Tensor<T>,
    holes: &[bool],
    i0: &Tensor<T>,
    i1: &Tensor<T>,
    f01: &FlowField<T>,
    f10: &FlowField<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let (c, h, w) = it.chw()?;
    it.expect_same_shape(i0, "fill_holes")?;
    it.expect_same_shape(i1, "fill_holes")?;
    if holes.len() != h * w {
        return shape_err("hole mask size mismatch");
    }
    let (r0, r1) = temporal_relevance(t)?;
    if !holes.iter().any(|&x| x) {
        return Ok(it.clone());
    }

    let mut acc = SplatAccumulator::new(2, h, w);
    let neg_f10 = f10.scale(-T::one());
    warp::splat_forward(
        f01.tensor(),
        &Tensor::full(&[h, w], T::of(r0)),
        &f01.scale(T::of(t)),
        &mut acc,
    )?;
    warp::splat_forward(
        neg_f10.tensor(),
        &Tensor::full(&[h, w], T::of(r1)),
        &f10.scale(T::of(1.0 - t)),
        &mut acc,
    )?;
    let (motion, uncovered) = fuse(&acc);
    let covered: Vec<bool> = uncovered.iter().map(|&u| !u).collect();
    let motion = nearest_valid(&motion, &covered).unwrap_or_else(|| Tensor::zeros(&[2, h, w]));

    let to0 = motion.scale(T::of(-t));
    let to1 = motion.scale(T::of(1.0 - t));
    let from0 = warp::backward_warp(i0, &to0)?;
    let from1 = warp::backward_warp(i1, &to1)?;
    let mut out = it.clone();
    let plane = h * w;
    for ch in 0..c {
        for i in (0..plane).filter(|&i| holes[i]) {
            out.data_mut()[ch * plane + i] =
                T::of(r0) * from0.data()[ch * plane + i] + T::of(r1) * from1.data()[ch * plane + i];
        }
    }
    Ok(out)
}

/// Paints hole pixels with [`HOLE_SENTINEL`].
pub fn mark_holes<T: Scalar>(it: &Tensor<T>, holes: &[bool]) -> Tensor<T> {
    let mut out = it.clone();
    let plane = holes.len();
    for (ch, &col) in HOLE_SENTINEL.iter().enumerate().take(3) {
        for i in (0..plane).filter(|&i| holes[i]) {
            out.data_mut()[ch * plane + i] = T::of(col as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::splat_forward;

    #[test]
    fn relevance_values() {
        assert_eq!(temporal_relevance(0.5).unwrap(), (0.5, 0.5));
        assert_eq!(temporal_relevance(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(temporal_relevance(0.125).unwrap(), (0.875, 0.125));
        assert!(temporal_relevance(1.01).is_err());
    }

    #[test]
    fn brightness_identical_and_constant() {
        let img = Tensor::<f32>::from_fn(&[3, 4, 4], |i| (i as f32 * 0.13).fract());
        let z = FlowField::zeros(4, 4);
        let (b0, b1) = brightness_consistency(&img, &img, &z, &z).unwrap();
        assert!(b0.data().iter().chain(b1.data()).all(|&v| v == 0.0));

        let a = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        let b = Tensor::<f32>::full(&[3, 4, 4], 0.25);
        let (b0, b1) = brightness_consistency(&a, &b, &z, &z).unwrap();
        assert!(b0.data().iter().all(|&v| v == -0.75));
        assert!(b1.data().iter().all(|&v| v == -0.75));
    }

    fn two_contributors(c1: [f64; 3], c2: [f64; 3], w1: f64, w2: f64) -> Tensor<f64> {
        // Two source pixels in a 1x2 frame, both splatted onto pixel (0,0).
        let colors = Tensor::new(vec![3, 1, 2], vec![c1[0], c2[0], c1[1], c2[1], c1[2], c2[2]]).unwrap();
        let weights = Tensor::new(vec![1, 2], vec![w1, w2]).unwrap();
        let flow = FlowField::new(Tensor::new(vec![2, 1, 2], vec![0.0, -1.0, 0.0, 0.0]).unwrap()).unwrap();
        let mut acc = SplatAccumulator::new(3, 1, 2);
        splat_forward(&colors, &weights, &flow, &mut acc).unwrap();
        let (img, holes) = fuse(&acc);
        assert_eq!(holes, vec![false, true]);
        img
    }

    #[test]
    fn fusion_weighted_mean() {
        let one = two_contributors([0.2, 0.4, 0.6], [0.0; 3], 0.7, 0.0);
        assert!((one.at3(0, 0, 0) - 0.2).abs() < 1e-15);
        assert!((one.at3(2, 0, 0) - 0.6).abs() < 1e-15);

        let avg = two_contributors([0.2, 0.4, 0.6], [0.6, 0.0, 1.0], 1.0, 1.0);
        assert!((avg.at3(0, 0, 0) - 0.4).abs() < 1e-15);
        assert!((avg.at3(1, 0, 0) - 0.2).abs() < 1e-15);

        // r equal, s = 1, alpha = 1, b = -1 vs 0.
        let b = Tensor::new(vec![1, 1, 2], vec![-1.0, 0.0]).unwrap();
        let s = Tensor::full(&[1, 1, 2], 1.0);
        let w = fusion_weights(&b, &s, 1.0, 0.5).unwrap();
        let (c1, c2) = ([0.9, 0.1, 0.3], [0.2, 0.8, 0.5]);
        let img = two_contributors(c1, c2, w.data()[0], w.data()[1]);
        let e = (-1.0f64).exp();
        for ch in 0..3 {
            let want = (e * c1[ch] + c2[ch]) / (e + 1.0);
            assert!((img.at3(ch, 0, 0) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn fill_identity_and_uniform() {
        let img = Tensor::<f32>::full(&[3, 5, 5], 0.3);
        let z = FlowField::zeros(5, 5);
        let out = fill_holes(&img, &[false; 25], &img, &img, &z, &z, 0.5).unwrap();
        assert_eq!(out, img);

        let c = Tensor::<f32>::full(&[3, 5, 5], 0.6);
        let out = fill_holes(&Tensor::zeros(&[3, 5, 5]), &[true; 25], &c, &c, &z, &z, 0.3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn nearest_valid_propagates() {
        let v = Tensor::<f32>::from_fn(&[1, 1, 5], |i| i as f32);
        let out = nearest_valid(&v, &[false, true, false, false, true]).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 4.0, 4.0]);
        assert!(nearest_valid(&v, &[false; 5]).is_none());
    }

    #[test]
    fn hole_counting() {
        assert_eq!(count_holes(&[true, false, true]), 2);
        assert_eq!(mean_holes(&[vec![true, true], vec![false, false]]), 1.0);
    }
}

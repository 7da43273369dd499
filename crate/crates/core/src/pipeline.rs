//! End-to-end interpolation.
//!
//! Work per input pair (coarse flow, network, brightness consistency) runs
//! once; each requested time step then only scales the flows, splats both
//! frames, fuses and optionally fills holes.

use std::time::Instant;

use serde::Serialize;

use crate::coarse_flow::{estimate_coarse_flow, CoarseFlowConfig};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{self, SplatAccumulator};
use crate::metrics;
use crate::mrn::{Mrn, MrnOutput, MrnVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{self, FlowField};

/// Flops charged per output pixel per splat contributor for scale, splat and
/// fuse.
pub const FLOPS_PER_CONTRIBUTOR: u64 = 10;

#[derive(Debug, Clone)]
pub enum FlowSource {
    /// Flows from an external estimator at any resolution; they are resized
    /// to the input size.
    External { f01: FlowField<f32>, f10: FlowField<f32> },
    Estimate(CoarseFlowConfig),
}

#[derive(Debug, Clone)]
pub struct InterpolationRequest<'a> {
    pub i0: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub times: Vec<f64>,
    pub flow: FlowSource,
    pub model: &'a Mrn<f32>,
    pub fill_holes: bool,
    /// Use only the first `n` sub-flows of each direction.
    pub n_flows: Option<usize>,
}

impl InterpolationRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        let (c, _, _) = self.i0.chw()?;
        if c != 3 {
            return shape_err(format!("frames must have 3 channels, got {c}"));
        }
        self.i0.expect_same_shape(&self.i1, "input frames")?;
        validate_times(&self.times)?;
        if let Some(n) = self.n_flows {
            if n == 0 || n > self.model.config.n_flows {
                return Err(Error::InvalidArgument(format!(
                    "n_flows {n} outside 1..={}",
                    self.model.config.n_flows
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("no time steps requested".into()));
    }
    for (i, &t) in times.iter().enumerate() {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidArgument(format!("time {t} outside (0, 1)")));
        }
        if i > 0 && t <= times[i - 1] {
            return Err(Error::InvalidArgument("times must be strictly increasing".into()));
        }
    }
    Ok(())
}

/// Share/unshare accounting of one [`interpolate`] call.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ComputeLedger {
    pub shared_flops: u64,
    pub unshared_flops: u64,
    pub unshared_flops_per_step: Vec<u64>,
    pub mrn_invocations: u32,
    pub coarse_flow_ms: f64,
    pub mrn_ms: f64,
    pub consistency_ms: f64,
    pub splat_ms: f64,
    pub fuse_ms: f64,
    pub fill_ms: f64,
}

impl ComputeLedger {
    pub fn shared_ms(&self) -> f64 {
        self.coarse_flow_ms + self.mrn_ms + self.consistency_ms
    }

    pub fn unshared_ms(&self) -> f64 {
        self.splat_ms + self.fuse_ms + self.fill_ms
    }

    fn merge_step(&mut self, step: &ComputeLedger) {
        self.unshared_flops += step.unshared_flops;
        self.unshared_flops_per_step.push(step.unshared_flops);
        self.splat_ms += step.splat_ms;
        self.fuse_ms += step.fuse_ms;
        self.fill_ms += step.fill_ms;
    }
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub frames: Vec<Tensor<f32>>,
    /// Hole masks before filling, at the input resolution.
    pub holes: Vec<Vec<bool>>,
    pub ledger: ComputeLedger,
}

/// Replicate padding amounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Splits the padding to the next multiple of `m` evenly, the extra pixel
    /// going to the bottom/right.
    pub fn to_multiple(h: usize, w: usize, m: usize) -> Self {
        Self::to_size(h, w, h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Pads `h x w` up to `ho x wo`, split as in [`Padding::to_multiple`].
    pub fn to_size(h: usize, w: usize, ho: usize, wo: usize) -> Self {
        let ph = ho.saturating_sub(h);
        let pw = wo.saturating_sub(w);
        Self {
            top: ph / 2,
            bottom: ph - ph / 2,
            left: pw / 2,
            right: pw - pw / 2,
        }
    }
}

pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, p: Padding) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for y in 0..ho {
            let sy = y.saturating_sub(p.top).min(h - 1);
            for xx in 0..wo {
                let sx = xx.saturating_sub(p.left).min(w - 1);
                out.set3(ch, y, xx, x.at3(ch, sy, sx));
            }
        }
    }
    Ok(out)
}

pub fn crop<T: Scalar>(x: &Tensor<T>, p: Padding) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if p.top + p.bottom >= h || p.left + p.right >= w {
        return shape_err("crop removes the whole image");
    }
    let (ho, wo) = (h - p.top - p.bottom, w - p.left - p.right);
    Ok(Tensor::from_fn(&[c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let y = (i / wo) % ho;
        let xx = i % wo;
        x.at3(ch, y + p.top, xx + p.left)
    }))
}

fn crop_mask(mask: &[bool], h: usize, w: usize, p: Padding) -> Vec<bool> {
    let (ho, wo) = (h - p.top - p.bottom, w - p.left - p.right);
    (0..ho * wo).map(|i| mask[(i / wo + p.top) * w + i % wo + p.left]).collect()
}

/// Per-pair quantities reused by every time step.
#[derive(Debug, Clone)]
pub struct SharedState {
    pub i0: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub mrn: MrnOutput<f32>,
    pub b0: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub alpha: f32,
}

impl SharedState {
    pub fn new(i0: Tensor<f32>, i1: Tensor<f32>, mrn: MrnOutput<f32>, alpha: f32) -> Result<Self> {
        let (b0, b1) = fusion::brightness_consistency(&i0, &i1, &mrn.flows01.mean(), &mrn.flows10.mean())?;
        Ok(Self { i0, i1, mrn, b0, b1, alpha })
    }

    pub fn truncated(&self, n: usize) -> Result<Self> {
        let mrn = MrnOutput {
            flows01: self.mrn.flows01.truncate(n)?,
            flows10: self.mrn.flows10.truncate(n)?,
            ..self.mrn.clone()
        };
        Self::new(self.i0.clone(), self.i1.clone(), mrn, self.alpha)
    }
}

/// Splats both frames with all sub-flows scaled to `t` and fuses. Returns the
/// unfilled frame, its hole mask and the step's step ledger.
pub fn synthesize(state: &SharedState, t: f64) -> Result<(Tensor<f32>, Vec<bool>, ComputeLedger)> {
    let (r0, r1) = fusion::temporal_relevance(t)?;
    let (_, h, w) = state.i0.chw()?;
    let n = state.mrn.flows01.n_flows();
    let start = Instant::now();
    let w0 = fusion::fusion_weights(&state.b0, state.mrn.s0.tensor(), state.alpha, r0 as f32)?;
    let w1 = fusion::fusion_weights(&state.b1, state.mrn.s1.tensor(), state.alpha, r1 as f32)?;
    let mut acc = SplatAccumulator::new(3, h, w);
    for k in 0..n {
        let f = state.mrn.flows01.field(k).scale(t as f32);
        warp::splat_forward(&state.i0, &w0, &f, &mut acc)?;
    }
    for k in 0..n {
        let f = state.mrn.flows10.field(k).scale((1.0 - t) as f32);
        warp::splat_forward(&state.i1, &w1, &f, &mut acc)?;
    }
    let splat_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let (img, holes) = fusion::fuse(&acc);
    let fuse_ms = start.elapsed().as_secs_f64() * 1e3;
    let ledger = ComputeLedger {
        unshared_flops: FLOPS_PER_CONTRIBUTOR * 2 * n as u64 * (h * w) as u64,
        splat_ms,
        fuse_ms,
        ..Default::default()
    };
    Ok((img, holes, ledger))
}

/// Many-to-one reference: one flow per pixel per frame.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_m2o(
    i0: &Tensor<f32>,
    i1: &Tensor<f32>,
    f01: &FlowField<f32>,
    f10: &FlowField<f32>,
    s0: &Tensor<f32>,
    s1: &Tensor<f32>,
    alpha: f32,
    t: f64,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    let (r0, r1) = fusion::temporal_relevance(t)?;
    let (_, h, w) = i0.chw()?;
    let (b0, b1) = fusion::brightness_consistency(i0, i1, f01, f10)?;
    let w0 = fusion::fusion_weights(&b0, s0, alpha, r0 as f32)?;
    let w1 = fusion::fusion_weights(&b1, s1, alpha, r1 as f32)?;
    let mut acc = SplatAccumulator::new(3, h, w);
    warp::splat_forward(i0, &w0, &f01.scale(t as f32), &mut acc)?;
    warp::splat_forward(i1, &w1, &f10.scale((1.0 - t) as f32), &mut acc)?;
    Ok(fusion::fuse(&acc))
}

/// Coarse flows for padded inputs at `1/R` resolution.
pub fn coarse_flows(
    source: &FlowSource,
    i0: &Tensor<f32>,
    i1: &Tensor<f32>,
    pad: Padding,
    downscale: usize,
) -> Result<(FlowField<f32>, FlowField<f32>)> {
    match source {
        FlowSource::External { f01, f10 } => {
            let (_, h, w) = i0.chw()?;
            let prep = |f: &FlowField<f32>| -> Result<FlowField<f32>> {
                f.validate()?;
                let full = if f.height() == h && f.width() == w { f.clone() } else { f.resize(h, w) };
                let padded = FlowField::new(pad_replicate(full.tensor(), pad)?)?;
                padded.downsample_area(downscale)
            };
            Ok((prep(f01)?, prep(f10)?))
        }
        FlowSource::Estimate(cfg) => {
            let cfg = CoarseFlowConfig {
                downscale,
                ..cfg.clone()
            };
            estimate_coarse_flow(&pad_replicate(i0, pad)?, &pad_replicate(i1, pad)?, &cfg)
        }
    }
}

/// Pads the inputs, computes coarse flow and runs the network once.
pub fn prepare(req: &InterpolationRequest, ledger: &mut ComputeLedger) -> Result<(SharedState, Padding)> {
    req.validate()?;
    let cfg = &req.model.config;
    let (_, h, w) = req.i0.chw()?;
    let pad = Padding::to_size(h, w, cfg.padded_extent(h), cfg.padded_extent(w));
    let p0 = pad_replicate(&req.i0, pad)?;
    let p1 = pad_replicate(&req.i1, pad)?;

    let start = Instant::now();
    let (c01, c10) = coarse_flows(&req.flow, &req.i0, &req.i1, pad, cfg.flow_downscale)?;
    ledger.coarse_flow_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    let (mut out, flops) = req.model.forward(&p0, &p1, &c01, &c10)?;
    ledger.mrn_ms = start.elapsed().as_secs_f64() * 1e3;
    ledger.mrn_invocations += 1;
    ledger.shared_flops += flops;
    if let Some(n) = req.n_flows {
        out.flows01 = out.flows01.truncate(n)?;
        out.flows10 = out.flows10.truncate(n)?;
    }

    let start = Instant::now();
    let state = SharedState::new(p0, p1, out, req.model.alpha())?;
    ledger.consistency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((state, pad))
}

pub fn interpolate(req: &InterpolationRequest) -> Result<Interpolation> {
    let mut ledger = ComputeLedger::default();
    let (state, pad) = prepare(req, &mut ledger)?;
    let (_, hp, wp) = state.i0.chw()?;
    let mut frames = Vec::with_capacity(req.times.len());
    let mut masks = Vec::with_capacity(req.times.len());
    for &t in &req.times {
        let (img, holes, mut step) = synthesize(&state, t)?;
        let start = Instant::now();
        let img = if req.fill_holes {
            fusion::fill_holes(
                &img,
                &holes,
                &state.i0,
                &state.i1,
                &state.mrn.flows01.mean(),
                &state.mrn.flows10.mean(),
                t,
            )?
        } else {
            fusion::mark_holes(&img, &holes)
        };
        step.fill_ms = start.elapsed().as_secs_f64() * 1e3;
        ledger.merge_step(&step);
        frames.push(crop(&img, pad)?);
        masks.push(crop_mask(&holes, hp, wp, pad));
    }
    Ok(Interpolation {
        frames,
        holes: masks,
        ledger,
    })
}

/// One evaluation pair for [`sweep_n_flows`].
#[derive(Debug, Clone)]
pub struct SweepPair {
    pub i0: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub gt: Option<Tensor<f32>>,
    pub t: f64,
    pub flow: FlowSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_flows: usize,
    pub mean_holes: f64,
    /// Mean PSNR of the unfilled frames against ground truth, when given.
    pub psnr: Option<f64>,
}

/// Runs every pair with the first `n` heads of `model` for each `n`.
pub fn sweep_n_flows(model: &Mrn<f32>, pairs: &[SweepPair], n_list: &[usize]) -> Result<Vec<SweepRow>> {
    let mut states = Vec::with_capacity(pairs.len());
    for p in pairs {
        let req = InterpolationRequest {
            i0: p.i0.clone(),
            i1: p.i1.clone(),
            times: vec![p.t],
            flow: p.flow.clone(),
            model,
            fill_holes: false,
            n_flows: None,
        };
        let mut ledger = ComputeLedger::default();
        states.push(prepare(&req, &mut ledger)?);
    }
    n_list
        .iter()
        .map(|&n| {
            let mut masks = Vec::new();
            let mut psnrs = Vec::new();
            for (p, (state, pad)) in pairs.iter().zip(&states) {
                let st = state.truncated(n)?;
                let (img, holes, _) = synthesize(&st, p.t)?;
                let (_, hp, wp) = st.i0.chw()?;
                masks.push(crop_mask(&holes, hp, wp, *pad));
                if let Some(gt) = &p.gt {
                    psnrs.push(metrics::psnr(&crop(&img, *pad)?, gt)?);
                }
            }
            Ok(SweepRow {
                n_flows: n,
                mean_holes: fusion::mean_holes(&masks),
                psnr: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
            })
        })
        .collect()
}

/// Differentiable splat and fuse of network outputs at time `t`. Holes come
/// out as zero.
pub fn render_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    i0: Var,
    i1: Var,
    out: MrnVars,
    alpha: Var,
    t: f64,
) -> Result<(Var, Vec<bool>)> {
    let (r0, r1) = fusion::temporal_relevance(t)?;
    let n = tape.value(out.flows01).shape()[0] / 2;
    let m01 = tape.flow_mean(out.flows01)?;
    let m10 = tape.flow_mean(out.flows10)?;
    let w01 = tape.backward_warp(i1, m01)?;
    let w10 = tape.backward_warp(i0, m10)?;
    let b0 = tape.neg_l1(i0, w01)?;
    let b1 = tape.neg_l1(i1, w10)?;
    let wt0 = tape.fusion_weight(b0, out.s0, alpha, T::of(r0))?;
    let wt1 = tape.fusion_weight(b1, out.s1, alpha, T::of(r1))?;
    let mut sums: Option<Var> = None;
    for (img, wt, flows, k) in [(i0, wt0, out.flows01, t), (i1, wt1, out.flows10, 1.0 - t)] {
        // The weight map is [1,H,W]; splat takes [H,W].
        let (_, h, w) = tape.value(wt).chw()?;
        let wt = tape.reshape(wt, &[h, w])?;
        for j in 0..n {
            let f = tape.slice(flows, 2 * j, 2)?;
            let f = tape.scale(f, T::of(k));
            let s = tape.splat(img, wt, f)?;
            sums = Some(match sums {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    tape.fuse(sums.expect("at least one sub-flow"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_crop_round_trip() {
        let x = Tensor::from_fn(&[3, 5, 7], |i| i as f32);
        let p = Padding::to_multiple(5, 7, 4);
        assert_eq!(p, Padding { top: 1, bottom: 2, left: 0, right: 1 });
        let padded = pad_replicate(&x, p).unwrap();
        assert_eq!(padded.shape(), &[3, 8, 8]);
        assert_eq!(padded.at3(0, 0, 0), x.at3(0, 0, 0));
        assert_eq!(padded.at3(2, 7, 7), x.at3(2, 4, 6));
        assert_eq!(crop(&padded, p).unwrap(), x);
    }

    #[test]
    fn time_validation() {
        assert!(validate_times(&[0.25, 0.5]).is_ok());
        assert!(validate_times(&[]).is_err());
        assert!(validate_times(&[0.5, 0.25]).is_err());
        assert!(validate_times(&[0.0]).is_err());
        assert!(validate_times(&[1.0]).is_err());
    }
}

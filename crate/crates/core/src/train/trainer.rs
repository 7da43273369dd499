//! Toy end-to-end training of the network and the fusion scale.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coarse_flow::{estimate_coarse_flow, CoarseFlowConfig};
use crate::error::{Error, Result};
use crate::mrn::{mrn_forward, Mrn, MrnConfig};
use crate::par;
use crate::pipeline::render_on_tape;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::adam::{cosine_lr, Adam, AdamConfig, StepOutcome};
use crate::train::loss::CHARBONNIER_EPS;
use crate::train::synthetic::{SceneKind, SceneRanges, SyntheticScene, Triplet};
use crate::warp::FlowField;

/// Where training and evaluation take their coarse flow from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseSource {
    /// The built-in block matcher.
    Estimated,
    /// Area-downsampled ground truth.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to 0 on a cosine.
    pub lr: f64,
    pub weight_decay: f64,
    /// Batch gradients with a larger global L2 norm are rescaled to it; 0
    /// disables clipping.
    pub grad_clip: f64,
    pub crop: usize,
    pub t: f64,
    pub spatial_flip: bool,
    pub temporal_flip: bool,
    pub color_jitter: bool,
    pub kinds: Vec<SceneKind>,
    pub ranges: SceneRanges,
    pub coarse: CoarseSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 1e-4,
            grad_clip: 1e-2,
            crop: 32,
            t: 0.5,
            spatial_flip: true,
            temporal_flip: true,
            color_jitter: true,
            kinds: vec![SceneKind::Translation, SceneKind::Zoom],
            ranges: SceneRanges::default(),
            coarse: CoarseSource::Estimated,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &MrnConfig) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("iterations and batch size must be positive".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument("no scene kinds selected".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidArgument("invalid learning rate, weight decay or gradient clip".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidArgument(format!("t = {} outside [0, 1]", self.t)));
        }
        model.check_input(self.crop, self.crop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub charbonnier: f64,
    pub census: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mrn<f32>,
    pub losses: Vec<LossRecord>,
    pub skipped_steps: usize,
}

/// Independent stream per `(seed, iteration, sample)`.
pub fn sample_rng(seed: u64, iteration: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 20) | sample as u64);
    rng
}

/// One augmented training triplet.
pub fn training_sample(cfg: &TrainConfig, iteration: usize, sample: usize) -> Result<Triplet> {
    let mut rng = sample_rng(cfg.seed, iteration, sample);
    let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
    let scene = SyntheticScene::random(&mut rng, kind, &cfg.ranges, cfg.crop, cfg.crop);
    let mut tr = scene.triplet(cfg.crop, cfg.crop, cfg.t)?;
    if cfg.spatial_flip && rng.gen_bool(0.5) {
        tr = tr.flip_horizontal();
    }
    if cfg.temporal_flip && rng.gen_bool(0.5) {
        tr = tr.reverse_time();
    }
    if cfg.color_jitter {
        let g = [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
        tr = tr.color_scaled(g);
    }
    Ok(tr)
}

/// Held-out triplets drawn from a seed disjoint from training.
pub fn held_out(cfg: &TrainConfig, kinds: &[SceneKind], count: usize, seed: u64) -> Result<Vec<Triplet>> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed ^ 0x5eed_0f_4e1d, usize::MAX >> 24, i);
            let kind = kinds[i % kinds.len()];
            SyntheticScene::random(&mut rng, kind, &cfg.ranges, cfg.crop, cfg.crop).triplet(cfg.crop, cfg.crop, cfg.t)
        })
        .collect()
}

pub fn coarse_for(tr: &Triplet, source: CoarseSource, downscale: usize) -> Result<(FlowField<f32>, FlowField<f32>)> {
    match source {
        CoarseSource::Estimated => {
            let cfg = CoarseFlowConfig {
                downscale,
                ..CoarseFlowConfig::default()
            };
            estimate_coarse_flow(&tr.frame0, &tr.frame1, &cfg)
        }
        CoarseSource::GroundTruth => Ok((tr.flow01.downsample_area(downscale)?, tr.flow10.downsample_area(downscale)?)),
    }
}

/// Loss terms, interpolated frame and per-parameter gradients for one
/// triplet.
pub struct SampleResult {
    pub charbonnier: f64,
    pub census: f64,
    pub prediction: Tensor<f32>,
    pub grads: Vec<Tensor<f32>>,
}

pub fn evaluate_sample(model: &Mrn<f32>, tr: &Triplet, source: CoarseSource, with_grads: bool) -> Result<SampleResult> {
    let (c01, c10) = coarse_for(tr, source, model.config.flow_downscale)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let i0 = tape.leaf(tr.frame0.clone());
    let i1 = tape.leaf(tr.frame1.clone());
    let gt = tape.leaf(tr.mid.clone());
    let out = mrn_forward(&mut tape, &model.config, &bound, i0, i1, &c01, &c10)?;
    let alpha = bound.var("fusion.alpha")?;
    let (pred, _) = render_on_tape(&mut tape, i0, i1, out, alpha, tr.t)?;
    let lc = tape.charbonnier(pred, gt, CHARBONNIER_EPS as f32)?;
    let ln = tape.census(pred, gt)?;
    let total = tape.add(lc, ln)?;
    let grads = if with_grads {
        let g = tape.backward(total)?;
        bound
            .vars()
            .iter()
            .zip(model.params.tensors())
            .map(|(&v, p)| g.get_or_zeros(v, p.shape()))
            .collect()
    } else {
        Vec::new()
    };
    Ok(SampleResult {
        charbonnier: tape.value(lc).data()[0] as f64,
        census: tape.value(ln).data()[0] as f64,
        prediction: tape.value(pred).clone(),
        grads,
    })
}

/// Mean total loss over `set`.
pub fn mean_loss(model: &Mrn<f32>, set: &[Triplet], source: CoarseSource) -> Result<f64> {
    let losses = par::map_range(set.len(), |i| {
        evaluate_sample(model, &set[i], source, false).map(|r| r.charbonnier + r.census)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / set.len().max(1) as f64)
}

/// Trains from a seeded initialization. `progress` is called after every
/// iteration.
pub fn train_toy(
    cfg: &TrainConfig,
    model_cfg: &MrnConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    let model = Mrn::init(model_cfg.clone(), cfg.seed)?;
    train_from(model, cfg, &mut progress)
}

pub fn train_from(
    mut model: Mrn<f32>,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate(&model.config)?;
    let shapes: Vec<Vec<usize>> = model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &shape_refs,
    );
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    for it in 0..cfg.iterations {
        let results = par::map_range(cfg.batch_size, |b| {
            training_sample(cfg, it, b).and_then(|tr| evaluate_sample(&model, &tr, cfg.coarse, true))
        });
        let inv = 1.0 / cfg.batch_size as f32;
        let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let (mut lc, mut ln) = (0.0, 0.0);
        for r in results {
            let r = r?;
            lc += r.charbonnier;
            ln += r.census;
            for (g, s) in grads.iter_mut().zip(&r.grads) {
                g.add_assign(s)?;
            }
        }
        let record = LossRecord {
            iteration: it,
            charbonnier: lc / cfg.batch_size as f64,
            census: ln / cfg.batch_size as f64,
            total: (lc + ln) / cfg.batch_size as f64,
        };
        if !record.total.is_finite() {
            return Err(Error::Diverged(it));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            * inv as f64;
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            inv * (cfg.grad_clip / norm) as f32
        } else {
            inv
        };
        let grads: Vec<Tensor<f32>> = grads.into_iter().map(|g| g.scale(scale)).collect();
        let lr = cosine_lr(cfg.lr, it, cfg.iterations);
        if adam.step(model.params.tensors_mut(), &grads, lr)? == StepOutcome::SkippedNonFinite {
            skipped += 1;
        }
        progress(&record);
        losses.push(record);
    }
    Ok(TrainOutcome {
        model,
        losses,
        skipped_steps: skipped,
    })
}

/// CSV with header `iteration,charbonnier,census,total`.
pub fn write_loss_csv<W: Write>(mut out: W, losses: &[LossRecord]) -> Result<()> {
    writeln!(out, "iteration,charbonnier,census,total")?;
    for r in losses {
        writeln!(out, "{},{},{},{}", r.iteration, r.charbonnier, r.census, r.total)?;
    }
    Ok(())
}

pub fn save_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_loss_csv(&mut w, losses)?;
    w.flush()?;
    Ok(())
}

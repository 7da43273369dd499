//! Motion refinement network.
//!
//! Two image pyramids are built with shared weights. At every level a joint
//! flow encoding step warps each stream's image and motion features toward
//! the other stream with the coarse flow, concatenates originals, warped
//! features and the flow, and encodes them into the next level's motion
//! features. The coarsest motion features are modulated by an average of
//! rank-1 tensors, then a transposed-convolution decoder with skip
//! concatenation produces `N` residual flows and one reliability channel per
//! stream at full resolution. The residuals are added to the upsampled coarse
//! flow.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::fusion::ReliabilityMap;
use crate::ops::PoolAxes;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{FlowField, MultiFlowField};

/// Scale applied to flow channels fed into the network.
pub const FLOW_FEATURE_SCALE: f64 = 0.125;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2MW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MrnConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub rank: usize,
    pub n_flows: usize,
    /// Downscale factor of the coarse input flow relative to the images.
    pub flow_downscale: usize,
}

impl Default for MrnConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            channels: vec![16, 32, 64, 128],
            rank: 16,
            n_flows: 4,
            flow_downscale: 4,
        }
    }
}

impl MrnConfig {
    /// Small configuration used for toy training and tests.
    pub fn toy() -> Self {
        Self {
            levels: 2,
            channels: vec![8, 16],
            rank: 4,
            n_flows: 4,
            flow_downscale: 4,
        }
    }

    pub fn with_n_flows(mut self, n: usize) -> Self {
        self.n_flows = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("levels must be >= 1".into()));
        }
        if self.channels.len() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "{} channel counts for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.n_flows == 0 || self.rank == 0 || self.flow_downscale == 0 {
            return Err(Error::InvalidArgument("channels, rank, n_flows and downscale must be positive".into()));
        }
        if self.rank >= self.channels[self.levels - 1] {
            return Err(Error::InvalidArgument(format!(
                "rank {} must be below the coarsest channel count {}",
                self.rank,
                self.channels[self.levels - 1]
            )));
        }
        Ok(())
    }

    /// Images must be a multiple of this in both dimensions.
    pub fn size_multiple(&self) -> usize {
        lcm(1 << self.levels, self.flow_downscale)
    }

    /// Smallest accepted extent that is at least `n`.
    pub fn padded_extent(&self, n: usize) -> usize {
        let m = self.size_multiple();
        let min = (self.rank + 1) << self.levels;
        n.max(min).div_ceil(m) * m
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.levels;
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} input is not divisible by 2^{} = {m}",
                self.levels
            )));
        }
        if h % self.flow_downscale != 0 || w % self.flow_downscale != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} input is not divisible by the flow downscale {}",
                self.flow_downscale
            )));
        }
        let (hc, wc) = (h / m, w / m);
        if self.rank >= hc || self.rank >= wc {
            return Err(Error::InvalidArgument(format!(
                "rank {} must be below the coarsest extent {hc}x{wc}",
                self.rank
            )));
        }
        Ok(())
    }

    fn level_channels(&self, l: usize) -> usize {
        if l == 0 {
            3
        } else {
            self.channels[l - 1]
        }
    }

    fn decoder_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.channels[0]
        } else {
            self.channels[l - 1]
        }
    }

    fn skip_channels(&self, l: usize) -> usize {
        if l == 0 {
            5
        } else {
            self.channels[l - 1]
        }
    }

    fn jfe_in_channels(&self, l: usize) -> usize {
        let motion = if l == 1 { 0 } else { self.channels[l - 2] };
        2 * (self.level_channels(l - 1) + motion) + 2
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>)>, name: &str, cout: usize, cin: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        for l in 1..=self.levels {
            let (cin, c) = (self.level_channels(l - 1), self.channels[l - 1]);
            conv(&mut specs, &format!("enc{l}.conv1"), c, cin, 3);
            specs.push((format!("enc{l}.act1.slope"), vec![c]));
            conv(&mut specs, &format!("enc{l}.conv2"), c, c, 3);
            specs.push((format!("enc{l}.act2.slope"), vec![c]));
        }
        for l in 1..=self.levels {
            let (cin, c) = (self.jfe_in_channels(l), self.channels[l - 1]);
            conv(&mut specs, &format!("jfe{l}.conv1"), c, cin, 3);
            specs.push((format!("jfe{l}.act1.slope"), vec![c]));
            conv(&mut specs, &format!("jfe{l}.conv2"), c, c, 3);
            specs.push((format!("jfe{l}.act2.slope"), vec![c]));
        }
        let (m, c) = (self.rank, self.channels[self.levels - 1]);
        conv(&mut specs, "lfm.channel", m * c, c, 1);
        conv(&mut specs, "lfm.height", m, 1, 1);
        conv(&mut specs, "lfm.width", m, 1, 1);
        for l in (1..=self.levels).rev() {
            let cin = if l == self.levels { self.channels[l - 1] } else { self.decoder_channels(l) };
            let cout = self.decoder_channels(l - 1);
            // Transposed convolution weights are [C_in, C_out, k, k].
            specs.push((format!("dec{l}.up.weight"), vec![cin, cout, 4, 4]));
            specs.push((format!("dec{l}.up.bias"), vec![cout]));
            specs.push((format!("dec{l}.act1.slope"), vec![cout]));
            conv(&mut specs, &format!("dec{l}.fuse"), cout, cout + self.skip_channels(l - 1), 3);
            specs.push((format!("dec{l}.act2.slope"), vec![cout]));
        }
        conv(&mut specs, "head", 2 * self.n_flows + 1, self.decoder_channels(0), 3);
        specs.push(("fusion.alpha".into(), vec![1]));
        specs
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (n, t)) in entries.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Bound<'a, T> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { set: self, vars }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Flows and reliability maps of one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MrnOutput<T> {
    pub flows01: MultiFlowField<T>,
    pub flows10: MultiFlowField<T>,
    pub s0: ReliabilityMap<T>,
    pub s1: ReliabilityMap<T>,
}

/// Tape handles of an [`MrnOutput`].
#[derive(Debug, Clone, Copy)]
pub struct MrnVars {
    pub flows01: Var,
    pub flows10: Var,
    pub s0: Var,
    pub s1: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mrn<T> {
    pub config: MrnConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Mrn<T> {
    /// Uniform `±1/sqrt(fan_in)` weights and biases, PReLU slopes 0.25,
    /// `alpha = 1`.
    pub fn init(config: MrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, shape) in config.param_specs() {
            let t = if name.ends_with(".slope") {
                Tensor::full(&shape, T::of(0.25))
            } else if name == "fusion.alpha" {
                Tensor::full(&shape, T::one())
            } else {
                let fan_in = fan_in_for(&name, &config);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)))
            };
            entries.push((name, t));
        }
        Ok(Self {
            config,
            params: ParamSet::new(entries)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Mrn<U> {
        Mrn {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn alpha(&self) -> T {
        self.params.get("fusion.alpha").map(|a| a.data()[0]).unwrap_or_else(T::one)
    }

    /// Zeroes every decoder and head parameter, leaving the pure
    /// upsampled-coarse-flow model.
    pub fn zero_decoder(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("dec") || n.starts_with("head"))
            .cloned()
            .collect();
        for n in names {
            if let Some(t) = self.params.get_mut(&n) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    /// Runs the network on a frame pair with coarse flows at `1/R`
    /// resolution. Returns the outputs and the convolution flop count.
    pub fn forward(
        &self,
        i0: &Tensor<T>,
        i1: &Tensor<T>,
        f01: &FlowField<T>,
        f10: &FlowField<T>,
    ) -> Result<(MrnOutput<T>, u64)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x0 = tape.leaf(i0.clone());
        let x1 = tape.leaf(i1.clone());
        let vars = mrn_forward(&mut tape, &self.config, &bound, x0, x1, f01, f10)?;
        let out = MrnOutput {
            flows01: MultiFlowField::new(tape.value(vars.flows01).clone())?,
            flows10: MultiFlowField::new(tape.value(vars.flows10).clone())?,
            s0: ReliabilityMap::new(tape.value(vars.s0).clone())?,
            s1: ReliabilityMap::new(tape.value(vars.s1).clone())?,
        };
        Ok((out, tape.flops()))
    }
}

fn fan_in_for(name: &str, cfg: &MrnConfig) -> usize {
    let specs = cfg.param_specs();
    let base = name.trim_end_matches(".weight").trim_end_matches(".bias");
    let (_, w) = specs
        .iter()
        .find(|(n, _)| n == &format!("{base}.weight"))
        .expect("every bias has a weight");
    if base.ends_with(".up") {
        // Each output of a 4x4 stride-2 transposed conv sees C_in * 2 * 2 taps.
        w[0] * (w[2] / 2) * (w[3] / 2)
    } else {
        w[1] * w[2] * w[3]
    }
}

/// Conv + PReLU block.
fn conv_act<T: Scalar>(tape: &mut Tape<T>, p: &Bound<T>, x: Var, name: &str, act: &str, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let k = tape.value(w).shape()[2];
    let y = tape.conv2d(x, w, b, stride, k / 2)?;
    tape.prelu(y, p.var(act)?)
}

/// Image feature pyramid: level 0 is the image, level `l` has
/// `channels[l-1]` channels at `1/2^l` resolution.
pub fn encode_pyramid<T: Scalar>(tape: &mut Tape<T>, cfg: &MrnConfig, p: &Bound<T>, image: Var) -> Result<Vec<Var>> {
    let (c, h, w) = tape.value(image).chw()?;
    if c != 3 {
        return shape_err(format!("pyramid input must have 3 channels, got {c}"));
    }
    let m = 1 << cfg.levels;
    if h % m != 0 || w % m != 0 {
        return Err(Error::InvalidArgument(format!("{h}x{w} not divisible by {m}")));
    }
    let mut levels = vec![image];
    for l in 1..=cfg.levels {
        let x = *levels.last().expect("non-empty");
        let y = conv_act(tape, p, x, &format!("enc{l}.conv1"), &format!("enc{l}.act1.slope"), 2)?;
        let y = conv_act(tape, p, y, &format!("enc{l}.conv2"), &format!("enc{l}.act2.slope"), 1)?;
        levels.push(y);
    }
    Ok(levels)
}

/// Joint flow encoding for level `l` (1-based). Inputs are level `l-1`
/// image features, the previous motion features (absent for `l == 1`) and
/// the coarse flows resized to level `l-1`. Both streams share weights.
#[allow(clippy::too_many_arguments)]
pub fn jfe_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    l: usize,
    feat0: Var,
    feat1: Var,
    mot0: Option<Var>,
    mot1: Option<Var>,
    f01: Var,
    f10: Var,
) -> Result<(Var, Var)> {
    let stream = |tape: &mut Tape<T>, feat: Var, mot: Option<Var>| -> Result<Var> {
        match mot {
            Some(m) => tape.concat(&[feat, m]),
            None => Ok(feat),
        }
    };
    let x0 = stream(tape, feat0, mot0)?;
    let x1 = stream(tape, feat1, mot1)?;
    let (_, h, w) = tape.value(x0).chw()?;
    for f in [f01, f10] {
        if tape.value(f).shape() != [2, h, w] {
            return shape_err(format!(
                "level {l} flow {:?} does not match features {h}x{w}",
                tape.value(f).shape()
            ));
        }
    }
    let encode = |tape: &mut Tape<T>, own: Var, other: Var, flow: Var| -> Result<Var> {
        let warped = tape.backward_warp(other, flow)?;
        let fs = tape.scale(flow, T::of(FLOW_FEATURE_SCALE));
        let cat = tape.concat(&[own, warped, fs])?;
        let y = conv_act(tape, p, cat, &format!("jfe{l}.conv1"), &format!("jfe{l}.act1.slope"), 1)?;
        conv_act(tape, p, y, &format!("jfe{l}.conv2"), &format!("jfe{l}.act2.slope"), 2)
    };
    let m0 = encode(tape, x0, x1, f01)?;
    let m1 = encode(tape, x1, x0, f10)?;
    Ok((m0, m1))
}

/// Modulates `x` by the mean of `rank` rank-1 tensors built from sigmoid
/// projections along channels, height and width.
pub fn low_rank_modulate<T: Scalar>(tape: &mut Tape<T>, p: &Bound<T>, x: Var, rank: usize) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw()?;
    if rank >= c || rank >= h || rank >= w {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} must be below C={c}, H={h}, W={w}"
        )));
    }
    let project = |tape: &mut Tape<T>, axes: PoolAxes, name: &str, len: usize| -> Result<Var> {
        let pooled = tape.pool(x, axes.axes())?;
        let pooled = match axes {
            PoolAxes::Spatial => pooled,
            // Height and width vectors become 1-channel maps for the 1x1 conv.
            _ => tape.reshape(pooled, &[1, len, 1])?,
        };
        let z = tape.conv2d(pooled, p.var(&format!("{name}.weight"))?, p.var(&format!("{name}.bias"))?, 1, 0)?;
        let s = tape.sigmoid(z);
        tape.reshape(s, &[rank, len])
    };
    let u = project(tape, PoolAxes::Spatial, "lfm.channel", c)?;
    let v = project(tape, PoolAxes::ChannelWidth, "lfm.height", h)?;
    let wv = project(tape, PoolAxes::ChannelHeight, "lfm.width", w)?;
    let t = tape.kronecker_mean(u, v, wv)?;
    tape.mul(x, t)
}

/// Coarse-to-fine decoder for one stream. `motion[l]` holds the level-`l`
/// motion features for `l >= 1`; `skip0` is the full-resolution skip input.
/// Returns the `[2N+1,H,W]` head output.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &MrnConfig,
    p: &Bound<T>,
    bottleneck: Var,
    motion: &[Var],
    skip0: Var,
) -> Result<Var> {
    let mut d = bottleneck;
    for l in (1..=cfg.levels).rev() {
        let up = tape.conv_transpose2d(d, p.var(&format!("dec{l}.up.weight"))?, p.var(&format!("dec{l}.up.bias"))?, 2, 1)?;
        let up = tape.prelu(up, p.var(&format!("dec{l}.act1.slope"))?)?;
        let skip = if l - 1 == 0 { skip0 } else { motion[l - 1] };
        let cat = tape.concat(&[up, skip])?;
        d = conv_act(tape, p, cat, &format!("dec{l}.fuse"), &format!("dec{l}.act2.slope"), 1)?;
    }
    let w = p.var("head.weight")?;
    let b = p.var("head.bias")?;
    tape.conv2d(d, w, b, 1, 1)
}

/// Coarse flow resized to every level `0..=L`.
fn flow_levels<T: Scalar>(cfg: &MrnConfig, f: &FlowField<T>, h: usize, w: usize) -> Vec<FlowField<T>> {
    (0..=cfg.levels).map(|l| f.resize(h >> l, w >> l)).collect()
}

/// Full forward pass recorded on `tape`.
pub fn mrn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &MrnConfig,
    p: &Bound<T>,
    i0: Var,
    i1: Var,
    f01: &FlowField<T>,
    f10: &FlowField<T>,
) -> Result<MrnVars> {
    cfg.validate()?;
    let (_, h, w) = tape.value(i0).chw()?;
    tape.value(i0).expect_same_shape(tape.value(i1), "mrn inputs")?;
    cfg.check_input(h, w)?;
    let (hc, wc) = (h / cfg.flow_downscale, w / cfg.flow_downscale);
    for f in [f01, f10] {
        if f.height() != hc || f.width() != wc {
            return shape_err(format!(
                "coarse flow is {}x{}, expected {hc}x{wc}",
                f.height(),
                f.width()
            ));
        }
    }
    let fl01 = flow_levels(cfg, f01, h, w);
    let fl10 = flow_levels(cfg, f10, h, w);
    let v01: Vec<Var> = fl01.iter().map(|f| tape.leaf(f.tensor().clone())).collect();
    let v10: Vec<Var> = fl10.iter().map(|f| tape.leaf(f.tensor().clone())).collect();

    let pyr0 = encode_pyramid(tape, cfg, p, i0)?;
    let pyr1 = encode_pyramid(tape, cfg, p, i1)?;

    let mut mot0: Vec<Var> = vec![i0];
    let mut mot1: Vec<Var> = vec![i1];
    for l in 1..=cfg.levels {
        let (prev0, prev1) = if l == 1 { (None, None) } else { (Some(mot0[l - 1]), Some(mot1[l - 1])) };
        let (m0, m1) = jfe_step(tape, p, l, pyr0[l - 1], pyr1[l - 1], prev0, prev1, v01[l - 1], v10[l - 1])?;
        mot0.push(m0);
        mot1.push(m1);
    }

    let n = cfg.n_flows;
    let mut heads = Vec::with_capacity(2);
    for (mot, img, flows) in [(&mot0, i0, &fl01), (&mot1, i1, &fl10)] {
        let bottleneck = low_rank_modulate(tape, p, mot[cfg.levels], cfg.rank)?;
        let flow_feat = tape.leaf(flows[0].tensor().scale(T::of(FLOW_FEATURE_SCALE)));
        let skip0 = tape.concat(&[img, flow_feat])?;
        let head = decode(tape, cfg, p, bottleneck, mot, skip0)?;
        let base = tape.leaf(tile_flow(flows[0].tensor(), n));
        let residual = tape.slice(head, 0, 2 * n)?;
        let flows = tape.add(base, residual)?;
        let s = tape.slice(head, 2 * n, 1)?;
        heads.push((flows, s));
    }
    Ok(MrnVars {
        flows01: heads[0].0,
        s0: heads[0].1,
        flows10: heads[1].0,
        s1: heads[1].1,
    })
}

/// Repeats a `[2,H,W]` flow `n` times along channels.
pub fn tile_flow<T: Scalar>(flow: &Tensor<T>, n: usize) -> Tensor<T> {
    let (_, h, w) = flow.chw().expect("flow tensor");
    let mut data = Vec::with_capacity(2 * n * h * w);
    for _ in 0..n {
        data.extend_from_slice(flow.data());
    }
    Tensor::new(vec![2 * n, h, w], data).expect("tiled size")
}

/// Writes a checkpoint: magic `M2MW`, `u32` version, config (`u32` levels,
/// `u32` channel count then each channel, `u32` rank, `u32` n_flows,
/// `u32` flow downscale), `u32` record count, then per record a `u16` name
/// length, the UTF-8 name, `u32` rank, `u32` extents and `f32` values, all
/// little-endian.
pub fn write_checkpoint<W: Write>(mut out: W, model: &Mrn<f32>) -> Result<()> {
    let cfg = &model.config;
    out.write_all(CHECKPOINT_MAGIC)?;
    let put = |out: &mut W, v: u32| out.write_all(&v.to_le_bytes());
    put(&mut out, CHECKPOINT_VERSION)?;
    put(&mut out, cfg.levels as u32)?;
    put(&mut out, cfg.channels.len() as u32)?;
    for &c in &cfg.channels {
        put(&mut out, c as u32)?;
    }
    put(&mut out, cfg.rank as u32)?;
    put(&mut out, cfg.n_flows as u32)?;
    put(&mut out, cfg.flow_downscale as u32)?;
    put(&mut out, model.params.len() as u32)?;
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Mrn<f32>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: "<checkpoint>".into(),
            expected: "M2MW".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let get = |input: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = get(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported checkpoint version {version}")));
    }
    let levels = get(&mut input)? as usize;
    let nch = get(&mut input)? as usize;
    if nch > 64 {
        return Err(Error::CorruptHeader(format!("{nch} channel entries")));
    }
    let channels = (0..nch).map(|_| get(&mut input).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let config = MrnConfig {
        levels,
        channels,
        rank: get(&mut input)? as usize,
        n_flows: get(&mut input)? as usize,
        flow_downscale: get(&mut input)? as usize,
    };
    config.validate()?;
    let count = get(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        let rank = get(&mut input)? as usize;
        if rank > 8 {
            return Err(Error::CorruptHeader(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| get(&mut input).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let params = ParamSet::new(entries)?;
    for (name, shape) in config.param_specs() {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::CorruptHeader(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::CorruptHeader(format!("missing parameter {name}"))),
        }
    }
    Ok(Mrn { config, params })
}

pub fn save_checkpoint(path: &Path, model: &Mrn<f32>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mrn<f32>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_shapes_default_config() {
        let cfg = MrnConfig::default();
        let model = Mrn::<f32>::init(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let img = tape.leaf(Tensor::full(&[3, 64, 64], 0.5));
        let levels = encode_pyramid(&mut tape, &cfg, &p, img).unwrap();
        let shapes: Vec<_> = levels.iter().map(|&v| tape.value(v).shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![3, 64, 64], vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8], vec![128, 4, 4]]
        );
    }

    #[test]
    fn pyramid_rejects_indivisible_input() {
        let cfg = MrnConfig::toy();
        let model = Mrn::<f32>::init(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let img = tape.leaf(Tensor::zeros(&[3, 30, 32]));
        assert!(encode_pyramid(&mut tape, &cfg, &p, img).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MrnConfig::default().validate().is_ok());
        let bad = MrnConfig { channels: vec![8], ..MrnConfig::toy() };
        assert!(bad.validate().is_err());
        let bad = MrnConfig { rank: 16, ..MrnConfig::toy() };
        assert!(bad.validate().is_err());
        assert_eq!(MrnConfig::toy().size_multiple(), 4);
        assert_eq!(MrnConfig::default().size_multiple(), 16);
        let cfg = MrnConfig::default();
        assert_eq!(cfg.padded_extent(256), 272);
        assert_eq!(cfg.padded_extent(300), 304);
        assert!(cfg.check_input(cfg.padded_extent(256), cfg.padded_extent(300)).is_ok());
        assert_eq!(MrnConfig::toy().padded_extent(32), 32);
        assert_eq!(MrnConfig::toy().padded_extent(10), 20);
    }

    fn modulate_with(weight: f64, bias: f64, x: &Tensor<f64>) -> Tensor<f64> {
        let mut model = Mrn::<f64>::init(MrnConfig::toy(), 3).unwrap();
        for dir in ["channel", "height", "width"] {
            model.params.get_mut(&format!("lfm.{dir}.weight")).unwrap().data_mut().fill(weight);
            model.params.get_mut(&format!("lfm.{dir}.bias")).unwrap().data_mut().fill(bias);
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = low_rank_modulate(&mut tape, &p, xv, model.config.rank).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn modulation_with_zero_preactivations_is_an_eighth() {
        let x = Tensor::from_fn(&[16, 8, 8], |i| (i as f64 * 0.37).sin());
        let y = modulate_with(0.0, 0.0, &x);
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_modulation_is_identity() {
        let x = Tensor::from_fn(&[16, 8, 8], |i| 1.0 + 0.5 * (i as f64 * 0.11).cos());
        let y = modulate_with(100.0, 100.0, &x);
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Mrn::<f32>::init(MrnConfig::toy(), 7).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        assert_eq!(&buf[..4], b"M2MW");
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, model);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::BadMagic { .. })));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}

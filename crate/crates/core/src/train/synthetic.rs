//! Procedural training triplets with analytic motion.
//!
//! Every scene point follows a linear trajectory `x(tau) = p + tau * F01(p)`
//! where `F01(p) = (A - I)(p - c) + d`, so frames at any `tau` and both
//! ground-truth flows are exact. Textures are continuous functions of the
//! scene coordinate, sampled at pixel centers.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Continuous color texture over scene coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Sum of oriented sinusoids; `(channel, fx, fy, phase, amplitude)` with
    /// frequencies in cycles per pixel.
    Waves {
        waves: Vec<(usize, f64, f64, f64, f64)>,
        base: [f64; 3],
    },
    /// Multi-octave lattice value noise with smoothstep interpolation.
    Noise {
        seed: u64,
        period: f64,
        octaves: usize,
        tint: [[f64; 3]; 2],
    },
    /// Soft-edged rotated checkerboard over a linear color gradient.
    Checker {
        period: f64,
        angle: f64,
        colors: [[f64; 3]; 2],
        gradient: [f64; 2],
    },
    Flat([f64; 3]),
}

/// Smallest noise lattice spacing in pixels.
const MIN_FEATURE: f64 = 3.0;

/// Uniform value in `[0, 1)` for a lattice point.
fn lattice(seed: u64, ix: i64, iy: i64, octave: usize) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= (octave as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f64, y: f64, octave: usize) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smoothstep(x - fx), smoothstep(y - fy));
    let v00 = lattice(seed, ix, iy, octave);
    let v10 = lattice(seed, ix + 1, iy, octave);
    let v01 = lattice(seed, ix, iy + 1, octave);
    let v11 = lattice(seed, ix + 1, iy + 1, octave);
    let top = v00 + tx * (v10 - v00);
    let bottom = v01 + tx * (v11 - v01);
    top + ty * (bottom - top)
}

impl Texture {
    /// A random texture: mostly noise, sometimes waves or a checker.
    pub fn random<R: Rng>(rng: &mut R, waves: usize, f_min: f64, f_max: f64) -> Self {
        let pick: f64 = rng.gen();
        let color = |rng: &mut R| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        if pick < 0.6 {
            let period = rng.gen_range(0.5 / f_max..0.5 / f_min).clamp(MIN_FEATURE, 16.0);
            // Octaves stop before features get finer than `MIN_FEATURE`.
            let octaves = (1..=3).take_while(|o| period / (1u32 << (o - 1)) as f64 >= MIN_FEATURE).count();
            Texture::Noise {
                seed: rng.gen(),
                period,
                octaves,
                tint: [color(rng), color(rng)],
            }
        } else if pick < 0.85 {
            Self::waves(rng, waves, f_min, f_max)
        } else {
            Texture::Checker {
                period: rng.gen_range(0.5 / f_max..0.5 / f_min).clamp(2.0 * MIN_FEATURE, 16.0),
                angle: rng.gen_range(0.0..PI),
                colors: [color(rng), color(rng)],
                gradient: [rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)],
            }
        }
    }

    /// `waves` sinusoids per channel with frequencies in `[f_min, f_max]`.
    pub fn waves<R: Rng>(rng: &mut R, waves: usize, f_min: f64, f_max: f64) -> Self {
        let mut list = Vec::with_capacity(3 * waves);
        let shared = (0..waves)
            .map(|_| {
                let f = rng.gen_range(f_min..f_max);
                let theta = rng.gen_range(0.0..PI);
                (f * theta.cos(), f * theta.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect::<Vec<_>>();
        for c in 0..3 {
            for &(fx, fy, phase) in &shared {
                // Channels share structure with channel-specific phase and
                // amplitude so edges are visible in luma.
                let amp = rng.gen_range(0.2..1.0) / waves as f64;
                list.push((c, fx, fy, phase + rng.gen_range(-0.5..0.5), amp));
            }
        }
        let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        Texture::Waves { waves: list, base }
    }

    pub fn flat(color: [f64; 3]) -> Self {
        Texture::Flat(color)
    }

    /// Color at scene coordinate `(x, y)`, clamped to `[0, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let out = match self {
            Texture::Waves { waves, base } => {
                let mut out = *base;
                for &(c, fx, fy, phase, amp) in waves {
                    out[c] += 0.45 * amp * (2.0 * PI * (fx * x + fy * y) + phase).sin();
                }
                out
            }
            Texture::Noise {
                seed,
                period,
                octaves,
                tint,
            } => {
                let (mut v, mut amp, mut p, mut norm) = (0.0, 1.0, *period, 0.0);
                for o in 0..*octaves {
                    v += amp * value_noise(*seed, x / p, y / p, o);
                    norm += amp;
                    amp *= 0.5;
                    p *= 0.5;
                }
                let v = v / norm;
                // A second field decorrelates the channels a little.
                let w = value_noise(seed.wrapping_add(1), x / period, y / period, 0);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    out[c] = tint[0][c] * (1.0 - v) + tint[1][c] * v + 0.2 * (w - 0.5);
                }
                out
            }
            Texture::Checker {
                period,
                angle,
                colors,
                gradient,
            } => {
                let (s, c) = angle.sin_cos();
                let (u, v) = ((c * x + s * y) / period, (-s * x + c * y) / period);
                let m = 0.5 + 0.5 * (4.0 * (PI * u).sin() * (PI * v).sin()).tanh();
                let g = gradient[0] * x + gradient[1] * y;
                let mut out = [0.0; 3];
                for ch in 0..3 {
                    out[ch] = colors[0][ch] * (1.0 - m) + colors[1][ch] * m + g;
                }
                out
            }
            Texture::Flat(c) => *c,
        };
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Translation,
    Rotation,
    Zoom,
    Occlusion,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Translation,
        SceneKind::Rotation,
        SceneKind::Zoom,
        SceneKind::Occlusion,
    ];
}

/// Affine motion `F01(p) = (A - I)(p - c) + d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMotion {
    pub a: [[f64; 2]; 2],
    pub center: [f64; 2],
    pub shift: [f64; 2],
}

impl AffineMotion {
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            center: [0.0, 0.0],
            shift: [dx, dy],
        }
    }

    /// Uniform scaling by `scale` about `center`.
    pub fn zoom(scale: f64, center: [f64; 2]) -> Self {
        Self {
            a: [[scale, 0.0], [0.0, scale]],
            center,
            shift: [0.0, 0.0],
        }
    }

    pub fn flow(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = (x - self.center[0], y - self.center[1]);
        let a = self.a;
        (
            (a[0][0] - 1.0) * px + a[0][1] * py + self.shift[0],
            a[1][0] * px + (a[1][1] - 1.0) * py + self.shift[1],
        )
    }

    /// Position at time `tau` of the point at `(x, y)` at time 0.
    pub fn forward(&self, x: f64, y: f64, tau: f64) -> (f64, f64) {
        let (u, v) = self.flow(x, y);
        (x + tau * u, y + tau * v)
    }

    /// Time-0 source of the point seen at `(x, y)` at time `tau`.
    pub fn inverse(&self, x: f64, y: f64, tau: f64) -> Result<(f64, f64)> {
        let a = self.a;
        let m = [
            [1.0 + tau * (a[0][0] - 1.0), tau * a[0][1]],
            [tau * a[1][0], 1.0 + tau * (a[1][1] - 1.0)],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-9 {
            return Err(Error::InvalidArgument(format!("motion is singular at tau={tau}")));
        }
        let rx = x - self.center[0] - tau * self.shift[0];
        let ry = y - self.center[1] - tau * self.shift[1];
        Ok((
            self.center[0] + (m[1][1] * rx - m[0][1] * ry) / det,
            self.center[1] + (-m[1][0] * rx + m[0][0] * ry) / det,
        ))
    }
}

/// Foreground rectangle `[x0, x1) x [y0, y1)` in time-0 coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub rect: [f64; 4],
    pub shift: [f64; 2],
}

impl Layer {
    fn contains(&self, x: f64, y: f64, tau: f64) -> bool {
        let (sx, sy) = (x - tau * self.shift[0], y - tau * self.shift[1]);
        sx >= self.rect[0] && sx < self.rect[2] && sy >= self.rect[1] && sy < self.rect[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub background: Texture,
    pub motion: AffineMotion,
    /// Translating foreground for occlusion scenes.
    pub foreground: Option<(Texture, Layer)>,
}

/// Ranges used by [`SyntheticScene::random`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRanges {
    pub max_shift: f64,
    pub max_angle_deg: f64,
    pub zoom: (f64, f64),
    pub waves: usize,
    pub freq: (f64, f64),
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            max_shift: 6.0,
            max_angle_deg: 6.0,
            zoom: (0.85, 1.2),
            waves: 6,
            freq: (0.02, 0.15),
        }
    }
}

/// Frames 0 and 1, the frame at `t`, and both ground-truth flows.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub frame0: Tensor<f32>,
    pub frame1: Tensor<f32>,
    pub mid: Tensor<f32>,
    pub t: f64,
    pub flow01: FlowField<f32>,
    pub flow10: FlowField<f32>,
}

impl SyntheticScene {
    pub fn random<R: Rng>(rng: &mut R, kind: SceneKind, ranges: &SceneRanges, h: usize, w: usize) -> Self {
        let tex = |rng: &mut R| Texture::random(rng, ranges.waves, ranges.freq.0, ranges.freq.1);
        let background = tex(rng);
        let center = [
            (w as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * w as f64,
            (h as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * h as f64,
        ];
        let s = ranges.max_shift;
        let mut shift = || [rng.gen_range(-s..s), rng.gen_range(-s..s)];
        let (a, shift, fg) = match kind {
            SceneKind::Translation => ([[1.0, 0.0], [0.0, 1.0]], shift(), None),
            SceneKind::Rotation => {
                let th = rng.gen_range(-ranges.max_angle_deg..ranges.max_angle_deg).to_radians();
                let d = [rng.gen_range(-s..s) * 0.5, rng.gen_range(-s..s) * 0.5];
                ([[th.cos(), -th.sin()], [th.sin(), th.cos()]], d, None)
            }
            SceneKind::Zoom => {
                let z = rng.gen_range(ranges.zoom.0..ranges.zoom.1);
                let d = [rng.gen_range(-s..s) * 0.5, rng.gen_range(-s..s) * 0.5];
                ([[z, 0.0], [0.0, z]], d, None)
            }
            SceneKind::Occlusion => {
                let bg = [rng.gen_range(-s..s) * 0.5, rng.gen_range(-s..s) * 0.5];
                let fs = [rng.gen_range(-s..s), rng.gen_range(-s..s)];
                let (rw, rh) = (rng.gen_range(0.25..0.5) * w as f64, rng.gen_range(0.25..0.5) * h as f64);
                let x0 = rng.gen_range(0.1..0.9 - rw / w as f64) * w as f64;
                let y0 = rng.gen_range(0.1..0.9 - rh / h as f64) * h as f64;
                let layer = Layer {
                    rect: [x0, y0, x0 + rw, y0 + rh],
                    shift: fs,
                };
                ([[1.0, 0.0], [0.0, 1.0]], bg, Some((tex(rng), layer)))
            }
        };
        Self {
            kind,
            background,
            motion: AffineMotion { a, center, shift },
            foreground: fg,
        }
    }

    pub fn translating(texture: Texture, dx: f64, dy: f64) -> Self {
        Self {
            kind: SceneKind::Translation,
            background: texture,
            motion: AffineMotion::translation(dx, dy),
            foreground: None,
        }
    }

    /// Frame at time `tau`.
    pub fn render(&self, h: usize, w: usize, tau: f64) -> Result<Tensor<f32>> {
        let mut out = Tensor::zeros(&[3, h, w]);
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let color = match &self.foreground {
                    Some((tex, layer)) if layer.contains(xf, yf, tau) => {
                        tex.sample(xf - tau * layer.shift[0], yf - tau * layer.shift[1])
                    }
                    _ => {
                        let (sx, sy) = self.motion.inverse(xf, yf, tau)?;
                        self.background.sample(sx, sy)
                    }
                };
                for (c, v) in color.into_iter().enumerate() {
                    out.data_mut()[c * plane + y * w + x] = v as f32;
                }
            }
        }
        Ok(out)
    }

    /// Ground-truth flow from frame 0 to frame 1 at frame-0 pixels.
    pub fn flow01(&self, h: usize, w: usize) -> FlowField<f32> {
        FlowField::from_fn(h, w, |y, x| {
            let (xf, yf) = (x as f64, y as f64);
            let (u, v) = match &self.foreground {
                Some((_, layer)) if layer.contains(xf, yf, 0.0) => (layer.shift[0], layer.shift[1]),
                _ => self.motion.flow(xf, yf),
            };
            (u as f32, v as f32)
        })
    }

    /// Ground-truth flow from frame 1 to frame 0 at frame-1 pixels.
    pub fn flow10(&self, h: usize, w: usize) -> Result<FlowField<f32>> {
        // Singularity does not depend on the point.
        self.motion.inverse(0.0, 0.0, 1.0)?;
        Ok(FlowField::from_fn(h, w, |y, x| {
            let (xf, yf) = (x as f64, y as f64);
            match &self.foreground {
                Some((_, layer)) if layer.contains(xf, yf, 1.0) => (-layer.shift[0] as f32, -layer.shift[1] as f32),
                _ => {
                    let (sx, sy) = self.motion.inverse(xf, yf, 1.0).unwrap_or((xf, yf));
                    ((sx - xf) as f32, (sy - yf) as f32)
                }
            }
        }))
    }

    pub fn triplet(&self, h: usize, w: usize, t: f64) -> Result<Triplet> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
        }
        Ok(Triplet {
            frame0: self.render(h, w, 0.0)?,
            frame1: self.render(h, w, 1.0)?,
            mid: self.render(h, w, t)?,
            t,
            flow01: self.flow01(h, w),
            flow10: self.flow10(h, w)?,
        })
    }
}

fn flip_tensor_h(x: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = x.chw().expect("chw tensor");
    let mut out = x.clone();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set3(ch, y, xx, x.at3(ch, y, w - 1 - xx));
            }
        }
    }
    out
}

fn flip_flow_h(f: &FlowField<f32>) -> FlowField<f32> {
    let w = f.width();
    FlowField::from_fn(f.height(), w, |y, x| {
        let (u, v) = f.at(y, w - 1 - x);
        (-u, v)
    })
}

impl Triplet {
    /// Mirrors every frame and flow left to right.
    pub fn flip_horizontal(&self) -> Self {
        Self {
            frame0: flip_tensor_h(&self.frame0),
            frame1: flip_tensor_h(&self.frame1),
            mid: flip_tensor_h(&self.mid),
            t: self.t,
            flow01: flip_flow_h(&self.flow01),
            flow10: flip_flow_h(&self.flow10),
        }
    }

    /// Swaps the input frames; the target sits at `1 - t`.
    pub fn reverse_time(&self) -> Self {
        Self {
            frame0: self.frame1.clone(),
            frame1: self.frame0.clone(),
            mid: self.mid.clone(),
            t: 1.0 - self.t,
            flow01: self.flow10.clone(),
            flow10: self.flow01.clone(),
        }
    }

    /// Multiplies each channel of every frame by `gains`.
    pub fn color_scaled(&self, gains: [f32; 3]) -> Self {
        let scale = |x: &Tensor<f32>| {
            let mut out = x.clone();
            for (c, g) in gains.iter().enumerate() {
                for v in out.channel_mut(c) {
                    *v = (*v * g).clamp(0.0, 1.0);
                }
            }
            out
        };
        Self {
            frame0: scale(&self.frame0),
            frame1: scale(&self.frame1),
            mid: scale(&self.mid),
            ..self.clone()
        }
    }
}

//! Pyramidal SAD block matching, used when no external flow is supplied.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use crate::warp::FlowField;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseFlowConfig {
    pub levels: usize,
    pub block: usize,
    pub radius: i64,
    /// Output resolution is `1/downscale` of the input.
    pub downscale: usize,
}

impl Default for CoarseFlowConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            block: 8,
            radius: 4,
            downscale: 4,
        }
    }
}

impl CoarseFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.block < 4 || self.radius < 1 || self.downscale == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid coarse flow config {self:?}: need levels >= 1, block >= 4, radius >= 1"
            )));
        }
        Ok(())
    }

    /// Largest displacement per component the search can return, at the
    /// output resolution.
    pub fn max_displacement(&self) -> f64 {
        self.radius as f64 * ((1usize << self.levels) - 1) as f64 / self.downscale as f64
    }
}

struct Gray {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Gray {
    fn from_rgb(img: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = img.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let n = h * w;
        let d = img.data();
        let px = (0..n)
            .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
            .collect();
        Ok(Self { h, w, px })
    }

    fn half(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.px[yy * self.w + xx];
                px.push(0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)));
            }
        }
        Self { h, w, px }
    }
}

/// Integer flow per block, row-major over the block grid, with an optional
/// sub-pixel offset.
struct BlockFlow {
    rows: usize,
    cols: usize,
    d: Vec<(i64, i64)>,
    frac: Vec<(f32, f32)>,
}

/// Costs closer than this are ties.
const COST_TIE: f32 = 1e-6;

/// Orders candidates by cost, then displacement magnitude, then `(u, v)`.
fn better(a: (f32, i64, i64), b: (f32, i64, i64)) -> bool {
    let ka = (a.1 * a.1 + a.2 * a.2, a.1, a.2);
    let kb = (b.1 * b.1 + b.2 * b.2, b.1, b.2);
    let tie = a.0 == b.0 || (a.0 - b.0).abs() <= COST_TIE;
    if tie {
        ka < kb
    } else {
        a.0 < b.0
    }
}

/// Mean absolute difference over pixels whose match lands inside `b`;
/// infinite when fewer than half of the block does.
fn block_cost(a: &Gray, b: &Gray, (y0, y1, x0, x1): (usize, usize, usize, usize), u: i64, v: i64) -> f32 {
    let (mut sum, mut n) = (0.0f32, 0usize);
    for y in y0..y1 {
        let yy = y as i64 + v;
        if yy < 0 || yy >= b.h as i64 {
            continue;
        }
        for x in x0..x1 {
            let xx = x as i64 + u;
            if xx < 0 || xx >= b.w as i64 {
                continue;
            }
            sum += (a.px[y * a.w + x] - b.px[yy as usize * b.w + xx as usize]).abs();
            n += 1;
        }
    }
    if 2 * n < (y1 - y0) * (x1 - x0) {
        f32::INFINITY
    } else {
        sum / n as f32
    }
}

/// Offset of a V-shaped minimum from samples at -1, 0, +1.
fn equiangular(cm: f32, c0: f32, cp: f32) -> f32 {
    if !(cm.is_finite() && cp.is_finite()) || c0 <= 1e-6 {
        return 0.0;
    }
    let slope = cm.max(cp) - c0;
    if slope <= COST_TIE {
        return 0.0;
    }
    (0.5 * (cm - cp) / slope).clamp(-0.5, 0.5)
}

fn match_level(a: &Gray, b: &Gray, block: usize, radius: i64, prior: Option<&BlockFlow>, subpixel: bool) -> BlockFlow {
    let rows = a.h.div_ceil(block);
    let cols = a.w.div_ceil(block);
    let res = par::map_range(rows * cols, |i| {
        let (by, bx) = (i / cols, i % cols);
        let (y0, x0) = (by * block, bx * block);
        let rect = (y0, (y0 + block).min(a.h), x0, (x0 + block).min(a.w));
        // Search windows around the zero vector and the upscaled flows of the
        // parent block and its neighbours.
        let mut centers = vec![(0i64, 0i64)];
        if let Some(p) = prior {
            let cy = ((rect.0 + rect.1) / 2 / 2 / block).min(p.rows - 1) as i64;
            let cx = ((rect.2 + rect.3) / 2 / 2 / block).min(p.cols - 1) as i64;
            for ny in cy - 1..=cy + 1 {
                for nx in cx - 1..=cx + 1 {
                    if ny >= 0 && nx >= 0 && (ny as usize) < p.rows && (nx as usize) < p.cols {
                        let (u, v) = p.d[ny as usize * p.cols + nx as usize];
                        centers.push((2 * u, 2 * v));
                    }
                }
            }
        }
        let mut cands = BTreeSet::new();
        for &(pu, pv) in &centers {
            for dv in -radius..=radius {
                for du in -radius..=radius {
                    cands.insert((pu + du, pv + dv));
                }
            }
        }
        let mut best: Option<(f32, i64, i64)> = None;
        for (u, v) in cands {
            let cand = (block_cost(a, b, rect, u, v), u, v);
            if best.map_or(true, |bst| better(cand, bst)) {
                best = Some(cand);
            }
        }
        let (c0, u, v) = best.expect("non-empty search window");
        let frac = if subpixel && c0.is_finite() {
            (
                equiangular(block_cost(a, b, rect, u - 1, v), c0, block_cost(a, b, rect, u + 1, v)),
                equiangular(block_cost(a, b, rect, u, v - 1), c0, block_cost(a, b, rect, u, v + 1)),
            )
        } else {
            (0.0, 0.0)
        };
        ((u, v), frac)
    });
    let (d, frac) = res.into_iter().unzip();
    BlockFlow { rows, cols, d, frac }
}

/// Component-wise median over each block's 3x3 neighbourhood, replicating
/// the grid edge.
fn median_filter(flow: &BlockFlow) -> BlockFlow {
    let (rows, cols) = (flow.rows as i64, flow.cols as i64);
    let total = |i: usize| {
        let ((u, v), (fu, fv)) = (flow.d[i], flow.frac[i]);
        (u as f32 + fu, v as f32 + fv)
    };
    let mut d = Vec::with_capacity(flow.d.len());
    let mut frac = Vec::with_capacity(flow.d.len());
    for by in 0..rows {
        for bx in 0..cols {
            let mut us = [0.0f32; 9];
            let mut vs = [0.0f32; 9];
            let mut k = 0;
            for ny in by - 1..=by + 1 {
                for nx in bx - 1..=bx + 1 {
                    let i = (ny.clamp(0, rows - 1) * cols + nx.clamp(0, cols - 1)) as usize;
                    (us[k], vs[k]) = total(i);
                    k += 1;
                }
            }
            us.sort_by(f32::total_cmp);
            vs.sort_by(f32::total_cmp);
            let (mu, mv) = (us[4], vs[4]);
            let (ru, rv) = (mu.round(), mv.round());
            d.push((ru as i64, rv as i64));
            frac.push((mu - ru, mv - rv));
        }
    }
    BlockFlow {
        rows: flow.rows,
        cols: flow.cols,
        d,
        frac,
    }
}

fn one_direction(a: &Tensor<f32>, b: &Tensor<f32>, cfg: &CoarseFlowConfig) -> Result<FlowField<f32>> {
    let mut pa = vec![Gray::from_rgb(a)?];
    let mut pb = vec![Gray::from_rgb(b)?];
    for _ in 1..cfg.levels {
        let na = pa.last().expect("non-empty").half();
        let nb = pb.last().expect("non-empty").half();
        pa.push(na);
        pb.push(nb);
    }
    let coarsest = pa.last().expect("non-empty");
    if coarsest.h < cfg.block || coarsest.w < cfg.block {
        return Err(Error::InvalidArgument(format!(
            "{}x{} input too small for {} pyramid levels with {}px blocks",
            pa[0].h, pa[0].w, cfg.levels, cfg.block
        )));
    }
    let mut flow: Option<BlockFlow> = None;
    for l in (0..cfg.levels).rev() {
        let raw = match_level(&pa[l], &pb[l], cfg.block, cfg.radius, flow.as_ref(), l == 0);
        flow = Some(median_filter(&raw));
    }
    let flow = flow.expect("at least one level");
    let (h, w) = (pa[0].h, pa[0].w);
    let block = cfg.block;
    let dense = FlowField::from_fn(h, w, |y, x| {
        let i = (y / block) * flow.cols + x / block;
        let ((u, v), (fu, fv)) = (flow.d[i], flow.frac[i]);
        (u as f32 + fu, v as f32 + fv)
    });
    dense.downsample_area(cfg.downscale)
}

/// Estimates `F01` and `F10` independently at `1/downscale` resolution.
pub fn estimate_coarse_flow(
    i0: &Tensor<f32>,
    i1: &Tensor<f32>,
    cfg: &CoarseFlowConfig,
) -> Result<(FlowField<f32>, FlowField<f32>)> {
    cfg.validate()?;
    i0.expect_same_shape(i1, "coarse flow inputs")?;
    Ok((one_direction(i0, i1, cfg)?, one_direction(i1, i0, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, shift: i64) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |i| {
            let x = (i % w) as i64 - shift;
            let y = ((i / w) % h) as i64;
            let c = i / (h * w);
            let v = ((x * 7 + y * 13 + c as i64 * 5) % 17) as f32 / 17.0;
            v * 0.5 + 0.25 * ((x as f32 * 0.3).sin() + 1.0) * 0.5
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = textured(32, 32, 0);
        let (f01, f10) = estimate_coarse_flow(&img, &img, &CoarseFlowConfig::default()).unwrap();
        assert!(f01.tensor().data().iter().chain(f10.tensor().data()).all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_frames_give_zero_flow() {
        let a = Tensor::full(&[3, 32, 32], 0.4);
        let b = Tensor::full(&[3, 32, 32], 0.7);
        let (f01, _) = estimate_coarse_flow(&a, &b, &CoarseFlowConfig::default()).unwrap();
        assert!(f01.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_small_input() {
        let a = Tensor::full(&[3, 16, 16], 0.4);
        assert!(estimate_coarse_flow(&a, &a, &CoarseFlowConfig::default()).is_err());
    }

    #[test]
    fn tie_break_prefers_small_then_lexicographic() {
        assert!(better((1.0, 0, 0), (1.0, 1, 0)));
        assert!(better((1.0, -1, 0), (1.0, 0, -1)));
        assert!(better((0.5, 3, 3), (1.0, 0, 0)));
        assert!(better((1.0 + 1e-7, 0, 0), (1.0, 1, 0)));
        assert!(better((1.0, 5, 5), (f32::INFINITY, 0, 0)));
    }
}

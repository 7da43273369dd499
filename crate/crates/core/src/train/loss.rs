//! Photometric training losses.
//!
//! The total loss is the unweighted sum of a Charbonnier term and a soft
//! census term computed on 3x3 neighborhoods of the luma channel.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Soft-sign scale of the census transform: `d / sqrt(SIGMA^2 + d^2)`.
pub const CENSUS_SIGMA: f64 = 0.1;

/// Robust distance between census codes: `x^2 / (HAMMING_SOFT + x^2)`.
pub const CENSUS_HAMMING_SOFT: f64 = 0.1;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// `mean(sqrt((pred - gt)^2 + eps^2))` over every element.
pub fn charbonnier<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, eps: T) -> Result<T> {
    pred.expect_same_shape(gt, "charbonnier")?;
    let e2 = eps * eps;
    let sum: T = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| ((p - g) * (p - g) + e2).sqrt())
        .sum();
    Ok(sum / T::of(pred.len() as f64))
}

/// Gradient of [`charbonnier`] w.r.t. `pred`.
pub fn charbonnier_backward<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let e2 = eps * eps;
    let inv = T::one() / T::of(pred.len() as f64);
    pred.zip_map(gt, |p, g| {
        let d = p - g;
        d / (d * d + e2).sqrt() * inv
    })
}

fn luma<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<T>, usize, usize)> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return shape_err(format!("census expects 3 channels, got {c}"));
    }
    if h < 3 || w < 3 {
        return shape_err(format!("census needs at least 3x3 pixels, got {h}x{w}"));
    }
    let mut g = vec![T::zero(); h * w];
    for (ch, &k) in LUMA.iter().enumerate() {
        for (o, &v) in g.iter_mut().zip(img.channel(ch)) {
            *o += T::of(k) * v;
        }
    }
    Ok((g, h, w))
}

#[inline]
fn soft_sign<T: Scalar>(d: T) -> (T, T) {
    let s2 = T::of(CENSUS_SIGMA * CENSUS_SIGMA);
    let r = (s2 + d * d).sqrt();
    (d / r, s2 / (r * r * r))
}

/// Soft census loss averaged over interior pixels and the 8 neighbors.
pub fn census<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(gt, "census")?;
    let (gp, h, w) = luma(pred)?;
    let (gg, _, _) = luma(gt)?;
    let q = T::of(CENSUS_HAMMING_SOFT);
    let mut total = T::zero();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            for &(dy, dx) in &NEIGHBORS {
                let j = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                let (cp, _) = soft_sign(gp[j] - gp[i]);
                let (cg, _) = soft_sign(gg[j] - gg[i]);
                let d = cp - cg;
                total += d * d / (q + d * d);
            }
        }
    }
    Ok(total / T::of(((h - 2) * (w - 2) * NEIGHBORS.len()) as f64))
}

/// Gradients of [`census`] w.r.t. `pred` and `gt`.
pub fn census_backward<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    pred.expect_same_shape(gt, "census")?;
    let (gp, h, w) = luma(pred)?;
    let (gg, _, _) = luma(gt)?;
    let q = T::of(CENSUS_HAMMING_SOFT);
    let norm = T::one() / T::of(((h - 2) * (w - 2) * NEIGHBORS.len()) as f64);
    let mut dlp = vec![T::zero(); h * w];
    let mut dlg = vec![T::zero(); h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            for &(dy, dx) in &NEIGHBORS {
                let j = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                let (cp, sp) = soft_sign(gp[j] - gp[i]);
                let (cg, sg) = soft_sign(gg[j] - gg[i]);
                let d = cp - cg;
                let den = q + d * d;
                let dd = T::of(2.0) * d * q / (den * den) * norm;
                dlp[j] += dd * sp;
                dlp[i] -= dd * sp;
                dlg[j] -= dd * sg;
                dlg[i] += dd * sg;
            }
        }
    }
    let spread = |dl: &[T]| {
        let mut out = Tensor::zeros(&[3, h, w]);
        for (ch, &k) in LUMA.iter().enumerate() {
            for (o, &g) in out.channel_mut(ch).iter_mut().zip(dl) {
                *o = T::of(k) * g;
            }
        }
        out
    };
    Ok((spread(&dlp), spread(&dlg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn charbonnier_closed_forms() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3);
        assert!((charbonnier(&a, &a, 1e-3).unwrap() - 1e-3).abs() < 1e-15);
        let b = a.map(|v| v + 0.1);
        let want = (0.01f64 + 1e-6).sqrt();
        assert!((charbonnier(&b, &a, 1e-3).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.100005).abs() < 1e-6);
    }

    /// Census distance evaluated per pixel with hard-coded neighbor loops,
    /// independent of the vectorized path above.
    fn census_oracle(p: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
        let (_, h, w) = p.chw().unwrap();
        let lum = |t: &Tensor<f64>, y: usize, x: usize| 0.299 * t.at3(0, y, x) + 0.587 * t.at3(1, y, x) + 0.114 * t.at3(2, y, x);
        let ss = |d: f64| d / (0.01 + d * d).sqrt();
        let mut total = 0.0;
        let mut count = 0;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for ny in y - 1..=y + 1 {
                    for nx in x - 1..=x + 1 {
                        if ny == y && nx == x {
                            continue;
                        }
                        let a = ss(lum(p, ny, nx) - lum(p, y, x));
                        let b = ss(lum(g, ny, nx) - lum(g, y, x));
                        total += (a - b).powi(2) / (0.1 + (a - b).powi(2));
                        count += 1;
                    }
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn census_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = Tensor::<f64>::from_fn(&[3, 7, 9], |_| rng.gen());
        assert_eq!(census(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.map(|v| v + 0.2);
        assert!(census(&shifted, &gt).unwrap() < 1e-3);
        let pred = Tensor::<f64>::from_fn(&[3, 7, 9], |_| rng.gen());
        let got = census(&pred, &gt).unwrap();
        assert!(got > 0.0);
        assert!((got - census_oracle(&pred, &gt)).abs() < 1e-12);
        assert!(census(&Tensor::<f64>::zeros(&[3, 2, 5]), &Tensor::zeros(&[3, 2, 5])).is_err());
    }
}

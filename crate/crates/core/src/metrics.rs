//! Image quality metrics on `[C,H,W]` images in `[0, 1]`.

use crate::error::Result;
use crate::tensor::Tensor;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Peak signal 1.0; capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over channels and every fully-contained window position, with
/// an 11x11 Gaussian window (sigma 1.5) shrunk to fit small images.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (c, h, w) = a.chw()?;
    let size = SSIM_WINDOW.min(h).min(w);
    let g = gaussian(size);
    let (ho, wo) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.channel(ch), b.channel(ch));
        for y in 0..ho {
            for x in 0..wo {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..size {
                    for dx in 0..size {
                        let k = g[dy] * g[dx];
                        let i = (y + dy) * w + x + dx;
                        let (va, vb) = (pa[i] as f64, pb[i] as f64);
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(total / (c * ho * wo) as f64)
}

/// Pixelwise mean of two frames.
pub fn frame_average(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    a.zip_map(b, |x, y| 0.5 * (x + y))
}

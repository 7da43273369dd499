//! Middlebury `.flo`, binary PPM and PNG, and flow visualization.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

/// Parses a `.flo` byte stream; `path` only labels errors.
pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField<f32>> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(12));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FLO_MAGIC.to_string(),
            found: magic.to_string(),
        });
    }
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let w = i32::from_le_bytes(word(4)) as i64;
    let h = i32::from_le_bytes(word(8)) as i64;
    if w <= 0 || h <= 0 || w.checked_mul(h).map_or(true, |n| n > (1 << 28)) {
        return Err(Error::BadDimensions {
            path: path.to_path_buf(),
            width: w,
            height: h,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let mut data = vec![0.0f32; 2 * w * h];
    let plane = w * h;
    for i in 0..plane {
        data[i] = f32::from_le_bytes(word(12 + 8 * i));
        data[plane + i] = f32::from_le_bytes(word(16 + 8 * i));
    }
    let t = Tensor::new(vec![2, h, w], data)?;
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("flow file {path:?}")));
    }
    FlowField::from_tensor_unchecked(t)
}

pub fn encode_flo(f: &FlowField<f32>) -> Vec<u8> {
    let (h, w) = (f.height(), f.width());
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in f.u().iter().zip(f.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_flo(path: &Path) -> Result<FlowField<f32>> {
    decode_flo(&std::fs::read(path)?, path)
}

pub fn write_flo(path: &Path, f: &FlowField<f32>) -> Result<()> {
    std::fs::write(path, encode_flo(f))?;
    Ok(())
}

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[3 * p + c] as f32 / 255.0
        })
    }

    /// `round(v * 255)` clamped to `[0, 255]`; NaN maps to 0.
    pub fn from_tensor(x: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = x.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("images need 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut data = vec![0u8; 3 * plane];
        for ch in 0..3 {
            for (p, &v) in x.channel(ch).iter().enumerate() {
                data[3 * p + ch] = if v.is_nan() { 0 } else { (v * 255.0).round().clamp(0.0, 255.0) as u8 };
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::CorruptHeader("PPM header ends early".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::CorruptHeader(format!("bad PPM header field at byte {start}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::UnsupportedFormat("not a binary PPM (P6)".into()));
    }
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos)?;
    let height = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if width == 0 || height == 0 || width.saturating_mul(height) > (1 << 28) {
        return Err(Error::CorruptHeader(format!("PPM dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}; only 8-bit is supported")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::CorruptHeader("missing whitespace after PPM maxval".into()));
    }
    pos += 1;
    let n = 3 * width * height;
    if bytes.len() < pos + n {
        return Err(Error::Truncated {
            path: PathBuf::from("<ppm>"),
            expected: pos + n,
            found: bytes.len(),
        });
    }
    Ok(Rgb8 {
        width,
        height,
        data: bytes[pos..pos + n].to_vec(),
    })
}

/// Header `P6\n{w} {h}\n255\n` then raw pixels.
pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(b"P6") {
        return Ok(decode_ppm(&bytes)?.to_tensor());
    }
    if bytes.starts_with(PNG_SIGNATURE) {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        return Ok(Rgb8 {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        }
        .to_tensor());
    }
    Err(Error::UnsupportedFormat(format!("{path:?} is neither PNG nor binary PPM")))
}

/// Format chosen by extension: `.png` or `.ppm`.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let rgb = Rgb8::from_tensor(img)?;
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("ppm") => {
            let mut f = std::fs::File::create(path)?;
            f.write_all(&encode_ppm(&rgb))?;
            Ok(())
        }
        Some("png") => {
            image::save_buffer_with_format(
                path,
                &rgb.data,
                rgb.width as u32,
                rgb.height as u32,
                image::ExtendedColorType::Rgb8,
                image::ImageFormat::Png,
            )?;
            Ok(())
        }
        _ => Err(Error::UnsupportedFormat(format!("cannot infer image format for {path:?}"))),
    }
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
const NCOLS: usize = RY + YG + GC + CB + BM + MR;

/// The 55-entry Middlebury color wheel.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(NCOLS);
    let ramp = |i: usize, n: usize| 255.0 * i as f64 / n as f64;
    wheel.extend((0..RY).map(|i| [255.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [255.0 - ramp(i, YG), 255.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 255.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 255.0 - ramp(i, CB), 255.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 255.0]));
    wheel.extend((0..MR).map(|i| [255.0, 0.0, 255.0 - ramp(i, MR)]));
    wheel
}

/// Wheel color at continuous position `p` (in entries, wrapping).
pub fn wheel_at(wheel: &[[f64; 3]], p: f64) -> [f64; 3] {
    let n = wheel.len() as f64;
    let p = p.rem_euclid(n);
    let k0 = p.floor() as usize % wheel.len();
    let k1 = (k0 + 1) % wheel.len();
    let f = p - p.floor();
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
    }
    out
}

/// Wheel position of direction `(u, v)`: `+x` is entry 0 (red), the
/// opposite direction half a turn later.
pub fn wheel_position(u: f64, v: f64) -> f64 {
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    (a + 1.0) / 2.0 * NCOLS as f64
}

/// Hue from direction, saturation from magnitude normalized by `max_mag`
/// (default: largest magnitude in the field). Zero flow is white; vectors
/// beyond `max_mag` are darkened.
pub fn flow_to_color(f: &FlowField<f32>, max_mag: Option<f64>) -> Tensor<f32> {
    let (h, w) = (f.height(), f.width());
    let mags: Vec<f64> = f
        .u()
        .iter()
        .zip(f.v())
        .map(|(&u, &v)| ((u as f64).powi(2) + (v as f64).powi(2)).sqrt())
        .collect();
    let max = max_mag.unwrap_or_else(|| mags.iter().cloned().fold(0.0, f64::max));
    let wheel = color_wheel();
    let plane = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..plane {
        let rad = if max > 0.0 { mags[i] / max } else { 0.0 };
        let col = wheel_at(&wheel, wheel_position(f.u()[i] as f64, f.v()[i] as f64));
        for c in 0..3 {
            let v = if rad <= 1.0 { 1.0 - rad * (1.0 - col[c]) } else { col[c] * 0.75 };
            out.data_mut()[c * plane + i] = v as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_flo_bytes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        for v in [1.0f32, -1.0, 2.5, 0.0, -3.0, 4.0, 0.5, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let f = decode_flo(&bytes, Path::new("x.flo")).unwrap();
        assert_eq!(f.at(0, 0), (1.0, -1.0));
        assert_eq!(f.at(0, 1), (2.5, 0.0));
        assert_eq!(f.at(1, 0), (-3.0, 4.0));
        assert_eq!(f.at(1, 1), (0.5, 0.25));
        assert_eq!(encode_flo(&f), bytes);
    }

    #[test]
    fn ppm_gray_128() {
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat(128u8).take(18));
        let img = decode_ppm(&bytes).unwrap();
        assert!(img.to_tensor().data().iter().all(|&v| v == 128.0 / 255.0));
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6 # made by hand\n1 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_ppm(&bytes).unwrap().data, vec![1, 2, 3]);
    }

    #[test]
    fn endpoints_encode() {
        let t = Tensor::from_fn(&[3, 1, 2], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert_eq!(Rgb8::from_tensor(&t).unwrap().data, vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn wheel_anchors() {
        let zero = flow_to_color(&FlowField::zeros(2, 2), None);
        assert!(zero.data().iter().all(|&v| v == 1.0));
        let right = flow_to_color(&FlowField::constant(2, 2, 1.0, 0.0), None);
        assert_eq!(&right.data()[..], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}

//! Synthetic LR generation: blur, resize, additive noise, JPEG.

use std::f64::consts::PI;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{from_u8, to_u8, Image};
use crate::resample::{resize, Interpolation};
use crate::rng::{chance, normal, uniform, uniform_int, weighted_index, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Simple,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurWeights {
    pub isotropic: f64,
    pub anisotropic: f64,
    pub motion: f64,
    pub none: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpWeights {
    pub nearest: f64,
    pub bilinear: f64,
    pub bicubic: f64,
    pub area: f64,
}

impl InterpWeights {
    fn as_array(&self) -> [f64; 4] {
        [self.nearest, self.bilinear, self.bicubic, self.area]
    }
}

/// Degradation ranges. Pairs are inclusive `[lo, hi]`; noise std is in
/// `[0, 1]` intensity units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub preset: Preset,
    pub scale: usize,
    pub blur: BlurWeights,
    pub kernel_size: usize,
    pub blur_sigma: (f64, f64),
    pub blur_angle: (f64, f64),
    pub motion_length: (usize, usize),
    pub motion_angle: (f64, f64),
    pub interpolation: InterpWeights,
    pub noise_std: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub jpeg_prob: f64,
}

const FULL_NOISE_CAP: f64 = 0.06;
const SIMPLE_JPEG_FLOOR: u8 = 70;

impl Default for DegradationConfig {
    fn default() -> Self {
        Self::preset(Preset::Full, 8)
    }
}

impl DegradationConfig {
    pub fn preset(preset: Preset, scale: usize) -> Self {
        let (noise_hi, jpeg_lo) = match preset {
            Preset::Full => (FULL_NOISE_CAP, 30),
            Preset::Simple => (FULL_NOISE_CAP / 2.0, SIMPLE_JPEG_FLOOR),
        };
        Self {
            preset,
            scale,
            blur: BlurWeights {
                isotropic: 0.4,
                anisotropic: 0.3,
                motion: 0.2,
                none: 0.1,
            },
            kernel_size: 21,
            blur_sigma: (0.2, 3.0),
            blur_angle: (0.0, PI),
            motion_length: (3, 11),
            motion_angle: (0.0, PI),
            interpolation: InterpWeights {
                nearest: 0.25,
                bilinear: 0.25,
                bicubic: 0.25,
                area: 0.25,
            },
            noise_std: (0.0, noise_hi),
            jpeg_quality: (jpeg_lo, 95),
            jpeg_prob: 0.5,
        }
    }

    /// Plain bicubic downsampling with no blur, noise or compression.
    pub fn bicubic_only(scale: usize) -> Self {
        Self {
            blur: BlurWeights {
                isotropic: 0.0,
                anisotropic: 0.0,
                motion: 0.0,
                none: 1.0,
            },
            interpolation: InterpWeights {
                nearest: 0.0,
                bilinear: 0.0,
                bicubic: 1.0,
                area: 0.0,
            },
            noise_std: (0.0, 0.0),
            jpeg_prob: 0.0,
            ..Self::preset(Preset::Full, scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scale == 0 {
            return bad("scale must be positive".into());
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd and >= 3, got {}", self.kernel_size));
        }
        let b = &self.blur;
        check_weights("blur", &[b.isotropic, b.anisotropic, b.motion, b.none])?;
        check_weights("interpolation", &self.interpolation.as_array())?;
        for (name, (lo, hi)) in [
            ("blur_sigma", self.blur_sigma),
            ("blur_angle", self.blur_angle),
            ("motion_angle", self.motion_angle),
            ("noise_std", self.noise_std),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] is not ordered"));
            }
        }
        if self.blur_sigma.0 <= 0.0 {
            return bad("blur_sigma must be positive".into());
        }
        if self.noise_std.0 < 0.0 {
            return bad("noise_std must be non-negative".into());
        }
        if self.motion_length.0 < 1 || self.motion_length.0 > self.motion_length.1 {
            return bad(format!("motion_length range {:?} is invalid", self.motion_length));
        }
        let (q_lo, q_hi) = self.jpeg_quality;
        if q_lo < 1 || q_hi > 100 || q_lo > q_hi {
            return bad(format!("jpeg_quality range [{q_lo}, {q_hi}] must lie in [1, 100]"));
        }
        if !(0.0..=1.0).contains(&self.jpeg_prob) {
            return bad(format!("jpeg_prob {} outside [0, 1]", self.jpeg_prob));
        }
        if self.preset == Preset::Simple {
            if self.noise_std.1 > FULL_NOISE_CAP / 2.0 {
                return bad(format!("simple preset caps noise_std at {}", FULL_NOISE_CAP / 2.0));
            }
            if self.jpeg_prob > 0.0 && q_lo < SIMPLE_JPEG_FLOOR {
                return bad(format!("simple preset requires jpeg quality >= {SIMPLE_JPEG_FLOOR}"));
            }
        }
        Ok(())
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("{name} weights must be non-negative and not all zero")));
    }
    Ok(())
}

/// Square kernel stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.taps[y * self.size + x]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    fn normalized(size: usize, mut taps: Vec<f64>) -> Self {
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        Self { size, taps }
    }
}

/// Rotated Gaussian `exp(−½ pᵀ Σ⁻¹ p)` with `Σ = R diag(σx², σy²) Rᵀ`.
pub fn gaussian_kernel(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Result<Kernel> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::Domain(format!("kernel size must be odd and >= 3, got {size}")));
    }
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(Error::Domain(format!("kernel sigmas must be positive, got {sigma_x}, {sigma_y}")));
    }
    let (s, c) = theta.sin_cos();
    let half = (size / 2) as f64;
    let mut taps = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = i as f64 - half;
        for j in 0..size {
            let x = j as f64 - half;
            let u = c * x + s * y;
            let v = -s * x + c * y;
            taps.push((-0.5 * (u * u / (sigma_x * sigma_x) + v * v / (sigma_y * sigma_y))).exp());
        }
    }
    Ok(Kernel::normalized(size, taps))
}

/// Uniform line of `length` taps at `angle` (radians, counter-clockwise from
/// the +x axis), walked one pixel at a time along the dominant axis.
pub fn motion_kernel(length: usize, angle: f64) -> Result<Kernel> {
    if length < 1 {
        return Err(Error::Domain("motion length must be at least 1".into()));
    }
    let size = length | 1;
    let center = (size / 2) as isize;
    let (dy, dx) = (-angle.sin(), angle.cos());
    let mut taps = vec![0.0; size * size];
    let x_major = dx.abs() >= dy.abs();
    for t in 0..length {
        let offset = (t as f64 - (length as f64 - 1.0) / 2.0).round();
        let (ox, oy) = if x_major {
            let step = offset * dx.signum();
            (step, step * dy / dx)
        } else {
            let step = offset * dy.signum();
            (step * dx / dy, step)
        };
        let px = (center + ox.round() as isize) as usize;
        let py = (center + oy.round() as isize) as usize;
        taps[py * size + px] += 1.0;
    }
    Ok(Kernel::normalized(size, taps))
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// 2-D correlation with reflected borders; output has the input's size.
pub fn filter2d(img: &Image, k: &Kernel) -> Image {
    let (h, w, c) = img.dims();
    let half = (k.size / 2) as isize;
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let mut acc = vec![0.0; c];
            for ky in 0..k.size {
                let sy = reflect(y as isize + ky as isize - half, h);
                for kx in 0..k.size {
                    let wt = k.at(ky, kx);
                    if wt == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kx as isize - half, w);
                    for (a, v) in acc.iter_mut().zip(img.pixel(sy, sx)) {
                        *a += wt * v;
                    }
                }
            }
            for (ch, a) in acc.into_iter().enumerate() {
                out.set(y, x, ch, a);
            }
        }
    }
    out
}

/// Baseline JPEG encode and decode at `quality`.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Domain(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let (h, w, c) = img.dims();
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(Error::Contract(format!("jpeg needs 1 or 3 channels, got {c}"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(&bytes, w as u32, h as u32, color)?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
    let raw = match c {
        1 => decoded.into_luma8().into_raw(),
        _ => decoded.into_rgb8().into_raw(),
    };
    Image::from_vec(h, w, c, raw.into_iter().map(from_u8).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlurChoice {
    None,
    Isotropic { sigma: f64 },
    Anisotropic { sigma_x: f64, sigma_y: f64, theta: f64 },
    Motion { length: usize, angle: f64 },
}

/// The random choices made by one [`degrade_traced`] call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationTrace {
    pub blur: BlurChoice,
    pub interpolation: Interpolation,
    pub noise_std: f64,
    pub jpeg_quality: Option<u8>,
}

pub fn degrade(hr: &Image, config: &DegradationConfig, rng: &mut Rng) -> Result<Image> {
    degrade_traced(hr, config, rng).map(|(img, _)| img)
}

pub fn degrade_traced(hr: &Image, config: &DegradationConfig, rng: &mut Rng) -> Result<(Image, DegradationTrace)> {
    config.validate()?;
    let (h, w, _) = hr.dims();
    let s = config.scale;
    if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
        return Err(Error::Domain(format!("{h}x{w} image is not divisible by scale {s}")));
    }

    let b = &config.blur;
    let blur = match weighted_index(rng, &[b.isotropic, b.anisotropic, b.motion, b.none]) {
        0 => BlurChoice::Isotropic {
            sigma: uniform(rng, config.blur_sigma.0, config.blur_sigma.1),
        },
        1 => BlurChoice::Anisotropic {
            sigma_x: uniform(rng, config.blur_sigma.0, config.blur_sigma.1),
            sigma_y: uniform(rng, config.blur_sigma.0, config.blur_sigma.1),
            theta: uniform(rng, config.blur_angle.0, config.blur_angle.1),
        },
        2 => BlurChoice::Motion {
            length: uniform_int(rng, config.motion_length.0 as i64, config.motion_length.1 as i64) as usize,
            angle: uniform(rng, config.motion_angle.0, config.motion_angle.1),
        },
        _ => BlurChoice::None,
    };
    let kernel = match blur {
        BlurChoice::None => None,
        BlurChoice::Isotropic { sigma } => Some(gaussian_kernel(config.kernel_size, sigma, sigma, 0.0)?),
        BlurChoice::Anisotropic { sigma_x, sigma_y, theta } => {
            Some(gaussian_kernel(config.kernel_size, sigma_x, sigma_y, theta)?)
        }
        BlurChoice::Motion { length, angle } => Some(motion_kernel(length, angle)?),
    };
    let mut out = match &kernel {
        Some(k) => filter2d(hr, k),
        None => hr.clone(),
    };

    let interpolation = Interpolation::ALL[weighted_index(rng, &config.interpolation.as_array())];
    out = resize(&out, h / s, w / s, interpolation)?;

    let noise_std = uniform(rng, config.noise_std.0, config.noise_std.1);
    if noise_std > 0.0 {
        // [0, 1] units map onto the [-1, 1] range with a factor of two.
        let scale = 2.0 * noise_std;
        for v in out.data_mut() {
            *v += scale * normal(rng);
        }
    }
    out.clamp(-1.0, 1.0);

    let jpeg_quality = if chance(rng, config.jpeg_prob) {
        let q = uniform_int(rng, config.jpeg_quality.0 as i64, config.jpeg_quality.1 as i64) as u8;
        out = jpeg_roundtrip(&out, q)?;
        Some(q)
    } else {
        None
    };
    out.clamp(-1.0, 1.0);

    Ok((
        out,
        DegradationTrace {
            blur,
            interpolation,
            noise_std,
            jpeg_quality,
        },
    ))
}

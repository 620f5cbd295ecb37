//! Separable image resampling.
//!
//! Sample positions follow the half-pixel-center convention: output index `i`
//! maps to source coordinate `(i + 0.5)·in/out − 0.5`. Borders replicate the
//! edge pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
    Area,
}

impl Interpolation {
    pub const ALL: [Interpolation; 4] = [
        Interpolation::Nearest,
        Interpolation::Bilinear,
        Interpolation::Bicubic,
        Interpolation::Area,
    ];
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Taps `(source index, weight)` for every output position along one axis.
fn axis_taps(n_in: usize, n_out: usize, interp: Interpolation) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| match interp {
            Interpolation::Nearest => {
                let s = ((i as f64 + 0.5) * ratio).floor() as isize;
                vec![(clamp_index(s, n_in), 1.0)]
            }
            Interpolation::Bilinear => {
                let u = (i as f64 + 0.5) * ratio - 0.5;
                let f = u.floor();
                let t = u - f;
                let f = f as isize;
                vec![(clamp_index(f, n_in), 1.0 - t), (clamp_index(f + 1, n_in), t)]
            }
            Interpolation::Bicubic => {
                let u = (i as f64 + 0.5) * ratio - 0.5;
                let f = u.floor() as isize;
                (f - 1..=f + 2)
                    .map(|p| (clamp_index(p, n_in), cubic_kernel(u - p as f64)))
                    .collect()
            }
            Interpolation::Area => {
                let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
                let mut taps = Vec::new();
                let mut p = lo.floor() as usize;
                while (p as f64) < hi && p < n_in {
                    let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((p, overlap / ratio));
                    }
                    p += 1;
                }
                taps
            }
        })
        .collect()
}

pub fn resize(img: &Image, out_h: usize, out_w: usize, interp: Interpolation) -> Result<Image> {
    let (h, w, c) = img.dims();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Domain(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let tx = axis_taps(w, out_w, interp);
    let ty = axis_taps(h, out_h, interp);
    let mut rows = Image::zeros(h, out_w, c);
    for y in 0..h {
        for (x, taps) in tx.iter().enumerate() {
            for ch in 0..c {
                let v = taps.iter().map(|&(s, wt)| wt * img.get(y, s, ch)).sum();
                rows.set(y, x, ch, v);
            }
        }
    }
    let mut out = Image::zeros(out_h, out_w, c);
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let v = taps.iter().map(|&(s, wt)| wt * rows.get(s, x, ch)).sum();
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_sum_to_one() {
        for interp in Interpolation::ALL {
            for (a, b) in [(8, 64), (64, 8), (10, 7), (7, 10)] {
                for taps in axis_taps(a, b, interp) {
                    let s: f64 = taps.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-12, "{interp:?} {a}->{b}: {s}");
                }
            }
        }
    }

    #[test]
    fn area_downsample_is_block_mean() {
        let mut img = Image::zeros(4, 4, 1);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let out = resize(&img, 2, 2, Interpolation::Area).unwrap();
        assert!((out.get(0, 0, 0) - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
        assert!((out.get(1, 1, 0) - (10.0 + 11.0 + 14.0 + 15.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert!(cubic_kernel(1.0).abs() < 1e-15);
        assert!(cubic_kernel(2.0).abs() < 1e-15);
        // partition of unity at any offset
        for t in [0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-1..=2).map(|p| cubic_kernel(t - p as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

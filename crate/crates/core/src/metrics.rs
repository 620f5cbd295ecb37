//! Image-quality metrics: PSNR, region PSNR over a change mask, and the
//! Fréchet distance between Gaussian fits of extracted features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::image::{ChangeMask, Image};
use crate::rng::{normals, seeded};
use crate::tensor::Tensor;

/// A metric value that may be `+∞` (perfect reconstruction).
///
/// Serializes finite values as JSON numbers and infinity as `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Score(v)),
            Raw::Text(t) if t == "inf" => Ok(Score(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad score {t:?}"))),
        }
    }
}

fn psnr_from_mse(mse: f64, data_range: f64) -> Score {
    if mse == 0.0 {
        Score(f64::INFINITY)
    } else {
        Score(10.0 * (data_range * data_range / mse).log10())
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("image dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<Score> {
    check_same(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Domain("psnr of empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    Ok(psnr_from_mse(mse, data_range))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Changed,
    Unchanged,
}

impl Region {
    pub fn contains(self, class: u8) -> bool {
        match self {
            Region::Changed => class > 0,
            Region::Unchanged => class == 0,
        }
    }
}

pub fn region_psnr(a: &Image, b: &Image, mask: &ChangeMask, region: Region, data_range: f64) -> Result<Score> {
    check_same(a, b)?;
    if (mask.height(), mask.width()) != (a.height(), a.width()) {
        return Err(Error::Contract(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            a.height(),
            a.width()
        )));
    }
    let c = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &class) in mask.data().iter().enumerate() {
        if region.contains(class) {
            for ch in 0..c {
                sum += (a.data()[p * c + ch] - b.data()[p * c + ch]).powi(2);
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::Domain(format!("{region:?} region is empty")));
    }
    Ok(psnr_from_mse(sum / count as f64, data_range))
}

/// Maps an image to a fixed-length feature vector.
pub trait Extractor {
    fn tag(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Frozen random two-layer strided conv net with global average pooling.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    tag: String,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

const TOY_HIDDEN: usize = 16;

pub fn toy_extractor(seed: u64, dim: usize) -> Result<ToyExtractor> {
    if dim < 8 {
        return Err(Error::Domain(format!("toy extractor needs d >= 8, got {dim}")));
    }
    let mut rng = seeded(seed);
    let mut draw = |shape: &[usize], scale: f64| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, normals(&mut rng, n)).map(|t| t.scale(scale))
    };
    let w1 = draw(&[TOY_HIDDEN, 3, 3, 3], 1.0 / 27f64.sqrt())?;
    let b1 = draw(&[TOY_HIDDEN], 0.1)?;
    let w2 = draw(&[dim, TOY_HIDDEN, 3, 3], 1.0 / (9.0 * TOY_HIDDEN as f64).sqrt())?;
    let b2 = draw(&[dim], 0.1)?;
    Ok(ToyExtractor {
        tag: format!("toy-{seed}-{dim}"),
        w1,
        b1,
        w2,
        b2,
    })
}

impl Extractor for ToyExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.b2.numel()
    }

    fn features(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels() != 3 {
            return Err(Error::Contract(format!("toy extractor takes 3 channels, got {}", img.channels())));
        }
        let g = Graph::inference();
        let x = g.constant(Tensor::from_images(&[img])?);
        let (w1, b1) = (g.constant(self.w1.clone()), g.constant(self.b1.clone()));
        let (w2, b2) = (g.constant(self.w2.clone()), g.constant(self.b2.clone()));
        let h = g.conv2d(x, w1, Some(b1), 2, 1)?;
        let h = g.silu(h);
        let h = g.conv2d(h, w2, Some(b2), 2, 1)?;
        let h = g.value(h);
        let (_, d, hh, ww) = h.dims4();
        let per = hh * ww;
        Ok((0..d)
            .map(|c| h.data()[c * per..(c + 1) * per].iter().sum::<f64>() / per as f64)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `d×d` covariance.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Domain(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Contract("feature vectors differ in length".into()));
        }
        let mut mu = vec![0.0; d];
        for f in features {
            for (m, v) in mu.iter_mut().zip(f) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut sigma = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mu[i];
                for j in i..d {
                    sigma[i * d + j] += di * (f[j] - mu[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = sigma[i * d + j] / (n - 1) as f64;
                sigma[i * d + j] = v;
                sigma[j * d + i] = v;
            }
        }
        Ok(Self { mu, sigma, n })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.sigma)
    }
}

pub fn feature_stats<E: Extractor + ?Sized>(images: &[Image], extractor: &E) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Domain(format!("feature statistics need at least 2 images, got {}", images.len())));
    }
    let feats = images.iter().map(|img| extractor.features(img)).collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&feats)
}

const NEG_CLAMP: f64 = -1e-8;
const NEG_FAIL: f64 = -1e-6;

/// Principal square root of a symmetric PSD matrix.
fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if !lam.is_finite() || lam < NEG_FAIL {
            return Err(Error::Numeric(format!("{what} is not positive semidefinite (eigenvalue {lam:e})")));
        }
        roots[i] = if lam < NEG_CLAMP { 0.0 } else { lam.max(0.0).sqrt() };
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `||μ1−μ2||² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`.
///
/// `Tr (Σ1Σ2)^{1/2}` is evaluated as `Tr (√Σ1 Σ2 √Σ1)^{1/2}`, which has the
/// same eigenvalues but is symmetric.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    let d = s1.dim();
    if s2.dim() != d || s1.sigma.len() != d * d || s2.sigma.len() != d * d {
        return Err(Error::Contract(format!("feature dims {} vs {}", d, s2.dim())));
    }
    let mean_term: f64 = s1.mu.iter().zip(&s2.mu).map(|(a, b)| (a - b).powi(2)).sum();
    let (a, b) = (s1.matrix(), s2.matrix());
    let root_a = psd_sqrt(a.clone(), "first covariance")?;
    psd_sqrt(b.clone(), "second covariance")?;
    let inner = &root_a * &b * &root_a;
    let cross = psd_sqrt(inner, "covariance product")?.trace();
    Ok((mean_term + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

/// One metric observation in an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub scope: String,
    pub value: Score,
    pub example_id: Option<String>,
}

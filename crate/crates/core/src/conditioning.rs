//! Condition assembly for the denoiser.
//!
//! The stacked network input has a fixed channel layout:
//!
//! | channels            | content                        |
//! |---------------------|--------------------------------|
//! | `0..3`              | noisy image (scaled by `c_in`) |
//! | `3..6`              | LR upsampled to HR size        |
//! | `6..9`              | reference image                |
//! | `9..9 + K + 1`      | one-hot change mask            |
//!
//! Disabled conditions are dropped from the stack; the remaining blocks keep
//! their relative order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ChangeMask, Image};
use crate::resample::{resize, Interpolation};
use crate::tensor::Tensor;

pub const SUPPORTED_SCALES: [usize; 5] = [1, 2, 4, 8, 16];

/// Binary class planes, stored plane-major (`[K+1][H][W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMask {
    height: usize,
    width: usize,
    planes: usize,
    data: Vec<f64>,
}

impl OneHotMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, plane: usize, y: usize, x: usize) -> f64 {
        self.data[(plane * self.height + y) * self.width + x]
    }

    /// Recovers the class map by taking the hot plane at every pixel.
    pub fn argmax(&self) -> ChangeMask {
        let hw = self.height * self.width;
        let data = (0..hw)
            .map(|p| {
                (0..self.planes)
                    .max_by(|&a, &b| self.data[a * hw + p].total_cmp(&self.data[b * hw + p]))
                    .unwrap_or(0) as u8
            })
            .collect();
        ChangeMask::from_vec(self.height, self.width, data).expect("sizes agree")
    }
}

pub fn encode_mask(mask: &ChangeMask, num_classes: usize) -> Result<OneHotMask> {
    let (h, w) = (mask.height(), mask.width());
    let planes = num_classes + 1;
    let mut data = vec![0.0; planes * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(y, x) as usize;
            if c > num_classes {
                return Err(Error::Validation(format!(
                    "mask value {c} at pixel (y={y}, x={x}) exceeds class count {num_classes}"
                )));
            }
            data[(c * h + y) * w + x] = 1.0;
        }
    }
    Ok(OneHotMask {
        height: h,
        width: w,
        planes,
        data,
    })
}

/// Bicubic upsampling of an LR image by an integer factor.
pub fn upsample_lr(lr: &Image, scale: usize) -> Result<Image> {
    if !SUPPORTED_SCALES.contains(&scale) {
        return Err(Error::Domain(format!(
            "unsupported scale {scale}; expected one of {SUPPORTED_SCALES:?}"
        )));
    }
    if scale == 1 {
        return Ok(lr.clone());
    }
    resize(lr, lr.height() * scale, lr.width() * scale, Interpolation::Bicubic)
}

/// Which conditions enter the stacked input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionSwitches {
    pub use_lr: bool,
    pub use_ref: bool,
    pub use_mask: bool,
}

impl Default for ConditionSwitches {
    fn default() -> Self {
        Self {
            use_lr: true,
            use_ref: true,
            use_mask: true,
        }
    }
}

impl ConditionSwitches {
    pub const ALL: Self = Self {
        use_lr: true,
        use_ref: true,
        use_mask: true,
    };

    /// Channel count of the stacked input for `num_classes` change classes.
    pub fn input_channels(&self, num_classes: usize) -> usize {
        3 + 3 * self.use_lr as usize + 3 * self.use_ref as usize + (num_classes + 1) * self.use_mask as usize
    }
}

/// LR, reference and change mask for one HR-sized target.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    lr_up: Image,
    reference: Image,
    mask: OneHotMask,
}

impl ConditionSet {
    pub fn new(lr_up: Image, reference: Image, mask: OneHotMask) -> Result<Self> {
        if !lr_up.same_size(&reference)
            || lr_up.height() != mask.height()
            || lr_up.width() != mask.width()
        {
            return Err(Error::Contract(format!(
                "conditions not congruent: lr_up {}x{}, ref {}x{}, mask {}x{}",
                lr_up.height(),
                lr_up.width(),
                reference.height(),
                reference.width(),
                mask.height(),
                mask.width()
            )));
        }
        if lr_up.channels() != 3 || reference.channels() != 3 {
            return Err(Error::Contract("lr_up and ref must be RGB".into()));
        }
        Ok(Self {
            lr_up,
            reference,
            mask,
        })
    }

    /// Upsamples `lr` and one-hot encodes `mask`.
    pub fn build(lr: &Image, reference: &Image, mask: &ChangeMask, scale: usize, num_classes: usize) -> Result<Self> {
        Self::new(upsample_lr(lr, scale)?, reference.clone(), encode_mask(mask, num_classes)?)
    }

    pub fn lr_up(&self) -> &Image {
        &self.lr_up
    }

    pub fn reference(&self) -> &Image {
        &self.reference
    }

    pub fn mask(&self) -> &OneHotMask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.lr_up.height()
    }

    pub fn width(&self) -> usize {
        self.lr_up.width()
    }

    pub fn with_reference(&self, reference: Image) -> Result<Self> {
        Self::new(self.lr_up.clone(), reference, self.mask.clone())
    }
}

/// Stacks the full layout `[noisy | lr_up | ref | mask]` into `[1, 10+K, H, W]`.
pub fn assemble_input(noisy: &Image, cond: &ConditionSet) -> Result<Tensor> {
    let batch = ConditionBatch::from_sets(&[cond])?;
    batch.assemble(&Tensor::from_images(&[noisy])?, ConditionSwitches::ALL)
}

/// Batched NCHW conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBatch {
    lr_up: Tensor,
    reference: Tensor,
    mask: Tensor,
}

impl ConditionBatch {
    pub fn from_sets(sets: &[&ConditionSet]) -> Result<Self> {
        let lr: Vec<&Image> = sets.iter().map(|s| &s.lr_up).collect();
        let rf: Vec<&Image> = sets.iter().map(|s| &s.reference).collect();
        let first = sets
            .first()
            .ok_or_else(|| Error::Contract("empty condition batch".into()))?;
        let (p, h, w) = (first.mask.planes, first.mask.height, first.mask.width);
        let mut mask = Vec::with_capacity(sets.len() * p * h * w);
        for s in sets {
            if (s.mask.planes, s.mask.height, s.mask.width) != (p, h, w) {
                return Err(Error::Contract("mask shapes differ within batch".into()));
            }
            mask.extend_from_slice(&s.mask.data);
        }
        Ok(Self {
            lr_up: Tensor::from_images(&lr)?,
            reference: Tensor::from_images(&rf)?,
            mask: Tensor::from_vec(&[sets.len(), p, h, w], mask)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.lr_up.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.lr_up.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.lr_up.shape()[3]
    }

    pub fn lr_up(&self) -> &Tensor {
        &self.lr_up
    }

    pub fn reference(&self) -> &Tensor {
        &self.reference
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn mask_planes(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Shape `[B, 3, H, W]` of the image being denoised.
    pub fn image_shape(&self) -> [usize; 4] {
        [self.batch(), 3, self.height(), self.width()]
    }

    pub fn item(&self, b: usize) -> ConditionBatch {
        ConditionBatch {
            lr_up: self.lr_up.item(b),
            reference: self.reference.item(b),
            mask: self.mask.item(b),
        }
    }

    /// Channel-concatenates `noisy` with the enabled conditions.
    pub fn assemble(&self, noisy: &Tensor, switches: ConditionSwitches) -> Result<Tensor> {
        let ns = noisy.shape();
        if ns.len() != 4 || ns[0] != self.batch() || ns[1] != 3 || ns[2] != self.height() || ns[3] != self.width() {
            return Err(Error::Contract(format!(
                "noisy input {ns:?} not congruent with conditions {:?}",
                self.image_shape()
            )));
        }
        let mut parts: Vec<&Tensor> = vec![noisy];
        if switches.use_lr {
            parts.push(&self.lr_up);
        }
        if switches.use_ref {
            parts.push(&self.reference);
        }
        if switches.use_mask {
            parts.push(&self.mask);
        }
        concat_channels(&parts)
    }
}

pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (b, _, h, w) = parts[0].dims4();
    let ct: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(b * ct * hw);
    for bi in 0..b {
        for t in parts {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::from_vec(&[b, ct, h, w], data)
}

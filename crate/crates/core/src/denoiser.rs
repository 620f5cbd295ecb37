//! The change-aware U-Net.
//!
//! Encoder blocks see only the stacked input and the noise-level embedding.
//! Each decoder block is additionally modulated by two spatial feature
//! transforms: a semantic one driven by (mask ⊕ upsampled LR) and a texture
//! one driven by (mask ⊕ reference), applied in that order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::conditioning::{ConditionBatch, ConditionSwitches};
use crate::edm::Network;
use crate::error::{Error, Result};
use crate::rng::{normals, seeded, Rng};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftMode {
    /// Heads see guidance and decoder features concatenated.
    Enhanced,
    /// Heads see guidance features only.
    Original,
}

/// Which spatial feature transforms the decoder carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSwitches {
    pub semantic_sft: bool,
    pub ref_texture_sft: bool,
    pub sft_mode: SftMode,
}

impl Default for DecoderSwitches {
    fn default() -> Self {
        Self {
            semantic_sft: true,
            ref_texture_sft: true,
            sft_mode: SftMode::Enhanced,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub attn_levels: Vec<usize>,
    pub num_heads: usize,
    pub dropout: f64,
    pub num_classes: usize,
    /// Width of the noise-level embedding.
    pub emb_channels: usize,
    /// Channels of the guidance features fed to each transform.
    pub guidance_channels: usize,
    /// Hidden width of the transform heads.
    pub sft_hidden: usize,
    pub conditions: ConditionSwitches,
    pub decoder: DecoderSwitches,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            attn_levels: vec![1, 2],
            num_heads: 2,
            dropout: 0.2,
            num_classes: 6,
            emb_channels: 128,
            guidance_channels: 16,
            sft_hidden: 32,
            conditions: ConditionSwitches::ALL,
            decoder: DecoderSwitches::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn num_levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn input_channels(&self) -> usize {
        self.conditions.input_channels(self.num_classes)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_levels() < 2 {
            return bad(format!("need at least 2 levels, got {}", self.num_levels()));
        }
        if self.base_channels == 0 || self.channel_mult.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad(format!("base_channels {} must be even for the sinusoidal embedding", self.base_channels));
        }
        if let Some(l) = self.attn_levels.iter().find(|&&l| l >= self.num_levels()) {
            return bad(format!("attention level {l} outside 0..{}", self.num_levels()));
        }
        if self.num_heads == 0 {
            return bad("num_heads must be positive".into());
        }
        for &l in &self.attn_levels {
            if self.level_channels(l) % self.num_heads != 0 {
                return bad(format!(
                    "level {l} has {} channels, not divisible by {} heads",
                    self.level_channels(l),
                    self.num_heads
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_classes < 1 || self.num_classes > 255 {
            return bad(format!("num_classes {} out of range", self.num_classes));
        }
        if !self.conditions.use_lr {
            return bad("the LR condition cannot be disabled".into());
        }
        if self.emb_channels == 0 || self.guidance_channels == 0 || self.sft_hidden == 0 {
            return bad("embedding, guidance and head widths must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Largest group count `≤ min(32, C/4)` that divides `C`.
pub fn norm_groups(channels: usize) -> usize {
    let cap = (channels / 4).clamp(1, 32);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// `[sin(c·f_0) .. sin(c·f_{h−1}), cos(c·f_0) .. cos(c·f_{h−1})]` with
/// `f_j = 10000^{−j/h}` and `h = dim/2`.
pub fn sinusoidal_features(c_noise: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dimension {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freqs = (0..half).map(|j| (1.0f64 / 10000.0).powf(j as f64 / half as f64));
    let angles: Vec<f64> = freqs.map(|f| c_noise * f).collect();
    Ok(angles.iter().map(|a| a.sin()).chain(angles.iter().map(|a| a.cos())).collect())
}

/// Guidance source for a spatial feature transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceTag {
    Semantic,
    RefTexture,
}

impl GuidanceTag {
    fn key(self) -> &'static str {
        match self {
            GuidanceTag::Semantic => "sem",
            GuidanceTag::RefTexture => "tex",
        }
    }

    fn partner(self, cond: &ConditionBatch) -> &Tensor {
        match self {
            GuidanceTag::Semantic => cond.lr_up(),
            GuidanceTag::RefTexture => cond.reference(),
        }
    }
}

/// Parameter lookup under a dotted path prefix.
#[derive(Clone)]
pub struct Scope<'a> {
    g: &'a Graph,
    params: &'a BTreeMap<String, Tensor>,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(g: &'a Graph, params: &'a BTreeMap<String, Tensor>, prefix: &str) -> Self {
        Self {
            g,
            params,
            prefix: prefix.to_string(),
        }
    }

    pub fn child(&self, name: &str) -> Scope<'a> {
        Scope {
            g: self.g,
            params: self.params,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        let key = join(&self.prefix, name);
        let t = self
            .params
            .get(&key)
            .ok_or_else(|| Error::Contract(format!("missing parameter {key}")))?;
        Ok(self.g.param(&key, t))
    }

    fn conv(&self, x: Var, stride: usize) -> Result<Var> {
        let w = self.p("weight")?;
        let k = self.g.shape(w)[2];
        let b = self.p("bias")?;
        self.g.conv2d(x, w, Some(b), stride, k / 2)
    }

    fn norm(&self, x: Var) -> Result<Var> {
        let c = self.g.shape(x)[1];
        self.g.group_norm(x, norm_groups(c), self.p("gamma")?, self.p("beta")?, GN_EPS)
    }

    fn linear(&self, x: Var) -> Result<Var> {
        self.g.linear(x, self.p("weight")?, self.p("bias")?)
    }

    fn check_finite(&self, v: Var) -> Result<Var> {
        if self.g.value(v).is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("non-finite activation in {}", self.prefix)))
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `F' = (1 + Δγ(h))·F_i + β(h)` with `h = F_e ⊕ F_i` (enhanced) or
/// `h = F_e` (original). Δγ and β share one hidden conv layer.
pub fn sft_modulate(s: &Scope, f_i: Var, f_e: Var, mode: SftMode) -> Result<Var> {
    let (si, se) = (s.g.shape(f_i), s.g.shape(f_e));
    if si.len() != 4 || se.len() != 4 || si[0] != se[0] || si[2..] != se[2..] {
        return Err(Error::Contract(format!("sft: features {si:?} and guidance {se:?} not congruent")));
    }
    let h = match mode {
        SftMode::Enhanced => s.g.concat_channels(&[f_e, f_i])?,
        SftMode::Original => f_e,
    };
    let hidden = s.g.silu(s.child("shared").conv(h, 1)?);
    let dgamma = s.child("gamma").conv(hidden, 1)?;
    let beta = s.child("beta").conv(hidden, 1)?;
    s.g.affine_modulate(f_i, dgamma, beta)
}

/// Conv stack over `[mask | partner]` that reaches decoder level `level`
/// through `level` stride-2 convolutions.
pub fn guidance_extract(s: &Scope, cond: &ConditionBatch, tag: GuidanceTag, level: usize) -> Result<Var> {
    let mask = s.g.constant(cond.mask().clone());
    let partner = s.g.constant(tag.partner(cond).clone());
    let x = s.g.concat_channels(&[mask, partner])?;
    let mut h = s.g.silu(s.child("conv_in").conv(x, 1)?);
    for d in 0..level {
        h = s.g.silu(s.child(&format!("down{d}")).conv(h, 2)?);
    }
    s.child("conv_out").conv(h, 1)
}

/// `x + proj(MHA(qkv(GN(x))))`.
fn attention_block(s: &Scope, x: Var, heads: usize) -> Result<Var> {
    let h = s.child("norm").norm(x)?;
    let qkv = s.child("qkv").conv(h, 1)?;
    let a = s.g.attention(qkv, heads)?;
    let out = s.child("proj").conv(a, 1)?;
    s.g.add(x, out)
}

/// Guidance for one decoder block.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockGuidance {
    pub semantic: Option<Var>,
    pub ref_texture: Option<Var>,
}

/// `GN → (1+w)·f+b → SiLU → dropout → conv [→ SFTs] → + skip [→ attention]`.
fn res_block(
    s: &Scope,
    x: Var,
    emb: Var,
    config: &DenoiserConfig,
    attn: bool,
    guidance: Option<BlockGuidance>,
) -> Result<Var> {
    let g = s.g;
    let h = s.child("norm").norm(x)?;
    let wb = s.child("emb").linear(emb)?;
    let h = g.modulate(h, wb)?;
    let h = g.silu(h);
    let h = g.dropout(h, config.dropout);
    let mut h = s.child("conv").conv(h, 1)?;
    if let Some(gd) = guidance {
        if let Some(fe) = gd.semantic {
            h = sft_modulate(&s.child("sft_sem"), h, fe, config.decoder.sft_mode)?;
        }
        if let Some(fe) = gd.ref_texture {
            h = sft_modulate(&s.child("sft_tex"), h, fe, config.decoder.sft_mode)?;
        }
    }
    let skip = if s.params.contains_key(&join(s.path(), "skip.weight")) {
        s.child("skip").conv(x, 1)?
    } else {
        x
    };
    let mut out = g.add(h, skip)?;
    if attn {
        out = attention_block(&s.child("attn"), out, config.num_heads)?;
    }
    s.check_finite(out)
}

/// Learnable parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    /// `N(0, 1/fan_in)`.
    Fan(usize),
}

struct Builder<'a> {
    rng: &'a mut Rng,
    tensors: BTreeMap<String, Tensor>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, 1.0),
            Init::Fan(fan) => Tensor::from_vec(shape, normals(self.rng, n))
                .expect("shape matches")
                .scale(1.0 / (fan as f64).sqrt()),
        };
        self.tensors.insert(name, t);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let init = if zero { Init::Zero } else { Init::Fan(cin * k * k) };
        self.add(join(prefix, "weight"), &[cout, cin, k, k], init);
        self.add(join(prefix, "bias"), &[cout], Init::Zero);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.add(join(prefix, "gamma"), &[c], Init::One);
        self.add(join(prefix, "beta"), &[c], Init::Zero);
    }

    fn linear(&mut self, prefix: &str, cin: usize, cout: usize, zero: bool) {
        let init = if zero { Init::Zero } else { Init::Fan(cin) };
        self.add(join(prefix, "weight"), &[cout, cin], init);
        self.add(join(prefix, "bias"), &[cout], Init::Zero);
    }

    fn sft(&mut self, prefix: &str, c: usize, config: &DenoiserConfig) {
        let cin = match config.decoder.sft_mode {
            SftMode::Enhanced => config.guidance_channels + c,
            SftMode::Original => config.guidance_channels,
        };
        self.conv(&join(prefix, "shared"), cin, config.sft_hidden, 3, false);
        self.conv(&join(prefix, "gamma"), config.sft_hidden, c, 3, true);
        self.conv(&join(prefix, "beta"), config.sft_hidden, c, 3, true);
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, config: &DenoiserConfig, attn: bool) {
        self.norm(&join(prefix, "norm"), cin);
        self.linear(&join(prefix, "emb"), config.emb_channels, 2 * cin, true);
        self.conv(&join(prefix, "conv"), cin, cout, 3, false);
        if cin != cout {
            self.conv(&join(prefix, "skip"), cin, cout, 1, false);
        }
        if attn {
            self.norm(&join(prefix, "attn.norm"), cout);
            self.conv(&join(prefix, "attn.qkv"), cout, 3 * cout, 1, false);
            self.conv(&join(prefix, "attn.proj"), cout, cout, 1, true);
        }
    }

    fn extractor(&mut self, prefix: &str, level: usize, config: &DenoiserConfig) {
        let gc = config.guidance_channels;
        self.conv(&join(prefix, "conv_in"), config.num_classes + 1 + 3, gc, 3, false);
        for d in 0..level {
            self.conv(&join(prefix, &format!("down{d}")), gc, gc, 3, false);
        }
        self.conv(&join(prefix, "conv_out"), gc, gc, 3, false);
    }
}

impl DenoiserParams {
    /// Fresh parameters. Modulation projections, transform heads, attention
    /// output projections and the output conv start at zero.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut b = Builder {
            rng: &mut rng,
            tensors: BTreeMap::new(),
        };
        let (base, emb) = (config.base_channels, config.emb_channels);
        b.linear("time.fc0", base, emb, false);
        b.linear("time.fc1", emb, emb, false);
        b.conv("conv_in", config.input_channels(), base, 3, false);
        let levels = config.num_levels();
        let mut ch = base;
        for l in 0..levels {
            let out = config.level_channels(l);
            b.block(&format!("enc.{l}"), ch, out, config, config.attn_levels.contains(&l));
            ch = out;
        }
        for l in (0..levels).rev() {
            let out = config.level_channels(l);
            let prefix = format!("dec.{l}");
            b.block(&prefix, ch + config.level_channels(l), out, config, config.attn_levels.contains(&l));
            if config.decoder.semantic_sft {
                b.sft(&join(&prefix, "sft_sem"), out, config);
                b.extractor(&format!("guide.sem.{l}"), l, config);
            }
            if config.decoder.ref_texture_sft {
                b.sft(&join(&prefix, "sft_tex"), out, config);
                b.extractor(&format!("guide.tex.{l}"), l, config);
            }
            ch = out;
        }
        b.norm("out.norm", ch);
        b.conv("out.conv", ch, 3, 3, true);
        Ok(Self {
            config: config.clone(),
            tensors: b.tensors,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Noise-level embedding `SiLU(fc1(SiLU(fc0(sin/cos(c_noise)))))`,
    /// one row per batch item.
    pub fn timestep_embed(&self, g: &Graph, c_noise: &[f64]) -> Result<Var> {
        let dim = self.config.base_channels;
        let mut feats = Vec::with_capacity(c_noise.len() * dim);
        for &c in c_noise {
            feats.extend(sinusoidal_features(c, dim)?);
        }
        let s = Scope::new(g, &self.tensors, "time");
        let x = g.constant(Tensor::from_vec(&[c_noise.len(), dim], feats)?);
        let h = g.silu(s.child("fc0").linear(x)?);
        Ok(g.silu(s.child("fc1").linear(h)?))
    }

    /// U-Net pass over an already stacked input.
    pub fn forward_stacked(&self, g: &Graph, input: &Tensor, c_noise: &[f64], cond: &ConditionBatch) -> Result<Var> {
        let cfg = &self.config;
        let (bn, cin, h, w) = input.dims4();
        if cin != cfg.input_channels() {
            return Err(Error::Contract(format!(
                "stacked input has {cin} channels, config expects {}",
                cfg.input_channels()
            )));
        }
        let m = cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Contract(format!("{h}x{w} input not divisible by {m}")));
        }
        if c_noise.len() != bn || cond.batch() != bn || (cond.height(), cond.width()) != (h, w) {
            return Err(Error::Contract("batch or spatial size disagrees with conditions".into()));
        }
        if cond.mask_planes() != cfg.num_classes + 1 {
            return Err(Error::Contract(format!(
                "mask has {} planes, config expects {}",
                cond.mask_planes(),
                cfg.num_classes + 1
            )));
        }
        let root = Scope::new(g, &self.tensors, "");
        let emb = self.timestep_embed(g, c_noise)?;
        let mut x = root.child("conv_in").conv(g.constant(input.clone()), 1)?;
        let levels = cfg.num_levels();
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                x = g.avg_pool2(x)?;
            }
            let attn = cfg.attn_levels.contains(&l);
            x = res_block(&root.child(&format!("enc.{l}")), x, emb, cfg, attn, None)?;
            skips.push(x);
        }
        for l in (0..levels).rev() {
            if l + 1 < levels {
                x = g.upsample2(x)?;
            }
            let mut gd = BlockGuidance::default();
            if cfg.decoder.semantic_sft {
                let s = root.child(&format!("guide.{}.{l}", GuidanceTag::Semantic.key()));
                gd.semantic = Some(s.check_finite(guidance_extract(&s, cond, GuidanceTag::Semantic, l)?)?);
            }
            if cfg.decoder.ref_texture_sft {
                let s = root.child(&format!("guide.{}.{l}", GuidanceTag::RefTexture.key()));
                gd.ref_texture = Some(s.check_finite(guidance_extract(&s, cond, GuidanceTag::RefTexture, l)?)?);
            }
            let cat = g.concat_channels(&[x, skips[l]])?;
            let attn = cfg.attn_levels.contains(&l);
            x = res_block(&root.child(&format!("dec.{l}")), cat, emb, cfg, attn, Some(gd))?;
        }
        let out = root.child("out");
        let h = g.silu(out.child("norm").norm(x)?);
        let y = out.child("conv").conv(h, 1)?;
        out.check_finite(y)
    }
}

impl Network for DenoiserParams {
    fn raw(&self, g: &Graph, scaled_x: &Tensor, c_noise: &[f64], cond: &ConditionBatch) -> Result<Var> {
        let stacked = cond.assemble(scaled_x, self.config.conditions)?;
        self.forward_stacked(g, &stacked, c_noise, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{encode_mask, ConditionSet};
    use crate::image::{ChangeMask, Image};
    use crate::rng::uniform;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            channel_mult: vec![1, 2],
            attn_levels: vec![1],
            num_heads: 2,
            dropout: 0.0,
            num_classes: 2,
            emb_channels: 8,
            guidance_channels: 4,
            sft_hidden: 4,
            ..DenoiserConfig::default()
        }
    }

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, normals(rng, n)).unwrap()
    }

    fn cond(seed: u64, h: usize, w: usize, k: usize) -> ConditionBatch {
        let mut rng = seeded(seed);
        let mut img = || {
            let d = (0..h * w * 3).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            Image::from_vec(h, w, 3, d).unwrap()
        };
        let (a, b) = (img(), img());
        let mask = ChangeMask::from_vec(h, w, (0..h * w).map(|i| (i % (k + 1)) as u8).collect()).unwrap();
        let set = ConditionSet::new(a, b, encode_mask(&mask, k).unwrap()).unwrap();
        ConditionBatch::from_sets(&[&set]).unwrap()
    }

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(256), 32);
        assert_eq!(norm_groups(96), 24);
        assert_eq!(norm_groups(3), 1);
        assert_eq!(norm_groups(20), 5);
    }

    #[test]
    fn sinusoid_at_unit_sigma() {
        let f = sinusoidal_features(0.0, 8).unwrap();
        assert_eq!(f, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(sinusoidal_features(0.1, 7), Err(Error::Config(_))));
        let a = sinusoidal_features(0.1f64.ln() / 4.0, 8).unwrap();
        let b = sinusoidal_features(10f64.ln() / 4.0, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn embedding_is_deterministic() {
        let p = DenoiserParams::init(&tiny(), 1).unwrap();
        let g = Graph::inference();
        let a = p.timestep_embed(&g, &[0.3]).unwrap();
        let b = p.timestep_embed(&g, &[0.3]).unwrap();
        assert_eq!(*g.value(a), *g.value(b));
        assert_eq!(g.shape(a), vec![1, 8]);
    }

    fn conv_params(prefix: &str, w: Tensor, b: Tensor) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.weight"), w), (format!("{prefix}.bias"), b)]
    }

    fn zero_sft(c: usize, ge: usize, hidden: usize, mode: SftMode) -> BTreeMap<String, Tensor> {
        let cin = if mode == SftMode::Enhanced { ge + c } else { ge };
        let mut rng = seeded(5);
        let mut m = BTreeMap::new();
        m.extend(conv_params("shared", rand_tensor(&mut rng, &[hidden, cin, 3, 3]), rand_tensor(&mut rng, &[hidden])));
        m.extend(conv_params("gamma", Tensor::zeros(&[c, hidden, 3, 3]), Tensor::zeros(&[c])));
        m.extend(conv_params("beta", Tensor::zeros(&[c, hidden, 3, 3]), Tensor::zeros(&[c])));
        m
    }

    #[test]
    fn fresh_sft_is_identity() {
        let mut rng = seeded(2);
        for mode in [SftMode::Enhanced, SftMode::Original] {
            let params = zero_sft(3, 2, 4, mode);
            for _ in 0..100 {
                let g = Graph::inference();
                let s = Scope::new(&g, &params, "");
                let fi = rand_tensor(&mut rng, &[1, 3, 4, 5]);
                let fe = g.constant(rand_tensor(&mut rng, &[1, 2, 4, 5]));
                let out = sft_modulate(&s, g.constant(fi.clone()), fe, mode).unwrap();
                assert_eq!(*g.value(out), fi);
            }
        }
    }

    #[test]
    fn forced_gamma_doubles_features() {
        let mut params = zero_sft(2, 2, 3, SftMode::Enhanced);
        params.insert("gamma.bias".into(), Tensor::full(&[2], 1.0));
        let g = Graph::inference();
        let s = Scope::new(&g, &params, "");
        let fi = rand_tensor(&mut seeded(3), &[1, 2, 3, 3]);
        let fe = g.constant(rand_tensor(&mut seeded(4), &[1, 2, 3, 3]));
        let out = sft_modulate(&s, g.constant(fi.clone()), fe, SftMode::Enhanced).unwrap();
        assert_eq!(*g.value(out), fi.scale(2.0));
    }

    /// One channel each, 1×1 map: only the centre tap of each 3×3 kernel acts.
    fn one_by_one_sft(mode: SftMode) -> BTreeMap<String, Tensor> {
        let centre = |vals: &[f64], cout: usize, cin: usize| {
            let mut w = Tensor::zeros(&[cout, cin, 3, 3]);
            for (i, v) in vals.iter().enumerate() {
                w.data_mut()[i * 9 + 4] = *v;
            }
            w
        };
        let shared = match mode {
            SftMode::Enhanced => centre(&[0.5, -0.25], 1, 2),
            SftMode::Original => centre(&[0.5], 1, 1),
        };
        let mut m = BTreeMap::new();
        m.extend(conv_params("shared", shared, Tensor::full(&[1], 0.1)));
        m.extend(conv_params("gamma", centre(&[0.8], 1, 1), Tensor::full(&[1], 0.2)));
        m.extend(conv_params("beta", centre(&[-0.6], 1, 1), Tensor::full(&[1], 0.05)));
        m
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn run_sft(params: &BTreeMap<String, Tensor>, fi: f64, fe: f64, mode: SftMode) -> f64 {
        let g = Graph::inference();
        let s = Scope::new(&g, params, "");
        let a = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![fi]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![fe]).unwrap());
        g.value(sft_modulate(&s, a, b, mode).unwrap()).data()[0]
    }

    #[test]
    fn sft_one_by_one_by_hand() {
        let (fi, fe) = (0.7, -1.2);
        let h = silu(0.5 * fe - 0.25 * fi + 0.1);
        let want = (1.0 + 0.8 * h + 0.2) * fi + (-0.6 * h + 0.05);
        let got = run_sft(&one_by_one_sft(SftMode::Enhanced), fi, fe, SftMode::Enhanced);
        assert!((got - want).abs() < 1e-12);

        let h = silu(0.5 * fe + 0.1);
        let want = (1.0 + 0.8 * h + 0.2) * fi + (-0.6 * h + 0.05);
        let got = run_sft(&one_by_one_sft(SftMode::Original), fi, fe, SftMode::Original);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn original_heads_ignore_decoder_features() {
        let params = one_by_one_sft(SftMode::Original);
        let fe = 0.4;
        // F' = γ·F_i + β is affine in F_i with fixed (γ, β) when heads ignore F_i.
        let (y0, y1, y2) = (
            run_sft(&params, 0.0, fe, SftMode::Original),
            run_sft(&params, 1.0, fe, SftMode::Original),
            run_sft(&params, 2.0, fe, SftMode::Original),
        );
        assert!(((y2 - y1) - (y1 - y0)).abs() < 1e-12);
        let params = one_by_one_sft(SftMode::Enhanced);
        let (y0, y1, y2) = (
            run_sft(&params, 0.0, fe, SftMode::Enhanced),
            run_sft(&params, 1.0, fe, SftMode::Enhanced),
            run_sft(&params, 2.0, fe, SftMode::Enhanced),
        );
        assert!(((y2 - y1) - (y1 - y0)).abs() > 1e-6);
    }

    #[test]
    fn sft_rejects_spatial_mismatch() {
        let params = zero_sft(2, 2, 3, SftMode::Enhanced);
        let g = Graph::inference();
        let s = Scope::new(&g, &params, "");
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(sft_modulate(&s, a, b, SftMode::Enhanced), Err(Error::Contract(_))));
    }

    #[test]
    fn guidance_one_by_one_by_hand() {
        // K = 1: input planes [unchanged, class 1, r, g, b].
        let k = 1;
        let lr = Image::from_vec(1, 1, 3, vec![0.2, -0.4, 0.6]).unwrap();
        let reference = Image::from_vec(1, 1, 3, vec![0.9, 0.1, -0.3]).unwrap();
        let mask = ChangeMask::from_vec(1, 1, vec![1]).unwrap();
        let set = ConditionSet::new(lr, reference, encode_mask(&mask, k).unwrap()).unwrap();
        let c = ConditionBatch::from_sets(&[&set]).unwrap();
        let mut w_in = Tensor::zeros(&[1, 5, 3, 3]);
        let win = [0.3, -0.2, 0.5, 0.25, -1.0];
        for (i, v) in win.iter().enumerate() {
            w_in.data_mut()[i * 9 + 4] = *v;
        }
        let mut w_out = Tensor::zeros(&[1, 1, 3, 3]);
        w_out.data_mut()[4] = 2.0;
        let mut params = BTreeMap::new();
        params.extend(conv_params("g.conv_in", w_in, Tensor::full(&[1], 0.1)));
        params.extend(conv_params("g.conv_out", w_out, Tensor::full(&[1], -0.5)));
        let g = Graph::inference();
        let s = Scope::new(&g, &params, "g");
        for (tag, rgb) in [(GuidanceTag::Semantic, [0.2, -0.4, 0.6]), (GuidanceTag::RefTexture, [0.9, 0.1, -0.3])] {
            let planes = [0.0, 1.0, rgb[0], rgb[1], rgb[2]];
            let pre: f64 = planes.iter().zip(&win).map(|(a, b)| a * b).sum::<f64>() + 0.1;
            let want = 2.0 * silu(pre) - 0.5;
            let out = guidance_extract(&s, &c, tag, 0).unwrap();
            assert!((g.value(out).data()[0] - want).abs() < 1e-12);
            let again = guidance_extract(&s, &c, tag, 0).unwrap();
            assert_eq!(*g.value(out), *g.value(again));
        }
    }

    #[test]
    fn guidance_matches_every_level_size() {
        let cfg = DenoiserConfig {
            channel_mult: vec![1, 2, 2],
            ..tiny()
        };
        let p = DenoiserParams::init(&cfg, 3).unwrap();
        let c = cond(1, 16, 16, cfg.num_classes);
        let g = Graph::inference();
        for l in 0..3 {
            for (tag, key) in [(GuidanceTag::Semantic, "sem"), (GuidanceTag::RefTexture, "tex")] {
                let s = Scope::new(&g, &p.tensors, &format!("guide.{key}.{l}"));
                let v = guidance_extract(&s, &c, tag, l).unwrap();
                assert_eq!(g.shape(v), vec![1, cfg.guidance_channels, 16 >> l, 16 >> l]);
            }
        }
    }

    #[test]
    fn single_head_attention_on_one_pixel_returns_values() {
        let c = 2;
        let mut rng = seeded(8);
        let qkv_w = rand_tensor(&mut rng, &[3 * c, c, 1, 1]);
        let mut eye = Tensor::zeros(&[c, c, 1, 1]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        let mut params = BTreeMap::new();
        params.insert("a.norm.gamma".to_string(), Tensor::full(&[c], 1.0));
        params.insert("a.norm.beta".to_string(), Tensor::zeros(&[c]));
        params.extend(conv_params("a.qkv", qkv_w.clone(), Tensor::zeros(&[3 * c])));
        params.extend(conv_params("a.proj", eye, Tensor::zeros(&[c])));
        let g = Graph::inference();
        let s = Scope::new(&g, &params, "a");
        let x = Tensor::from_vec(&[1, c, 1, 1], vec![0.3, -0.8]).unwrap();
        let out = attention_block(&s, g.constant(x.clone()), 1).unwrap();
        // GN over one group of two values
        let mean = (0.3 - 0.8) / 2.0;
        let var: f64 = ((0.3f64 - mean).powi(2) + (-0.8f64 - mean).powi(2)) / 2.0;
        let n: Vec<f64> = [0.3, -0.8].iter().map(|v| (v - mean) / (var + GN_EPS).sqrt()).collect();
        for ch in 0..c {
            let v: f64 = (0..c).map(|j| qkv_w.data()[(2 * c + ch) * c + j] * n[j]).sum();
            assert!((g.value(out).data()[ch] - (x.data()[ch] + v)).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_block_branches_pass_input_through() {
        let cfg = tiny();
        let mut p = DenoiserParams::init(&cfg, 4).unwrap();
        for (k, t) in p.tensors.iter_mut() {
            if k.starts_with("enc.0.conv") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let g = Graph::inference();
        let s = Scope::new(&g, &p.tensors, "enc.0");
        let x = rand_tensor(&mut seeded(1), &[1, 8, 4, 4]);
        let emb = g.constant(rand_tensor(&mut seeded(2), &[1, 8]));
        let out = res_block(&s, g.constant(x.clone()), emb, &cfg, false, None).unwrap();
        assert_eq!(*g.value(out), x);
    }

    #[test]
    fn fresh_decoder_sfts_are_transparent() {
        let cfg = tiny();
        let with = DenoiserParams::init(&cfg, 6).unwrap();
        let plain_cfg = DenoiserConfig {
            decoder: DecoderSwitches {
                semantic_sft: false,
                ref_texture_sft: false,
                ..cfg.decoder
            },
            ..cfg.clone()
        };
        let mut plain = DenoiserParams::init(&plain_cfg, 6).unwrap();
        for (k, t) in plain.tensors.iter_mut() {
            *t = with.tensors[k].clone();
        }
        // Give the output conv weight so the comparison is not trivially zero.
        for p in [&mut plain] {
            let w = p.tensors.get_mut("out.conv.weight").unwrap();
            *w = rand_tensor(&mut seeded(9), w.shape());
        }
        let mut with = with;
        with.tensors.insert("out.conv.weight".into(), plain.tensors["out.conv.weight"].clone());
        let c = cond(2, 8, 8, cfg.num_classes);
        let x = rand_tensor(&mut seeded(3), &[1, 3, 8, 8]);
        let g = Graph::inference();
        let a = g.value(with.raw(&g, &x, &[0.1], &c).unwrap());
        let b = g.value(plain.raw(&g, &x, &[0.1], &c).unwrap());
        assert!(a.max_abs_diff(&b) == 0.0);
        assert!(b.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn ablation_switches_shape_parameters() {
        let cfg = DenoiserConfig {
            decoder: DecoderSwitches {
                semantic_sft: false,
                ..DecoderSwitches::default()
            },
            ..tiny()
        };
        let p = DenoiserParams::init(&cfg, 1).unwrap();
        assert!(p.tensors.keys().all(|k| !k.contains("sft_sem") && !k.contains("guide.sem")));
        assert!(p.tensors.keys().any(|k| k.contains("sft_tex")));
        let no_ref = DenoiserConfig {
            conditions: ConditionSwitches {
                use_ref: false,
                ..ConditionSwitches::ALL
            },
            ..tiny()
        };
        let p = DenoiserParams::init(&no_ref, 1).unwrap();
        assert_eq!(p.tensors["conv_in.weight"].shape()[1], 3 + 3 + 3);
        let no_lr = DenoiserConfig {
            conditions: ConditionSwitches {
                use_lr: false,
                ..ConditionSwitches::ALL
            },
            ..tiny()
        };
        assert!(matches!(DenoiserParams::init(&no_lr, 1), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = DenoiserConfig {
            dropout: 0.2,
            ..tiny()
        };
        let mut p = DenoiserParams::init(&cfg, 2).unwrap();
        let w = p.tensors.get_mut("out.conv.weight").unwrap();
        *w = rand_tensor(&mut seeded(1), w.shape());
        for hw in [32, 64] {
            let c = cond(4, hw, hw, cfg.num_classes);
            let x = rand_tensor(&mut seeded(5), &[1, 3, hw, hw]);
            let g = Graph::inference();
            let a = p.raw(&g, &x, &[0.2], &c).unwrap();
            let b = p.raw(&g, &x, &[0.2], &c).unwrap();
            assert_eq!(g.shape(a), vec![1, 3, hw, hw]);
            assert_eq!(*g.value(a), *g.value(b));
            assert!(g.value(a).is_finite());
        }
    }

    #[test]
    fn non_finite_activation_names_module() {
        let cfg = tiny();
        let mut p = DenoiserParams::init(&cfg, 2).unwrap();
        p.tensors.get_mut("enc.1.conv.bias").unwrap().data_mut()[0] = f64::NAN;
        let c = cond(4, 8, 8, cfg.num_classes);
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let g = Graph::inference();
        match p.raw(&g, &x, &[0.0], &c) {
            Err(Error::Numeric(m)) => assert!(m.contains("enc.1"), "{m}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn config_hash_tracks_fields() {
        let a = tiny();
        let b = DenoiserConfig {
            num_heads: 1,
            ..tiny()
        };
        assert_eq!(a.hash(), tiny().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut p = DenoiserParams::init(&cfg, 11).unwrap();
        // Move zero-initialised tensors off zero so every path carries gradient.
        let mut rng = seeded(12);
        for t in p.tensors.values_mut() {
            let noise = rand_tensor(&mut rng, t.shape()).scale(0.2);
            t.add_assign(&noise);
        }
        let c = cond(13, 4, 4, cfg.num_classes);
        let x = rand_tensor(&mut seeded(14), &[1, 3, 4, 4]);
        let probe = rand_tensor(&mut seeded(15), &[1, 3, 4, 4]);
        let loss_of = |p: &DenoiserParams| {
            let g = Graph::inference();
            let out = p.raw(&g, &x, &[0.3], &c).unwrap();
            g.value(g.dot_const(out, &probe).unwrap()).data()[0]
        };
        let g = Graph::new();
        let out = p.raw(&g, &x, &[0.3], &c).unwrap();
        let grads = g.backward(g.dot_const(out, &probe).unwrap()).unwrap();

        let keys: Vec<String> = p.tensors.keys().cloned().collect();
        let eps = 1e-4;
        let mut checked = 0;
        for (i, key) in keys.iter().enumerate().filter(|(i, _)| i % 3 == 0) {
            let n = p.tensors[key].numel();
            let idx = (i * 7) % n;
            let analytic = grads.param(key).map_or(0.0, |t| t.data()[idx]);
            let orig = p.tensors[key].data()[idx];
            p.tensors.get_mut(key).unwrap().data_mut()[idx] = orig + eps;
            let up = loss_of(&p);
            p.tensors.get_mut(key).unwrap().data_mut()[idx] = orig - eps;
            let down = loss_of(&p);
            p.tensors.get_mut(key).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{key}[{idx}]: analytic {analytic}, numeric {numeric}");
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} parameters checked");
    }
}

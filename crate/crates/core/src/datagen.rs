//! Training data: procedural change pairs and an on-disk dataset format.
//!
//! A dataset root holds `hr/<id>.png`, `ref/<id>.png`, `mask/<id>.png` and a
//! `manifest.json` index. Mask pixels store the class index directly, with 0
//! meaning unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::{degrade, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::{from_u8, to_u8, ChangeMask, Image};
use crate::rng::{chance, derive, uniform, uniform_int, Rng};

/// Procedural texture drawn on top of a class's base color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Stripes { period: f64, angle: f64, amplitude: f64 },
    Speckle { cell: usize, amplitude: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub color: [f64; 3],
    pub texture: Texture,
}

/// Styles for classes `1..=K`; entry `i` describes class `i + 1`.
pub fn default_palette(num_classes: usize) -> Vec<ClassStyle> {
    (0..num_classes)
        .map(|i| {
            let hue = i as f64 / num_classes as f64;
            let texture = match i % 3 {
                0 => Texture::Flat,
                1 => Texture::Stripes {
                    period: 3.0 + (i % 4) as f64,
                    angle: 0.7 * i as f64,
                    amplitude: 0.25,
                },
                _ => Texture::Speckle {
                    cell: 1 + i % 2,
                    amplitude: 0.2,
                },
            };
            ClassStyle {
                color: hsv_to_signed_rgb(hue, 0.65, 0.75),
                texture,
            }
        })
        .collect()
}

fn hsv_to_signed_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| quantize(c * 2.0 - 1.0))
}

/// Snaps to the nearest 8-bit level so rendered scenes survive PNG storage.
fn quantize(v: f64) -> f64 {
    from_u8(to_u8(v))
}

/// Value noise in `[-1, 1]` keyed by integer coordinates.
fn lattice_noise(class: u8, cy: usize, cx: usize) -> f64 {
    let mut h = Sha256::new();
    h.update([class]);
    h.update((cy as u64).to_le_bytes());
    h.update((cx as u64).to_le_bytes());
    let d = h.finalize();
    let v = u32::from_le_bytes([d[0], d[1], d[2], d[3]]);
    v as f64 / u32::MAX as f64 * 2.0 - 1.0
}

/// Color of `class` at pixel `(y, x)`; a pure function of its arguments.
pub fn render_pixel(palette: &[ClassStyle], class: u8, y: usize, x: usize) -> [f64; 3] {
    let style = &palette[class as usize - 1];
    let offset = match style.texture {
        Texture::Flat => 0.0,
        Texture::Stripes {
            period,
            angle,
            amplitude,
        } => {
            let u = x as f64 * angle.cos() + y as f64 * angle.sin();
            amplitude * (2.0 * PI * u / period).sin()
        }
        Texture::Speckle { cell, amplitude } => amplitude * lattice_noise(class, y / cell, x / cell),
    };
    style.color.map(|c| quantize(c + offset))
}

/// Renders a class map (values in `1..=K`).
pub fn render(class_map: &ChangeMask, palette: &[ClassStyle]) -> Image {
    let (h, w) = (class_map.height(), class_map.width());
    let mut img = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let px = render_pixel(palette, class_map.get(y, x), y, x);
            for (c, v) in px.into_iter().enumerate() {
                img.set(y, x, c, v);
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_patches: usize,
    /// Patch side length range as a fraction of the shorter canvas side.
    pub patch_extent: (f64, f64),
    pub palette: Vec<ClassStyle>,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, num_patches: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_patches,
            patch_extent: (0.2, 0.5),
            palette: default_palette(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 || self.num_classes() > 255 {
            return Err(Error::Config(format!("need 2..=255 classes, got {}", self.num_classes())));
        }
        let (lo, hi) = self.patch_extent;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("patch_extent [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        Ok(())
    }
}

/// A generated scene. `owner` records which patch is visible at each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub class_map: ChangeMask,
    pub owner: Vec<Option<usize>>,
    pub patch_classes: Vec<u8>,
}

impl Scene {
    pub fn patch_area(&self, patch: usize) -> usize {
        self.owner.iter().filter(|o| **o == Some(patch)).count()
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn random_polygon(spec: &SceneSpec, rng: &mut Rng) -> Vec<(f64, f64)> {
    let side = spec.height.min(spec.width) as f64;
    let (cx, cy) = (uniform(rng, 0.0, spec.width as f64), uniform(rng, 0.0, spec.height as f64));
    let half_w = 0.5 * side * uniform(rng, spec.patch_extent.0, spec.patch_extent.1);
    let half_h = 0.5 * side * uniform(rng, spec.patch_extent.0, spec.patch_extent.1);
    match uniform_int(rng, 0, 2) {
        0 => vec![
            (cx - half_w, cy - half_h),
            (cx + half_w, cy - half_h),
            (cx + half_w, cy + half_h),
            (cx - half_w, cy + half_h),
        ],
        1 => {
            let (s, c) = uniform(rng, 0.0, PI).sin_cos();
            [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                .iter()
                .map(|&(u, v)| {
                    let (dx, dy) = (u * half_w, v * half_h);
                    (cx + c * dx - s * dy, cy + s * dx + c * dy)
                })
                .collect()
        }
        _ => {
            let n = uniform_int(rng, 5, 8) as usize;
            (0..n)
                .map(|k| {
                    let a = 2.0 * PI * (k as f64 + uniform(rng, 0.0, 0.8)) / n as f64;
                    let r = uniform(rng, 0.6, 1.0);
                    (cx + r * half_w * a.cos(), cy + r * half_h * a.sin())
                })
                .collect()
        }
    }
}

/// Random rectangles and polygons over a class-1 background.
pub fn generate_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let k = spec.num_classes() as i64;
    let mut class_map = ChangeMask::from_vec(h, w, vec![1; h * w])?;
    let mut owner = vec![None; h * w];
    let mut patch_classes = Vec::with_capacity(spec.num_patches);
    for p in 0..spec.num_patches {
        let poly = random_polygon(spec, rng);
        let class = uniform_int(rng, 1, k) as u8;
        patch_classes.push(class);
        for y in 0..h {
            for x in 0..w {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                    class_map.set(y, x, class);
                    owner[y * w + x] = Some(p);
                }
            }
        }
    }
    Ok(Scene {
        image: render(&class_map, &spec.palette),
        class_map,
        owner,
        patch_classes,
    })
}

/// Builds the earlier-time reference by reassigning each patch to a new class
/// with probability `change_rate`. The mask carries the current class at
/// changed pixels and 0 elsewhere.
pub fn mutate_scene(scene: &Scene, spec: &SceneSpec, rng: &mut Rng, change_rate: f64) -> Result<(Image, ChangeMask)> {
    if !(0.0..=1.0).contains(&change_rate) {
        return Err(Error::Domain(format!("change_rate {change_rate} outside [0, 1]")));
    }
    let k = spec.num_classes() as i64;
    let new_class: Vec<Option<u8>> = scene
        .patch_classes
        .iter()
        .map(|&c| {
            chance(rng, change_rate).then(|| {
                let pick = uniform_int(rng, 1, k - 1) as u8;
                if pick >= c {
                    pick + 1
                } else {
                    pick
                }
            })
        })
        .collect();
    let mut ref_map = scene.class_map.clone();
    let mut mask = ChangeMask::zeros(scene.class_map.height(), scene.class_map.width());
    let w = scene.class_map.width();
    for (i, o) in scene.owner.iter().enumerate() {
        if let Some(nc) = o.and_then(|p| new_class[p]) {
            let (y, x) = (i / w, i % w);
            ref_map.set(y, x, nc);
            mask.set(y, x, scene.class_map.get(y, x));
        }
    }
    Ok((render(&ref_map, &spec.palette), mask))
}

fn components(mask: &ChangeMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start] == 0 {
            continue;
        }
        let class = data[start];
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && data[j] == class {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Simulates change-detection errors.
///
/// False negatives erase each 4-connected changed region with probability
/// `fn_rate`. False positives paint random rectangles of random change class
/// over originally unchanged pixels until `round(fp_rate · unchanged)` pixels
/// are flipped.
pub fn corrupt_mask(mask: &ChangeMask, rng: &mut Rng, fn_rate: f64, fp_rate: f64, num_classes: usize) -> Result<ChangeMask> {
    for (name, r) in [("fn_rate", fn_rate), ("fp_rate", fp_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("{name} {r} outside [0, 1]")));
        }
    }
    if num_classes < 1 || num_classes > 255 {
        return Err(Error::Domain(format!("class count {num_classes} out of range")));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut out = mask.clone();
    for comp in components(mask) {
        if chance(rng, fn_rate) {
            for i in comp {
                out.set(i / w, i % w, 0);
            }
        }
    }
    let unchanged: Vec<usize> = (0..h * w).filter(|&i| mask.data()[i] == 0).collect();
    let target = (fp_rate * unchanged.len() as f64).round() as usize;
    if target == 0 {
        return Ok(out);
    }
    let mut flipped = vec![false; h * w];
    let mut count = 0;
    let max_side = (h.min(w) / 4).max(2) as i64;
    let max_attempts = 64 + 16 * target;
    let mut attempts = 0;
    while count < target && attempts < max_attempts {
        attempts += 1;
        let rh = uniform_int(rng, 1, max_side) as usize;
        let rw = uniform_int(rng, 1, max_side) as usize;
        let top = uniform_int(rng, 0, (h - rh.min(h)) as i64) as usize;
        let left = uniform_int(rng, 0, (w - rw.min(w)) as i64) as usize;
        let class = uniform_int(rng, 1, num_classes as i64) as u8;
        'rect: for y in top..(top + rh).min(h) {
            for x in left..(left + rw).min(w) {
                let i = y * w + x;
                if mask.data()[i] == 0 && !flipped[i] {
                    flipped[i] = true;
                    out.set(y, x, class);
                    count += 1;
                    if count == target {
                        break 'rect;
                    }
                }
            }
        }
    }
    if count < target {
        let class = uniform_int(rng, 1, num_classes as i64) as u8;
        for &i in &unchanged {
            if count == target {
                break;
            }
            if !flipped[i] {
                flipped[i] = true;
                out.set(i / w, i % w, class);
                count += 1;
            }
        }
    }
    Ok(out)
}

/// HR, reference and change mask for one location. `lr` is synthesized later.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub hr: Image,
    pub reference: Image,
    pub mask: ChangeMask,
    pub seed: u64,
}

/// Settings for a procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub num_patches: (usize, usize),
    pub change_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 64,
            size: 64,
            num_classes: 6,
            num_patches: (3, 8),
            change_rate: 0.4,
        }
    }
}

/// Generates pair `index` of a dataset; independent of other indices.
pub fn synthetic_pair(config: &SyntheticConfig, global_seed: u64, index: usize) -> Result<SamplePair> {
    let mut rng = derive(global_seed, &[0x5CE7E, index as u64]);
    let n = uniform_int(&mut rng, config.num_patches.0 as i64, config.num_patches.1 as i64) as usize;
    let spec = SceneSpec::new(config.size, config.size, n, config.num_classes);
    let scene = generate_scene(&spec, &mut rng)?;
    let (reference, mask) = mutate_scene(&scene, &spec, &mut rng, config.change_rate)?;
    Ok(SamplePair {
        id: format!("{index:05}"),
        hr: scene.image,
        reference,
        mask,
        seed: global_seed,
    })
}

pub fn synthetic_dataset(config: &SyntheticConfig, global_seed: u64) -> Result<Vec<SamplePair>> {
    (0..config.count).map(|i| synthetic_pair(config, global_seed, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub hr_sha256: String,
    pub ref_sha256: String,
    pub mask_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const SUBDIRS: [&str; 3] = ["hr", "ref", "mask"];

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_path(root: &Path, sub: &str, id: &str) -> PathBuf {
    root.join(sub).join(format!("{id}.png"))
}

/// Writes pairs in the dataset layout and returns the manifest.
pub fn write_dataset(root: &Path, pairs: &[SamplePair], num_classes: usize) -> Result<Manifest> {
    for sub in SUBDIRS {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for p in pairs {
        p.hr.save_png(&file_path(root, "hr", &p.id))?;
        p.reference.save_png(&file_path(root, "ref", &p.id))?;
        p.mask.save_png(&file_path(root, "mask", &p.id))?;
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        entries.push(ManifestEntry {
            id: p.id.clone(),
            width: p.hr.width(),
            height: p.hr.height(),
            hr_sha256: sha256_file(&file_path(root, "hr", &p.id))?,
            ref_sha256: sha256_file(&file_path(root, "ref", &p.id))?,
            mask_sha256: sha256_file(&file_path(root, "mask", &p.id))?,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = Manifest { num_classes, entries };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Scans `root`, validates every triplet and returns a manifest sorted by id.
///
/// All per-file problems are collected into one
/// [`Error::ValidationBatch`].
pub fn ingest_dataset(root: &Path, scale: usize, num_classes: usize) -> Result<Manifest> {
    if scale == 0 {
        return Err(Error::Domain("scale must be positive".into()));
    }
    let mut ids: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for sub in SUBDIRS {
        ids.insert(sub, png_ids(&root.join(sub))?);
    }
    let all: BTreeSet<String> = ids.values().flatten().cloned().collect();
    let mut errors = Vec::new();
    let mut entries = Vec::new();
    for id in &all {
        let missing: Vec<&str> = SUBDIRS.iter().copied().filter(|s| !ids[s].contains(id)).collect();
        if !missing.is_empty() {
            for s in missing {
                errors.push(format!("{}: missing counterpart", file_path(root, s, id).display()));
            }
            continue;
        }
        let (hr_path, ref_path, mask_path) =
            (file_path(root, "hr", id), file_path(root, "ref", id), file_path(root, "mask", id));
        let hr = match Image::load_png(&hr_path) {
            Ok(i) => i,
            Err(e) => {
                errors.push(format!("{}: {e}", hr_path.display()));
                continue;
            }
        };
        let (h, w) = (hr.height(), hr.width());
        let mut ok = true;
        if h % scale != 0 || w % scale != 0 {
            errors.push(format!("{}: size {h}x{w} not divisible by scale {scale}", hr_path.display()));
            ok = false;
        }
        match Image::load_png(&ref_path) {
            Ok(r) if (r.height(), r.width()) != (h, w) => {
                errors.push(format!(
                    "{}: size {}x{} does not match hr {h}x{w}",
                    ref_path.display(),
                    r.height(),
                    r.width()
                ));
                ok = false;
            }
            Ok(_) => {}
            Err(e) => {
                errors.push(format!("{}: {e}", ref_path.display()));
                ok = false;
            }
        }
        match ChangeMask::load_png(&mask_path) {
            Ok(m) if (m.height(), m.width()) != (h, w) => {
                errors.push(format!(
                    "{}: size {}x{} does not match hr {h}x{w}",
                    mask_path.display(),
                    m.height(),
                    m.width()
                ));
                ok = false;
            }
            Ok(m) if m.max_class() as usize > num_classes => {
                errors.push(format!(
                    "{}: mask class {} exceeds class count {num_classes}",
                    mask_path.display(),
                    m.max_class()
                ));
                ok = false;
            }
            Ok(_) => {}
            Err(e) => {
                errors.push(format!("{}: {e}", mask_path.display()));
                ok = false;
            }
        }
        if ok {
            entries.push(ManifestEntry {
                id: id.clone(),
                width: w,
                height: h,
                hr_sha256: sha256_file(&hr_path)?,
                ref_sha256: sha256_file(&ref_path)?,
                mask_sha256: sha256_file(&mask_path)?,
            });
        }
    }
    if !errors.is_empty() {
        return Err(Error::ValidationBatch(errors));
    }
    Ok(Manifest { num_classes, entries })
}

pub fn load_pair(root: &Path, entry: &ManifestEntry) -> Result<SamplePair> {
    Ok(SamplePair {
        id: entry.id.clone(),
        hr: Image::load_png(&file_path(root, "hr", &entry.id))?,
        reference: Image::load_png(&file_path(root, "ref", &entry.id))?,
        mask: ChangeMask::load_png(&file_path(root, "mask", &entry.id))?,
        seed: 0,
    })
}

pub fn load_dataset(root: &Path, manifest: &Manifest) -> Result<Vec<SamplePair>> {
    manifest.entries.iter().map(|e| load_pair(root, e)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// One model input/target bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub hr: Image,
    pub reference: Image,
    pub lr: Image,
    pub mask: ChangeMask,
    pub crop: CropWindow,
}

/// Crops hr/ref/mask with one shared window and degrades the HR crop.
pub fn make_example(pair: &SamplePair, crop_size: usize, degradation: &DegradationConfig, rng: &mut Rng) -> Result<TrainingExample> {
    let (h, w) = (pair.hr.height(), pair.hr.width());
    if crop_size == 0 || crop_size > h || crop_size > w {
        return Err(Error::Domain(format!("crop {crop_size} does not fit {h}x{w}")));
    }
    if crop_size % degradation.scale != 0 {
        return Err(Error::Domain(format!(
            "crop {crop_size} not divisible by scale {}",
            degradation.scale
        )));
    }
    if !pair.hr.same_size(&pair.reference) || (pair.mask.height(), pair.mask.width()) != (h, w) {
        return Err(Error::Contract(format!("pair {} is not spatially congruent", pair.id)));
    }
    let top = uniform_int(rng, 0, (h - crop_size) as i64) as usize;
    let left = uniform_int(rng, 0, (w - crop_size) as i64) as usize;
    let hr = pair.hr.crop(top, left, crop_size, crop_size)?;
    let lr = degrade(&hr, degradation, rng)?;
    Ok(TrainingExample {
        id: pair.id.clone(),
        reference: pair.reference.crop(top, left, crop_size, crop_size)?,
        mask: pair.mask.crop(top, left, crop_size, crop_size)?,
        hr,
        lr,
        crop: CropWindow {
            top,
            left,
            size: crop_size,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn spec(n: usize) -> SceneSpec {
        SceneSpec::new(32, 32, n, 5)
    }

    #[test]
    fn zero_patches_is_uniform_background() {
        let s = generate_scene(&spec(0), &mut seeded(1)).unwrap();
        assert!(s.class_map.data().iter().all(|&c| c == 1));
        assert!(s.owner.iter().all(Option::is_none));
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(&spec(6), &mut seeded(9)).unwrap();
        let b = generate_scene(&spec(6), &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flat_patch_pixels_equal_palette_color() {
        let sp = spec(6);
        for seed in 0..10 {
            let s = generate_scene(&sp, &mut seeded(seed)).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let c = s.class_map.get(y, x);
                    if sp.palette[c as usize - 1].texture == Texture::Flat {
                        let want = sp.palette[c as usize - 1].color;
                        assert_eq!(s.image.pixel(y, x), &want);
                    }
                }
            }
        }
    }

    #[test]
    fn mutation_extremes() {
        let sp = spec(5);
        let s = generate_scene(&sp, &mut seeded(3)).unwrap();
        let (r, m) = mutate_scene(&s, &sp, &mut seeded(4), 0.0).unwrap();
        assert_eq!(r, s.image);
        assert_eq!(m.changed_count(), 0);

        let one = spec(1);
        let s = generate_scene(&one, &mut seeded(5)).unwrap();
        let (_, m) = mutate_scene(&s, &one, &mut seeded(6), 1.0).unwrap();
        for (i, o) in s.owner.iter().enumerate() {
            assert_eq!(m.data()[i] != 0, o.is_some());
        }
    }

    #[test]
    fn texture_lock_and_mask_semantics() {
        let cfg = SyntheticConfig {
            count: 12,
            size: 32,
            ..SyntheticConfig::default()
        };
        for i in 0..cfg.count {
            let mut rng = derive(17, &[0x5CE7E, i as u64]);
            let n = uniform_int(&mut rng, cfg.num_patches.0 as i64, cfg.num_patches.1 as i64) as usize;
            let sp = SceneSpec::new(32, 32, n, cfg.num_classes);
            let scene = generate_scene(&sp, &mut rng).unwrap();
            let (r, m) = mutate_scene(&scene, &sp, &mut rng, cfg.change_rate).unwrap();
            let pair = synthetic_pair(&cfg, 17, i).unwrap();
            assert_eq!(pair.reference, r);
            for y in 0..32 {
                for x in 0..32 {
                    let c = m.get(y, x);
                    if c == 0 {
                        assert_eq!(scene.image.pixel(y, x), r.pixel(y, x));
                    } else {
                        assert_eq!(c, scene.class_map.get(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn change_fraction_matches_expected_area() {
        let sp = spec(5);
        let rate = 0.5;
        let (mut got, mut want) = (0.0, 0.0);
        for seed in 0..100 {
            let s = generate_scene(&sp, &mut seeded(seed)).unwrap();
            let (_, m) = mutate_scene(&s, &sp, &mut seeded(1000 + seed), rate).unwrap();
            got += m.changed_count() as f64;
            want += rate * s.owner.iter().filter(|o| o.is_some()).count() as f64;
        }
        assert!((got / want - 1.0).abs() < 0.1, "ratio {}", got / want);
    }

    fn blocky_mask() -> ChangeMask {
        let mut m = ChangeMask::zeros(40, 40);
        for y in 2..10 {
            for x in 3..12 {
                m.set(y, x, 2);
            }
        }
        for y in 20..30 {
            for x in 20..35 {
                m.set(y, x, 4);
            }
        }
        m
    }

    #[test]
    fn corruption_extremes() {
        let m = blocky_mask();
        assert_eq!(corrupt_mask(&m, &mut seeded(1), 0.0, 0.0, 5).unwrap(), m);
        assert_eq!(corrupt_mask(&m, &mut seeded(1), 1.0, 0.0, 5).unwrap().changed_count(), 0);
        let all = corrupt_mask(&m, &mut seeded(1), 0.0, 1.0, 5).unwrap();
        assert_eq!(all.changed_count(), 40 * 40);
    }

    #[test]
    fn false_positive_fraction() {
        let m = blocky_mask();
        let unchanged = (40 * 40 - m.changed_count()) as f64;
        let mut total = 0.0;
        for seed in 0..50 {
            let c = corrupt_mask(&m, &mut seeded(seed), 0.0, 0.1, 5).unwrap();
            let fp = (0..m.data().len()).filter(|&i| m.data()[i] == 0 && c.data()[i] != 0).count();
            total += fp as f64 / unchanged;
            assert!(c.max_class() <= 5);
        }
        let mean = total / 50.0;
        assert!((mean / 0.1 - 1.0).abs() < 0.3, "mean fp fraction {mean}");
    }

    #[test]
    fn example_crops_share_window() {
        let pair = synthetic_pair(&SyntheticConfig::default(), 3, 0).unwrap();
        let deg = DegradationConfig::bicubic_only(8);
        let ex = make_example(&pair, 32, &deg, &mut seeded(2)).unwrap();
        let CropWindow { top, left, size } = ex.crop;
        assert_eq!(ex.hr, pair.hr.crop(top, left, size, size).unwrap());
        assert_eq!(ex.reference, pair.reference.crop(top, left, size, size).unwrap());
        assert_eq!(ex.mask, pair.mask.crop(top, left, size, size).unwrap());
        assert_eq!(ex.lr.dims(), (4, 4, 3));
        let full = make_example(&pair, 64, &DegradationConfig::bicubic_only(16), &mut seeded(2)).unwrap();
        assert_eq!(full.hr, pair.hr);
        assert_eq!(full.lr.dims(), (4, 4, 3));
        assert!(matches!(make_example(&pair, 128, &deg, &mut seeded(2)), Err(Error::Domain(_))));
    }
}

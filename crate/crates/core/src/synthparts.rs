//! Procedural "parts" dataset with ground-truth part masks.
//!
//! Each class owns two parts (a shape primitive in a class-specific hue).
//! Every image additionally carries one or two shared distractor parts drawn
//! in low-saturation colors, over a noisy textured background. Parts never
//! overlap. Pixel values are quantized to multiples of 1/255 so the on-disk
//! PPM form reloads bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;
use crate::seeding;
use crate::tensor::Tensor;

pub const CANVAS: usize = 32;
pub const CHANNELS: usize = 3;
const PARTS_PER_CLASS: usize = 2;
const SHARED_PARTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Bar,
    Ring,
    Triangle,
}

const SHAPES: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Bar, ShapeKind::Ring, ShapeKind::Triangle];

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    fn intersects(&self, other: &Region) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    fn inflate(&self, by: f64) -> Region {
        Region { x0: self.x0 - by, y0: self.y0 - by, x1: self.x1 + by, y1: self.y1 + by }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub part_id: usize,
    pub shape: ShapeKind,
    pub color_lo: [f64; 3],
    pub color_hi: [f64; 3],
    pub size_lo: f64,
    pub size_hi: f64,
    /// Where the part's bounding box must lie.
    pub region: Region,
    pub shared: bool,
    /// Owning class for class-specific parts.
    pub class: Option<usize>,
}

/// A concrete drawn shape. Coordinates are in pixels with pixel `(r, c)`
/// centred at `(c + 0.5, r + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Disk {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    Ring {
        cx: f64,
        cy: f64,
        outer: f64,
        inner: f64,
    },
    Bar {
        cx: f64,
        cy: f64,
        half_len: f64,
        half_width: f64,
        vertical: bool,
    },
    /// Isosceles triangle with its apex pointing up.
    Triangle {
        cx: f64,
        cy: f64,
        base: f64,
        height: f64,
    },
}

impl Primitive {
    fn build(shape: ShapeKind, size: f64, cx: f64, cy: f64, vertical: bool) -> Self {
        match shape {
            ShapeKind::Disk => Primitive::Disk { cx, cy, radius: size },
            ShapeKind::Ring => Primitive::Ring { cx, cy, outer: size, inner: 0.55 * size },
            ShapeKind::Bar => Primitive::Bar { cx, cy, half_len: size / 2.0, half_width: 0.11 * size, vertical },
            ShapeKind::Triangle => Primitive::Triangle { cx, cy, base: size, height: 0.87 * size },
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Disk { cx, cy, radius } => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
            Primitive::Ring { cx, cy, outer, inner } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
            Primitive::Bar { cx, cy, half_len, half_width, vertical } => {
                let (hx, hy) = if vertical { (half_width, half_len) } else { (half_len, half_width) };
                (x - cx).abs() <= hx && (y - cy).abs() <= hy
            }
            Primitive::Triangle { cx, cy, base, height } => {
                let top = cy - height / 2.0;
                let bottom = cy + height / 2.0;
                if y < top || y > bottom {
                    return false;
                }
                let half = base / 2.0 * (y - top) / height;
                (x - cx).abs() <= half
            }
        }
    }

    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Disk { radius, .. } => PI * radius * radius,
            Primitive::Ring { outer, inner, .. } => PI * (outer * outer - inner * inner),
            Primitive::Bar { half_len, half_width, .. } => 4.0 * half_len * half_width,
            Primitive::Triangle { base, height, .. } => 0.5 * base * height,
        }
    }

    pub fn bbox(&self) -> Region {
        let (cx, cy, hx, hy) = match *self {
            Primitive::Disk { cx, cy, radius } => (cx, cy, radius, radius),
            Primitive::Ring { cx, cy, outer, .. } => (cx, cy, outer, outer),
            Primitive::Bar { cx, cy, half_len, half_width, vertical } => {
                if vertical {
                    (cx, cy, half_width, half_len)
                } else {
                    (cx, cy, half_len, half_width)
                }
            }
            Primitive::Triangle { cx, cy, base, height } => (cx, cy, base / 2.0, height / 2.0),
        };
        Region { x0: cx - hx, y0: cy - hy, x1: cx + hx, y1: cy + hy }
    }

    /// Binary `CANVAS × CANVAS` rasterization by pixel-centre sampling.
    pub fn rasterize(&self) -> Vec<u8> {
        let mut mask = vec![0u8; CANVAS * CANVAS];
        for r in 0..CANVAS {
            for c in 0..CANVAS {
                if self.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    mask[r * CANVAS + c] = 1;
                }
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartInstance {
    pub part_id: usize,
    pub primitive: Primitive,
    pub color: [f64; 3],
    /// `CANVAS × CANVAS` values in {0, 1}.
    #[serde(skip)]
    pub mask: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub parts: Vec<PartSpec>,
    /// `(CANVAS, CANVAS, 3)` tensors with values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub instances: Vec<Vec<PartInstance>>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Ground-truth mask of `part_id` in image `index`; all zeros when the
    /// part is absent.
    pub fn part_mask(&self, index: usize, part_id: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::Index(format!("image {index} of {}", self.len())));
        }
        if part_id >= self.parts.len() {
            return Err(Error::Index(format!("part {part_id} of {}", self.parts.len())));
        }
        let data = match self.instances[index].iter().find(|p| p.part_id == part_id) {
            Some(inst) => inst.mask.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; CANVAS * CANVAS],
        };
        Tensor::new(vec![CANVAS, CANVAS], data)
    }

    /// Builds a dataset from already-prepared parts; used by tests and tools
    /// that construct tiny datasets by hand.
    pub fn from_parts(num_classes: usize, images: Vec<Tensor>, labels: Vec<usize>, splits: Vec<Split>) -> Result<Self> {
        if images.len() != labels.len() || images.len() != splits.len() {
            return Err(Error::Shape("images, labels and splits differ in length".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("label {bad} with {num_classes} classes")));
        }
        let n = images.len();
        Ok(LabeledDataset { num_classes, parts: Vec::new(), images, labels, instances: vec![Vec::new(); n], splits })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |ctx: String| move |e| Error::io(ctx, e);
        fs::create_dir_all(dir.join("images")).map_err(io(format!("creating {}", dir.display())))?;
        fs::create_dir_all(dir.join("masks")).map_err(io(format!("creating {}", dir.display())))?;
        let mut records = Vec::with_capacity(self.len());
        for (i, img) in self.images.iter().enumerate() {
            let image_file = format!("images/{i:05}.ppm");
            fs::write(dir.join(&image_file), netpbm::encode_ppm(img)?).map_err(io(image_file.clone()))?;
            let mut masks = BTreeMap::new();
            for inst in &self.instances[i] {
                let file = format!("masks/{i:05}_p{:02}.pgm", inst.part_id);
                let px: Vec<u8> = inst.mask.iter().map(|&v| v * 255).collect();
                fs::write(dir.join(&file), netpbm::encode_pgm(CANVAS, CANVAS, &px)?).map_err(io(file.clone()))?;
                masks.insert(inst.part_id, file);
            }
            records.push(ImageRecord {
                file: image_file,
                label: self.labels[i],
                split: self.splits[i],
                parts: self.instances[i].clone(),
                masks,
            });
        }
        let meta = Meta {
            canvas: CANVAS,
            num_classes: self.num_classes,
            parts: self.parts.clone(),
            splits: SplitIndices {
                train: self.indices(Split::Train),
                val: self.indices(Split::Val),
                test: self.indices(Split::Test),
            },
            images: records,
        };
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(dir.join("meta.json"), json).map_err(io("writing meta.json".into()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path));
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io("reading meta.json", e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
        let n = meta.images.len();
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut instances = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);
        for rec in meta.images {
            let bytes = fs::read(dir.join(&rec.file)).map_err(|e| Error::io(rec.file.clone(), e))?;
            images.push(netpbm::decode_ppm(&bytes)?);
            labels.push(rec.label);
            splits.push(rec.split);
            let mut parts = rec.parts;
            for inst in parts.iter_mut() {
                let file = rec
                    .masks
                    .get(&inst.part_id)
                    .ok_or_else(|| Error::Format(format!("no mask file for part {}", inst.part_id)))?;
                let bytes = fs::read(dir.join(file)).map_err(|e| Error::io(file.clone(), e))?;
                let (_, _, px) = netpbm::decode_pgm(&bytes)?;
                inst.mask = px.iter().map(|&v| u8::from(v > 127)).collect();
            }
            instances.push(parts);
        }
        Ok(LabeledDataset { num_classes: meta.num_classes, parts: meta.parts, images, labels, instances, splits })
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    canvas: usize,
    num_classes: usize,
    parts: Vec<PartSpec>,
    splits: SplitIndices,
    images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct SplitIndices {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    file: String,
    label: usize,
    split: Split,
    parts: Vec<PartInstance>,
    masks: BTreeMap<usize, String>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn jitter_range(center: [f64; 3], by: f64) -> ([f64; 3], [f64; 3]) {
    (center.map(|v| (v - by).max(0.0)), center.map(|v| (v + by).min(1.0)))
}

fn size_range(shape: ShapeKind) -> (f64, f64) {
    match shape {
        ShapeKind::Disk => (3.2, 5.5),
        ShapeKind::Ring => (4.6, 6.5),
        ShapeKind::Bar => (12.0, 16.0),
        ShapeKind::Triangle => (8.5, 13.0),
    }
}

/// The part catalogue for `num_classes` classes: `2K` class-specific parts
/// followed by the shared distractors.
pub fn part_catalogue(num_classes: usize) -> Vec<PartSpec> {
    let canvas = Region { x0: 1.0, y0: 1.0, x1: CANVAS as f64 - 1.0, y1: CANVAS as f64 - 1.0 };
    let n_specific = PARTS_PER_CLASS * num_classes;
    let mut parts = Vec::with_capacity(n_specific + SHARED_PARTS);
    for class in 0..num_classes {
        for slot in 0..PARTS_PER_CLASS {
            let id = class * PARTS_PER_CLASS + slot;
            let shape = SHAPES[(2 * class + slot + class / 2) % SHAPES.len()];
            let (lo, hi) = jitter_range(hsv_to_rgb(id as f64 / n_specific as f64, 0.85, 0.95), 0.05);
            let (size_lo, size_hi) = size_range(shape);
            parts.push(PartSpec {
                part_id: id,
                shape,
                color_lo: lo,
                color_hi: hi,
                size_lo,
                size_hi,
                region: canvas,
                shared: false,
                class: Some(class),
            });
        }
    }
    let shared = [(ShapeKind::Bar, [0.82, 0.82, 0.78]), (ShapeKind::Disk, [0.58, 0.55, 0.6])];
    for (i, (shape, color)) in shared.into_iter().enumerate() {
        let (lo, hi) = jitter_range(color, 0.05);
        let (size_lo, size_hi) = size_range(shape);
        parts.push(PartSpec {
            part_id: n_specific + i,
            shape,
            color_lo: lo,
            color_hi: hi,
            size_lo,
            size_hi,
            region: canvas,
            shared: true,
            class: None,
        });
    }
    parts
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn try_place(spec: &PartSpec, placed: &[Region], rng: &mut ChaCha8Rng) -> Option<PartInstance> {
    for _ in 0..200 {
        let size = rng.random_range(spec.size_lo..=spec.size_hi);
        let vertical = rng.random_bool(0.5);
        let probe = Primitive::build(spec.shape, size, 0.0, 0.0, vertical).bbox();
        let (hx, hy) = (probe.x1, probe.y1);
        let r = spec.region;
        if r.x1 - r.x0 < 2.0 * hx || r.y1 - r.y0 < 2.0 * hy {
            continue;
        }
        let cx = rng.random_range(r.x0 + hx..=r.x1 - hx);
        let cy = rng.random_range(r.y0 + hy..=r.y1 - hy);
        let prim = Primitive::build(spec.shape, size, cx, cy, vertical);
        let bbox = prim.bbox().inflate(1.0);
        if placed.iter().any(|p| p.intersects(&bbox)) {
            continue;
        }
        let color = std::array::from_fn(|c| quantize(rng.random_range(spec.color_lo[c]..=spec.color_hi[c])));
        let mask = prim.rasterize();
        return Some(PartInstance { part_id: spec.part_id, primitive: prim, color, mask });
    }
    None
}

fn render(seed: u64, class: usize, parts: &[PartSpec]) -> (Tensor, Vec<PartInstance>) {
    let mut rng = seeding::rng(seed);
    let specific: Vec<&PartSpec> = parts.iter().filter(|p| p.class == Some(class)).collect();
    let shared: Vec<&PartSpec> = parts.iter().filter(|p| p.shared).collect();
    let instances = loop {
        let n_shared = rng.random_range(1..=shared.len().min(2));
        let mut chosen: Vec<&PartSpec> = specific.clone();
        let mut pool = shared.clone();
        for _ in 0..n_shared {
            let i = rng.random_range(0..pool.len());
            chosen.push(pool.remove(i));
        }
        let mut placed = Vec::new();
        let mut out = Vec::new();
        for spec in chosen {
            match try_place(spec, &placed, &mut rng) {
                Some(inst) => {
                    placed.push(inst.primitive.bbox().inflate(1.0));
                    out.push(inst);
                }
                None => break,
            }
        }
        if out.len() == specific.len() + n_shared {
            break out;
        }
    };

    let base: f64 = rng.random_range(0.12..0.3);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let (fx, fy, phase): (f64, f64, f64) =
        (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.0..6.3));
    let mut data = vec![0.0; CANVAS * CANVAS * CHANNELS];
    for r in 0..CANVAS {
        for c in 0..CANVAS {
            let wave = 0.04 * (fx * c as f64 + fy * r as f64 + phase).sin();
            for ch in 0..CHANNELS {
                let noise: f64 = rng.random_range(-0.05..0.05);
                data[(r * CANVAS + c) * CHANNELS + ch] = quantize(base + tint[ch] + wave + noise);
            }
        }
    }
    for inst in &instances {
        for (px, &m) in inst.mask.iter().enumerate() {
            if m == 1 {
                data[px * CHANNELS..(px + 1) * CHANNELS].copy_from_slice(&inst.color);
            }
        }
    }
    let image = Tensor::new(vec![CANVAS, CANVAS, CHANNELS], data).expect("canvas shape");
    (image, instances)
}

/// Split sizes for `n` images of one class: `(train, val, test)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Generates `images_per_class` images for each of `num_classes` classes,
/// split 80/10/10 within every class. Deterministic in `seed`.
pub fn generate(seed: u64, num_classes: usize, images_per_class: usize) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if images_per_class == 0 {
        return Err(Error::Config("images_per_class must be at least 1".into()));
    }
    let parts = part_catalogue(num_classes);
    let (n_train, n_val, _) = split_sizes(images_per_class);
    let jobs: Vec<(usize, usize)> = (0..num_classes).flat_map(|c| (0..images_per_class).map(move |i| (c, i))).collect();
    let rendered: Vec<(Tensor, Vec<PartInstance>)> = jobs
        .par_iter()
        .map(|&(c, i)| render(seeding::derive_index(seed, (c * images_per_class + i) as u64), c, &parts))
        .collect();
    let mut images = Vec::with_capacity(jobs.len());
    let mut instances = Vec::with_capacity(jobs.len());
    let mut labels = Vec::with_capacity(jobs.len());
    let mut splits = Vec::with_capacity(jobs.len());
    for (&(c, i), (img, inst)) in jobs.iter().zip(rendered) {
        images.push(img);
        instances.push(inst);
        labels.push(c);
        splits.push(if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(LabeledDataset { num_classes, parts, images, labels, instances, splits })
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x1, y1, x2, y2)` in pixels, `x2`/`y2` exclusive.
pub type Box4 = [f32; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    /// Whether pixel centre `(px, py)` lies in a shape of extent `size`
    /// centred on `(cx, cy)`.
    fn covers(self, px: f32, py: f32, cx: f32, cy: f32, size: f32) -> bool {
        let half = size / 2.0;
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Disc => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            // Apex up, base at the bottom; width grows linearly with depth.
            ShapeKind::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class: usize,
    pub bbox: Box4,
}

impl Object {
    pub fn area(&self) -> f32 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub size: usize,
    /// `3 x size x size`, channel-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
}

impl DatasetSpec {
    pub fn new(seed: u64, n_images: usize, image_size: usize, num_classes: usize) -> Self {
        Self {
            seed,
            n_images,
            image_size,
            num_classes,
            max_objects: 3,
        }
    }
}

fn disjoint(a: &Box4, b: &Box4) -> bool {
    a[2] + 1.0 <= b[0] || b[2] + 1.0 <= a[0] || a[3] + 1.0 <= b[1] || b[3] + 1.0 <= a[1]
}

/// Object extents are log-uniform between these fractions of the canvas,
/// which spreads them over the pyramid levels that fit in the image.
const MIN_EXTENT: f32 = 0.05;
const MAX_EXTENT: f32 = 0.9;

fn render_object(
    rng: &mut ChaCha8Rng,
    size: usize,
    class: usize,
) -> Option<(Object, Vec<usize>)> {
    let s = size as f32;
    let lo = (MIN_EXTENT * s).max(3.0).ln();
    let hi = (MAX_EXTENT * s).ln();
    let extent = rng.random_range(lo..hi).exp();
    let half = extent / 2.0;
    let cx = rng.random_range(half..=(s - half).max(half));
    let cy = rng.random_range(half..=(s - half).max(half));
    let shape = ShapeKind::ALL[class];
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    let mut mask = Vec::new();
    let y_lo = (cy - half - 1.0).max(0.0) as usize;
    let y_hi = ((cy + half + 1.0) as usize).min(size - 1);
    let x_lo = (cx - half - 1.0).max(0.0) as usize;
    let x_hi = ((cx + half + 1.0) as usize).min(size - 1);
    for py in y_lo..=y_hi {
        for px in x_lo..=x_hi {
            if shape.covers(px as f32 + 0.5, py as f32 + 0.5, cx, cy, extent) {
                mask.push(py * size + px);
                x1 = x1.min(px);
                y1 = y1.min(py);
                x2 = x2.max(px + 1);
                y2 = y2.max(py + 1);
            }
        }
    }
    if mask.is_empty() {
        return None;
    }
    let bbox = [x1 as f32, y1 as f32, x2 as f32, y2 as f32];
    Some((Object { class, bbox }, mask))
}

fn generate_image(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> SynthImage {
    let size = spec.image_size;
    let plane = size * size;
    let mut pixels: Vec<f32> = (0..3 * plane).map(|_| rng.random_range(0.0..0.25)).collect();
    let want = rng.random_range(1..=spec.max_objects.max(1));
    let mut objects: Vec<Object> = Vec::new();
    let mut attempts = 0;
    while objects.len() < want && (attempts < 50 || objects.is_empty()) {
        attempts += 1;
        let class = rng.random_range(0..spec.num_classes);
        let Some((obj, mask)) = render_object(rng, size, class) else {
            continue;
        };
        if !objects.iter().all(|o| disjoint(&o.bbox, &obj.bbox)) {
            continue;
        }
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.45..1.0));
        for &p in &mask {
            for (c, &v) in color.iter().enumerate() {
                pixels[c * plane + p] = v - rng.random_range(0.0..0.1);
            }
        }
        objects.push(obj);
    }
    SynthImage { size, pixels, objects }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SynthImage>> {
    if spec.n_images == 0 {
        return Err(Error::Plan("dataset needs at least one image".into()));
    }
    if !(1..=ShapeKind::ALL.len()).contains(&spec.num_classes) {
        return Err(Error::Plan(format!(
            "the synthetic dataset has {} shape classes, {} requested",
            ShapeKind::ALL.len(),
            spec.num_classes
        )));
    }
    if spec.image_size < 32 {
        return Err(Error::Plan(format!("image size {} is below 32", spec.image_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_images).map(|_| generate_image(&mut rng, spec)).collect())
}

pub const DATASET_MAGIC: &[u8; 4] = b"NFCD";
pub const DATASET_VERSION: u32 = 1;

/// Binary dataset file: magic, version, image count and size, then per
/// image its object table and `f32` pixel payload (little-endian).
pub fn dataset_to_bytes(images: &[SynthImage]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    for img in images {
        out.extend_from_slice(&(img.size as u32).to_le_bytes());
        out.extend_from_slice(&(img.objects.len() as u32).to_le_bytes());
        for o in &img.objects {
            out.extend_from_slice(&(o.class as u32).to_le_bytes());
            for v in o.bbox {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &img.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<SynthImage>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.bytes(4)? != DATASET_MAGIC {
        return Err(Error::MissingCache("dataset file has bad magic".into()));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::MissingCache(format!(
            "dataset file version {version}, expected {DATASET_VERSION}"
        )));
    }
    let n = cur.u32()? as usize;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let size = cur.u32()? as usize;
        let n_obj = cur.u32()? as usize;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let class = cur.u32()? as usize;
            let bbox = [cur.f32()?, cur.f32()?, cur.f32()?, cur.f32()?];
            objects.push(Object { class, bbox });
        }
        let pixels = (0..3 * size * size).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        images.push(SynthImage { size, pixels, objects });
    }
    if cur.pos != bytes.len() {
        return Err(Error::MissingCache("dataset file has trailing bytes".into()));
    }
    Ok(images)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::MissingCache("dataset file is truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
}

//! Synthetic multi-scale detection scenes and their on-disk cache.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoxF {
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, o: &BoxF) -> f32 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class: usize,
    pub bbox: BoxF,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `1 x C x H x W`.
    pub image: Tensor,
    pub objects: Vec<Object>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub seed: u64,
    pub n: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Object side lengths are drawn log-uniformly from this range (pixels).
    pub scale_min: f32,
    pub scale_max: f32,
    pub num_classes: usize,
    pub max_objects: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            seed: 0,
            n: 256,
            channels: 1,
            image_size: 64,
            scale_min: 6.0,
            scale_max: 48.0,
            num_classes: 3,
            max_objects: 3,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidParams(m));
        if self.n == 0 || self.channels == 0 || self.image_size == 0 || self.num_classes == 0 || self.max_objects == 0 {
            return bad("n, channels, image_size, num_classes and max_objects must be positive".into());
        }
        if !(self.scale_min.is_finite() && self.scale_max.is_finite()) || self.scale_min < 2.0 || self.scale_max <= self.scale_min {
            return bad(format!(
                "scale range {}..{} is degenerate (need 2 <= min < max)",
                self.scale_min, self.scale_max
            ));
        }
        if self.scale_max > self.image_size as f32 {
            return bad(format!(
                "scale_max {} exceeds image size {}",
                self.scale_max, self.image_size
            ));
        }
        Ok(())
    }
}

/// Intensity of class `k`'s texture at pixel `(x, y)`, in `[0, 1]`.
pub fn class_texture(k: usize, x: usize, y: usize) -> f32 {
    let level = 1.0 - 0.15 * (k / 3) as f32;
    let on = match k % 3 {
        0 => true,
        1 => (y / 2).is_multiple_of(2),
        _ => ((x / 2) + (y / 2)).is_multiple_of(2),
    };
    if on {
        level
    } else {
        0.3 * level
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates scene `index` of the dataset described by `p`. Each scene
/// draws from its own RNG stream, so scenes are independent of generation
/// order.
pub fn generate_scene(p: &DatasetParams, index: u64) -> SyntheticScene {
    let mut rng = scene_rng(p.seed, index);
    let s = p.image_size;
    let mut img = vec![0.0f32; p.channels * s * s];
    for v in img.iter_mut() {
        *v = rng.random_range(0.0f32..0.15);
    }
    let count = rng.random_range(1..=p.max_objects);
    let (lmin, lmax) = (p.scale_min.ln(), p.scale_max.ln());
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let side = rng.random_range(lmin..=lmax).exp();
        let aspect = rng.random_range(0.75f32..1.33);
        let w = (side * aspect.sqrt()).clamp(p.scale_min, p.scale_max).round().max(2.0);
        let h = (side / aspect.sqrt()).clamp(p.scale_min, p.scale_max).round().max(2.0);
        let x1 = rng.random_range(0.0..=(s as f32 - w)).floor();
        let y1 = rng.random_range(0.0..=(s as f32 - h)).floor();
        let class = rng.random_range(0..p.num_classes);
        let ellipse = rng.random_bool(0.5);
        let bbox = BoxF {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        let (cx, cy) = (x1 + w / 2.0, y1 + h / 2.0);
        for y in y1 as usize..(y1 + h) as usize {
            for x in x1 as usize..(x1 + w) as usize {
                if ellipse {
                    let dx = (x as f32 + 0.5 - cx) / (w / 2.0);
                    let dy = (y as f32 + 0.5 - cy) / (h / 2.0);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                let t = class_texture(class, x - x1 as usize, y - y1 as usize);
                for c in 0..p.channels {
                    img[(c * s + y) * s + x] = 0.2 + 0.7 * t + rng.random_range(-0.05f32..0.05);
                }
            }
        }
        objects.push(Object { class, bbox });
    }
    SyntheticScene {
        image: Tensor::new(Shape::new(1, p.channels, s, s), img).expect("image buffer sized from shape"),
        objects,
        seed: index,
    }
}

pub fn generate_detection_dataset(p: &DatasetParams) -> Result<Vec<SyntheticScene>, DataError> {
    p.validate()?;
    Ok((0..p.n as u64).map(|i| generate_scene(p, i)).collect())
}

/// Number of distinct octaves (`floor(log2(side / scale_min))`) covered by
/// the longer side of each object.
pub fn octaves_covered(scenes: &[SyntheticScene], scale_min: f32) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for s in scenes {
        for o in &s.objects {
            let side = o.bbox.width().max(o.bbox.height());
            seen.insert((side / scale_min).log2().floor() as i64);
        }
    }
    seen.len()
}

pub const SCENE_MAGIC: &[u8; 4] = b"FADS";
pub const SCENE_VERSION: u32 = 1;
pub const INDEX_VERSION: u32 = 1;
/// Objects per scene accepted when decoding, to bound allocations.
const MAX_DECODED_OBJECTS: usize = 4096;
const MAX_DECODED_PIXELS: usize = 1 << 26;

/// Little-endian blob: magic, version, `c, h, w`, seed, object count,
/// objects as `(class: u32, x1, y1, x2, y2: f32)`, then `c*h*w` pixels.
pub fn encode_scene(scene: &SyntheticScene) -> Vec<u8> {
    let sh = scene.image.shape();
    let mut out = Vec::with_capacity(36 + scene.objects.len() * 20 + sh.numel() * 4);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    for d in [sh.c(), sh.h(), sh.w()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&scene.seed.to_le_bytes());
    out.extend_from_slice(&(scene.objects.len() as u32).to_le_bytes());
    for o in &scene.objects {
        out.extend_from_slice(&(o.class as u32).to_le_bytes());
        for v in [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in scene.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            DataError::Blob(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_scene(bytes: &[u8]) -> Result<SyntheticScene, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != SCENE_MAGIC {
        return Err(DataError::Blob("bad magic".into()));
    }
    let version = r.u32()?;
    if version != SCENE_VERSION {
        return Err(DataError::Blob(format!("unsupported version {version}")));
    }
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let pixels = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|v| *v > 0 && *v <= MAX_DECODED_PIXELS)
        .ok_or_else(|| DataError::Blob(format!("implausible image shape {c}x{h}x{w}")))?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    if count > MAX_DECODED_OBJECTS {
        return Err(DataError::Blob(format!("{count} objects exceeds limit")));
    }
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let class = r.u32()? as usize;
        let (x1, y1, x2, y2) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite())
            && 0.0 <= x1
            && x1 < x2
            && x2 <= w as f32
            && 0.0 <= y1
            && y1 < y2
            && y2 <= h as f32;
        if !ok {
            return Err(DataError::Blob(format!("object {i} has an invalid box")));
        }
        objects.push(Object {
            class,
            bbox: BoxF { x1, y1, x2, y2 },
        });
    }
    let raw = r.take(pixels * 4)?;
    if r.pos != bytes.len() {
        return Err(DataError::Blob(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Blob("non-finite pixel".into()));
    }
    Ok(SyntheticScene {
        image: Tensor::new(Shape::new(1, c, h, w), data).expect("length checked"),
        objects,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub file: String,
    /// RNG stream the scene was drawn from.
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub params: DatasetParams,
    pub scenes: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let idx: DatasetIndex = serde_json::from_str(text).map_err(|e| DataError::Index(e.to_string()))?;
        if idx.version != INDEX_VERSION {
            return Err(DataError::Index(format!("unsupported index version {}", idx.version)));
        }
        for e in &idx.scenes {
            let plain = !e.file.is_empty()
                && e.file.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
                && !e.file.starts_with('.');
            if !plain {
                return Err(DataError::Index(format!("scene file name `{}` is not a plain file name", e.file)));
            }
            if e.sha256.len() != 64 || hex::decode(&e.sha256).is_err() {
                return Err(DataError::Index(format!("bad checksum for {}", e.file)));
            }
        }
        Ok(idx)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `index.json` plus one blob per scene into `dir`.
pub fn write_cache(dir: &Path, p: &DatasetParams, scenes: &[SyntheticScene]) -> Result<DatasetIndex, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let file = format!("scene_{:06}.bin", s.seed);
        let blob = encode_scene(s);
        let path = dir.join(&file);
        fs::write(&path, &blob).map_err(io_err(&path))?;
        entries.push(IndexEntry {
            file,
            seed: s.seed,
            sha256: sha256_hex(&blob),
        });
    }
    let idx = DatasetIndex {
        version: INDEX_VERSION,
        params: p.clone(),
        scenes: entries,
    };
    let path = dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&idx).expect("index serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(idx)
}

/// Reads a cache written by [`write_cache`], verifying every checksum.
pub fn read_cache(dir: &Path) -> Result<(DatasetIndex, Vec<SyntheticScene>), DataError> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let idx = DatasetIndex::parse(&text)?;
    let mut scenes = Vec::with_capacity(idx.scenes.len());
    for e in &idx.scenes {
        let p = dir.join(&e.file);
        let blob = fs::read(&p).map_err(io_err(&p))?;
        if sha256_hex(&blob) != e.sha256 {
            return Err(DataError::Checksum { file: e.file.clone() });
        }
        scenes.push(decode_scene(&blob)?);
    }
    Ok((idx, scenes))
}

//! Procedural sprite images and on-disk formats for datasets and
//! checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};

pub const IMAGE_SIDE: usize = 32;
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VARM";

/// Cardinalities of shape, scale, rotation, x and y.
pub const FACTOR_SIZES: [usize; 5] = [3, 6, 16, 16, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpriteFactors {
    pub shape: Shape,
    pub scale: u8,
    pub rotation: u8,
    pub pos_x: u8,
    pub pos_y: u8,
}

impl SpriteFactors {
    pub fn grid_size() -> usize {
        FACTOR_SIZES.iter().product()
    }

    /// Mixed-radix decoding of a grid index.
    pub fn from_index(mut i: usize) -> Result<Self> {
        if i >= Self::grid_size() {
            return Err(Error::arg(format!("factor index {i} outside grid")));
        }
        let mut digits = [0usize; 5];
        for k in (0..5).rev() {
            digits[k] = i % FACTOR_SIZES[k];
            i /= FACTOR_SIZES[k];
        }
        Ok(Self {
            shape: Shape::ALL[digits[0]],
            scale: digits[1] as u8,
            rotation: digits[2] as u8,
            pos_x: digits[3] as u8,
            pos_y: digits[4] as u8,
        })
    }

    pub fn indices(&self) -> [usize; 5] {
        [
            self.shape as usize,
            self.scale as usize,
            self.rotation as usize,
            self.pos_x as usize,
            self.pos_y as usize,
        ]
    }

    fn from_indices(ix: [usize; 5]) -> Result<Self> {
        for (k, (&v, &n)) in ix.iter().zip(&FACTOR_SIZES).enumerate() {
            if v >= n {
                return Err(Error::arg(format!("factor {k} value {v} exceeds cardinality {n}")));
            }
        }
        Ok(Self {
            shape: Shape::ALL[ix[0]],
            scale: ix[1] as u8,
            rotation: ix[2] as u8,
            pos_x: ix[3] as u8,
            pos_y: ix[4] as u8,
        })
    }

    /// Rasterises the sprite into `IMAGE_SIDE^2` pixels in `{-1, +1}`,
    /// row-major with `y` down.
    pub fn render(&self) -> Vec<f64> {
        let side = IMAGE_SIDE as f64;
        let radius = 2.5 + 0.7 * self.scale as f64;
        let margin = 8.0;
        let step = (side - 2.0 * margin) / 15.0;
        let cx = margin + step * self.pos_x as f64;
        let cy = margin + step * self.pos_y as f64;
        let theta = 2.0 * PI * self.rotation as f64 / 16.0;
        let (s, c) = theta.sin_cos();
        let mut out = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
        for py in 0..IMAGE_SIDE {
            for px in 0..IMAGE_SIDE {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let inside = match self.shape {
                    Shape::Square => u.abs() <= radius && v.abs() <= radius,
                    Shape::Ellipse => (u / (1.3 * radius)).powi(2) + (v / (0.6 * radius)).powi(2) <= 1.0,
                    Shape::Triangle => in_triangle(u, v, 1.4 * radius),
                };
                out.push(if inside { 1.0 } else { -1.0 });
            }
        }
        out
    }
}

/// Equilateral triangle with circumradius `r`, apex pointing up.
fn in_triangle(u: f64, v: f64, r: f64) -> bool {
    (0..3).all(|k| {
        // inward normal of edge k, at distance r / 2 from the centre
        let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0 + PI;
        u * a.cos() + v * a.sin() <= r / 2.0
    })
}

/// Images as rows of `pixels`, with their generating factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pixels: Array2<f64>,
    pub factors: Vec<SpriteFactors>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.pixels.row(i).to_vec()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            pixels: self.pixels.select(Axis(0), rows),
            factors: rows.iter().map(|&i| self.factors[i]).collect(),
            height: self.height,
            width: self.width,
        }
    }
}

/// `count` distinct factor combinations drawn uniformly without
/// replacement, rendered in draw order.
pub fn gen_sprites(count: usize, seed: u64) -> Result<Dataset> {
    let grid = SpriteFactors::grid_size();
    if count > grid {
        return Err(Error::arg(format!("requested {count} sprites but the grid has {grid}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, grid, count);
    let mut pixels = Array2::zeros((count, IMAGE_SIDE * IMAGE_SIDE));
    let mut factors = Vec::with_capacity(count);
    for (row, i) in picks.iter().enumerate() {
        let f = SpriteFactors::from_index(i)?;
        for (dst, src) in pixels.row_mut(row).iter_mut().zip(f.render()) {
            *dst = src;
        }
        factors.push(f);
    }
    Ok(Dataset {
        pixels,
        factors,
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
    })
}

/// Disjoint seeded partition of row indices by `fractions`. The last part
/// absorbs rounding.
pub fn split(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::arg("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split fractions sum to {total}, expected 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        parts.push(order[start..end.max(start)].to_vec());
        start = end.max(start);
    }
    Ok(parts)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn integrity(path: &Path, reason: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(integrity(self.path, "file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + ds.pixels.len() * 4 + ds.len() * 5);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.height as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.width as u32).to_le_bytes());
    buf.extend_from_slice(&(FACTOR_SIZES.len() as u32).to_le_bytes());
    for n in FACTOR_SIZES {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for f in &ds.factors {
        buf.extend(f.indices().iter().map(|&v| v as u8));
    }
    for v in ds.pixels.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    write(path, &buf)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(integrity(path, "missing VARM magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader {
        bytes: body,
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(integrity(path, "checksum mismatch"));
    }
    let count = r.u64()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_factors = r.u32()? as usize;
    let mut sizes = Vec::with_capacity(n_factors);
    for _ in 0..n_factors {
        sizes.push(r.u32()? as usize);
    }
    if sizes != FACTOR_SIZES {
        return Err(integrity(path, format!("unexpected factor cardinalities {sizes:?}")));
    }
    let table = r.take(count * n_factors)?;
    let factors = table
        .chunks_exact(n_factors)
        .map(|c| SpriteFactors::from_indices([c[0], c[1], c[2], c[3], c[4]].map(usize::from)))
        .collect::<Result<Vec<_>>>()?;
    let raw = r.take(count * height * width * 4)?;
    if r.pos != body.len() {
        return Err(integrity(path, "trailing bytes"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let pixels = Array2::from_shape_vec((count, height * width), values)
        .map_err(|e| integrity(path, e.to_string()))?;
    Ok(Dataset {
        pixels,
        factors,
        height,
        width,
    })
}

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub objective_hash: String,
    /// Resolved run configuration, if any.
    #[serde(default)]
    pub run: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    blob_len: usize,
    blob_crc32: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE))
}

/// Writes `manifest.json` and `params.bin` (32-bit little-endian floats in
/// creation order) under `dir`. Values are rounded to `f32`; models built
/// and trained by this crate hold `f32`-representable parameters, so the
/// round trip is exact for them.
pub fn save_checkpoint(model: &Model, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    for (_, a, _) in model.params.iter() {
        for v in a.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let params = model
        .params
        .iter()
        .map(|(name, a, _)| ParamEntry {
            name: name.to_string(),
            shape: [a.nrows(), a.ncols()],
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params,
        blob_len: blob.len(),
        blob_crc32: crc32fast::hash(&blob),
        meta: meta.clone(),
    };
    let (mpath, bpath) = checkpoint_paths(dir);
    write(&bpath, &blob)?;
    write(&mpath, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let (mpath, bpath) = checkpoint_paths(dir);
    let text = read(&mpath)?;
    let value: serde_json::Value = serde_json::from_slice(&text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| integrity(&mpath, "missing format_version"))? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    let mut model = Model::new(manifest.config.clone(), manifest.meta.seed)?;
    let expected: Vec<ParamEntry> = model
        .params
        .iter()
        .map(|(name, a, _)| ParamEntry {
            name: name.to_string(),
            shape: [a.nrows(), a.ncols()],
        })
        .collect();
    if expected != manifest.params {
        return Err(integrity(&mpath, "parameter names or shapes differ from the configuration"));
    }
    let blob = read(&bpath)?;
    if blob.len() != manifest.blob_len || blob.len() != 4 * model.params.num_scalars() {
        return Err(integrity(
            &bpath,
            format!(
                "blob has {} bytes, expected {}",
                blob.len(),
                4 * model.params.num_scalars()
            ),
        ));
    }
    if crc32fast::hash(&blob) != manifest.blob_crc32 {
        return Err(integrity(&bpath, "checksum mismatch"));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    model.params.assign_flat(&flat)?;
    Ok((model, manifest.meta))
}

//! Bi-temporal datasets: raw pair loading, non-overlapping tiling,
//! normalization, manifests and batching.
//!
//! Prepared layout: `<root>/<split>/{A,B,label}/<id>.png`, with labels as
//! single-channel 8-bit PNG (0 = unchanged, 1 or 255 = changed) and a
//! manifest `<root>/<split>.txt` listing one id per line.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::BinaryMap;

pub const DEFAULT_TILE_SIZE: usize = 256;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const SIDES: [&str; 3] = ["A", "B", "label"];

/// Per-channel statistics of the corpus the backbone was pretrained on.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Map any non-zero label value (0/255 masks included) to 1.
pub fn binarize_label(label: &GrayImage) -> GrayImage {
    let mut out = label.clone();
    for p in out.pixels_mut() {
        p.0[0] = u8::from(p.0[0] != 0);
    }
    out
}

/// A co-registered pre/post image pair with its binary change label.
#[derive(Debug, Clone)]
pub struct RawPair {
    pub id: String,
    pub image_a: RgbImage,
    pub image_b: RgbImage,
    /// Values in {0, 1}.
    pub label: GrayImage,
}

impl RawPair {
    pub fn new(id: impl Into<String>, image_a: RgbImage, image_b: RgbImage, label: GrayImage) -> Result<Self> {
        let id = id.into();
        if image_a.dimensions() != image_b.dimensions() || image_a.dimensions() != label.dimensions() {
            return Err(Error::Sample {
                id,
                reason: format!(
                    "raster sizes differ: A {:?}, B {:?}, label {:?}",
                    image_a.dimensions(),
                    image_b.dimensions(),
                    label.dimensions()
                ),
            });
        }
        Ok(Self {
            id,
            image_a,
            image_b,
            label: binarize_label(&label),
        })
    }

    pub fn load(id: &str, a: &Path, b: &Path, label: &Path) -> Result<Self> {
        let image_a = read_rgb(a)?;
        let image_b = read_rgb(b)?;
        let label = read_gray(label)?;
        Self::new(id, image_a, image_b, label)
    }

    /// (height, width)
    pub fn size(&self) -> (usize, usize) {
        (self.image_a.height() as usize, self.image_a.width() as usize)
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_luma8())
}

/// Top-left corner and side of one tile in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileFootprint {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

/// Row-major grid of `⌊h/t⌋ × ⌊w/t⌋` tiles anchored at (0, 0). Remainder
/// rows and columns are not covered.
pub fn tile_grid(height: usize, width: usize, tile_size: usize) -> Result<Vec<TileFootprint>> {
    if tile_size == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity((height / tile_size) * (width / tile_size));
    for r in 0..height / tile_size {
        for c in 0..width / tile_size {
            out.push(TileFootprint {
                row: r * tile_size,
                col: c * tile_size,
                size: tile_size,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileOrigin {
    pub source: String,
    pub row: usize,
    pub col: usize,
}

impl TileOrigin {
    /// Id of the tile in a prepared dataset.
    pub fn tile_id(&self) -> String {
        format!("{}_{}_{}", self.source, self.row, self.col)
    }
}

/// Un-normalized tile cut from a [`RawPair`].
#[derive(Debug, Clone)]
pub struct RawTile {
    pub origin: TileOrigin,
    pub image_a: RgbImage,
    pub image_b: RgbImage,
    pub label: GrayImage,
}

pub fn tile_pair(pair: &RawPair, tile_size: usize) -> Result<Vec<RawTile>> {
    let (h, w) = pair.size();
    if pair.image_b.dimensions() != pair.image_a.dimensions() || pair.label.dimensions() != pair.image_a.dimensions() {
        return Err(Error::Sample {
            id: pair.id.clone(),
            reason: "raster sizes differ".into(),
        });
    }
    let t = tile_size as u32;
    tile_grid(h, w, tile_size).map(|grid| {
        grid.into_iter()
            .map(|fp| {
                let (x, y) = (fp.col as u32, fp.row as u32);
                RawTile {
                    origin: TileOrigin {
                        source: pair.id.clone(),
                        row: fp.row,
                        col: fp.col,
                    },
                    image_a: image::imageops::crop_imm(&pair.image_a, x, y, t, t).to_image(),
                    image_b: image::imageops::crop_imm(&pair.image_b, x, y, t, t).to_image(),
                    label: image::imageops::crop_imm(&pair.label, x, y, t, t).to_image(),
                }
            })
            .collect()
    })
}

/// Scale one 0–255 channel value to [0, 1] and standardize it; inputs
/// outside [0, 255] are clamped first.
pub fn normalize_value(value: f64, channel: usize) -> f64 {
    (value.clamp(0.0, 255.0) / 255.0 - CHANNEL_MEAN[channel]) / CHANNEL_STD[channel]
}

pub fn denormalize_value(value: f64, channel: usize) -> f64 {
    (value * CHANNEL_STD[channel] + CHANNEL_MEAN[channel]) * 255.0
}

/// Normalize an RGB raster into channel-major (3, H, W) order.
pub fn normalize(image: &RgbImage) -> Vec<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, p) in image.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + idx] = normalize_value(p.0[c] as f64, c);
        }
    }
    out
}

/// Inverse of [`normalize`]: channel-major input, interleaved 0–255 output.
pub fn denormalize(values: &[f64], height: usize, width: usize) -> Vec<f64> {
    let hw = height * width;
    let mut out = vec![0.0; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            out[3 * i + c] = denormalize_value(values[c * hw + i], c);
        }
    }
    out
}

/// Normalized network input for one tile pair.
#[derive(Debug, Clone)]
pub struct BitemporalSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// (3, H, W), normalized.
    pub tile_a: Vec<f32>,
    pub tile_b: Vec<f32>,
    pub label: BinaryMap,
}

impl BitemporalSample {
    pub fn from_images(id: impl Into<String>, a: &RgbImage, b: &RgbImage, label: &GrayImage) -> Result<Self> {
        let id = id.into();
        if a.dimensions() != b.dimensions() || a.dimensions() != label.dimensions() {
            return Err(Error::Sample {
                id,
                reason: "raster sizes differ".into(),
            });
        }
        let (height, width) = (a.height() as usize, a.width() as usize);
        let label = binarize_label(label);
        Ok(Self {
            id,
            height,
            width,
            tile_a: normalize(a).into_iter().map(|v| v as f32).collect(),
            tile_b: normalize(b).into_iter().map(|v| v as f32).collect(),
            label: BinaryMap {
                height,
                width,
                data: label.into_raw(),
            },
        })
    }

    pub fn from_tile(tile: &RawTile) -> Result<Self> {
        Self::from_images(tile.origin.tile_id(), &tile.image_a, &tile.image_b, &tile.label)
    }
}

/// Stacked batch ready for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// (B, 1, H, W) with values 0.0 / 1.0.
    pub target: Tensor,
    pub labels: Vec<BinaryMap>,
}

pub fn collate(samples: &[BitemporalSample], dtype: DType) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::shape("cannot collate an empty batch"))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Sample {
            id: bad.id.clone(),
            reason: format!("size {}×{} differs from batch size {h}×{w}", bad.height, bad.width),
        });
    }
    let n = samples.len();
    let dev = Device::Cpu;
    let stack = |f: &dyn Fn(&BitemporalSample) -> &[f32]| -> Result<Tensor> {
        let data: Vec<f32> = samples.iter().flat_map(|s| f(s).iter().copied()).collect();
        Ok(Tensor::from_vec(data, (n, 3, h, w), &dev)?.to_dtype(dtype)?)
    };
    let target: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.label.data.iter().map(|&v| v as f32))
        .collect();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        image_a: stack(&|s| &s.tile_a)?,
        image_b: stack(&|s| &s.tile_b)?,
        target: Tensor::from_vec(target, (n, 1, h, w), &dev)?.to_dtype(dtype)?,
        labels: samples.iter().map(|s| s.label.clone()).collect(),
    })
}

/// Identical random flip/rotation for both dates and the label.
pub fn augment<R: Rng>(a: &RgbImage, b: &RgbImage, label: &GrayImage, rng: &mut R) -> (RgbImage, RgbImage, GrayImage) {
    use image::imageops::{flip_horizontal, rotate90};
    let (mut a, mut b, mut l) = (a.clone(), b.clone(), label.clone());
    if rng.random_bool(0.5) {
        a = flip_horizontal(&a);
        b = flip_horizontal(&b);
        l = flip_horizontal(&l);
    }
    // Square tiles keep their size under rotation.
    if a.width() == a.height() {
        for _ in 0..rng.random_range(0..4) {
            a = rotate90(&a);
            b = rotate90(&b);
            l = rotate90(&l);
        }
    }
    (a, b, l)
}

/// Ids of one split of a prepared dataset, sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub ids: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn path(&self, side: &str, id: &str) -> PathBuf {
        self.root.join(&self.split).join(side).join(format!("{id}.png"))
    }

    pub fn manifest_file(root: &Path, split: &str) -> PathBuf {
        root.join(format!("{split}.txt"))
    }

    pub fn write(&self) -> Result<()> {
        let path = Self::manifest_file(&self.root, &self.split);
        let mut text = self.ids.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path, split: &str) -> Result<Self> {
        let path = Self::manifest_file(root, split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut ids: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        ids.sort();
        Ok(Self {
            root: root.to_path_buf(),
            split: split.to_string(),
            ids,
        })
    }

    pub fn load_sample(&self, index: usize) -> Result<BitemporalSample> {
        let id = &self.ids[index];
        let a = read_rgb(&self.path("A", id))?;
        let b = read_rgb(&self.path("B", id))?;
        let l = read_gray(&self.path("label", id))?;
        BitemporalSample::from_images(id.clone(), &a, &b, &l)
    }

    pub fn load_sample_augmented<R: Rng>(&self, index: usize, rng: &mut R) -> Result<BitemporalSample> {
        let id = &self.ids[index];
        let a = read_rgb(&self.path("A", id))?;
        let b = read_rgb(&self.path("B", id))?;
        let l = read_gray(&self.path("label", id))?;
        let (a, b, l) = augment(&a, &b, &l, rng);
        BitemporalSample::from_images(id.clone(), &a, &b, &l)
    }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Scan `<root>/<split>/A` and verify every id has its B and label siblings.
/// A missing split directory yields an empty manifest.
pub fn load_manifest(root: &Path, split: &str) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::DatasetMissing(root.to_path_buf()));
    }
    let split_dir = root.join(split);
    let ids = png_stems(&split_dir.join("A"))?;
    let b_ids = png_stems(&split_dir.join("B"))?;
    let l_ids = png_stems(&split_dir.join("label"))?;
    for id in &ids {
        for (side, set) in [("B", &b_ids), ("label", &l_ids)] {
            if !set.contains(id) {
                return Err(Error::Sample {
                    id: id.clone(),
                    reason: format!("missing {side} image in split `{split}`"),
                });
            }
        }
    }
    if let Some(orphan) = b_ids.iter().chain(&l_ids).find(|id| !ids.contains(*id)) {
        return Err(Error::Sample {
            id: orphan.clone(),
            reason: format!("missing A image in split `{split}`"),
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        ids: ids.into_iter().collect(),
    })
}

/// Fails if any id appears in more than one manifest.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for m in manifests {
        for id in &m.ids {
            if let Some(other) = seen.insert(id, &m.split) {
                if other != m.split {
                    return Err(Error::Sample {
                        id: id.clone(),
                        reason: format!("present in both `{other}` and `{}`", m.split),
                    });
                }
            }
        }
    }
    Ok(())
}

fn write_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Cut every raw pair under `raw_root/<split>` into tiles under
/// `out_root/<split>` and write the manifests. Returns (split, tile count)
/// for each split found. Labels are written as 0/255.
pub fn prepare_dataset(raw_root: &Path, out_root: &Path, tile_size: usize) -> Result<Vec<(String, usize)>> {
    if !raw_root.is_dir() {
        return Err(Error::DatasetMissing(raw_root.to_path_buf()));
    }
    if tile_size == 0 {
        return Err(Error::Config("tile size must be at least 1".into()));
    }
    if raw_root.canonicalize().ok() == out_root.canonicalize().ok() && out_root.exists() {
        return Err(Error::Layout("output root must differ from the raw root".into()));
    }
    let mut counts = Vec::new();
    for split in SPLITS {
        let split_dir = raw_root.join(split);
        if !split_dir.is_dir() {
            continue;
        }
        for side in SIDES {
            if !split_dir.join(side).is_dir() {
                return Err(Error::Layout(format!(
                    "split `{split}` is missing its `{side}` directory under {}",
                    split_dir.display()
                )));
            }
        }
        let raw = load_manifest(raw_root, split)?;
        for side in SIDES {
            let dir = out_root.join(split).join(side);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut ids = Vec::new();
        for id in &raw.ids {
            let pair = RawPair::load(id, &raw.path("A", id), &raw.path("B", id), &raw.path("label", id))?;
            for tile in tile_pair(&pair, tile_size)? {
                let tid = tile.origin.tile_id();
                let dir = out_root.join(split);
                write_png(&tile.image_a, &dir.join("A").join(format!("{tid}.png")))?;
                write_png(&tile.image_b, &dir.join("B").join(format!("{tid}.png")))?;
                let mut label = tile.label.clone();
                label.pixels_mut().for_each(|p| p.0[0] *= 255);
                write_png(&label, &dir.join("label").join(format!("{tid}.png")))?;
                ids.push(tid);
            }
        }
        ids.sort();
        let manifest = DatasetManifest {
            root: out_root.to_path_buf(),
            split: split.to_string(),
            ids,
        };
        manifest.write()?;
        counts.push((split.to_string(), manifest.len()));
    }
    Ok(counts)
}

/// Save a binary map as a {0, 255} single-channel PNG.
pub fn save_binary_png(map: &BinaryMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(
        map.width as u32,
        map.height as u32,
        map.data.iter().map(|&v| v * 255).collect(),
    )
    .ok_or_else(|| Error::shape("binary map buffer size"))?;
    write_png(&img, path)
}

pub fn load_binary_png(path: &Path) -> Result<BinaryMap> {
    let img = binarize_label(&read_gray(path)?);
    Ok(BinaryMap {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw(),
    })
}

pub(crate) fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_png(img, path)
}

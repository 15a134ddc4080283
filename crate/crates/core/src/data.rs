//! Dataset ingestion: raster loading, tiling, mask binarisation, train /
//! validation splitting and batching.
//!
//! A dataset is either a directory with `images/` and `labels/`
//! sub-directories whose files pair up by stem, or a manifest file listing
//! one `image<TAB>label` pair per line (relative paths are resolved against
//! the manifest's directory).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit raster in height × width × channel order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dataset(format!(
                "{height}x{width}x{channels} raster given {} bytes",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// The `size`×`size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Raster> {
        if top + size > self.height || left + size > self.width {
            return Err(Error::Dataset(format!(
                "crop {size}x{size} at ({top}, {left}) exceeds {}x{} raster",
                self.height, self.width
            )));
        }
        let row = size * self.channels;
        let mut data = Vec::with_capacity(size * row);
        for y in top..top + size {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + row]);
        }
        Raster::new(size, size, self.channels, data)
    }

    /// `[C, H, W]` tensor with values divided by `scale`.
    pub fn to_tensor(&self, scale: f32) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v as f32 / scale;
            }
        }
        Tensor::from_parts(vec![self.channels, self.height, self.width], out)
    }

    pub fn load_rgb(path: &Path) -> Result<Raster> {
        let img = open_image(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Raster::new(h as usize, w as usize, 3, img.into_raw())
    }

    pub fn load_gray(path: &Path) -> Result<Raster> {
        let img = open_image(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Raster::new(h as usize, w as usize, 1, img.into_raw())
    }

    /// Writes a 1- or 3-channel raster as PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Dataset(format!("cannot write a {c}-channel PNG"))),
        };
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color).map_err(|source| {
            Error::Image {
                path: path.to_path_buf(),
                source,
            }
        })
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Top-left corners of the non-overlapping `tile`×`tile` windows of an
/// `height`×`width` raster. Trailing rows and columns that do not fill a
/// whole tile are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    /// `(row, column)` corners in row-major order.
    pub offsets: Vec<(usize, usize)>,
}

pub fn tile_grid(height: usize, width: usize, tile: usize) -> Result<TileGrid> {
    if tile == 0 || height < tile || width < tile {
        return Err(Error::RasterTooSmall { height, width, tile });
    }
    let offsets = (0..height / tile)
        .flat_map(|r| (0..width / tile).map(move |c| (r * tile, c * tile)))
        .collect();
    Ok(TileGrid {
        height,
        width,
        tile,
        offsets,
    })
}

/// Maps a grey-level mask to {0, 1}. Values other than 0 and `positive`
/// are rejected so that anti-aliased or mislabelled masks are caught early.
pub fn binarize_mask(mask: &Raster, positive: u8) -> Result<Raster> {
    if mask.channels != 1 {
        return Err(Error::Dataset(format!("mask has {} channels, expected 1", mask.channels)));
    }
    let data = mask
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            v if v == positive => Ok(1),
            value => Err(Error::MaskValue { value, positive }),
        })
        .collect::<Result<Vec<u8>>>()?;
    Raster::new(mask.height, mask.width, 1, data)
}

/// One training tile: an RGB image and its {0, 1} mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Raster,
    pub mask: Raster,
    /// `<source stem>_<row>_<column>`
    pub name: String,
}

/// Cuts an image/mask pair into aligned tiles.
pub fn tile_pair(image: &Raster, mask: &Raster, tile: usize, stem: &str) -> Result<Vec<Sample>> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::Dataset(format!(
            "{stem}: image is {}x{} but mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let grid = tile_grid(image.height, image.width, tile)?;
    grid.offsets
        .iter()
        .map(|&(r, c)| {
            Ok(Sample {
                image: image.crop(r, c, tile)?,
                mask: mask.crop(r, c, tile)?,
                name: format!("{stem}_{r}_{c}"),
            })
        })
        .collect()
}

/// An image/label file pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub image: PathBuf,
    pub label: PathBuf,
}

impl PairPaths {
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem() {
            let stem = stem.to_string_lossy().into_owned();
            if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                return Err(Error::Dataset(format!(
                    "{} and {} share the stem `{stem}`",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

/// Pairs `root/images/*` with `root/labels/*` by file stem.
pub fn pair_directory(root: &Path) -> Result<Vec<PairPaths>> {
    let images = list_by_stem(&root.join("images"))?;
    let labels = list_by_stem(&root.join("labels"))?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !labels.contains_key(*k))
        .map(|k| format!("images/{k}"))
        .chain(labels.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("labels/{k}")))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!("unpaired files: {}", orphans.join(", "))));
    }
    Ok(images
        .into_iter()
        .map(|(stem, image)| PairPaths {
            image,
            label: labels[&stem].clone(),
        })
        .collect())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairPaths>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, lbl) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("{}:{}: expected `image<TAB>label`", path.display(), i + 1))
        })?;
        pairs.push(PairPaths {
            image: base.join(img.trim()),
            label: base.join(lbl.trim()),
        });
    }
    Ok(pairs)
}

/// Writes a manifest; paths under the manifest's directory are stored
/// relative to it.
pub fn write_manifest(path: &Path, pairs: &[PairPaths]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let text: String = pairs
        .iter()
        .map(|p| format!("{}\t{}\n", rel(&p.image), rel(&p.label)))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a dataset location: a directory is paired by stem, a file is
/// read as a manifest.
pub fn discover(source: &Path) -> Result<Vec<PairPaths>> {
    if source.is_dir() {
        pair_directory(source)
    } else {
        read_manifest(source)
    }
}

/// Loads, binarises and tiles every pair.
pub fn load_samples(pairs: &[PairPaths], tile: usize, positive: u8) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for p in pairs {
        let image = Raster::load_rgb(&p.image)?;
        let mask = binarize_mask(&Raster::load_gray(&p.label)?, positive).map_err(|e| match e {
            Error::MaskValue { .. } => Error::Dataset(format!("{}: {e}", p.label.display())),
            e => e,
        })?;
        samples.extend(tile_pair(&image, &mask, tile, &p.stem())?);
    }
    Ok(samples)
}

/// Seeded shuffle followed by a cut: the first `⌈fraction·n⌉` items train,
/// the rest validate.
pub fn split<T>(mut items: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Dataset(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n = items.len();
    // The small slack keeps e.g. 0.7·100 = 70.000…01 from rounding up to 71.
    let n_train = ((train_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let val = items.split_off(n_train.min(n));
    Ok((items, val))
}

/// A permutation of `0..n` derived from `seed`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// A mini-batch: images `[B, 3, d, d]` in `[0, 1]` and masks `[B, 1, d, d]`
/// in `{0, 1}`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    pub names: Vec<String>,
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.to_tensor(255.0)).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.to_tensor(1.0)).collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        masks: Tensor::stack(&masks)?,
        names: samples.iter().map(|s| s.name.clone()).collect(),
    })
}

/// Batches of `batch_size` in the given order; the last may be shorter.
pub fn batches<'a>(
    samples: &'a [Sample],
    order: &'a [usize],
    batch_size: usize,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    order.chunks(batch_size.max(1)).map(move |chunk| {
        let picked: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        make_batch(&picked)
    })
}

//! Tiny datasets: procedural colored shapes, image folders, the fixed
//! validation split, nested subsampling, batching with horizontal flips,
//! a flat binary cache and PNG grids.

use std::io::{Read, Write};
use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unsupported resolution {0} (use 16 or 32)")]
    Resolution(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("malformed dataset cache: {0}")]
    Cache(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub const VAL_FRACTION: f64 = 0.2;
pub const CHANNELS: usize = 3;

/// Images in `[-1, 1]`, `(N, 3, R, R)` row-major, with a disjoint
/// train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub resolution: usize,
    pub images: Vec<f32>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset and carves the validation split with `split_seed`.
    pub fn new(name: String, resolution: usize, images: Vec<f32>, split_seed: u64) -> Result<Self> {
        let per = CHANNELS * resolution * resolution;
        if per == 0 || images.is_empty() || images.len() % per != 0 {
            return Err(DataError::Invalid(format!(
                "{} values is not a whole number of {resolution}x{resolution} RGB images",
                images.len()
            )));
        }
        let n = images.len() / per;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let n_val = (VAL_FRACTION * n as f64).round() as usize;
        let mut val_indices = order[..n_val].to_vec();
        let mut train_indices = order[n_val..].to_vec();
        val_indices.sort_unstable();
        train_indices.sort_unstable();
        Ok(Self {
            name,
            resolution,
            images,
            train_indices,
            val_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        indices.iter().for_each(|&i| data.extend_from_slice(self.image(i)));
        Tensor::from_vec(data, &[indices.len(), CHANNELS, self.resolution, self.resolution])
            .expect("gathered size matches shape")
    }

    pub fn all(&self) -> Tensor {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn train(&self) -> Tensor {
        self.gather(&self.train_indices)
    }

    pub fn val(&self) -> Tensor {
        self.gather(&self.val_indices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    pub classes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 500,
            resolution: 16,
            seed: 0,
            classes: 4,
        }
    }
}

/// A palette color whose largest channel magnitude is at least 0.45, so
/// that real images never contain near-zero pixels.
fn palette_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let c = [
            rng.random_range(-0.9f32..0.9),
            rng.random_range(-0.9f32..0.9),
            rng.random_range(-0.9f32..0.9),
        ];
        if c.iter().any(|v| v.abs() >= 0.45) {
            return c;
        }
    }
}

/// Colored ellipses and rectangles on a tinted background. Each class owns
/// a background color and two shape colors; images jitter those colors and
/// place 1–2 shapes at random positions and sizes.
pub fn make_synthetic(spec: SyntheticSpec) -> Result<Dataset> {
    if !matches!(spec.resolution, 16 | 32) {
        return Err(DataError::Resolution(spec.resolution));
    }
    if spec.n == 0 || spec.classes == 0 {
        return Err(DataError::Invalid("n and classes must be positive".into()));
    }
    let r = spec.resolution;
    let rf = r as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let palettes: Vec<[[f32; 3]; 3]> = (0..spec.classes)
        .map(|_| [palette_color(&mut rng), palette_color(&mut rng), palette_color(&mut rng)])
        .collect();
    let mut images = Vec::with_capacity(spec.n * CHANNELS * r * r);
    for i in 0..spec.n {
        let pal = &palettes[i % spec.classes];
        let jitter = |rng: &mut ChaCha8Rng, c: [f32; 3]| c.map(|v| v + rng.random_range(-0.08f32..0.08));
        let mut img = vec![jitter(&mut rng, pal[0]); r * r];
        // Vertical shading keeps the background from being flat.
        let shade = rng.random_range(-0.1f32..0.1);
        for y in 0..r {
            let s = shade * (2.0 * y as f32 / (rf - 1.0) - 1.0);
            for x in 0..r {
                img[y * r + x] = img[y * r + x].map(|v| v + s);
            }
        }
        let n_shapes = rng.random_range(1..=2);
        for k in 0..n_shapes {
            let color = jitter(&mut rng, pal[1 + k % 2]);
            let cx = rng.random_range(0.2 * rf..0.8 * rf);
            let cy = rng.random_range(0.2 * rf..0.8 * rf);
            let hw = rng.random_range(0.12 * rf..0.32 * rf);
            let hh = rng.random_range(0.12 * rf..0.32 * rf);
            let ellipse = rng.random::<bool>();
            for y in 0..r {
                for x in 0..r {
                    let dx = (x as f32 + 0.5 - cx) / hw;
                    let dy = (y as f32 + 0.5 - cy) / hh;
                    let inside = if ellipse {
                        dx * dx + dy * dy <= 1.0
                    } else {
                        dx.abs() <= 1.0 && dy.abs() <= 1.0
                    };
                    if inside {
                        img[y * r + x] = color;
                    }
                }
            }
        }
        for c in 0..CHANNELS {
            images.extend(img.iter().map(|p| p[c].clamp(-1.0, 1.0)));
        }
    }
    Dataset::new(
        format!("synthetic-n{}-r{}-s{}", spec.n, r, spec.seed),
        r,
        images,
        spec.seed.wrapping_add(SPLIT_SEED_OFFSET),
    )
}

/// Keeps the split permutation independent of the content stream.
const SPLIT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Center-crops to a square, resizes to `resolution` with bilinear
/// filtering (skipped when already that size) and maps `[0, 255]` to
/// `[-1, 1]`.
pub fn image_to_values(img: &image::DynamicImage, resolution: usize) -> Vec<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    let sized = if side == r {
        cropped
    } else {
        image::imageops::resize(&cropped, r, r, FilterType::Triangle)
    };
    let mut out = vec![0.0f32; CHANNELS * resolution * resolution];
    for (x, y, p) in sized.enumerate_pixels() {
        for c in 0..CHANNELS {
            out[(c * resolution + y as usize) * resolution + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Loads every decodable image in `path` (sorted by file name). Unreadable
/// files are skipped with a warning.
pub fn load_folder(path: &Path, resolution: usize, split_seed: u64) -> Result<Dataset> {
    if resolution == 0 {
        return Err(DataError::Resolution(resolution));
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut images = Vec::new();
    for p in &entries {
        match image::open(p) {
            Ok(img) => images.extend(image_to_values(&img, resolution)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(DataError::Invalid(format!("no decodable images in {}", path.display())));
    }
    let name = path.file_name().map_or_else(|| "folder".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, resolution, images, split_seed)
}

/// Keeps `⌈fraction·|train|⌉` training images chosen by a seeded shuffle;
/// the validation split is untouched. For a fixed seed, smaller fractions
/// select subsets of larger ones.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut order = dataset.train_indices.clone();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // Guard against products like 0.1·30 = 3.0000000000000004.
    let keep = (fraction * order.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    if keep == 0 {
        return Err(DataError::Invalid(format!(
            "fraction {fraction} of {} training images selects nothing",
            order.len()
        )));
    }
    let mut train_indices = order[..keep].to_vec();
    train_indices.sort_unstable();
    Ok(Dataset {
        name: format!("{}@{fraction}", dataset.name),
        train_indices,
        ..dataset.clone()
    })
}

/// Mirrors one `(3, R, R)` image left-right.
pub fn flip_horizontal(image: &mut [f32], resolution: usize) {
    for row in image.chunks_mut(resolution) {
        row.reverse();
    }
}

/// Endless stream of training batches: concatenated seeded permutations of
/// the training split (so a split smaller than the batch repeats images),
/// each image flipped with probability `flip_probability`.
#[derive(Debug, Clone)]
pub struct BatchIter {
    batch_size: usize,
    flip_probability: f64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIter {
    pub fn new(batch_size: usize, flip: bool) -> Self {
        Self::with_flip_probability(batch_size, if flip { 0.5 } else { 0.0 })
    }

    pub fn with_flip_probability(batch_size: usize, flip_probability: f64) -> Self {
        Self {
            batch_size,
            flip_probability,
            order: Vec::new(),
            pos: 0,
        }
    }

    pub fn next_batch(&mut self, data: &Dataset, rng: &mut ChaCha8Rng) -> Tensor {
        let mut picks = Vec::with_capacity(self.batch_size);
        while picks.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = data.train_indices.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            picks.push(self.order[self.pos]);
            self.pos += 1;
        }
        let per = data.image_len();
        let mut out = Vec::with_capacity(picks.len() * per);
        for &i in &picks {
            let start = out.len();
            out.extend_from_slice(data.image(i));
            if self.flip_probability > 0.0 && rng.random_bool(self.flip_probability) {
                flip_horizontal(&mut out[start..], data.resolution);
            }
        }
        Tensor::from_vec(out, &[picks.len(), CHANNELS, data.resolution, data.resolution])
            .expect("batch size matches shape")
    }
}

const CACHE_MAGIC: &[u8; 8] = b"DAUGDATA";
const CACHE_VERSION: u32 = 1;

/// Flat little-endian cache: magic, version, `N C H W`, name, split
/// indices, then the `f32` pixels.
pub fn save_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend(CACHE_MAGIC);
    out.extend(CACHE_VERSION.to_le_bytes());
    for d in [dataset.len(), CHANNELS, dataset.resolution, dataset.resolution] {
        out.extend((d as u64).to_le_bytes());
    }
    out.extend((dataset.name.len() as u64).to_le_bytes());
    out.extend(dataset.name.as_bytes());
    for idx in [&dataset.train_indices, &dataset.val_indices] {
        out.extend((idx.len() as u64).to_le_bytes());
        idx.iter().for_each(|&i| out.extend((i as u64).to_le_bytes()));
    }
    dataset.images.iter().for_each(|v| out.extend(v.to_le_bytes()));
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DataError::Cache("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn indices(&mut self) -> Result<Vec<usize>> {
        let len = self.u64()? as usize;
        (0..len).map(|_| Ok(self.u64()? as usize)).collect()
    }
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(DataError::Cache("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(DataError::Cache(format!("unsupported version {version}")));
    }
    let dims = [r.u64()?, r.u64()?, r.u64()?, r.u64()?].map(|d| d as usize);
    let [n, c, h, w] = dims;
    if c != CHANNELS || h != w {
        return Err(DataError::Cache(format!("unexpected shape {dims:?}")));
    }
    let name_len = r.u64()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| DataError::Cache(e.to_string()))?;
    let train_indices = r.indices()?;
    let val_indices = r.indices()?;
    let count = n
        .checked_mul(c * h * w * 4)
        .ok_or_else(|| DataError::Cache("size overflow".into()))?;
    let images = r
        .take(count)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.pos != buf.len() {
        return Err(DataError::Cache("trailing bytes".into()));
    }
    if train_indices.iter().chain(&val_indices).any(|&i| i >= n) {
        return Err(DataError::Cache("split index out of range".into()));
    }
    Ok(Dataset {
        name,
        resolution: h,
        images,
        train_indices,
        val_indices,
    })
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles `(N, 3, R, R)` images into a `rows × cols` RGB image (row-major,
/// missing cells black).
pub fn tile(images: &Tensor, cols: usize) -> Result<RgbImage> {
    let [n, 3, h, w] = *images.shape() else {
        return Err(DataError::Invalid(format!("cannot tile tensor of shape {:?}", images.shape())));
    };
    let cols = cols.max(1);
    let rows = n.div_ceil(cols).max(1);
    let mut out = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    let d = images.data();
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| to_byte(d[((i * 3 + c) * h + y) * w + x]);
                out.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    Ok(out)
}

pub fn save_png(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    tile(images, cols)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

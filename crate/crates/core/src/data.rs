//! Datasets, binary formats, Gaussian filtering and augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[N,C,H,W]` with values in `[0,1]` and integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(shape_err!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract_err!("label {bad} outside [0, {classes})"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C,H,W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_outer(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.images.slice_outer(0, n)?,
            self.labels[..n].to_vec(),
            self.classes,
            self.split,
        )
    }

    /// Same samples with a different split tag.
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Applies `f` to every image.
    pub fn map_images(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let n = self.len();
        let mut data = Vec::with_capacity(self.images.len());
        for i in 0..n {
            let img = self
                .images
                .slice_outer(i, i + 1)?
                .reshape(self.image_shape())?;
            let out = f(&img)?;
            if out.shape() != self.image_shape() {
                return Err(shape_err!("image map changed shape to {:?}", out.shape()));
            }
            data.extend_from_slice(out.data());
        }
        Self::new(
            Tensor::from_vec(self.images.shape(), data)?,
            self.labels.clone(),
            self.classes,
            self.split,
        )
    }

    /// Mean pixel value per channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let s = self.images.shape();
        let (c, inner) = (s[1], s[2] * s[3]);
        let mut sums = vec![0.0; c];
        for (i, v) in self.images.data().iter().enumerate() {
            sums[(i / inner) % c] += v;
        }
        let count = (self.len() * inner) as f64;
        sums.iter().map(|v| v / count).collect()
    }

    /// Population standard deviation per channel.
    pub fn channel_stds(&self) -> Vec<f64> {
        let s = self.images.shape();
        let (c, inner) = (s[1], s[2] * s[3]);
        let mean = self.channel_means();
        let mut sums = vec![0.0; c];
        for (i, v) in self.images.data().iter().enumerate() {
            let ch = (i / inner) % c;
            sums[ch] += (v - mean[ch]) * (v - mean[ch]);
        }
        let count = (self.len() * inner) as f64;
        sums.iter().map(|v| libm::sqrt(v / count)).collect()
    }
}

/// Per-channel `(x − mean) / std`, fitted on one split and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(ds: &Dataset) -> Self {
        let std = ds
            .channel_stds()
            .into_iter()
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
        Self {
            mean: ds.channel_means(),
            std,
        }
    }

    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(shape_err!(
                "normalization for {} channels on {:?}",
                self.mean.len(),
                s
            ));
        }
        let (c, inner) = (s[1], s[2] * s[3]);
        let data = batch
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                (v - self.mean[ch]) / self.std[ch]
            })
            .collect();
        Tensor::from_vec(s, data)
    }
}

fn format_err(offset: usize, message: alloc::string::String) -> Error {
    Error::Format { offset, message }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            format_err(
                offset,
                format!("truncated header (file is {} bytes)", bytes.len()),
            )
        })
}

/// Parses an IDX image file and an IDX label file.
///
/// Pixels are scaled by 1/255. The class count is one past the largest label
/// unless `classes` is given.
pub fn parse_idx(
    images: &[u8],
    labels: &[u8],
    classes: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let magic = read_u32_be(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(images, 4)? as usize;
    let h = read_u32_be(images, 8)? as usize;
    let w = read_u32_be(images, 12)? as usize;
    if h == 0 || w == 0 {
        return Err(format_err(8, format!("zero image extent {h}x{w}")));
    }
    let need = 16 + n * h * w;
    if images.len() < need {
        return Err(format_err(
            images.len(),
            format!("image data truncated: need {need} bytes"),
        ));
    }
    if images.len() > need {
        return Err(format_err(
            need,
            format!("{} trailing bytes after image data", images.len() - need),
        ));
    }
    let magic = read_u32_be(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let m = read_u32_be(labels, 4)? as usize;
    if m != n {
        return Err(format_err(
            4,
            format!("label count {m} does not match image count {n}"),
        ));
    }
    if labels.len() != 8 + m {
        return Err(format_err(
            labels.len().min(8 + m),
            format!("label file is {} bytes, expected {}", labels.len(), 8 + m),
        ));
    }
    let pixels = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    if let Some(pos) = labels.iter().position(|&l| l >= classes) {
        return Err(format_err(
            8 + pos,
            format!("label {} outside [0, {classes})", labels[pos]),
        ));
    }
    Dataset::new(
        Tensor::from_vec(&[n, 1, h, w], pixels)?,
        labels,
        classes,
        split,
    )
}

fn sq(v: f64) -> f64 {
    v * v
}

fn to_byte(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Encodes a single-channel dataset as IDX `(images, labels)` files.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(contract_err!(
            "IDX images must have one channel, got {}",
            s[1]
        ));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(contract_err!("IDX labels must fit in a byte"));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| to_byte(v)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(s[0] as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

/// Parses CIFAR binary records: `label_bytes` label bytes (the last one is
/// used) followed by 3072 channel-major pixel bytes.
pub fn parse_cifar(
    bytes: &[u8],
    label_bytes: usize,
    classes: usize,
    split: Split,
) -> Result<Dataset> {
    if !(1..=2).contains(&label_bytes) {
        return Err(contract_err!(
            "CIFAR records carry 1 or 2 label bytes, not {label_bytes}"
        ));
    }
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(format_err(0, "empty CIFAR file".into()));
    }
    if !bytes.len().is_multiple_of(record) {
        let n = bytes.len() / record;
        return Err(format_err(
            n * record,
            format!(
                "truncated record: {} bytes left, record is {record}",
                bytes.len() - n * record
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(format_err(
                i * record + label_bytes - 1,
                format!("label {label} outside [0, {classes})"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(
        Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        classes,
        split,
    )
}

/// Encodes a `[N,3,32,32]` dataset as one-label-byte CIFAR records.
pub fn encode_cifar(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(contract_err!(
            "CIFAR records hold 3x32x32 images, got {:?}",
            ds.image_shape()
        ));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(contract_err!("CIFAR labels must fit in a byte"));
    }
    let mut out = Vec::with_capacity(ds.len() * (1 + CIFAR_PIXELS));
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            ds.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]
                .iter()
                .map(|&v| to_byte(v)),
        );
    }
    Ok(out)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(contract_err!(
            "gaussian sigma must be positive and finite, got {sigma}"
        ));
    }
    Ok(())
}

/// Kernel radius `ceil(3σ)`; the side is `2·radius + 1`.
pub fn gaussian_radius(sigma: f64) -> usize {
    libm::ceil(3.0 * sigma) as usize
}

/// Unnormalised samples of `exp(−(x²+y²)/σ²) / (2πσ²)` at integer offsets.
pub fn gaussian_kernel_raw(sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    let r = gaussian_radius(sigma) as i64;
    let k = (2 * r + 1) as usize;
    let norm = 1.0 / (2.0 * core::f64::consts::PI * sigma * sigma);
    let mut data = Vec::with_capacity(k * k);
    for y in -r..=r {
        for x in -r..=r {
            data.push(norm * libm::exp(-((x * x + y * y) as f64) / (sigma * sigma)));
        }
    }
    Tensor::from_vec(&[k, k], data)
}

/// [`gaussian_kernel_raw`] renormalised to sum to one.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    let raw = gaussian_kernel_raw(sigma)?;
    let total = raw.sum();
    Ok(raw.map(|v| v / total))
}

/// One-dimensional factor of [`gaussian_kernel`] (its outer square is the 2-D kernel).
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let r = gaussian_radius(sigma) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| libm::exp(-((x * x) as f64) / (sigma * sigma)))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Half-sample symmetric reflection of `i` into `[0, n)`: `d c b a | a b c d | d c b a`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Blurs each channel of a `[C,H,W]` image with [`gaussian_kernel`], reflecting at borders.
///
/// The filter is applied separably, rows then columns.
pub fn gaussian_filter(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!(
            "gaussian_filter expects [C,H,W], got {:?}",
            img.shape()
        ));
    };
    let k = gaussian_kernel_1d(sigma)?;
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect_index(x as i64 + t as i64 - r, w);
                    acc += kv * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect_index(y as i64 + t as i64 - r, h);
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}

/// Sets one `size × size` square of a `[C,H,W]` image to the per-channel `fill`.
///
/// The square's top-left corner is drawn uniformly over the positions where
/// it fits inside the image.
pub fn cutout(img: &Tensor, size: usize, fill: &[f64], rng: &mut impl Rng) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!("cutout expects [C,H,W], got {:?}", img.shape()));
    };
    if size == 0 || size > h || size > w {
        return Err(contract_err!(
            "cutout size {size} invalid for {h}x{w} image"
        ));
    }
    if fill.len() != c {
        return Err(shape_err!(
            "cutout fill has {} values for {c} channels",
            fill.len()
        ));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    let mut out = img.clone();
    let data = out.data_mut();
    for (ch, &f) in fill.iter().enumerate() {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            data[row + x0..row + x0 + size]
                .iter_mut()
                .for_each(|v| *v = f);
        }
    }
    Ok(out)
}

/// Translates a `[C,H,W]` image by `(dy, dx)` pixels, filling with zeros.
pub fn shift_image(img: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(shape_err!("shift expects [C,H,W], got {:?}", img.shape()));
    };
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x - dx;
                if sx >= 0 && sx < w as i64 {
                    out[(ch * h + y as usize) * w + x as usize] =
                        src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}

/// Reverses the column order of every row.
pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let &[_, _, w] = img.shape() else {
        return Err(shape_err!("flip expects [C,H,W], got {:?}", img.shape()));
    };
    let mut out = img.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_shift: usize,
    /// Cutout square side, when enabled.
    pub cutout: Option<usize>,
    /// Gaussian filter σ, when enabled.
    pub blur_sigma: Option<f64>,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        flip_prob: 0.0,
        max_shift: 0,
        cutout: None,
        blur_sigma: None,
    };

    /// Horizontal flips with probability 0.5 and shifts of up to 4 pixels.
    pub fn standard() -> Self {
        Self {
            flip_prob: 0.5,
            max_shift: 4,
            cutout: None,
            blur_sigma: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0
            && self.max_shift == 0
            && self.cutout.is_none()
            && self.blur_sigma.is_none()
    }

    pub fn validate(&self, image_shape: &[usize]) -> Result<()> {
        let &[_, h, w] = image_shape else {
            return Err(shape_err!(
                "augmentation expects [C,H,W] images, got {image_shape:?}"
            ));
        };
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(contract_err!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            ));
        }
        if self.max_shift >= h.min(w) {
            return Err(contract_err!(
                "shift {} not smaller than image extent {}",
                self.max_shift,
                h.min(w)
            ));
        }
        if let Some(size) = self.cutout {
            if size == 0 || size >= h.min(w) {
                return Err(contract_err!(
                    "cutout size {size} must be in [1, {})",
                    h.min(w)
                ));
            }
        }
        if let Some(s) = self.blur_sigma {
            check_sigma(s)?;
        }
        Ok(())
    }
}

/// Augments every image of a `[N,C,H,W]` batch independently.
///
/// Each image gets its own ChaCha8 stream seeded from `rng`, so the result
/// depends only on the incoming rng state. Steps run in order: flip, shift
/// (zero fill), cutout (filled with `fill`), blur.
pub fn augment_batch(
    batch: &Tensor,
    cfg: &AugmentConfig,
    fill: &[f64],
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(shape_err!(
            "augment_batch expects [N,C,H,W], got {:?}",
            batch.shape()
        ));
    }
    let n = batch.shape()[0];
    let image_shape = &batch.shape()[1..];
    cfg.validate(image_shape)?;
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    if cfg.is_identity() {
        return Ok(batch.clone());
    }
    let per = batch.len() / n;
    let mut out = Vec::with_capacity(batch.len());
    for (i, seed) in seeds.into_iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Tensor::from_vec(image_shape, batch.data()[i * per..(i + 1) * per].to_vec())?;
        if cfg.flip_prob > 0.0 && r.random::<f64>() < cfg.flip_prob {
            img = flip_horizontal(&img)?;
        }
        if cfg.max_shift > 0 {
            let s = cfg.max_shift as i64;
            let dy = r.random_range(-s..=s);
            let dx = r.random_range(-s..=s);
            img = shift_image(&img, dy, dx)?;
        }
        if let Some(size) = cfg.cutout {
            img = cutout(&img, size, fill, &mut r)?;
        }
        if let Some(sigma) = cfg.blur_sigma {
            img = gaussian_filter(&img, sigma)?;
        }
        out.extend_from_slice(img.data());
    }
    Tensor::from_vec(batch.shape(), out)
}

/// Procedurally generated datasets for tests and offline experiments.
pub mod synthetic {
    use super::*;

    fn quantize(v: f64) -> f64 {
        to_byte(v) as f64 / 255.0
    }

    /// Two classes of `[1,side,side]` images: a bright blob in the left or
    /// right half over a noisy background. Linearly separable by construction.
    pub fn separable(n: usize, side: usize, seed: u64, split: Split) -> Result<Dataset> {
        if side < 4 {
            return Err(contract_err!("separable images need side >= 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).map_err(|e| contract_err!("{e}"))?;
        let mut data = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        let half = side / 2;
        for _ in 0..n {
            let label = rng.random_range(0..2usize);
            let cy = rng.random_range(1..side - 1);
            let cx = if label == 0 {
                rng.random_range(0..half - 1)
            } else {
                rng.random_range(half + 1..side)
            };
            for y in 0..side {
                for x in 0..side {
                    let d2 = (sq(y as f64 - cy as f64) + sq(x as f64 - cx as f64)) / 2.0;
                    let v = 0.2 + 0.7 * libm::exp(-d2) + noise.sample(&mut rng);
                    data.push(quantize(v));
                }
            }
            labels.push(label);
        }
        Dataset::new(
            Tensor::from_vec(&[n, 1, side, side], data)?,
            labels,
            2,
            split,
        )
    }

    /// Ten classes of `[3,32,32]` colour images.
    ///
    /// The class is the pair (shape, fill): five shapes (disk, square,
    /// triangle, ring, cross), each either solid or striped with a 4-pixel
    /// period. Position, size, colours, background gradient, a distractor blob
    /// and pixel noise are random. Pixels are quantised to bytes so the set
    /// survives a CIFAR binary round trip unchanged.
    pub fn cifar_like(n: usize, seed: u64, split: Split) -> Result<Dataset> {
        let side = CIFAR_SIDE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.04).map_err(|e| contract_err!("{e}"))?;
        let mut data = vec![0.0; n * CIFAR_PIXELS];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = rng.random_range(0..10usize);
            let (shape, striped) = (label % 5, label >= 5);
            let r = rng.random_range(6.0..11.0f64);
            let cy = rng.random_range(r * 0.8..side as f64 - r * 0.8);
            let cx = rng.random_range(r * 0.8..side as f64 - r * 0.8);
            let phase = rng.random_range(0..4usize);
            let bg: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.05..0.45));
            let tilt: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.15..0.15));
            let fg: [f64; 3] =
                core::array::from_fn(|c| (bg[c] + rng.random_range(0.3..0.55)).min(1.0));
            let (dy, dx, dr) = (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
                rng.random_range(1.5..3.5f64),
            );
            let dcol: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.3..0.9));
            let img = &mut data[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
            for y in 0..side {
                for x in 0..side {
                    let (ry, rx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let dist = libm::sqrt(ry * ry + rx * rx);
                    let inside = match shape {
                        0 => dist <= r,
                        1 => ry.abs().max(rx.abs()) <= r * 0.8,
                        2 => ry >= -r && ry <= r * 0.8 && rx.abs() <= (ry + r) * 0.55,
                        3 => dist <= r && dist >= r * 0.55,
                        _ => {
                            (rx.abs() <= r * 0.3 && ry.abs() <= r)
                                || (ry.abs() <= r * 0.3 && rx.abs() <= r)
                        }
                    };
                    let on = inside && (!striped || ((x + y + phase) / 2) % 2 == 0);
                    let dd = libm::sqrt(sq(y as f64 - dy) + sq(x as f64 - dx));
                    for c in 0..3 {
                        let base = bg[c] + tilt[c] * (x as f64 / side as f64 - 0.5);
                        let mut v = if on { fg[c] } else { base };
                        if !inside && dd <= dr {
                            v = dcol[c];
                        }
                        img[(c * side + y) * side + x] = quantize(v + noise.sample(&mut rng));
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(
            Tensor::from_vec(&[n, 3, side, side], data)?,
            labels,
            10,
            split,
        )
    }
}

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape `[C, H, W]`.
    pub fn image_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.images.gather_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.split,
        )
    }

    /// Keeps the samples whose label is in `keep`, relabeled to their
    /// position in `keep`.
    pub fn select_classes(&self, keep: &[usize]) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::Input(format!("no samples of classes {keep:?}")));
        }
        let mut out = self.subset(&idx)?;
        out.labels = out
            .labels
            .iter()
            .map(|l| keep.iter().position(|k| k == l).unwrap())
            .collect();
        out.classes = keep.len();
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        h.write(&self.images.checksum().to_le_bytes());
        for &l in &self.labels {
            h.write(&(l as u64).to_le_bytes());
        }
        h.finish()
    }
}

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    })
}

/// Raw contents of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX buffer whose magic must equal `magic`.
pub fn parse_idx(buf: &[u8], magic: u32) -> Result<IdxArray> {
    if buf.len() < 4 {
        return format_err(0, format!("IDX header truncated: {} bytes", buf.len()));
    }
    let got = u32::from_be_bytes(buf[0..4].try_into().unwrap());
    if got != magic {
        return format_err(0, format!("bad IDX magic {got:#010x}, expected {magic:#010x}"));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if buf.len() < header {
        return format_err(buf.len(), "IDX dimensions truncated");
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return format_err(4 + 4 * i, "IDX dimension is zero");
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: "IDX dimensions overflow".into(),
        })?;
    let have = buf.len() - header;
    if have < count {
        return format_err(buf.len(), format!("IDX payload truncated: {have} of {count} bytes"));
    }
    if have > count {
        return format_err(header + count, "trailing bytes after IDX payload");
    }
    Ok(IdxArray {
        dims,
        data: buf[header..].to_vec(),
    })
}

/// IDX image/label file pair (e.g. MNIST) as `[N, 1, H, W]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&std::fs::read(images)?, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(&std::fs::read(labels)?, IDX_LABELS_MAGIC)?;
    idx_dataset(&img, &lab, Split::Train)
}

pub fn idx_dataset(img: &IdxArray, lab: &IdxArray, split: Split) -> Result<Dataset> {
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Dimension(format!("{n} images but {} labels", lab.dims[0])));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::new(
        vec![n, 1, h, w],
        img.data.iter().map(|&b| b as f32 / 255.0).collect(),
    )?;
    Dataset::new(images, labels, classes, split)
}

pub const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary batch: records of one label byte and 3072 pixel bytes
/// (red, green, blue planes of 32x32).
pub fn parse_cifar_binary(buf: &[u8], split: Split) -> Result<Dataset> {
    if buf.is_empty() {
        return format_err(0, "empty CIFAR file");
    }
    if buf.len() % CIFAR_RECORD != 0 {
        let whole = buf.len() / CIFAR_RECORD * CIFAR_RECORD;
        return format_err(
            whole,
            format!("length {} is not a multiple of {CIFAR_RECORD}", buf.len()),
        );
    }
    let n = buf.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return format_err(i * CIFAR_RECORD, format!("label {} out of range", rec[0]));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    parse_cifar_binary(&std::fs::read(path)?, Split::Train)
}

/// Oriented asymmetric-sawtooth textures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Class orientations are spread over `[-max_angle, max_angle]` degrees.
    #[serde(default = "default_max_angle")]
    pub max_angle: f32,
    /// Per-sample orientation jitter (degrees, std).
    #[serde(default = "default_angle_jitter")]
    pub angle_jitter: f32,
    /// Per-sample relative frequency jitter (std).
    #[serde(default = "default_freq_jitter")]
    pub freq_jitter: f32,
    /// Phase jitter as a fraction of one period (uniform half-width).
    #[serde(default = "default_phase_jitter")]
    pub phase_jitter: f32,
    /// Additive pixel noise (std).
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_max_angle() -> f32 {
    36.0
}
fn default_angle_jitter() -> f32 {
    6.0
}
fn default_freq_jitter() -> f32 {
    0.08
}
fn default_phase_jitter() -> f32 {
    0.12
}
fn default_noise() -> f32 {
    0.25
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, size: usize) -> Self {
        Self {
            classes,
            per_class,
            size,
            max_angle: default_max_angle(),
            angle_jitter: default_angle_jitter(),
            freq_jitter: default_freq_jitter(),
            phase_jitter: default_phase_jitter(),
            noise: default_noise(),
        }
    }

    /// Orientation (radians) and spatial frequency (cycles per pixel) of a class.
    pub fn class_params(&self, k: usize) -> (f32, f32) {
        let c = self.classes.max(1);
        // Interleave orientations and frequencies so neighbours differ in both.
        let a = if c == 1 {
            0.0
        } else {
            -self.max_angle + 2.0 * self.max_angle * ((k * 3) % c) as f32 / (c - 1) as f32
        };
        let f = 0.12 + 0.10 * (k % 4) as f32 / 3.0;
        (a.to_radians(), f)
    }
}

/// Asymmetric ramp on `[0, 1)`: slow rise, sharp fall.
fn sawtooth(t: f32) -> f32 {
    let u = t - t.floor();
    if u < 0.8 {
        u / 0.8
    } else {
        (1.0 - u) / 0.2
    }
}

/// Balanced, deterministic dataset of oriented textures.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.size < 4 {
        return Err(Error::Config(
            "synthetic data needs classes >= 1, per_class >= 1, size >= 4".into(),
        ));
    }
    let mut r = rng::stream(seed, "gen_synthetic");
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let s = spec.size;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    let centre = (s as f32 - 1.0) / 2.0;
    for i in 0..n {
        let k = i % spec.classes;
        let (a0, f0) = spec.class_params(k);
        let a = a0 + spec.angle_jitter.to_radians() * r.sample::<f32, _>(rand_distr::StandardNormal);
        let f = f0 * (1.0 + spec.freq_jitter * r.sample::<f32, _>(rand_distr::StandardNormal));
        let phase = 0.1 * k as f32 + spec.phase_jitter * (2.0 * r.random::<f32>() - 1.0);
        let contrast = 0.7 + 0.3 * r.random::<f32>();
        let (ca, sa) = (a.cos(), a.sin());
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f32 - centre, y as f32 - centre);
                let t = f * (dx * ca + dy * sa) + phase;
                let v = 0.5 + contrast * (sawtooth(t) - 0.5) + noise.sample(&mut r);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, 1, s, s], data)?, labels, spec.classes, Split::Train)
}

/// Rotates every `[C, H, W]` image of a square batch by `quarter * 90`
/// degrees counter-clockwise.
pub fn rotate90(images: &Tensor, quarter: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if h != w {
        return Err(Error::Dimension(format!("rotation needs square images, got {h}x{w}")));
    }
    let q = quarter % 4;
    let src = images.data();
    let mut out = vec![0.0f32; src.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match q {
                    0 => (y, x),
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                out[base + y * w + x] = src[base + sy * w + sx];
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Four rotated copies of every image labeled by rotation index.
pub fn rotation_dataset(data: &Dataset) -> Result<Dataset> {
    let parts: Vec<Tensor> = (0..4).map(|q| rotate90(&data.images, q)).collect::<Result<_>>()?;
    let labels = (0..4).flat_map(|q| std::iter::repeat_n(q, data.len())).collect();
    Dataset::new(Tensor::concat_rows(&parts)?, labels, 4, data.split)
}

/// Deterministic stratified split into `(train, test)`, `test_per_class`
/// samples of each class going to the test side.
pub fn stratified_split(data: &Dataset, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut r = rng::stream(seed, "stratified_split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == k).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
        if idx.len() <= test_per_class {
            return Err(Error::Input(format!(
                "class {k} has {} samples, cannot hold out {test_per_class}",
                idx.len()
            )));
        }
        test.extend_from_slice(&idx[..test_per_class]);
        train.extend_from_slice(&idx[test_per_class..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let mut tr = data.subset(&train)?;
    let mut te = data.subset(&test)?;
    tr.split = Split::Train;
    te.split = Split::Test;
    Ok((tr, te))
}

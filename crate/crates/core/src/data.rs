//! Datasets living in `[0,1]^d`: synthetic generators, an IDX loader, and the
//! `ARD1` binary cache.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::model::read_u32_le;
use crate::numerics::{norm2, SeededRng};

pub const DATASET_MAGIC: &[u8; 4] = b"ARD1";
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    dim: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("dataset dimension must be positive");
        }
        if inputs.len() != labels.len() * dim {
            return invalid(format!(
                "{} labels of dim {dim} need {} input values, got {}",
                labels.len(),
                labels.len() * dim,
                inputs.len()
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!("label {y} out of range for {num_classes} classes"));
        }
        if let Some(pos) = inputs.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return invalid(format!(
                "input value {} of sample {} lies outside [0,1]",
                inputs[pos],
                pos / dim
            ));
        }
        Ok(Self {
            name: name.into(),
            dim,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// All inputs as one row-major buffer.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.inputs
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            num_classes: self.num_classes,
            inputs,
            labels,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `ARD1` cache: magic, u32 count, u32 dim, u32 classes, inputs as f64,
    /// labels as u32, all little-endian.
    pub fn write_cache<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DATASET_MAGIC)?;
        for v in [self.len(), self.dim, self.num_classes] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.inputs {
            out.write_all(&v.to_le_bytes())?;
        }
        for &y in &self.labels {
            out.write_all(&(y as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut input: R, name: impl Into<String>) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(eof_as_format)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format {
                expected: "magic ARD1".into(),
                actual: format!("{:?}", String::from_utf8_lossy(&magic)),
            });
        }
        let count = read_u32_le(&mut input)? as usize;
        let dim = read_u32_le(&mut input)? as usize;
        let classes = read_u32_le(&mut input)? as usize;
        let mut inputs = Vec::with_capacity(count * dim);
        let mut buf = [0u8; 8];
        for _ in 0..count * dim {
            input.read_exact(&mut buf).map_err(eof_as_format)?;
            inputs.push(f64::from_le_bytes(buf));
        }
        let labels = (0..count)
            .map(|_| read_u32_le(&mut input).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(name, dim, classes, inputs, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_cache(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_cache(std::fs::read(path)?.as_slice(), name)
    }
}

fn eof_as_format(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format {
            expected: "more bytes".into(),
            actual: "end of file".into(),
        }
    } else {
        Error::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Typical distance between class means (raw units).
    pub separation: f64,
    /// Per-coordinate noise standard deviation (raw units).
    pub std: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            per_class: 600,
            separation: 4.0,
            std: 1.0,
        }
    }
}

const MAX_MEAN_TRIES: usize = 10_000;

/// Isotropic Gaussian blobs.
///
/// Class means sit on the sphere of radius `separation / sqrt(2)` around the
/// origin (so two orthogonal means are `separation` apart) and are accepted
/// only when at least `0.8 * separation` away from every earlier mean. The
/// cloud is then mapped into the unit cube by one isotropic affine map sending
/// the origin to the cube center and `max|mean coord| + 4 std` to the faces,
/// followed by a clamp.
pub fn gen_blobs(cfg: &BlobsConfig, rng: &mut SeededRng) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "blobs need >= 2 classes and >= 2 dims (got {} / {})",
            cfg.classes, cfg.dim
        )));
    }
    if !(cfg.separation > 0.0) || !(cfg.std >= 0.0) {
        return Err(Error::InvalidConfig(
            "separation must be positive and std non-negative".into(),
        ));
    }
    let radius = cfg.separation / std::f64::consts::SQRT_2;
    let min_dist = 0.8 * cfg.separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut tries = 0;
    while means.len() < cfg.classes {
        tries += 1;
        if tries > MAX_MEAN_TRIES {
            return Err(Error::Infeasible(format!(
                "could not place {} means {min_dist} apart in {} dims after {MAX_MEAN_TRIES} tries",
                cfg.classes, cfg.dim
            )));
        }
        let dir = rng.normal(cfg.dim)?;
        let n = norm2(&dir);
        if n == 0.0 {
            continue;
        }
        let candidate: Vec<f64> = dir.iter().map(|v| v * radius / n).collect();
        let far_enough = means.iter().all(|m| {
            let d: f64 = m
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            d >= min_dist
        });
        if far_enough {
            means.push(candidate);
        }
    }

    let reach = means.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())) + 4.0 * cfg.std;
    let scale = 0.5 / reach;
    let n = cfg.classes * cfg.per_class;
    let mut inputs = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..cfg.per_class {
        for (class, mean) in means.iter().enumerate() {
            for &m in mean {
                let raw = m + cfg.std * rng.next_normal();
                inputs.push((0.5 + scale * raw).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new("blobs", cfg.dim, cfg.classes, inputs, labels)
}

/// Interleaved half circles mapped into `[0,1]^2` by
/// `p -> (0.5, 0.5) + (p - (0.5, 0.25)) / 4`, then clamped.
pub fn gen_two_moons(per_class: usize, noise_std: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidConfig(
            "noise std must be non-negative".into(),
        ));
    }
    let mut inputs = Vec::with_capacity(4 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    let denom = per_class.saturating_sub(1).max(1) as f64;
    for i in 0..per_class {
        let theta = std::f64::consts::PI * i as f64 / denom;
        let arcs = [
            (theta.cos(), theta.sin()),
            (1.0 - theta.cos(), 0.5 - theta.sin()),
        ];
        for (label, (x, y)) in arcs.into_iter().enumerate() {
            let (nx, ny) = if noise_std > 0.0 {
                (noise_std * rng.next_normal(), noise_std * rng.next_normal())
            } else {
                (0.0, 0.0)
            };
            let (px, py) = moons_to_unit(x + nx, y + ny);
            inputs.push(px.clamp(0.0, 1.0));
            inputs.push(py.clamp(0.0, 1.0));
            labels.push(label);
        }
    }
    Dataset::new("moons", 2, 2, inputs, labels)
}

pub(crate) fn moons_to_unit(x: f64, y: f64) -> (f64, f64) {
    (0.5 + (x - 0.5) / 4.0, 0.5 + (y - 0.25) / 4.0)
}

/// Reads an IDX image file (magic `0x00000803`) and label file
/// (`0x00000801`); pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path.as_ref())?;
    let labels = std::fs::read(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = images;
    let magic = idx_u32(&mut img)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }
    let count = idx_u32(&mut img)? as usize;
    let rows = idx_u32(&mut img)? as usize;
    let cols = idx_u32(&mut img)? as usize;
    let dim = rows * cols;
    if img.len() < count * dim {
        return Err(Error::Format {
            expected: format!("{} pixel bytes", count * dim),
            actual: format!("{} bytes", img.len()),
        });
    }

    let mut lab = labels;
    let magic = idx_u32(&mut lab)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }
    let label_count = idx_u32(&mut lab)? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if lab.len() < count {
        return Err(Error::Format {
            expected: format!("{count} label bytes"),
            actual: format!("{} bytes", lab.len()),
        });
    }
    let inputs = img[..count * dim]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lab[..count].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new("idx", dim, classes, inputs, labels)
}

fn idx_u32(buf: &mut &[u8]) -> Result<u32> {
    if buf.len() < 4 {
        return Err(Error::Format {
            expected: "4-byte header field".into(),
            actual: format!("{} bytes", buf.len()),
        });
    }
    let v = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    *buf = &buf[4..];
    Ok(v)
}

/// Seeded shuffle, then the first `round(fraction * n)` samples form the
/// training split.
pub fn split_dataset(
    d: &Dataset,
    train_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        ));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    rng.shuffle(&mut idx);
    let cut = ((train_fraction * d.len() as f64).round() as usize).min(d.len());
    let train = d
        .subset(&idx[..cut])
        .with_name(format!("{}-train", d.name()));
    let test = d
        .subset(&idx[cut..])
        .with_name(format!("{}-test", d.name()));
    Ok((train, test))
}

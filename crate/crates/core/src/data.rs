//! Labeled datasets, IDX file I/O, mean-image preprocessing and the
//! synthetic complexity-tiered generator.
//!
//! Labels are 1-based in memory ([`Label`]); IDX label files store them
//! 0-based and are shifted on load and on write.
//!
//! # IDX
//!
//! Big-endian header: two zero bytes, a type byte, a rank byte, then one
//! `u32` extent per dimension, then the payload. Image files use type
//! `0x08` (unsigned byte, scaled to `[0, 1]` on load, magic `0x00000803` for
//! `N×H×W`); label files must be `0x00000801`. Type `0x0E` (big-endian
//! `f64`) is accepted for real-valued samples and is what the synthetic
//! export writes, so exported points round-trip exactly.
//!
//! # Synthetic tiers
//!
//! Every class is assigned a tier. Classes of one tier share a *region* of
//! the plane; regions sit on the x-axis, `spacing` apart, in the order
//! linear, radial, xor (only tiers that occur get a region). Inside a
//! region with `n` classes, class `j` (0-based within its tier) draws a
//! point `c + q` where `c` is the region centre and
//!
//! * linear: `q = R·(cos 2πj/n, sin 2πj/n) + u`, `u` uniform in the disk of
//!   radius `0.6`, `R = max(2, 0.9 / sin(π/n))`. Disks are disjoint and their
//!   centres are in convex position, so the nearest-centre rule, which is
//!   linear, separates them.
//! * radial: `q = ρ·(cos φ, sin φ)`, `φ ~ U[0, 2π)`, `ρ ~ U[j + 0.15, j + 0.85]`.
//!   Classes are concentric annuli, separable by distance from `c` only.
//! * xor: the circle is cut into `2n` equal sectors; class `j` owns sectors
//!   `j` and `j + n` (opposite each other). `φ` is uniform over a randomly
//!   chosen one of the two sectors, shrunk by 10% of the sector width on each
//!   side, `ρ ~ U[0.2, 2]`. For `n = 2` this is the XOR quadrant layout.
//!
//! Gaussian noise `N(0, σ²)` is then added to both coordinates, and the
//! point is mapped to features `(p − m) / s` with `m` the mean region centre
//! and `s = spacing / 2`. Samples are emitted class by class, in class order.

use std::fs;
use std::io::Write;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// A class label in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(usize);

impl Label {
    /// `None` for 0.
    pub fn new(one_based: usize) -> Option<Label> {
        (one_based >= 1).then_some(Label(one_based))
    }

    pub fn from_index(index: usize) -> Label {
        Label(index + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// 0-based position.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Linear,
    Radial,
    XorLike,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Linear => "linear",
            Tier::Radial => "radial",
            Tier::XorLike => "xor-like",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Tensor,
    labels: Vec<Label>,
    split: Split,
    classes: usize,
    tiers: Option<Vec<Tier>>,
}

impl LabeledDataset {
    /// `samples` is `[N, ...sample_shape]`; every label must be in `1..=classes`.
    pub fn new(samples: Tensor, labels: Vec<Label>, split: Split, classes: usize) -> Result<Self> {
        if samples.rank() < 2 {
            return Err(Error::Dimension(format!(
                "samples need a leading count dimension, got {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| l.get() > classes) {
            return Err(Error::Consistency(format!(
                "label {bad} outside 1..={classes}"
            )));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            split,
            classes,
            tiers: None,
        })
    }

    pub fn with_tiers(mut self, tiers: Vec<Tier>) -> Result<Self> {
        if tiers.len() != self.labels.len() {
            return Err(Error::Consistency("one tier per sample required".into()));
        }
        self.tiers = Some(tiers);
        Ok(self)
    }

    /// Widens the class count, e.g. for a validation split missing a class.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if self.labels.iter().any(|l| l.get() > classes) {
            return Err(Error::Consistency(format!(
                "labels exceed {classes} classes"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Same samples viewed with a new per-sample shape of equal size.
    pub fn reshaped(mut self, sample_shape: &[usize]) -> Result<Self> {
        if sample_shape == self.sample_shape() {
            return Ok(self);
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        let from = self.sample_shape().to_vec();
        self.samples = self.samples.reshape(shape).map_err(|_| {
            Error::Dimension(format!("samples of shape {from:?} cannot be viewed as {sample_shape:?}"))
        })?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn tiers(&self) -> Option<&[Tier]> {
        self.tiers.as_deref()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.samples.data()[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into one `[len, ...sample_shape]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<Label>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

const IDX_UBYTE: u8 = 0x08;
const IDX_F64: u8 = 0x0E;

struct IdxArray {
    dims: Vec<usize>,
    values: Vec<f64>,
    dtype: u8,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn parse_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let (dtype, rank) = (bytes[2], bytes[3] as usize);
    if bytes[0] != 0 || bytes[1] != 0 || rank == 0 || !matches!(dtype, IDX_UBYTE | IDX_F64) {
        return Err(format_err(path, format!("unsupported IDX magic 0x{magic:08X}")));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = if dtype == IDX_UBYTE { 1 } else { 8 };
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(format_err(
            path,
            format!(
                "payload holds {} bytes, header {dims:?} requires {}",
                body.len(),
                count * width
            ),
        ));
    }
    let values = if dtype == IDX_UBYTE {
        body.iter().map(|&b| b as f64).collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Ok(IdxArray { dims, values, dtype })
}

/// Reads an image/label IDX pair. Byte images are scaled to `[0, 1]`; the
/// class count is one more than the largest stored label.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset> {
    let img = parse_idx(images)?;
    if img.dims.len() < 2 {
        return Err(format_err(images, format!("expected N×... samples, got {:?}", img.dims)));
    }
    let lab = parse_idx(labels)?;
    if lab.dtype != IDX_UBYTE || lab.dims.len() != 1 {
        return Err(format_err(
            labels,
            format!(
                "unsupported IDX magic 0x{:08X}, labels must be 0x00000801",
                ((lab.dtype as u32) << 8) | lab.dims.len() as u32
            ),
        ));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            img.dims[0],
            labels.display(),
            lab.dims[0]
        )));
    }
    let values = if img.dtype == IDX_UBYTE {
        img.values.into_iter().map(|v| v / 255.0).collect()
    } else {
        img.values
    };
    let labels_vec: Vec<Label> = lab.values.iter().map(|&v| Label::from_index(v as usize)).collect();
    let classes = labels_vec.iter().map(|l| l.get()).max().unwrap_or(0).max(2);
    LabeledDataset::new(Tensor::new(img.dims, values)?, labels_vec, split, classes)
}

fn idx_header(dtype: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, dtype, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes via a temporary file in the destination directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Byte IDX (`0x08`); values must lie in `[0, 1]` and are stored as `round(255·v)`.
pub fn write_idx_u8(path: &Path, samples: &Tensor) -> Result<()> {
    if samples.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Consistency(
            "byte IDX export needs values in [0, 1]".into(),
        ));
    }
    let mut bytes = idx_header(IDX_UBYTE, samples.shape());
    bytes.extend(samples.data().iter().map(|v| (v * 255.0).round() as u8));
    write_atomic(path, &bytes)
}

/// Real-valued IDX (`0x0E`, big-endian `f64`).
pub fn write_idx_f64(path: &Path, samples: &Tensor) -> Result<()> {
    let mut bytes = idx_header(IDX_F64, samples.shape());
    for v in samples.data() {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_atomic(path, &bytes)
}

/// Label IDX (`0x00000801`), stored 0-based.
pub fn write_idx_labels(path: &Path, labels: &[Label]) -> Result<()> {
    if labels.iter().any(|l| l.index() > u8::MAX as usize) {
        return Err(Error::Consistency("label IDX holds at most 256 classes".into()));
    }
    let mut bytes = idx_header(IDX_UBYTE, &[labels.len()]);
    bytes.extend(labels.iter().map(|l| l.index() as u8));
    write_atomic(path, &bytes)
}

/// Per-position mean over a training split.
pub fn mean_image(train: &LabeledDataset) -> Result<Tensor> {
    if train.split != Split::Train || train.is_empty() {
        return Err(Error::Consistency(
            "mean image must come from a nonempty train split".into(),
        ));
    }
    let n = train.sample_len();
    let mut mean = vec![0.0; n];
    for i in 0..train.len() {
        for (m, v) in mean.iter_mut().zip(train.sample(i)) {
            *m += v;
        }
    }
    let count = train.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Tensor::new(train.sample_shape().to_vec(), mean)
}

pub fn subtract_mean(ds: &mut LabeledDataset, mean: &Tensor) -> Result<()> {
    if mean.shape() != ds.sample_shape() {
        return Err(Error::Dimension(format!(
            "mean {:?} vs samples {:?}",
            mean.shape(),
            ds.sample_shape()
        )));
    }
    let n = mean.len();
    for row in ds.samples.data_mut().chunks_exact_mut(n) {
        for (v, m) in row.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    Ok(())
}

/// Centres `train` on its own mean and applies the same shift to `others`.
pub fn preprocess_mean_subtract(train: &mut LabeledDataset, others: &mut [&mut LabeledDataset]) -> Result<Tensor> {
    let mean = mean_image(train)?;
    subtract_mean(train, &mean)?;
    for ds in others.iter_mut() {
        subtract_mean(ds, &mean)?;
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Tier of each class; its length is the class count `K`.
    pub tiers: Vec<Tier>,
    pub samples_per_class: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
    /// Distance between region centres.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    8.0
}

impl SynthSpec {
    pub fn new(tiers: Vec<Tier>, samples_per_class: usize, noise: f64, seed: u64) -> Self {
        SynthSpec {
            tiers,
            samples_per_class,
            noise,
            seed,
            spacing: default_spacing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.len() < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        Ok(())
    }
}

fn linear_ring_radius(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (0.9 / (std::f64::consts::PI / n as f64).sin()).max(2.0)
    }
}

/// Deterministic in `spec`; samples are `[N, 2]`, tiers recorded per sample.
pub fn generate_synthetic(spec: &SynthSpec, split: Split) -> Result<LabeledDataset> {
    use std::f64::consts::TAU;
    spec.validate()?;
    let order = [Tier::Linear, Tier::Radial, Tier::XorLike];
    let present: Vec<Tier> = order.into_iter().filter(|t| spec.tiers.contains(t)).collect();
    let region_of = |t: Tier| present.iter().position(|&p| p == t).expect("present");
    let mean_x = spec.spacing * (present.len() - 1) as f64 / 2.0;
    let scale = spec.spacing / 2.0;
    let count_in = |t: Tier| spec.tiers.iter().filter(|&&x| x == t).count();

    let mut rng = RngState::new(spec.seed);
    let total = spec.tiers.len() * spec.samples_per_class;
    let mut data = Vec::with_capacity(total * 2);
    let mut labels = Vec::with_capacity(total);
    let mut tiers = Vec::with_capacity(total);
    let mut seen = std::collections::HashMap::new();
    for (class, &tier) in spec.tiers.iter().enumerate() {
        let j = {
            let e = seen.entry(tier).or_insert(0usize);
            *e += 1;
            *e - 1
        };
        let n = count_in(tier);
        let cx = region_of(tier) as f64 * spec.spacing;
        for _ in 0..spec.samples_per_class {
            let (qx, qy) = match tier {
                Tier::Linear => {
                    let a = TAU * j as f64 / n as f64;
                    let r = linear_ring_radius(n);
                    let ur = 0.6 * rng.uniform(0.0, 1.0).sqrt();
                    let ua = rng.uniform(0.0, TAU);
                    (r * a.cos() + ur * ua.cos(), r * a.sin() + ur * ua.sin())
                }
                Tier::Radial => {
                    let phi = rng.uniform(0.0, TAU);
                    let rho = rng.uniform(j as f64 + 0.15, j as f64 + 0.85);
                    (rho * phi.cos(), rho * phi.sin())
                }
                Tier::XorLike => {
                    let width = TAU / (2 * n) as f64;
                    let sector = if rng.below(2) == 0 { j } else { j + n };
                    let phi = sector as f64 * width + rng.uniform(0.1 * width, 0.9 * width);
                    let rho = rng.uniform(0.2, 2.0);
                    (rho * phi.cos(), rho * phi.sin())
                }
            };
            let (nx, ny) = if spec.noise > 0.0 {
                (rng.normal(0.0, spec.noise), rng.normal(0.0, spec.noise))
            } else {
                (0.0, 0.0)
            };
            data.push((cx + qx + nx - mean_x) / scale);
            data.push((qy + ny) / scale);
            labels.push(Label::from_index(class));
            tiers.push(tier);
        }
    }
    LabeledDataset::new(Tensor::new(vec![total, 2], data)?, labels, split, spec.tiers.len())?
        .with_tiers(tiers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn label_conversions() {
        assert!(Label::new(0).is_none());
        let l = Label::new(3).unwrap();
        assert_eq!((l.get(), l.index()), (3, 2));
        assert_eq!(Label::from_index(0).get(), 1);
    }

    #[test]
    fn hand_built_fixture_round_trips_exactly() {
        let dir = tmpdir();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let px: Vec<f64> = (0..8).map(|i| (i * 30) as f64 / 255.0).collect();
        let imgs = Tensor::new(vec![2, 2, 2], px.clone()).unwrap();
        write_idx_u8(&ip, &imgs).unwrap();
        write_idx_labels(&lp, &[Label::from_index(0), Label::from_index(9)]).unwrap();

        let raw = std::fs::read(&ip).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(raw.len(), 16 + 8);
        assert_eq!(&std::fs::read(&lp).unwrap()[..4], &[0, 0, 8, 1]);

        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.sample_shape(), &[2, 2]);
        assert_eq!(ds.samples().data(), &px[..]);
        assert_eq!(ds.labels(), &[Label::new(1).unwrap(), Label::new(10).unwrap()]);
        assert_eq!(ds.classes(), 10);
    }

    #[test]
    fn wrong_magic_reports_observed_value() {
        let dir = tmpdir();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, [0u8, 0, 9, 3, 0, 0, 0, 0]).unwrap();
        write_idx_labels(&lp, &[]).unwrap();
        let msg = load_idx(&ip, &lp, Split::Train).unwrap_err().to_string();
        assert!(msg.contains("0x00000903"), "{msg}");
    }

    #[test]
    fn truncated_file_fails_closed() {
        let dir = tmpdir();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let imgs = Tensor::filled(&[3, 2, 2], 0.5);
        write_idx_u8(&ip, &imgs).unwrap();
        write_idx_labels(&lp, &[Label::from_index(0); 3]).unwrap();
        let full = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &full[..full.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::Format { .. })));
        std::fs::write(&ip, &full[..6]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tmpdir();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_u8(&ip, &Tensor::filled(&[3, 2, 2], 0.5)).unwrap();
        write_idx_labels(&lp, &[Label::from_index(0); 2]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::Consistency(_))));
    }

    #[test]
    fn f64_idx_round_trips_synthetic_points() {
        let dir = tmpdir();
        let ds = generate_synthetic(&SynthSpec::new(vec![Tier::Linear, Tier::XorLike, Tier::XorLike], 20, 0.1, 3), Split::Train).unwrap();
        let (ip, lp) = (dir.path().join("x"), dir.path().join("y"));
        write_idx_f64(&ip, ds.samples()).unwrap();
        write_idx_labels(&lp, ds.labels()).unwrap();
        let back = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn mean_subtraction() {
        let t = Tensor::filled(&[4, 3], 0.25);
        let mut train = LabeledDataset::new(t, vec![Label::from_index(0); 4], Split::Train, 2).unwrap();
        preprocess_mean_subtract(&mut train, &mut []).unwrap();
        assert!(train.samples().data().iter().all(|&v| v == 0.0));

        let mut rng = RngState::new(1);
        let rand = |n: usize, rng: &mut RngState| (0..n).map(|_| rng.uniform(0.0, 1.0)).collect::<Vec<_>>();
        let train_raw = Tensor::new(vec![5, 2, 2], rand(20, &mut rng)).unwrap();
        let val_raw = Tensor::new(vec![3, 2, 2], rand(12, &mut rng)).unwrap();
        let mut train = LabeledDataset::new(train_raw.clone(), vec![Label::from_index(1); 5], Split::Train, 2).unwrap();
        let mut val = LabeledDataset::new(val_raw.clone(), vec![Label::from_index(0); 3], Split::Val, 2).unwrap();
        let mean = preprocess_mean_subtract(&mut train, &mut [&mut val]).unwrap();

        // loop oracle for the train mean
        for p in 0..4 {
            let m: f64 = (0..5).map(|i| train_raw.data()[i * 4 + p]).sum::<f64>() / 5.0;
            assert!((mean.data()[p] - m).abs() < 1e-15);
            for i in 0..3 {
                assert!((val.samples().data()[i * 4 + p] - (val_raw.data()[i * 4 + p] - m)).abs() < 1e-15);
            }
        }
        let centred = mean_image(&train).unwrap();
        assert!(centred.data().iter().all(|v| v.abs() < 1e-10));
        // idempotent on an already-centred split
        let again = preprocess_mean_subtract(&mut train, &mut []).unwrap();
        assert!(again.data().iter().all(|v| v.abs() < 1e-10));
        assert!(mean_image(&val).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SynthSpec::new(vec![Tier::Linear, Tier::Radial, Tier::Radial, Tier::XorLike, Tier::XorLike], 30, 0.05, 17);
        let a = generate_synthetic(&spec, Split::Train).unwrap();
        let b = generate_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        assert_eq!(a.classes(), 5);
        assert_eq!(a.tiers().unwrap()[40], Tier::Radial);
        let c = generate_synthetic(&SynthSpec { seed: 18, ..spec }, Split::Train).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn radial_classes_separate_by_distance() {
        let spec = SynthSpec::new(vec![Tier::Radial, Tier::Radial, Tier::Radial], 50, 0.0, 2);
        let ds = generate_synthetic(&spec, Split::Train).unwrap();
        let scale = spec.spacing / 2.0;
        for i in 0..ds.len() {
            let p = ds.sample(i);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt() * scale;
            assert_eq!(r.floor() as usize, ds.labels()[i].index());
        }
    }

    /// Multiclass averaged perceptron on raw 2-D features plus bias; returns
    /// training accuracy of the averaged weights.
    fn perceptron_accuracy(ds: &LabeledDataset, epochs: usize) -> f64 {
        let k = ds.classes();
        let mut w = vec![[0.0f64; 3]; k];
        let mut sum = vec![[0.0f64; 3]; k];
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = RngState::new(99);
        let feat = |i: usize| {
            let p = ds.sample(i);
            [p[0], p[1], 1.0]
        };
        let score = |w: &[[f64; 3]], x: &[f64; 3], c: usize| w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let predict = |w: &[[f64; 3]], x: &[f64; 3]| {
            (0..k).fold(0, |best, c| if score(w, x, c) > score(w, x, best) { c } else { best })
        };
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            for &i in &order {
                let x = feat(i);
                let y = ds.labels()[i].index();
                let p = predict(&w, &x);
                if p != y {
                    for d in 0..3 {
                        w[y][d] += x[d];
                        w[p][d] -= x[d];
                    }
                }
                for (s, wc) in sum.iter_mut().zip(&w) {
                    for d in 0..3 {
                        s[d] += wc[d];
                    }
                }
            }
        }
        let correct = (0..ds.len()).filter(|&i| predict(&sum, &feat(i)) == ds.labels()[i].index()).count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn noiseless_linear_tier_is_perceptron_separable() {
        for n in [2, 3, 5] {
            let spec = SynthSpec::new(vec![Tier::Linear; n], 100, 0.0, 4);
            let acc = perceptron_accuracy(&generate_synthetic(&spec, Split::Train).unwrap(), 200);
            assert_eq!(acc, 1.0, "{n} linear classes");
        }
    }

    #[test]
    fn xor_tier_defeats_the_perceptron() {
        // a single run wanders between about 0.43 and 0.62, so average over seeds
        let accs: Vec<f64> = (1..=5)
            .map(|seed| {
                let spec = SynthSpec::new(vec![Tier::XorLike; 2], 1000, 0.0, seed);
                perceptron_accuracy(&generate_synthetic(&spec, Split::Train).unwrap(), 100)
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean <= 0.6, "{accs:?}");
    }
}

//! Synthetic three-modality sequence classification data.
//!
//! Every sample carries a latent vector `z` drawn around a class mean; each
//! modality observes `z` through its own fixed random projection, frame by
//! frame, with independent Gaussian frame noise. Each modality is therefore
//! predictive on its own while all three share the per-sample latent.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

pub const DATASET_FORMAT: &str = "corrkd-dataset-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "l")]
    Language,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Language, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        match self {
            Modality::Language => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn from_index(i: usize) -> Modality {
        Self::ALL[i]
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Language => 'l',
            Modality::Audio => 'a',
            Modality::Visual => 'v',
        }
    }

    pub fn from_letter(c: char) -> Option<Modality> {
        match c.to_ascii_lowercase() {
            'l' => Some(Modality::Language),
            'a' => Some(Modality::Audio),
            'v' => Some(Modality::Visual),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    /// Train / valid / test sizes.
    pub samples_per_split: [usize; 3],
    /// `T_L, T_A, T_V`.
    pub seq_lens: [usize; 3],
    /// `d_L, d_A, d_V`.
    pub feature_dims: [usize; 3],
    pub latent_dim: usize,
    /// Standard deviation of both the per-frame noise and the within-class
    /// latent spread.
    pub noise_std: f64,
    /// Scale of the one-hot class-mean corners in latent space.
    pub class_sep: f64,
    /// Scale of the per-modality latent-to-feature projections.
    pub signal_gain: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 4,
            samples_per_split: [2000, 400, 600],
            seq_lens: [20, 20, 20],
            feature_dims: [12, 8, 6],
            latent_dim: 8,
            noise_std: 0.5,
            class_sep: 3.0,
            signal_gain: 0.15,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.samples_per_split.contains(&0) {
            return bad("every split needs at least one sample".into());
        }
        if self.seq_lens.contains(&0) || self.feature_dims.contains(&0) {
            return bad("sequence lengths and feature dims must be positive".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.class_sep > 0.0 && self.signal_gain > 0.0) {
            return bad("class_sep and signal_gain must be positive".into());
        }
        if self.latent_dim + 1 < self.num_classes {
            log::warn!(
                "latent_dim {} < num_classes - 1 ({}): class means share axes",
                self.latent_dim,
                self.num_classes - 1
            );
        }
        if self.class_sep * std::f64::consts::SQRT_2 < 4.0 * self.noise_std {
            log::warn!("class-mean spacing is below 4 * noise_std; classes overlap heavily");
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.samples_per_split[split.index()]
    }
}

/// One multimodal sequence with its class label; `x[m]` has shape `(T_m, d_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample<T> {
    pub id: String,
    pub label: usize,
    pub x: [Array2<T>; 3],
}

impl<T: Scalar> ModalitySample<T> {
    pub fn modality(&self, m: Modality) -> &Array2<T> {
        &self.x[m.index()]
    }

    pub fn seq_lens(&self) -> [usize; 3] {
        [self.x[0].nrows(), self.x[1].nrows(), self.x[2].nrows()]
    }

    /// Zero-pads every modality at the end of the time axis to length `len`.
    pub fn padded_to(&self, len: usize) -> Result<Self> {
        let mut out = self.clone();
        for (m, x) in self.x.iter().enumerate() {
            if x.nrows() > len {
                return Err(Error::Shape(format!(
                    "sample {}: modality {} has {} frames, longer than pad target {len}",
                    self.id,
                    Modality::from_index(m),
                    x.nrows()
                )));
            }
            let mut padded = Array2::zeros((len, x.ncols()));
            padded.slice_mut(ndarray::s![..x.nrows(), ..]).assign(x);
            out.x[m] = padded;
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ModalitySample<U> {
        ModalitySample {
            id: self.id.clone(),
            label: self.label,
            x: [cast2(&self.x[0]), cast2(&self.x[1]), cast2(&self.x[2])],
        }
    }
}

fn cast2<T: Scalar, U: Scalar>(a: &Array2<T>) -> Array2<U> {
    a.mapv(|v| U::lit(v.as_f64()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub config: DatasetConfig,
    pub train: Vec<ModalitySample<T>>,
    pub valid: Vec<ModalitySample<T>>,
    pub test: Vec<ModalitySample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn split(&self, split: Split) -> &[ModalitySample<T>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<ModalitySample<T>> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let c = |v: &[ModalitySample<T>]| v.iter().map(ModalitySample::cast).collect();
        Dataset {
            config: self.config.clone(),
            train: c(&self.train),
            valid: c(&self.valid),
            test: c(&self.test),
        }
    }

    /// Zero-pads all modalities of all samples to the longest `T_m`.
    pub fn pad_to_max(&self) -> Result<Self> {
        let len = *self.config.seq_lens.iter().max().expect("three modalities");
        let mut out = self.clone();
        for split in Split::ALL {
            let padded = self
                .split(split)
                .iter()
                .map(|s| s.padded_to(len))
                .collect::<Result<Vec<_>>>()?;
            *out.split_mut(split) = padded;
        }
        out.config.seq_lens = [len; 3];
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for split in Split::ALL {
            let samples = self.split(split);
            if samples.len() != self.config.split_size(split) {
                return Err(Error::Validation {
                    record: split.name().into(),
                    msg: format!(
                        "split has {} samples, manifest says {}",
                        samples.len(),
                        self.config.split_size(split)
                    ),
                });
            }
            for s in samples {
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Validation {
                        record: s.id.clone(),
                        msg: "duplicate sample id".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Class mean `k`: a scaled one-hot corner, sign-flipped once every latent
/// axis has been used.
fn class_mean(k: usize, latent_dim: usize, sep: f64) -> Array1<f64> {
    let mut mu = Array1::zeros(latent_dim);
    let sign = if (k / latent_dim).is_multiple_of(2) { 1.0 } else { -1.0 };
    mu[k % latent_dim] = sep * sign;
    mu
}

fn normal_matrix(rng: &mut seed::Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

pub fn generate_synthetic<T: Scalar>(config: &DatasetConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let mut rng = seed::rng(config.seed, &[0xDA7A]);
    let l = config.latent_dim;
    let proj_scale = config.signal_gain / (l as f64).sqrt();
    let projections: Vec<Array2<f64>> = config
        .feature_dims
        .iter()
        .map(|&d| normal_matrix(&mut rng, d, l, proj_scale))
        .collect();
    let offsets: Vec<Array1<f64>> = config
        .feature_dims
        .iter()
        .map(|&d| normal_matrix(&mut rng, 1, d, 1.0).row(0).to_owned())
        .collect();
    let means: Vec<Array1<f64>> = (0..config.num_classes)
        .map(|k| class_mean(k, l, config.class_sep))
        .collect();

    let sigma = config.noise_std;
    let mut ds = Dataset {
        config: config.clone(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        let n = config.split_size(split);
        let mut labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
        labels.shuffle(&mut rng);
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let z = &means[label] + &normal_matrix(&mut rng, 1, l, sigma).row(0);
                let x = std::array::from_fn(|m| {
                    let clean = projections[m].dot(&z) + &offsets[m];
                    let frames = config.seq_lens[m];
                    let noise = normal_matrix(&mut rng, frames, config.feature_dims[m], sigma);
                    let x = noise + &clean.insert_axis(ndarray::Axis(0));
                    x.mapv(T::lit)
                });
                ModalitySample {
                    id: format!("{}-{:06}", split.name(), i),
                    label,
                    x,
                }
            })
            .collect();
        *ds.split_mut(split) = samples;
    }
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: DatasetConfig,
    files: Vec<(Split, String)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: i64,
    x_l: Vec<Vec<f64>>,
    x_a: Vec<Vec<f64>>,
    x_v: Vec<Vec<f64>>,
}

fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

fn write_matrix<T: Scalar>(out: &mut String, x: &Array2<T>) {
    out.push('[');
    for (r, row) in x.rows().into_iter().enumerate() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            // 9 significant digits.
            out.push_str(&format!("{:.8e}", v.as_f64()));
        }
        out.push(']');
    }
    out.push(']');
}

fn record_line<T: Scalar>(s: &ModalitySample<T>) -> Result<String> {
    let mut line = String::with_capacity(64 + 16 * s.x.iter().map(|x| x.len()).sum::<usize>());
    line.push_str("{\"id\":");
    line.push_str(&serde_json::to_string(&s.id)?);
    line.push_str(&format!(",\"label\":{}", s.label));
    for (key, x) in ["x_l", "x_a", "x_v"].iter().zip(&s.x) {
        line.push_str(&format!(",\"{key}\":"));
        write_matrix(&mut line, x);
    }
    line.push('}');
    Ok(line)
}

/// Writes `dir/manifest.json` plus one JSON-lines file per split.
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    for s in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
        if s.x.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation {
                record: s.id.clone(),
                msg: "non-finite feature value".into(),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        config: ds.config.clone(),
        files: Split::ALL.iter().map(|&s| (s, split_file(s))).collect(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    for split in Split::ALL {
        let path = dir.join(split_file(split));
        let ctx = || format!("writing {}", path.display());
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(ctx(), e))?);
        for s in ds.split(split) {
            writeln!(w, "{}", record_line(s)?).map_err(|e| Error::io(ctx(), e))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))?;
    }
    Ok(())
}

fn to_matrix<T: Scalar>(rows: Vec<Vec<f64>>, expect: (usize, usize), key: &str, id: &str) -> Result<Array2<T>> {
    let invalid = |msg: String| Error::Validation {
        record: id.to_string(),
        msg,
    };
    if rows.len() != expect.0 || rows.iter().any(|r| r.len() != expect.1) {
        return Err(invalid(format!("{key} must have shape ({}, {})", expect.0, expect.1)));
    }
    let flat: Vec<T> = rows.into_iter().flatten().map(T::lit).collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{key} contains a non-finite value")));
    }
    Ok(Array2::from_shape_vec(expect, flat).expect("shape checked"))
}

fn load_split<T: Scalar>(path: &Path, config: &DatasetConfig) -> Result<Vec<ModalitySample<T>>> {
    let file_name = path.display().to_string();
    let f = File::open(path).map_err(|e| Error::io(format!("opening {file_name}"), e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {file_name}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: file_name.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.label < 0 || rec.label as usize >= config.num_classes {
            return Err(Error::Validation {
                record: rec.id,
                msg: format!("label {} outside [0, {})", rec.label, config.num_classes),
            });
        }
        let shape = |m: usize| (config.seq_lens[m], config.feature_dims[m]);
        let x = [
            to_matrix(rec.x_l, shape(0), "x_l", &rec.id)?,
            to_matrix(rec.x_a, shape(1), "x_a", &rec.id)?,
            to_matrix(rec.x_v, shape(2), "x_v", &rec.id)?,
        ];
        samples.push(ModalitySample {
            id: rec.id,
            label: rec.label as usize,
            x,
        });
    }
    Ok(samples)
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingInput(manifest_path));
    }
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: manifest_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Validation {
            record: MANIFEST_FILE.into(),
            msg: format!("unsupported format `{}`", manifest.format),
        });
    }
    manifest.config.validate()?;
    let mut ds = Dataset {
        config: manifest.config,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (split, file) in &manifest.files {
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        *ds.split_mut(*split) = load_split(&path, &ds.config)?;
    }
    ds.check()?;
    Ok(ds)
}

/// Epoch-wise batching over one split.
///
/// Every sample is yielded exactly once per epoch; the last batch may be
/// short. With `shuffle` the order depends only on `(seed, epoch)`.
pub struct BatchIter<'a, T> {
    samples: &'a [ModalitySample<T>],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a, T: Scalar> BatchIter<'a, T> {
    pub fn new(
        samples: &'a [ModalitySample<T>],
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if shuffle {
            order.shuffle(&mut seed::rng(seed, &[0xBA7C, epoch as u64]));
        }
        Ok(BatchIter {
            samples,
            order,
            batch_size,
            pos: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<'a, T: Scalar> Iterator for BatchIter<'a, T> {
    type Item = Vec<&'a ModalitySample<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.samples[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iter<T: Scalar>(
    samples: &[ModalitySample<T>],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: usize,
) -> Result<BatchIter<'_, T>> {
    BatchIter::new(samples, batch_size, shuffle, seed, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            samples_per_split: [10, 4, 6],
            seq_lens: [5, 5, 5],
            feature_dims: [3, 2, 2],
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn rejects_single_class() {
        let cfg = DatasetConfig {
            num_classes: 1,
            ..small()
        };
        assert!(matches!(generate_synthetic::<f64>(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn small_latent_warns_but_generates() {
        let cfg = DatasetConfig {
            num_classes: 5,
            latent_dim: 2,
            ..small()
        };
        let ds = generate_synthetic::<f64>(&cfg).unwrap();
        assert_eq!(ds.train.len(), 10);
    }

    #[test]
    fn split_sizes_and_unique_ids() {
        let cfg = DatasetConfig {
            samples_per_split: [2000, 400, 600],
            seq_lens: [2, 2, 2],
            ..small()
        };
        let ds = generate_synthetic::<f32>(&cfg).unwrap();
        assert_eq!([ds.train.len(), ds.valid.len(), ds.test.len()], [2000, 400, 600]);
        ds.check().unwrap();
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate_synthetic::<f64>(&small()).unwrap();
        let mut counts = [0usize; 4];
        for s in &ds.train {
            counts[s.label] += 1;
        }
        assert_eq!(counts, [3, 3, 2, 2]);
    }

    #[test]
    fn batch_sizes_and_orders() {
        let ds = generate_synthetic::<f64>(&small()).unwrap();
        let sizes: Vec<usize> = batch_iter(&ds.train, 4, false, 0, 0)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let ids = |shuffle, seed, epoch| -> Vec<String> {
            batch_iter(&ds.train, 3, shuffle, seed, epoch)
                .unwrap()
                .flatten()
                .map(|s| s.id.clone())
                .collect()
        };
        let original: Vec<String> = ds.train.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids(false, 9, 0), original);
        assert_eq!(ids(true, 9, 1), ids(true, 9, 1));
        assert_ne!(ids(true, 9, 1), ids(true, 9, 2));
        let mut shuffled = ids(true, 9, 1);
        shuffled.sort();
        assert_eq!(shuffled, original);
    }

    #[test]
    fn empty_split_gives_empty_stream() {
        let empty: Vec<ModalitySample<f64>> = Vec::new();
        assert_eq!(batch_iter(&empty, 4, true, 0, 0).unwrap().count(), 0);
        assert!(batch_iter(&empty, 0, true, 0, 0).is_err());
    }

    #[test]
    fn pad_to_max_extends_short_modalities() {
        let cfg = DatasetConfig {
            seq_lens: [5, 3, 4],
            ..small()
        };
        let ds = generate_synthetic::<f64>(&cfg).unwrap();
        let p = ds.pad_to_max().unwrap();
        assert_eq!(p.train[0].seq_lens(), [5, 5, 5]);
        assert_eq!(p.train[0].x[1].row(4).sum(), 0.0);
        assert_eq!(p.train[0].x[1].row(2), ds.train[0].x[1].row(2));
    }
}

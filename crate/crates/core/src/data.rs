//! Synthetic latent-factor datasets and their on-disk formats.
//!
//! Every sample is a mix of three latent groups pushed through one fixed
//! random nonlinear mixer:
//!
//! * a per-class code (the only signal separating classes),
//! * shared factors: coefficients over one global pool of directions that is
//!   reused by every class in both splits,
//! * intra-class factors drawn from a class-specific distribution.
//!
//! Because test classes reuse the shared pool and the mixer, structure
//! learned from shared and intra-class variation on training classes still
//! applies to unseen classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DIVA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn flag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_flag(f: u8) -> Option<Split> {
        match f {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train_classes: usize,
    pub n_test_classes: usize,
    pub samples_per_class: usize,
    pub disc_dim: usize,
    pub shared_dim: usize,
    pub intra_dim: usize,
    /// Observation dimension `F`.
    pub feature_dim: usize,
    /// Number of layers of the random mixer.
    pub mixing_depth: usize,
    /// Width of the mixer's hidden layers.
    pub mixing_width: usize,
    /// Weight scale of the mixer; larger values saturate its rectifiers.
    pub mixing_gain: f64,
    pub noise_sigma: f64,
    /// Spread of class codes. The default keeps classes close enough that
    /// raw-feature retrieval is far from perfect.
    pub disc_scale: f64,
    /// Spread of shared-factor coefficients.
    pub shared_scale: f64,
    /// Fraction of the shared-factor coefficients set by a per-class profile
    /// (0 makes shared factors independent of the class).
    pub shared_class_bias: f64,
    /// Spread of intra-class factors; 0 disables them.
    pub intra_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train_classes: 20,
            n_test_classes: 20,
            samples_per_class: 30,
            disc_dim: 8,
            shared_dim: 8,
            intra_dim: 4,
            feature_dim: 64,
            mixing_depth: 2,
            mixing_width: 64,
            mixing_gain: 1.0,
            noise_sigma: 0.05,
            disc_scale: 0.2,
            shared_scale: 1.0,
            shared_class_bias: 0.5,
            intra_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_train_classes", self.n_train_classes),
            ("n_test_classes", self.n_test_classes),
            ("samples_per_class", self.samples_per_class),
            ("disc_dim", self.disc_dim),
            ("shared_dim", self.shared_dim),
            ("intra_dim", self.intra_dim),
            ("feature_dim", self.feature_dim),
            ("mixing_depth", self.mixing_depth),
            ("mixing_width", self.mixing_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(DivaError::config(format!("{name} must be >= 1")));
            }
        }
        let scales = [
            ("noise_sigma", self.noise_sigma),
            ("mixing_gain", self.mixing_gain),
            ("disc_scale", self.disc_scale),
            ("shared_scale", self.shared_scale),
            ("intra_scale", self.intra_scale),
        ];
        for (name, v) in scales {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DivaError::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_class_bias) {
            return Err(DivaError::config("shared_class_bias must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_train_classes + self.n_test_classes
    }

    fn latent_dim(&self) -> usize {
        self.disc_dim + self.shared_dim + self.intra_dim
    }
}

/// Labelled feature matrix with a train/test tag per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<u32>,
    splits: Vec<Split>,
}

impl Dataset {
    /// Builds a dataset, checking label range and finiteness.
    pub fn new(features: Tensor, labels: Vec<u32>, splits: Vec<Split>) -> Result<Self> {
        if features.rows() != labels.len() || features.shape().len() != 2 {
            return Err(DivaError::dim(format!("{:?} features for {} labels", features.shape(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= splits.len()) {
            return Err(DivaError::config(format!("label {bad} outside 0..{}", splits.len())));
        }
        if !features.is_finite() {
            return Err(DivaError::Domain("features contain non-finite values".into()));
        }
        Ok(Dataset { features, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.splits.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_of(&self, class: u32) -> Split {
        self.splits[class as usize]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of(self.labels[i]) == split).collect()
    }

    /// Row indices of each training class.
    pub fn train_members(&self) -> BTreeMap<u32, Vec<usize>> {
        self.members(Split::Train)
    }

    pub fn members(&self, split: Split) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if self.split_of(l) == split {
                out.entry(l).or_default().push(i);
            }
        }
        out
    }

    /// Features and labels of the given rows.
    pub fn select(&self, rows: &[usize]) -> (Tensor, Vec<u32>) {
        (self.features.select_rows(rows), rows.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn split_data(&self, split: Split) -> (Tensor, Vec<u32>) {
        self.select(&self.indices(split))
    }

    /// Class ids present in each split; the two sets never intersect.
    pub fn classes_by_split(&self) -> (BTreeSet<u32>, BTreeSet<u32>) {
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for &l in &self.labels {
            match self.split_of(l) {
                Split::Train => train.insert(l),
                Split::Test => test.insert(l),
            };
        }
        (train, test)
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    gaussian_matrix(1, n, scale, rng)
}

/// `y = W x` for a row-major `[out × in]` matrix.
fn apply(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let k = x.len();
    (0..out).map(|o| w[o * k..(o + 1) * k].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

struct Mixer {
    /// `(weight [out × in], bias [out])` per layer.
    layers: Vec<(Vec<f64>, Vec<f64>, usize)>,
}

impl Mixer {
    fn new<R: Rng + ?Sized>(input: usize, width: usize, output: usize, depth: usize, gain: f64, rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| {
                let weight = gaussian_matrix(w[1], w[0], gain / (w[0] as f64).sqrt(), rng);
                let bias = gaussian_vec(w[1], 0.1, rng);
                (weight, bias, w[1])
            })
            .collect();
        Mixer { layers }
    }

    fn forward(&self, u: &[f64]) -> Vec<f64> {
        let mut h = u.to_vec();
        for (i, (w, b, out)) in self.layers.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = apply(w, &h, *out).into_iter().zip(b).map(|(v, c)| v + c).collect();
        }
        h
    }
}

/// Generates a dataset from `cfg`. Classes `0..n_train_classes` form the
/// training split, the rest the test split. Features are rounded to `f32`
/// precision so that the binary format round-trips exactly.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = cfg.latent_dim();
    let mixer = Mixer::new(latent, cfg.mixing_width, cfg.feature_dim, cfg.mixing_depth, cfg.mixing_gain, &mut rng);
    // Global pool: one unit direction per shared factor inside the shared block.
    let pool = gaussian_matrix(cfg.shared_dim, cfg.shared_dim, 1.0 / (cfg.shared_dim as f64).sqrt(), &mut rng);

    let n_classes = cfg.n_classes();
    let mut features = Vec::with_capacity(n_classes * cfg.samples_per_class * cfg.feature_dim);
    let mut labels = Vec::with_capacity(n_classes * cfg.samples_per_class);
    let bias = cfg.shared_class_bias;
    for c in 0..n_classes {
        let code = gaussian_vec(cfg.disc_dim, cfg.disc_scale, &mut rng);
        let profile = gaussian_vec(cfg.shared_dim, 1.0, &mut rng);
        let intra_map = gaussian_matrix(cfg.intra_dim, cfg.intra_dim, 1.0 / (cfg.intra_dim as f64).sqrt(), &mut rng);
        let intra_mean = gaussian_vec(cfg.intra_dim, 0.5, &mut rng);
        for _ in 0..cfg.samples_per_class {
            let coeff: Vec<f64> = profile
                .iter()
                .map(|&p| {
                    let own: f64 = rng.sample(StandardNormal);
                    cfg.shared_scale * (bias.sqrt() * p + (1.0 - bias).sqrt() * own)
                })
                .collect();
            let shared = apply(&pool, &coeff, cfg.shared_dim);
            let eps = gaussian_vec(cfg.intra_dim, 1.0, &mut rng);
            let intra: Vec<f64> =
                apply(&intra_map, &eps, cfg.intra_dim).iter().zip(&intra_mean).map(|(v, m)| cfg.intra_scale * (v + m)).collect();
            let u: Vec<f64> = code.iter().chain(&shared).chain(&intra).copied().collect();
            for v in mixer.forward(&u) {
                let noisy = v + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                features.push(noisy as f32 as f64);
            }
            labels.push(c as u32);
        }
    }
    let splits = (0..n_classes).map(|c| if c < cfg.n_train_classes { Split::Train } else { Split::Test }).collect();
    Dataset::new(Tensor::matrix(labels.len(), cfg.feature_dim, features)?, labels, splits)
}

/// Binary encoding of a dataset. Features are narrowed to `f32`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| DivaError::config(format!("{what} exceeds u32")));
    let n = to_u32(ds.len(), "sample count")?;
    let f = to_u32(ds.feature_dim(), "feature dim")?;
    let c = to_u32(ds.n_classes(), "class count")?;
    let mut out = Vec::with_capacity(20 + ds.len() * (ds.feature_dim() * 4 + 4) + ds.n_classes());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, n, f, c] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in ds.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend(ds.splits.iter().map(|s| s.flag()));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DivaError::format(
                self.buf.len() as u64,
                format!("truncated while reading {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(DivaError::format(0, "bad magic, expected \"DIVA\""));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DivaError::format(4, format!("unsupported version {version}")));
    }
    let n = r.u32("sample count")? as usize;
    let f = r.u32("feature dim")? as usize;
    let c = r.u32("class count")? as usize;
    let feat_bytes = n
        .checked_mul(f)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| DivaError::format(12, "header sizes overflow"))?;
    let raw = r.take(feat_bytes, "features")?;
    let features: Vec<f64> =
        raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    let label_start = r.pos;
    let raw = r.take(n * 4, "labels")?;
    let labels: Vec<u32> = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    if let Some(i) = labels.iter().position(|&l| l as usize >= c) {
        return Err(DivaError::format(
            (label_start + 4 * i) as u64,
            format!("label {} outside 0..{c}", labels[i]),
        ));
    }
    let split_start = r.pos;
    let raw = r.take(c, "split flags")?;
    let splits = raw
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            Split::from_flag(b)
                .ok_or_else(|| DivaError::format((split_start + i) as u64, format!("split flag {b} is not 0 or 1")))
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(DivaError::format(r.pos as u64, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let features = Tensor::matrix(n, f, features)?;
    if !features.is_finite() {
        return Err(DivaError::format(20, "features contain non-finite values"));
    }
    Dataset::new(features, labels, splits)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Reads a headerless CSV whose rows are `F` floats, an integer label and
/// a split flag (0 train, 1 test).
pub fn import_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut class_split: BTreeMap<u32, Split> = BTreeMap::new();
    let mut width: Option<usize> = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = line + 1;
        if rec.len() < 3 {
            return Err(DivaError::config(format!("line {line}: need at least one feature, a label and a split flag")));
        }
        let f = rec.len() - 2;
        match width {
            None => width = Some(f),
            Some(w) if w != f => {
                return Err(DivaError::config(format!("line {line}: ragged row with {f} features, expected {w}")));
            }
            _ => {}
        }
        for (j, field) in rec.iter().take(f).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DivaError::config(format!("line {line}, column {}: '{field}' is not a number", j + 1)))?;
            features.push(v);
        }
        let label: u32 = rec[f]
            .trim()
            .parse()
            .map_err(|_| DivaError::config(format!("line {line}: label '{}' is not a non-negative integer", &rec[f])))?;
        let split = match rec[f + 1].trim() {
            "0" => Split::Train,
            "1" => Split::Test,
            other => return Err(DivaError::config(format!("line {line}: split flag '{other}' is not 0 or 1"))),
        };
        if let Some(&prev) = class_split.get(&label) {
            if prev != split {
                return Err(DivaError::config(format!("line {line}: class {label} appears in both splits")));
            }
        }
        class_split.insert(label, split);
        labels.push(label);
    }
    let width = width.ok_or_else(|| DivaError::config("CSV file has no rows"))?;
    let n_classes = class_split.keys().next_back().map_or(0, |&m| m as usize + 1);
    let splits = (0..n_classes as u32).map(|c| class_split.get(&c).copied().unwrap_or(Split::Train)).collect();
    Dataset::new(Tensor::matrix(labels.len(), width, features)?, labels, splits)
}

/// Writes the dataset in the CSV dialect read by [`import_csv`]. Values use
/// the shortest decimal form that parses back to the same `f64`.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (i, row) in ds.features.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let l = ds.labels[i];
        rec.push(l.to_string());
        rec.push(ds.split_of(l).flag().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

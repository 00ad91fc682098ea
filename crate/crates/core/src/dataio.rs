//! Dataset bundles: feature maps, labels, class semantics and the seen/unseen
//! and train/test split, with a binary container format and a seeded
//! synthetic generator.
//!
//! # Bundle file
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "SDNB" | u32 version = 1
//! u32 N | u32 H | u32 W | u32 C | u32 S | u32 D | u32 seen-class count
//! D x u32 class ids
//! D*S x f32 semantic vectors (row per class)
//! seen-class count x u32 seen class ids
//! N x u32 labels
//! N x u8 train flags (1 = train)
//! N*H*W*C x f32 features (sample-major, row-major spatial, channel-last)
//! ```
//!
//! The synthetic generator draws from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`; the same spec always yields the same bytes.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{bail, Error, Result};
use crate::id3m::{partition_classes, FoldPartition};
use crate::scalar::Scalar;
use crate::setnet::{FeatureMap, SemanticTable};

pub const BUNDLE_MAGIC: &[u8; 4] = b"SDNB";
pub const BUNDLE_VERSION: u32 = 1;

/// Seen/unseen classes and per-sample train flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub train: Vec<bool>,
}

/// Feature maps with labels, class semantics and split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    height: usize,
    width: usize,
    channels: usize,
    semantic_dim: usize,
    class_ids: Vec<u32>,
    semantics: Vec<f32>,
    labels: Vec<u32>,
    features: Vec<f32>,
    split: SplitSpec,
}

impl DatasetBundle {
    /// Assembles and validates a bundle. Unseen classes are the table classes
    /// not listed in `seen`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        semantic_dim: usize,
        class_ids: Vec<u32>,
        semantics: Vec<f32>,
        seen: Vec<u32>,
        labels: Vec<u32>,
        train: Vec<bool>,
        features: Vec<f32>,
    ) -> Result<Self> {
        let unseen = class_ids.iter().copied().filter(|c| !seen.contains(c)).collect();
        let bundle = Self {
            height,
            width,
            channels,
            semantic_dim,
            class_ids,
            semantics,
            labels,
            features,
            split: SplitSpec { seen, unseen, train },
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let d = self.class_ids.len();
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.semantic_dim == 0 {
            bail!(Invariant, "zero-sized bundle dimension");
        }
        if self.semantics.len() != d * self.semantic_dim {
            bail!(Invariant, "semantic block has {} values for {d} classes", self.semantics.len());
        }
        if self.features.len() != n * self.cell_values() {
            bail!(Invariant, "feature block has {} values for {n} samples", self.features.len());
        }
        if self.split.train.len() != n {
            bail!(Invariant, "{} train flags for {n} samples", self.split.train.len());
        }
        if self.features.iter().chain(&self.semantics).any(|v| !v.is_finite()) {
            bail!(Invariant, "non-finite value in bundle");
        }
        // unique ids and unit-norm rows as stored
        let data = self.semantics.iter().map(|&v| v as f64).collect();
        SemanticTable::new(self.class_ids.clone(), Tensor::new(vec![d, self.semantic_dim], data)?)?;
        for s in &self.split.seen {
            if !self.class_ids.contains(s) {
                bail!(Invariant, "seen class {s} missing from the semantic table");
            }
        }
        let mut seen = self.split.seen.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.split.seen.len() {
            bail!(Invariant, "duplicate seen class ids");
        }
        for (i, (&y, &train)) in self.labels.iter().zip(&self.split.train).enumerate() {
            if !self.class_ids.contains(&y) {
                bail!(Invariant, "sample {i} has label {y} missing from the semantic table");
            }
            if train && !self.split.seen.contains(&y) {
                bail!(Invariant, "training sample {i} belongs to unseen class {y}");
            }
        }
        Ok(())
    }

    fn cell_values(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn is_train(&self, i: usize) -> bool {
        self.split.train[i]
    }

    pub fn is_seen_class(&self, class_id: u32) -> bool {
        self.split.seen.contains(&class_id)
    }

    pub fn raw_features(&self, i: usize) -> &[f32] {
        let n = self.cell_values();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn feature_map<T: Scalar>(&self, i: usize) -> Result<FeatureMap<T>> {
        let data = self.raw_features(i).iter().map(|&v| T::lit(v as f64)).collect();
        FeatureMap::from_vec(self.height, self.width, self.channels, data)
    }

    pub fn feature_maps<T: Scalar>(&self, indices: &[usize]) -> Result<Vec<FeatureMap<T>>> {
        indices.iter().map(|&i| self.feature_map(i)).collect()
    }

    /// Semantic table over all classes, in file order. Rows are renormalized
    /// in `T` to remove the single-precision storage error.
    pub fn semantic_table<T: Scalar>(&self) -> Result<SemanticTable<T>> {
        let data = self.semantics.iter().map(|&v| T::lit(v as f64)).collect();
        SemanticTable::from_raw(
            self.class_ids.clone(),
            Tensor::new(vec![self.class_ids.len(), self.semantic_dim], data)?,
        )
    }

    pub fn seen_table<T: Scalar>(&self) -> Result<SemanticTable<T>> {
        self.semantic_table()?.subset(&self.split.seen)
    }

    pub fn unseen_table<T: Scalar>(&self) -> Result<SemanticTable<T>> {
        self.semantic_table()?.subset(&self.split.unseen)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| self.split.train[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| !self.split.train[i]).collect()
    }

    /// Test samples of seen classes.
    pub fn seen_test_indices(&self) -> Vec<usize> {
        self.test_indices()
            .into_iter()
            .filter(|&i| self.is_seen_class(self.labels[i]))
            .collect()
    }

    /// Test samples of unseen classes.
    pub fn unseen_test_indices(&self) -> Vec<usize> {
        self.test_indices()
            .into_iter()
            .filter(|&i| !self.is_seen_class(self.labels[i]))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 4 * self.features.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        let header = [
            BUNDLE_VERSION,
            self.num_samples() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.semantic_dim as u32,
            self.class_ids.len() as u32,
            self.split.seen.len() as u32,
        ];
        for v in header.iter().chain(&self.class_ids) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.semantics {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.split.seen.iter().chain(&self.labels) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.split.train.iter().map(|&t| t as u8));
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected SDNB".into(),
            });
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported bundle version {version}"),
            });
        }
        let n = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let s = r.u32()? as usize;
        let d = r.u32()? as usize;
        let n_seen = r.u32()? as usize;
        let class_ids = r.u32s(d)?;
        let semantics = r.f32s(d.checked_mul(s).ok_or_else(|| r.error("size overflow"))?)?;
        let seen = r.u32s(n_seen)?;
        let labels = r.u32s(n)?;
        let flags_at = r.offset();
        let train = r
            .take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format {
                    offset: flags_at as u64,
                    message: format!("train flag {other} is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let count = [n, h, w, c]
            .iter()
            .try_fold(1usize, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| r.error("size overflow"))?;
        let features = r.f32s(count)?;
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes after feature block"));
        }
        Self::new((h, w, c), s, class_ids, semantics, seen, labels, train, features)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_bundle(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    DatasetBundle::load(path)
}

/// Cursor over a byte slice that reports the offset of failed reads.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error(&self, message: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.to_owned(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(&format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn checked_block(&mut self, count: usize, width: usize) -> Result<&'a [u8]> {
        let len = count.checked_mul(width).ok_or_else(|| self.error("size overflow"))?;
        self.take(len)
    }

    pub(crate) fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        Ok(self
            .checked_block(count, 4)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        Ok(self
            .checked_block(count, 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .checked_block(count, 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Parameters of the synthetic attribute-localized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub semantic_dim: usize,
    pub attributes_per_class: usize,
    pub noise: f64,
    /// Displace each attribute by up to one cell per sample.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seen_classes: 10,
            unseen_classes: 5,
            samples_per_class: 30,
            height: 4,
            width: 4,
            channels: 32,
            semantic_dim: 16,
            attributes_per_class: 4,
            noise: 0.1,
            jitter: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("seen_classes", self.seen_classes),
            ("unseen_classes", self.unseen_classes),
            ("samples_per_class", self.samples_per_class),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("semantic_dim", self.semantic_dim),
            ("attributes_per_class", self.attributes_per_class),
        ];
        for (name, v) in dims {
            if v == 0 {
                bail!(InvalidInput, "{name} must be at least 1");
            }
        }
        if self.attributes_per_class > self.semantic_dim {
            bail!(
                InvalidInput,
                "{} attributes per class exceed semantic_dim {}",
                self.attributes_per_class,
                self.semantic_dim
            );
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            bail!(InvalidInput, "noise must be finite and >= 0");
        }
        let total = self.seen_classes + self.unseen_classes;
        if binomial(self.semantic_dim, self.attributes_per_class) < total as u128 {
            bail!(
                InvalidInput,
                "only {} distinct attribute subsets of size {} for {total} classes",
                binomial(self.semantic_dim, self.attributes_per_class),
                self.attributes_per_class
            );
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Generates a bundle where each attribute owns a channel signature and a
/// home cell, and each class is a distinct set of attributes.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c, s) = (spec.height, spec.width, spec.channels, spec.semantic_dim);

    let mut signatures = Vec::with_capacity(s);
    let mut homes = Vec::with_capacity(s);
    for _ in 0..s {
        let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        signatures.push(v);
        homes.push((rng.random_range(0..h), rng.random_range(0..w)));
    }

    let total = spec.seen_classes + spec.unseen_classes;
    let mut subsets: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while subsets.len() < total {
        attempts += 1;
        if attempts > 10_000 * total {
            bail!(InvalidInput, "could not draw {total} distinct attribute subsets");
        }
        let mut pick = index::sample(&mut rng, s, spec.attributes_per_class).into_vec();
        pick.sort_unstable();
        if !subsets.contains(&pick) {
            subsets.push(pick);
        }
    }
    let class_ids: Vec<u32> = (0..total as u32).collect();
    let unit = 1.0 / (spec.attributes_per_class as f64).sqrt();
    let mut semantics = vec![0f32; total * s];
    for (d, subset) in subsets.iter().enumerate() {
        for &a in subset {
            semantics[d * s + a] = unit as f32;
        }
    }

    let mut order = class_ids.clone();
    order.shuffle(&mut rng);
    let mut seen = order[..spec.seen_classes].to_vec();
    seen.sort_unstable();

    let n = total * spec.samples_per_class;
    let cell = h * w * c;
    let mut features = vec![0f32; n * cell];
    let mut labels = Vec::with_capacity(n);
    let mut map = vec![0f64; cell];
    for (d, subset) in subsets.iter().enumerate() {
        for j in 0..spec.samples_per_class {
            map.iter_mut().for_each(|v| *v = 0.0);
            for &a in subset {
                let (mut y, mut x) = homes[a];
                if spec.jitter {
                    y = jitter(&mut rng, y, h);
                    x = jitter(&mut rng, x, w);
                }
                let base = (y * w + x) * c;
                for (dst, &sv) in map[base..base + c].iter_mut().zip(&signatures[a]) {
                    *dst += sv;
                }
            }
            if spec.noise > 0.0 {
                for v in map.iter_mut() {
                    *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let i = d * spec.samples_per_class + j;
            for (dst, &v) in features[i * cell..(i + 1) * cell].iter_mut().zip(&map) {
                *dst = v as f32;
            }
            labels.push(d as u32);
        }
    }

    let mut train = vec![false; n];
    let per_class = spec.samples_per_class;
    let n_train = (per_class * 4 + 2) / 5;
    for &class in &seen {
        let start = class as usize * per_class;
        let mut idx: Vec<usize> = (start..start + per_class).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            train[i] = true;
        }
    }

    DatasetBundle::new((h, w, c), s, class_ids, semantics, seen, labels, train, features)
}

fn jitter(rng: &mut ChaCha8Rng, pos: usize, len: usize) -> usize {
    let shifted = pos as i64 + rng.random_range(-1i64..=1);
    shifted.clamp(0, len as i64 - 1) as usize
}

/// Folds over the seen classes of a split.
pub fn make_folds(split: &SplitSpec, folds: usize, seed: u64) -> Result<FoldPartition> {
    partition_classes(&split.seen, folds, seed)
}

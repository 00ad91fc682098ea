//! Seeded minibatch SGD for SetNet models and sub-detector ensembles, plus
//! the checkpoint container.
//!
//! # Checkpoint file
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "SDNC" | u32 version = 1 | u32 kind (1 = SetNet, 2 = detector ensemble)
//! u32 n | n bytes of UTF-8 JSON TrainConfig
//! u8 has_theta | f64 theta (present only when has_theta = 1)
//! u32 tensor count, then per tensor:
//!     u32 name length | name bytes | u32 ndim | ndim x u32 dims | f64 values
//! ```
//!
//! Ensemble checkpoints name their tensors `ddm.{i}.{w1,b1,w2,b2}`, with each
//! member's in-distribution class ids in `ddm.{i}.classes` and the fold
//! partition in `partition.{i}`, ids stored exactly as f64.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_folds, ByteReader, DatasetBundle};
use crate::diffmath::{GradientSet, Parameterized, Tensor};
use crate::error::{bail, Error, Result};
use crate::id3m::{pooled_features, DdmEnsemble, FoldPartition, SubDdm};
use crate::scalar::Scalar;
use crate::setnet::{AttentionStack, FeatureMap, ProjectorEnsemble, SemanticTable, SetNetModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fraction of each seen class's training samples held out for calibration.
pub const CALIBRATION_FRACTION: f64 = 0.2;

// RNG streams carved out of one seed so that each consumer is independent.
const STREAM_SETNET: u64 = 0;
const STREAM_CALIBRATION: u64 = 1;
const STREAM_DDM_BASE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Attention heads `K`.
    pub heads: usize,
    /// Attention hidden width `C_h`.
    pub attention_hidden: usize,
    /// Number of sub-detectors `I`.
    pub folds: usize,
    pub diversity_sign: f64,
    pub ddm_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 150,
            batch_size: 16,
            seed: 0,
            lambda: 0.2,
            heads: 4,
            attention_hidden: 16,
            folds: 5,
            diversity_sign: -1.0,
            ddm_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(InvalidInput, "learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            bail!(InvalidInput, "batch_size must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(InvalidInput, "lambda must be finite and >= 0");
        }
        if self.heads == 0 || self.attention_hidden == 0 || self.ddm_hidden == 0 {
            bail!(InvalidInput, "heads, attention_hidden and ddm_hidden must be at least 1");
        }
        if self.folds < 2 {
            bail!(InvalidInput, "folds must be at least 2");
        }
        if self.diversity_sign != 1.0 && self.diversity_sign != -1.0 {
            bail!(InvalidInput, "diversity_sign must be 1 or -1");
        }
        Ok(())
    }
}

/// A trained model with the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub epoch_losses: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean loss and mean gradient of `total_loss` over a minibatch.
pub fn setnet_batch_gradient<T: Scalar>(
    model: &SetNetModel<T>,
    batch: &[(&FeatureMap<T>, u32)],
    table: &SemanticTable<T>,
) -> Result<(T, GradientSet<T>)> {
    if batch.is_empty() {
        bail!(InvalidInput, "empty minibatch");
    }
    let mut grads = GradientSet::zeros_like(model);
    let mut loss = T::zero();
    let scale = T::one() / T::from_usize_lossy(batch.len());
    for &(m, y) in batch {
        let (l, g) = model.total_loss(m, y, table)?;
        loss += l;
        grads.add_scaled(scale, &g)?;
    }
    Ok((loss * scale, grads))
}

/// Fresh SetNet model for a bundle, drawn from the config's seed.
pub fn init_setnet<T: Scalar>(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<SetNetModel<T>> {
    cfg.validate()?;
    init_setnet_with(bundle, cfg, &mut stream_rng(cfg.seed, STREAM_SETNET))
}

fn init_setnet_with<T: Scalar>(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SetNetModel<T>> {
    let (_, _, c) = bundle.dims();
    SetNetModel::init(
        c,
        cfg.attention_hidden,
        cfg.heads,
        bundle.semantic_dim(),
        T::lit(cfg.lambda),
        T::lit(cfg.diversity_sign),
        rng,
    )
}

/// Plain SGD on `total_loss` over the seen-class training samples, with the
/// softmax taken over the seen classes.
pub fn train_setnet<T: Scalar>(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Trained<SetNetModel<T>>> {
    cfg.validate()?;
    let indices = bundle.train_indices();
    if indices.is_empty() {
        bail!(InvalidInput, "bundle has no training samples");
    }
    let table = bundle.seen_table::<T>()?;
    let maps = bundle.feature_maps::<T>(&indices)?;
    let labels: Vec<u32> = indices.iter().map(|&i| bundle.label(i)).collect();

    let mut rng = stream_rng(cfg.seed, STREAM_SETNET);
    let mut model = init_setnet_with(bundle, cfg, &mut rng)?;
    let lr = T::lit(cfg.learning_rate);
    let mut order: Vec<usize> = (0..maps.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&FeatureMap<T>, u32)> = chunk.iter().map(|&j| (&maps[j], labels[j])).collect();
            let (loss, grads) = setnet_batch_gradient(&model, &batch, &table)?;
            sum += loss.as_f64() * chunk.len() as f64;
            model.sgd_step(&grads, lr)?;
        }
        epoch_losses.push(sum / maps.len() as f64);
    }
    Ok(Trained { model, epoch_losses })
}

/// Splits the seen-class training samples into a detector-fitting part and a
/// held-out calibration part (a seeded fifth of each class, rounded).
///
/// Returns `(fit, calibration)` as sorted sample indices.
pub fn calibration_split(bundle: &DatasetBundle, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(seed, STREAM_CALIBRATION);
    let train = bundle.train_indices();
    let mut fit = Vec::new();
    let mut calib = Vec::new();
    for &class in &bundle.split().seen {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| bundle.label(i) == class).collect();
        members.shuffle(&mut rng);
        let held = (members.len() as f64 * CALIBRATION_FRACTION).round() as usize;
        calib.extend_from_slice(&members[..held]);
        fit.extend_from_slice(&members[held..]);
    }
    fit.sort_unstable();
    calib.sort_unstable();
    (fit, calib)
}

/// Spatially pooled features of the given samples.
pub fn pooled_samples<T: Scalar>(bundle: &DatasetBundle, indices: &[usize]) -> Result<Vec<Vec<T>>> {
    indices
        .iter()
        .map(|&i| pooled_features(&bundle.feature_map::<T>(i)?))
        .collect()
}

/// Disagreement degrees of the calibration split under `ddm`.
pub fn calibration_degrees<T: Scalar>(ddm: &DdmEnsemble<T>, bundle: &DatasetBundle, seed: u64) -> Result<Vec<T>> {
    let (_, calib) = calibration_split(bundle, seed);
    if calib.is_empty() {
        bail!(InvalidInput, "calibration split is empty");
    }
    pooled_samples::<T>(bundle, &calib)?
        .iter()
        .map(|x| ddm.degree(x))
        .collect()
}

/// Trains one sub-detector per fold on the fitting part of the training
/// split: in-distribution samples by cross-entropy, the fold's own classes as
/// virtual out-of-distribution data. The threshold is left unset.
pub fn train_ddm<T: Scalar>(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Trained<DdmEnsemble<T>>> {
    cfg.validate()?;
    let partition = make_folds(bundle.split(), cfg.folds, cfg.seed)?;
    let (fit, _) = calibration_split(bundle, cfg.seed);
    if fit.is_empty() {
        bail!(InvalidInput, "bundle has no training samples for the detectors");
    }
    let inputs = pooled_samples::<T>(bundle, &fit)?;
    let labels: Vec<u32> = fit.iter().map(|&i| bundle.label(i)).collect();
    let (_, _, c) = bundle.dims();

    let mut members = Vec::with_capacity(cfg.folds);
    let mut epoch_losses = vec![0.0; cfg.epochs];
    for i in 0..partition.num_folds() {
        let mut rng = stream_rng(cfg.seed, STREAM_DDM_BASE + i as u64);
        let mut member = SubDdm::init(i, partition.in_distribution(i), c, cfg.ddm_hidden, &mut rng)?;
        let (mut id, mut ood): (Vec<usize>, Vec<usize>) =
            (0..inputs.len()).partition(|&j| partition.fold_of(labels[j]) != Some(i));
        if id.is_empty() {
            bail!(InvalidInput, "fold {i} has no in-distribution training samples");
        }
        let losses = fit_sub_ddm(&mut member, &inputs, &labels, &mut id, &mut ood, cfg, &mut rng)?;
        for (acc, l) in epoch_losses.iter_mut().zip(losses) {
            *acc += l / partition.num_folds() as f64;
        }
        members.push(member);
    }
    Ok(Trained {
        model: DdmEnsemble::new(members, partition)?,
        epoch_losses,
    })
}

/// Minibatches pair each in-distribution chunk with a proportional slice of
/// the held-out samples.
fn fit_sub_ddm<T: Scalar>(
    member: &mut SubDdm<T>,
    inputs: &[Vec<T>],
    labels: &[u32],
    id: &mut [usize],
    ood: &mut [usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let lr = T::lit(cfg.learning_rate);
    let batches = id.len().div_ceil(cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        id.shuffle(rng);
        ood.shuffle(rng);
        let mut sum = 0.0;
        for b in 0..batches {
            let ids = &id[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(id.len())];
            let oods = &ood[b * ood.len() / batches..(b + 1) * ood.len() / batches];
            let id_x: Vec<&[T]> = ids.iter().map(|&j| inputs[j].as_slice()).collect();
            let id_y: Vec<u32> = ids.iter().map(|&j| labels[j]).collect();
            let ood_x: Vec<&[T]> = oods.iter().map(|&j| inputs[j].as_slice()).collect();
            let (loss, grads) = member.loss(&id_x, &id_y, &ood_x)?;
            sum += loss.as_f64();
            member.sgd_step(&grads, lr)?;
        }
        losses.push(sum / batches as f64);
    }
    Ok(losses)
}

/// Fresh, untrained ensemble with the same structure and draws as
/// [`train_ddm`] uses before its first step.
pub fn init_ddm<T: Scalar>(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<DdmEnsemble<T>> {
    let zero = TrainConfig {
        epochs: 0,
        ..cfg.clone()
    };
    Ok(train_ddm(bundle, &zero)?.model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    SetNet = 1,
    Ddm = 2,
}

impl CheckpointKind {
    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Self::SetNet),
            2 => Some(Self::Ddm),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::SetNet => "setnet",
            Self::Ddm => "ddm",
        }
    }
}

/// Parameters, config and optional threshold of one trained component.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub theta: Option<f64>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn from_setnet<T: Scalar>(model: &SetNetModel<T>, config: &TrainConfig) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|(name, t)| (name.to_owned(), t.cast()))
            .collect();
        Self {
            kind: CheckpointKind::SetNet,
            config: config.clone(),
            theta: None,
            tensors,
        }
    }

    pub fn from_ddm<T: Scalar>(ddm: &DdmEnsemble<T>, config: &TrainConfig) -> Self {
        let ids = |v: &[u32]| -> Tensor<f64> {
            Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("non-empty ids")
        };
        let mut tensors = Vec::new();
        for (i, m) in ddm.members().iter().enumerate() {
            tensors.push((format!("ddm.{i}.classes"), ids(m.id_classes())));
            for (name, t) in m.params() {
                tensors.push((format!("ddm.{i}.{name}"), t.cast()));
            }
        }
        for (i, fold) in ddm.partition().folds().iter().enumerate() {
            tensors.push((format!("partition.{i}"), ids(fold)));
        }
        Self {
            kind: CheckpointKind::Ddm,
            config: config.clone(),
            theta: ddm.theta().map(|t| t.as_f64()),
            tensors,
        }
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Kind {
                expected: kind.name().into(),
                found: self.kind.name().into(),
            });
        }
        Ok(())
    }

    fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match self.tensors.iter().find(|(n, _)| n == name) {
            Some((_, t)) => Ok(t.cast()),
            None => bail!(Invariant, "checkpoint lacks tensor `{name}`"),
        }
    }

    fn ids(&self, name: &str) -> Result<Vec<u32>> {
        self.tensor::<f64>(name)?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
                    Ok(v as u32)
                } else {
                    bail!(Invariant, "`{name}` holds non-integer id {v}")
                }
            })
            .collect()
    }

    pub fn to_setnet<T: Scalar>(&self) -> Result<SetNetModel<T>> {
        self.expect_kind(CheckpointKind::SetNet)?;
        let attention = AttentionStack::new(
            self.tensor("attention.w1")?,
            self.tensor("attention.b1")?,
            self.tensor("attention.w2")?,
            self.tensor("attention.b2")?,
        )?;
        let projectors = ProjectorEnsemble::new(self.tensor("projectors.w")?, self.tensor("projectors.b")?)?;
        let model = SetNetModel::new(
            attention,
            projectors,
            T::lit(self.config.lambda),
            T::lit(self.config.diversity_sign),
        )?;
        if model.heads() != self.config.heads || model.attention.hidden() != self.config.attention_hidden {
            bail!(Invariant, "checkpoint tensors disagree with its config");
        }
        Ok(model)
    }

    pub fn to_ddm<T: Scalar>(&self) -> Result<DdmEnsemble<T>> {
        self.expect_kind(CheckpointKind::Ddm)?;
        let folds = (0..self.config.folds)
            .map(|i| self.ids(&format!("partition.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let partition = FoldPartition::new(folds)?;
        let members = (0..self.config.folds)
            .map(|i| {
                let p = |n: &str| self.tensor::<T>(&format!("ddm.{i}.{n}"));
                let m = SubDdm::new(i, self.ids(&format!("ddm.{i}.classes"))?, p("w1")?, p("b1")?, p("w2")?, p("b2")?)?;
                if m.hidden() != self.config.ddm_hidden {
                    bail!(Invariant, "checkpoint tensors disagree with its config");
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ddm = DdmEnsemble::new(members, partition)?;
        if let Some(theta) = self.theta {
            ddm.set_theta(T::lit(theta))?;
        }
        Ok(ddm)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        match self.theta {
            Some(t) => {
                out.push(1);
                out.extend_from_slice(&t.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected SDNC".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let tag = r.u32()?;
        let Some(kind) = CheckpointKind::from_tag(tag) else {
            return Err(Error::Format {
                offset: 8,
                message: format!("unknown checkpoint kind {tag}"),
            });
        };
        let len = r.u32()? as usize;
        let at = r.offset();
        let config: TrainConfig = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            offset: at as u64,
            message: format!("config: {e}"),
        })?;
        config.validate()?;
        let theta = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            other => return Err(r.error(&format!("theta flag {other} is not 0 or 1"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = r.u32s(ndim)?.into_iter().map(|d| d as usize).collect();
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error("size overflow"))?;
            let data = r.f64s(numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes after tensors"));
        }
        Ok(Self {
            kind,
            config,
            theta,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SyntheticSpec};
    use crate::id3m::Domain;
    use rand::Rng;

    fn small_bundle(seed: u64) -> DatasetBundle {
        gen_synthetic(&SyntheticSpec {
            seen_classes: 4,
            unseen_classes: 2,
            samples_per_class: 10,
            height: 3,
            width: 3,
            channels: 8,
            semantic_dim: 8,
            attributes_per_class: 3,
            noise: 0.1,
            jitter: true,
            seed,
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            heads: 2,
            attention_hidden: 4,
            folds: 2,
            ddm_hidden: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let b = small_bundle(1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        };
        let trained = train_setnet::<f64>(&b, &cfg).unwrap();
        assert_eq!(trained.model, init_setnet(&b, &cfg).unwrap());
        assert_eq!(trained.epoch_losses.len(), 3);

        let ddm = train_ddm::<f64>(&b, &cfg).unwrap().model;
        assert_eq!(ddm, init_ddm(&b, &cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let b = small_bundle(2);
        let a = train_setnet::<f64>(&b, &small_cfg()).unwrap();
        let c = train_setnet::<f64>(&b, &small_cfg()).unwrap();
        assert_eq!(a.model, c.model);
        assert_eq!(a.epoch_losses, c.epoch_losses);
        let other = TrainConfig {
            seed: 9,
            ..small_cfg()
        };
        assert_ne!(train_setnet::<f64>(&b, &other).unwrap().model, a.model);
        let d1 = train_ddm::<f64>(&b, &small_cfg()).unwrap().model;
        let d2 = train_ddm::<f64>(&b, &small_cfg()).unwrap().model;
        assert_eq!(d1, d2);
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let b = small_bundle(3);
        let model = init_setnet::<f64>(&b, &small_cfg()).unwrap();
        let table = b.seen_table().unwrap();
        let idx = b.train_indices();
        let maps = b.feature_maps::<f64>(&idx[..5]).unwrap();
        let batch: Vec<(&FeatureMap, u32)> = maps.iter().zip(&idx[..5]).map(|(m, &i)| (m, b.label(i))).collect();
        let (loss, grads) = setnet_batch_gradient(&model, &batch, &table).unwrap();
        let per: Vec<(f64, GradientSet)> = batch
            .iter()
            .map(|&(m, y)| model.total_loss(m, y, &table).unwrap())
            .collect();
        let mean_loss = per.iter().map(|p| p.0).sum::<f64>() / 5.0;
        assert!((loss - mean_loss).abs() <= 1e-10);
        for (name, g) in grads.iter() {
            for (k, &v) in g.data().iter().enumerate() {
                let oracle = per.iter().map(|p| p.1.get(name).unwrap().data()[k]).sum::<f64>() / 5.0;
                assert!((v - oracle).abs() <= 1e-10, "{name}[{k}]");
            }
        }
    }

    #[test]
    fn small_step_decreases_sample_loss() {
        let b = small_bundle(4);
        let table = b.seen_table().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = b.train_indices();
        for s in 0..10 {
            let cfg = TrainConfig { seed: s, ..small_cfg() };
            let model = init_setnet::<f64>(&b, &cfg).unwrap();
            let i = train[rng.random_range(0..train.len())];
            let m = b.feature_map(i).unwrap();
            let (before, g) = model.total_loss(&m, b.label(i), &table).unwrap();
            let mut stepped = model.clone();
            stepped.sgd_step(&g, 1e-5).unwrap();
            let (after, _) = stepped.total_loss(&m, b.label(i), &table).unwrap();
            assert!(after < before, "{after} >= {before}");
        }
    }

    #[test]
    fn default_bundle_training_makes_progress() {
        let b = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 40,
            ..TrainConfig::default()
        };
        let trained = train_setnet::<f64>(&b, &cfg).unwrap();
        assert_eq!(trained.epoch_losses.len(), 40);
        assert!(trained.epoch_losses[39] < trained.epoch_losses[0]);
    }

    #[test]
    fn ddm_structure_and_sanity() {
        let b = small_bundle(6);
        let ddm = train_ddm::<f64>(&b, &small_cfg()).unwrap().model;
        assert_eq!(ddm.members().len(), 2);
        assert!(ddm.members().iter().all(|m| m.num_outputs() == 2));
        assert!(ddm.theta().is_none());

        let big = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let ddm = train_ddm::<f64>(&big, &TrainConfig::default()).unwrap().model;
        let (fit, _) = calibration_split(&big, 0);
        let x = pooled_samples::<f64>(&big, &fit).unwrap();
        for (i, m) in ddm.members().iter().enumerate() {
            let (mut hit, mut n) = (0, 0);
            for (xi, &j) in x.iter().zip(&fit) {
                let y = big.label(j);
                if ddm.partition().fold_of(y) == Some(i) {
                    continue;
                }
                let p = m.predict_proba(xi).unwrap();
                let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                hit += (m.id_classes()[best] == y) as usize;
                n += 1;
            }
            let acc = hit as f64 / n as f64;
            assert!(acc > 1.0 / m.num_outputs() as f64, "member {i}: {acc}");
        }
    }

    #[test]
    fn calibration_split_is_disjoint_and_seen_only() {
        let b = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let (fit, calib) = calibration_split(&b, 3);
        assert_eq!(fit.len() + calib.len(), b.train_indices().len());
        assert_eq!(calib.len(), 50);
        assert!(calib.iter().all(|i| !fit.contains(i)));
        assert_eq!(calibration_split(&b, 3), (fit, calib));
    }

    #[test]
    fn checkpoint_round_trips() {
        let b = small_bundle(7);
        let cfg = small_cfg();
        let model = train_setnet::<f64>(&b, &cfg).unwrap().model;
        let ck = Checkpoint::from_setnet(&model, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sdnc");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.to_setnet::<f64>().unwrap(), model);
        assert!(matches!(back.to_ddm::<f64>(), Err(Error::Kind { .. })));

        let mut ddm = train_ddm::<f64>(&b, &cfg).unwrap().model;
        ddm.set_theta(0.123456789012345).unwrap();
        let ck = Checkpoint::from_ddm(&ddm, &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.theta, Some(0.123456789012345));
        assert_eq!(back.to_ddm::<f64>().unwrap(), ddm);
        assert!(matches!(back.to_setnet::<f64>(), Err(Error::Kind { .. })));

        ddm.set_theta(f64::NEG_INFINITY).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_ddm(&ddm, &cfg).to_bytes()).unwrap();
        let restored = back.to_ddm::<f64>().unwrap();
        assert_eq!(restored.theta(), Some(f64::NEG_INFINITY));
        assert_eq!(restored.detect(&[0.0; 8]).unwrap(), Domain::Seen);
    }

    #[test]
    fn checkpoint_format_errors() {
        let b = small_bundle(8);
        let cfg = small_cfg();
        let bytes = Checkpoint::from_setnet(&init_setnet::<f64>(&b, &cfg).unwrap(), &cfg).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 8, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { folds: 1, ..TrainConfig::default() },
            TrainConfig { diversity_sign: 0.5, ..TrainConfig::default() },
            TrainConfig { heads: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let with_extra = json.replacen('{', "{\"momentum\":0.9,", 1);
        assert!(serde_json::from_str::<TrainConfig>(&with_extra).is_err());
    }
}

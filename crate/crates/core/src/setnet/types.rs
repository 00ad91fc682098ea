use rand::Rng;

use crate::diffmath::{Parameterized, Tensor};
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Backbone output for one image: an `[H, W, C]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f64>(Tensor<T>);

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.ndim() != 3 {
            bail!(Shape, "feature map must be [H,W,C], got {:?}", tensor.shape());
        }
        tensor.ensure_finite("feature map")?;
        Ok(Self(tensor))
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Tensor::new(vec![h, w, c], data)?)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Unit-norm class-level semantic vectors, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable<T = f64> {
    class_ids: Vec<u32>,
    vectors: Tensor<T>,
}

impl<T: Scalar> SemanticTable<T> {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    /// Wraps already-normalized rows; fails if any row norm is off by more than
    /// [`Self::NORM_TOLERANCE`] or ids repeat.
    pub fn new(class_ids: Vec<u32>, vectors: Tensor<T>) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.shape()[0] != class_ids.len() {
            bail!(
                Shape,
                "semantic table with {} ids and vectors {:?}",
                class_ids.len(),
                vectors.shape()
            );
        }
        vectors.ensure_finite("semantic table")?;
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            bail!(Invariant, "duplicate class ids in semantic table");
        }
        for (i, id) in class_ids.iter().enumerate() {
            let norm = vectors.row(i).iter().map(|v| *v * *v).sum::<T>().sqrt();
            if (norm.as_f64() - 1.0).abs() > Self::NORM_TOLERANCE {
                bail!(Invariant, "semantic vector of class {id} has norm {norm}");
            }
        }
        Ok(Self { class_ids, vectors })
    }

    /// Normalizes each row to unit length first.
    pub fn from_raw(class_ids: Vec<u32>, mut vectors: Tensor<T>) -> Result<Self> {
        if vectors.ndim() != 2 {
            bail!(Shape, "semantic vectors must be [D,S], got {:?}", vectors.shape());
        }
        for i in 0..vectors.shape()[0] {
            let row = vectors.row_mut(i);
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                bail!(InvalidInput, "semantic vector {i} has zero norm");
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(class_ids, vectors)
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn vector(&self, row: usize) -> &[T] {
        self.vectors.row(row)
    }

    /// Restricts the table to `ids`, in the order given.
    pub fn subset(&self, ids: &[u32]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            let Some(row) = self.index_of(id) else {
                bail!(Index, "class {id} not in semantic table");
            };
            data.extend_from_slice(self.vector(row));
        }
        if ids.is_empty() {
            bail!(InvalidInput, "empty class subset");
        }
        Self::new(ids.to_vec(), Tensor::new(vec![ids.len(), self.dim()], data)?)
    }

    pub fn cast<U: Scalar>(&self) -> SemanticTable<U> {
        SemanticTable {
            class_ids: self.class_ids.clone(),
            vectors: self.vectors.cast(),
        }
    }
}

/// Two-layer 1x1 convolutional module producing `K` attention logit maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T = f64> {
    /// `[C, C_h]`
    pub w1: Tensor<T>,
    /// `[C_h]`
    pub b1: Tensor<T>,
    /// `[C_h, K]`
    pub w2: Tensor<T>,
    /// `[K]`
    pub b2: Tensor<T>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new(w1: Tensor<T>, b1: Tensor<T>, w2: Tensor<T>, b2: Tensor<T>) -> Result<Self> {
        if w1.ndim() != 2 || w2.ndim() != 2 {
            bail!(Shape, "attention weights must be matrices");
        }
        let (ch, k) = (w1.shape()[1], w2.shape()[1]);
        b1.expect_shape(&[ch], "attention b1")?;
        w2.expect_shape(&[ch, k], "attention w2")?;
        b2.expect_shape(&[k], "attention b2")?;
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn init<R: Rng>(channels: usize, hidden: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || hidden == 0 || heads == 0 {
            bail!(InvalidInput, "attention dims must be positive (C={channels}, C_h={hidden}, K={heads})");
        }
        Ok(Self {
            w1: uniform_fan_in(&[channels, hidden], channels, rng),
            b1: uniform_fan_in(&[hidden], channels, rng),
            w2: uniform_fan_in(&[hidden, heads], hidden, rng),
            b2: uniform_fan_in(&[heads], hidden, rng),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn heads(&self) -> usize {
        self.w2.shape()[1]
    }
}

/// `K` independent affine visual-to-semantic maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorEnsemble<T = f64> {
    /// `[K, V, S]`
    pub w: Tensor<T>,
    /// `[K, S]`
    pub b: Tensor<T>,
}

impl<T: Scalar> ProjectorEnsemble<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.ndim() != 3 {
            bail!(Shape, "projector weights must be [K,V,S], got {:?}", w.shape());
        }
        b.expect_shape(&[w.shape()[0], w.shape()[2]], "projector bias")?;
        Ok(Self { w, b })
    }

    pub fn init<R: Rng>(heads: usize, visual: usize, semantic: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || visual == 0 || semantic == 0 {
            bail!(InvalidInput, "projector dims must be positive");
        }
        Ok(Self {
            w: uniform_fan_in(&[heads, visual, semantic], visual, rng),
            b: uniform_fan_in(&[heads, semantic], visual, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn visual_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn semantic_dim(&self) -> usize {
        self.w.shape()[2]
    }

    /// Weights of projector `k` as a row-major `[V, S]` slice.
    pub fn weights(&self, k: usize) -> &[T] {
        self.w.row(k)
    }

    pub fn bias(&self, k: usize) -> &[T] {
        self.b.row(k)
    }
}

/// Attention stack, projector ensemble and the diversity weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct SetNetModel<T = f64> {
    pub attention: AttentionStack<T>,
    pub projectors: ProjectorEnsemble<T>,
    /// Diversity weight, `>= 0`.
    pub lambda: T,
    /// `-1` rewards diverse attention maps, `+1` penalizes them.
    pub diversity_sign: T,
}

impl<T: Scalar> SetNetModel<T> {
    pub fn new(
        attention: AttentionStack<T>,
        projectors: ProjectorEnsemble<T>,
        lambda: T,
        diversity_sign: T,
    ) -> Result<Self> {
        if attention.heads() != projectors.heads() {
            bail!(
                Shape,
                "attention has {} heads but {} projectors",
                attention.heads(),
                projectors.heads()
            );
        }
        if attention.in_channels() != projectors.visual_dim() {
            bail!(
                Shape,
                "attention reads {} channels but projectors take {}",
                attention.in_channels(),
                projectors.visual_dim()
            );
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            bail!(InvalidInput, "lambda must be finite and >= 0, got {lambda}");
        }
        if diversity_sign.abs() != T::one() {
            bail!(InvalidInput, "diversity sign must be +1 or -1, got {diversity_sign}");
        }
        Ok(Self {
            attention,
            projectors,
            lambda,
            diversity_sign,
        })
    }

    /// Fresh model with weights uniform in `±1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        channels: usize,
        hidden: usize,
        heads: usize,
        semantic_dim: usize,
        lambda: T,
        diversity_sign: T,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = AttentionStack::init(channels, hidden, heads, rng)?;
        let projectors = ProjectorEnsemble::init(heads, channels, semantic_dim, rng)?;
        Self::new(attention, projectors, lambda, diversity_sign)
    }

    pub fn heads(&self) -> usize {
        self.attention.heads()
    }

    pub fn channels(&self) -> usize {
        self.attention.in_channels()
    }

    pub fn semantic_dim(&self) -> usize {
        self.projectors.semantic_dim()
    }
}

impl<T: Scalar> Parameterized<T> for SetNetModel<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("attention.w1", &self.attention.w1),
            ("attention.b1", &self.attention.b1),
            ("attention.w2", &self.attention.w2),
            ("attention.b2", &self.attention.b2),
            ("projectors.w", &self.projectors.w),
            ("projectors.b", &self.projectors.b),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("attention.w1", &mut self.attention.w1),
            ("attention.b1", &mut self.attention.b1),
            ("attention.w2", &mut self.attention.w2),
            ("attention.b2", &mut self.attention.b2),
            ("projectors.w", &mut self.projectors.w),
            ("projectors.b", &mut self.projectors.b),
        ]
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn uniform_fan_in<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

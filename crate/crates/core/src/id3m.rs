//! Unseen-class detection from the inner disagreement of an ensemble of
//! sub-detectors.
//!
//! The seen classes are split into `I` folds. Sub-detector `i` is a classifier
//! over the classes of every fold except `i`, trained with cross-entropy on
//! those classes and pushed towards a uniform output on fold `i`. On a seen
//! input, the one sub-detector that held out its class is much less confident
//! than the rest; on an unseen input all of them are about equally unsure. The
//! disagreement degree measures that gap, and inputs whose degree falls below
//! a threshold calibrated on seen data are flagged unseen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{
    cross_entropy_with_grad, entropy_unchecked, kl_to_uniform_from_logits, softmax, spatial_mean,
    GradientSet, Parameterized, Tensor,
};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::setnet::{uniform_fan_in, FeatureMap};

/// Disjoint folds of seen class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    folds: Vec<Vec<u32>>,
}

impl FoldPartition {
    pub fn new(folds: Vec<Vec<u32>>) -> Result<Self> {
        if folds.len() < 2 {
            bail!(InvalidInput, "need at least 2 folds, got {}", folds.len());
        }
        let mut all: Vec<u32> = folds.iter().flatten().copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            bail!(Invariant, "folds overlap");
        }
        let (min, max) = folds
            .iter()
            .map(Vec::len)
            .fold((usize::MAX, 0), |(lo, hi), l| (lo.min(l), hi.max(l)));
        if min == 0 || max - min > 1 {
            bail!(Invariant, "unbalanced fold sizes {min}..{max}");
        }
        Ok(Self { folds })
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, i: usize) -> &[u32] {
        &self.folds[i]
    }

    pub fn folds(&self) -> &[Vec<u32>] {
        &self.folds
    }

    /// Classes of every fold except `i`, sorted ascending.
    pub fn in_distribution(&self, i: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn fold_of(&self, class_id: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&class_id))
    }
}

/// Shuffles `seen` with a ChaCha8 stream seeded by `seed`, then deals the
/// classes round-robin into `folds` folds.
pub fn partition_classes(seen: &[u32], folds: usize, seed: u64) -> Result<FoldPartition> {
    if folds < 2 {
        bail!(InvalidInput, "need at least 2 folds to hold one out, got {folds}");
    }
    if folds > seen.len() {
        bail!(InvalidInput, "{folds} folds for only {} seen classes", seen.len());
    }
    let mut order = seen.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (j, id) in order.into_iter().enumerate() {
        out[j % folds].push(id);
    }
    FoldPartition::new(out)
}

/// One sub-detector: pooled feature -> ReLU hidden layer -> logits over its
/// in-distribution classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubDdm<T = f64> {
    pub fold: usize,
    id_classes: Vec<u32>,
    /// `[C, hidden]`
    pub w1: Tensor<T>,
    /// `[hidden]`
    pub b1: Tensor<T>,
    /// `[hidden, n_id]`
    pub w2: Tensor<T>,
    /// `[n_id]`
    pub b2: Tensor<T>,
}

impl<T: Scalar> SubDdm<T> {
    pub fn new(
        fold: usize,
        id_classes: Vec<u32>,
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    ) -> Result<Self> {
        if id_classes.is_empty() {
            bail!(InvalidInput, "sub-detector without in-distribution classes");
        }
        if w1.ndim() != 2 {
            bail!(Shape, "sub-detector w1 must be a matrix");
        }
        let hidden = w1.shape()[1];
        b1.expect_shape(&[hidden], "sub-detector b1")?;
        w2.expect_shape(&[hidden, id_classes.len()], "sub-detector w2")?;
        b2.expect_shape(&[id_classes.len()], "sub-detector b2")?;
        Ok(Self {
            fold,
            id_classes,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn init<R: Rng>(
        fold: usize,
        id_classes: Vec<u32>,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            bail!(InvalidInput, "sub-detector dims must be positive");
        }
        let n = id_classes.len();
        let w1 = uniform_fan_in(&[input_dim, hidden], input_dim, rng);
        let b1 = uniform_fan_in(&[hidden], input_dim, rng);
        let w2 = uniform_fan_in(&[hidden, n.max(1)], hidden, rng);
        let b2 = uniform_fan_in(&[n.max(1)], hidden, rng);
        Self::new(fold, id_classes, w1, b1, w2, b2)
    }

    pub fn id_classes(&self) -> &[u32] {
        &self.id_classes
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn num_outputs(&self) -> usize {
        self.id_classes.len()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            bail!(
                Shape,
                "sub-detector expects {} features, got {}",
                self.input_dim(),
                x.len()
            );
        }
        Ok(())
    }

    /// Returns `(pre-activation, hidden, logits)`.
    fn forward(&self, x: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (c, h, n) = (self.input_dim(), self.hidden(), self.num_outputs());
        let mut pre = self.b1.data().to_vec();
        for i in 0..c {
            let xi = x[i];
            for (p, &w) in pre.iter_mut().zip(&self.w1.data()[i * h..(i + 1) * h]) {
                *p += xi * w;
            }
        }
        let hid: Vec<T> = pre.iter().map(|v| v.max(T::zero())).collect();
        let mut logits = self.b2.data().to_vec();
        for j in 0..h {
            let hj = hid[j];
            if hj == T::zero() {
                continue;
            }
            for (l, &w) in logits.iter_mut().zip(&self.w2.data()[j * n..(j + 1) * n]) {
                *l += hj * w;
            }
        }
        (pre, hid, logits)
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.forward(x).2)
    }

    /// Smallest distance of a hidden pre-activation from the ReLU kink.
    pub fn relu_margin(&self, x: &[T]) -> Result<T> {
        self.check_input(x)?;
        Ok(self.forward(x).0.iter().fold(T::infinity(), |acc, v| acc.min(v.abs())))
    }

    /// Softmax output over the in-distribution classes.
    pub fn predict_proba(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// `max p - H(p)` of the softmax output (entropy in nats).
    pub fn confidence(&self, x: &[T]) -> Result<T> {
        Ok(confidence_of(&self.predict_proba(x)?))
    }

    /// Accumulates `scale * d(loss)/d(params)` given `d(loss)/d(logits)`.
    fn backprop(&self, x: &[T], pre: &[T], hid: &[T], g_logits: &[T], scale: T, grads: &mut SubDdmGrads<T>) {
        let (c, h, n) = (self.input_dim(), self.hidden(), self.num_outputs());
        let g: Vec<T> = g_logits.iter().map(|&v| v * scale).collect();
        for (acc, &gv) in grads.b2.iter_mut().zip(&g) {
            *acc += gv;
        }
        let mut g_pre = vec![T::zero(); h];
        for j in 0..h {
            let row = &self.w2.data()[j * n..(j + 1) * n];
            let gw = &mut grads.w2[j * n..(j + 1) * n];
            let mut back = T::zero();
            for k in 0..n {
                gw[k] += hid[j] * g[k];
                back += row[k] * g[k];
            }
            if pre[j] > T::zero() {
                g_pre[j] = back;
            }
        }
        for (acc, &gv) in grads.b1.iter_mut().zip(&g_pre) {
            *acc += gv;
        }
        for i in 0..c {
            let xi = x[i];
            for (acc, &gv) in grads.w1[i * h..(i + 1) * h].iter_mut().zip(&g_pre) {
                *acc += xi * gv;
            }
        }
    }

    /// Mean cross-entropy over the in-distribution batch plus mean KL from the
    /// softmax output to the uniform distribution over this detector's outputs
    /// on the held-out batch. An empty batch contributes nothing.
    pub fn loss(&self, id_x: &[&[T]], id_y: &[u32], ood_x: &[&[T]]) -> Result<(T, GradientSet<T>)> {
        if id_x.len() != id_y.len() {
            bail!(Shape, "{} inputs for {} labels", id_x.len(), id_y.len());
        }
        let mut grads = SubDdmGrads::zeros(self);
        let mut total = T::zero();
        if !id_x.is_empty() {
            let scale = T::one() / T::from_usize_lossy(id_x.len());
            let mut sum = T::zero();
            for (&x, &y) in id_x.iter().zip(id_y) {
                let Some(target) = self.id_classes.iter().position(|&c| c == y) else {
                    bail!(Index, "class {y} is not in-distribution for fold {}", self.fold);
                };
                self.check_input(x)?;
                let (pre, hid, logits) = self.forward(x);
                let (ce, g) = cross_entropy_with_grad(&logits, target)?;
                sum += ce;
                self.backprop(x, &pre, &hid, &g, scale, &mut grads);
            }
            total += sum * scale;
        }
        if !ood_x.is_empty() {
            let scale = T::one() / T::from_usize_lossy(ood_x.len());
            let mut sum = T::zero();
            for &x in ood_x {
                self.check_input(x)?;
                let (pre, hid, logits) = self.forward(x);
                let (kl, g) = kl_to_uniform_from_logits(&logits)?;
                sum += kl;
                self.backprop(x, &pre, &hid, &g, scale, &mut grads);
            }
            total += sum * scale;
        }
        Ok((total, grads.into_set(self)))
    }
}

struct SubDdmGrads<T> {
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
}

impl<T: Scalar> SubDdmGrads<T> {
    fn zeros(d: &SubDdm<T>) -> Self {
        Self {
            w1: vec![T::zero(); d.w1.len()],
            b1: vec![T::zero(); d.b1.len()],
            w2: vec![T::zero(); d.w2.len()],
            b2: vec![T::zero(); d.b2.len()],
        }
    }

    fn into_set(self, d: &SubDdm<T>) -> GradientSet<T> {
        let mut g = GradientSet::new();
        let mk = |shape: &[usize], v: Vec<T>| Tensor::new(shape.to_vec(), v).expect("shape");
        g.insert("w1", mk(d.w1.shape(), self.w1));
        g.insert("b1", mk(d.b1.shape(), self.b1));
        g.insert("w2", mk(d.w2.shape(), self.w2));
        g.insert("b2", mk(d.b2.shape(), self.b2));
        g
    }
}

impl<T: Scalar> Parameterized<T> for SubDdm<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// `max p - H(p)` for a probability vector.
pub fn confidence_of<T: Scalar>(p: &[T]) -> T {
    let max = p.iter().copied().fold(T::neg_infinity(), T::max);
    max - entropy_unchecked(p)
}

/// Mean of the `I - 1` largest confidences minus the smallest one.
///
/// Sorting is stable on detector index, so equal scores keep their order.
pub fn disagreement<T: Scalar>(scores: &[T]) -> Result<T> {
    if scores.len() < 2 {
        bail!(InvalidInput, "disagreement needs at least 2 scores, got {}", scores.len());
    }
    if scores.iter().any(|v| !v.is_finite()) {
        bail!(Numerical, "non-finite confidence score");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let (top, last) = sorted.split_at(sorted.len() - 1);
    // mean of the gaps equals mean(top) - min, and is exactly 0 for equal scores
    let gaps = top.iter().map(|&p| p - last[0]).sum::<T>();
    Ok(gaps / T::from_usize_lossy(top.len()))
}

/// Threshold such that the strict rule `d < theta` flags `floor(n * fnr)` of
/// the `n` calibration degrees (when they are distinct): the
/// `(floor(n * fnr) + 1)`-th smallest degree.
pub fn calibrate_theta<T: Scalar>(degrees: &[T], target_fnr: f64) -> Result<T> {
    if degrees.is_empty() {
        bail!(InvalidInput, "no calibration degrees");
    }
    if !(target_fnr > 0.0 && target_fnr < 1.0) {
        bail!(InvalidInput, "target FNR {target_fnr} outside (0, 1)");
    }
    if degrees.iter().any(|d| !d.is_finite()) {
        bail!(Numerical, "non-finite calibration degree");
    }
    let mut sorted = degrees.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(sorted[flag_count(sorted.len(), target_fnr)])
}

/// `floor(n * fnr)`, robust to the representation error of decimal rates.
pub fn flag_count(n: usize, fnr: f64) -> usize {
    ((n as f64 * fnr) + 1e-9).floor() as usize
}

/// Seen/unseen decision for one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Seen,
    Unseen,
}

/// `I` sub-detectors and the calibrated threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DdmEnsemble<T = f64> {
    members: Vec<SubDdm<T>>,
    partition: FoldPartition,
    theta: Option<T>,
}

impl<T: Scalar> DdmEnsemble<T> {
    pub fn new(members: Vec<SubDdm<T>>, partition: FoldPartition) -> Result<Self> {
        if members.len() != partition.num_folds() {
            bail!(
                InvalidInput,
                "{} sub-detectors for {} folds",
                members.len(),
                partition.num_folds()
            );
        }
        for (i, m) in members.iter().enumerate() {
            if m.fold != i || m.id_classes() != partition.in_distribution(i).as_slice() {
                bail!(Invariant, "sub-detector {i} does not match fold {i}");
            }
        }
        if members.windows(2).any(|w| w[0].input_dim() != w[1].input_dim()) {
            bail!(Shape, "sub-detectors disagree on input dimension");
        }
        Ok(Self {
            members,
            partition,
            theta: None,
        })
    }

    pub fn members(&self) -> &[SubDdm<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [SubDdm<T>] {
        &mut self.members
    }

    pub fn partition(&self) -> &FoldPartition {
        &self.partition
    }

    pub fn theta(&self) -> Option<T> {
        self.theta
    }

    /// Sets the threshold. `-inf` is accepted and flags nothing.
    pub fn set_theta(&mut self, theta: T) -> Result<()> {
        if theta.is_nan() || theta == T::infinity() {
            bail!(InvalidInput, "threshold must be finite or -inf, got {theta}");
        }
        self.theta = Some(theta);
        Ok(())
    }

    pub fn clear_theta(&mut self) {
        self.theta = None;
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Per-member confidence on a pooled feature vector.
    pub fn confidences(&self, x: &[T]) -> Result<Vec<T>> {
        self.members.iter().map(|m| m.confidence(x)).collect()
    }

    pub fn degree(&self, x: &[T]) -> Result<T> {
        disagreement(&self.confidences(x)?)
    }

    pub fn degree_of_map(&self, m: &FeatureMap<T>) -> Result<T> {
        self.degree(&pooled_features(m)?)
    }

    /// Calibrates on the given degrees and stores the threshold.
    pub fn calibrate(&mut self, degrees: &[T], target_fnr: f64) -> Result<T> {
        let theta = calibrate_theta(degrees, target_fnr)?;
        self.theta = Some(theta);
        Ok(theta)
    }

    /// `Unseen` iff the degree is strictly below the threshold.
    pub fn detect(&self, x: &[T]) -> Result<Domain> {
        let Some(theta) = self.theta else {
            bail!(State, "detector has no calibrated threshold");
        };
        Ok(if self.degree(x)? < theta {
            Domain::Unseen
        } else {
            Domain::Seen
        })
    }

    pub fn detect_map(&self, m: &FeatureMap<T>) -> Result<Domain> {
        self.detect(&pooled_features(m)?)
    }
}

/// Spatial mean of a feature map, the sub-detectors' input.
pub fn pooled_features<T: Scalar>(m: &FeatureMap<T>) -> Result<Vec<T>> {
    Ok(spatial_mean(m.tensor())?.into_data())
}

//! Forward pass, objective and gradients of the attention + projector head.

use super::types::{FeatureMap, SemanticTable, SetNetModel};
use crate::diffmath::{
    conv1x1, conv1x1_backward, cross_entropy_with_grad, gemm_acc, hellinger_sq_grad,
    hellinger_sq_unchecked, relu, relu_backward, spatial_softmax, spatial_softmax_backward,
    GradientSet, Tensor,
};
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadForward<T = f64> {
    /// `[H, W, C_h]` pre-activation of the first layer.
    hidden_pre: Tensor<T>,
    /// `[H, W, C_h]`
    hidden: Tensor<T>,
    /// `[K, H, W]` attention maps, each summing to one.
    pub attention: Tensor<T>,
    /// `[K, V]` attentive features.
    pub features: Tensor<T>,
    /// `[K, S]` projected features.
    pub projected: Tensor<T>,
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T = f64> {
    pub total: T,
    pub classification: T,
    pub diversity: T,
}

impl<T: Scalar> SetNetModel<T> {
    fn check_input(&self, m: &FeatureMap<T>) -> Result<()> {
        if m.channels() != self.channels() {
            bail!(
                Shape,
                "feature map has {} channels, model expects {}",
                m.channels(),
                self.channels()
            );
        }
        Ok(())
    }

    fn check_table(&self, table: &SemanticTable<T>) -> Result<()> {
        if table.dim() != self.semantic_dim() {
            bail!(
                Shape,
                "semantic table has dim {}, projectors emit {}",
                table.dim(),
                self.semantic_dim()
            );
        }
        Ok(())
    }

    /// Attention logits `[K, H, W]`: conv, ReLU, conv, then heads moved to the
    /// leading axis.
    ///
    /// `b2` adds the same constant to every position of a head, which the
    /// spatial softmax removes, so it is left out here and its gradient is zero.
    fn attention_logits(&self, m: &FeatureMap<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.check_input(m)?;
        let a = &self.attention;
        let hidden_pre = conv1x1(m.tensor(), &a.w1, &a.b1)?;
        let hidden = relu(&hidden_pre);
        let z = conv1x1(&hidden, &a.w2, &Tensor::zeros(a.b2.shape()))?;
        let (h, w, k) = (m.height(), m.width(), self.heads());
        let t = h * w;
        let logits = Tensor::from_fn(&[k, h, w], |i| z.data()[(i % t) * k + i / t]);
        Ok((hidden_pre, hidden, logits))
    }

    /// Smallest distance of a first-layer pre-activation from the ReLU kink.
    pub fn relu_margin(&self, m: &FeatureMap<T>) -> Result<T> {
        let (pre, _, _) = self.attention_logits(m)?;
        Ok(pre.data().iter().fold(T::infinity(), |acc, v| acc.min(v.abs())))
    }

    /// The `K` spatial attention maps for a feature map.
    pub fn attention_maps(&self, m: &FeatureMap<T>) -> Result<Tensor<T>> {
        let (_, _, logits) = self.attention_logits(m)?;
        spatial_softmax(&logits)
    }

    pub fn forward(&self, m: &FeatureMap<T>) -> Result<HeadForward<T>> {
        let (hidden_pre, hidden, logits) = self.attention_logits(m)?;
        let attention = spatial_softmax(&logits)?;
        let features = attentive_features(m, &attention)?;
        let projected = self.project(&features)?;
        Ok(HeadForward {
            hidden_pre,
            hidden,
            attention,
            features,
            projected,
        })
    }

    /// `Q_k(m_k)` for every head: `[K, V] -> [K, S]`.
    pub fn project(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, v, s) = (self.heads(), self.channels(), self.semantic_dim());
        features.expect_shape(&[k, v], "attentive features")?;
        let mut out = self.projectors.b.clone();
        for head in 0..k {
            gemm_acc(
                features.row(head),
                self.projectors.weights(head),
                out.row_mut(head),
                1,
                v,
                s,
            );
        }
        Ok(out)
    }

    /// Class logits `(1/K) sum_k Q_k(m_k) . e_d` for every row `d` of `table`.
    pub fn ensemble_logits(&self, features: &Tensor<T>, table: &SemanticTable<T>) -> Result<Vec<T>> {
        self.check_table(table)?;
        let projected = self.project(features)?;
        let mut scores = summed_scores(&projected, table);
        let inv_k = T::one() / T::from_usize_lossy(self.heads());
        scores.iter_mut().for_each(|v| *v *= inv_k);
        Ok(scores)
    }

    /// Loss terms and gradients for one labelled sample.
    ///
    /// `table` is the label space of the softmax; `label` is a class id in it.
    pub fn loss_terms(
        &self,
        m: &FeatureMap<T>,
        label: u32,
        table: &SemanticTable<T>,
    ) -> Result<(LossTerms<T>, GradientSet<T>)> {
        self.check_table(table)?;
        let Some(target) = table.index_of(label) else {
            bail!(Index, "class {label} not in the training label space");
        };
        let fw = self.forward(m)?;
        let (k, v, s) = (self.heads(), self.channels(), self.semantic_dim());
        let inv_k = T::one() / T::from_usize_lossy(k);

        let mut logits = summed_scores(&fw.projected, table);
        logits.iter_mut().for_each(|z| *z *= inv_k);
        let (cls, g_logits) = cross_entropy_with_grad(&logits, target)?;
        let div = diversity_loss(&fw.attention)?;
        let weight = self.diversity_sign * self.lambda;

        // d/d projected[k, s] = (1/K) sum_d g_logits[d] e_d[s]
        let mut g_proj_row = vec![T::zero(); s];
        for (d, &g) in g_logits.iter().enumerate() {
            for (acc, &e) in g_proj_row.iter_mut().zip(table.vector(d)) {
                *acc += g * e * inv_k;
            }
        }

        let mut g_pw = Tensor::zeros(&[k, v, s]);
        let mut g_pb = Tensor::zeros(&[k, s]);
        let mut g_feat = Tensor::zeros(&[k, v]);
        for head in 0..k {
            g_pb.row_mut(head).copy_from_slice(&g_proj_row);
            let feat = fw.features.row(head);
            let w = self.projectors.weights(head);
            let gw = g_pw.row_mut(head);
            for c in 0..v {
                for j in 0..s {
                    gw[c * s + j] = feat[c] * g_proj_row[j];
                }
            }
            let gf = g_feat.row_mut(head);
            for c in 0..v {
                gf[c] = (0..s).map(|j| w[c * s + j] * g_proj_row[j]).sum();
            }
        }

        // attention gradient: pooling term plus weighted diversity term
        let mt = m.tensor();
        let t = m.cells();
        let mut g_attn = diversity_loss_grad(&fw.attention);
        g_attn.scale_in_place(weight);
        for head in 0..k {
            let gf = g_feat.row(head);
            let ga = g_attn.row_mut(head);
            for (cell, g) in ga.iter_mut().enumerate().take(t) {
                let x = &mt.data()[cell * v..(cell + 1) * v];
                *g += x.iter().zip(gf).map(|(&a, &b)| a * b).sum::<T>();
            }
        }

        let g_logit_maps = spatial_softmax_backward(&fw.attention, &g_attn);
        let (h, wd) = (m.height(), m.width());
        let g_z = Tensor::from_fn(&[h, wd, k], |i| g_logit_maps.data()[(i % k) * t + i / k]);
        let a = &self.attention;
        let (g_hidden, g_w2, _) = conv1x1_backward(&fw.hidden, &a.w2, &a.b2, &g_z)?;
        let g_b2 = Tensor::zeros(a.b2.shape());
        let g_pre = relu_backward(&fw.hidden_pre, &g_hidden);
        let (_, g_w1, g_b1) = conv1x1_backward(mt, &a.w1, &a.b1, &g_pre)?;

        let mut grads = GradientSet::new();
        grads.insert("attention.w1", g_w1);
        grads.insert("attention.b1", g_b1);
        grads.insert("attention.w2", g_w2);
        grads.insert("attention.b2", g_b2);
        grads.insert("projectors.w", g_pw);
        grads.insert("projectors.b", g_pb);

        let terms = LossTerms {
            total: cls + weight * div,
            classification: cls,
            diversity: div,
        };
        Ok((terms, grads))
    }

    /// Total objective `L_cls + sign * lambda * L_div` and its gradients.
    pub fn total_loss(
        &self,
        m: &FeatureMap<T>,
        label: u32,
        table: &SemanticTable<T>,
    ) -> Result<(T, GradientSet<T>)> {
        let (terms, grads) = self.loss_terms(m, label, table)?;
        Ok((terms.total, grads))
    }

    /// Unnormalized class scores `sum_k Q_k(m_k) . e_d`.
    pub fn class_scores(&self, m: &FeatureMap<T>, table: &SemanticTable<T>) -> Result<Vec<T>> {
        self.check_table(table)?;
        let fw = self.forward(m)?;
        Ok(summed_scores(&fw.projected, table))
    }

    /// Highest-scoring class id in `table`; ties go to the smaller id.
    pub fn predict(&self, m: &FeatureMap<T>, table: &SemanticTable<T>) -> Result<u32> {
        if table.is_empty() {
            bail!(InvalidInput, "cannot predict over an empty label set");
        }
        let scores = self.class_scores(m, table)?;
        Ok(argmax_class(&scores, table.class_ids()))
    }
}

/// `sum_k projected[k] . e_d` for each table row.
fn summed_scores<T: Scalar>(projected: &Tensor<T>, table: &SemanticTable<T>) -> Vec<T> {
    let k = projected.shape()[0];
    let mut pooled = vec![T::zero(); table.dim()];
    for head in 0..k {
        for (acc, &p) in pooled.iter_mut().zip(projected.row(head)) {
            *acc += p;
        }
    }
    (0..table.len())
        .map(|d| pooled.iter().zip(table.vector(d)).map(|(&a, &b)| a * b).sum())
        .collect()
}

pub(crate) fn argmax_class<T: Scalar>(scores: &[T], ids: &[u32]) -> u32 {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && ids[i] < ids[best]) {
            best = i;
        }
    }
    ids[best]
}

/// Attention-weighted pooling: `m_k[c] = sum_{h,w} A[k,h,w] M[h,w,c]`.
pub fn attentive_features<T: Scalar>(m: &FeatureMap<T>, attention: &Tensor<T>) -> Result<Tensor<T>> {
    if attention.ndim() != 3 || attention.shape()[1..] != [m.height(), m.width()] {
        bail!(
            Shape,
            "attention {:?} does not match feature map {}x{}",
            attention.shape(),
            m.height(),
            m.width()
        );
    }
    let (k, t, c) = (attention.shape()[0], m.cells(), m.channels());
    let mut out = Tensor::zeros(&[k, c]);
    gemm_acc(attention.data(), m.tensor().data(), out.data_mut(), k, t, c);
    Ok(out)
}

/// Sum of squared Hellinger distances over ordered pairs of distinct heads.
pub fn diversity_loss<T: Scalar>(attention: &Tensor<T>) -> Result<T> {
    if attention.ndim() == 0 || attention.shape()[0] == 0 {
        bail!(InvalidInput, "diversity of zero attention maps");
    }
    let k = attention.shape()[0];
    let mut total = T::zero();
    for i in 0..k {
        for j in (i + 1)..k {
            total += hellinger_sq_unchecked(attention.row(i), attention.row(j));
        }
    }
    Ok(total + total)
}

/// Gradient of [`diversity_loss`] with respect to the maps.
pub fn diversity_loss_grad<T: Scalar>(attention: &Tensor<T>) -> Tensor<T> {
    let k = attention.shape()[0];
    let two = T::lit(2.0);
    let mut grad = Tensor::zeros(attention.shape());
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let g = hellinger_sq_grad(attention.row(i), attention.row(j));
            for (acc, gv) in grad.row_mut(i).iter_mut().zip(g) {
                *acc += two * gv;
            }
        }
    }
    grad
}

/// Mean squared Hellinger distance over ordered pairs, `L_div / (K (K - 1))`.
/// Zero when `K = 1`.
pub fn mean_pairwise_hellinger<T: Scalar>(attention: &Tensor<T>) -> Result<T> {
    let k = attention.shape()[0];
    let div = diversity_loss(attention)?;
    if k < 2 {
        return Ok(T::zero());
    }
    Ok(div / T::from_usize_lossy(k * (k - 1)))
}

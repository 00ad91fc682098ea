//! Evaluation protocols over a bundle's test split.

use crate::dataio::DatasetBundle;
use crate::diffmath::matmul;
use crate::error::{bail, Result};
use crate::id3m::{DdmEnsemble, Domain};
use crate::metrics::{harmonic_mean, per_class_top1, tnr_at_fnr, EvalReport};
use crate::pipeline::{ConstantDetector, GzslSystem, UnseenDetector};
use crate::scalar::Scalar;
use crate::setnet::{argmax_class, mean_pairwise_hellinger, SetNetModel};
use crate::train::pooled_samples;
use crate::diffmath::Tensor;

/// Conventional ZSL: unseen-class test samples classified over the unseen
/// classes only.
pub fn eval_zsl<T: Scalar>(model: &SetNetModel<T>, bundle: &DatasetBundle) -> Result<EvalReport> {
    let table = bundle.unseen_table::<T>()?;
    let idx = bundle.unseen_test_indices();
    let mut preds = Vec::with_capacity(idx.len());
    for &i in &idx {
        preds.push(model.predict(&bundle.feature_map(i)?, &table)?);
    }
    let labels: Vec<u32> = idx.iter().map(|&i| bundle.label(i)).collect();
    let acc = per_class_top1(&preds, &labels, &bundle.split().unseen)?;
    Ok(EvalReport {
        acc: acc.acc,
        acc_seen: None,
        acc_unseen: Some(acc.acc),
        h: None,
        per_class: acc.per_class,
        tnr_at_fnr: None,
    })
}

/// GZSL over every test sample with the full label space, through the
/// detector-routed system.
pub fn eval_gzsl<T: Scalar, D: UnseenDetector<T>>(
    system: &GzslSystem<T, D>,
    bundle: &DatasetBundle,
) -> Result<EvalReport> {
    let idx = bundle.test_indices();
    let mut preds = Vec::with_capacity(idx.len());
    for &i in &idx {
        preds.push(system.classify(&bundle.feature_map(i)?)?);
    }
    gzsl_report(bundle, &idx, &preds)
}

/// GZSL with a single model over all classes and no detector.
pub fn eval_gzsl_direct<T: Scalar>(model: &SetNetModel<T>, bundle: &DatasetBundle) -> Result<EvalReport> {
    let system = GzslSystem::new(
        ConstantDetector(Domain::Seen),
        model.clone(),
        model.clone(),
        bundle.unseen_table()?,
        bundle.semantic_table()?,
    )?;
    eval_gzsl(&system, bundle)
}

fn gzsl_report(bundle: &DatasetBundle, idx: &[usize], preds: &[u32]) -> Result<EvalReport> {
    let labels: Vec<u32> = idx.iter().map(|&i| bundle.label(i)).collect();
    let split = |seen: bool| -> (Vec<u32>, Vec<u32>) {
        preds
            .iter()
            .zip(&labels)
            .filter(|(_, &y)| bundle.is_seen_class(y) == seen)
            .map(|(&p, &y)| (p, y))
            .unzip()
    };
    let (ps, ys) = split(true);
    let (pu, yu) = split(false);
    let seen = per_class_top1(&ps, &ys, &bundle.split().seen)?;
    let unseen = per_class_top1(&pu, &yu, &bundle.split().unseen)?;
    let all = per_class_top1(preds, &labels, bundle.class_ids())?;
    Ok(EvalReport {
        acc: all.acc,
        acc_seen: Some(seen.acc),
        acc_unseen: Some(unseen.acc),
        h: Some(harmonic_mean(unseen.acc, seen.acc)?),
        per_class: all.per_class,
        tnr_at_fnr: None,
    })
}

/// Detector evaluation on the test split.
///
/// The TNR curve calibrates a fresh threshold on the seen-class test degrees
/// at every grid point. The accuracy fields use the ensemble's own threshold:
/// a sample counts as correct when it is routed to its true domain, and the
/// per-class rates of seen and unseen classes give `acc_seen` and `acc_unseen`.
pub fn eval_ood<T: Scalar>(ddm: &DdmEnsemble<T>, bundle: &DatasetBundle, fnr_grid: &[f64]) -> Result<EvalReport> {
    let Some(theta) = ddm.theta() else {
        bail!(State, "detector has no threshold; calibrate it first");
    };
    let degrees = |idx: &[usize]| -> Result<Vec<T>> {
        pooled_samples::<T>(bundle, idx)?.iter().map(|x| ddm.degree(x)).collect()
    };
    let seen_idx = bundle.seen_test_indices();
    let unseen_idx = bundle.unseen_test_indices();
    let seen_d = degrees(&seen_idx)?;
    let unseen_d = degrees(&unseen_idx)?;
    let curve = tnr_at_fnr(&seen_d, &unseen_d, fnr_grid)?;

    // predictions in label space: the true label when routed correctly
    const WRONG: u32 = u32::MAX;
    let routed = |idx: &[usize], d: &[T], seen: bool| -> (Vec<u32>, Vec<u32>) {
        idx.iter()
            .zip(d)
            .map(|(&i, &di)| {
                let y = bundle.label(i);
                let flagged = di < theta;
                (if flagged != seen { y } else { WRONG }, y)
            })
            .unzip()
    };
    let (ps, ys) = routed(&seen_idx, &seen_d, true);
    let (pu, yu) = routed(&unseen_idx, &unseen_d, false);
    let seen = per_class_top1(&ps, &ys, &bundle.split().seen)?;
    let unseen = per_class_top1(&pu, &yu, &bundle.split().unseen)?;
    let preds: Vec<u32> = ps.iter().chain(&pu).copied().collect();
    let labels: Vec<u32> = ys.iter().chain(&yu).copied().collect();
    let all = per_class_top1(&preds, &labels, bundle.class_ids())?;
    Ok(EvalReport {
        acc: all.acc,
        acc_seen: Some(seen.acc),
        acc_unseen: Some(unseen.acc),
        h: Some(harmonic_mean(unseen.acc, seen.acc)?),
        per_class: all.per_class,
        tnr_at_fnr: Some(curve),
    })
}

/// Mean pairwise squared Hellinger distance between attention maps, averaged
/// over the test samples.
pub fn attention_diversity<T: Scalar>(model: &SetNetModel<T>, bundle: &DatasetBundle) -> Result<f64> {
    let idx = bundle.test_indices();
    if idx.is_empty() {
        bail!(InvalidInput, "bundle has no test samples");
    }
    let mut sum = 0.0;
    for &i in &idx {
        let maps = model.attention_maps(&bundle.feature_map(i)?)?;
        sum += mean_pairwise_hellinger(&maps)?.as_f64();
    }
    Ok(sum / idx.len() as f64)
}

/// Attention-free reference: ridge regression from spatially pooled features
/// to class semantics on the seen training samples, then the unseen class
/// whose semantic vector best matches the regressed vector.
///
/// `ridge` is relative to the mean diagonal of the Gram matrix.
pub fn prototype_baseline(bundle: &DatasetBundle, ridge: f64) -> Result<EvalReport> {
    if !(ridge > 0.0 && ridge.is_finite()) {
        bail!(InvalidInput, "ridge must be positive and finite");
    }
    let train = bundle.train_indices();
    if train.is_empty() {
        bail!(InvalidInput, "bundle has no training samples");
    }
    let (_, _, c) = bundle.dims();
    let s = bundle.semantic_dim();
    let table = bundle.semantic_table::<f64>()?;
    let x = pooled_samples::<f64>(bundle, &train)?;
    let n = x.len();
    let xm = Tensor::new(vec![n, c], x.concat())?;
    let y = Tensor::from_fn(&[n, s], |k| {
        let row = table.index_of(bundle.label(train[k / s])).expect("validated label");
        table.vector(row)[k % s]
    });
    let xt = Tensor::from_fn(&[c, n], |k| xm.data()[(k % n) * c + k / n]);
    let mut gram = matmul(&xt, &xm)?;
    let mean_diag = (0..c).map(|i| gram.data()[i * c + i]).sum::<f64>() / c as f64;
    for i in 0..c {
        gram.data_mut()[i * c + i] += ridge * mean_diag.max(f64::MIN_POSITIVE);
    }
    let rhs = matmul(&xt, &y)?;
    let w = cholesky_solve(&gram, &rhs)?;

    let unseen = bundle.unseen_table::<f64>()?;
    let idx = bundle.unseen_test_indices();
    let feats = pooled_samples::<f64>(bundle, &idx)?;
    let mut preds = Vec::with_capacity(idx.len());
    for f in feats {
        let proj = matmul(&Tensor::new(vec![1, c], f)?, &w)?;
        let scores: Vec<f64> = (0..unseen.len())
            .map(|d| proj.data().iter().zip(unseen.vector(d)).map(|(a, b)| a * b).sum())
            .collect();
        preds.push(argmax_class(&scores, unseen.class_ids()));
    }
    let labels: Vec<u32> = idx.iter().map(|&i| bundle.label(i)).collect();
    let acc = per_class_top1(&preds, &labels, &bundle.split().unseen)?;
    Ok(EvalReport {
        acc: acc.acc,
        acc_seen: None,
        acc_unseen: Some(acc.acc),
        h: None,
        per_class: acc.per_class,
        tnr_at_fnr: None,
    })
}

/// Solves `a x = b` for symmetric positive definite `a` `[n, n]`, `b` `[n, m]`.
fn cholesky_solve(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = a.shape()[0];
    let m = b.shape()[1];
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = a.data()[i * n + i] - dot;
                if v <= 0.0 {
                    bail!(Numerical, "matrix is not positive definite");
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = (a.data()[i * n + j] - dot) / l[j * n + j];
            }
        }
    }
    let mut x = b.clone();
    for col in 0..m {
        let mut z = vec![0.0; n];
        for i in 0..n {
            let dot: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
            z[i] = (b.data()[i * m + col] - dot) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let dot: f64 = (i + 1..n).map(|k| l[k * n + i] * x.data()[k * m + col]).sum();
            x.data_mut()[i * m + col] = (z[i] - dot) / l[i * n + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SyntheticSpec};
    use crate::train::{train_ddm, train_setnet, TrainConfig};

    fn bundle() -> DatasetBundle {
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
            seed: 11,
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 4,
            heads: 2,
            attention_hidden: 4,
            folds: 2,
            ddm_hidden: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = Tensor::new(vec![2, 2], vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        assert!((x.data()[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x.data()[1] - 7.0 / 11.0).abs() < 1e-14);
        let bad = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(cholesky_solve(&bad, &b).is_err());
    }

    #[test]
    fn reports_are_valid() {
        let b = bundle();
        let model = train_setnet::<f64>(&b, &cfg()).unwrap().model;
        let zsl = eval_zsl(&model, &b).unwrap();
        zsl.validate().unwrap();
        assert_eq!(zsl.per_class.len(), 2);
        let direct = eval_gzsl_direct(&model, &b).unwrap();
        direct.validate().unwrap();
        assert_eq!(direct.per_class.len(), 6);

        let mut ddm = train_ddm::<f64>(&b, &cfg()).unwrap().model;
        assert!(eval_ood(&ddm, &b, &[0.1]).is_err());
        ddm.set_theta(0.0).unwrap();
        let ood = eval_ood(&ddm, &b, &crate::metrics::DEFAULT_FNR_GRID).unwrap();
        ood.validate().unwrap();
        let tnr: Vec<f64> = ood.tnr_at_fnr.unwrap().iter().map(|p| p.tnr).collect();
        assert!(tnr.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn never_flagging_routes_like_the_direct_model() {
        let b = bundle();
        let model = train_setnet::<f64>(&b, &cfg()).unwrap().model;
        let mut ddm = train_ddm::<f64>(&b, &cfg()).unwrap().model;
        ddm.set_theta(f64::NEG_INFINITY).unwrap();
        let sys = GzslSystem::new(ddm, model.clone(), model.clone(), b.unseen_table().unwrap(), b.semantic_table().unwrap())
            .unwrap();
        assert_eq!(eval_gzsl(&sys, &b).unwrap(), eval_gzsl_direct(&model, &b).unwrap());
    }

    #[test]
    fn always_flagging_unseen_matches_zsl() {
        let b = bundle();
        let model = train_setnet::<f64>(&b, &cfg()).unwrap().model;
        let sys = GzslSystem::new(
            ConstantDetector(Domain::Unseen),
            model.clone(),
            model.clone(),
            b.unseen_table().unwrap(),
            b.semantic_table().unwrap(),
        )
        .unwrap();
        let g = eval_gzsl(&sys, &b).unwrap();
        assert_eq!(g.acc_unseen, eval_zsl(&model, &b).unwrap().acc_unseen);
        assert_eq!(g.acc_seen, Some(0.0));
        assert_eq!(g.h, Some(0.0));
    }

    #[test]
    fn diversity_is_a_mean_of_unit_range_values() {
        let b = bundle();
        let model = train_setnet::<f64>(&b, &cfg()).unwrap().model;
        let d = attention_diversity(&model, &b).unwrap();
        assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn prototype_baseline_beats_chance_on_default_bundle() {
        let b = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let r = prototype_baseline(&b, 1e-2).unwrap();
        r.validate().unwrap();
        assert!(r.acc > 0.2, "{}", r.acc);
    }
}

//! Generalized zero-shot classification: flag unseen-class inputs first, then
//! classify them over the unseen classes only, and everything else over all
//! classes.

use crate::error::{bail, Result};
use crate::id3m::{DdmEnsemble, Domain};
use crate::scalar::Scalar;
use crate::setnet::{FeatureMap, SemanticTable, SetNetModel};

/// Anything that can decide whether an input comes from an unseen class.
pub trait UnseenDetector<T: Scalar> {
    fn detect(&self, m: &FeatureMap<T>) -> Result<Domain>;
}

impl<T: Scalar> UnseenDetector<T> for DdmEnsemble<T> {
    fn detect(&self, m: &FeatureMap<T>) -> Result<Domain> {
        self.detect_map(m)
    }
}

/// Fixed answer, for routing tests and ablations.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDetector(pub Domain);

impl<T: Scalar> UnseenDetector<T> for ConstantDetector {
    fn detect(&self, _m: &FeatureMap<T>) -> Result<Domain> {
        Ok(self.0)
    }
}

/// Detector plus the two classifiers and their label spaces.
#[derive(Debug, Clone)]
pub struct GzslSystem<T = f64, D = DdmEnsemble<T>> {
    pub detector: D,
    pub zsl_model: SetNetModel<T>,
    pub gzsl_model: SetNetModel<T>,
    unseen_table: SemanticTable<T>,
    full_table: SemanticTable<T>,
}

impl<T: Scalar, D: UnseenDetector<T>> GzslSystem<T, D> {
    pub fn new(
        detector: D,
        zsl_model: SetNetModel<T>,
        gzsl_model: SetNetModel<T>,
        unseen_table: SemanticTable<T>,
        full_table: SemanticTable<T>,
    ) -> Result<Self> {
        if unseen_table.len() >= full_table.len() {
            bail!(
                Invariant,
                "unseen table ({}) must be a strict subset of the full table ({})",
                unseen_table.len(),
                full_table.len()
            );
        }
        for &id in unseen_table.class_ids() {
            if full_table.index_of(id).is_none() {
                bail!(Invariant, "unseen class {id} missing from the full table");
            }
        }
        Ok(Self {
            detector,
            zsl_model,
            gzsl_model,
            unseen_table,
            full_table,
        })
    }

    pub fn unseen_table(&self) -> &SemanticTable<T> {
        &self.unseen_table
    }

    pub fn full_table(&self) -> &SemanticTable<T> {
        &self.full_table
    }

    /// Flagged inputs go to the ZSL model over unseen classes, the rest to the
    /// GZSL model over all classes.
    pub fn classify(&self, m: &FeatureMap<T>) -> Result<u32> {
        match self.detector.detect(m)? {
            Domain::Unseen => self.zsl_model.predict(m, &self.unseen_table),
            Domain::Seen => self.gzsl_model.predict(m, &self.full_table),
        }
    }
}

pub fn classify_gzsl<T: Scalar, D: UnseenDetector<T>>(sys: &GzslSystem<T, D>, m: &FeatureMap<T>) -> Result<u32> {
    sys.classify(m)
}

/// Conventional zero-shot prediction over the unseen-class table.
pub fn classify_zsl<T: Scalar>(
    model: &SetNetModel<T>,
    m: &FeatureMap<T>,
    unseen_table: &SemanticTable<T>,
) -> Result<u32> {
    model.predict(m, unseen_table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use crate::id3m::{partition_classes, SubDdm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        zsl: SetNetModel,
        gzsl: SetNetModel,
        full: SemanticTable,
        unseen: SemanticTable,
        maps: Vec<FeatureMap>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zsl = SetNetModel::init(6, 4, 2, 5, 0.2, -1.0, &mut rng).unwrap();
        let gzsl = SetNetModel::init(6, 4, 2, 5, 0.2, -1.0, &mut rng).unwrap();
        let full = SemanticTable::from_raw(
            (0..8).collect(),
            Tensor::from_fn(&[8, 5], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let unseen = full.subset(&[5, 6, 7]).unwrap();
        let maps = (0..30)
            .map(|_| FeatureMap::new(Tensor::from_fn(&[3, 3, 6], |_| rng.random_range(-1.0..1.0))).unwrap())
            .collect();
        Fixture {
            zsl,
            gzsl,
            full,
            unseen,
            maps,
        }
    }

    #[test]
    fn unseen_route_stays_in_unseen_classes() {
        let f = fixture(1);
        let sys = GzslSystem::new(ConstantDetector(Domain::Unseen), f.zsl.clone(), f.gzsl, f.unseen.clone(), f.full)
            .unwrap();
        for m in &f.maps {
            let y = classify_gzsl(&sys, m).unwrap();
            assert!(f.unseen.class_ids().contains(&y));
            assert_eq!(y, classify_zsl(&f.zsl, m, &f.unseen).unwrap());
        }
    }

    #[test]
    fn seen_route_is_the_gzsl_model() {
        let f = fixture(2);
        let sys = GzslSystem::new(ConstantDetector(Domain::Seen), f.zsl, f.gzsl.clone(), f.unseen, f.full.clone())
            .unwrap();
        for m in &f.maps {
            assert_eq!(sys.classify(m).unwrap(), f.gzsl.predict(m, &f.full).unwrap());
        }
    }

    #[test]
    fn negative_infinite_threshold_flags_nothing() {
        let f = fixture(3);
        let p = partition_classes(&[0, 1, 2, 3, 4], 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let members = (0..2)
            .map(|i| SubDdm::init(i, p.in_distribution(i), 6, 8, &mut rng).unwrap())
            .collect();
        let mut ddm = DdmEnsemble::new(members, p).unwrap();
        ddm.set_theta(f64::NEG_INFINITY).unwrap();
        let sys = GzslSystem::new(ddm, f.zsl, f.gzsl.clone(), f.unseen, f.full.clone()).unwrap();
        for m in &f.maps {
            assert_eq!(sys.classify(m).unwrap(), f.gzsl.predict(m, &f.full).unwrap());
        }
    }

    #[test]
    fn restricted_argmax_agrees_when_full_winner_is_unseen() {
        for seed in 0..20 {
            let f = fixture(100 + seed);
            for m in &f.maps {
                let scores = f.zsl.class_scores(m, &f.full).unwrap();
                // exhaustive winner over all classes
                let mut best = 0;
                for d in 1..scores.len() {
                    if scores[d] > scores[best] {
                        best = d;
                    }
                }
                let winner = f.full.class_ids()[best];
                if f.unseen.class_ids().contains(&winner) {
                    assert_eq!(classify_zsl(&f.zsl, m, &f.unseen).unwrap(), winner);
                }
            }
        }
    }

    #[test]
    fn single_unseen_class() {
        let f = fixture(5);
        let one = f.full.subset(&[6]).unwrap();
        assert_eq!(classify_zsl(&f.zsl, &f.maps[0], &one).unwrap(), 6);
    }

    #[test]
    fn tables_must_nest() {
        let f = fixture(6);
        let other = SemanticTable::from_raw(vec![42], Tensor::filled(&[1, 5], 1.0)).unwrap();
        assert!(GzslSystem::new(ConstantDetector(Domain::Seen), f.zsl.clone(), f.gzsl.clone(), other, f.full.clone()).is_err());
        assert!(GzslSystem::new(ConstantDetector(Domain::Seen), f.zsl, f.gzsl, f.full.clone(), f.full).is_err());
    }
}

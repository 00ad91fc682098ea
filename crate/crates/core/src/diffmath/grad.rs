use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T = f64> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Zero gradients shaped like every parameter of `model`.
    pub fn zeros_like<P: Parameterized<T> + ?Sized>(model: &P) -> Self {
        let mut g = Self::new();
        for (name, t) in model.params() {
            g.insert(name, Tensor::zeros(t.shape()));
        }
        g
    }

    pub fn insert(&mut self, name: &str, grad: Tensor<T>) {
        self.entries.insert(name.to_owned(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `self += alpha * other`, entry by entry. Both sets must cover the same names.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            bail!(Shape, "gradient sets differ in size");
        }
        for (name, g) in &mut self.entries {
            match other.entries.get(name) {
                Some(o) => g.axpy(alpha, o)?,
                None => bail!(Shape, "gradient `{name}` missing from other set"),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for g in self.entries.values_mut() {
            g.scale_in_place(alpha);
        }
    }

    /// Checks one entry per parameter of `model`, with matching shapes.
    pub fn validate_for<P: Parameterized<T> + ?Sized>(&self, model: &P) -> Result<()> {
        let params = model.params();
        if params.len() != self.entries.len() {
            bail!(
                Shape,
                "{} gradients for {} parameters",
                self.entries.len(),
                params.len()
            );
        }
        for (name, p) in params {
            match self.entries.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => bail!(Shape, "gradient `{name}` {:?} vs parameter {:?}", g.shape(), p.shape()),
                None => bail!(Shape, "no gradient for parameter `{name}`"),
            }
        }
        Ok(())
    }
}

/// A model exposing its trainable tensors by stable name.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    /// Plain gradient step: `w -= lr * g` for every parameter.
    fn sgd_step(&mut self, grads: &GradientSet<T>, lr: T) -> Result<()> {
        for (name, p) in self.params_mut() {
            let Some(g) = grads.get(name) else {
                bail!(Shape, "no gradient for parameter `{name}`");
            };
            p.axpy(-lr, g)?;
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<T: Scalar> Parameterized<T> for Tensor<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w", self)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("w", self)]
    }
}

/// Compares analytic gradients against central finite differences at every
/// coordinate of every parameter.
///
/// Returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<T, P, F>(model: &P, eps: T, loss_and_grad: F) -> Result<T>
where
    T: Scalar,
    P: Parameterized<T> + Clone,
    F: Fn(&P) -> Result<(T, GradientSet<T>)>,
{
    if !(eps > T::zero()) {
        bail!(InvalidInput, "finite-difference step must be positive");
    }
    let (value, analytic) = loss_and_grad(model)?;
    if !value.is_finite() {
        bail!(Numerical, "loss is {value} at the probe point");
    }
    analytic.validate_for(model)?;

    let two = T::lit(2.0);
    let floor = T::lit(1e-8);
    let mut probe = model.clone();
    let mut worst = T::zero();
    let names: Vec<&'static str> = model.params().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        let grad = analytic.get(name).expect("validated");
        for i in 0..grad.len() {
            let original = probe.params()[pi].1.data()[i];
            probe.params_mut()[pi].1.data_mut()[i] = original + eps;
            let plus = loss_and_grad(&probe)?.0;
            probe.params_mut()[pi].1.data_mut()[i] = original - eps;
            let minus = loss_and_grad(&probe)?.0;
            probe.params_mut()[pi].1.data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                bail!(Numerical, "non-finite loss while probing `{name}`[{i}]");
            }
            let numeric = (plus - minus) / (two * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::prob::cross_entropy_with_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_loss_is_exact() {
        let c = [0.5, -1.25, 3.0, 0.0];
        let w = Tensor::new(vec![4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let err = grad_check(&w, 1e-3, |w: &Tensor| {
            let loss = w.data().iter().zip(c).map(|(a, b)| a * b).sum();
            let mut g = GradientSet::new();
            g.insert("w", Tensor::new(vec![4], c.to_vec())?);
            Ok((loss, g))
        })
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_fn(&[6, 5], |_| rng.random_range(-1.0..1.0));
        let err = grad_check(&w, 1e-4, |w: &Tensor| {
            let mut logits = vec![0.0; 5];
            for (i, xi) in x.iter().enumerate() {
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += xi * w.data()[i * 5 + j];
                }
            }
            let (loss, gl) = cross_entropy_with_grad(&logits, 2)?;
            let gw = Tensor::from_fn(&[6, 5], |k| x[k / 5] * gl[k % 5]);
            let mut g = GradientSet::new();
            g.insert("w", gw);
            Ok((loss, g))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(&w, 1e-4, |w: &Tensor| {
            let mut g = GradientSet::new();
            g.insert("w", w.clone());
            Ok((f64::NAN, g))
        });
        assert!(matches!(r, Err(crate::Error::Numerical(_))));
    }

    #[test]
    fn validate_catches_missing_entries() {
        let w = Tensor::<f64>::zeros(&[2]);
        assert!(GradientSet::new().validate_for(&w).is_err());
        let mut g = GradientSet::new();
        g.insert("w", Tensor::zeros(&[3]));
        assert!(g.validate_for(&w).is_err());
    }
}

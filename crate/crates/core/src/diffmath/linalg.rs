//! Dense linear layers and elementwise ops with their vector-Jacobian products.

use super::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// `[m, n] x [n, p] -> [m, p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n, p) = mm_dims(a, b)?;
    let mut out = Tensor::zeros(&[m, p]);
    gemm_acc(a.data(), b.data(), out.data_mut(), m, n, p);
    Ok(out)
}

/// Gradients of `matmul(a, b)` given the upstream gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, n, p) = mm_dims(a, b)?;
    grad_out.expect_shape(&[m, p], "matmul upstream gradient")?;
    let mut ga = Tensor::zeros(&[m, n]);
    let mut gb = Tensor::zeros(&[n, p]);
    let (ad, bd, gd) = (a.data(), b.data(), grad_out.data());
    for i in 0..m {
        for k in 0..n {
            let mut acc = T::zero();
            for j in 0..p {
                acc += gd[i * p + j] * bd[k * p + j];
            }
            ga.data_mut()[i * n + k] = acc;
            let aik = ad[i * n + k];
            let row = &mut gb.data_mut()[k * p..(k + 1) * p];
            for j in 0..p {
                row[j] += aik * gd[i * p + j];
            }
        }
    }
    Ok((ga, gb))
}

fn mm_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        bail!(Shape, "matmul {:?} x {:?}", a.shape(), b.shape());
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// `out[m,p] += a[m,n] * b[n,p]` on raw row-major slices.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Channel-mixing 1x1 convolution: `[H, W, C]` with weights `[C, O]` and bias
/// `[O]` gives `[H, W, O]`.
pub fn conv1x1<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, c, o) = conv_dims(x, w, b)?;
    let mut out = Tensor::zeros(&[h, wd, o]);
    for cell in out.data_mut().chunks_mut(o) {
        cell.copy_from_slice(b.data());
    }
    gemm_acc(x.data(), w.data(), out.data_mut(), h * wd, c, o);
    Ok(out)
}

/// Gradients `(dx, dw, db)` of [`conv1x1`].
pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, wd, c, o) = conv_dims(x, w, b)?;
    grad_out.expect_shape(&[h, wd, o], "conv1x1 upstream gradient")?;
    let t = h * wd;
    let x2 = x.reshaped(&[t, c])?;
    let g2 = grad_out.reshaped(&[t, o])?;
    let (gx, gw) = matmul_backward(&x2, w, &g2)?;
    let mut gb = Tensor::zeros(&[o]);
    for cell in grad_out.data().chunks(o) {
        for (acc, &g) in gb.data_mut().iter_mut().zip(cell) {
            *acc += g;
        }
    }
    Ok((gx.reshaped(&[h, wd, c])?, gw, gb))
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 3 || w.ndim() != 2 || b.ndim() != 1 {
        bail!(Shape, "conv1x1 ranks {:?} {:?} {:?}", x.shape(), w.shape(), b.shape());
    }
    let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w.shape()[0] != c || w.shape()[1] != b.shape()[0] {
        bail!(
            Shape,
            "conv1x1 input has {c} channels, weights {:?}, bias {:?}",
            w.shape(),
            b.shape()
        );
    }
    Ok((h, wd, c, w.shape()[1]))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`] given its input. The subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.axpy(T::one(), b)?;
    Ok(out)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, alpha: T) -> Tensor<T> {
    a.map(|v| v * alpha)
}

/// Mean over the spatial axes: `[H, W, C] -> [C]`.
pub fn spatial_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        bail!(Shape, "spatial_mean expects [H,W,C], got {:?}", x.shape());
    }
    let c = x.shape()[2];
    let t = T::from_usize_lossy(x.shape()[0] * x.shape()[1]);
    let mut out = Tensor::zeros(&[c]);
    for cell in x.data().chunks(c) {
        for (o, &v) in out.data_mut().iter_mut().zip(cell) {
            *o += v;
        }
    }
    out.scale_in_place(T::one() / t);
    Ok(out)
}

/// Gradient of [`spatial_mean`]: each input cell receives `grad / (H W)`.
pub fn spatial_mean_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let t = T::from_usize_lossy(input_shape[0] * input_shape[1]);
    let c = input_shape[2];
    Tensor::from_fn(input_shape, |i| grad_out.data()[i % c] / t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, GradientSet, Parameterized};

    #[derive(Clone)]
    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl Parameterized<f64> for Pair {
        fn params(&self) -> Vec<(&'static str, &Tensor)> {
            vec![("a", &self.a), ("b", &self.b)]
        }
        fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
            vec![("a", &mut self.a), ("b", &mut self.b)]
        }
    }

    fn weights(shape: &[usize], salt: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.731 + salt).sin())
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&a, &a.reshaped(&[4, 1]).unwrap()).is_err());
    }

    #[test]
    fn matmul_gradient() {
        let pair = Pair {
            a: weights(&[3, 4], 0.1),
            b: weights(&[4, 2], 0.7),
        };
        let c = weights(&[3, 2], 1.9);
        let err = grad_check(&pair, 1e-4, |p: &Pair| {
            let out = matmul(&p.a, &p.b)?;
            let loss: f64 = out.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
            let (ga, gb) = matmul_backward(&p.a, &p.b, &c)?;
            let mut g = GradientSet::new();
            g.insert("a", ga);
            g.insert("b", gb);
            Ok((loss, g))
        })
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn conv_relu_mean_gradient() {
        let pair = Pair {
            a: weights(&[3, 2, 4], 0.3),
            b: weights(&[4, 5], 2.1),
        };
        let bias = weights(&[5], 0.9);
        let c = weights(&[5], 4.4);
        let err = grad_check(&pair, 1e-5, |p: &Pair| {
            let z = conv1x1(&p.a, &p.b, &bias)?;
            let r = relu(&z);
            let m = spatial_mean(&r)?;
            let loss: f64 = m.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
            let gr = spatial_mean_backward(r.shape(), &c);
            let gz = relu_backward(&z, &gr);
            let (gx, gw, _) = conv1x1_backward(&p.a, &p.b, &bias, &gz)?;
            let mut g = GradientSet::new();
            g.insert("a", gx);
            g.insert("b", gw);
            Ok((loss, g))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn conv_bias_broadcast() {
        let x = Tensor::<f64>::zeros(&[2, 2, 3]);
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let out = conv1x1(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        assert!(conv1x1(&x, &Tensor::zeros(&[4, 2]), &b).is_err());
    }

    #[test]
    fn add_and_scale() {
        let a = weights(&[2, 3], 0.0);
        let s = add(&a, &scale(&a, -1.0)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }
}

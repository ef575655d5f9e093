//! Forward and backward kernels for the encoder's building blocks.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{LayerNorm, Linear};
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear<F: Scalar>(x: &ArrayView2<F>, lin: &Linear<F>) -> Array2<F> {
    let mut y = x.dot(&lin.w);
    y += &lin.b;
    y
}

/// Accumulates weight gradients into `grad` and returns the input gradient.
pub(crate) fn linear_backward<F: Scalar>(
    x: &ArrayView2<F>,
    dy: &ArrayView2<F>,
    lin: &Linear<F>,
    grad: &mut Linear<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut grad.w);
    grad.b += &dy.sum_axis(Axis(0));
    dy.dot(&lin.w.t())
}

pub(crate) struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) fn layer_norm<F: Scalar>(x: &ArrayView2<F>, ln: &LayerNorm<F>) -> (Array2<F>, LnCache<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * &ln.gain;
    y += &ln.bias;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &ArrayView2<F>,
    cache: &LnCache<F>,
    ln: &LayerNorm<F>,
    grad: &mut LayerNorm<F>,
) -> Array2<F> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let d = F::of(dy.ncols() as f64);
    let mut dx = dy * &ln.gain;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &h| *g = r * (*g - mean_d - h * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let k = F::of(SQRT_2_OVER_PI);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::of(SQRT_2_OVER_PI);
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(logits: &ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Scalar>(logits: &ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.4, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = array![[0.3f64, -1.2, 2.0, 0.1], [1.0, 1.5, -0.5, 0.0]];
        let ln = LayerNorm {
            gain: array![1.0, 0.5, -2.0, 1.5],
            bias: array![0.1, 0.0, 0.2, -0.3],
        };
        let w = array![[0.7, -0.1, 0.3, 1.1], [0.2, 0.9, -0.4, 0.5]];
        let loss = |x: &Array2<f64>| (&layer_norm(&x.view(), &ln).0 * &w).sum();
        let (_, cache) = layer_norm(&x.view(), &ln);
        let mut g = LayerNorm { gain: Array1::zeros(4), bias: Array1::zeros(4) };
        let dx = layer_norm_backward(&w.view(), &cache, &ln, &mut g);
        for i in 0..2 {
            for j in 0..4 {
                let mut p = x.clone();
                p[[i, j]] += 1e-6;
                let mut m = x.clone();
                m[[i, j]] -= 1e-6;
                let fd = (loss(&p) - loss(&m)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_is_simplex() {
        let p = softmax_rows(&array![[1.0f64, 0.0, -1.0], [1000.0, 0.0, -1000.0]].view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!((p[[0, 0]] - 0.665_240_955_774_821_5).abs() < 1e-12);
    }
}

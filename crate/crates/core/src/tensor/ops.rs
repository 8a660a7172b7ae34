//! Graph-free tensor kernels. The graph ops wrap these and add backward rules.

use super::{gemm, Mat, Real, Tensor};
use crate::error::{Error, Result};

pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![S::zero(); m * n];
    gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), &mut out, false);
    Tensor::new([m, n], out)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("softmax", format!("temperature must be positive and finite, got {temperature}")));
    }
    Ok(())
}

/// Softmax over the last axis of `z / temperature`, computed as
/// `exp(z_k − max z) / Σ exp(z_j − max z)` in `f64`.
pub fn softmax<S: Real>(z: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    check_temperature(temperature)?;
    let k = *z.shape().last().unwrap();
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(k) {
        out.extend(softmax_row(row, temperature).into_iter().map(S::cast_from));
    }
    Tensor::new(z.shape().to_vec(), out)
}

pub fn log_softmax<S: Real>(z: &Tensor<S>) -> Result<Tensor<S>> {
    let k = *z.shape().last().unwrap();
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(k) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|v| S::cast_from(v.as_f64() - lse)));
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Softmax of one row of `f64`-convertible values.
pub fn softmax_row<S: Real>(row: &[S], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let id = Tensor::<f32>::new([2, 2], vec![1., 0., 0., 1.]).unwrap();
        let v = Tensor::new([2, 1], vec![5., 7.]).unwrap();
        assert_eq!(matmul(&id, &v).unwrap().data(), &[5., 7.]);
        let a = Tensor::<f32>::new([1, 2], vec![1., 2.]).unwrap();
        let b = Tensor::new([2, 1], vec![3., 4.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.]);
        let bad = Tensor::new([3, 1], vec![1., 2., 3.]).unwrap();
        assert!(matches!(matmul(&a, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::<f64>::zeros([3]);
        for p in softmax(&z, 1.0).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // exp(1)/(1+exp(1)) to 16 digits
        let p = softmax(&Tensor::<f64>::new([2], vec![1., 0.]).unwrap(), 1.0).unwrap();
        assert!((p.data()[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
        let hot = softmax(&Tensor::<f64>::new([2], vec![2., 0.]).unwrap(), 2.0).unwrap();
        assert!(hot.max_abs_diff(&p).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = Tensor::<f32>::zeros([2]);
        assert!(softmax(&z, 0.0).is_err());
        assert!(softmax(&z, -1.0).is_err());
        assert!(softmax(&z, f64::NAN).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let z = Tensor::<f32>::new([2], vec![1000., 0.]).unwrap();
        let p = softmax(&z, 1.0).unwrap();
        assert!(p.all_finite());
        assert_eq!(p.data()[0], 1.0);
    }
}

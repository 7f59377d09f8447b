//! Linear centered kernel alignment between activation matrices.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn centered_columns(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (n, p) = x.dims2()?;
    let mut out = x.data().to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| out[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * p + j] -= mean;
        }
    }
    Ok((n, p, out))
}

/// Squared Frobenius norm of `a^T b` for `a: n x p`, `b: n x q`.
fn cross_frobenius_sq(n: usize, a: &[f64], p: usize, b: &[f64], q: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let s: f64 = (0..n).map(|r| a[r * p + i] * b[r * q + j]).sum();
            total += s * s;
        }
    }
    total
}

/// `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)` with column-centred inputs.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, xc) = centered_columns(x)?;
    let (ny, q, yc) = centered_columns(y)?;
    if n != ny {
        return Err(Error::Shape(format!("CKA needs matching rows, got {n} and {ny}")));
    }
    if n < 2 {
        return Err(Error::Metric("CKA needs at least two probe rows".into()));
    }
    let xx = cross_frobenius_sq(n, &xc, p, &xc, p).sqrt();
    let yy = cross_frobenius_sq(n, &yc, q, &yc, q).sqrt();
    if xx < 1e-300 || yy < 1e-300 {
        return Err(Error::Metric("CKA is undefined for zero-variance activations".into()));
    }
    Ok(cross_frobenius_sq(n, &yc, q, &xc, p) / (xx * yy))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn randn(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![n, p], (0..n * p).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    fn orthogonal(p: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let a = randn(p, p, rng);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..p {
            let mut v: Vec<f64> = (0..p).map(|i| a.data()[i * p + j]).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
        Tensor::new(vec![p, p], (0..p * p).map(|k| cols[k % p][k / p]).collect()).unwrap()
    }

    fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k) = a.dims2().unwrap();
        let (_, m) = b.dims2().unwrap();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|r| a.data()[i * k + r] * b.data()[r * m + j]).sum();
            }
        }
        Tensor::new(vec![n, m], out).unwrap()
    }

    #[test]
    fn invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(50, 6, &mut rng);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let q = orthogonal(6, &mut rng);
        assert!((cka(&x, &matmul(&x, &q)).unwrap() - 1.0).abs() < 1e-9);
        assert!((cka(&x, &x.map(|v| -3.5 * v)).unwrap() - 1.0).abs() < 1e-9);
        let y = randn(50, 3, &mut rng);
        let c = cka(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&c));
        assert!((c - cka(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn independent_gaussians_are_dissimilar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(1000, 16, &mut rng);
        let y = randn(1000, 16, &mut rng);
        assert!(cka(&x, &y).unwrap() < 0.05);
    }

    #[test]
    fn degenerate_inputs_error() {
        let x = Tensor::full(&[5, 2], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(cka(&x, &randn(5, 2, &mut rng)).is_err());
        assert!(cka(&randn(5, 2, &mut rng), &randn(4, 2, &mut rng)).is_err());
    }
}

//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Tall inputs are first reduced to their `n x n` triangular factor with a
//! Householder QR, so the rotation sweeps run on a square matrix.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// `m = u * diag(s) * vt` with `u: m x k`, `s: k`, `vt: k x n`, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.vt.shape()[1];
        let mut scaled = self.u.clone();
        for i in 0..m {
            for j in 0..k {
                scaled.data_mut()[i * k + j] *= self.s[j];
            }
        }
        let out = scaled.matmul(&self.vt).expect("svd factor shapes agree");
        debug_assert_eq!(out.shape(), &[m, n]);
        out
    }
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.ndim() != 2 {
        return Err(Error::Shape {
            op: "svd",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if m == 0 || n == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if m < n {
        // Decompose the transpose and swap the factors.
        let t = svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.vt.transpose()?,
            s: t.s,
            vt: t.u.transpose()?,
        });
    }
    if m >= 2 * n {
        let (q, r) = householder_qr(a);
        let inner = jacobi_svd(&r, n, n)?;
        let u = q.matmul(&inner.u)?;
        return Ok(Svd { u, ..inner });
    }
    jacobi_svd(a, m, n)
}

/// Thin QR of a tall `m x n` matrix: returns `(q: m x n, r: n x n)`.
fn householder_qr(a: &Tensor) -> (Tensor, Tensor) {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // Work column-major so reflector updates touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm > 0.0 {
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if vn > 0.0 {
                v.iter_mut().for_each(|t| *t /= vn);
            }
        } else {
            v.iter_mut().for_each(|t| *t = 0.0);
        }
        for col in cols.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..]);
        }
        reflectors.push(v);
    }
    let mut r = Tensor::zeros([n, n]);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r.data_mut()[i * n + j] = col[i];
        }
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n identity columns.
    let mut qcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..n).rev() {
        for col in qcols.iter_mut() {
            apply_reflector(&reflectors[k], &mut col[k..]);
        }
    }
    let mut q = Tensor::zeros([m, n]);
    for (j, col) in qcols.iter().enumerate() {
        for i in 0..m {
            q.data_mut()[i * n + j] = col[i];
        }
    }
    (q, r)
}

fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= 2.0 * dot * vi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_svd(a: &Tensor, m: usize, n: usize) -> Result<Svd> {
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = 4.0 * f64::EPSILON;
    let mut residual = 0.0;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0_f64;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms.iter().copied().fold(0.0, f64::max);
    let null_tol = scale * (m.max(n) as f64) * f64::EPSILON;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = Tensor::zeros([n, n]);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > null_tol {
            ucols.push(u[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            ucols.push(complement_vector(&ucols, m));
            s.push(0.0);
        }
        vt.data_mut()[k * n..(k + 1) * n].copy_from_slice(&v[j]);
    }
    let mut ut = Tensor::zeros([m, n]);
    for (j, col) in ucols.iter().enumerate() {
        for i in 0..m {
            ut.data_mut()[i * n + j] = col[i];
        }
    }
    Ok(Svd { u: ut, s, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// A unit vector orthogonal to every vector in `basis` (which is orthonormal).
fn complement_vector(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for b in basis {
                let d = dot(&cand, b);
                cand.iter_mut().zip(b).for_each(|(c, bi)| *c -= d * bi);
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-6 {
            cand.iter_mut().for_each(|c| *c /= norm);
            return cand;
        }
    }
    unreachable!("fewer than m orthonormal vectors always leave a complement")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_orthonormal_cols(t: &Tensor, tol: f64) {
        let gram = t.transpose().unwrap().matmul(t).unwrap();
        let k = gram.shape()[0];
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at2(i, j) - want).abs() < tol, "gram[{i},{j}] = {}", gram.at2(i, j));
            }
        }
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Tensor::identity(3)).unwrap();
        for s in &d.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_values_come_back_sorted() {
        let a = Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let d = svd(&a).unwrap();
        for (s, want) in d.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        // Two identical columns and a zero row.
        let a = Tensor::new(
            [4, 3],
            vec![1.0, 1.0, 2.0, 3.0, 3.0, 0.5, 0.0, 0.0, 0.0, -1.0, -1.0, 4.0],
        )
        .unwrap();
        let d = svd(&a).unwrap();
        assert!(d.s[2].abs() < 1e-12);
        assert_orthonormal_cols(&d.u, 1e-10);
        assert_orthonormal_cols(&d.vt.transpose().unwrap(), 1e-10);
        let err = d.reconstruct().max_abs_diff(&a);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn wide_and_tall_paths_reconstruct() {
        for (m, n) in [(3, 7), (20, 8), (9, 7)] {
            let a = Tensor::from_fn([m, n], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
            let d = svd(&a).unwrap();
            assert_eq!(d.u.shape(), &[m, m.min(n)]);
            assert_eq!(d.vt.shape(), &[m.min(n), n]);
            let rel = (&d.reconstruct().data().iter().zip(a.data()))
                .clone()
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
                / a.frobenius();
            assert!(rel < 1e-12, "{m}x{n}: {rel}");
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn zero_matrix() {
        let d = svd(&Tensor::zeros([4, 2])).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        assert_orthonormal_cols(&d.u, 1e-12);
    }
}

//! Jacobi kernels: one-sided SVD and cyclic symmetric eigendecomposition.
//!
//! Neither routine carries gradients; both are only used by the labeling
//! solver, where matrices are small.

use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-15;

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × k`, orthonormal columns.
    pub u: Tensor,
    /// Length `k = min(m, n)`, descending and nonnegative.
    pub sigma: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.sigma.len();
        let (m, n) = (self.u.shape()[0], self.v.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += self.u.at(i, l) * self.sigma[l] * self.v.at(j, l);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).expect("reconstruction shape")
    }
}

/// One-sided (Hestenes) Jacobi SVD of any `m × n` matrix.
pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 {
        return invalid("svd", format!("needs rank 2, got {:?}", a.shape()));
    }
    if !a.is_finite() {
        return invalid("svd", "non-finite input");
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if m < n {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    // column-major working copy: cols[j] is column j of A
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = JACOBI_TOL.max(f64::EPSILON * m as f64);
    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
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
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(TensorError::NoConvergence {
            routine: "svd",
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut sig: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    sig.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite singular values"));

    let scale = sig.first().map_or(0.0, |s| s.0);
    let tiny = scale * f64::EPSILON * (m.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v = Tensor::zeros(vec![n, n]);
    for (k, &(s, j)) in sig.iter().enumerate() {
        let s = if s <= tiny { 0.0 } else { s };
        sigma.push(s);
        let col = if s > 0.0 {
            cols[j].iter().map(|x| x / s).collect()
        } else {
            orthonormal_complement(&ucols, m)
        };
        ucols.push(col);
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
    }
    let mut u = Tensor::zeros(vec![m, n]);
    for (k, col) in ucols.iter().enumerate() {
        for i in 0..m {
            u.set(i, k, col[i]);
        }
    }
    Ok(Svd { u, sigma, v })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every vector in `basis` (Gram–Schmidt on the
/// standard basis).
fn orthonormal_complement(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > best_norm {
            best_norm = nrm;
            best = v;
        }
        if nrm > 0.5 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

/// Eigendecomposition `S = Q diag(λ) Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns.
    pub vectors: Tensor,
}

/// Cyclic Jacobi eigendecomposition. `s` must be symmetric within `1e-10`
/// (relative to its largest entry when that exceeds 1).
pub fn eig_sym(s: &Tensor) -> Result<SymEig> {
    if s.rank() != 2 || s.shape()[0] != s.shape()[1] {
        return invalid("eig_sym", format!("needs a square matrix, got {:?}", s.shape()));
    }
    let n = s.shape()[0];
    let scale = s.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((s.at(i, j) - s.at(j, i)).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(TensorError::NotSymmetric(asym));
    }

    let mut a: Vec<f64> = s.data().to_vec();
    // symmetrize exactly so rotations act on a true symmetric matrix
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut q = Tensor::eye(n).into_data();
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let off = |a: &[f64]| -> f64 {
        let mut o = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                o += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        o.sqrt()
    };

    let tol = JACOBI_TOL.max(f64::EPSILON * n as f64) * frob.max(f64::MIN_POSITIVE);
    let mut sweeps = 0;
    while off(&a) > tol {
        if sweeps == MAX_SWEEPS {
            return Err(TensorError::NoConvergence {
                routine: "eig_sym",
                sweeps,
                residual: off(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for r in p + 1..n {
                let apr = a[p * n + r];
                if apr.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let arr = a[r * n + r];
                let theta = (arr - app) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // A ← Jᵀ A J on rows/cols p, r
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akr = a[k * n + r];
                    a[k * n + p] = c * akp - sn * akr;
                    a[k * n + r] = sn * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let ark = a[r * n + k];
                    a[p * n + k] = c * apk - sn * ark;
                    a[r * n + k] = sn * apk + c * ark;
                }
                a[p * n + r] = 0.0;
                a[r * n + p] = 0.0;
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - sn * qkr;
                    q[k * n + r] = sn * qkp + c * qkr;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).expect("finite eigenvalues"));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(vec![n, n]);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, k, q[i * n + j]);
        }
    }
    Ok(SymEig { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_singular_values() {
        let s = svd(&Tensor::diag(&[3.0, 1.0])).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-14 && (s.sigma[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_has_zero_singular_values_and_orthonormal_u() {
        let s = svd(&Tensor::zeros(vec![4, 3])).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        let utu = s.u.transpose().unwrap().matmul(&s.u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }

    #[test]
    fn wide_matrix_is_handled_through_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.u.shape(), &[2, 2]);
        assert_eq!(s.v.shape(), &[3, 2]);
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn identity_and_diag_eigenvalues() {
        let e = eig_sym(&Tensor::eye(3)).unwrap();
        assert!(e.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let e = eig_sym(&Tensor::diag(&[2.0, 0.0])).unwrap();
        assert_eq!(e.values, vec![0.0, 2.0]);
    }

    #[test]
    fn path_laplacian_spectrum() {
        // characteristic polynomial −λ(λ−1)(λ−3)
        let l = Tensor::new(vec![3, 3], vec![1., -1., 0., -1., 2., -1., 0., -1., 1.]).unwrap();
        let e = eig_sym(&l).unwrap();
        for (got, want) in e.values.iter().zip([0.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 0., 1.]).unwrap();
        assert!(matches!(eig_sym(&a), Err(TensorError::NotSymmetric(_))));
    }
}

//! Small dense eigen-solvers: implicit-shift QL for symmetric tridiagonal
//! matrices (Lanczos) and cyclic Jacobi for small dense symmetric matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Eigen-pairs of a symmetric matrix. `vectors[i * n + k]` is component `i` of the
/// `k`-th eigenvector; values ascend.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl Eigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|i| self.vectors[i * n + k]).collect()
    }

    fn sorted(values: Vec<f64>, vectors: Vec<f64>) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut v = vec![0.0; n * n];
        for (new, &old) in order.iter().enumerate() {
            for i in 0..n {
                v[i * n + new] = vectors[i * n + old];
            }
        }
        Eigen {
            values: order.iter().map(|&k| values[k]).collect(),
            vectors: v,
        }
    }
}

/// Diagonal `diag` (length n) and off-diagonal `off` (length n − 1).
pub fn tridiagonal_eigen(diag: &[f64], off: &[f64]) -> Result<Eigen> {
    let n = diag.len();
    if n == 0 {
        return Err(Error::Empty("tridiagonal matrix".into()));
    }
    if off.len() + 1 != n {
        return Err(shape_err!("off-diagonal of {} for order {}", off.len(), n));
    }
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(off);
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::Invalid("tridiagonal QL did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = libm::hypot(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = libm::hypot(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    let f = z[k * n + i + 1];
                    z[k * n + i + 1] = s * z[k * n + i] + c * f;
                    z[k * n + i] = c * z[k * n + i] - s * f;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(Eigen::sorted(d, z))
}

/// Cyclic Jacobi on a dense symmetric `n × n` row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<Eigen> {
    if n == 0 || a.len() != n * n {
        return Err(shape_err!("{} entries for order {}", a.len(), n));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            let values = (0..n).map(|i| m[i * n + i]).collect();
            return Ok(Eigen::sorted(values, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + libm::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Invalid("Jacobi sweeps did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn check_pairs(a: &[f64], n: usize, e: &Eigen, tol: f64) {
        for k in 0..n {
            let v = e.vector(k);
            let nv: f64 = v.iter().map(|x| x * x).sum();
            assert!((nv - 1.0).abs() < 1e-10);
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
                assert!(
                    (av - e.values[k] * v[i]).abs() < tol,
                    "residual {}",
                    av - e.values[k] * v[i]
                );
            }
        }
    }

    #[test]
    fn tridiagonal_known_spectrum() {
        // the path-graph Laplacian-like matrix 2 on the diagonal, −1 off it
        let n = 6;
        let e = tridiagonal_eigen(&[2.0; 6], &[-1.0; 5]).unwrap();
        for (k, &lam) in e.values.iter().enumerate() {
            let exact =
                2.0 - 2.0 * libm::cos((k + 1) as f64 * core::f64::consts::PI / (n + 1) as f64);
            assert!((lam - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn tridiagonal_vectors_and_dense_agree() {
        let mut r = SeedRng::new(5);
        let n = 9;
        let d: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let o: Vec<f64> = (0..n - 1).map(|_| r.normal()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = d[i];
            if i + 1 < n {
                a[i * n + i + 1] = o[i];
                a[(i + 1) * n + i] = o[i];
            }
        }
        let t = tridiagonal_eigen(&d, &o).unwrap();
        let j = symmetric_eigen(&a, n).unwrap();
        check_pairs(&a, n, &t, 1e-10);
        check_pairs(&a, n, &j, 1e-10);
        for (x, y) in t.values.iter().zip(&j.values) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn single_and_errors() {
        let e = tridiagonal_eigen(&[3.5], &[]).unwrap();
        assert_eq!(e.values, vec![3.5]);
        assert!(tridiagonal_eigen(&[], &[]).is_err());
        assert!(tridiagonal_eigen(&[1.0, 2.0], &[]).is_err());
        assert!(symmetric_eigen(&[1.0, 2.0], 2).is_err());
    }
}

//! Small dense linear algebra for desk-scale dimensions (n, d <= ~4).
//!
//! Everything here operates on plain slices; matrices are row-major.

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gram matrix A Aᵀ of a row-major (rows x cols) matrix, returned row-major (rows x rows).
pub fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            g[i * rows + j] = dot(&a[i * cols..(i + 1) * cols], &a[j * cols..(j + 1) * cols]);
        }
    }
    g
}

/// Solve S x = b for symmetric positive definite S (row-major n x n) by Cholesky.
///
/// Returns `None` when S is not positive definite to working precision,
/// which for a Gram matrix means the underlying rows are rank deficient.
pub fn solve_spd(s: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // forward then backward substitution
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Some(y)
}

/// Smallest eigenvalue of a symmetric matrix (row-major n x n) by cyclic Jacobi.
pub fn sym_min_eigenvalue(s: &[f64], n: usize) -> f64 {
    if n == 1 {
        return s[0];
    }
    let mut a = s.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&a, n)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min)
}

fn frobenius(a: &[f64], n: usize) -> f64 {
    a.iter().take(n * n).map(|x| x * x).sum::<f64>().sqrt()
}

/// Orthonormal basis of the null space of a row-major (rows x cols) matrix,
/// obtained by orthogonalizing the canonical basis against the matrix rows.
///
/// Returns the basis as columns, flattened column-major: `cols x k` with
/// `k = cols - rank`. Rows are assumed full rank (checked upstream).
pub fn kernel_basis(a: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    // orthonormalize the rows first (modified Gram-Schmidt)
    let mut row_basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut v = a[i * cols..(i + 1) * cols].to_vec();
        for r in &row_basis {
            let c = dot(&v, r);
            for (vk, rk) in v.iter_mut().zip(r) {
                *vk -= c * rk;
            }
        }
        let nv = norm(&v);
        if nv > 1e-12 {
            for vk in v.iter_mut() {
                *vk /= nv;
            }
            row_basis.push(v);
        }
    }
    // extend with canonical vectors, re-orthogonalizing twice for stability
    let mut kernel: Vec<Vec<f64>> = Vec::new();
    for e in 0..cols {
        let mut v = vec![0.0; cols];
        v[e] = 1.0;
        for _ in 0..2 {
            for r in row_basis.iter().chain(kernel.iter()) {
                let c = dot(&v, r);
                for (vk, rk) in v.iter_mut().zip(r) {
                    *vk -= c * rk;
                }
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            for vk in v.iter_mut() {
                *vk /= nv;
            }
            kernel.push(v);
        }
    }
    kernel
}

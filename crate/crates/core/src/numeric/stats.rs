use super::matrix::{dot, norm, DenseMatrix};
use crate::error::{Error, Result};

/// Cosine similarity `xᵀy / (‖x‖‖y‖)`. A zero vector is a domain error.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("cosine_similarity", x.len(), y.len()));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Unit-normalized copy of `x` and its original norm.
pub(crate) fn normalized(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("cannot normalize a zero or non-finite vector".into()));
    }
    Ok((x.iter().map(|v| v / n).collect(), n))
}

/// Pearson correlation matrix of the columns of `m` (`n × d` → `d × d`).
pub fn correlation_matrix(m: &DenseMatrix) -> Result<DenseMatrix> {
    let z = standardize_columns(m)?.0;
    let n = m.rows() as f64;
    let mut c = z.gram();
    for v in c.as_mut_slice() {
        *v /= n;
    }
    let d = m.cols();
    for a in 0..d {
        c[(a, a)] = 1.0;
        for b in 0..d {
            if a != b {
                c[(a, b)] = c[(a, b)].clamp(-1.0, 1.0);
            }
        }
    }
    Ok(c)
}

/// Column z-scores using the population variance. Returns the standardized
/// matrix and the per-column standard deviations.
pub(crate) fn standardize_columns(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let (n, d) = (m.rows(), m.cols());
    if n < 2 {
        return Err(Error::Domain(format!("correlation needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let mut std = Vec::with_capacity(d);
    for (c, v) in var.iter().enumerate() {
        let s = (v / n as f64).sqrt();
        if !(s > 1e-300) {
            return Err(Error::Domain(format!("column {c} has zero variance")));
        }
        std.push(s);
    }
    let mut z = DenseMatrix::zeros(n, d);
    for r in 0..n {
        for (c, (out, v)) in z.row_mut(r).iter_mut().zip(m.row(r)).enumerate() {
            *out = (v - mean[c]) / std[c];
        }
    }
    Ok((z, std))
}

/// Singular values of `m`, largest first, via the eigenvalues of `mᵀm`.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::NonFinite("singular_values input".into()));
    }
    let eig = symmetric_eigenvalues(&m.gram());
    let mut sv: Vec<f64> = eig.into_iter().map(|e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    let n = a.rows();
    let mut a = a.clone();
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

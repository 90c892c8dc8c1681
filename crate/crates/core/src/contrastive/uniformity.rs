use crate::error::Result;
use crate::numeric::{standardize_columns, DenseMatrix};

/// `‖corr(standardized V)‖_F / d` and its gradient w.r.t. `V`.
pub fn uniformity_loss(v: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let (n, d) = (v.rows(), v.cols());
    let (z, std) = standardize_columns(v)?;
    let mut r = z.gram();
    for x in r.as_mut_slice() {
        *x /= n as f64;
    }
    let f = r.frobenius();
    let loss = f / d as f64;

    // dL/dR = R / (d‖R‖); dL/dZ = 2·Z·(dL/dR)/n since R is symmetric.
    let scale = 2.0 / (n as f64 * d as f64 * f);
    let mut dz = DenseMatrix::zeros(n, d);
    for row in 0..n {
        let zr = z.row(row);
        let out = dz.row_mut(row);
        for (a, &za) in zr.iter().enumerate() {
            if za == 0.0 {
                continue;
            }
            let ra = r.row(a);
            for (o, rab) in out.iter_mut().zip(ra) {
                *o += scale * za * rab;
            }
        }
    }
    // back through the per-column standardization
    let mut grad = DenseMatrix::zeros(n, d);
    for c in 0..d {
        let mean_dz = (0..n).map(|i| dz[(i, c)]).sum::<f64>() / n as f64;
        let mean_dz_z = (0..n).map(|i| dz[(i, c)] * z[(i, c)]).sum::<f64>() / n as f64;
        for i in 0..n {
            grad[(i, c)] = (dz[(i, c)] - mean_dz - z[(i, c)] * mean_dz_z) / std[c];
        }
    }
    Ok((loss, grad))
}

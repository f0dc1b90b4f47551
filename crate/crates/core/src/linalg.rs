//! Small dense linear-algebra helpers over `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Matrix whose columns are the given vectors.
pub fn from_columns(cols: &[Vec<f64>], rows: usize) -> Mat {
    Mat::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

pub fn det(m: &Mat) -> f64 {
    match m.nrows() {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => m.clone().lu().determinant(),
    }
}

/// Largest singular value.
pub fn op_norm(m: &Mat) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("{}x{} matrix is not invertible", m.nrows(), m.ncols())))
}

pub fn solve(m: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = DVector::from_column_slice(b);
    m.clone()
        .lu()
        .solve(&rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .map(|x| x.as_slice().to_vec())
        .ok_or_else(|| Error::Singular("linear solve failed".into()))
}

/// Moore-Penrose pseudo-inverse; singular values below `rel_tol * sigma_max`
/// are treated as zero.
pub fn pinv(m: &Mat, rel_tol: f64) -> Mat {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = rel_tol * smax;
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let k = svd.singular_values.len();
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for s in 0..k {
        let sigma = svd.singular_values[s];
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        for i in 0..m.ncols() {
            for j in 0..m.nrows() {
                out[(i, j)] += vt[(s, i)] * u[(j, s)] / sigma;
            }
        }
    }
    out
}

pub fn mat_vec(m: &Mat, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Central-difference Jacobian of `f: R^n -> R^m` at `x`.
pub fn fd_jacobian<F>(f: F, x: &[f64], m: usize, h: f64) -> Result<Mat>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut jac = Mat::zeros(m, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        let step = h * x[k].abs().max(1.0);
        xp[k] = x[k] + step;
        let fp = f(&xp)?;
        xp[k] = x[k] - step;
        let fm = f(&xp)?;
        xp[k] = x[k];
        for i in 0..m {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinants_match_lu() {
        let m = Mat::from_row_slice(3, 3, &[2.0, 1.0, 0.5, -1.0, 3.0, 2.0, 0.0, 1.0, 4.0]);
        let lu = m.clone().lu().determinant();
        assert!((det(&m) - lu).abs() < 1e-12);
        let m4 = Mat::identity(4, 4) * 2.0;
        assert!((det(&m4) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_gives_min_norm_solution() {
        // underdetermined: x + y = 2 -> min-norm (1, 1)
        let m = Mat::from_row_slice(1, 2, &[1.0, 1.0]);
        let p = pinv(&m, 1e-12);
        let x = mat_vec(&p, &[2.0]);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn op_norm_of_diagonal() {
        let m = Mat::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -5.0]);
        assert!((op_norm(&m) - 5.0).abs() < 1e-12);
    }
}

//! Small dense linear-algebra helpers shared by the sampler and the
//! projection code. Every inverse in the crate goes through a Cholesky
//! factorization obtained here.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative diagonal jitter for the first retry, as a fraction of `trace / dim`.
pub const JITTER_SCALE: f64 = 1e-8;

/// Number of jittered retries after the plain factorization fails.
pub const JITTER_RETRIES: usize = 3;

/// Cholesky factorization with the jitter-retry policy.
///
/// On failure the diagonal is inflated by `1e-8 * trace / dim`, then by ten
/// and a hundred times that amount, before giving up.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let dim = m.nrows().max(1) as f64;
    let trace = m.trace().abs();
    let base = if trace > 0.0 && trace.is_finite() {
        JITTER_SCALE * trace / dim
    } else {
        JITTER_SCALE
    };
    let mut jitter = base;
    for attempt in 1..=JITTER_RETRIES {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(jittered) {
            log::warn!("{what}: Cholesky succeeded after jitter {jitter:.3e} (attempt {attempt})");
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::numerical(format!(
        "{what}: matrix is not positive definite after {JITTER_RETRIES} jittered retries"
    )))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Quadratic form `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        let mut col = 0.0;
        for i in 0..m.nrows() {
            col += m[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}

/// Extracts the sub-matrix with the given rows and columns.
pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Extracts the given columns.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Extracts the given entries.
pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = cholesky(&m, "test").unwrap();
        let l = c.l();
        let back = &l * l.transpose();
        assert!((back - m).abs().max() < 1e-6);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky(&m, "test"), Err(Error::Numerical(_))));
    }

    #[test]
    fn quad_form_matches_matrix_product() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let direct = (x.transpose() * &m * &x)[(0, 0)];
        assert!((quad_form(&m, &x) - direct).abs() < 1e-14);
    }
}

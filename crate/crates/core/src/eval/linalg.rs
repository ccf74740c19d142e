//! Dense symmetric eigendecomposition (cyclic Jacobi).

use super::{EvalError, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues and row-major eigenvector matrix (eigenvectors in columns)
/// of the symmetric `d × d` matrix `a`.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), d * d, "matrix is not d × d");
    let mut m = a.to_vec();
    // Work on the exact symmetric part.
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum();
    if !total.is_finite() {
        return Err(EvalError::NonFinite);
    }
    let tol = total * 1e-30;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * d + j].powi(2)).sum();
        if off <= tol {
            let evals = (0..d).map(|i| m[i * d + i]).collect();
            return Ok((evals, v));
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                m[p * d + q] = 0.0;
                m[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(EvalError::NoConvergence(MAX_SWEEPS))
}

/// Clamps eigenvalues in `[-tol, 0)` to zero, with `tol` relative to the
/// spectrum's magnitude. More negative values are an error.
pub(crate) fn clip_negative(evals: &mut [f64], abs_tol: f64) -> Result<()> {
    let scale = evals.iter().fold(1.0_f64, |m, &x| m.max(x.abs()));
    let tol = abs_tol * scale;
    for e in evals.iter_mut() {
        if *e < 0.0 {
            if *e < -tol {
                return Err(EvalError::NegativeEigenvalue(*e));
            }
            *e = 0.0;
        }
    }
    Ok(())
}

/// Principal square root of a positive semi-definite matrix.
pub fn psd_sqrt(a: &[f64], d: usize, abs_tol: f64) -> Result<Vec<f64>> {
    let (mut evals, vecs) = symmetric_eigen(a, d)?;
    clip_negative(&mut evals, abs_tol)?;
    let roots: Vec<f64> = evals.iter().map(|e| e.sqrt()).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| vecs[i * d + k] * roots[k] * vecs[j * d + k]).sum();
        }
    }
    Ok(out)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

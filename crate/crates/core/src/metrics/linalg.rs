//! Small dense symmetric linear algebra in f64, row-major.

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

pub(crate) fn max_abs(m: &[f64]) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub(crate) fn check_symmetric(m: &[f64], d: usize, tol: f64) -> Result<()> {
    if m.len() != d * d {
        return Err(Error::Argument(format!("expected {d}x{d} matrix, got {} values", m.len())));
    }
    let scale = max_abs(m).max(1.0);
    for i in 0..d {
        for j in i + 1..d {
            if (m[i * d + j] - m[j * d + i]).abs() > tol * scale {
                return Err(Error::Argument(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    m[i * d + j],
                    m[j * d + i]
                )));
            }
        }
    }
    Ok(())
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

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(m: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = m.to_vec();
    // Average the two triangles so rounding asymmetry cannot accumulate.
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = s;
            a[j * d + i] = s;
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if total == 0.0 {
        return Ok((vec![0.0; d], v));
    }
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total {
            return Ok(((0..d).map(|i| a[i * d + i]).collect(), v));
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi eigen-decomposition did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Rebuilds `V diag(f(λ)) Vᵀ`.
fn spectral_map(vals: &[f64], vecs: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let fv: Vec<f64> = vals.iter().map(|&l| f(l)).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| vecs[i * d + k] * fv[k] * vecs[j * d + k]).sum();
        }
    }
    out
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Negative eigenvalues, which only arise from rounding, are clamped to 0.
pub fn matrix_sqrt_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    check_symmetric(m, d, 1e-9)?;
    let (vals, vecs) = symmetric_eigen(m, d)?;
    Ok(spectral_map(&vals, &vecs, d, |l| l.max(0.0).sqrt()))
}

/// Trace of the principal square root of a symmetric PSD matrix.
pub(crate) fn trace_sqrt_psd(m: &[f64], d: usize) -> Result<f64> {
    let (vals, _) = symmetric_eigen(m, d)?;
    let top = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = -1e-7 * top.max(1.0);
    let mut sum = 0.0;
    for l in vals {
        if l < floor {
            return Err(Error::Numeric(format!(
                "matrix has eigenvalue {l:e}, not positive semidefinite"
            )));
        }
        sum += l.max(0.0).sqrt();
    }
    Ok(sum)
}

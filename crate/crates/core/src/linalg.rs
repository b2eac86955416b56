//! Numerical kernels: full symmetric spectrum, conjugate gradients and small
//! least-squares problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const QL_MAX_ITER: usize = 60;

/// All eigenvalues of a dense symmetric matrix (row-major, `n * n`), ascending.
///
/// Householder reduction to tridiagonal form followed by implicit-shift QL.
/// The input is consumed as workspace.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok(Vec::new());
    }
    let (mut d, mut e) = householder_tridiagonal(&mut a, n);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(|x, y| x.total_cmp(y));
    Ok(d)
}

/// Reduces `a` to tridiagonal form; returns (diagonal, subdiagonal) with
/// `e[i]` coupling rows `i - 1` and `i` (`e[0] = 0`).
fn householder_tridiagonal(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i * n + k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j * n + k] * a[i * n + k];
                    }
                    for k in j + 1..=l {
                        g += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g / h;
                    f += e[j] * a[i * n + j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    for i in 0..n {
        d[i] = a[i * n + i];
    }
    e[0] = 0.0;
    (d, e)
}

/// Implicit QL on a symmetric tridiagonal matrix; eigenvalues land in `d`.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
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
            if iter == QL_MAX_ITER {
                return Err(Error::ConvergenceFailure { index: l, iterations: iter });
            }
            iter += 1;
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
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
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Conjugate gradients for a symmetric positive-definite operator.
pub fn conjugate_gradient(
    matvec: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let bnorm = rr.sqrt().max(f64::MIN_POSITIVE);
    let mut it = 0;
    while it < max_iter && rr.sqrt() > tol * bnorm {
        matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        it += 1;
    }
    CgOutcome { x, iterations: it, residual_norm: rr.sqrt() }
}

/// Least squares of `y` on the given regressor columns via normal equations.
///
/// Fails with `SingularRegressor` when the columns are (numerically) collinear.
pub fn least_squares(cols: &[&[f64]], y: &[f64]) -> Result<Vec<f64>> {
    let k = cols.len();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for a in 0..k {
        for b in 0..=a {
            let v: f64 = cols[a].iter().zip(cols[b]).map(|(p, q)| p * q).sum();
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        xty[a] = cols[a].iter().zip(y).map(|(p, q)| p * q).sum();
    }
    let scale: Vec<f64> = (0..k).map(|a| gram[(a, a)].sqrt()).collect();
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::SingularRegressor("zero regressor column".into()));
    }
    for a in 0..k {
        for b in 0..k {
            gram[(a, b)] /= scale[a] * scale[b];
        }
        xty[a] /= scale[a];
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularRegressor("regressor Gram matrix not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if min_pivot < 1e-7 {
        return Err(Error::SingularRegressor(format!("collinear regressors (pivot {min_pivot:e})")));
    }
    let sol = chol.solve(&xty);
    Ok((0..k).map(|a| sol[a] / scale[a]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_matches_nalgebra_on_random_symmetric() {
        let n = 17;
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = next();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let reference = DMatrix::from_row_slice(n, n, &a).symmetric_eigen();
        let mut expected: Vec<f64> = reference.eigenvalues.iter().copied().collect();
        expected.sort_by(|x, y| x.total_cmp(y));
        let got = symmetric_eigenvalues(a, n).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn diagonal_and_trivial_inputs() {
        assert_eq!(symmetric_eigenvalues(vec![3.0], 1).unwrap(), vec![3.0]);
        let got = symmetric_eigenvalues(vec![2.0, 0.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(got, vec![-1.0, 2.0]);
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let out = conjugate_gradient(
            |v, out| {
                out[0] = a[0] * v[0] + a[1] * v[1];
                out[1] = a[2] * v[0] + a[3] * v[1];
            },
            &[1.0, 2.0],
            1e-14,
            50,
        );
        assert!((out.x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((out.x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_detects_collinearity() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let x2 = [2.0, 4.0, 6.0, 8.0];
        let y = [1.0, 0.0, 2.0, 5.0];
        assert!(matches!(least_squares(&[&x, &x2], &y), Err(Error::SingularRegressor(_))));
        let ones = [1.0; 4];
        let b = least_squares(&[&ones, &x], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }
}

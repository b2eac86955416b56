//! Dense batched kernels. Matrices are row-major `rows × cols`; batched
//! vectors are `batch × dim`, contiguous per row.

/// `out[b, r] += Σ_c w[r, c] · x[b, c]`
pub(crate) fn affine_acc(out: &mut [f64], x: &[f64], w: &[f64], rows: usize, cols: usize) {
    debug_assert_eq!(w.len(), rows * cols);
    for (xb, ob) in x.chunks_exact(cols).zip(out.chunks_exact_mut(rows)) {
        for (o, wr) in ob.iter_mut().zip(w.chunks_exact(cols)) {
            let mut s = 0.0;
            for (a, b) in wr.iter().zip(xb) {
                s += a * b;
            }
            *o += s;
        }
    }
}

/// Gradients of `affine_acc`: `dw += dᵀx` and, when requested, `dx += d·w`.
pub(crate) fn affine_back(d: &[f64], x: &[f64], w: &[f64], dw: &mut [f64], dx: Option<&mut [f64]>, rows: usize, cols: usize) {
    for (db, xb) in d.chunks_exact(rows).zip(x.chunks_exact(cols)) {
        for (&g, dwr) in db.iter().zip(dw.chunks_exact_mut(cols)) {
            if g == 0.0 {
                continue;
            }
            for (a, b) in dwr.iter_mut().zip(xb) {
                *a += g * b;
            }
        }
    }
    if let Some(dx) = dx {
        for (db, dxb) in d.chunks_exact(rows).zip(dx.chunks_exact_mut(cols)) {
            for (&g, wr) in db.iter().zip(w.chunks_exact(cols)) {
                if g == 0.0 {
                    continue;
                }
                for (a, b) in dxb.iter_mut().zip(wr) {
                    *a += g * b;
                }
            }
        }
    }
}

pub(crate) fn broadcast_bias(out: &mut [f64], bias: &[f64]) {
    for ob in out.chunks_exact_mut(bias.len()) {
        ob.copy_from_slice(bias);
    }
}

pub(crate) fn bias_back(d: &[f64], db: &mut [f64]) {
    for row in d.chunks_exact(db.len()) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_naive() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        affine_acc(&mut out, &x, &w, 2, 3);
        assert_eq!(out, vec![-1.0, 0.5, 5.0, 14.0]);
        let d = [1.0, 0.0, 0.0, 1.0];
        let mut dw = vec![0.0; 6];
        let mut dx = vec![0.0; 6];
        affine_back(&d, &x, &w, &mut dw, Some(&mut dx), 2, 3);
        assert_eq!(dw, vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        assert_eq!(dx, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }
}

//! Multi-head scaled dot-product self-attention without positional encoding.

use std::ops::Range;

use super::kernels::{affine_acc, affine_back, all_finite};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Attention {
    pub input: usize,
    pub heads: usize,
    pub dk: usize,
    pub base: usize,
}

pub(crate) struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `(b, head, t, s)` row-major.
    pub alpha: Vec<f64>,
}

impl Attention {
    pub(crate) fn width(&self) -> usize {
        self.heads * self.dk
    }

    /// Ranges of `W_Q`, `W_K`, `W_V`, each `(heads·d_k) × input`.
    pub(crate) fn ranges(&self) -> [Range<usize>; 3] {
        let m = self.width() * self.input;
        [self.base..self.base + m, self.base + m..self.base + 2 * m, self.base + 2 * m..self.base + 3 * m]
    }

    pub(crate) fn forward(&self, p: &[f64], inp: &[f64], t: usize, b: usize) -> Result<(Vec<f64>, AttnCache)> {
        let hk = self.width();
        let [rq, rk, rv] = self.ranges();
        let mut q = vec![0.0; t * b * hk];
        let mut k = vec![0.0; t * b * hk];
        let mut v = vec![0.0; t * b * hk];
        affine_acc(&mut q, inp, &p[rq], hk, self.input);
        affine_acc(&mut k, inp, &p[rk], hk, self.input);
        affine_acc(&mut v, inp, &p[rv], hk, self.input);
        let scale = 1.0 / (self.dk as f64).sqrt();
        let mut alpha = vec![0.0; b * self.heads * t * t];
        let mut out = vec![0.0; t * b * hk];
        let at = |ti: usize, bi: usize, h: usize| (ti * b + bi) * hk + h * self.dk;
        for bi in 0..b {
            for h in 0..self.heads {
                for ti in 0..t {
                    let row = &mut alpha[((bi * self.heads + h) * t + ti) * t..][..t];
                    let qi = &q[at(ti, bi, h)..][..self.dk];
                    for (s, e) in row.iter_mut().enumerate() {
                        let ks = &k[at(s, bi, h)..][..self.dk];
                        *e = qi.iter().zip(ks).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &c| a.max(c));
                    let mut z = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - m).exp();
                        z += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= z);
                    let o = at(ti, bi, h);
                    for (s, &a) in row.iter().enumerate() {
                        let vs = at(s, bi, h);
                        for j in 0..self.dk {
                            out[o + j] += a * v[vs + j];
                        }
                    }
                }
            }
        }
        if !all_finite(&out) {
            return Err(Error::NonFiniteActivation { step: 0 });
        }
        Ok((out, AttnCache { q, k, v, alpha }))
    }

    pub(crate) fn backward(&self, p: &[f64], grad: &mut [f64], inp: &[f64], cache: &AttnCache, dout: &[f64], t: usize, b: usize) {
        let hk = self.width();
        let scale = 1.0 / (self.dk as f64).sqrt();
        let mut dq = vec![0.0; t * b * hk];
        let mut dk = vec![0.0; t * b * hk];
        let mut dv = vec![0.0; t * b * hk];
        let at = |ti: usize, bi: usize, h: usize| (ti * b + bi) * hk + h * self.dk;
        let mut dalpha = vec![0.0; t];
        for bi in 0..b {
            for h in 0..self.heads {
                for ti in 0..t {
                    let row = &cache.alpha[((bi * self.heads + h) * t + ti) * t..][..t];
                    let o = at(ti, bi, h);
                    let dot_ = &dout[o..o + self.dk];
                    let mut acc = 0.0;
                    for s in 0..t {
                        let vs = at(s, bi, h);
                        let mut da = 0.0;
                        for j in 0..self.dk {
                            da += dot_[j] * cache.v[vs + j];
                            dv[vs + j] += row[s] * dot_[j];
                        }
                        dalpha[s] = da;
                        acc += row[s] * da;
                    }
                    for s in 0..t {
                        let de = row[s] * (dalpha[s] - acc) * scale;
                        if de == 0.0 {
                            continue;
                        }
                        let ks = at(s, bi, h);
                        for j in 0..self.dk {
                            dq[o + j] += de * cache.k[ks + j];
                            dk[ks + j] += de * cache.q[o + j];
                        }
                    }
                }
            }
        }
        for (r, d) in self.ranges().into_iter().zip([&dq, &dk, &dv]) {
            affine_back(d, inp, &p[r.clone()], &mut grad[r], None, hk, self.input);
        }
    }
}

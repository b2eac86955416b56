//! Single recurrent layers (Elman, GRU, LSTM) over batched sequences.
//!
//! Sequences are position-major: element `(t, b, j)` lives at `(t·B + b)·dim + j`.

use std::ops::Range;

use super::kernels::{affine_acc, affine_back, all_finite, bias_back, broadcast_bias, sigmoid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub(crate) fn gate_names(self) -> &'static [[&'static str; 3]] {
        match self {
            CellKind::Rnn => &[["W_x", "W_h", "b_h"]],
            CellKind::Gru => &[["W_r", "U_r", "b_r"], ["W_z", "U_z", "b_z"], ["W_h", "U_h", "b_h"]],
            CellKind::Lstm => &[["W_f", "U_f", "b_f"], ["W_i", "U_i", "b_i"], ["W_o", "U_o", "b_o"], ["W_c", "U_c", "b_c"]],
        }
    }

    fn gates(self) -> usize {
        self.gate_names().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Recurrent {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub base: usize,
}

pub(crate) struct RecCache {
    hs: Vec<f64>,
    cs: Vec<f64>,
    gates: Vec<Vec<f64>>,
    aux: Vec<f64>,
}

impl Recurrent {
    pub(crate) fn gate_size(&self) -> usize {
        self.hidden * self.input + self.hidden * self.hidden + self.hidden
    }

    /// Ranges of `(W, U, b)` for gate `g` in the flat parameter vector.
    pub(crate) fn ranges(&self, g: usize) -> [Range<usize>; 3] {
        let (h, d) = (self.hidden, self.input);
        let w = self.base + g * self.gate_size();
        let u = w + h * d;
        let b = u + h * h;
        [w..u, u..b, b..b + h]
    }

    fn preact(&self, p: &[f64], g: usize, out: &mut [f64], x: &[f64], hin: &[f64]) {
        let [w, u, b] = self.ranges(g);
        broadcast_bias(out, &p[b]);
        affine_acc(out, x, &p[w], self.hidden, self.input);
        affine_acc(out, hin, &p[u], self.hidden, self.hidden);
    }

    /// Gradients for one gate given its pre-activation gradient `da`.
    fn gate_back(&self, p: &[f64], grad: &mut [f64], g: usize, da: &[f64], x: &[f64], hin: &[f64], dx: Option<&mut [f64]>, dh: &mut [f64]) {
        let [w, u, b] = self.ranges(g);
        affine_back(da, x, &p[w.clone()], &mut grad[w], dx, self.hidden, self.input);
        affine_back(da, hin, &p[u.clone()], &mut grad[u], Some(dh), self.hidden, self.hidden);
        bias_back(da, &mut grad[b]);
    }

    /// Runs the layer over `t` positions of a batch of `b` sequences, in
    /// reverse position order when `reverse`. Output is position-indexed.
    pub(crate) fn forward(&self, p: &[f64], inp: &[f64], t: usize, b: usize, reverse: bool) -> Result<(Vec<f64>, RecCache)> {
        let (h, d) = (self.hidden, self.input);
        let bh = b * h;
        let mut hs = vec![0.0; (t + 1) * bh];
        let mut cs = if self.kind == CellKind::Lstm { vec![0.0; (t + 1) * bh] } else { Vec::new() };
        let mut gates = vec![vec![0.0; t * bh]; self.kind.gates()];
        let mut aux = if self.kind == CellKind::Rnn { Vec::new() } else { vec![0.0; t * bh] };
        let mut out = vec![0.0; t * bh];
        for k in 0..t {
            let pos = if reverse { t - 1 - k } else { k };
            let x = &inp[pos * b * d..(pos + 1) * b * d];
            let (prev, next) = hs.split_at_mut((k + 1) * bh);
            let hprev = &prev[k * bh..];
            let hnext = &mut next[..bh];
            let cur = k * bh..(k + 1) * bh;
            match self.kind {
                CellKind::Rnn => {
                    let a = &mut gates[0][cur];
                    self.preact(p, 0, a, x, hprev);
                    for (o, v) in hnext.iter_mut().zip(a.iter_mut()) {
                        *v = v.tanh();
                        *o = *v;
                    }
                }
                CellKind::Gru => {
                    for g in 0..2 {
                        let a = &mut gates[g][cur.clone()];
                        self.preact(p, g, a, x, hprev);
                        a.iter_mut().for_each(|v| *v = sigmoid(*v));
                    }
                    let rh = &mut aux[cur.clone()];
                    for ((o, r), hp) in rh.iter_mut().zip(&gates[0][cur.clone()]).zip(hprev) {
                        *o = r * hp;
                    }
                    let (zr, nr) = gates.split_at_mut(2);
                    let n = &mut nr[0][cur.clone()];
                    self.preact(p, 2, n, x, rh);
                    n.iter_mut().for_each(|v| *v = v.tanh());
                    let z = &zr[1][cur.clone()];
                    for j in 0..bh {
                        hnext[j] = (1.0 - z[j]) * hprev[j] + z[j] * n[j];
                    }
                }
                CellKind::Lstm => {
                    for g in 0..4 {
                        let a = &mut gates[g][cur.clone()];
                        self.preact(p, g, a, x, hprev);
                        if g < 3 {
                            a.iter_mut().for_each(|v| *v = sigmoid(*v));
                        } else {
                            a.iter_mut().for_each(|v| *v = v.tanh());
                        }
                    }
                    let (cprev, cnext) = cs.split_at_mut((k + 1) * bh);
                    let cprev = &cprev[k * bh..];
                    let cnext = &mut cnext[..bh];
                    let (f, i, o, c) = (&gates[0][cur.clone()], &gates[1][cur.clone()], &gates[2][cur.clone()], &gates[3][cur.clone()]);
                    let tc = &mut aux[cur.clone()];
                    for j in 0..bh {
                        cnext[j] = f[j] * cprev[j] + i[j] * c[j];
                        tc[j] = cnext[j].tanh();
                        hnext[j] = o[j] * tc[j];
                    }
                }
            }
            if !all_finite(hnext) {
                return Err(Error::NonFiniteActivation { step: pos });
            }
            out[pos * bh..(pos + 1) * bh].copy_from_slice(hnext);
        }
        Ok((out, RecCache { hs, cs, gates, aux }))
    }

    /// Accumulates parameter gradients into `grad` and, when given, input
    /// gradients into `dinp`, from position-indexed output gradients `dout`.
    pub(crate) fn backward(
        &self,
        p: &[f64],
        grad: &mut [f64],
        inp: &[f64],
        cache: &RecCache,
        dout: &[f64],
        t: usize,
        b: usize,
        reverse: bool,
        mut dinp: Option<&mut [f64]>,
    ) {
        let (h, d) = (self.hidden, self.input);
        let bh = b * h;
        let mut dh = vec![0.0; bh];
        let mut dc = vec![0.0; bh];
        let mut da = vec![vec![0.0; bh]; self.kind.gates()];
        let mut dhp = vec![0.0; bh];
        for k in (0..t).rev() {
            let pos = if reverse { t - 1 - k } else { k };
            let x = &inp[pos * b * d..(pos + 1) * b * d];
            let hprev = &cache.hs[k * bh..(k + 1) * bh];
            let cur = k * bh..(k + 1) * bh;
            for (a, g) in dh.iter_mut().zip(&dout[pos * bh..(pos + 1) * bh]) {
                *a += g;
            }
            dhp.iter_mut().for_each(|v| *v = 0.0);
            let xr = pos * b * d..(pos + 1) * b * d;
            match self.kind {
                CellKind::Rnn => {
                    let a = &cache.gates[0][cur];
                    for j in 0..bh {
                        da[0][j] = dh[j] * (1.0 - a[j] * a[j]);
                    }
                    self.gate_back(p, grad, 0, &da[0], x, hprev, dinp.as_deref_mut().map(|v| &mut v[xr]), &mut dhp);
                }
                CellKind::Gru => {
                    let (r, z, n) = (&cache.gates[0][cur.clone()], &cache.gates[1][cur.clone()], &cache.gates[2][cur.clone()]);
                    let rh = &cache.aux[cur.clone()];
                    for j in 0..bh {
                        da[2][j] = dh[j] * z[j] * (1.0 - n[j] * n[j]);
                        da[1][j] = dh[j] * (n[j] - hprev[j]) * z[j] * (1.0 - z[j]);
                        dhp[j] = dh[j] * (1.0 - z[j]);
                    }
                    let mut drh = vec![0.0; bh];
                    self.gate_back(p, grad, 2, &da[2], x, rh, dinp.as_deref_mut().map(|v| &mut v[xr.clone()]), &mut drh);
                    for j in 0..bh {
                        da[0][j] = drh[j] * hprev[j] * r[j] * (1.0 - r[j]);
                        dhp[j] += drh[j] * r[j];
                    }
                    for g in 0..2 {
                        self.gate_back(p, grad, g, &da[g], x, hprev, dinp.as_deref_mut().map(|v| &mut v[xr.clone()]), &mut dhp);
                    }
                }
                CellKind::Lstm => {
                    let (f, i, o, c) =
                        (&cache.gates[0][cur.clone()], &cache.gates[1][cur.clone()], &cache.gates[2][cur.clone()], &cache.gates[3][cur.clone()]);
                    let tc = &cache.aux[cur.clone()];
                    let cprev = &cache.cs[k * bh..(k + 1) * bh];
                    for j in 0..bh {
                        dc[j] += dh[j] * o[j] * (1.0 - tc[j] * tc[j]);
                        da[0][j] = dc[j] * cprev[j] * f[j] * (1.0 - f[j]);
                        da[1][j] = dc[j] * c[j] * i[j] * (1.0 - i[j]);
                        da[2][j] = dh[j] * tc[j] * o[j] * (1.0 - o[j]);
                        da[3][j] = dc[j] * i[j] * (1.0 - c[j] * c[j]);
                        dc[j] *= f[j];
                    }
                    for g in 0..4 {
                        self.gate_back(p, grad, g, &da[g], x, hprev, dinp.as_deref_mut().map(|v| &mut v[xr.clone()]), &mut dhp);
                    }
                }
            }
            std::mem::swap(&mut dh, &mut dhp);
        }
    }
}

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::Attention;
use super::kernels::all_finite;
use super::recurrent::{CellKind, RecCache, Recurrent};
use crate::error::{Error, Result};
use crate::panel::Panel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "BiLSTM")]
    BiLstm,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "Transformer")]
    Transformer,
}

impl Architecture {
    pub const ALL: [Architecture; 5] =
        [Architecture::Rnn, Architecture::Lstm, Architecture::BiLstm, Architecture::Gru, Architecture::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Rnn => "RNN",
            Architecture::Lstm => "LSTM",
            Architecture::BiLstm => "BiLSTM",
            Architecture::Gru => "GRU",
            Architecture::Transformer => "Transformer",
        }
    }

    /// Whether a full-sequence pass lets position t see later inputs.
    pub fn is_bidirectional(self) -> bool {
        matches!(self, Architecture::BiLstm | Architecture::Transformer)
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    NlOnly,
    NlLaggedIncome,
}

impl FeatureSet {
    pub fn input_dim(self) -> usize {
        match self {
            FeatureSet::NlOnly => 1,
            FeatureSet::NlLaggedIncome => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub architecture: Architecture,
    pub hidden: usize,
    pub heads: usize,
    pub d_k: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub features: FeatureSet,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Gru,
            hidden: 32,
            heads: 4,
            d_k: 8,
            dropout: 0.2,
            learning_rate: 5e-4,
            clip_norm: 0.91,
            epochs: 300,
            batch_size: 64,
            features: FeatureSet::NlOnly,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self { architecture, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 {
            return bad("hidden size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.architecture == Architecture::Transformer && (self.heads == 0 || self.d_k == 0) {
            return bad("attention needs at least one head of positive key dimension".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Structure {
    attn: Option<Attention>,
    layers: Vec<(Recurrent, bool)>,
    head_in: usize,
    head_w: usize,
    head_b: usize,
    layout: Vec<TensorSpec>,
    n_params: usize,
}

fn build(config: &NetConfig, input_dim: usize) -> Structure {
    let h = config.hidden;
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |layout: &mut Vec<TensorSpec>, name: String, rows: usize, cols: usize| {
        layout.push(TensorSpec { name, rows, cols, offset });
        offset += rows * cols;
        offset - rows * cols
    };
    let mut attn = None;
    let mut rec_input = input_dim;
    if config.architecture == Architecture::Transformer {
        let a = Attention { input: input_dim, heads: config.heads, dk: config.d_k, base: 0 };
        let base = push(&mut layout, "W_Q".into(), a.width(), input_dim);
        push(&mut layout, "W_K".into(), a.width(), input_dim);
        push(&mut layout, "W_V".into(), a.width(), input_dim);
        rec_input = a.width();
        attn = Some(Attention { base, ..a });
    }
    let (kind, dirs): (CellKind, &[(&str, bool)]) = match config.architecture {
        Architecture::Rnn => (CellKind::Rnn, &[("", false)]),
        Architecture::Lstm => (CellKind::Lstm, &[("", false)]),
        Architecture::BiLstm => (CellKind::Lstm, &[("fwd.", false), ("bwd.", true)]),
        Architecture::Gru | Architecture::Transformer => (CellKind::Gru, &[("", false)]),
    };
    let mut layers = Vec::new();
    for &(prefix, reverse) in dirs {
        let mut base = None;
        for [w, u, b] in kind.gate_names() {
            let o = push(&mut layout, format!("{prefix}{w}"), h, rec_input);
            base.get_or_insert(o);
            push(&mut layout, format!("{prefix}{u}"), h, h);
            push(&mut layout, format!("{prefix}{b}"), h, 1);
        }
        layers.push((Recurrent { kind, input: rec_input, hidden: h, base: base.unwrap() }, reverse));
    }
    let head_in = h * layers.len();
    let head_w = push(&mut layout, "W_y".into(), 1, head_in);
    let head_b = push(&mut layout, "b_y".into(), 1, 1);
    Structure { attn, layers, head_in, head_w, head_b, layout, n_params: offset }
}

/// A batch of `b` equal-length sequences, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub t: usize,
    pub b: usize,
    pub f: usize,
    /// `(t, b, f)` at `(t·B + b)·F + f`.
    pub x: Vec<f64>,
    /// `(t, b)` at `t·B + b`.
    pub y: Vec<f64>,
}

/// Per-unit feature and target sequences, unit-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub unit_ids: Vec<String>,
    pub years: Vec<i32>,
    pub f: usize,
    /// `(unit, t, f)` at `(unit·T + t)·F + f`.
    pub x: Vec<f64>,
    /// `(unit, t)` at `unit·T + t`.
    pub y: Vec<f64>,
}

impl SequenceData {
    /// Builds sequences from standardized panels. With lagged income, the
    /// first position's lag is 0, the training mean in standardized units.
    pub fn from_panels(nl: &Panel, income: &Panel, features: FeatureSet) -> Result<Self> {
        if !nl.same_shape(income) {
            return Err(Error::UnitMismatch("nightlight and income panels differ in units or years".into()));
        }
        let f = features.input_dim();
        let t = nl.n_years();
        let mut x = Vec::with_capacity(nl.n_units() * t * f);
        for i in 0..nl.n_units() {
            let (xr, yr) = (nl.row(i), income.row(i));
            for k in 0..t {
                x.push(xr[k]);
                if f == 2 {
                    x.push(if k == 0 { 0.0 } else { yr[k - 1] });
                }
            }
        }
        Ok(Self { unit_ids: nl.unit_ids().to_vec(), years: nl.years().to_vec(), f, x, y: income.values().to_vec() })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn t(&self) -> usize {
        self.years.len()
    }

    pub fn unit_x(&self, i: usize) -> &[f64] {
        let w = self.t() * self.f;
        &self.x[i * w..(i + 1) * w]
    }

    /// Gathers the first `len` positions of the given units.
    pub fn batch(&self, units: &[usize], len: usize) -> Batch {
        let (t, f, b) = (self.t(), self.f, units.len());
        let mut x = vec![0.0; len * b * f];
        let mut y = vec![0.0; len * b];
        for (bi, &u) in units.iter().enumerate() {
            for k in 0..len {
                let src = (u * t + k) * f;
                x[(k * b + bi) * f..][..f].copy_from_slice(&self.x[src..src + f]);
                y[k * b + bi] = self.y[u * t + k];
            }
        }
        Batch { t: len, b, f, x, y }
    }
}

pub(crate) struct Tape {
    attn: Option<(Vec<f64>, super::attention::AttnCache)>,
    rec: Vec<(Vec<f64>, RecCache)>,
    head_in: Vec<f64>,
    mask: Option<Vec<f64>>,
    pub yhat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub config: NetConfig,
    pub input_dim: usize,
    pub(crate) structure: Structure,
    pub(crate) params: Vec<f64>,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
    pub(crate) step: u64,
}

impl SequenceModel {
    /// Fresh model with uniform ±√(6/(fan_in+fan_out)) weights, zero biases
    /// and LSTM forget biases of +1, drawn from the config seed.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let input_dim = config.features.input_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let structure = build(&config, input_dim);
        let mut params = vec![0.0; structure.n_params];
        for spec in &structure.layout {
            let base = spec.name.rsplit('.').next().unwrap_or(&spec.name);
            if base.starts_with('b') {
                if base == "b_f" {
                    params[spec.range()].iter_mut().for_each(|v| *v = 1.0);
                }
                continue;
            }
            let bound = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            for v in &mut params[spec.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let n = params.len();
        Ok(Self { config, input_dim, structure, params, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0 })
    }

    pub(crate) fn from_parts(config: NetConfig, params: Vec<f64>, adam_m: Vec<f64>, adam_v: Vec<f64>, step: u64) -> Result<Self> {
        config.validate()?;
        let input_dim = config.features.input_dim();
        let structure = build(&config, input_dim);
        if [params.len(), adam_m.len(), adam_v.len()].iter().any(|&l| l != structure.n_params) {
            return Err(Error::Shape(format!("expected {} parameters", structure.n_params)));
        }
        Ok(Self { config, input_dim, structure, params, adam_m, adam_v, step })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.structure.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn adam_step(&self) -> u64 {
        self.step
    }

    fn spec(&self, name: &str) -> Result<&TensorSpec> {
        self.structure
            .layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name:?} in {}", self.architecture().name())))
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        let r = self.spec(name)?.range();
        Ok(&self.params[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.spec(name)?.range();
        Ok(&mut self.params[r])
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn run(&self, x: &[f64], t: usize, b: usize, mask: Option<Vec<f64>>) -> Result<Tape> {
        if x.len() != t * b * self.input_dim {
            return Err(Error::Shape(format!("input has {} values, expected {}", x.len(), t * b * self.input_dim)));
        }
        let p = &self.params;
        let attn = match &self.structure.attn {
            Some(a) => Some(a.forward(p, x, t, b)?),
            None => None,
        };
        let rec_in: &[f64] = attn.as_ref().map(|(o, _)| o.as_slice()).unwrap_or(x);
        let mut rec = Vec::with_capacity(self.structure.layers.len());
        for (layer, reverse) in &self.structure.layers {
            rec.push(layer.forward(p, rec_in, t, b, *reverse)?);
        }
        let hh = self.structure.head_in;
        let h = self.config.hidden;
        let mut head_in = vec![0.0; t * b * hh];
        for (l, (out, _)) in rec.iter().enumerate() {
            for (dst, src) in head_in.chunks_exact_mut(hh).zip(out.chunks_exact(h)) {
                dst[l * h..(l + 1) * h].copy_from_slice(src);
            }
        }
        if let Some(m) = &mask {
            head_in.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let w = &p[self.structure.head_w..self.structure.head_w + hh];
        let bias = p[self.structure.head_b];
        let yhat: Vec<f64> = head_in.chunks_exact(hh).map(|r| bias + r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>()).collect();
        if let Some(pos) = yhat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { step: pos / b });
        }
        Ok(Tape { attn, rec, head_in, mask, yhat })
    }

    pub(crate) fn backprop(&self, tape: &Tape, x: &[f64], dy: &[f64], t: usize, b: usize) -> Vec<f64> {
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let hh = self.structure.head_in;
        let h = self.config.hidden;
        let hw = self.structure.head_w;
        {
            let (gw, gb) = grad.split_at_mut(self.structure.head_b);
            let gw = &mut gw[hw..hw + hh];
            for (&d, r) in dy.iter().zip(tape.head_in.chunks_exact(hh)) {
                gb[0] += d;
                gw.iter_mut().zip(r).for_each(|(g, v)| *g += d * v);
            }
        }
        let w = &p[hw..hw + hh];
        let n_layers = self.structure.layers.len();
        let mut douts = vec![vec![0.0; t * b * h]; n_layers];
        for (n, &d) in dy.iter().enumerate() {
            for l in 0..n_layers {
                let dst = &mut douts[l][n * h..(n + 1) * h];
                for j in 0..h {
                    let k = l * h + j;
                    let m = tape.mask.as_ref().map_or(1.0, |m| m[n * hh + k]);
                    dst[j] = d * w[k] * m;
                }
            }
        }
        let rec_in: &[f64] = tape.attn.as_ref().map(|(o, _)| o.as_slice()).unwrap_or(x);
        let mut drec_in = tape.attn.as_ref().map(|(o, _)| vec![0.0; o.len()]);
        for ((layer, reverse), ((_, cache), dout)) in self.structure.layers.iter().zip(tape.rec.iter().zip(&douts)) {
            layer.backward(p, &mut grad, rec_in, cache, dout, t, b, *reverse, drec_in.as_deref_mut());
        }
        if let (Some(a), Some((_, cache)), Some(da)) = (&self.structure.attn, &tape.attn, &drec_in) {
            a.backward(p, &mut grad, x, cache, da, t, b);
        }
        grad
    }

    /// Mean squared error over all positions of the batch and its gradient,
    /// with dropout disabled.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.loss_and_gradient_masked(batch, None)
    }

    pub(crate) fn loss_and_gradient_masked(&self, batch: &Batch, mask: Option<Vec<f64>>) -> Result<(f64, Vec<f64>)> {
        let tape = self.run(&batch.x, batch.t, batch.b, mask)?;
        let n = (batch.t * batch.b) as f64;
        let mut loss = 0.0;
        let dy: Vec<f64> = tape
            .yhat
            .iter()
            .zip(&batch.y)
            .map(|(p, y)| {
                let e = p - y;
                loss += e * e;
                2.0 * e / n
            })
            .collect();
        let grad = self.backprop(&tape, &batch.x, &dy, batch.t, batch.b);
        Ok((loss / n, grad))
    }

    /// Mean squared error over all positions of the batch, dropout disabled.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let tape = self.run(&batch.x, batch.t, batch.b, None)?;
        Ok(tape.yhat.iter().zip(&batch.y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / (batch.t * batch.b) as f64)
    }

    fn unit_len(&self, x: &[f64]) -> Result<usize> {
        if x.len() % self.input_dim != 0 {
            return Err(Error::Shape(format!("input length {} not a multiple of {}", x.len(), self.input_dim)));
        }
        Ok(x.len() / self.input_dim)
    }

    /// Full-sequence pass over a single unit (`x` is `T × F`); position t may
    /// see later inputs for bidirectional architectures.
    pub fn forward_full(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.unit_len(x)?;
        Ok(self.run(x, t, 1, None)?.yhat)
    }

    pub fn forward_causal(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.architecture().is_bidirectional() {
            return Err(Error::Config(format!("{} is not a causal architecture", self.architecture().name())));
        }
        self.forward_full(x)
    }

    pub fn forward_bidirectional(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.architecture().is_bidirectional() {
            return Err(Error::Config(format!("{} is not a bidirectional architecture", self.architecture().name())));
        }
        self.forward_full(x)
    }

    /// Prediction at each position t from the input truncated to `x₁..x_t`.
    pub fn predict_iterative(&self, x: &[f64], positions: &[usize]) -> Result<Vec<f64>> {
        let t = self.unit_len(x)?;
        positions
            .iter()
            .map(|&p| {
                if p >= t {
                    return Err(Error::Shape(format!("position {p} beyond sequence length {t}")));
                }
                let out = self.forward_full(&x[..(p + 1) * self.input_dim])?;
                Ok(out[p])
            })
            .collect()
    }

    /// Attention weights `(head, t, s)` for a single unit.
    pub fn attention_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let a = self
            .structure
            .attn
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no attention block", self.architecture().name())))?;
        let t = self.unit_len(x)?;
        Ok(a.forward(&self.params, x, t, 1)?.1.alpha)
    }

    /// Leakage-safe predictions for every unit at the given positions:
    /// a single causal pass, or one truncated pass per position for
    /// bidirectional architectures. Returns `unit × positions`.
    pub fn predict_positions(&self, data: &SequenceData, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 256;
        let n = data.n_units();
        let mut out = vec![Vec::with_capacity(positions.len()); n];
        let all: Vec<usize> = (0..n).collect();
        for units in all.chunks(CHUNK) {
            if self.architecture().is_bidirectional() {
                for &p in positions {
                    let batch = data.batch(units, p + 1);
                    let yhat = self.run(&batch.x, batch.t, batch.b, None)?.yhat;
                    for (bi, &u) in units.iter().enumerate() {
                        out[u].push(yhat[p * batch.b + bi]);
                    }
                }
            } else {
                let len = positions.iter().max().map_or(0, |m| m + 1);
                let batch = data.batch(units, len);
                let yhat = self.run(&batch.x, batch.t, batch.b, None)?.yhat;
                for (bi, &u) in units.iter().enumerate() {
                    out[u].extend(positions.iter().map(|&p| yhat[p * batch.b + bi]));
                }
            }
        }
        if out.iter().any(|r| !all_finite(r)) {
            return Err(Error::NonFiniteActivation { step: 0 });
        }
        Ok(out)
    }
}

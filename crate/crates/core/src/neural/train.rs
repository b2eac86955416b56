use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::kernels::all_finite;
use super::model::{FeatureSet, NetConfig, SequenceData, SequenceModel};
use crate::error::{Error, Result};
use crate::panel::{Panel, SplitSpec};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epoch_mse: Vec<f64>,
    pub final_param_norm: f64,
    pub wall_clock_secs: f64,
    pub seed: u64,
    /// Largest global gradient norm fed to Adam after clipping.
    pub max_clipped_norm: f64,
    /// `(epoch, batch)` of a non-finite gradient; training stopped there and
    /// the model holds the last finite parameters.
    pub failure: Option<(usize, usize)>,
}

impl TrainReport {
    pub fn into_result(self) -> Result<Self> {
        match self.failure {
            Some((epoch, batch)) => Err(Error::NonFiniteGradient { epoch, batch }),
            None => Ok(self),
        }
    }
}

/// Equality ignores wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, o: &Self) -> bool {
        self.epoch_mse == o.epoch_mse
            && self.final_param_norm == o.final_param_norm
            && self.seed == o.seed
            && self.max_clipped_norm == o.max_clipped_norm
            && self.failure == o.failure
    }
}

/// Rescales `grad` in place to global norm at most `max_norm`; returns the pre-clip norm.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

fn adam_update(model: &mut SequenceModel, grad: &[f64], lr: f64) {
    model.step += 1;
    let t = model.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, m), v), &g) in model.params.iter_mut().zip(&mut model.adam_m).zip(&mut model.adam_v).zip(grad) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}

/// Trains on the first `t_train` positions of every unit: shuffled batches of
/// units, sequence-to-sequence MSE, clipped Adam steps and inverted dropout
/// before the output head.
pub fn train(config: &NetConfig, data: &SequenceData, t_train: usize) -> Result<(SequenceModel, TrainReport)> {
    let mut model = SequenceModel::new(config.clone())?;
    if data.f != model.input_dim {
        return Err(Error::Shape(format!("data has {} features, model expects {}", data.f, model.input_dim)));
    }
    if t_train == 0 || t_train > data.t() {
        return Err(Error::InvalidSplit(format!("train length {t_train} outside 1..={}", data.t())));
    }
    if data.n_units() == 0 {
        return Err(Error::Shape("no units to train on".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.n_units()).collect();
    let keep = 1.0 - config.dropout;
    let head_in = model.structure_head_in();
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    let mut max_clipped_norm = 0.0f64;
    let mut failure = None;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, units) in order.chunks(config.batch_size).enumerate() {
            let batch = data.batch(units, t_train);
            let mask = (config.dropout > 0.0).then(|| {
                (0..batch.t * batch.b * head_in).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
            });
            let step = model.loss_and_gradient_masked(&batch, mask);
            let (loss, mut grad) = match step {
                Ok(v) if v.0.is_finite() && all_finite(&v.1) => v,
                _ => {
                    failure = Some((epoch, bi));
                    break 'epochs;
                }
            };
            clip_gradient(&mut grad, config.clip_norm);
            max_clipped_norm = max_clipped_norm.max(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
            let backup = model.params.clone();
            adam_update(&mut model, &grad, config.learning_rate);
            if !all_finite(&model.params) {
                model.params = backup;
                failure = Some((epoch, bi));
                break 'epochs;
            }
            total += loss * units.len() as f64;
        }
        epoch_mse.push(total / data.n_units() as f64);
    }
    let report = TrainReport {
        epoch_mse,
        final_param_norm: model.param_norm(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: config.seed,
        max_clipped_norm,
        failure,
    };
    Ok((model, report))
}

impl SequenceModel {
    pub(crate) fn structure_head_in(&self) -> usize {
        self.tensors().iter().find(|s| s.name == "W_y").map_or(0, |s| s.cols)
    }
}

fn window_data(features: FeatureSet, nl: &Panel, income: &Panel, split: &SplitSpec) -> Result<(SequenceData, usize, usize)> {
    let train_cols = split.train_cols(income)?;
    let test_cols = split.test_cols(income)?;
    let window = train_cols.start..test_cols.end;
    let data = SequenceData::from_panels(&nl.select_columns(window.clone()), &income.select_columns(window), features)?;
    Ok((data, train_cols.len(), test_cols.len()))
}

/// Trains on the split's train window of standardized panels.
pub fn fit_panel(config: &NetConfig, nl: &Panel, income: &Panel, split: &SplitSpec) -> Result<(SequenceModel, TrainReport)> {
    let (data, t_train, _) = window_data(config.features, nl, income, split)?;
    train(config, &data, t_train)
}

/// Leakage-safe test-window predictions from standardized panels.
pub fn forecast_panel(model: &SequenceModel, nl: &Panel, income: &Panel, split: &SplitSpec) -> Result<Panel> {
    let (data, t_train, t_test) = window_data(model.config.features, nl, income, split)?;
    let positions: Vec<usize> = (t_train..t_train + t_test).collect();
    let values: Vec<f64> = model.predict_positions(&data, &positions)?.into_iter().flatten().collect();
    Panel::new(income.unit_ids().to_vec(), split.test_years(), values)
}

pub fn fit_forecast(
    config: &NetConfig,
    nl: &Panel,
    income: &Panel,
    split: &SplitSpec,
) -> Result<(Panel, SequenceModel, TrainReport)> {
    let (model, report) = fit_panel(config, nl, income, split)?;
    Ok((forecast_panel(&model, nl, income, split)?, model, report))
}

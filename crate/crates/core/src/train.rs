//! RMSE training with elastic-net weight penalties, Adam and validation-AUC
//! model selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Partition;
use crate::dataset::WindowSet;
use crate::eval::{policy_auc, EvalError};
use crate::model::{ModelError, Network};
use crate::numerics::{Graph, Mode, NumericsError, ParamKind, ParamStore, Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("validation metric failed: {0}")]
    Eval(#[from] EvalError),
    #[error(
        "non-finite loss or gradient at epoch {epoch}, batch {batch} (parameter norm {param_norm})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error("patient {0} is tagged for the test partition")]
    TestLeak(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} has no windows")]
    EmptySet(&'static str),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub l1: f64,
    pub l2: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub precision: Precision,
    /// Windows per graph; shard gradients are summed in a fixed order.
    pub shard_windows: usize,
    /// Silencing window used for the validation AUC.
    pub silence_hours: usize,
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 3000,
            learning_rate: 0.006,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            l1: 1e-5,
            l2: 1e-3,
            dropout_rate: 0.5,
            seed: 0,
            eval_every: 1,
            precision: Precision::F32,
            shard_windows: 1000,
            silence_hours: 6,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0
            || self.batch_size == 0
            || self.shard_windows == 0
            || self.eval_every == 0
        {
            return bad("epochs, batch_size, shard_windows and eval_every must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0 && self.l1 >= 0.0 && self.l2 >= 0.0) {
            return bad("adam_epsilon must be positive and penalties non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> f64 {
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    (sse / predictions.len() as f64).sqrt()
}

/// `l1 * sum|w| + l2 * sum w^2` over weight tensors only.
pub fn penalty<T: Real>(params: &ParamStore<T>, l1: f64, l2: f64) -> f64 {
    params
        .iter()
        .filter(|(_, kind, _)| *kind == ParamKind::Weight)
        .flat_map(|(_, _, t)| t.data().iter().map(|v| v.as_f64()))
        .map(|w| l1 * w.abs() + l2 * w * w)
        .sum()
}

/// Gradient of [`penalty`] taken through the graph.
pub fn penalty_gradients<T: Real>(
    params: &ParamStore<T>,
    l1: f64,
    l2: f64,
) -> Result<BTreeMap<String, Tensor<T>>, TrainError> {
    let mut g = Graph::<T>::new(Mode::Eval);
    let p = g.bind(params);
    let mut total = None;
    for (name, kind, _) in params.iter() {
        if kind != ParamKind::Weight {
            continue;
        }
        let w = p.get(name)?;
        let a = g.abs(w);
        let a = g.sum(a);
        let a = g.scale(a, T::lit(l1));
        let sq = g.mul(w, w)?;
        let sq = g.sum(sq);
        let sq = g.scale(sq, T::lit(l2));
        let term = g.add(a, sq)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(g.backward(t)?.params()),
        None => Ok(BTreeMap::new()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f64> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left unchanged.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    s: AdamSettings,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    let (b1, b2) = (T::lit(s.beta1), T::lit(s.beta2));
    let one = T::one();
    for (name, _, theta) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != theta.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                left: g.shape().to_vec(),
                right: theta.shape().to_vec(),
            }
            .into());
        }
        for moments in [&mut state.first, &mut state.second] {
            if !moments.contains_key(name) {
                moments.insert(name.to_string(), Tensor::zeros(theta.shape().to_vec())?);
            }
        }
        let m = state.first.get_mut(name).expect("inserted above");
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (one - b1) * *gi;
        }
        let v = state.second.get_mut(name).expect("inserted above");
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (one - b2) * *gi * *gi;
        }
        let m = &state.first[name];
        let v = &state.second[name];
        for ((p, mi), vi) in theta.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi.as_f64() / c1;
            let v_hat = vi.as_f64() / c2;
            *p -= T::lit(s.learning_rate * m_hat / (v_hat.sqrt() + s.epsilon));
        }
    }
    Ok(())
}

/// Eval-mode predictions for every window, computed in chunks.
pub fn predict_windows<T: Real>(
    net: &Network<T>,
    set: &WindowSet,
    chunk: usize,
) -> Result<Vec<f64>, ModelError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let parts: Vec<Vec<f64>> = idx
        .par_chunks(chunk.max(1))
        .map(|c| net.predict_batch(&set.batch::<T>(c)?))
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed;
    for v in [a, b, c] {
        z = z.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Result of one mini-batch forward/backward pass.
#[derive(Clone, Debug)]
pub struct BatchGradient<T: Real> {
    pub rmse: f64,
    pub sse: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Gradient of the batch RMSE. Shards are forwarded independently, the RMSE
/// is formed over the whole batch, and each shard then back-propagates
/// `sum_i r_i * (r_i - t_i) / (N * rmse)`, whose gradient equals the RMSE
/// gradient restricted to that shard.
pub fn rmse_gradient<T: Real>(
    net: &Network<T>,
    set: &WindowSet,
    indices: &[usize],
    shard_windows: usize,
    dropout_rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<BatchGradient<T>, TrainError> {
    let shards: Vec<&[usize]> = indices.chunks(shard_windows.max(1)).collect();
    let mut forwards = shards
        .par_iter()
        .enumerate()
        .map(|(s, idx)| {
            let mut g = Graph::<T>::with_seed(mode, mix(seed, s as u64, 0, 0));
            let p = g.bind(&net.params);
            let batch = set.batch::<T>(idx)?;
            let out = net.forward(&mut g, &p, &batch, dropout_rate)?;
            let preds: Vec<f64> = g.value(out).data().iter().map(|v| v.as_f64()).collect();
            Ok((g, out, preds))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let n = indices.len() as f64;
    let sse: f64 = forwards
        .iter()
        .zip(&shards)
        .flat_map(|((_, _, preds), idx)| {
            preds
                .iter()
                .zip(idx.iter())
                .map(|(p, &i)| (p - set.targets[i]).powi(2))
        })
        .sum();
    let rmse = (sse / n).sqrt();

    let shard_grads = forwards
        .par_iter_mut()
        .zip(&shards)
        .map(|((g, out, preds), idx)| {
            let w: Vec<T> = preds
                .iter()
                .zip(idx.iter())
                .map(|(p, &i)| {
                    if rmse > 0.0 {
                        T::lit((p - set.targets[i]) / (n * rmse))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let c = g.constant(Tensor::matrix(w.len(), 1, w)?);
            let prod = g.mul(*out, c)?;
            let s = g.sum(prod);
            Ok(g.backward(s)?.params())
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    drop(forwards);

    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for shard in shard_grads {
        for (name, g) in shard {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    Ok(BatchGradient { rmse, sse, grads })
}

/// Adds `extra` into `into`, entry by entry.
pub fn accumulate<T: Real>(
    into: &mut BTreeMap<String, Tensor<T>>,
    extra: &BTreeMap<String, Tensor<T>>,
) {
    for (name, g) in extra {
        match into.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// RMSE of the training-mode forward passes over the epoch.
    pub train_rmse: f64,
    pub val_auc: Option<f64>,
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network<f64>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub log: Vec<EpochLog>,
}

fn reject_test(set: &WindowSet) -> Result<(), TrainError> {
    match set
        .patients
        .iter()
        .find(|p| p.partition == Some(Partition::Test))
    {
        Some(p) => Err(TrainError::TestLeak(p.patient_id.clone())),
        None => Ok(()),
    }
}

pub fn train(
    init: Network<f64>,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(init, train_set, val_set, cfg, |_| {})
}

/// Trains and keeps the parameters of the epoch with the highest validation
/// policy AUC; the earliest such epoch wins ties.
pub fn train_with(
    init: Network<f64>,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    reject_test(train_set)?;
    reject_test(val_set)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training set"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation set"));
    }
    match cfg.precision {
        Precision::F32 => run::<f32>(init.cast(), train_set, val_set, cfg, on_epoch),
        Precision::F64 => run::<f64>(init, train_set, val_set, cfg, on_epoch),
    }
}

fn run<T: Real>(
    mut net: Network<T>,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut state = OptimizerState::<T>::default();
    let adam = AdamSettings::from(cfg);
    let mut best: Option<(usize, f64, Network<f64>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let seed = mix(cfg.seed, epoch as u64, b as u64, 1);
            let mut step = rmse_gradient(
                &net,
                train_set,
                idx,
                cfg.shard_windows,
                cfg.dropout_rate,
                Mode::Train,
                seed,
            )?;
            let pen = penalty(&net.params, cfg.l1, cfg.l2);
            accumulate(
                &mut step.grads,
                &penalty_gradients(&net.params, cfg.l1, cfg.l2)?,
            );
            let finite =
                (step.rmse + pen).is_finite() && step.grads.values().all(|g| g.all_finite());
            if !finite {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    param_norm: net.params.l2_norm(),
                });
            }
            adam_step(&mut net.params, &step.grads, &mut state, adam)?;
            if !net.params.iter().all(|(_, _, t)| t.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    param_norm: net.params.l2_norm(),
                });
            }
            sse += step.sse;
        }

        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let val_auc = if evaluate {
            let preds = predict_windows(&net, val_set, cfg.shard_windows)?;
            let auc = policy_auc(&val_set.scored(&preds), cfg.silence_hours)?;
            if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                best = Some((epoch, auc, net.cast()));
            }
            Some(auc)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_rmse: (sse / train_set.len() as f64).sqrt(),
            val_auc,
            wall_seconds: cfg.log_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let (best_epoch, best_val_auc, network) = best.expect("final epoch is always evaluated");
    Ok(TrainOutcome {
        network,
        best_epoch,
        best_val_auc,
        log,
    })
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_rmse,val_auc,wall_seconds")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        writeln!(
            out,
            "{},{},{},{}",
            e.epoch,
            e.train_rmse,
            opt(e.val_auc),
            opt(e.wall_seconds)
        )?;
    }
    out.flush()
}

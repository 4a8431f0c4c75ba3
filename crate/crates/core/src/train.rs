//! Training loop: schedules, AdamW, accumulation, clipping and early
//! stopping on the validation rate loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rimsa_autodiff::{Graph, ParamStore};

use crate::config::{SystemConfig, TrainConfig, Utility};
use crate::controller::Model;
use crate::dataset::{Dataset, Sample};
use crate::error::{CoreError, Result};
use crate::loss::{hybrid_loss, Targets, SOFTMIN_TAU};
use crate::nn::{apply_updates, Ctx};
use crate::rimsa::{build_v, user_rates, PhaseConfig};
use crate::rng::{stream, Stream};

/// Fraction of the OneCycle schedule spent rising to the peak.
pub const ONECYCLE_RISE: f64 = 0.3;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear ramp from 0 to `lambda_rate_max` over the first
/// `warmup_fraction · epochs` epochs, constant afterwards.
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_fraction * cfg.epochs as f64;
    if warm <= 0.0 {
        return cfg.lambda_rate_max;
    }
    cfg.lambda_rate_max * (epoch as f64 / warm).min(1.0)
}

/// Triangular schedule: `lr_min` at step 0, `lr_max` at the peak step,
/// `lr_min` again at the last step.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if total_steps <= 1 {
        return lo;
    }
    let last = (total_steps - 1) as f64;
    let peak = (ONECYCLE_RISE * last).round();
    let s = step as f64;
    if s >= last {
        return lo;
    }
    if s == peak {
        return hi;
    }
    if peak <= 0.0 {
        return hi - (hi - lo) * s / last;
    }
    if s <= peak {
        lo + (hi - lo) * s / peak
    } else {
        hi - (hi - lo) * (s - peak) / (last - peak)
    }
}

/// Decoupled-weight-decay Adam with bias correction. Frozen parameters
/// and buffers are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub clip: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: [f64; 2], weight_decay: f64, clip: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
            betas,
            weight_decay,
            clip,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        AdamW::new(store, cfg.betas, cfg.weight_decay, cfg.grad_clip)
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter(|(_, p)| p.trainable())
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Clip the stored gradients to global norm `clip`, then update.
    /// Returns the norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> f64 {
        let norm = Self::grad_norm(store);
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (id, p) in store.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let grad = std::mem::take(&mut p.grad);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * scale;
                data[i] -= lr * self.weight_decay * data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
            p.grad = grad;
        }
        norm
    }
}

/// Early stopping on a loss to be minimized.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record an epoch's loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
    pub lambda_rate: f64,
    pub train_total: f64,
    pub l_mse: f64,
    pub l_rate: f64,
    pub l_fro: f64,
    /// Mean validation sum rate.
    pub val_rate: f64,
    /// Mean validation max-min rate.
    pub val_maxmin: f64,
    /// Validation rate loss used for model selection.
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Mini-batch index lists for one epoch. A final batch of one sample is
/// merged into the previous batch so that batch norm always sees two.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// `input_scale` is the RMS of all pilot entries; `channel_scale` is the
/// root mean `‖H‖²_F` over the samples.
pub fn fit_scales(samples: &[Sample]) -> (f64, f64) {
    let n = samples.len().max(1) as f64;
    let y_count: usize = samples.iter().map(|s| s.y.len()).sum();
    let y_sq: f64 = samples.iter().flat_map(|s| s.y.iter()).map(|v| v * v).sum();
    let h_sq: f64 = samples.iter().map(|s| s.h.norm_squared()).sum();
    let input = (y_sq / y_count.max(1) as f64).sqrt();
    let channel = (h_sq / n).sqrt();
    let pos = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
    (pos(input), pos(channel))
}

/// `-(1/τ) log Σ_k exp(-τ r_k)`, evaluated stably.
pub fn softmin_scalar(rates: &[f64], tau: f64) -> f64 {
    let m = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let s: f64 = rates.iter().map(|r| (-(r - m) * tau).exp()).sum();
    m - s.ln() / tau
}

/// Validation rate loss (negative mean utility) together with the mean
/// sum rate and mean max-min rate.
pub fn validation(
    model: &Model,
    samples: &[Sample],
    sys: &SystemConfig,
    utility: Utility,
) -> Result<(f64, f64, f64)> {
    let (p, noise) = (sys.p_data_mw(), sys.noise_dl_mw());
    let (mut loss, mut sum, mut mm) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(crate::eval::EVAL_CHUNK) {
        let ys: Vec<&[f64]> = chunk.iter().map(|s| s.y.as_slice()).collect();
        for (out, s) in model.predict(&ys, p)?.iter().zip(chunk) {
            let v = build_v(&PhaseConfig::new(out.phases.clone()), sys)?;
            let r = user_rates(&s.h, &v, &out.w, noise)?;
            let total: f64 = r.iter().sum();
            sum += total;
            mm += r.iter().cloned().fold(f64::INFINITY, f64::min);
            loss -= match utility {
                Utility::Sum => total,
                Utility::Maxmin => softmin_scalar(&r, SOFTMIN_TAU),
            };
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, sum / n, mm / n))
}

struct BatchTerms {
    total: f64,
    l_mse: f64,
    l_rate: f64,
    l_fro: f64,
}

/// Forward and backward for one mini-batch; gradients are scaled by
/// `weight` and added to the store.
fn accumulate_batch(
    model: &mut Model,
    batch: &[&Sample],
    lambda_rate: f64,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<BatchTerms> {
    let sys = model.sys.clone();
    let (terms, grads, updates) = {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.store, true);
        let ys: Vec<&[f64]> = batch.iter().map(|s| s.y.as_slice()).collect();
        let out = model.arch.forward(&ctx, model.pilots_tensor(&g, &ys)?)?;
        let hs: Vec<_> = batch.iter().map(|s| &s.h).collect();
        let targets = Targets {
            h: &hs,
            channel_scale: model.channel_scale(),
            p_max: sys.p_data_mw(),
            noise: sys.noise_dl_mw(),
        };
        let l = hybrid_loss(
            &g,
            &sys,
            &out,
            &targets,
            lambda_rate,
            cfg.lambda_pre,
            cfg.utility,
        )?;
        let terms = BatchTerms {
            total: l.total.item(),
            l_mse: l.l_mse.item(),
            l_rate: l.l_rate.item(),
            l_fro: l.l_fro.item(),
        };
        if !terms.total.is_finite() {
            return Err(CoreError::Training(format!(
                "non-finite training loss {}",
                terms.total
            )));
        }
        l.total.scale(weight).backward()?;
        (terms, g.param_grads(), ctx.take_updates())
    };
    model.store.accumulate(&grads);
    apply_updates(&mut model.store, updates);
    Ok(terms)
}

/// Train on the dataset's train split, selecting the epoch with the lowest
/// validation rate loss (the train split stands in when there is no
/// validation split). The model is left holding the best parameters,
/// which are also written to `checkpoint` whenever they improve.
/// `on_epoch` sees every epoch record as it is produced.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingReport> {
    cfg.validate()?;
    ds.check_compatible(&model.sys)?;
    let train = ds.train();
    if train.len() < 2 {
        return Err(CoreError::Dataset(format!(
            "training needs at least 2 samples, the train split has {}",
            train.len()
        )));
    }
    let val = if ds.val().is_empty() { train } else { ds.val() };
    let (input_scale, channel_scale) = fit_scales(train);
    model.set_scales(input_scale, channel_scale);

    let sys = model.sys.clone();
    let mut opt = AdamW::from_config(&model.store, cfg);
    let n_batches = epoch_batches(&(0..train.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let steps_per_epoch = n_batches.div_ceil(cfg.accum_steps);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best: ParamStore = model.store.clone();
    let mut records = Vec::new();
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let lambda_rate = lambda_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, Stream::Shuffle, epoch as u64));
        let batches = epoch_batches(&order, cfg.batch_size);
        let (mut total, mut l_mse, mut l_rate, mut l_fro) = (0.0, 0.0, 0.0, 0.0);
        let mut lr = cfg.lr_min;
        for group in batches.chunks(cfg.accum_steps) {
            model.store.zero_grad();
            let weight = 1.0 / group.len() as f64;
            for batch in group {
                let samples: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
                let t = accumulate_batch(model, &samples, lambda_rate, cfg, weight)?;
                total += t.total;
                l_mse += t.l_mse;
                l_rate += t.l_rate;
                l_fro += t.l_fro;
            }
            lr = onecycle_lr(step, total_steps, cfg);
            opt.step(&mut model.store, lr);
            step += 1;
        }
        model.store.zero_grad();
        let nb = batches.len() as f64;
        let (val_loss, val_rate, val_maxmin) = validation(model, val, &sys, cfg.utility)?;
        let record = EpochRecord {
            epoch,
            lr,
            lambda_rate,
            train_total: total / nb,
            l_mse: l_mse / nb,
            l_rate: l_rate / nb,
            l_fro: l_fro / nb,
            val_rate,
            val_maxmin,
            val_loss,
        };
        on_epoch(&record);
        records.push(record);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.store.clone();
            if let Some(path) = checkpoint {
                rimsa_autodiff::save(&best, path)?;
            }
        }
        if stop {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    model.store = best;
    Ok(TrainingReport {
        epochs: records,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        steps: step,
        stopped_early,
    })
}

pub const METRICS_HEADER: &str =
    "epoch,lr,lambda_rate,train_total,l_mse,l_rate,l_fro,val_rate,val_maxmin";

/// Per-epoch metrics as CSV, floats with 9 significant digits.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            r.epoch,
            r.lr,
            r.lambda_rate,
            r.train_total,
            r.l_mse,
            r.l_rate,
            r.l_fro,
            r.val_rate,
            r.val_maxmin
        );
    }
    out
}

//! Adam, the Adam-only baseline and the LS+Adam loop, counted in work units.
//!
//! A work unit (WU) is `adam_epochs_per_wu` epochs of Adam followed by one
//! LS solve for `C`. The LS+Adam warmup runs Adam on every parameter and
//! occupies `warmup_epochs / adam_epochs_per_wu` units on the WU axis; it
//! ends with a single LS solve. Adam-only runs report one row per
//! `adam_epochs_per_wu` epochs so both modes share an axis.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deeponet::{DeepONetModel, LossBreakdown, LossTerm, ModelError};
use crate::linalg::Matrix;
use crate::ls_step;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {what} at WU {wu}")]
    NonFinite { what: &'static str, wu: usize },
    #[error("validation function {0} has a zero reference")]
    ZeroReference(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Adam,
    LsAdam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    Constant(f64),
    LogLinear {
        start: f64,
        end: f64,
        start_wu: usize,
        end_wu: usize,
    },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LambdaSchedule::Constant(l) => l > 0.0 && l.is_finite(),
            LambdaSchedule::LogLinear {
                start,
                end,
                start_wu,
                end_wu,
            } => start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite() && start_wu <= end_wu,
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid lambda schedule {self:?}")))
        }
    }
}

/// λ at work unit `wu`: constant outside the anchors, log-linear between them.
pub fn lambda_at(schedule: &LambdaSchedule, wu: usize) -> Result<f64> {
    schedule.validate()?;
    Ok(match *schedule {
        LambdaSchedule::Constant(l) => l,
        LambdaSchedule::LogLinear {
            start,
            end,
            start_wu,
            end_wu,
        } => {
            if wu <= start_wu {
                start
            } else if wu >= end_wu {
                end
            } else {
                let s = (wu - start_wu) as f64 / (end_wu - start_wu) as f64;
                10f64.powf(start.log10() + s * (end.log10() - start.log10()))
            }
        }
    })
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.99
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_epochs_per_wu() -> usize {
    5
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub warmup_epochs: usize,
    #[serde(default = "default_epochs_per_wu")]
    pub adam_epochs_per_wu: usize,
    /// Length of the run on the WU axis, warmup included.
    pub total_wus: usize,
    pub batch_size: usize,
    pub lambda: LambdaSchedule,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Overrides the dataset's `ε_k`, one per term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term_weights: Option<Vec<f64>>,
    /// Include `λ‖C‖²` in the LS+Adam warmup objective.
    #[serde(default = "default_true")]
    pub warmup_regularization: bool,
    /// Off by default so that metrics files stay byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn warmup_wus(&self) -> usize {
        match self.mode {
            Mode::Adam => 0,
            Mode::LsAdam => self.warmup_epochs / self.adam_epochs_per_wu.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive");
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return fail("invalid Adam hyperparameters");
        }
        if self.mode == Mode::LsAdam {
            self.lambda.validate().map_err(|_| {
                TrainError::Config("ls_adam needs a strictly positive lambda schedule".into())
            })?;
            if self.adam_epochs_per_wu == 0 {
                if self.warmup_epochs != 0 {
                    return fail("warmup_epochs must be 0 when adam_epochs_per_wu is 0");
                }
            } else if self.warmup_epochs % self.adam_epochs_per_wu != 0 {
                return fail("warmup_epochs must be a multiple of adam_epochs_per_wu");
            }
            if self.warmup_wus() > self.total_wus {
                return fail("warmup is longer than total_wus");
            }
        } else if self.adam_epochs_per_wu == 0 {
            return fail("adam_epochs_per_wu must be positive for adam mode");
        }
        Ok(())
    }

    /// λ used at `wu`; Adam-only runs are unregularized.
    pub fn lambda_for(&self, wu: usize) -> Result<f64> {
        match self.mode {
            Mode::Adam => Ok(0.0),
            Mode::LsAdam => lambda_at(&self.lambda, wu),
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// Keeps the moments of the first `n` parameters and drops the rest.
    pub fn truncate(&mut self, n: usize) {
        self.m.truncate(n);
        self.v.truncate(n);
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "Adam state has {} entries, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub inputs: Matrix,
    pub terms: Vec<LossTerm>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> TrainData {
        TrainData {
            inputs: self.inputs.select_rows(rows),
            terms: self.terms.iter().map(|t| t.select(rows)).collect(),
        }
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<TrainData> {
        if weights.len() != self.terms.len() {
            return Err(TrainError::Config(format!(
                "{} term weights given for {} terms",
                weights.len(),
                self.terms.len()
            )));
        }
        let mut out = self.clone();
        for (t, &w) in out.terms.iter_mut().zip(weights) {
            t.weight = w;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub inputs: Matrix,
    /// Output grid coordinates, `Q × d`.
    pub points: Matrix,
    /// `P_val × Q` reference solution values.
    pub reference: Matrix,
}

/// `‖pred_p − ref_p‖₂ / ‖ref_p‖₂` for each validation function.
pub fn relative_l2_errors(model: &DeepONetModel, val: &Validation) -> Result<Vec<f64>> {
    let pred = model.evaluate(&val.inputs, &val.points)?;
    relative_errors(&pred, &val.reference)
}

pub fn relative_errors(pred: &Matrix, reference: &Matrix) -> Result<Vec<f64>> {
    if pred.shape() != reference.shape() {
        return Err(ModelError::Shape(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.rows(),
            pred.cols(),
            reference.rows(),
            reference.cols()
        ))
        .into());
    }
    (0..pred.rows())
        .map(|p| {
            let r = reference.row(p);
            let den = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if den == 0.0 {
                return Err(TrainError::ZeroReference(p));
            }
            let num = pred.row(p).iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            Ok(num / den)
        })
        .collect()
}

pub fn evaluate_relative_l2(model: &DeepONetModel, val: &Validation) -> Result<f64> {
    let e = relative_l2_errors(model, val)?;
    if e.is_empty() {
        return Err(TrainError::Config("empty validation set".into()));
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub wu: usize,
    pub train_loss: f64,
    pub val_rel_l2: f64,
    pub lambda: f64,
    pub wall_seconds: f64,
    pub term_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsEvent {
    pub wu: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DeepONetModel,
    pub metrics: Vec<MetricsRow>,
    pub ls_events: Vec<LsEvent>,
}

pub const METRICS_HEADER: &str = "wu,train_loss,val_rel_l2,lambda,wall_seconds";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.wu, r.train_loss, r.val_rel_l2, r.lambda, r.wall_seconds
        )?;
    }
    Ok(())
}

pub fn write_ls_events_csv<W: Write>(events: &[LsEvent], mut w: W) -> std::io::Result<()> {
    writeln!(w, "wu,loss_before,loss_after")?;
    for e in events {
        writeln!(w, "{},{:.16e},{:.16e}", e.wu, e.loss_before, e.loss_after)?;
    }
    Ok(())
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    data: TrainData,
    val: &'a Validation,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    start: Instant,
    metrics: Vec<MetricsRow>,
    ls_events: Vec<LsEvent>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a TrainConfig, data: &TrainData, val: &'a Validation) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let data = match &cfg.term_weights {
            Some(w) => data.with_weights(w)?,
            None => data.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Runner {
            cfg,
            order: (0..data.len()).collect(),
            data,
            val,
            rng,
            start: Instant::now(),
            metrics: Vec::new(),
            ls_events: Vec::new(),
        })
    }

    fn full_loss(&self, model: &DeepONetModel, lambda: f64) -> Result<LossBreakdown> {
        Ok(model.loss(&self.data.inputs, &self.data.terms, lambda)?)
    }

    fn record(&mut self, model: &DeepONetModel, wu: usize, force: bool) -> Result<()> {
        if !(force || wu % self.cfg.eval_every == 0) {
            return Ok(());
        }
        let lambda = self.cfg.lambda_for(wu)?;
        let loss = self.full_loss(model, lambda)?;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { what: "training loss", wu });
        }
        let val_rel_l2 = evaluate_relative_l2(model, self.val)?;
        let wall_seconds = if self.cfg.record_wall_time {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        self.metrics.push(MetricsRow {
            wu,
            train_loss: loss.total,
            val_rel_l2,
            lambda,
            wall_seconds,
            term_mse: loss.term_mse,
        });
        Ok(())
    }

    /// One shuffled pass; `n_train` leading parameters are updated.
    fn epoch(&mut self, model: &mut DeepONetModel, adam: &mut AdamState, lambda: f64, n_train: usize, wu: usize) -> Result<()> {
        let p = self.data.len();
        let bs = self.cfg.batch_size.min(p);
        self.order.shuffle(&mut self.rng);
        for chunk in self.order.chunks_exact(bs) {
            let batch = self.data.select(chunk);
            let (_, g) = model.loss_gradients(&batch.inputs, &batch.terms, lambda)?;
            let g = g.flatten();
            let mut params = model.params();
            adam.step(&mut params[..n_train], &g[..n_train])?;
            if params[..n_train].iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { what: "parameters", wu });
            }
            model.set_params(&params)?;
        }
        Ok(())
    }

    fn ls_solve(&mut self, model: &mut DeepONetModel, wu: usize) -> Result<()> {
        let lambda = self.cfg.lambda_for(wu)?;
        let before = self.full_loss(model, lambda)?.total;
        let c = ls_step::ls_update(model, &self.data.inputs, &self.data.terms, lambda)?;
        if !c.is_finite() {
            return Err(TrainError::NonFinite { what: "LS solution", wu });
        }
        model.c = c;
        let after = self.full_loss(model, lambda)?.total;
        self.ls_events.push(LsEvent {
            wu,
            loss_before: before,
            loss_after: after,
        });
        Ok(())
    }

    fn finish(self, model: DeepONetModel) -> TrainOutcome {
        TrainOutcome {
            model,
            metrics: self.metrics,
            ls_events: self.ls_events,
        }
    }
}

/// Mini-batch Adam on every parameter, `C` included, without regularization.
pub fn train_adam_only(model: DeepONetModel, data: &TrainData, val: &Validation, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Adam {
        return Err(TrainError::Config("train_adam_only needs mode adam".into()));
    }
    let mut model = model;
    let mut run = Runner::new(cfg, data, val)?;
    let n = model.num_params();
    let mut adam = AdamState::new(n, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    run.record(&model, 0, true)?;
    for wu in 1..=cfg.total_wus {
        for _ in 0..cfg.adam_epochs_per_wu {
            run.epoch(&mut model, &mut adam, 0.0, n, wu)?;
        }
        run.record(&model, wu, wu == cfg.total_wus)?;
    }
    Ok(run.finish(model))
}

/// Adam warmup on all parameters, one LS solve, then work units of Adam
/// on the hidden parameters each closed by an LS solve.
pub fn train_ls_adam(model: DeepONetModel, data: &TrainData, val: &Validation, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::LsAdam {
        return Err(TrainError::Config("train_ls_adam needs mode ls_adam".into()));
    }
    let mut model = model;
    let mut run = Runner::new(cfg, data, val)?;
    let n_all = model.num_params();
    let n_hidden = model.num_hidden_params();
    let mut adam = AdamState::new(n_all, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let warm = cfg.warmup_wus();
    run.record(&model, 0, true)?;
    for wu in 1..=warm {
        let lambda = if cfg.warmup_regularization {
            cfg.lambda_for(wu)?
        } else {
            0.0
        };
        for _ in 0..cfg.adam_epochs_per_wu {
            run.epoch(&mut model, &mut adam, lambda, n_all, wu)?;
        }
        if wu < warm {
            run.record(&model, wu, false)?;
        }
    }
    run.ls_solve(&mut model, warm)?;
    if warm > 0 {
        run.record(&model, warm, warm == cfg.total_wus)?;
    }
    adam.truncate(n_hidden);
    for wu in warm + 1..=cfg.total_wus {
        let lambda = cfg.lambda_for(wu)?;
        for _ in 0..cfg.adam_epochs_per_wu {
            run.epoch(&mut model, &mut adam, lambda, n_hidden, wu)?;
        }
        run.ls_solve(&mut model, wu)?;
        run.record(&model, wu, wu == cfg.total_wus)?;
    }
    Ok(run.finish(model))
}

pub fn train(model: DeepONetModel, data: &TrainData, val: &Validation, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.mode {
        Mode::Adam => train_adam_only(model, data, val, cfg),
        Mode::LsAdam => train_ls_adam(model, data, val, cfg),
    }
}

//! Training loop: batch forward, loss assembly, Adam step, early stopping,
//! ablation wiring, few-shot personalisation and a small grid driver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PtsmConfig;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, TermVars};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{Ptsm, Wiring};
use crate::nn::{Mode, ParamGroup, ParamStore, Session, Trainable};
use crate::optim::Adam;
use crate::stap::{outer_flatten_var, FusionSource};
use crate::synthdata::{stack, EegTrial};
use crate::tensor::Tensor;

/// Offset separating the shuffling stream from the per-step dropout streams.
const SHUFFLE_SEED_OFFSET: u64 = 0x5eed_5eed;
const EVAL_CHUNK: usize = 256;

/// Resolves ablation flags into the forward and loss wiring.
pub fn apply_ablation(config: &PtsmConfig) -> Result<Wiring> {
    let a = &config.ablation;
    if a.disable_personal_branch && a.disable_common_branch && !a.disable_stap {
        return Err(Error::contract(
            "disable_personal_branch and disable_common_branch together remove both mask branches; \
             use disable_stap instead",
        ));
    }
    let mut w = config.loss.clone();
    let mut trainable = Trainable::all();
    let mut fusion = FusionSource::Learned;
    let mut use_stap = true;
    if a.disable_stap {
        use_stap = false;
        w.lambda_sim = 0.0;
        w.lambda_sparse_mask = 0.0;
        w.lambda_size = 0.0;
        w.lambda_mask = 0.0;
        trainable = trainable
            .without(ParamGroup::PersonalMask)
            .without(ParamGroup::CommonMask)
            .without(ParamGroup::Fusion);
    } else if a.disable_personal_branch {
        fusion = FusionSource::Fixed { alpha: 0.0, beta: 0.0 };
        w.lambda_sim = 0.0;
        trainable = trainable.without(ParamGroup::PersonalMask).without(ParamGroup::Fusion);
    } else if a.disable_common_branch {
        fusion = FusionSource::Fixed { alpha: 1.0, beta: 1.0 };
        w.lambda_sim = 0.0;
        trainable = trainable.without(ParamGroup::CommonMask).without(ParamGroup::Fusion);
    } else if !config.model.fusion_learnable {
        fusion = FusionSource::Fixed { alpha: 0.5, beta: 0.5 };
        trainable = trainable.without(ParamGroup::Fusion);
    }
    if a.disable_orth {
        w.lambda_orth = 0.0;
    }
    if a.disable_cov {
        w.lambda_cov = 0.0;
    }
    if a.disable_info {
        w.lambda_info = 0.0;
    }
    if a.disable_sparse_feat {
        w.lambda_sparse_feat = 0.0;
    }
    Ok(Wiring {
        use_stap,
        fusion,
        weights: w,
        trainable,
    })
}

/// Parameters, optimizer moments and run bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Ptsm,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: &PtsmConfig) -> Result<Self> {
        config.validate()?;
        let model = Ptsm::new(&config.model, config.seed)?;
        let optimizer = Adam::new(config.optimizer.clone(), &model.store);
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            seed: config.seed,
        })
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.optimizer.step);
        rng
    }
}

/// Builds every loss term for one batch and returns the report, the tape
/// session and the differentiable total.
fn batch_losses<'a>(
    model: &'a Ptsm,
    wiring: &Wiring,
    trials: &[&EegTrial],
    mode: Mode,
    rng: Option<ChaCha8Rng>,
) -> Result<(LossReport, Session<'a>, crate::tensor::Var)> {
    let n = trials.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "a training batch needs at least 2 trials for batch statistics and covariance terms, got {n}"
        )));
    }
    let (x, y, s) = stack(trials)?;
    let mut sess = Session::new(&model.store, mode, wiring.trainable.clone(), rng);
    let out = model.forward(&mut sess, &x, wiring, true)?;
    let w = &wiring.weights;
    let tape = &mut sess.tape;
    let f_subj = out.f_subj.expect("subject branch requested");
    let subj_probs = out.subj_probs.expect("subject branch requested");
    let (task, clamped_task) = losses::cross_entropy(tape, out.task_probs, &y)?;
    let (subj, clamped_subj) = losses::cross_entropy(tape, subj_probs, &s)?;
    let m = out.masks;
    let flat_p = outer_flatten_var(tape, m.m_t_p, m.m_s_p)?;
    let flat_c = outer_flatten_var(tape, m.m_t_c, m.m_s_c)?;
    let (contrast_task, deg_task) = losses::nt_xent(tape, out.f_task, &y, w.tau)?;
    let (contrast_subj, deg_subj) = losses::nt_xent(tape, f_subj, &s, w.tau)?;
    let terms = TermVars {
        task,
        subj,
        sim: losses::mask_similarity(tape, flat_p, flat_c, w.mask_similarity_abs)?,
        sparse_mask: losses::mask_sparsity(tape, flat_p, flat_c)?,
        size: losses::mask_size(tape, flat_p, flat_c, w.alpha_size)?,
        orth: losses::orthogonality(tape, out.f_task, f_subj)?,
        cov: losses::covariance_decorrelation(tape, out.f_task, f_subj)?,
        info: losses::info_retention(tape, out.f_task, f_subj, w.info_trace_clamp)?,
        sparse_feat: losses::feature_sparsity(tape, out.f_task, f_subj)?,
        contrast_task,
        contrast_subj,
    };
    let total = losses::compose_total(tape, &terms, w)?;
    let mut report = losses::total_loss(&terms.values(tape), w)?;
    report.clamped_probs = clamped_task + clamped_subj;
    report.degenerate_contrast = usize::from(deg_task) + usize::from(deg_subj);
    debug_assert_eq!(report.total.to_bits(), tape.value(total).data()[0].to_bits());
    Ok((report, sess, total))
}

/// Loss report of a batch in evaluation mode, without any update.
pub fn evaluate_losses(model: &Ptsm, wiring: &Wiring, trials: &[&EegTrial]) -> Result<LossReport> {
    Ok(batch_losses(model, wiring, trials, Mode::Eval, None)?.0)
}

/// One Adam step on the weighted total over `batch`.
pub fn train_step(batch: &[&EegTrial], state: &mut TrainState, config: &PtsmConfig) -> Result<LossReport> {
    let wiring = apply_ablation(config)?;
    let rng = state.step_rng();
    let (report, mut sess, total) = batch_losses(&state.model, &wiring, batch, Mode::Train, Some(rng))?;
    let grads = sess.gradients(total)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let updates = sess.take_buffer_updates();
    drop(sess);
    for (name, value) in updates {
        state.model.store.set_buffer(&name, value)?;
    }
    state.optimizer.update(&mut state.model.store, &grads)?;
    Ok(report)
}

/// Evaluation-mode predictions for any number of trials.
pub fn predict_trials(model: &Ptsm, wiring: &Wiring, trials: &[EegTrial]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(EVAL_CHUNK) {
        let refs: Vec<&EegTrial> = chunk.iter().collect();
        let (x, _, _) = stack(&refs)?;
        out.extend(model.predict(&x, wiring)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Ptsm, wiring: &Wiring, trials: &[EegTrial]) -> Result<MetricsReport> {
    let preds = predict_trials(model, wiring, trials)?;
    let labels: Vec<usize> = trials.iter().map(|t| t.y).collect();
    compute_metrics(&preds, &labels, model.config.classes)
}

/// Patience-based stopping on a metric that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: Option<usize>,
    pub best_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: None,
            best_value: f64::NEG_INFINITY,
        }
    }

    /// Records the metric of `epoch`. Only a strict improvement replaces the
    /// best, so ties keep the earlier epoch.
    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if self.best_epoch.is_none() || value > self.best_value {
            self.best_epoch = Some(epoch);
            self.best_value = value;
            return StopDecision::Improved;
        }
        let best = self.best_epoch.expect("set above");
        if epoch - best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean of the step reports over the epoch.
    pub train: LossReport,
    pub validation: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut r = LossReport {
        terms: losses::LossTerms {
            task: avg(|r| r.terms.task),
            subj: avg(|r| r.terms.subj),
            sim: avg(|r| r.terms.sim),
            sparse_mask: avg(|r| r.terms.sparse_mask),
            size: avg(|r| r.terms.size),
            orth: avg(|r| r.terms.orth),
            cov: avg(|r| r.terms.cov),
            info: avg(|r| r.terms.info),
            sparse_feat: avg(|r| r.terms.sparse_feat),
            contrast_task: avg(|r| r.terms.contrast_task),
            contrast_subj: avg(|r| r.terms.contrast_subj),
        },
        decouple: avg(|r| r.decouple),
        mask: avg(|r| r.mask),
        contrast: avg(|r| r.contrast),
        total: avg(|r| r.total),
        ..Default::default()
    };
    r.clamped_probs = reports.iter().map(|r| r.clamped_probs).sum();
    r.degenerate_contrast = reports.iter().map(|r| r.degenerate_contrast).sum();
    r
}

/// Runs one epoch over `train` in a shuffled order drawn from the run seed.
pub fn run_epoch(state: &mut TrainState, train: &[EegTrial], config: &PtsmConfig) -> Result<LossReport> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed.wrapping_add(SHUFFLE_SEED_OFFSET));
    rng.set_stream(state.epoch as u64);
    order.shuffle(&mut rng);
    let bs = config.training.batch_size;
    let mut reports = Vec::new();
    for idx in order.chunks(bs) {
        if idx.len() < 2 {
            continue;
        }
        let batch: Vec<&EegTrial> = idx.iter().map(|&i| &train[i]).collect();
        reports.push(train_step(&batch, state, config)?);
    }
    state.epoch += 1;
    if reports.is_empty() {
        return Err(Error::contract("the training set yields no batch of at least 2 trials"));
    }
    Ok(mean_report(&reports))
}

/// Trains with early stopping on validation accuracy and returns the state
/// holding the best-validation parameters.
pub fn fit(train: &[EegTrial], validation: &[EegTrial], config: &PtsmConfig) -> Result<(TrainState, History)> {
    fit_with(train, validation, config, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    train: &[EegTrial],
    validation: &[EegTrial],
    config: &PtsmConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainState, History)> {
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if validation.is_empty() {
        return Err(Error::contract("validation split is empty"));
    }
    let wiring = apply_ablation(config)?;
    let mut state = TrainState::new(config)?;
    let mut history = History::default();
    let mut stopper = EarlyStopping::new(config.training.patience);
    let mut best_store: Option<ParamStore> = None;
    for _ in 0..config.training.max_epochs {
        let train_report = run_epoch(&mut state, train, config)?;
        let validation_metrics = evaluate(&state.model, &wiring, validation)?;
        let record = EpochRecord {
            epoch: state.epoch,
            train: train_report,
            validation: validation_metrics,
        };
        on_epoch(&record);
        let decision = stopper.observe(record.epoch, record.validation.accuracy);
        history.epochs.push(record);
        match decision {
            StopDecision::Improved => {
                best_store = Some(state.model.store.clone());
                history.best_epoch = state.epoch;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(store) = best_store {
        state.model.store = store;
    }
    Ok((state, history))
}

/// Fine-tunes only the personal mask generator on a labelled support set of
/// one subject with plain gradient descent on the task loss,
/// `θ ← θ − η ∇θ L_task`. The forward pass runs in evaluation mode.
pub fn adapt_few_shot(model: &Ptsm, wiring: &Wiring, support: &[EegTrial], steps: usize, eta: f64) -> Result<Ptsm> {
    if support.is_empty() {
        return Err(Error::contract("few-shot adaptation needs a non-empty support set"));
    }
    if !(eta >= 0.0) {
        return Err(Error::contract(format!("adaptation step size must be >= 0, got {eta}")));
    }
    let refs: Vec<&EegTrial> = support.iter().collect();
    let (x, y, _) = stack(&refs)?;
    let mut adapted = model.clone();
    for _ in 0..steps {
        let grads = {
            let trainable = Trainable::groups([ParamGroup::PersonalMask]);
            let mut sess = Session::new(&adapted.store, Mode::Eval, trainable, None);
            let out = adapted.forward(&mut sess, &x, wiring, false)?;
            let (task, _) = losses::cross_entropy(&mut sess.tape, out.task_probs, &y)?;
            if !sess.tape.value(task).is_finite() {
                return Err(Error::NonFinite("task loss during adaptation".into()));
            }
            sess.gradients(task)?
        };
        for (name, g) in grads {
            let p = adapted.store.value_mut(&name)?;
            for (v, gi) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= eta * gi;
            }
        }
    }
    Ok(adapted)
}

/// One point of a loss-weight grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub assignment: BTreeMap<String, f64>,
    pub validation_accuracy: f64,
    pub validation_f1: f64,
    /// Mean training total of the epoch whose parameters were kept.
    pub total_loss: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: PtsmConfig,
    pub best_index: usize,
    pub rows: Vec<GridRow>,
}

/// Sets a loss weight by its field name.
pub fn set_weight(config: &mut PtsmConfig, name: &str, value: f64) -> Result<()> {
    let w = &mut config.loss;
    let slot = match name {
        "lambda_subj" => &mut w.lambda_subj,
        "lambda_decouple" => &mut w.lambda_decouple,
        "lambda_mask" => &mut w.lambda_mask,
        "lambda_contrast" => &mut w.lambda_contrast,
        "lambda_orth" => &mut w.lambda_orth,
        "lambda_cov" => &mut w.lambda_cov,
        "lambda_info" => &mut w.lambda_info,
        "lambda_sparse_feat" => &mut w.lambda_sparse_feat,
        "lambda_sim" => &mut w.lambda_sim,
        "lambda_sparse_mask" => &mut w.lambda_sparse_mask,
        "lambda_size" => &mut w.lambda_size,
        "lambda_contrast_task" => &mut w.lambda_contrast_task,
        "lambda_contrast_subj" => &mut w.lambda_contrast_subj,
        "alpha_size" => &mut w.alpha_size,
        "tau" => &mut w.tau,
        other => return Err(Error::Config(format!("unknown loss weight {other}"))),
    };
    *slot = value;
    Ok(())
}

/// Every combination of the grid, last axis varying fastest.
pub fn grid_points(grid: &[(String, Vec<f64>)]) -> Vec<BTreeMap<String, f64>> {
    let mut points = vec![BTreeMap::new()];
    for (name, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.insert(name.clone(), v);
                    q
                })
            })
            .collect();
    }
    points
}

/// Picks the best row: highest validation accuracy, then lower total loss,
/// then earlier enumeration order.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &rows[b];
                let better = r.validation_accuracy > cur.validation_accuracy
                    || (r.validation_accuracy == cur.validation_accuracy && r.total_loss < cur.total_loss);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Trains one configuration per grid point and keeps the best.
pub fn grid_search(
    template: &PtsmConfig,
    grid: &[(String, Vec<f64>)],
    train: &[EegTrial],
    validation: &[EegTrial],
) -> Result<GridResult> {
    let points = grid_points(grid);
    let mut rows = Vec::with_capacity(points.len());
    let mut configs = Vec::with_capacity(points.len());
    for point in points {
        let mut cfg = template.clone();
        for (name, &v) in &point {
            set_weight(&mut cfg, name, v)?;
        }
        cfg.validate()?;
        let (state, history) = fit(train, validation, &cfg)?;
        let metrics = evaluate(&state.model, &apply_ablation(&cfg)?, validation)?;
        let total_loss = history
            .epochs
            .iter()
            .find(|e| e.epoch == history.best_epoch)
            .map_or(f64::INFINITY, |e| e.train.total);
        rows.push(GridRow {
            assignment: point,
            validation_accuracy: metrics.accuracy,
            validation_f1: metrics.macro_f1,
            total_loss,
            best_epoch: history.best_epoch,
        });
        configs.push(cfg);
    }
    let best_index = select_best(&rows).ok_or_else(|| Error::contract("empty grid"))?;
    Ok(GridResult {
        best: configs.swap_remove(best_index),
        best_index,
        rows,
    })
}

/// Convenience for tests and the harness: a `[N, C, T]` tensor of trials.
pub fn batch_tensor(trials: &[EegTrial]) -> Result<Tensor> {
    let refs: Vec<&EegTrial> = trials.iter().collect();
    Ok(stack(&refs)?.0)
}

//! Loss terms and their weighted composition.
//!
//! Each term is built on a [`Tape`] so it can be differentiated; the
//! `*_value` helpers evaluate the same code path on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Guard added (squared) under cosine denominators.
pub const NORM_EPS: f64 = 1e-12;
/// Added to the covariance-ratio denominator.
pub const COV_EPS: f64 = 1e-8;
/// Floor applied to true-class probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_subj: f64,
    pub lambda_decouple: f64,
    pub lambda_mask: f64,
    pub lambda_contrast: f64,
    pub lambda_orth: f64,
    pub lambda_cov: f64,
    pub lambda_info: f64,
    pub lambda_sparse_feat: f64,
    pub lambda_sim: f64,
    pub lambda_sparse_mask: f64,
    pub lambda_size: f64,
    pub lambda_contrast_task: f64,
    pub lambda_contrast_subj: f64,
    /// Target mean activation of each branch mask.
    pub alpha_size: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Use `|cos|` in the mask similarity term instead of the signed cosine.
    pub mask_similarity_abs: bool,
    /// Upper clamp on each covariance trace in the information term.
    pub info_trace_clamp: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_subj: 0.5,
            lambda_decouple: 0.1,
            lambda_mask: 0.1,
            lambda_contrast: 0.1,
            lambda_orth: 1.0,
            lambda_cov: 1.0,
            lambda_info: 0.01,
            lambda_sparse_feat: 1e-4,
            lambda_sim: 1.0,
            lambda_sparse_mask: 1e-3,
            lambda_size: 1.0,
            lambda_contrast_task: 1.0,
            lambda_contrast_subj: 1.0,
            alpha_size: 0.5,
            tau: 0.5,
            mask_similarity_abs: false,
            info_trace_clamp: Some(1e3),
        }
    }
}

impl LossWeights {
    /// Every weight zero: the total reduces to the task loss.
    pub fn task_only() -> Self {
        Self {
            lambda_subj: 0.0,
            lambda_decouple: 0.0,
            lambda_mask: 0.0,
            lambda_contrast: 0.0,
            lambda_orth: 0.0,
            lambda_cov: 0.0,
            lambda_info: 0.0,
            lambda_sparse_feat: 0.0,
            lambda_sim: 0.0,
            lambda_sparse_mask: 0.0,
            lambda_size: 0.0,
            lambda_contrast_task: 0.0,
            lambda_contrast_subj: 0.0,
            ..Self::default()
        }
    }

    pub fn lambdas(&self) -> [(&'static str, f64); 13] {
        [
            ("lambda_subj", self.lambda_subj),
            ("lambda_decouple", self.lambda_decouple),
            ("lambda_mask", self.lambda_mask),
            ("lambda_contrast", self.lambda_contrast),
            ("lambda_orth", self.lambda_orth),
            ("lambda_cov", self.lambda_cov),
            ("lambda_info", self.lambda_info),
            ("lambda_sparse_feat", self.lambda_sparse_feat),
            ("lambda_sim", self.lambda_sim),
            ("lambda_sparse_mask", self.lambda_sparse_mask),
            ("lambda_size", self.lambda_size),
            ("lambda_contrast_task", self.lambda_contrast_task),
            ("lambda_contrast_subj", self.lambda_contrast_subj),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.lambdas() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha_size > 0.0 && self.alpha_size < 1.0) {
            return Err(Error::Config(format!(
                "loss.alpha_size must lie in (0, 1), got {}",
                self.alpha_size
            )));
        }
        if let Some(c) = self.info_trace_clamp {
            if !(c > 0.0) {
                return Err(Error::Config("loss.info_trace_clamp must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Raw (unweighted) values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub task: f64,
    pub subj: f64,
    pub sim: f64,
    pub sparse_mask: f64,
    pub size: f64,
    pub orth: f64,
    pub cov: f64,
    pub info: f64,
    pub sparse_feat: f64,
    pub contrast_task: f64,
    pub contrast_subj: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 11] = [
        "task",
        "subj",
        "sim",
        "sparse_mask",
        "size",
        "orth",
        "cov",
        "info",
        "sparse_feat",
        "contrast_task",
        "contrast_subj",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.task,
            self.subj,
            self.sim,
            self.sparse_mask,
            self.size,
            self.orth,
            self.cov,
            self.info,
            self.sparse_feat,
            self.contrast_task,
            self.contrast_subj,
        ]
    }
}

/// Every term plus the three aggregates and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub decouple: f64,
    pub mask: f64,
    pub contrast: f64,
    pub total: f64,
    /// True-class probabilities that hit the floor in the two cross-entropies.
    pub clamped_probs: usize,
    /// Contrastive terms evaluated on a batch with no positive pairs.
    pub degenerate_contrast: usize,
}

impl LossReport {
    pub const CSV_COLUMNS: [&'static str; 15] = [
        "task",
        "subj",
        "sim",
        "sparse_mask",
        "size",
        "orth",
        "cov",
        "info",
        "sparse_feat",
        "contrast_task",
        "contrast_subj",
        "decouple",
        "mask",
        "contrast",
        "total",
    ];

    pub fn csv_values(&self) -> Vec<f64> {
        let mut v = self.terms.values().to_vec();
        v.extend([self.decouple, self.mask, self.contrast, self.total]);
        v
    }
}

/// Weighted composition of the raw terms. The arithmetic order matches
/// [`compose_total`] so a report built here equals the differentiated total.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in LossTerms::NAMES.iter().zip(terms.values()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    let t = terms;
    let decouple = w.lambda_orth * t.orth + w.lambda_cov * t.cov + w.lambda_info * t.info
        + w.lambda_sparse_feat * t.sparse_feat;
    let mask = w.lambda_sim * t.sim + w.lambda_sparse_mask * t.sparse_mask + w.lambda_size * t.size;
    let contrast = w.lambda_contrast_task * t.contrast_task + w.lambda_contrast_subj * t.contrast_subj;
    let total = t.task
        + w.lambda_subj * t.subj
        + w.lambda_decouple * decouple
        + w.lambda_mask * mask
        + w.lambda_contrast * contrast;
    Ok(LossReport {
        terms: *t,
        decouple,
        mask,
        contrast,
        total,
        clamped_probs: 0,
        degenerate_contrast: 0,
    })
}

/// Tape variables of every term, in [`LossTerms`] order.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub task: Var,
    pub subj: Var,
    pub sim: Var,
    pub sparse_mask: Var,
    pub size: Var,
    pub orth: Var,
    pub cov: Var,
    pub info: Var,
    pub sparse_feat: Var,
    pub contrast_task: Var,
    pub contrast_subj: Var,
}

impl TermVars {
    pub fn values(&self, tape: &Tape) -> LossTerms {
        let v = |x: Var| tape.value(x).data()[0];
        LossTerms {
            task: v(self.task),
            subj: v(self.subj),
            sim: v(self.sim),
            sparse_mask: v(self.sparse_mask),
            size: v(self.size),
            orth: v(self.orth),
            cov: v(self.cov),
            info: v(self.info),
            sparse_feat: v(self.sparse_feat),
            contrast_task: v(self.contrast_task),
            contrast_subj: v(self.contrast_subj),
        }
    }
}

fn weighted_sum(tape: &mut Tape, parts: &[(f64, Var)]) -> Result<Var> {
    let mut acc = tape.scale(parts[0].1, parts[0].0);
    for &(w, v) in &parts[1..] {
        let s = tape.scale(v, w);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Differentiable total; same composition as [`total_loss`].
pub fn compose_total(tape: &mut Tape, t: &TermVars, w: &LossWeights) -> Result<Var> {
    let decouple = weighted_sum(
        tape,
        &[
            (w.lambda_orth, t.orth),
            (w.lambda_cov, t.cov),
            (w.lambda_info, t.info),
            (w.lambda_sparse_feat, t.sparse_feat),
        ],
    )?;
    let mask = weighted_sum(
        tape,
        &[
            (w.lambda_sim, t.sim),
            (w.lambda_sparse_mask, t.sparse_mask),
            (w.lambda_size, t.size),
        ],
    )?;
    let contrast = weighted_sum(
        tape,
        &[(w.lambda_contrast_task, t.contrast_task), (w.lambda_contrast_subj, t.contrast_subj)],
    )?;
    let mut total = t.task;
    for (lambda, v) in [
        (w.lambda_subj, t.subj),
        (w.lambda_decouple, decouple),
        (w.lambda_mask, mask),
        (w.lambda_contrast, contrast),
    ] {
        let s = tape.scale(v, lambda);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

fn check_2d(tape: &Tape, op: &'static str, a: Var, b: Option<Var>) -> Result<(usize, usize)> {
    let sa = tape.shape(a);
    if sa.len() != 2 {
        return Err(Error::shape(op, format!("expected [batch, d], got {sa:?}")));
    }
    if let Some(b) = b {
        if tape.shape(b) != sa {
            return Err(Error::shape(op, format!("{sa:?} vs {:?}", tape.shape(b))));
        }
    }
    Ok((sa[0], sa[1]))
}

/// Mean negative log-probability of the true class. Returns the loss and the
/// number of true-class probabilities that were floored at [`PROB_FLOOR`].
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let (n, k) = check_2d(tape, "cross_entropy", probs, None)?;
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let clamped = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| tape.value(probs).data()[i * k + y] < PROB_FLOOR)
        .count();
    let onehot = tape.constant(Tensor::new(&[n, k], onehot)?);
    let picked = tape.mul(probs, onehot)?;
    let p_true = tape.sum_axis(picked, 1)?;
    let p_true = tape.clamp(p_true, PROB_FLOOR, f64::INFINITY);
    let logp = tape.log(p_true);
    let mean = tape.mean(logp);
    Ok((tape.scale(mean, -1.0), clamped))
}

/// Row-wise cosine of two `[N, d]` batches, `dot / sqrt(|a|²|b|² + eps²)`,
/// so an all-zero row yields 0 with a finite gradient.
pub fn row_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_2d(tape, "row_cosine", a, Some(b))?;
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_axis(ab, 1)?;
    let aa = tape.mul(a, a)?;
    let aa = tape.sum_axis(aa, 1)?;
    let bb = tape.mul(b, b)?;
    let bb = tape.sum_axis(bb, 1)?;
    let prod = tape.mul(aa, bb)?;
    let prod = tape.add_scalar(prod, NORM_EPS * NORM_EPS);
    let denom = tape.sqrt(prod);
    tape.div(dot, denom)
}

/// Mean cosine similarity between flattened personal and common masks;
/// signed unless `absolute` is set.
pub fn mask_similarity(tape: &mut Tape, m_p: Var, m_c: Var, absolute: bool) -> Result<Var> {
    let cos = row_cosine(tape, m_p, m_c)?;
    let cos = if absolute { tape.abs(cos) } else { cos };
    Ok(tape.mean(cos))
}

/// Mean over the batch of `|m_p|₁ + |m_c|₁`.
pub fn mask_sparsity(tape: &mut Tape, m_p: Var, m_c: Var) -> Result<Var> {
    let (n, _) = check_2d(tape, "mask_sparsity", m_p, Some(m_c))?;
    let ap = tape.abs(m_p);
    let ac = tape.abs(m_c);
    let sp = tape.sum(ap);
    let sc = tape.sum(ac);
    let s = tape.add(sp, sc)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Mean over the batch of `|mean(m_p) − α| + |mean(m_c) − α|`.
pub fn mask_size(tape: &mut Tape, m_p: Var, m_c: Var, alpha_size: f64) -> Result<Var> {
    check_2d(tape, "mask_size", m_p, Some(m_c))?;
    let mut parts = Vec::with_capacity(2);
    for m in [m_p, m_c] {
        let mean = tape.mean_axis(m, 1)?;
        let dev = tape.add_scalar(mean, -alpha_size);
        parts.push(tape.abs(dev));
    }
    let both = tape.add(parts[0], parts[1])?;
    Ok(tape.mean(both))
}

/// Mean absolute cosine between task and subject embeddings.
pub fn orthogonality(tape: &mut Tape, f_task: Var, f_subj: Var) -> Result<Var> {
    let cos = row_cosine(tape, f_task, f_subj)?;
    let a = tape.abs(cos);
    Ok(tape.mean(a))
}

/// `‖Cov(X,Y)‖_F / (‖Cov(X)‖_F ‖Cov(Y)‖_F + 1e-8)`.
pub fn covariance_decorrelation(tape: &mut Tape, f_task: Var, f_subj: Var) -> Result<Var> {
    check_2d(tape, "covariance_decorrelation", f_task, None)?;
    check_2d(tape, "covariance_decorrelation", f_subj, None)?;
    let cross = tape.covariance(f_task, f_subj)?;
    let cx = tape.covariance(f_task, f_task)?;
    let cy = tape.covariance(f_subj, f_subj)?;
    let num = tape.frobenius(cross);
    let nx = tape.frobenius(cx);
    let ny = tape.frobenius(cy);
    let den = tape.mul(nx, ny)?;
    let den = tape.add_scalar(den, COV_EPS);
    tape.div(num, den)
}

/// `−(tr Cov(X) + tr Cov(Y))`, each trace optionally clamped from above.
pub fn info_retention(tape: &mut Tape, f_task: Var, f_subj: Var, trace_clamp: Option<f64>) -> Result<Var> {
    check_2d(tape, "info_retention", f_task, None)?;
    check_2d(tape, "info_retention", f_subj, None)?;
    let mut traces = Vec::with_capacity(2);
    for f in [f_task, f_subj] {
        let c = tape.covariance(f, f)?;
        let tr = tape.trace(c)?;
        traces.push(match trace_clamp {
            Some(hi) => tape.clamp(tr, f64::NEG_INFINITY, hi),
            None => tr,
        });
    }
    let s = tape.add(traces[0], traces[1])?;
    Ok(tape.scale(s, -1.0))
}

/// `Σ_i (|f_task,i|₁ + |f_subj,i|₁)`, summed (not averaged) over the batch.
pub fn feature_sparsity(tape: &mut Tape, f_task: Var, f_subj: Var) -> Result<Var> {
    check_2d(tape, "feature_sparsity", f_task, None)?;
    check_2d(tape, "feature_sparsity", f_subj, None)?;
    let a = tape.abs(f_task);
    let b = tape.abs(f_subj);
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    tape.add(sa, sb)
}

/// Supervised NT-Xent with label-defined positives. Anchors without a
/// positive are skipped; if no anchor has one the loss is a constant 0 and the
/// second return value is `true`.
pub fn nt_xent(tape: &mut Tape, emb: Var, labels: &[usize], tau: f64) -> Result<(Var, bool)> {
    let (n, _) = check_2d(tape, "nt_xent", emb, None)?;
    if labels.len() != n {
        return Err(Error::shape("nt_xent", format!("{n} rows but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::contract(format!("nt_xent needs a batch of at least 2, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("nt_xent temperature must be > 0, got {tau}")));
    }
    let has_pos: Vec<bool> = (0..n)
        .map(|a| (0..n).any(|p| p != a && labels[p] == labels[a]))
        .collect();
    let anchors = has_pos.iter().filter(|&&h| h).count();
    if anchors == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), true));
    }
    let sq = tape.mul(emb, emb)?;
    let sq = tape.sum_axis(sq, 1)?;
    let sq = tape.add_scalar(sq, NORM_EPS * NORM_EPS);
    let norm = tape.sqrt(sq);
    let norm = tape.reshape(norm, &[n, 1])?;
    let z = tape.div(emb, norm)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let e = tape.exp(sim);

    let mut pos = vec![0.0; n * n];
    let mut others = vec![0.0; n * n];
    for a in 0..n {
        for k in 0..n {
            if k != a {
                others[a * n + k] = 1.0;
                if labels[k] == labels[a] {
                    pos[a * n + k] = 1.0;
                }
            }
        }
    }
    let pos = tape.constant(Tensor::new(&[n, n], pos)?);
    let others = tape.constant(Tensor::new(&[n, n], others)?);
    let num = tape.mul(e, pos)?;
    let num = tape.sum_axis(num, 1)?;
    // Anchors without positives get a numerator of 1 and weight 0.
    let fill = tape.constant(Tensor::vector(has_pos.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect()));
    let num = tape.add(num, fill)?;
    let den = tape.mul(e, others)?;
    let den = tape.sum_axis(den, 1)?;
    let log_den = tape.log(den);
    let log_num = tape.log(num);
    let per_anchor = tape.sub(log_den, log_num)?;
    let weight = tape.constant(Tensor::vector(
        has_pos.iter().map(|&h| if h { 1.0 / anchors as f64 } else { 0.0 }).collect(),
    ));
    let weighted = tape.mul(per_anchor, weight)?;
    Ok((tape.sum(weighted), false))
}

/// Evaluates a tape-built loss on constant inputs.
fn eval_on<F>(inputs: &[&Tensor], f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

pub fn cross_entropy_value(probs: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let mut clamped = 0;
    let v = eval_on(&[probs], |t, v| {
        let (l, c) = cross_entropy(t, v[0], labels)?;
        clamped = c;
        Ok(l)
    })?;
    Ok((v, clamped))
}

pub fn mask_similarity_value(m_p: &Tensor, m_c: &Tensor, absolute: bool) -> Result<f64> {
    eval_on(&[m_p, m_c], |t, v| mask_similarity(t, v[0], v[1], absolute))
}

pub fn mask_sparsity_value(m_p: &Tensor, m_c: &Tensor) -> Result<f64> {
    eval_on(&[m_p, m_c], |t, v| mask_sparsity(t, v[0], v[1]))
}

pub fn mask_size_value(m_p: &Tensor, m_c: &Tensor, alpha_size: f64) -> Result<f64> {
    eval_on(&[m_p, m_c], |t, v| mask_size(t, v[0], v[1], alpha_size))
}

pub fn orthogonality_value(f_task: &Tensor, f_subj: &Tensor) -> Result<f64> {
    eval_on(&[f_task, f_subj], |t, v| orthogonality(t, v[0], v[1]))
}

pub fn covariance_decorrelation_value(f_task: &Tensor, f_subj: &Tensor) -> Result<f64> {
    eval_on(&[f_task, f_subj], |t, v| covariance_decorrelation(t, v[0], v[1]))
}

pub fn info_retention_value(f_task: &Tensor, f_subj: &Tensor, trace_clamp: Option<f64>) -> Result<f64> {
    eval_on(&[f_task, f_subj], |t, v| info_retention(t, v[0], v[1], trace_clamp))
}

pub fn feature_sparsity_value(f_task: &Tensor, f_subj: &Tensor) -> Result<f64> {
    eval_on(&[f_task, f_subj], |t, v| feature_sparsity(t, v[0], v[1]))
}

pub fn nt_xent_value(emb: &Tensor, labels: &[usize], tau: f64) -> Result<(f64, bool)> {
    let mut degenerate = false;
    let v = eval_on(&[emb], |t, v| {
        let (l, d) = nt_xent(t, v[0], labels, tau)?;
        degenerate = d;
        Ok(l)
    })?;
    Ok((v, degenerate))
}

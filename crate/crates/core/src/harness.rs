//! Run pipeline shared by the CLI commands: train/evaluate on a subject
//! split, write checkpoints, logs and manifests, export masks, build the
//! ablation table, and run the gradient-check suite.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Ablation, PtsmConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{self, LossReport};
use crate::metrics::{percent, MetricsReport};
use crate::model::{Ptsm, Wiring};
use crate::nn::{Mode, Session, Trainable};
use crate::stap::{outer_flatten, outer_flatten_var};
use crate::synthdata::{self, Dataset, EegTrial, SplitPlan};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor};
use crate::trainer::{self, apply_ablation, History, TrainState};

/// Rows of the ablation table and the flags each one sets.
pub const ABLATION_ROWS: [(&str, fn(&mut Ablation)); 8] = [
    ("full", |_| {}),
    ("w/o STAP", |a| a.disable_stap = true),
    ("w/o PP", |a| a.disable_personal_branch = true),
    ("w/o CP", |a| a.disable_common_branch = true),
    ("w/o VO", |a| a.disable_orth = true),
    ("w/o CO", |a| a.disable_cov = true),
    ("w/o MIM", |a| a.disable_info = true),
    ("w/o SR", |a| a.disable_sparse_feat = true),
];

/// Checks that a dataset matches the model dimensions of a config.
pub fn check_dataset(config: &PtsmConfig, meta: &synthdata::DatasetMeta) -> Result<()> {
    let m = &config.model;
    let want = (m.channels, m.samples, m.classes, m.subjects);
    let got = (meta.channels, meta.samples, meta.classes, meta.subjects);
    if want != got {
        return Err(Error::shape(
            "dataset vs config",
            format!("config expects (C, T, K, S) = {want:?}, dataset has {got:?}"),
        ));
    }
    Ok(())
}

pub struct RunOutcome {
    pub state: TrainState,
    pub history: History,
    pub wiring: Wiring,
    pub test: Vec<EegTrial>,
    pub test_metrics: Option<MetricsReport>,
}

/// Splits, trains and evaluates on the test subjects. `train` and every
/// ablation row go through this function.
pub fn train_run(config: &PtsmConfig, dataset: &Dataset, plan: &SplitPlan) -> Result<RunOutcome> {
    check_dataset(config, &dataset.meta)?;
    let (train, val, test) = synthdata::split(&dataset.trials, plan)?;
    let (state, history) = trainer::fit(&train, &val, config)?;
    let wiring = apply_ablation(config)?;
    let test_metrics = if test.is_empty() {
        None
    } else {
        Some(trainer::evaluate(&state.model, &wiring, &test)?)
    };
    Ok(RunOutcome {
        state,
        history,
        wiring,
        test,
        test_metrics,
    })
}

/// CSV training log: epoch, every loss term, validation ACC and F1.
pub fn training_log_csv(history: &History) -> String {
    let mut out = String::from("epoch,");
    out.push_str(&LossReport::CSV_COLUMNS.join(","));
    out.push_str(",val_accuracy,val_macro_f1\n");
    for e in &history.epochs {
        out.push_str(&e.epoch.to_string());
        for v in e.train.csv_values() {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{:?},{:?}\n", e.validation.accuracy, e.validation.macro_f1));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PtsmConfig,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_path: Option<String>,
    pub dataset_checksum: String,
    pub split: SplitPlan,
    pub artifact_version: String,
    pub log_path: String,
    pub checkpoint_path: String,
    pub best_epoch: usize,
    pub final_metrics: Option<MetricsReport>,
    pub mask_export: Option<String>,
}

pub fn artifact_version() -> String {
    format!("ptsm-core {}", env!("CARGO_PKG_VERSION"))
}

/// Writes `checkpoint.bin`, `log.csv`, `metrics.json` and `manifest.json`
/// into `out`.
pub fn write_run(
    out: &Path,
    outcome: &RunOutcome,
    config: &PtsmConfig,
    dataset: &Dataset,
    dataset_path: Option<&Path>,
    plan: &SplitPlan,
) -> Result<RunManifest> {
    let ckpt = out.join("checkpoint.bin");
    let log = out.join("log.csv");
    checkpoint::save(&outcome.state.model, config, &ckpt)?;
    io::write_atomic(&log, training_log_csv(&outcome.history).as_bytes())?;
    if let Some(m) = &outcome.test_metrics {
        write_json(&out.join("metrics.json"), m)?;
    }
    let manifest = RunManifest {
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        dataset_path: dataset_path.map(|p| p.display().to_string()),
        dataset_checksum: format!("{:08x}", synthdata::checksum(&dataset.meta, &dataset.trials)?),
        split: plan.clone(),
        artifact_version: artifact_version(),
        log_path: log.display().to_string(),
        checkpoint_path: ckpt.display().to_string(),
        best_epoch: outcome.history.best_epoch,
        final_metrics: outcome.test_metrics.clone(),
        mask_export: None,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serialises");
    bytes.push(b'\n');
    io::write_atomic(path, &bytes)
}

/// Masks of one trial as written by [`export_masks`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub index: usize,
    pub subject: usize,
    pub label: usize,
    pub m_s: Vec<f64>,
    pub m_t: Vec<f64>,
    pub m_s_p: Vec<f64>,
    pub m_t_p: Vec<f64>,
    pub m_s_c: Vec<f64>,
    pub m_t_c: Vec<f64>,
    /// Flattened `m_s ⊗ m_t`, entry `c·T + t`.
    pub fused_outer: Vec<f64>,
}

pub fn mask_records(model: &Ptsm, wiring: &Wiring, trials: &[EegTrial]) -> Result<Vec<MaskRecord>> {
    let mut out = Vec::with_capacity(trials.len());
    for (chunk_idx, chunk) in trials.chunks(256).enumerate() {
        let x = trainer::batch_tensor(chunk)?;
        for (i, (m, tr)) in model.masks(&x, wiring)?.into_iter().zip(chunk).enumerate() {
            out.push(MaskRecord {
                index: chunk_idx * 256 + i,
                subject: tr.s,
                label: tr.y,
                fused_outer: outer_flatten(&m.m_t, &m.m_s)?.into_data(),
                m_s: m.m_s.into_data(),
                m_t: m.m_t.into_data(),
                m_s_p: m.m_s_p.into_data(),
                m_t_p: m.m_t_p.into_data(),
                m_s_c: m.m_s_c.into_data(),
                m_t_c: m.m_t_c.into_data(),
            });
        }
    }
    Ok(out)
}

/// Writes per-trial masks as a JSON array.
pub fn export_masks(model: &Ptsm, wiring: &Wiring, trials: &[EegTrial], path: &Path) -> Result<Vec<MaskRecord>> {
    let records = mask_records(model, wiring, trials)?;
    write_json(path, &records)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
}

/// Trains every ablation row on the same data and split.
pub fn run_ablation(base: &PtsmConfig, dataset: &Dataset, plan: &SplitPlan, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, set) in ABLATION_ROWS {
        let mut cfg = base.clone();
        set(&mut cfg.ablation);
        let outcome = train_run(&cfg, dataset, plan)?;
        let metrics = outcome
            .test_metrics
            .ok_or_else(|| Error::contract("ablation needs at least one test subject"))?;
        let row = AblationRow {
            label: label.to_string(),
            metrics,
            best_epoch: outcome.history.best_epoch,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,accuracy,macro_f1,sensitivity,specificity,acc_pct,f1_pct,sen_pct,spe_pct\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{},{},{},{}\n",
            r.label,
            m.accuracy,
            m.macro_f1,
            m.sensitivity,
            m.specificity,
            percent(m.accuracy),
            percent(m.macro_f1),
            percent(m.sensitivity),
            percent(m.specificity)
        ));
    }
    out
}

/// Result of one entry of the gradient-check suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

fn unit_interval(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.05, 0.95, rng)
}

/// Small model dimensions used by the composite check.
pub fn gradcheck_config() -> PtsmConfig {
    let mut cfg = PtsmConfig::default();
    let m = &mut cfg.model;
    m.channels = 3;
    m.samples = 16;
    m.classes = 3;
    m.subjects = 3;
    m.pooled_len = 4;
    m.feature_dim = 6;
    m.spatial_hidden = 5;
    m.temporal_width = 3;
    cfg
}

/// Finite-difference check of every loss term and of the full weighted
/// objective of a small model.
pub fn gradcheck_suite(seed: u64, probes_per_term: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = |max: Option<usize>| GradCheckOptions {
        max_probes_per_param: max,
        seed,
        ..GradCheckOptions::default()
    };
    let (n, d) = (6, 8);
    let mut entries = Vec::new();
    let mut run = |name: &str, report: GradCheckReport| {
        entries.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };

    // Enough rows that every term gets at least `probes_per_term` probes.
    let rows = probes_per_term.div_ceil(2 * d).max(n);
    let pair = |rng: &mut ChaCha8Rng| {
        vec![
            ("a".to_string(), random(&[rows, d], rng)),
            ("b".to_string(), random(&[rows, d], rng)),
        ]
    };
    let masks = |rng: &mut ChaCha8Rng| {
        vec![
            ("m_p".to_string(), unit_interval(&[rows, d], rng)),
            ("m_c".to_string(), unit_interval(&[rows, d], rng)),
        ]
    };

    let logits = vec![("logits".to_string(), random(&[rows.max(probes_per_term.div_ceil(3)), 3], &mut rng))];
    let ce_labels: Vec<usize> = (0..logits[0].1.shape()[0]).map(|i| i % 3).collect();
    run(
        "cross_entropy",
        grad_check(
            |t, v| {
                let p = t.softmax(v[0])?;
                Ok(losses::cross_entropy(t, p, &ce_labels)?.0)
            },
            &logits,
            &opts(None),
        )?,
    );
    run(
        "mask_similarity",
        grad_check(|t, v| losses::mask_similarity(t, v[0], v[1], false), &masks(&mut rng), &opts(None))?,
    );
    run(
        "mask_sparsity",
        grad_check(|t, v| losses::mask_sparsity(t, v[0], v[1]), &masks(&mut rng), &opts(None))?,
    );
    run(
        "mask_size",
        grad_check(|t, v| losses::mask_size(t, v[0], v[1], 0.5), &masks(&mut rng), &opts(None))?,
    );
    run(
        "orthogonality",
        grad_check(|t, v| losses::orthogonality(t, v[0], v[1]), &pair(&mut rng), &opts(None))?,
    );
    run(
        "covariance_decorrelation",
        grad_check(|t, v| losses::covariance_decorrelation(t, v[0], v[1]), &pair(&mut rng), &opts(None))?,
    );
    run(
        "info_retention",
        grad_check(|t, v| losses::info_retention(t, v[0], v[1], None), &pair(&mut rng), &opts(None))?,
    );
    // Keep entries away from the |x| kink.
    let away = |rng: &mut ChaCha8Rng| {
        pair(rng)
            .into_iter()
            .map(|(k, t)| (k, t.map(|x| if x.abs() < 1e-3 { 0.5 } else { x })))
            .collect::<Vec<_>>()
    };
    run(
        "feature_sparsity",
        grad_check(|t, v| losses::feature_sparsity(t, v[0], v[1]), &away(&mut rng), &opts(None))?,
    );
    let emb_rows = probes_per_term.div_ceil(d).max(n);
    let emb_labels: Vec<usize> = (0..emb_rows).map(|i| i % 3).collect();
    let emb = vec![("embeddings".to_string(), random(&[emb_rows, d], &mut rng))];
    run(
        "nt_xent",
        grad_check(|t, v| Ok(losses::nt_xent(t, v[0], &emb_labels, 0.5)?.0), &emb, &opts(None))?,
    );

    let report = composite_gradcheck(&gradcheck_config(), seed, 4, probes_per_term)?;
    run("total_loss", report);
    Ok(entries)
}

/// Checks the gradient of the full weighted objective of a freshly
/// initialised model on a random batch of `batch` trials, probing a random
/// subset of `probes` parameter entries spread over all tensors.
pub fn composite_gradcheck(config: &PtsmConfig, seed: u64, batch: usize, probes: usize) -> Result<GradCheckReport> {
    let model = Ptsm::new(&config.model, seed)?;
    let wiring = apply_ablation(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let m = &config.model;
    let x = Tensor::randn(&[batch, m.channels, m.samples], &mut rng);
    let y: Vec<usize> = (0..batch).map(|i| i % m.classes).collect();
    let s: Vec<usize> = (0..batch).map(|i| (i / 2) % m.subjects).collect();
    let params: Vec<(String, Tensor)> = model
        .store
        .params()
        .map(|(k, p)| (k.clone(), p.value.clone()))
        .collect();
    // Small tensors (fusion logits, biases) cap their own probe count, so
    // raise the per-tensor budget until the total reaches `probes`.
    let total_probes = |k: usize| params.iter().map(|(_, t)| t.numel().min(k)).sum::<usize>();
    let max_numel = params.iter().map(|(_, t)| t.numel()).max().unwrap_or(0);
    let mut per_param = probes.div_ceil(params.len()).max(1);
    while total_probes(per_param) < probes && per_param < max_numel {
        per_param += 1;
    }
    let objective = |tape: &mut Tape, vars: &[crate::tensor::Var]| -> Result<crate::tensor::Var> {
        let taken = std::mem::take(tape);
        let mut dropout = ChaCha8Rng::seed_from_u64(seed);
        dropout.set_stream(7);
        let mut sess = Session::from_tape(taken, &model.store, Mode::Train, Trainable::nothing(), Some(dropout));
        for ((name, _), &v) in params.iter().zip(vars) {
            sess.bind(name, v)?;
        }
        let out = model.forward(&mut sess, &x, &wiring, true)?;
        let w = &wiring.weights;
        let t = &mut sess.tape;
        let f_subj = out.f_subj.expect("subject branch");
        let mk = out.masks;
        let flat_p = outer_flatten_var(t, mk.m_t_p, mk.m_s_p)?;
        let flat_c = outer_flatten_var(t, mk.m_t_c, mk.m_s_c)?;
        let terms = losses::TermVars {
            task: losses::cross_entropy(t, out.task_probs, &y)?.0,
            subj: losses::cross_entropy(t, out.subj_probs.expect("subject branch"), &s)?.0,
            sim: losses::mask_similarity(t, flat_p, flat_c, w.mask_similarity_abs)?,
            sparse_mask: losses::mask_sparsity(t, flat_p, flat_c)?,
            size: losses::mask_size(t, flat_p, flat_c, w.alpha_size)?,
            orth: losses::orthogonality(t, out.f_task, f_subj)?,
            cov: losses::covariance_decorrelation(t, out.f_task, f_subj)?,
            info: losses::info_retention(t, out.f_task, f_subj, w.info_trace_clamp)?,
            sparse_feat: losses::feature_sparsity(t, out.f_task, f_subj)?,
            contrast_task: losses::nt_xent(t, out.f_task, &y, w.tau)?.0,
            contrast_subj: losses::nt_xent(t, f_subj, &s, w.tau)?.0,
        };
        let total = losses::compose_total(t, &terms, w)?;
        *tape = sess.into_tape();
        Ok(total)
    };
    grad_check(
        objective,
        &params,
        &GradCheckOptions {
            max_probes_per_param: Some(per_param),
            seed,
            ..GradCheckOptions::default()
        },
    )
}

/// Default output locations inside a run directory.
pub fn run_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (out.join("checkpoint.bin"), out.join("log.csv"), out.join("manifest.json"))
}

/// Splits one subject's trials into a class-balanced support set of
/// `n_support` trials (round-robin over classes, in dataset order) and the
/// held-out remainder.
pub fn support_split(trials: &[EegTrial], subject: usize, n_support: usize) -> Result<(Vec<EegTrial>, Vec<EegTrial>)> {
    let own: Vec<&EegTrial> = trials.iter().filter(|t| t.s == subject).collect();
    if own.is_empty() {
        return Err(Error::contract(format!("no trials for subject {subject}")));
    }
    if n_support >= own.len() {
        return Err(Error::contract(format!(
            "support size {n_support} leaves no held-out trials for subject {subject} ({} trials)",
            own.len()
        )));
    }
    let classes: std::collections::BTreeSet<usize> = own.iter().map(|t| t.y).collect();
    let mut queues: Vec<std::collections::VecDeque<usize>> = classes
        .iter()
        .map(|&c| (0..own.len()).filter(|&i| own[i].y == c).collect())
        .collect();
    let mut chosen = vec![false; own.len()];
    let mut picked = 0;
    while picked < n_support {
        for q in queues.iter_mut() {
            if picked == n_support {
                break;
            }
            if let Some(i) = q.pop_front() {
                chosen[i] = true;
                picked += 1;
            }
        }
    }
    let (mut support, mut held_out) = (Vec::new(), Vec::new());
    for (i, t) in own.into_iter().enumerate() {
        if chosen[i] {
            support.push(t.clone());
        } else {
            held_out.push(t.clone());
        }
    }
    Ok((support, held_out))
}

use std::collections::BTreeMap;

use ptsm_core::checkpoint;
use ptsm_core::config::{OptimizerConfig, PtsmConfig};
use ptsm_core::harness::gradcheck_config;
use ptsm_core::losses::LossWeights;
use ptsm_core::nn::{ParamGroup, ParamStore};
use ptsm_core::optim::Adam;
use ptsm_core::stap::FusionSource;
use ptsm_core::synthdata::{generate, split, EegTrial, SplitPlan, SyntheticSpec};
use ptsm_core::trainer::*;
use ptsm_core::Tensor;

fn tiny_config() -> PtsmConfig {
    let mut cfg = gradcheck_config();
    cfg.training.batch_size = 6;
    cfg.training.max_epochs = 2;
    cfg
}

fn tiny_trials(seed: u64) -> Vec<EegTrial> {
    generate(&SyntheticSpec {
        channels: 3,
        samples: 16,
        classes: 3,
        subjects: 3,
        trials_per_cell: 4,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .trials
}

fn tiny_splits() -> (Vec<EegTrial>, Vec<EegTrial>, Vec<EegTrial>) {
    split(&tiny_trials(0), &SplitPlan::rotate(3, &[2]).unwrap()).unwrap()
}

fn refs(trials: &[EegTrial]) -> Vec<&EegTrial> {
    trials.iter().collect()
}

fn param_bits(store: &ParamStore) -> BTreeMap<String, Vec<u64>> {
    store
        .params()
        .map(|(k, p)| (k.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

// ---- single steps ----------------------------------------------------------

#[test]
fn zero_learning_rate_step_leaves_parameters_bit_identical() {
    let mut cfg = tiny_config();
    cfg.optimizer.learning_rate = 0.0;
    let trials = tiny_trials(1);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = param_bits(&state.model.store);
    train_step(&refs(&trials[..6]), &mut state, &cfg).unwrap();
    assert_eq!(param_bits(&state.model.store), before);
}

#[test]
fn train_step_is_deterministic() {
    let cfg = tiny_config();
    let trials = tiny_trials(2);
    let run = || {
        let mut state = TrainState::new(&cfg).unwrap();
        let r1 = train_step(&refs(&trials[..6]), &mut state, &cfg).unwrap();
        let r2 = train_step(&refs(&trials[6..12]), &mut state, &cfg).unwrap();
        (state, r1, r2)
    };
    let (a, ra1, ra2) = run();
    let (b, rb1, rb2) = run();
    assert!(a == b);
    assert_eq!((ra1, ra2), (rb1, rb2));
}

#[test]
fn train_step_reports_every_term_and_changes_parameters() {
    let cfg = tiny_config();
    let trials = tiny_trials(3);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = param_bits(&state.model.store);
    let r = train_step(&refs(&trials[..6]), &mut state, &cfg).unwrap();
    assert!(r.terms.values().iter().all(|v| v.is_finite()));
    assert!((r.terms.task - 3f64.ln()).abs() < 1e-12);
    assert_ne!(param_bits(&state.model.store), before);
    assert_eq!(state.optimizer.step, 1);
}

#[test]
fn single_trial_batch_is_a_contract_error() {
    let cfg = tiny_config();
    let trials = tiny_trials(4);
    let mut state = TrainState::new(&cfg).unwrap();
    let err = train_step(&refs(&trials[..1]), &mut state, &cfg).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn adam_with_zero_gradient_applies_exact_decoupled_decay() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.5, -2.0, 0.25]), ParamGroup::SharedEncoder, true);
    store.insert("b", Tensor::vector(vec![0.7]), ParamGroup::SharedEncoder, false);
    let config = OptimizerConfig::default();
    let factor = 1.0 - config.learning_rate * config.weight_decay;
    let mut adam = Adam::new(config, &store);
    let grads: BTreeMap<String, Tensor> = [
        ("w".to_string(), Tensor::zeros(&[3])),
        ("b".to_string(), Tensor::zeros(&[1])),
    ]
    .into();
    let mut expected = vec![1.5, -2.0, 0.25];
    for _ in 0..5 {
        adam.update(&mut store, &grads).unwrap();
        expected.iter_mut().for_each(|v| *v *= factor);
        assert_eq!(store.value("w").unwrap().data(), expected.as_slice());
        assert_eq!(store.value("b").unwrap().data(), &[0.7]);
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    store.insert("b", Tensor::vector(vec![0.0, 0.0]), ParamGroup::TaskHead, false);
    let config = OptimizerConfig::default();
    let lr = config.learning_rate;
    let mut adam = Adam::new(config, &store);
    let grads: BTreeMap<String, Tensor> = [("b".to_string(), Tensor::vector(vec![3.0, -0.01]))].into();
    adam.update(&mut store, &grads).unwrap();
    let v = store.value("b").unwrap().data();
    assert!((v[0] + lr).abs() < 1e-10);
    assert!((v[1] - lr).abs() < 1e-7);
}

// ---- early stopping and fit -------------------------------------------------

#[test]
fn early_stopping_on_strictly_decreasing_accuracy() {
    let mut stop = EarlyStopping::new(5);
    let mut stopped_at = None;
    for epoch in 1..=20 {
        let acc = 1.0 - epoch as f64 * 0.01;
        if stop.observe(epoch, acc) == StopDecision::Stop {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_at, Some(6));
    assert_eq!(stop.best_epoch, Some(1));
}

#[test]
fn early_stopping_ties_keep_the_earlier_epoch() {
    let mut stop = EarlyStopping::new(3);
    assert_eq!(stop.observe(1, 0.5), StopDecision::Improved);
    assert_eq!(stop.observe(2, 0.5), StopDecision::Continue);
    assert_eq!(stop.observe(3, 0.6), StopDecision::Improved);
    assert_eq!(stop.observe(4, 0.6), StopDecision::Continue);
    assert_eq!(stop.best_epoch, Some(3));
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let mut cfg = tiny_config();
    cfg.training.max_epochs = 0;
    let (tr, va, _) = tiny_splits();
    let (state, history) = fit(&tr, &va, &cfg).unwrap();
    assert!(history.epochs.is_empty());
    assert_eq!(history.best_epoch, 0);
    assert!(state == TrainState::new(&cfg).unwrap());
}

#[test]
fn empty_splits_are_contract_errors() {
    let cfg = tiny_config();
    let (tr, va, _) = tiny_splits();
    assert_eq!(fit(&[], &va, &cfg).unwrap_err().kind(), "contract");
    assert_eq!(fit(&tr, &[], &cfg).unwrap_err().kind(), "contract");
}

#[test]
fn fit_is_deterministic_and_keeps_the_best_snapshot() {
    let mut cfg = tiny_config();
    cfg.training.max_epochs = 3;
    let (tr, va, _) = tiny_splits();
    let (a, ha) = fit(&tr, &va, &cfg).unwrap();
    let (b, hb) = fit(&tr, &va, &cfg).unwrap();
    assert!(a == b);
    assert_eq!(ha, hb);
    assert_eq!(ha.epochs.len(), 3);
    assert_eq!(ha.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    let best = ha.epochs.iter().find(|e| e.epoch == ha.best_epoch).unwrap();
    let wiring = apply_ablation(&cfg).unwrap();
    let again = evaluate(&a.model, &wiring, &va).unwrap();
    assert_eq!(again.accuracy, best.validation.accuracy);
    let max = ha.epochs.iter().map(|e| e.validation.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(best.validation.accuracy, max);
}

#[test]
fn overfits_one_batch_with_only_the_task_loss() {
    let mut cfg = PtsmConfig::default();
    cfg.loss = LossWeights::task_only();
    let trials = generate(&SyntheticSpec {
        trials_per_cell: 1,
        subjects: 4,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .trials;
    let batch = refs(&trials[..8]);
    let mut state = TrainState::new(&cfg).unwrap();
    let first = train_step(&batch, &mut state, &cfg).unwrap();
    assert!(first.terms.task >= 2f64.ln() - 1e-12);
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&batch, &mut state, &cfg).unwrap();
    }
    assert!(last.terms.task < 0.05, "final task loss {}", last.terms.task);
}

#[test]
fn recovers_planted_labels_on_noise_free_unseen_subject() {
    let spec = SyntheticSpec {
        noise_std: 0.01,
        task_gain: 3.0,
        subject_gain: 6.0,
        trials_per_cell: 12,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let (tr, va, te) = split(&ds.trials, &SplitPlan::rotate(6, &[5]).unwrap()).unwrap();
    let mut cfg = PtsmConfig::default();
    cfg.training.batch_size = 16;
    cfg.training.max_epochs = 4;
    let (state, _) = fit(&tr, &va, &cfg).unwrap();
    let m = evaluate(&state.model, &apply_ablation(&cfg).unwrap(), &te).unwrap();
    assert!(m.accuracy >= 0.95, "unseen-subject accuracy {}", m.accuracy);
}

// ---- ablation wiring -------------------------------------------------------

#[test]
fn contradictory_branch_flags_are_rejected() {
    let mut cfg = tiny_config();
    cfg.ablation.disable_personal_branch = true;
    cfg.ablation.disable_common_branch = true;
    assert_eq!(apply_ablation(&cfg).unwrap_err().kind(), "contract");
    cfg.ablation.disable_stap = true;
    assert!(apply_ablation(&cfg).is_ok());
}

#[test]
fn disable_stap_passes_inputs_through_unmasked() {
    let mut cfg = tiny_config();
    cfg.ablation.disable_stap = true;
    let w = apply_ablation(&cfg).unwrap();
    assert!(!w.use_stap);
    assert_eq!((w.weights.lambda_sim, w.weights.lambda_sparse_mask, w.weights.lambda_size), (0.0, 0.0, 0.0));
    assert!(!w.trainable.contains(ParamGroup::PersonalMask));
    let trials = tiny_trials(5);
    let state = TrainState::new(&cfg).unwrap();
    let x = batch_tensor(&trials).unwrap();
    for m in state.model.masks(&x, &w).unwrap() {
        for t in m.all() {
            assert!(t.data().iter().all(|&v| v == 1.0));
        }
        assert_eq!(ptsm_core::stap::apply_masks(&trials[0].x, &m).unwrap(), trials[0].x);
    }
}

#[test]
fn disable_personal_branch_fuses_to_the_common_masks() {
    let mut cfg = tiny_config();
    cfg.ablation.disable_personal_branch = true;
    let w = apply_ablation(&cfg).unwrap();
    assert_eq!(w.fusion, FusionSource::Fixed { alpha: 0.0, beta: 0.0 });
    assert_eq!(w.weights.lambda_sim, 0.0);
    assert!(!w.trainable.contains(ParamGroup::PersonalMask));
    let state = TrainState::new(&cfg).unwrap();
    let x = batch_tensor(&tiny_trials(6)).unwrap();
    for m in state.model.masks(&x, &w).unwrap() {
        assert_eq!(m.m_s, m.m_s_c);
        assert_eq!(m.m_t, m.m_t_c);
    }
}

#[test]
fn disable_common_branch_fuses_to_the_personal_masks() {
    let mut cfg = tiny_config();
    cfg.ablation.disable_common_branch = true;
    let w = apply_ablation(&cfg).unwrap();
    assert_eq!(w.fusion, FusionSource::Fixed { alpha: 1.0, beta: 1.0 });
    assert!(!w.trainable.contains(ParamGroup::CommonMask));
    let state = TrainState::new(&cfg).unwrap();
    let x = batch_tensor(&tiny_trials(7)).unwrap();
    for m in state.model.masks(&x, &w).unwrap() {
        assert_eq!(m.m_s, m.m_s_p);
        assert_eq!(m.m_t, m.m_t_p);
    }
}

#[test]
fn disable_orth_zeroes_the_weight_but_keeps_the_raw_term() {
    let mut cfg = tiny_config();
    cfg.ablation.disable_orth = true;
    let w = apply_ablation(&cfg).unwrap();
    assert_eq!(w.weights.lambda_orth, 0.0);
    assert_eq!(w.weights.lambda_cov, cfg.loss.lambda_cov);
    let state = TrainState::new(&cfg).unwrap();
    let trials = tiny_trials(8);
    let r = evaluate_losses(&state.model, &w, &refs(&trials[..6])).unwrap();
    assert!(r.terms.orth > 0.0);
    let lw = &w.weights;
    let expected = lw.lambda_cov * r.terms.cov + lw.lambda_info * r.terms.info + lw.lambda_sparse_feat * r.terms.sparse_feat;
    assert!((r.decouple - expected).abs() < 1e-12);
}

#[test]
fn frozen_groups_do_not_move_during_training() {
    let mut cfg = tiny_config();
    cfg.ablation.disable_personal_branch = true;
    let trials = tiny_trials(9);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.model.store.clone();
    for chunk in trials.chunks(6).take(3) {
        train_step(&refs(chunk), &mut state, &cfg).unwrap();
    }
    for (name, p) in state.model.store.params() {
        let same = p.value == before.get(name).unwrap().value;
        let frozen = matches!(p.group, ParamGroup::PersonalMask | ParamGroup::Fusion);
        assert_eq!(same, frozen, "{name}");
    }
}

// ---- few-shot adaptation ---------------------------------------------------

#[test]
fn adaptation_with_zero_steps_is_a_no_op() {
    let cfg = tiny_config();
    let state = TrainState::new(&cfg).unwrap();
    let w = apply_ablation(&cfg).unwrap();
    let adapted = adapt_few_shot(&state.model, &w, &tiny_trials(1)[..4], 0, 1e-2).unwrap();
    assert!(adapted == state.model);
}

#[test]
fn adaptation_only_moves_personal_mask_parameters() {
    let cfg = tiny_config();
    let (tr, va, te) = tiny_splits();
    let (state, _) = fit(&tr, &va, &cfg).unwrap();
    let w = apply_ablation(&cfg).unwrap();
    let adapted = adapt_few_shot(&state.model, &w, &te[..6], 10, 0.5).unwrap();
    let mut moved = 0;
    for (name, p) in adapted.store.params() {
        let orig = state.model.store.get(name).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if p.group == ParamGroup::PersonalMask {
            moved += usize::from(bits(&p.value) != bits(&orig.value));
        } else {
            assert_eq!(bits(&p.value), bits(&orig.value), "{name} changed");
        }
    }
    for (name, b) in adapted.store.buffers() {
        assert_eq!(b, state.model.store.buffer(name).unwrap());
    }
    assert!(moved > 0);
}

#[test]
fn adaptation_rejects_empty_support() {
    let cfg = tiny_config();
    let state = TrainState::new(&cfg).unwrap();
    let w = apply_ablation(&cfg).unwrap();
    assert_eq!(adapt_few_shot(&state.model, &w, &[], 5, 1e-3).unwrap_err().kind(), "contract");
}

// ---- grid search -----------------------------------------------------------

fn row(acc: f64, loss: f64) -> GridRow {
    GridRow {
        assignment: BTreeMap::new(),
        validation_accuracy: acc,
        validation_f1: acc,
        total_loss: loss,
        best_epoch: 1,
    }
}

#[test]
fn grid_selection_rules() {
    assert_eq!(select_best(&[]), None);
    assert_eq!(select_best(&[row(0.4, 1.0)]), Some(0));
    assert_eq!(select_best(&[row(0.4, 1.0), row(0.6, 9.0)]), Some(1));
    assert_eq!(select_best(&[row(0.6, 2.0), row(0.6, 1.0)]), Some(1));
    assert_eq!(select_best(&[row(0.6, 1.0), row(0.6, 1.0)]), Some(0));
}

#[test]
fn grid_points_enumerate_the_product() {
    let grid = vec![
        ("lambda_orth".to_string(), vec![0.0, 1.0]),
        ("lambda_cov".to_string(), vec![0.5, 2.0, 3.0]),
    ];
    let pts = grid_points(&grid);
    assert_eq!(pts.len(), 6);
    assert_eq!(pts[0]["lambda_orth"], 0.0);
    assert_eq!(pts[1]["lambda_cov"], 2.0);
    assert_eq!(pts[3]["lambda_orth"], 1.0);
}

#[test]
fn grid_of_one_returns_that_config() {
    let mut cfg = tiny_config();
    cfg.training.max_epochs = 1;
    let (tr, va, _) = tiny_splits();
    let res = grid_search(&cfg, &[("lambda_orth".to_string(), vec![0.25])], &tr, &va).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.best.loss.lambda_orth, 0.25);
}

#[test]
fn two_by_two_grid_populates_every_row() {
    let mut cfg = tiny_config();
    cfg.training.max_epochs = 1;
    let (tr, va, _) = tiny_splits();
    let grid = vec![
        ("lambda_orth".to_string(), vec![0.0, 1.0]),
        ("lambda_cov".to_string(), vec![0.0, 1.0]),
    ];
    let res = grid_search(&cfg, &grid, &tr, &va).unwrap();
    assert_eq!(res.rows.len(), 4);
    for r in &res.rows {
        assert_eq!(r.assignment.len(), 2);
        assert!((0.0..=1.0).contains(&r.validation_accuracy));
        assert!((0.0..=1.0).contains(&r.validation_f1));
        assert!(r.total_loss.is_finite());
    }
    assert_eq!(Some(res.best_index), select_best(&res.rows));
}

#[test]
fn unknown_grid_weight_is_a_config_error() {
    let mut cfg = tiny_config();
    assert_eq!(set_weight(&mut cfg, "lambda_nope", 1.0).unwrap_err().kind(), "config");
}

// ---- checkpoints -----------------------------------------------------------

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let cfg = tiny_config();
    let (tr, va, _) = tiny_splits();
    let (state, _) = fit(&tr, &va, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&state.model, &cfg, &path).unwrap();
    let (model, back_cfg) = checkpoint::load(&path).unwrap();
    assert_eq!(back_cfg, cfg);
    assert!(model == state.model);
    let w = apply_ablation(&cfg).unwrap();
    assert_eq!(evaluate(&model, &w, &va).unwrap(), evaluate(&state.model, &w, &va).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let cfg = tiny_config();
    let state = TrainState::new(&cfg).unwrap();
    let bytes = checkpoint::encode(&state.model, &cfg).unwrap();
    let mut b = bytes.clone();
    b[0] = b'Q';
    assert_eq!(checkpoint::decode(&b).unwrap_err().kind(), "checkpoint");
    let mut b = bytes.clone();
    let last = b.len() - 10;
    b[last] ^= 1;
    assert_eq!(checkpoint::decode(&b).unwrap_err().kind(), "checkpoint");
    assert_eq!(checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err().kind(), "checkpoint");
}

#[test]
fn checkpoint_encoding_is_deterministic() {
    let cfg = tiny_config();
    let (tr, va, _) = tiny_splits();
    let (a, _) = fit(&tr, &va, &cfg).unwrap();
    let (b, _) = fit(&tr, &va, &cfg).unwrap();
    assert_eq!(checkpoint::encode(&a.model, &cfg).unwrap(), checkpoint::encode(&b.model, &cfg).unwrap());
}

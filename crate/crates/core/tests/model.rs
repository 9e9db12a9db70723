use proptest::prelude::*;
use ptsm_core::config::ModelConfig;
use ptsm_core::harness::gradcheck_config;
use ptsm_core::losses::LossWeights;
use ptsm_core::model::{argmax, Head, Ptsm, Wiring};
use ptsm_core::nn::{Mode, Session, Trainable};
use ptsm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wiring() -> Wiring {
    Wiring::full(LossWeights::default())
}

fn small() -> ModelConfig {
    gradcheck_config().model
}

fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, cfg.channels, cfg.samples], &mut rng)
}

fn dropout_stream(seed: u64) -> Option<ChaCha8Rng> {
    Some(ChaCha8Rng::seed_from_u64(seed))
}

fn fill(model: &mut Ptsm, prefix: &str, value: f64) {
    for (name, p) in model.store.params_mut() {
        if name.starts_with(prefix) {
            p.value.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

#[test]
fn temporal_encoder_output_shape() {
    let cfg = ModelConfig::default();
    let model = Ptsm::new(&cfg, 0).unwrap();
    let mut s = Session::eval(&model.store);
    let x = s.constant(batch(&cfg, 1, 1));
    let h = model.encode_temporal(&mut s, x).unwrap();
    assert_eq!(s.tape.shape(h), &[1, 128, 16]);
}

#[test]
fn temporal_encoder_propagates_zero_in_eval_mode() {
    let cfg = ModelConfig::default();
    let model = Ptsm::new(&cfg, 0).unwrap();
    let mut s = Session::eval(&model.store);
    let x = s.constant(Tensor::zeros(&[2, cfg.channels, cfg.samples]));
    let h = model.encode_temporal(&mut s, x).unwrap();
    assert!(s.tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn temporal_encoder_rejects_short_input() {
    let mut cfg = small();
    cfg.samples = 4;
    assert_eq!(Ptsm::new(&cfg, 0).unwrap_err().kind(), "contract");
    let model = Ptsm::new(&small(), 0).unwrap();
    let mut s = Session::eval(&model.store);
    let x = s.constant(Tensor::zeros(&[1, 3, 4]));
    assert_eq!(model.encode_temporal(&mut s, x).unwrap_err().kind(), "contract");
}

#[test]
fn train_mode_is_deterministic_under_a_fixed_stream() {
    let cfg = ModelConfig::default();
    let model = Ptsm::new(&cfg, 3).unwrap();
    let x = batch(&cfg, 4, 2);
    let run = || {
        let mut s = Session::new(&model.store, Mode::Train, Trainable::all(), dropout_stream(9));
        let out = model.forward(&mut s, &x, &wiring(), true).unwrap();
        s.tape.value(out.h_temp).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let mut s = Session::new(&model.store, Mode::Train, Trainable::all(), dropout_stream(10));
    let out = model.forward(&mut s, &x, &wiring(), true).unwrap();
    assert_ne!(s.tape.value(out.h_temp), &a);
}

#[test]
fn shared_encoder_shape_and_degenerate_weights() {
    let cfg = ModelConfig::default();
    let mut model = Ptsm::new(&cfg, 0).unwrap();
    {
        let mut s = Session::eval(&model.store);
        let h = s.constant(Tensor::ones(&[2, 128, 16]));
        let out = model.encode_shared(&mut s, h).unwrap();
        assert_eq!(s.tape.shape(out), &[2, 128]);
        let bad = s.constant(Tensor::ones(&[2, 128, 15]));
        assert_eq!(model.encode_shared(&mut s, bad).unwrap_err().kind(), "contract");
    }
    fill(&mut model, "encoder.shared", 0.0);
    let bias: Vec<f64> = (0..128).map(|i| i as f64 / 32.0 - 2.0).collect();
    *model.store.value_mut("encoder.shared.out.b").unwrap() = Tensor::vector(bias.clone());
    let mut s = Session::eval(&model.store);
    let h = s.constant(Tensor::full(&[1, 128, 16], 0.7));
    let out = model.encode_shared(&mut s, h).unwrap();
    let elu = |v: f64| if v > 0.0 { v } else { v.exp_m1() };
    for (o, b) in s.tape.value(out).data().iter().zip(&bias) {
        assert_eq!(*o, elu(*b));
    }
}

#[test]
fn shared_encoder_eval_is_deterministic() {
    let cfg = ModelConfig::default();
    let model = Ptsm::new(&cfg, 4).unwrap();
    let h = Tensor::randn(&[3, 128, 16], &mut ChaCha8Rng::seed_from_u64(1));
    let run = || {
        let mut s = Session::eval(&model.store);
        let v = s.constant(h.clone());
        let out = model.encode_shared(&mut s, v).unwrap();
        s.tape.value(out).clone()
    };
    assert_eq!(run(), run());
}

fn copy_task_head_into_subject(model: &mut Ptsm) {
    for part in ["proj.w", "proj.b", "bn.gamma", "bn.beta"] {
        let v = model.store.value(&format!("head.task.{part}")).unwrap().clone();
        *model.store.value_mut(&format!("head.subject.{part}")).unwrap() = v;
    }
}

fn project_both(model: &Ptsm, h: &Tensor) -> (Tensor, Tensor) {
    let mut s = Session::eval(&model.store);
    let v = s.constant(h.clone());
    let ft = model.project(&mut s, v, Head::Task).unwrap();
    let fs = model.project(&mut s, v, Head::Subject).unwrap();
    (s.tape.value(ft).clone(), s.tape.value(fs).clone())
}

#[test]
fn projection_heads_shapes_symmetry_and_disjointness() {
    let cfg = ModelConfig::default();
    let mut model = Ptsm::new(&cfg, 6).unwrap();
    let h = Tensor::randn(&[3, 128], &mut ChaCha8Rng::seed_from_u64(2));
    let (ft, fs) = project_both(&model, &h);
    assert_eq!(ft.shape(), &[3, 64]);
    assert_eq!(fs.shape(), &[3, 64]);
    assert_ne!(ft, fs);

    copy_task_head_into_subject(&mut model);
    let (ft, fs) = project_both(&model, &h);
    assert_eq!(ft, fs);

    model.store.value_mut("head.task.proj.w").unwrap().data_mut()[0] += 0.5;
    let (ft2, fs2) = project_both(&model, &h);
    assert_ne!(ft2, ft);
    assert_eq!(fs2, fs);
}

fn classify(model: &Ptsm, f: &Tensor, head: Head) -> Tensor {
    let mut s = Session::eval(&model.store);
    let v = s.constant(f.clone());
    let p = model.classify(&mut s, v, head).unwrap();
    s.tape.value(p).clone()
}

#[test]
fn classifier_starts_uniform() {
    let cfg = ModelConfig {
        classes: 4,
        ..ModelConfig::default()
    };
    let model = Ptsm::new(&cfg, 1).unwrap();
    let f = Tensor::randn(&[2, 64], &mut ChaCha8Rng::seed_from_u64(7));
    let p = classify(&model, &f, Head::Task);
    assert!(p.data().iter().all(|&v| v == 0.25));
    let p = classify(&model, &f, Head::Subject);
    assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn classifier_saturates_and_matches_softmax_oracle() {
    let cfg = ModelConfig {
        classes: 4,
        ..ModelConfig::default()
    };
    let mut model = Ptsm::new(&cfg, 1).unwrap();
    let f = Tensor::randn(&[1, 64], &mut ChaCha8Rng::seed_from_u64(8));
    *model.store.value_mut("head.task.classifier.out.b").unwrap() = Tensor::vector(vec![2.0, -1e9, -1e9, -1e9]);
    let p = classify(&model, &f, Head::Task);
    assert!((p.data()[0] - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits: Vec<f64> = Tensor::randn(&[4], &mut rng).data().iter().map(|v| 3.0 * v).collect();
    *model.store.value_mut("head.task.classifier.out.b").unwrap() = Tensor::vector(logits.clone());
    let p = classify(&model, &f, Head::Task);
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (pi, l) in p.data().iter().zip(&logits) {
        assert!((pi - l.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn argmax_examples() {
    assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
}

#[test]
fn prediction_never_reads_subject_head() {
    let cfg = small();
    let model = Ptsm::new(&cfg, 0).unwrap();
    let access = model.prediction_access(&batch(&cfg, 2, 0), &wiring()).unwrap();
    assert!(access.iter().any(|n| n.starts_with("head.task")));
    assert!(access.iter().any(|n| n.starts_with("stap.")));
    assert!(!access.iter().any(|n| n.starts_with("head.subject")), "{access:?}");
}

#[test]
fn eval_forward_is_a_pure_function() {
    let cfg = ModelConfig::default();
    let model = Ptsm::new(&cfg, 11).unwrap();
    let x = batch(&cfg, 3, 4);
    let a = model.task_probabilities(&x, &wiring()).unwrap();
    let b = model.task_probabilities(&x, &wiring()).unwrap();
    assert_eq!(a, b);
    let trial = Tensor::randn(&[8, 128], &mut ChaCha8Rng::seed_from_u64(12));
    let latents = model.latents(&trial, &wiring()).unwrap();
    assert_eq!(latents.h_temp.shape(), &[128, 16]);
    assert_eq!(latents.h_shared.shape(), &[128]);
    assert_eq!(latents.f_task.shape(), &[64]);
    assert_eq!(latents.f_subj.shape(), &[64]);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::default();
    assert!(Ptsm::new(&cfg, 5).unwrap() == Ptsm::new(&cfg, 5).unwrap());
    assert!(Ptsm::new(&cfg, 5).unwrap() != Ptsm::new(&cfg, 6).unwrap());
}

#[test]
fn model_rejects_mismatched_input() {
    let model = Ptsm::new(&ModelConfig::default(), 0).unwrap();
    let x = Tensor::zeros(&[1, 7, 128]);
    assert_eq!(model.predict(&x, &wiring()).unwrap_err().kind(), "shape_mismatch");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let cfg = small();
        let mut model = Ptsm::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let w = Tensor::randn(model.store.value("head.task.classifier.out.w").unwrap().shape(), &mut rng);
        *model.store.value_mut("head.task.classifier.out.w").unwrap() = w.map(|v| v * scale);
        let x = batch(&cfg, 3, seed).map(|v| v * scale);
        let p = model.task_probabilities(&x, &wiring()).unwrap();
        for row in p.data().chunks(cfg.classes) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

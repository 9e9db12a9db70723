use proptest::prelude::*;
use ptsm_core::config::ModelConfig;
use ptsm_core::stap::*;
use ptsm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dims() -> StapDims {
    StapDims {
        channels: 4,
        samples: 20,
        spatial_hidden: 8,
        temporal_width: 4,
        temporal_kernel: 7,
    }
}

fn random_trial(dims: &StapDims, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::randn(&[dims.channels, dims.samples], rng).map(|v| v * scale)
}

fn set(params: &mut MaskGeneratorParams, name: &str, value: f64) {
    let t = params.store.value_mut(name).unwrap();
    for v in t.data_mut() {
        *v = value;
    }
}

#[test]
fn zero_generators_give_half_everywhere() {
    let dims = StapDims::from(&ModelConfig::default());
    let params = MaskGeneratorParams::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_trial(&dims, &mut rng, 3.0);
    let m = generate_masks(&x, &params, &FusionWeights::fixed(0.3, 0.9)).unwrap();
    for t in m.all() {
        assert!(t.data().iter().all(|&v| v == 0.5));
    }
    assert_eq!(m.m_s.numel(), dims.channels);
    assert_eq!(m.m_t.numel(), dims.samples);
}

#[test]
fn fusion_endpoints_reproduce_branches_bitwise() {
    let dims = small_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = MaskGeneratorParams::random(dims, &mut rng);
    let x = random_trial(&dims, &mut rng, 1.0);
    let m = generate_masks(&x, &params, &FusionWeights::fixed(1.0, 1.0)).unwrap();
    assert_eq!(m.m_t, m.m_t_p);
    assert_eq!(m.m_s, m.m_s_p);
    let m = generate_masks(&x, &params, &FusionWeights::fixed(0.0, 0.0)).unwrap();
    assert_eq!(m.m_t, m.m_t_c);
    assert_eq!(m.m_s, m.m_s_c);
    let m = generate_masks(&x, &params, &FusionWeights::fixed(1.0, 0.0)).unwrap();
    assert_eq!(m.m_t, m.m_t_p);
    assert_eq!(m.m_s, m.m_s_c);
}

#[test]
fn fusion_midpoint_of_saturated_branches() {
    let dims = small_dims();
    let mut params = MaskGeneratorParams::zeros(dims);
    set(&mut params, "stap.personal.temporal.out.b", 1000.0);
    set(&mut params, "stap.common.temporal.out.b", -1000.0);
    let x = Tensor::ones(&[dims.channels, dims.samples]);
    let m = generate_masks(&x, &params, &FusionWeights::fixed(0.5, 0.5)).unwrap();
    assert!(m.m_t_p.data().iter().all(|&v| v == 1.0));
    assert!(m.m_t_c.data().iter().all(|&v| v == 0.0));
    assert!(m.m_t.data().iter().all(|&v| v == 0.5));
}

#[test]
fn fused_masks_follow_the_convex_combination() {
    let dims = small_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = MaskGeneratorParams::random(dims, &mut rng);
    let x = random_trial(&dims, &mut rng, 2.0);
    let (alpha, beta) = (0.3, 0.8);
    let m = generate_masks(&x, &params, &FusionWeights::fixed(alpha, beta)).unwrap();
    for i in 0..dims.samples {
        let expect = alpha * m.m_t_p.data()[i] + (1.0 - alpha) * m.m_t_c.data()[i];
        assert_eq!(m.m_t.data()[i], expect);
    }
    for c in 0..dims.channels {
        let expect = beta * m.m_s_p.data()[c] + (1.0 - beta) * m.m_s_c.data()[c];
        assert_eq!(m.m_s.data()[c], expect);
    }
}

#[test]
fn generate_masks_rejects_wrong_shape_and_bad_weights() {
    let dims = small_dims();
    let params = MaskGeneratorParams::zeros(dims);
    let x = Tensor::zeros(&[dims.channels + 1, dims.samples]);
    assert!(generate_masks(&x, &params, &FusionWeights::fixed(0.5, 0.5)).is_err());
    let x = Tensor::zeros(&[dims.channels, dims.samples]);
    let err = generate_masks(&x, &params, &FusionWeights::fixed(1.5, 0.5)).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn learned_fusion_starts_at_half() {
    let dims = small_dims();
    let params = MaskGeneratorParams::zeros(dims);
    let w = FusionWeights::from_store(&params.store, true).unwrap();
    assert_eq!((w.alpha, w.beta), (0.5, 0.5));
}

fn masks(m_s: &[f64], m_t: &[f64]) -> MaskSet {
    let s = Tensor::vector(m_s.to_vec());
    let t = Tensor::vector(m_t.to_vec());
    MaskSet {
        m_s_p: s.clone(),
        m_t_p: t.clone(),
        m_s_c: s.clone(),
        m_t_c: t.clone(),
        m_s: s,
        m_t: t,
    }
}

#[test]
fn apply_masks_examples() {
    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = apply_masks(&x, &masks(&[1.0, 1.0], &[1.0, 1.0])).unwrap();
    assert_eq!(out, x);
    let out = apply_masks(&x, &masks(&[0.0, 1.0], &[0.7, 0.2])).unwrap();
    assert_eq!(&out.data()[..2], &[0.0, 0.0]);
    // Oracle: element (c, t) is x[c][t] · m_s[c] · m_t[t].
    let (ms, mt) = ([0.5, 1.0], [1.0, 0.5]);
    let oracle: Vec<f64> = (0..4).map(|i| x.data()[i] * ms[i / 2] * mt[i % 2]).collect();
    assert_eq!(oracle, vec![0.5, 0.5, 3.0, 2.0]);
    let out = apply_masks(&x, &masks(&ms, &mt)).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5, 3.0, 2.0]);
}

#[test]
fn apply_masks_rejects_length_mismatch() {
    let x = Tensor::zeros(&[2, 3]);
    let err = apply_masks(&x, &masks(&[1.0, 1.0], &[1.0, 1.0])).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn outer_flatten_examples() {
    let ones = outer_flatten(&Tensor::ones(&[2]), &Tensor::ones(&[2])).unwrap();
    assert_eq!(ones.data(), &[1.0; 4]);
    let v = outer_flatten(&Tensor::vector(vec![0.5, 0.5]), &Tensor::vector(vec![1.0, 0.0])).unwrap();
    assert_eq!(v.data(), &[0.5, 0.5, 0.0, 0.0]);
    let z = outer_flatten(&Tensor::vector(vec![0.3, 0.9, 0.4]), &Tensor::vector(vec![0.0])).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn outer_flatten_index_layout() {
    let m_t = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let m_s = Tensor::vector(vec![2.0, 5.0]);
    let v = outer_flatten(&m_t, &m_s).unwrap();
    for c in 0..2 {
        for t in 0..3 {
            assert_eq!(v.data()[c * 3 + t], m_s.data()[c] * m_t.data()[t]);
        }
    }
    let ones = outer_flatten(&Tensor::ones(&[7]), &Tensor::ones(&[5])).unwrap();
    assert_eq!(ones.data().iter().sum::<f64>(), 35.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masks_stay_in_unit_interval(seed in any::<u64>(), scale in 0.01f64..100.0, alpha in 0.0f64..=1.0, beta in 0.0f64..=1.0) {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = MaskGeneratorParams::random(dims, &mut rng);
        for (_, p) in params.store.params_mut() {
            for v in p.value.data_mut() {
                *v *= scale;
            }
        }
        let x = random_trial(&dims, &mut rng, scale);
        let m = generate_masks(&x, &params, &FusionWeights::fixed(alpha, beta)).unwrap();
        for t in m.all() {
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn apply_masks_is_monotone_in_each_entry(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        ms in prop::collection::vec(0.0f64..=1.0, 2),
        mt in prop::collection::vec(0.0f64..=1.0, 3),
        which in 0usize..5,
        bump in 0.0f64..1.0,
    ) {
        let x = Tensor::new(&[2, 3], x).unwrap();
        let before = apply_masks(&x, &masks(&ms, &mt)).unwrap();
        let (mut ms2, mut mt2) = (ms.clone(), mt.clone());
        if which < 2 { ms2[which] = (ms2[which] + bump).min(1.0) } else { mt2[which - 2] = (mt2[which - 2] + bump).min(1.0) }
        let after = apply_masks(&x, &masks(&ms2, &mt2)).unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            prop_assert!(a.abs() >= b.abs());
        }
    }

    #[test]
    fn apply_masks_is_bilinear(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        ms in prop::collection::vec(0.0f64..=1.0, 2),
        mt in prop::collection::vec(0.0f64..=1.0, 3),
        k in 0.0f64..1.0,
    ) {
        let x = Tensor::new(&[2, 3], x).unwrap();
        let base = apply_masks(&x, &masks(&ms, &mt)).unwrap();
        let scaled: Vec<f64> = ms.iter().map(|v| v * k).collect();
        let out = apply_masks(&x, &masks(&scaled, &mt)).unwrap();
        for (a, b) in out.data().iter().zip(base.data()) {
            prop_assert!((a - k * b).abs() <= 1e-12);
        }
    }
}

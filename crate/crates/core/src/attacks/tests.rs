use super::*;
use crate::diffusion::Scheduler;
use crate::env::{generate_dataset, EnvConfig};
use crate::nn;
use crate::policy::{ActionNormalizer, PolicyConfig};
use crate::seed;

/// Untrained policy whose output layer is randomized so pixels matter.
fn policy<T: Scalar>(seed: u64) -> DiffusionPolicy<T> {
    let mut rng = seed::rng_from(seed);
    let mut p = DiffusionPolicy::new(PolicyConfig::default(), ActionNormalizer::identity(2), &mut rng).unwrap();
    let vals = p
        .params
        .iter()
        .map(|(n, t)| {
            if n.starts_with("den.") {
                nn::fan_in_uniform::<T, _>(t.shape(), t.shape()[0], &mut rng)
            } else {
                t.clone()
            }
        })
        .collect();
    p.params.set_all(vals).unwrap();
    p
}

fn obs<T: Scalar>(seed: u64) -> Observation<T> {
    let mut rng = seed::rng_from(seed);
    Observation::new(
        Tensor::<f64>::uniform(vec![2, 3, 64, 64], 0.0, 1.0, &mut rng).cast(),
        Tensor::from_vec([4], vec![T::lit(0.3), T::lit(0.6), T::lit(0.01), T::lit(-0.005)]).unwrap(),
    )
    .unwrap()
}

/// Adversarial loss and its pixel gradient with the `(k, ε)` draw fixed by `seed`.
fn loss_and_grad(p: &DiffusionPolicy<f64>, frames: &Tensor<f64>, state: &Tensor<f64>, mode: AttackMode, seed: u64) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let f = g.leaf(frames.clone(), true);
    let cond = b.condition(&mut g, f, state).unwrap();
    let cond = g.concat_rows(&[cond, cond]).unwrap();
    let refs = repeat_rows(&Tensor::full([1, 16], 0.5), 2).unwrap();
    let l = adv_loss(&mut g, &b, cond, &refs, mode, &mut seed::rng_from(seed)).unwrap();
    let v = g.value(l).item().unwrap();
    g.backward(l).unwrap();
    (v, g.take_grad(f).unwrap())
}

#[test]
fn untargeted_loss_is_negated_targeted_loss() {
    let p = policy::<f64>(1);
    let o = obs::<f64>(2);
    let (t, gt) = loss_and_grad(&p, &o.frames, &o.agent_state, AttackMode::Targeted, 3);
    let (u, gu) = loss_and_grad(&p, &o.frames, &o.agent_state, AttackMode::Untargeted, 3);
    assert!(t > 0.0);
    assert_eq!(t, -u);
    assert!(gt.data().iter().zip(gu.data()).all(|(a, b)| *a == -*b));
}

#[test]
fn adversarial_gradient_matches_finite_differences() {
    let p = policy::<f64>(4);
    let o = obs::<f64>(5);
    let (_, grad) = loss_and_grad(&p, &o.frames, &o.agent_state, AttackMode::Targeted, 6);
    let mut rng = seed::rng_from(7);
    let dir = Tensor::<f64>::uniform(vec![2, 3, 64, 64], -1.0, 1.0, &mut rng).map(f64::signum);
    let at = |t: f64| {
        let f = o.frames.zip_map(&dir, |x, d| x + t * d).unwrap();
        loss_and_grad(&p, &f, &o.agent_state, AttackMode::Targeted, 6).0
    };
    let h = 1e-4;
    let fd = (at(h) - at(-h)) / (2.0 * h);
    let an: f64 = grad.data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
    assert!((fd - an).abs() / fd.abs().max(an.abs()) < 1e-4, "fd {fd} analytic {an}");
}

#[test]
fn zero_steps_or_zero_budget_leave_images_untouched() {
    let p = policy::<f32>(8);
    let o = obs::<f32>(9);
    for cfg in [
        AttackConfig { steps: 0, ..Default::default() },
        AttackConfig { sigma: 0.0, ..Default::default() },
    ] {
        let d = attack_online_global(&p, &o, &cfg, &mut seed::rng_from(1)).unwrap();
        assert_eq!(d.linf(), 0.0);
        assert_eq!(d.apply(&o).unwrap(), o);
    }
}

#[test]
fn pgd_stays_inside_the_budget() {
    let p = policy::<f32>(10);
    let o = obs::<f32>(11);
    for (sigma, mode) in [(0.05, AttackMode::Targeted), (0.03, AttackMode::Untargeted), (0.1, AttackMode::Targeted)] {
        let cfg = AttackConfig { mode, ..AttackConfig::default().with_budget(sigma, 10) };
        let d = attack_online_global(&p, &o, &cfg, &mut seed::rng_from(2)).unwrap();
        assert!(d.within_budget(), "linf {} > {sigma}", d.linf());
        assert!(d.linf() > 0.0);
        let seen = d.apply(&o).unwrap();
        let worst = seen
            .frames
            .data()
            .iter()
            .zip(o.frames.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        assert!(worst <= sigma + 1e-6);
        assert!(seen.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn f32_budget_never_rounds_up() {
    for s in [0.05, 0.03, 0.1, 0.3, 1.0 / 3.0] {
        let b = budget::<f32>(s);
        assert!((b as f64) <= s);
        assert!(s - (b as f64) < 1e-7);
    }
    assert_eq!(budget::<f64>(0.05), 0.05);
}

/// Targeted PGD lowers the expected loss, measured with 256 common draws.
#[test]
fn targeted_attack_lowers_expected_loss() {
    let p = policy::<f32>(12);
    let o = obs::<f32>(13);
    let cfg = AttackConfig::default().with_budget(0.05, 20);
    let reference = cfg.target_tensor::<f32>(16).unwrap();
    let before = adv_loss_estimate(&p, &o, &reference, cfg.mode, 256, &mut seed::rng_from(99)).unwrap();
    let d = attack_online_global(&p, &o, &cfg, &mut seed::rng_from(3)).unwrap();
    let after = adv_loss_estimate(&p, &d.apply(&o).unwrap(), &reference, cfg.mode, 256, &mut seed::rng_from(99)).unwrap();
    assert!(after < before, "before {before} after {after}");
}

#[test]
fn random_baseline_clips_about_a_third() {
    let sigma = 0.05;
    let d = random_noise_baseline(&[2, 3, 64, 64], sigma, &mut seed::rng_from(14)).unwrap();
    assert!(d.within_budget());
    let clipped = d.delta.data().iter().filter(|v| v.abs() == sigma).count() as f64 / d.delta.numel() as f64;
    // P(|z| > 1) for a standard normal.
    assert!((clipped - 0.3173).abs() < 0.01, "clipped fraction {clipped}");
}

#[test]
fn apply_saturates_and_broadcasts() {
    let frames = Tensor::from_vec([2, 3, 1, 2], vec![0.0, 1.0, 0.5, 0.98, 0.02, 0.5, 0.0, 1.0, 0.5, 0.98, 0.02, 0.5]).unwrap();
    let o = Observation::new(frames, Tensor::zeros([4])).unwrap();
    let shared = GlobalPerturbation {
        delta: Tensor::from_vec([3, 1, 2], vec![-0.05, 0.05, 0.05, 0.05, -0.05, 0.0]).unwrap(),
        sigma: 0.05,
    };
    let seen = shared.apply(&o).unwrap();
    let want: [f64; 6] = [0.0, 1.0, 0.55, 1.0, 0.0, 0.5];
    for (i, v) in seen.frames.data().iter().enumerate() {
        assert!((v - want[i % 6]).abs() < 1e-12);
    }
    let bad = GlobalPerturbation::zeros(&[3, 2, 2], 0.05);
    assert!(matches!(bad.apply(&o), Err(Error::Dimension(_))));
}

/// End-to-end gradient through a two-step DDIM chain.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let p = policy::<f64>(15);
    let o = obs::<f64>(16);
    let sched = Scheduler::Ddim(2);
    let noise = p.draw_noise(sched, &mut seed::rng_from(17)).unwrap();
    let reference = Tensor::full([1, 16], 0.3);
    let eval = |frames: &Tensor<f64>| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = g.leaf(frames.clone(), true);
        let cond = b.condition(&mut g, f, &o.agent_state).unwrap();
        let x = p.schedule.sample_with_noise(&mut g, &b, cond, sched, &noise).unwrap();
        let r = g.constant(reference.clone());
        let l = g.mse(x, r).unwrap();
        let v = g.value(l).item().unwrap();
        g.backward(l).unwrap();
        (v, g.take_grad(f).unwrap())
    };
    let (_, grad) = eval(&o.frames);
    let dir = Tensor::<f64>::uniform(vec![2, 3, 64, 64], -1.0, 1.0, &mut seed::rng_from(18)).map(f64::signum);
    let h = 1e-4;
    let shifted = |t: f64| eval(&o.frames.zip_map(&dir, |x, d| x + t * d).unwrap()).0;
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    let an: f64 = grad.data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
    assert!((fd - an).abs() / fd.abs().max(an.abs()) < 1e-3, "fd {fd} analytic {an}");
}

#[test]
fn end_to_end_attack_moves_the_chain_output() {
    let p = policy::<f32>(19);
    let o = obs::<f32>(20);
    let cfg = AttackConfig {
        scheduler: Scheduler::Ddim(4),
        ..AttackConfig::default().with_budget(0.05, 5)
    };
    let d = end2end_attack(&p, &o, &cfg, &mut seed::rng_from(4)).unwrap();
    assert!(d.within_budget());
    assert!(d.linf() > 0.0);
}

#[test]
fn artifacts_round_trip() {
    let d = random_noise_baseline(&[2, 3, 8, 8], 0.03, &mut seed::rng_from(21)).unwrap();
    let c = d.to_container(serde_json::json!({"note": 1})).unwrap();
    let back = GlobalPerturbation::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.sigma, d.sigma);
    assert!(back.delta.zip_map(&d.delta, |a, b| a - b).unwrap().max_abs() < 1e-7);

    let over = GlobalPerturbation {
        delta: Tensor::full([3, 2, 2], 0.5),
        sigma: 0.1,
    };
    let c = over.to_container(serde_json::Value::Null).unwrap();
    assert!(GlobalPerturbation::from_container(&c).is_err());

    let patch = random_patch(13, &mut seed::rng_from(22));
    let c = patch_to_container(&patch, serde_json::Value::Null).unwrap();
    let back = patch_from_container(&c).unwrap();
    assert_eq!(back.shape(), &[3, 13, 13]);
    assert!(patch_from_container(&d.to_container(serde_json::Value::Null).unwrap()).is_err());
}

#[test]
fn random_patch_is_a_clipped_gaussian() {
    let p = random_patch(13, &mut seed::rng_from(23));
    assert_eq!(p.shape(), &[3, 13, 13]);
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = p.mean();
    assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
}

fn tiny_dataset() -> crate::env::DemoDataset {
    generate_dataset(&EnvConfig::default(), 1, 200, 5).unwrap()
}

#[test]
fn patch_training_keeps_pixels_valid_and_changes_the_patch() {
    let p = policy::<f32>(24);
    let ds = tiny_dataset();
    let cfg = AttackConfig { alpha: 0.05, ..Default::default() };
    let pc = PatchConfig { epochs: 2, batch: 8, ..Default::default() };
    let mut losses = Vec::new();
    let patch = attack_patch(&p, &ds, &cfg, &pc, &mut seed::rng_from(25), |_, l| losses.push(l)).unwrap();
    assert_eq!(losses.len(), 2);
    assert_eq!(patch.shape(), &[3, 13, 13]);
    assert!(patch.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let init = random_patch(13, &mut seed::rng_from(25));
    assert!(patch.zip_map(&init, |a, b| a - b).unwrap().max_abs() > 0.0);
}

/// Mean untargeted loss of `patch` over `n` fresh transforms of random
/// dataset observations. The seed fixes samples, transforms and noise draws.
fn transformed_patch_loss(p: &DiffusionPolicy<f64>, ds: &crate::env::DemoDataset, patch: &Tensor<f64>, n: usize) -> f64 {
    use crate::policy::{dataset_observation, dataset_samples, dataset_target};
    let mut rng = seed::rng_from(31);
    let samples = dataset_samples(ds);
    let family = AffineTransformFamily::default();
    let s = p.config.image_size;
    let mut total = 0.0;
    for _ in 0..n {
        let smp = samples[rng.gen_range(0..samples.len())];
        let mut o: Observation<f64> = dataset_observation(ds, &p.config, smp).unwrap();
        let map = family.sample((s, s), &mut rng).resample_map::<f64>((13, 13)).unwrap();
        let frames = o.frames.data_mut();
        for f in 0..p.config.obs_horizon {
            for c in 0..3 {
                let plane = (f * 3 + c) * s * s;
                for (pix, taps) in &map.entries {
                    frames[plane + pix] = taps.iter().map(|&(i, w)| w * patch.data()[c * 169 + i]).sum();
                }
            }
        }
        let reference = Tensor::from_vec([1, p.config.traj_len()], dataset_target(ds, &p.config, &p.normalizer, smp)).unwrap();
        total += adv_loss_estimate(p, &o, &reference, AttackMode::Untargeted, 4, &mut rng).unwrap();
    }
    total / n as f64
}

#[test]
fn trained_patch_beats_its_random_start_under_fresh_transforms() {
    let p = policy::<f64>(28);
    let ds = tiny_dataset();
    let cfg = AttackConfig { alpha: 0.02, ..Default::default() };
    let pc = PatchConfig { epochs: 3, batch: 16, ..Default::default() };
    assert_eq!(pc.mode, AttackMode::Untargeted);
    let trained = attack_patch(&p, &ds, &cfg, &pc, &mut seed::rng_from(29), |_, _| {}).unwrap();
    let init = random_patch(13, &mut seed::rng_from(29));
    let (l_trained, l_init) = (transformed_patch_loss(&p, &ds, &trained, 100), transformed_patch_loss(&p, &ds, &init, 100));
    assert!(l_trained < l_init, "trained {l_trained} vs random {l_init}");
}

#[test]
fn offline_perturbation_is_shared_and_bounded() {
    let p = policy::<f32>(26);
    let ds = tiny_dataset();
    for mode in [AttackMode::Targeted, AttackMode::Untargeted] {
        let cfg = AttackConfig { mode, ..AttackConfig::default().with_budget(0.05, 4) };
        let d = attack_offline_global(&p, &ds, &cfg, 1, 4, &mut seed::rng_from(27), |_, _| {}).unwrap();
        assert_eq!(d.delta.shape(), &[3, 64, 64]);
        assert!(d.within_budget());
        assert!(d.linf() > 0.0);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let p = policy::<f32>(28);
    let o = obs::<f32>(29);
    let bad = [
        AttackConfig { sigma: -1.0, ..Default::default() },
        AttackConfig { alpha: 0.0, ..Default::default() },
        AttackConfig { draws: 0, ..Default::default() },
        AttackConfig { target: Some(vec![0.0; 3]), ..Default::default() },
    ];
    for cfg in bad {
        assert!(attack_online_global(&p, &o, &cfg, &mut seed::rng_from(0)).is_err());
    }
}

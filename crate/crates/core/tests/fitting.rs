use facefit::fit::{finetune_model, fit_joint, track, FitConfig, Objective};
use facefit::losses::{LossMode, LossWeights};
use facefit::shading::Camera;
use facefit::synth::{self, SceneSpec, ToyHeadSpec};
use facefit::{compute_attention_masks, AttentionMaskSet, ModelCorrections, TemplateFaceModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(
    frames: usize,
    scale: f64,
) -> (TemplateFaceModel, AttentionMaskSet, synth::SyntheticScene) {
    let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
    let masks = compute_attention_masks(&t, t.uv_resolution(), 1.0).unwrap();
    let spec = SceneSpec {
        frames,
        seed: 3,
        camera: Camera::default().resized(64, 64),
        correction_scale: scale,
        ..SceneSpec::default()
    };
    let s = synth::synth_scene(&t, &masks, &spec).unwrap();
    (t, masks, s)
}

fn short_config() -> FitConfig {
    FitConfig {
        warmup_steps: 30,
        stage1_steps: 120,
        stage2_steps: 40,
        track_steps: 60,
        model_delay: 30,
        ..FitConfig::default()
    }
}

#[test]
fn stage1_decreases_the_objective() {
    let (t, masks, s) = scene(2, 1.0);
    let fit = fit_joint(&s.frames, &t, &masks, &s.camera, &short_config()).unwrap();
    let totals: Vec<f64> = fit.trace.iter().map(|l| l.total).collect();
    let first = totals[0];
    let last = *totals.last().unwrap();
    assert!(last < first, "{first} -> {last}");
    let (argmin, _) =
        totals.iter().enumerate().fold(
            (0, f64::INFINITY),
            |(i, m), (j, &v)| if v < m { (j, v) } else { (i, m) },
        );
    assert!(
        argmin >= totals.len() * 4 / 5,
        "minimum at step {argmin} of {}",
        totals.len()
    );
}

#[test]
fn frame_gradients_add_up() {
    let (t, masks, s) = scene(3, 1.0);
    let weights = LossWeights {
        lambda_sd: 0.0,
        lambda_bg: 0.0,
        ..LossWeights::default()
    };
    let objective = Objective::new(&t, &masks, &s.frames, s.camera, weights).unwrap();
    let corrections = ModelCorrections::zeros(&t);
    let (all, g_all) = objective
        .evaluate(&corrections, &s.params, LossMode::Joint, None)
        .unwrap();
    let mut total = 0.0;
    let mut sum = ModelCorrections::zeros(&t);
    sum.maps_mut().for_each(|m| m.data_mut().fill(0.0));
    for n in 0..3 {
        let (l, g) = objective
            .evaluate(&corrections, &s.params, LossMode::Joint, Some(&[n]))
            .unwrap();
        total += l.total;
        assert_eq!(g.params[n], g_all.params[n]);
        for (acc, m) in sum.maps_mut().zip(g.corrections.unwrap().maps()) {
            acc.add_scaled(m, 1.0);
        }
    }
    assert!((total - all.total).abs() <= 1e-9 * all.total);
    let g_all = g_all.corrections.unwrap();
    for (a, b) in sum.maps().zip(g_all.maps()) {
        let scale = b
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-9 * scale);
        }
    }
}

#[test]
fn finetune_freezes_params_and_track_freezes_model() {
    let (t, masks, s) = scene(2, 1.0);
    let cfg = short_config();
    let fit = fit_joint(&s.frames, &t, &masks, &s.camera, &cfg).unwrap();
    let tuned = finetune_model(&s.frames, &t, &masks, &s.camera, &fit, &cfg).unwrap();
    assert_eq!(tuned.params, fit.params);
    assert_eq!(tuned.trace.len(), fit.trace.len() + cfg.stage2_steps);
    assert_ne!(tuned.corrections, fit.corrections);

    let before = tuned.corrections.clone();
    let tracked = track(
        &s.frames,
        &t,
        &masks,
        &tuned.corrections,
        &s.camera,
        &cfg,
        Some(&fit.params),
    )
    .unwrap();
    assert_eq!(tuned.corrections, before);
    assert_eq!(tracked.len(), 2);
    assert_ne!(tracked, fit.params);
}

#[test]
fn tracking_from_a_nearby_start_improves_expressions() {
    let (t, masks, s) = scene(2, 0.0);
    let cfg = FitConfig {
        track_steps: 300,
        ..short_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let init: Vec<_> = s
        .params
        .iter()
        .map(|p| synth::perturb_params(p, &mut rng, 3.0, 5.0, 1.0))
        .collect();
    let tracked = track(
        &s.frames,
        &t,
        &masks,
        &ModelCorrections::zeros(&t),
        &s.camera,
        &cfg,
        Some(&init),
    )
    .unwrap();
    let w = |ps: &[facefit::TrackingParams]| ps.iter().map(|p| p.coeffs().w).collect::<Vec<_>>();
    let before = facefit::coefficient_mae(&w(&init), &w(&s.params)).unwrap();
    let after = facefit::coefficient_mae(&w(&tracked), &w(&s.params)).unwrap();
    assert!(after < 0.5 * before, "coefficient MAE {before} -> {after}");
}

#[test]
fn empty_and_mismatched_inputs_are_rejected() {
    let (t, masks, s) = scene(2, 0.0);
    let cfg = short_config();
    assert!(fit_joint(&[], &t, &masks, &s.camera, &cfg).is_err());
    let wrong = Camera::default().resized(32, 32);
    assert!(fit_joint(&s.frames, &t, &masks, &wrong, &cfg).is_err());
    let bad = FitConfig {
        lr_decay: 0.0,
        ..cfg.clone()
    };
    assert!(fit_joint(&s.frames, &t, &masks, &s.camera, &bad).is_err());
    assert!(track(
        &s.frames,
        &t,
        &masks,
        &ModelCorrections::zeros(&t),
        &s.camera,
        &cfg,
        Some(&s.params[..1])
    )
    .is_err());
}

use facefit::eval::evaluate;
use facefit::io::{self, SceneBundle};
use facefit::losses::{total_loss, LossMode, LossWeights};
use facefit::synth::{self, SceneSpec, ToyHeadSpec};
use facefit::{compute_attention_masks, Camera, ModelCorrections, TemplateFaceModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stored_template(dir: &std::path::Path) -> TemplateFaceModel {
    let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
    io::save_template(dir, &t).unwrap();
    io::load_template(dir).unwrap()
}

#[test]
fn template_is_stable_after_one_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let once = stored_template(&tmp.path().join("a"));
    io::save_template(tmp.path().join("b"), &once).unwrap();
    let twice = io::load_template(tmp.path().join("b")).unwrap();
    assert_eq!(once.s0, twice.s0);
    assert_eq!(once.blendshapes, twice.blendshapes);
    assert_eq!(once.r0, twice.r0);
    assert_eq!(once.parse_map, twice.parse_map);
    assert_eq!(once.validity, twice.validity);
    assert_eq!(once.manifest, twice.manifest);
}

#[test]
fn corrections_round_trip_at_f32() {
    let tmp = tempfile::tempdir().unwrap();
    let t = stored_template(&tmp.path().join("m"));
    let masks = compute_attention_masks(&t, t.uv_resolution(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = synth::sample_corrections(&t, &masks, &mut rng, 1.0);
    io::save_corrections(tmp.path().join("m"), &c).unwrap();
    let (_, back) = io::load_model(tmp.path().join("m")).unwrap();
    for (a, b) in c.maps().zip(back.maps()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
    }
    let bare = tmp.path().join("bare");
    io::save_template(&bare, &t).unwrap();
    assert_eq!(
        io::load_model(&bare).unwrap().1,
        ModelCorrections::zeros(&t)
    );
}

#[test]
fn stored_scene_rerenders_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let t = stored_template(&tmp.path().join("m"));
    let masks = compute_attention_masks(&t, t.uv_resolution(), 1.0).unwrap();
    let spec = SceneSpec {
        frames: 2,
        seed: 9,
        camera: Camera::default().resized(48, 64),
        correction_scale: 1.0,
        ..SceneSpec::default()
    };
    let s = synth::synth_scene(&t, &masks, &spec).unwrap();
    io::save_corrections(tmp.path().join("m"), &s.corrections).unwrap();
    io::save_scene(
        tmp.path().join("s"),
        &SceneBundle {
            camera: s.camera,
            frames: s.frames.clone(),
            gt_params: Some(s.params.clone()),
        },
    )
    .unwrap();

    let (t2, c2) = io::load_model(tmp.path().join("m")).unwrap();
    let classes = t2.parse_map.as_ref().unwrap().channels();
    let scene = io::load_scene(tmp.path().join("s"), classes).unwrap();
    assert_eq!(scene.camera, s.camera);
    let gt = scene.gt_params.unwrap();
    assert_eq!(gt, s.params);
    for (f, p) in scene.frames.iter().zip(&gt) {
        let again = synth::render_observation(&t2, &masks, &c2, p, &scene.camera).unwrap();
        assert_eq!(again.image, f.image);
        assert_eq!(again.landmarks, f.landmarks);
        let worst = again
            .parse
            .data()
            .iter()
            .zip(f.parse.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 1e-6, "parse differs by {worst}");
    }
}

#[test]
fn report_total_matches_recomputed_total() {
    let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
    let masks = compute_attention_masks(&t, t.uv_resolution(), 1.0).unwrap();
    let spec = SceneSpec {
        frames: 2,
        camera: Camera::default().resized(64, 64),
        ..SceneSpec::default()
    };
    let s = synth::synth_scene(&t, &masks, &spec).unwrap();
    let weights = LossWeights::default();
    let c = ModelCorrections::zeros(&t);
    let report = evaluate(
        &t,
        &masks,
        &c,
        &s.frames,
        &s.params,
        &s.camera,
        &weights,
        Some(&s.params),
    )
    .unwrap();
    let again = total_loss(&report.loss.terms, &weights, LossMode::Joint).unwrap();
    assert!((again.total - report.loss.total).abs() <= 1e-12 * report.loss.total.max(1.0));
    assert_eq!(report.coefficient_mae, Some(0.0));
    assert!(report.nme < 1e-9, "nme {}", report.nme);
    let json = report.to_json();
    assert_eq!(json["total"].as_f64(), Some(report.loss.total));
    assert_eq!(json["frames"].as_array().unwrap().len(), 2);
}

#[test]
fn scene_with_wrong_class_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
    let masks = compute_attention_masks(&t, t.uv_resolution(), 1.0).unwrap();
    let spec = SceneSpec {
        frames: 1,
        camera: Camera::default().resized(32, 32),
        ..SceneSpec::default()
    };
    let s = synth::synth_scene(&t, &masks, &spec).unwrap();
    let bundle = SceneBundle {
        camera: s.camera,
        frames: s.frames,
        gt_params: None,
    };
    io::save_scene(tmp.path(), &bundle).unwrap();
    let classes = t.parse_map.as_ref().unwrap().channels();
    assert!(io::load_scene(tmp.path(), classes)
        .unwrap()
        .gt_params
        .is_none());
    assert!(io::load_scene(tmp.path(), classes + 1).is_err());
}

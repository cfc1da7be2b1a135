mod common;

use common::*;
use facefit::losses::{self, Landmark, LossMode, LossTerms, LossWeights};
use facefit::math::{self, Vec3};
use facefit::mesh::{deformation_gradients, parse_obj, uv_sample, vertex_normals, UvSampler};
use facefit::model::{
    apply_pose, assemble_albedo, assemble_shape, rotation_matrix, ExpressionCoeffs,
};
use facefit::raster::{self, rasterize};
use facefit::shading::{sh_basis, shade, Camera, ShCoeffs};
use facefit::synth::{self, ToyHeadSpec};
use facefit::{compute_attention_masks, Grid, Image, ModelCorrections, TriMesh};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec3) -> Vec3 {
    math::scale(v, 1.0 / math::norm(v))
}

fn rotate(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

fn euler() -> impl Strategy<Value = Vec3> {
    [-3.0..3.0f64, -1.5..1.5f64, -3.0..3.0f64]
}

fn direction() -> impl Strategy<Value = Vec3> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64].prop_filter("nonzero", |v| math::norm(*v) > 0.1)
}

fn gamma() -> impl Strategy<Value = ShCoeffs> {
    proptest::collection::vec(-1.0..1.0f64, 27).prop_map(|v| ShCoeffs(v.try_into().unwrap()))
}

/// Height-field sheet with random heights and UVs on a regular lattice.
fn sheet(heights: &[f64], n: usize) -> TriMesh {
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    for r in 0..n {
        for c in 0..n {
            vertices.push([c as f64 * 5.0, r as f64 * 5.0, heights[r * n + c]]);
            uv.push([(c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64]);
        }
    }
    let mut triangles = Vec::new();
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let a = r * n + c;
            triangles.push([a, a + n, a + 1]);
            triangles.push([a + 1, a + n, a + n + 1]);
        }
    }
    TriMesh::new(vertices, triangles, Some(uv)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uv_sample_is_linear(seed in 0u64..1000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mesh = sheet(&[0.0; 16], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_map(&mut rng, 8, 1, 1.0);
        let v = random_map(&mut rng, 8, 1, 1.0);
        let mut mix = u.map(|x| a * x);
        mix.add_scaled(&v, b);
        let lhs = uv_sample(&mix, &mesh).unwrap();
        let (su, sv) = (uv_sample(&u, &mesh).unwrap(), uv_sample(&v, &mesh).unwrap());
        for ((l, x), y) in lhs.iter().zip(&su).zip(&sv) {
            prop_assert!((l - (a * x + b * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn self_deformation_is_identity_and_translation_invariant(
        heights in proptest::collection::vec(-2.0..2.0f64, 16),
        shift in [-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64],
    ) {
        let mesh = sheet(&heights, 4);
        for g in deformation_gradients(&mesh, &mesh).unwrap() {
            for (r, row) in g.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    prop_assert!((v - f64::from(u8::from(r == c))).abs() < 1e-9);
                }
            }
        }
        let bent = mesh.with_vertices(mesh.vertices.iter().map(|p| [p[0], p[1] + 0.1 * p[0], p[2] * 1.5]).collect());
        let moved = bent.with_vertices(bent.vertices.iter().map(|&p| math::add(p, shift)).collect());
        let (a, b) = (deformation_gradients(&mesh, &bent).unwrap(), deformation_gradients(&mesh, &moved).unwrap());
        for (ga, gb) in a.iter().zip(&b) {
            for (x, y) in ga.iter().flatten().zip(gb.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn similarity_deformation_gradient_is_the_transform(
        heights in proptest::collection::vec(-2.0..2.0f64, 16),
        e in euler(),
        scale in 0.2..5.0f64,
        shift in [-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64],
    ) {
        let mesh = sheet(&heights, 4);
        let r = rotation_matrix(e);
        let moved = mesh.with_vertices(
            mesh.vertices.iter().map(|&p| math::add(math::scale(rotate(&r, p), scale), shift)).collect(),
        );
        for g in deformation_gradients(&mesh, &moved).unwrap() {
            for (i, row) in g.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    prop_assert!((v - scale * r[i][j]).abs() < 1e-6 * scale);
                }
            }
        }
    }

    #[test]
    fn normals_rotate_with_the_mesh(heights in proptest::collection::vec(-3.0..3.0f64, 16), e in euler()) {
        let mesh = sheet(&heights, 4);
        let r = rotation_matrix(e);
        let rotated: Vec<Vec3> = mesh.vertices.iter().map(|&p| rotate(&r, p)).collect();
        let n0 = vertex_normals(&mesh.vertices, &mesh.triangles);
        let n1 = vertex_normals(&rotated, &mesh.triangles);
        for (a, b) in n0.iter().zip(&n1) {
            let ra = rotate(&r, *a);
            prop_assert!(max_abs_diff(&ra, b) < 1e-6);
        }
    }

    #[test]
    fn obj_round_trip(heights in proptest::collection::vec(-100.0..100.0f64, 25)) {
        let mesh = sheet(&heights, 5);
        let back = parse_obj(&mesh.to_obj_string(), "mem").unwrap();
        prop_assert_eq!(&back.triangles, &mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            prop_assert!(max_abs_diff(a, b) < 1e-6);
        }
        for (a, b) in back.uv.as_ref().unwrap().iter().zip(mesh.uv.as_ref().unwrap()) {
            prop_assert!(max_abs_diff(a, b) < 1e-6);
        }
    }

    #[test]
    fn zero_corrections_give_template_interpolation(logits in proptest::collection::vec(-6.0..6.0f64, 4)) {
        let t = tiny_rig(4, 2);
        let masks = compute_attention_masks(&t, TINY_RES, 1.0).unwrap();
        let coeffs = ExpressionCoeffs::from_logits(&logits);
        let shape = assemble_shape(&t, &ModelCorrections::zeros(&t), &masks, &coeffs).unwrap();
        for (v, s) in shape.iter().enumerate() {
            let mut want = math::scale(t.s0.vertices[v], coeffs.w0);
            for (b, &w) in t.blendshapes.iter().zip(&coeffs.w) {
                math::axpy(&mut want, w, b[v]);
            }
            prop_assert_eq!(*s, want);
        }
    }

    #[test]
    fn assembly_is_affine_in_corrections(seed in 0u64..1000, alpha in -2.0..2.0f64) {
        let t = tiny_rig(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = random_masks(4, TINY_RES, &mut rng);
        let coeffs = ExpressionCoeffs::from_logits(&[0.3, -1.0, 2.0, -0.2]);
        let base = random_corrections(&t, &mut rng, 1.0);
        let dir = random_corrections(&t, &mut rng, 1.0);
        let mut far = base.clone();
        let mut mid = base.clone();
        for ((f, m), d) in far.maps_mut().zip(mid.maps_mut()).zip(dir.maps()) {
            f.add_scaled(d, alpha);
            m.add_scaled(d, 0.5 * alpha);
        }
        let s = |c: &ModelCorrections| assemble_shape(&t, c, &masks, &coeffs).unwrap();
        let (s0, s1, s2) = (s(&base), s(&mid), s(&far));
        for ((a, b), c) in s0.iter().zip(&s1).zip(&s2) {
            for d in 0..3 {
                prop_assert!((b[d] - 0.5 * (a[d] + c[d])).abs() < 1e-10);
            }
        }
        let r = |c: &ModelCorrections| assemble_albedo(&t, c, &masks, &coeffs).unwrap();
        let (r0, r1, r2) = (r(&base), r(&mid), r(&far));
        for ((a, b), c) in r0.data().iter().zip(r1.data()).zip(r2.data()) {
            prop_assert!((b - 0.5 * (a + c)).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_corrections_leave_outside_vertices(seed in 0u64..1000) {
        let t = tiny_rig(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = random_masks(4, TINY_RES, &mut rng);
        for m in &mut masks.masks {
            *m = Grid::from_fn(TINY_RES, TINY_RES, 1, |x, _, _| if x < 4 { m.get(x, 0, 0) } else { 0.0 });
        }
        let coeffs = ExpressionCoeffs::from_logits(&[1.0, 0.5, -0.5, 2.0]);
        let zero = ModelCorrections::zeros(&t);
        let mut c = zero.clone();
        for d in &mut c.d_shape {
            *d = random_map(&mut rng, TINY_RES, 3, 100.0);
        }
        let (a, b) = (
            assemble_shape(&t, &zero, &masks, &coeffs).unwrap(),
            assemble_shape(&t, &c, &masks, &coeffs).unwrap(),
        );
        let sampler = UvSampler::new(&t.s0, TINY_RES, TINY_RES).unwrap();
        let mut outside = 0;
        for (v, tap) in sampler.taps().iter().enumerate() {
            let reached = tap.taps().iter().any(|&(k, w)| w != 0.0 && k % TINY_RES < 4);
            if !reached {
                outside += 1;
                prop_assert_eq!(a[v], b[v]);
            }
        }
        prop_assert!(outside > 0);
    }

    #[test]
    fn shading_superposition(a1 in [0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64], a2 in [0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64],
                             g1 in gamma(), g2 in gamma(), n in direction()) {
        let n = unit(n);
        let g12 = ShCoeffs(std::array::from_fn(|i| g1.0[i] + g2.0[i]));
        let lhs = shade(a1, n, &g12).unwrap();
        let (x, y) = (shade(a1, n, &g1).unwrap(), shade(a1, n, &g2).unwrap());
        for c in 0..3 {
            prop_assert!((lhs[c] - x[c] - y[c]).abs() < 1e-12);
        }
        let a12 = [a1[0] + a2[0], a1[1] + a2[1], a1[2] + a2[2]];
        let lhs = shade(a12, n, &g1).unwrap();
        let y = shade(a2, n, &g1).unwrap();
        let x = shade(a1, n, &g1).unwrap();
        for c in 0..3 {
            prop_assert!((lhs[c] - x[c] - y[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn sh_band_energy_is_rotation_invariant(n in direction(), e in euler()) {
        let n = unit(n);
        let m = unit(rotate(&rotation_matrix(e), n));
        let (y0, y1) = (sh_basis(n).unwrap(), sh_basis(m).unwrap());
        for band in [0..1, 1..4, 4..9] {
            let s0: f64 = y0[band.clone()].iter().map(|v| v * v).sum();
            let s1: f64 = y1[band].iter().map(|v| v * v).sum();
            prop_assert!((s0 - s1).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_adjoint_matches_differences(p in [-100.0..100.0f64, -100.0..100.0f64, 300.0..900.0f64],
                                               g in [-1.0..1.0f64, -1.0..1.0f64]) {
        let cam = Camera::default();
        let an = cam.project_backward(p, g);
        let h = 1e-4;
        for k in 0..3 {
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            let (pa, pb) = (cam.project_point(a), cam.project_point(b));
            let num = (g[0] * (pa[0] - pb[0]) + g[1] * (pa[1] - pb[1])) / (2.0 * h);
            prop_assert!((an[k] - num).abs() <= 1e-5 * an[k].abs().max(num.abs()).max(1e-3));
        }
    }

    #[test]
    fn barycentrics_partition_unity(e in [-0.4..0.4f64, -0.4..0.4f64, -0.4..0.4f64]) {
        let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
        let posed = apply_pose(&t.s0.vertices, e, [0.0, 0.0, 600.0]);
        let cam = Camera::default().resized(48, 48);
        let (proj, depth) = facefit::shading::project(&posed, &cam).unwrap();
        let cov = rasterize(&proj, &depth, &t.s0.triangles, (48, 48));
        let mut covered = 0;
        for (id, b) in cov.tri_id.iter().zip(&cov.bary) {
            if *id >= 0 {
                covered += 1;
                prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(b.iter().all(|&x| x >= -1e-9));
            }
        }
        prop_assert!(covered > 100);
    }

    #[test]
    fn growing_a_triangle_never_uncovers(p in proptest::array::uniform3([2.0..30.0f64, 2.0..30.0f64]), s in 1.0..2.0f64) {
        let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
        let grown: Vec<[f64; 2]> = p.iter().map(|q| [c[0] + s * (q[0] - c[0]), c[1] + s * (q[1] - c[1])]).collect();
        let tri = [[0, 1, 2]];
        let both = [[0, 2, 1]];
        for order in [tri, both] {
            let a = rasterize(&p, &[1.0; 3], &order, (32, 32));
            let b = rasterize(&grown, &[1.0; 3], &order, (32, 32));
            for (x, y) in a.tri_id.iter().zip(&b.tri_id) {
                prop_assert!(*x < 0 || *y >= 0);
            }
        }
    }

    #[test]
    fn losses_vanish_at_exact_match(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_map(&mut rng, 9, 3, 1.0);
        let mask = Grid::from_fn(9, 9, 1, |x, y, _| f64::from(u8::from((x + y) % 3 != 0)));
        prop_assert_eq!(losses::masked_l21_grad(&img, &img, &mask, 0).unwrap().0, 0.0);
        prop_assert_eq!(losses::image_gradient_grad(&img, &img, &mask, 0).unwrap().0, 0.0);
        let labels = random_map(&mut rng, 9, 4, 1.0);
        prop_assert_eq!(losses::parsing_frame_grad(&labels, &labels).unwrap().0, 0.0);
        let pts: Vec<[f64; 2]> = (0..68).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let lm: Vec<Landmark> = pts.iter().map(|p| Landmark::new(p[0], p[1])).collect();
        prop_assert_eq!(losses::landmark_loss(&pts, &lm).unwrap(), 0.0);
        prop_assert_eq!(losses::shape_smoothness(&vec![[0.0; 3]; 20], &vec![vec![1, 2]; 20]), 0.0);
        let other = random_map(&mut rng, 9, 3, 1.0);
        prop_assert!(losses::masked_l21_grad(&img, &other, &mask, 0).unwrap().0 >= 0.0);
        prop_assert!(losses::parsing_frame_grad(&labels, &random_map(&mut rng, 9, 4, 1.0)).unwrap().0 >= 0.0);
    }

    #[test]
    fn photometric_ignores_pixels_outside_the_mask(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (target, pred) = (random_map(&mut rng, 8, 3, 1.0), random_map(&mut rng, 8, 3, 1.0));
        let mask = Grid::from_fn(8, 8, 1, |x, _, _| f64::from(u8::from(x < 5)));
        let junk = random_map(&mut rng, 8, 3, 10.0);
        let splice = |img: &Image| Grid::from_fn(8, 8, 3, |x, y, c| if x < 5 { img.get(x, y, c) } else { junk.get(x, y, c) });
        let a = losses::masked_l21_grad(&target, &pred, &mask, 0).unwrap().0;
        let b = losses::masked_l21_grad(&splice(&target), &splice(&pred), &mask, 0).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scaling_a_weight_scales_its_contribution(term in 0usize..6, alpha in 0.0..10.0f64,
                                                 vals in proptest::collection::vec(0.0..100.0f64, 6)) {
        let terms = LossTerms {
            photometric: vals[0],
            landmark: vals[1],
            parsing: vals[2],
            smoothness: vals[3],
            blendshape_gradient: vals[4],
            regularization: vals[5],
        };
        let w = LossWeights::default();
        let mut scaled = w;
        let (slot, value) = match term {
            0 => (&mut scaled.lambda_ph, terms.photometric),
            1 => (&mut scaled.lambda_lm, terms.landmark),
            2 => (&mut scaled.lambda_pa, terms.parsing),
            3 => (&mut scaled.lambda_sd, terms.smoothness),
            4 => (&mut scaled.lambda_bg, terms.blendshape_gradient),
            _ => (&mut scaled.lambda_reg, terms.regularization),
        };
        let original = *slot;
        *slot *= alpha;
        let a = losses::total_loss(&terms, &w, LossMode::Joint).unwrap().total;
        let b = losses::total_loss(&terms, &scaled, LossMode::Joint).unwrap().total;
        let want = a + (alpha - 1.0) * original * value;
        prop_assert!((b - want).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn masks_are_deterministic() {
    let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
    assert_eq!(
        compute_attention_masks(&t, 16, 1.0).unwrap(),
        compute_attention_masks(&t, 16, 1.0).unwrap()
    );
}

#[test]
fn render_and_backward_are_deterministic() {
    let t = synth::toy_head(&ToyHeadSpec::small()).unwrap();
    let posed = apply_pose(&t.s0.vertices, [0.1, -0.2, 0.05], [0.0, 0.0, 600.0]);
    let cam = Camera::default().resized(48, 48);
    let run = || {
        let r = raster::render_face(&posed, &t.r0, &ShCoeffs::ambient(1.0), &cam, &t).unwrap();
        let up = r.color.map(|v| v - 0.3);
        let g = raster::backward(&r, &t, &up, None).unwrap();
        (r.color, r.mask, g.vertices, g.albedo, g.gamma)
    };
    assert_eq!(run(), run());
}

#![allow(dead_code)]

use facefit::math::Vec3;
use facefit::model::ModelManifest;
use facefit::{AttentionMaskSet, Grid, ModelCorrections, TemplateFaceModel, TriMesh, UvMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_COLS: usize = 5;
pub const TINY_ROWS: usize = 4;
pub const TINY_RES: usize = 8;

/// 5×4 vertex sheet (20 vertices, 24 triangles) with `k` blendshapes. Vertex
/// UVs sit on texel centers of an 8×8 map. Blendshape `i` lifts vertex
/// `3 + 4i` and, by a sub-threshold amount, vertex `3 + 4i + 1`.
pub fn tiny_rig(k: usize, seed: u64) -> TemplateFaceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    for r in 0..TINY_ROWS {
        for c in 0..TINY_COLS {
            vertices.push([
                10.0 * c as f64,
                10.0 * r as f64,
                rng.random_range(-1.0..1.0),
            ]);
            uv.push([
                (c as f64 + 1.5) / TINY_RES as f64,
                (r as f64 + 1.5) / TINY_RES as f64,
            ]);
        }
    }
    let mut triangles = Vec::new();
    for r in 0..TINY_ROWS - 1 {
        for c in 0..TINY_COLS - 1 {
            let a = r * TINY_COLS + c;
            triangles.push([a, a + TINY_COLS, a + 1]);
            triangles.push([a + 1, a + TINY_COLS, a + TINY_COLS + 1]);
        }
    }
    let s0 = TriMesh::new(vertices.clone(), triangles, Some(uv)).unwrap();
    let blendshapes = (0..k)
        .map(|i| {
            let mut b = vertices.clone();
            let main = (3 + 4 * i) % 20;
            let minor = (main + 1) % 20;
            b[main][2] += rng.random_range(2.0..4.0);
            b[minor][0] += 0.0004;
            for (j, v) in b.iter_mut().enumerate() {
                if j != main && j != minor && rng.random_bool(0.3) {
                    v[1] += rng.random_range(0.01..0.5);
                }
            }
            b
        })
        .collect();
    let r0 = Grid::from_fn(TINY_RES, TINY_RES, 3, |x, y, c| {
        0.2 + 0.05 * ((x + 2 * y + c) % 7) as f64
    });
    let parse = Grid::from_fn(TINY_RES, TINY_RES, 2, |x, _, c| {
        f64::from(u8::from((x >= 4) == (c == 1)))
    });
    TemplateFaceModel::new(
        s0,
        blendshapes,
        r0,
        Some(parse),
        Grid::filled(TINY_RES, TINY_RES, 1, 1.0),
        ModelManifest {
            uv_resolution: TINY_RES,
            ..ModelManifest::default()
        },
    )
    .unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, res: usize, channels: usize, scale: f64) -> UvMap {
    Grid::from_fn(res, res, channels, |_, _, _| {
        rng.random_range(-scale..scale)
    })
}

pub fn random_corrections(
    template: &TemplateFaceModel,
    rng: &mut ChaCha8Rng,
    scale: f64,
) -> ModelCorrections {
    let mut c = ModelCorrections::zeros(template);
    let res = template.uv_resolution();
    for m in c.maps_mut() {
        let noise = random_map(rng, res, 3, scale);
        m.add_scaled(&noise, 1.0);
    }
    c
}

pub fn random_masks(k: usize, res: usize, rng: &mut ChaCha8Rng) -> AttentionMaskSet {
    AttentionMaskSet {
        masks: (0..k)
            .map(|_| Grid::from_fn(res, res, 1, |_, _, _| rng.random_range(0.0..1.0)))
            .collect(),
    }
}

/// Bilinear lookup with texel centers at `(i + ½) / res` and clamped borders.
pub fn bilinear(map: &UvMap, uv: [f64; 2]) -> Vec<f64> {
    let (w, h) = (map.width() as isize, map.height() as isize);
    let x = uv[0] * w as f64 - 0.5;
    let y = uv[1] * h as f64 - 0.5;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64, c: usize| {
        let xi = (xi as isize).clamp(0, w - 1) as usize;
        let yi = (yi as isize).clamp(0, h - 1) as usize;
        map.get(xi, yi, c)
    };
    (0..map.channels())
        .map(|c| {
            (1.0 - fx) * (1.0 - fy) * at(x0, y0, c)
                + fx * (1.0 - fy) * at(x0 + 1.0, y0, c)
                + (1.0 - fx) * fy * at(x0, y0 + 1.0, c)
                + fx * fy * at(x0 + 1.0, y0 + 1.0, c)
        })
        .collect()
}

pub fn to3(v: &[f64]) -> Vec3 {
    [v[0], v[1], v[2]]
}

/// 3×3 inverse by cofactors.
pub fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r: usize, k: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for k in 0..3 {
            out[r][k] = c(k, r) / det;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

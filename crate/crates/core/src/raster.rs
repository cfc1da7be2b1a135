//! Deterministic software rasterizer with an adjoint pass.
//!
//! Sampling happens at pixel centers. A pixel center lying exactly on an edge
//! belongs to the triangle for which that edge is a top or left edge, so
//! pixels on a shared edge are drawn once. The nearest triangle wins the depth
//! test; on exact depth ties the lower triangle index wins.
//!
//! Gradients follow the interior-only model: every covered pixel
//! differentiates its color through the barycentric coordinates of the
//! triangle it shows, and nothing is differentiated through visibility
//! changes at silhouettes.

use crate::error::{Error, Result};
use crate::grid::{BilinearTap, Image, UvMap};
use crate::math::{self, Vec2, Vec3};
use crate::mesh::{vertex_normals, vertex_normals_backward};
use crate::model::TemplateFaceModel;
use crate::shading::{self, Camera, ShCoeffs, SH_BANDS};

#[inline]
fn edge(u: Vec2, v: Vec2, q: Vec2) -> f64 {
    (v[0] - u[0]) * (q[1] - u[1]) - (v[1] - u[1]) * (q[0] - u[0])
}

/// Partial derivatives of [`edge`] with respect to `u`, `v` and `q`.
#[inline]
fn edge_grad(u: Vec2, v: Vec2, q: Vec2) -> (Vec2, Vec2, Vec2) {
    (
        [
            -(q[1] - u[1]) + (v[1] - u[1]),
            -(v[0] - u[0]) + (q[0] - u[0]),
        ],
        [q[1] - u[1], -(q[0] - u[0])],
        [-(v[1] - u[1]), v[0] - u[0]],
    )
}

/// Barycentric coordinates of `q` in triangle `p`, or `None` for a
/// degenerate triangle. A point exactly on a vertex gets an exact one-hot.
#[inline]
pub fn barycentric(p: [Vec2; 3], q: Vec2) -> Option<[f64; 3]> {
    let d = edge(p[0], p[1], p[2]);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    for (k, pk) in p.iter().enumerate() {
        if *pk == q {
            let mut b = [0.0; 3];
            b[k] = 1.0;
            return Some(b);
        }
    }
    let b1 = edge(p[2], p[0], q) / d;
    let b2 = edge(p[0], p[1], q) / d;
    Some([1.0 - b1 - b2, b1, b2])
}

/// Accumulates into `grad_p` the gradient of a scalar with respect to the
/// triangle corners given `grad_b = dL/d(b0, b1, b2)` at sample point `q`.
#[inline]
pub fn barycentric_backward(
    p: [Vec2; 3],
    q: Vec2,
    b: [f64; 3],
    grad_b: [f64; 3],
    grad_p: &mut [Vec2; 3],
) {
    let d = edge(p[0], p[1], p[2]);
    let g1 = grad_b[1] - grad_b[0];
    let g2 = grad_b[2] - grad_b[0];
    let ge_ca = g1 / d;
    let ge_ab = g2 / d;
    let gd = -(g1 * b[1] + g2 * b[2]) / d;
    let mut acc = |k: usize, g: Vec2, s: f64| {
        grad_p[k][0] += s * g[0];
        grad_p[k][1] += s * g[1];
    };
    // b1 = E(c, a, q) / D
    let (du, dv, _) = edge_grad(p[2], p[0], q);
    acc(2, du, ge_ca);
    acc(0, dv, ge_ca);
    // b2 = E(a, b, q) / D
    let (du, dv, _) = edge_grad(p[0], p[1], q);
    acc(0, du, ge_ab);
    acc(1, dv, ge_ab);
    // D = E(a, b, c)
    let (du, dv, dq) = edge_grad(p[0], p[1], p[2]);
    acc(0, du, gd);
    acc(1, dv, gd);
    acc(2, dq, gd);
}

/// Calls `f(x, y, bary)` for every pixel whose center lies inside triangle
/// `p` (pixel coordinates). With `inclusive` every center on an edge is
/// visited; otherwise ties follow the top-left rule.
pub fn scan_triangle(
    p: [Vec2; 3],
    width: usize,
    height: usize,
    inclusive: bool,
    mut f: impl FnMut(usize, usize, [f64; 3]),
) {
    let d = edge(p[0], p[1], p[2]);
    if d == 0.0 || !d.is_finite() {
        return;
    }
    let sign = d.signum();
    let min_x = p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
    if max_x < 0.0 || max_y < 0.0 || min_x > width as f64 || min_y > height as f64 {
        return;
    }
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor().min(width as f64 - 1.0)).max(-1.0);
    let y1 = ((max_y - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);

    // Edge k is opposite corner k; with positive orientation an edge owns ties
    // when it is a top or left edge.
    let edges = [(p[1], p[2]), (p[2], p[0]), (p[0], p[1])];
    let owns_ties: [bool; 3] = edges.map(|(a, b)| {
        let dx = sign * (b[0] - a[0]);
        let dy = sign * (b[1] - a[1]);
        dy < 0.0 || (dy == 0.0 && dx > 0.0)
    });

    for y in y0..=y1 {
        let qy = y as f64 + 0.5;
        for x in x0..=x1 {
            let q = [x as f64 + 0.5, qy];
            let mut inside = true;
            for (k, (a, b)) in edges.iter().enumerate() {
                let e = sign * edge(*a, *b, q);
                if e < 0.0 || (e == 0.0 && !inclusive && !owns_ties[k]) {
                    inside = false;
                    break;
                }
            }
            if inside {
                if let Some(b) = barycentric(p, q) {
                    f(x, y, b);
                }
            }
        }
    }
}

/// Visibility buffers from rasterizing projected triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    /// Visible triangle per pixel, `-1` for background.
    pub tri_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    /// Camera depth per pixel, `+∞` for background.
    pub depth: Vec<f64>,
}

impl Coverage {
    pub fn covered(&self, pixel: usize) -> bool {
        self.tri_id[pixel] >= 0
    }

    pub fn coverage_count(&self) -> usize {
        self.tri_id.iter().filter(|&&t| t >= 0).count()
    }
}

/// Z-buffered rasterization of `triangles` over projected `verts2d` with
/// per-vertex camera `depth`. `imgsize` is `(height, width)`.
pub fn rasterize(
    verts2d: &[Vec2],
    depth: &[f64],
    triangles: &[[usize; 3]],
    imgsize: (usize, usize),
) -> Coverage {
    let (height, width) = imgsize;
    let n = width * height;
    let mut cov = Coverage {
        width,
        height,
        tri_id: vec![-1; n],
        bary: vec![[0.0; 3]; n],
        depth: vec![f64::INFINITY; n],
    };
    for (ti, t) in triangles.iter().enumerate() {
        let p = t.map(|i| verts2d[i]);
        if p.iter().flatten().any(|v| !v.is_finite()) {
            continue;
        }
        let inv_z = t.map(|i| 1.0 / depth[i]);
        scan_triangle(p, width, height, false, |x, y, b| {
            // Screen-space barycentrics interpolate 1/z exactly.
            let z = 1.0 / (b[0] * inv_z[0] + b[1] * inv_z[1] + b[2] * inv_z[2]);
            let k = y * width + x;
            if z < cov.depth[k] {
                cov.depth[k] = z;
                cov.tri_id[k] = ti as i32;
                cov.bary[k] = b;
            }
        });
    }
    cov
}

/// A rendered frame plus what the adjoint pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// H×W×3 radiance; background is 0.
    pub color: Image,
    /// H×W×1 photometric mask: coverage times the sampled validity map.
    pub mask: Image,
    pub coverage: Coverage,
    /// Camera-frame vertex positions that were rendered.
    pub posed: Vec<Vec3>,
    pub projected: Vec<Vec2>,
    pub normals: Vec<Vec3>,
    pub albedo: UvMap,
    pub gamma: ShCoeffs,
    pub camera: Camera,
}

/// Gradients produced by [`backward`].
#[derive(Clone, Debug)]
pub struct RenderGrads {
    /// With respect to camera-frame vertex positions.
    pub vertices: Vec<Vec3>,
    /// With respect to albedo texels (same layout as the albedo map).
    pub albedo: UvMap,
    pub gamma: ShCoeffs,
}

struct PixelShading {
    tap: BilinearTap,
    albedo_raw: [f64; 3],
    normal: Vec3,
    raw_normal_len: f64,
    basis: [f64; SH_BANDS],
    irradiance: [f64; 3],
}

fn shade_pixel(
    tri: &[usize; 3],
    b: [f64; 3],
    uv: &[Vec2],
    normals: &[Vec3],
    albedo: &UvMap,
    gamma: &ShCoeffs,
) -> PixelShading {
    let mut tex = [0.0; 2];
    let mut n_raw = [0.0; 3];
    for k in 0..3 {
        tex[0] += b[k] * uv[tri[k]][0];
        tex[1] += b[k] * uv[tri[k]][1];
        math::axpy(&mut n_raw, b[k], normals[tri[k]]);
    }
    let tap = BilinearTap::new(tex, albedo.width(), albedo.height());
    let mut albedo_raw = [0.0; 3];
    tap.sample_into(albedo, &mut albedo_raw);
    let len = math::norm(n_raw);
    let normal = if len > 0.0 {
        math::scale(n_raw, 1.0 / len)
    } else {
        [0.0, 0.0, -1.0]
    };
    let basis = shading::sh_basis_unchecked(normal);
    let irradiance = shading::irradiance(&basis, gamma);
    PixelShading {
        tap,
        albedo_raw,
        normal,
        raw_normal_len: len,
        basis,
        irradiance,
    }
}

fn interpolate_uv(tri: &[usize; 3], b: [f64; 3], uv: &[Vec2]) -> Vec2 {
    let mut tex = [0.0; 2];
    for k in 0..3 {
        tex[0] += b[k] * uv[tri[k]][0];
        tex[1] += b[k] * uv[tri[k]][1];
    }
    tex
}

/// Renders the posed face (camera-frame vertices) with SH lighting.
///
/// Vertex normals are computed from `posed` and interpolated per pixel, then
/// renormalized. Albedo is sampled bilinearly from the unclamped map and
/// clamped to `[0, 1]` before shading.
pub fn render_face(
    posed: &[Vec3],
    albedo: &UvMap,
    gamma: &ShCoeffs,
    cam: &Camera,
    template: &TemplateFaceModel,
) -> Result<RenderOutput> {
    if posed.len() != template.num_vertices() {
        return Err(Error::Dimension(format!(
            "{} posed vertices for a {}-vertex template",
            posed.len(),
            template.num_vertices()
        )));
    }
    if albedo.channels() != 3 {
        return Err(Error::Dimension("albedo map must have 3 channels".into()));
    }
    let (projected, depth) = shading::project(posed, cam)?;
    let triangles = &template.s0.triangles;
    let coverage = rasterize(&projected, &depth, triangles, (cam.height, cam.width));
    let normals = vertex_normals(posed, triangles);
    let uv = template.s0.require_uv()?;

    let mut color = Image::zeros(cam.width, cam.height, 3);
    let mut mask = Image::zeros(cam.width, cam.height, 1);
    let validity = &template.validity;
    for p in 0..cam.width * cam.height {
        let Ok(t) = usize::try_from(coverage.tri_id[p]) else {
            continue;
        };
        let tri = &triangles[t];
        let px = shade_pixel(tri, coverage.bary[p], uv, &normals, albedo, gamma);
        let (x, y) = (p % cam.width, p / cam.width);
        let out = color.pixel_mut(x, y);
        for c in 0..3 {
            out[c] = px.albedo_raw[c].clamp(0.0, 1.0) * px.irradiance[c];
        }
        let vtap = BilinearTap::new(
            interpolate_uv(tri, coverage.bary[p], uv),
            validity.width(),
            validity.height(),
        );
        mask.set(x, y, 0, vtap.sample(validity, 0));
    }

    Ok(RenderOutput {
        color,
        mask,
        coverage,
        posed: posed.to_vec(),
        projected,
        normals,
        albedo: albedo.clone(),
        gamma: *gamma,
        camera: *cam,
    })
}

/// Soft region labels for an existing render: the template parse map sampled
/// at each covered pixel, background one-hot elsewhere.
pub fn parse_labels(render: &RenderOutput, template: &TemplateFaceModel) -> Result<Image> {
    let t_map = template.parse_map.as_ref().ok_or(Error::MissingParseMap)?;
    let uv = template.s0.require_uv()?;
    let cov = &render.coverage;
    let classes = t_map.channels();
    let mut out = Image::zeros(cov.width, cov.height, classes);
    for p in 0..cov.width * cov.height {
        let (x, y) = (p % cov.width, p / cov.width);
        let px = out.pixel_mut(x, y);
        match usize::try_from(cov.tri_id[p]) {
            Ok(t) => {
                let tex = interpolate_uv(&template.s0.triangles[t], cov.bary[p], uv);
                BilinearTap::new(tex, t_map.width(), t_map.height()).sample_into(t_map, px);
            }
            Err(_) => px[0] = 1.0,
        }
    }
    Ok(out)
}

/// Rasterizes the posed shape and returns its parse-label image.
pub fn render_parse(posed: &[Vec3], cam: &Camera, template: &TemplateFaceModel) -> Result<Image> {
    if template.parse_map.is_none() {
        return Err(Error::MissingParseMap);
    }
    let (projected, depth) = shading::project(posed, cam)?;
    let coverage = rasterize(
        &projected,
        &depth,
        &template.s0.triangles,
        (cam.height, cam.width),
    );
    let render = RenderOutput {
        color: Image::zeros(cam.width, cam.height, 3),
        mask: Image::zeros(cam.width, cam.height, 1),
        coverage,
        posed: posed.to_vec(),
        projected,
        normals: Vec::new(),
        albedo: UvMap::zeros(1, 1, 3),
        gamma: ShCoeffs::default(),
        camera: *cam,
    };
    parse_labels(&render, template)
}

/// Adjoint of [`render_face`] (and optionally [`parse_labels`]).
///
/// `upstream_color` is `dL/dcolor`; `upstream_parse`, when given, is
/// `dL/dlabels` for the parse image of the same render. The returned vertex
/// gradient is with respect to the camera-frame positions passed to
/// `render_face`, including the path through the vertex normals.
pub fn backward(
    render: &RenderOutput,
    template: &TemplateFaceModel,
    upstream_color: &Image,
    upstream_parse: Option<&Image>,
) -> Result<RenderGrads> {
    let cov = &render.coverage;
    if upstream_color.width() != cov.width
        || upstream_color.height() != cov.height
        || upstream_color.channels() != 3
    {
        return Err(Error::Dimension(format!(
            "upstream gradient is {}x{}x{}, render is {}x{}x3",
            upstream_color.width(),
            upstream_color.height(),
            upstream_color.channels(),
            cov.width,
            cov.height
        )));
    }
    let t_map = match upstream_parse {
        Some(g) => {
            let t = template.parse_map.as_ref().ok_or(Error::MissingParseMap)?;
            if g.width() != cov.width || g.height() != cov.height || g.channels() != t.channels() {
                return Err(Error::Dimension(
                    "parse upstream gradient does not match the render".into(),
                ));
            }
            Some(t)
        }
        None => None,
    };

    let triangles = &template.s0.triangles;
    let uv = template.s0.require_uv()?;
    let cam = &render.camera;
    let nv = render.posed.len();
    let mut g_vertices = vec![[0.0; 3]; nv];
    let mut g_normals = vec![[0.0; 3]; nv];
    let mut g_albedo = UvMap::zeros(render.albedo.width(), render.albedo.height(), 3);
    let mut g_gamma = ShCoeffs::default();
    let mut g_2d = vec![[0.0; 2]; nv];

    for p in 0..cov.width * cov.height {
        let Ok(t) = usize::try_from(cov.tri_id[p]) else {
            continue;
        };
        let (x, y) = (p % cov.width, p / cov.width);
        let gc = upstream_color.pixel(x, y);
        let gp = upstream_parse.map(|g| g.pixel(x, y));
        let color_active = gc.iter().any(|&v| v != 0.0);
        let parse_active = gp.is_some_and(|g| g.iter().any(|&v| v != 0.0));
        if !color_active && !parse_active {
            continue;
        }
        let tri = &triangles[t];
        let b = cov.bary[p];
        let mut g_b = [0.0; 3];
        let mut g_uv = [0.0; 2];

        if color_active {
            let px = shade_pixel(tri, b, uv, &render.normals, &render.albedo, &render.gamma);
            let albedo = px.albedo_raw.map(|a| a.clamp(0.0, 1.0));
            let mut g_alb = [0.0; 3];
            let mut g_basis = [0.0; SH_BANDS];
            for c in 0..3 {
                for (band, gb) in g_basis.iter_mut().enumerate() {
                    g_gamma.0[c * SH_BANDS + band] += gc[c] * albedo[c] * px.basis[band];
                    *gb += gc[c] * albedo[c] * render.gamma.get(c, band);
                }
                if px.albedo_raw[c] > 0.0 && px.albedo_raw[c] < 1.0 {
                    g_alb[c] = gc[c] * px.irradiance[c];
                }
            }
            px.tap.splat(&mut g_albedo, &g_alb);
            for (c, &ga) in g_alb.iter().enumerate() {
                if ga != 0.0 {
                    let d = px.tap.sample_duv(&render.albedo, c);
                    g_uv[0] += ga * d[0];
                    g_uv[1] += ga * d[1];
                }
            }
            if px.raw_normal_len > 0.0 {
                let jac = shading::sh_basis_jacobian(px.normal);
                let mut g_n = [0.0; 3];
                for (band, row) in jac.iter().enumerate() {
                    math::axpy(&mut g_n, g_basis[band], *row);
                }
                let n = px.normal;
                let g_raw = math::scale(
                    math::sub(g_n, math::scale(n, math::dot(n, g_n))),
                    1.0 / px.raw_normal_len,
                );
                for k in 0..3 {
                    math::axpy(&mut g_normals[tri[k]], b[k], g_raw);
                    g_b[k] += math::dot(g_raw, render.normals[tri[k]]);
                }
            }
        }

        if let (Some(gp), Some(t_map), true) = (gp, t_map, parse_active) {
            let tex = interpolate_uv(tri, b, uv);
            let tap = BilinearTap::new(tex, t_map.width(), t_map.height());
            for (l, &g) in gp.iter().enumerate() {
                if g != 0.0 {
                    let d = tap.sample_duv(t_map, l);
                    g_uv[0] += g * d[0];
                    g_uv[1] += g * d[1];
                }
            }
        }

        for k in 0..3 {
            g_b[k] += g_uv[0] * uv[tri[k]][0] + g_uv[1] * uv[tri[k]][1];
        }
        if g_b.iter().any(|&v| v != 0.0) {
            let q = [x as f64 + 0.5, y as f64 + 0.5];
            let corners = tri.map(|i| render.projected[i]);
            let mut g_corners = [[0.0; 2]; 3];
            barycentric_backward(corners, q, b, g_b, &mut g_corners);
            for k in 0..3 {
                g_2d[tri[k]][0] += g_corners[k][0];
                g_2d[tri[k]][1] += g_corners[k][1];
            }
        }
    }

    for (i, g) in g_2d.iter().enumerate() {
        if g[0] != 0.0 || g[1] != 0.0 {
            math::add_assign(
                &mut g_vertices[i],
                cam.project_backward(render.posed[i], *g),
            );
        }
    }
    for (gv, gn) in g_vertices.iter_mut().zip(vertex_normals_backward(
        &render.posed,
        triangles,
        &g_normals,
    )) {
        math::add_assign(gv, gn);
    }

    Ok(RenderGrads {
        vertices: g_vertices,
        albedo: g_albedo,
        gamma: g_gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let cov = rasterize(&[], &[], &[], (4, 5));
        assert!(cov.tri_id.iter().all(|&t| t == -1));
        assert_eq!(cov.coverage_count(), 0);
    }

    #[test]
    fn shared_edge_pixels_drawn_once() {
        // Square split along a diagonal passing through pixel centers.
        let v = vec![[1.0, 1.0], [5.0, 1.0], [5.0, 5.0], [1.0, 5.0]];
        let z = vec![10.0; 4];
        let mut counts = vec![0; 36];
        for t in [[0, 1, 2], [0, 2, 3]] {
            let cov = rasterize(&v, &z, &[t], (6, 6));
            for (c, id) in counts.iter_mut().zip(&cov.tri_id) {
                if *id >= 0 {
                    *c += 1;
                }
            }
        }
        assert!(counts.iter().all(|&c| c <= 1));
        assert_eq!(counts.iter().sum::<usize>(), 16);
    }

    #[test]
    fn nearer_triangle_wins() {
        let v = vec![[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
        let cov = rasterize(
            &[v.clone(), v].concat(),
            &[20.0, 20.0, 20.0, 10.0, 10.0, 10.0],
            &[[0, 1, 2], [3, 4, 5]],
            (6, 6),
        );
        assert!(cov.tri_id.iter().filter(|&&t| t >= 0).all(|&t| t == 1));
        assert!(cov.coverage_count() > 0);
    }

    #[test]
    fn barycentric_backward_matches_finite_differences() {
        let p = [[0.3, 0.2], [7.1, 1.4], [2.2, 6.6]];
        let q = [3.5, 2.5];
        let g = [0.3, -1.2, 0.7];
        let f = |p: [Vec2; 3]| {
            let b = barycentric(p, q).unwrap();
            b[0] * g[0] + b[1] * g[1] + b[2] * g[2]
        };
        let b = barycentric(p, q).unwrap();
        let mut an = [[0.0; 2]; 3];
        barycentric_backward(p, q, b, g, &mut an);
        let h = 1e-6;
        for k in 0..3 {
            for a in 0..2 {
                let mut hi = p;
                let mut lo = p;
                hi[k][a] += h;
                lo[k][a] -= h;
                let fd = (f(hi) - f(lo)) / (2.0 * h);
                assert!(
                    (fd - an[k][a]).abs() < 1e-7,
                    "{k} {a}: {fd} vs {}",
                    an[k][a]
                );
            }
        }
    }
}

//! Triangle meshes: OBJ I/O, normals, UV sampling, adjacency and
//! per-triangle deformation gradients.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BilinearTap, UvMap};
use crate::math::{self, Mat3, Vec2, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// One UV coordinate per vertex, when present.
    pub uv: Option<Vec<Vec2>>,
    /// Vertex indices of the 68 facial landmarks, when known.
    pub landmark_indices: Option<Vec<usize>>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        uv: Option<Vec<Vec2>>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            uv,
            landmark_indices: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for tri in &self.triangles {
            for &i in tri {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, len: n });
                }
            }
        }
        if let Some(uv) = &self.uv {
            if uv.len() != n {
                return Err(Error::Dimension(format!(
                    "{} UVs for {} vertices",
                    uv.len(),
                    n
                )));
            }
        }
        if let Some(lm) = &self.landmark_indices {
            if let Some(&bad) = lm.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { index: bad, len: n });
            }
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn require_uv(&self) -> Result<&[Vec2]> {
        self.uv.as_deref().ok_or(Error::MissingUv)
    }

    /// Same topology, UVs and landmarks with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self {
            vertices,
            ..self.clone()
        }
    }

    pub fn same_topology(&self, other: &TriMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.triangles == other.triangles
    }

    pub fn vertex_normals(&self) -> Vec<Vec3> {
        vertex_normals(&self.vertices, &self.triangles)
    }

    pub fn to_obj_string(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        if let Some(uv) = &self.uv {
            for t in uv {
                let _ = writeln!(out, "vt {} {}", t[0], t[1]);
            }
        }
        for t in &self.triangles {
            let (a, b, c) = (t[0] + 1, t[1] + 1, t[2] + 1);
            if self.uv.is_some() {
                let _ = writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}");
            } else {
                let _ = writeln!(out, "f {a} {b} {c}");
            }
        }
        out
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an ASCII Wavefront OBJ with `v`, `vt` and triangular `f` records.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, &path.display().to_string())
}

/// Parses OBJ text. `origin` names the source in error messages.
///
/// Texture coordinates are resolved per vertex: every face corner that
/// references a vertex must agree on its `vt`. Meshes with UV seams are
/// rejected.
pub fn parse_obj(text: &str, origin: &str) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    let mut positions: Vec<Vec3> = Vec::new();
    let mut texcoords: Vec<Vec2> = Vec::new();
    // (line, [(position, texcoord)])
    type Face = (usize, [(usize, Option<usize>); 3]);
    let mut corners: Vec<Face> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut fields = line.split_whitespace();
        let Some(tag) = fields.next() else { continue };
        let nums = |fields: std::str::SplitWhitespace<'_>, want: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| err(lineno, format!("bad number `{f}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() < want {
                return Err(err(
                    lineno,
                    format!("expected {want} components, found {}", vals.len()),
                ));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let v = nums(fields, 3)?;
                positions.push([v[0], v[1], v[2]]);
            }
            "vt" => {
                let v = nums(fields, 2)?;
                texcoords.push([v[0], v[1]]);
            }
            "f" => {
                let refs: Vec<&str> = fields.collect();
                if refs.len() != 3 {
                    return Err(err(
                        lineno,
                        format!(
                            "only triangles are supported, face has {} corners",
                            refs.len()
                        ),
                    ));
                }
                let mut tri = [(0usize, None); 3];
                for (k, r) in refs.iter().enumerate() {
                    let mut parts = r.split('/');
                    let resolve = |s: &str, count: usize| -> Result<usize> {
                        let i: i64 = s
                            .parse()
                            .map_err(|_| err(lineno, format!("bad index `{s}`")))?;
                        let idx = match i {
                            0 => {
                                return Err(err(lineno, "OBJ indices are 1-based; found 0".into()))
                            }
                            i if i > 0 => i as usize - 1,
                            i => {
                                let back = i.unsigned_abs() as usize;
                                if back > count {
                                    return Err(err(
                                        lineno,
                                        format!("relative index {i} out of range"),
                                    ));
                                }
                                count - back
                            }
                        };
                        Ok(idx)
                    };
                    let v = resolve(parts.next().unwrap_or(""), positions.len())?;
                    let vt = match parts.next() {
                        Some(s) if !s.is_empty() => Some(resolve(s, texcoords.len())?),
                        _ => None,
                    };
                    tri[k] = (v, vt);
                }
                corners.push((lineno, tri));
            }
            _ => {}
        }
    }

    let nv = positions.len();
    let mut triangles = Vec::with_capacity(corners.len());
    let mut uv_of: Vec<Option<usize>> = vec![None; nv];
    let mut any_uv = false;
    let mut all_uv = true;
    for (lineno, tri) in &corners {
        let mut t = [0usize; 3];
        for (k, &(v, vt)) in tri.iter().enumerate() {
            if v >= nv {
                return Err(err(
                    *lineno,
                    format!("vertex index {} out of range ({} vertices)", v + 1, nv),
                ));
            }
            t[k] = v;
            match vt {
                Some(vt) => {
                    if vt >= texcoords.len() {
                        return Err(err(
                            *lineno,
                            format!(
                                "texture index {} out of range ({} vt records)",
                                vt + 1,
                                texcoords.len()
                            ),
                        ));
                    }
                    any_uv = true;
                    match uv_of[v] {
                        Some(prev) if texcoords[prev] != texcoords[vt] => {
                            return Err(err(
                                *lineno,
                                format!("vertex {} has conflicting texture coordinates", v + 1),
                            ));
                        }
                        _ => uv_of[v] = Some(vt),
                    }
                }
                None => all_uv = false,
            }
        }
        triangles.push(t);
    }

    let uv = if any_uv {
        if !all_uv {
            return Err(err(0, "some faces lack texture indices".into()));
        }
        let mut uv = Vec::with_capacity(nv);
        for (v, slot) in uv_of.iter().enumerate() {
            match slot {
                Some(i) => uv.push(texcoords[*i]),
                None if texcoords.len() == nv => uv.push(texcoords[v]),
                None => {
                    return Err(err(
                        0,
                        format!("vertex {} has no texture coordinate", v + 1),
                    ))
                }
            }
        }
        Some(uv)
    } else {
        None
    };
    TriMesh::new(positions, triangles, uv)
}

/// Area-weighted vertex normals. Vertices touched only by degenerate faces
/// (or by none) get the zero vector.
pub fn vertex_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; vertices.len()];
    for t in triangles {
        // |e1 × e2| is twice the triangle area, so summing raw cross products
        // weights each face by its area.
        let c = face_cross(vertices, t);
        for &i in t {
            math::add_assign(&mut acc[i], c);
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = math::norm(n);
            if len > 0.0 {
                math::scale(n, 1.0 / len)
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

#[inline]
fn face_cross(vertices: &[Vec3], t: &[usize; 3]) -> Vec3 {
    let p0 = vertices[t[0]];
    math::cross(math::sub(vertices[t[1]], p0), math::sub(vertices[t[2]], p0))
}

/// Adjoint of [`vertex_normals`]: maps gradients on the unit normals to
/// gradients on vertex positions.
pub fn vertex_normals_backward(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    grad_normals: &[Vec3],
) -> Vec<Vec3> {
    let mut sums = vec![[0.0; 3]; vertices.len()];
    for t in triangles {
        let c = face_cross(vertices, t);
        for &i in t {
            math::add_assign(&mut sums[i], c);
        }
    }
    // Gradient with respect to each unnormalized sum.
    let grad_sums: Vec<Vec3> = sums
        .iter()
        .zip(grad_normals)
        .map(|(&s, &g)| {
            let len = math::norm(s);
            if len == 0.0 {
                return [0.0; 3];
            }
            let n = math::scale(s, 1.0 / len);
            math::scale(math::sub(g, math::scale(n, math::dot(n, g))), 1.0 / len)
        })
        .collect();
    let mut out = vec![[0.0; 3]; vertices.len()];
    for t in triangles {
        let mut gc = [0.0; 3];
        for &i in t {
            math::add_assign(&mut gc, grad_sums[i]);
        }
        let p0 = vertices[t[0]];
        let e1 = math::sub(vertices[t[1]], p0);
        let e2 = math::sub(vertices[t[2]], p0);
        let g1 = math::cross(e2, gc);
        let g2 = math::cross(gc, e1);
        math::add_assign(&mut out[t[1]], g1);
        math::add_assign(&mut out[t[2]], g2);
        math::axpy(&mut out[t[0]], -1.0, math::add(g1, g2));
    }
    out
}

/// Symmetric one-ring adjacency from triangle edges; each list is sorted.
pub fn laplacian_adjacency(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); mesh.vertices.len()];
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Bilinear UV→vertex sampling operator for a fixed mesh and map resolution.
///
/// This is linear in the map, and [`splat`](UvSampler::splat) is its exact
/// transpose.
#[derive(Clone, Debug)]
pub struct UvSampler {
    taps: Vec<BilinearTap>,
    width: usize,
    height: usize,
}

impl UvSampler {
    pub fn new(mesh: &TriMesh, width: usize, height: usize) -> Result<Self> {
        let uv = mesh.require_uv()?;
        Ok(Self {
            taps: uv
                .iter()
                .map(|&t| BilinearTap::new(t, width, height))
                .collect(),
            width,
            height,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[BilinearTap] {
        &self.taps
    }

    fn check(&self, map: &UvMap) -> Result<()> {
        if map.width() != self.width || map.height() != self.height {
            return Err(Error::Dimension(format!(
                "sampler built for {}x{}, map is {}x{}",
                self.width,
                self.height,
                map.width(),
                map.height()
            )));
        }
        Ok(())
    }

    /// Per-vertex values, flattened `vertex * channels + c`.
    pub fn sample(&self, map: &UvMap) -> Result<Vec<f64>> {
        self.check(map)?;
        let ch = map.channels();
        let mut out = vec![0.0; self.taps.len() * ch];
        for (tap, o) in self.taps.iter().zip(out.chunks_exact_mut(ch)) {
            tap.sample_into(map, o);
        }
        Ok(out)
    }

    pub fn sample3(&self, map: &UvMap) -> Result<Vec<Vec3>> {
        if map.channels() != 3 {
            return Err(Error::Dimension(format!(
                "expected 3-channel map, got {}",
                map.channels()
            )));
        }
        let flat = self.sample(map)?;
        Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Samples `mask ⊙ map` without forming the product map.
    pub fn sample3_masked(&self, map: &UvMap, mask: &UvMap) -> Result<Vec<Vec3>> {
        if map.channels() != 3 || mask.channels() != 1 {
            return Err(Error::Dimension(
                "expected a 3-channel map and a 1-channel mask".into(),
            ));
        }
        self.check(map)?;
        self.check(mask)?;
        let (d, m) = (map.data(), mask.data());
        Ok(self
            .taps
            .iter()
            .map(|tap| {
                let mut v = [0.0; 3];
                for (k, w) in tap.taps() {
                    let w = w * m[k];
                    if w != 0.0 {
                        for (c, vc) in v.iter_mut().enumerate() {
                            *vc += w * d[3 * k + c];
                        }
                    }
                }
                v
            })
            .collect())
    }

    /// Transpose of [`sample3`](Self::sample3): accumulates per-vertex values into `map`.
    pub fn splat3_into(&self, values: &[Vec3], map: &mut UvMap) {
        debug_assert_eq!(map.channels(), 3);
        for (tap, v) in self.taps.iter().zip(values) {
            tap.splat(map, v);
        }
    }

    pub fn splat3(&self, values: &[Vec3]) -> UvMap {
        let mut map = UvMap::zeros(self.width, self.height, 3);
        self.splat3_into(values, &mut map);
        map
    }
}

/// Samples `map` at each vertex UV, bilinear with clamp-to-edge. Output is
/// flattened `vertex * channels + c`.
pub fn uv_sample(map: &UvMap, mesh: &TriMesh) -> Result<Vec<f64>> {
    if !matches!(map.channels(), 1 | 3) {
        return Err(Error::Dimension(format!(
            "uv_sample expects 1 or 3 channels, got {}",
            map.channels()
        )));
    }
    UvSampler::new(mesh, map.width(), map.height())?.sample(map)
}

/// Reference-side data for deformation gradients: the inverse of each
/// triangle's local frame `[e1 e2 e3]`, where `e3 = (e1 × e2) / sqrt(|e1 × e2|)`
/// is the fourth-vertex offset.
#[derive(Clone, Debug)]
pub struct DeformationFrames {
    triangles: Vec<[usize; 3]>,
    inverse_frames: Vec<Mat3>,
}

fn local_frame(vertices: &[Vec3], t: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
    let p0 = vertices[t[0]];
    let e1 = math::sub(vertices[t[1]], p0);
    let e2 = math::sub(vertices[t[2]], p0);
    let c = math::cross(e1, e2);
    let len = math::norm(c);
    let e3 = if len > 0.0 {
        math::scale(c, 1.0 / len.sqrt())
    } else {
        [0.0; 3]
    };
    (e1, e2, e3)
}

impl DeformationFrames {
    pub fn new(reference: &TriMesh) -> Result<Self> {
        let mut inverse_frames = Vec::with_capacity(reference.triangles.len());
        for (i, t) in reference.triangles.iter().enumerate() {
            let (e1, e2, e3) = local_frame(&reference.vertices, t);
            let area2 = math::norm(math::cross(e1, e2));
            if !(area2 > 1e-12 * math::norm(e1) * math::norm(e2)) {
                return Err(Error::DegenerateTriangle(i));
            }
            let inv = math::inverse(&math::from_columns(e1, e2, e3))
                .ok_or(Error::DegenerateTriangle(i))?;
            inverse_frames.push(inv);
        }
        Ok(Self {
            triangles: reference.triangles.clone(),
            inverse_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Gradient of triangle `i` for the given deformed vertex positions.
    pub fn gradient(&self, deformed: &[Vec3], i: usize) -> Mat3 {
        let (e1, e2, e3) = local_frame(deformed, &self.triangles[i]);
        math::mat_mul(&math::from_columns(e1, e2, e3), &self.inverse_frames[i])
    }

    pub fn gradients(&self, deformed: &[Vec3]) -> Vec<Mat3> {
        (0..self.len())
            .map(|i| self.gradient(deformed, i))
            .collect()
    }

    /// Accumulates into `grad_vertices` the gradient of a scalar with respect to
    /// the deformed vertices of triangle `i`, given `grad_g = dL/dG_i`.
    pub fn gradient_backward(
        &self,
        deformed: &[Vec3],
        i: usize,
        grad_g: &Mat3,
        grad_vertices: &mut [Vec3],
    ) {
        let t = &self.triangles[i];
        // G = W · V⁻¹  ⇒  dL/dW = dL/dG · V⁻ᵀ
        let gw = math::mat_mul(grad_g, &math::transpose(&self.inverse_frames[i]));
        let col = |k: usize| [gw[0][k], gw[1][k], gw[2][k]];
        let (g1, g2, g3) = (col(0), col(1), col(2));

        let p0 = deformed[t[0]];
        let e1 = math::sub(deformed[t[1]], p0);
        let e2 = math::sub(deformed[t[2]], p0);
        let c = math::cross(e1, e2);
        let len = math::norm(c);
        let mut ge1 = g1;
        let mut ge2 = g2;
        if len > 0.0 {
            // e3 = c / |c|^(1/2)
            let gc = math::sub(
                math::scale(g3, 1.0 / len.sqrt()),
                math::scale(c, math::dot(c, g3) / (2.0 * len.powf(2.5))),
            );
            math::add_assign(&mut ge1, math::cross(e2, gc));
            math::add_assign(&mut ge2, math::cross(gc, e1));
        }
        math::add_assign(&mut grad_vertices[t[1]], ge1);
        math::add_assign(&mut grad_vertices[t[2]], ge2);
        math::axpy(&mut grad_vertices[t[0]], -1.0, math::add(ge1, ge2));
    }
}

/// Per-triangle deformation gradients mapping `reference` onto `deformed`.
pub fn deformation_gradients(reference: &TriMesh, deformed: &TriMesh) -> Result<Vec<Mat3>> {
    if !reference.same_topology(deformed) {
        return Err(Error::Dimension(
            "reference and deformed meshes differ in topology".into(),
        ));
    }
    Ok(DeformationFrames::new(reference)?.gradients(&deformed.vertices))
}

//! Second-order spherical-harmonics shading and pinhole projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Vec2, Vec3};

/// Real SH normalization constants for bands 0–2.
pub const SH_C0: f64 = 0.282_094_791_773_878_14; // 1 / (2 √π)
pub const SH_C1: f64 = 0.488_602_511_902_919_9; // √(3 / 4π)
pub const SH_C2: f64 = 1.092_548_430_592_079_2; // √(15 / 4π)
pub const SH_C3: f64 = 0.315_391_565_252_520_05; // √(5 / 16π)
pub const SH_C4: f64 = 0.546_274_215_296_039_6; // √(15 / 16π)

pub const SH_BANDS: usize = 9;

/// 27 lighting coefficients, laid out `[channel][band]` with 9 bands per RGB channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShCoeffs(pub [f64; 27]);

impl Default for ShCoeffs {
    fn default() -> Self {
        Self([0.0; 27])
    }
}

impl ShCoeffs {
    #[inline]
    pub fn get(&self, channel: usize, band: usize) -> f64 {
        self.0[channel * SH_BANDS + band]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, band: usize, v: f64) {
        self.0[channel * SH_BANDS + band] = v;
    }

    /// Lighting that is identical across channels.
    pub fn monochrome(bands: [f64; SH_BANDS]) -> Self {
        let mut out = Self::default();
        for c in 0..3 {
            for (b, &v) in bands.iter().enumerate() {
                out.set(c, b, v);
            }
        }
        out
    }

    /// Ambient lighting under which shading reproduces `level × albedo`.
    pub fn ambient(level: f64) -> Self {
        let mut bands = [0.0; SH_BANDS];
        bands[0] = level / SH_C0;
        Self::monochrome(bands)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Basis in the order `Y00, Y1−1, Y10, Y11, Y2−2, Y2−1, Y20, Y21, Y22`.
/// `normal` must be unit length.
pub fn sh_basis(normal: Vec3) -> Result<[f64; SH_BANDS]> {
    let len = crate::math::norm(normal);
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitNormal(len));
    }
    Ok(sh_basis_unchecked(normal))
}

#[inline]
pub fn sh_basis_unchecked(n: Vec3) -> [f64; SH_BANDS] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Jacobian rows `∂Y_b/∂(x, y, z)` of the polynomial basis.
#[inline]
pub fn sh_basis_jacobian(n: Vec3) -> [Vec3; SH_BANDS] {
    let [x, y, z] = n;
    [
        [0.0, 0.0, 0.0],
        [0.0, SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [SH_C1, 0.0, 0.0],
        [SH_C2 * y, SH_C2 * x, 0.0],
        [0.0, SH_C2 * z, SH_C2 * y],
        [0.0, 0.0, 6.0 * SH_C3 * z],
        [SH_C2 * z, 0.0, SH_C2 * x],
        [2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0],
    ]
}

/// Per-channel irradiance `Σ_b γ[c][b]·Y_b` for a precomputed basis.
#[inline]
pub fn irradiance(basis: &[f64; SH_BANDS], gamma: &ShCoeffs) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..SH_BANDS).map(|b| gamma.get(c, b) * basis[b]).sum();
    }
    out
}

/// Lambertian SH radiance: `albedo_c · Σ_b γ[c][b]·Y_b(normal)`.
pub fn shade(albedo: [f64; 3], normal: Vec3, gamma: &ShCoeffs) -> Result<[f64; 3]> {
    let e = irradiance(&sh_basis(normal)?, gamma);
    Ok([albedo[0] * e[0], albedo[1] * e[1], albedo[2] * e[2]])
}

/// Pinhole camera looking down +z; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for Camera {
    /// A 224×224 view in which a 200 mm wide face at 600 mm spans about 70% of the frame.
    fn default() -> Self {
        Self {
            focal: 470.4,
            cx: 112.0,
            cy: 112.0,
            width: 224,
            height: 224,
            near: 10.0,
            far: 10_000.0,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Invalid(format!(
                "focal length must be positive, got {}",
                self.focal
            )));
        }
        if !(self.near < self.far) || self.near <= 0.0 {
            return Err(Error::Invalid(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image size must be positive".into()));
        }
        Ok(())
    }

    /// Same framing at a different image size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal: self.focal * sx,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }

    #[inline]
    pub fn project_point(&self, p: Vec3) -> Vec2 {
        [
            self.focal * p[0] / p[2] + self.cx,
            self.focal * p[1] / p[2] + self.cy,
        ]
    }

    /// Adjoint of [`project_point`](Self::project_point) for an upstream gradient on `(u, v)`.
    #[inline]
    pub fn project_backward(&self, p: Vec3, g: Vec2) -> Vec3 {
        let iz = 1.0 / p[2];
        let f = self.focal * iz;
        [f * g[0], f * g[1], -f * iz * (p[0] * g[0] + p[1] * g[1])]
    }
}

/// Projects camera-frame points to pixels; returns `(pixels, depths)`.
pub fn project(points: &[Vec3], cam: &Camera) -> Result<(Vec<Vec2>, Vec<f64>)> {
    let bad: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| !(p[2] > cam.near))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::BehindNearPlane(bad));
    }
    Ok((
        points.iter().map(|&p| cam.project_point(p)).collect(),
        points.iter().map(|p| p[2]).collect(),
    ))
}

/// Gathers `indices` from `vertices` and projects them.
pub fn project_landmarks(vertices: &[Vec3], indices: &[usize], cam: &Camera) -> Result<Vec<Vec2>> {
    let gathered = indices
        .iter()
        .map(|&i| {
            vertices.get(i).copied().ok_or(Error::IndexOutOfRange {
                index: i,
                len: vertices.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(project(&gathered, cam)?.0)
}

//! Dense row-major scalar grids used for images and UV-space maps.
//!
//! Texel `(x, y)` covers `[x, x+1) × [y, y+1)` in pixel units, so its center
//! sits at UV coordinate `((x + 0.5) / width, (y + 0.5) / height)`. Row 0 is
//! `v = 0`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// A map in the face model's UV parameterization.
pub type UvMap = Grid;
/// An image in camera pixel space.
pub type Image = Grid;

impl Grid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width >= 1 && height >= 1 && channels >= 1, "empty grid");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "grid dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "grid {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, c)` at every entry.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    g.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        g
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Grid, alpha: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Elementwise product with a single-channel `mask`, broadcast over channels.
    pub fn masked(&self, mask: &Grid) -> Grid {
        debug_assert_eq!(mask.channels, 1);
        debug_assert_eq!((mask.width, mask.height), (self.width, self.height));
        let c = self.channels;
        let mut out = self.clone();
        for (px, m) in out.data.chunks_exact_mut(c).zip(&mask.data) {
            for v in px {
                *v *= m;
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Separable Gaussian blur with clamp-to-edge borders. The kernel is
    /// truncated at `ceil(3 sigma)` and normalized to unit sum.
    pub fn gaussian_blur(&self, sigma: f64) -> Grid {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let (w, h, ch) = (self.width as isize, self.height as isize, self.channels);
        let mut tmp = Grid::zeros(self.width, self.height, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        let sx = (x + k as isize - radius).clamp(0, w - 1);
                        acc += kv * self.get(sx as usize, y as usize, c);
                    }
                    tmp.set(x as usize, y as usize, c, acc);
                }
            }
        }
        let mut out = Grid::zeros(self.width, self.height, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        let sy = (y + k as isize - radius).clamp(0, h - 1);
                        acc += kv * tmp.get(x as usize, sy as usize, c);
                    }
                    out.set(x as usize, y as usize, c, acc);
                }
            }
        }
        out
    }
}

/// Precomputed bilinear footprint of one UV location on a `width × height`
/// grid, clamp-to-edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
}

impl BilinearTap {
    pub fn new(uv: [f64; 2], width: usize, height: usize) -> Self {
        let px = uv[0] * width as f64 - 0.5;
        let py = uv[1] * height as f64 - 0.5;
        let fl_x = px.floor();
        let fl_y = py.floor();
        let clamp_x = |i: f64| (i.max(0.0) as usize).min(width - 1);
        let clamp_y = |i: f64| (i.max(0.0) as usize).min(height - 1);
        Self {
            x0: clamp_x(fl_x),
            x1: clamp_x(fl_x + 1.0),
            y0: clamp_y(fl_y),
            y1: clamp_y(fl_y + 1.0),
            fx: px - fl_x,
            fy: py - fl_y,
            width,
            height,
        }
    }

    /// The four `(texel index, weight)` pairs. Texel index is `y * width + x`.
    #[inline]
    pub fn taps(&self) -> [(usize, f64); 4] {
        let w = self.width;
        [
            (self.y0 * w + self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0 * w + self.x1, self.fx * (1.0 - self.fy)),
            (self.y1 * w + self.x0, (1.0 - self.fx) * self.fy),
            (self.y1 * w + self.x1, self.fx * self.fy),
        ]
    }

    #[inline]
    pub fn sample(&self, grid: &Grid, c: usize) -> f64 {
        let ch = grid.channels;
        self.taps()
            .iter()
            .map(|&(i, wt)| wt * grid.data[i * ch + c])
            .sum()
    }

    /// Samples every channel into `out`.
    #[inline]
    pub fn sample_into(&self, grid: &Grid, out: &mut [f64]) {
        let ch = grid.channels;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, wt) in self.taps() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += wt * grid.data[i * ch + c];
            }
        }
    }

    /// Adjoint of [`sample_into`](Self::sample_into): accumulates `values` into the footprint.
    #[inline]
    pub fn splat(&self, grid: &mut Grid, values: &[f64]) {
        let ch = grid.channels;
        for (i, wt) in self.taps() {
            for (c, v) in values.iter().enumerate() {
                grid.data[i * ch + c] += wt * v;
            }
        }
    }

    /// Derivative of the sampled value of channel `c` with respect to `(u, v)`.
    /// Zero along an axis where the footprint collapsed onto one edge texel.
    #[inline]
    pub fn sample_duv(&self, grid: &Grid, c: usize) -> [f64; 2] {
        let ch = grid.channels;
        let w = self.width;
        let at = |x: usize, y: usize| grid.data[(y * w + x) * ch + c];
        let v00 = at(self.x0, self.y0);
        let v10 = at(self.x1, self.y0);
        let v01 = at(self.x0, self.y1);
        let v11 = at(self.x1, self.y1);
        let dpx = (v10 - v00) * (1.0 - self.fy) + (v11 - v01) * self.fy;
        let dpy = (v01 - v00) * (1.0 - self.fx) + (v11 - v10) * self.fx;
        [dpx * self.width as f64, dpy * self.height as f64]
    }
}

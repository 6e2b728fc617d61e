//! The `Grid` value type and bilinear resampling.

use crate::error::{Error, Result};

/// A channels x height x width block of finite `f64` values.
///
/// Grids are immutable once constructed; every operation returns a new grid.
/// Storage is channel-major: element `(c, y, x)` lives at `c*h*w + y*w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    /// Builds a grid, checking length and finiteness.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::param("grid shape", "all dimensions must be nonzero"));
        }
        let want = channels * height * width;
        if data.len() != want {
            return Err(Error::shape(
                "Grid::new",
                format!("{want} values for {channels}x{height}x{width}"),
                format!("{}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Grid::new at flat index {i}")));
        }
        Ok(Grid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Grid filled with one finite value.
    pub fn constant(channels: usize, height: usize, width: usize, v: f64) -> Result<Self> {
        Grid::new(channels, height, width, vec![v; channels * height * width])
    }

    /// Builds element-wise from `(c, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Grid::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One channel plane as a flat `height*width` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies a contiguous channel range into a new grid.
    pub fn extract_channels(&self, start: usize, count: usize) -> Result<Grid> {
        if start + count > self.channels || count == 0 {
            return Err(Error::param(
                "extract_channels",
                format!(
                    "range {start}..{} out of {} channels",
                    start + count,
                    self.channels
                ),
            ));
        }
        let n = self.height * self.width;
        Grid::new(
            count,
            self.height,
            self.width,
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Element-wise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Grid> {
        Grid::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mirrors every row left-to-right.
    pub fn flip_horizontal(&self) -> Grid {
        let mut out = Grid::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = self.at(c, y, x);
                    out.data[(c * self.height + y) * self.width + (self.width - 1 - x)] = v;
                }
            }
        }
        out
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One axis of bilinear sampling: source position for a destination index
/// under the pixel-center convention, clamped to the valid range.
#[inline]
fn sample_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize to `out_h` x `out_w`, channels preserved.
///
/// Sample positions follow the pixel-center convention
/// `src = (dst + 0.5) * in/out - 0.5`, clamped to the image. Interpolation
/// weights are convex, so outputs never leave the per-channel value range.
pub fn resize_bilinear(g: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("resize_bilinear", "output size must be nonzero"));
    }
    let (c_n, in_h, in_w) = g.shape();
    let mut out = Grid::zeros(c_n, out_h, out_w);
    for c in 0..c_n {
        let plane = g.channel(c);
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_axis(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_axis(ox, in_w, out_w);
                // a + t*(b - a) keeps constant inputs bit-exact.
                let top = {
                    let a = plane[y0 * in_w + x0];
                    a + fx * (plane[y0 * in_w + x1] - a)
                };
                let bot = {
                    let a = plane[y1 * in_w + x0];
                    a + fx * (plane[y1 * in_w + x1] - a)
                };
                out.data[(c * out_h + oy) * out_w + ox] = top + fy * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`]: scatters an upstream gradient of the
/// resized grid back onto a source of size `in_h` x `in_w`.
pub fn resize_bilinear_adjoint(dy: &Grid, in_h: usize, in_w: usize) -> Grid {
    let (c_n, out_h, out_w) = dy.shape();
    let mut dx = Grid::zeros(c_n, in_h, in_w);
    for c in 0..c_n {
        for oy in 0..out_h {
            let (y0, y1, fy) = sample_axis(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = sample_axis(ox, in_w, out_w);
                let g = dy.at(c, oy, ox);
                let base = c * in_h * in_w;
                dx.data[base + y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dx.data[base + y0 * in_w + x1] += g * (1.0 - fy) * fx;
                dx.data[base + y1 * in_w + x0] += g * fy * (1.0 - fx);
                dx.data[base + y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

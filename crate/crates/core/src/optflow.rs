//! Pyramidal iterative Lucas–Kanade optical flow.
//!
//! One tracking core serves both phases: `dense_flow` evaluates it on a
//! regular grid during training, `sparse_flow` at the sampled points online.
//! Coordinates are pixel centers, x rightward, y downward.

use std::io::{self, Write};

use thiserror::Error;

use crate::frame_io::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("empty point list")]
    EmptyPoints,
    #[error("image {width}x{height} too small for {levels} pyramid levels with window {window}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        levels: usize,
        window: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("frame span must be positive (from {0} to {1})")]
    BadSpan(u64, u64),
}

/// Displacement in pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct FlowVector {
    pub dx: f64,
    pub dy: f64,
}

impl FlowVector {
    pub const ZERO: FlowVector = FlowVector { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        FlowVector { dx, dy }
    }

    #[inline]
    pub fn dot(self, other: FlowVector) -> f64 {
        self.dx * other.dx + self.dy * other.dy
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }

    #[inline]
    pub fn scale(self, k: f64) -> FlowVector {
        FlowVector::new(self.dx * k, self.dy * k)
    }
}

/// Single-channel `f32` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Image { width, height, data }
    }

    pub fn from_frame(frame: &Frame) -> Self {
        Image::new(frame.width, frame.height, frame.luma.clone())
    }

    fn half(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let r0 = &self.data[(2 * y) * self.width..];
            let r1 = &self.data[(2 * y + 1) * self.width..];
            for x in 0..w {
                data.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
            }
        }
        Image::new(w, h, data)
    }

    /// Samples a `(2*half+1)^2` patch centered at subpixel `(cx, cy)` with
    /// bilinear interpolation; coordinates are clamped at the border.
    fn sample_patch(&self, cx: f32, cy: f32, half: isize, out: &mut [f32]) {
        let side = (2 * half + 1) as usize;
        debug_assert_eq!(out.len(), side * side);
        let x0 = cx.floor();
        let y0 = cy.floor();
        let fx = cx - x0;
        let fy = cy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let (w, h) = (self.width as isize, self.height as isize);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        if x0 - half >= 0 && y0 - half >= 0 && x0 + half + 1 < w && y0 + half + 1 < h {
            let stride = self.width;
            let mut k = 0;
            for j in -half..=half {
                let row = ((y0 + j) as usize) * stride;
                let base = row + (x0 - half) as usize;
                let top = &self.data[base..base + side + 1];
                let bot = &self.data[base + stride..base + stride + side + 1];
                for i in 0..side {
                    out[k] = w00 * top[i] + w10 * top[i + 1] + w01 * bot[i] + w11 * bot[i + 1];
                    k += 1;
                }
            }
        } else {
            let clamp_x = |x: isize| x.clamp(0, w - 1) as usize;
            let clamp_y = |y: isize| y.clamp(0, h - 1) as usize;
            let mut k = 0;
            for j in -half..=half {
                let ya = clamp_y(y0 + j);
                let yb = clamp_y(y0 + j + 1);
                for i in -half..=half {
                    let xa = clamp_x(x0 + i);
                    let xb = clamp_x(x0 + i + 1);
                    let d = &self.data;
                    out[k] = w00 * d[ya * self.width + xa]
                        + w10 * d[ya * self.width + xb]
                        + w01 * d[yb * self.width + xa]
                        + w11 * d[yb * self.width + xb];
                    k += 1;
                }
            }
        }
    }
}

/// Coarse-to-fine image pyramid; level 0 is the original.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Image>,
    pub index: u64,
}

impl Pyramid {
    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }
}

/// Builds `levels` levels by 2x2 box averaging and subsampling. The image
/// must be at least `2^(levels-1) * window` pixels on its short side.
pub fn build_pyramid(frame: &Frame, levels: usize, window: usize) -> Result<Pyramid, FlowError> {
    if levels == 0 {
        return Err(FlowError::InvalidParams("pyramid levels must be >= 1".into()));
    }
    let need = (1usize << (levels - 1)) * window;
    if frame.width < need || frame.height < need {
        return Err(FlowError::ImageTooSmall {
            width: frame.width,
            height: frame.height,
            levels,
            window,
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(Image::from_frame(frame));
    for _ in 1..levels {
        let next = out.last().unwrap().half();
        out.push(next);
    }
    Ok(Pyramid {
        levels: out,
        index: frame.index,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LkParams {
    /// Half-width of the integration window in pixels.
    pub window_radius: usize,
    pub levels: usize,
    pub max_iterations: usize,
    /// Stop iterating when the update is shorter than this (pixels).
    pub epsilon: f32,
    /// Minimum smaller eigenvalue of the per-pixel averaged structure tensor.
    pub min_eigen: f32,
    /// Tracks longer than this (pixels over the frame pair) are invalid.
    pub max_displacement: f32,
}

impl Default for LkParams {
    fn default() -> Self {
        LkParams {
            window_radius: 7,
            levels: 3,
            max_iterations: 20,
            epsilon: 0.01,
            min_eigen: 1e-4,
            max_displacement: 49.0,
        }
    }
}

impl LkParams {
    pub fn window(&self) -> usize {
        2 * self.window_radius + 1
    }

    /// Distance from the border a point needs for its full window (plus the
    /// gradient stencil) to stay inside the image.
    pub fn margin(&self) -> f32 {
        self.window_radius as f32 + 1.0
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.window_radius == 0 || self.levels == 0 || self.max_iterations == 0 {
            return Err(FlowError::InvalidParams(
                "window radius, levels and iterations must be >= 1".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.min_eigen >= 0.0 && self.max_displacement > 0.0) {
            return Err(FlowError::InvalidParams("epsilon, min_eigen, max_displacement".into()));
        }
        Ok(())
    }
}

/// Per-point flow between two frames, normalized to per-frame units.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFlow {
    pub points: Vec<[f32; 2]>,
    pub vectors: Vec<FlowVector>,
    pub valid: Vec<bool>,
    pub span: (u64, u64),
}

impl SparseFlow {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "x,y,dx,dy,valid")?;
        for ((p, v), ok) in self.points.iter().zip(&self.vectors).zip(&self.valid) {
            writeln!(w, "{},{},{},{},{}", p[0], p[1], v.dx, v.dy, *ok as u8)?;
        }
        Ok(())
    }
}

/// Regular grid of cells; each cell is represented by its center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub offset: usize,
    pub cols: usize,
    pub rows: usize,
}

impl GridGeometry {
    pub fn new(width: usize, height: usize, stride: usize, offset: usize) -> Result<Self, FlowError> {
        if stride == 0 {
            return Err(FlowError::InvalidParams("stride must be >= 1".into()));
        }
        let cols = width.saturating_sub(offset) / stride;
        let rows = height.saturating_sub(offset) / stride;
        if cols == 0 || rows == 0 {
            return Err(FlowError::InvalidParams(format!(
                "stride {stride} with offset {offset} leaves no cells in {width}x{height}"
            )));
        }
        Ok(GridGeometry {
            width,
            height,
            stride,
            offset,
            cols,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel coordinate of the center of column `i` (or row, same formula).
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.offset as f64 + (i as f64 + 0.5) * self.stride as f64 - 0.5
    }

    pub fn node(&self, col: usize, row: usize) -> [f64; 2] {
        [self.center(col), self.center(row)]
    }

    /// Cell containing pixel coordinate `(x, y)`, if any.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x + 0.5 - self.offset as f64) / self.stride as f64;
        let fy = (y + 0.5 - self.offset as f64) / self.stride as f64;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (c, r) = (fx.floor() as usize, fy.floor() as usize);
        (c < self.cols && r < self.rows).then_some((c, r))
    }

    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| self.node(c, r)))
    }
}

/// Flow evaluated at every grid node, normalized to per-frame units.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlowField {
    pub geometry: GridGeometry,
    /// Row-major; invalid tracks are stored as zero.
    pub vectors: Vec<FlowVector>,
    pub valid: Vec<bool>,
    pub span: (u64, u64),
}

impl DenseFlowField {
    pub fn get(&self, col: usize, row: usize) -> FlowVector {
        self.vectors[row * self.geometry.cols + col]
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "x,y,dx,dy,valid")?;
        for (i, p) in self.geometry.nodes().enumerate() {
            let v = self.vectors[i];
            writeln!(w, "{},{},{},{},{}", p[0], p[1], v.dx, v.dy, self.valid[i] as u8)?;
        }
        Ok(())
    }
}

struct Scratch {
    prev_ext: Vec<f32>,
    ival: Vec<f32>,
    ix: Vec<f32>,
    iy: Vec<f32>,
    next: Vec<f32>,
}

impl Scratch {
    fn new(radius: usize) -> Self {
        let side = 2 * radius + 1;
        let ext = side + 2;
        Scratch {
            prev_ext: vec![0.0; ext * ext],
            ival: vec![0.0; side * side],
            ix: vec![0.0; side * side],
            iy: vec![0.0; side * side],
            next: vec![0.0; side * side],
        }
    }
}

/// Tracks one point; returns the raw displacement over the frame pair.
fn track_point(prev: &Pyramid, next: &Pyramid, x: f32, y: f32, p: &LkParams, s: &mut Scratch) -> Option<[f32; 2]> {
    let r = p.window_radius as isize;
    let side = 2 * p.window_radius + 1;
    let ext = side + 2;
    let npix = (side * side) as f32;
    let levels = p.levels.min(prev.levels.len()).min(next.levels.len());
    let (w0, h0) = (prev.width() as f32, prev.height() as f32);
    let m = p.margin();
    if x < m || y < m || x > w0 - 1.0 - m || y > h0 - 1.0 - m {
        return None;
    }

    let mut g = [0.0f32; 2];
    for level in (0..levels).rev() {
        let scale = 1.0 / (1u32 << level) as f32;
        let px = (x + 0.5) * scale - 0.5;
        let py = (y + 0.5) * scale - 0.5;
        let pi = &prev.levels[level];
        let ni = &next.levels[level];

        pi.sample_patch(px, py, r + 1, &mut s.prev_ext);
        let (mut gxx, mut gxy, mut gyy) = (0.0f32, 0.0f32, 0.0f32);
        let mut k = 0;
        for j in 1..=side {
            let row = j * ext;
            for i in 1..=side {
                let c = row + i;
                let gx = 0.5 * (s.prev_ext[c + 1] - s.prev_ext[c - 1]);
                let gy = 0.5 * (s.prev_ext[c + ext] - s.prev_ext[c - ext]);
                s.ival[k] = s.prev_ext[c];
                s.ix[k] = gx;
                s.iy[k] = gy;
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
                k += 1;
            }
        }
        gxx /= npix;
        gxy /= npix;
        gyy /= npix;
        let tr = gxx + gyy;
        let disc = ((gxx - gyy) * (gxx - gyy) + 4.0 * gxy * gxy).sqrt();
        let min_eig = 0.5 * (tr - disc);
        let det = gxx * gyy - gxy * gxy;
        if min_eig < p.min_eigen || det <= 0.0 {
            if level == 0 {
                return None;
            }
            g = [2.0 * g[0], 2.0 * g[1]];
            continue;
        }

        let mut d = [0.0f32; 2];
        for _ in 0..p.max_iterations {
            ni.sample_patch(px + g[0] + d[0], py + g[1] + d[1], r, &mut s.next);
            let (mut bx, mut by) = (0.0f32, 0.0f32);
            for k in 0..side * side {
                let it = s.next[k] - s.ival[k];
                bx += it * s.ix[k];
                by += it * s.iy[k];
            }
            bx /= npix;
            by /= npix;
            let ux = -(gyy * bx - gxy * by) / det;
            let uy = -(gxx * by - gxy * bx) / det;
            if !(ux.is_finite() && uy.is_finite()) {
                return None;
            }
            d[0] += ux;
            d[1] += uy;
            if ux * ux + uy * uy < p.epsilon * p.epsilon {
                break;
            }
        }
        if level > 0 {
            g = [2.0 * (g[0] + d[0]), 2.0 * (g[1] + d[1])];
        } else {
            g = [g[0] + d[0], g[1] + d[1]];
        }
    }

    let (ex, ey) = (x + g[0], y + g[1]);
    let in_bounds = ex >= m && ey >= m && ex <= w0 - 1.0 - m && ey <= h0 - 1.0 - m;
    let len = (g[0] * g[0] + g[1] * g[1]).sqrt();
    (in_bounds && len.is_finite() && len <= p.max_displacement).then_some(g)
}

fn check_pair(prev: &Pyramid, next: &Pyramid) -> Result<u64, FlowError> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(FlowError::DimensionMismatch(prev.width(), prev.height(), next.width(), next.height()));
    }
    if next.index <= prev.index {
        return Err(FlowError::BadSpan(prev.index, next.index));
    }
    Ok(next.index - prev.index)
}

/// Sparse flow on prebuilt pyramids.
pub fn sparse_flow_pyr(prev: &Pyramid, next: &Pyramid, points: &[[f32; 2]], params: &LkParams) -> Result<SparseFlow, FlowError> {
    params.validate()?;
    if points.is_empty() {
        return Err(FlowError::EmptyPoints);
    }
    let span = check_pair(prev, next)?;
    let inv = 1.0 / span as f64;
    let mut scratch = Scratch::new(params.window_radius);
    let mut vectors = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for pt in points {
        match track_point(prev, next, pt[0], pt[1], params, &mut scratch) {
            Some(d) => {
                vectors.push(FlowVector::new(d[0] as f64 * inv, d[1] as f64 * inv));
                valid.push(true);
            }
            None => {
                vectors.push(FlowVector::ZERO);
                valid.push(false);
            }
        }
    }
    Ok(SparseFlow {
        points: points.to_vec(),
        vectors,
        valid,
        span: (prev.index, next.index),
    })
}

/// Sparse Lucas–Kanade flow at `points` between two frames.
pub fn sparse_flow(prev: &Frame, next: &Frame, points: &[[f32; 2]], params: &LkParams) -> Result<SparseFlow, FlowError> {
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(FlowError::DimensionMismatch(prev.width, prev.height, next.width, next.height));
    }
    if points.is_empty() {
        return Err(FlowError::EmptyPoints);
    }
    let a = build_pyramid(prev, params.levels, params.window())?;
    let b = build_pyramid(next, params.levels, params.window())?;
    sparse_flow_pyr(&a, &b, points, params)
}

/// Dense flow on prebuilt pyramids, evaluated at every node of `geometry`.
pub fn dense_flow_pyr(prev: &Pyramid, next: &Pyramid, geometry: GridGeometry, params: &LkParams) -> Result<DenseFlowField, FlowError> {
    if geometry.width != prev.width() || geometry.height != prev.height() {
        return Err(FlowError::DimensionMismatch(geometry.width, geometry.height, prev.width(), prev.height()));
    }
    let points: Vec<[f32; 2]> = geometry.nodes().map(|p| [p[0] as f32, p[1] as f32]).collect();
    let sparse = sparse_flow_pyr(prev, next, &points, params)?;
    Ok(DenseFlowField {
        geometry,
        vectors: sparse.vectors,
        valid: sparse.valid,
        span: sparse.span,
    })
}

/// Dense flow on a regular grid with the given stride (zero offset).
pub fn dense_flow(prev: &Frame, next: &Frame, stride: usize, params: &LkParams) -> Result<DenseFlowField, FlowError> {
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(FlowError::DimensionMismatch(prev.width, prev.height, next.width, next.height));
    }
    let geometry = GridGeometry::new(prev.width, prev.height, stride, 0)?;
    let a = build_pyramid(prev, params.levels, params.window())?;
    let b = build_pyramid(next, params.levels, params.window())?;
    dense_flow_pyr(&a, &b, geometry, params)
}

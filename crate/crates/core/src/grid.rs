//! Dense containers shared by every stage of the pipeline.
//!
//! All grids are row-major. A [`CostVolume`] is laid out in `(y, x, d, f)`
//! order so the disparity and feature axes of one pixel are contiguous.

use crate::error::{Error, Result};

/// Grayscale or multi-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image must be non-empty, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite intensity {v}")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::gray(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Shape of a cost volume: height, width, disparities, feature channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub f: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, d: usize, f: usize) -> Self {
        Shape { h, w, d, f }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.d * self.f
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Number of entries belonging to one pixel.
    pub fn per_pixel(&self) -> usize {
        self.d * self.f
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, d: usize, f: usize) -> usize {
        ((y * self.w + x) * self.d + d) * self.f + f
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.h, self.w, self.d, self.f)
    }
}

/// Matching costs `C(y, x, d, f)`; lower is a better match.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    shape: Shape,
    data: Vec<f64>,
}

impl CostVolume {
    pub fn new(h: usize, w: usize, d: usize, f: usize, fill: f64) -> Result<Self> {
        let shape = Shape::new(h, w, d, f);
        check_dims(shape)?;
        Ok(CostVolume {
            shape,
            data: vec![fill; shape.len()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::new(shape.h, shape.w, shape.d, shape.f, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "volume {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(CostVolume { shape, data })
    }

    pub fn from_fn(shape: Shape, f: impl Fn(usize, usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(shape)?;
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.h {
            for x in 0..shape.w {
                for d in 0..shape.d {
                    for c in 0..shape.f {
                        data.push(f(y, x, d, c));
                    }
                }
            }
        }
        Ok(CostVolume { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn get(&self, y: usize, x: usize, d: usize, f: usize) -> f64 {
        self.data[self.shape.index(y, x, d, f)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, d: usize, f: usize, value: f64) {
        let i = self.shape.index(y, x, d, f);
        self.data[i] = value;
    }

    /// All `D·F` entries of pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let n = self.shape.per_pixel();
        let start = (y * self.shape.w + x) * n;
        &self.data[start..start + n]
    }

    /// Copies out the `H×W×F` plane at disparity `d`.
    pub fn slice_d(&self, d: usize) -> Result<CostSlice> {
        if d >= self.shape.d {
            return Err(Error::Index {
                index: d,
                len: self.shape.d,
            });
        }
        let s = self.shape;
        let mut data = Vec::with_capacity(s.h * s.w * s.f);
        for p in 0..s.pixels() {
            let base = (p * s.d + d) * s.f;
            data.extend_from_slice(&self.data[base..base + s.f]);
        }
        Ok(CostSlice {
            h: s.h,
            w: s.w,
            f: s.f,
            data,
        })
    }

    /// Reassembles a volume from its disparity planes, in order.
    pub fn from_slices(slices: &[CostSlice]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Dimension("no slices to assemble".into()))?;
        let shape = Shape::new(first.h, first.w, slices.len(), first.f);
        if slices
            .iter()
            .any(|s| (s.h, s.w, s.f) != (first.h, first.w, first.f))
        {
            return Err(Error::Shape("slices differ in shape".into()));
        }
        let mut vol = CostVolume::zeros(shape)?;
        for (d, slice) in slices.iter().enumerate() {
            for p in 0..shape.pixels() {
                let dst = (p * shape.d + d) * shape.f;
                vol.data[dst..dst + shape.f]
                    .copy_from_slice(&slice.data[p * shape.f..(p + 1) * shape.f]);
            }
        }
        Ok(vol)
    }

    /// Multiplies every entry by `k`.
    pub fn scaled(&self, k: f64) -> CostVolume {
        CostVolume {
            shape: self.shape,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Averages the feature axis down to a single channel.
    pub fn mean_features(&self) -> CostVolume {
        let s = self.shape;
        if s.f == 1 {
            return self.clone();
        }
        let inv = 1.0 / s.f as f64;
        let data = self
            .data
            .chunks_exact(s.f)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        CostVolume {
            shape: Shape::new(s.h, s.w, s.d, 1),
            data,
        }
    }

    /// Adjoint of [`CostVolume::mean_features`]: spreads a single-channel
    /// gradient evenly across `f` channels.
    pub fn spread_features(&self, f: usize) -> CostVolume {
        let s = self.shape;
        debug_assert_eq!(s.f, 1);
        let inv = 1.0 / f as f64;
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v * inv, f))
            .collect();
        CostVolume {
            shape: Shape::new(s.h, s.w, s.d, f),
            data,
        }
    }

    pub fn ensure_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape(format!(
                "{what}: expected {expected}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "non-finite cost {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

fn check_dims(shape: Shape) -> Result<()> {
    if shape.h == 0 || shape.w == 0 || shape.d == 0 || shape.f == 0 {
        return Err(Error::Dimension(format!(
            "all volume dimensions must be positive, got {shape}"
        )));
    }
    if shape.d < 2 {
        return Err(Error::Dimension(format!(
            "a cost volume needs at least two disparities, got {shape}"
        )));
    }
    Ok(())
}

/// One disparity plane of a cost volume, `H×W×F`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSlice {
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

impl CostSlice {
    pub fn get(&self, y: usize, x: usize, f: usize) -> f64 {
        self.data[(y * self.w + x) * self.f + f]
    }
}

/// Real-valued disparities with a per-pixel validity flag. Values under
/// invalid pixels are stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "disparity map must be non-empty, got {height}x{width}"
            )));
        }
        let n = height * width;
        if values.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "disparity map {height}x{width} needs {n} values and flags, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(DisparityMap {
            height,
            width,
            values,
            mask,
        })
    }

    /// A map where every pixel is valid.
    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(height, width, values, vec![true; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.mask[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy with validity further restricted to pixels where `keep` is set.
    pub fn restricted(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.mask.len() {
            return Err(Error::Shape("restriction mask size differs".into()));
        }
        let mask = self.mask.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        Self::new(self.height, self.width, self.values.clone(), mask)
    }

    /// Checks `0 <= value <= d_max - 1` on valid pixels.
    pub fn validate_range(&self, d_max: usize) -> Result<()> {
        let hi = d_max as f64 - 1.0;
        for (i, (&v, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if m && !(0.0..=hi).contains(&v) {
                return Err(Error::Numeric(format!(
                    "disparity {v} at pixel {i} outside [0, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// The four scan directions `r = (dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// `(0, 1)`: left to right.
    LeftToRight,
    /// `(0, -1)`: right to left.
    RightToLeft,
    /// `(1, 0)`: top to bottom.
    TopToBottom,
    /// `(-1, 0)`: bottom to top.
    BottomToTop,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::TopToBottom,
        Direction::BottomToTop,
    ];

    pub fn vector(self) -> (isize, isize) {
        match self {
            Direction::LeftToRight => (0, 1),
            Direction::RightToLeft => (0, -1),
            Direction::TopToBottom => (1, 0),
            Direction::BottomToTop => (-1, 0),
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Direction::LeftToRight | Direction::RightToLeft)
    }

    /// Number of independent scanlines in an `h×w` grid.
    pub fn line_count(self, h: usize, w: usize) -> usize {
        if self.is_horizontal() {
            h
        } else {
            w
        }
    }

    /// Length of each scanline in an `h×w` grid.
    pub fn line_len(self, h: usize, w: usize) -> usize {
        if self.is_horizontal() {
            w
        } else {
            h
        }
    }

    /// Flat pixel index of step `k` along scanline `line`, in path order.
    #[inline]
    pub fn pixel_at(self, h: usize, w: usize, line: usize, k: usize) -> usize {
        match self {
            Direction::LeftToRight => line * w + k,
            Direction::RightToLeft => line * w + (w - 1 - k),
            Direction::TopToBottom => k * w + line,
            Direction::BottomToTop => (h - 1 - k) * w + line,
        }
    }
}

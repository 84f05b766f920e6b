//! Dense grid types: images/feature maps, disparity fields, binary masks.

use crate::error::{check_same_hw, Error, Result};

/// H x W x C grid of real values in row-major `(y, x, c)` order.
///
/// Carries images (C = 3 or 1, values in `[0, 1]`) as well as feature maps
/// of arbitrary channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height >= 1 && width >= 1 && channels >= 1);
        Tensor3 {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a tensor from row-major data, rejecting non-finite values.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 1 || width < 1 || channels < 1 {
            return Err(Error::dimension("tensor dimensions must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dimension(format!(
                "expected {} values for a {}x{}x{} tensor, got {}",
                height * width * channels,
                height,
                width,
                channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dimension("tensor contains non-finite values"));
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor3::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    t.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        t
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

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Contiguous channel slice of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip(other, |a, b| a - b)
    }

    pub fn zip(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += s * other`.
    pub fn add_scaled_assign(&mut self, other: &Tensor3, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension("shape mismatch in add_scaled_assign"));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn clamp_unit(&self) -> Tensor3 {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirrors the tensor horizontally (x -> width-1-x).
    pub fn mirror_x(&self) -> Tensor3 {
        Tensor3::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }
}

/// Summation over one row of per-pixel values that gives the bitwise same
/// result when the row is reversed: values are paired symmetrically around
/// the row center before the running sum. Masked reductions use this so
/// mirrored fixtures produce identical losses.
pub(crate) fn sum_row_symmetric(row: &[f64]) -> f64 {
    let n = row.len();
    let mut s = 0.0;
    for i in 0..n / 2 {
        s += row[i] + row[n - 1 - i];
    }
    if n % 2 == 1 {
        s += row[n / 2];
    }
    s
}

/// Signed horizontal displacement field, in pixels.
///
/// The correspondence of pixel `(x, y)` in one view lies at
/// `(x + d(x, y), y)` in the opposite view.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DisparityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1);
        DisparityMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Result<Self> {
        DisparityMap::from_vec(height, width, vec![v; height * width])
    }

    /// Builds a disparity map, rejecting non-finite values and displacements
    /// of a full image width or more.
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height < 1 || width < 1 {
            return Err(Error::dimension("disparity dimensions must be >= 1"));
        }
        if values.len() != height * width {
            return Err(Error::dimension(format!(
                "expected {} disparity values, got {}",
                height * width,
                values.len()
            )));
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::dimension("disparity contains non-finite values"));
            }
            if v.abs() >= width as f64 {
                return Err(Error::dimension(format!(
                    "disparity magnitude {} exceeds image width {}",
                    v.abs(),
                    width
                )));
            }
        }
        Ok(DisparityMap {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        DisparityMap::from_vec(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// View as a single-channel tensor (borrows nothing; copies).
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.values.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor3) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::dimension("disparity tensor must have 1 channel"));
        }
        DisparityMap::from_vec(t.height(), t.width(), t.data().to_vec())
    }

    pub fn scale(&self, s: f64) -> DisparityMap {
        DisparityMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn negate(&self) -> DisparityMap {
        self.scale(-1.0)
    }
}

/// Binary per-pixel field; 1 marks a pixel occluded in the opposite view.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl OcclusionMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1);
        OcclusionMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        let mut m = OcclusionMask::zeros(height, width);
        m.values.fill(1);
        m
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dimension(format!(
                "expected {} mask values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::format("mask values must be 0 or 1".to_string()));
        }
        Ok(OcclusionMask {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = OcclusionMask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.values[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn is_occluded(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count_occluded(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn mirror_x(&self) -> OcclusionMask {
        OcclusionMask::from_fn(self.height, self.width, |y, x| {
            self.is_occluded(y, self.width - 1 - x)
        })
    }
}

/// Weights of the joint two-view objective and of the estimator training
/// losses: `alpha` content, `beta` style, `gamma` cross-view consistency,
/// `lambda` occlusion cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, lambda: f64) -> Result<Self> {
        for (name, v) in [
            ("alpha", alpha),
            ("beta", beta),
            ("gamma", gamma),
            ("lambda", lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            alpha,
            beta,
            gamma,
            lambda,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1e6,
            gamma: 500.0,
            lambda: 1.0,
        }
    }
}

pub(crate) fn check_tensor_disparity(t: &Tensor3, d: &DisparityMap) -> Result<()> {
    check_same_hw("tensor vs disparity", t.hw(), d.hw())
}

pub(crate) fn check_tensor_mask(t: &Tensor3, m: &OcclusionMask) -> Result<()> {
    check_same_hw("tensor vs mask", t.hw(), m.hw())
}

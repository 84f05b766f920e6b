//! Backward (gather) and forward (splat) warping along displacement fields,
//! with exact adjoints.
//!
//! Backward warping samples the source at `x + d(p)` with linear
//! interpolation between the two horizontal neighbors, clamping
//! out-of-range coordinates to the image border. Forward warping scatters
//! every non-occluded source pixel to the grid points around its target
//! position with bilinear weights and normalizes by the accumulated weight;
//! grid points that receive almost no weight are zero-filled and flagged as
//! holes.

use crate::error::{check_same_hw, Error, Result};
use crate::tensor::{check_tensor_disparity, check_tensor_mask, DisparityMap, OcclusionMask, Tensor3};

/// Accumulated splat weight below this flags a hole.
pub const HOLE_THRESHOLD: f64 = 1e-4;

/// Binary field marking output pixels that no source pixel reached.
#[derive(Clone, Debug, PartialEq)]
pub struct HoleMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl HoleMask {
    fn new(height: usize, width: usize) -> Self {
        HoleMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub(crate) fn from_bits(height: usize, width: usize, values: Vec<u8>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        debug_assert!(values.iter().all(|&v| v <= 1));
        HoleMask {
            height,
            width,
            values,
        }
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
    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count_holes(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Reinterprets holes as an occlusion mask (1 = excluded).
    pub fn to_occlusion(&self) -> OcclusionMask {
        OcclusionMask::from_vec(self.height, self.width, self.values.clone())
            .expect("hole mask is binary")
    }
}

/// Source x-coordinate resolved against the border-clamp rule.
enum Sample {
    /// Interior sample with fractional weight: `(1-f) * x0 + f * (x0+1)`,
    /// `0 < f < 1`.
    Interior { x0: usize, f: f64 },
    /// Exactly on a grid column. The value is that column's; the
    /// displacement derivative is the symmetric slope across the knot
    /// (one-sided halves flatten at the clamped borders), which is what
    /// central differencing of this interpolant yields.
    Knot { x: usize },
    /// Strictly out of range, clamped to a border column; the displacement
    /// derivative vanishes.
    Clamped { x: usize },
}

#[inline]
fn resolve_x(sx: f64, width: usize) -> Sample {
    let max_x = (width - 1) as f64;
    if sx < 0.0 {
        Sample::Clamped { x: 0 }
    } else if sx > max_x {
        Sample::Clamped { x: width - 1 }
    } else {
        let x0 = sx.floor();
        let f = sx - x0;
        if f == 0.0 {
            Sample::Knot { x: x0 as usize }
        } else {
            Sample::Interior { x0: x0 as usize, f }
        }
    }
}

/// Symmetric slope of row `y` at column `x`, honoring the flat clamped
/// extension past either border.
#[inline]
fn knot_slope(x_img: &Tensor3, y: usize, x: usize, c: usize) -> f64 {
    let w = x_img.width();
    if w == 1 {
        return 0.0;
    }
    let right = if x + 1 < w { x_img.get(y, x + 1, c) } else { x_img.get(y, x, c) };
    let left = if x > 0 { x_img.get(y, x - 1, c) } else { x_img.get(y, x, c) };
    (right - left) / 2.0
}

/// Samples `x` at horizontally displaced coordinates: the output at pixel
/// `p` is `x(p.x + d(p), p.y)`, linearly interpolated, clamped to the
/// border.
pub fn backward_warp(x: &Tensor3, d: &DisparityMap) -> Result<Tensor3> {
    check_tensor_disparity(x, d)?;
    let (h, w, c) = x.shape();
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for xi in 0..w {
            let sx = xi as f64 + d.get(y, xi);
            let dst = out.pixel_mut(y, xi);
            match resolve_x(sx, w) {
                Sample::Clamped { x: xc } | Sample::Knot { x: xc } => {
                    dst.copy_from_slice(x.pixel(y, xc))
                }
                Sample::Interior { x0, f } => {
                    let a = x.pixel(y, x0);
                    let b = x.pixel(y, x0 + 1);
                    for ci in 0..c {
                        dst[ci] = (1.0 - f) * a[ci] + f * b[ci];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`backward_warp`]: scatters the cotangent back onto the
/// two source columns of each output pixel, and contracts it with the
/// horizontal finite-element derivative for the displacement gradient.
pub fn backward_warp_vjp(
    x: &Tensor3,
    d: &DisparityMap,
    cotangent: &Tensor3,
) -> Result<(Tensor3, DisparityMap)> {
    check_tensor_disparity(x, d)?;
    if x.shape() != cotangent.shape() {
        return Err(Error::dimension("cotangent shape mismatch in backward_warp_vjp"));
    }
    let (h, w, c) = x.shape();
    let mut grad_x = Tensor3::zeros(h, w, c);
    let mut grad_d = DisparityMap::zeros(h, w);
    for y in 0..h {
        for xi in 0..w {
            let sx = xi as f64 + d.get(y, xi);
            let cot = cotangent.pixel(y, xi);
            match resolve_x(sx, w) {
                Sample::Clamped { x: xc } => {
                    let g = grad_x.pixel_mut(y, xc);
                    for (gv, &cv) in g.iter_mut().zip(cot) {
                        *gv += cv;
                    }
                }
                Sample::Knot { x: xc } => {
                    let mut dd = 0.0;
                    for (ci, &cv) in cot.iter().enumerate() {
                        dd += cv * knot_slope(x, y, xc, ci);
                    }
                    grad_d.set(y, xi, dd);
                    let g = grad_x.pixel_mut(y, xc);
                    for (gv, &cv) in g.iter_mut().zip(cot) {
                        *gv += cv;
                    }
                }
                Sample::Interior { x0, f } => {
                    let mut dd = 0.0;
                    for (ci, &cv) in cot.iter().enumerate() {
                        dd += cv * (x.get(y, x0 + 1, ci) - x.get(y, x0, ci));
                    }
                    grad_d.set(y, xi, dd);
                    let g0 = grad_x.pixel_mut(y, x0);
                    for (gv, &cv) in g0.iter_mut().zip(cot) {
                        *gv += (1.0 - f) * cv;
                    }
                    let g1 = grad_x.pixel_mut(y, x0 + 1);
                    for (gv, &cv) in g1.iter_mut().zip(cot) {
                        *gv += f * cv;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_d))
}

/// Full 2-D backward warp used by the temporal loss: `flow` has two
/// channels `(dx, dy)` and the output at `p` samples the source at
/// `(p.x + dx(p), p.y + dy(p))` with bilinear interpolation, clamped to the
/// border in both axes.
pub fn backward_warp_2d(x: &Tensor3, flow: &Tensor3) -> Result<Tensor3> {
    check_same_hw("image vs flow", x.hw(), flow.hw())?;
    if flow.channels() != 2 {
        return Err(Error::dimension("flow must have 2 channels (dx, dy)"));
    }
    let (h, w, c) = x.shape();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for xi in 0..w {
            let sx = (xi as f64 + flow.get(y, xi, 0)).clamp(0.0, max_x);
            let sy = (y as f64 + flow.get(y, xi, 1)).clamp(0.0, max_y);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let p00 = x.pixel(y0, x0);
            let p01 = x.pixel(y0, x1);
            let p10 = x.pixel(y1, x0);
            let p11 = x.pixel(y1, x1);
            let dst = out.pixel_mut(y, xi);
            for ci in 0..c {
                let top = (1.0 - fx) * p00[ci] + fx * p01[ci];
                let bot = (1.0 - fx) * p10[ci] + fx * p11[ci];
                dst[ci] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling to a new grid size (half-pixel-centered sampling, so
/// equal sizes reproduce the input exactly).
pub fn bilinear_resize(t: &Tensor3, out_h: usize, out_w: usize) -> Result<Tensor3> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dimension("resize target must be >= 1 in each axis"));
    }
    let (h, w, c) = t.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let mut out = Tensor3::zeros(out_h, out_w, c);
    for oy in 0..out_h {
        let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for ox in 0..out_w {
            let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            let p00 = t.pixel(y0, x0);
            let p01 = t.pixel(y0, x1);
            let p10 = t.pixel(y1, x0);
            let p11 = t.pixel(y1, x1);
            let dst = out.pixel_mut(oy, ox);
            for ci in 0..c {
                let top = (1.0 - fx) * p00[ci] + fx * p01[ci];
                let bot = (1.0 - fx) * p10[ci] + fx * p11[ci];
                dst[ci] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    Ok(out)
}

/// The four bilinear splat corners of a target position, with weights and
/// the derivative of each weight with respect to the horizontal target
/// coordinate.
#[inline]
fn splat_corners(tx: f64, ty: f64) -> [(i64, i64, f64, f64); 4] {
    let x0 = tx.floor();
    let y0 = ty.floor();
    let fx = tx - x0;
    let fy = ty - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy),
        (x0 + 1, y0 + 1, fx * fy, fy),
    ]
}

/// Splats every non-occluded source pixel to the grid points around its
/// horizontally displaced target with bilinear weights, normalizes by the
/// accumulated weight, and flags starved pixels as holes.
pub fn forward_warp(
    x: &Tensor3,
    d: &DisparityMap,
    m: &OcclusionMask,
) -> Result<(Tensor3, HoleMask)> {
    check_tensor_disparity(x, d)?;
    check_tensor_mask(x, m)?;
    let (h, w, c) = x.shape();
    let mut num = Tensor3::zeros(h, w, c);
    let mut den = vec![0.0f64; h * w];

    for y in 0..h {
        for xi in 0..w {
            if m.is_occluded(y, xi) {
                continue;
            }
            let tx = xi as f64 + d.get(y, xi);
            let src = x.pixel(y, xi);
            for (cx, cy, wgt, _) in splat_corners(tx, y as f64) {
                if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
                    continue;
                }
                let (cx, cy) = (cx as usize, cy as usize);
                den[cy * w + cx] += wgt;
                let acc = num.pixel_mut(cy, cx);
                for ci in 0..c {
                    acc[ci] += wgt * src[ci];
                }
            }
        }
    }

    let mut holes = HoleMask::new(h, w);
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for xi in 0..w {
            let total = den[y * w + xi];
            if total < HOLE_THRESHOLD {
                holes.values[y * w + xi] = 1;
            } else {
                let acc = num.pixel(y, xi);
                let dst = out.pixel_mut(y, xi);
                for ci in 0..c {
                    dst[ci] = acc[ci] / total;
                }
            }
        }
    }
    Ok((out, holes))
}

/// Exact adjoint of [`forward_warp`], including the quotient rule through
/// the weight normalization. Occluded source pixels and hole outputs carry
/// no gradient.
pub fn forward_warp_vjp(
    x: &Tensor3,
    d: &DisparityMap,
    m: &OcclusionMask,
    cotangent: &Tensor3,
) -> Result<(Tensor3, DisparityMap)> {
    check_tensor_disparity(x, d)?;
    check_tensor_mask(x, m)?;
    if x.shape() != cotangent.shape() {
        return Err(Error::dimension("cotangent shape mismatch in forward_warp_vjp"));
    }
    let (h, w, c) = x.shape();

    // Re-run the accumulation to recover totals and normalized outputs.
    let (z, holes) = forward_warp(x, d, m)?;
    let mut den = vec![0.0f64; h * w];
    for y in 0..h {
        for xi in 0..w {
            if m.is_occluded(y, xi) {
                continue;
            }
            let tx = xi as f64 + d.get(y, xi);
            for (cx, cy, wgt, _) in splat_corners(tx, y as f64) {
                if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
                    continue;
                }
                den[cy as usize * w + cx as usize] += wgt;
            }
        }
    }

    let mut grad_x = Tensor3::zeros(h, w, c);
    let mut grad_d = DisparityMap::zeros(h, w);
    for y in 0..h {
        for xi in 0..w {
            if m.is_occluded(y, xi) {
                continue;
            }
            let tx = xi as f64 + d.get(y, xi);
            let src = x.pixel(y, xi);
            let gx = grad_x.pixel_mut(y, xi);
            let mut gd = 0.0;
            for (cx, cy, wgt, dwgt) in splat_corners(tx, y as f64) {
                if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
                    continue;
                }
                let (cx, cy) = (cx as usize, cy as usize);
                if holes.is_hole(cy, cx) {
                    continue;
                }
                let total = den[cy * w + cx];
                let cot = cotangent.pixel(cy, cx);
                let zp = z.pixel(cy, cx);
                for ci in 0..c {
                    // z = num / den: d z / d x(q) = w / den,
                    // d z / d d(q) = dw * (x(q) - z) / den.
                    gx[ci] += wgt / total * cot[ci];
                    gd += dwgt * (src[ci] - zp[ci]) / total * cot[ci];
                }
            }
            grad_d.set(y, xi, gd);
        }
    }
    Ok((grad_x, grad_d))
}

//! Occlusion estimation from bidirectional disparities, and class-balance
//! weight maps for the occlusion training loss.

use crate::error::{check_same_hw, Error, Result};
use crate::tensor::{DisparityMap, OcclusionMask};
use crate::warp::backward_warp;

/// Default round-trip tolerance for [`consistency_check`], in pixels.
pub const DEFAULT_TAU: f64 = 0.5;

/// Per-pixel weights that up-weight the rarer occluded class: 1 at
/// non-occluded pixels, `#non_occ / #occ` at occluded ones.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl WeightMap {
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All-ones map (no reweighting).
    pub fn uniform(height: usize, width: usize) -> Self {
        WeightMap {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    /// Builds a weight map from explicit positive values.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dimension("weight map value count mismatch"));
        }
        if values.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(Error::InvalidSpec(
                "weight map values must be finite and positive".to_string(),
            ));
        }
        Ok(WeightMap {
            height,
            width,
            values,
        })
    }
}

/// Forward-backward consistency check: pixel `p` is occluded when its
/// round trip `d_fwd(p) + d_bwd(p + d_fwd(p))` misses by more than `tau`
/// pixels, or when the correspondence leaves the image entirely.
pub fn consistency_check(
    d_fwd: &DisparityMap,
    d_bwd: &DisparityMap,
    tau: f64,
) -> Result<OcclusionMask> {
    check_same_hw("forward vs backward disparity", d_fwd.hw(), d_bwd.hw())?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidSpec(format!("tau must be positive, got {tau}")));
    }
    let (h, w) = d_fwd.hw();
    let warped_bwd = backward_warp(&d_bwd.to_tensor(), d_fwd)?;
    let max_x = (w - 1) as f64;
    Ok(OcclusionMask::from_fn(h, w, |y, x| {
        let fwd = d_fwd.get(y, x);
        let target = x as f64 + fwd;
        if target < 0.0 || target > max_x {
            return true;
        }
        (fwd + warped_bwd.get(y, x, 0)).abs() > tau
    }))
}

/// Class-balance weights for the occlusion cross-entropy. Degenerate masks
/// (all occluded or none occluded) fall back to uniform weights.
pub fn balance_weights(m: &OcclusionMask) -> WeightMap {
    let (h, w) = m.hw();
    let total = h * w;
    let occluded = m.count_occluded();
    let non_occluded = total - occluded;
    if occluded == 0 {
        return WeightMap::uniform(h, w);
    }
    if non_occluded == 0 {
        log::warn!("balance_weights: mask is fully occluded; falling back to uniform weights");
        return WeightMap::uniform(h, w);
    }
    let occ_weight = non_occluded as f64 / occluded as f64;
    let values = m
        .values()
        .iter()
        .map(|&v| if v == 1 { occ_weight } else { 1.0 })
        .collect();
    WeightMap { height: h, width: w, values }
}

//! Synthetic stereo scenes with exact ground truth, and the evaluation
//! metrics.
//!
//! Scenes are flat textured rectangles over a textured background, rendered
//! with the painter's algorithm in both views. Every layer carries one
//! integer disparity, so ground-truth correspondences are exact and the
//! oracles need no interpolation. Textures are value noise seeded through
//! the crate's documented generator ([`crate::rng`]), hence identical on
//! every platform.
//!
//! # Scene file grammar
//!
//! Plain text, one directive per line; `#` starts a comment.
//!
//! ```text
//! canvas <width> <height>
//! background seed=<u64> [cell=<px>]
//! layer x=<px> y=<px> w=<px> h=<px> disparity=<signed px> seed=<u64> [cell=<px>]
//! ```
//!
//! `canvas` must come first. Layers are listed back to front; nearer layers
//! (later lines) must shift at least as much as farther ones, and every
//! |disparity| must stay under a quarter of the canvas width. `cell` sets
//! the noise cell size in pixels (default 8 for the background, 4 for
//! layers).

use std::path::Path;

use crate::error::{check_same_hw, Error, Result};
use crate::losses::disparity_loss;
use crate::rng::hash01;
use crate::tensor::{DisparityMap, OcclusionMask, Tensor3};

const CHANNELS: usize = 3;

/// Bilinear value noise on an integer pixel grid: lattice corners are
/// hashed from `(seed, cell_x, cell_y, channel)` and interpolated, so the
/// value at a point depends only on its layer-local coordinates.
pub fn value_noise(seed: u64, u: i64, v: i64, channel: u64, cell: u32) -> f64 {
    let cs = cell.max(1) as i64;
    let cu = u.div_euclid(cs);
    let cv = v.div_euclid(cs);
    let fu = u.rem_euclid(cs) as f64 / cs as f64;
    let fv = v.rem_euclid(cs) as f64 / cs as f64;
    let h00 = hash01(seed, cu, cv, channel);
    let h01 = hash01(seed, cu + 1, cv, channel);
    let h10 = hash01(seed, cu, cv + 1, channel);
    let h11 = hash01(seed, cu + 1, cv + 1, channel);
    let top = (1.0 - fu) * h00 + fu * h01;
    let bot = (1.0 - fu) * h10 + fu * h11;
    (1.0 - fv) * top + fv * bot
}

/// A textured RGB image of pure value noise; handy as a style source.
pub fn noise_image(height: usize, width: usize, seed: u64, cell: u32) -> Tensor3 {
    Tensor3::from_fn(height, width, CHANNELS, |y, x, c| {
        value_noise(seed, x as i64, y as i64, c as u64, cell)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Integer horizontal shift between the views: the layer appears at
    /// `x + disparity` in the right view.
    pub disparity: i32,
    pub seed: u64,
    pub cell: u32,
}

/// Scene description: canvas, background texture, and layers back to front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    pub background_cell: u32,
    pub layers: Vec<LayerSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidSpec("canvas must be at least 1x1".to_string()));
        }
        let limit = self.width as i64 / 4;
        let mut previous_mag = 0i64;
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.w == 0 || layer.h == 0 {
                return Err(Error::InvalidSpec(format!("layer {idx} is empty")));
            }
            if layer.x + layer.w > self.width || layer.y + layer.h > self.height {
                return Err(Error::InvalidSpec(format!(
                    "layer {idx} exceeds the {}x{} canvas",
                    self.width, self.height
                )));
            }
            let mag = (layer.disparity as i64).abs();
            if mag >= limit {
                return Err(Error::InvalidSpec(format!(
                    "layer {idx} disparity {} exceeds the width/4 limit {}",
                    layer.disparity, limit
                )));
            }
            if mag < previous_mag {
                return Err(Error::InvalidSpec(format!(
                    "layer {idx} is nearer but shifts less ({} px) than the layer behind it ({} px)",
                    mag, previous_mag
                )));
            }
            previous_mag = mag;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut canvas: Option<(usize, usize)> = None;
        let mut background_seed = 1u64;
        let mut background_cell = 8u32;
        let mut layers = Vec::new();

        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let keyword = tokens.next().expect("non-empty line");
            let err = |msg: String| Error::InvalidSpec(format!("line {}: {msg}", line_no + 1));
            match keyword {
                "canvas" => {
                    let w = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err("canvas needs a width".to_string()))?;
                    let h = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err("canvas needs a height".to_string()))?;
                    canvas = Some((w, h));
                }
                "background" => {
                    for token in tokens {
                        let (key, value) = split_kv(token)
                            .ok_or_else(|| err(format!("expected key=value, got {token:?}")))?;
                        match key {
                            "seed" => {
                                background_seed = value
                                    .parse()
                                    .map_err(|_| err(format!("bad seed {value:?}")))?
                            }
                            "cell" => {
                                background_cell = value
                                    .parse()
                                    .map_err(|_| err(format!("bad cell {value:?}")))?
                            }
                            other => return Err(err(format!("unknown background key {other:?}"))),
                        }
                    }
                }
                "layer" => {
                    let mut layer = LayerSpec {
                        x: 0,
                        y: 0,
                        w: 0,
                        h: 0,
                        disparity: 0,
                        seed: 0,
                        cell: 4,
                    };
                    let mut seen_seed = false;
                    for token in tokens {
                        let (key, value) = split_kv(token)
                            .ok_or_else(|| err(format!("expected key=value, got {token:?}")))?;
                        let bad = |k: &str| err(format!("bad {k} value {value:?}"));
                        match key {
                            "x" => layer.x = value.parse().map_err(|_| bad("x"))?,
                            "y" => layer.y = value.parse().map_err(|_| bad("y"))?,
                            "w" => layer.w = value.parse().map_err(|_| bad("w"))?,
                            "h" => layer.h = value.parse().map_err(|_| bad("h"))?,
                            "disparity" => {
                                layer.disparity = value.parse().map_err(|_| bad("disparity"))?
                            }
                            "seed" => {
                                layer.seed = value.parse().map_err(|_| bad("seed"))?;
                                seen_seed = true;
                            }
                            "cell" => layer.cell = value.parse().map_err(|_| bad("cell"))?,
                            other => return Err(err(format!("unknown layer key {other:?}"))),
                        }
                    }
                    if !seen_seed {
                        return Err(err("layer needs a seed".to_string()));
                    }
                    layers.push(layer);
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }

        let (width, height) = canvas
            .ok_or_else(|| Error::InvalidSpec("scene needs a canvas line".to_string()))?;
        let spec = SceneSpec {
            width,
            height,
            background_seed,
            background_cell,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        SceneSpec::parse(&text)
    }
}

fn split_kv(token: &str) -> Option<(&str, &str)> {
    let mut parts = token.splitn(2, '=');
    Some((parts.next()?, parts.next()?))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum View {
    Left,
    Right,
}

/// Rendered pair with exact per-view ground truth.
#[derive(Clone, Debug)]
pub struct StereoScene {
    pub left: Tensor3,
    pub right: Tensor3,
    pub disp_left: DisparityMap,
    pub disp_right: DisparityMap,
    pub occ_left: OcclusionMask,
    pub occ_right: OcclusionMask,
}

/// Painter's-algorithm rendering of both views. The ground-truth disparity
/// of a pixel is the disparity of its topmost layer; ground-truth occlusion
/// is an exact per-pixel visibility comparison: a pixel is occluded when
/// its correspondence leaves the canvas or shows a different surface.
pub fn render_stereo(spec: &SceneSpec) -> Result<StereoScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);

    // Topmost surface per pixel and view; None = background.
    let surface = |view: View, x: i64, y: i64| -> Option<usize> {
        for (idx, layer) in spec.layers.iter().enumerate().rev() {
            let shift = match view {
                View::Left => 0i64,
                View::Right => layer.disparity as i64,
            };
            let x0 = layer.x as i64 + shift;
            let y0 = layer.y as i64;
            if x >= x0 && x < x0 + layer.w as i64 && y >= y0 && y < y0 + layer.h as i64 {
                return Some(idx);
            }
        }
        None
    };

    let texel = |view: View, surface: Option<usize>, x: i64, y: i64, c: usize| -> f64 {
        match surface {
            None => value_noise(spec.background_seed, x, y, c as u64, spec.background_cell),
            Some(idx) => {
                let layer = &spec.layers[idx];
                let shift = match view {
                    View::Left => 0i64,
                    View::Right => layer.disparity as i64,
                };
                let u = x - layer.x as i64 - shift;
                let v = y - layer.y as i64;
                value_noise(layer.seed, u, v, c as u64, layer.cell)
            }
        }
    };

    // The signed shift from this view toward the other: +d for left->right,
    // -d for right->left.
    let signed_disparity = |view: View, surface: Option<usize>| -> i64 {
        let d = surface.map_or(0, |idx| spec.layers[idx].disparity as i64);
        match view {
            View::Left => d,
            View::Right => -d,
        }
    };

    let mut ids = vec![vec![None; h * w]; 2];
    for (vi, view) in [View::Left, View::Right].into_iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                ids[vi][y * w + x] = surface(view, x as i64, y as i64);
            }
        }
    }

    let render_view = |view: View, vi: usize| -> Tensor3 {
        Tensor3::from_fn(h, w, CHANNELS, |y, x, c| {
            texel(view, ids[vi][y * w + x], x as i64, y as i64, c)
        })
    };
    let left = render_view(View::Left, 0);
    let right = render_view(View::Right, 1);

    let disparity_of = |view: View, vi: usize| -> DisparityMap {
        DisparityMap::from_fn(h, w, |y, x| {
            signed_disparity(view, ids[vi][y * w + x]) as f64
        })
        .expect("validated disparities fit the canvas")
    };
    let disp_left = disparity_of(View::Left, 0);
    let disp_right = disparity_of(View::Right, 1);

    let occlusion_of = |view: View, vi: usize, other_vi: usize| -> OcclusionMask {
        OcclusionMask::from_fn(h, w, |y, x| {
            let id = ids[vi][y * w + x];
            let target = x as i64 + signed_disparity(view, id);
            if target < 0 || target >= w as i64 {
                return true;
            }
            ids[other_vi][y * w + target as usize] != id
        })
    };
    let occ_left = occlusion_of(View::Left, 0, 1);
    let occ_right = occlusion_of(View::Right, 1, 0);

    Ok(StereoScene {
        left,
        right,
        disp_left,
        disp_right,
        occ_left,
        occ_right,
    })
}

/// Mean absolute disparity deviation over non-occluded pixels.
pub fn epe_nonoccluded(
    d: &DisparityMap,
    d_gt: &DisparityMap,
    m_gt: &OcclusionMask,
) -> Result<f64> {
    check_same_hw("disparity vs ground truth", d.hw(), d_gt.hw())?;
    check_same_hw("disparity vs mask", d.hw(), m_gt.hw())?;
    let (h, w) = d.hw();
    let visible = h * w - m_gt.count_occluded();
    if visible == 0 {
        return Err(Error::UndefinedMetric(
            "every pixel is occluded; endpoint error is undefined".to_string(),
        ));
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !m_gt.is_occluded(y, x) {
                total += (d.get(y, x) - d_gt.get(y, x)).abs();
            }
        }
    }
    Ok(total / visible as f64)
}

/// F1 score of the predicted occlusion mask, treating occluded as the
/// positive class. Two empty masks score 1.
pub fn occlusion_fscore(m: &OcclusionMask, m_gt: &OcclusionMask) -> Result<f64> {
    check_same_hw("mask vs ground truth", m.hw(), m_gt.hw())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in m.values().iter().zip(m_gt.values()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Cross-view photometric consistency of a stylized pair: the sum of the
/// two per-view masked warp differences (evaluation only).
pub fn consistency_metric(
    o_l: &Tensor3,
    o_r: &Tensor3,
    d_l: &DisparityMap,
    d_r: &DisparityMap,
    m_l: &OcclusionMask,
    m_r: &OcclusionMask,
) -> Result<f64> {
    let (v_l, _, _) = disparity_loss(o_l, o_r, d_l, m_l)?;
    let (v_r, _, _) = disparity_loss(o_r, o_l, d_r, m_r)?;
    Ok(v_l + v_r)
}

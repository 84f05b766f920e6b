//! The full loss stack with analytic gradients with respect to the
//! stylized images.
//!
//! Squared-error losses are per-element means rather than raw sums, which
//! makes the weights resolution-independent; absolute values therefore live
//! on a different scale than formulations that sum.

use crate::error::{check_same_hw, Error, Result};
use crate::features::{gram, gram_vjp, FeatureExtractor, ForwardPass, GramMatrix};
use crate::occlusion::WeightMap;
use crate::tensor::{sum_row_symmetric, DisparityMap, LossWeights, OcclusionMask, Tensor3};
use crate::warp::{backward_warp, backward_warp_2d, backward_warp_vjp};

/// Clamp for the occlusion cross-entropy.
pub const CROSS_ENTROPY_EPS: f64 = 1e-7;

/// Mean of squared entries, accumulated row-wise with the mirror-invariant
/// pairing. Returns 0 for an empty denominator.
fn sq_mean(diff: &Tensor3) -> f64 {
    let (h, w, c) = diff.shape();
    let mut row = vec![0.0f64; w];
    let mut total = 0.0;
    for y in 0..h {
        for (x, slot) in row.iter_mut().enumerate() {
            let p = diff.pixel(y, x);
            let mut s = 0.0;
            for &v in p {
                s += v * v;
            }
            *slot = s;
        }
        total += sum_row_symmetric(&row);
    }
    total / (h * w * c) as f64
}

/// Sum over content taps of the mean squared feature difference, with the
/// gradient pulled back to the stylized image.
pub fn content_loss(e: &FeatureExtractor, o: &Tensor3, i: &Tensor3) -> Result<(f64, Tensor3)> {
    if o.shape() != i.shape() {
        return Err(Error::dimension("content_loss inputs differ in shape"));
    }
    let target_pass = e.forward(i)?;
    let targets: Vec<&Tensor3> = e
        .content_taps()
        .iter()
        .map(|&t| target_pass.layer_output(t))
        .collect();
    let pass = e.forward(o)?;
    let (value, cots) = content_terms(e, &pass, &targets)?;
    let pairs: Vec<(usize, &Tensor3)> = e
        .content_taps()
        .iter()
        .copied()
        .zip(cots.iter())
        .collect();
    let grad = e.vjp_with_pass(o, &pass, &pairs)?;
    Ok((value, grad))
}

/// Value and per-tap cotangents of the content term given an existing
/// forward pass and target features aligned with the content taps.
fn content_terms(
    e: &FeatureExtractor,
    pass: &ForwardPass,
    targets: &[&Tensor3],
) -> Result<(f64, Vec<Tensor3>)> {
    if targets.len() != e.content_taps().len() {
        return Err(Error::dimension("content target count mismatch"));
    }
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(targets.len());
    for (&tap, target) in e.content_taps().iter().zip(targets) {
        let f = pass.layer_output(tap);
        let diff = f.sub(target)?;
        value += sq_mean(&diff);
        let n = diff.len() as f64;
        cots.push(diff.scale(2.0 / n));
    }
    Ok((value, cots))
}

/// Precomputes the style image's Gram matrices, one per style tap.
pub fn style_grams(e: &FeatureExtractor, style: &Tensor3) -> Result<Vec<GramMatrix>> {
    let pass = e.forward(style)?;
    Ok(e.style_taps()
        .iter()
        .map(|&t| gram(pass.layer_output(t)))
        .collect())
}

/// Sum over style taps of the mean squared Gram difference, with the
/// gradient pulled back to the stylized image.
pub fn style_loss(
    e: &FeatureExtractor,
    o: &Tensor3,
    s_grams: &[GramMatrix],
) -> Result<(f64, Tensor3)> {
    let pass = e.forward(o)?;
    let (value, cots) = style_terms(e, &pass, s_grams)?;
    let pairs: Vec<(usize, &Tensor3)> =
        e.style_taps().iter().copied().zip(cots.iter()).collect();
    let grad = e.vjp_with_pass(o, &pass, &pairs)?;
    Ok((value, grad))
}

fn style_terms(
    e: &FeatureExtractor,
    pass: &ForwardPass,
    s_grams: &[GramMatrix],
) -> Result<(f64, Vec<Tensor3>)> {
    if s_grams.len() != e.style_taps().len() {
        return Err(Error::dimension(format!(
            "expected {} style grams, got {}",
            e.style_taps().len(),
            s_grams.len()
        )));
    }
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(s_grams.len());
    for (&tap, target) in e.style_taps().iter().zip(s_grams) {
        let f = pass.layer_output(tap);
        let g = gram(f);
        value += g.sq_distance(target)?;
        // d(mean squared gram difference)/dG = 2 (G - G_s) / C^2.
        let c = g.channels();
        let scale = 2.0 / (c * c) as f64;
        let mut dg = vec![0.0; c * c];
        for (slot, (a, b)) in dg.iter_mut().zip(g.data().iter().zip(target.data())) {
            *slot = scale * (a - b);
        }
        let dg = crate::features::gram_matrix_from_raw(c, dg);
        cots.push(gram_vjp(f, &dg)?);
    }
    Ok((value, cots))
}

/// Masked mean-squared cross-view difference: compares one view's result
/// with the opposite view backward-warped along the disparity field, over
/// non-occluded pixels only. Returns the value and the gradients for both
/// views; the disparity is a constant of the objective.
pub fn disparity_loss(
    o_v: &Tensor3,
    o_vstar: &Tensor3,
    d_v: &DisparityMap,
    m_v: &OcclusionMask,
) -> Result<(f64, Tensor3, Tensor3)> {
    if o_v.shape() != o_vstar.shape() {
        return Err(Error::dimension("disparity_loss views differ in shape"));
    }
    check_same_hw("view vs disparity", o_v.hw(), d_v.hw())?;
    check_same_hw("view vs mask", o_v.hw(), m_v.hw())?;

    let (h, w, c) = o_v.shape();
    let warped = backward_warp(o_vstar, d_v)?;
    let visible = (h * w - m_v.count_occluded()) * c;
    if visible == 0 {
        return Ok((
            0.0,
            Tensor3::zeros(h, w, c),
            Tensor3::zeros(h, w, c),
        ));
    }
    let denom = visible as f64;

    let mut row = vec![0.0f64; w];
    let mut total = 0.0;
    let mut grad_v = Tensor3::zeros(h, w, c);
    let mut cot_warped = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for (x, slot) in row.iter_mut().enumerate() {
            if m_v.is_occluded(y, x) {
                *slot = 0.0;
                continue;
            }
            let a = o_v.pixel(y, x);
            let b = warped.pixel(y, x);
            let gv = grad_v.pixel_mut(y, x);
            let cw = cot_warped.pixel_mut(y, x);
            let mut s = 0.0;
            for ci in 0..c {
                let d = a[ci] - b[ci];
                s += d * d;
                gv[ci] = 2.0 * d / denom;
                cw[ci] = -2.0 * d / denom;
            }
            *slot = s;
        }
        total += sum_row_symmetric(&row);
    }
    let (grad_vstar, _grad_d) = backward_warp_vjp(o_vstar, d_v, &cot_warped)?;
    Ok((total / denom, grad_v, grad_vstar))
}

/// Mean absolute disparity deviation over non-occluded pixels.
pub fn disp_train_loss(
    d: &DisparityMap,
    d_gt: &DisparityMap,
    m_gt: &OcclusionMask,
) -> Result<f64> {
    check_same_hw("disparity vs ground truth", d.hw(), d_gt.hw())?;
    check_same_hw("disparity vs mask", d.hw(), m_gt.hw())?;
    let (h, w) = d.hw();
    let visible = h * w - m_gt.count_occluded();
    if visible == 0 {
        return Ok(0.0);
    }
    let mut row = vec![0.0f64; w];
    let mut total = 0.0;
    for y in 0..h {
        for (x, slot) in row.iter_mut().enumerate() {
            *slot = if m_gt.is_occluded(y, x) {
                0.0
            } else {
                (d.get(y, x) - d_gt.get(y, x)).abs()
            };
        }
        total += sum_row_symmetric(&row);
    }
    Ok(total / visible as f64)
}

/// Class-balanced binary cross-entropy between a soft occlusion prediction
/// and the ground-truth mask, averaged over all pixels. Predictions are
/// clamped to `[eps, 1-eps]` with `eps = 1e-7`.
pub fn occ_train_loss(
    m_pred: &Tensor3,
    m_gt: &OcclusionMask,
    w: &WeightMap,
) -> Result<f64> {
    if m_pred.channels() != 1 {
        return Err(Error::dimension("occlusion prediction must have 1 channel"));
    }
    check_same_hw("prediction vs ground truth", m_pred.hw(), m_gt.hw())?;
    check_same_hw("prediction vs weights", m_pred.hw(), w.hw())?;
    let (h, wd) = m_pred.hw();
    let mut row = vec![0.0f64; wd];
    let mut total = 0.0;
    for y in 0..h {
        for (x, slot) in row.iter_mut().enumerate() {
            let p = m_pred
                .get(y, x, 0)
                .clamp(CROSS_ENTROPY_EPS, 1.0 - CROSS_ENTROPY_EPS);
            let g = m_gt.get(y, x) as f64;
            *slot = w.get(y, x) * (g * p.ln() + (1.0 - g) * (1.0 - p).ln());
        }
        total += sum_row_symmetric(&row);
    }
    Ok(-total / (h * wd) as f64)
}

/// Masked mean-squared difference between the current frame and the
/// previous frame warped forward in time along the given backward flow.
/// Only the current frame receives a gradient.
pub fn temporal_loss(
    o_t: &Tensor3,
    o_prev: &Tensor3,
    flow: &Tensor3,
    m_t: &OcclusionMask,
) -> Result<(f64, Tensor3)> {
    if o_t.shape() != o_prev.shape() {
        return Err(Error::dimension("temporal_loss frames differ in shape"));
    }
    check_same_hw("frame vs mask", o_t.hw(), m_t.hw())?;
    let warped = backward_warp_2d(o_prev, flow)?;
    let (h, w, c) = o_t.shape();
    let visible = (h * w - m_t.count_occluded()) * c;
    if visible == 0 {
        return Ok((0.0, Tensor3::zeros(h, w, c)));
    }
    let denom = visible as f64;
    let mut row = vec![0.0f64; w];
    let mut total = 0.0;
    let mut grad = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for (x, slot) in row.iter_mut().enumerate() {
            if m_t.is_occluded(y, x) {
                *slot = 0.0;
                continue;
            }
            let a = o_t.pixel(y, x);
            let b = warped.pixel(y, x);
            let g = grad.pixel_mut(y, x);
            let mut s = 0.0;
            for ci in 0..c {
                let d = a[ci] - b[ci];
                s += d * d;
                g[ci] = 2.0 * d / denom;
            }
            *slot = s;
        }
        total += sum_row_symmetric(&row);
    }
    Ok((total / denom, grad))
}

/// Weighted per-view terms of the joint objective. Every field already
/// carries its weight, so the terms sum to the total exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub content_l: f64,
    pub content_r: f64,
    pub style_l: f64,
    pub style_r: f64,
    pub disp_l: f64,
    pub disp_r: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.content_l + self.content_r + self.style_l + self.style_r + self.disp_l + self.disp_r
    }

    /// Weighted perceptual part (content + style over both views).
    pub fn perceptual(&self) -> f64 {
        self.content_l + self.content_r + self.style_l + self.style_r
    }

    pub fn terms(&self) -> [f64; 6] {
        [
            self.content_l,
            self.content_r,
            self.style_l,
            self.style_r,
            self.disp_l,
            self.disp_r,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|v| v.is_finite())
    }
}

/// Applies the weights to raw per-view loss values.
pub fn total_loss(
    weights: &LossWeights,
    content: (f64, f64),
    style: (f64, f64),
    disp: (f64, f64),
) -> LossBreakdown {
    LossBreakdown {
        content_l: weights.alpha * content.0,
        content_r: weights.alpha * content.1,
        style_l: weights.beta * style.0,
        style_r: weights.beta * style.1,
        disp_l: weights.gamma * disp.0,
        disp_r: weights.gamma * disp.1,
    }
}

/// Fixed targets of one joint solve: content features per view and the
/// style image's Gram matrices.
pub struct StereoTargets {
    content_feats_l: Vec<Tensor3>,
    content_feats_r: Vec<Tensor3>,
    style_grams: Vec<GramMatrix>,
}

impl StereoTargets {
    pub fn new(
        e: &FeatureExtractor,
        i_l: &Tensor3,
        i_r: &Tensor3,
        style: &Tensor3,
    ) -> Result<Self> {
        if i_l.shape() != i_r.shape() {
            return Err(Error::dimension("stereo views differ in shape"));
        }
        let collect = |img: &Tensor3| -> Result<Vec<Tensor3>> {
            let pass = e.forward(img)?;
            Ok(e.content_taps()
                .iter()
                .map(|&t| pass.layer_output(t).clone())
                .collect())
        };
        Ok(StereoTargets {
            content_feats_l: collect(i_l)?,
            content_feats_r: collect(i_r)?,
            style_grams: style_grams(e, style)?,
        })
    }

    pub fn style_grams(&self) -> &[GramMatrix] {
        &self.style_grams
    }
}

/// Evaluates the joint two-view objective and its gradients at the current
/// iterates. Perceptual terms are skipped entirely when both `alpha` and
/// `beta` are zero, and the cross-view term is skipped when `gamma` is
/// zero, so a zero weight removes the term's influence exactly.
#[allow(clippy::too_many_arguments)]
pub fn stereo_objective(
    e: &FeatureExtractor,
    o_l: &Tensor3,
    o_r: &Tensor3,
    targets: &StereoTargets,
    d_l: &DisparityMap,
    d_r: &DisparityMap,
    m_l: &OcclusionMask,
    m_r: &OcclusionMask,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor3, Tensor3)> {
    let mut breakdown = LossBreakdown::default();
    let mut grad_l = Tensor3::zeros(o_l.height(), o_l.width(), o_l.channels());
    let mut grad_r = Tensor3::zeros(o_r.height(), o_r.width(), o_r.channels());

    if weights.alpha > 0.0 || weights.beta > 0.0 {
        let views = [
            (o_l, &targets.content_feats_l),
            (o_r, &targets.content_feats_r),
        ];
        for (idx, (o, content_feats)) in views.into_iter().enumerate() {
            let pass = e.forward(o)?;
            let mut pairs: Vec<(usize, Tensor3)> = Vec::new();
            let mut content_value = 0.0;
            let mut style_value = 0.0;
            if weights.alpha > 0.0 {
                let refs: Vec<&Tensor3> = content_feats.iter().collect();
                let (v, cots) = content_terms(e, &pass, &refs)?;
                content_value = v;
                for (&tap, cot) in e.content_taps().iter().zip(cots) {
                    pairs.push((tap, cot.scale(weights.alpha)));
                }
            }
            if weights.beta > 0.0 {
                let (v, cots) = style_terms(e, &pass, &targets.style_grams)?;
                style_value = v;
                for (&tap, cot) in e.style_taps().iter().zip(cots) {
                    pairs.push((tap, cot.scale(weights.beta)));
                }
            }
            let pair_refs: Vec<(usize, &Tensor3)> =
                pairs.iter().map(|(t, c)| (*t, c)).collect();
            let grad = e.vjp_with_pass(o, &pass, &pair_refs)?;
            if idx == 0 {
                grad_l.add_scaled_assign(&grad, 1.0)?;
                breakdown.content_l = weights.alpha * content_value;
                breakdown.style_l = weights.beta * style_value;
            } else {
                grad_r.add_scaled_assign(&grad, 1.0)?;
                breakdown.content_r = weights.alpha * content_value;
                breakdown.style_r = weights.beta * style_value;
            }
        }
    }

    if weights.gamma > 0.0 {
        let (v_l, g_l, g_r_from_l) = disparity_loss(o_l, o_r, d_l, m_l)?;
        let (v_r, g_r, g_l_from_r) = disparity_loss(o_r, o_l, d_r, m_r)?;
        breakdown.disp_l = weights.gamma * v_l;
        breakdown.disp_r = weights.gamma * v_r;
        grad_l.add_scaled_assign(&g_l, weights.gamma)?;
        grad_l.add_scaled_assign(&g_l_from_r, weights.gamma)?;
        grad_r.add_scaled_assign(&g_r, weights.gamma)?;
        grad_r.add_scaled_assign(&g_r_from_l, weights.gamma)?;
    }

    Ok((breakdown, grad_l, grad_r))
}

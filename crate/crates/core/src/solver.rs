//! Joint two-view stylization as first-order energy minimization: both
//! stylized views are free variables of one objective, so the cross-view
//! consistency term pulls on the left and right iterates symmetrically at
//! every step.

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::losses::{stereo_objective, LossBreakdown, StereoTargets};
use crate::rng::{Lcg, HASH_X};
use crate::tensor::{DisparityMap, LossWeights, OcclusionMask, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    PlainGd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Start each view from its own content image.
    ContentCopy,
    /// Start from per-view uniform noise in `[0, 1)` derived from the seed.
    UniformNoise { seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init: InitKind,
    /// Record a trace row every this many steps.
    pub log_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: 300,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init: InitKind::ContentCopy,
            log_every: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidSpec("steps must be > 0".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec("learning rate must be positive".to_string()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidSpec(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidSpec("epsilon must be positive".to_string()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidSpec("log_every must be > 0".to_string()));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::dimension("adam state shape mismatch"));
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// One logged objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

impl TraceRow {
    pub fn total(&self) -> f64 {
        self.breakdown.total()
    }
}

pub struct StereoStylization {
    pub left: Tensor3,
    pub right: Tensor3,
    pub trace: Vec<TraceRow>,
}

fn init_view(init: InitKind, content: &Tensor3, view_seed_offset: u64) -> Tensor3 {
    match init {
        InitKind::ContentCopy => content.clone(),
        InitKind::UniformNoise { seed } => {
            let mut rng = Lcg::new(seed ^ view_seed_offset.wrapping_mul(HASH_X));
            Tensor3::from_fn(content.height(), content.width(), content.channels(), |_, _, _| {
                rng.next_f64()
            })
        }
    }
}

fn check_finite(step: usize, breakdown: &LossBreakdown, grad_l: &Tensor3, grad_r: &Tensor3) -> Result<()> {
    let named = [
        ("content_l", breakdown.content_l),
        ("content_r", breakdown.content_r),
        ("style_l", breakdown.style_l),
        ("style_r", breakdown.style_r),
        ("disp_l", breakdown.disp_l),
        ("disp_r", breakdown.disp_r),
    ];
    for (term, v) in named {
        if !v.is_finite() {
            return Err(Error::Divergence { step, term: term.to_string() });
        }
    }
    if !grad_l.is_finite() {
        return Err(Error::Divergence { step, term: "grad_left".to_string() });
    }
    if !grad_r.is_finite() {
        return Err(Error::Divergence { step, term: "grad_right".to_string() });
    }
    Ok(())
}

/// Minimizes the joint objective over both stylized views and returns the
/// final iterates (clamped to `[0, 1]` only at the end) along with the
/// loss trace.
#[allow(clippy::too_many_arguments)]
pub fn stylize_stereo(
    i_l: &Tensor3,
    i_r: &Tensor3,
    style: &Tensor3,
    d_l: &DisparityMap,
    d_r: &DisparityMap,
    m_l: &OcclusionMask,
    m_r: &OcclusionMask,
    e: &FeatureExtractor,
    weights: &LossWeights,
    cfg: &SolverConfig,
) -> Result<StereoStylization> {
    cfg.validate()?;
    if i_l.shape() != i_r.shape() {
        return Err(Error::dimension("stereo views differ in shape"));
    }
    let targets = StereoTargets::new(e, i_l, i_r, style)?;

    let mut o_l = init_view(cfg.init, i_l, 1);
    let mut o_r = init_view(cfg.init, i_r, 2);
    let mut adam_l = AdamState::new(o_l.len());
    let mut adam_r = AdamState::new(o_r.len());
    let mut trace = Vec::new();

    for step in 0..cfg.steps {
        let (breakdown, grad_l, grad_r) =
            stereo_objective(e, &o_l, &o_r, &targets, d_l, d_r, m_l, m_r, weights)?;
        check_finite(step, &breakdown, &grad_l, &grad_r)?;
        if step % cfg.log_every == 0 {
            trace.push(TraceRow { step, breakdown });
        }
        match cfg.optimizer {
            OptimizerKind::Adam => {
                adam_l.step(
                    o_l.data_mut(),
                    grad_l.data(),
                    cfg.learning_rate,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.epsilon,
                )?;
                adam_r.step(
                    o_r.data_mut(),
                    grad_r.data(),
                    cfg.learning_rate,
                    cfg.beta1,
                    cfg.beta2,
                    cfg.epsilon,
                )?;
            }
            OptimizerKind::PlainGd => {
                for (p, &g) in o_l.data_mut().iter_mut().zip(grad_l.data()) {
                    *p -= cfg.learning_rate * g;
                }
                for (p, &g) in o_r.data_mut().iter_mut().zip(grad_r.data()) {
                    *p -= cfg.learning_rate * g;
                }
            }
        }
    }

    Ok(StereoStylization {
        left: o_l.clamp_unit(),
        right: o_r.clamp_unit(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_grad_leaves_parameters_unchanged() {
        let mut params = vec![0.3, -0.7, 1.2];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3);
        for _ in 0..10 {
            state
                .step(&mut params, &grads, 0.01, 0.9, 0.999, 1e-8)
                .unwrap();
        }
        assert_eq!(params, vec![0.3, -0.7, 1.2]);
    }

    #[test]
    fn adam_single_step_closed_form() {
        // One step from zero state with constant gradient g:
        // m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 0.05;
        let eps = 1e-8;
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        state.step(&mut params, &[g], lr, 0.9, 0.999, eps).unwrap();
        let expected = -lr * g / (g.abs() + eps);
        assert!((params[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = vec![0.1, 0.2, 0.3, 0.4];
            let mut state = AdamState::new(4);
            let mut rng = Lcg::new(77);
            for _ in 0..50 {
                let grads: Vec<f64> = (0..4).map(|_| rng.range(-1.0, 1.0)).collect();
                state
                    .step(&mut params, &grads, 0.02, 0.9, 0.999, 1e-8)
                    .unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn adam_shape_mismatch_is_error() {
        let mut params = vec![0.0; 3];
        let mut state = AdamState::new(4);
        assert!(state.step(&mut params, &[0.0; 3], 0.01, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        cfg.beta1 = 0.9;
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noise_init_is_per_view_and_seeded() {
        let content = Tensor3::zeros(4, 4, 3);
        let a = init_view(InitKind::UniformNoise { seed: 9 }, &content, 1);
        let b = init_view(InitKind::UniformNoise { seed: 9 }, &content, 1);
        let c = init_view(InitKind::UniformNoise { seed: 9 }, &content, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

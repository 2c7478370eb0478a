//! AdamW, the one-cycle learning-rate schedule and gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
}

impl<T: Real> AdamW<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[&Array<T>]) -> Self {
        let zeros: Vec<Array<T>> = params.iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `θ ← θ − lr (m̂ / (√v̂ + ε) + wd θ)`.
    pub fn update(&mut self, params: &mut [Array<T>], grads: &[Array<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, wd, eps) = (T::lit(lr), T::lit(c.weight_decay), T::lit(c.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let data = p.data_mut().iter_mut();
            for (((theta, &g), m), v) in data.zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycleConfig {
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
    /// The schedule starts at `max_lr / div_factor`.
    pub div_factor: f64,
    /// The schedule ends at `max_lr / final_div_factor`.
    pub final_div_factor: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

fn cosine(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Cosine one-cycle learning rate at `step` of `total`: up from
/// `max_lr / div_factor` to `max_lr` at step `round(pct_start (total - 1))`,
/// then down to `max_lr / final_div_factor` at the last step.
pub fn onecycle_lr(step: usize, total: usize, max_lr: f64, c: &OneCycleConfig) -> Result<f64> {
    if step >= total {
        return Err(Error::invalid(format!(
            "schedule step {step} outside 0..{total}"
        )));
    }
    let last = (total - 1) as f64;
    let peak = (c.pct_start * last).round();
    let s = step as f64;
    if s <= peak {
        if peak == 0.0 {
            return Ok(max_lr);
        }
        Ok(cosine(max_lr / c.div_factor, max_lr, s / peak))
    } else {
        Ok(cosine(max_lr, max_lr / c.final_div_factor, (s - peak) / (last - peak)))
    }
}

/// Rescales `grads` in place so that their global 2-norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut p = [Array::scalar(theta)];
        let config = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config, &[&p[0]]);
        opt.update(&mut p, &[Array::scalar(g)], lr).unwrap();
        p[0].data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        assert_eq!(step_once(0.7, 0.0, 0.1, 0.0), 0.7);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        // m̂ = v̂ = 1, so Δθ = -lr / (1 + ε)
        let moved = step_once(0.5, 1.0, 1e-3, 0.0) - 0.5;
        assert!((moved + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let theta = step_once(2.0, 0.0, 0.1, 0.01);
        assert!((theta - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let c = OneCycleConfig::default();
        let total = 101;
        assert!((onecycle_lr(0, total, 1.0, &c).unwrap() - 1.0 / 25.0).abs() < 1e-15);
        assert_eq!(onecycle_lr(30, total, 1.0, &c).unwrap(), 1.0);
        let last = onecycle_lr(100, total, 1.0, &c).unwrap();
        assert!((last - 1e-4).abs() / 1e-4 < 1e-9);
        assert!(onecycle_lr(101, total, 1.0, &c).is_err());
    }

    #[test]
    fn schedule_rises_then_falls() {
        let c = OneCycleConfig::default();
        let lrs: Vec<f64> = (0..57).map(|s| onecycle_lr(s, 57, 3e-3, &c).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        let at = lrs.iter().position(|&v| v == peak).unwrap();
        assert!(lrs[..=at].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[at..].windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(peak, 3e-3);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![Array::from_vec([2], vec![3.0, 0.0]).unwrap(), Array::scalar(4.0)];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        let after: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut grads, 10.0), after.sqrt());
    }
}

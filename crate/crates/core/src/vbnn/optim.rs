use serde::{Deserialize, Serialize};

use super::loss::GradientPair;
use super::posterior::MeanFieldPosterior;
use crate::error::{Error, Result};

/// Hyperparameters of SGD with classic momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity_mu: Vec<f64>,
    pub velocity_rho: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity_mu: vec![0.0; param_count],
            velocity_rho: vec![0.0; param_count],
        })
    }
}

/// `v <- momentum * v + (g + wd * param); param <- param - lr * v`.
///
/// Weight decay touches `mu` only. Nothing is modified when a gradient
/// component is non-finite.
pub fn sgd_step(
    posterior: &mut MeanFieldPosterior,
    grads: &GradientPair,
    opt: &mut OptimizerState,
) -> Result<()> {
    let n = posterior.param_count();
    for (what, len) in [
        ("mu gradient", grads.d_mu.len()),
        ("rho gradient", grads.d_rho.len()),
        ("mu velocity", opt.velocity_mu.len()),
        ("rho velocity", opt.velocity_rho.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    if let Some(index) = grads
        .d_mu
        .iter()
        .chain(&grads.d_rho)
        .position(|g| !g.is_finite())
    {
        return Err(Error::NonFiniteGradient { index: index % n });
    }

    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = opt.config;
    for ((p, v), g) in posterior
        .mu
        .iter_mut()
        .zip(&mut opt.velocity_mu)
        .zip(&grads.d_mu)
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    for ((p, v), g) in posterior
        .rho
        .iter_mut()
        .zip(&mut opt.velocity_rho)
        .zip(&grads.d_rho)
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vbnn::shape::NetShape;

    fn single(mu: f64) -> MeanFieldPosterior {
        // 1 -> 1 linear net: weight and bias.
        let shape = NetShape::new(1, vec![], 1).unwrap();
        MeanFieldPosterior::from_parts(shape, vec![mu, 0.0], vec![-3.0, -3.0]).unwrap()
    }

    fn grads(g: f64) -> GradientPair {
        GradientPair {
            d_mu: vec![g, 0.0],
            d_rho: vec![0.0, 0.0],
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut post = single(0.7);
        let before = post.clone();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut opt = OptimizerState::new(cfg, 2).unwrap();
        sgd_step(&mut post, &grads(0.0), &mut opt).unwrap();
        assert_eq!(post, before);
    }

    #[test]
    fn plain_step() {
        let mut post = single(1.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut opt = OptimizerState::new(cfg, 2).unwrap();
        sgd_step(&mut post, &grads(1.0), &mut opt).unwrap();
        assert!((post.mu[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut post = single(0.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut opt = OptimizerState::new(cfg, 2).unwrap();
        sgd_step(&mut post, &grads(1.0), &mut opt).unwrap();
        assert!((post.mu[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut post, &grads(1.0), &mut opt).unwrap();
        assert!((post.mu[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_rho() {
        let mut post = single(1.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 };
        let mut opt = OptimizerState::new(cfg, 2).unwrap();
        sgd_step(&mut post, &grads(0.0), &mut opt).unwrap();
        assert!((post.mu[0] - 0.95).abs() < 1e-15);
        assert_eq!(post.rho, vec![-3.0, -3.0]);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut post = single(1.0);
        let before = post.clone();
        let mut opt = OptimizerState::new(SgdConfig::default(), 2).unwrap();
        let bad = GradientPair { d_mu: vec![0.0, 0.0], d_rho: vec![f64::NAN, 0.0] };
        assert!(matches!(
            sgd_step(&mut post, &bad, &mut opt),
            Err(Error::NonFiniteGradient { index: 0 })
        ));
        assert_eq!(post, before);
        assert!(opt.velocity_mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SgdConfig { lr: 0.1, momentum: 1.0, weight_decay: 0.0 };
        assert!(OptimizerState::new(bad, 1).is_err());
    }
}

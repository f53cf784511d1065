//! Mean-field Gaussian posterior over the flattened network parameters.
//!
//! Every parameter `i` is `N(mu_i, sigma_i^2)` with `sigma_i = softplus(rho_i)`,
//! so any real `rho` yields a valid standard deviation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::network::{check_input, check_params, Workspace};
use super::shape::NetShape;
use crate::error::{Error, Result};

/// Initial posterior standard deviation.
pub const INIT_SIGMA: f64 = 0.05;

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldPosterior {
    shape: NetShape,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MeanFieldPosterior {
    pub fn from_parts(shape: NetShape, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        check_params(&shape, &mu)?;
        check_params(&shape, &rho)?;
        if mu.iter().chain(&rho).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters"));
        }
        Ok(Self { shape, mu, rho })
    }

    /// Means drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer,
    /// standard deviations all equal to `init_sigma`.
    pub fn initialize<R: Rng + ?Sized>(shape: NetShape, init_sigma: f64, rng: &mut R) -> Result<Self> {
        if !(init_sigma > 0.0 && init_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "initial sigma must be positive, got {init_sigma}"
            )));
        }
        let n = shape.param_count();
        let mut mu = vec![0.0; n];
        for layer in shape.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for m in &mut mu[layer.weight_offset..layer.end()] {
                *m = dist.sample(rng);
            }
        }
        let rho = vec![softplus_inv(init_sigma); n];
        Ok(Self { shape, mu, rho })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// Reparameterized draw `theta = mu + sigma * epsilon`, `epsilon ~ N(0, I)`.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightSample {
        self.sampler().draw(rng)
    }

    /// Same as [`sample_weights`](Self::sample_weights) with a caller-supplied `epsilon`.
    pub fn sample_with_epsilon(&self, epsilon: Vec<f64>) -> Result<WeightSample> {
        check_params(&self.shape, &epsilon)?;
        Ok(self.sampler().with_epsilon(epsilon))
    }

    /// The deterministic network at the posterior mean.
    pub fn mean_weights(&self) -> WeightSample {
        WeightSample {
            shape: self.shape.clone(),
            theta: self.mu.clone(),
            epsilon: vec![0.0; self.mu.len()],
        }
    }

    /// Caches `sigma` for repeated draws from an unchanged posterior.
    pub fn sampler(&self) -> PosteriorSampler<'_> {
        PosteriorSampler {
            posterior: self,
            sigma: self.sigma(),
        }
    }
}

pub struct PosteriorSampler<'a> {
    posterior: &'a MeanFieldPosterior,
    sigma: Vec<f64>,
}

impl PosteriorSampler<'_> {
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightSample {
        let epsilon: Vec<f64> = (0..self.sigma.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        self.with_epsilon(epsilon)
    }

    pub(crate) fn shape(&self) -> &NetShape {
        &self.posterior.shape
    }

    /// Draws `theta` without keeping the noise.
    pub(crate) fn draw_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.posterior
            .mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect()
    }

    /// The prior frozen at this posterior snapshot.
    pub(crate) fn freeze(&self) -> FrozenPrior {
        FrozenPrior {
            mu: self.posterior.mu.clone(),
            sigma: self.sigma.clone(),
        }
    }

    fn with_epsilon(&self, epsilon: Vec<f64>) -> WeightSample {
        let theta = self
            .posterior
            .mu
            .iter()
            .zip(&self.sigma)
            .zip(&epsilon)
            .map(|((m, s), e)| m + s * e)
            .collect();
        WeightSample {
            shape: self.posterior.shape.clone(),
            theta,
            epsilon,
        }
    }
}

/// A concrete network drawn from the posterior, keeping the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub(crate) shape: NetShape,
    pub theta: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl WeightSample {
    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    /// Logits for `z` (no softmax).
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_input(&self.shape, z)?;
        let mut ws = Workspace::new(&self.shape);
        Ok(ws.forward(&self.theta, z).to_vec())
    }
}

/// The frozen previous posterior used as the prior of the next update.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPrior {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl FrozenPrior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::DimensionMismatch {
                what: "prior sigma",
                expected: mu.len(),
                actual: sigma.len(),
            });
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(
                "prior sigma must be positive and finite".into(),
            ));
        }
        Ok(Self { mu, sigma })
    }

    /// `N(0, 1)` for every parameter.
    pub fn standard_normal(param_count: usize) -> Self {
        Self {
            mu: vec![0.0; param_count],
            sigma: vec![1.0; param_count],
        }
    }

    pub fn from_posterior(posterior: &MeanFieldPosterior) -> Self {
        Self {
            mu: posterior.mu.clone(),
            sigma: posterior.sigma(),
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

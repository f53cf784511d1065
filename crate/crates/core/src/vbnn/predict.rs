//! Monte-Carlo predictive distribution and its entropy.

use rand::Rng;

use super::loss::{cross_entropy, log_sum_exp};
use super::network::{check_input, Workspace};
use super::posterior::{MeanFieldPosterior, PosteriorSampler};
use crate::error::{Error, Result};

/// Number of weight draws used for predictive uncertainty.
pub const DEFAULT_UNCERTAINTY_SAMPLES: usize = 5;

/// Natural-log entropy with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Average of `softmax(forward(theta_k, z))` over `k` independent draws.
pub fn predict_proba<R: Rng + ?Sized>(
    posterior: &MeanFieldPosterior,
    z: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let predictor = Predictor::sampled(posterior, k, rng)?;
    predictor.proba(z)
}

/// Entropy of [`predict_proba`].
pub fn uncertainty<R: Rng + ?Sized>(
    posterior: &MeanFieldPosterior,
    z: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(entropy(&predict_proba(posterior, z, k, rng)?))
}

/// Scores kept alongside a buffered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub uncertainty: f64,
}

/// A fixed ensemble of networks drawn from a posterior snapshot.
///
/// Drawing once and evaluating many embeddings keeps batch scoring and
/// evaluation cheap; the ensemble is immutable so it can be shared across threads.
#[derive(Debug, Clone)]
pub struct Predictor {
    shape: crate::vbnn::NetShape,
    thetas: Vec<Vec<f64>>,
}

impl Predictor {
    pub fn sampled<R: Rng + ?Sized>(
        posterior: &MeanFieldPosterior,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("sample count k must be >= 1".into()));
        }
        Self::from_sampler(&posterior.sampler(), k, rng)
    }

    pub(crate) fn from_sampler<R: Rng + ?Sized>(
        sampler: &PosteriorSampler<'_>,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("sample count k must be >= 1".into()));
        }
        let thetas = (0..k).map(|_| sampler.draw_theta(rng)).collect();
        Ok(Self {
            shape: sampler.shape().clone(),
            thetas,
        })
    }

    /// The single network at the posterior mean.
    pub fn mean(posterior: &MeanFieldPosterior) -> Self {
        Self {
            shape: posterior.shape().clone(),
            thetas: vec![posterior.mu.clone()],
        }
    }

    pub fn samples(&self) -> usize {
        self.thetas.len()
    }

    /// Averaged class probabilities together with the averaged logits.
    fn evaluate(&self, ws: &mut Workspace, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_input(&self.shape, z)?;
        let c = self.shape.output_dim;
        let mut proba = vec![0.0; c];
        let mut logits_mean = vec![0.0; c];
        for theta in &self.thetas {
            let logits = ws.forward(theta, z);
            let lse = log_sum_exp(logits);
            for ((p, m), &l) in proba.iter_mut().zip(&mut logits_mean).zip(logits) {
                *p += (l - lse).exp();
                *m += l;
            }
        }
        let k = self.thetas.len() as f64;
        proba.iter_mut().for_each(|p| *p /= k);
        logits_mean.iter_mut().for_each(|m| *m /= k);
        // Renormalize away rounding so the vector sums to one.
        let total: f64 = proba.iter().sum();
        proba.iter_mut().for_each(|p| *p /= total);
        Ok((proba, logits_mean))
    }

    pub fn proba(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(&self.shape);
        Ok(self.evaluate(&mut ws, z)?.0)
    }

    /// Predicted class, ties to the lowest index.
    pub fn classify(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.proba(z)?))
    }

    /// Loss `-ln p(y)`, mean logits and entropy under this ensemble.
    pub fn score(&self, z: &[f64], y: usize) -> Result<SampleScore> {
        let mut ws = Workspace::new(&self.shape);
        self.score_with(&mut ws, z, y)
    }

    /// Scores many `(z, y)` pairs reusing one workspace.
    pub fn score_all<'a, I>(&self, items: I) -> Result<Vec<SampleScore>>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut ws = Workspace::new(&self.shape);
        items
            .into_iter()
            .map(|(z, y)| self.score_with(&mut ws, z, y))
            .collect()
    }

    fn score_with(&self, ws: &mut Workspace, z: &[f64], y: usize) -> Result<SampleScore> {
        let (proba, logits) = self.evaluate(ws, z)?;
        if y >= proba.len() {
            return Err(Error::ClassOutOfRange {
                index: y,
                classes: proba.len(),
            });
        }
        let loss = if self.thetas.len() == 1 {
            cross_entropy(&logits, y)?
        } else {
            -proba[y].max(f64::MIN_POSITIVE).ln()
        };
        Ok(SampleScore {
            loss,
            uncertainty: entropy(&proba),
            logits,
        })
    }

    /// Predicted classes for a batch of embeddings.
    pub fn classify_all<'a, I>(&self, zs: I) -> Result<Vec<usize>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut ws = Workspace::new(&self.shape);
        zs.into_iter()
            .map(|z| Ok(argmax(&self.evaluate(&mut ws, z)?.0)))
            .collect()
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

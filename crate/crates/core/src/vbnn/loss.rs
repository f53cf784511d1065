//! The streaming objective: replayed negative log-likelihood, the KL pull toward
//! the previous posterior, and the logit-matching distillation penalty.

use rand::Rng;

use super::network::{check_input, Workspace};
use super::posterior::{sigmoid, FrozenPrior, MeanFieldPosterior, WeightSample};
use crate::error::{Error, Result};

/// A labelled embedding.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub z: &'a [f64],
    pub y: usize,
}

/// An embedding paired with the logits stored for it in the past.
#[derive(Debug, Clone, Copy)]
pub struct Distill<'a> {
    pub z: &'a [f64],
    pub h: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub d_mu: Vec<f64>,
    pub d_rho: Vec<f64>,
}

/// Term weights of [`variational_objective`]:
/// `nll_scale * sum NLL + kl_weight * KL(q || prior) + kd_weight * sum ||h - f(z)||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub nll_scale: f64,
    pub kl_weight: f64,
    pub kd_weight: f64,
}

/// `ln sum exp(x)` shifted by the maximum.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| (l - lse).exp()).collect()
}

/// `-ln softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::ClassOutOfRange {
            index: y,
            classes: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[y]).max(0.0))
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &MeanFieldPosterior, p: &FrozenPrior) -> Result<f64> {
    if q.param_count() != p.len() {
        return Err(Error::DimensionMismatch {
            what: "prior",
            expected: q.param_count(),
            actual: p.len(),
        });
    }
    let kl = kl_terms(&q.mu, &q.sigma(), p);
    Ok(kl.max(0.0))
}

/// Sum of per-parameter KL terms. Parameters whose mean and standard
/// deviation equal the prior's contribute exactly zero and skip the log.
fn kl_terms(q_mu: &[f64], q_sigma: &[f64], p: &FrozenPrior) -> f64 {
    q_mu.iter()
        .zip(q_sigma)
        .zip(p.mu().iter().zip(p.sigma()))
        .map(|((&qm, &qs), (&pm, &ps))| {
            if qm == pm && qs == ps {
                return 0.0;
            }
            let d = qm - pm;
            (ps / qs).ln() + (qs * qs + d * d) / (2.0 * ps * ps) - 0.5
        })
        .sum::<f64>()
}

/// Negative log-likelihood of class `y` under the sampled network.
pub fn nll(sample: &WeightSample, z: &[f64], y: usize) -> Result<f64> {
    if y >= sample.shape.output_dim {
        return Err(Error::ClassOutOfRange {
            index: y,
            classes: sample.shape.output_dim,
        });
    }
    cross_entropy(&sample.forward(z)?, y)
}

/// `lambda2 * sum_n ||h_n - f(z_n)||^2` over the distillation batch.
pub fn kd_loss(sample: &WeightSample, batch: &[Distill<'_>], lambda2: f64) -> Result<f64> {
    let mut ws = Workspace::new(&sample.shape);
    let mut total = 0.0;
    for pair in batch {
        check_distill(sample, pair)?;
        let logits = ws.forward(&sample.theta, pair.z);
        total += logits
            .iter()
            .zip(pair.h)
            .map(|(f, h)| (h - f) * (h - f))
            .sum::<f64>();
    }
    Ok(lambda2 * total)
}

fn check_distill(sample: &WeightSample, pair: &Distill<'_>) -> Result<()> {
    check_input(&sample.shape, pair.z)?;
    if pair.h.len() != sample.shape.output_dim {
        return Err(Error::DimensionMismatch {
            what: "stored logits",
            expected: sample.shape.output_dim,
            actual: pair.h.len(),
        });
    }
    Ok(())
}

/// Evaluates the weighted objective at one weight draw and returns exact
/// gradients with respect to `mu` and `rho`.
///
/// Gradients flow through `theta = mu + softplus(rho) * epsilon`, so
/// `d theta / d mu = 1` and `d theta / d rho = epsilon * sigmoid(rho)`; the KL
/// term contributes its closed-form gradient directly.
pub fn variational_objective(
    posterior: &MeanFieldPosterior,
    prior: &FrozenPrior,
    sample: &WeightSample,
    labeled: &[Labeled<'_>],
    distill: &[Distill<'_>],
    weights: ObjectiveWeights,
) -> Result<(f64, GradientPair)> {
    objective_with_sigma(posterior, &posterior.sigma(), prior, sample, labeled, distill, weights)
}

/// [`variational_objective`] with `sigma = softplus(rho)` already computed.
pub(crate) fn objective_with_sigma(
    posterior: &MeanFieldPosterior,
    sigma: &[f64],
    prior: &FrozenPrior,
    sample: &WeightSample,
    labeled: &[Labeled<'_>],
    distill: &[Distill<'_>],
    weights: ObjectiveWeights,
) -> Result<(f64, GradientPair)> {
    let shape = posterior.shape();
    let n = posterior.param_count();
    if sample.theta.len() != n || sample.shape != *shape {
        return Err(Error::DimensionMismatch {
            what: "weight sample",
            expected: n,
            actual: sample.theta.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad_theta = vec![0.0; n];
    let mut ws = Workspace::new(shape);
    let mut d_logits = vec![0.0; shape.output_dim];

    if weights.nll_scale != 0.0 {
        for item in labeled {
            check_input(shape, item.z)?;
            let logits = ws.forward(&sample.theta, item.z);
            loss += weights.nll_scale * cross_entropy(logits, item.y)?;
            let lse = log_sum_exp(logits);
            for (c, (d, &l)) in d_logits.iter_mut().zip(logits).enumerate() {
                let p = (l - lse).exp();
                let target = if c == item.y { 1.0 } else { 0.0 };
                *d = weights.nll_scale * (p - target);
            }
            ws.backward(&sample.theta, &d_logits, &mut grad_theta);
        }
    } else {
        for item in labeled {
            check_input(shape, item.z)?;
            if item.y >= shape.output_dim {
                return Err(Error::ClassOutOfRange {
                    index: item.y,
                    classes: shape.output_dim,
                });
            }
        }
    }

    if weights.kd_weight != 0.0 {
        for pair in distill {
            check_distill(sample, pair)?;
            let logits = ws.forward(&sample.theta, pair.z);
            let mut sq = 0.0;
            for ((d, &f), &h) in d_logits.iter_mut().zip(logits).zip(pair.h) {
                sq += (h - f) * (h - f);
                *d = 2.0 * weights.kd_weight * (f - h);
            }
            loss += weights.kd_weight * sq;
            ws.backward(&sample.theta, &d_logits, &mut grad_theta);
        }
    }

    let mut d_mu = grad_theta;
    let mut d_rho: Vec<f64> = d_mu
        .iter()
        .zip(&sample.epsilon)
        .map(|(g, e)| g * e)
        .collect();

    if weights.kl_weight != 0.0 {
        if prior.len() != n {
            return Err(Error::DimensionMismatch {
                what: "prior",
                expected: n,
                actual: prior.len(),
            });
        }
        loss += weights.kl_weight * kl_terms(&posterior.mu, sigma, prior).max(0.0);
        let lam = weights.kl_weight;
        for i in 0..n {
            let ps2 = prior.sigma()[i] * prior.sigma()[i];
            d_mu[i] += lam * (posterior.mu[i] - prior.mu()[i]) / ps2;
            d_rho[i] += lam * (sigma[i] / ps2 - 1.0 / sigma[i]);
        }
    } else if prior.len() != n {
        return Err(Error::DimensionMismatch {
            what: "prior",
            expected: n,
            actual: prior.len(),
        });
    }
    for (dr, &r) in d_rho.iter_mut().zip(&posterior.rho) {
        *dr *= sigmoid(r);
    }
    Ok((loss, GradientPair { d_mu, d_rho }))
}

/// One-sample estimate of the streaming objective for a single incoming example:
/// `nll(new) + sum nll(replay) + lambda1 * KL(q || prior) + kd_loss(kd, lambda2)`.
///
/// Draws one set of weights shared by every term.
#[allow(clippy::too_many_arguments)]
pub fn streaming_loss<R: Rng + ?Sized>(
    posterior: &MeanFieldPosterior,
    prior: &FrozenPrior,
    new_sample: Labeled<'_>,
    replay: &[Labeled<'_>],
    kd: &[Distill<'_>],
    lambda1: f64,
    lambda2: f64,
    rng: &mut R,
) -> Result<(f64, GradientPair)> {
    let sampler = posterior.sampler();
    let sample = sampler.draw(rng);
    streaming_objective(posterior, sampler.sigma(), prior, &sample, new_sample, replay, kd, lambda1, lambda2)
}

/// [`streaming_loss`] at a fixed weight draw.
#[allow(clippy::too_many_arguments)]
pub fn streaming_loss_at(
    posterior: &MeanFieldPosterior,
    prior: &FrozenPrior,
    sample: &WeightSample,
    new_sample: Labeled<'_>,
    replay: &[Labeled<'_>],
    kd: &[Distill<'_>],
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, GradientPair)> {
    streaming_objective(
        posterior,
        &posterior.sigma(),
        prior,
        sample,
        new_sample,
        replay,
        kd,
        lambda1,
        lambda2,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn streaming_objective(
    posterior: &MeanFieldPosterior,
    sigma: &[f64],
    prior: &FrozenPrior,
    sample: &WeightSample,
    new_sample: Labeled<'_>,
    replay: &[Labeled<'_>],
    kd: &[Distill<'_>],
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, GradientPair)> {
    let mut labeled = Vec::with_capacity(replay.len() + 1);
    labeled.push(new_sample);
    labeled.extend_from_slice(replay);
    objective_with_sigma(
        posterior,
        sigma,
        prior,
        sample,
        &labeled,
        kd,
        ObjectiveWeights {
            nll_scale: 1.0,
            kl_weight: lambda1,
            kd_weight: lambda2,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vbnn::posterior::softplus_inv;
    use crate::vbnn::shape::NetShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(mu: f64, sigma: f64) -> MeanFieldPosterior {
        // A 1 -> 1 linear net with no hidden layer has two parameters.
        let shape = NetShape::new(1, vec![], 1).unwrap();
        MeanFieldPosterior::from_parts(shape, vec![mu, mu], vec![softplus_inv(sigma); 2]).unwrap()
    }

    #[test]
    fn kl_hand_values() {
        let p = FrozenPrior::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        // Two identical parameters, so each hand value doubles.
        assert!((kl_diag_gaussians(&one_param(0.0, 1.0), &p).unwrap()).abs() < 1e-12);
        let kl = kl_diag_gaussians(&one_param(1.0, 1.0), &p).unwrap();
        assert!((kl / 2.0 - 0.5).abs() < 1e-9, "{kl}");
        let kl = kl_diag_gaussians(&one_param(0.0, 2.0), &p).unwrap();
        let expected = 0.5f64.ln() + 4.0 / 2.0 - 0.5;
        assert!((kl / 2.0 - expected).abs() < 1e-9);
        assert!((expected - 0.806853).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        let p = FrozenPrior::standard_normal(5);
        assert!(matches!(
            kl_diag_gaussians(&one_param(0.0, 1.0), &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_hand_values() {
        let uniform = vec![0.3; 10];
        assert!((cross_entropy(&uniform, 4).unwrap() - 10f64.ln()).abs() < 1e-12);
        let a = cross_entropy(&[10.0, 0.0], 0).unwrap();
        assert!((a - (-10f64).exp().ln_1p()).abs() < 1e-15);
        assert!((a - 4.54e-5).abs() < 1e-7);
        let b = cross_entropy(&[10.0, 0.0], 1).unwrap();
        assert!((b - 10.0000454).abs() < 1e-7);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let v = cross_entropy(&[1000.0, -1000.0], 1).unwrap();
        assert!((v - 2000.0).abs() < 1e-9);
    }

    fn linear_two_class() -> (NetShape, WeightSample) {
        // 1 input, 2 outputs, no hidden layer: logits = w * z + b.
        let shape = NetShape::new(1, vec![], 2).unwrap();
        let post = MeanFieldPosterior::from_parts(
            shape.clone(),
            vec![0.0, 1.0, 0.0, 0.0],
            vec![-40.0; 4],
        )
        .unwrap();
        (shape, post.mean_weights())
    }

    #[test]
    fn kd_hand_values() {
        let (_, w) = linear_two_class();
        // z = 1 gives current logits [0, 1].
        let z = [1.0];
        let same = [0.0, 1.0];
        assert_eq!(kd_loss(&w, &[Distill { z: &z, h: &same }], 0.3).unwrap(), 0.0);
        let h = [1.0, 0.0];
        let one = kd_loss(&w, &[Distill { z: &z, h: &h }], 0.3).unwrap();
        assert!((one - 0.6).abs() < 1e-12);
        let pair = [Distill { z: &z, h: &h }; 2];
        assert_eq!(kd_loss(&w, &pair, 0.3).unwrap(), 2.0 * one);
        assert_eq!(kd_loss(&w, &[], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn reduction_to_plain_nll() {
        let shape = NetShape::new(3, vec![5, 4], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let post = MeanFieldPosterior::initialize(shape, 0.05, &mut rng).unwrap();
        let prior = FrozenPrior::standard_normal(post.param_count());
        let sample = post.sample_weights(&mut rng);
        let z = [0.3, -0.2, 0.9];
        let (loss, _) = streaming_loss_at(
            &post,
            &prior,
            &sample,
            Labeled { z: &z, y: 2 },
            &[],
            &[],
            0.0,
            0.0,
        )
        .unwrap();
        assert!((loss - nll(&sample, &z, 2).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn kl_term_vanishes_at_matching_prior() {
        let shape = NetShape::new(2, vec![3], 2).unwrap();
        let n = shape.param_count();
        let post = MeanFieldPosterior::from_parts(shape, vec![0.1; n], vec![-40.0; n]).unwrap();
        let prior = FrozenPrior::from_posterior(&post);
        let sample = post.mean_weights();
        let z = [1.0, 2.0];
        let (with_kl, g1) = streaming_loss_at(
            &post, &prior, &sample, Labeled { z: &z, y: 0 }, &[], &[], 1.0, 0.0,
        )
        .unwrap();
        let (without, g0) = streaming_loss_at(
            &post, &prior, &sample, Labeled { z: &z, y: 0 }, &[], &[], 0.0, 0.0,
        )
        .unwrap();
        assert!((with_kl - without).abs() < 1e-12);
        for (a, b) in g1.d_mu.iter().zip(&g0.d_mu) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = NetShape::new(4, vec![8, 8], 3).unwrap();
        let n = shape.param_count();
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let mu: Vec<f64> = (0..n).map(|_| 0.5 * gauss(&mut rng)).collect();
        let rho: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..0.0)).collect();
        let eps: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let prior_mu: Vec<f64> = (0..n).map(|_| 0.3 * gauss(&mut rng)).collect();
        let prior_sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let prior = FrozenPrior::new(prior_mu, prior_sigma).unwrap();
        let zs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| gauss(&mut rng)).collect()).collect();
        let hs: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| gauss(&mut rng)).collect()).collect();
        let eval = |mu: &[f64], rho: &[f64]| {
            let post = MeanFieldPosterior::from_parts(shape.clone(), mu.to_vec(), rho.to_vec()).unwrap();
            let sample = post.sample_with_epsilon(eps.clone()).unwrap();
            let replay = [Labeled { z: &zs[1], y: 1 }, Labeled { z: &zs[2], y: 2 }];
            let kd = [Distill { z: &zs[3], h: &hs[0] }, Distill { z: &zs[4], h: &hs[1] }];
            streaming_loss_at(&post, &prior, &sample, Labeled { z: &zs[0], y: 0 }, &replay, &kd, 0.7, 0.3)
                .unwrap()
        };
        let (_, g) = eval(&mu, &rho);
        let h = 1e-5;
        let mut num_mu = vec![0.0; n];
        let mut num_rho = vec![0.0; n];
        for i in 0..n {
            let mut a = mu.clone();
            a[i] += h;
            let mut b = mu.clone();
            b[i] -= h;
            num_mu[i] = (eval(&a, &rho).0 - eval(&b, &rho).0) / (2.0 * h);
            let mut a = rho.clone();
            a[i] += h;
            let mut b = rho.clone();
            b[i] -= h;
            num_rho[i] = (eval(&mu, &a).0 - eval(&mu, &b).0) / (2.0 * h);
        }
        let rel = |x: &[f64], y: &[f64]| {
            let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = x.iter().zip(y).map(|(a, b)| a * a + b * b).sum::<f64>().sqrt();
            diff / norm
        };
        assert!(rel(&g.d_mu, &num_mu) < 1e-6, "mu {}", rel(&g.d_mu, &num_mu));
        assert!(rel(&g.d_rho, &num_rho) < 1e-6, "rho {}", rel(&g.d_rho, &num_rho));
    }
}

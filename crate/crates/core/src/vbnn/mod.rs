//! Mean-field variational MLP classifier: sampling, forward/backward passes,
//! the streaming objective, predictive uncertainty and the SGD update.

mod loss;
mod network;
mod optim;
mod posterior;
mod predict;
mod shape;

pub use loss::{
    cross_entropy, kd_loss, kl_diag_gaussians, log_sum_exp, nll, softmax, streaming_loss,
    streaming_loss_at, variational_objective, Distill, GradientPair, Labeled, ObjectiveWeights,
};
pub use network::forward_params;
pub(crate) use loss::{objective_with_sigma, streaming_objective};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use posterior::{
    sigmoid, softplus, softplus_inv, FrozenPrior, MeanFieldPosterior, PosteriorSampler,
    WeightSample, INIT_SIGMA,
};
pub use predict::{
    argmax, entropy, predict_proba, uncertainty, Predictor, SampleScore,
    DEFAULT_UNCERTAINTY_SAMPLES,
};
pub use shape::{LayerLayout, NetShape, DEFAULT_HIDDEN};

/// Logits of a drawn network for one embedding.
pub fn forward(sample: &WeightSample, z: &[f64]) -> crate::Result<Vec<f64>> {
    sample.forward(z)
}

/// Reparameterized weight draw from the posterior.
pub fn sample_weights<R: rand::Rng + ?Sized>(
    posterior: &MeanFieldPosterior,
    rng: &mut R,
) -> WeightSample {
    posterior.sample_weights(rng)
}

//! Dense ReLU network evaluated on a flat parameter vector, with a hand-written
//! backward pass.

use super::shape::{LayerLayout, NetShape};
use crate::error::{Error, Result};

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-layer activations of one forward pass. `acts[0]` is the input, the
/// last entry holds the logits, everything in between is post-ReLU.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn new(shape: &NetShape) -> Self {
        let mut acts = vec![vec![0.0; shape.input_dim]];
        acts.extend(shape.hidden_dims.iter().map(|&h| vec![0.0; h]));
        acts.push(vec![0.0; shape.output_dim]);
        Self { acts }
    }

    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace always has an output layer")
    }
}

/// Reusable buffers for forward/backward passes over one network shape.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    pub(crate) layers: Vec<LayerLayout>,
    pub(crate) trace: Trace,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(shape: &NetShape) -> Self {
        let width = shape.max_width();
        Self {
            layers: shape.layers(),
            trace: Trace::new(shape),
            delta: Vec::with_capacity(width),
            delta_prev: Vec::with_capacity(width),
        }
    }

    /// Runs the network on `z`, leaving the activations in `self.trace`.
    pub(crate) fn forward(&mut self, theta: &[f64], z: &[f64]) -> &[f64] {
        let acts = &mut self.trace.acts;
        acts[0].copy_from_slice(z);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let weights = &theta[layer.weight_offset..layer.bias_offset];
            let biases = &theta[layer.bias_offset..layer.end()];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &weights[j * layer.fan_in..(j + 1) * layer.fan_in];
                let pre = biases[j] + dot(row, input);
                *o = if l < last { pre.max(0.0) } else { pre };
            }
        }
        self.trace.logits()
    }

    /// Accumulates `d loss / d theta` into `grad`, given `d loss / d logits`
    /// for the activations currently held in the trace.
    pub(crate) fn backward(&mut self, theta: &[f64], d_logits: &[f64], grad: &mut [f64]) {
        self.delta.clear();
        self.delta.extend_from_slice(d_logits);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &self.trace.acts[l];
            let weights = &theta[layer.weight_offset..layer.bias_offset];
            {
                let (g_w, g_b) = grad[layer.weight_offset..layer.end()]
                    .split_at_mut(layer.fan_in * layer.fan_out);
                for (j, &d) in self.delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, input, &mut g_w[j * layer.fan_in..(j + 1) * layer.fan_in]);
                        g_b[j] += d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            self.delta_prev.clear();
            self.delta_prev.resize(layer.fan_in, 0.0);
            for (j, &d) in self.delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &weights[j * layer.fan_in..(j + 1) * layer.fan_in], &mut self.delta_prev);
                }
            }
            // ReLU gate: post-activation is positive exactly when the pre-activation was.
            for (dp, &a) in self.delta_prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *dp = 0.0;
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
    }
}

pub(crate) fn check_input(shape: &NetShape, z: &[f64]) -> Result<()> {
    if z.len() != shape.input_dim {
        return Err(Error::DimensionMismatch {
            what: "embedding",
            expected: shape.input_dim,
            actual: z.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_params(shape: &NetShape, theta: &[f64]) -> Result<()> {
    let expected = shape.param_count();
    if theta.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected,
            actual: theta.len(),
        });
    }
    Ok(())
}

/// Logits `W3·relu(W2·relu(W1·z + b1) + b2) + b3` for one embedding; no softmax.
pub fn forward_params(shape: &NetShape, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    check_params(shape, theta)?;
    check_input(shape, z)?;
    let mut ws = Workspace::new(shape);
    Ok(ws.forward(theta, z).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetShape {
        NetShape::new(1, vec![1, 1], 1).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let shape = NetShape::new(3, vec![4, 5], 2).unwrap();
        let theta = vec![0.0; shape.param_count()];
        assert_eq!(forward_params(&shape, &theta, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_chain_passes_positive_signal() {
        // layout: w1 b1 w2 b2 w3 b3
        let theta = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(forward_params(&tiny(), &theta, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn negative_preactivation_is_cut() {
        let theta = [-1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(forward_params(&tiny(), &theta, &[3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn wrong_embedding_length_names_both_sizes() {
        let shape = NetShape::new(3, vec![2], 2).unwrap();
        let theta = vec![0.0; shape.param_count()];
        match forward_params(&shape, &theta, &[1.0]) {
            Err(Error::DimensionMismatch { expected, actual, .. }) => {
                assert_eq!((expected, actual), (3, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (1..=7).map(f64::from).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 28.0);
    }
}

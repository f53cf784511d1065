use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

/// Layer sizes of the plastic MLP: `input -> hidden... -> output`, ReLU between layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

/// Where one dense layer lives inside the flat parameter vector.
///
/// Weights are stored row-major as `fan_out x fan_in`, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl NetShape {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidParameter("input_dim must be >= 1".into()));
        }
        if output_dim == 0 {
            return Err(Error::InvalidParameter("output_dim must be >= 1".into()));
        }
        if let Some(pos) = hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::InvalidParameter(format!(
                "hidden layer {pos} has zero width"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
        })
    }

    /// Two hidden layers of 256 units.
    pub fn with_default_hidden(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(input_dim, DEFAULT_HIDDEN.to_vec(), output_dim)
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.output_dim);

        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = layout.end();
                layout
            })
            .collect()
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, LayerLayout::end)
    }

    /// Widest activation vector, used to size scratch buffers.
    pub(crate) fn max_width(&self) -> usize {
        self.hidden_dims
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_hand_count() {
        let shape = NetShape::new(4, vec![8, 8], 3).unwrap();
        assert_eq!(shape.param_count(), 4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3);
        let default = NetShape::with_default_hidden(32, 10).unwrap();
        assert_eq!(default.param_count(), 32 * 256 + 256 + 256 * 256 + 256 + 256 * 10 + 10);
    }

    #[test]
    fn layers_tile_the_parameter_vector() {
        let shape = NetShape::new(5, vec![7, 3], 2).unwrap();
        let mut next = 0;
        for layer in shape.layers() {
            assert_eq!(layer.weight_offset, next);
            assert_eq!(layer.bias_offset, next + layer.fan_in * layer.fan_out);
            next = layer.end();
        }
        assert_eq!(next, shape.param_count());
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(NetShape::new(0, vec![4], 2).is_err());
        assert!(NetShape::new(3, vec![4, 0], 2).is_err());
        assert!(NetShape::new(3, vec![4], 0).is_err());
    }
}

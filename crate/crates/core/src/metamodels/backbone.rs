use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::taskgen::RngStream;

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tape handles of a bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [1, weight.cols()] {
            return Err(Error::Shape {
                primitive: "linear",
                shapes: vec![weight.shape().to_vec(), bias.shape().to_vec()],
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![input, output]),
            bias: Tensor::zeros(vec![1, output]),
        }
    }

    /// Normal weights with standard deviation `gain / sqrt(input)`, zero bias.
    pub fn random(input: usize, output: usize, gain: f64, rng: &RngStream) -> Self {
        let mut r = rng.rng();
        let std = gain / (input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| std * r.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::from_parts_unchecked(vec![input, output], data),
            bias: Tensor::zeros(vec![1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.detached().requiring_grad()),
            bias: tape.leaf(self.bias.detached().requiring_grad()),
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let n = tape.value(x)?.rows();
        let xw = tape.matmul(x, self.weight)?;
        let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0));
        let bias = tape.matmul(ones, self.bias)?;
        tape.add(xw, bias)
    }

    pub fn ids(&self) -> [NodeId; 2] {
        [self.weight, self.bias]
    }
}

/// MLP feature extractor with ReLU between layers and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub layers: Vec<BoundLinear>,
}

impl Backbone {
    /// He-initialised MLP with the given layer widths (input first).
    pub fn new(widths: &[usize], rng: &RngStream) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("backbone widths {widths:?} need >= 2 positive entries")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::random(w[0], w[1], 2f64.sqrt(), &rng.index(i as u64)))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("backbone needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    primitive: "backbone",
                    shapes: vec![pair[0].weight.shape().to_vec(), pair[1].weight.shape().to_vec()],
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("backbone needs at least one layer"));
        }
        Self::from_layers(widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect())
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].input_dim())
            .chain(self.layers.iter().map(Linear::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Embeds a `[n, d]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let input = tape.constant(x.detached());
        let out = bound.forward(&mut tape, input)?;
        Ok(tape.value(out)?.detached())
    }

    /// Binds the parameters without gradient tracking.
    pub(crate) fn bind_constant(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            layers: self
                .layers
                .iter()
                .map(|l| BoundLinear {
                    weight: tape.constant(l.weight.detached()),
                    bias: tape.constant(l.bias.detached()),
                })
                .collect(),
        }
    }
}

impl BoundBackbone {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let input = tape.value(x)?;
        let expected = tape.value(self.layers[0].weight)?.rows();
        if input.shape().len() != 2 || input.cols() != expected {
            return Err(Error::Shape {
                primitive: "backbone",
                shapes: vec![input.shape().to_vec(), vec![expected]],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(BoundLinear::ids).collect()
    }
}

/// Convenience: embeds `x` with `backbone`.
pub fn backbone_forward(backbone: &Backbone, x: &Tensor) -> Result<Tensor> {
    backbone.forward(x)
}

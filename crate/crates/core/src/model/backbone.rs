use rand::Rng;

use crate::nn::{relu_backward, relu_in_place, sigmoid, Conv2d, FeatureMap};

/// Feature extractor in front of the prototype layer.
///
/// Only the bundled tiny convolutional backbone ships; pretrained adapters
/// plug in as further variants.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneAdapter {
    TinyConv(TinyConv),
}

/// Stack of 3×3 stride-2 convolutions with ReLU. Total stride is `2^blocks`.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyConv {
    pub layers: Vec<Conv2d>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    input_sizes: Vec<(usize, usize)>,
    cols: Vec<Vec<f64>>,
    outputs: Vec<FeatureMap>,
}

impl TinyConv {
    pub fn new<R: Rng>(in_channels: usize, channels: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(channels.len());
        let mut c_in = in_channels;
        for &c in channels {
            layers.push(Conv2d::new(c_in, c, 3, 2, 1, rng));
            c_in = c;
        }
        TinyConv { layers }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_channels).collect()
    }
}

impl BackboneAdapter {
    pub fn tiny_conv<R: Rng>(channels: &[usize], rng: &mut R) -> Self {
        BackboneAdapter::TinyConv(TinyConv::new(3, channels, rng))
    }

    pub fn id(&self) -> &'static str {
        match self {
            BackboneAdapter::TinyConv(_) => "tiny-conv",
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneAdapter::TinyConv(t) => t.layers.last().map_or(3, |l| l.out_channels),
        }
    }

    /// Latent grid extents for an input of the given size.
    pub fn output_grid(&self, input: (usize, usize)) -> (usize, usize) {
        match self {
            BackboneAdapter::TinyConv(t) => {
                t.layers.iter().fold(input, |(h, w), l| l.output_size(h, w))
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        match self {
            BackboneAdapter::TinyConv(t) => t.layers.iter().map(Conv2d::num_parameters).sum(),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        match self {
            BackboneAdapter::TinyConv(t) => {
                let mut cur = x.clone();
                for l in &t.layers {
                    let (mut out, _) = l.forward(&cur);
                    relu_in_place(&mut out);
                    cur = out;
                }
                cur
            }
        }
    }

    pub fn forward_traced(&self, x: &FeatureMap) -> (FeatureMap, BackboneTrace) {
        match self {
            BackboneAdapter::TinyConv(t) => {
                let mut trace = BackboneTrace {
                    input_sizes: Vec::with_capacity(t.layers.len()),
                    cols: Vec::with_capacity(t.layers.len()),
                    outputs: Vec::with_capacity(t.layers.len()),
                };
                let mut cur = x.clone();
                for l in &t.layers {
                    trace.input_sizes.push((cur.height, cur.width));
                    let (mut out, cols) = l.forward(&cur);
                    relu_in_place(&mut out);
                    trace.cols.push(cols);
                    trace.outputs.push(out.clone());
                    cur = out;
                }
                (cur, trace)
            }
        }
    }

    /// Accumulates parameter gradients into `grad` (flattened layer order).
    pub fn backward(&self, trace: &BackboneTrace, grad_out: FeatureMap, grad: &mut [f64]) {
        match self {
            BackboneAdapter::TinyConv(t) => {
                let offsets: Vec<usize> = t
                    .layers
                    .iter()
                    .scan(0, |acc, l| {
                        let start = *acc;
                        *acc += l.num_parameters();
                        Some(start)
                    })
                    .collect();
                let mut g = grad_out;
                for (i, l) in t.layers.iter().enumerate().rev() {
                    relu_backward(&trace.outputs[i], &mut g);
                    let slot = &mut grad[offsets[i]..offsets[i] + l.num_parameters()];
                    match l.backward(trace.input_sizes[i], &trace.cols[i], &g, slot, i > 0) {
                        Some(next) => g = next,
                        None => break,
                    }
                }
            }
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        match self {
            BackboneAdapter::TinyConv(t) => {
                t.layers.iter().for_each(|l| l.write_parameters(&mut out))
            }
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) {
        match self {
            BackboneAdapter::TinyConv(t) => {
                let mut at = 0;
                for l in &mut t.layers {
                    at += l.read_parameters(&values[at..]);
                }
            }
        }
    }
}

/// Two pointwise convolutions mapping backbone channels to the latent
/// dimension. The output is squashed by a sigmoid when `squash` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct AddOnLayers {
    pub first: Conv2d,
    pub second: Conv2d,
    pub squash: bool,
}

#[derive(Clone, Debug)]
pub struct AddOnTrace {
    hidden: FeatureMap,
    output: FeatureMap,
}

impl AddOnLayers {
    pub fn new<R: Rng>(in_channels: usize, dim: usize, squash: bool, rng: &mut R) -> Self {
        AddOnLayers {
            first: Conv2d::new(in_channels, dim, 1, 1, 0, rng),
            second: Conv2d::new(dim, dim, 1, 1, 0, rng),
            squash,
        }
    }

    pub fn dim(&self) -> usize {
        self.second.out_channels
    }

    pub fn num_parameters(&self) -> usize {
        self.first.num_parameters() + self.second.num_parameters()
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &FeatureMap) -> (FeatureMap, AddOnTrace) {
        let (mut hidden, _) = self.first.forward(x);
        relu_in_place(&mut hidden);
        let (mut out, _) = self.second.forward(&hidden);
        if self.squash {
            out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        let trace = AddOnTrace {
            hidden,
            output: out.clone(),
        };
        (out, trace)
    }

    /// Returns the gradient w.r.t. the add-on input when `need_input`.
    pub fn backward(
        &self,
        input: &FeatureMap,
        trace: &AddOnTrace,
        mut grad_out: FeatureMap,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<FeatureMap> {
        if self.squash {
            for (g, y) in grad_out.data.iter_mut().zip(&trace.output.data) {
                *g *= y * (1.0 - y);
            }
        }
        let (g1, g2) = grad.split_at_mut(self.first.num_parameters());
        let size = (input.height, input.width);
        let mut gh = self
            .second
            .backward(size, &trace.hidden.data, &grad_out, g2, true)
            .expect("input gradient requested");
        relu_backward(&trace.hidden, &mut gh);
        self.first.backward(size, &input.data, &gh, g1, need_input)
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.first.write_parameters(&mut out);
        self.second.write_parameters(&mut out);
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) {
        let n = self.first.read_parameters(values);
        self.second.read_parameters(&values[n..]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_shape_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tiny = BackboneAdapter::tiny_conv(&[8, 16, 32], &mut rng);
        assert_eq!(tiny.output_grid((64, 64)), (8, 8));
        let deep = BackboneAdapter::tiny_conv(&[4, 4, 4, 4, 4], &mut rng);
        let (h, w) = deep.output_grid((224, 224));
        assert_eq!((h, w), (7, 7));
        assert_eq!(h * w, 49);
    }

    #[test]
    fn parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = BackboneAdapter::tiny_conv(&[4, 8], &mut rng);
        let mut b = BackboneAdapter::tiny_conv(&[4, 8], &mut rng);
        assert_ne!(a, b);
        b.set_parameters(&a.parameters());
        assert_eq!(a, b);
    }
}

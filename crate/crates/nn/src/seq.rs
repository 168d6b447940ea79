use rand::Rng;

use crate::error::Result;
use crate::layers::{Backprop, Conv2d, ConvSpec, Dense, Layer};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Negative slope used by every leaky ReLU in the workspace.
pub const LEAKY_SLOPE: f64 = 0.2;

/// A feed-forward stack of layers with named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    prefix: String,
    layers: Vec<Layer<T>>,
}

/// Activations recorded by [`Sequential::forward`]; `acts[0]` is the input
/// and `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Tensor<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.acts[0]
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            layers: Vec::new(),
        }
    }

    fn next_name(&self) -> String {
        format!("{}.{}", self.prefix, self.layers.len())
    }

    pub fn conv<R: Rng + ?Sized>(mut self, spec: ConvSpec, rng: &mut R) -> Self {
        let name = self.next_name();
        self.layers
            .push(Layer::Conv(Conv2d::new(&name, spec, LEAKY_SLOPE, rng)));
        self
    }

    /// Convolution followed by a leaky ReLU.
    pub fn conv_act<R: Rng + ?Sized>(self, spec: ConvSpec, rng: &mut R) -> Self {
        self.conv(spec, rng).push(Layer::LeakyRelu(LEAKY_SLOPE))
    }

    pub fn dense<R: Rng + ?Sized>(mut self, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let name = self.next_name();
        self.layers
            .push(Layer::Dense(Dense::new(&name, inputs, outputs, rng)));
        self
    }

    pub fn push(mut self, layer: Layer<T>) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Forward pass that keeps every intermediate activation for backward.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let y = layer.forward(acts.last().unwrap())?;
            acts.push(y);
        }
        Ok(Trace { acts })
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagates `grad` (w.r.t. the trace output). Returns the gradient
    /// w.r.t. the trace input when `mode.input` is set.
    pub fn backward(
        &mut self,
        trace: &Trace<T>,
        grad: Tensor<T>,
        mode: Backprop,
    ) -> Option<Tensor<T>> {
        let mut g = grad;
        let last = self.layers.len();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let need_input = i > 0 || mode.input;
            let step_mode = Backprop {
                params: mode.params,
                input: need_input,
            };
            match layer.backward(&trace.acts[i], &trace.acts[i + 1], &g, step_mode) {
                Some(dx) => g = dx,
                None => {
                    debug_assert!(i == 0 || last == 0);
                    return None;
                }
            }
        }
        mode.input.then_some(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Zeroes the weights and bias of the last parameterized layer.
    pub fn zero_last_layer(&mut self) {
        if let Some(layer) = self
            .layers
            .iter_mut()
            .rev()
            .find(|l| !l.params().is_empty())
        {
            for p in layer.params_mut() {
                p.value.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(rng: &mut ChaCha8Rng) -> Sequential<f64> {
        Sequential::new("t")
            .conv_act(ConvSpec::new(2, 3, 3).stride(2), rng)
            .push(Layer::Upsample2)
            .conv_act(ConvSpec::new(3, 2, 3).dilation(2), rng)
            .push(Layer::GlobalAvgPool)
            .dense(2, 1, rng)
            .push(Layer::Sigmoid)
    }

    #[test]
    fn parameter_names_are_indexed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = tiny(&mut rng);
        let names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(
            names,
            [
                "t.0.weight",
                "t.0.bias",
                "t.3.weight",
                "t.3.bias",
                "t.6.weight",
                "t.6.bias"
            ]
        );
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = tiny(&mut rng);
        let x = Tensor::from_vec(
            [2, 2, 4, 4],
            (0..64)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
                .collect(),
        )
        .unwrap();
        let trace = net.forward(&x).unwrap();
        let ones = Tensor::from_vec([2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        net.zero_grad();
        let dx = net.backward(&trace, ones, Backprop::FULL).unwrap();

        let loss = |n: &Sequential<f64>, x: &Tensor<f64>| n.infer(x).unwrap().sum();
        let eps = 1e-6;
        for pi in 0..net.params().len() {
            for j in 0..net.params()[pi].len() {
                let analytic = net.params()[pi].grad[j];
                let mut plus = net.clone();
                plus.params_mut()[pi].value[j] += eps;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[j] -= eps;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * eps);
                assert!(
                    (fd - analytic).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "param {pi}[{j}]: {fd} vs {analytic}"
                );
            }
        }
        for j in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[j]).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }

    #[test]
    fn zero_last_layer_gives_half_after_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = tiny(&mut rng);
        net.zero_last_layer();
        let x = Tensor::from_vec([1, 2, 4, 4], vec![0.3; 32]).unwrap();
        assert_eq!(net.infer(&x).unwrap().data(), &[0.5]);
    }
}

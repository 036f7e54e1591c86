use rand::Rng;

use super::{all_finite, axpy, dot, Matrix};
use crate::error::{Error, Result};

/// Fully connected network with ReLU between hidden layers and an affine
/// output. All parameters live in one flat buffer laid out layer by layer as
/// `[weights (out x in, row-major), bias (out)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Parameter gradient, laid out exactly like the [`Mlp`] it differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct Grad {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations from a batched forward pass, kept for backprop.
/// `activations[0]` is the input; the last entry is the network output.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// Start offsets of (weights, bias) for each layer.
fn layer_offsets(sizes: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    sizes.windows(2).scan(0usize, |offset, w| {
        let weights = *offset;
        let bias = weights + w[0] * w[1];
        *offset = bias + w[1];
        Some((weights, bias))
    })
}

impl Mlp {
    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// Builds a network from explicit `(weights[out][in], bias[out])` layers.
    pub fn from_layers(layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("no layers given".into()));
        }
        let mut sizes = vec![layers[0].0.first().map_or(0, Vec::len)];
        let mut params = Vec::new();
        for (k, (w, b)) in layers.iter().enumerate() {
            let inputs = *sizes.last().unwrap();
            if w.len() != b.len() {
                return Err(Error::Shape(format!(
                    "layer {k}: {} weight rows but {} biases",
                    w.len(),
                    b.len()
                )));
            }
            for row in w {
                if row.len() != inputs {
                    return Err(Error::Shape(format!(
                        "layer {k}: weight row of length {} does not chain from width {inputs}",
                        row.len()
                    )));
                }
                params.extend_from_slice(row);
            }
            params.extend_from_slice(b);
            sizes.push(b.len());
        }
        if !all_finite(&params) {
            return Err(Error::Numeric("layer parameters".into()));
        }
        Ok(Mlp { sizes, params })
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || param_count(&sizes) != params.len() {
            return Err(Error::Shape(format!(
                "{} parameters do not fit layer sizes {sizes:?}",
                params.len()
            )));
        }
        Ok(Mlp { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.params)
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (w, b) = layer_offsets(&self.sizes).nth(layer).expect("layer index");
        &self.params[w..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b) = layer_offsets(&self.sizes).nth(layer).expect("layer index");
        &self.params[b..b + self.sizes[layer + 1]]
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch(&batch)?.activations.pop().unwrap().into_vec())
    }

    /// Forward pass over a batch, keeping every layer's activations.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Trace> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(input.clone());
        for (k, (w_off, b_off)) in layer_offsets(&self.sizes).enumerate() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let weights = &self.params[w_off..b_off];
            let bias = &self.params[b_off..b_off + n_out];
            let x = &activations[k];
            let mut y = Matrix::zeros(x.rows(), n_out);
            for r in 0..x.rows() {
                let xr = x.row(r);
                let yr = y.row_mut(r);
                for o in 0..n_out {
                    let z = bias[o] + dot(&weights[o * n_in..(o + 1) * n_in], xr);
                    yr[o] = if k < last { z.max(0.0) } else { z };
                }
            }
            activations.push(y);
        }
        Ok(Trace { activations })
    }

    /// Accumulates the parameter gradient of `<upstream, output>` into `grad`
    /// and returns the gradient with respect to the batch input.
    pub fn backward_batch(&self, trace: &Trace, upstream: &Matrix, grad: &mut Grad) -> Result<Matrix> {
        self.backprop(trace, upstream, Some(grad), true)
    }

    /// Accumulates the parameter gradient only; skips the input gradient.
    pub fn accumulate_grad(&self, trace: &Trace, upstream: &Matrix, grad: &mut Grad) -> Result<()> {
        self.backprop(trace, upstream, Some(grad), false).map(|_| ())
    }

    /// Gradient with respect to the batch input only.
    pub fn input_gradient(&self, trace: &Trace, upstream: &Matrix) -> Result<Matrix> {
        self.backprop(trace, upstream, None, true)
    }

    fn backprop(
        &self,
        trace: &Trace,
        upstream: &Matrix,
        mut grad: Option<&mut Grad>,
        want_input: bool,
    ) -> Result<Matrix> {
        let out = trace.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "upstream {}x{} does not match output {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        if grad.as_ref().is_some_and(|g| g.sizes != self.sizes) {
            return Err(Error::Shape("gradient buffer is not congruent to the network".into()));
        }
        let offsets: Vec<_> = layer_offsets(&self.sizes).collect();
        let mut delta = upstream.clone();
        for k in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w_off, b_off) = offsets[k];
            let weights = &self.params[w_off..b_off];
            let x = &trace.activations[k];
            let mut dx = Matrix::zeros(x.rows(), n_in);
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g.params[w_off..b_off + n_out].split_at_mut(b_off - w_off);
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let dr = delta.row(r);
                    for o in 0..n_out {
                        let d = dr[o];
                        if d != 0.0 {
                            gb[o] += d;
                            axpy(d, xr, &mut gw[o * n_in..(o + 1) * n_in]);
                        }
                    }
                }
            }
            if k > 0 || want_input {
                for r in 0..x.rows() {
                    let dr = delta.row(r);
                    let dxr = dx.row_mut(r);
                    for o in 0..n_out {
                        let d = dr[o];
                        if d != 0.0 {
                            axpy(d, &weights[o * n_in..(o + 1) * n_in], dxr);
                        }
                    }
                }
            }
            if k > 0 {
                // ReLU mask: the layer input is the previous layer's rectified output.
                for (g, a) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Single-sample backward pass: gradients of `<upstream, forward(input)>`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Grad, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream length {} but output width {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let trace = self.forward_batch(&Matrix::from_vec(1, input.len(), input.to_vec())?)?;
        let mut grad = Grad::zeros_like(self);
        let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec())?;
        let dx = self.backward_batch(&trace, &up, &mut grad)?;
        Ok((grad, dx.into_vec()))
    }

    /// Overwrites every parameter with `source`'s.
    pub fn copy_from(&mut self, source: &Mlp) -> Result<()> {
        if !self.same_shape(source) {
            return Err(Error::Shape(format!(
                "cannot copy {:?} into {:?}",
                source.sizes, self.sizes
            )));
        }
        self.params.copy_from_slice(&source.params);
        Ok(())
    }

    /// `self <- (1 - rate) * self + rate * source`
    pub fn polyak_from(&mut self, source: &Mlp, rate: f64) -> Result<()> {
        if !self.same_shape(source) {
            return Err(Error::Shape(format!(
                "cannot average {:?} into {:?}",
                source.sizes, self.sizes
            )));
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - rate) * *t + rate * s;
        }
        Ok(())
    }
}

impl Grad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grad {
            sizes: net.sizes.clone(),
            params: vec![0.0; net.params.len()],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn values(&self) -> &[f64] {
        &self.params
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn congruent_to(&self, net: &Mlp) -> bool {
        self.sizes == net.sizes
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (w, b) = layer_offsets(&self.sizes).nth(layer).expect("layer index");
        &self.params[w..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b) = layer_offsets(&self.sizes).nth(layer).expect("layer index");
        &self.params[b..b + self.sizes[layer + 1]]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.params)
    }

    pub fn is_zero(&self) -> bool {
        self.params.iter().all(|g| *g == 0.0)
    }

    pub fn scale(&mut self, factor: f64) {
        self.params.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Grad) -> Result<()> {
        if self.sizes != other.sizes {
            return Err(Error::Shape("gradients are not congruent".into()));
        }
        axpy(1.0, &other.params, &mut self.params);
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        dot(&self.params, &self.params).sqrt()
    }

    /// Rescales so the L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

//! Dense tanh networks with a hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Tanh {
            x.mapv_inplace(f64::tanh);
        }
    }
}

/// Fully connected network. Hidden layers use tanh; the output layer uses
/// `output` (identity for heads, tanh for a shared trunk).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    output: Activation,
    /// Layer weights, shape `[in, out]` (row-major, inputs are row vectors).
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds the input")
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            v.push(w.as_slice_mut().expect("standard layout"));
            v.push(b.as_slice_mut().expect("standard layout"));
        }
        v
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!("bad layer widths {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (i, o) = (pair[0], pair[1]);
            let limit = (6.0 / (i + o) as f64).sqrt();
            weights.push(Array2::from_shape_fn((i, o), |_| rng.gen_range(-limit..limit)));
            biases.push(Array1::zeros(o));
        }
        Ok(Self { widths: widths.to_vec(), output, weights, biases })
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_parts(
        widths: &[usize],
        output: Activation,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if widths.len() < 2 || weights.len() != widths.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Shape(format!("{} weight matrices for widths {widths:?}", weights.len())));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if weights[l].dim() != (pair[0], pair[1]) || biases[l].len() != pair[1] {
                return Err(Error::Shape(format!("layer {l} parameters do not match widths {widths:?}")));
            }
        }
        let net = Self {
            widths: widths.to_vec(),
            output,
            weights: weights.into_iter().map(|w| w.as_standard_layout().into_owned()).collect(),
            biases,
        };
        if !net.is_finite() {
            return Err(Error::Numerical("non-finite network parameters".into()));
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Multiplies the last layer's weights by `factor` (small initial outputs).
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(w) = self.weights.last_mut() {
            *w *= factor;
        }
    }

    pub fn output_bias_mut(&mut self) -> &mut Array1<f64> {
        self.biases.last_mut().unwrap()
    }

    /// Parameter slices in a fixed order (per layer: weights, then bias).
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            v.push(w.as_slice_mut().expect("standard layout"));
            v.push(b.as_slice_mut().expect("standard layout"));
        }
        v
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, network expects {}", x.ncols(), self.input_dim())));
        }
        Ok(())
    }

    fn layer(&self, l: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights[l]);
        z += &self.biases[l];
        let act = if l + 1 == self.weights.len() { self.output } else { Activation::Tanh };
        act.apply(&mut z);
        z
    }

    /// Forward pass for a batch (one sample per row), without a cache.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = self.layer(0, &x);
        for l in 1..self.weights.len() {
            h = self.layer(l, &h.view());
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        self.check_input(&x)?;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.to_owned());
        for l in 0..self.weights.len() {
            let h = self.layer(l, &acts[l].view());
            acts.push(h);
        }
        Ok(MlpCache { acts })
    }

    /// Reverse-mode gradients given `dL/d(output)`; also returns `dL/d(input)`.
    pub fn backward(&self, cache: &MlpCache, upstream: ArrayView2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() || cache.acts.len() != self.weights.len() + 1 {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut g = upstream.to_owned();
        for l in (0..n).rev() {
            let act = if l + 1 == n { self.output } else { Activation::Tanh };
            if act == Activation::Tanh {
                g.zip_mut_with(&cache.acts[l + 1], |gi, &y| *gi *= 1.0 - y * y);
            }
            gw.push(cache.acts[l].t().dot(&g).as_standard_layout().into_owned());
            gb.push(g.sum_axis(Axis(0)));
            g = g.dot(&self.weights[l].t());
        }
        gw.reverse();
        gb.reverse();
        Ok((MlpGrads { weights: gw, biases: gb }, g))
    }
}

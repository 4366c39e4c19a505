//! Small dense networks with hand-written reverse-mode gradients, the AdamW
//! update, and central finite differences for gradient verification.
//!
//! Parameters of an [`Mlp`] live in one flat vector. Layer `l` stores its
//! `out x in` weight matrix row-major followed by its `out` biases; gradient
//! buffers share that layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Elu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    pre.exp()
                }
            }
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Dense row-major matrix; one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    offset: usize,
    activation: Activation,
}

impl LayerShape {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.n_in * self.n_out;
        start..start + self.n_out
    }
}

/// Fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    layers: Vec<LayerShape>,
    params: Vec<T>,
}

/// Per-layer inputs and pre-activations retained by [`Mlp::forward_batch`].
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with layer widths `[in, hidden.., out]`. Hidden layers
    /// use `hidden`, the last layer uses `output`. Weights are uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, hidden, output)?;
        for layer in net.layers.clone() {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut net.params[layer.weight_range()] {
                *w = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    /// Same shapes as [`Mlp::new`] with every parameter zero.
    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "network widths {widths:?} need at least two positive entries"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for (l, pair) in widths.windows(2).enumerate() {
            let last = l == widths.len() - 2;
            layers.push(LayerShape {
                n_in: pair[0],
                n_out: pair[1],
                offset,
                activation: if last { output } else { hidden },
            });
            offset += (pair[0] + 1) * pair[1];
        }
        Ok(Mlp {
            layers,
            params: vec![T::zero(); offset],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.n_out))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Weight matrix (row per output unit) and bias of layer `l`.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let layer = self.layers[l];
        let (w, b) = self.params[layer.offset..layer.bias_range().end]
            .split_at_mut(layer.n_in * layer.n_out);
        (w, b)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::lit(p.to_f64_lossy())).collect(),
        }
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch_inference(&x)?.data)
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.cols,
            });
        }
        Ok(())
    }

    #[inline]
    fn affine(&self, layer: &LayerShape, x: &Matrix<T>) -> Matrix<T> {
        let w = &self.params[layer.weight_range()];
        let b = &self.params[layer.bias_range()];
        let mut out = Matrix::zeros(x.rows, layer.n_out);
        for r in 0..x.rows {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for (o, slot) in or.iter_mut().enumerate() {
                let wr = &w[o * layer.n_in..(o + 1) * layer.n_in];
                let mut acc = b[o];
                for (wi, xi) in wr.iter().zip(xr) {
                    acc = acc + *wi * *xi;
                }
                *slot = acc;
            }
        }
        out
    }

    /// Forward pass without retaining intermediates.
    pub fn forward_batch_inference(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = None::<Matrix<T>>;
        for layer in &self.layers {
            let mut z = self.affine(layer, h.as_ref().unwrap_or(x));
            if layer.activation != Activation::Identity {
                for v in &mut z.data {
                    *v = layer.activation.apply(*v);
                }
            }
            h = Some(z);
        }
        Ok(h.expect("at least one layer"))
    }

    /// Forward pass retaining what [`Mlp::backward_batch`] needs.
    pub fn forward_batch(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = self.affine(layer, &h);
            let mut a = z.clone();
            for v in &mut a.data {
                *v = layer.activation.apply(*v);
            }
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Back-propagates `upstream` (d loss / d output, one row per sample).
    /// Parameter gradients are added into `grads`; the input gradient is returned.
    pub fn backward_batch(
        &self,
        cache: &MlpCache<T>,
        upstream: &Matrix<T>,
        grads: &mut [T],
    ) -> Result<Matrix<T>> {
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let out_dim = self.output_dim();
        let rows = cache.inputs[0].rows;
        if upstream.cols != out_dim || upstream.rows != rows {
            return Err(Error::ShapeMismatch {
                expected: rows * out_dim,
                got: upstream.rows * upstream.cols,
            });
        }
        let mut delta = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            if layer.activation != Activation::Identity {
                for (d, &z) in delta.data.iter_mut().zip(&pre.data) {
                    *d = *d * layer.activation.derivative(z);
                }
            }
            let input = &cache.inputs[l];
            let (gw, gb) = grads[layer.offset..layer.bias_range().end]
                .split_at_mut(layer.n_in * layer.n_out);
            for r in 0..rows {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    gb[o] = gb[o] + d;
                    let gwr = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                    for (g, &x) in gwr.iter_mut().zip(xr) {
                        *g = *g + d * x;
                    }
                }
            }
            let w = &self.params[layer.weight_range()];
            let mut next = Matrix::zeros(rows, layer.n_in);
            for r in 0..rows {
                let dr = delta.row(r);
                let nr = next.row_mut(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    let wr = &w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (n, &wi) in nr.iter_mut().zip(wr) {
                        *n = *n + d * wi;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Single-sample backward pass: `(input gradient, parameter gradients)`.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let (_, cache) = self.forward_batch(&x)?;
        let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec())?;
        let mut grads = vec![T::zero(); self.params.len()];
        let gx = self.backward_batch(&cache, &up, &mut grads)?;
        Ok((gx.data, grads))
    }
}

/// AdamW state: Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n_params: usize, lr: T, weight_decay: T) -> Self {
        AdamW {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let decay = T::one() - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x: &[T],
    step: T,
) -> Vec<T> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (T::lit(2.0) * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`, the comparison used for gradient checks.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

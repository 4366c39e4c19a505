//! Clenshaw–Curtis quadrature.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clenshaw–Curtis rule with `Q` nodes `cos(k pi / (Q - 1))` on `[-1, 1]`.
/// Exact for polynomials of degree `Q - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClenshawCurtis<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Scalar> ClenshawCurtis<T> {
    pub fn new(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidConfig(format!(
                "Clenshaw-Curtis needs at least 2 nodes, got {q}"
            )));
        }
        let n = q - 1;
        let nf = n as f64;
        let pi = std::f64::consts::PI;
        let mut nodes = Vec::with_capacity(q);
        let mut weights = Vec::with_capacity(q);
        for k in 0..=n {
            let theta = k as f64 * pi / nf;
            let c = if k == 0 || k == n { 1.0 } else { 2.0 };
            let mut s = 0.0;
            for j in 1..=n / 2 {
                let b = if 2 * j == n { 1.0 } else { 2.0 };
                s += b / (4.0 * (j * j) as f64 - 1.0) * (2.0 * j as f64 * theta).cos();
            }
            nodes.push(T::lit(theta.cos()));
            weights.push(T::lit(c / nf * (1.0 - s)));
        }
        Ok(ClenshawCurtis { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes on `[-1, 1]`.
    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// Weights on `[-1, 1]`; they sum to 2.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Abscissae for `∫_0^upper`: `upper * (node + 1) / 2`.
    pub fn abscissae_from_zero(&self, upper: T) -> impl Iterator<Item = T> + '_ {
        let half = T::lit(0.5);
        self.nodes.iter().map(move |&x| upper * (x + T::one()) * half)
    }

    /// `∫_0^upper f(t) dt`.
    pub fn integrate_from_zero(&self, upper: T, mut f: impl FnMut(T) -> T) -> T {
        let half = T::lit(0.5) * upper;
        self.abscissae_from_zero(upper)
            .zip(&self.weights)
            .map(|(t, &w)| w * f(t))
            .sum::<T>()
            * half
    }
}

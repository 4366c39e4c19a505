//! Causal graphical normalizing flow.
//!
//! Each node `i` owns three networks: a conditioner reading the parent-masked
//! data vector and producing an embedding `c_i`, a positive integrand
//! `g_i(t, c_i)`, and an offset `beta_i(c_i)`. The node transform is
//!
//! ```text
//! z_i = beta_i(c_i) + ∫_0^{x_i} g_i(t, c_i) dt
//! ```
//!
//! which is strictly increasing in `x_i`. Because `c_i` only sees parents the
//! Jacobian is triangular in topological order and
//! `log |det J| = Σ_i log g_i(x_i, c_i)`. The inverse walks the graph in
//! topological order and solves each scalar equation by bisection; clamped
//! nodes skip the solve, which is what makes interventions work.
//!
//! All coordinates entering the flow are z-scored with training statistics.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dag::CausalDag;
use crate::dequant::quantize_one;
use crate::error::{Error, Result};
use crate::intervention::InterventionSpec;
use crate::nn::{Activation, Matrix, Mlp};
use crate::quadrature::ClenshawCurtis;
use crate::root::{failure_to_error, solve_increasing_batch, BisectionOptions};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Observations, one row per unit, columns in DAG node order.
pub type SampleBatch<T> = Matrix<T>;

/// Floor added to the softplus integrand.
pub const INTEGRAND_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArchitecture {
    pub conditioner_hidden: Vec<usize>,
    pub embedding: usize,
    pub integrand_hidden: Vec<usize>,
    pub quadrature_nodes: usize,
}

impl Default for FlowArchitecture {
    fn default() -> Self {
        FlowArchitecture {
            conditioner_hidden: vec![20, 15],
            embedding: 10,
            integrand_hidden: vec![15, 10, 5],
            quadrature_nodes: 20,
        }
    }
}

/// Per-column affine `x -> (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Fits mean and (population) standard deviation of the given rows.
    pub fn fit(data: &Matrix<f64>, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData("no rows to standardize".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; data.cols];
        let mut std = vec![0.0; data.cols];
        for j in 0..data.cols {
            let m = rows.iter().map(|&r| data.get(r, j)).sum::<f64>() / n;
            let v = rows.iter().map(|&r| (data.get(r, j) - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = if v > 1e-24 { v.sqrt() } else { 1.0 };
        }
        Ok(Standardizer { mean, std })
    }

    #[inline]
    pub fn forward(&self, j: usize, value: f64) -> f64 {
        (value - self.mean[j]) / self.std[j]
    }

    #[inline]
    pub fn inverse(&self, j: usize, value: f64) -> f64 {
        value * self.std[j] + self.mean[j]
    }

    /// `Σ_j ln std_j`: subtract from a standardized log-density to get the
    /// density in data units.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeNets<T> {
    conditioner: Mlp<T>,
    integrand: Mlp<T>,
    offset: Mlp<T>,
}

impl<T: Scalar> NodeNets<T> {
    fn num_params(&self) -> usize {
        self.conditioner.num_params() + self.integrand.num_params() + self.offset.num_params()
    }

    fn cast<U: Scalar>(&self) -> NodeNets<U> {
        NodeNets {
            conditioner: self.conditioner.cast(),
            integrand: self.integrand.cast(),
            offset: self.offset.cast(),
        }
    }
}

/// Metadata recorded by training and carried in the model file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_nll: f64,
    pub test_nll: f64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FlowModel<T> {
    dag: CausalDag,
    arch: FlowArchitecture,
    standardizer: Standardizer,
    nets: Vec<NodeNets<T>>,
    masks: Vec<Vec<T>>,
    quadrature: ClenshawCurtis<T>,
    pub metadata: ModelMetadata,
    pub bisection: BisectionOptions,
}

/// Intermediates of one node's forward pass over a batch.
struct NodePass<T> {
    emb: Matrix<T>,
    cond_cache: Option<crate::nn::MlpCache<T>>,
    offset_cache: Option<crate::nn::MlpCache<T>>,
    integrand_cache: Option<crate::nn::MlpCache<T>>,
    raw: Matrix<T>,
    z: Vec<T>,
    log_g: Vec<T>,
}

impl<T: Scalar> FlowModel<T> {
    /// Randomly initialized model with identity standardization.
    pub fn new(dag: CausalDag, arch: FlowArchitecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dag.len();
        let nets = (0..d)
            .map(|_| {
                let mut cw = vec![d];
                cw.extend(&arch.conditioner_hidden);
                cw.push(arch.embedding);
                let mut iw = vec![1 + arch.embedding];
                iw.extend(&arch.integrand_hidden);
                iw.push(1);
                Ok(NodeNets {
                    conditioner: Mlp::new(&cw, Activation::Elu, Activation::Identity, &mut rng)?,
                    integrand: Mlp::new(&iw, Activation::Elu, Activation::Identity, &mut rng)?,
                    offset: Mlp::new(
                        &[arch.embedding, 1],
                        Activation::Identity,
                        Activation::Identity,
                        &mut rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(dag, arch, Standardizer::identity(d), nets)
    }

    /// A model whose integrands are identically 1 and offsets 0, i.e. `T(x) = x`.
    pub fn identity(dag: CausalDag, arch: FlowArchitecture) -> Result<Self> {
        let mut model = Self::new(dag, arch, 0)?;
        // softplus(b) + floor = 1
        let bias = (1.0 - INTEGRAND_FLOOR).exp_m1().ln();
        for nets in &mut model.nets {
            let last = nets.integrand.num_layers() - 1;
            let (w, b) = nets.integrand.layer_mut(last);
            w.iter_mut().for_each(|v| *v = T::zero());
            b[0] = T::lit(bias);
            nets.offset.params_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(model)
    }

    fn assemble(
        dag: CausalDag,
        arch: FlowArchitecture,
        standardizer: Standardizer,
        nets: Vec<NodeNets<T>>,
    ) -> Result<Self> {
        let d = dag.len();
        if nets.len() != d || standardizer.mean.len() != d || standardizer.std.len() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                got: nets.len(),
            });
        }
        let masks = (0..d)
            .map(|i| {
                Ok(dag
                    .parent_mask(i)?
                    .into_iter()
                    .map(|p| if p { T::one() } else { T::zero() })
                    .collect())
            })
            .collect::<Result<Vec<Vec<T>>>>()?;
        let quadrature = ClenshawCurtis::new(arch.quadrature_nodes)?;
        Ok(FlowModel {
            dag,
            arch,
            standardizer,
            nets,
            masks,
            quadrature,
            metadata: ModelMetadata::default(),
            bisection: BisectionOptions::default(),
        })
    }

    pub fn dag(&self) -> &CausalDag {
        &self.dag
    }

    pub fn architecture(&self) -> &FlowArchitecture {
        &self.arch
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.mean.len() != self.dag.len() || s.std.len() != self.dag.len() {
            return Err(Error::ShapeMismatch {
                expected: self.dag.len(),
                got: s.mean.len(),
            });
        }
        self.standardizer = s;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dag.len()
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(NodeNets::num_params).sum()
    }

    /// All parameters, node by node (conditioner, integrand, offset).
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for n in &self.nets {
            out.extend_from_slice(n.conditioner.params());
            out.extend_from_slice(n.integrand.params());
            out.extend_from_slice(n.offset.params());
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut at = 0;
        for n in &mut self.nets {
            for net in [&mut n.conditioner, &mut n.integrand, &mut n.offset] {
                let k = net.num_params();
                net.params_mut().copy_from_slice(&params[at..at + k]);
                at += k;
            }
        }
        Ok(())
    }

    /// Offsets of node `i`'s parameter block within [`FlowModel::params`].
    fn node_param_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.nets[..i].iter().map(NodeNets::num_params).sum();
        start..start + self.nets[i].num_params()
    }

    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        let mut m = FlowModel::assemble(
            self.dag.clone(),
            self.arch.clone(),
            self.standardizer.clone(),
            self.nets.iter().map(NodeNets::cast).collect(),
        )
        .expect("shapes already validated");
        m.metadata = self.metadata.clone();
        m.bisection = self.bisection;
        m
    }

    /// Standardizes data-unit rows (discrete columns as labels or dequantized values).
    pub fn standardize(&self, raw: &Matrix<f64>) -> Result<Matrix<T>> {
        self.check_cols(raw.cols)?;
        let mut out = Matrix::zeros(raw.rows, raw.cols);
        for r in 0..raw.rows {
            for j in 0..raw.cols {
                out.set(r, j, T::lit(self.standardizer.forward(j, raw.get(r, j))));
            }
        }
        Ok(out)
    }

    /// Maps standardized rows back to data units; discrete columns are quantized.
    pub fn destandardize(&self, x: &Matrix<T>) -> Result<Matrix<f64>> {
        self.check_cols(x.cols)?;
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            for j in 0..x.cols {
                let v = self.standardizer.inverse(j, x.get(r, j).to_f64_lossy());
                let v = match self.dag.node(j).kind.n_classes() {
                    Some(n) => quantize_one(v, n) as f64,
                    None => v,
                };
                out.set(r, j, v);
            }
        }
        Ok(out)
    }

    fn check_cols(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn masked_input(&self, i: usize, x: &Matrix<T>) -> Matrix<T> {
        let mask = &self.masks[i];
        let mut m = x.clone();
        for r in 0..m.rows {
            for (v, &k) in m.row_mut(r).iter_mut().zip(mask) {
                *v = *v * k;
            }
        }
        m
    }

    fn embed(&self, i: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.nets[i]
            .conditioner
            .forward_batch_inference(&self.masked_input(i, x))
    }

    /// Rows `[t, c]` for every quadrature abscissa of `∫_0^upper`, followed
    /// by one row at `t = upper` when `with_endpoint`.
    fn integrand_rows(&self, emb: &Matrix<T>, rows: &[usize], uppers: &[T], with_endpoint: bool) -> Matrix<T> {
        let q = self.quadrature.len();
        let per = q + usize::from(with_endpoint);
        let width = 1 + emb.cols;
        let mut input = Matrix::zeros(rows.len() * per, width);
        for (j, (&r, &upper)) in rows.iter().zip(uppers).enumerate() {
            let c = emb.row(r);
            let ts = self
                .quadrature
                .abscissae_from_zero(upper)
                .chain(with_endpoint.then_some(upper));
            for (k, t) in ts.enumerate() {
                let row = input.row_mut(j * per + k);
                row[0] = t;
                row[1..].copy_from_slice(c);
            }
        }
        input
    }

    /// Runs node `i` over a batch whose columns are all known.
    fn node_pass(&self, i: usize, x: &Matrix<T>, keep: bool) -> Result<NodePass<T>> {
        let nets = &self.nets[i];
        let masked = self.masked_input(i, x);
        let (emb, cond_cache) = if keep {
            let (e, c) = nets.conditioner.forward_batch(&masked)?;
            (e, Some(c))
        } else {
            (nets.conditioner.forward_batch_inference(&masked)?, None)
        };
        let (beta, offset_cache) = if keep {
            let (b, c) = nets.offset.forward_batch(&emb)?;
            (b, Some(c))
        } else {
            (nets.offset.forward_batch_inference(&emb)?, None)
        };
        let rows: Vec<usize> = (0..x.rows).collect();
        let xi = x.column(i);
        let input = self.integrand_rows(&emb, &rows, &xi, true);
        let (raw, integrand_cache) = if keep {
            let (r, c) = nets.integrand.forward_batch(&input)?;
            (r, Some(c))
        } else {
            (nets.integrand.forward_batch_inference(&input)?, None)
        };
        let q = self.quadrature.len();
        let floor = T::lit(INTEGRAND_FLOOR);
        let half = T::lit(0.5);
        let w = self.quadrature.weights();
        let mut z = Vec::with_capacity(x.rows);
        let mut log_g = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let block = &raw.data[r * (q + 1)..(r + 1) * (q + 1)];
            let integral = block[..q]
                .iter()
                .zip(w)
                .map(|(&v, &wk)| wk * (softplus(v) + floor))
                .sum::<T>()
                * half
                * xi[r];
            z.push(beta.data[r] + integral);
            log_g.push((softplus(block[q]) + floor).ln());
        }
        Ok(NodePass {
            emb,
            cond_cache,
            offset_cache,
            integrand_cache,
            raw,
            z,
            log_g,
        })
    }

    /// `T(x)` for a batch of standardized rows: `(z, log |det J|)`.
    pub fn transform_forward_batch(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        self.check_cols(x.cols)?;
        let mut z = Matrix::zeros(x.rows, x.cols);
        let mut logdet = vec![T::zero(); x.rows];
        for i in 0..self.dim() {
            let pass = self.node_pass(i, x, false)?;
            for r in 0..x.rows {
                z.set(r, i, pass.z[r]);
                logdet[r] = logdet[r] + pass.log_g[r];
            }
        }
        if z.data.iter().chain(&logdet).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("forward transform"));
        }
        Ok((z, logdet))
    }

    pub fn transform_forward(&self, x: &[T]) -> Result<(Vec<T>, T)> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let (z, ld) = self.transform_forward_batch(&m)?;
        Ok((z.data, ld[0]))
    }

    /// `T^{-1}(z)` for a batch, with optional clamped nodes. Returns
    /// standardized rows.
    pub fn transform_inverse_batch(
        &self,
        z: &Matrix<T>,
        interventions: Option<&InterventionSpec>,
    ) -> Result<Matrix<T>> {
        self.check_cols(z.cols)?;
        let clamps = match interventions {
            Some(spec) => spec.resolve(&self.dag)?,
            None => vec![None; self.dim()],
        };
        let mut x = Matrix::zeros(z.rows, z.cols);
        let q = self.quadrature.len();
        let half = T::lit(0.5);
        let floor = T::lit(INTEGRAND_FLOOR);
        for &i in self.dag.topological_order() {
            if let Some(v) = clamps[i] {
                let s = T::lit(self.standardizer.forward(i, v));
                for r in 0..x.rows {
                    x.set(r, i, s);
                }
                continue;
            }
            // Unsolved coordinates are still zero and masked out of node i's input.
            let emb = self.embed(i, &x)?;
            let beta = self.nets[i].offset.forward_batch_inference(&emb)?;
            let targets = z.column(i);
            let integrand = &self.nets[i].integrand;
            let w = self.quadrature.weights();
            let eval = |rows: &[usize], pts: &[T]| -> Result<Vec<T>> {
                let input = self.integrand_rows(&emb, rows, pts, false);
                let raw = integrand.forward_batch_inference(&input)?;
                Ok(rows
                    .iter()
                    .zip(pts)
                    .enumerate()
                    .map(|(j, (&r, &p))| {
                        let s = raw.data[j * q..(j + 1) * q]
                            .iter()
                            .zip(w)
                            .map(|(&v, &wk)| wk * (softplus(v) + floor))
                            .sum::<T>();
                        beta.data[r] + s * half * p
                    })
                    .collect())
            };
            let roots = solve_increasing_batch(&targets, eval, &self.bisection)
                .map_err(|f| failure_to_error(f, &self.dag.node(i).name))?;
            for (r, v) in roots.into_iter().enumerate() {
                x.set(r, i, v);
            }
        }
        Ok(x)
    }

    pub fn transform_inverse(&self, z: &[T], interventions: Option<&InterventionSpec>) -> Result<Vec<T>> {
        let m = Matrix::from_vec(1, z.len(), z.to_vec())?;
        Ok(self.transform_inverse_batch(&m, interventions)?.data)
    }

    /// Per-row log-density of standardized rows under a standard normal base.
    pub fn log_density(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        let (z, logdet) = self.transform_forward_batch(x)?;
        let c = T::lit(0.5 * LN_2PI * self.dim() as f64);
        Ok((0..x.rows)
            .map(|r| {
                let sq: T = z.row(r).iter().map(|&v| v * v).sum();
                -T::lit(0.5) * sq - c + logdet[r]
            })
            .collect())
    }

    /// Summed log-likelihood of a standardized batch.
    pub fn log_likelihood(&self, x: &Matrix<T>) -> Result<T> {
        let ll: T = self.log_density(x)?.into_iter().sum();
        if !ll.is_finite() {
            return Err(Error::NonFiniteValue("log-likelihood"));
        }
        Ok(ll)
    }

    /// Mean negative log-likelihood of a standardized batch and its gradient
    /// with respect to [`FlowModel::params`].
    pub fn nll_and_grad(&self, x: &Matrix<T>) -> Result<(T, Vec<T>)> {
        self.check_cols(x.cols)?;
        if x.rows == 0 {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let b = T::lit(x.rows as f64);
        let q = self.quadrature.len();
        let half = T::lit(0.5);
        let floor = T::lit(INTEGRAND_FLOOR);
        let w = self.quadrature.weights();
        let mut grads = vec![T::zero(); self.num_params()];
        let mut total = T::zero();
        for i in 0..self.dim() {
            let pass = self.node_pass(i, x, true)?;
            let nets = &self.nets[i];
            let range = self.node_param_range(i);
            let (gc, rest) = grads[range].split_at_mut(nets.conditioner.num_params());
            let (gi, go) = rest.split_at_mut(nets.integrand.num_params());

            // d loss / d raw integrand output
            let mut up = Matrix::zeros(pass.raw.rows, 1);
            let mut up_beta = Matrix::zeros(x.rows, 1);
            for r in 0..x.rows {
                let zi = pass.z[r];
                total = total + half * zi * zi - pass.log_g[r];
                let xi = x.get(r, i);
                let base = r * (q + 1);
                for k in 0..q {
                    let dg = zi * xi * half * w[k] / b;
                    up.data[base + k] = dg * sigmoid(pass.raw.data[base + k]);
                }
                let raw_end = pass.raw.data[base + q];
                let g_end = softplus(raw_end) + floor;
                up.data[base + q] = -sigmoid(raw_end) / (g_end * b);
                up_beta.data[r] = zi / b;
            }
            let g_in = nets
                .integrand
                .backward_batch(pass.integrand_cache.as_ref().unwrap(), &up, gi)?;
            let mut d_emb = nets
                .offset
                .backward_batch(pass.offset_cache.as_ref().unwrap(), &up_beta, go)?;
            for r in 0..x.rows {
                let de = d_emb.row_mut(r);
                for k in 0..=q {
                    let gr = g_in.row(r * (q + 1) + k);
                    for (d, &g) in de.iter_mut().zip(&gr[1..]) {
                        *d = *d + g;
                    }
                }
            }
            debug_assert_eq!(d_emb.cols, pass.emb.cols);
            nets.conditioner
                .backward_batch(pass.cond_cache.as_ref().unwrap(), &d_emb, gc)?;
        }
        let nll = total / b + T::lit(0.5 * LN_2PI * self.dim() as f64);
        if !nll.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteValue("negative log-likelihood"));
        }
        Ok((nll, grads))
    }

    /// Draws rows in data units from `z` (standardized base coordinates),
    /// clamping intervened nodes and quantizing discrete columns.
    pub fn generate(&self, z: &Matrix<T>, interventions: Option<&InterventionSpec>) -> Result<Matrix<f64>> {
        let x = self.transform_inverse_batch(z, interventions)?;
        self.destandardize(&x)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            dag: self.dag.clone(),
            architecture: self.arch.clone(),
            standardizer: self.standardizer.clone(),
            nodes: self.nets.iter().map(NodeNets::cast).collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported model version {}", file.version)));
        }
        let mut m = FlowModel::assemble(
            file.dag,
            file.architecture,
            file.standardizer,
            file.nodes.iter().map(NodeNets::cast).collect(),
        )?;
        m.metadata = file.metadata;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_file(file)
    }
}

/// JSON model container; parameters are stored as `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub dag: CausalDag,
    pub architecture: FlowArchitecture,
    pub standardizer: Standardizer,
    nodes: Vec<NodeNets<f64>>,
    pub metadata: ModelMetadata,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::NodeKind;
    use crate::nn::{finite_difference_gradient, relative_error};
    use rand::Rng;

    fn tiny_arch() -> FlowArchitecture {
        FlowArchitecture {
            conditioner_hidden: vec![4],
            embedding: 4,
            integrand_hidden: vec![4, 4],
            quadrature_nodes: 8,
        }
    }

    fn chain3() -> CausalDag {
        let c = NodeKind::Continuous;
        CausalDag::new(&[("X0", c), ("X1", c), ("X2", c)], &[("X0", "X1"), ("X1", "X2"), ("X0", "X2")]).unwrap()
    }

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.5..2.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_flow_is_identity() {
        let model = FlowModel::<f64>::identity(CausalDag::two_wave(), FlowArchitecture::default()).unwrap();
        let x = [0.3, -1.2, 2.0, 0.0, -0.7];
        let (z, ld) = model.transform_forward(&x).unwrap();
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ld.abs() < 1e-12);
        let back = model.transform_inverse(&x, None).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_log_likelihood_is_standard_normal() {
        let model = FlowModel::<f64>::identity(CausalDag::two_wave(), FlowArchitecture::default()).unwrap();
        let zero = Matrix::zeros(1, 5);
        let ll = model.log_likelihood(&zero).unwrap();
        assert!((ll + 2.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-10);
        let x = random_rows(4, 5, 1);
        let ll = model.log_likelihood(&x).unwrap();
        let expect: f64 = x.data.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum();
        assert!((ll - expect).abs() < 1e-9);
    }

    #[test]
    fn round_trip_on_random_model() {
        let model = FlowModel::<f64>::new(CausalDag::two_wave(), FlowArchitecture::default(), 9).unwrap();
        let x = random_rows(200, 5, 2);
        let (z, _) = model.transform_forward_batch(&x).unwrap();
        let back = model.transform_inverse_batch(&z, None).unwrap();
        let err = back.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "max err {err}");
    }

    #[test]
    fn logdet_matches_finite_difference_diagonal() {
        let model = FlowModel::<f64>::new(chain3(), tiny_arch(), 4).unwrap();
        let x = random_rows(10, 3, 5);
        let (_, ld) = model.transform_forward_batch(&x).unwrap();
        for r in 0..x.rows {
            let row = x.row(r).to_vec();
            let mut fd_sum = 0.0;
            for i in 0..3 {
                let h = 1e-5;
                let mut up = row.clone();
                up[i] += h;
                let mut dn = row.clone();
                dn[i] -= h;
                let d = (model.transform_forward(&up).unwrap().0[i] - model.transform_forward(&dn).unwrap().0[i]) / (2.0 * h);
                fd_sum += d.ln();
            }
            assert!(relative_error(ld[r], fd_sum, 1e-3) < 1e-3, "{} vs {}", ld[r], fd_sum);
        }
    }

    #[test]
    fn masking_ignores_non_parents() {
        let c = NodeKind::Continuous;
        let dag = CausalDag::new(&[("P", c), ("N", c), ("X", c)], &[("P", "X")]).unwrap();
        let model = FlowModel::<f64>::new(dag, tiny_arch(), 2).unwrap();
        let (z0, _) = model.transform_forward(&[0.4, -1.0, 0.9]).unwrap();
        let (z1, _) = model.transform_forward(&[0.4, 2.5, 0.9]).unwrap();
        assert_eq!(z0[2], z1[2]);
        assert_eq!(z0[0], z1[0]);
        let (z2, _) = model.transform_forward(&[-0.4, -1.0, 0.9]).unwrap();
        assert_ne!(z0[2], z2[2]);
    }

    #[test]
    fn transform_is_increasing_in_own_coordinate() {
        let model = FlowModel::<f64>::new(CausalDag::two_wave(), FlowArchitecture::default(), 13).unwrap();
        let base = [0.2, -0.5, 1.0, 0.3, -0.1];
        for i in 0..5 {
            let mut prev = f64::NEG_INFINITY;
            for k in 0..50 {
                let mut x = base;
                x[i] = -4.0 + 8.0 * k as f64 / 49.0;
                let zi = model.transform_forward(&x).unwrap().0[i];
                assert!(zi > prev);
                prev = zi;
            }
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let model = FlowModel::<f64>::new(chain3(), tiny_arch(), 21).unwrap();
        let x = random_rows(6, 3, 8);
        let (nll, grad) = model.nll_and_grad(&x).unwrap();
        let ll = model.log_likelihood(&x).unwrap();
        assert!((nll + ll / 6.0).abs() < 1e-10);
        let params = model.params();
        let fd = finite_difference_gradient(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                -m.log_likelihood(&x).unwrap() / 6.0
            },
            &params,
            1e-5,
        );
        let worst = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| relative_error(*a, *b, 1e-4))
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn interventions_clamp_coordinates() {
        let model = FlowModel::<f64>::new(CausalDag::two_wave(), FlowArchitecture::default(), 3).unwrap();
        let z = random_rows(20, 5, 3);
        let spec = InterventionSpec::arm(1, 0);
        let out = model.generate(&z, Some(&spec)).unwrap();
        for r in 0..out.rows {
            assert_eq!(out.get(r, 1), 1.0);
            assert_eq!(out.get(r, 3), 0.0);
        }
    }

    #[test]
    fn model_file_round_trip_is_bit_identical() {
        let model = FlowModel::<f64>::new(CausalDag::two_wave(), FlowArchitecture::default(), 17).unwrap();
        let text = serde_json::to_string(&model.to_file()).unwrap();
        let again = FlowModel::<f64>::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        let x = random_rows(30, 5, 4);
        assert_eq!(
            model.log_likelihood(&x).unwrap().to_bits(),
            again.log_likelihood(&x).unwrap().to_bits()
        );
    }

    #[test]
    fn f32_model_tracks_f64() {
        let model = FlowModel::<f64>::new(CausalDag::two_wave(), FlowArchitecture::default(), 6).unwrap();
        let small: FlowModel<f32> = model.cast();
        let x = random_rows(5, 5, 6);
        let xs = Matrix::from_vec(5, 5, x.data.iter().map(|&v| v as f32).collect()).unwrap();
        let a = model.log_likelihood(&x).unwrap();
        let b = small.log_likelihood(&xs).unwrap();
        assert!((a - b as f64).abs() < 1e-3 * a.abs().max(1.0));
    }
}

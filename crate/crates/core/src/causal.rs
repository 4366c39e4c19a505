//! Interventional and counterfactual queries against a trained flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{arm_index, best_arm, AteTriple, ARMS};
use crate::flow::FlowModel;
use crate::intervention::InterventionSpec;
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// Standard-normal base draws, `n x d`.
pub fn base_noise<T: Scalar>(n: usize, d: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Matrix { rows: n, cols: d, data }
}

/// Samples from the mutilated model: base noise pushed through the inverse
/// flow with the intervened nodes clamped. Rows are in data units with
/// discrete columns quantized.
pub fn sample_interventional<T: Scalar>(
    model: &FlowModel<T>,
    spec: &InterventionSpec,
    n_mc: usize,
    seed: u64,
) -> Result<Matrix<f64>> {
    let z = base_noise(n_mc, model.dim(), seed);
    model.generate(&z, Some(spec))
}

/// Means of `outcome` under the four two-wave arms, with the same base draws
/// reused across arms.
pub fn arm_means<T: Scalar>(model: &FlowModel<T>, outcome: &str, n_mc: usize, seed: u64) -> Result<[f64; 4]> {
    let y = model.dag().index_of(outcome)?;
    let z = base_noise(n_mc, model.dim(), seed);
    let mut means = [0.0; 4];
    for (k, &(a1, a2)) in ARMS.iter().enumerate() {
        let x = model.generate(&z, Some(&InterventionSpec::arm(a1, a2)))?;
        means[k] = x.column(y).iter().sum::<f64>() / n_mc as f64;
    }
    Ok(means)
}

/// Monte-Carlo estimates of the three effects on `Y`.
pub fn estimate_ate<T: Scalar>(model: &FlowModel<T>, n_mc: usize, seed: u64) -> Result<AteTriple> {
    Ok(AteTriple::from_arm_means(&arm_means(model, "Y", n_mc, seed)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    /// Abducted base noise of the unit.
    pub z: Vec<f64>,
    /// Potential outcomes indexed like [`ARMS`].
    pub outcomes: [f64; 4],
    pub policy: (u8, u8),
}

impl CounterfactualResult {
    pub fn outcome(&self, arm: (u8, u8)) -> f64 {
        self.outcomes[arm_index(arm)]
    }
}

/// Abduction, action and prediction for every row of `units` (data units,
/// discrete columns as labels) over all four arms.
pub fn counterfactual_batch<T: Scalar>(
    model: &FlowModel<T>,
    units: &Matrix<f64>,
    outcome: &str,
) -> Result<Vec<CounterfactualResult>> {
    let y = model.dag().index_of(outcome)?;
    let x = model.standardize(units)?;
    let (z, _) = model.transform_forward_batch(&x)?;
    let mut per_arm = Vec::with_capacity(4);
    for &(a1, a2) in &ARMS {
        let xs = model.transform_inverse_batch(&z, Some(&InterventionSpec::arm(a1, a2)))?;
        let s = model.standardizer();
        per_arm.push(
            xs.column(y)
                .into_iter()
                .map(|v| s.inverse(y, v.to_f64_lossy()))
                .collect::<Vec<f64>>(),
        );
    }
    Ok((0..units.rows)
        .map(|r| {
            let outcomes = [per_arm[0][r], per_arm[1][r], per_arm[2][r], per_arm[3][r]];
            CounterfactualResult {
                z: z.row(r).iter().map(|v| v.to_f64_lossy()).collect(),
                outcomes,
                policy: best_arm(&outcomes),
            }
        })
        .collect())
}

pub fn counterfactual<T: Scalar>(model: &FlowModel<T>, unit: &[f64], outcome: &str) -> Result<CounterfactualResult> {
    let m = Matrix::from_vec(1, unit.len(), unit.to_vec())?;
    Ok(counterfactual_batch(model, &m, outcome)?.remove(0))
}

/// Evenly spaced axis `start..=end` with `count` points; `count == 1` gives `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl Axis {
    /// Parses `start:end:count`, e.g. `-3:3:61`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::InvalidConfig(format!("grid axis `{text}` is not start:end:count"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if count == 0 || !start.is_finite() || !end.is_finite() {
            return Err(bad());
        }
        Ok(Axis { start, end, count })
    }

    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|k| self.start + step * k as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub z_c1: f64,
    pub z_c2: f64,
    pub a1: u8,
    pub a2: u8,
    pub y: f64,
}

/// Potential outcome of `Y` under `arm` over a grid of base-noise values for
/// `C1` and `C2`; every other base coordinate is zero.
pub fn potential_outcome_surface<T: Scalar>(
    model: &FlowModel<T>,
    c1_axis: &Axis,
    c2_axis: &Axis,
    arm: (u8, u8),
) -> Result<Vec<SurfacePoint>> {
    let dag = model.dag();
    let (c1, c2, y) = (dag.index_of("C1")?, dag.index_of("C2")?, dag.index_of("Y")?);
    let (p1, p2) = (c1_axis.points(), c2_axis.points());
    let mut z = Matrix::zeros(p1.len() * p2.len(), model.dim());
    for (i, &u) in p1.iter().enumerate() {
        for (j, &v) in p2.iter().enumerate() {
            let r = i * p2.len() + j;
            z.set(r, c1, T::lit(u));
            z.set(r, c2, T::lit(v));
        }
    }
    let x = model.generate(&z, Some(&InterventionSpec::arm(arm.0, arm.1)))?;
    Ok((0..z.rows)
        .map(|r| SurfacePoint {
            z_c1: p1[r / p2.len()],
            z_c2: p2[r % p2.len()],
            a1: arm.0,
            a2: arm.1,
            y: x.get(r, y),
        })
        .collect())
}

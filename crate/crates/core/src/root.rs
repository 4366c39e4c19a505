//! Bracketed bisection for strictly increasing scalar maps, run in lockstep
//! over a batch so that function evaluations can be batched.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionOptions {
    /// Stop once the bracket is narrower than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Maximum number of times the initial `[-1, 1]` bracket is doubled.
    pub max_doublings: usize,
}

impl Default for BisectionOptions {
    fn default() -> Self {
        BisectionOptions {
            tolerance: 1e-6,
            max_iterations: 200,
            max_doublings: 60,
        }
    }
}

/// Why a batched solve stopped without a root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFailure {
    Bracketing(usize),
    NonFinite(usize),
}

/// Finds `x_k` with `f_k(x_k) = targets[k]` for every `k`.
///
/// `eval(indices, points)` must return `f_k(points[j])` for `k = indices[j]`.
/// Each `f_k` is assumed strictly increasing.
pub fn solve_increasing_batch<T: Scalar>(
    targets: &[T],
    mut eval: impl FnMut(&[usize], &[T]) -> Result<Vec<T>>,
    opts: &BisectionOptions,
) -> std::result::Result<Vec<T>, SolveFailure> {
    let n = targets.len();
    let mut lo = vec![-T::one(); n];
    let mut hi = vec![T::one(); n];
    let call = |eval: &mut dyn FnMut(&[usize], &[T]) -> Result<Vec<T>>,
                idx: &[usize],
                pts: &[T]|
     -> std::result::Result<Vec<T>, SolveFailure> {
        let vals = eval(idx, pts).map_err(|_| SolveFailure::NonFinite(idx.first().copied().unwrap_or(0)))?;
        if let Some(j) = vals.iter().position(|v| !v.is_finite()) {
            return Err(SolveFailure::NonFinite(idx[j]));
        }
        Ok(vals)
    };

    // Expand brackets until f(lo) <= target <= f(hi).
    let mut pending: Vec<usize> = (0..n).collect();
    let mut doublings = 0;
    while !pending.is_empty() {
        let mut idx = Vec::with_capacity(2 * pending.len());
        let mut pts = Vec::with_capacity(2 * pending.len());
        for &k in &pending {
            idx.push(k);
            pts.push(lo[k]);
            idx.push(k);
            pts.push(hi[k]);
        }
        let vals = call(&mut eval, &idx, &pts)?;
        let mut still = Vec::new();
        for (j, &k) in pending.iter().enumerate() {
            let (f_lo, f_hi) = (vals[2 * j], vals[2 * j + 1]);
            let low_ok = f_lo <= targets[k];
            let high_ok = f_hi >= targets[k];
            if low_ok && high_ok {
                continue;
            }
            // step past the old bracket with twice its width
            let w = (hi[k] - lo[k]) * T::lit(2.0);
            if !low_ok {
                hi[k] = lo[k];
                lo[k] = lo[k] - w;
            } else {
                lo[k] = hi[k];
                hi[k] = hi[k] + w;
            }
            still.push(k);
        }
        if !still.is_empty() {
            doublings += 1;
            if doublings > opts.max_doublings {
                return Err(SolveFailure::Bracketing(still[0]));
            }
        }
        pending = still;
    }

    let tol = T::lit(opts.tolerance);
    let half = T::lit(0.5);
    let mut active: Vec<usize> = (0..n).filter(|&k| hi[k] - lo[k] > tol).collect();
    let mut iterations = 0;
    while !active.is_empty() && iterations < opts.max_iterations {
        let mids: Vec<T> = active.iter().map(|&k| (lo[k] + hi[k]) * half).collect();
        let vals = call(&mut eval, &active, &mids)?;
        for (j, &k) in active.iter().enumerate() {
            if vals[j] < targets[k] {
                lo[k] = mids[j];
            } else {
                hi[k] = mids[j];
            }
        }
        active.retain(|&k| hi[k] - lo[k] > tol);
        iterations += 1;
    }
    Ok((0..n).map(|k| (lo[k] + hi[k]) * half).collect())
}

pub(crate) fn failure_to_error(f: SolveFailure, node: &str) -> Error {
    match f {
        SolveFailure::Bracketing(_) => Error::BracketingFailed {
            node: node.to_string(),
        },
        SolveFailure::NonFinite(_) => Error::NonFiniteValue("inverse transform"),
    }
}

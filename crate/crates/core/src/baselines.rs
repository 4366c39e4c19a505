//! Classical two-wave estimators: stabilized IPW with a marginal structural
//! model, regression-with-residuals, and grouped conditional outcome models.
//!
//! Data are rows `C1, A1, C2, A2, Y`. Regression designs are written as
//! feature recipes such as `"A1*C1"`, `"center(C1)"` or
//! `"resid(C2 ~ C1+A1)"`; an intercept is always added.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{arm_index, AteTriple, ARMS};
use crate::nn::Matrix;
use crate::scm_sim::DATA_HEADER;

/// Probabilities are clipped into `[CLIP, 1 - CLIP]`.
pub const PROPENSITY_CLIP: f64 = 1e-6;

fn column_index(name: &str) -> Result<usize> {
    DATA_HEADER
        .iter()
        .position(|&h| h == name)
        .ok_or_else(|| Error::UnknownFeature(name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Feature {
    Column(String),
    Center(String),
    /// OLS residual of `target` on an intercept and `predictors`.
    Resid { target: String, predictors: Vec<String> },
    Product(Vec<Feature>),
}

impl Feature {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let factors = split_top_level(text, '*');
        if factors.len() > 1 {
            return Ok(Feature::Product(
                factors.into_iter().map(Feature::parse).collect::<Result<_>>()?,
            ));
        }
        if let Some(inner) = strip_call(text, "center") {
            column_index(inner)?;
            return Ok(Feature::Center(inner.to_string()));
        }
        if let Some(inner) = strip_call(text, "resid") {
            let (target, rhs) = inner
                .split_once('~')
                .ok_or_else(|| Error::UnknownFeature(text.to_string()))?;
            let target = target.trim().to_string();
            column_index(&target)?;
            let predictors: Vec<String> = rhs.split('+').map(|p| p.trim().to_string()).collect();
            for p in &predictors {
                column_index(p)?;
            }
            return Ok(Feature::Resid { target, predictors });
        }
        column_index(text)?;
        Ok(Feature::Column(text.to_string()))
    }
}

fn strip_call<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    text.strip_prefix(name)?
        .trim_start()
        .strip_prefix('(')?
        .strip_suffix(')')
        .map(str::trim)
}

fn split_top_level(text: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                parts.push(text[start..i].trim());
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(text[start..].trim());
    parts
}

pub fn parse_recipe<S: AsRef<str>>(items: &[S]) -> Result<Vec<Feature>> {
    items.iter().map(|s| Feature::parse(s.as_ref())).collect()
}

/// Evaluates recipes on a dataset, optionally with the treatment columns
/// replaced by a fixed arm. Centering means and residuals always come from
/// the observed data.
struct DesignBuilder<'a> {
    data: &'a Matrix<f64>,
}

impl<'a> DesignBuilder<'a> {
    fn value(&self, f: &Feature, row: usize, arm: Option<(u8, u8)>, cache: &FeatureCache) -> f64 {
        match f {
            Feature::Column(name) => {
                let j = column_index(name).expect("validated");
                match (arm, j) {
                    (Some((a1, _)), 1) => a1 as f64,
                    (Some((_, a2)), 3) => a2 as f64,
                    _ => self.data.get(row, j),
                }
            }
            Feature::Center(name) => {
                let j = column_index(name).expect("validated");
                self.data.get(row, j) - cache.means[j]
            }
            Feature::Resid { target, predictors } => cache
                .residuals
                .iter()
                .find(|(t, p, _)| t == target && p == predictors)
                .map(|(_, _, r)| r[row])
                .expect("residual prepared"),
            Feature::Product(fs) => fs.iter().map(|g| self.value(g, row, arm, cache)).product(),
        }
    }

    fn design(&self, recipe: &[Feature], rows: &[usize], arm: Option<(u8, u8)>, cache: &FeatureCache) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), recipe.len() + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                self.value(&recipe[c - 1], rows[r], arm, cache)
            }
        })
    }
}

struct FeatureCache {
    means: Vec<f64>,
    residuals: Vec<(String, Vec<String>, Vec<f64>)>,
}

impl FeatureCache {
    fn prepare(data: &Matrix<f64>, recipes: &[&[Feature]]) -> Result<Self> {
        let n = data.rows as f64;
        let means = (0..data.cols)
            .map(|j| data.column(j).iter().sum::<f64>() / n)
            .collect();
        let mut cache = FeatureCache {
            means,
            residuals: Vec::new(),
        };
        let mut stack: Vec<&Feature> = recipes.iter().flat_map(|r| r.iter()).collect();
        while let Some(f) = stack.pop() {
            match f {
                Feature::Product(fs) => stack.extend(fs.iter()),
                Feature::Resid { target, predictors } => {
                    if cache.residuals.iter().any(|(t, p, _)| t == target && p == predictors) {
                        continue;
                    }
                    let cols: Vec<usize> = predictors.iter().map(|p| column_index(p)).collect::<Result<_>>()?;
                    let x = DMatrix::from_fn(data.rows, cols.len() + 1, |r, c| {
                        if c == 0 {
                            1.0
                        } else {
                            data.get(r, cols[c - 1])
                        }
                    });
                    let y = DVector::from_vec(data.column(column_index(target)?));
                    let beta = least_squares(&x, &y, "residual regression")?;
                    let resid = &y - &x * &beta;
                    cache
                        .residuals
                        .push((target.clone(), predictors.clone(), resid.iter().copied().collect()));
                }
                _ => {}
            }
        }
        Ok(cache)
    }
}

/// Least squares via QR; fails when the design is rank deficient.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign(what));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale.max(1e-300)) {
        return Err(Error::SingularDesign(what));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty).ok_or(Error::SingularDesign(what))
}

fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], what: &'static str) -> Result<DVector<f64>> {
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] * sw[r]);
    let yw = DVector::from_fn(y.len(), |r, _| y[r] * sw[r]);
    least_squares(&xw, &yw, what)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Intercept first, then one coefficient per feature.
    pub coef: Vec<f64>,
    pub recipe: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub coef: Vec<f64>,
    pub recipe: Vec<Feature>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Logistic regression by iteratively reweighted least squares.
fn fit_logistic(x: &DMatrix<f64>, y: &[f64], what: &'static str) -> Result<(DVector<f64>, usize, f64)> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut grad_norm = f64::INFINITY;
    for it in 0..100 {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| crate::scalar::sigmoid(e)).collect();
        let resid = DVector::from_fn(y.len(), |r, _| y[r] - mu[r]);
        let grad = x.transpose() * &resid;
        grad_norm = grad.norm();
        if grad_norm < 1e-8 {
            return Ok((beta, it, grad_norm));
        }
        let w: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-12)).collect();
        let xw = DMatrix::from_fn(x.nrows(), p, |r, c| x[(r, c)] * w[r]);
        let hess = x.transpose() * xw;
        let step = hess
            .cholesky()
            .ok_or(Error::SingularDesign(what))?
            .solve(&grad);
        beta += step;
    }
    Ok((beta, 100, grad_norm))
}

/// Fits `Y ~ recipe` by OLS on the given rows.
pub fn fit_linear(data: &Matrix<f64>, target: &str, recipe: &[Feature]) -> Result<LinearModel> {
    let cache = FeatureCache::prepare(data, &[recipe])?;
    let rows: Vec<usize> = (0..data.rows).collect();
    let x = DesignBuilder { data }.design(recipe, &rows, None, &cache);
    let y = DVector::from_vec(data.column(column_index(target)?));
    let beta = least_squares(&x, &y, "linear model")?;
    Ok(LinearModel {
        coef: beta.iter().copied().collect(),
        recipe: recipe.to_vec(),
    })
}

/// Fits `P(target = 1 | recipe)` by IRLS.
pub fn fit_logistic_model(data: &Matrix<f64>, target: &str, recipe: &[Feature]) -> Result<LogisticModel> {
    let cache = FeatureCache::prepare(data, &[recipe])?;
    let rows: Vec<usize> = (0..data.rows).collect();
    let x = DesignBuilder { data }.design(recipe, &rows, None, &cache);
    let y = data.column(column_index(target)?);
    let (beta, iterations, gradient_norm) = fit_logistic(&x, &y, "propensity model")?;
    Ok(LogisticModel {
        coef: beta.iter().copied().collect(),
        recipe: recipe.to_vec(),
        iterations,
        gradient_norm,
    })
}

impl LogisticModel {
    pub fn predict(&self, data: &Matrix<f64>) -> Result<Vec<f64>> {
        let cache = FeatureCache::prepare(data, &[&self.recipe])?;
        let rows: Vec<usize> = (0..data.rows).collect();
        let x = DesignBuilder { data }.design(&self.recipe, &rows, None, &cache);
        let beta = DVector::from_vec(self.coef.clone());
        Ok((x * beta).iter().map(|&e| crate::scalar::sigmoid(e)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwSpec {
    /// Denominator model for `P(A1 | history)`.
    pub a1_recipe: Vec<String>,
    /// Denominator model for `P(A2 | history)`.
    pub a2_recipe: Vec<String>,
}

impl Default for IpwSpec {
    fn default() -> Self {
        IpwSpec {
            a1_recipe: vec!["C1".into()],
            a2_recipe: vec!["A1".into(), "C2".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwReport {
    pub ate: AteTriple,
    /// Fraction of fitted probabilities altered by clipping.
    pub clipped_fraction: f64,
    /// Set when clipping altered more than 1% of the weights.
    pub positivity_violation: bool,
    pub weight_mean: f64,
}

/// Stabilized-weight IPW with the saturated marginal structural model
/// `Y ~ 1 + A1 + A2 + A1*A2`.
pub fn ipw_estimate(data: &Matrix<f64>, spec: &IpwSpec) -> Result<IpwReport> {
    let n = data.rows;
    let den1 = fit_logistic_model(data, "A1", &parse_recipe(&spec.a1_recipe)?)?.predict(data)?;
    let den2 = fit_logistic_model(data, "A2", &parse_recipe(&spec.a2_recipe)?)?.predict(data)?;
    let num1 = fit_logistic_model(data, "A1", &[])?.predict(data)?;
    let num2 = fit_logistic_model(data, "A2", &[Feature::Column("A1".into())])?.predict(data)?;

    let mut clipped = 0usize;
    let mut clip = |p: f64| {
        let c = p.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
        if c != p {
            clipped += 1;
        }
        c
    };
    let mut weights = Vec::with_capacity(n);
    for r in 0..n {
        let a1 = data.get(r, 1) == 1.0;
        let a2 = data.get(r, 3) == 1.0;
        let at = |p: f64, treated: bool| if treated { p } else { 1.0 - p };
        let (d1, d2, n1, n2) = (clip(den1[r]), clip(den2[r]), clip(num1[r]), clip(num2[r]));
        weights.push(at(n1, a1) * at(n2, a2) / (at(d1, a1) * at(d2, a2)));
    }
    let clipped_fraction = clipped as f64 / (4 * n) as f64;
    let msm = parse_recipe(&["A1", "A2", "A1*A2"])?;
    let cache = FeatureCache::prepare(data, &[&msm])?;
    let rows: Vec<usize> = (0..n).collect();
    let x = DesignBuilder { data }.design(&msm, &rows, None, &cache);
    let y = DVector::from_vec(data.column(4));
    let b = weighted_least_squares(&x, &y, &weights, "marginal structural model")?;
    let weight_mean = weights.iter().sum::<f64>() / n as f64;
    let positivity_violation = clipped_fraction > 0.01;
    if positivity_violation {
        log::warn!("propensity clipping altered {:.2}% of probabilities", 100.0 * clipped_fraction);
    }
    Ok(IpwReport {
        ate: AteTriple {
            l10: b[1],
            l01: b[2],
            l11: b[2] + b[3],
        },
        clipped_fraction,
        positivity_violation,
        weight_mean,
    })
}

/// Regression-with-residuals: `C2` is residualized on `(C1, A1)` and the
/// outcome regressed on `(center(C1), A1, r2, A2, A1*A2)`.
pub fn rwr_estimate(data: &Matrix<f64>) -> Result<AteTriple> {
    let recipe = parse_recipe(&["center(C1)", "A1", "resid(C2 ~ C1+A1)", "A2", "A1*A2"])?;
    let m = fit_linear(data, "Y", &recipe)?;
    Ok(AteTriple {
        l10: m.coef[2],
        l01: m.coef[4],
        l11: m.coef[4] + m.coef[5],
    })
}

/// Outcome design used by the correctly specified GCOM variant.
pub const GCOM_THETA_RECIPE: [&str; 8] = [
    "center(C1)",
    "A1",
    "A1*C1",
    "resid(C2 ~ C1+A1)",
    "resid(C2 ~ C1+A1)*C1",
    "A2",
    "A2*C1",
    "A1*A2",
];

/// Grouped conditional outcome models. With `correct_form == false` one
/// `Y ~ C1 + C2` regression is fitted per arm; otherwise a single regression
/// with the true functional form. Effects are contrasts of predictions
/// averaged over the whole sample.
pub fn gcom_estimate(data: &Matrix<f64>, correct_form: bool) -> Result<AteTriple> {
    let n = data.rows;
    let all: Vec<usize> = (0..n).collect();
    let builder = DesignBuilder { data };
    let mut means = [0.0; 4];
    if correct_form {
        let recipe = parse_recipe(&GCOM_THETA_RECIPE)?;
        let model = fit_linear(data, "Y", &recipe)?;
        let cache = FeatureCache::prepare(data, &[&recipe])?;
        let beta = DVector::from_vec(model.coef);
        for &arm in &ARMS {
            let x = builder.design(&recipe, &all, Some(arm), &cache);
            means[arm_index(arm)] = (x * &beta).mean();
        }
    } else {
        let recipe = parse_recipe(&["C1", "C2"])?;
        let cache = FeatureCache::prepare(data, &[&recipe])?;
        let y_all = data.column(4);
        let full = builder.design(&recipe, &all, None, &cache);
        for &(a1, a2) in &ARMS {
            let rows: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&r| data.get(r, 1) == a1 as f64 && data.get(r, 3) == a2 as f64)
                .collect();
            if rows.is_empty() {
                return Err(Error::EmptyStratum { a1, a2 });
            }
            let x = builder.design(&recipe, &rows, None, &cache);
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y_all[r]));
            let beta = least_squares(&x, &y, "stratum outcome model")?;
            means[arm_index((a1, a2))] = (&full * beta).mean();
        }
    }
    Ok(AteTriple::from_arm_means(&means))
}

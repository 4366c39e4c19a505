//! Benchmark harness: simulate, fit every estimator, aggregate over seeds,
//! and evaluate individual policies against the simulator's ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gcom_estimate, ipw_estimate, rwr_estimate, IpwSpec};
use crate::causal::{counterfactual_batch, estimate_ate, potential_outcome_surface, Axis, CounterfactualResult};
use crate::dag::CausalDag;
use crate::error::{Error, Result};
use crate::estimand::{arm_index, AteTriple, Lambda, ARMS};
use crate::flow::FlowModel;
use crate::nn::Matrix;
use crate::scalar::{mean_std, Scalar};
use crate::scm_sim::{simulate, to_matrix, true_optimal_policy, true_potential_outcome, SimNoise, SimSetting};
use crate::train::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Cgnf,
    Ipw,
    Rwr,
    Gcom,
    GcomTheta,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Cgnf,
        Estimator::Ipw,
        Estimator::Rwr,
        Estimator::Gcom,
        Estimator::GcomTheta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Cgnf => "cgnf",
            Estimator::Ipw => "ipw",
            Estimator::Rwr => "rwr",
            Estimator::Gcom => "gcom",
            Estimator::GcomTheta => "gcom_theta",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Setting names `a`, `b`, `c`.
    pub settings: Vec<String>,
    pub sizes: Vec<usize>,
    pub seeds: usize,
    pub estimators: Vec<Estimator>,
    pub train: TrainConfig,
    pub mc_samples: usize,
    pub master_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            settings: vec!["a".into(), "b".into(), "c".into()],
            sizes: vec![500, 2000],
            seeds: 5,
            estimators: Estimator::ALL.to_vec(),
            train: TrainConfig::default(),
            mc_samples: 2000,
            master_seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if let Some(n) = self.sizes.iter().find(|&&n| n < 100) {
            return Err(Error::InvalidConfig(format!("sample size {n} is below 100")));
        }
        if self.settings.is_empty() || self.sizes.is_empty() || self.estimators.is_empty() {
            return Err(Error::InvalidConfig("empty settings, sizes or estimators".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("mc_samples must be positive".into()));
        }
        for s in &self.settings {
            SimSetting::preset(s)?;
        }
        self.train.validate()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of one benchmark cell; stable across platforms and releases.
pub fn cell_seed(master: u64, setting: &str, size: usize, index: usize) -> u64 {
    let mut h = splitmix(master);
    for b in setting.to_ascii_lowercase().bytes() {
        h = splitmix(h ^ b as u64);
    }
    h = splitmix(h ^ size as u64);
    splitmix(h ^ index as u64)
}

/// Estimates of one (setting, size, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub setting: String,
    pub size: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub estimates: BTreeMap<Estimator, AteTriple>,
}

pub fn run_cell(config: &BenchmarkConfig, setting: &str, size: usize, index: usize) -> Result<CellResult> {
    let seed = cell_seed(config.master_seed, setting, size, index);
    let sim = SimSetting::preset(setting)?;
    let data = to_matrix(&simulate(&sim, size, seed));
    let mut estimates = BTreeMap::new();
    for &e in &config.estimators {
        let ate = match e {
            Estimator::Cgnf => {
                let train = TrainConfig { seed, ..config.train.clone() };
                let (model, log) = fit::<f64>(&CausalDag::two_wave(), &data, &train)?;
                info!(
                    "setting {setting} n={size} seed#{index}: best epoch {} val nll {:.4}",
                    log.best_epoch, log.best_val_nll
                );
                estimate_ate(&model, config.mc_samples, splitmix(seed))?
            }
            Estimator::Ipw => ipw_estimate(&data, &IpwSpec::default())?.ate,
            Estimator::Rwr => rwr_estimate(&data)?,
            Estimator::Gcom => gcom_estimate(&data, false)?,
            Estimator::GcomTheta => gcom_estimate(&data, true)?,
        };
        estimates.insert(e, ate);
    }
    Ok(CellResult {
        setting: setting.to_ascii_lowercase(),
        size,
        seed_index: index,
        seed,
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub setting: String,
    pub size: usize,
    pub estimator: Estimator,
    pub lambda: Lambda,
    /// One value per seed, in seed-index order.
    pub estimates: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    pub truth: f64,
    pub zero_in_band: bool,
    pub sign_correct: bool,
}

impl EstimateEntry {
    pub fn new(setting: &str, size: usize, estimator: Estimator, lambda: Lambda, estimates: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&estimates);
        let truth = AteTriple::TRUTH.get(lambda);
        EstimateEntry {
            setting: setting.to_string(),
            size,
            estimator,
            lambda,
            estimates,
            mean,
            std,
            truth,
            zero_in_band: mean - std <= 0.0 && 0.0 <= mean + std,
            sign_correct: mean.signum() == truth.signum(),
        }
    }

    pub fn bias(&self) -> f64 {
        self.mean - self.truth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub config: BenchmarkConfig,
    pub entries: Vec<EstimateEntry>,
}

impl EstimateReport {
    pub fn from_cells(config: &BenchmarkConfig, cells: &[CellResult]) -> Self {
        let mut entries = Vec::new();
        for setting in &config.settings {
            let setting = setting.to_ascii_lowercase();
            for &size in &config.sizes {
                let mut group: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| c.setting == setting && c.size == size)
                    .collect();
                group.sort_by_key(|c| c.seed_index);
                for &e in &config.estimators {
                    for l in Lambda::ALL {
                        let values = group
                            .iter()
                            .filter_map(|c| c.estimates.get(&e).map(|t| t.get(l)))
                            .collect();
                        entries.push(EstimateEntry::new(&setting, size, e, l, values));
                    }
                }
            }
        }
        EstimateReport { config: config.clone(), entries }
    }

    pub fn entry(&self, setting: &str, size: usize, estimator: Estimator, lambda: Lambda) -> Option<&EstimateEntry> {
        self.entries.iter().find(|e| {
            e.setting.eq_ignore_ascii_case(setting) && e.size == size && e.estimator == estimator && e.lambda == lambda
        })
    }

    /// Pretty JSON with object keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        wr.write_record(["setting", "size", "estimator", "lambda", "seed_index", "estimate", "mean", "std", "truth"])
            .map_err(io)?;
        for e in &self.entries {
            for (i, v) in e.estimates.iter().enumerate() {
                wr.write_record([
                    e.setting.clone(),
                    e.size.to_string(),
                    e.estimator.to_string(),
                    e.lambda.name().to_string(),
                    i.to_string(),
                    v.to_string(),
                    e.mean.to_string(),
                    e.std.to_string(),
                    e.truth.to_string(),
                ])
                .map_err(io)?;
            }
        }
        let bytes = wr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    // serde_json's map is ordered by key, so a round trip through Value sorts
    let value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

/// Runs every cell on a pool of `jobs` workers, writing each finished cell to
/// `out/cells/` and the aggregate to `out/report.json` and `out/report.csv`.
pub fn run_benchmark(config: &BenchmarkConfig, jobs: usize, out: &Path) -> Result<EstimateReport> {
    config.validate()?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let mut jobs_list = Vec::new();
    for setting in &config.settings {
        for &size in &config.sizes {
            for index in 0..config.seeds {
                jobs_list.push((setting.to_ascii_lowercase(), size, index));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let cells: Vec<CellResult> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|(setting, size, index)| {
                let cell = run_cell(config, setting, *size, *index)?;
                let path = cells_dir.join(format!("{setting}-n{size}-s{index}.json"));
                fs::write(path, canonical_json(&cell)?)?;
                Ok(cell)
            })
            .collect::<Result<_>>()
    })?;
    let report = EstimateReport::from_cells(config, &cells);
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("report.csv"), report.to_csv()?)?;
    Ok(report)
}

/// Confusion matrix of optimal arms; rows are true arms, columns predicted,
/// both in [`ARMS`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub confusion: [[usize; 4]; 4],
    pub accuracy: f64,
    pub units: usize,
}

pub fn policy_confusion(truth: &[(u8, u8)], predicted: &[(u8, u8)]) -> Result<PolicyReport> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch { expected: truth.len(), got: predicted.len() });
    }
    if truth.is_empty() {
        return Err(Error::InsufficientData("no units to evaluate".into()));
    }
    let mut confusion = [[0usize; 4]; 4];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[arm_index(t)][arm_index(p)] += 1;
    }
    let hits: usize = (0..4).map(|k| confusion[k][k]).sum();
    Ok(PolicyReport {
        confusion,
        accuracy: hits as f64 / truth.len() as f64,
        units: truth.len(),
    })
}

/// Policy accuracy on the model's validation and test rows of `data`, using
/// the noise sidecar of the same rows for the true optimal arms.
pub fn run_policy_eval<T: Scalar>(
    model: &FlowModel<T>,
    data: &Matrix<f64>,
    noise: Option<&[SimNoise]>,
    setting: &SimSetting,
) -> Result<PolicyReport> {
    let noise = noise.ok_or_else(|| Error::MissingSidecar("policy evaluation needs the simulation noise".into()))?;
    if noise.len() != data.rows {
        return Err(Error::ShapeMismatch { expected: data.rows, got: noise.len() });
    }
    let rows: Vec<usize> = model
        .metadata
        .val_rows
        .iter()
        .chain(&model.metadata.test_rows)
        .copied()
        .collect();
    if let Some(&r) = rows.iter().find(|&&r| r >= data.rows) {
        return Err(Error::IndexOutOfRange { index: r, len: data.rows });
    }
    let mut units = Matrix::zeros(rows.len(), data.cols);
    for (k, &r) in rows.iter().enumerate() {
        units.row_mut(k).copy_from_slice(data.row(r));
    }
    let predicted: Vec<(u8, u8)> = counterfactual_batch(model, &units, "Y")?
        .into_iter()
        .map(|c| c.policy)
        .collect();
    let truth: Vec<(u8, u8)> = rows.iter().map(|&r| true_optimal_policy(&noise[r], setting)).collect();
    policy_confusion(&truth, &predicted)
}

/// Potential outcome of `Y` on the true SCM with `u_C1 = z_c1`, `u_C2 = z_c2`
/// and no outcome noise.
pub fn oracle_surface_value(setting: &SimSetting, z_c1: f64, z_c2: f64, arm: (u8, u8)) -> f64 {
    let noise = SimNoise {
        u_c1: z_c1,
        u_a1: 0.5,
        u_c2: z_c2,
        u_a2: 0.5,
        u_y: 0.0,
    };
    true_potential_outcome(&noise, arm.0, arm.1, setting)
}

/// Surface CSV over all `arms`; adds an `oracle` column when `setting` is given.
pub fn surface_csv<T: Scalar>(
    model: &FlowModel<T>,
    c1_axis: &Axis,
    c2_axis: &Axis,
    arms: &[(u8, u8)],
    setting: Option<&SimSetting>,
) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec!["z_c1", "z_c2", "a1", "a2", "y"];
    if setting.is_some() {
        header.push("oracle");
    }
    wr.write_record(&header).map_err(io)?;
    for &arm in arms {
        for p in potential_outcome_surface(model, c1_axis, c2_axis, arm)? {
            let mut rec = vec![
                p.z_c1.to_string(),
                p.z_c2.to_string(),
                p.a1.to_string(),
                p.a2.to_string(),
                p.y.to_string(),
            ];
            if let Some(s) = setting {
                rec.push(oracle_surface_value(s, p.z_c1, p.z_c2, arm).to_string());
            }
            wr.write_record(&rec).map_err(io)?;
        }
    }
    let bytes = wr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub row: usize,
    pub observed: BTreeMap<String, f64>,
    pub z: Vec<f64>,
    /// Keyed `"a1a2"`, e.g. `"10"`.
    pub outcomes: BTreeMap<String, f64>,
    pub chosen: (u8, u8),
    pub true_optimal: Option<(u8, u8)>,
}

impl CounterfactualReport {
    pub fn new(
        row: usize,
        names: &[&str],
        observed: &[f64],
        result: &CounterfactualResult,
        true_optimal: Option<(u8, u8)>,
    ) -> Self {
        CounterfactualReport {
            row,
            observed: names.iter().map(|n| n.to_string()).zip(observed.iter().copied()).collect(),
            z: result.z.clone(),
            outcomes: ARMS
                .iter()
                .map(|&(a1, a2)| (format!("{a1}{a2}"), result.outcome((a1, a2))))
                .collect(),
            chosen: result.policy,
            true_optimal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seeds_are_distinct_and_stable() {
        let a = cell_seed(0, "a", 2000, 0);
        assert_eq!(a, cell_seed(0, "A", 2000, 0));
        let others = [
            cell_seed(1, "a", 2000, 0),
            cell_seed(0, "b", 2000, 0),
            cell_seed(0, "a", 500, 0),
            cell_seed(0, "a", 2000, 1),
        ];
        assert!(others.iter().all(|&s| s != a));
    }

    #[test]
    fn config_validation() {
        assert!(BenchmarkConfig::default().validate().is_ok());
        let bad = BenchmarkConfig { seeds: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let small = BenchmarkConfig { sizes: vec![99], ..Default::default() };
        assert!(small.validate().is_err());
        let unknown = BenchmarkConfig { settings: vec!["d".into()], ..Default::default() };
        assert!(unknown.validate().is_err());
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert!("dr".parse::<Estimator>().is_err());
    }

    #[test]
    fn entry_flags_and_statistics() {
        let e = EstimateEntry::new("a", 2000, Estimator::Ipw, Lambda::L11, vec![0.1, 0.3, 0.5]);
        assert!((e.mean - 0.3).abs() < 1e-12);
        assert!((e.std - 0.2).abs() < 1e-12);
        assert!(!e.zero_in_band);
        assert!(e.sign_correct);
        let straddle = EstimateEntry::new("a", 2000, Estimator::Ipw, Lambda::L10, vec![-0.2, 0.3]);
        assert!(straddle.zero_in_band);
    }

    #[test]
    fn baseline_report_shape_and_determinism() {
        let config = BenchmarkConfig {
            settings: vec!["a".into(), "b".into()],
            sizes: vec![300],
            seeds: 3,
            estimators: vec![Estimator::Ipw, Estimator::Rwr, Estimator::Gcom, Estimator::GcomTheta],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = run_benchmark(&config, 2, dir.path()).unwrap();
        assert_eq!(report.entries.len(), 2 * 4 * 3);
        assert!(report.entries.iter().all(|e| e.estimates.len() == 3));
        let first = fs::read(dir.path().join("report.json")).unwrap();
        let again = tempfile::tempdir().unwrap();
        run_benchmark(&config, 1, again.path()).unwrap();
        assert_eq!(first, fs::read(again.path().join("report.json")).unwrap());
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 4 * 3 * 3);
        let parsed: EstimateReport = serde_json::from_slice(&first).unwrap();
        for e in &parsed.entries {
            let (m, s) = mean_std(&e.estimates);
            assert!((m - e.mean).abs() < 1e-12 && (s - e.std).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let setting = SimSetting::C;
        let units = simulate(&setting, 500, 3);
        let truth: Vec<(u8, u8)> = units.iter().map(|u| true_optimal_policy(&u.noise, &setting)).collect();
        let perfect = policy_confusion(&truth, &truth).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert!(i == j || perfect.confusion[i][j] == 0);
            }
        }
        let constant = policy_confusion(&truth, &vec![(1, 1); truth.len()]).unwrap();
        let prevalence = truth.iter().filter(|&&t| t == (1, 1)).count() as f64 / truth.len() as f64;
        assert_eq!(constant.accuracy, prevalence);
    }

    #[test]
    fn policy_eval_requires_sidecar() {
        let model = FlowModel::<f64>::new(CausalDag::two_wave(), Default::default(), 1).unwrap();
        let data = to_matrix(&simulate(&SimSetting::A, 10, 1));
        assert!(matches!(
            run_policy_eval(&model, &data, None, &SimSetting::A),
            Err(Error::MissingSidecar(_))
        ));
    }

    #[test]
    fn oracle_surface_is_a_plane_in_setting_a() {
        let f = |u: f64, v: f64| oracle_surface_value(&SimSetting::A, u, v, (1, 1));
        let base = f(0.0, 0.0);
        assert!((base - 0.5).abs() < 1e-12);
        assert!((f(1.0, 0.0) - base - 0.4).abs() < 1e-12);
        assert!((f(0.0, 1.0) - base - 0.4).abs() < 1e-12);
        assert!((f(1.0, 1.0) + base - f(1.0, 0.0) - f(0.0, 1.0)).abs() < 1e-12);
    }
}

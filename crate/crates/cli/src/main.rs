use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgnf::causal::{arm_means, counterfactual_batch, sample_interventional, Axis};
use cgnf::estimand::{AteTriple, ARMS};
use cgnf::experiment::{
    canonical_json, run_benchmark, run_policy_eval, surface_csv, BenchmarkConfig, CounterfactualReport, Estimator,
};
use cgnf::gcomp_oracle::{binarized_two_wave_scm, DiscreteScm};
use cgnf::scm_sim::{read_columns, read_dataset, read_noise, simulate, true_optimal_policy, write_dataset, write_noise, SimSetting};
use cgnf::{baselines, fit, CausalDag, Error, FlowModel, InterventionSpec, Matrix, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cgnf", version, about = "Causal graphical normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a two-wave dataset plus its noise sidecar
    Simulate {
        #[arg(long, default_value = "a")]
        setting: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a flow to a dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Graph JSON; defaults to the two-wave graph
        #[arg(long)]
        dag: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo effects, or interventional means with --do
    Ate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "do")]
        intervention: Option<String>,
        #[arg(long, default_value_t = 2000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Classical estimators on a dataset
    Baselines {
        #[arg(long)]
        data: PathBuf,
    },
    /// Abduction, action and prediction for selected rows
    Counterfactual {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated row indices
        #[arg(long, default_value = "0")]
        rows: String,
        /// Adds the true optimal arm from the noise sidecar
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Confusion matrix of optimal arms on validation and test rows
    Policy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        setting: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Potential-outcome surface over the C1 and C2 base noise
    Surface {
        #[arg(long)]
        model: PathBuf,
        /// Axis `start:end:count`, shared by both noise coordinates
        #[arg(long, default_value = "-3:3:61", allow_hyphen_values = true)]
        grid: String,
        /// Arm as two digits, e.g. 10; all four arms when absent
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full benchmark over settings, sizes and seeds
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "a,b,c")]
        setting: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "500,2000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_value = "cgnf,ipw,rwr,gcom,gcom_theta")]
        estimators: Vec<String>,
        /// Master seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact g-computation on a discrete SCM
    Oracle {
        /// Discrete SCM JSON
        #[arg(long, conflicts_with = "data")]
        scm: Option<PathBuf>,
        /// Builds the binarized two-wave SCM from a dataset instead
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "do")]
        intervention: Option<String>,
        #[arg(long, default_value = "Y")]
        target: String,
        /// Writes the SCM used
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig { seed, ..Default::default() };
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        c
    }
}

fn sidecar_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data.with_file_name(format!("{stem}.noise.csv"))
}

fn read_data(path: &Path) -> cgnf::Result<Matrix<f64>> {
    read_dataset(fs::File::open(path)?)
}

fn emit(text: &str, out: Option<&Path>) -> cgnf::Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_arm(text: &str) -> cgnf::Result<(u8, u8)> {
    match text.trim() {
        "00" => Ok((0, 0)),
        "01" => Ok((0, 1)),
        "10" => Ok((1, 0)),
        "11" => Ok((1, 1)),
        other => Err(Error::InvalidIntervention(format!("arm `{other}` is not one of 00, 01, 10, 11"))),
    }
}

fn ate_json(ate: &AteTriple) -> serde_json::Value {
    json!({ "lambda10": ate.l10, "lambda01": ate.l01, "lambda11": ate.l11 })
}

fn run(cli: Cli) -> cgnf::Result<()> {
    match cli.command {
        Command::Simulate { setting, n, seed, out } => {
            let units = simulate(&SimSetting::preset(&setting)?, n, seed);
            write_dataset(&units, fs::File::create(&out)?)?;
            write_noise(&units, fs::File::create(sidecar_path(&out))?)?;
        }
        Command::Train { data, dag, seed, train, out } => {
            let dag = match dag {
                Some(p) => CausalDag::load(p)?,
                None => CausalDag::two_wave(),
            };
            let names = dag.names();
            let data = read_columns(fs::File::open(&data)?, &names)?;
            let (model, log) = fit::<f64>(&dag, &data, &train.config(seed))?;
            model.save(&out)?;
            let summary = json!({
                "best_epoch": log.best_epoch,
                "epochs_run": log.epochs.len() - 1,
                "best_val_nll": log.best_val_nll,
                "test_nll": log.test_nll,
                "epochs": log.epochs,
            });
            print!("{}", canonical_json(&summary)?);
        }
        Command::Ate { model, intervention, mc_samples, seed } => {
            let model = FlowModel::<f64>::load(model)?;
            let value = match intervention {
                Some(text) => {
                    let spec = InterventionSpec::parse(&text)?;
                    let x = sample_interventional(&model, &spec, mc_samples, seed)?;
                    let means: serde_json::Map<String, serde_json::Value> = model
                        .dag()
                        .names()
                        .into_iter()
                        .enumerate()
                        .map(|(j, name)| {
                            let col = x.column(j);
                            (name.to_string(), json!(col.iter().sum::<f64>() / col.len() as f64))
                        })
                        .collect();
                    json!({ "intervention": spec.assignments, "means": means })
                }
                None => {
                    let means = arm_means(&model, "Y", mc_samples, seed)?;
                    let mut v = ate_json(&AteTriple::from_arm_means(&means));
                    v["arm_means"] = json!(ARMS
                        .iter()
                        .zip(means)
                        .map(|(&(a1, a2), m)| (format!("{a1}{a2}"), m))
                        .collect::<std::collections::BTreeMap<_, _>>());
                    v
                }
            };
            print!("{}", canonical_json(&value)?);
        }
        Command::Baselines { data } => {
            let data = read_data(&data)?;
            let ipw = baselines::ipw_estimate(&data, &baselines::IpwSpec::default())?;
            let value = json!({
                "ipw": ate_json(&ipw.ate),
                "ipw_diagnostics": {
                    "clipped_fraction": ipw.clipped_fraction,
                    "positivity_violation": ipw.positivity_violation,
                    "weight_mean": ipw.weight_mean,
                },
                "rwr": ate_json(&baselines::rwr_estimate(&data)?),
                "gcom": ate_json(&baselines::gcom_estimate(&data, false)?),
                "gcom_theta": ate_json(&baselines::gcom_estimate(&data, true)?),
            });
            print!("{}", canonical_json(&value)?);
        }
        Command::Counterfactual { model, data, rows, setting, out } => {
            let model = FlowModel::<f64>::load(model)?;
            let matrix = read_data(&data)?;
            let rows: Vec<usize> = rows
                .split(',')
                .map(|r| r.trim().parse().map_err(|_| Error::Parse(format!("bad row index `{r}`"))))
                .collect::<cgnf::Result<_>>()?;
            let mut units = Matrix::zeros(rows.len(), matrix.cols);
            for (k, &r) in rows.iter().enumerate() {
                if r >= matrix.rows {
                    return Err(Error::IndexOutOfRange { index: r, len: matrix.rows });
                }
                units.row_mut(k).copy_from_slice(matrix.row(r));
            }
            let truth = match &setting {
                Some(s) => {
                    let s = SimSetting::preset(s)?;
                    let path = sidecar_path(&data);
                    let file = fs::File::open(&path)
                        .map_err(|_| Error::MissingSidecar(path.display().to_string()))?;
                    let noise = read_noise(file)?;
                    Some(rows.iter().map(|&r| noise.get(r).map(|n| true_optimal_policy(n, &s))).collect::<Vec<_>>())
                }
                None => None,
            };
            let names = model.dag().names();
            let reports: Vec<CounterfactualReport> = counterfactual_batch(&model, &units, "Y")?
                .iter()
                .enumerate()
                .map(|(k, res)| {
                    let t = truth.as_ref().and_then(|t| t[k]);
                    CounterfactualReport::new(rows[k], &names, units.row(k), res, t)
                })
                .collect();
            emit(&canonical_json(&reports)?, out.as_deref())?;
        }
        Command::Policy { model, data, setting, out } => {
            let model = FlowModel::<f64>::load(model)?;
            let matrix = read_data(&data)?;
            let path = sidecar_path(&data);
            let noise = match fs::File::open(&path) {
                Ok(f) => Some(read_noise(f)?),
                Err(_) => None,
            };
            let report = run_policy_eval(&model, &matrix, noise.as_deref(), &SimSetting::preset(&setting)?)
                .map_err(|e| match e {
                    Error::MissingSidecar(_) => Error::MissingSidecar(path.display().to_string()),
                    other => other,
                })?;
            emit(&canonical_json(&report)?, out.as_deref())?;
        }
        Command::Surface { model, grid, arm, setting, out } => {
            let model = FlowModel::<f64>::load(model)?;
            let axis = Axis::parse(&grid)?;
            let arms = match arm {
                Some(a) => vec![parse_arm(&a)?],
                None => ARMS.to_vec(),
            };
            let setting = setting.map(|s| SimSetting::preset(&s)).transpose()?;
            emit(&surface_csv(&model, &axis, &axis, &arms, setting.as_ref())?, out.as_deref())?;
        }
        Command::Benchmark { setting, n, seeds, estimators, seed, mc_samples, jobs, train, out } => {
            let config = BenchmarkConfig {
                settings: setting,
                sizes: n,
                seeds,
                estimators: estimators.iter().map(|e| e.parse::<Estimator>()).collect::<cgnf::Result<_>>()?,
                train: train.config(0),
                mc_samples,
                master_seed: seed,
            };
            fs::create_dir_all(&out)?;
            let report = run_benchmark(&config, jobs, &out)?;
            for e in &report.entries {
                println!(
                    "{} n={} {:<10} {}: mean {:+.4} std {:.4} truth {:.1}",
                    e.setting,
                    e.size,
                    e.estimator.name(),
                    e.lambda.name(),
                    e.mean,
                    e.std,
                    e.truth
                );
            }
        }
        Command::Oracle { scm, data, intervention, target, out } => {
            let scm = match (scm, data) {
                (Some(p), _) => DiscreteScm::load(p)?,
                (None, Some(d)) => binarized_two_wave_scm(&read_data(&d)?)?,
                (None, None) => return Err(Error::InvalidConfig("pass --scm or --data".into())),
            };
            if let Some(p) = out {
                scm.save(p)?;
            }
            let spec = match intervention {
                Some(text) => InterventionSpec::parse(&text)?,
                None => InterventionSpec::new(),
            };
            let value = json!({
                "intervention": spec.assignments,
                "target": target,
                "distribution": scm.interventional_distribution(&spec, &target)?,
                "mean": scm.interventional_mean(&spec, &target)?,
            });
            print!("{}", canonical_json(&value)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CGNF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

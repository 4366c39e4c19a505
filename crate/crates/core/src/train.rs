//! Maximum-likelihood training of a [`FlowModel`] with AdamW, mini-batches
//! and early stopping on a held-out validation split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dag::CausalDag;
use crate::dequant::DEFAULT_SIGMA2;
use crate::error::{Error, Result};
use crate::flow::{FlowArchitecture, FlowModel, ModelMetadata, Standardizer};
use crate::nn::{AdamW, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub dequant_sigma2: f64,
    pub architecture: FlowArchitecture,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            max_epochs: 300,
            patience: 10,
            split: [0.8, 0.1, 0.1],
            dequant_sigma2: DEFAULT_SIGMA2,
            architecture: FlowArchitecture::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidConfig(format!("split {:?} must sum to 1", self.split)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "patience, batch size and max epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.dequant_sigma2 >= 0.0) {
            return Err(Error::InvalidConfig("bad learning rate or dequantization variance".into()));
        }
        Ok(())
    }
}

/// Per-epoch record; NLLs are mean nats per unit in data coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Entry 0 is the untrained model.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub test_nll: f64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Seeded shuffle followed by a contiguous split.
pub fn split_rows(n: usize, split: [f64; 3], seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (split[0] * n as f64).round() as usize;
    let n_val = ((split[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    if idx.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{n} rows give an empty split ({} / {} / {})",
            idx.len(),
            val.len(),
            test.len()
        )));
    }
    Ok((idx, val, test))
}

/// Copies `rows` of `data`, adding Gaussian dequantization noise to discrete columns.
pub fn dequantize_rows<R: Rng + ?Sized>(
    dag: &CausalDag,
    data: &Matrix<f64>,
    rows: &[usize],
    sigma2: f64,
    rng: &mut R,
) -> Matrix<f64> {
    let sd = sigma2.sqrt();
    let discrete: Vec<bool> = dag.nodes().iter().map(|n| n.kind.is_discrete()).collect();
    let mut out = Matrix::zeros(rows.len(), data.cols);
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..data.cols {
            let mut v = data.get(r, j);
            if discrete[j] && sd > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                v += sd * e;
            }
            out.set(k, j, v);
        }
    }
    out
}

fn check_labels(dag: &CausalDag, data: &Matrix<f64>) -> Result<()> {
    for node in dag.nodes() {
        if let Some(n) = node.kind.n_classes() {
            for r in 0..data.rows {
                let v = data.get(r, node.index);
                if v.fract() != 0.0 || v < 0.0 || v >= n as f64 {
                    return Err(Error::LabelOutOfRange {
                        label: v as i64,
                        n_classes: n,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Mean NLL in data units of already standardized rows.
fn mean_nll<T: Scalar>(model: &FlowModel<T>, x: &Matrix<T>) -> Result<f64> {
    let ll = model.log_likelihood(x)?.to_f64_lossy();
    Ok(-ll / x.rows as f64 + model.standardizer().log_scale())
}

/// Fits a flow to `data` (rows aligned with `dag`, discrete columns as class
/// labels). Discrete columns are re-dequantized every epoch; validation and
/// test rows are dequantized once with a fixed seed. Returns the parameters
/// with the best validation NLL.
pub fn fit<T: Scalar>(dag: &CausalDag, data: &Matrix<f64>, config: &TrainConfig) -> Result<(FlowModel<T>, TrainLog)> {
    config.validate()?;
    if data.cols != dag.len() {
        return Err(Error::ShapeMismatch {
            expected: dag.len(),
            got: data.cols,
        });
    }
    check_labels(dag, data)?;
    let (train_rows, val_rows, test_rows) = split_rows(data.rows, config.split, config.seed)?;

    let mut model = FlowModel::<T>::new(dag.clone(), config.architecture.clone(), config.seed ^ 0x5eed)?;
    model.set_standardizer(Standardizer::fit(data, &train_rows)?)?;

    let mut heldout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xa11d));
    let val_x = model.standardize(&dequantize_rows(dag, data, &val_rows, config.dequant_sigma2, &mut heldout_rng))?;
    let test_x = model.standardize(&dequantize_rows(dag, data, &test_rows, config.dequant_sigma2, &mut heldout_rng))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a1e));
    let mut params = model.params();
    let mut opt = AdamW::new(params.len(), T::lit(config.learning_rate), T::lit(config.weight_decay));

    let first_train = model.standardize(&dequantize_rows(dag, data, &train_rows, config.dequant_sigma2, &mut rng))?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_nll: mean_nll(&model, &first_train)?,
        val_nll: mean_nll(&model, &val_x)?,
    }];
    let mut best = (epochs[0].val_nll, params.clone(), 0usize);
    let mut since_best = 0;
    let log_scale = model.standardizer().log_scale();

    for epoch in 1..=config.max_epochs {
        let train_x = model.standardize(&dequantize_rows(dag, data, &train_rows, config.dequant_sigma2, &mut rng))?;
        let mut order: Vec<usize> = (0..train_x.rows).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Matrix::zeros(chunk.len(), train_x.cols);
            for (k, &r) in chunk.iter().enumerate() {
                batch.row_mut(k).copy_from_slice(train_x.row(r));
            }
            let (loss, grads) = model
                .nll_and_grad(&batch)
                .map_err(|_| Error::DivergedLoss { epoch })?;
            loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
            opt.step(&mut params, &grads)?;
            model.set_params(&params)?;
        }
        let train_nll = loss_sum / train_x.rows as f64 + log_scale;
        let val_nll = match mean_nll(&model, &val_x) {
            Ok(v) if v.is_finite() => v,
            _ => return Err(Error::DivergedLoss { epoch }),
        };
        log::debug!("epoch {epoch}: train {train_nll:.4} val {val_nll:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
        });
        if val_nll < best.0 {
            best = (val_nll, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    model.set_params(&best.1)?;
    let test_nll = mean_nll(&model, &test_x)?;
    model.metadata = ModelMetadata {
        seed: config.seed,
        best_epoch: best.2,
        epochs_run: epochs.len() - 1,
        best_val_nll: best.0,
        test_nll,
        train_rows: train_rows.clone(),
        val_rows: val_rows.clone(),
        test_rows: test_rows.clone(),
    };
    let log = TrainLog {
        epochs,
        best_epoch: best.2,
        best_val_nll: best.0,
        test_nll,
        train_rows,
        val_rows,
        test_rows,
    };
    Ok((model, log))
}

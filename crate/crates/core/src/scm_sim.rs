//! Two-wave time-varying treatment simulator and its ground-truth oracles.
//!
//! ```text
//! C1 ~ N(0, 1)
//! A1 ~ Bern(Phi(0.4 C1 + 2 g12 C1^2))
//! C2 ~ N(0.4 C1 + 0.2 A1, 1)
//! A2 ~ Bern(Phi(0.2 A1 + 0.4 C2 + g12 A1^2 + 2 g12 C2 + g12 C1 A1 / 2))
//! Y  ~ N(0.4 (C1 - mu_C1) + A1 (0.2 + t11 C1) + (C2 - mu_C2)(0.4 + g21 C1)
//!        + A2 (0.2 + t21 C1 + 0.1 A1), 1)
//! ```
//!
//! with `mu_C1 = 0` and `mu_C2 = 0.4 C1 + 0.2 A1`, so the centred terms are
//! the confounder innovations. Every unit stores its exogenous noise so that
//! potential outcomes can be replayed exactly.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{best_arm, Lambda, ARMS};
use crate::nn::Matrix;
use crate::scalar::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub theta11: f64,
    pub theta21: f64,
    pub gamma12: f64,
    pub gamma21: f64,
}

impl SimSetting {
    /// No misspecification, no effect heterogeneity.
    pub const A: SimSetting = SimSetting {
        theta11: 0.0,
        theta21: 0.0,
        gamma12: 0.0,
        gamma21: 0.0,
    };
    /// Outcome-model misspecification with heterogeneity.
    pub const B: SimSetting = SimSetting {
        theta11: 0.2,
        theta21: 0.2,
        gamma12: 0.0,
        gamma21: 0.4,
    };
    /// Treatment and outcome misspecification with heterogeneity.
    pub const C: SimSetting = SimSetting {
        theta11: 0.2,
        theta21: 0.2,
        gamma12: 0.4,
        gamma21: 0.4,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            other => Err(Error::InvalidConfig(format!("unknown setting `{other}`"))),
        }
    }

    pub fn propensity_a1(&self, c1: f64) -> f64 {
        normal_cdf(0.4 * c1 + 2.0 * self.gamma12 * c1 * c1)
    }

    pub fn propensity_a2(&self, c1: f64, a1: f64, c2: f64) -> f64 {
        let g = self.gamma12;
        normal_cdf(0.2 * a1 + 0.4 * c2 + g * a1 * a1 + 2.0 * g * c2 + g * c1 * a1 / 2.0)
    }

    /// Mean of `Y` given its parents and the two confounder innovations.
    fn outcome_mean(&self, c1: f64, a1: f64, c2_innovation: f64, a2: f64) -> f64 {
        0.4 * c1
            + a1 * (0.2 + self.theta11 * c1)
            + c2_innovation * (0.4 + self.gamma21 * c1)
            + a2 * (0.2 + self.theta21 * c1 + 0.1 * a1)
    }
}

/// Exogenous noise of one unit. `u_a1`, `u_a2` are uniforms thresholded
/// against the propensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimNoise {
    pub u_c1: f64,
    pub u_a1: f64,
    pub u_c2: f64,
    pub u_a2: f64,
    pub u_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimUnit {
    pub c1: f64,
    pub a1: u8,
    pub c2: f64,
    pub a2: u8,
    pub y: f64,
    pub noise: SimNoise,
}

impl SimNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SimNoise {
            u_c1: rng.sample(StandardNormal),
            u_a1: rng.random(),
            u_c2: rng.sample(StandardNormal),
            u_a2: rng.random(),
            u_y: rng.sample(StandardNormal),
        }
    }

    /// Pushes the noise through the structural equations, replacing the
    /// treatment mechanisms by constants where given.
    pub fn propagate(&self, setting: &SimSetting, a1: Option<u8>, a2: Option<u8>) -> SimUnit {
        let c1 = self.u_c1;
        let a1 = a1.unwrap_or_else(|| u8::from(self.u_a1 < setting.propensity_a1(c1)));
        let a1f = a1 as f64;
        let c2 = 0.4 * c1 + 0.2 * a1f + self.u_c2;
        let a2 = a2.unwrap_or_else(|| u8::from(self.u_a2 < setting.propensity_a2(c1, a1f, c2)));
        let y = setting.outcome_mean(c1, a1f, self.u_c2, a2 as f64) + self.u_y;
        SimUnit {
            c1,
            a1,
            c2,
            a2,
            y,
            noise: *self,
        }
    }
}

/// Draws `n` i.i.d. units.
pub fn simulate(setting: &SimSetting, n: usize, seed: u64) -> Vec<SimUnit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| SimNoise::draw(&mut rng).propagate(setting, None, None))
        .collect()
}

pub fn true_potential_outcome(noise: &SimNoise, a1: u8, a2: u8, setting: &SimSetting) -> f64 {
    noise.propagate(setting, Some(a1), Some(a2)).y
}

/// Monte-Carlo estimate of a true effect with its standard error. Arms share
/// noise, so a contrast of identical arms is exactly zero.
pub fn true_ate(setting: &SimSetting, which: Lambda, n_mc: usize, seed: u64) -> (f64, f64) {
    let (treat, reference) = which.arms();
    true_contrast(setting, treat, reference, n_mc, seed)
}

pub fn true_contrast(
    setting: &SimSetting,
    treat: (u8, u8),
    reference: (u8, u8),
    n_mc: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diffs: Vec<f64> = (0..n_mc.max(1))
        .map(|_| {
            let u = SimNoise::draw(&mut rng);
            true_potential_outcome(&u, treat.0, treat.1, setting)
                - true_potential_outcome(&u, reference.0, reference.1, setting)
        })
        .collect();
    let (mean, sd) = crate::scalar::mean_std(&diffs);
    (mean, sd / (diffs.len() as f64).sqrt())
}

/// Best of the four arms for this unit; ties go to the lexicographically
/// smallest arm.
pub fn true_optimal_policy(noise: &SimNoise, setting: &SimSetting) -> (u8, u8) {
    let ys = ARMS.map(|(a1, a2)| true_potential_outcome(noise, a1, a2, setting));
    best_arm(&ys)
}

/// Observations as rows `C1, A1, C2, A2, Y`.
pub fn to_matrix(units: &[SimUnit]) -> Matrix<f64> {
    let data = units
        .iter()
        .flat_map(|u| [u.c1, u.a1 as f64, u.c2, u.a2 as f64, u.y])
        .collect();
    Matrix::from_vec(units.len(), 5, data).expect("five columns")
}

pub const DATA_HEADER: [&str; 5] = ["C1", "A1", "C2", "A2", "Y"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct DataRow {
    #[serde(rename = "C1")]
    c1: f64,
    #[serde(rename = "A1")]
    a1: u8,
    #[serde(rename = "C2")]
    c2: f64,
    #[serde(rename = "A2")]
    a2: u8,
    #[serde(rename = "Y")]
    y: f64,
}

/// Writes the observational CSV (`C1,A1,C2,A2,Y`).
pub fn write_dataset<W: Write>(units: &[SimUnit], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for u in units {
        wr.serialize(DataRow {
            c1: u.c1,
            a1: u.a1,
            c2: u.c2,
            a2: u.a2,
            y: u.y,
        })
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes the noise sidecar, same row order as the dataset.
pub fn write_noise<W: Write>(units: &[SimUnit], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for u in units {
        wr.serialize(u.noise).map_err(|e| Error::Io(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads an observational CSV into rows `C1, A1, C2, A2, Y`.
pub fn read_dataset<R: Read>(r: R) -> Result<Matrix<f64>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != DATA_HEADER {
        return Err(Error::Parse(format!("expected header {:?}", DATA_HEADER)));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rd.deserialize::<DataRow>() {
        let row = rec.map_err(|e| Error::Parse(e.to_string()))?;
        data.extend([row.c1, row.a1 as f64, row.c2, row.a2 as f64, row.y]);
        rows += 1;
    }
    Matrix::from_vec(rows, 5, data)
}

/// Reads a CSV with a header, returning the columns named in `names` in that
/// order. Extra columns are ignored.
pub fn read_columns<R: Read>(r: R, names: &[&str]) -> Result<Matrix<f64>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let idx = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h.trim() == *n)
                .ok_or_else(|| Error::Parse(format!("missing column `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        for &j in &idx {
            let field = rec.get(j).unwrap_or("");
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: bad number `{field}`", rows + 1)))?,
            );
        }
        rows += 1;
    }
    Matrix::from_vec(rows, names.len(), data)
}

pub fn read_noise<R: Read>(r: R) -> Result<Vec<SimNoise>> {
    csv::Reader::from_reader(r)
        .deserialize::<SimNoise>()
        .map(|rec| rec.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn columns_read_by_name() {
        let text = "B,A,junk\n1,2,x\n3,4.5,y\n";
        let m = read_columns(text.as_bytes(), &["A", "B"]).unwrap();
        assert_eq!(m.data, vec![2.0, 1.0, 4.5, 3.0]);
        assert!(read_columns(text.as_bytes(), &["C"]).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate(&SimSetting::C, 50, 4);
        let b = simulate(&SimSetting::C, 50, 4);
        assert_eq!(a, b);
        assert_ne!(a, simulate(&SimSetting::C, 50, 5));
    }

    #[test]
    fn replay_reproduces_units() {
        for setting in [SimSetting::A, SimSetting::B, SimSetting::C] {
            for u in simulate(&setting, 200, 1) {
                assert_eq!(u.noise.propagate(&setting, None, None), u);
                assert_eq!(true_potential_outcome(&u.noise, u.a1, u.a2, &setting), u.y);
            }
        }
    }

    #[test]
    fn setting_a_marginals() {
        let units = simulate(&SimSetting::A, 100_000, 10);
        let n = units.len() as f64;
        let c1 = units.iter().map(|u| u.c1).sum::<f64>() / n;
        let a1 = units.iter().map(|u| u.a1 as f64).sum::<f64>() / n;
        assert!(c1.abs() < 0.02, "{c1}");
        assert!((a1 - 0.5).abs() < 0.01, "{a1}");
    }

    #[test]
    fn setting_a_propensity_reduces_to_linear_probit() {
        for c in [-2.0, -0.3, 0.0, 1.7] {
            assert_eq!(SimSetting::A.propensity_a1(c), normal_cdf(0.4 * c));
        }
    }

    #[test]
    fn setting_a_outcome_regression_recovers_coefficients() {
        let units = simulate(&SimSetting::A, 100_000, 12);
        let n = units.len();
        // Y ~ 1 + C1 + A1 + (C2 - mu_C2) + A2 + A1 A2
        let x = DMatrix::from_fn(n, 6, |r, c| {
            let u = &units[r];
            let (a1, a2) = (u.a1 as f64, u.a2 as f64);
            match c {
                0 => 1.0,
                1 => u.c1,
                2 => a1,
                3 => u.c2 - 0.4 * u.c1 - 0.2 * a1,
                4 => a2,
                _ => a1 * a2,
            }
        });
        let y = DVector::from_iterator(n, units.iter().map(|u| u.y));
        let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
        for (got, want) in beta.iter().skip(1).zip([0.4, 0.2, 0.4, 0.2, 0.1]) {
            assert!((got - want).abs() < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn setting_a_true_effects() {
        let (l10, se) = true_ate(&SimSetting::A, Lambda::L10, 100_000, 3);
        assert!((l10 - 0.2).abs() < 3.0 * se.max(1e-12) + 1e-12, "{l10} {se}");
        let (l11, _) = true_ate(&SimSetting::A, Lambda::L11, 100_000, 3);
        assert!((l11 - 0.3).abs() < 0.02);
    }

    #[test]
    fn setting_a_closed_form_arm_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noises: Vec<SimNoise> = (0..100_000).map(|_| SimNoise::draw(&mut rng)).collect();
        for (a1, a2) in ARMS {
            let ys: Vec<f64> = noises
                .iter()
                .map(|u| true_potential_outcome(u, a1, a2, &SimSetting::A))
                .collect();
            let (m, sd) = crate::scalar::mean_std(&ys);
            let expect = 0.2 * a1 as f64 + a2 as f64 * (0.2 + 0.1 * a1 as f64);
            assert!((m - expect).abs() < 3.0 * sd / (ys.len() as f64).sqrt(), "{a1}{a2}: {m}");
        }
    }

    #[test]
    fn setting_c_lambda01() {
        let (l01, se) = true_ate(&SimSetting::C, Lambda::L01, 100_000, 8);
        assert!((l01 - 0.2).abs() < 3.0 * se, "{l01} {se}");
    }

    #[test]
    fn identical_arms_contrast_is_zero() {
        for s in [SimSetting::A, SimSetting::B, SimSetting::C] {
            assert_eq!(true_contrast(&s, (0, 0), (0, 0), 1000, 1).0, 0.0);
        }
    }

    #[test]
    fn optimal_policy_setting_a_is_always_treat_both() {
        for u in simulate(&SimSetting::A, 2000, 5) {
            assert_eq!(true_optimal_policy(&u.noise, &SimSetting::A), (1, 1));
        }
    }

    #[test]
    fn optimal_policy_setting_c_flips_for_negative_c1() {
        let mut found = false;
        for u in simulate(&SimSetting::C, 2000, 6) {
            let best = true_optimal_policy(&u.noise, &SimSetting::C);
            let ys: Vec<f64> = ARMS
                .iter()
                .map(|&(a, b)| true_potential_outcome(&u.noise, a, b, &SimSetting::C))
                .collect();
            let max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(ys[crate::estimand::arm_index(best)], max);
            if u.c1 < -2.0 {
                assert_ne!(best, (1, 1));
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn csv_round_trip() {
        let units = simulate(&SimSetting::B, 25, 2);
        let mut buf = Vec::new();
        write_dataset(&units, &mut buf).unwrap();
        assert!(buf.starts_with(b"C1,A1,C2,A2,Y\n"));
        let m = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(m, to_matrix(&units));
        let mut nb = Vec::new();
        write_noise(&units, &mut nb).unwrap();
        let noise = read_noise(nb.as_slice()).unwrap();
        assert_eq!(noise, units.iter().map(|u| u.noise).collect::<Vec<_>>());
    }
}

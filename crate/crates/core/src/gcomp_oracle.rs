//! Exhaustive g-computation on small all-discrete SCMs.
//!
//! Each node owns a conditional table laid out as `[config * k + value]`,
//! where `config` is the row-major index of its parent values (parents in
//! ascending node order, last parent varying fastest) and `k` is its number
//! of classes. Probabilities are generic so exact rationals can be used.

use std::fmt::Debug;
use std::path::Path;

use num_traits::{FromPrimitive, Num, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dag::{CausalDag, NodeKind};
use crate::error::{Error, Result};
use crate::intervention::InterventionSpec;
use crate::nn::Matrix;

/// Largest joint state space enumerated.
pub const MAX_STATES: u128 = 10_000_000;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

pub trait Probability: Clone + PartialOrd + Num + FromPrimitive + ToPrimitive + Debug {}

impl<T: Clone + PartialOrd + Num + FromPrimitive + ToPrimitive + Debug> Probability for T {}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm<T = f64> {
    dag: CausalDag,
    cards: Vec<usize>,
    parents: Vec<Vec<usize>>,
    tables: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScmFile {
    dag: CausalDag,
    tables: Vec<TableFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableFile {
    node: String,
    probs: Vec<f64>,
}

fn cardinalities(dag: &CausalDag) -> Result<Vec<usize>> {
    dag.nodes()
        .iter()
        .map(|n| match n.kind {
            NodeKind::Discrete { n_classes } => Ok(n_classes),
            NodeKind::Continuous => Err(Error::InvalidTable {
                node: n.name.clone(),
                reason: "node is continuous".into(),
            }),
        })
        .collect()
}

impl<T: Probability> DiscreteScm<T> {
    pub fn new(dag: CausalDag, tables: Vec<Vec<T>>) -> Result<Self> {
        let cards = cardinalities(&dag)?;
        if tables.len() != dag.len() {
            return Err(Error::ShapeMismatch { expected: dag.len(), got: tables.len() });
        }
        let parents: Vec<Vec<usize>> = (0..dag.len()).map(|i| dag.parents(i).collect()).collect();
        for (i, table) in tables.iter().enumerate() {
            let name = &dag.node(i).name;
            let bad = |reason: String| Error::InvalidTable { node: name.clone(), reason };
            let configs: usize = parents[i].iter().map(|&p| cards[p]).product();
            if table.len() != configs * cards[i] {
                return Err(bad(format!(
                    "expected {} entries, got {}",
                    configs * cards[i],
                    table.len()
                )));
            }
            for (c, row) in table.chunks(cards[i]).enumerate() {
                if row.iter().any(|p| *p < T::zero()) {
                    return Err(bad(format!("negative probability in row {c}")));
                }
                let sum = row.iter().fold(T::zero(), |acc, p| acc + p.clone());
                let sum = sum.to_f64().unwrap_or(f64::NAN);
                if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                    return Err(bad(format!("row {c} sums to {sum}")));
                }
            }
        }
        Ok(Self { dag, cards, parents, tables })
    }

    /// Maximum-likelihood tables from complete discrete samples. Parent
    /// configurations never observed get a uniform row.
    pub fn from_counts(dag: CausalDag, samples: &[Vec<usize>]) -> Result<Self> {
        let cards = cardinalities(&dag)?;
        let mut tables = Vec::with_capacity(dag.len());
        for i in 0..dag.len() {
            let parents: Vec<usize> = dag.parents(i).collect();
            let configs: usize = parents.iter().map(|&p| cards[p]).product();
            let mut counts = vec![0usize; configs * cards[i]];
            for s in samples {
                if s.len() != dag.len() {
                    return Err(Error::ShapeMismatch { expected: dag.len(), got: s.len() });
                }
                for (j, &v) in s.iter().enumerate() {
                    if v >= cards[j] {
                        return Err(Error::LabelOutOfRange { label: v as i64, n_classes: cards[j] });
                    }
                }
                let c = parents.iter().fold(0, |acc, &p| acc * cards[p] + s[p]);
                counts[c * cards[i] + s[i]] += 1;
            }
            let mut table = Vec::with_capacity(counts.len());
            for row in counts.chunks(cards[i]) {
                let total: usize = row.iter().sum();
                for &n in row {
                    let p = if total == 0 {
                        1.0 / cards[i] as f64
                    } else {
                        n as f64 / total as f64
                    };
                    table.push(T::from_f64(p).ok_or(Error::NonFiniteValue("table entry"))?);
                }
            }
            tables.push(table);
        }
        Self::new(dag, tables)
    }

    pub fn dag(&self) -> &CausalDag {
        &self.dag
    }

    pub fn table(&self, node: usize) -> &[T] {
        &self.tables[node]
    }

    fn config_index(&self, node: usize, values: &[usize]) -> usize {
        self.parents[node]
            .iter()
            .fold(0, |acc, &p| acc * self.cards[p] + values[p])
    }

    pub fn conditional(&self, node: usize, values: &[usize]) -> T {
        let c = self.config_index(node, values);
        self.tables[node][c * self.cards[node] + values[node]].clone()
    }

    /// Joint probability of a full configuration under the factorization.
    pub fn joint(&self, values: &[usize]) -> T {
        (0..self.dag.len()).fold(T::one(), |acc, i| acc * self.conditional(i, values))
    }

    pub fn state_space(&self) -> u128 {
        self.cards.iter().map(|&k| k as u128).product()
    }

    fn clamps(&self, spec: &InterventionSpec) -> Result<Vec<Option<usize>>> {
        Ok(spec
            .resolve(&self.dag)?
            .into_iter()
            .map(|v| v.map(|x| x as usize))
            .collect())
    }

    /// `P(target | do(spec))` by summing the truncated factorization over
    /// every configuration of the non-intervened nodes.
    pub fn interventional_distribution(&self, spec: &InterventionSpec, target: &str) -> Result<Vec<T>> {
        let t = self.dag.index_of(target)?;
        let clamps = self.clamps(spec)?;
        let states = self.state_space();
        if states > MAX_STATES {
            return Err(Error::StateSpaceTooLarge(states));
        }
        let mut out = vec![T::zero(); self.cards[t]];
        let mut values = vec![0usize; self.dag.len()];
        self.enumerate(0, T::one(), &clamps, &mut values, t, &mut out);
        Ok(out)
    }

    fn enumerate(
        &self,
        pos: usize,
        weight: T,
        clamps: &[Option<usize>],
        values: &mut [usize],
        target: usize,
        out: &mut [T],
    ) {
        let order = self.dag.topological_order();
        if pos == order.len() {
            out[values[target]] = out[values[target]].clone() + weight;
            return;
        }
        let i = order[pos];
        if let Some(v) = clamps[i] {
            values[i] = v;
            self.enumerate(pos + 1, weight, clamps, values, target, out);
            return;
        }
        let base = self.config_index(i, values) * self.cards[i];
        for v in 0..self.cards[i] {
            let p = self.tables[i][base + v].clone();
            if p.is_zero() {
                continue;
            }
            values[i] = v;
            self.enumerate(pos + 1, weight.clone() * p, clamps, values, target, out);
        }
    }

    /// `E[target | do(spec)]` with classes coded `0..k`.
    pub fn interventional_mean(&self, spec: &InterventionSpec, target: &str) -> Result<T> {
        let dist = self.interventional_distribution(spec, target)?;
        Ok(dist
            .into_iter()
            .enumerate()
            .fold(T::zero(), |acc, (k, p)| acc + p * T::from_usize(k).expect("class code")))
    }

    /// Exact contrasts `E[target | do(treat)] - E[target | do(reference)]`.
    pub fn ate_oracle(
        &self,
        contrasts: &[(InterventionSpec, InterventionSpec)],
        target: &str,
    ) -> Result<Vec<T>> {
        contrasts
            .iter()
            .map(|(treat, reference)| {
                Ok(self.interventional_mean(treat, target)? - self.interventional_mean(reference, target)?)
            })
            .collect()
    }

    /// Forward sampling of the mutilated model.
    pub fn sample(&self, spec: &InterventionSpec, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let clamps = self.clamps(spec)?;
        let tables: Vec<Vec<f64>> = self
            .tables
            .iter()
            .map(|t| t.iter().map(|p| p.to_f64().unwrap_or(0.0)).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut values = vec![0usize; self.dag.len()];
            for &i in self.dag.topological_order() {
                values[i] = match clamps[i] {
                    Some(v) => v,
                    None => {
                        let base = self.config_index(i, &values) * self.cards[i];
                        let row = &tables[i][base..base + self.cards[i]];
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = self.cards[i] - 1;
                        for (v, p) in row.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                pick = v;
                                break;
                            }
                        }
                        pick
                    }
                };
            }
            out.push(values);
        }
        Ok(out)
    }

    /// Monte-Carlo `E[target | do(spec)]` with its standard error.
    pub fn sampled_mean(&self, spec: &InterventionSpec, target: &str, n: usize, seed: u64) -> Result<(f64, f64)> {
        let t = self.dag.index_of(target)?;
        let draws: Vec<f64> = self.sample(spec, n, seed)?.iter().map(|s| s[t] as f64).collect();
        let (mean, std) = crate::scalar::mean_std(&draws);
        Ok((mean, std / (draws.len() as f64).sqrt()))
    }

    pub fn cast<U: Probability>(&self) -> DiscreteScm<U> {
        DiscreteScm {
            dag: self.dag.clone(),
            cards: self.cards.clone(),
            parents: self.parents.clone(),
            tables: self
                .tables
                .iter()
                .map(|t| t.iter().map(|p| p.to_f64().and_then(U::from_f64).expect("representable probability")).collect())
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ScmFile {
            dag: self.dag.clone(),
            tables: self
                .tables
                .iter()
                .enumerate()
                .map(|(i, t)| TableFile {
                    node: self.dag.node(i).name.clone(),
                    probs: t.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

impl DiscreteScm<f64> {
    /// Tables may be listed in any order; they are matched by node name.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ScmFile = serde_json::from_str(text)?;
        let mut tables = vec![None; file.dag.len()];
        for t in file.tables {
            let i = file.dag.index_of(&t.node)?;
            if tables[i].replace(t.probs).is_some() {
                return Err(Error::InvalidTable { node: t.node, reason: "listed twice".into() });
            }
        }
        let tables = tables
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| Error::InvalidTable {
                    node: file.dag.node(i).name.clone(),
                    reason: "missing table".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.dag, tables)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Two-wave graph with every node binary.
pub fn binary_two_wave_dag() -> CausalDag {
    let bin = NodeKind::Discrete { n_classes: 2 };
    let base = CausalDag::two_wave();
    let nodes: Vec<(&str, NodeKind)> = base.names().into_iter().map(|n| (n, bin)).collect();
    let edges: Vec<(String, String)> = (0..base.len())
        .flat_map(|c| {
            let base = &base;
            base.parents(c)
                .map(move |p| (base.node(p).name.clone(), base.node(c).name.clone()))
        })
        .collect();
    let edges: Vec<(&str, &str)> = edges.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
    CausalDag::new(&nodes, &edges).expect("same edges as the two-wave graph")
}

/// Rows `C1, A1, C2, A2, Y` binarized by thresholding continuous columns at 0.
pub fn binarize_two_wave(data: &Matrix<f64>) -> Vec<Vec<usize>> {
    (0..data.rows)
        .map(|r| data.row(r).iter().map(|&v| usize::from(v > 0.0)).collect())
        .collect()
}

/// Binarized two-wave SCM with tables estimated from observed data.
pub fn binarized_two_wave_scm(data: &Matrix<f64>) -> Result<DiscreteScm<f64>> {
    DiscreteScm::from_counts(binary_two_wave_dag(), &binarize_two_wave(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    type Q = Ratio<i64>;

    fn q(n: i64, d: i64) -> Q {
        Q::new(n, d)
    }

    fn chain() -> DiscreteScm<Q> {
        let bin = NodeKind::Discrete { n_classes: 2 };
        let dag = CausalDag::new(&[("C", bin), ("A", bin), ("Y", bin)], &[("C", "A"), ("A", "Y")]).unwrap();
        DiscreteScm::new(
            dag,
            vec![
                vec![q(7, 10), q(3, 10)],
                vec![q(4, 5), q(1, 5), q(1, 4), q(3, 4)],
                vec![q(9, 10), q(1, 10), q(2, 5), q(3, 5)],
            ],
        )
        .unwrap()
    }

    #[test]
    fn chain_contrast_matches_hand_arithmetic() {
        let scm = chain();
        let treat = InterventionSpec::new().with("A", 1.0);
        let reference = InterventionSpec::new().with("A", 0.0);
        let ate = scm.ate_oracle(&[(treat, reference)], "Y").unwrap();
        // P(Y=1 | A=1) - P(Y=1 | A=0) = 3/5 - 1/10
        assert_eq!(ate[0], q(1, 2));
        let as_f64 = scm.cast::<f64>().ate_oracle(
            &[(InterventionSpec::new().with("A", 1.0), InterventionSpec::new().with("A", 0.0))],
            "Y",
        );
        assert!((as_f64.unwrap()[0] - 0.5).abs() < 1e-12);
        // observationally P(A=1) = 0.7*0.2 + 0.3*0.75 = 0.365
        let obs = scm.interventional_mean(&InterventionSpec::new(), "Y").unwrap();
        assert_eq!(obs, q(635, 1000) * q(1, 10) + q(365, 1000) * q(3, 5));
    }

    #[test]
    fn identical_arms_give_zero() {
        let scm = chain();
        let arm = InterventionSpec::new().with("A", 1.0);
        assert_eq!(scm.ate_oracle(&[(arm.clone(), arm)], "Y").unwrap()[0], q(0, 1));
    }

    #[test]
    fn joint_sums_to_one_and_marginals_follow_total_probability() {
        let scm = chain();
        let mut total = q(0, 1);
        let mut y1 = q(0, 1);
        for c in 0..2 {
            for a in 0..2 {
                for y in 0..2 {
                    let p = scm.joint(&[c, a, y]);
                    total += p;
                    if y == 1 {
                        y1 += p;
                    }
                }
            }
        }
        assert_eq!(total, q(1, 1));
        let dist = scm.interventional_distribution(&InterventionSpec::new(), "Y").unwrap();
        assert_eq!(dist[1], y1);
        assert_eq!(dist[0] + dist[1], q(1, 1));
    }

    #[test]
    fn intervening_on_a_sink_leaves_other_marginals() {
        let scm = chain();
        let spec = InterventionSpec::new().with("Y", 0.0);
        for node in ["C", "A"] {
            assert_eq!(
                scm.interventional_distribution(&spec, node).unwrap(),
                scm.interventional_distribution(&InterventionSpec::new(), node).unwrap()
            );
        }
    }

    #[test]
    fn invalid_tables_rejected() {
        let bin = NodeKind::Discrete { n_classes: 2 };
        let dag = CausalDag::new(&[("C", bin), ("Y", bin)], &[("C", "Y")]).unwrap();
        let short = DiscreteScm::new(dag.clone(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(short, Err(Error::InvalidTable { .. })));
        let unnormalized = DiscreteScm::new(dag.clone(), vec![vec![0.5, 0.6], vec![0.5; 4]]);
        assert!(matches!(unnormalized, Err(Error::InvalidTable { .. })));
        let continuous = CausalDag::new(&[("C", NodeKind::Continuous)], &[] as &[(&str, &str)]).unwrap();
        assert!(DiscreteScm::new(continuous, vec![vec![1.0]]).is_err());
    }

    #[test]
    fn state_space_limit() {
        let big = NodeKind::Discrete { n_classes: 100 };
        let nodes: Vec<(String, NodeKind)> = (0..4).map(|i| (format!("X{i}"), big)).collect();
        let dag = CausalDag::new(&nodes, &[] as &[(String, String)]).unwrap();
        let tables = vec![vec![0.01; 100]; 4];
        let scm = DiscreteScm::new(dag, tables).unwrap();
        assert_eq!(
            scm.interventional_distribution(&InterventionSpec::new(), "X0"),
            Err(Error::StateSpaceTooLarge(100_000_000))
        );
    }

    /// K-wave model `C1 -> A1 -> C2 -> A2 -> C3 -> A3 -> Y` with every node
    /// also feeding all later nodes; tables are arbitrary rationals.
    fn k_wave(k: usize) -> DiscreteScm<Q> {
        let bin = NodeKind::Discrete { n_classes: 2 };
        let mut names = Vec::new();
        for j in 1..=k {
            names.push(format!("C{j}"));
            names.push(format!("A{j}"));
        }
        names.push("Y".into());
        let nodes: Vec<(String, NodeKind)> = names.iter().map(|n| (n.clone(), bin)).collect();
        let mut edges = Vec::new();
        for c in 0..names.len() {
            for p in 0..c {
                edges.push((names[p].clone(), names[c].clone()));
            }
        }
        let dag = CausalDag::new(&nodes, &edges).unwrap();
        let tables = (0..names.len())
            .map(|i| {
                (0..1usize << i)
                    .flat_map(|c| {
                        let num = 1 + ((c * 7 + i * 3) % 9) as i64;
                        [q(10 - num, 10), q(num, 10)]
                    })
                    .collect()
            })
            .collect();
        DiscreteScm::new(dag, tables).unwrap()
    }

    /// Backward-induction g-formula: iterated expectations over the
    /// covariates, innermost wave first.
    fn iterated_expectation(scm: &DiscreteScm<Q>, arms: &[usize], k: usize) -> Q {
        fn go(scm: &DiscreteScm<Q>, arms: &[usize], k: usize, wave: usize, values: &mut Vec<usize>) -> Q {
            if wave == k {
                let y = 2 * k;
                values[y] = 1;
                return scm.conditional(y, values);
            }
            let c = 2 * wave;
            let mut acc = q(0, 1);
            for v in 0..2 {
                values[c] = v;
                values[c + 1] = arms[wave];
                let p = scm.conditional(c, values);
                acc += p * go(scm, arms, k, wave + 1, values);
            }
            acc
        }
        let mut values = vec![0; 2 * k + 1];
        go(scm, arms, k, 0, &mut values)
    }

    #[test]
    fn k_wave_enumeration_matches_iterated_expectation() {
        let k = 3;
        let scm = k_wave(k);
        for arm in 0..(1usize << k) {
            let arms: Vec<usize> = (0..k).map(|j| (arm >> j) & 1).collect();
            let mut spec = InterventionSpec::new();
            for (j, &a) in arms.iter().enumerate() {
                spec = spec.with(format!("A{}", j + 1), a as f64);
            }
            let enumerated = scm.interventional_mean(&spec, "Y").unwrap();
            assert_eq!(enumerated, iterated_expectation(&scm, &arms, k));
        }
    }

    #[test]
    fn enumeration_agrees_with_mutilation_sampling() {
        let data = crate::scm_sim::to_matrix(&crate::scm_sim::simulate(&crate::scm_sim::SimSetting::A, 4000, 3));
        let scm = binarized_two_wave_scm(&data).unwrap();
        for (a1, a2) in crate::estimand::ARMS {
            let spec = InterventionSpec::arm(a1, a2);
            let exact = scm.interventional_mean(&spec, "Y").unwrap();
            let (mean, se) = scm.sampled_mean(&spec, "Y", 200_000, 11).unwrap();
            assert!((exact - mean).abs() < 3.0 * se, "{exact} {mean} {se}");
            let dist = scm.interventional_distribution(&spec, "Y").unwrap();
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip() {
        let scm = chain().cast::<f64>();
        let back = DiscreteScm::from_json_str(&scm.to_json().unwrap()).unwrap();
        assert_eq!(back, scm);
    }
}

//! Causal DAGs over named nodes.
//!
//! Node order is the declaration order; every matrix and batch in the crate
//! uses it. The adjacency is stored row-per-child: `adjacency[i][j]` is set
//! iff node `j` is a parent of node `i`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Continuous,
    Discrete { n_classes: usize },
}

impl NodeKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, NodeKind::Discrete { .. })
    }

    pub fn n_classes(&self) -> Option<usize> {
        match *self {
            NodeKind::Discrete { n_classes } => Some(n_classes),
            NodeKind::Continuous => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub index: usize,
}

/// A validated causal DAG. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalDag {
    nodes: Vec<NodeSpec>,
    adjacency: Vec<Vec<bool>>,
    order: Vec<usize>,
}

impl CausalDag {
    /// Builds a DAG from `(name, kind)` pairs and `(parent, child)` edges.
    pub fn new<S: AsRef<str>>(nodes: &[(S, NodeKind)], edges: &[(S, S)]) -> Result<Self> {
        let specs: Vec<NodeSpec> = nodes
            .iter()
            .enumerate()
            .map(|(index, (name, kind))| NodeSpec {
                name: name.as_ref().to_string(),
                kind: *kind,
                index,
            })
            .collect();
        let mut lookup = HashMap::new();
        for spec in &specs {
            if lookup.insert(spec.name.clone(), spec.index).is_some() {
                return Err(Error::DuplicateName(spec.name.clone()));
            }
        }
        let d = specs.len();
        let mut adjacency = vec![vec![false; d]; d];
        for (parent, child) in edges {
            let p = *lookup
                .get(parent.as_ref())
                .ok_or_else(|| Error::UnknownNode(parent.as_ref().to_string()))?;
            let c = *lookup
                .get(child.as_ref())
                .ok_or_else(|| Error::UnknownNode(child.as_ref().to_string()))?;
            adjacency[c][p] = true;
        }
        Self::from_adjacency(specs, adjacency)
    }

    /// Builds a DAG from node specs and a row-per-child adjacency matrix.
    pub fn from_adjacency(nodes: Vec<NodeSpec>, adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let mut dag = CausalDag {
            nodes,
            adjacency,
            order: Vec::new(),
        };
        dag.validate()?;
        dag.order = dag.compute_order();
        Ok(dag)
    }

    /// The two-wave time-varying treatment graph over `C1, A1, C2, A2, Y`.
    pub fn two_wave() -> Self {
        let bin = NodeKind::Discrete { n_classes: 2 };
        let cont = NodeKind::Continuous;
        CausalDag::new(
            &[("C1", cont), ("A1", bin), ("C2", cont), ("A2", bin), ("Y", cont)],
            &[
                ("C1", "A1"),
                ("C1", "C2"),
                ("C1", "Y"),
                ("A1", "C2"),
                ("A1", "A2"),
                ("A1", "Y"),
                ("C2", "A2"),
                ("C2", "Y"),
                ("A2", "Y"),
            ],
        )
        .expect("two-wave graph is acyclic")
    }

    /// Checks names, self loops and acyclicity.
    pub fn validate(&self) -> Result<()> {
        let d = self.nodes.len();
        if d == 0 {
            return Err(Error::InvalidDag("no nodes".into()));
        }
        if self.adjacency.len() != d || self.adjacency.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidDag(format!("adjacency must be {d}x{d}")));
        }
        let mut seen = HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.index != i {
                return Err(Error::InvalidDag(format!(
                    "node `{}` has index {} at position {i}",
                    node.name, node.index
                )));
            }
            if !seen.insert(node.name.as_str()) {
                return Err(Error::DuplicateName(node.name.clone()));
            }
            if let NodeKind::Discrete { n_classes } = node.kind {
                if n_classes < 2 {
                    return Err(Error::InvalidDag(format!(
                        "node `{}` needs at least 2 classes",
                        node.name
                    )));
                }
            }
            if self.adjacency[i][i] {
                return Err(Error::SelfLoop(node.name.clone()));
            }
        }
        if let Some(cycle) = self.find_cycle() {
            return Err(Error::CycleDetected(
                cycle.into_iter().map(|i| self.nodes[i].name.clone()).collect(),
            ));
        }
        Ok(())
    }

    // Depth-first search over parent->child edges; returns the nodes on the
    // first back edge's cycle.
    fn find_cycle(&self) -> Option<Vec<usize>> {
        let d = self.nodes.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; d];
        let mut stack_path = Vec::new();
        fn visit(
            dag: &CausalDag,
            u: usize,
            state: &mut [u8],
            path: &mut Vec<usize>,
        ) -> Option<Vec<usize>> {
            state[u] = 1;
            path.push(u);
            for v in dag.children(u) {
                match state[v] {
                    1 => {
                        let start = path.iter().position(|&p| p == v).unwrap();
                        return Some(path[start..].to_vec());
                    }
                    0 => {
                        if let Some(c) = visit(dag, v, state, path) {
                            return Some(c);
                        }
                    }
                    _ => {}
                }
            }
            path.pop();
            state[u] = 2;
            None
        }
        for u in 0..d {
            if state[u] == 0 {
                if let Some(c) = visit(self, u, &mut state, &mut stack_path) {
                    return Some(c);
                }
            }
        }
        None
    }

    // Kahn's algorithm, smallest ready index first.
    fn compute_order(&self) -> Vec<usize> {
        let d = self.nodes.len();
        let mut indegree: Vec<usize> = (0..d).map(|i| self.parents(i).count()).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..d)
            .filter(|&i| indegree[i] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(d);
        while let Some(Reverse(u)) = ready.pop() {
            order.push(u);
            for v in self.children(u) {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    ready.push(Reverse(v));
                }
            }
        }
        order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeSpec {
        &self.nodes[i]
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Topological order, ties broken by ascending node index.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn parents(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(j, _)| j)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.adjacency[i][j])
    }

    /// `mask[j]` is true iff `j` is a parent of `i`.
    pub fn parent_mask(&self, i: usize) -> Result<Vec<bool>> {
        if i >= self.nodes.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.nodes.len(),
            });
        }
        Ok(self.adjacency[i].clone())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: DagFile = serde_json::from_str(s)?;
        file.into_dag()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> DagFile {
        DagFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| match n.kind {
                    NodeKind::Continuous => DagFileNode {
                        name: n.name.clone(),
                        kind: "continuous".into(),
                        classes: None,
                    },
                    NodeKind::Discrete { n_classes } => DagFileNode {
                        name: n.name.clone(),
                        kind: "discrete".into(),
                        classes: Some(n_classes),
                    },
                })
                .collect(),
            edges: (0..self.len())
                .flat_map(|c| {
                    self.parents(c)
                        .map(move |p| [self.nodes[p].name.clone(), self.nodes[c].name.clone()])
                })
                .collect(),
        }
    }
}

/// On-disk DAG description; edges are `[parent, child]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagFile {
    pub nodes: Vec<DagFileNode>,
    #[serde(default)]
    pub edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagFileNode {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl DagFile {
    pub fn into_dag(self) -> Result<CausalDag> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let kind = match n.kind.as_str() {
                    "continuous" => NodeKind::Continuous,
                    "discrete" => NodeKind::Discrete {
                        n_classes: n.classes.ok_or_else(|| {
                            Error::InvalidDag(format!("discrete node `{}` lacks `classes`", n.name))
                        })?,
                    },
                    other => {
                        return Err(Error::InvalidDag(format!("unknown node kind `{other}`")))
                    }
                };
                Ok((n.name.as_str(), kind))
            })
            .collect::<Result<Vec<_>>>()?;
        let edges: Vec<(&str, &str)> = self
            .edges
            .iter()
            .map(|[p, c]| (p.as_str(), c.as_str()))
            .collect();
        CausalDag::new(&nodes, &edges)
    }
}

impl Serialize for CausalDag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CausalDag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        DagFile::deserialize(d)?
            .into_dag()
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONT: NodeKind = NodeKind::Continuous;

    fn names(dag: &CausalDag, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| dag.node(i).name.clone()).collect()
    }

    #[test]
    fn two_wave_validates_and_orders() {
        let dag = CausalDag::two_wave();
        assert!(dag.validate().is_ok());
        assert_eq!(
            names(&dag, dag.topological_order()),
            ["C1", "A1", "C2", "A2", "Y"]
        );
    }

    #[test]
    fn two_wave_order_is_the_unique_linear_extension() {
        // brute force over all 120 permutations
        let dag = CausalDag::two_wave();
        let mut valid = Vec::new();
        let mut perm: Vec<usize> = (0..5).collect();
        permutations(&mut perm, 0, &mut |p| {
            let pos: Vec<usize> = (0..5).map(|n| p.iter().position(|&x| x == n).unwrap()).collect();
            let ok = (0..5).all(|c| dag.parents(c).all(|par| pos[par] < pos[c]));
            if ok {
                valid.push(p.to_vec());
            }
        });
        assert_eq!(valid, vec![dag.topological_order().to_vec()]);
    }

    fn permutations(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permutations(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn single_node_is_valid() {
        let dag = CausalDag::new::<&str>(&[("X", CONT)], &[]).unwrap();
        assert_eq!(dag.topological_order(), &[0]);
        assert_eq!(dag.parent_mask(0).unwrap(), vec![false]);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = CausalDag::new(&[("A", CONT), ("B", CONT)], &[("A", "B"), ("B", "A")]).unwrap_err();
        match err {
            Error::CycleDetected(mut c) => {
                c.sort();
                assert_eq!(c, ["A", "B"]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn self_loop_and_duplicates_are_rejected() {
        assert_eq!(
            CausalDag::new(&[("A", CONT)], &[("A", "A")]).unwrap_err(),
            Error::SelfLoop("A".into())
        );
        assert_eq!(
            CausalDag::new::<&str>(&[("A", CONT), ("A", CONT)], &[]).unwrap_err(),
            Error::DuplicateName("A".into())
        );
        assert!(matches!(
            CausalDag::new::<&str>(&[("A", NodeKind::Discrete { n_classes: 1 })], &[]),
            Err(Error::InvalidDag(_))
        ));
    }

    #[test]
    fn no_edges_preserves_input_order() {
        let dag = CausalDag::new::<&str>(&[("B", CONT), ("A", CONT)], &[]).unwrap();
        assert_eq!(names(&dag, dag.topological_order()), ["B", "A"]);
    }

    #[test]
    fn chain_order() {
        let dag = CausalDag::new(
            &[("C", CONT), ("B", CONT), ("A", CONT)],
            &[("A", "B"), ("B", "C")],
        )
        .unwrap();
        assert_eq!(names(&dag, dag.topological_order()), ["A", "B", "C"]);
    }

    #[test]
    fn parent_masks_of_two_wave() {
        let dag = CausalDag::two_wave();
        let y = dag.index_of("Y").unwrap();
        assert_eq!(dag.parent_mask(y).unwrap(), vec![true, true, true, true, false]);
        assert_eq!(dag.parent_mask(0).unwrap(), vec![false; 5]);
        let a2 = dag.index_of("A2").unwrap();
        assert_eq!(dag.parent_mask(a2).unwrap(), vec![false, true, true, false, false]);
        assert_eq!(
            dag.parent_mask(9).unwrap_err(),
            Error::IndexOutOfRange { index: 9, len: 5 }
        );
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"nodes":[{"name":"C1","kind":"continuous"},{"name":"A1","kind":"discrete","classes":2}],"edges":[["C1","A1"]]}"#;
        let dag = CausalDag::from_json_str(text).unwrap();
        assert_eq!(dag.node(1).kind, NodeKind::Discrete { n_classes: 2 });
        let again: CausalDag = serde_json::from_str(&serde_json::to_string(&dag).unwrap()).unwrap();
        assert_eq!(again, dag);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
            (1usize..8).prop_flat_map(|d| {
                let pairs: Vec<(usize, usize)> =
                    (0..d).flat_map(|c| (0..c).map(move |p| (p, c))).collect();
                let n = pairs.len();
                (Just(d), proptest::collection::vec(any::<bool>(), n)).prop_map(
                    move |(d, keep)| {
                        let edges = pairs
                            .iter()
                            .zip(keep)
                            .filter(|(_, k)| *k)
                            .map(|(e, _)| *e)
                            .collect();
                        (d, edges)
                    },
                )
            })
        }

        proptest! {
            #[test]
            fn order_is_permutation_respecting_edges(
                (d, edges) in random_dag(),
                perm_seed in any::<u64>(),
            ) {
                // declare nodes in a shuffled order so the acyclic edge set is not trivially sorted
                let mut order: Vec<usize> = (0..d).collect();
                let mut s = perm_seed;
                for i in (1..d).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    order.swap(i, (s >> 33) as usize % (i + 1));
                }
                let decl: Vec<(String, NodeKind)> =
                    order.iter().map(|&k| (format!("n{k}"), CONT)).collect();
                let e: Vec<(String, String)> =
                    edges.iter().map(|&(p, c)| (format!("n{p}"), format!("n{c}"))).collect();
                let dag = CausalDag::new(&decl, &e).unwrap();
                let topo = dag.topological_order();
                let mut sorted = topo.to_vec();
                sorted.sort();
                prop_assert_eq!(sorted, (0..d).collect::<Vec<_>>());
                let pos: Vec<usize> = (0..d).map(|n| topo.iter().position(|&x| x == n).unwrap()).collect();
                for c in 0..d {
                    for p in dag.parents(c) {
                        prop_assert!(pos[p] < pos[c]);
                    }
                }

                // parent sets by name do not depend on declaration order
                let canon: Vec<(String, NodeKind)> = (0..d).map(|k| (format!("n{k}"), CONT)).collect();
                let base = CausalDag::new(&canon, &e).unwrap();
                for node in base.nodes() {
                    let mut a: Vec<&str> = base.parents(node.index).map(|p| base.node(p).name.as_str()).collect();
                    let j = dag.index_of(&node.name).unwrap();
                    let mut b: Vec<&str> = dag.parents(j).map(|p| dag.node(p).name.as_str()).collect();
                    a.sort();
                    b.sort();
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}

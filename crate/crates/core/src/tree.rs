//! Airway tree model: the label set as an undirected tree rooted at the
//! trachea, its hop-distance matrix and the exponential transition penalty
//! derived from it.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tree document shipped with the crate, see `data/phantom_tree.toml`.
pub const PHANTOM_TREE: &str = include_str!("../data/phantom_tree.toml");

/// Name that resolves to [`PHANTOM_TREE`] wherever a tree path is accepted.
pub const PHANTOM_TREE_NAME: &str = "phantom_tree";

/// A node given either by position in `labels` or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDocument {
    pub labels: Vec<String>,
    pub root: NodeRef,
    pub edges: Vec<[NodeRef; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirwayTree {
    labels: Vec<String>,
    root: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
}

impl AirwayTree {
    pub fn new(labels: Vec<String>, root: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidTree("no labels".into()));
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, label) in labels.iter().enumerate() {
            if label.trim().is_empty() {
                return Err(Error::InvalidTree(format!("label {i} is empty")));
            }
            if let Some(prev) = seen.insert(label.as_str(), i) {
                return Err(Error::InvalidTree(format!(
                    "duplicate label {label:?} at {prev} and {i}"
                )));
            }
        }
        if root >= n {
            return Err(Error::InvalidTree(format!(
                "root index {root} out of range for {n} labels"
            )));
        }
        if edges.len() != n - 1 {
            return Err(Error::InvalidTree(format!(
                "{} edges for {n} nodes, a tree needs {}",
                edges.len(),
                n - 1
            )));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::InvalidTree(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::InvalidTree(format!("self loop at {}", labels[a])));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }

        let mut parent = vec![None; n];
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        // n-1 edges and connected implies acyclic
        if let Some(i) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(Error::InvalidTree(format!(
                "{} is not reachable from the root",
                labels[i]
            )));
        }

        Ok(Self {
            labels,
            root,
            edges,
            adjacency,
            parent,
            depth,
        })
    }

    pub fn from_document(doc: TreeDocument) -> Result<Self> {
        let index: HashMap<&str, usize> = doc
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let resolve = |node: &NodeRef| -> Result<usize> {
            match node {
                NodeRef::Index(i) => Ok(*i),
                NodeRef::Name(name) => index
                    .get(name.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidTree(format!("unknown label {name:?}"))),
            }
        };
        let root = resolve(&doc.root)?;
        let edges = doc
            .edges
            .iter()
            .map(|[a, b]| Ok((resolve(a)?, resolve(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.labels, root, edges)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: TreeDocument =
            toml::from_str(text).map_err(|e| Error::InvalidTree(e.to_string()))?;
        Self::from_document(doc)
    }

    /// Loads a tree document from `path`. The bare name `phantom_tree`
    /// resolves to the built-in tree unless a file of that name exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.as_os_str() == PHANTOM_TREE_NAME && !path.exists() {
            return Ok(Self::phantom());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn phantom() -> Self {
        Self::from_toml_str(PHANTOM_TREE).expect("built-in phantom tree is valid")
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            labels: self.labels.clone(),
            root: NodeRef::Name(self.labels[self.root].clone()),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| {
                    [
                        NodeRef::Name(self.labels[a].clone()),
                        NodeRef::Name(self.labels[b].clone()),
                    ]
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    /// Hops from the root.
    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Pre-order depth-first linearization from the root, children visited in
    /// index order. Adjacent entries along a branch are anatomical neighbours,
    /// which makes cost-over-time matrices readable as a path through the tree.
    pub fn depth_first_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            order.push(u);
            for &v in self.adjacency[u].iter().rev() {
                if Some(v) != self.parent[u] {
                    stack.push(v);
                }
            }
        }
        order
    }

    /// All-pairs hop distances, one breadth-first search per source.
    pub fn distance_matrix(&self) -> DistanceMatrix {
        let n = self.len();
        let mut d = vec![u32::MAX; n * n];
        let mut queue = VecDeque::with_capacity(n);
        for src in 0..n {
            let row = &mut d[src * n..(src + 1) * n];
            row[src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if row[v] == u32::MAX {
                        row[v] = row[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        DistanceMatrix { n, d }
    }
}

/// Symmetric hop-count matrix of a tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    /// Largest entry: the tree diameter in hops.
    pub fn max(&self) -> u32 {
        self.d.iter().copied().max().unwrap_or(0)
    }

    pub fn to_rows(&self) -> Vec<Vec<u32>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// `exp(d / max(d))` with the global maximum as normalizer.
    pub fn regularization(&self) -> Result<RegularizationMatrix> {
        let max = self.max();
        if max == 0 {
            return Err(Error::InvalidTree(
                "regularizer undefined for a single-node tree".into(),
            ));
        }
        let max = f64::from(max);
        let r = Array2::from_shape_fn((self.n, self.n), |(i, j)| {
            (f64::from(self.get(i, j)) / max).exp()
        });
        Ok(RegularizationMatrix(r))
    }
}

/// Pairwise transition penalty with entries in `[1, e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationMatrix(Array2<f64>);

impl RegularizationMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn path3() -> AirwayTree {
        AirwayTree::new(
            vec!["A".into(), "B".into(), "C".into()],
            0,
            vec![(0, 1), (1, 2)],
        )
        .unwrap()
    }

    /// Independent all-pairs BFS over an edge list.
    fn bfs_oracle(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        (0..n)
            .map(|s| {
                let mut dist = vec![None; n];
                dist[s] = Some(0u32);
                let mut frontier = vec![s];
                let mut level = 0;
                while !frontier.is_empty() {
                    level += 1;
                    let mut next = Vec::new();
                    for u in frontier {
                        for &v in &adj[u] {
                            if dist[v].is_none() {
                                dist[v] = Some(level);
                                next.push(v);
                            }
                        }
                    }
                    frontier = next;
                }
                dist.into_iter().map(Option::unwrap).collect()
            })
            .collect()
    }

    /// Random labelled tree: node i > 0 attaches to a parent < i, then
    /// indices are shuffled by `perm`.
    fn arb_tree(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2..=max_n).prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
            (parents, Just(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle()).prop_map(
                |(parents, n, perm)| {
                    let edges = parents
                        .into_iter()
                        .enumerate()
                        .map(|(i, p)| (perm[i + 1], perm[p]))
                        .collect();
                    (n, edges)
                },
            )
        })
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn minimal_tree_from_document() {
        let tree =
            AirwayTree::from_toml_str("labels = [\"Trachea\", \"LMB\"]\nroot = 0\nedges = [[0, 1]]")
                .unwrap();
        assert_eq!(tree.len(), 2);
        assert_eq!(tree.label(tree.root()), "Trachea");
    }

    #[test]
    fn phantom_tree_has_named_branches() {
        let tree = AirwayTree::phantom();
        assert_eq!(tree.label(tree.root()), "Trachea");
        for name in ["LMB", "RMB", "LLB6", "RLL7", "TriRLL"] {
            assert!(tree.index_of(name).is_some(), "missing {name}");
        }
        assert_eq!(tree.len(), 17);
    }

    #[test]
    fn rejects_non_trees() {
        let dup_edge = AirwayTree::from_toml_str("labels = [\"A\", \"B\"]\nroot = 0\nedges = [[0, 1], [1, 0]]");
        assert!(matches!(dup_edge, Err(Error::InvalidTree(_))));

        let cycle = AirwayTree::new(names(4), 0, vec![(0, 1), (1, 2), (2, 0)]);
        assert!(cycle.is_err());

        let dup = AirwayTree::new(vec!["A".into(), "A".into()], 0, vec![(0, 1)]);
        assert!(dup.is_err());

        let bad_root = AirwayTree::new(names(2), 5, vec![(0, 1)]);
        assert!(bad_root.is_err());

        let missing = AirwayTree::from_toml_str("labels = [\"A\", \"B\"]\nroot = \"X\"\nedges = [[0, 1]]");
        assert!(missing.is_err());

        assert!(AirwayTree::from_toml_str("labels = [").is_err());
    }

    #[test]
    fn path_graph_distances() {
        let d = path3().distance_matrix();
        assert_eq!(d.get(0, 2), 2);
        assert_eq!(d.get(2, 0), 2);
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0);
        }
    }

    #[test]
    fn regularization_values() {
        let r = path3().distance_matrix().regularization().unwrap();
        assert_eq!(r.get(1, 1), 1.0);
        assert_relative_eq!(r.get(0, 2), std::f64::consts::E, epsilon = 1e-15);
        assert_relative_eq!(r.get(0, 1), 1.648_721_270_700_128, epsilon = 1e-12);
    }

    #[test]
    fn single_node_regularizer_is_undefined() {
        let tree = AirwayTree::new(vec!["Trachea".into()], 0, vec![]).unwrap();
        assert!(tree.distance_matrix().regularization().is_err());
    }

    #[test]
    fn depth_first_order_visits_subtrees_contiguously() {
        let tree = AirwayTree::phantom();
        let order = tree.depth_first_order();
        assert_eq!(order.len(), tree.len());
        assert_eq!(order[0], tree.root());
        // every node appears after its parent, and each subtree is a contiguous block
        let pos: Vec<usize> = {
            let mut p = vec![0; tree.len()];
            for (k, &v) in order.iter().enumerate() {
                p[v] = k;
            }
            p
        };
        for v in 0..tree.len() {
            if let Some(p) = tree.parent(v) {
                assert!(pos[p] < pos[v]);
            }
        }
    }

    #[test]
    fn document_round_trip() {
        let tree = AirwayTree::phantom();
        let text = toml::to_string(&tree.to_document()).unwrap();
        assert_eq!(AirwayTree::from_toml_str(&text).unwrap(), tree);
    }

    proptest! {
        #[test]
        fn distances_match_bfs_oracle((n, edges) in arb_tree(50)) {
            let tree = AirwayTree::new(names(n), 0, edges.clone()).unwrap();
            let d = tree.distance_matrix();
            prop_assert_eq!(d.to_rows(), bfs_oracle(n, &edges));
            for i in 0..n {
                prop_assert_eq!(d.get(i, i), 0);
                for j in 0..n {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    if i != j {
                        prop_assert!(d.get(i, j) >= 1);
                    }
                }
            }
        }

        #[test]
        fn distances_are_additive_along_paths((n, edges) in arb_tree(20)) {
            let tree = AirwayTree::new(names(n), 0, edges).unwrap();
            let d = tree.distance_matrix();
            for i in 0..n {
                for k in 0..n {
                    // walk k -> i one hop at a time; every visited j lies on the path
                    let mut j = k;
                    while j != i {
                        prop_assert_eq!(d.get(i, k), d.get(i, j) + d.get(j, k));
                        j = *tree
                            .neighbors(j)
                            .iter()
                            .find(|&&v| d.get(i, v) + 1 == d.get(i, j))
                            .unwrap();
                    }
                }
            }
        }

        #[test]
        fn regularization_is_monotone((n, edges) in arb_tree(15)) {
            let tree = AirwayTree::new(names(n), 0, edges).unwrap();
            let d = tree.distance_matrix();
            let r = d.regularization().unwrap();
            let cells: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
            for &(i, j) in &cells {
                prop_assert!(r.get(i, j) >= 1.0 && r.get(i, j) <= std::f64::consts::E + 1e-12);
                for &(k, l) in &cells {
                    prop_assert_eq!(d.get(i, j) < d.get(k, l), r.get(i, j) < r.get(k, l));
                }
            }
        }

        #[test]
        fn relabeling_permutes_matrices(
            (n, edges) in arb_tree(12),
            seed in any::<u64>(),
        ) {
            let mut perm: Vec<usize> = (0..n).collect();
            // deterministic shuffle from the seed
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let tree = AirwayTree::new(names(n), 0, edges.clone()).unwrap();
            let permuted_edges = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let mut permuted_labels = vec![String::new(); n];
            for i in 0..n {
                permuted_labels[perm[i]] = format!("n{i}");
            }
            let other = AirwayTree::new(permuted_labels, perm[0], permuted_edges).unwrap();
            let (d, dp) = (tree.distance_matrix(), other.distance_matrix());
            let (r, rp) = (d.regularization().unwrap(), dp.regularization().unwrap());
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(d.get(i, j), dp.get(perm[i], perm[j]));
                    prop_assert_eq!(r.get(i, j), rp.get(perm[i], perm[j]));
                }
            }
        }
    }
}

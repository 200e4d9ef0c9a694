//! Weisfeiler-Lehman color refinement and structural equivalence of meta-path graphs.
//!
//! Labels are canonical per graph: at every step the distinct
//! `(label, sorted neighbor labels)` patterns are sorted before being numbered,
//! so the numbering never depends on node order. Two graphs get the same
//! [`WlSignature`] exactly when joint 1-WL refinement cannot tell them apart.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Unweighted, undirected graph as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryGraph {
    neighbors: Vec<Vec<usize>>,
}

impl BinaryGraph {
    /// Edge iff weight > 0 (either direction); self-loops are ignored.
    pub fn from_weighted(adj: &Tensor) -> Result<Self> {
        let n = adj.rows();
        if adj.cols() != n {
            return Err(Error::invalid(format!("adjacency must be square, got {:?}", adj.shape())));
        }
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && (adj.get(i, j) > 0.0 || adj.get(j, i) > 0.0))
                    .collect()
            })
            .collect();
        Ok(Self { neighbors })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b && !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for l in &mut neighbors {
            l.sort_unstable();
        }
        Self { neighbors }
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Relabeled copy where old node `perm[i]` becomes node `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut neighbors: Vec<Vec<usize>> = perm
            .iter()
            .map(|&old| self.neighbors[old].iter().map(|&j| inv[j]).collect())
            .collect();
        for l in &mut neighbors {
            l.sort_unstable();
        }
        Self { neighbors }
    }
}

/// One refinement pattern: previous label and sorted neighbor labels.
pub type Pattern = (usize, Vec<usize>);

/// Node labels after some number of refinement steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WlLabeling {
    pub labels: Vec<usize>,
    pub iteration: usize,
    /// Per iteration: each distinct label with its multiplicity, sorted by label.
    pub history: Vec<Vec<(usize, usize)>>,
    /// Per completed step: the sorted patterns that define that step's labels.
    pub patterns: Vec<Vec<(Pattern, usize)>>,
}

impl WlLabeling {
    /// All nodes share label 0.
    pub fn uniform(n: usize) -> Self {
        let labels = vec![0; n];
        let history = vec![label_counts(&labels)];
        Self {
            labels,
            iteration: 0,
            history,
            patterns: Vec::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.history.last().map_or(0, Vec::len)
    }
}

fn label_counts(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

/// One refinement: `ℓ'(i) = HASH(ℓ(i), {{ℓ(j) : j ∈ N(i)}})`.
///
/// The dictionary is filled in sorted pattern order, which makes it injective
/// and independent of node numbering.
pub fn wl_refine_step(graph: &BinaryGraph, labeling: &WlLabeling) -> WlLabeling {
    let n = graph.node_count();
    let patterns: Vec<Pattern> = (0..n)
        .map(|i| {
            let mut neigh: Vec<usize> = graph.neighbors(i).iter().map(|&j| labeling.labels[j]).collect();
            neigh.sort_unstable();
            (labeling.labels[i], neigh)
        })
        .collect();
    let mut dictionary: BTreeMap<&Pattern, (usize, usize)> = BTreeMap::new();
    for p in &patterns {
        dictionary.entry(p).or_insert((0, 0)).1 += 1;
    }
    for (next, entry) in dictionary.values_mut().enumerate() {
        entry.0 = next;
    }
    let labels: Vec<usize> = patterns.iter().map(|p| dictionary[p].0).collect();
    let step_patterns: Vec<(Pattern, usize)> =
        dictionary.iter().map(|(p, &(_, count))| ((*p).clone(), count)).collect();
    let mut history = labeling.history.clone();
    history.push(label_counts(&labels));
    let mut all_patterns = labeling.patterns.clone();
    all_patterns.push(step_patterns);
    WlLabeling {
        labels,
        iteration: labeling.iteration + 1,
        history,
        patterns: all_patterns,
    }
}

/// Canonical WL description of a graph.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WlSignature {
    pub node_count: usize,
    /// Per step, the sorted `(pattern, count)` list; this pins down what each
    /// canonical label means as well as how often it occurs.
    pub steps: Vec<Vec<(Pattern, usize)>>,
}

/// Refines until the partition stops splitting, capped at `|V|` steps.
pub fn wl_refine(graph: &BinaryGraph) -> WlLabeling {
    let n = graph.node_count();
    let mut labeling = WlLabeling::uniform(n);
    for _ in 0..n.max(1) {
        let next = wl_refine_step(graph, &labeling);
        let stable = next.class_count() == labeling.class_count();
        labeling = next;
        if stable {
            break;
        }
    }
    labeling
}

pub fn wl_signature(graph: &BinaryGraph) -> WlSignature {
    let labeling = wl_refine(graph);
    WlSignature {
        node_count: graph.node_count(),
        steps: labeling.patterns,
    }
}

/// Same node count and identical WL signatures.
pub fn wl_equivalent(g1: &BinaryGraph, g2: &BinaryGraph) -> bool {
    g1.node_count() == g2.node_count() && wl_signature(g1) == wl_signature(g2)
}

/// Binary structural-equivalence matrix over the meta-path relations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceMatrix {
    s: Vec<Vec<u8>>,
}

impl EquivalenceMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            s: (0..n).map(|i| (0..n).map(|j| u8::from(i == j)).collect()).collect(),
        }
    }

    pub fn from_rows(s: Vec<Vec<u8>>) -> Result<Self> {
        let m = Self { s };
        m.validate()?;
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.s.len()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.s[i][j] == 1
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.s
    }

    /// Equivalence class id for every relation (smallest member index).
    pub fn classes(&self) -> Vec<usize> {
        (0..self.size())
            .map(|i| (0..self.size()).find(|&j| self.get(i, j)).unwrap_or(i))
            .collect()
    }

    /// Checks binary entries, unit diagonal, symmetry and transitivity.
    pub fn validate(&self) -> Result<()> {
        let n = self.s.len();
        for (i, row) in self.s.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid("equivalence matrix must be square"));
            }
            if row[i] != 1 || row.iter().any(|&v| v > 1) {
                return Err(Error::invalid("equivalence matrix needs binary entries and unit diagonal"));
            }
        }
        for i in 0..n {
            for j in 0..n {
                if self.s[i][j] != self.s[j][i] {
                    return Err(Error::invalid("equivalence matrix is not symmetric"));
                }
                for k in 0..n {
                    if self.s[i][j] == 1 && self.s[j][k] == 1 && self.s[i][k] != 1 {
                        return Err(Error::invalid("equivalence matrix is not transitive"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `S_ij = 𝕀[wl_equivalent(G_i, G_j)]` over the given adjacencies.
pub fn build_equivalence_matrix(adjacencies: &[Tensor]) -> Result<EquivalenceMatrix> {
    let graphs: Vec<BinaryGraph> = adjacencies
        .iter()
        .map(BinaryGraph::from_weighted)
        .collect::<Result<_>>()?;
    let sigs: Vec<WlSignature> = graphs.iter().map(wl_signature).collect();
    let n = sigs.len();
    let s = (0..n)
        .map(|i| (0..n).map(|j| u8::from(sigs[i] == sigs[j])).collect())
        .collect();
    let m = EquivalenceMatrix { s };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(n: usize) -> BinaryGraph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        BinaryGraph::from_edges(n, &edges)
    }

    #[test]
    fn regular_graph_stays_uniform() {
        let g = cycle(6);
        let l = wl_refine_step(&g, &WlLabeling::uniform(6));
        assert!(l.labels.iter().all(|&x| x == l.labels[0]));
    }

    #[test]
    fn star_splits_into_two_classes() {
        let g = BinaryGraph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]);
        let l = wl_refine_step(&g, &WlLabeling::uniform(4));
        assert_eq!(l.class_count(), 2);
        assert_ne!(l.labels[0], l.labels[1]);
        assert_eq!(l.labels[1], l.labels[2]);
        assert_eq!(l.labels[2], l.labels[3]);
    }

    #[test]
    fn refinement_is_equivariant() {
        let g = BinaryGraph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (1, 4)]);
        let perm = [4, 2, 0, 3, 1];
        let two_steps = |g: &BinaryGraph| wl_refine_step(g, &wl_refine_step(g, &WlLabeling::uniform(5)));
        let l = two_steps(&g);
        let lp = two_steps(&g.permuted(&perm));
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(lp.labels[new], l.labels[old]);
        }
    }

    #[test]
    fn path_and_triangle_differ() {
        let p3 = BinaryGraph::from_edges(3, &[(0, 1), (1, 2)]);
        let k3 = cycle(3);
        assert!(!wl_equivalent(&p3, &k3));
    }

    #[test]
    fn permuted_and_empty_graphs_match() {
        let g = BinaryGraph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5)]);
        assert!(wl_equivalent(&g, &g.permuted(&[5, 3, 1, 0, 2, 4])));
        assert!(wl_equivalent(&BinaryGraph::from_edges(4, &[]), &BinaryGraph::from_edges(4, &[])));
        assert!(!wl_equivalent(&BinaryGraph::from_edges(4, &[]), &BinaryGraph::from_edges(5, &[])));
    }

    #[test]
    fn partitions_only_split() {
        let g = BinaryGraph::from_edges(7, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (1, 5)]);
        let mut l = WlLabeling::uniform(7);
        for _ in 0..7 {
            let next = wl_refine_step(&g, &l);
            for a in 0..7 {
                for b in 0..7 {
                    if l.labels[a] != l.labels[b] {
                        assert_ne!(next.labels[a], next.labels[b]);
                    }
                }
            }
            l = next;
        }
    }

    fn adjacency(n: usize, edges: &[(usize, usize)]) -> Tensor {
        let mut a = Tensor::zeros(n, n);
        for &(i, j) in edges {
            a.set(i, j, 0.5);
            a.set(j, i, 0.5);
        }
        a
    }

    #[test]
    fn equivalence_matrix_fixtures() {
        let a = adjacency(5, &[(0, 1), (1, 2)]);
        let s = build_equivalence_matrix(&[a.clone(), a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(s.rows().iter().flatten().all(|&v| v == 1));

        let distinct = [
            adjacency(5, &[]),
            adjacency(5, &[(0, 1)]),
            adjacency(5, &[(0, 1), (1, 2)]),
            adjacency(5, &[(0, 1), (1, 2), (2, 0)]),
        ];
        assert_eq!(build_equivalence_matrix(&distinct).unwrap(), EquivalenceMatrix::identity(4));

        // site and sex share a pattern (up to relabeling); age and hand are distinct
        let site = adjacency(5, &[(0, 1), (2, 3)]);
        let sex = adjacency(5, &[(4, 2), (1, 0)]);
        let age = adjacency(5, &[(0, 1), (1, 2), (2, 3)]);
        let hand = adjacency(5, &[]);
        let s = build_equivalence_matrix(&[site, sex, age, hand]).unwrap();
        let off: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && s.get(i, j))
            .collect();
        assert_eq!(off, vec![(0, 1), (1, 0)]);
        assert_eq!(s.classes(), vec![0, 0, 2, 3]);
    }

    #[test]
    fn validate_rejects_broken_matrices() {
        assert!(EquivalenceMatrix::from_rows(vec![vec![1, 1], vec![0, 1]]).is_err());
        assert!(EquivalenceMatrix::from_rows(vec![
            vec![1, 1, 0],
            vec![1, 1, 1],
            vec![0, 1, 1]
        ])
        .is_err());
        assert!(EquivalenceMatrix::from_rows(vec![vec![0]]).is_err());
    }
}

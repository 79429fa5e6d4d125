use std::collections::BTreeSet;

use indexmap::IndexMap;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conllu::DependencyTree;
use crate::error::{Error, Result};

/// Dependency-relation labels mapped to ids `1..=len` in sorted order.
/// Id 0 is reserved for labels outside the vocabulary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelationVocabulary {
    ids: IndexMap<String, usize>,
}

impl RelationVocabulary {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<&str> = labels.into_iter().collect();
        RelationVocabulary {
            ids: sorted.into_iter().enumerate().map(|(i, l)| (l.to_string(), i + 1)).collect(),
        }
    }

    pub fn from_trees<'a>(trees: impl IntoIterator<Item = &'a DependencyTree>) -> Self {
        Self::from_labels(trees.into_iter().flat_map(|t| t.deprels.iter().map(String::as_str)))
    }

    pub fn id(&self, label: &str) -> usize {
        self.ids.get(label).copied().unwrap_or(0)
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.ids.get_index(i))
            .map(|(l, _)| l.as_str())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of distinct forward edge ids, the unknown id included.
    pub fn id_count(&self) -> usize {
        self.ids.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Forward,
    #[default]
    Reverse,
    Bidirectional,
}

impl DirectionMode {
    pub const ALL: [DirectionMode; 3] =
        [DirectionMode::Forward, DirectionMode::Reverse, DirectionMode::Bidirectional];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

/// Merged dependency graph: node 0 is ROOT, token `i` is node `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub node_count: usize,
    pub edges: Vec<Edge>,
    pub mode: DirectionMode,
    /// Offset added to relation ids of reversed copies in bidirectional mode.
    pub relation_offset: usize,
}

impl DependencyGraph {
    pub fn n_words(&self) -> usize {
        self.node_count - 1
    }

    /// Largest relation id any edge may carry, plus one.
    pub fn relation_span(&self) -> usize {
        2 * self.relation_offset
    }

    /// Undirected, deduplicated adjacency pairs `(a, b)` with `a < b`.
    pub fn undirected_pairs(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> =
            self.edges.iter().map(|e| (e.src.min(e.dst), e.src.max(e.dst))).collect();
        set.into_iter().collect()
    }

    /// Destination of every edge, the grouping used by per-node softmax.
    pub fn destinations(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.dst).collect()
    }
}

/// Joins sentence trees at a shared ROOT, numbering tokens in reading order.
/// Edges point head → dependent.
pub fn merge_trees(trees: &[DependencyTree], relations: &RelationVocabulary) -> Result<DependencyGraph> {
    if trees.is_empty() {
        return Err(Error::Invalid("expression has no sentences".into()));
    }
    let mut edges = Vec::new();
    let mut base = 0;
    for tree in trees {
        for i in 0..tree.len() {
            let head = tree.heads[i];
            edges.push(Edge {
                src: if head == 0 { 0 } else { base + head },
                dst: base + i + 1,
                relation: relations.id(&tree.deprels[i]),
            });
        }
        base += tree.len();
    }
    Ok(DependencyGraph {
        node_count: base + 1,
        edges,
        mode: DirectionMode::Forward,
        relation_offset: relations.id_count(),
    })
}

fn flipped(e: &Edge) -> Edge {
    Edge { src: e.dst, dst: e.src, relation: e.relation }
}

/// Re-orients edges. `Reverse` flips every edge of the input (so applying
/// it twice restores the input). `Bidirectional` keeps the head → dependent
/// edges and appends the flipped copies with ids shifted by
/// `relation_offset`.
pub fn orient_edges(graph: &DependencyGraph, mode: DirectionMode) -> DependencyGraph {
    let mut out = graph.clone();
    match mode {
        DirectionMode::Forward => {}
        DirectionMode::Reverse => {
            out.edges = graph.edges.iter().map(flipped).collect();
            out.mode = match graph.mode {
                DirectionMode::Forward => DirectionMode::Reverse,
                DirectionMode::Reverse => DirectionMode::Forward,
                DirectionMode::Bidirectional => DirectionMode::Bidirectional,
            };
        }
        DirectionMode::Bidirectional => {
            let canonical: Vec<Edge> = match graph.mode {
                DirectionMode::Forward => graph.edges.clone(),
                DirectionMode::Reverse => graph.edges.iter().map(flipped).collect(),
                DirectionMode::Bidirectional => return out,
            };
            let offset = graph.relation_offset;
            out.edges = canonical.clone();
            out.edges.extend(canonical.iter().map(|e| Edge {
                relation: e.relation + offset,
                ..flipped(e)
            }));
            out.mode = DirectionMode::Bidirectional;
        }
    }
    out
}

/// Dense combinatorial Laplacian `Deg − Adj` of the undirected graph.
pub fn laplacian(graph: &DependencyGraph) -> DMatrix<f64> {
    let n = graph.node_count;
    let mut l = DMatrix::zeros(n, n);
    for (a, b) in graph.undirected_pairs() {
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
    }
    l
}

/// Laplacian positional encodings, `n x k` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPe {
    pub n: usize,
    pub k: usize,
    /// Eigenvalue of each column, 0 for padding columns.
    pub eigenvalues: Vec<f64>,
    pub data: Vec<f64>,
}

impl LaplacianPe {
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.k + j]).collect()
    }

    /// Flips each column's sign with probability one half.
    pub fn randomize_signs(&mut self, rng: &mut impl Rng) {
        for j in 0..self.k {
            if rng.random_bool(0.5) {
                for i in 0..self.n {
                    self.data[i * self.k + j] = -self.data[i * self.k + j];
                }
            }
        }
    }
}

/// Eigenvectors for the `k` smallest nontrivial eigenvalues, ascending,
/// each signed so its first clearly nonzero entry is positive. Columns past
/// the available `n − 1` eigenvectors are zero.
pub fn laplacian_pe(graph: &DependencyGraph, k: usize) -> LaplacianPe {
    let n = graph.node_count;
    let eig = SymmetricEigen::new(laplacian(graph));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut data = vec![0.0; n * k];
    let mut eigenvalues = vec![0.0; k];
    for (j, &col) in order.iter().skip(1).take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        let sign = v.iter().find(|x| x.abs() > 1e-9).map_or(1.0, |x| x.signum());
        for i in 0..n {
            data[i * k + j] = sign * v[i];
        }
        eigenvalues[j] = eig.eigenvalues[col];
    }
    LaplacianPe { n, k, eigenvalues, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(heads: &[usize], rels: &[&str]) -> DependencyTree {
        DependencyTree {
            forms: (0..heads.len()).map(|i| format!("w{i}")).collect(),
            heads: heads.to_vec(),
            deprels: rels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn vocabulary_is_sorted_and_reserves_zero() {
        let v = RelationVocabulary::from_labels(["nsubj", "amod", "det", "amod"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("amod"), 1);
        assert_eq!(v.id("det"), 2);
        assert_eq!(v.id("nsubj"), 3);
        assert_eq!(v.id("xcomp"), 0);
        assert_eq!(v.label(2), Some("det"));
        assert_eq!(v.label(0), None);
    }

    #[test]
    fn merge_counts() {
        let a = tree(&[2, 0, 2], &["det", "root", "dep"]);
        let b = tree(&[0, 1, 1, 3], &["root", "dep", "dep", "dep"]);
        let v = RelationVocabulary::from_trees([&a, &b]);
        let g = merge_trees(&[a, b], &v).unwrap();
        assert_eq!(g.node_count, 8);
        assert_eq!(g.edges.len(), 7);
        assert!(g.edges.contains(&Edge { src: 0, dst: 2, relation: v.id("root") }));
        assert!(g.edges.contains(&Edge { src: 0, dst: 4, relation: v.id("root") }));
        assert!(g.edges.contains(&Edge { src: 6, dst: 7, relation: v.id("dep") }));

        let one = tree(&[0], &["root"]);
        let g = merge_trees(&[one], &v).unwrap();
        assert_eq!((g.node_count, g.edges.len()), (2, 1));
        assert!(merge_trees(&[], &v).is_err());
    }

    #[test]
    fn orientation_modes() {
        let t = tree(&[0, 1], &["root", "amod"]);
        let v = RelationVocabulary::from_trees([&t]);
        let g = merge_trees(&[t], &v).unwrap();
        let r = orient_edges(&g, DirectionMode::Reverse);
        assert_eq!(r.edges[0], Edge { src: 1, dst: 0, relation: v.id("root") });
        assert_eq!(orient_edges(&r, DirectionMode::Reverse), g);
        let b = orient_edges(&g, DirectionMode::Bidirectional);
        assert_eq!(b.edges.len(), 4);
        assert_eq!(b.edges[2].relation, v.id("root") + v.id_count());
        assert_eq!(orient_edges(&r, DirectionMode::Bidirectional), b);
        assert!(b.edges.iter().all(|e| e.relation < b.relation_span()));
    }

    #[test]
    fn path_graph_spectrum() {
        // ROOT -> w1 -> w2: a path on three nodes with eigenvalues 0, 1, 3.
        let t = tree(&[0, 1], &["root", "dep"]);
        let g = merge_trees(&[t], &RelationVocabulary::default()).unwrap();
        let pe = laplacian_pe(&g, 4);
        assert!((pe.eigenvalues[0] - 1.0).abs() < 1e-10);
        assert!((pe.eigenvalues[1] - 3.0).abs() < 1e-10);
        assert_eq!(&pe.eigenvalues[2..], &[0.0, 0.0]);
        assert!(pe.column(2).iter().chain(pe.column(3).iter()).all(|&x| x == 0.0));
        let l = laplacian(&g);
        for j in 0..2 {
            let v = nalgebra::DVector::from_vec(pe.column(j));
            assert!((v.norm() - 1.0).abs() < 1e-9);
            let r = &l * &v - &v * pe.eigenvalues[j];
            assert!(r.norm() <= 1e-8);
            assert!(v.iter().find(|x| x.abs() > 1e-9).unwrap() > &0.0);
        }
    }
}

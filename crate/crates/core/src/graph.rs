//! Immutable undirected graphs, Laplacian constructions and basic graph
//! functionals (Dirichlet energy, conductance).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::CsrMatrix;

/// Largest graph accepted by [`min_conductance_bruteforce`].
pub const MAX_ENUMERATION_NODES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge references node {node} but the graph has {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("node {0} is isolated; strict Laplacian construction requires positive degrees")]
    IsolatedNode(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("conductance needs a nonempty proper subset")]
    EmptyOrFullSubset,
    #[error("exhaustive enumeration limited to {max} nodes, graph has {n}")]
    TooLargeForEnumeration { n: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    /// `D − A`.
    #[default]
    Combinatorial,
    /// `I − D^{-1/2} A D^{-1/2}`.
    Normalized,
    /// `I − D^{-1} A`.
    RandomWalk,
}

/// What to do with zero-degree nodes when a kind needs `D^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IsolatedPolicy {
    /// Treat the node as having a unit self-loop in `D` only.
    #[default]
    UnitSelfLoop,
    Strict,
}

/// What the edge-list constructor threw away.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalizationReport {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl CanonicalizationReport {
    pub fn dropped(&self) -> usize {
        self.self_loops + self.duplicates
    }
}

/// Undirected simple graph in compressed adjacency form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    degrees: Vec<usize>,
    report: CanonicalizationReport,
}

impl SparseGraph {
    /// Canonicalises an arbitrary edge list: both orientations and repeats
    /// collapse to one undirected edge, self-loops are dropped.
    pub fn from_edges<I>(num_nodes: usize, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut report = CanonicalizationReport::default();
        let mut canon = Vec::new();
        for (a, b) in edges {
            for node in [a, b] {
                if node >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { node, num_nodes });
                }
            }
            if a == b {
                report.self_loops += 1;
                continue;
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        report.duplicates = before - canon.len();

        let mut degrees = vec![0usize; num_nodes];
        for &(a, b) in &canon {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        let mut offsets = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            offsets[i + 1] = offsets[i] + degrees[i];
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0usize; offsets[num_nodes]];
        for &(a, b) in &canon {
            neighbors[fill[a]] = b;
            fill[a] += 1;
            neighbors[fill[b]] = a;
            fill[b] += 1;
        }
        for i in 0..num_nodes {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok(Self { num_nodes, edges: canon, offsets, neighbors, degrees, report })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn max_degree(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn canonicalization(&self) -> CanonicalizationReport {
        self.report
    }

    /// Symmetric 0/1 adjacency matrix.
    pub fn adjacency(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            triplets.push((a, b, 1.0));
            triplets.push((b, a, 1.0));
        }
        CsrMatrix::from_triplets(self.num_nodes, self.num_nodes, &triplets)
    }

    /// Connected-component label per node, labels numbered in order of first
    /// appearance.
    pub fn component_labels(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.num_nodes];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.num_nodes {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &u in self.neighbors(v) {
                    if label[u] == usize::MAX {
                        label[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn num_components(&self) -> usize {
        self.component_labels().iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn is_connected(&self) -> bool {
        self.num_components() <= 1
    }

    /// The same graph with nodes relabelled by `perm` (node `i` becomes `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_nodes);
        Self::from_edges(self.num_nodes, self.edges.iter().map(|&(a, b)| (perm[a], perm[b])))
            .expect("permutation keeps indices in range")
    }
}

/// Laplacian with the default isolated-node policy (unit self-loop in `D`).
pub fn build_laplacian(graph: &SparseGraph, kind: LaplacianKind) -> CsrMatrix {
    build_laplacian_with(graph, kind, IsolatedPolicy::UnitSelfLoop)
        .expect("self-loop policy never fails")
}

pub fn build_laplacian_with(
    graph: &SparseGraph,
    kind: LaplacianKind,
    policy: IsolatedPolicy,
) -> Result<CsrMatrix, GraphError> {
    let n = graph.num_nodes();
    let deg: Vec<f64> = graph.degrees().iter().map(|&d| d as f64).collect();
    let effective = |i: usize| -> Result<f64, GraphError> {
        match (deg[i] > 0.0, policy) {
            (true, _) => Ok(deg[i]),
            (false, IsolatedPolicy::UnitSelfLoop) => Ok(1.0),
            (false, IsolatedPolicy::Strict) => Err(GraphError::IsolatedNode(i)),
        }
    };
    let mut triplets = Vec::with_capacity(n + 2 * graph.num_edges());
    match kind {
        LaplacianKind::Combinatorial => {
            for i in 0..n {
                triplets.push((i, i, deg[i]));
                for &j in graph.neighbors(i) {
                    triplets.push((i, j, -1.0));
                }
            }
        }
        LaplacianKind::Normalized => {
            let inv_sqrt: Vec<f64> =
                (0..n).map(|i| effective(i).map(|d| 1.0 / d.sqrt())).collect::<Result<_, _>>()?;
            for i in 0..n {
                triplets.push((i, i, 1.0));
                for &j in graph.neighbors(i) {
                    triplets.push((i, j, -inv_sqrt[i] * inv_sqrt[j]));
                }
            }
        }
        LaplacianKind::RandomWalk => {
            for i in 0..n {
                let d = effective(i)?;
                triplets.push((i, i, 1.0));
                for &j in graph.neighbors(i) {
                    triplets.push((i, j, -1.0 / d));
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &triplets))
}

/// Quadratic form `fᵀ L f`.
pub fn dirichlet_energy(laplacian: &CsrMatrix, signal: &[f64]) -> Result<f64, GraphError> {
    if signal.len() != laplacian.ncols() {
        return Err(GraphError::DimensionMismatch {
            expected: laplacian.ncols(),
            found: signal.len(),
        });
    }
    let lf = laplacian.matvec(signal);
    Ok(signal.iter().zip(&lf).map(|(a, b)| a * b).sum())
}

/// `|∂S| / min(vol S, vol V∖S)`. A subset with no boundary has conductance 0.
pub fn conductance(graph: &SparseGraph, subset: &[usize]) -> Result<f64, GraphError> {
    let n = graph.num_nodes();
    let mut inside = vec![false; n];
    for &v in subset {
        if v >= n {
            return Err(GraphError::NodeOutOfRange { node: v, num_nodes: n });
        }
        inside[v] = true;
    }
    let size = inside.iter().filter(|&&b| b).count();
    if size == 0 || size == n {
        return Err(GraphError::EmptyOrFullSubset);
    }
    let mut boundary = 0usize;
    let mut vol_in = 0usize;
    let mut vol_out = 0usize;
    for v in 0..n {
        if inside[v] {
            vol_in += graph.degrees()[v];
            boundary += graph.neighbors(v).iter().filter(|&&u| !inside[u]).count();
        } else {
            vol_out += graph.degrees()[v];
        }
    }
    if boundary == 0 {
        return Ok(0.0);
    }
    Ok(boundary as f64 / vol_in.min(vol_out) as f64)
}

/// Global minimum conductance by exhaustive enumeration, with a minimising
/// subset. Only subsets containing node 0 are visited since `h(S) = h(V∖S)`.
pub fn min_conductance_bruteforce(graph: &SparseGraph) -> Result<(f64, Vec<usize>), GraphError> {
    let n = graph.num_nodes();
    if n > MAX_ENUMERATION_NODES {
        return Err(GraphError::TooLargeForEnumeration { n, max: MAX_ENUMERATION_NODES });
    }
    if n < 2 {
        return Err(GraphError::EmptyOrFullSubset);
    }
    let nbr_mask: Vec<u32> =
        (0..n).map(|i| graph.neighbors(i).iter().fold(0u32, |m, &j| m | (1 << j))).collect();
    let total_vol: usize = graph.degrees().iter().sum();
    let full = (1u32 << n) - 1;
    let mut best = (f64::INFINITY, 0u32);
    let mut mask = 1u32;
    while mask < full {
        let mut boundary = 0u32;
        let mut vol = 0usize;
        let mut bits = mask;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            boundary += (nbr_mask[i] & !mask).count_ones();
            vol += graph.degrees()[i];
        }
        let h = if boundary == 0 {
            0.0
        } else {
            boundary as f64 / vol.min(total_vol - vol) as f64
        };
        if h < best.0 {
            best = (h, mask);
        }
        mask += 2;
    }
    let subset = (0..n).filter(|&i| best.1 & (1 << i) != 0).collect();
    Ok((best.0, subset))
}

/// Small named graphs and a random connected-graph sampler.
pub mod fixtures {
    use rand::Rng;

    use super::SparseGraph;

    pub fn path(n: usize) -> SparseGraph {
        SparseGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    pub fn complete(n: usize) -> SparseGraph {
        SparseGraph::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))).unwrap()
    }

    pub fn star(leaves: usize) -> SparseGraph {
        SparseGraph::from_edges(leaves + 1, (1..=leaves).map(|j| (0, j))).unwrap()
    }

    pub fn cycle(n: usize) -> SparseGraph {
        SparseGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap()
    }

    /// Two triangles {0,1,2} and {3,4,5} joined by the bridge 2–3.
    pub fn barbell_triangles() -> SparseGraph {
        SparseGraph::from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]).unwrap()
    }

    /// A uniformly random recursive tree (so the graph is connected) plus
    /// independent extra edges with probability `p`.
    pub fn random_connected<R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> SparseGraph {
        let mut edges = Vec::new();
        for i in 1..n {
            edges.push((rng.random_range(0..i), i));
            for j in 0..i {
                if rng.random_bool(p) {
                    edges.push((j, i));
                }
            }
        }
        SparseGraph::from_edges(n, edges).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn dense_eigenvalues(l: &CsrMatrix) -> Vec<f64> {
        let n = l.nrows();
        let d = l.to_dense();
        let m = nalgebra::DMatrix::from_row_slice(n, n, d.data());
        let mut v: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    fn random_graph(n: usize, bits: &[bool]) -> SparseGraph {
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                if bits[k % bits.len()] {
                    edges.push((i, j));
                }
                k += 1;
            }
        }
        SparseGraph::from_edges(n, edges).unwrap()
    }

    #[test]
    fn canonicalization_collapses_orientations_and_loops() {
        let g = SparseGraph::from_edges(3, [(2, 1), (1, 2), (0, 0), (0, 1), (1, 0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.canonicalization(), CanonicalizationReport { self_loops: 1, duplicates: 2 });
        assert_eq!(g.degrees(), &[1, 2, 1]);
        assert!(g.adjacency().is_symmetric(0.0));
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = SparseGraph::from_edges(2, [(0, 2)]).unwrap_err();
        assert_eq!(err, GraphError::NodeOutOfRange { node: 2, num_nodes: 2 });
    }

    #[test]
    fn path_combinatorial_laplacian() {
        let l = build_laplacian(&path(3), LaplacianKind::Combinatorial).to_dense();
        assert_eq!(
            l,
            crate::Matrix::from_rows(&[
                vec![1.0, -1.0, 0.0],
                vec![-1.0, 2.0, -1.0],
                vec![0.0, -1.0, 1.0]
            ])
        );
    }

    #[test]
    fn path_normalized_spectrum() {
        let ev = dense_eigenvalues(&build_laplacian(&path(3), LaplacianKind::Normalized));
        for (got, want) in ev.iter().zip([0.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12, "{ev:?}");
        }
    }

    #[test]
    fn random_walk_rows_sum_to_zero() {
        let g = barbell_triangles();
        let l = build_laplacian(&g, LaplacianKind::RandomWalk);
        for s in l.matvec(&[1.0; 6]) {
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_policies() {
        let g = SparseGraph::from_edges(3, [(0, 1)]).unwrap();
        let err = build_laplacian_with(&g, LaplacianKind::Normalized, IsolatedPolicy::Strict);
        assert_eq!(err.unwrap_err(), GraphError::IsolatedNode(2));
        let l = build_laplacian(&g, LaplacianKind::Normalized);
        assert_eq!(l.get(2, 2), 1.0);
        assert!(l.to_dense().is_finite());
        // combinatorial never needs D^{-1}
        assert!(build_laplacian_with(&g, LaplacianKind::Combinatorial, IsolatedPolicy::Strict).is_ok());
    }

    #[test]
    fn dirichlet_examples() {
        let l = build_laplacian(&path(3), LaplacianKind::Combinatorial);
        assert_eq!(dirichlet_energy(&l, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dirichlet_energy(&l, &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(
            dirichlet_energy(&l, &[1.0]).unwrap_err(),
            GraphError::DimensionMismatch { expected: 3, found: 1 }
        );
    }

    #[test]
    fn conductance_examples() {
        assert_eq!(conductance(&path(3), &[0]).unwrap(), 1.0);
        assert!((conductance(&complete(4), &[0, 1]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(conductance(&path(3), &[]).unwrap_err(), GraphError::EmptyOrFullSubset);
        assert_eq!(conductance(&path(3), &[0, 1, 2]).unwrap_err(), GraphError::EmptyOrFullSubset);
    }

    #[test]
    fn bruteforce_examples() {
        let (h, _) = min_conductance_bruteforce(&path(3)).unwrap();
        assert_eq!(h, 1.0);

        let (h, s) = min_conductance_bruteforce(&barbell_triangles()).unwrap();
        assert_eq!(s, vec![0, 1, 2]);
        assert!((h - 1.0 / 7.0).abs() < 1e-15);

        let two = SparseGraph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert_eq!(min_conductance_bruteforce(&two).unwrap().0, 0.0);

        let big = path(17);
        assert_eq!(
            min_conductance_bruteforce(&big).unwrap_err(),
            GraphError::TooLargeForEnumeration { n: 17, max: 16 }
        );
    }

    #[test]
    fn zero_multiplicity_counts_components() {
        let g = SparseGraph::from_edges(7, [(0, 1), (1, 2), (3, 4), (5, 6), (4, 3)]).unwrap();
        assert_eq!(g.num_components(), 3);
        for kind in [LaplacianKind::Combinatorial, LaplacianKind::Normalized] {
            let ev = dense_eigenvalues(&build_laplacian(&g, kind));
            assert_eq!(ev.iter().filter(|v| v.abs() < 1e-9).count(), 3, "{kind:?}: {ev:?}");
        }
    }

    proptest! {
        #[test]
        fn dirichlet_matches_pairwise_sum(
            n in 2usize..=8,
            bits in proptest::collection::vec(any::<bool>(), 28),
            f in proptest::collection::vec(-3.0f64..3.0, 8),
        ) {
            let g = random_graph(n, &bits);
            let l = build_laplacian(&g, LaplacianKind::Combinatorial);
            let f = &f[..n];
            let a = g.adjacency();
            let mut pairwise = 0.0;
            for i in 0..n {
                for j in 0..n {
                    pairwise += a.get(i, j) * (f[i] - f[j]).powi(2);
                }
            }
            let e = dirichlet_energy(&l, f).unwrap();
            prop_assert!((e - 0.5 * pairwise).abs() < 1e-12);
            prop_assert!(e >= -1e-12);
        }

        #[test]
        fn complement_has_equal_conductance(
            n in 3usize..=9,
            bits in proptest::collection::vec(any::<bool>(), 36),
            pick in proptest::collection::vec(any::<bool>(), 9),
        ) {
            let g = random_graph(n, &bits);
            let s: Vec<usize> = (0..n).filter(|&i| pick[i]).collect();
            prop_assume!(!s.is_empty() && s.len() < n);
            let c: Vec<usize> = (0..n).filter(|&i| !pick[i]).collect();
            prop_assert_eq!(conductance(&g, &s).unwrap(), conductance(&g, &c).unwrap());
        }

        #[test]
        fn connected_laplacians_have_simple_zero(
            n in 2usize..=9,
            bits in proptest::collection::vec(any::<bool>(), 36),
        ) {
            let g = random_graph(n, &bits);
            prop_assume!(g.is_connected());
            for kind in [LaplacianKind::Combinatorial, LaplacianKind::Normalized, LaplacianKind::RandomWalk] {
                let l = build_laplacian(&g, kind);
                let ev = if kind == LaplacianKind::RandomWalk {
                    // similar to the normalized Laplacian, so same spectrum
                    dense_eigenvalues(&build_laplacian(&g, LaplacianKind::Normalized))
                } else {
                    dense_eigenvalues(&l)
                };
                prop_assert!(ev[0].abs() < 1e-9);
                prop_assert!(ev[1] > 1e-9);
            }
        }
    }
}

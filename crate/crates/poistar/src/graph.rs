//! Adjacency structure of the areal units.
//!
//! An [`AreaGraph`] is an undirected simple graph over `n_areas` nodes,
//! stored as a sorted, deduplicated edge list plus per-node degrees. That
//! is all the CAR machinery needs: quadratic forms and matrix-vector
//! products against the Leroux precision are single passes over the edges.
//!
//! [`eigen_spectrum`](AreaGraph::eigen_spectrum) computes the eigenvalues
//! of `M = W + I - D` (adjacency plus identity minus degree matrix) once
//! per graph; the Leroux log-determinant at any mixing value `alpha` is
//! then the sum of `ln(1 - alpha * lambda_i)`, which is what makes
//! repeated density evaluations cheap inside the sampler.
//!
//! # Edge-list file format
//!
//! ```text
//! # any number of comment lines
//! area_count=33
//! 0,1
//! 0,5
//! ...
//! ```
//!
//! Node ids are 0-based. Blank lines and `#` comments are ignored (their
//! count is reported back so callers can surface it). Each undirected edge
//! appears once; listing it twice — in either orientation — is an error.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Undirected simple graph over areal units.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaGraph {
    n_areas: usize,
    /// Edges with `a < b`, sorted lexicographically, no duplicates.
    edges: Vec<(u32, u32)>,
    degrees: Vec<u32>,
}

/// Eigenvalues of `M = W + I - D`, sorted ascending.
///
/// For any graph the largest eigenvalue is exactly 1 (eigenvector of all
/// ones on each connected component), so `1 - alpha * lambda_i > 0` for all
/// `alpha` in `[0, 1)` and the Leroux precision stays positive definite.
#[derive(Debug, Clone)]
pub struct EigenSpectrum {
    eigenvalues: Vec<f64>,
}

impl EigenSpectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Bookkeeping from parsing an edge-list file: nothing is ever silently
/// dropped, so skipped comment/blank lines are counted and reported.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeListStats {
    pub comment_lines: usize,
    pub blank_lines: usize,
    pub edge_lines: usize,
}

impl AreaGraph {
    /// Build a graph from an edge list over nodes `0..n_areas`.
    ///
    /// Rejects self-loops, out-of-range endpoints, and duplicate edges
    /// (in either orientation), naming the offending edge.
    pub fn new(n_areas: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_areas == 0 {
            return Err(Error::Graph("graph must have at least one area".into()));
        }
        if n_areas > u32::MAX as usize {
            return Err(Error::Graph(format!("too many areas: {n_areas}")));
        }
        let mut norm: Vec<(u32, u32)> = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i == j {
                return Err(Error::Graph(format!("edge ({i}, {j}) is a self-loop")));
            }
            if i >= n_areas || j >= n_areas {
                return Err(Error::Graph(format!(
                    "edge ({i}, {j}) references an area outside 0..{n_areas}"
                )));
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            norm.push((a as u32, b as u32));
        }
        norm.sort_unstable();
        for w in norm.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Graph(format!(
                    "duplicate edge ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut degrees = vec![0u32; n_areas];
        for &(a, b) in &norm {
            degrees[a as usize] += 1;
            degrees[b as usize] += 1;
        }
        Ok(AreaGraph {
            n_areas,
            edges: norm,
            degrees,
        })
    }

    /// Rook-adjacency rectangular lattice with `rows * cols` nodes, node
    /// `r * cols + c` at grid position `(r, c)`.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Graph("lattice dimensions must be positive".into()));
        }
        let mut edges = Vec::with_capacity(2 * rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                if c + 1 < cols {
                    edges.push((id, id + 1));
                }
                if r + 1 < rows {
                    edges.push((id, id + cols));
                }
            }
        }
        AreaGraph::new(rows * cols, &edges)
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i] as usize
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    /// Neighbors of node `i` (linear scan; intended for diagnostics and
    /// small-scale checks, not inner loops).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let i = i as u32;
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == i {
                out.push(b as usize);
            } else if b == i {
                out.push(a as usize);
            }
        }
        out.sort_unstable();
        out
    }

    /// Number of connected components (isolated nodes count as their own
    /// component). Disconnected graphs are legal model inputs; callers log
    /// a warning because the corresponding random effects are only tied
    /// together by the exchangeable `(1 - alpha)` term.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n_areas).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let ra = find(&mut parent, a as usize);
            let rb = find(&mut parent, b as usize);
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..self.n_areas)
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }

    /// Eigenvalues of `M = W + I - D`, ascending.
    pub fn eigen_spectrum(&self) -> EigenSpectrum {
        let n = self.n_areas;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0 - self.degrees[i] as f64;
        }
        for &(a, b) in &self.edges {
            m[(a as usize, b as usize)] = 1.0;
            m[(b as usize, a as usize)] = 1.0;
        }
        let mut eigenvalues: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigenvalues.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
        EigenSpectrum { eigenvalues }
    }

    /// Parse the edge-list text format described at module level.
    pub fn parse_edge_list(text: &str) -> Result<(Self, EdgeListStats)> {
        let mut stats = EdgeListStats::default();
        let mut n_areas: Option<usize> = None;
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let row = lineno + 1;
            if line.is_empty() {
                stats.blank_lines += 1;
                continue;
            }
            if line.starts_with('#') {
                stats.comment_lines += 1;
                continue;
            }
            if let Some(rest) = line.strip_prefix("area_count") {
                let rest = rest.trim_start();
                let Some(value) = rest.strip_prefix('=') else {
                    return Err(Error::Validation(format!(
                        "edge list line {row}: expected `area_count=N`, got `{line}`"
                    )));
                };
                if n_areas.is_some() {
                    return Err(Error::Validation(format!(
                        "edge list line {row}: duplicate area_count header"
                    )));
                }
                let n: usize = value.trim().parse().map_err(|_| {
                    Error::Validation(format!(
                        "edge list line {row}: area_count is not a non-negative integer: `{}`",
                        value.trim()
                    ))
                })?;
                n_areas = Some(n);
                continue;
            }
            let Some((si, sj)) = line.split_once(',') else {
                return Err(Error::Validation(format!(
                    "edge list line {row}: expected `i,j`, got `{line}`"
                )));
            };
            let parse = |s: &str| -> Result<usize> {
                s.trim().parse().map_err(|_| {
                    Error::Validation(format!(
                        "edge list line {row}: node id is not a non-negative integer: `{}`",
                        s.trim()
                    ))
                })
            };
            if n_areas.is_none() {
                return Err(Error::Validation(format!(
                    "edge list line {row}: edge appears before the area_count header"
                )));
            }
            edges.push((parse(si)?, parse(sj)?));
            stats.edge_lines += 1;
        }
        let Some(n) = n_areas else {
            return Err(Error::Validation(
                "edge list has no `area_count=N` header".into(),
            ));
        };
        let graph = AreaGraph::new(n, &edges)?;
        Ok((graph, stats))
    }

    /// Serialize to the edge-list text format (round-trips through
    /// [`parse_edge_list`](Self::parse_edge_list)).
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("area_count={}\n", self.n_areas));
        for &(a, b) in &self.edges {
            out.push_str(&format!("{a},{b}\n"));
        }
        out
    }
}

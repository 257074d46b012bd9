//! Sparse undirected attributed graph in CSR form, symmetric normalization,
//! and graph-level statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Immutable undirected attributed graph.
///
/// Adjacency is CSR: `offsets` has length `n + 1` and `neighbors[offsets[i]..
/// offsets[i+1]]` is the sorted, duplicate-free neighbor list of node `i`.
/// No self-loops. Features are dense row-major `n x d` in f64; labels are in
/// `[0, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub x: Vec<f64>,
    pub d: usize,
    pub y: Vec<usize>,
    pub c: usize,
}

impl Graph {
    /// Build a graph from an edge list. Edges are symmetrized, deduplicated,
    /// and self-loops are stripped.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        x: Vec<f64>,
        d: usize,
        y: Vec<usize>,
        c: usize,
    ) -> Result<Graph> {
        if x.len() != n * d {
            return Err(Error::Data(format!(
                "feature matrix has {} values, expected {}x{}",
                x.len(),
                n,
                d
            )));
        }
        if y.len() != n {
            return Err(Error::Data(format!("{} labels for {} nodes", y.len(), n)));
        }
        for (i, &label) in y.iter().enumerate() {
            if label >= c {
                return Err(Error::Data(format!(
                    "label {} of node {} out of range [0, {})",
                    label, i, c
                )));
            }
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value {}", v)));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Data(format!(
                    "edge ({}, {}) references node >= n = {}",
                    a, b, n
                )));
            }
            if a == b {
                continue;
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Ok(Graph {
            n,
            offsets,
            neighbors,
            x,
            d,
            y,
            c,
        })
    }

    pub fn neighbors_of(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn feature_row(&self, v: usize) -> &[f64] {
        &self.x[v * self.d..(v + 1) * self.d]
    }

    /// Edge list with one entry per undirected edge (src < dst).
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for v in 0..self.n {
            for &u in self.neighbors_of(v) {
                if v < u {
                    out.push((v, u));
                }
            }
        }
        out
    }

    /// FNV-1a over the full graph content (structure, feature bits, labels).
    /// Used to tie derived artifacts back to their source graph.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.n as u64);
        h.write_u64(self.d as u64);
        h.write_u64(self.c as u64);
        for &o in &self.offsets {
            h.write_u64(o as u64);
        }
        for &v in &self.neighbors {
            h.write_u64(v as u64);
        }
        for &v in &self.x {
            h.write_u64(v.to_bits());
        }
        for &v in &self.y {
            h.write_u64(v as u64);
        }
        h.finish()
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Fnv1a {
        Fnv1a(0xcbf29ce484222325)
    }
    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Symmetrically normalized adjacency D^{-1/2} A D^{-1/2}, same CSR layout
/// as the source graph with one weight per directed edge entry.
#[derive(Debug, Clone)]
pub struct NormAdj {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub values: Vec<f64>,
    pub degrees: Vec<usize>,
}

/// Entry (i, j) of the normalized adjacency is 1/sqrt(deg(i) deg(j)).
/// Isolated nodes produce all-zero rows (they also appear in no column).
pub fn normalize_adjacency(g: &Graph) -> NormAdj {
    let degrees: Vec<usize> = (0..g.n).map(|v| g.degree(v)).collect();
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut values = Vec::with_capacity(g.neighbors.len());
    for v in 0..g.n {
        for &u in g.neighbors_of(v) {
            values.push(inv_sqrt[v] * inv_sqrt[u]);
        }
    }
    NormAdj {
        n: g.n,
        offsets: g.offsets.clone(),
        neighbors: g.neighbors.clone(),
        values,
        degrees,
    }
}

impl NormAdj {
    /// result[i] = sum over neighbors j of value(i,j) * m[j], computed row by
    /// row. Parallel over rows; per-row accumulation follows neighbor order,
    /// so the output does not depend on thread count.
    pub fn matvec_rows(&self, m: &[f64], cols: usize) -> Result<Vec<f64>> {
        if m.len() != self.n * cols {
            return Err(Error::Shape(format!(
                "matrix has {} values, expected {}x{}",
                m.len(),
                self.n,
                cols
            )));
        }
        let mut out = vec![0.0; self.n * cols];
        out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            for (idx, &j) in self.neighbors[self.offsets[i]..self.offsets[i + 1]]
                .iter()
                .enumerate()
            {
                let w = self.values[self.offsets[i] + idx];
                let src = &m[j * cols..(j + 1) * cols];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        });
        Ok(out)
    }
}

/// Edge homophily ratio: mean over nodes of the fraction of neighbors
/// sharing the node's label. Zero-degree nodes are excluded from the mean.
pub fn homophily_ratio(g: &Graph) -> Result<f64> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for v in 0..g.n {
        let nbrs = g.neighbors_of(v);
        if nbrs.is_empty() {
            continue;
        }
        let same = nbrs.iter().filter(|&&u| g.y[u] == g.y[v]).count();
        sum += same as f64 / nbrs.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data("graph has no edges".into()));
    }
    Ok(sum / counted as f64)
}

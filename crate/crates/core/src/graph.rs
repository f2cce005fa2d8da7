//! Symmetric degree-normalized adjacency of the user-item bipartite graph.
//!
//! Users occupy node indices `0..num_users`, items `num_users..n`. The matrix is stored
//! in CSR form with both directions of every edge, so `Â·X` and `Âᵀ·X` are the same
//! row-major product.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

/// Rows per rayon task; each output row is an independent reduction so results do not
/// depend on how rows are chunked.
const ROW_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Builds `D^{-1/2} A D^{-1/2}` from the training interactions.
    pub fn build(train: &InteractionDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let nu = train.num_users();
        let ni = train.num_items();
        let n = nu + ni;
        let item_deg = train.item_degrees();

        let mut counts = vec![0usize; n + 1];
        for &(u, i) in train.edges() {
            counts[u + 1] += 1;
            counts[nu + i + 1] += 1;
        }
        for r in 0..n {
            counts[r + 1] += counts[r];
        }
        let offsets = counts;
        let nnz = offsets[n];
        let mut cols = vec![0usize; nnz];
        let mut weights = vec![0f64; nnz];
        let mut cursor = offsets.clone();

        // Edges are sorted by (user, item), so user rows fill in ascending item order
        // and item rows fill in ascending user order.
        for &(u, i) in train.edges() {
            let w = 1.0 / ((train.user_degree(u) * item_deg[i]) as f64).sqrt();
            let item_node = nu + i;
            cols[cursor[u]] = item_node;
            weights[cursor[u]] = w;
            cursor[u] += 1;
            cols[cursor[item_node]] = u;
            weights[cursor[item_node]] = w;
            cursor[item_node] += 1;
        }

        Ok(Self {
            num_users: nu,
            num_items: ni,
            offsets,
            cols,
            weights,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Non-zero `(column, weight)` pairs of one row, in ascending column order.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// Weight of entry `(r, c)`, zero when absent.
    pub fn weight(&self, r: usize, c: usize) -> f64 {
        let span = self.offsets[r]..self.offsets[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(pos) => self.weights[span.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Returns `Â·X`.
    pub fn multiply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.num_nodes(), x.ncols()));
        self.multiply_into(x, &mut out)?;
        Ok(out)
    }

    /// Writes `Â·X` into `out`, overwriting it.
    pub fn multiply_into(&self, x: ArrayView2<'_, f64>, out: &mut Array2<f64>) -> Result<()> {
        let n = self.num_nodes();
        if x.nrows() != n {
            return Err(Error::Shape(format!(
                "adjacency has {n} rows, input has {}",
                x.nrows()
            )));
        }
        if out.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "output {:?} does not match input {:?}",
                out.dim(),
                x.dim()
            )));
        }
        let d = x.ncols();
        if d == 0 {
            return Ok(());
        }
        let x = x.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let out_slice = out
            .as_slice_mut()
            .ok_or_else(|| Error::Shape("output must be contiguous".into()))?;

        out_slice
            .par_chunks_mut(ROW_CHUNK * d)
            .enumerate()
            .for_each(|(chunk, rows)| {
                let first = chunk * ROW_CHUNK;
                for (k, dst) in rows.chunks_mut(d).enumerate() {
                    let r = first + k;
                    dst.fill(0.0);
                    for p in self.offsets[r]..self.offsets[r + 1] {
                        let w = self.weights[p];
                        let src = &x[self.cols[p] * d..(self.cols[p] + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
            });
        Ok(())
    }

    /// Dense copy, for tests and small-graph diagnostics.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut dense = Array2::zeros((n, n));
        for (r, mut row) in dense.axis_iter_mut(Axis(0)).enumerate() {
            for (c, w) in self.row(r) {
                row[c] = w;
            }
        }
        dense
    }
}

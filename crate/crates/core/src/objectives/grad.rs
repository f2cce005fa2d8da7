use ndarray::Array2;

/// Sparse row-indexed gradient accumulator over the embedding table.
///
/// Rows are stored in first-touch order; untouched rows are absent and cost one index
/// slot each.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    dim: usize,
    slot_of: Vec<u32>,
    rows: Vec<usize>,
    values: Vec<f64>,
}

const ABSENT: u32 = u32::MAX;

impl GradBuffer {
    pub fn new(num_rows: usize, dim: usize) -> Self {
        Self {
            dim,
            slot_of: vec![ABSENT; num_rows],
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.slot_of.len()
    }

    /// Number of touched rows.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, row: usize) -> bool {
        self.slot_of[row] != ABSENT
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        match self.slot_of[row] {
            ABSENT => None,
            slot => {
                let s = slot as usize * self.dim;
                Some(&self.values[s..s + self.dim])
            }
        }
    }

    /// Mutable access to `row`, inserting a zero row on first touch.
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let slot = match self.slot_of[row] {
            ABSENT => {
                let slot = self.rows.len();
                self.slot_of[row] = slot as u32;
                self.rows.push(row);
                self.values.resize(self.values.len() + self.dim, 0.0);
                slot
            }
            slot => slot as usize,
        };
        &mut self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    /// `self[row] += scale * values`.
    pub fn add_row(&mut self, row: usize, values: &[f64], scale: f64) {
        debug_assert_eq!(values.len(), self.dim);
        for (g, v) in self.row_mut(row).iter_mut().zip(values) {
            *g += scale * v;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        assert_eq!(self.dim, other.dim, "gradient dims differ");
        for (row, values) in other.iter() {
            self.add_row(row, values, scale);
        }
    }

    /// Touched rows with their values, in first-touch order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.rows
            .iter()
            .zip(self.values.chunks_exact(self.dim.max(1)))
            .map(|(&r, v)| (r, v))
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Keeps every row of `dense` that has a non-zero entry.
    pub fn from_dense(dense: &Array2<f64>) -> Self {
        let (n, d) = dense.dim();
        let mut buf = GradBuffer::new(n, d);
        for (r, row) in dense.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0) {
                buf.row_mut(r)
                    .iter_mut()
                    .zip(row.iter())
                    .for_each(|(g, &v)| *g = v);
            }
        }
        buf
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.num_rows(), self.dim));
        for (r, values) in self.iter() {
            dense
                .row_mut(r)
                .iter_mut()
                .zip(values)
                .for_each(|(o, &v)| *o = v);
        }
        dense
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

//! Triangular scale matrices for location-scale families.
//!
//! A [`ScaleMatrix`] owns a flat vector of stored entries plus a [`Structure`]
//! that fixes which `(row, col)` positions those entries occupy. Every stored
//! row is made of at most two contiguous column runs, which is what all the
//! kernels below iterate over, so matvec and gradient pullback cost is linear
//! in the number of stored entries.
//!
//! Packed lower-triangular blocks are row-major: entry `(i, j)` with `j <= i`
//! lives at `i * (i + 1) / 2 + j`. The bordered layout stores the global block
//! first, then for every local block `n` its `d_y x d_z` border (row-major)
//! immediately followed by its packed `d_y x d_y` triangle.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

#[inline]
fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Dimensions of a two-level hierarchical variable ordering `[z; y_1; ...; y_N]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockLayout {
    d_z: usize,
    d_y: usize,
    n_blocks: usize,
}

impl BlockLayout {
    pub fn new(d_z: usize, d_y: usize, n_blocks: usize) -> Result<Self> {
        if d_y == 0 {
            return Err(Error::invalid(
                "local block dimension d_y must be at least 1",
            ));
        }
        if n_blocks == 0 {
            return Err(Error::invalid("number of local blocks must be at least 1"));
        }
        Ok(Self { d_z, d_y, n_blocks })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn dim(&self) -> usize {
        self.d_z + self.n_blocks * self.d_y
    }

    /// First coordinate of local block `n`.
    pub fn local_start(&self, n: usize) -> usize {
        self.d_z + n * self.d_y
    }

    /// Coordinates used by a component touching the global block and local block `n`.
    pub fn component_indices(&self, n: usize) -> Vec<usize> {
        let start = self.local_start(n);
        (0..self.d_z).chain(start..start + self.d_y).collect()
    }

    fn global_len(&self) -> usize {
        tri(self.d_z)
    }

    fn block_stride(&self) -> usize {
        self.d_y * self.d_z + tri(self.d_y)
    }

    fn block_offset(&self, n: usize) -> usize {
        self.global_len() + n * self.block_stride()
    }
}

/// Which positions of the lower triangle a [`ScaleMatrix`] stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Structure {
    Diagonal { dim: usize },
    DenseLowerTriangular { dim: usize },
    BorderedBlockDiagonal(BlockLayout),
}

/// A run of consecutive stored columns within one row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub col: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RowSegments {
    first: Segment,
    second: Option<Segment>,
}

impl RowSegments {
    pub fn iter(&self) -> impl Iterator<Item = Segment> {
        std::iter::once(self.first).chain(self.second)
    }
}

impl Structure {
    pub fn dim(&self) -> usize {
        match *self {
            Structure::Diagonal { dim } | Structure::DenseLowerTriangular { dim } => dim,
            Structure::BorderedBlockDiagonal(layout) => layout.dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Structure::Diagonal { dim } => dim,
            Structure::DenseLowerTriangular { dim } => tri(dim),
            Structure::BorderedBlockDiagonal(l) => l.global_len() + l.n_blocks * l.block_stride(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Structure::Diagonal { .. } => "diagonal",
            Structure::DenseLowerTriangular { .. } => "dense_lower",
            Structure::BorderedBlockDiagonal(_) => "bordered",
        }
    }

    /// Stored column runs of row `i`, left to right. Panics if `i >= dim`.
    pub fn row_segments(&self, i: usize) -> RowSegments {
        assert!(i < self.dim(), "row {i} out of range");
        match *self {
            Structure::Diagonal { .. } => RowSegments {
                first: Segment {
                    col: i,
                    offset: i,
                    len: 1,
                },
                second: None,
            },
            Structure::DenseLowerTriangular { .. } => RowSegments {
                first: Segment {
                    col: 0,
                    offset: tri(i),
                    len: i + 1,
                },
                second: None,
            },
            Structure::BorderedBlockDiagonal(l) => {
                if i < l.d_z {
                    return RowSegments {
                        first: Segment {
                            col: 0,
                            offset: tri(i),
                            len: i + 1,
                        },
                        second: None,
                    };
                }
                let n = (i - l.d_z) / l.d_y;
                let r = (i - l.d_z) % l.d_y;
                let base = l.block_offset(n);
                let local = Segment {
                    col: l.local_start(n),
                    offset: base + l.d_y * l.d_z + tri(r),
                    len: r + 1,
                };
                if l.d_z == 0 {
                    RowSegments {
                        first: local,
                        second: None,
                    }
                } else {
                    RowSegments {
                        first: Segment {
                            col: 0,
                            offset: base + r * l.d_z,
                            len: l.d_z,
                        },
                        second: Some(local),
                    }
                }
            }
        }
    }

    /// Storage offset of the diagonal entry `(i, i)`.
    pub fn diagonal_offset(&self, i: usize) -> usize {
        let segs = self.row_segments(i);
        let last = segs.second.unwrap_or(segs.first);
        last.offset + last.len - 1
    }

    /// Storage offset of `(i, j)`, or `None` when the position is structurally zero.
    pub fn stored_offset(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.dim() || j >= self.dim() {
            return None;
        }
        self.row_segments(i)
            .iter()
            .find(|s| j >= s.col && j < s.col + s.len)
            .map(|s| s.offset + (j - s.col))
    }

    /// Sorted columns with at least one stored entry among `rows`.
    pub fn columns_touched(&self, rows: &[usize]) -> Vec<usize> {
        let mut mark = vec![false; self.dim()];
        for &i in rows {
            for s in self.row_segments(i).iter() {
                mark[s.col..s.col + s.len]
                    .iter_mut()
                    .for_each(|m| *m = true);
            }
        }
        mark.iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect()
    }
}

/// Coordinate-major block of `width` vectors of length `dim`: entry `(i, s)`
/// is coordinate `i` of sample `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    width: usize,
    data: Vec<f64>,
}

impl SampleBatch {
    pub fn zeros(dim: usize, width: usize) -> Self {
        Self {
            dim,
            width,
            data: vec![0.0; dim * width],
        }
    }

    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let width = samples.len();
        let dim = samples.first().map_or(0, Vec::len);
        let mut out = Self::zeros(dim, width);
        for (s, u) in samples.iter().enumerate() {
            check_len("sample", u.len(), dim)?;
            for (i, &x) in u.iter().enumerate() {
                out.data[i * width + s] = x;
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    #[inline]
    pub fn get(&self, i: usize, s: usize) -> f64 {
        self.data[i * self.width + s]
    }

    #[inline]
    pub fn set(&mut self, i: usize, s: usize, v: f64) {
        self.data[i * self.width + s] = v;
    }

    pub fn sample(&self, s: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, s)).collect()
    }
}

/// Lower-triangular scale factor `C` with one of three sparsity structures.
///
/// Entries are unconstrained so the same type doubles as a gradient
/// accumulator; membership in the positive-diagonal domain is checked where it
/// matters ([`ScaleMatrix::log_det_diag`], [`ScaleMatrix::is_feasible`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMatrix {
    structure: Structure,
    values: Vec<f64>,
}

impl ScaleMatrix {
    pub fn zeros(structure: Structure) -> Self {
        Self {
            structure,
            values: vec![0.0; structure.param_count()],
        }
    }

    pub fn identity(structure: Structure) -> Self {
        Self::scaled_identity(structure, 1.0)
    }

    pub fn scaled_identity(structure: Structure, diag: f64) -> Self {
        let mut c = Self::zeros(structure);
        for i in 0..structure.dim() {
            c.values[structure.diagonal_offset(i)] = diag;
        }
        c
    }

    pub fn from_values(structure: Structure, values: Vec<f64>) -> Result<Self> {
        check_len("scale entries", values.len(), structure.param_count())?;
        Ok(Self { structure, values })
    }

    pub fn diagonal(diag: Vec<f64>) -> Self {
        Self {
            structure: Structure::Diagonal { dim: diag.len() },
            values: diag,
        }
    }

    /// Builds a dense lower-triangular factor from a square matrix, ignoring
    /// its strict upper triangle.
    pub fn dense_from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid("scale matrix must be square"));
        }
        let dim = m.nrows();
        let mut values = Vec::with_capacity(tri(dim));
        for i in 0..dim {
            for j in 0..=i {
                values.push(m[(i, j)]);
            }
        }
        Ok(Self {
            structure: Structure::DenseLowerTriangular { dim },
            values,
        })
    }

    /// Projects a dense matrix onto `structure`, keeping stored positions only.
    pub fn project_dense(structure: Structure, m: &DMatrix<f64>) -> Result<Self> {
        let dim = structure.dim();
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::invalid(format!(
                "matrix is {}x{}, structure needs {dim}x{dim}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut c = Self::zeros(structure);
        for i in 0..dim {
            for s in structure.row_segments(i).iter() {
                for k in 0..s.len {
                    c.values[s.offset + k] = m[(i, s.col + k)];
                }
            }
        }
        Ok(c)
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.structure
            .stored_offset(i, j)
            .map_or(0.0, |k| self.values[k])
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.values[self.structure.diagonal_offset(i)]
    }

    pub fn diag_mut(&mut self, i: usize) -> &mut f64 {
        let k = self.structure.diagonal_offset(i);
        &mut self.values[k]
    }

    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.diag(i)).collect()
    }

    pub fn is_feasible(&self) -> bool {
        (0..self.dim()).all(|i| self.diag(i) > 0.0)
    }

    fn check_same_shape(&self, other: &ScaleMatrix) -> Result<()> {
        if self.structure != other.structure {
            return Err(Error::invalid(format!(
                "scale structures differ: {:?} vs {:?}",
                self.structure, other.structure
            )));
        }
        Ok(())
    }

    /// Returns `C u`.
    pub fn matvec(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.matvec_into(u, &mut out)?;
        Ok(out)
    }

    pub fn matvec_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_len("matvec input", u.len(), d)?;
        check_len("matvec output", out.len(), d)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self
                .structure
                .row_segments(i)
                .iter()
                .map(|s| {
                    self.values[s.offset..s.offset + s.len]
                        .iter()
                        .zip(&u[s.col..s.col + s.len])
                        .map(|(c, x)| c * x)
                        .sum::<f64>()
                })
                .sum();
        }
        Ok(())
    }

    /// Applies `C` to every sample of a batch at once.
    pub fn matmul_batch(&self, u: &SampleBatch) -> Result<SampleBatch> {
        let d = self.dim();
        check_len("batch dimension", u.dim(), d)?;
        let mut out = SampleBatch::zeros(d, u.width());
        match u.width() {
            1 => self.matmul_fixed::<1>(u, &mut out),
            4 => self.matmul_fixed::<4>(u, &mut out),
            8 => self.matmul_fixed::<8>(u, &mut out),
            16 => self.matmul_fixed::<16>(u, &mut out),
            _ => self.matmul_any(u, &mut out),
        }
        Ok(out)
    }

    fn matmul_fixed<const W: usize>(&self, u: &SampleBatch, out: &mut SampleBatch) {
        for i in 0..self.dim() {
            let mut acc = [0.0f64; W];
            for s in self.structure.row_segments(i).iter() {
                let vals = &self.values[s.offset..s.offset + s.len];
                let src = &u.data[s.col * W..(s.col + s.len) * W];
                for (c, x) in vals.iter().zip(src.chunks_exact(W)) {
                    for l in 0..W {
                        acc[l] += c * x[l];
                    }
                }
            }
            out.row_mut(i).copy_from_slice(&acc);
        }
    }

    fn matmul_any(&self, u: &SampleBatch, out: &mut SampleBatch) {
        for i in 0..self.dim() {
            let acc = out.row_mut(i);
            for s in self.structure.row_segments(i).iter() {
                for k in 0..s.len {
                    let c = self.values[s.offset + k];
                    for (a, x) in acc.iter_mut().zip(u.row(s.col + k)) {
                        *a += c * x;
                    }
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for s in self.structure.row_segments(i).iter() {
                for k in 0..s.len {
                    m[(i, s.col + k)] = self.values[s.offset + k];
                }
            }
        }
        m
    }

    /// `sum_i log C_ii`; fails if any diagonal entry is not strictly positive.
    pub fn log_det_diag(&self) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let c = self.diag(i);
            if !(c > 0.0) {
                return Err(Error::DomainViolation(format!(
                    "diagonal entry {i} is {c}, must be positive"
                )));
            }
            acc += c.ln();
        }
        Ok(acc)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Squared Frobenius norm of the sub-matrix formed by `rows`.
    pub fn frobenius_norm_sq_rows(&self, rows: &[usize]) -> f64 {
        rows.iter()
            .flat_map(|&i| self.structure.row_segments(i).iter())
            .map(|s| {
                self.values[s.offset..s.offset + s.len]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Squared Frobenius norm restricted to the rows used by component `n`.
    pub fn frobenius_norm_sq_component(&self, desc: &SparsityDescriptor, n: usize) -> f64 {
        self.frobenius_norm_sq_rows(desc.rows(n))
    }

    /// Entropic proximal step: replaces each `C_ii` by
    /// `(C_ii + sqrt(C_ii^2 + 4 gamma)) / 2`, the positive root of
    /// `c' - c = gamma / c'`. Off-diagonal entries are left alone.
    pub fn prox_diagonal(&self, gamma: f64) -> Result<ScaleMatrix> {
        let mut out = self.clone();
        out.prox_diagonal_in_place(gamma)?;
        Ok(out)
    }

    pub fn prox_diagonal_in_place(&mut self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0) {
            return Err(Error::invalid(format!(
                "proximal stepsize must be positive, got {gamma}"
            )));
        }
        for i in 0..self.dim() {
            let c = self.diag_mut(i);
            *c = prox_scalar(*c, gamma);
        }
        Ok(())
    }

    /// `acc[i, j] += scale * g_i * u_j` for every stored position.
    pub fn outer_accumulate(&mut self, g: &[f64], u: &[f64], scale: f64) -> Result<()> {
        let d = self.dim();
        check_len("outer product left factor", g.len(), d)?;
        check_len("outer product right factor", u.len(), d)?;
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let gi = gi * scale;
            for s in self.structure.row_segments(i).iter() {
                for (v, x) in self.values[s.offset..s.offset + s.len]
                    .iter_mut()
                    .zip(&u[s.col..s.col + s.len])
                {
                    *v += gi * x;
                }
            }
        }
        Ok(())
    }

    /// Batched pullback: `acc[i, j] += scale * sum_s g[i, s] * u[j, s]`.
    pub fn outer_accumulate_batch(
        &mut self,
        g: &SampleBatch,
        u: &SampleBatch,
        scale: f64,
    ) -> Result<()> {
        let d = self.dim();
        check_len("batch dimension", g.dim(), d)?;
        check_len("batch dimension", u.dim(), d)?;
        if g.width() != u.width() {
            return Err(Error::invalid("batch widths differ"));
        }
        match u.width() {
            1 => self.outer_fixed::<1>(g, u, scale),
            4 => self.outer_fixed::<4>(g, u, scale),
            8 => self.outer_fixed::<8>(g, u, scale),
            16 => self.outer_fixed::<16>(g, u, scale),
            _ => self.outer_any(g, u, scale),
        }
        Ok(())
    }

    fn outer_fixed<const W: usize>(&mut self, g: &SampleBatch, u: &SampleBatch, scale: f64) {
        for i in 0..self.dim() {
            let mut gi = [0.0f64; W];
            for (a, b) in gi.iter_mut().zip(g.row(i)) {
                *a = b * scale;
            }
            for s in self.structure.row_segments(i).iter() {
                let vals = &mut self.values[s.offset..s.offset + s.len];
                let src = &u.data[s.col * W..(s.col + s.len) * W];
                for (v, x) in vals.iter_mut().zip(src.chunks_exact(W)) {
                    let mut dot = 0.0;
                    for l in 0..W {
                        dot += gi[l] * x[l];
                    }
                    *v += dot;
                }
            }
        }
    }

    fn outer_any(&mut self, g: &SampleBatch, u: &SampleBatch, scale: f64) {
        for i in 0..self.dim() {
            let gi = g.row(i);
            for s in self.structure.row_segments(i).iter() {
                for k in 0..s.len {
                    let dot: f64 = gi.iter().zip(u.row(s.col + k)).map(|(a, b)| a * b).sum();
                    self.values[s.offset + k] += scale * dot;
                }
            }
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ScaleMatrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Squared distance over stored entries; structures must match.
    pub fn distance_sq(&self, other: &ScaleMatrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Checkpoint row: tag, shape fields, then the packed entries.
    pub fn to_csv_row(&self) -> String {
        let mut s = String::from(self.structure.tag());
        match self.structure {
            Structure::Diagonal { dim } | Structure::DenseLowerTriangular { dim } => {
                let _ = write!(s, ",{dim}");
            }
            Structure::BorderedBlockDiagonal(l) => {
                let _ = write!(s, ",{},{},{}", l.d_z, l.d_y, l.n_blocks);
            }
        }
        for v in &self.values {
            let _ = write!(s, ",{v:?}");
        }
        s
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let mut fields = row.trim().split(',');
        let tag = fields.next().unwrap_or_default();
        let mut int = |name: &str| -> Result<usize> {
            fields
                .next()
                .ok_or_else(|| Error::invalid(format!("missing {name}")))?
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("bad {name}: {e}")))
        };
        let structure = match tag {
            "diagonal" => Structure::Diagonal { dim: int("dim")? },
            "dense_lower" => Structure::DenseLowerTriangular { dim: int("dim")? },
            "bordered" => {
                let (dz, dy, n) = (int("d_z")?, int("d_y")?, int("n_blocks")?);
                Structure::BorderedBlockDiagonal(BlockLayout::new(dz, dy, n)?)
            }
            other => return Err(Error::invalid(format!("unknown scale tag `{other}`"))),
        };
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad entry `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(structure, values)
    }
}

#[inline]
pub(crate) fn prox_scalar(c: f64, gamma: f64) -> f64 {
    // c + (sqrt(c^2 + 4g) - c) / 2, written to avoid cancellation for c < 0.
    if c >= 0.0 {
        0.5 * (c + (c * c + 4.0 * gamma).sqrt())
    } else {
        2.0 * gamma / ((c * c + 4.0 * gamma).sqrt() - c)
    }
}

/// Per-component row sets of `C` together with the columns those rows touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityDescriptor {
    dim: usize,
    rows: Vec<Vec<usize>>,
    columns: Vec<Vec<usize>>,
}

impl SparsityDescriptor {
    /// `component_rows[n]` is the sorted index set of coordinates used by `l_n`.
    pub fn new(structure: Structure, component_rows: &[Vec<usize>]) -> Result<Self> {
        let dim = structure.dim();
        for (n, rows) in component_rows.iter().enumerate() {
            if rows.iter().any(|&i| i >= dim) {
                return Err(Error::invalid(format!(
                    "component {n} uses a coordinate outside [0, {dim})"
                )));
            }
        }
        let columns = component_rows
            .iter()
            .map(|rows| structure.columns_touched(rows))
            .collect();
        Ok(Self {
            dim,
            rows: component_rows.to_vec(),
            columns,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self, n: usize) -> &[usize] {
        &self.rows[n]
    }

    /// Columns `j` with `delta_{n,j} = 1`.
    pub fn columns(&self, n: usize) -> &[usize] {
        &self.columns[n]
    }

    pub fn indicator_row(&self, n: usize) -> Vec<bool> {
        let mut row = vec![false; self.dim];
        for &j in &self.columns[n] {
            row[j] = true;
        }
        row
    }

    /// `max_n sum_j delta_{n,j}`.
    pub fn effective_dimensionality(&self) -> usize {
        self.columns.iter().map(Vec::len).max().unwrap_or(0)
    }
}

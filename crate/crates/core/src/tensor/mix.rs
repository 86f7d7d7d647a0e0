use crate::error::{Error, Result};

/// A sparse linear map over the columns (time steps or graph nodes) of a
/// `C × n` tensor: output column `j` is `Σ w · input[:, src]` over the
/// `(src, w)` pairs in `cols[j]`. Channels never mix.
///
/// Interpolation, pooling, row-normalized neighbor aggregation, proposal
/// alignment and column selection are all instances of this.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMix {
    in_cols: usize,
    cols: Vec<Vec<(usize, f64)>>,
}

impl ColumnMix {
    pub fn new(in_cols: usize, cols: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (j, col) in cols.iter().enumerate() {
            if let Some(&(src, _)) = col.iter().find(|(src, _)| *src >= in_cols) {
                return Err(Error::arg(
                    "column_mix",
                    format!("output column {j} reads source {src} >= {in_cols}"),
                ));
            }
        }
        Ok(Self { in_cols, cols })
    }

    pub fn in_cols(&self) -> usize {
        self.in_cols
    }

    pub fn out_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn cols(&self) -> &[Vec<(usize, f64)>] {
        &self.cols
    }

    /// Weights for reading a (fractional) column position by linear
    /// interpolation; positions are clamped to `[0, n-1]`.
    pub fn interp_weights(n: usize, pos: f64) -> Vec<(usize, f64)> {
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if lo + 1 >= n || frac == 0.0 {
            vec![(lo, 1.0)]
        } else {
            vec![(lo, 1.0 - frac), (lo + 1, frac)]
        }
    }

    /// Endpoint-aligned linear interpolation from `n_in` to `n_out` columns:
    /// output `j` samples input position `j·(n_in−1)/(n_out−1)`.
    pub fn linear_resize(n_in: usize, n_out: usize) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::arg(
                "linear_interp_resize",
                format!("lengths must be >= 1 (input {n_in}, target {n_out})"),
            ));
        }
        let cols = (0..n_out)
            .map(|j| {
                if n_out == 1 || n_in == 1 {
                    vec![(0, 1.0)]
                } else {
                    let pos = j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                    Self::interp_weights(n_in, pos)
                }
            })
            .collect();
        Self::new(n_in, cols)
    }

    /// Mean over all columns, producing a single column.
    pub fn mean_pool(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::arg("global_avg_pool", "empty time axis"));
        }
        let w = 1.0 / n as f64;
        Self::new(n, vec![(0..n).map(|i| (i, w)).collect()])
    }

    /// Picks the listed columns in order.
    pub fn select(n: usize, idx: &[usize]) -> Result<Self> {
        Self::new(n, idx.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    /// Applies the map to a row-major `rows × in_cols` buffer.
    pub fn apply(&self, rows: usize, data: &[f64]) -> Vec<f64> {
        let n_out = self.cols.len();
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let src = &data[r * self.in_cols..(r + 1) * self.in_cols];
            let dst = &mut out[r * n_out..(r + 1) * n_out];
            for (j, col) in self.cols.iter().enumerate() {
                dst[j] = col.iter().map(|&(s, w)| w * src[s]).sum();
            }
        }
        out
    }

    /// Transpose action, used by backward.
    pub fn apply_transpose(&self, rows: usize, grad: &[f64]) -> Vec<f64> {
        let n_out = self.cols.len();
        let mut out = vec![0.0; rows * self.in_cols];
        for r in 0..rows {
            let g = &grad[r * n_out..(r + 1) * n_out];
            let dst = &mut out[r * self.in_cols..(r + 1) * self.in_cols];
            for (j, col) in self.cols.iter().enumerate() {
                for &(s, w) in col {
                    dst[s] += w * g[j];
                }
            }
        }
        out
    }
}

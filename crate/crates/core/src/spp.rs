//! Spatial pyramid pooling.
//!
//! A pyramid level `n` splits an `h x w` map into an `n x n` grid of max-pooling
//! regions whose size adapts to the map, so the pooled output has `n²` values
//! per channel whatever the input size. Unit `(j, i)` (0-based) covers rows
//! `[floor(j·h/n), ceil((j+1)·h/n))` and the analogous columns. Neighbouring
//! regions may overlap by one row or column when `n` does not divide the size.
//!
//! Output layout per sample is channel-major: for each channel, the levels in
//! the order they are listed, each level row-major over its grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PyramidSpec {
    levels: Vec<usize>,
}

impl PyramidSpec {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::Config(format!("pyramid levels must be non-empty and >= 1, got {levels:?}")));
        }
        Ok(PyramidSpec { levels })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// `Σ n²` over the levels; 21 for `[4, 2, 1]`.
    pub fn units_per_channel(&self) -> usize {
        self.levels.iter().map(|n| n * n).sum()
    }

    pub fn output_len(&self, channels: usize) -> usize {
        channels * self.units_per_channel()
    }

    /// All regions of all levels in output order for an `h x w` map.
    pub fn regions(&self, h: usize, w: usize) -> Vec<PoolRegion> {
        self.levels.iter().flat_map(|&n| spp_regions(h, w, n)).collect()
    }
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec { levels: vec![4, 2, 1] }
    }
}

impl fmt::Display for PyramidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("spp")?;
        for n in &self.levels {
            write!(f, "-{n}")?;
        }
        Ok(())
    }
}

impl FromStr for PyramidSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('-');
        if parts.next().map(str::to_ascii_lowercase).as_deref() != Some("spp") {
            return Err(Error::Config(format!("not a pyramid spec: '{s}'")));
        }
        let levels = parts
            .map(|p| p.parse::<usize>().map_err(|_| Error::Config(format!("bad pyramid level '{p}' in '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        PyramidSpec::new(levels)
    }
}

/// One pooling window of a pyramid level; ranges are half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolRegion {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl PoolRegion {
    pub fn len(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[inline]
fn bin_range(unit: usize, len: usize, n: usize) -> (usize, usize) {
    let start = unit * len / n;
    let end = ((unit + 1) * len).div_ceil(n);
    (start, end)
}

/// Regions of level `n` for an `h x w` map, row-major over the `n x n` grid.
pub fn spp_regions(h: usize, w: usize, n: usize) -> Vec<PoolRegion> {
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        let rows = bin_range(j, h, n);
        for i in 0..n {
            out.push(PoolRegion { level: n, row: j, col: i, rows, cols: bin_range(i, w, n) });
        }
    }
    out
}

/// Argmax bookkeeping from [`spp_forward`], consumed by [`spp_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SppIndices {
    input_dims: [usize; 4],
    /// Flat `y * w + x` position of each pooled value, in output order.
    argmax: Vec<u32>,
}

impl SppIndices {
    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }
}

/// Pools `maps` into a `[batch, C·Σn², 1, 1]` tensor.
///
/// Ties resolve to the first maximum in row-major scan order.
pub fn spp_forward<T: Scalar>(maps: &Tensor4<T>, spec: &PyramidSpec) -> Result<(Tensor4<T>, SppIndices)> {
    let [batch, channels, h, w] = maps.dims();
    if h == 0 || w == 0 {
        return Err(Error::shape(spec.to_string(), "empty input maps"));
    }
    let regions = spec.regions(h, w);
    let units = regions.len();
    let mut out = Vec::with_capacity(batch * channels * units);
    let mut argmax = Vec::with_capacity(batch * channels * units);
    for plane in maps.data().chunks_exact(h * w) {
        for r in &regions {
            let mut best = T::NEG_INFINITY;
            let mut best_at = r.rows.0 * w + r.cols.0;
            for y in r.rows.0..r.rows.1 {
                let row = &plane[y * w..(y + 1) * w];
                for (x, &v) in row.iter().enumerate().take(r.cols.1).skip(r.cols.0) {
                    if v > best {
                        best = v;
                        best_at = y * w + x;
                    }
                }
            }
            // NaN never compares greater; keep it visible downstream.
            out.push(if best == T::NEG_INFINITY { plane[best_at] } else { best });
            argmax.push(best_at as u32);
        }
    }
    let pooled = Tensor4::from_vec([batch, channels * units, 1, 1], out)?;
    Ok((pooled, SppIndices { input_dims: maps.dims(), argmax }))
}

/// Routes each upstream component to its argmax position; overlapping
/// regions accumulate.
pub fn spp_backward<T: Scalar>(
    upstream: &Tensor4<T>,
    indices: &SppIndices,
    input_dims: [usize; 4],
) -> Result<Tensor4<T>> {
    if indices.input_dims != input_dims {
        return Err(Error::State(format!(
            "stale SPP indices: recorded for {:?}, called with {:?}",
            indices.input_dims, input_dims
        )));
    }
    if upstream.len() != indices.argmax.len() || upstream.batch() != input_dims[0] {
        return Err(Error::State(format!(
            "SPP upstream gradient has {} values, indices cover {}",
            upstream.len(),
            indices.argmax.len()
        )));
    }
    let [_, _, h, w] = input_dims;
    let units = indices.argmax.len() / (input_dims[0] * input_dims[1]).max(1);
    let mut grad = Tensor4::zeros(input_dims);
    for ((plane, up), idx) in grad
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(upstream.data().chunks_exact(units))
        .zip(indices.argmax.chunks_exact(units))
    {
        for (&g, &at) in up.iter().zip(idx) {
            plane[at as usize] += g;
        }
    }
    Ok(grad)
}

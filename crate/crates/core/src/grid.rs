//! Evenly spaced inducing grids and block tilings of the whitened grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A D-dimensional grid of evenly spaced inducing locations, indexed in
/// C-order (last dimension fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct InducingGrid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl TryFrom<RawGrid> for InducingGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        InducingGrid::new(raw.dims, raw.spacing, raw.origin)
    }
}

impl InducingGrid {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one dimension".into()));
        }
        if spacing.len() != dims.len() || origin.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "dims, spacing and origin lengths differ: {}, {}, {}",
                dims.len(),
                spacing.len(),
                origin.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid("every dimension needs at least one point".into()));
        }
        if spacing.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid("spacings must be positive".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid with `dims[d]` points spanning `[lower[d], upper[d]]` inclusive.
    pub fn spanning(lower: &[f64], upper: &[f64], dims: &[usize]) -> Result<Self> {
        if lower.len() != dims.len() || upper.len() != dims.len() {
            return Err(Error::InvalidGrid("bounds and dims must have equal length".into()));
        }
        let spacing = lower
            .iter()
            .zip(upper)
            .zip(dims)
            .map(|((lo, hi), &m)| if m > 1 { (hi - lo) / (m - 1) as f64 } else { 1.0 })
            .collect();
        Self::new(dims.to_vec(), spacing, lower.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total number of points `M`.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Shape of the circulant embedding / whitened coordinate grid.
    pub fn embedded_dims(&self) -> Vec<usize> {
        self.dims.iter().map(|m| 2 * m).collect()
    }

    pub fn multi_index(&self, linear: usize) -> Vec<usize> {
        unravel(linear, &self.dims)
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        ravel(multi, &self.dims)
    }

    pub fn point(&self, linear: usize) -> Result<Vec<f64>> {
        if linear >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: linear,
                len: self.len(),
            });
        }
        let mut out = vec![0.0; self.ndim()];
        self.point_into(linear, &mut out);
        Ok(out)
    }

    pub(crate) fn point_into(&self, linear: usize, out: &mut [f64]) {
        let mut rem = linear;
        for d in (0..self.dims.len()).rev() {
            let i = rem % self.dims[d];
            rem /= self.dims[d];
            out[d] = self.origin[d] + i as f64 * self.spacing[d];
        }
    }
}

/// C-order multi-index of `linear` in a tensor of shape `dims`.
pub fn unravel(linear: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    let mut rem = linear;
    for d in (0..dims.len()).rev() {
        idx[d] = rem % dims[d];
        rem /= dims[d];
    }
    idx
}

/// C-order linear index of a multi-index in a tensor of shape `dims`.
pub fn ravel(multi: &[usize], dims: &[usize]) -> usize {
    multi.iter().zip(dims).fold(0, |acc, (i, m)| acc * m + i)
}

/// Assignment of whitened coordinates to axis-aligned tiles.
///
/// `perm[p]` is the C-order index of the `p`-th coordinate in block-major
/// order, so block `b` owns `perm[b * block_size .. (b + 1) * block_size]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    grid_dims: Vec<usize>,
    block_dims: Vec<usize>,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl BlockLayout {
    pub fn new(grid_dims: &[usize], block_dims: &[usize]) -> Result<Self> {
        block_permutation(grid_dims, block_dims)
    }

    pub fn grid_dims(&self) -> &[usize] {
        &self.grid_dims
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_dims.iter().product()
    }

    pub fn n_blocks(&self) -> usize {
        self.len() / self.block_size()
    }

    /// C-order indices belonging to block `b`.
    pub fn block_indices(&self, b: usize) -> &[usize] {
        let s = self.block_size();
        &self.perm[b * s..(b + 1) * s]
    }

    /// Reorders a C-order vector into block-major order.
    pub fn gather(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&i| v[i]).collect()
    }

    /// Inverse of [`gather`](Self::gather).
    pub fn scatter(&self, blocked: &[f64]) -> Vec<f64> {
        self.inv_perm.iter().map(|&p| blocked[p]).collect()
    }
}

/// Builds the permutation from C-order to block-major order for tiles of
/// shape `block_dims` over a grid of shape `grid_dims`.
pub fn block_permutation(grid_dims: &[usize], block_dims: &[usize]) -> Result<BlockLayout> {
    let non_dividing = || Error::NonDividingBlocks {
        grid: grid_dims.to_vec(),
        block: block_dims.to_vec(),
    };
    if grid_dims.len() != block_dims.len() || grid_dims.is_empty() {
        return Err(non_dividing());
    }
    if block_dims.iter().zip(grid_dims).any(|(&b, &g)| b == 0 || g % b != 0) {
        return Err(non_dividing());
    }
    let tiles: Vec<usize> = grid_dims.iter().zip(block_dims).map(|(g, b)| g / b).collect();
    let n_tiles: usize = tiles.iter().product();
    let bsize: usize = block_dims.iter().product();
    let total = n_tiles * bsize;

    let mut perm = Vec::with_capacity(total);
    let mut pos = vec![0; grid_dims.len()];
    for t in 0..n_tiles {
        let tile = unravel(t, &tiles);
        for w in 0..bsize {
            let within = unravel(w, block_dims);
            for d in 0..pos.len() {
                pos[d] = tile[d] * block_dims[d] + within[d];
            }
            perm.push(ravel(&pos, grid_dims));
        }
    }
    let mut inv_perm = vec![0; total];
    for (p, &i) in perm.iter().enumerate() {
        inv_perm[i] = p;
    }
    Ok(BlockLayout {
        grid_dims: grid_dims.to_vec(),
        block_dims: block_dims.to_vec(),
        perm,
        inv_perm,
    })
}

//! Dense fp64 grids and the block algebra the merge equations are written in.
//!
//! Grids are row-major and 0-indexed. A "2×2 block" `(j, k)` of a grid with
//! even dimensions covers rows `2j..2j+2` and columns `2k..2k+2`.

use std::ops::Deref;

use crate::error::{Result, SdcError};

/// Tolerance on the per-block sum of an [`UpsamplingMap`].
pub const BLOCK_SUM_TOL: f64 = 1e-9;

/// A plain row-major grid of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(SdcError::InvalidValue(format!("empty grid {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(SdcError::InvalidValue(format!(
                "grid {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SdcError::NonFinite(format!("grid value at index {i}")));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        assert!(h > 0 && w > 0, "empty grid");
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    /// Builds a grid from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != w) {
            return Err(SdcError::InvalidValue("ragged rows".into()));
        }
        Self::new(h, w, rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect())
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.w).map(<[f64]>::to_vec).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Applies `f` elementwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced non-finite value");
        Grid {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    pub(crate) fn from_parts_unchecked(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    fn require_even(&self) -> Result<()> {
        if !self.h.is_multiple_of(2) || !self.w.is_multiple_of(2) {
            return Err(SdcError::Indivisible {
                h: self.h,
                w: self.w,
                divisor: 2,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_same_dims(a: &Grid, b: &Grid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SdcError::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

pub(crate) fn check_double_dims(coarse: &Grid, fine: &Grid) -> Result<()> {
    let expected = (coarse.height() * 2, coarse.width() * 2);
    if fine.dims() != expected {
        return Err(SdcError::DimensionMismatch {
            expected,
            actual: fine.dims(),
        });
    }
    Ok(())
}

/// `g ⊗ 1₂ₓ₂`: every cell replicated into a 2×2 block.
pub fn kron_upsample2(g: &Grid) -> Grid {
    let (h, w) = g.dims();
    let mut out = Vec::with_capacity(4 * h * w);
    for r in 0..2 * h {
        let src = &g.data[(r / 2) * w..(r / 2 + 1) * w];
        for &v in src {
            out.push(v);
            out.push(v);
        }
    }
    Grid::from_parts_unchecked(2 * h, 2 * w, out)
}

/// Elementwise product of two equally sized grids.
pub fn hadamard(a: &Grid, b: &Grid) -> Result<Grid> {
    check_same_dims(a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Grid::from_parts_unchecked(a.h, a.w, data))
}

/// Sums each disjoint 2×2 block into one cell.
pub fn block_sum2(g: &Grid) -> Result<Grid> {
    g.require_even()?;
    let (h, w) = (g.h / 2, g.w / 2);
    let mut out = vec![0.0; h * w];
    for j in 0..h {
        for k in 0..w {
            let r0 = 2 * j * g.w + 2 * k;
            let r1 = r0 + g.w;
            out[j * w + k] = g.data[r0] + g.data[r0 + 1] + g.data[r1] + g.data[r1 + 1];
        }
    }
    Ok(Grid::from_parts_unchecked(h, w, out))
}

/// Flat indices of the four cells in 2×2 block `(j, k)` of a grid of width `w`,
/// in row-major order.
#[inline]
pub(crate) fn block_indices(w: usize, j: usize, k: usize) -> [usize; 4] {
    let r0 = 2 * j * w + 2 * k;
    [r0, r0 + 1, r0 + w, r0 + w + 1]
}

/// Softmax over each disjoint 2×2 block of logits, max-subtracted.
pub fn spatial_softmax2(logits: &Grid) -> Result<UpsamplingMap> {
    logits.require_even()?;
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(SdcError::NonFinite("upsampling logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    for j in 0..logits.h / 2 {
        for k in 0..logits.w / 2 {
            let idx = block_indices(logits.w, j, k);
            let m = idx.iter().map(|&i| logits.data[i]).fold(f64::NEG_INFINITY, f64::max);
            let e = idx.map(|i| (logits.data[i] - m).exp());
            let z: f64 = e.iter().sum();
            for (&i, ei) in idx.iter().zip(e) {
                out[i] = ei / z;
            }
        }
    }
    Ok(UpsamplingMap(Grid::from_parts_unchecked(logits.h, logits.w, out)))
}

/// Grid of object counts; every value finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct CountGrid(Grid);

impl CountGrid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from(Grid::new(h, w, data)?)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::try_from(Grid::from_rows(rows)?)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Grid::zeros(h, w))
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn kron_upsample2(&self) -> CountGrid {
        CountGrid(kron_upsample2(&self.0))
    }

    pub fn block_sum2(&self) -> Result<CountGrid> {
        block_sum2(&self.0).map(CountGrid)
    }

    /// Repeated [`block_sum2`] `times` times.
    pub fn block_sum_pow2(&self, times: usize) -> Result<CountGrid> {
        let mut g = self.clone();
        for _ in 0..times {
            g = g.block_sum2()?;
        }
        Ok(g)
    }
}

impl TryFrom<Grid> for CountGrid {
    type Error = SdcError;

    fn try_from(g: Grid) -> Result<Self> {
        if let Some(v) = g.data.iter().find(|&&v| v < 0.0) {
            return Err(SdcError::InvalidValue(format!("negative count {v}")));
        }
        Ok(Self(g))
    }
}

impl Deref for CountGrid {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Soft division weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DivisionMask(Grid);

impl DivisionMask {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from(Grid::new(h, w, data)?)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::try_from(Grid::from_rows(rows)?)
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(h, w, vec![value; h * w])
    }

    /// Logistic squashing of unconstrained logits.
    pub fn from_logits(logits: &Grid) -> Self {
        Self(logits.map(sigmoid))
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }
}

impl TryFrom<Grid> for DivisionMask {
    type Error = SdcError;

    fn try_from(g: Grid) -> Result<Self> {
        if let Some(v) = g.data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(SdcError::InvalidValue(format!("mask value {v} outside [0,1]")));
        }
        Ok(Self(g))
    }
}

impl Deref for DivisionMask {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Redistribution weights: values in `[0, 1]`, each 2×2 block sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplingMap(Grid);

impl UpsamplingMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from(Grid::new(h, w, data)?)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::try_from(Grid::from_rows(rows)?)
    }

    /// Every weight 0.25.
    pub fn uniform(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![0.25; h * w])
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    /// Largest deviation of any block sum from one.
    pub fn max_block_error(&self) -> f64 {
        block_sum2(&self.0)
            .map(|s| s.data.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max))
            .unwrap_or(f64::INFINITY)
    }

    pub(crate) fn check_normalized(g: &Grid, tol: f64) -> Result<()> {
        g.require_even()?;
        let sums = block_sum2(g)?;
        if let Some((i, s)) = sums
            .data
            .iter()
            .enumerate()
            .find(|(_, s)| (*s - 1.0).abs() > tol)
        {
            return Err(SdcError::InvalidValue(format!(
                "upsampling block {i} sums to {s}, expected 1"
            )));
        }
        Ok(())
    }
}

impl TryFrom<Grid> for UpsamplingMap {
    type Error = SdcError;

    fn try_from(g: Grid) -> Result<Self> {
        if let Some(v) = g.data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(SdcError::InvalidValue(format!("upsampling weight {v} outside [0,1]")));
        }
        Self::check_normalized(&g, BLOCK_SUM_TOL)?;
        Ok(Self(g))
    }
}

impl Deref for UpsamplingMap {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

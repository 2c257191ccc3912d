//! Ground truth from dot annotations: density maps, count pyramids, interval
//! classes, redistribution targets and division labels.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::grid::{block_indices, check_double_dims, kron_upsample2, CountGrid, Grid, UpsamplingMap};

/// Dot annotations in pixel coordinates; `x` is the column, `y` the row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    points: Vec<(f64, f64)>,
}

impl AnnotationSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(p) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(SdcError::NonFinite(format!("annotation {p:?}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        if let Some(p) = self
            .points
            .iter()
            .find(|(x, y)| *x < 0.0 || *y < 0.0 || *x >= w as f64 || *y >= h as f64)
        {
            return Err(SdcError::InvalidValue(format!(
                "annotation {p:?} outside {h}x{w} image"
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["x", "y"])?;
        for (x, y) in &self.points {
            wr.write_record([x.to_string(), y.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "y"] {
            return Err(SdcError::Format(format!("expected header x,y, got {headers:?}")));
        }
        let mut points = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| SdcError::Format(format!("bad annotation row {rec:?}")))
            };
            points.push((parse(0)?, parse(1)?));
        }
        Self::new(points)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Gaussian kernel choice for [`render_density`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityKernel {
    Fixed { sigma: f64 },
    /// σ = β × mean distance to the `k` nearest other annotations.
    GeometryAdaptive { beta: f64, k: usize },
}

impl Default for DensityKernel {
    fn default() -> Self {
        DensityKernel::GeometryAdaptive { beta: 0.3, k: 3 }
    }
}

/// Clamp range for geometry-adaptive σ, in pixels.
pub const ADAPTIVE_SIGMA_RANGE: (f64, f64) = (1.0, 32.0);

/// Kernel support radius in units of σ.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Per-pixel object density; non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(Grid);

impl DensityMap {
    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }
}

impl TryFrom<Grid> for DensityMap {
    type Error = SdcError;

    fn try_from(g: Grid) -> Result<Self> {
        if g.values().iter().any(|&v| v < 0.0) {
            return Err(SdcError::InvalidValue("negative density".into()));
        }
        Ok(Self(g))
    }
}

fn kernel_sigmas(ann: &AnnotationSet, kernel: DensityKernel) -> Result<Vec<f64>> {
    match kernel {
        DensityKernel::Fixed { sigma } => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(SdcError::InvalidValue(format!("sigma must be positive, got {sigma}")));
            }
            Ok(vec![sigma; ann.len()])
        }
        DensityKernel::GeometryAdaptive { beta, k } => {
            if !(beta > 0.0 && beta.is_finite()) || k == 0 {
                return Err(SdcError::InvalidValue(format!(
                    "adaptive kernel needs beta > 0 and k >= 1, got beta={beta}, k={k}"
                )));
            }
            let (lo, hi) = ADAPTIVE_SIGMA_RANGE;
            let pts = ann.points();
            Ok(pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    let mut d: Vec<f64> = pts
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &(u, v))| ((u - x).powi(2) + (v - y).powi(2)).sqrt())
                        .collect();
                    if d.is_empty() {
                        // isolated point: widest allowed kernel
                        return hi;
                    }
                    d.sort_by(f64::total_cmp);
                    let n = k.min(d.len());
                    let mean = d[..n].iter().sum::<f64>() / n as f64;
                    (beta * mean).clamp(lo, hi)
                })
                .collect())
        }
    }
}

/// Unit-sum 1-D Gaussian weights sampled at pixel centres within ±4σ of `c`.
/// Returns the first pixel index (possibly negative) and the weights.
fn gaussian_weights(c: f64, sigma: f64) -> (i64, Vec<f64>) {
    let radius = TRUNCATE_SIGMAS * sigma;
    let first = (c - radius - 0.5).ceil() as i64;
    let last = (c + radius - 0.5).floor() as i64;
    let mut w: Vec<f64> = (first..=last)
        .map(|i| {
            let d = i as f64 + 0.5 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    if z > 0.0 {
        w.iter_mut().for_each(|v| *v /= z);
    } else {
        // σ far below a pixel: all mass on the nearest pixel centre
        return (c.floor() as i64, vec![1.0]);
    }
    (first, w)
}

/// Renders each annotation as a unit-mass Gaussian truncated at 4σ; mass
/// falling outside the image is dropped.
pub fn render_density(ann: &AnnotationSet, h: usize, w: usize, kernel: DensityKernel) -> Result<DensityMap> {
    if h == 0 || w == 0 {
        return Err(SdcError::InvalidValue(format!("empty image {h}x{w}")));
    }
    ann.check_bounds(h, w)?;
    let sigmas = kernel_sigmas(ann, kernel)?;
    let mut data = vec![0.0; h * w];
    for (&(x, y), &sigma) in ann.points().iter().zip(&sigmas) {
        let (x0, wx) = gaussian_weights(x, sigma);
        let (y0, wy) = gaussian_weights(y, sigma);
        for (dy, &vy) in wy.iter().enumerate() {
            let row = y0 + dy as i64;
            if row < 0 || row >= h as i64 {
                continue;
            }
            let base = row as usize * w;
            for (dx, &vx) in wx.iter().enumerate() {
                let col = x0 + dx as i64;
                if col >= 0 && col < w as i64 {
                    data[base + col as usize] += vy * vx;
                }
            }
        }
    }
    DensityMap::try_from(Grid::new(h, w, data)?)
}

/// Integrates a density map over non-overlapping `patch × patch` squares.
pub fn patch_counts(d: &DensityMap, patch: usize) -> Result<CountGrid> {
    let g = d.as_grid();
    let (h, w) = g.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(SdcError::Indivisible { h, w, divisor: patch });
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = vec![0.0; ph * pw];
    for (r, row) in g.values().chunks(w).enumerate() {
        let orow = &mut out[(r / patch) * pw..(r / patch + 1) * pw];
        for (c, chunk) in row.chunks(patch).enumerate() {
            orow[c] += chunk.iter().sum::<f64>();
        }
    }
    CountGrid::new(ph, pw, out)
}

/// Count grids for patch sizes `base, base/2, …, base/2^levels`.
pub fn count_pyramid(d: &DensityMap, base_patch: usize, levels: usize) -> Result<Vec<CountGrid>> {
    if !base_patch.is_multiple_of(1 << levels) {
        return Err(SdcError::Precondition(format!(
            "patch {base_patch} cannot be halved {levels} times"
        )));
    }
    (0..=levels).map(|i| patch_counts(d, base_patch >> i)).collect()
}

/// Pads a grid with zeros at the bottom and right up to multiples of `m`.
pub fn zero_pad(g: &Grid, m: usize) -> Grid {
    assert!(m > 0);
    let (h, w) = g.dims();
    let (nh, nw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (nh, nw) == (h, w) {
        return g.clone();
    }
    let mut data = vec![0.0; nh * nw];
    for (r, row) in g.values().chunks(w).enumerate() {
        data[r * nw..r * nw + w].copy_from_slice(row);
    }
    Grid::from_parts_unchecked(nh, nw, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    /// Uniform 0.5-wide intervals up to `c_max`.
    OneLinear,
    /// As one-linear, with `(0, 0.5]` refined into ten 0.05-wide intervals.
    TwoLinear,
}

pub const COARSE_STEP: f64 = 0.5;
pub const FINE_INTERVALS: usize = 10;

/// Interval partition of `[0, ∞)`: class 0 is `{0}`, class `m` is
/// `(b[m-1], b[m]]` and the last class is `(c_max, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalPartition {
    c_max: f64,
    boundaries: Vec<f64>,
    scheme: PartitionScheme,
}

impl IntervalPartition {
    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    /// Total number of classes, including `{0}` and the overflow class.
    pub fn num_classes(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn overflow_class(&self) -> usize {
        self.boundaries.len()
    }

    /// Count value assigned to every class, indexed by class.
    pub fn class_values(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|m| self.class_to_count(m).expect("class in range"))
            .collect()
    }

    /// Width of an interior class; `None` for `{0}` and the overflow class.
    pub fn class_width(&self, m: usize) -> Option<f64> {
        (1..self.boundaries.len())
            .contains(&m)
            .then(|| self.boundaries[m] - self.boundaries[m - 1])
    }

    pub fn count_to_class(&self, c: f64) -> Result<usize> {
        if !c.is_finite() || c < 0.0 {
            return Err(SdcError::InvalidValue(format!("count must be finite and >= 0, got {c}")));
        }
        if c == 0.0 {
            return Ok(0);
        }
        // first boundary b[m] >= c
        let m = self.boundaries.partition_point(|&b| b < c);
        Ok(m.min(self.overflow_class()))
    }

    pub fn class_to_count(&self, m: usize) -> Result<f64> {
        let last = self.overflow_class();
        match m {
            0 => Ok(0.0),
            m if m < last => Ok(0.5 * (self.boundaries[m - 1] + self.boundaries[m])),
            m if m == last => Ok(self.c_max),
            _ => Err(SdcError::InvalidValue(format!(
                "class {m} out of range 0..={last}"
            ))),
        }
    }
}

fn is_half_multiple(c: f64) -> bool {
    let twice = c * 2.0;
    twice.fract() == 0.0 && twice.is_finite()
}

pub fn build_partition(c_max: f64, scheme: PartitionScheme) -> Result<IntervalPartition> {
    if !(c_max > 0.0) || !is_half_multiple(c_max) {
        return Err(SdcError::InvalidValue(format!(
            "c_max must be a positive multiple of 0.5, got {c_max}"
        )));
    }
    let steps = (c_max / COARSE_STEP) as usize;
    let mut boundaries = vec![0.0];
    let first_coarse = match scheme {
        PartitionScheme::OneLinear => 1,
        PartitionScheme::TwoLinear => {
            boundaries.extend((1..=FINE_INTERVALS).map(|i| i as f64 / (2 * FINE_INTERVALS) as f64));
            2
        }
    };
    boundaries.extend((first_coarse..=steps).map(|i| i as f64 * COARSE_STEP));
    Ok(IntervalPartition {
        c_max,
        boundaries,
        scheme,
    })
}

/// Nearest-rank quantile of `counts`, rounded up to a multiple of 0.5.
pub fn quantile_cmax(counts: &[f64], q: f64) -> Result<f64> {
    if counts.is_empty() {
        return Err(SdcError::Precondition("quantile of empty sequence".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(SdcError::InvalidValue(format!("quantile level {q} outside (0,1]")));
    }
    if counts.iter().any(|v| !v.is_finite()) {
        return Err(SdcError::NonFinite("patch count".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // q·n can land a hair above an integer in fp
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok((sorted[rank - 1] * 2.0).ceil() / 2.0)
}

/// `c_cur / (c_prev ⊗ 1₂ₓ₂)`, with uniform 0.25 wherever the parent count is
/// zero. Requires the pyramid to be consistent (child blocks sum to parents).
pub fn gt_upsampling_map(c_prev: &CountGrid, c_cur: &CountGrid) -> Result<UpsamplingMap> {
    check_double_dims(c_prev, c_cur)?;
    let denom = kron_upsample2(c_prev);
    let (w, pw) = (c_cur.width(), c_prev.width());
    let mut data = vec![0.0; c_cur.len()];
    for j in 0..c_prev.height() {
        for k in 0..pw {
            let parent = c_prev.get(j, k);
            let idx = block_indices(w, j, k);
            if parent == 0.0 {
                idx.iter().for_each(|&i| data[i] = 0.25);
            } else {
                idx.iter().for_each(|&i| data[i] = c_cur.values()[i] / denom.values()[i]);
            }
        }
    }
    let g = Grid::new(c_cur.height(), w, data)?;
    UpsamplingMap::try_from(g).map_err(|e| {
        SdcError::Precondition(format!("inconsistent count pyramid: {e}"))
    })
}

/// Boolean grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DivisionLabels {
    pub h: usize,
    pub w: usize,
    pub flags: Vec<bool>,
}

/// Cells whose ground-truth count strictly exceeds `c_max`.
pub fn division_labels(c_gt: &CountGrid, c_max: f64) -> DivisionLabels {
    DivisionLabels {
        h: c_gt.height(),
        w: c_gt.width(),
        flags: c_gt.values().iter().map(|&c| c > c_max).collect(),
    }
}

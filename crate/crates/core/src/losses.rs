//! Training objectives for the S-DC heads and their analytic gradients.
//!
//! Per-grid ℓ1 and cross-entropy terms are averaged over cells; cross-stage
//! terms are summed. The division loss and the consistency loss are sums over
//! parent cells. The ℓ1 subgradient at 0 is 0 and the block max in the
//! division loss routes its gradient to the first maximal cell.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::grid::{
    block_indices, check_double_dims, check_same_dims, sigmoid, spatial_softmax2, CountGrid, Grid,
    UpsamplingMap,
};
use crate::groundtruth::{gt_upsampling_map, IntervalPartition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Regression counter.
    Reg,
    /// Interval-classification counter.
    Cls,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Reg => "reg",
            Mode::Cls => "cls",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg" => Ok(Mode::Reg),
            "cls" => Ok(Mode::Cls),
            other => Err(SdcError::InvalidValue(format!("unknown mode {other:?}"))),
        }
    }
}

/// Per-cell class scores for an `h × w` grid with `k` classes; the scores of
/// one cell are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogits {
    h: usize,
    w: usize,
    k: usize,
    data: Vec<f64>,
}

impl ClassLogits {
    pub fn new(h: usize, w: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || k == 0 || data.len() != h * w * k {
            return Err(SdcError::InvalidValue(format!(
                "class logits {h}x{w}x{k} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SdcError::NonFinite("class logits".into()));
        }
        Ok(Self { h, w, k, data })
    }

    pub fn zeros(h: usize, w: usize, k: usize) -> Self {
        Self {
            h,
            w,
            k,
            data: vec![0.0; h * w * k],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Softmax over the classes of every cell.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for cell in self.data.chunks(self.k) {
            let m = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(cell.iter().map(|v| (v - m).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|p| *p /= z);
        }
        out
    }

    /// Probability-weighted class value of every cell.
    pub fn expected_counts(&self, class_values: &[f64]) -> Grid {
        assert_eq!(class_values.len(), self.k);
        let p = self.probabilities();
        let data = p
            .chunks(self.k)
            .map(|pc| pc.iter().zip(class_values).map(|(p, v)| p * v).sum())
            .collect();
        Grid::from_parts_unchecked(self.h, self.w, data)
    }

    /// Highest-scoring class per cell (first index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks(self.k)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean ℓ1 between predictions and ground truth, both truncated to `c_max`.
pub fn l_counter_reg(pred: &Grid, gt: &Grid, c_max: f64) -> Result<f64> {
    check_same_dims(pred, gt)?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| (p.min(c_max) - g.min(c_max)).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean per-cell cross-entropy.
pub fn l_counter_cls(logits: &ClassLogits, gt_class: &[usize]) -> Result<f64> {
    if gt_class.len() != logits.num_cells() {
        return Err(SdcError::DimensionMismatch {
            expected: (logits.num_cells(), 1),
            actual: (gt_class.len(), 1),
        });
    }
    let mut total = 0.0;
    for (i, &y) in gt_class.iter().enumerate() {
        let cell = logits.cell(i);
        if y >= cell.len() {
            return Err(SdcError::InvalidValue(format!("label {y} with {} classes", cell.len())));
        }
        let m = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + cell.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - cell[y];
    }
    Ok(total / gt_class.len() as f64)
}

/// Mean ℓ1 between the final division grid and its ground truth.
pub fn l_merge(div_n: &Grid, gt_n: &Grid) -> Result<f64> {
    check_same_dims(div_n, gt_n)?;
    Ok(mean_abs_diff(div_n.values(), gt_n.values()))
}

/// `Σᵢ Σ_{parent cells with gt > c_max} −ln(max of the child mask block)`.
/// `masks[i]` is `W_{i+1}` and `gt_counts[i]` is `C_i^gt`.
pub fn l_div<M: AsRef<Grid>>(masks: &[M], gt_counts: &[CountGrid], c_max: f64) -> Result<f64> {
    if gt_counts.len() < masks.len() {
        return Err(SdcError::Precondition(format!(
            "{} masks need {} ground-truth levels",
            masks.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for (w, gt) in masks.iter().zip(gt_counts) {
        let w = w.as_ref();
        check_double_dims(gt, w)?;
        for j in 0..gt.height() {
            for k in 0..gt.width() {
                if gt.get(j, k) > c_max {
                    let m = block_indices(w.width(), j, k)
                        .iter()
                        .map(|&i| w.values()[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    total -= m.ln();
                }
            }
        }
    }
    Ok(total)
}

/// `Σᵢ mean|Uᵢ − Uᵢ^gt|`.
pub fn l_up(u: &[UpsamplingMap], u_gt: &[UpsamplingMap]) -> Result<f64> {
    if u.len() != u_gt.len() {
        return Err(SdcError::Precondition(format!(
            "{} upsampling maps vs {} targets",
            u.len(),
            u_gt.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in u.iter().zip(u_gt) {
        check_same_dims(a, b)?;
        total += mean_abs_diff(a.values(), b.values());
    }
    Ok(total)
}

/// `Σᵢ Σ_{parent cells with gt ≤ c_max} |C_{i−1} − sum of the child block in Cᵢ|`.
/// Only defined for the regression counter.
pub fn l_eq<G: AsRef<Grid>>(mode: Mode, counts: &[G], gt_counts: &[CountGrid], c_max: f64) -> Result<f64> {
    if mode == Mode::Cls {
        return Err(SdcError::Precondition(
            "consistency loss is not defined for the classification counter".into(),
        ));
    }
    if gt_counts.len() + 1 < counts.len() {
        return Err(SdcError::Precondition("missing ground-truth levels".into()));
    }
    let mut total = 0.0;
    for (i, pair) in counts.windows(2).enumerate() {
        let (parent, child) = (pair[0].as_ref(), pair[1].as_ref());
        let gt = &gt_counts[i];
        check_same_dims(parent, gt)?;
        check_double_dims(parent, child)?;
        for j in 0..parent.height() {
            for k in 0..parent.width() {
                if gt.get(j, k) <= c_max {
                    let s: f64 = block_indices(child.width(), j, k).iter().map(|&c| child.values()[c]).sum();
                    total += (parent.get(j, k) - s).abs();
                }
            }
        }
    }
    Ok(total)
}

impl AsRef<Grid> for Grid {
    fn as_ref(&self) -> &Grid {
        self
    }
}

impl AsRef<Grid> for CountGrid {
    fn as_ref(&self) -> &Grid {
        self.as_grid()
    }
}

impl AsRef<Grid> for crate::grid::DivisionMask {
    fn as_ref(&self) -> &Grid {
        self.as_grid()
    }
}

impl AsRef<Grid> for UpsamplingMap {
    fn as_ref(&self) -> &Grid {
        self.as_grid()
    }
}

/// Individually computed loss terms; `None` marks a term not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_counter: Option<f64>,
    pub l_merge: Option<f64>,
    pub l_up: Option<f64>,
    pub l_div: Option<f64>,
    pub l_eq: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_counter: f64,
    pub l_merge: f64,
    pub l_up: f64,
    pub l_div: f64,
    /// Absent for the classification counter.
    pub l_eq: Option<f64>,
    pub total: f64,
}

/// Unweighted sum of the terms required by `mode`. The classification sum
/// never reads `l_eq`.
pub fn total_loss(mode: Mode, parts: &LossParts) -> Result<LossBreakdown> {
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| SdcError::Precondition(format!("missing loss component {name}")))
    };
    let l_counter = need(parts.l_counter, "l_counter")?;
    let l_merge = need(parts.l_merge, "l_merge")?;
    let l_up = need(parts.l_up, "l_up")?;
    let l_div = need(parts.l_div, "l_div")?;
    let l_eq = match mode {
        Mode::Reg => Some(need(parts.l_eq, "l_eq")?),
        Mode::Cls => None,
    };
    let total = l_counter + l_merge + l_up + l_div + l_eq.unwrap_or(0.0);
    Ok(LossBreakdown {
        l_counter,
        l_merge,
        l_up,
        l_div,
        l_eq,
        total,
    })
}

/// Raw counter outputs for stages `0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub enum CounterOutputs {
    /// Predicted counts (unconstrained reals).
    Reg(Vec<Grid>),
    /// Class scores.
    Cls(Vec<ClassLogits>),
}

impl CounterOutputs {
    pub fn mode(&self) -> Mode {
        match self {
            CounterOutputs::Reg(_) => Mode::Reg,
            CounterOutputs::Cls(_) => Mode::Cls,
        }
    }

    pub fn num_stages(&self) -> usize {
        match self {
            CounterOutputs::Reg(v) => v.len(),
            CounterOutputs::Cls(v) => v.len(),
        }
    }

    fn dims(&self, i: usize) -> (usize, usize) {
        match self {
            CounterOutputs::Reg(v) => v[i].dims(),
            CounterOutputs::Cls(v) => v[i].dims(),
        }
    }
}

/// Everything the heads emit for one image: counter outputs for stages
/// `0..=N`, mask and upsampling logits for stages `1..=N` (index `i-1`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub counter: CounterOutputs,
    pub mask_logits: Vec<Grid>,
    pub up_logits: Vec<Grid>,
}

impl HeadOutputs {
    pub fn num_divisions(&self) -> usize {
        self.counter.num_stages().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        let n = self.counter.num_stages();
        if n == 0 {
            return Err(SdcError::Precondition("no counter outputs".into()));
        }
        if self.mask_logits.len() != n - 1 || self.up_logits.len() != n - 1 {
            return Err(SdcError::Precondition(format!(
                "{} counter stages need {} mask and upsampling logit grids",
                n,
                n - 1
            )));
        }
        for i in 1..n {
            let (ph, pw) = self.counter.dims(i - 1);
            let expected = (2 * ph, 2 * pw);
            for actual in [self.counter.dims(i), self.mask_logits[i - 1].dims(), self.up_logits[i - 1].dims()] {
                if actual != expected {
                    return Err(SdcError::DimensionMismatch { expected, actual });
                }
            }
        }
        Ok(())
    }
}

/// Supervision for one image: counts for levels `0..=N`, redistribution
/// targets for levels `1..=N` and interval classes per level.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub counts: Vec<CountGrid>,
    pub upmaps: Vec<UpsamplingMap>,
    pub classes: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn from_counts(counts: Vec<CountGrid>, partition: &IntervalPartition) -> Result<Self> {
        let upmaps = counts
            .windows(2)
            .map(|p| gt_upsampling_map(&p[0], &p[1]))
            .collect::<Result<Vec<_>>>()?;
        let classes = counts
            .iter()
            .map(|c| c.values().iter().map(|&v| partition.count_to_class(v)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            counts,
            upmaps,
            classes,
        })
    }

    /// Keeps only levels `0..=n`.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            counts: self.counts[..=n].to_vec(),
            upmaps: self.upmaps[..n].to_vec(),
            classes: self.classes[..=n].to_vec(),
        }
    }
}

/// Gradients of the total loss with the same layout as [`HeadOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub counter: CounterOutputs,
    pub mask_logits: Vec<Grid>,
    pub up_logits: Vec<Grid>,
}

impl Gradients {
    /// All coordinates in a fixed order: counter stages, masks, upsamplers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.counter {
            CounterOutputs::Reg(v) => v.iter().for_each(|g| out.extend_from_slice(g.values())),
            CounterOutputs::Cls(v) => v.iter().for_each(|g| out.extend_from_slice(g.values())),
        }
        self.mask_logits.iter().for_each(|g| out.extend_from_slice(g.values()));
        self.up_logits.iter().for_each(|g| out.extend_from_slice(g.values()));
        out
    }
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Counts entering the merge, per stage.
    pub counts: Vec<Grid>,
    /// Class probabilities per stage (classification counter only).
    pub probs: Vec<Vec<f64>>,
    pub masks: Vec<Grid>,
    pub upmaps: Vec<UpsamplingMap>,
    /// `(DIVᵢ₋₁ ⊗ 1) ∘ Uᵢ` for stages `1..=N`.
    pub redistributed: Vec<Grid>,
    pub divs: Vec<Grid>,
}

/// Runs the heads' outputs through the merge recursion.
pub fn forward(outputs: &HeadOutputs, partition: &IntervalPartition) -> Result<Forward> {
    outputs.validate()?;
    let (counts, probs) = match &outputs.counter {
        CounterOutputs::Reg(c) => (c.clone(), Vec::new()),
        CounterOutputs::Cls(logits) => {
            let values = partition.class_values();
            for l in logits {
                if l.num_classes() != values.len() {
                    return Err(SdcError::Precondition(format!(
                        "{} class scores for a {}-class partition",
                        l.num_classes(),
                        values.len()
                    )));
                }
            }
            (
                logits.iter().map(|l| l.expected_counts(&values)).collect(),
                logits.iter().map(ClassLogits::probabilities).collect(),
            )
        }
    };
    let masks: Vec<Grid> = outputs.mask_logits.iter().map(|l| l.map(sigmoid)).collect();
    let upmaps = outputs
        .up_logits
        .iter()
        .map(spatial_softmax2)
        .collect::<Result<Vec<_>>>()?;
    let mut divs = vec![counts[0].clone()];
    let mut redistributed = Vec::with_capacity(masks.len());
    for i in 1..counts.len() {
        let up = crate::grid::hadamard(&crate::grid::kron_upsample2(&divs[i - 1]), &upmaps[i - 1])?;
        let w = &masks[i - 1];
        let data = up
            .values()
            .iter()
            .zip(counts[i].values())
            .zip(w.values())
            .map(|((r, c), w)| (1.0 - w) * r + w * c)
            .collect();
        divs.push(Grid::from_parts_unchecked(up.height(), up.width(), data));
        redistributed.push(up);
    }
    if let Some(d) = divs.iter().find(|d| d.values().iter().any(|v| !v.is_finite())) {
        return Err(SdcError::NonFinite(format!("division grid {:?}", d.dims())));
    }
    Ok(Forward {
        counts,
        probs,
        masks,
        upmaps,
        redistributed,
        divs,
    })
}

fn check_ground_truth(outputs: &HeadOutputs, gt: &GroundTruth) -> Result<()> {
    let n = outputs.counter.num_stages();
    if gt.counts.len() < n || gt.upmaps.len() + 1 < n {
        return Err(SdcError::Precondition(format!(
            "{n} stages need {n} ground-truth count levels"
        )));
    }
    for i in 0..n {
        let expected = outputs.counter.dims(i);
        if gt.counts[i].dims() != expected {
            return Err(SdcError::DimensionMismatch {
                expected,
                actual: gt.counts[i].dims(),
            });
        }
    }
    if outputs.counter.mode() == Mode::Cls && gt.classes.len() < n {
        return Err(SdcError::Precondition("missing interval labels".into()));
    }
    Ok(())
}

fn loss_parts(fwd: &Forward, outputs: &HeadOutputs, gt: &GroundTruth, c_max: f64) -> Result<LossParts> {
    let n = fwd.counts.len();
    let l_counter = match &outputs.counter {
        CounterOutputs::Reg(c) => c
            .iter()
            .zip(&gt.counts)
            .map(|(p, g)| l_counter_reg(p, g, c_max))
            .sum::<Result<f64>>()?,
        CounterOutputs::Cls(l) => l
            .iter()
            .zip(&gt.classes)
            .map(|(l, y)| l_counter_cls(l, y))
            .sum::<Result<f64>>()?,
    };
    let l_eq = match outputs.counter.mode() {
        Mode::Reg => Some(l_eq(Mode::Reg, &fwd.counts, &gt.counts, c_max)?),
        Mode::Cls => None,
    };
    Ok(LossParts {
        l_counter: Some(l_counter),
        l_merge: Some(l_merge(&fwd.divs[n - 1], &gt.counts[n - 1])?),
        l_up: Some(l_up(&fwd.upmaps, &gt.upmaps[..n - 1])?),
        l_div: Some(l_div(&fwd.masks, &gt.counts, c_max)?),
        l_eq,
    })
}

/// Loss of one image without gradients.
pub fn loss(outputs: &HeadOutputs, gt: &GroundTruth, partition: &IntervalPartition) -> Result<LossBreakdown> {
    check_ground_truth(outputs, gt)?;
    let fwd = forward(outputs, partition)?;
    let parts = loss_parts(&fwd, outputs, gt, partition.c_max())?;
    let out = total_loss(outputs.counter.mode(), &parts)?;
    if !out.total.is_finite() {
        return Err(SdcError::NonFinite("total loss".into()));
    }
    Ok(out)
}

/// Loss of one image and its gradient with respect to every head output.
pub fn gradients(
    outputs: &HeadOutputs,
    gt: &GroundTruth,
    partition: &IntervalPartition,
) -> Result<(LossBreakdown, Gradients)> {
    check_ground_truth(outputs, gt)?;
    let c_max = partition.c_max();
    let fwd = forward(outputs, partition)?;
    let breakdown = total_loss(outputs.counter.mode(), &loss_parts(&fwd, outputs, gt, c_max)?)?;
    if !breakdown.total.is_finite() {
        return Err(SdcError::NonFinite("total loss".into()));
    }

    let n = fwd.counts.len();
    // gradient w.r.t. the counts entering the merge, per stage
    let mut d_counts: Vec<Vec<f64>> = fwd.counts.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut d_masks: Vec<Vec<f64>> = fwd.masks.iter().map(|m| vec![0.0; m.len()]).collect();
    let mut d_up: Vec<Vec<f64>> = fwd.upmaps.iter().map(|u| vec![0.0; u.len()]).collect();

    // merge loss through the recursion
    let last = &fwd.divs[n - 1];
    let inv = 1.0 / last.len() as f64;
    let mut d_div: Vec<f64> = last
        .values()
        .iter()
        .zip(gt.counts[n - 1].values())
        .map(|(d, g)| sign(d - g) * inv)
        .collect();
    for i in (1..n).rev() {
        let w = fwd.masks[i - 1].values();
        let c = fwd.counts[i].values();
        let r = fwd.redistributed[i - 1].values();
        let u = fwd.upmaps[i - 1].values();
        let prev = &fwd.divs[i - 1];
        let width = fwd.divs[i].width();
        let mut d_prev = vec![0.0; prev.len()];
        for j in 0..prev.height() {
            for k in 0..prev.width() {
                let p = j * prev.width() + k;
                for a in block_indices(width, j, k) {
                    let g = d_div[a];
                    d_masks[i - 1][a] += g * (c[a] - r[a]);
                    d_counts[i][a] += g * w[a];
                    let d_r = g * (1.0 - w[a]);
                    d_up[i - 1][a] += d_r * prev.values()[p];
                    d_prev[p] += d_r * u[a];
                }
            }
        }
        d_div = d_prev;
    }
    d_counts[0].iter_mut().zip(&d_div).for_each(|(a, b)| *a += b);

    // consistency loss
    if outputs.counter.mode() == Mode::Reg {
        for i in 1..n {
            let (parent, child) = (&fwd.counts[i - 1], &fwd.counts[i]);
            for j in 0..parent.height() {
                for k in 0..parent.width() {
                    if gt.counts[i - 1].get(j, k) <= c_max {
                        let idx = block_indices(child.width(), j, k);
                        let s: f64 = idx.iter().map(|&a| child.values()[a]).sum();
                        let sg = sign(parent.get(j, k) - s);
                        d_counts[i - 1][j * parent.width() + k] += sg;
                        idx.iter().for_each(|&a| d_counts[i][a] -= sg);
                    }
                }
            }
        }
    }

    // division loss
    for i in 1..n {
        let w = &fwd.masks[i - 1];
        let g = &gt.counts[i - 1];
        for j in 0..g.height() {
            for k in 0..g.width() {
                if g.get(j, k) > c_max {
                    let idx = block_indices(w.width(), j, k);
                    let mut best = idx[0];
                    for &a in &idx[1..] {
                        if w.values()[a] > w.values()[best] {
                            best = a;
                        }
                    }
                    d_masks[i - 1][best] -= 1.0 / w.values()[best];
                }
            }
        }
    }

    // upsampling loss
    for i in 1..n {
        let u = fwd.upmaps[i - 1].values();
        let t = gt.upmaps[i - 1].values();
        let inv = 1.0 / u.len() as f64;
        for a in 0..u.len() {
            d_up[i - 1][a] += sign(u[a] - t[a]) * inv;
        }
    }

    // mask logits through the sigmoid
    let mask_logits = d_masks
        .into_iter()
        .zip(&fwd.masks)
        .map(|(d, w)| {
            let data = d.iter().zip(w.values()).map(|(g, w)| g * w * (1.0 - w)).collect();
            Grid::from_parts_unchecked(w.height(), w.width(), data)
        })
        .collect();

    // upsampling logits through the block softmax
    let up_logits = d_up
        .into_iter()
        .zip(&fwd.upmaps)
        .map(|(d, u)| {
            let mut out = vec![0.0; u.len()];
            for j in 0..u.height() / 2 {
                for k in 0..u.width() / 2 {
                    let idx = block_indices(u.width(), j, k);
                    let dot: f64 = idx.iter().map(|&a| u.values()[a] * d[a]).sum();
                    for a in idx {
                        out[a] = u.values()[a] * (d[a] - dot);
                    }
                }
            }
            Grid::from_parts_unchecked(u.height(), u.width(), out)
        })
        .collect();

    let counter = match &outputs.counter {
        CounterOutputs::Reg(preds) => CounterOutputs::Reg(
            preds
                .iter()
                .zip(&gt.counts)
                .zip(d_counts)
                .map(|((p, g), mut d)| {
                    let inv = 1.0 / p.len() as f64;
                    for (a, dv) in d.iter_mut().enumerate() {
                        let pv = p.values()[a];
                        if pv < c_max {
                            *dv += sign(pv - g.values()[a].min(c_max)) * inv;
                        }
                    }
                    Grid::from_parts_unchecked(p.height(), p.width(), d)
                })
                .collect(),
        ),
        CounterOutputs::Cls(logits) => {
            let values = partition.class_values();
            CounterOutputs::Cls(
                logits
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let k = l.num_classes();
                        let p = &fwd.probs[i];
                        let inv = 1.0 / l.num_cells() as f64;
                        let mut d = vec![0.0; p.len()];
                        for cell in 0..l.num_cells() {
                            let pc = &p[cell * k..(cell + 1) * k];
                            let count = fwd.counts[i].values()[cell];
                            let dc = d_counts[i][cell];
                            let y = gt.classes[i][cell];
                            for m in 0..k {
                                let onehot = if m == y { 1.0 } else { 0.0 };
                                d[cell * k + m] = (pc[m] - onehot) * inv + dc * pc[m] * (values[m] - count);
                            }
                        }
                        ClassLogits {
                            h: l.h,
                            w: l.w,
                            k,
                            data: d,
                        }
                    })
                    .collect(),
            )
        }
    };

    let grads = Gradients {
        counter,
        mask_logits,
        up_logits,
    };
    if grads.flatten().iter().any(|v| !v.is_finite()) {
        return Err(SdcError::NonFinite("gradient".into()));
    }
    Ok((breakdown, grads))
}

//! A small trainable S-DC model: fixed pooled patch features feeding three
//! linear heads (counter, division decider, upsampler) that are shared by
//! every stage and trained end to end through the merge equations.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::grid::{spatial_softmax2, CountGrid, DivisionMask, Grid, UpsamplingMap};
use crate::groundtruth::{
    build_partition, count_pyramid, gt_upsampling_map, render_density, DensityKernel, IntervalPartition,
    PartitionScheme,
};
use crate::losses::{self, ClassLogits, CounterOutputs, GroundTruth, HeadOutputs, LossBreakdown, Mode};
use crate::metrics::{EvalReport, range_mae};
use crate::sdc::{self, SdcTrace, StageHeads, StagePrediction};
use crate::synthcells::{Manifest, Split};

/// Patch side at stage 0, in pixels.
pub const BASE_PATCH: usize = 64;
/// Pooling grid per patch side.
pub const POOL: usize = 4;
/// 4×4 pooled sums, total, max and local-maxima count.
pub const FEATURE_DIM: usize = POOL * POOL + 3;
/// Local maxima must be strictly above this intensity.
pub const PEAK_THRESHOLD: f64 = 0.3;

/// One feature vector per patch, row-major over patches.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }
}

/// Pixels strictly greater than all their (in-image) 8 neighbours and above
/// [`PEAK_THRESHOLD`].
fn local_maxima(image: &Grid) -> Vec<bool> {
    let (h, w) = image.dims();
    let v = image.values();
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let x = v[r * w + c];
            if x <= PEAK_THRESHOLD {
                continue;
            }
            let mut peak = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    if v[rr as usize * w + cc as usize] >= x {
                        peak = false;
                        break 'scan;
                    }
                }
            }
            out[r * w + c] = peak;
        }
    }
    out
}

/// Features of every `64/2^level`-pixel patch: the patch is pooled into a
/// 4×4 grid of intensity sums, followed by its total, its maximum and the
/// number of local maxima inside it.
pub fn extract_features(image: &Grid, level: usize) -> Result<FeatureGrid> {
    let (h, w) = image.dims();
    if h % BASE_PATCH != 0 || w % BASE_PATCH != 0 {
        return Err(SdcError::Indivisible { h, w, divisor: BASE_PATCH });
    }
    let patch = BASE_PATCH >> level;
    if patch < POOL || level >= usize::BITS as usize {
        return Err(SdcError::InvalidValue(format!("level {level} leaves patches below {POOL} pixels")));
    }
    let bin = patch / POOL;
    let (ph, pw) = (h / patch, w / patch);
    let peaks = local_maxima(image);
    let mut data = vec![0.0; ph * pw * FEATURE_DIM];
    for r in 0..h {
        for c in 0..w {
            let v = image.get(r, c);
            let cell = (r / patch) * pw + c / patch;
            let f = &mut data[cell * FEATURE_DIM..(cell + 1) * FEATURE_DIM];
            f[((r % patch) / bin) * POOL + (c % patch) / bin] += v;
            f[POOL * POOL] += v;
            f[POOL * POOL + 1] = f[POOL * POOL + 1].max(v);
            if peaks[r * w + c] {
                f[POOL * POOL + 2] += 1.0;
            }
        }
    }
    Ok(FeatureGrid { h: ph, w: pw, data })
}

/// Features for levels `0..=n`.
pub fn feature_pyramid(image: &Grid, n: usize) -> Result<Vec<FeatureGrid>> {
    (0..=n).map(|l| extract_features(image, l)).collect()
}

/// Affine map from a scaled feature vector to `outputs` values.
/// Row `o` of `weights` holds `FEATURE_DIM` coefficients then a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    outputs: usize,
    weights: Vec<f64>,
}

const ROW: usize = FEATURE_DIM + 1;

impl LinearHead {
    pub fn zeros(outputs: usize) -> Self {
        Self {
            outputs,
            weights: vec![0.0; outputs * ROW],
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.weights.chunks(ROW)) {
            *o = row[..FEATURE_DIM].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[FEATURE_DIM];
        }
    }

    /// Accumulates `g ⊗ [x, 1]` into `grad`.
    fn accumulate(&self, x: &[f64], g: &[f64], grad: &mut [f64]) {
        for (row, &go) in grad.chunks_mut(ROW).zip(g) {
            if go == 0.0 {
                continue;
            }
            row[..FEATURE_DIM].iter_mut().zip(x).for_each(|(r, xi)| *r += go * xi);
            row[FEATURE_DIM] += go;
        }
    }

    /// Applies the head to every cell of `f`, scaling features by `scale`.
    fn map_cells(&self, f: &FeatureGrid, scale: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.num_cells() * self.outputs];
        let mut x = [0.0; FEATURE_DIM];
        for (i, o) in out.chunks_mut(self.outputs).enumerate() {
            x.iter_mut().zip(f.cell(i)).zip(scale).for_each(|((x, v), s)| *x = v / s);
            self.apply(&x, o);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub stages: usize,
    pub c_max: f64,
    pub partition: PartitionScheme,
    pub lr: f64,
    pub epochs: usize,
    /// Learning-rate multiplier applied when the epoch loss stagnates.
    pub lr_decay: f64,
    /// Epochs without improvement before the learning rate decays.
    pub patience: usize,
    pub seed: u64,
    /// Fixed Gaussian σ of the ground-truth density, in pixels.
    pub gt_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cls,
            stages: 1,
            c_max: 10.0,
            partition: PartitionScheme::OneLinear,
            lr: 5e-3,
            epochs: 100,
            lr_decay: 0.1,
            patience: 5,
            seed: 0,
            gt_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SdcError::InvalidValue(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.gt_sigma > 0.0 && self.gt_sigma.is_finite()) {
            return bad(format!("gt sigma must be positive, got {}", self.gt_sigma));
        }
        if BASE_PATCH >> self.stages < POOL {
            return bad(format!("{} stages shrink patches below {POOL} pixels", self.stages));
        }
        build_partition(self.c_max, self.partition).map(|_| ())
    }
}

/// The three shared heads plus the feature scaling and partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SdcModel {
    mode: Mode,
    stages: usize,
    partition: IntervalPartition,
    /// Every feature is divided by its scale before entering a head.
    scale: Vec<f64>,
    counter: LinearHead,
    decider: LinearHead,
    upsampler: LinearHead,
}

impl SdcModel {
    /// Zero-initialised heads with unit feature scales.
    pub fn new(mode: Mode, stages: usize, partition: IntervalPartition) -> Self {
        let counter_outputs = match mode {
            Mode::Reg => 1,
            Mode::Cls => partition.num_classes(),
        };
        Self {
            mode,
            stages,
            partition,
            scale: vec![1.0; FEATURE_DIM],
            counter: LinearHead::zeros(counter_outputs),
            decider: LinearHead::zeros(1),
            upsampler: LinearHead::zeros(1),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn partition(&self) -> &IntervalPartition {
        &self.partition
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn set_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        if scale.len() != FEATURE_DIM || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SdcError::InvalidValue(format!("need {FEATURE_DIM} positive feature scales")));
        }
        self.scale = scale;
        Ok(())
    }

    pub fn counter(&self) -> &LinearHead {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut LinearHead {
        &mut self.counter
    }

    pub fn decider(&self) -> &LinearHead {
        &self.decider
    }

    pub fn decider_mut(&mut self) -> &mut LinearHead {
        &mut self.decider
    }

    pub fn upsampler(&self) -> &LinearHead {
        &self.upsampler
    }

    pub fn upsampler_mut(&mut self) -> &mut LinearHead {
        &mut self.upsampler
    }

    /// Every parameter in checkpoint order: scales, counter, decider, upsampler.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.scale.clone();
        p.extend_from_slice(&self.counter.weights);
        p.extend_from_slice(&self.decider.weights);
        p.extend_from_slice(&self.upsampler.weights);
        p
    }

    /// Raw head outputs for stages `0..=n`, as used during training.
    pub fn head_outputs(&self, features: &[FeatureGrid], n: usize) -> Result<HeadOutputs> {
        if features.len() < n + 1 {
            return Err(SdcError::Precondition(format!("{n} stages need {} feature levels", n + 1)));
        }
        let grid = |f: &FeatureGrid, v: Vec<f64>| Grid::new(f.h, f.w, v);
        let counter = match self.mode {
            Mode::Reg => CounterOutputs::Reg(
                features[..=n]
                    .iter()
                    .map(|f| grid(f, self.counter.map_cells(f, &self.scale)))
                    .collect::<Result<_>>()?,
            ),
            Mode::Cls => CounterOutputs::Cls(
                features[..=n]
                    .iter()
                    .map(|f| ClassLogits::new(f.h, f.w, self.counter.outputs, self.counter.map_cells(f, &self.scale)))
                    .collect::<Result<_>>()?,
            ),
        };
        let mask_logits = features[1..=n]
            .iter()
            .map(|f| grid(f, self.decider.map_cells(f, &self.scale)))
            .collect::<Result<_>>()?;
        let up_logits = features[1..=n]
            .iter()
            .map(|f| grid(f, self.upsampler.map_cells(f, &self.scale)))
            .collect::<Result<_>>()?;
        Ok(HeadOutputs {
            counter,
            mask_logits,
            up_logits,
        })
    }

    /// Closed-set inference count of every cell: the regression output
    /// clamped to `[0, c_max]`, or the value of the top-scoring class.
    pub fn infer_counts(&self, f: &FeatureGrid) -> Result<CountGrid> {
        let raw = self.counter.map_cells(f, &self.scale);
        let c_max = self.partition.c_max();
        let values = match self.mode {
            Mode::Reg => raw.iter().map(|v| v.clamp(0.0, c_max)).collect(),
            Mode::Cls => ClassLogits::new(f.h, f.w, self.counter.outputs, raw)?
                .argmax()
                .into_iter()
                .map(|m| self.partition.class_to_count(m))
                .collect::<Result<_>>()?,
        };
        CountGrid::new(f.h, f.w, values)
    }

    /// Inference on one image with `n` division stages.
    pub fn forward(&self, image: &Grid, n: usize) -> Result<SdcTrace> {
        sdc::run(self, &feature_pyramid(image, n)?, n)
    }

    /// Loss of one image and the gradient with respect to every parameter
    /// except the feature scales, laid out as counter, decider, upsampler.
    pub fn loss_and_gradient(&self, features: &[FeatureGrid], gt: &GroundTruth) -> Result<(LossBreakdown, Vec<f64>)> {
        let n = gt.counts.len() - 1;
        let outputs = self.head_outputs(features, n)?;
        let (breakdown, g) = losses::gradients(&outputs, gt, &self.partition)?;
        let (nc, nd) = (self.counter.weights.len(), self.decider.weights.len());
        let mut grad = vec![0.0; nc + 2 * nd];
        let (gc, rest) = grad.split_at_mut(nc);
        let (gd, gu) = rest.split_at_mut(nd);
        let mut x = [0.0; FEATURE_DIM];
        let mut scaled = |f: &FeatureGrid, i: usize| {
            x.iter_mut().zip(f.cell(i)).zip(&self.scale).for_each(|((x, v), s)| *x = v / s);
            x
        };
        for (s, f) in features[..=n].iter().enumerate() {
            let k = self.counter.outputs;
            let cell_grads: &[f64] = match &g.counter {
                CounterOutputs::Reg(v) => v[s].values(),
                CounterOutputs::Cls(v) => v[s].values(),
            };
            for i in 0..f.num_cells() {
                let x = scaled(f, i);
                self.counter.accumulate(&x, &cell_grads[i * k..(i + 1) * k], gc);
                if s > 0 {
                    self.decider.accumulate(&x, &g.mask_logits[s - 1].values()[i..=i], gd);
                    self.upsampler.accumulate(&x, &g.up_logits[s - 1].values()[i..=i], gu);
                }
            }
        }
        Ok((breakdown, grad))
    }

    fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        let heads = [&mut self.counter, &mut self.decider, &mut self.upsampler];
        let params = heads.into_iter().flat_map(|h| h.weights.iter_mut());
        params.zip(grad).for_each(|(p, g)| *p -= lr * g);
    }
}

impl StageHeads<FeatureGrid> for SdcModel {
    fn count(&self, _stage: usize, f: &FeatureGrid) -> Result<CountGrid> {
        self.infer_counts(f)
    }

    fn divide(&self, _stage: usize, f: &FeatureGrid) -> Result<DivisionMask> {
        let logits = Grid::new(f.h, f.w, self.decider.map_cells(f, &self.scale))?;
        Ok(DivisionMask::from_logits(&logits))
    }

    fn upsample(&self, _stage: usize, f: &FeatureGrid) -> Result<UpsamplingMap> {
        spatial_softmax2(&Grid::new(f.h, f.w, self.upsampler.map_cells(f, &self.scale))?)
    }
}

const CHECKPOINT_FORMAT: &str = "sdc-toymodel";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    mode: Mode,
    stages: usize,
    feature_dim: usize,
    counter_outputs: usize,
    partition: IntervalPartition,
    params: usize,
}

impl SdcModel {
    /// One JSON header line followed by the little-endian fp64 parameters.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let params = self.parameters();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            mode: self.mode,
            stages: self.stages,
            feature_dim: FEATURE_DIM,
            counter_outputs: self.counter.outputs,
            partition: self.partition.clone(),
            params: params.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| SdcError::Format("checkpoint header is not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT || header.version != 1 || header.feature_dim != FEATURE_DIM {
            return Err(SdcError::Format("unsupported checkpoint header".into()));
        }
        let partition = build_partition(header.partition.c_max(), header.partition.scheme())?;
        if partition != header.partition {
            return Err(SdcError::Format("checkpoint partition is not a standard partition".into()));
        }
        let mut model = SdcModel::new(header.mode, header.stages, partition);
        if model.counter.outputs != header.counter_outputs {
            return Err(SdcError::Format("counter width does not match mode and partition".into()));
        }
        let expected = model.parameters().len();
        let payload = &bytes[nl + 1..];
        if header.params != expected || payload.len() != expected * 8 {
            return Err(SdcError::Format(format!(
                "expected {expected} parameters, header says {} and payload holds {} bytes",
                header.params,
                payload.len()
            )));
        }
        let mut p = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Vec<f64> { p.by_ref().take(n).collect() };
        model.set_scale(take(FEATURE_DIM))?;
        let (nc, nh) = (model.counter.weights.len(), model.decider.weights.len());
        model.counter.weights = take(nc);
        model.decider.weights = take(nh);
        model.upsampler.weights = take(nh);
        if model.parameters().iter().any(|v| !v.is_finite()) {
            return Err(SdcError::NonFinite("checkpoint parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&fs::read(path)?)
    }
}

/// Cached inputs and supervision for one image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: Vec<FeatureGrid>,
    /// Ground-truth counts for levels `0..=n`.
    pub counts: Vec<CountGrid>,
}

impl Sample {
    pub fn ground_truth(&self, partition: &IntervalPartition) -> Result<GroundTruth> {
        GroundTruth::from_counts(self.counts.clone(), partition)
    }
}

/// Features and ground-truth count pyramids for one split, in manifest order.
pub fn load_samples(manifest: &Manifest, split: Split, levels: usize, gt_sigma: f64) -> Result<Vec<Sample>> {
    let entries: Vec<_> = manifest.entries(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let image = manifest.load_image(e)?;
            let ann = manifest.load_annotations(e)?;
            let (h, w) = image.dims();
            let density = render_density(&ann, h, w, DensityKernel::Fixed { sigma: gt_sigma })?;
            Ok(Sample {
                features: feature_pyramid(&image, levels)?,
                counts: count_pyramid(&density, BASE_PATCH, levels)?,
            })
        })
        .collect()
}

/// Mean absolute value of every feature over the stage-0 patches.
pub fn feature_scale(samples: &[Sample]) -> Vec<f64> {
    let mut sum = [0.0; FEATURE_DIM];
    let mut n = 0usize;
    for s in samples {
        let f = &s.features[0];
        for i in 0..f.num_cells() {
            sum.iter_mut().zip(f.cell(i)).for_each(|(a, v)| *a += v.abs());
            n += 1;
        }
    }
    sum.iter().map(|&a| if n > 0 && a > 0.0 { a / n as f64 } else { 1.0 }).collect()
}

/// Epoch means of every loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l_counter: f64,
    pub l_merge: f64,
    pub l_up: f64,
    pub l_div: f64,
    pub l_eq: f64,
}

pub fn write_loss_curve<W: Write>(out: W, curve: &[EpochLoss]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for row in curve {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Plain SGD with batch size 1 over `samples`, shuffled each epoch from
/// `config.seed`; the learning rate is multiplied by `lr_decay` after
/// `patience` epochs without a lower mean loss.
pub fn train(model: &mut SdcModel, samples: &[Sample], config: &TrainConfig) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    let n = model.stages;
    let truths = samples
        .iter()
        .map(|s| {
            if s.counts.len() <= n || s.features.len() <= n {
                return Err(SdcError::Precondition(format!("sample lacks level {n}")));
            }
            GroundTruth::from_counts(s.counts[..=n].to_vec(), &model.partition)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut lr = config.lr;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 6];
        for &i in &order {
            let (b, grad) = model.loss_and_gradient(&samples[i].features, &truths[i]).map_err(|e| match e {
                SdcError::NonFinite(what) => {
                    SdcError::NonFinite(format!("{what} on sample {i} in epoch {epoch}"))
                }
                other => other,
            })?;
            model.sgd_step(&grad, lr);
            for (a, v) in acc.iter_mut().zip([b.total, b.l_counter, b.l_merge, b.l_up, b.l_div, b.l_eq.unwrap_or(0.0)]) {
                *a += v;
            }
        }
        let m = samples.len().max(1) as f64;
        let row = EpochLoss {
            epoch,
            lr,
            total: acc[0] / m,
            l_counter: acc[1] / m,
            l_merge: acc[2] / m,
            l_up: acc[3] / m,
            l_div: acc[4] / m,
            l_eq: acc[5] / m,
        };
        if !row.total.is_finite() {
            return Err(SdcError::NonFinite(format!("mean loss in epoch {epoch}")));
        }
        if row.total < best {
            best = row.total;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                lr *= config.lr_decay;
                stale = 0;
            }
        }
        curve.push(row);
    }
    Ok(curve)
}

/// Builds a model for `config`, fits the feature scales on `samples` and trains it.
pub fn fit(samples: &[Sample], config: &TrainConfig) -> Result<(SdcModel, Vec<EpochLoss>)> {
    config.validate()?;
    let partition = build_partition(config.c_max, config.partition)?;
    let mut model = SdcModel::new(config.mode, config.stages, partition);
    model.set_scale(feature_scale(samples))?;
    let curve = train(&mut model, samples, config)?;
    Ok((model, curve))
}

/// Predicted and ground-truth stage-0 maps for every evaluated image.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub pred_maps: Vec<Grid>,
    pub gt_maps: Vec<Grid>,
}

impl Evaluation {
    fn from_maps(pred_maps: Vec<Grid>, gt_maps: Vec<Grid>, bin_width: f64) -> Result<Self> {
        let patch_preds: Vec<f64> = pred_maps.iter().flat_map(|g| g.values().to_vec()).collect();
        let patch_gts: Vec<f64> = gt_maps.iter().flat_map(|g| g.values().to_vec()).collect();
        let report = EvalReport::build(&pred_maps, &gt_maps, &patch_preds, &patch_gts, bin_width)?;
        Ok(Self {
            report,
            pred_maps,
            gt_maps,
        })
    }

    /// Per-patch MAE over ground-truth counts in `[lo, hi)`.
    pub fn patch_mae(&self, lo: f64, hi: f64) -> Option<f64> {
        let p: Vec<f64> = self.pred_maps.iter().flat_map(|g| g.values().to_vec()).collect();
        let g: Vec<f64> = self.gt_maps.iter().flat_map(|g| g.values().to_vec()).collect();
        range_mae(&p, &g, lo, hi)
    }
}

/// Runs the model with `n` divisions on every sample and compares the
/// final division map, summed back to stage-0 patches, with the ground truth.
pub fn evaluate(model: &SdcModel, samples: &[Sample], n: usize, bin_width: f64) -> Result<Evaluation> {
    let maps = samples
        .par_iter()
        .map(|s| {
            let trace = sdc::run(model, &s.features, n)?;
            Ok((sdc::stage0_counts(&trace)?.into_grid(), s.counts[0].as_grid().clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (pred, gt) = maps.into_iter().unzip();
    Evaluation::from_maps(pred, gt, bin_width)
}

/// Evaluation with ground truth standing in for the heads: exact counts at
/// every level, exact redistribution maps and masks of one half.
pub fn evaluate_oracle(samples: &[Sample], n: usize, bin_width: f64) -> Result<Evaluation> {
    let maps = samples
        .par_iter()
        .map(|s| {
            if s.counts.len() <= n {
                return Err(SdcError::Precondition(format!("sample lacks level {n}")));
            }
            let mut stages = vec![StagePrediction::initial(s.counts[0].clone())];
            for i in 1..=n {
                let (h, w) = s.counts[i].dims();
                stages.push(StagePrediction::divided(
                    s.counts[i].clone(),
                    DivisionMask::filled(h, w, 0.5)?,
                    gt_upsampling_map(&s.counts[i - 1], &s.counts[i])?,
                ));
            }
            let trace = sdc::merge_stages(stages)?;
            Ok((sdc::stage0_counts(&trace)?.into_grid(), s.counts[0].as_grid().clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (pred, gt) = maps.into_iter().unzip();
    Evaluation::from_maps(pred, gt, bin_width)
}

//! Counting metrics and per-count-bin error curves.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::grid::{check_same_dims, Grid};

fn check_pairs(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(SdcError::InvalidValue(format!(
            "{} predictions for {} ground-truth values",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(SdcError::InvalidValue("metrics need at least one pair".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

/// Root mean squared error (reported as "MSE" in the counting literature).
pub fn mse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let sq = preds.iter().zip(gts).map(|(p, g)| (p - g).powi(2)).sum::<f64>();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Mean of `|pred − gt| / gt`; every ground truth must be positive.
pub fn rmae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    if let Some(g) = gts.iter().find(|&&g| !(g > 0.0)) {
        return Err(SdcError::InvalidValue(format!("relative error undefined for ground truth {g}")));
    }
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / preds.len() as f64)
}

/// Sum over the `2^L × 2^L` sub-regions of the absolute difference between
/// predicted and ground-truth sub-region totals.
pub fn game(pred: &Grid, gt: &Grid, level: u32) -> Result<f64> {
    check_same_dims(pred, gt)?;
    let (h, w) = pred.dims();
    let parts = 1usize << level;
    if h % parts != 0 || w % parts != 0 {
        return Err(SdcError::Indivisible { h, w, divisor: parts });
    }
    let (bh, bw) = (h / parts, w / parts);
    // Totals are accumulated separately, in row-major order, so level 0 is
    // bit-identical to `|pred.sum() − gt.sum()|`.
    let mut totals = vec![(0.0, 0.0); parts * parts];
    for r in 0..h {
        for c in 0..w {
            let t = &mut totals[(r / bh) * parts + c / bw];
            t.0 += pred.get(r, c);
            t.1 += gt.get(r, c);
        }
    }
    Ok(totals.iter().map(|(p, g)| (p - g).abs()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub n: usize,
    pub mae: f64,
    /// Absent when the bin holds a zero ground truth.
    pub rmae: Option<f64>,
}

/// Groups pairs by ground truth into `[k·w, (k+1)·w)` and reports MAE and
/// rMAE per non-empty bin, in increasing bin order.
pub fn bin_curves(preds: &[f64], gts: &[f64], bin_width: f64) -> Result<Vec<BinRow>> {
    if preds.len() != gts.len() {
        return Err(SdcError::InvalidValue(format!(
            "{} predictions for {} ground-truth values",
            preds.len(),
            gts.len()
        )));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(SdcError::InvalidValue(format!("bin width must be positive, got {bin_width}")));
    }
    if let Some(g) = gts.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(SdcError::InvalidValue(format!("ground truth {g} cannot be binned")));
    }
    let mut bins: std::collections::BTreeMap<u64, (Vec<f64>, Vec<f64>)> = Default::default();
    for (&p, &g) in preds.iter().zip(gts) {
        let e = bins.entry((g / bin_width).floor() as u64).or_default();
        e.0.push(p);
        e.1.push(g);
    }
    bins.into_iter()
        .map(|(k, (p, g))| {
            Ok(BinRow {
                bin_lo: k as f64 * bin_width,
                bin_hi: (k + 1) as f64 * bin_width,
                n: p.len(),
                mae: mae(&p, &g)?,
                rmae: rmae(&p, &g).ok(),
            })
        })
        .collect()
}

/// MAE over the pairs whose ground truth lies in `[lo, hi)`; `None` if empty.
pub fn range_mae(preds: &[f64], gts: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let (p, g): (Vec<f64>, Vec<f64>) = preds
        .iter()
        .zip(gts)
        .filter(|(_, &g)| g >= lo && g < hi)
        .map(|(&p, &g)| (p, g))
        .unzip();
    mae(&p, &g).ok()
}

pub fn write_bin_csv<W: Write>(out: W, rows: &[BinRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["bin_lo", "bin_hi", "n", "mae", "rmae"])?;
    for r in rows {
        wr.write_record([
            r.bin_lo.to_string(),
            r.bin_hi.to_string(),
            r.n.to_string(),
            r.mae.to_string(),
            r.rmae.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_bin_csv(path: impl AsRef<Path>) -> Result<Vec<BinRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| SdcError::Format(format!("bad bin-curve field {i} in {rec:?}")))
            };
            Ok(BinRow {
                bin_lo: num(0)?,
                bin_hi: num(1)?,
                n: num(2)? as usize,
                mae: num(3)?,
                rmae: rec.get(4).filter(|s| !s.is_empty()).map(|_| num(4)).transpose()?,
            })
        })
        .collect()
}

/// Image-level metrics plus per-patch bin curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub mae: f64,
    pub mse: f64,
    /// Absent when some image has a zero ground-truth count.
    pub rmae: Option<f64>,
    /// GAME(L) averaged over images, for L = 0..=3 as far as the map
    /// size allows.
    pub game: Vec<f64>,
    pub bins: Vec<BinRow>,
}

pub const GAME_LEVELS: u32 = 3;

impl EvalReport {
    /// `pred_maps` and `gt_maps` are per-image count maps at a common
    /// resolution; `patch_preds` and `patch_gts` are the per-patch values
    /// the bin curves are computed from.
    pub fn build(
        pred_maps: &[Grid],
        gt_maps: &[Grid],
        patch_preds: &[f64],
        patch_gts: &[f64],
        bin_width: f64,
    ) -> Result<Self> {
        if pred_maps.len() != gt_maps.len() || pred_maps.is_empty() {
            return Err(SdcError::InvalidValue(format!(
                "{} predicted maps for {} ground-truth maps",
                pred_maps.len(),
                gt_maps.len()
            )));
        }
        let totals: Vec<f64> = pred_maps.iter().map(Grid::sum).collect();
        let gt_totals: Vec<f64> = gt_maps.iter().map(Grid::sum).collect();
        let (h, w) = pred_maps[0].dims();
        let game = (0..=GAME_LEVELS)
            .take_while(|l| h % (1 << l) == 0 && w % (1 << l) == 0)
            .map(|l| {
                let sum = pred_maps
                    .iter()
                    .zip(gt_maps)
                    .map(|(p, g)| game(p, g, l))
                    .sum::<Result<f64>>()?;
                Ok(sum / pred_maps.len() as f64)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            images: pred_maps.len(),
            mae: mae(&totals, &gt_totals)?,
            mse: mse(&totals, &gt_totals)?,
            rmae: rmae(&totals, &gt_totals).ok(),
            game,
            bins: bin_curves(patch_preds, patch_gts, bin_width)?,
        })
    }

    /// `metric,name,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["metric", "name", "value"])?;
        let mut row = |metric: &str, name: &str, v: String| wr.write_record([metric, name, v.as_str()]);
        row("count", "images", self.images.to_string())?;
        row("count", "mae", self.mae.to_string())?;
        row("count", "mse", self.mse.to_string())?;
        row("count", "rmae", self.rmae.map(|v| v.to_string()).unwrap_or_default())?;
        for (l, g) in self.game.iter().enumerate() {
            row("game", &format!("L{l}"), g.to_string())?;
        }
        wr.flush()?;
        Ok(())
    }
}

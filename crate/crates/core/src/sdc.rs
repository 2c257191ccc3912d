//! Multi-stage spatial divide-and-conquer over pluggable per-stage heads.
//!
//! Stage 0 yields a count grid `C₀` and sets `DIV₀ = C₀`. Each later stage `i`
//! yields counts `Cᵢ`, a division mask `Wᵢ` and an upsampling map `Uᵢ`, all at
//! twice the resolution of stage `i-1`, and
//!
//! ```text
//! DIVᵢ = (1 − Wᵢ) ∘ ((DIVᵢ₋₁ ⊗ 1₂ₓ₂) ∘ Uᵢ) + Wᵢ ∘ Cᵢ
//! ```

use std::path::Path;

use crate::error::{Result, SdcError};
use crate::grid::{
    check_double_dims, check_same_dims, kron_upsample2, CountGrid, DivisionMask, UpsamplingMap,
};
use crate::gridio::save_grid;

/// Block-sum tolerance accepted by [`guided_upsample`].
pub const GUIDED_UPSAMPLE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StagePrediction {
    pub counts: CountGrid,
    /// `None` at stage 0.
    pub mask: Option<DivisionMask>,
    /// `None` at stage 0.
    pub upmap: Option<UpsamplingMap>,
}

impl StagePrediction {
    pub fn initial(counts: CountGrid) -> Self {
        Self {
            counts,
            mask: None,
            upmap: None,
        }
    }

    pub fn divided(counts: CountGrid, mask: DivisionMask, upmap: UpsamplingMap) -> Self {
        Self {
            counts,
            mask: Some(mask),
            upmap: Some(upmap),
        }
    }
}

/// Every stage prediction together with the merged `DIV₀ … DIV_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdcTrace {
    pub stages: Vec<StagePrediction>,
    pub divs: Vec<CountGrid>,
}

impl SdcTrace {
    pub fn final_div(&self) -> &CountGrid {
        self.divs.last().expect("trace has at least one stage")
    }

    pub fn num_divisions(&self) -> usize {
        self.divs.len() - 1
    }

    /// Writes `c_<i>.grid`, `w_<i>.grid`, `u_<i>.grid` and `div_<i>.grid`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, (stage, div)) in self.stages.iter().zip(&self.divs).enumerate() {
            save_grid(dir.join(format!("c_{i}.grid")), &stage.counts)?;
            save_grid(dir.join(format!("div_{i}.grid")), div)?;
            if let Some(w) = &stage.mask {
                save_grid(dir.join(format!("w_{i}.grid")), w)?;
            }
            if let Some(u) = &stage.upmap {
                save_grid(dir.join(format!("u_{i}.grid")), u)?;
            }
        }
        Ok(())
    }
}

/// `(div_prev ⊗ 1₂ₓ₂) ∘ u`.
pub fn guided_upsample(div_prev: &CountGrid, u: &UpsamplingMap) -> Result<CountGrid> {
    check_double_dims(div_prev, u)?;
    UpsamplingMap::check_normalized(u, GUIDED_UPSAMPLE_TOL)?;
    let up = kron_upsample2(div_prev);
    let data = up.values().iter().zip(u.values()).map(|(a, b)| a * b).collect();
    CountGrid::new(u.height(), u.width(), data)
}

/// One merge: `(1 − w) ∘ guided_upsample(div_prev, u) + w ∘ c`.
pub fn merge_step(
    div_prev: &CountGrid,
    c: &CountGrid,
    w: &DivisionMask,
    u: &UpsamplingMap,
) -> Result<CountGrid> {
    check_double_dims(div_prev, c)?;
    check_same_dims(c, w)?;
    let redistributed = guided_upsample(div_prev, u)?;
    let data = redistributed
        .values()
        .iter()
        .zip(c.values())
        .zip(w.values())
        .map(|((r, c), w)| (1.0 - w) * r + w * c)
        .collect();
    CountGrid::new(c.height(), c.width(), data)
}

/// Counter, division decider and upsampler, each keyed by stage.
pub trait StageHeads<F: ?Sized> {
    fn count(&self, stage: usize, features: &F) -> Result<CountGrid>;
    fn divide(&self, stage: usize, features: &F) -> Result<DivisionMask>;
    fn upsample(&self, stage: usize, features: &F) -> Result<UpsamplingMap>;
}

/// [`StageHeads`] assembled from three closures.
pub struct FnHeads<C, D, U> {
    pub count: C,
    pub divide: D,
    pub upsample: U,
}

impl<F: ?Sized, C, D, U> StageHeads<F> for FnHeads<C, D, U>
where
    C: Fn(usize, &F) -> Result<CountGrid>,
    D: Fn(usize, &F) -> Result<DivisionMask>,
    U: Fn(usize, &F) -> Result<UpsamplingMap>,
{
    fn count(&self, stage: usize, features: &F) -> Result<CountGrid> {
        (self.count)(stage, features)
    }

    fn divide(&self, stage: usize, features: &F) -> Result<DivisionMask> {
        (self.divide)(stage, features)
    }

    fn upsample(&self, stage: usize, features: &F) -> Result<UpsamplingMap> {
        (self.upsample)(stage, features)
    }
}

/// Runs `n` division stages; `features[i]` feeds stage `i`.
pub fn run<F, M>(model: &M, features: &[F], n: usize) -> Result<SdcTrace>
where
    M: StageHeads<F> + ?Sized,
{
    if features.len() < n + 1 {
        return Err(SdcError::Precondition(format!(
            "{} stages need {} feature inputs, got {}",
            n,
            n + 1,
            features.len()
        )));
    }
    let mut stages = Vec::with_capacity(n + 1);
    stages.push(StagePrediction::initial(model.count(0, &features[0])?));
    for (i, f) in features.iter().enumerate().take(n + 1).skip(1) {
        stages.push(StagePrediction::divided(
            model.count(i, f)?,
            model.divide(i, f)?,
            model.upsample(i, f)?,
        ));
    }
    merge_stages(stages)
}

/// Merges precomputed stage predictions into a trace.
pub fn merge_stages(stages: Vec<StagePrediction>) -> Result<SdcTrace> {
    let first = stages
        .first()
        .ok_or_else(|| SdcError::Precondition("no stage predictions".into()))?;
    let mut divs = vec![first.counts.clone()];
    for (i, stage) in stages.iter().enumerate().skip(1) {
        let (w, u) = match (&stage.mask, &stage.upmap) {
            (Some(w), Some(u)) => (w, u),
            _ => {
                return Err(SdcError::Precondition(format!(
                    "stage {i} lacks a division mask or upsampling map"
                )))
            }
        };
        let next = merge_step(&divs[i - 1], &stage.counts, w, u)?;
        divs.push(next);
    }
    Ok(SdcTrace { stages, divs })
}

/// Integral of the final division grid.
pub fn image_count(trace: &SdcTrace) -> f64 {
    trace.final_div().sum()
}

/// Final division grid summed back to the stage-0 resolution.
pub fn stage0_counts(trace: &SdcTrace) -> Result<CountGrid> {
    trace.final_div().block_sum_pow2(trace.num_divisions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cg(rows: &[&[f64]]) -> CountGrid {
        CountGrid::from_rows(rows).unwrap()
    }

    fn random_upmap(rng: &mut impl Rng, h: usize, w: usize) -> UpsamplingMap {
        let logits = Grid::new(h, w, (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        crate::grid::spatial_softmax2(&logits).unwrap()
    }

    #[test]
    fn guided_upsample_examples() {
        let four = cg(&[&[4.0]]);
        let out = guided_upsample(&four, &UpsamplingMap::uniform(2, 2).unwrap()).unwrap();
        assert_eq!(out.values(), &[1.0; 4]);
        let u = UpsamplingMap::from_rows(&[[0.5, 0.5], [0.0, 0.0]]).unwrap();
        assert_eq!(guided_upsample(&four, &u).unwrap().values(), &[2.0, 2.0, 0.0, 0.0]);
        assert!(guided_upsample(&four, &UpsamplingMap::uniform(4, 2).unwrap()).is_err());
    }

    #[test]
    fn guided_upsample_conserves_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let prev = CountGrid::new(3, 2, (0..6).map(|_| rng.random_range(0.0..20.0)).collect()).unwrap();
            let u = random_upmap(&mut rng, 6, 4);
            let out = guided_upsample(&prev, &u).unwrap();
            assert!((out.sum() - prev.sum()).abs() <= 1e-12 * prev.sum());
        }
    }

    #[test]
    fn merge_step_examples() {
        let prev = cg(&[&[4.0]]);
        let u = UpsamplingMap::uniform(2, 2).unwrap();
        let c = cg(&[&[2.0, 2.0], &[2.0, 2.0]]);

        let full = merge_step(&prev, &c, &DivisionMask::filled(2, 2, 1.0).unwrap(), &u).unwrap();
        assert_eq!(full, c);

        let none = merge_step(&prev, &c, &DivisionMask::filled(2, 2, 0.0).unwrap(), &u).unwrap();
        assert_eq!(none.values(), &[1.0; 4]);
        assert_eq!(none.sum(), 4.0);

        let w = DivisionMask::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(merge_step(&prev, &c, &w, &u).unwrap().values(), &[2.0, 1.0, 1.0, 2.0]);

        assert!(merge_step(&prev, &cg(&[&[1.0]]), &DivisionMask::filled(1, 1, 0.0).unwrap(), &u).is_err());
    }

    #[test]
    fn run_examples() {
        let c0 = cg(&[&[4.0]]);
        let c1 = cg(&[&[2.0, 2.0], &[2.0, 2.0]]);
        let heads = FnHeads {
            count: |i: usize, _: &()| Ok(if i == 0 { c0.clone() } else { c1.clone() }),
            divide: |_: usize, _: &()| DivisionMask::filled(2, 2, 1.0),
            upsample: |_: usize, _: &()| UpsamplingMap::uniform(2, 2),
        };
        let t = run(&heads, &[(), ()], 0).unwrap();
        assert_eq!(t.divs, vec![c0.clone()]);
        assert_eq!(image_count(&t), 4.0);

        let t = run(&heads, &[(), ()], 1).unwrap();
        assert_eq!(t.divs[1], c1);
        assert_eq!(image_count(&t), 8.0);

        assert!(run(&heads, &[()], 1).is_err());
    }

    #[test]
    fn image_count_examples() {
        let t = merge_stages(vec![StagePrediction::initial(cg(&[&[2.0, 1.0], &[1.0, 2.0]]))]).unwrap();
        assert_eq!(image_count(&t), 6.0);
        let t = merge_stages(vec![StagePrediction::initial(CountGrid::zeros(3, 3))]).unwrap();
        assert_eq!(image_count(&t), 0.0);
        let t = merge_stages(vec![StagePrediction::initial(cg(&[&[7.25]]))]).unwrap();
        assert_eq!(image_count(&t), 7.25);
    }

    #[test]
    fn two_stage_conservation_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c0 = CountGrid::new(2, 2, vec![5.0, 0.0, 12.5, 3.0]).unwrap();
        let stages = vec![
            StagePrediction::initial(c0.clone()),
            StagePrediction::divided(
                CountGrid::zeros(4, 4),
                DivisionMask::filled(4, 4, 0.0).unwrap(),
                random_upmap(&mut rng, 4, 4),
            ),
            StagePrediction::divided(
                CountGrid::zeros(8, 8),
                DivisionMask::filled(8, 8, 0.0).unwrap(),
                random_upmap(&mut rng, 8, 8),
            ),
        ];
        let t = merge_stages(stages).unwrap();
        assert_eq!(t.divs[2].dims(), (8, 8));
        assert!((image_count(&t) - c0.sum()).abs() < 1e-12);
        let back = stage0_counts(&t).unwrap();
        for (a, b) in back.values().iter().zip(c0.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_mask_is_rejected() {
        let stages = vec![
            StagePrediction::initial(cg(&[&[1.0]])),
            StagePrediction::initial(CountGrid::zeros(2, 2)),
        ];
        assert!(merge_stages(stages).is_err());
        assert!(merge_stages(vec![]).is_err());
    }

    #[test]
    fn trace_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let t = merge_stages(vec![
            StagePrediction::initial(cg(&[&[4.0]])),
            StagePrediction::divided(
                CountGrid::zeros(2, 2),
                DivisionMask::filled(2, 2, 0.5).unwrap(),
                UpsamplingMap::uniform(2, 2).unwrap(),
            ),
        ])
        .unwrap();
        t.save(dir.path()).unwrap();
        for name in ["c_0", "div_0", "c_1", "w_1", "u_1", "div_1"] {
            assert!(dir.path().join(format!("{name}.grid")).exists(), "{name}");
        }
        assert!(!dir.path().join("w_0.grid").exists());
        let div1 = crate::gridio::load_grid(dir.path().join("div_1.grid")).unwrap();
        assert_eq!(&div1, t.divs[1].as_grid());
    }

    proptest! {
        #[test]
        fn merge_is_bounded_and_linear_in_mask(
            seed in any::<u64>(),
            c_max in 1.0..30.0f64,
            cell in 0usize..16,
            delta in 0.0..1.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev = CountGrid::new(2, 2, (0..4).map(|_| rng.random_range(0.0..4.0 * c_max)).collect()).unwrap();
            let c = CountGrid::new(4, 4, (0..16).map(|_| rng.random_range(0.0..=c_max)).collect()).unwrap();
            let wv: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..=1.0)).collect();
            let w = DivisionMask::new(4, 4, wv.clone()).unwrap();
            let u = random_upmap(&mut rng, 4, 4);
            let out = merge_step(&prev, &c, &w, &u).unwrap();
            let hat = guided_upsample(&prev, &u).unwrap();
            for (i, &wi) in wv.iter().enumerate() {
                let lo = (1.0 - wi) * hat.values()[i];
                let hi = lo + wi * c.values()[i];
                let v = out.values()[i];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                prop_assert!(v <= hat.values()[i].max(c_max) + 1e-12);
            }
            // raising one weight moves that cell linearly toward c
            let mut wv2 = wv.clone();
            let new_w = (wv[cell] + delta).min(1.0);
            wv2[cell] = new_w;
            let out2 = merge_step(&prev, &c, &DivisionMask::new(4, 4, wv2).unwrap(), &u).unwrap();
            let expected = out.values()[cell] + (new_w - wv[cell]) * (c.values()[cell] - hat.values()[cell]);
            prop_assert!((out2.values()[cell] - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
            for i in (0..16).filter(|&i| i != cell) {
                prop_assert_eq!(out2.values()[i], out.values()[i]);
            }
        }

        #[test]
        fn zero_mask_conserves(seed in any::<u64>(), n in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c0 = CountGrid::new(1, 2, vec![rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).unwrap();
            let mut stages = vec![StagePrediction::initial(c0.clone())];
            let (mut h, mut w) = (1, 2);
            for _ in 0..n {
                h *= 2;
                w *= 2;
                stages.push(StagePrediction::divided(
                    CountGrid::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap(),
                    DivisionMask::filled(h, w, 0.0).unwrap(),
                    random_upmap(&mut rng, h, w),
                ));
            }
            let t = merge_stages(stages).unwrap();
            prop_assert_eq!(t.final_div().dims(), (1 << n, 2 << n));
            prop_assert!((image_count(&t) - c0.sum()).abs() <= 1e-9 * c0.sum().max(1e-300));
        }
    }
}

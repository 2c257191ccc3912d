//! Synthetic cell-counting images with a controlled number of cells in
//! every sub-region, plus the on-disk dataset layout and manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::grid::Grid;
use crate::gridio;
use crate::groundtruth::AnnotationSet;

/// Placement attempts per cell before overlap is accepted.
pub const PLACEMENT_ATTEMPTS: usize = 64;

/// Blobs are rendered out to this many σ.
const BLOB_RADIUS_SIGMAS: f64 = 4.0;

/// Per-sub-region count, uniform over the integers `lo..=hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountLaw {
    pub lo: u32,
    pub hi: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub sigma: f64,
    pub peak: f64,
    pub min_separation: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            peak: 0.8,
            min_separation: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub subregion: usize,
    pub count_law: CountLaw,
    pub blob: BlobSpec,
    pub seed: u64,
}

impl SynthSpec {
    /// 500 images of 256×256 with 0..=10 cells per 64×64 sub-region.
    pub fn default_train() -> Self {
        Self {
            n_images: 500,
            image_size: 256,
            subregion: 64,
            count_law: CountLaw { lo: 0, hi: 10 },
            blob: BlobSpec::default(),
            seed: 1,
        }
    }

    /// As the training set, with 0..=20 cells per sub-region.
    pub fn default_test() -> Self {
        Self {
            count_law: CountLaw { lo: 0, hi: 20 },
            seed: 2,
            ..Self::default_train()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(SdcError::InvalidValue(msg));
        if self.image_size == 0 || self.subregion == 0 || !self.image_size.is_multiple_of(self.subregion) {
            return invalid(format!(
                "image size {} must be a positive multiple of the sub-region {}",
                self.image_size, self.subregion
            ));
        }
        if self.count_law.lo > self.count_law.hi {
            return invalid(format!("count law lo {} > hi {}", self.count_law.lo, self.count_law.hi));
        }
        let b = self.blob;
        if !(b.sigma > 0.0 && b.sigma.is_finite()) || !(0.0..=1.0).contains(&b.peak) || !(b.min_separation >= 0.0) {
            return invalid(format!("bad blob parameters {b:?}"));
        }
        Ok(())
    }

    pub fn regions_per_side(&self) -> usize {
        self.image_size / self.subregion
    }

    /// Seed of image `index`: the first word of sub-stream `index` of `seed`.
    pub fn image_seed(&self, index: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng.next_u64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: Grid,
    pub annotations: AnnotationSet,
    /// Cells placed in each sub-region, row-major.
    pub subregion_counts: Vec<u32>,
}

fn far_enough(p: (f64, f64), placed: &[(f64, f64)], min_sep: f64) -> bool {
    let d2 = min_sep * min_sep;
    placed.iter().all(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) >= d2)
}

fn render_blobs(points: &[(f64, f64)], size: usize, blob: &BlobSpec) -> Grid {
    let mut data = vec![0.0; size * size];
    let radius = BLOB_RADIUS_SIGMAS * blob.sigma;
    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
    let clamp = |v: f64| v.clamp(0.0, (size - 1) as f64) as usize;
    for &(x, y) in points {
        let (r0, r1) = (clamp((y - radius).floor()), clamp((y + radius).ceil()));
        let (c0, c1) = (clamp((x - radius).floor()), clamp((x + radius).ceil()));
        for r in r0..=r1 {
            let dy = r as f64 + 0.5 - y;
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - x;
                data[r * size + c] += blob.peak * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.min(1.0));
    Grid::new(size, size, data).expect("finite intensities")
}

/// One image: a count per sub-region from the count law, cell centres
/// uniform inside their sub-region (kept `min_separation` apart when
/// possible) and rendered as Gaussian blobs clipped to `[0, 1]`.
pub fn gen_image(spec: &SynthSpec, rng: &mut impl Rng) -> Result<SynthImage> {
    spec.validate()?;
    let per_side = spec.regions_per_side();
    let s = spec.subregion as f64;
    let mut points = Vec::new();
    let mut counts = Vec::with_capacity(per_side * per_side);
    for j in 0..per_side {
        for k in 0..per_side {
            let n = rng.random_range(spec.count_law.lo..=spec.count_law.hi);
            counts.push(n);
            let (x0, y0) = (k as f64 * s, j as f64 * s);
            for _ in 0..n {
                let mut p = (0.0, 0.0);
                for _ in 0..PLACEMENT_ATTEMPTS {
                    p = (x0 + rng.random_range(0.0..s), y0 + rng.random_range(0.0..s));
                    if far_enough(p, &points, spec.blob.min_separation) {
                        break;
                    }
                }
                // after the last attempt the candidate is kept even if it overlaps
                points.push(p);
            }
        }
    }
    let image = render_blobs(&points, spec.image_size, &spec.blob);
    Ok(SynthImage {
        image,
        annotations: AnnotationSet::new(points)?,
        subregion_counts: counts,
    })
}

/// Regenerates image `index` of `spec` from its recorded seed.
pub fn gen_indexed(spec: &SynthSpec, index: usize) -> Result<SynthImage> {
    gen_image(spec, &mut ChaCha8Rng::seed_from_u64(spec.image_seed(index)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(SdcError::InvalidValue(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub annotations: String,
    pub seed: u64,
    pub subregion_counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub subregion: usize,
    pub train: SynthSpec,
    pub test: SynthSpec,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Directory the entry paths are relative to.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_image(&self, e: &ManifestEntry) -> Result<Grid> {
        gridio::load_grid(self.root.join(&e.image))
    }

    pub fn load_annotations(&self, e: &ManifestEntry) -> Result<AnnotationSet> {
        AnnotationSet::load_csv(self.root.join(&e.annotations))
    }
}

fn write_split(spec: &SynthSpec, split: Split, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join(split.name()))?;
    (0..spec.n_images)
        .into_par_iter()
        .map(|i| {
            let img = gen_indexed(spec, i)?;
            let image = format!("{}/img_{i:04}.grid", split.name());
            let annotations = format!("{}/img_{i:04}.csv", split.name());
            gridio::save_grid(out_dir.join(&image), &img.image)?;
            img.annotations.save_csv(out_dir.join(&annotations))?;
            Ok(ManifestEntry {
                split,
                image,
                annotations,
                seed: spec.image_seed(i),
                subregion_counts: img.subregion_counts,
            })
        })
        .collect()
}

/// Writes both splits under `out_dir` and the manifest at
/// `out_dir/manifest.json`.
pub fn gen_dataset(train: &SynthSpec, test: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if (train.image_size, train.subregion) != (test.image_size, test.subregion) {
        return Err(SdcError::InvalidValue(
            "train and test splits must share image and sub-region sizes".into(),
        ));
    }
    let mut entries = write_split(train, Split::Train, out_dir)?;
    entries.extend(write_split(test, Split::Test, out_dir)?);
    let manifest = Manifest {
        image_size: train.image_size,
        subregion: train.subregion,
        train: *train,
        test: *test,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

//! Python bindings. Grids cross the boundary as lists of row lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use sdc_core::groundtruth::{self, DensityKernel, IntervalPartition, PartitionScheme};
use sdc_core::losses::Mode;
use sdc_core::metrics::{self, EvalReport};
use sdc_core::synthcells::{self, Manifest, Split, SynthSpec, MANIFEST_FILE};
use sdc_core::theory::{self, ErrorProfile, Histogram, McConfig, SplitInstance};
use sdc_core::toymodel::{self, SdcModel, TrainConfig};
use sdc_core::{sdc, CountGrid, DivisionMask, Grid, SdcError, UpsamplingMap};

type Rows = Vec<Vec<f64>>;

fn to_py(e: SdcError) -> PyErr {
    match e {
        SdcError::Io(_) | SdcError::Json(_) | SdcError::Csv(_) | SdcError::Format(_) => PyOSError::new_err(e.to_string()),
        SdcError::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for sdc_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn grid(rows: &Rows) -> PyResult<Grid> {
    Grid::from_rows(rows).py()
}

fn counts(rows: &Rows) -> PyResult<CountGrid> {
    CountGrid::from_rows(rows).py()
}

fn scheme(name: &str) -> PyResult<PartitionScheme> {
    match name {
        "one-linear" => Ok(PartitionScheme::OneLinear),
        "two-linear" => Ok(PartitionScheme::TwoLinear),
        other => Err(PyValueError::new_err(format!(
            "unknown partition {other:?}; expected \"one-linear\" or \"two-linear\""
        ))),
    }
}

fn mode(name: &str) -> PyResult<Mode> {
    name.parse().py()
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().py()
}

fn open_manifest(data: PathBuf) -> PyResult<Manifest> {
    let path = if data.is_dir() { data.join(MANIFEST_FILE) } else { data };
    Manifest::load(path).py()
}

/// `(1 − w) ∘ ((div_prev ⊗ 1₂ₓ₂) ∘ u) + w ∘ c` for one division stage.
#[pyfunction]
fn merge_step(div_prev: Rows, counts_now: Rows, mask: Rows, upmap: Rows) -> PyResult<Rows> {
    let w = DivisionMask::from_rows(&mask).py()?;
    let u = UpsamplingMap::from_rows(&upmap).py()?;
    Ok(sdc::merge_step(&counts(&div_prev)?, &counts(&counts_now)?, &w, &u).py()?.as_grid().rows())
}

/// `(div_prev ⊗ 1₂ₓ₂) ∘ u`.
#[pyfunction]
fn guided_upsample(div_prev: Rows, upmap: Rows) -> PyResult<Rows> {
    let u = UpsamplingMap::from_rows(&upmap).py()?;
    Ok(sdc::guided_upsample(&counts(&div_prev)?, &u).py()?.as_grid().rows())
}

/// Softmax over every disjoint 2×2 block.
#[pyfunction]
fn spatial_softmax2(logits: Rows) -> PyResult<Rows> {
    Ok(sdc_core::grid::spatial_softmax2(&grid(&logits)?).py()?.as_grid().rows())
}

/// Ground-truth redistribution map between consecutive count levels.
#[pyfunction]
fn gt_upsampling_map(c_prev: Rows, c_cur: Rows) -> PyResult<Rows> {
    Ok(groundtruth::gt_upsampling_map(&counts(&c_prev)?, &counts(&c_cur)?).py()?.as_grid().rows())
}

/// Density map from `(x, y)` points: fixed Gaussian when `sigma` is given,
/// geometry-adaptive otherwise.
#[pyfunction]
#[pyo3(signature = (points, h, w, sigma=None))]
fn render_density(points: Vec<(f64, f64)>, h: usize, w: usize, sigma: Option<f64>) -> PyResult<Rows> {
    let ann = groundtruth::AnnotationSet::new(points).py()?;
    let kernel = sigma.map_or(DensityKernel::default(), |sigma| DensityKernel::Fixed { sigma });
    Ok(groundtruth::render_density(&ann, h, w, kernel).py()?.as_grid().rows())
}

/// Integrates a density map over `patch × patch` squares.
#[pyfunction]
fn patch_counts(density: Rows, patch: usize) -> PyResult<Rows> {
    let d = groundtruth::DensityMap::try_from(grid(&density)?).py()?;
    Ok(groundtruth::patch_counts(&d, patch).py()?.as_grid().rows())
}

#[pyfunction]
fn min_divisions(c_star: f64, c_max: f64) -> PyResult<usize> {
    theory::min_divisions(c_star, c_max).py()
}

#[pyfunction]
fn max_divisions(h: f64, w: f64, r: f64) -> PyResult<usize> {
    theory::max_divisions(h, w, r).py()
}

/// Side of the smallest square window whose count reaches `c_max`, if any.
#[pyfunction]
fn min_region_side(fine: Rows, c_max: f64) -> PyResult<Option<usize>> {
    Ok(theory::min_region_side(&counts(&fine)?, c_max))
}

#[pyfunction]
fn brute_force_min_divisions(fine: Rows, c_max: f64) -> PyResult<usize> {
    theory::brute_force_min_divisions(&counts(&fine)?, c_max).py()
}

/// Simulates the closed-set error bound for `f(x) = slope·x`.
#[pyfunction]
#[pyo3(signature = (slope, c_star, parts, c_max, trials=100_000, seed=0))]
fn verify_split_bound<'py>(
    py: Python<'py>,
    slope: f64,
    c_star: f64,
    parts: Vec<f64>,
    c_max: f64,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let split = SplitInstance::new(c_star, parts, c_max).py()?;
    let profile = ErrorProfile::linear(slope, c_star).py()?;
    let config = McConfig {
        trials,
        seed,
        ..McConfig::default()
    };
    let r = py.detach(|| theory::mc_verify_prop2(&profile, &split, &config)).py()?;
    let d = PyDict::new(py);
    d.set_item("trials", r.trials)?;
    d.set_item("emp_open", r.emp_open)?;
    d.set_item("emp_closed", r.emp_closed)?;
    d.set_item("bound", r.bound)?;
    d.set_item("se_open", r.se_open)?;
    d.set_item("se_closed", r.se_closed)?;
    d.set_item("holds", r.holds())?;
    Ok(d)
}

/// Jensen-Shannon divergence (natural log) of two histograms on shared edges.
#[pyfunction]
fn js_divergence(edges: Vec<f64>, p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let p = Histogram::new(edges.clone(), p).py()?;
    let q = Histogram::new(edges, q).py()?;
    theory::js_divergence(&p, &q).py()
}

#[pyfunction]
fn mae(preds: Vec<f64>, gts: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&preds, &gts).py()
}

/// Root mean squared error.
#[pyfunction]
fn mse(preds: Vec<f64>, gts: Vec<f64>) -> PyResult<f64> {
    metrics::mse(&preds, &gts).py()
}

#[pyfunction]
fn rmae(preds: Vec<f64>, gts: Vec<f64>) -> PyResult<f64> {
    metrics::rmae(&preds, &gts).py()
}

#[pyfunction]
fn game(pred: Rows, gt: Rows, level: u32) -> PyResult<f64> {
    metrics::game(&grid(&pred)?, &grid(&gt)?, level).py()
}

/// Writes the synthetic train and test splits under `out` and returns the
/// manifest path.
#[pyfunction]
#[pyo3(signature = (out, n_train=500, n_test=500, seed=None))]
fn gen_dataset(py: Python<'_>, out: PathBuf, n_train: usize, n_test: usize, seed: Option<u64>) -> PyResult<PathBuf> {
    let mut train = SynthSpec::default_train();
    let mut test = SynthSpec::default_test();
    train.n_images = n_train;
    test.n_images = n_test;
    if let Some(s) = seed {
        train.seed = s;
        test.seed = s.wrapping_add(1);
    }
    let dir = out.clone();
    py.detach(move || {
        std::fs::create_dir_all(&dir)?;
        synthcells::gen_dataset(&train, &test, &dir)
    })
    .py()?;
    Ok(out.join(MANIFEST_FILE))
}

/// Count-interval partition used by the classification counter.
#[pyclass(name = "Partition", frozen)]
struct PyPartition {
    inner: IntervalPartition,
}

#[pymethods]
impl PyPartition {
    #[new]
    #[pyo3(signature = (c_max, scheme="one-linear"))]
    fn new(c_max: f64, scheme: &str) -> PyResult<Self> {
        Ok(Self {
            inner: groundtruth::build_partition(c_max, self::scheme(scheme)?).py()?,
        })
    }

    #[getter]
    fn c_max(&self) -> f64 {
        self.inner.c_max()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn boundaries(&self) -> Vec<f64> {
        self.inner.boundaries().to_vec()
    }

    /// Representative count of every class; the overflow class maps to `c_max`.
    fn class_values(&self) -> Vec<f64> {
        self.inner.class_values()
    }

    fn count_to_class(&self, c: f64) -> PyResult<usize> {
        self.inner.count_to_class(c).py()
    }

    fn class_to_count(&self, m: usize) -> PyResult<f64> {
        self.inner.class_to_count(m).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Partition(c_max={}, scheme={:?}, classes={})",
            self.inner.c_max(),
            self.inner.scheme(),
            self.inner.num_classes()
        )
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("images", r.images)?;
    d.set_item("mae", r.mae)?;
    d.set_item("mse", r.mse)?;
    d.set_item("rmae", r.rmae)?;
    d.set_item("game", r.game.clone())?;
    let bins = r
        .bins
        .iter()
        .map(|b| {
            let row = PyDict::new(py);
            row.set_item("bin_lo", b.bin_lo)?;
            row.set_item("bin_hi", b.bin_hi)?;
            row.set_item("n", b.n)?;
            row.set_item("mae", b.mae)?;
            row.set_item("rmae", b.rmae)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("bins", bins)?;
    Ok(d)
}

/// The linear-head toy counter with shared counter, decider and upsampler.
#[pyclass(name = "Model")]
struct PyModel {
    inner: SdcModel,
}

#[pymethods]
impl PyModel {
    /// Trains on the training split of a generated dataset and returns the
    /// model with its per-epoch mean losses.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (data, mode="cls", stages=1, c_max=10.0, epochs=None, lr=None, seed=0))]
    fn fit(
        py: Python<'_>,
        data: PathBuf,
        mode: &str,
        stages: usize,
        c_max: f64,
        epochs: Option<usize>,
        lr: Option<f64>,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let defaults = TrainConfig::default();
        let config = TrainConfig {
            mode: self::mode(mode)?,
            stages,
            c_max,
            epochs: epochs.unwrap_or(defaults.epochs),
            lr: lr.unwrap_or(defaults.lr),
            seed,
            ..defaults
        };
        let manifest = open_manifest(data)?;
        let (model, curve) = py
            .detach(|| {
                let samples = toymodel::load_samples(&manifest, Split::Train, config.stages, config.gt_sigma)?;
                toymodel::fit(&samples, &config)
            })
            .py()?;
        Ok((Self { inner: model }, curve.iter().map(|e| e.total).collect()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SdcModel::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode().to_string()
    }

    #[getter]
    fn stages(&self) -> usize {
        self.inner.stages()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.parameters().len()
    }

    /// Runs `n` divisions (default: the trained depth) on one image whose
    /// sides are multiples of 64. Returns every merged division map and the
    /// image count.
    #[pyo3(signature = (image, n=None))]
    fn forward<'py>(&self, py: Python<'py>, image: Rows, n: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let n = n.unwrap_or(self.inner.stages());
        let trace = self.inner.forward(&grid(&image)?, n).py()?;
        let d = PyDict::new(py);
        d.set_item("divs", trace.divs.iter().map(|g| g.as_grid().rows()).collect::<Vec<_>>())?;
        d.set_item("count", sdc::image_count(&trace))?;
        Ok(d)
    }

    /// Metrics on one split of a dataset with `n` divisions.
    #[pyo3(signature = (data, split="test", n=None, bin_width=1.0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        split: &str,
        n: Option<usize>,
        bin_width: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let n = n.unwrap_or(self.inner.stages());
        let split = self::split(split)?;
        let manifest = open_manifest(data)?;
        let eval = py
            .detach(|| {
                let samples = toymodel::load_samples(&manifest, split, n, TrainConfig::default().gt_sigma)?;
                toymodel::evaluate(&self.inner, &samples, n, bin_width)
            })
            .py()?;
        report_dict(py, &eval.report)
    }

    fn __repr__(&self) -> String {
        format!("Model(mode={}, stages={})", self.inner.mode(), self.inner.stages())
    }
}

#[pymodule]
fn pysdc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPartition>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(merge_step, m)?)?;
    m.add_function(wrap_pyfunction!(guided_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_softmax2, m)?)?;
    m.add_function(wrap_pyfunction!(gt_upsampling_map, m)?)?;
    m.add_function(wrap_pyfunction!(render_density, m)?)?;
    m.add_function(wrap_pyfunction!(patch_counts, m)?)?;
    m.add_function(wrap_pyfunction!(min_divisions, m)?)?;
    m.add_function(wrap_pyfunction!(max_divisions, m)?)?;
    m.add_function(wrap_pyfunction!(min_region_side, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_min_divisions, m)?)?;
    m.add_function(wrap_pyfunction!(verify_split_bound, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(rmae, m)?)?;
    m.add_function(wrap_pyfunction!(game, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    Ok(())
}

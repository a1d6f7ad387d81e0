//! Python bindings: synthetic data, training, evaluation and cost analysis.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use stnet_core::analysis::{
    count_params_flops_with, evaluate_mae_mse, mean_confidence, model_grad_check, Checkpoint, TrainConfig, Trainer,
};
use stnet_core::data::{self, CrowdSample, Point, SceneSpec};
use stnet_core::scale_tree::{BlockKind, CrossScaleGates, GateMode, LeafAssignment};
use stnet_core::supervision::compose_batch;
use stnet_core::tensor::{GradCheckConfig, Tensor};

fn value_err<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `(shape, values)` of a tensor, NCHW row-major.
type Flat = (Vec<usize>, Vec<f64>);

fn flat(t: &Tensor) -> Flat {
    let s = t.shape();
    (vec![s.n, s.c, s.h, s.w], t.data().to_vec())
}

/// One image with its head annotations.
#[pyclass(name = "Scene", module = "stnet", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: CrowdSample,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn count(&self) -> usize {
        self.inner.count()
    }

    #[getter]
    fn is_background(&self) -> bool {
        self.inner.is_background
    }

    #[getter]
    fn points(&self) -> Vec<(f64, f64)> {
        self.inner.points.iter().map(|p| (p.x, p.y)).collect()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// `(shape, values)` of the image, NCHW row-major.
    fn image(&self) -> Flat {
        flat(&self.inner.image)
    }

    /// `(shape, values)` of the ground-truth density (zeros for backgrounds).
    fn density(&self) -> Flat {
        flat(&self.inner.density_or_zeros())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene({}x{}, count={}, background={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.count(),
            self.inner.is_background
        )
    }
}

fn unwrap_scenes(scenes: &[PyScene]) -> Vec<CrowdSample> {
    scenes.iter().map(|s| s.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (count, seed=0, width=96, height=96, min_count=0, max_count=20, clutter=0.5, channels=3))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
    min_count: usize,
    max_count: usize,
    clutter: f64,
    channels: usize,
) -> PyResult<Vec<PyScene>> {
    let spec = SceneSpec {
        width,
        height,
        count_range: (min_count, max_count),
        clutter_level: clutter,
        channels,
        seed,
        ..SceneSpec::default()
    };
    let samples = data::generate_dataset(&spec, count).map_err(value_err)?;
    Ok(samples.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Normalized Gaussian density map; returns `(shape, values)`.
#[pyfunction]
#[pyo3(signature = (points, height, width, sigma=data::DEFAULT_SIGMA))]
fn render_density(points: Vec<(f64, f64)>, height: usize, width: usize, sigma: f64) -> PyResult<Flat> {
    let pts: Vec<Point> = points.into_iter().map(|(x, y)| Point::new(x, y)).collect();
    Ok(flat(&data::render_density_gt(&pts, height, width, sigma).map_err(value_err)?))
}

#[pyfunction]
#[pyo3(signature = (manifest, sigma=data::DEFAULT_SIGMA))]
fn load_dataset(manifest: PathBuf, sigma: f64) -> PyResult<Vec<PyScene>> {
    let samples = data::read_dataset(&manifest, sigma).map_err(value_err)?;
    Ok(samples.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Write images, annotations and a manifest; returns the manifest path.
#[pyfunction]
fn save_dataset(dir: PathBuf, scenes: Vec<PyScene>) -> PyResult<PathBuf> {
    data::write_dataset(&dir, &unwrap_scenes(&scenes)).map_err(value_err)
}

/// Parameter/FLOP accounting of one enhancer block, as the one-line record.
#[pyfunction]
#[pyo3(signature = (kind="tree", d=18, height=8, width=8, leaf_assignment="reverse"))]
fn cost_report(kind: &str, d: usize, height: usize, width: usize, leaf_assignment: &str) -> PyResult<String> {
    let kind: BlockKind = kind.parse().map_err(value_err)?;
    let assign: LeafAssignment = leaf_assignment.parse().map_err(value_err)?;
    let r = count_params_flops_with(kind, d, height, width, assign).map_err(value_err)?;
    Ok(r.record())
}

/// Model, optimizer and schedule state; mirrors the CLI's `train`.
#[pyclass(name = "Trainer", module = "stnet", unsendable)]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `config` is `key = value` text; `overrides` are applied on top.
    #[new]
    #[pyo3(signature = (config="", **overrides))]
    fn new(config: &str, overrides: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut cfg = TrainConfig::parse(config).map_err(value_err)?;
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v.str()?.to_string()).map_err(value_err)?;
            }
        }
        cfg.validate().map_err(value_err)?;
        Ok(Self { inner: Trainer::new(&cfg).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(value_err)?;
        Ok(Self { inner: Trainer::resume(&ck).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(value_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        let p = self.inner.model.params();
        p.ids().map(|id| p.value(id).numel()).sum()
    }

    /// One epoch; returns its machine-readable record.
    #[pyo3(signature = (train, val=Vec::new(), background=Vec::new()))]
    fn run_epoch(&mut self, train: Vec<PyScene>, val: Vec<PyScene>, background: Vec<PyScene>) -> PyResult<String> {
        let log = self
            .inner
            .run_epoch(&unwrap_scenes(&train), &unwrap_scenes(&val), &unwrap_scenes(&background))
            .map_err(value_err)?;
        Ok(log.record())
    }

    /// `(mae, rmse)` in evaluation mode.
    fn evaluate(&mut self, scenes: Vec<PyScene>) -> PyResult<(f64, f64)> {
        self.inner.model.set_mode(GateMode::Eval);
        let m = evaluate_mae_mse(&self.inner.model, &unwrap_scenes(&scenes)).map_err(value_err)?;
        Ok((m.mae, m.mse))
    }

    /// Mean auxiliary confidence over `scenes`.
    fn confidence(&mut self, scenes: Vec<PyScene>) -> PyResult<f64> {
        self.inner.model.set_mode(GateMode::Eval);
        mean_confidence(&self.inner.model, &unwrap_scenes(&scenes)).map_err(value_err)
    }

    /// Predicted count and `(shape, values)` density for one scene.
    fn predict(&mut self, scene: &PyScene) -> PyResult<(f64, Flat)> {
        self.inner.model.set_mode(GateMode::Eval);
        let d = self.inner.model.predict(&scene.inner.image).map_err(value_err)?.density;
        Ok((d.sum(), flat(&d)))
    }

    /// Finite-difference check of the objective on small synthetic scenes;
    /// returns `(passed, checked, max_rel_error)`.
    #[pyo3(signature = (probes=32, seed=0, size=24))]
    fn grad_check(&self, probes: usize, seed: u64, size: usize) -> PyResult<(bool, usize, f64)> {
        let base = SceneSpec {
            width: size,
            height: size,
            count_range: (1, 6),
            head_radius_range: (1.0, 2.0),
            seed,
            ..SceneSpec::default()
        };
        let crowd = data::generate_dataset(&base, 4).map_err(value_err)?;
        let bg = data::generate_dataset(&SceneSpec { count_range: (0, 0), seed: seed + 1, ..base }, 2)
            .map_err(value_err)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let batch = compose_batch(&crowd, &bg, 4, 0.25, &mut rng).map_err(value_err)?;
        let r = model_grad_check(
            &self.inner.model,
            &batch,
            CrossScaleGates::fixed(0.35, 0.8),
            probes,
            seed,
            &GradCheckConfig::default(),
        )
        .map_err(value_err)?;
        Ok((r.passed(), r.checked_count(), r.max_rel_error()))
    }
}

#[pymodule]
fn stnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(render_density, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

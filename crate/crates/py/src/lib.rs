//! Python bindings. Tensors cross the boundary as nested lists shaped
//! `(batch, tokens, heads, channels)`.

use ndarray::Array4;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use urope::attention::{sequence_weights, urope_self_attention};
use urope::config::RunConfig;
use urope::geometry::{self, Mat3, Vec3};
use urope::rope::{self, RopeConfig, SamplingKind};
use urope::{analysis, scene, selftest};

type Nested4 = Vec<Vec<Vec<Vec<f64>>>>;

fn err(e: urope::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_array(x: Nested4) -> PyResult<Array4<f64>> {
    let shape = (
        x.len(),
        x.first().map_or(0, Vec::len),
        x.first().and_then(|a| a.first()).map_or(0, Vec::len),
        x.first().and_then(|a| a.first()).and_then(|a| a.first()).map_or(0, Vec::len),
    );
    let flat: Vec<f64> = x.into_iter().flatten().flatten().flatten().collect();
    Array4::from_shape_vec(shape, flat).map_err(|_| PyValueError::new_err("tensor must be a rectangular 4-level list"))
}

fn to_nested(x: &Array4<f64>) -> Nested4 {
    x.outer_iter()
        .map(|a| a.outer_iter().map(|b| b.outer_iter().map(|c| c.to_vec()).collect()).collect())
        .collect()
}

#[pyclass(name = "Camera", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCamera(geometry::Camera);

#[pymethods]
impl PyCamera {
    /// `rotation` is row-major 3x3, mapping world to camera: `x_cam = R x + t`.
    #[new]
    #[pyo3(signature = (fx, fy, cx, cy, rotation, translation, width, height, skew = 0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: u32,
        height: u32,
        skew: f64,
    ) -> PyResult<Self> {
        let r = Mat3::from_fn(|i, j| rotation[i][j]);
        let t = Vec3::from(translation);
        geometry::Camera::from_params(fx, fy, cx, cy, skew, r, t, (width, height)).map(Self).map_err(err)
    }

    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    /// `(u, v, w_tilde, valid)` of a world point.
    fn project(&self, point: [f64; 3]) -> (f64, f64, f64, bool) {
        let p = geometry::project_point(&self.0, &Vec3::from(point));
        (p.u, p.v, p.w_tilde, p.valid)
    }

    #[getter]
    fn image_size(&self) -> (u32, u32) {
        self.0.image_size()
    }

    fn __repr__(&self) -> String {
        let (w, h) = self.0.image_size();
        format!("Camera(fx={}, fy={}, cx={}, cy={}, size={w}x{h})", self.0.fx(), self.0.fy(), self.0.cx(), self.0.cy())
    }
}

#[pyclass(name = "Scene", frozen)]
struct PyScene(scene::Scene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (seed = 0, views = 2, width = 32, height = 32, patch = 8, jitter = 0.0, spread = 0.5))]
    fn generate(seed: u64, views: usize, width: u32, height: u32, patch: u32, jitter: f64, spread: f64) -> PyResult<Self> {
        let p = scene::SceneParams {
            seed,
            n_views: views,
            image_size: (width, height),
            patch_size: patch,
            focal_jitter: jitter,
            pose_spread: spread,
            ..Default::default()
        };
        scene::gen_scene(&p).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        scene::Scene::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn cameras(&self) -> Vec<PyCamera> {
        self.0.cameras.iter().cloned().map(PyCamera).collect()
    }

    #[getter]
    fn patch_centers(&self) -> Vec<Vec<(f64, f64)>> {
        self.0.patch_grid.clone()
    }
}

/// Lifts `(u, v)` of `src` to each depth and projects into `dst`.
#[pyfunction]
#[pyo3(signature = (src, dst, u, v, depths, eps = geometry::DEFAULT_PROJ_EPS))]
fn project_cross_view(
    src: &PyCamera,
    dst: &PyCamera,
    u: f64,
    v: f64,
    depths: Vec<f64>,
    eps: f64,
) -> PyResult<Vec<(f64, f64, f64, bool)>> {
    let rows = geometry::project_cross_view_eps(&src.0, &dst.0, u, v, &depths, eps).map_err(err)?;
    Ok(rows.into_iter().map(|p| (p.u, p.v, p.w_tilde, p.valid)).collect())
}

#[pyfunction]
fn fundamental_matrix(src: &PyCamera, dst: &PyCamera) -> PyResult<[[f64; 3]; 3]> {
    let f = geometry::fundamental_matrix(&src.0, &dst.0).map_err(err)?;
    Ok([0, 1, 2].map(|i| [0, 1, 2].map(|j| f[(i, j)])))
}

#[pyfunction]
#[pyo3(signature = (x, u, v, base = 100.0))]
fn rope_rotate_2d(x: Vec<f64>, u: f64, v: f64, base: f64) -> PyResult<Vec<f64>> {
    let cfg = RopeConfig::new(x.len()).and_then(|c| c.with_base(base)).map_err(err)?;
    rope::rope_rotate_2d(&x, u, v, &cfg).map_err(err)
}

/// `kind` is `uniform`, `log-uniform` or `lid`.
#[pyfunction]
fn anchor_schedule(kind: &str, d_min: f64, d_max: f64, count: usize) -> PyResult<Vec<f64>> {
    let kind = match kind {
        "uniform" => SamplingKind::Uniform,
        "log-uniform" => SamplingKind::LogUniform,
        "lid" => SamplingKind::Lid,
        other => return Err(PyValueError::new_err(format!("unknown schedule kind '{other}'"))),
    };
    rope::make_anchor_schedule(kind, d_min, d_max, count).map(|s| s.depths().to_vec()).map_err(err)
}

/// Multiview self-attention over the scene's patch tokens. `config` is
/// run-config JSON; heads and channels default to the tensor shape.
/// Returns `(out, weights)` with weights in sequence order `(B, H, L, L)`.
#[pyfunction]
#[pyo3(signature = (scene, q, k, v, config = None))]
fn attention(scene: &PyScene, q: Nested4, k: Nested4, v: Nested4, config: Option<&str>) -> PyResult<(Nested4, Nested4)> {
    let (q, k, v) = (to_array(q)?, to_array(k)?, to_array(v)?);
    let (batch, _, heads, c) = q.dim();
    let cfg = match config {
        Some(text) => RunConfig::from_json(text).map_err(err)?,
        None => RunConfig { heads, per_head_dim: c, ..Default::default() },
    };
    cfg.validate().map_err(err)?;
    let layout = scene.0.layout().map_err(err)?;
    let assignment = cfg.assignment().map_err(err)?;
    let rope_cfg = cfg.rope_config().map_err(err)?;
    let out = urope_self_attention(&q, &k, &v, &layout, &assignment, &rope_cfg, &cfg.attention_options())
        .map_err(err)?;
    let w = sequence_weights(&out.weights, batch, layout.n_views()).map_err(err)?;
    Ok((to_nested(&out.out), to_nested(&w)))
}

/// Entropy of head scores normalized by `ln H`; `None` for zero mass.
#[pyfunction]
fn normalized_entropy(scores: Vec<f64>) -> Option<f64> {
    analysis::normalized_entropy(&scores)
}

/// Runs the built-in checks; returns one report line per check.
#[pyfunction]
#[pyo3(signature = (full = false))]
fn run_selftest(full: bool) -> Vec<String> {
    let level = if full { selftest::Level::Full } else { selftest::Level::Quick };
    selftest::run(level).iter().map(ToString::to_string).collect()
}

#[pymodule]
fn urope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(project_cross_view, m)?)?;
    m.add_function(wrap_pyfunction!(fundamental_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(rope_rotate_2d, m)?)?;
    m.add_function(wrap_pyfunction!(anchor_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}

//! Python bindings for `privpf`.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`), one row
//! per time step.

use std::path::PathBuf;

use ndarray::Array2;
use num_bigint::BigUint;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use privpf::collect::{self, CollectOptions, Outcome, TransportKind};
use privpf::commit::{self, Challenge, Realization};
use privpf::drift::{self, IlConfig, PoolMode};
use privpf::estimator::{self, EstimatorModel as CoreModel, Preset, TrainConfig};
use privpf::feeder::{self, FeederModel, NewtonOptions, Season};
use privpf::lrs::{self, BoundsConfig};
use privpf::pipeline::{Pipeline as CorePipeline, RunConfig, Stage};

/// Matrix as a list of rows.
type Rows = Vec<Vec<f64>>;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn to_array(rows: Rows) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).map_err(err)
}

fn to_rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Distribution feeder topology with line impedances.
#[pyclass(module = "pyprivpf", skip_from_py_object)]
#[derive(Clone)]
struct Feeder {
    inner: FeederModel,
}

#[pymethods]
impl Feeder {
    #[staticmethod]
    fn radial(n_buses: usize, seed: u64) -> PyResult<Self> {
        Ok(Feeder { inner: FeederModel::radial(n_buses, seed).map_err(err)? })
    }

    #[staticmethod]
    fn ring(n_buses: usize, seed: u64) -> PyResult<Self> {
        Ok(Feeder { inner: FeederModel::ring(n_buses, seed).map_err(err)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Feeder { inner: FeederModel::parse(text).map_err(err)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.inner.n_buses()
    }

    fn load_bus_ids(&self) -> Vec<usize> {
        self.inner.load_bus_ids()
    }

    /// Solve every time step of `profile` and return `(v, theta)` for all buses.
    fn solve(&self, profile: &Profile) -> PyResult<(Rows, Rows)> {
        let y = feeder::build_admittance(&self.inner).map_err(err)?;
        let st = feeder::solve_power_flow(&self.inner, &y, &profile.inner, &NewtonOptions::default()).map_err(err)?;
        Ok((to_rows(&st.v), to_rows(&st.theta)))
    }

    /// Voltage magnitudes at the profile's buses, optionally with measurement noise.
    #[pyo3(signature = (profile, noise_pct=0.0, noise_seed=0))]
    fn load_voltages(&self, profile: &Profile, noise_pct: f64, noise_seed: u64) -> PyResult<Rows> {
        let y = feeder::build_admittance(&self.inner).map_err(err)?;
        let mut st = feeder::solve_power_flow(&self.inner, &y, &profile.inner, &NewtonOptions::default()).map_err(err)?;
        if noise_pct > 0.0 {
            st = feeder::inject_measurement_noise(&st, noise_pct, noise_seed).map_err(err)?;
        }
        let v = st.magnitudes_for(&profile.inner.bus_ids).ok_or_else(|| PyValueError::new_err("profile buses not in feeder"))?;
        Ok(to_rows(&v))
    }
}

/// Active/reactive load per bus and time step, in p.u.
#[pyclass(module = "pyprivpf", skip_from_py_object)]
#[derive(Clone)]
struct Profile {
    inner: feeder::LoadProfile,
}

#[pymethods]
impl Profile {
    #[staticmethod]
    #[pyo3(signature = (n_buses, samples, resolution_min=15, seed=0, season="winter"))]
    fn generate(n_buses: usize, samples: usize, resolution_min: u32, seed: u64, season: &str) -> PyResult<Self> {
        let season: Season = parse(season)?;
        Ok(Profile { inner: feeder::generate_profiles(n_buses, samples, resolution_min, seed, season).map_err(err)? })
    }

    #[getter]
    fn bus_ids(&self) -> Vec<usize> {
        self.inner.bus_ids.clone()
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples()
    }

    #[getter]
    fn p(&self) -> Rows {
        to_rows(&self.inner.p)
    }

    #[getter]
    fn q(&self) -> Rows {
        to_rows(&self.inner.q)
    }

    /// `[P | Q]` per time step, the estimator's input layout.
    fn features(&self) -> Rows {
        to_rows(&self.inner.features())
    }

    /// Apply per-meter local randomization drawn from `[a_lo, a_hi] x [c_lo, c_hi]`.
    #[pyo3(signature = (seed, bounds=None))]
    fn randomize(&self, seed: u64, bounds: Option<(f64, f64, f64, f64)>) -> PyResult<Profile> {
        let bounds = match bounds {
            Some((a_lo, a_hi, c_lo, c_hi)) => BoundsConfig::new(a_lo, a_hi, c_lo, c_hi).map_err(err)?,
            None => BoundsConfig::default(),
        };
        let params = lrs::sample_meter_params(&self.inner.bus_ids, &bounds, seed).map_err(err)?;
        Ok(Profile { inner: lrs::transform_profile(&self.inner, &params).map_err(err)? })
    }
}

#[pyfunction]
fn lrs_transform(x: f64, a: f64, c: f64) -> f64 {
    lrs::transform(x, a, c)
}

/// Commitment group parameters.
#[pyclass(module = "pyprivpf", skip_from_py_object)]
#[derive(Clone)]
struct Group {
    inner: commit::GroupParams,
}

fn big(s: &str) -> PyResult<BigUint> {
    s.parse().map_err(|_| PyValueError::new_err(format!("not a non-negative integer: {s}")))
}

fn challenge(b: u8) -> PyResult<Challenge> {
    Challenge::from_bit(b).ok_or_else(|| PyValueError::new_err("challenge must be 0 or 1"))
}

#[pymethods]
impl Group {
    /// `realization` is `toy-modp` or `secp256k1`.
    #[new]
    #[pyo3(signature = (realization="toy-modp", seed=0))]
    fn new(realization: &str, seed: u64) -> PyResult<Self> {
        let r: Realization = parse(realization)?;
        Ok(Group { inner: commit::setup(r, seed).map_err(err)? })
    }

    /// Exponent modulus as a decimal string.
    #[getter]
    fn order(&self) -> String {
        self.inner.p().to_string()
    }

    /// Commit to `x0` with blinding `r`; returns the encoded group element.
    /// Integers are passed as decimal strings.
    fn commit(&self, x0: &str, r: &str) -> PyResult<Vec<u8>> {
        let c = commit::commit(&big(x0)?, &big(r)?, &self.inner).map_err(err)?;
        self.inner.encode(&c.c).map_err(err)
    }

    fn respond(&self, r: &str, x0: &str, b: u8) -> PyResult<String> {
        Ok(commit::respond(&big(r)?, &big(x0)?, challenge(b)?, self.inner.p()).to_string())
    }

    fn verify(&self, c: Vec<u8>, s: &str, b: u8, x0: &str) -> PyResult<bool> {
        let c = self.inner.decode(&c).map_err(err)?;
        Ok(commit::verify(&c, &big(s)?, challenge(b)?, &big(x0)?, &self.inner))
    }
}

/// Collect voltages from one meter per column of `voltages` through the
/// index-proof handshake. Returns `(collected, rounds_per_meter, seconds)`.
#[pyfunction]
#[pyo3(signature = (voltages, group, dim=16, k=2, seed=0, tcp=false))]
fn collect_voltages(
    voltages: Rows,
    group: &Group,
    dim: usize,
    k: usize,
    seed: u64,
    tcp: bool,
) -> PyResult<(Rows, Vec<u64>, f64)> {
    let v = to_array(voltages)?;
    let sms = v
        .columns()
        .into_iter()
        .enumerate()
        .map(|(m, col)| collect::SmAgent::new(m, col.to_vec(), dim, k, seed.wrapping_add(m as u64 + 1)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let dso = collect::DsoAgent::new(group.inner.clone(), seed);
    let transport = if tcp { TransportKind::Tcp { port: 0 } } else { TransportKind::Channel };
    let opts = CollectOptions { transport, ..CollectOptions::default() };
    let data = collect::collect_dataset(&sms, &dso, v.nrows(), &opts).map_err(err)?;
    if data.records.iter().any(|r| r.outcome != Outcome::Accepted) {
        return Err(PyRuntimeError::new_err(format!("sessions failed for meters {:?}", data.failed())));
    }
    let rounds = data.records.iter().map(|r| r.rounds).collect();
    Ok((to_rows(&data.voltages), rounds, data.duration.as_secs_f64()))
}

/// Fully connected voltage estimator.
#[pyclass(module = "pyprivpf", skip_from_py_object)]
#[derive(Clone)]
struct Estimator {
    inner: CoreModel,
}

#[pymethods]
impl Estimator {
    /// `preset` is `ann-0`, `ann-1` or `ann-2`.
    #[new]
    #[pyo3(signature = (n_buses, preset="ann-2", seed=0))]
    fn new(n_buses: usize, preset: &str, seed: u64) -> PyResult<Self> {
        let preset: Preset = parse(preset)?;
        Ok(Estimator { inner: CoreModel::for_buses(preset, n_buses, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Estimator { inner: CoreModel::load(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    /// Train with a random 80/20 split. Returns `(train_loss, test_loss)` per epoch.
    #[pyo3(signature = (features, voltages, epochs=1500, lr=5e-6, batch_size=25, seed=0))]
    fn fit(
        &mut self,
        features: Rows,
        voltages: Rows,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, Option<f64>)>> {
        let (x, y) = (to_array(features)?, to_array(voltages)?);
        let cfg = TrainConfig { epochs, lr, batch_size, seed, ..TrainConfig::default() };
        let out = estimator::train(&mut self.inner, x.view(), y.view(), &cfg).map_err(err)?;
        Ok(out.report.curve.iter().map(|e| (e.train_loss, e.test_loss)).collect())
    }

    fn predict(&self, features: Rows) -> PyResult<Rows> {
        let x = to_array(features)?;
        Ok(to_rows(&self.inner.predict(x.view()).map_err(err)?))
    }

    /// Fine-tune a copy with `frozen` layers (1-based) held fixed.
    #[pyo3(signature = (features, voltages, frozen=vec![4, 5, 6], lr=5e-6, epochs=1000, round=0))]
    fn updated(
        &self,
        features: Rows,
        voltages: Rows,
        frozen: Vec<usize>,
        lr: f64,
        epochs: usize,
        round: u32,
    ) -> PyResult<Estimator> {
        let (x, y) = (to_array(features)?, to_array(voltages)?);
        let cfg = IlConfig { frozen, lr, max_epochs: epochs, ..IlConfig::default() };
        let out = drift::incremental_update(&self.inner, x.view(), y.view(), None, &cfg, round).map_err(err)?;
        Ok(Estimator { inner: out.model })
    }
}

#[pyfunction]
fn wasserstein(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    drift::wasserstein_1d(&a, &b).map_err(err)
}

/// Per-window distances and their sum between two voltage pools.
#[pyfunction]
#[pyo3(signature = (training, new, windows=10, per_node=false))]
fn drift_indicator(training: Rows, new: Rows, windows: usize, per_node: bool) -> PyResult<(Vec<f64>, f64)> {
    let mode = if per_node { PoolMode::PerNode } else { PoolMode::Flattened };
    let (a, b) = (to_array(training)?, to_array(new)?);
    let d = drift::drift_indicator(a.view(), b.view(), windows, mode).map_err(err)?;
    Ok((d.distances, d.tt))
}

/// Staged end-to-end run writing artifacts under `out`.
#[pyclass(module = "pyprivpf")]
struct Pipeline {
    inner: CorePipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (out, preset="desk-15min", config=None, seed=None))]
    fn new(out: PathBuf, preset: &str, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => RunConfig::from_toml(text).map_err(err)?,
            None => RunConfig::preset(preset).map_err(err)?,
        };
        if let Some(s) = seed {
            cfg.reseed(s);
        }
        cfg.out = out;
        Ok(Pipeline { inner: CorePipeline::new(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn preset_toml(name: &str) -> PyResult<String> {
        Ok(RunConfig::preset(name).map_err(err)?.to_toml())
    }

    #[pyo3(signature = (stage="all"))]
    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<()> {
        let stage: Stage = parse(stage)?;
        py.detach(|| self.inner.run(stage)).map_err(err)
    }
}

#[pymodule]
fn pyprivpf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Feeder>()?;
    m.add_class::<Profile>()?;
    m.add_class::<Group>()?;
    m.add_class::<Estimator>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(lrs_transform, m)?)?;
    m.add_function(wrap_pyfunction!(collect_voltages, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(drift_indicator, m)?)?;
    Ok(())
}

//! Python bindings: networks, certificates, dispatch and simulation.
//!
//! Vectors cross the boundary as lists of floats in the network's working
//! units unless a name ends in `_volts`.

use nalgebra::DVector;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use dcmg_roa_core::certify::{self as cert_mod, CertifyOptions};
use dcmg_roa_core::netmodel::{self, NetworkSpec};
use dcmg_roa_core::sim::{self, SimOptions};
use dcmg_roa_core::steadystate::{self, DispatchResult};
use dcmg_roa_core::Error;

create_exception!(
    dcmg_roa,
    InfeasibleError,
    PyException,
    "Certification or dispatch is infeasible."
);
create_exception!(
    dcmg_roa,
    SolverError,
    PyException,
    "Numerical solver or integrator failure."
);

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => InfeasibleError::new_err(e.to_string()),
        _ => SolverError::new_err(e.to_string()),
    }
}

/// A validated network description.
#[pyclass(name = "Network", module = "dcmg_roa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    spec: NetworkSpec,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            spec: netmodel::parse_network(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            spec: netmodel::load_network(std::path::Path::new(path)).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.spec).map_err(|e| to_py(e.into()))
    }

    /// Copy with the operating-box half-widths replaced.
    fn with_box(&self, current: f64, voltage: f64) -> PyResult<Self> {
        let mut spec = self.spec.clone();
        spec.operating_halfwidth = netmodel::HalfWidth::Uniform { current, voltage };
        spec.validate().map_err(to_py)?;
        Ok(Self { spec })
    }

    #[getter]
    fn name(&self) -> String {
        self.spec.name.clone()
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.spec.n_buses()
    }

    #[getter]
    fn n_sources(&self) -> usize {
        self.spec.n_sources()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.spec.n_states()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    /// Volts per working voltage unit.
    #[getter]
    fn voltage_scale(&self) -> PyResult<f64> {
        Ok(self.spec.working().map_err(to_py)?.voltage_scale())
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(name={:?}, buses={}, sources={}, states={})",
            self.spec.name,
            self.spec.n_buses(),
            self.spec.n_sources(),
            self.spec.n_states()
        )
    }
}

/// Lyapunov certificate with its per-load voltage floor.
#[pyclass(name = "Certificate", module = "dcmg_roa", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCertificate {
    cert: cert_mod::Certificate,
}

#[pymethods]
impl PyCertificate {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            cert: cert_mod::Certificate::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.cert.to_json().map_err(to_py)
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.cert.beta
    }

    #[getter]
    fn beta_capped(&self) -> bool {
        self.cert.beta_capped
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.cert.tau
    }

    #[getter]
    fn floor(&self) -> Vec<f64> {
        self.cert.floor.clone()
    }

    #[getter]
    fn floor_volts(&self) -> Vec<f64> {
        self.cert.floor_volts()
    }

    #[getter]
    fn cpl_buses(&self) -> Vec<String> {
        self.cert.cpl_buses.clone()
    }

    /// Lyapunov matrix as a list of rows.
    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        self.cert.p.clone()
    }

    /// Whether load voltages (working units) clear the floor.
    fn certifies(&self, v_load: Vec<f64>) -> bool {
        cert_mod::certify_point(&self.cert, &DVector::from_vec(v_load))
    }

    fn __repr__(&self) -> String {
        format!(
            "Certificate(beta={:.6}, floor_volts={:?})",
            self.cert.beta,
            self.cert.floor_volts()
        )
    }
}

/// Operating point chosen by the OPF or the floor-constrained synthesis.
#[pyclass(name = "Dispatch", module = "dcmg_roa", frozen)]
struct PyDispatch {
    result: DispatchResult,
}

#[pymethods]
impl PyDispatch {
    #[getter]
    fn u(&self) -> Vec<f64> {
        self.result.point.u.clone()
    }

    #[getter]
    fn u_volts(&self) -> Vec<f64> {
        let s = self.result.voltage_scale;
        self.result.point.u.iter().map(|u| u * s).collect()
    }

    #[getter]
    fn v_bus(&self) -> Vec<f64> {
        self.result.point.v_bus.clone()
    }

    #[getter]
    fn v_load(&self) -> Vec<f64> {
        self.result.point.v_load.clone()
    }

    #[getter]
    fn p_s(&self) -> Vec<f64> {
        self.result.point.p_s.clone()
    }

    #[getter]
    fn equilibrium(&self) -> Vec<f64> {
        self.result.point.x_e.clone()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.result.objective
    }

    /// `"exact"`, `"refined"` or `"inexact"`.
    #[getter]
    fn relaxation(&self) -> String {
        serde_json::to_value(self.result.relaxation)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    #[getter]
    fn relaxation_residual(&self) -> f64 {
        self.result.relaxation_residual
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.result).map_err(|e| to_py(e.into()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dispatch(u_volts={:?}, objective={:.6})",
            self.u_volts(),
            self.result.objective
        )
    }
}

fn working(net: &PyNetwork) -> PyResult<NetworkSpec> {
    net.spec.working().map_err(to_py)
}

/// Certify the network's operating box.
#[pyfunction]
fn certify(py: Python<'_>, network: &PyNetwork) -> PyResult<PyCertificate> {
    let spec = network.spec.clone();
    let (cert, _) = py
        .detach(move || cert_mod::certify_network(&spec, &CertifyOptions::default()))
        .map_err(to_py)?;
    Ok(PyCertificate { cert })
}

/// Floor-constrained dispatch.
#[pyfunction]
fn synthesize(
    py: Python<'_>,
    network: &PyNetwork,
    certificate: &PyCertificate,
) -> PyResult<PyDispatch> {
    dcmg_roa_core::report::check_pairing(&network.spec, &certificate.cert).map_err(to_py)?;
    let w = working(network)?;
    let cert = certificate.cert.clone();
    let result = py
        .detach(move || steadystate::solve_synthesis(&w, &cert, &CertifyOptions::default().tol))
        .map_err(to_py)?;
    Ok(PyDispatch { result })
}

/// Baseline OPF without the stability floor.
#[pyfunction]
fn solve_opf(py: Python<'_>, network: &PyNetwork) -> PyResult<PyDispatch> {
    let w = working(network)?;
    let result = py
        .detach(move || steadystate::solve_opf(&w, &CertifyOptions::default().tol))
        .map_err(to_py)?;
    Ok(PyDispatch { result })
}

/// Certificate and synthesised operating point in one call.
#[pyfunction]
fn run_pipeline(py: Python<'_>, network: &PyNetwork) -> PyResult<(PyCertificate, PyDispatch)> {
    let spec = network.spec.clone();
    let (cert, result, _) = py
        .detach(move || steadystate::run_algorithm1(&spec, &CertifyOptions::default()))
        .map_err(to_py)?;
    Ok((PyCertificate { cert }, PyDispatch { result }))
}

/// High-voltage power-flow solution for setpoints `u` (working units);
/// returns the bus voltages.
#[pyfunction]
fn power_flow(network: &PyNetwork, u: Vec<f64>) -> PyResult<Vec<f64>> {
    let w = working(network)?;
    check_setpoints(&w, &u)?;
    let pt = steadystate::power_flow(&w, &DVector::from_vec(u)).map_err(to_py)?;
    Ok(pt.v_bus)
}

fn check_setpoints(w: &NetworkSpec, u: &[f64]) -> PyResult<()> {
    if u.len() != w.n_sources() {
        return Err(PyValueError::new_err(format!(
            "{} setpoints given for {} sources",
            u.len(),
            w.n_sources()
        )));
    }
    Ok(())
}

/// Whether every operating-box vertex converges at setpoints `u`.
#[pyfunction]
fn box_converges(py: Python<'_>, network: &PyNetwork, u: Vec<f64>) -> PyResult<bool> {
    let w = working(network)?;
    check_setpoints(&w, &u)?;
    py.detach(move || sim::box_converges(&w, &DVector::from_vec(u), &SimOptions::for_network(&w)))
        .map_err(to_py)
}

/// Smallest single-source setpoint (working units) whose box converges.
#[pyfunction]
#[pyo3(signature = (network, width = None))]
fn borderline_setpoint(py: Python<'_>, network: &PyNetwork, width: Option<f64>) -> PyResult<f64> {
    let w = working(network)?;
    let width = width.unwrap_or(0.01 / w.voltage_scale());
    py.detach(move || sim::borderline_design(&w, None, width, &SimOptions::for_network(&w)))
        .map(|b| b.u_min)
        .map_err(to_py)
}

/// Simulate from `x0` to equilibrium at setpoints `u`; returns
/// `(status, times, states)`.
#[pyfunction]
#[pyo3(signature = (network, u, x0, t_max = 0.5))]
fn simulate(
    py: Python<'_>,
    network: &PyNetwork,
    u: Vec<f64>,
    x0: Vec<f64>,
    t_max: f64,
) -> PyResult<(String, Vec<f64>, Vec<Vec<f64>>)> {
    let w = working(network)?;
    check_setpoints(&w, &u)?;
    if x0.len() != w.n_states() {
        return Err(PyValueError::new_err(format!(
            "initial state has {} entries, the model has {} states",
            x0.len(),
            w.n_states()
        )));
    }
    let traj = py
        .detach(move || {
            let u = DVector::from_vec(u);
            let pt = steadystate::power_flow(&w, &u)?;
            let m = netmodel::build_dynamics(&w);
            let opts = SimOptions {
                t_max,
                ..SimOptions::for_network(&w)
            };
            sim::simulate(
                &m,
                &m.p_load,
                &u,
                &pt.x_vector(),
                &DVector::from_vec(x0),
                &opts,
            )
        })
        .map_err(to_py)?;
    let status = serde_json::to_value(traj.status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let states = traj
        .states
        .iter()
        .map(|x| x.iter().copied().collect())
        .collect();
    Ok((status, traj.times, states))
}

#[pymodule]
fn dcmg_roa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyCertificate>()?;
    m.add_class::<PyDispatch>()?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("SolverError", m.py().get_type::<SolverError>())?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(solve_opf, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(power_flow, m)?)?;
    m.add_function(wrap_pyfunction!(box_converges, m)?)?;
    m.add_function(wrap_pyfunction!(borderline_setpoint, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

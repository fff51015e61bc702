//! Python bindings. Structured results (reports, rate breakdowns, risk
//! estimates) come back as plain dicts.

use closeness::adversarial::{self, build_prior, sample_alt, sample_alt_smalltail, sample_null};
use closeness::harness::{self, FixedPair, ReportOptions};
use closeness::{rates, sampling, testers};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: closeness::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A probability vector over `0..d`.
#[pyclass(name = "Distribution", module = "closeness_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyDistribution {
    inner: closeness::DiscreteDistribution,
}

#[pymethods]
impl PyDistribution {
    /// Normalizes non-negative weights.
    #[new]
    fn new(weights: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: closeness::DiscreteDistribution::new(weights).map_err(err)?,
        })
    }

    /// `uniform:d`, `zipf:d:s`, `two-spike:k:h`, `two-level:d` or `dirichlet:d:alpha[:seed]`.
    #[staticmethod]
    fn preset(spec: &str) -> PyResult<Self> {
        Ok(Self {
            inner: harness::preset(spec).map_err(err)?,
        })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.inner.probs().to_vec()
    }

    fn l1_distance(&self, other: &PyDistribution) -> PyResult<f64> {
        self.inner.l1_distance(&other.inner).map_err(err)
    }

    /// Moves `l1 / 2` mass from the smallest coordinates onto the largest.
    fn transported(&self, l1: f64) -> PyResult<Self> {
        Ok(Self {
            inner: harness::transport(&self.inner, l1).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.d()
    }

    fn __repr__(&self) -> String {
        format!("Distribution(d={})", self.inner.d())
    }
}

/// The four sub-test multipliers and the level they were calibrated for.
#[pyclass(name = "Constants", module = "closeness_py", frozen)]
struct PyConstants {
    inner: testers::TestConstants,
}

#[pymethods]
impl PyConstants {
    #[new]
    fn new(c_inf: f64, c_23: f64, c_2: f64, c_1: f64, gamma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: testers::TestConstants::new(c_inf, c_23, c_2, c_1, gamma).map_err(err)?,
        })
    }

    #[getter]
    fn c_inf(&self) -> f64 {
        self.inner.c_inf
    }

    #[getter]
    fn c_23(&self) -> f64 {
        self.inner.c_23
    }

    #[getter]
    fn c_2(&self) -> f64 {
        self.inner.c_2
    }

    #[getter]
    fn c_1(&self) -> f64 {
        self.inner.c_1
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("plain struct")
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: testers::TestConstants =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Constants(c_inf={}, c_23={}, c_2={}, c_1={}, gamma={})",
            c.c_inf, c.c_23, c.c_2, c.c_1, c.gamma
        )
    }
}

/// The six split count vectors.
#[pyclass(name = "SplitCounts", module = "closeness_py", frozen)]
struct PySplitCounts {
    inner: sampling::SplitCounts,
}

#[pymethods]
impl PySplitCounts {
    #[getter]
    fn x(&self) -> Vec<Vec<u64>> {
        self.inner.x.to_vec()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<u64>> {
        self.inner.y.to_vec()
    }

    #[getter]
    fn k_bar(&self) -> u64 {
        self.inner.k_bar
    }

    #[getter]
    fn truncated(&self) -> bool {
        self.inner.truncated
    }
}

/// Draws `k` observations from each of `p` and `q` and splits them.
#[pyfunction]
#[pyo3(signature = (p, q, k, seed=0))]
fn sample_split_counts(
    p: &PyDistribution,
    q: &PyDistribution,
    k: u64,
    seed: u64,
) -> PyResult<PySplitCounts> {
    Ok(PySplitCounts {
        inner: sampling::sample_split_counts(
            &p.inner,
            &q.inner,
            k,
            closeness::RngStream::new(seed),
        )
        .map_err(err)?,
    })
}

/// Splits two raw label samples (values in `0..d`).
#[pyfunction]
#[pyo3(signature = (x, y, d, k, seed=0))]
fn split_samples(
    x: Vec<usize>,
    y: Vec<usize>,
    d: usize,
    k: u64,
    seed: u64,
) -> PyResult<PySplitCounts> {
    Ok(PySplitCounts {
        inner: sampling::split_and_poissonize(&x, &y, d, k, closeness::RngStream::new(seed))
            .map_err(err)?,
    })
}

#[pyfunction]
fn combined_test<'py>(
    py: Python<'py>,
    counts: &PySplitCounts,
    constants: &PyConstants,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &testers::combined_test(&counts.inner, &constants.inner))
}

/// Calibrates the multipliers on a null suite.
#[pyfunction]
#[pyo3(signature = (suite, k, gamma=0.1, n_mc=2000, seed=0))]
fn calibrate(
    py: Python<'_>,
    suite: Vec<PyDistribution>,
    k: u64,
    gamma: f64,
    n_mc: usize,
    seed: u64,
) -> PyResult<PyConstants> {
    let suite: Vec<_> = suite.into_iter().map(|d| d.inner).collect();
    let inner = py
        .detach(|| {
            testers::calibrate_constants(&suite, k, gamma, n_mc, closeness::RngStream::new(seed))
        })
        .map_err(err)?;
    Ok(PyConstants { inner })
}

/// Uniform, Zipf and two-level distributions of size `d`.
#[pyfunction]
fn default_suite(d: usize) -> PyResult<Vec<PyDistribution>> {
    Ok(harness::default_suite(d)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyDistribution { inner })
        .collect())
}

#[pyfunction]
#[pyo3(signature = (pi, k, u=rates::DEFAULT_U))]
fn upper_rate<'py>(
    py: Python<'py>,
    pi: &PyDistribution,
    k: u64,
    u: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rates::upper_rate(&pi.inner, k, u).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (pi, k, v=rates::DEFAULT_V))]
fn lower_rate<'py>(
    py: Python<'py>,
    pi: &PyDistribution,
    k: u64,
    v: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rates::lower_rate(&pi.inner, k, v).map_err(err)?)
}

#[pyfunction]
fn identity_rate<'py>(py: Python<'py>, pi: &PyDistribution, k: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rates::identity_rate(&pi.inner, k).map_err(err)?)
}

#[pyfunction]
fn dk16_rate<'py>(py: Python<'py>, pi: &PyDistribution, k: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rates::dk16_rate(&pi.inner, k).map_err(err)?)
}

#[pyfunction]
fn regime_table<'py>(py: Python<'py>, pi: &PyDistribution, k: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rates::regime_table(&pi.inner, k).map_err(err)?)
}

/// Type-I error on `(null, null)` and type-II error on `(alt, null)`.
#[pyfunction]
#[pyo3(signature = (constants, null, alt, k, n_trials=1000, seed=0))]
fn estimate_risk<'py>(
    py: Python<'py>,
    constants: &PyConstants,
    null: &PyDistribution,
    alt: &PyDistribution,
    k: u64,
    n_trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let null_pair = FixedPair::null(null.inner.clone());
    let alt_pair = FixedPair {
        p: alt.inner.clone(),
        q: null.inner.clone(),
    };
    let c = constants.inner;
    let risk = py
        .detach(|| {
            harness::estimate_risk(
                &c,
                &null_pair,
                &alt_pair,
                k,
                n_trials,
                closeness::RngStream::new(seed),
            )
        })
        .map_err(err)?;
    to_py(py, &risk)
}

/// Bisection for the empirical separation distance along tail transport.
#[pyfunction]
#[pyo3(signature = (constants, pi, k, gamma=0.1, n_trials_per_eval=400, seed=0))]
fn empirical_separation<'py>(
    py: Python<'py>,
    constants: &PyConstants,
    pi: &PyDistribution,
    k: u64,
    gamma: f64,
    n_trials_per_eval: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let c = constants.inner;
    let dir = harness::TailTransport::new(
        pi.inner.clone(),
        harness::TailTransport::capacity(&pi.inner),
    )
    .map_err(err)?;
    let est = py
        .detach(|| {
            harness::empirical_separation(
                &c,
                &dir,
                k,
                gamma,
                n_trials_per_eval,
                closeness::RngStream::new(seed),
            )
        })
        .map_err(err)?;
    to_py(py, &est)
}

#[pyfunction]
#[pyo3(signature = (pi, k, gamma=0.1, constants=None, separation_trials=None, seed=0))]
fn compare_report<'py>(
    py: Python<'py>,
    pi: &PyDistribution,
    k: u64,
    gamma: f64,
    constants: Option<&PyConstants>,
    separation_trials: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let c = constants.map(|c| c.inner);
    let options = ReportOptions {
        separation_trials,
        seed,
    };
    let report = py
        .detach(|| harness::compare_report(&pi.inner, k, gamma, c.as_ref(), &options))
        .map_err(err)?;
    to_py(py, &report)
}

/// The adversarial prior built on a reference distribution.
#[pyclass(name = "AdversarialPrior", module = "closeness_py", frozen)]
struct PyPrior {
    inner: adversarial::AdversarialPrior,
}

#[pymethods]
impl PyPrior {
    #[new]
    #[pyo3(signature = (pi, k, u=adversarial::DEFAULT_U, v=rates::DEFAULT_V, m=1, a=3.0, delta=0.125, gamma_lb=0.1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        pi: &PyDistribution,
        k: u64,
        u: f64,
        v: f64,
        m: usize,
        a: f64,
        delta: f64,
        gamma_lb: f64,
    ) -> PyResult<Self> {
        let params = adversarial::PriorParams {
            k,
            u,
            v,
            m,
            a,
            delta,
            gamma_lb,
        };
        Ok(Self {
            inner: build_prior(&pi.inner, params).map_err(err)?,
        })
    }

    #[getter]
    fn eps_star(&self) -> Vec<f64> {
        self.inner.eps_star.clone()
    }

    #[getter]
    fn index_set(&self) -> Vec<usize> {
        self.inner.a_set.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn barrho_bound(&self) -> f64 {
        adversarial::barrho_bound(&self.inner)
    }

    /// Constraint slacks of the perturbation profile.
    fn check<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &adversarial::check_eps(&self.inner))
    }

    /// One draw; `kind` is `null`, `alt` or `smalltail`.
    #[pyo3(signature = (kind="alt", seed=0))]
    fn sample<'py>(&self, py: Python<'py>, kind: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let s = closeness::RngStream::new(seed);
        let draw = match kind {
            "null" => sample_null(&self.inner, &s),
            "alt" => sample_alt(&self.inner, &s),
            "smalltail" => sample_alt_smalltail(&self.inner, &s),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown draw kind '{other}'"
                )))
            }
        }
        .map_err(err)?;
        to_py(py, &draw)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

#[pymodule]
fn closeness_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyConstants>()?;
    m.add_class::<PySplitCounts>()?;
    m.add_class::<PyPrior>()?;
    m.add_function(wrap_pyfunction!(sample_split_counts, m)?)?;
    m.add_function(wrap_pyfunction!(split_samples, m)?)?;
    m.add_function(wrap_pyfunction!(combined_test, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(default_suite, m)?)?;
    m.add_function(wrap_pyfunction!(upper_rate, m)?)?;
    m.add_function(wrap_pyfunction!(lower_rate, m)?)?;
    m.add_function(wrap_pyfunction!(identity_rate, m)?)?;
    m.add_function(wrap_pyfunction!(dk16_rate, m)?)?;
    m.add_function(wrap_pyfunction!(regime_table, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_risk, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_separation, m)?)?;
    m.add_function(wrap_pyfunction!(compare_report, m)?)?;
    Ok(())
}

//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists, built from the serde form of the core types.

use std::path::PathBuf;

use btforge::backends::BackendConfig;
use btforge::bt::{emit_tree, extract_tree_from_model_output, parse_tree, BehaviorTree};
use btforge::domain::{builtin_domain, render_pddl_like, render_state_triples, BuiltinDomain, Goal, WorldState};
use btforge::harness::{
    builtin_suite, dataset_jsonl, export_dataset, render_report, run_suite, AutoAccept, TaskType,
};
use btforge::schemes::{Generator, Scheme};
use btforge::sim::{simulate as run_sim, DEFAULT_TICK_BUDGET};
use btforge::validation::{check_exec, evaluate_completion};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A builtin domain with its initial scene.
#[pyclass(name = "Domain", module = "btforge", frozen)]
struct PyDomain {
    inner: BuiltinDomain,
}

#[pymethods]
impl PyDomain {
    #[staticmethod]
    fn builtin(id: &str) -> PyResult<Self> {
        builtin_domain(id).map(|inner| PyDomain { inner }).map_err(value_err)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.domain.id
    }

    #[getter]
    fn initial_state(&self) -> PyState {
        PyState {
            inner: self.inner.initial.clone(),
        }
    }

    #[getter]
    fn goals(&self) -> Vec<String> {
        self.inner.goals.iter().map(Goal::conjunction_text).collect()
    }

    fn render(&self) -> String {
        render_pddl_like(&self.inner.domain)
    }

    fn __repr__(&self) -> String {
        format!("Domain({:?})", self.inner.domain.id)
    }
}

/// A closed-world state: the set of true ground facts.
#[pyclass(name = "WorldState", module = "btforge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: WorldState,
}

#[pymethods]
impl PyState {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        WorldState::from_json(text).map(|inner| PyState { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn triples(&self) -> String {
        render_state_triples(&self.inner)
    }

    /// Whether a fact such as `hold(left_hand, clampgripper)` is true.
    fn holds(&self, fact: &str) -> PyResult<bool> {
        let goal = Goal::parse(fact).map_err(value_err)?;
        Ok(goal.conjuncts.iter().all(|p| self.inner.holds(p)))
    }

    fn __len__(&self) -> usize {
        self.inner.facts.len()
    }
}

/// A parsed behavior tree.
#[pyclass(name = "Tree", module = "btforge", frozen)]
struct PyTree {
    inner: BehaviorTree,
}

#[pymethods]
impl PyTree {
    /// Parses a tree document. With `model_output=True` the first fenced
    /// json block is extracted first.
    #[staticmethod]
    #[pyo3(signature = (text, model_output = false))]
    fn parse(text: &str, model_output: bool) -> PyResult<Self> {
        let tree = if model_output {
            extract_tree_from_model_output(text)
        } else {
            parse_tree(text)
        };
        tree.map(|inner| PyTree { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        emit_tree(&self.inner)
    }

    fn actions(&self) -> Vec<String> {
        self.inner.actions().iter().map(|a| a.to_string()).collect()
    }

    #[getter]
    fn action_leaf_count(&self) -> usize {
        self.inner.action_leaf_count()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.root.node_count()
    }

    fn __repr__(&self) -> String {
        format!("Tree({:?}, {} nodes)", self.inner.root.name(), self.inner.root.node_count())
    }
}

fn start_state(domain: &PyDomain, state: Option<&PyState>) -> WorldState {
    state.map_or_else(|| domain.inner.initial.clone(), |s| s.inner.clone())
}

/// Well-formedness check of raw text: `{"pass": bool, "violations": [...]}`.
#[pyfunction]
fn validate<'py>(py: Python<'py>, text: &str, domain: &PyDomain) -> PyResult<Bound<'py, PyAny>> {
    let v = check_exec(text, &domain.inner.domain);
    to_py(py, &serde_json::json!({"pass": v.pass, "violations": v.report.violations}))
}

/// Ticks `tree` from `state` (default: the domain's initial scene) and
/// returns the trace as a dict.
#[pyfunction]
#[pyo3(signature = (tree, domain, state = None, budget = DEFAULT_TICK_BUDGET))]
fn simulate<'py>(
    py: Python<'py>,
    tree: &PyTree,
    domain: &PyDomain,
    state: Option<&PyState>,
    budget: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let trace = run_sim(&tree.inner, &start_state(domain, state), &domain.inner.domain, budget);
    to_py(py, &trace)
}

/// Exec/LC/SR verdicts for a model completion.
#[pyfunction]
#[pyo3(signature = (text, domain, goal, state = None))]
fn evaluate<'py>(
    py: Python<'py>,
    text: &str,
    domain: &PyDomain,
    goal: &str,
    state: Option<&PyState>,
) -> PyResult<Bound<'py, PyAny>> {
    let goal = Goal::parse(goal).map_err(value_err)?;
    let m = evaluate_completion(text, &start_state(domain, state), &goal, &domain.inner.domain);
    to_py(py, &m)
}

fn backend_config(value: &str) -> PyResult<BackendConfig> {
    if value == "oracle" {
        return Ok(BackendConfig::oracle());
    }
    match value.strip_prefix("scripted:") {
        Some(path) => Ok(BackendConfig::scripted(PathBuf::from(path))),
        None => Err(PyValueError::new_err(format!(
            "unknown backend {value:?}; use oracle or scripted:<transcript>"
        ))),
    }
}

/// Runs one generation scheme for a subgoal. Returns `(tree or None,
/// session dict)`. The human-in-the-loop scheme accepts every candidate
/// that has a tree.
#[pyfunction]
#[pyo3(signature = (scheme, subgoal, domain, backend = "oracle", state = None))]
fn generate<'py>(
    py: Python<'py>,
    scheme: &str,
    subgoal: &str,
    domain: &PyDomain,
    backend: &str,
    state: Option<&PyState>,
) -> PyResult<(Option<PyTree>, Bound<'py, PyAny>)> {
    let scheme: Scheme = scheme.parse().map_err(value_err)?;
    let goal = Goal::parse(subgoal).map_err(value_err)?;
    let backend = backend_config(backend)?.build().map_err(value_err)?;
    let initial = start_state(domain, state);
    let mut auto = AutoAccept::default();
    let (session, result) = py.detach(|| {
        Generator::new(backend.as_ref()).generate(scheme, &goal, &initial, &domain.inner.domain, Some(&mut auto))
    });
    Ok((result.ok().map(|inner| PyTree { inner }), to_py(py, &session)?))
}

/// Runs a builtin suite with the oracle backend and returns the markdown
/// report.
#[pyfunction]
#[pyo3(signature = (suite, schemes = None, stable = true))]
fn eval_suite(py: Python<'_>, suite: &str, schemes: Option<Vec<String>>, stable: bool) -> PyResult<String> {
    let suite = builtin_suite(suite).map_err(value_err)?;
    let schemes = match schemes {
        Some(list) => list.iter().map(|s| s.parse::<Scheme>().map_err(value_err)).collect::<PyResult<Vec<_>>>()?,
        None => Scheme::ALL.to_vec(),
    };
    let backend = BackendConfig::oracle().build().map_err(value_err)?;
    let reports = py.detach(|| {
        schemes
            .iter()
            .map(|&s| {
                let mut auto = AutoAccept::default();
                run_suite(&suite, s, &Generator::new(backend.as_ref()), Some(&mut auto))
            })
            .collect::<Vec<_>>()
    });
    Ok(render_report(&reports, stable))
}

/// Runs a builtin suite with the oracle and returns the exported dataset as
/// JSON lines.
#[pyfunction]
fn export_suite_dataset(py: Python<'_>, suite: &str, task_type: &str) -> PyResult<String> {
    let suite = builtin_suite(suite).map_err(value_err)?;
    let task_type: TaskType = task_type.parse().map_err(value_err)?;
    let scheme = match task_type {
        TaskType::UnitTree => Scheme::Recursive,
        TaskType::OneStep => Scheme::OneStep,
    };
    let backend = BackendConfig::oracle().build().map_err(value_err)?;
    let report = py.detach(|| run_suite(&suite, scheme, &Generator::new(backend.as_ref()), None));
    let samples = export_dataset(&report.sessions, task_type).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(dataset_jsonl(&samples))
}

#[pymodule]
fn btforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDomain>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyTree>()?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(eval_suite, m)?)?;
    m.add_function(wrap_pyfunction!(export_suite_dataset, m)?)?;
    m.add("REFERENCE_TREE", btforge::data::REFERENCE_TREE)?;
    Ok(())
}

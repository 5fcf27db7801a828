//! Python bindings: thin wrappers around the core library working on
//! plain Python lists and dicts, with analysis results passed as JSON.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crt_estimands::{
    self as core, AnalyzeOptions, AveragingF, BoundaryPolicy, ClusterRecord, Measure,
    ObservedDataset, OutcomeKind, PotentialClusterRecord, PotentialOutcomeDataset, Weighting,
};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_weighting(s: &str) -> PyResult<Weighting> {
    match s {
        "participant" => Ok(Weighting::ParticipantAverage),
        "cluster" => Ok(Weighting::ClusterAverage),
        _ => Err(err("weighting must be 'participant' or 'cluster'")),
    }
}

fn parse_measure(s: &str) -> PyResult<Measure> {
    match s {
        "difference" => Ok(Measure::Difference),
        "odds_ratio" => Ok(Measure::OddsRatio),
        _ => Err(err("measure must be 'difference' or 'odds_ratio'")),
    }
}

fn infer_kind(values: impl Iterator<Item = f64>) -> OutcomeKind {
    let mut binary = true;
    for v in values {
        if v != 0.0 && v != 1.0 {
            binary = false;
        }
    }
    if binary {
        OutcomeKind::Binary
    } else {
        OutcomeKind::Continuous
    }
}

fn observed_from_py(clusters: Vec<(String, bool, Vec<f64>)>) -> PyResult<ObservedDataset> {
    let kind = infer_kind(clusters.iter().flat_map(|(_, _, y)| y.iter().copied()));
    let records = clusters
        .into_iter()
        .map(|(cluster_id, treatment, outcomes)| ClusterRecord {
            cluster_id,
            treatment,
            outcomes,
        })
        .collect();
    ObservedDataset::new(records, kind).map_err(err)
}

fn potential_from_py(
    clusters: Vec<(String, Vec<f64>, Vec<f64>)>,
) -> PyResult<PotentialOutcomeDataset> {
    let kind = infer_kind(
        clusters
            .iter()
            .flat_map(|(_, y1, y0)| y1.iter().chain(y0.iter()).copied()),
    );
    let records = clusters
        .into_iter()
        .map(|(cluster_id, y1, y0)| PotentialClusterRecord { cluster_id, y1, y0 })
        .collect();
    PotentialOutcomeDataset::new(records, kind).map_err(err)
}

fn result_to_dict<'py>(
    py: Python<'py>,
    r: &core::EstimateResult,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("estimate", r.estimate)?;
    d.set_item("link_scale_estimate", r.link_scale_estimate)?;
    d.set_item("se_link", r.se_link)?;
    d.set_item("ci_low", r.ci_low)?;
    d.set_item("ci_high", r.ci_high)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item("df", r.df)?;
    Ok(d)
}

/// Oracle marginal estimand from a potential-outcome table given as
/// [(cluster_id, y1_list, y0_list)].
#[pyfunction]
fn marginal_estimand(
    clusters: Vec<(String, Vec<f64>, Vec<f64>)>,
    weighting: &str,
    measure: &str,
) -> PyResult<f64> {
    let po = potential_from_py(clusters)?;
    core::marginal_estimand(&po, parse_weighting(weighting)?, parse_measure(measure)?)
        .map_err(err)
}

/// Oracle cluster-specific estimand; odds ratios averaged on the log
/// scale.
#[pyfunction]
fn cluster_specific_estimand(
    clusters: Vec<(String, Vec<f64>, Vec<f64>)>,
    weighting: &str,
    measure: &str,
) -> PyResult<f64> {
    let po = potential_from_py(clusters)?;
    core::cluster_specific_estimand(
        &po,
        parse_weighting(weighting)?,
        parse_measure(measure)?,
        AveragingF::Log,
    )
    .map_err(err)
}

/// Precision-weighted difference with cluster weights n/(1+(n-1)*rho).
#[pyfunction]
fn precision_weighted_estimand(
    clusters: Vec<(String, Vec<f64>, Vec<f64>)>,
    rho: f64,
) -> PyResult<f64> {
    let po = potential_from_py(clusters)?;
    core::precision_weighted_estimand(&po, rho).map_err(err)
}

/// Independence-estimating-equations estimate from observed clusters
/// given as [(cluster_id, treated, outcome_list)].
#[pyfunction]
fn iee_estimate<'py>(
    py: Python<'py>,
    clusters: Vec<(String, bool, Vec<f64>)>,
    weighting: &str,
    measure: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let data = observed_from_py(clusters)?;
    let r = core::iee_estimate(&data, parse_weighting(weighting)?, parse_measure(measure)?)
        .map_err(err)?;
    result_to_dict(py, &r)
}

/// Marginal cluster-level summary estimate.
#[pyfunction]
fn marginal_summary_estimate<'py>(
    py: Python<'py>,
    clusters: Vec<(String, bool, Vec<f64>)>,
    weighting: &str,
    measure: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let data = observed_from_py(clusters)?;
    let r = core::marginal_summary_estimate(
        &data,
        parse_weighting(weighting)?,
        parse_measure(measure)?,
    )
    .map_err(err)?;
    result_to_dict(py, &r)
}

/// Cluster-specific summary estimate; boundary clusters are an error
/// unless continuity_correction is set.
#[pyfunction]
#[pyo3(signature = (clusters, weighting, measure, continuity_correction = false))]
fn cluster_specific_summary_estimate<'py>(
    py: Python<'py>,
    clusters: Vec<(String, bool, Vec<f64>)>,
    weighting: &str,
    measure: &str,
    continuity_correction: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let data = observed_from_py(clusters)?;
    let policy = if continuity_correction {
        BoundaryPolicy::ContinuityCorrection
    } else {
        BoundaryPolicy::Error
    };
    let r = core::cluster_specific_summary_estimate(
        &data,
        parse_weighting(weighting)?,
        parse_measure(measure)?,
        policy,
    )
    .map_err(err)?;
    result_to_dict(py, &r)
}

/// Full estimator grid as a JSON string (schema_version 1).
#[pyfunction]
fn analyze_json(clusters: Vec<(String, bool, Vec<f64>)>) -> PyResult<String> {
    let data = observed_from_py(clusters)?;
    let grid = core::analyze(&data, &AnalyzeOptions::default()).map_err(err)?;
    core::render_json(&grid).map_err(err)
}

#[pymodule]
fn crt_estimands_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(marginal_estimand, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_specific_estimand, m)?)?;
    m.add_function(wrap_pyfunction!(precision_weighted_estimand, m)?)?;
    m.add_function(wrap_pyfunction!(iee_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_summary_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_specific_summary_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_json, m)?)?;
    Ok(())
}

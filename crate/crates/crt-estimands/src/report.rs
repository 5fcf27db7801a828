//! CSV ingestion and the analysis grid: every estimator row run against
//! one observed dataset, rendered as an aligned text table or JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    ClusterRecord, EstimateResult, Measure, ObservedDataset, OutcomeKind, PotentialClusterRecord,
    PotentialOutcomeDataset, Weighting,
};
use crate::engine::{Link, SandwichSpec};
use crate::error::{Error, Result};
use crate::gee::{gee_fit_with, RhoMode};
use crate::iee::iee_estimate_with;
use crate::mixed::{glmm_logit_fit, lmm_fit, GlmmOptions};
use crate::summary::{
    cluster_specific_summary_estimate, marginal_summary_estimate, BoundaryPolicy,
};

fn csv_kind_of(values: &[f64]) -> OutcomeKind {
    if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        OutcomeKind::Binary
    } else {
        OutcomeKind::Continuous
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found_cols: Vec<&str> = found.iter().collect();
    if found_cols != expected {
        return Err(Error::BadHeader {
            expected: expected.join(","),
            found: found_cols.join(","),
        });
    }
    Ok(())
}

fn parse_field(record: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<f64> {
    let raw = record.get(idx).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field '{name}'"),
    })?;
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("field '{name}' is not numeric: '{raw}'"),
    })
}

fn record_line(record: &csv::StringRecord, fallback: usize) -> usize {
    record
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback)
}

/// Load an observed dataset from a CSV with header
/// `cluster_id,treatment,outcome`. Clusters are grouped by id in order
/// of first appearance; the outcome kind is binary when every outcome
/// is 0 or 1, continuous otherwise.
pub fn load_observed_csv(path: &Path) -> Result<ObservedDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    check_header(reader.headers()?, &["cluster_id", "treatment", "outcome"])?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (bool, Vec<f64>)> = BTreeMap::new();
    let mut all = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let record = row?;
        let line = record_line(&record, i + 2);
        let id = record
            .get(0)
            .ok_or_else(|| Error::Parse {
                line,
                msg: "missing field 'cluster_id'".into(),
            })?
            .trim()
            .to_string();
        let z = match record.get(1).map(str::trim) {
            Some("0") => false,
            Some("1") => true,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("treatment must be 0 or 1, got '{}'", other.unwrap_or("")),
                })
            }
        };
        let y = parse_field(&record, 2, line, "outcome")?;
        all.push(y);
        match groups.get_mut(&id) {
            Some((existing_z, ys)) => {
                if *existing_z != z {
                    return Err(Error::MixedTreatment { cluster_id: id });
                }
                ys.push(y);
            }
            None => {
                order.push(id.clone());
                groups.insert(id, (z, vec![y]));
            }
        }
    }
    if order.is_empty() {
        return Err(Error::NoData);
    }
    let kind = csv_kind_of(&all);
    let clusters = order
        .into_iter()
        .map(|id| {
            let (treatment, outcomes) = groups.remove(&id).unwrap();
            ClusterRecord {
                cluster_id: id,
                treatment,
                outcomes,
            }
        })
        .collect();
    ObservedDataset::new(clusters, kind)
}

/// Load a potential-outcome table from a CSV with header
/// `cluster_id,y1,y0`, inferring the outcome kind from the values.
pub fn load_potential_csv(path: &Path) -> Result<PotentialOutcomeDataset> {
    load_potential_rows(path, None)
}

/// As `load_potential_csv` with the outcome kind enforced rather than
/// inferred; binary mode rejects values outside {0, 1}.
pub fn load_potential_csv_as(path: &Path, kind: OutcomeKind) -> Result<PotentialOutcomeDataset> {
    load_potential_rows(path, Some(kind))
}

fn load_potential_rows(
    path: &Path,
    kind: Option<OutcomeKind>,
) -> Result<PotentialOutcomeDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    check_header(reader.headers()?, &["cluster_id", "y1", "y0"])?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let record = row?;
        let line = record_line(&record, i + 2);
        let id = record
            .get(0)
            .ok_or_else(|| Error::Parse {
                line,
                msg: "missing field 'cluster_id'".into(),
            })?
            .trim()
            .to_string();
        let y1 = parse_field(&record, 1, line, "y1")?;
        let y0 = parse_field(&record, 2, line, "y0")?;
        all.push(y1);
        all.push(y0);
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(y1);
        entry.1.push(y0);
    }
    if order.is_empty() {
        return Err(Error::NoData);
    }
    let kind = kind.unwrap_or_else(|| csv_kind_of(&all));
    let clusters = order
        .into_iter()
        .map(|id| {
            let (y1, y0) = groups.remove(&id).unwrap();
            PotentialClusterRecord {
                cluster_id: id,
                y1,
                y0,
            }
        })
        .collect();
    PotentialOutcomeDataset::new(clusters, kind)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    /// Defaults to odds ratio for binary outcomes, difference otherwise.
    pub measure: Option<Measure>,
    pub min_cluster_size: Option<usize>,
    pub max_cluster_size: Option<usize>,
    pub boundary_policy: BoundaryPolicy,
    /// Fay-Graubard bound for the IEE and GEE sandwich.
    pub fg_bound: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            measure: None,
            min_cluster_size: None,
            max_cluster_size: None,
            boundary_policy: BoundaryPolicy::Error,
            fg_bound: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub estimand: String,
    pub estimator: String,
    pub result: Option<EstimateResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisGrid {
    pub schema_version: u32,
    pub measure: Measure,
    pub n_clusters: usize,
    pub n_participants: usize,
    pub rows: Vec<AnalysisRow>,
}

const ESTIMAND_MG_PA: &str = "Marginal, participant-average";
const ESTIMAND_CS_PA: &str = "Cluster-specific, participant-average";
const ESTIMAND_MG_CA: &str = "Marginal, cluster-average";
const ESTIMAND_CS_CA: &str = "Cluster-specific, cluster-average";

/// Run the full estimator grid: four estimand blocks, eight estimator
/// rows, cluster-robust variances for IEE and GEE, Huber-White for the
/// cluster-level summaries, model-based for the mixed models.
pub fn analyze(data: &ObservedDataset, options: &AnalyzeOptions) -> Result<AnalysisGrid> {
    let data = data.filter_by_size(options.min_cluster_size, options.max_cluster_size)?;
    let measure = options.measure.unwrap_or(match data.outcome_kind() {
        OutcomeKind::Binary => Measure::OddsRatio,
        OutcomeKind::Continuous => Measure::Difference,
    });
    let fg = SandwichSpec::fay_graubard(options.fg_bound)?;
    let link = match measure {
        Measure::Difference => Link::Identity,
        Measure::OddsRatio => Link::Logit,
    };
    let policy = options.boundary_policy;

    let mixed_label = match data.outcome_kind() {
        OutcomeKind::Binary => "Mixed-effects logistic regression",
        OutcomeKind::Continuous => "Linear mixed model",
    };
    type Cell<'a> = (
        &'static str,
        &'static str,
        Box<dyn Fn(&ObservedDataset) -> Result<EstimateResult> + 'a>,
    );
    let cells: Vec<Cell> = vec![
        (
            ESTIMAND_MG_PA,
            "IEEs (unweighted)",
            Box::new(|d| iee_estimate_with(d, Weighting::ParticipantAverage, measure, &fg)),
        ),
        (
            ESTIMAND_MG_PA,
            "Cluster-level summaries (weighted)",
            Box::new(|d| marginal_summary_estimate(d, Weighting::ParticipantAverage, measure)),
        ),
        (
            ESTIMAND_MG_PA,
            "GEEs with exchangeable correlation",
            Box::new(|d| gee_fit_with(d, link, RhoMode::Estimate, &fg)),
        ),
        (
            ESTIMAND_CS_PA,
            "Cluster-level summaries (weighted)",
            Box::new(|d| {
                cluster_specific_summary_estimate(
                    d,
                    Weighting::ParticipantAverage,
                    measure,
                    policy,
                )
            }),
        ),
        (
            ESTIMAND_CS_PA,
            mixed_label,
            Box::new(|d| match d.outcome_kind() {
                OutcomeKind::Binary => glmm_logit_fit(d, &GlmmOptions::default()),
                OutcomeKind::Continuous => lmm_fit(d),
            }),
        ),
        (
            ESTIMAND_MG_CA,
            "IEEs (weighted)",
            Box::new(|d| iee_estimate_with(d, Weighting::ClusterAverage, measure, &fg)),
        ),
        (
            ESTIMAND_MG_CA,
            "Cluster-level summaries (unweighted)",
            Box::new(|d| marginal_summary_estimate(d, Weighting::ClusterAverage, measure)),
        ),
        (
            ESTIMAND_CS_CA,
            "Cluster-level summaries (unweighted)",
            Box::new(|d| {
                cluster_specific_summary_estimate(d, Weighting::ClusterAverage, measure, policy)
            }),
        ),
    ];

    let mut rows = Vec::with_capacity(cells.len());
    let mut successes = 0;
    for (estimand, estimator, run) in &cells {
        let row = match run(&data) {
            Ok(result) => {
                successes += 1;
                AnalysisRow {
                    estimand: (*estimand).into(),
                    estimator: (*estimator).into(),
                    result: Some(result),
                    error: None,
                }
            }
            Err(e) => AnalysisRow {
                estimand: (*estimand).into(),
                estimator: (*estimator).into(),
                result: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    if successes == 0 {
        return Err(Error::AllCellsFailed);
    }
    Ok(AnalysisGrid {
        schema_version: 1,
        measure,
        n_clusters: data.n_clusters(),
        n_participants: data.n_participants(),
        rows,
    })
}

/// P-value to two significant figures, Table-4 style.
pub fn format_p(p: f64) -> String {
    if !p.is_finite() {
        return "NA".into();
    }
    if p == 0.0 {
        return "0.0".into();
    }
    let magnitude = p.abs().log10().floor() as i32;
    let decimals = (1 - magnitude).max(0) as usize;
    format!("{p:.decimals$}")
}

/// Aligned text rendering of the grid.
pub fn render_text(grid: &AnalysisGrid) -> String {
    let effect_header = match grid.measure {
        Measure::OddsRatio => "Odds ratio (95% CI)",
        Measure::Difference => "Difference (95% CI)",
    };
    let mut table: Vec<[String; 3]> = Vec::new();
    let mut current_block = String::new();
    for row in &grid.rows {
        if row.estimand != current_block {
            current_block = row.estimand.clone();
            table.push([row.estimand.clone(), String::new(), String::new()]);
        }
        let (effect, p) = match &row.result {
            Some(r) => (
                format!("{:.2} ({:.2} to {:.2})", r.estimate, r.ci_low, r.ci_high),
                format_p(r.p_value),
            ),
            None => (
                format!("failed: {}", row.error.as_deref().unwrap_or("unknown")),
                "NA".into(),
            ),
        };
        table.push([format!("  {}", row.estimator), effect, p]);
    }
    let header = ["Estimand / Estimator".to_string(), effect_header.to_string(), "P-value".to_string()];
    let mut widths = [0usize; 3];
    for row in std::iter::once(&header).chain(table.iter()) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let push_row = |cells: &[String; 3], out: &mut String| {
        out.push_str(&format!(
            "{:<w0$}  {:<w1$}  {:<w2$}\n",
            cells[0],
            cells[1],
            cells[2],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        ));
    };
    push_row(&header, &mut out);
    out.push_str(&format!(
        "{}\n",
        "-".repeat(widths.iter().sum::<usize>() + 4)
    ));
    for row in &table {
        push_row(row, &mut out);
    }
    out.push_str(&format!(
        "clusters: {}, participants: {}\n",
        grid.n_clusters, grid.n_participants
    ));
    out
}

pub fn render_json(grid: &AnalysisGrid) -> Result<String> {
    serde_json::to_string_pretty(grid).map_err(|e| Error::InvalidConfig(e.to_string()))
}

pub fn parse_json(text: &str) -> Result<AnalysisGrid> {
    serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
}

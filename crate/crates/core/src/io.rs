//! File formats: the dataset, allocation, sigma, and cost CSV schemas, the
//! study points CSV, and JSON reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written allocation re-ingests to the same bits.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::allocation::{DesignReport, VarianceScale};
use crate::domain::{Allocation, CostSchedule, CovariateDomain, Dataset, SigmaProfile, UnitRecord};
use crate::error::{Error, Result};
use crate::sigma::SigmaEstimate;
use crate::simulation::star::StarRow;
use crate::simulation::{FitResult, McStudyResult};

fn io_err(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(false).from_reader(file))
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::SchemaError(name.to_string()))
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    row: usize,
    column: &str,
) -> Result<T> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<T>().map_err(|_| Error::ParseError {
        row,
        column: column.to_string(),
        message: format!("cannot parse `{raw}`"),
    })
}

fn parse_binary(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<bool> {
    let raw = record.get(idx).unwrap_or("").trim();
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::ParseError {
            row,
            column: column.to_string(),
            message: format!("expected 0 or 1, got `{raw}`"),
        }),
    }
}

/// Order level identifiers numerically when they all parse as numbers,
/// lexicographically otherwise.
fn sort_levels(mut levels: Vec<String>) -> Vec<String> {
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    match numeric {
        Some(values) => {
            let mut pairs: Vec<(f64, String)> = values.into_iter().zip(levels).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("parsed levels are finite"));
            pairs.into_iter().map(|(_, l)| l).collect()
        }
        None => {
            levels.sort();
            levels
        }
    }
}

/// Read a `level,prob` file into an allocation (weights re-normalized).
pub fn read_allocation_csv(path: &Path) -> Result<Allocation> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let level_idx = header_index(&headers, "level")?;
    let prob_idx = header_index(&headers, "prob")?;
    let mut levels = Vec::new();
    let mut probs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = i + 1;
        levels.push(record.get(level_idx).unwrap_or("").trim().to_string());
        probs.push(parse_field::<f64>(&record, prob_idx, row, "prob")?);
    }
    let domain = CovariateDomain::new(levels)?;
    Allocation::from_weights(domain, probs)
}

pub fn allocation_csv_string(allocation: &Allocation) -> String {
    let mut out = String::from("level,prob\n");
    for (m, level) in allocation.domain().levels().iter().enumerate() {
        out.push_str(&format!("{level},{}\n", allocation.prob(m)));
    }
    out
}

pub fn write_allocation_csv(path: &Path, allocation: &Allocation) -> Result<()> {
    fs::write(path, allocation_csv_string(allocation)).map_err(|e| io_err(path, e))
}

/// Read a per-level `level,<value>` column aligned to `domain`. Every level
/// of the domain must appear exactly once; unknown levels are rejected.
fn read_level_column(path: &Path, domain: &CovariateDomain, column: &str) -> Result<Vec<f64>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let level_idx = header_index(&headers, "level")?;
    let value_idx = header_index(&headers, column)?;
    let mut values: Vec<Option<f64>> = vec![None; domain.len()];
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = i + 1;
        let level = record.get(level_idx).unwrap_or("").trim().to_string();
        let m = domain
            .index_of(&level)
            .ok_or_else(|| Error::UnknownLevel(level.clone()))?;
        if values[m].is_some() {
            return Err(Error::DuplicateLevel(level));
        }
        values[m] = Some(parse_field::<f64>(&record, value_idx, row, column)?);
    }
    values
        .into_iter()
        .enumerate()
        .map(|(m, v)| v.ok_or_else(|| Error::MissingLevel(domain.level(m).to_string())))
        .collect()
}

/// Read a `level,sigma` file aligned to an existing domain.
pub fn read_sigma_csv(path: &Path, domain: &CovariateDomain) -> Result<SigmaProfile> {
    let values = read_level_column(path, domain, "sigma")?;
    SigmaProfile::new(domain.clone(), values)
}

/// Read a `level,prob` file aligned to an existing domain; rows may appear
/// in any order but must cover exactly the domain's levels.
pub fn read_allocation_csv_aligned(path: &Path, domain: &CovariateDomain) -> Result<Allocation> {
    let values = read_level_column(path, domain, "prob")?;
    Allocation::from_weights(domain.clone(), values)
}

pub fn sigma_csv_string(sigma: &SigmaProfile) -> String {
    let mut out = String::from("level,sigma\n");
    for (m, level) in sigma.domain().levels().iter().enumerate() {
        out.push_str(&format!("{level},{}\n", sigma.value(m)));
    }
    out
}

pub fn write_sigma_csv(path: &Path, sigma: &SigmaProfile) -> Result<()> {
    fs::write(path, sigma_csv_string(sigma)).map_err(|e| io_err(path, e))
}

/// Read a `level,cost` file plus a budget into a cost schedule.
pub fn read_cost_csv(path: &Path, domain: &CovariateDomain, budget: f64) -> Result<CostSchedule> {
    let costs = read_level_column(path, domain, "cost")?;
    CostSchedule::new(domain.clone(), costs, budget)
}

/// Read the dataset schema `unit_id,s,t,y,x` (or `x1..xk`, combined into
/// product levels joined by `|`). The domain is the set of levels present,
/// ordered numerically when possible.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let unit_idx = header_index(&headers, "unit_id")?;
    let s_idx = header_index(&headers, "s")?;
    let t_idx = header_index(&headers, "t")?;
    let y_idx = header_index(&headers, "y")?;
    let x_cols: Vec<(usize, String)> = if let Ok(x) = header_index(&headers, "x") {
        vec![(x, "x".to_string())]
    } else {
        let mut cols = Vec::new();
        let mut k = 1;
        while let Ok(idx) = header_index(&headers, &format!("x{k}")) {
            cols.push((idx, format!("x{k}")));
            k += 1;
        }
        if cols.is_empty() {
            return Err(Error::SchemaError("x".to_string()));
        }
        cols
    };

    let mut units = Vec::new();
    let mut levels_seen: Vec<String> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = i + 1;
        let unit_id = record.get(unit_idx).unwrap_or("").trim().to_string();
        let trial = parse_binary(&record, s_idx, row, "s")?;
        let treated = parse_binary(&record, t_idx, row, "t")?;
        let y_raw = record.get(y_idx).unwrap_or("").trim();
        let outcome = if y_raw.is_empty() {
            None
        } else {
            Some(parse_field::<f64>(&record, y_idx, row, "y")?)
        };
        let mut parts = Vec::with_capacity(x_cols.len());
        for (idx, name) in &x_cols {
            let v = record.get(*idx).unwrap_or("").trim();
            if v.is_empty() {
                return Err(Error::ParseError {
                    row,
                    column: name.clone(),
                    message: "covariate value is empty".into(),
                });
            }
            parts.push(v.to_string());
        }
        let level = parts.join("|");
        if !levels_seen.contains(&level) {
            levels_seen.push(level.clone());
        }
        units.push(UnitRecord {
            unit_id,
            trial,
            treated,
            level,
            outcome,
        });
    }
    let domain = CovariateDomain::new(sort_levels(levels_seen))?;
    Dataset::new(domain, units)
}

/// Read the semi-synthetic extract schema `treatment,race,urbanicity,score`.
/// Rows with a missing treatment or covariate are excluded; an empty score
/// is a missing outcome.
pub fn read_star_csv(path: &Path) -> Result<Vec<StarRow>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let t_idx = header_index(&headers, "treatment")?;
    let race_idx = header_index(&headers, "race")?;
    let urb_idx = header_index(&headers, "urbanicity")?;
    let score_idx = header_index(&headers, "score")?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = i + 1;
        let t_raw = record.get(t_idx).unwrap_or("").trim();
        let race_raw = record.get(race_idx).unwrap_or("").trim();
        let urb_raw = record.get(urb_idx).unwrap_or("").trim();
        if t_raw.is_empty() || race_raw.is_empty() || urb_raw.is_empty() {
            continue; // missing covariates: row excluded
        }
        let treated = parse_binary(&record, t_idx, row, "treatment")?;
        let race: u8 = parse_field(&record, race_idx, row, "race")?;
        if !(1..=2).contains(&race) {
            return Err(Error::ParseError {
                row,
                column: "race".into(),
                message: format!("expected 1 or 2, got `{race}`; recode before ingestion"),
            });
        }
        let urbanicity: u8 = parse_field(&record, urb_idx, row, "urbanicity")?;
        if !(1..=4).contains(&urbanicity) {
            return Err(Error::ParseError {
                row,
                column: "urbanicity".into(),
                message: format!("expected 1..4, got `{urbanicity}`"),
            });
        }
        let score_raw = record.get(score_idx).unwrap_or("").trim();
        let score = if score_raw.is_empty() {
            None
        } else {
            Some(parse_field::<f64>(&record, score_idx, row, "score")?)
        };
        rows.push(StarRow {
            treated,
            race,
            urbanicity,
            score,
        });
    }
    Ok(rows)
}

/// Write study results as `design_id,deviation,emp_variance,emp_mean` rows.
pub fn write_points_csv(path: &Path, results: &[McStudyResult]) -> Result<()> {
    let mut out = String::from("design_id,deviation,emp_variance,emp_mean\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.design_id, r.deviation, r.emp_variance, r.emp_mean
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read points back for a standalone fit.
pub fn read_points_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let dev_idx = header_index(&headers, "deviation")?;
    let var_idx = header_index(&headers, "emp_variance")?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = i + 1;
        points.push((
            parse_field::<f64>(&record, dev_idx, row, "deviation")?,
            parse_field::<f64>(&record, var_idx, row, "emp_variance")?,
        ));
    }
    Ok(points)
}

pub fn write_fit_json(path: &Path, fit: &FitResult) -> Result<()> {
    let body = serde_json::to_string_pretty(fit).expect("fit serializes");
    fs::write(path, body + "\n").map_err(|e| io_err(path, e))
}

/// JSON rows `{level, sigma, n_treated, n_control}` for an estimated
/// profile, with pooled (level, arm) borrowings flagged when present.
pub fn sigma_estimate_json(estimate: &SigmaEstimate) -> Value {
    let rows: Vec<Value> = estimate
        .cells
        .iter()
        .enumerate()
        .map(|(m, cell)| {
            json!({
                "level": cell.level,
                "sigma": estimate.profile.value(m),
                "n_treated": cell.n_treated,
                "n_control": cell.n_control,
            })
        })
        .collect();
    let pooled: Vec<Value> = estimate
        .pooled
        .iter()
        .map(|(level, arm)| json!({ "level": level, "arm": arm.to_string() }))
        .collect();
    if pooled.is_empty() {
        json!({ "levels": rows })
    } else {
        json!({ "levels": rows, "pooled": pooled })
    }
}

fn allocation_json(allocation: &Allocation) -> Value {
    let entries: Vec<Value> = allocation
        .domain()
        .levels()
        .iter()
        .enumerate()
        .map(|(m, level)| json!({ "level": level, "prob": allocation.prob(m) }))
        .collect();
    Value::Array(entries)
}

/// Full JSON form of ranked design reports.
pub fn design_reports_json(reports: &[DesignReport]) -> Value {
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "design_id": r.design_id,
                "f1": allocation_json(&r.trial_allocation),
                "deviation": r.deviation,
                "variance": r.variance,
                "variance_scale": match r.variance_scale {
                    VarianceScale::Absolute => "absolute",
                    VarianceScale::TrialSizeScaled => "trial_size_scaled",
                },
                "base_term": r.base_term,
                "factor": r.factor,
                "rank": r.rank,
                "violation": r.violation,
            })
        })
        .collect();
    json!({ "reports": rows })
}

/// CSV form of ranked design reports: `design_id,deviation,variance,base_term,rank`.
/// Flagged candidates leave the unavailable fields empty.
pub fn design_reports_csv(reports: &[DesignReport]) -> String {
    let mut out = String::from("design_id,deviation,variance,base_term,rank\n");
    for r in reports {
        let deviation = r.deviation.map(|v| v.to_string()).unwrap_or_default();
        let variance = r.variance.map(|v| v.to_string()).unwrap_or_default();
        let rank = r.rank.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.design_id, deviation, variance, r.base_term, rank
        ));
    }
    out
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, body + "\n").map_err(|e| io_err(path, e))
}

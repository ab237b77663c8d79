//! CSV ingestion: counts panels and covariate designs.
//!
//! Both readers are strict. Structural problems — missing cells, duplicate
//! rows, inconsistent populations, unknown areas, malformed numbers — are
//! errors that name the offending file line; nothing structural is ever
//! skipped. The only rows that may be ignored are covariate rows whose
//! `name` is not bound by the config, and those are counted and reported
//! to the caller rather than dropped silently.

use std::collections::HashMap;
use std::path::Path;

use crate::cli::config::{CovariateBinding, Standardize};
use crate::model::{CountPanel, DesignMatrices};
use crate::{Error, Result};

/// A parsed counts file: the dense panel plus the area ids in index order
/// (the order of first appearance in the file).
#[derive(Debug, Clone)]
pub struct IngestedCounts {
    pub panel: CountPanel,
    pub area_ids: Vec<String>,
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path.display().to_string(), e))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        Error::Validation(format!(
            "{}: missing column `{name}` (found: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'r str> {
    record.get(idx).ok_or_else(|| {
        Error::Validation(format!("line {line}: row is missing the `{name}` field"))
    })
}

/// Read a counts panel from long-format CSV with columns `area_id`,
/// `week_index`, `count`, `population`. Week indices `0..T-1` are the
/// observed panel; negative indices `-1, -2, ...` are pre-period history
/// (`-1` the most recent week before the panel). The panel must be
/// complete: every area needs every observed week and the same pre-period
/// depth.
pub fn ingest_counts(path: &Path) -> Result<IngestedCounts> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?
        .clone();
    let c_area = column(&headers, "area_id", path)?;
    let c_week = column(&headers, "week_index", path)?;
    let c_count = column(&headers, "count", path)?;
    let c_pop = column(&headers, "population", path)?;

    struct Row {
        area: usize,
        week: i64,
        count: u64,
        line: u64,
    }
    let mut area_ids: Vec<String> = Vec::new();
    let mut area_index: HashMap<String, usize> = HashMap::new();
    let mut populations: Vec<(f64, u64)> = Vec::new();
    let mut rows: Vec<Row> = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        let line = record.position().map_or(0, |p| p.line());
        let area_id = field(&record, c_area, "area_id", line)?;
        if area_id.is_empty() {
            return Err(Error::Validation(format!("line {line}: empty area_id")));
        }
        let week: i64 = field(&record, c_week, "week_index", line)?
            .parse()
            .map_err(|_| {
                Error::Validation(format!(
                    "line {line}: week_index must be an integer, got `{}`",
                    record.get(c_week).unwrap_or("")
                ))
            })?;
        let count: i64 = field(&record, c_count, "count", line)?
            .parse()
            .map_err(|_| {
                Error::Validation(format!(
                    "line {line}: count must be an integer, got `{}`",
                    record.get(c_count).unwrap_or("")
                ))
            })?;
        if count < 0 {
            return Err(Error::Validation(format!(
                "line {line}: negative count {count} for area `{area_id}`, week {week}"
            )));
        }
        let pop: f64 = field(&record, c_pop, "population", line)?
            .parse()
            .map_err(|_| {
                Error::Validation(format!(
                    "line {line}: population must be a number, got `{}`",
                    record.get(c_pop).unwrap_or("")
                ))
            })?;
        if !(pop > 0.0 && pop.is_finite()) {
            return Err(Error::Validation(format!(
                "line {line}: population of area `{area_id}` must be positive and finite, got {pop}"
            )));
        }

        let area = match area_index.get(area_id) {
            Some(&i) => {
                let (prev, first) = populations[i];
                if prev != pop {
                    return Err(Error::Validation(format!(
                        "line {line}: population of area `{area_id}` is {pop}, \
                         but line {first} said {prev}"
                    )));
                }
                i
            }
            None => {
                let i = area_ids.len();
                area_ids.push(area_id.to_string());
                area_index.insert(area_id.to_string(), i);
                populations.push((pop, line));
                i
            }
        };
        rows.push(Row {
            area,
            week,
            count: count as u64,
            line,
        });
    }

    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let max_week = rows.iter().map(|r| r.week).max().unwrap();
    if max_week < 0 {
        return Err(Error::Validation(format!(
            "{}: no observed weeks (every week_index is negative)",
            path.display()
        )));
    }
    let t_len = (max_week + 1) as usize;
    let min_week = rows.iter().map(|r| r.week).min().unwrap();
    let pre_depth = if min_week < 0 { (-min_week) as usize } else { 0 };
    let l = area_ids.len();

    let mut counts: Vec<Option<(u64, u64)>> = vec![None; l * t_len];
    let mut pre: Vec<Option<(u64, u64)>> = vec![None; l * pre_depth];
    for r in &rows {
        let slot = if r.week >= 0 {
            &mut counts[r.week as usize * l + r.area]
        } else {
            &mut pre[r.area * pre_depth + (-r.week - 1) as usize]
        };
        if let Some((_, first)) = *slot {
            return Err(Error::Validation(format!(
                "line {}: duplicate row for area `{}`, week {} (first on line {first})",
                r.line, area_ids[r.area], r.week
            )));
        }
        *slot = Some((r.count, r.line));
    }

    let mut first_missing: Option<(usize, i64)> = None;
    let mut n_missing = 0usize;
    for t in 0..t_len {
        for a in 0..l {
            if counts[t * l + a].is_none() {
                n_missing += 1;
                first_missing.get_or_insert((a, t as i64));
            }
        }
    }
    for a in 0..l {
        for j in 0..pre_depth {
            if pre[a * pre_depth + j].is_none() {
                n_missing += 1;
                first_missing.get_or_insert((a, -(j as i64) - 1));
            }
        }
    }
    if let Some((a, w)) = first_missing {
        let more = if n_missing > 1 {
            format!(" ({n_missing} cells missing in total)")
        } else {
            String::new()
        };
        return Err(Error::Validation(format!(
            "{}: no row for area `{}`, week {w}{more}",
            path.display(),
            area_ids[a]
        )));
    }

    let panel = CountPanel::new(
        l,
        t_len,
        counts.into_iter().map(|c| c.unwrap().0).collect(),
        pre.into_iter().map(|c| c.unwrap().0).collect(),
        populations.iter().map(|&(p, _)| p).collect(),
        None,
    )?;
    Ok(IngestedCounts { panel, area_ids })
}

/// A parsed covariates file assembled into design matrices, plus a tally
/// of data rows that were ignored because their name is not bound.
#[derive(Debug, Clone)]
pub struct IngestedCovariates {
    pub designs: DesignMatrices,
    pub ignored_rows: usize,
    pub ignored_names: Vec<String>,
}

struct NameStore {
    /// Per-cell values, time-major, with the defining line.
    per_cell: Vec<Option<(f64, u64)>>,
    /// Time-constant value per area, with the defining line.
    constant: Vec<Option<(f64, u64)>>,
    seen: bool,
}

/// Read covariates from long-format CSV with columns `area_id`,
/// `week_index`, `name`, `value` and assemble the bound columns into
/// design matrices (intercepts prepended). An empty `week_index` marks a
/// time-constant value for that area. Rows with unbound names are counted,
/// not dropped silently; every bound covariate must cover every cell.
pub fn ingest_covariates(
    path: &Path,
    growth: &[CovariateBinding],
    baseline: &[CovariateBinding],
    area_ids: &[String],
    n_times: usize,
) -> Result<IngestedCovariates> {
    let l = area_ids.len();
    let n_cells = l * n_times;
    let area_index: HashMap<&str, usize> = area_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut store: HashMap<String, NameStore> = HashMap::new();
    for binding in growth.iter().chain(baseline) {
        store.entry(binding.name.clone()).or_insert(NameStore {
            per_cell: vec![None; n_cells],
            constant: vec![None; l],
            seen: false,
        });
    }

    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?
        .clone();
    let c_area = column(&headers, "area_id", path)?;
    let c_week = column(&headers, "week_index", path)?;
    let c_name = column(&headers, "name", path)?;
    let c_value = column(&headers, "value", path)?;

    let mut ignored_rows = 0usize;
    let mut ignored_names = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        let line = record.position().map_or(0, |p| p.line());
        let name = field(&record, c_name, "name", line)?;
        let Some(slot) = store.get_mut(name) else {
            ignored_rows += 1;
            ignored_names.insert(name.to_string());
            continue;
        };
        let area_id = field(&record, c_area, "area_id", line)?;
        let Some(&area) = area_index.get(area_id) else {
            return Err(Error::Validation(format!(
                "line {line}: unknown area `{area_id}` (not present in the counts file)"
            )));
        };
        let value: f64 = field(&record, c_value, "value", line)?
            .parse()
            .map_err(|_| {
                Error::Validation(format!(
                    "line {line}: value must be a number, got `{}`",
                    record.get(c_value).unwrap_or("")
                ))
            })?;
        if !value.is_finite() {
            return Err(Error::Validation(format!(
                "line {line}: non-finite value for covariate `{name}`"
            )));
        }
        let week_raw = field(&record, c_week, "week_index", line)?;
        slot.seen = true;
        if week_raw.is_empty() {
            if let Some((_, first)) = slot.constant[area] {
                return Err(Error::Validation(format!(
                    "line {line}: duplicate constant for covariate `{name}`, \
                     area `{area_id}` (first on line {first})"
                )));
            }
            slot.constant[area] = Some((value, line));
        } else {
            let week: i64 = week_raw.parse().map_err(|_| {
                Error::Validation(format!(
                    "line {line}: week_index must be an integer or empty, got `{week_raw}`"
                ))
            })?;
            if week < 0 || week >= n_times as i64 {
                return Err(Error::Validation(format!(
                    "line {line}: week_index {week} outside the observed range 0..{} \
                     (pre-period covariates are not used)",
                    n_times - 1
                )));
            }
            let cell = week as usize * l + area;
            if let Some((_, first)) = slot.per_cell[cell] {
                return Err(Error::Validation(format!(
                    "line {line}: duplicate value for covariate `{name}`, \
                     area `{area_id}`, week {week} (first on line {first})"
                )));
            }
            slot.per_cell[cell] = Some((value, line));
        }
    }
    if ignored_rows > 0 {
        log::warn!(
            "{}: ignored {ignored_rows} rows with unbound covariate names: {}",
            path.display(),
            ignored_names.iter().cloned().collect::<Vec<_>>().join(", ")
        );
    }

    // Assemble one raw column per name, then standardize per binding.
    let assemble = |name: &str| -> Result<Vec<f64>> {
        let s = &store[name];
        if !s.seen {
            return Err(Error::Validation(format!(
                "covariate `{name}` is bound in the config but never appears in {}",
                path.display()
            )));
        }
        let mut col = vec![0.0; n_cells];
        for a in 0..l {
            let has_weekly = (0..n_times).any(|t| s.per_cell[t * l + a].is_some());
            if has_weekly && s.constant[a].is_some() {
                return Err(Error::Validation(format!(
                    "covariate `{name}`: area `{}` mixes a constant row with per-week rows",
                    area_ids[a]
                )));
            }
            for t in 0..n_times {
                let v = s.per_cell[t * l + a].or(s.constant[a]);
                let Some((v, _)) = v else {
                    return Err(Error::Validation(format!(
                        "covariate `{name}` is missing for area `{}`, week {t}",
                        area_ids[a]
                    )));
                };
                col[t * l + a] = v;
            }
        }
        Ok(col)
    };

    let build = |bindings: &[CovariateBinding]| -> Result<Vec<f64>> {
        let n_cols = 1 + bindings.len();
        let mut m = vec![0.0; n_cells * n_cols];
        for cell in 0..n_cells {
            m[cell * n_cols] = 1.0;
        }
        for (j, b) in bindings.iter().enumerate() {
            let mut col = assemble(&b.name)?;
            match b.standardize {
                Standardize::None => {}
                Standardize::Global => {
                    crate::model::standardize_values(&mut col, l, n_times, false, &b.name)?
                }
                Standardize::PerArea => {
                    crate::model::standardize_values(&mut col, l, n_times, true, &b.name)?
                }
            }
            for cell in 0..n_cells {
                m[cell * n_cols + 1 + j] = col[cell];
            }
        }
        Ok(m)
    };

    let x = build(growth)?;
    let v = build(baseline)?;
    let designs = DesignMatrices::new(n_cells, 1 + growth.len(), x, 1 + baseline.len(), v)?;
    Ok(IngestedCovariates {
        designs,
        ignored_rows,
        ignored_names: ignored_names.into_iter().collect(),
    })
}

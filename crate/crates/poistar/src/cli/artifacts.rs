//! On-disk fit artifacts: per-chain draw CSVs, the parameter summary, score
//! and diagnostic tables, the area id map, and the run manifest.
//!
//! Floats are written with Rust's shortest-round-trip formatting, so
//! re-reading an artifact reproduces the in-memory values bit for bit
//! (`predict` and `compare` rely on this; a unit test below pins it).

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::diagnostics::ScalarSummary;
use crate::model::CountPanel;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const AREAS_FILE: &str = "areas.csv";

/// 64-bit FNV-1a over the panel's dimensions, counts, pre-period counts,
/// and population bit patterns, hex encoded. `predict` and `compare`
/// repeat the hash to refuse data files that differ from the fit's.
pub fn panel_fingerprint(panel: &CountPanel) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&(panel.n_areas() as u64).to_le_bytes());
    eat(&(panel.n_times() as u64).to_le_bytes());
    eat(&(panel.pre_depth() as u64).to_le_bytes());
    for &c in panel.counts() {
        eat(&c.to_le_bytes());
    }
    for a in 0..panel.n_areas() {
        for j in 0..panel.pre_depth() {
            eat(&panel.pre_count(a, j).to_le_bytes());
        }
    }
    for &p in panel.population() {
        eat(&p.to_bits().to_le_bytes());
    }
    format!("{h:016x}")
}

pub(super) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))
}

pub(super) fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Shortest representation that parses back to the identical f64.
pub(super) fn fmt(v: f64) -> String {
    format!("{v}")
}

fn draws_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("draws_{}.csv", chain + 1))
}

/// Write one CSV per chain (`draws_1.csv`, ...) with an `lp__` column
/// followed by the constrained parameter columns in layout order.
pub fn write_draws(
    dir: &Path,
    names: &[String],
    constrained: &[Vec<Vec<f64>>],
    logp: &[&[f64]],
) -> Result<()> {
    for (chain, rows) in constrained.iter().enumerate() {
        let path = draws_path(dir, chain);
        let mut w = csv_writer(&path)?;
        let mut header = vec!["lp__".to_string()];
        header.extend_from_slice(names);
        w.write_record(&header)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
        for (i, row) in rows.iter().enumerate() {
            let mut rec = Vec::with_capacity(1 + row.len());
            rec.push(fmt(logp[chain][i]));
            rec.extend(row.iter().map(|&v| fmt(v)));
            w.write_record(&rec)
                .map_err(|e| Error::csv(path.display().to_string(), e))?;
        }
        finish(w, &path)?;
    }
    Ok(())
}

/// Draw CSVs read back from a fit directory.
pub struct StoredDraws {
    pub names: Vec<String>,
    /// chains x draws x parameter, constrained space.
    pub draws: Vec<Vec<Vec<f64>>>,
    /// chains x draws log-posterior (the `lp__` column).
    pub logp: Vec<Vec<f64>>,
}

/// Read `draws_1.csv .. draws_{n_chains}.csv` back into memory.
pub fn read_draws(dir: &Path, n_chains: usize) -> Result<StoredDraws> {
    let mut names: Vec<String> = Vec::new();
    let mut draws = Vec::with_capacity(n_chains);
    let mut logp = Vec::with_capacity(n_chains);
    for chain in 0..n_chains {
        let path = draws_path(dir, chain);
        let mut reader = csv::ReaderBuilder::new()
            .from_path(&path)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
        let header = reader
            .headers()
            .map_err(|e| Error::csv(path.display().to_string(), e))?
            .clone();
        if header.get(0) != Some("lp__") {
            return Err(Error::Validation(format!(
                "{}: first column must be lp__",
                path.display()
            )));
        }
        let chain_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if chain == 0 {
            names = chain_names;
        } else if names != chain_names {
            return Err(Error::Validation(format!(
                "{}: chain files disagree on parameter columns",
                path.display()
            )));
        }
        let mut chain_draws = Vec::new();
        let mut chain_logp = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
            let line = record.position().map_or(0, |p| p.line());
            let mut row = Vec::with_capacity(names.len());
            for (k, cell) in record.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Validation(format!(
                        "{} line {line}: `{cell}` is not a number",
                        path.display()
                    ))
                })?;
                if k == 0 {
                    chain_logp.push(v);
                } else {
                    row.push(v);
                }
            }
            if row.len() != names.len() {
                return Err(Error::Validation(format!(
                    "{} line {line}: expected {} fields, got {}",
                    path.display(),
                    1 + names.len(),
                    1 + row.len()
                )));
            }
            chain_draws.push(row);
        }
        draws.push(chain_draws);
        logp.push(chain_logp);
    }
    Ok(StoredDraws { names, draws, logp })
}

/// Write the parameter summary table.
pub fn write_summary(path: &Path, names: &[String], summaries: &[ScalarSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["parameter", "mean", "sd", "q2.5", "q97.5", "rhat", "ess_bulk"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for (name, s) in names.iter().zip(summaries) {
        w.write_record([
            name.clone(),
            fmt(s.mean),
            fmt(s.sd),
            fmt(s.quantiles[0]),
            fmt(s.quantiles[1]),
            fmt(s.rhat),
            fmt(s.ess_bulk),
        ])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    finish(w, path)
}

/// Write a two-column `metric,value` table.
pub fn write_kv_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["metric", "value"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for (k, v) in rows {
        w.write_record([k.clone(), fmt(*v)])
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    finish(w, path)
}

/// Persist the area id ↔ index map alongside each area's population.
pub fn write_areas(path: &Path, area_ids: &[String], population: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "area_id", "population"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for (i, (id, &pop)) in area_ids.iter().zip(population).enumerate() {
        w.write_record([i.to_string(), id.clone(), fmt(pop)])
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    finish(w, path)
}

pub fn write_manifest(path: &Path, manifest: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(dir: &Path) -> Result<Value> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

/// Fetch a required string field from a manifest, with a path-like key for
/// error messages (e.g. `data.panel_hash`).
pub fn manifest_str<'v>(manifest: &'v Value, keys: &[&str]) -> Result<&'v str> {
    manifest_field(manifest, keys)?.as_str().ok_or_else(|| {
        Error::Validation(format!("manifest field `{}` is not a string", keys.join(".")))
    })
}

/// Fetch a required u64 field from a manifest.
pub fn manifest_u64(manifest: &Value, keys: &[&str]) -> Result<u64> {
    manifest_field(manifest, keys)?.as_u64().ok_or_else(|| {
        Error::Validation(format!(
            "manifest field `{}` is not a non-negative integer",
            keys.join(".")
        ))
    })
}

/// Fetch a required f64 field from a manifest.
pub fn manifest_f64(manifest: &Value, keys: &[&str]) -> Result<f64> {
    manifest_field(manifest, keys)?.as_f64().ok_or_else(|| {
        Error::Validation(format!("manifest field `{}` is not a number", keys.join(".")))
    })
}

pub fn manifest_field<'v>(manifest: &'v Value, keys: &[&str]) -> Result<&'v Value> {
    let mut cur = manifest;
    for key in keys {
        cur = cur.get(key).ok_or_else(|| {
            Error::Validation(format!("manifest is missing the `{}` field", keys.join(".")))
        })?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_round_trip_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["beta[0]".to_string(), "growth_innov[1,2]".to_string()];
        let constrained = vec![
            vec![vec![1e-17, -0.0], vec![2.0 / 3.0, f64::MAX]],
            vec![vec![5e-324, 1.0 + f64::EPSILON], vec![-1e300, 0.1]],
        ];
        let logp = vec![vec![-12.5, -11.875], vec![-13.0625, -10.0]];
        let logp_refs: Vec<&[f64]> = logp.iter().map(|v| v.as_slice()).collect();
        write_draws(dir.path(), &names, &constrained, &logp_refs).unwrap();

        let got = read_draws(dir.path(), 2).unwrap();
        assert_eq!(got.names, names);
        assert_eq!(got.logp, logp);
        assert_eq!(got.draws.len(), 2);
        for (chain, rows) in constrained.iter().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let r = got.draws[chain][i][j];
                    assert_eq!(v.to_bits(), r.to_bits(), "chain {chain} draw {i} col {j}");
                }
            }
        }
    }

    #[test]
    fn fingerprint_tracks_content_not_identity() {
        let base = CountPanel::new(
            2,
            2,
            vec![1, 2, 3, 4],
            vec![9, 8],
            vec![1000.0, 2000.0],
            None,
        )
        .unwrap();
        let same = CountPanel::new(
            2,
            2,
            vec![1, 2, 3, 4],
            vec![9, 8],
            vec![1000.0, 2000.0],
            None,
        )
        .unwrap();
        let other = CountPanel::new(
            2,
            2,
            vec![1, 2, 3, 5],
            vec![9, 8],
            vec![1000.0, 2000.0],
            None,
        )
        .unwrap();
        let h = panel_fingerprint(&base);
        assert_eq!(h.len(), 16);
        assert_eq!(h, panel_fingerprint(&same));
        assert_ne!(h, panel_fingerprint(&other));
    }

    #[test]
    fn manifest_accessors_report_missing_paths() {
        let v: Value = serde_json::json!({"data": {"panel_hash": "abc", "n_areas": 4}});
        assert_eq!(manifest_str(&v, &["data", "panel_hash"]).unwrap(), "abc");
        assert_eq!(manifest_u64(&v, &["data", "n_areas"]).unwrap(), 4);
        let err = manifest_str(&v, &["data", "missing"]).unwrap_err().to_string();
        assert!(err.contains("data.missing"), "{err}");
        let err = manifest_u64(&v, &["data", "panel_hash"]).unwrap_err().to_string();
        assert!(err.contains("not a non-negative integer"), "{err}");
    }
}

//! Merges `metrics.csv` and `sparsification.csv` of several run directories
//! into one table. The output depends only on those files.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use depthuq::eval::SparsificationMetric;
use depthuq::trainer::{AREAS_FILE, METRICS_FILE};

fn read_table(path: &Path) -> Result<Vec<HashMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
            Ok(headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect())
        })
        .collect()
}

fn number(row: &HashMap<String, String>, key: &str, path: &Path) -> Result<f64> {
    let v = row.get(key).with_context(|| format!("{}: no `{key}` column", path.display()))?;
    v.parse().with_context(|| format!("{}: `{key}` is not a number: {v}", path.display()))
}

pub fn header() -> String {
    let mut cols = vec!["run".to_string(), "abs_rel".into(), "rmse".into(), "delta1".into()];
    for m in SparsificationMetric::ALL {
        cols.push(format!("ause_{m}"));
        cols.push(format!("aurg_{m}"));
    }
    cols.join(",")
}

pub fn row(dir: &Path) -> Result<String> {
    let mpath = dir.join(METRICS_FILE);
    let metrics = read_table(&mpath)?;
    let [m] = metrics.as_slice() else {
        bail!("{}: expected one data row", mpath.display());
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut cells = vec![name];
    for k in ["abs_rel", "rmse", "delta1"] {
        cells.push(number(m, k, &mpath)?.to_string());
    }
    let apath = dir.join(AREAS_FILE);
    let areas = read_table(&apath)?;
    for metric in SparsificationMetric::ALL {
        let r = areas
            .iter()
            .find(|r| r.get("metric").map(String::as_str) == Some(metric.name()))
            .with_context(|| format!("{}: no row for {metric}", apath.display()))?;
        cells.push(number(r, "ause", &apath)?.to_string());
        cells.push(number(r, "aurg", &apath)?.to_string());
    }
    Ok(cells.join(","))
}

pub fn run(inputs: &[std::path::PathBuf], out: Option<&Path>) -> Result<()> {
    let mut text = header();
    text.push('\n');
    for dir in inputs {
        text.push_str(&row(dir)?);
        text.push('\n');
    }
    match out {
        Some(p) => depthuq::io::write_bytes(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

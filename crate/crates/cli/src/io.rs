//! Wide curve CSVs, prediction CSVs and JSON files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use fme_core::{CurveSample, TimeGrid};
use serde::Serialize;

/// Curves read from or written to a wide CSV: `id, [y], [z], t_1..t_m`,
/// with the grid times as the value-column headers. Leading `# key=value`
/// lines carry metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub ids: Vec<String>,
    pub curves: Vec<CurveSample>,
    pub meta: Vec<(String, String)>,
}

impl CurveTable {
    pub fn grid(&self) -> Option<&Arc<TimeGrid>> {
        self.curves.first().map(|c| &c.grid)
    }

    pub fn has_responses(&self) -> bool {
        !self.curves.is_empty() && self.curves.iter().all(|c| c.response.is_some())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.curves.iter().map(|c| c.label).collect()
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn split_meta(text: &str) -> (Vec<(String, String)>, &str) {
    let mut meta = Vec::new();
    let mut rest = text;
    while let Some(line) = rest.lines().next() {
        let Some(body) = line.strip_prefix('#') else {
            break;
        };
        for item in body.split(',') {
            if let Some((k, v)) = item.split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        rest = rest[line.len()..].trim_start_matches(['\r', '\n']);
    }
    (meta, rest)
}

pub fn parse_curves(text: &str) -> Result<CurveTable> {
    let (meta, body) = split_meta(text);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let header = rdr.headers().context("reading the header row")?.clone();
    if header.get(0) != Some("id") {
        bail!("header column 1 must be `id`, found `{}`", header.get(0).unwrap_or(""));
    }
    let mut col = 1;
    let y_col = (header.get(col) == Some("y")).then(|| {
        col += 1;
        col - 1
    });
    let z_col = (header.get(col) == Some("z")).then(|| {
        col += 1;
        col - 1
    });
    let first_value = col;
    let times: Vec<f64> = header
        .iter()
        .enumerate()
        .skip(first_value)
        .map(|(j, h)| {
            h.parse::<f64>()
                .map_err(|_| anyhow!("header column {}: `{h}` is not a grid time", j + 1))
        })
        .collect::<Result<_>>()?;
    if times.is_empty() {
        bail!("the header has no grid-time columns");
    }
    let grid = Arc::new(TimeGrid::new(times).context("grid times in the header")?);
    let mut ids = Vec::new();
    let mut curves = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.with_context(|| format!("row {row}"))?;
        if rec.len() != header.len() {
            bail!("row {row}: {} fields, header has {}", rec.len(), header.len());
        }
        let num = |j: usize| -> Result<f64> {
            let cell = &rec[j];
            let v: f64 = cell
                .parse()
                .map_err(|_| anyhow!("row {row}, column {} (`{}`): `{cell}` is not a number", j + 1, &header[j]))?;
            if !v.is_finite() {
                bail!("row {row}, column {}: non-finite value", j + 1);
            }
            Ok(v)
        };
        let values: Vec<f64> = (first_value..rec.len()).map(num).collect::<Result<_>>()?;
        let mut c = CurveSample::new(grid.clone(), values)?;
        if let Some(j) = y_col {
            if !rec[j].is_empty() {
                c = c.with_response(num(j)?);
            }
        }
        if let Some(j) = z_col {
            if !rec[j].is_empty() {
                let z: usize = rec[j]
                    .parse()
                    .ok()
                    .filter(|z| *z >= 1)
                    .ok_or_else(|| anyhow!("row {row}, column {}: label `{}` is not a positive integer", j + 1, &rec[j]))?;
                c = c.with_label(z);
            }
        }
        ids.push(rec[0].to_string());
        curves.push(c);
    }
    if curves.is_empty() {
        bail!("no data rows");
    }
    Ok(CurveTable { ids, curves, meta })
}

pub fn read_curves(path: &Path) -> Result<CurveTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_curves(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn format_curves(t: &CurveTable) -> Result<String> {
    let grid = t.grid().ok_or_else(|| anyhow!("no curves to write"))?;
    if t.curves.iter().any(|c| c.grid != *grid) {
        bail!("curves on different grids must go to separate files");
    }
    let with_y = t.curves.iter().any(|c| c.response.is_some());
    let with_z = t.curves.iter().any(|c| c.label.is_some());
    let mut out = String::new();
    for (k, v) in &t.meta {
        out.push_str(&format!("# {k}={v}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    if with_y {
        header.push("y".into());
    }
    if with_z {
        header.push("z".into());
    }
    header.extend(grid.points().iter().map(f64::to_string));
    w.write_record(&header)?;
    for (id, c) in t.ids.iter().zip(&t.curves) {
        let mut rec = vec![id.clone()];
        if with_y {
            rec.push(c.response.map(|v| v.to_string()).unwrap_or_default());
        }
        if with_z {
            rec.push(c.label.map(|v| v.to_string()).unwrap_or_default());
        }
        rec.extend(c.values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    out.push_str(std::str::from_utf8(&w.into_inner()?)?);
    Ok(out)
}

pub fn write_curves(path: &Path, t: &CurveTable) -> Result<()> {
    write_text(path, &format_curves(t)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Per-row predictions: `id, yhat, tau_1..tau_K, label`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub yhat: Vec<f64>,
    pub tau: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn format_predictions(p: &Predictions) -> Result<String> {
    let k = p.tau.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "yhat".to_string()];
    header.extend((1..=k).map(|j| format!("tau_{j}")));
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..p.ids.len() {
        let mut rec = vec![p.ids[i].clone(), p.yhat[i].to_string()];
        rec.extend(p.tau[i].iter().map(f64::to_string));
        rec.push(p.labels[i].to_string());
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let (Some(id), Some(yhat), Some(label)) = (find("id"), find("yhat"), find("label")) else {
        bail!("{}: prediction files need `id`, `yhat` and `label` columns", path.display());
    };
    let taus: Vec<usize> = (0..header.len()).filter(|&j| header[j].starts_with("tau_")).collect();
    let mut p = Predictions {
        ids: Vec::new(),
        yhat: Vec::new(),
        tau: Vec::new(),
        labels: Vec::new(),
    };
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.with_context(|| format!("{} row {row}", path.display()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| anyhow!("{} row {row}, column {}: `{}` is not a number", path.display(), j + 1, &rec[j]))
        };
        p.ids.push(rec[id].to_string());
        p.yhat.push(num(yhat)?);
        p.tau.push(taus.iter().map(|&j| num(j)).collect::<Result<_>>()?);
        p.labels.push(
            rec[label]
                .parse()
                .map_err(|_| anyhow!("{} row {row}: bad label `{}`", path.display(), &rec[label]))?,
        );
    }
    Ok(p)
}
